// SPDX-License-Identifier: Apache-2.0
#include "peftref/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unistd.h>

#include "peftref/errors.hpp"

namespace peftref {

namespace {

constexpr std::uint8_t kMagic[4] = {'P', 'F', 'R', '1'};

class Writer {
public:
    explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

    void u8(std::uint8_t v) { out_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        if (s.size() > 0xffffffffu) throw ContractError("string too long to serialize");
        u32(static_cast<std::uint32_t>(s.size()));
        out_.insert(out_.end(), s.begin(), s.end());
    }

private:
    std::vector<std::uint8_t>& out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(in_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(in_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const auto n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return in_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) throw IntegrityError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

std::uint32_t crc(std::span<const std::uint8_t> bytes) {
    uLong c = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        c = crc32(c, bytes.data() + off, n);
        off += n;
    }
    return static_cast<std::uint32_t>(c);
}

}  // namespace

std::uint64_t config_fingerprint(const BaseConfig& config) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : config.resolved().canonical()) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

std::size_t checkpoint_size(const Checkpoint& c) {
    std::size_t n = 4;
    n += 4 + c.technique.size() + 4 + c.descriptor_record.size() + 4 + c.config_text.size() + 8 + 4 +
         c.hyperparams_text.size() + 4;
    for (const auto& t : c.tensors) n += 4 + t.name.size() + 4 + 8 * t.tensor.rank() + 8 * t.tensor.numel();
    return n + 4;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
    std::vector<std::uint8_t> out;
    out.reserve(checkpoint_size(c));
    Writer w(out);
    for (auto b : kMagic) w.u8(b);
    w.str(c.technique);
    w.str(c.descriptor_record);
    w.str(c.config_text);
    w.u64(c.fingerprint);
    w.str(c.hyperparams_text);
    w.u32(static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& t : c.tensors) {
        w.str(t.name);
        w.u32(static_cast<std::uint32_t>(t.tensor.rank()));
        for (auto e : t.tensor.shape()) w.u64(e);
        for (double v : t.tensor.data()) w.f64(v);
    }
    w.u32(crc(out));
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw IntegrityError("not a PFR1 checkpoint (bad magic)");
    const auto body = bytes.first(bytes.size() - 4);
    Reader trailer(bytes.last(4));
    const std::uint32_t stored = trailer.u32();
    const std::uint32_t actual = crc(body);
    if (stored != actual) throw IntegrityError("checkpoint checksum mismatch");

    Reader r(body.subspan(4));
    Checkpoint c;
    c.technique = r.str();
    c.descriptor_record = r.str();
    c.config_text = r.str();
    c.fingerprint = r.u64();
    c.hyperparams_text = r.str();
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = r.str();
        const auto rank = r.u32();
        Shape shape(rank);
        std::size_t numel = 1;
        for (auto& e : shape) {
            e = r.u64();
            if (e != 0 && numel > r.remaining() / e) throw IntegrityError("tensor '" + t.name + "' extents exceed file size");
            numel *= e;
        }
        if (numel > r.remaining() / 8) throw IntegrityError("tensor '" + t.name + "' truncated");
        std::vector<double> data(numel);
        for (auto& v : data) v = r.f64();
        t.tensor = Tensor::from_data(std::move(shape), std::move(data));
        c.tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0) throw IntegrityError("trailing bytes after tensor payload");
    return c;
}

std::size_t write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(ckpt);
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::error_code ignore;
            std::filesystem::remove(tmp, ignore);
            throw IoError("write failed: " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot move checkpoint into place at " + path.string());
    }
    return bytes.size();
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path.string());
    return decode_checkpoint(bytes);
}

Checkpoint base_checkpoint(const BaseModel& base) {
    Checkpoint c;
    c.technique = kBaseTechnique;
    c.config_text = base.config().canonical();
    c.fingerprint = config_fingerprint(base.config());
    c.tensors = base.parameters();
    return c;
}

Checkpoint peft_checkpoint(const PeftModule& module) {
    Checkpoint c;
    c.technique = technique_label(module.technique());
    c.descriptor_record = module.descriptor().to_record();
    c.config_text = module.base_config().canonical();
    c.fingerprint = config_fingerprint(module.base_config());
    c.hyperparams_text = module.hyperparams().to_text();
    c.tensors = module.trainable_tensors();
    return c;
}

std::size_t save_base(const BaseModel& base, const std::filesystem::path& path) {
    return write_checkpoint(base_checkpoint(base), path);
}

BaseModel load_base(const std::filesystem::path& path) {
    Checkpoint c = read_checkpoint(path);
    if (c.technique != kBaseTechnique)
        throw ContractError(path.string() + " holds a " + c.technique + " checkpoint, not a base model");
    BaseConfig config = BaseConfig::parse_canonical(c.config_text);
    if (config_fingerprint(config) != c.fingerprint)
        throw IntegrityError("base checkpoint fingerprint does not match its config text");
    return BaseModel::from_parameters(config, c.tensors);
}

std::size_t save_peft(const PeftModule& module, const std::filesystem::path& path) {
    return write_checkpoint(peft_checkpoint(module), path);
}

std::unique_ptr<PeftModule> module_from_checkpoint(const Checkpoint& c, const BaseConfig& config) {
    if (c.technique == kBaseTechnique) throw ContractError("checkpoint holds a base model, not a PEFT module");
    const Technique t = parse_technique(c.technique);
    const BaseConfig target = config.resolved();
    if (c.fingerprint != config_fingerprint(target))
        throw CompatibilityError("checkpoint was built for [" + c.config_text + "] but the base is [" +
                                 target.canonical() + "]");
    auto module = build_module(t, PeftHyperparams::from_text(c.hyperparams_text), target);
    if (module->descriptor().to_record() != c.descriptor_record)
        throw ConfigError("checkpoint descriptor does not match the rebuilt " + c.technique + " module");
    module->load_tensors(c.tensors);
    return module;
}

std::unique_ptr<PeftModule> load_peft(const std::filesystem::path& path, const BaseConfig& config) {
    return module_from_checkpoint(read_checkpoint(path), config);
}

ComposedModel load_and_attach(std::shared_ptr<const BaseModel> base, const std::filesystem::path& path) {
    if (!base) throw ContractError("load_and_attach: null base");
    std::shared_ptr<PeftModule> module = load_peft(path, base->config());
    return attach(std::move(base), std::move(module));
}

}  // namespace peftref
