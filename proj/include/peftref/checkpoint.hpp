// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "peftref/peft.hpp"

namespace peftref {

// Container layout (all integers little-endian):
//
//   "PFR1"
//   u32 len, technique name           ("BASE" for base models)
//   u32 len, descriptor record        (empty for base models)
//   u32 len, canonical BaseConfig text
//   u64      config fingerprint
//   u32 len, hyperparameter text      (empty for base models)
//   u32      tensor count
//   per tensor: u32 len, name; u32 rank; rank x u64 extents; numel x f64
//   u32      CRC-32 of every preceding byte
struct Checkpoint {
    std::string technique;
    std::string descriptor_record;
    std::string config_text;
    std::uint64_t fingerprint = 0;
    std::string hyperparams_text;
    std::vector<NamedTensor> tensors;
};

inline constexpr char kBaseTechnique[] = "BASE";

// FNV-1a over the canonical config text.
std::uint64_t config_fingerprint(const BaseConfig& config);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Throws IntegrityError on bad magic, truncation, trailing bytes or checksum
// mismatch.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
// Exact encoded size, computed from the layout without encoding.
std::size_t checkpoint_size(const Checkpoint& ckpt);

// Atomic write (temporary file, then rename). Returns the byte count.
std::size_t write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

Checkpoint base_checkpoint(const BaseModel& base);
Checkpoint peft_checkpoint(const PeftModule& module);

std::size_t save_base(const BaseModel& base, const std::filesystem::path& path);
BaseModel load_base(const std::filesystem::path& path);

std::size_t save_peft(const PeftModule& module, const std::filesystem::path& path);
// Rebuilds the module recorded in a checkpoint for `config`. Throws
// CompatibilityError when the fingerprint does not match.
std::unique_ptr<PeftModule> module_from_checkpoint(const Checkpoint& ckpt, const BaseConfig& config);
std::unique_ptr<PeftModule> load_peft(const std::filesystem::path& path, const BaseConfig& config);
ComposedModel load_and_attach(std::shared_ptr<const BaseModel> base, const std::filesystem::path& path);

}  // namespace peftref
