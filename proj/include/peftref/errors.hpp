// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace peftref {

// Root of every exception thrown by the library. Subclasses map onto the
// failure classes the CLI reports through distinct exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error { public: using Error::Error; };
class RankError : public Error { public: using Error::Error; };
class DomainError : public Error { public: using Error::Error; };
class ContractError : public Error { public: using Error::Error; };
class IndexError : public Error { public: using Error::Error; };

class ConfigError : public Error { public: using Error::Error; };
class SlotContractError : public Error { public: using Error::Error; };
class CompositionError : public Error { public: using Error::Error; };
class CompatibilityError : public Error { public: using Error::Error; };
class LookupError : public Error { public: using Error::Error; };

class NumericalError : public Error { public: using Error::Error; };
class IoError : public Error { public: using Error::Error; };
class IntegrityError : public IoError { public: using IoError::IoError; };

}  // namespace peftref
