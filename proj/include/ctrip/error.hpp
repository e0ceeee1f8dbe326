#pragma once

#include <stdexcept>
#include <string>

namespace ctrip {

// Invalid configuration, arguments or malformed inputs.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A training loop produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A checkpoint was produced under a different config or schema.
class FingerprintMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace ctrip
