#pragma once

#include <stdexcept>
#include <string>

namespace dispfuse {

/// Invalid configuration: bad shapes wired together, unknown rule tags,
/// malformed run configs.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Broken API contract (e.g. backward on a non-scalar root).
class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

/// Malformed file content. Carries the byte offset where parsing failed
/// when it is known (-1 otherwise).
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& msg, long long byte_offset = -1)
        : std::runtime_error(byte_offset >= 0
                                 ? msg + " (byte offset " + std::to_string(byte_offset) + ")"
                                 : msg),
          offset(byte_offset) {}
    long long offset;
};

/// I/O failure with file context.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised when training hits a non-finite loss; message carries the
/// offending term and the full loss breakdown.
class TrainingError : public std::runtime_error {
public:
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace dispfuse
