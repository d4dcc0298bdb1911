#pragma once

#include <stdexcept>
#include <string>

namespace patchlens {

// Malformed or inconsistent caller input (shape mismatch, empty field, bad flag).
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Layer/head/position/token outside the model or trace dimensions.
class IndexError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

// The model cannot provide what was asked of it (unsupported architecture,
// no activation exposure, unknown model id).
class CapabilityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Model id that no registry entry or checkpoint directory resolves.
class UnknownModel : public CapabilityError {
public:
    using CapabilityError::CapabilityError;
};

// Session id that was never issued.
class UnknownSession : public InputError {
public:
    using InputError::InputError;
};

// Session id was valid once but has been evicted or timed out.
class SessionExpired : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Run queue is full; the caller should retry later.
class QueueSaturated : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Image bytes could not be decoded.
class ImageDecodeError : public InputError {
public:
    using InputError::InputError;
};

// Request field that is missing or malformed.
class FieldError : public InputError {
public:
    FieldError(std::string field, const std::string& message)
        : InputError(field + ": " + message), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

}  // namespace patchlens
