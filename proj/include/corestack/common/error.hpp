#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace corestack {

/// Base of every error thrown by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input document. Carries the byte offset reported by the parser.
class ParseError : public Error {
public:
    ParseError(const std::string& message, std::size_t byte_offset)
        : Error(message + " (at byte " + std::to_string(byte_offset) + ")"), byte_offset_(byte_offset) {}

    std::size_t byte_offset() const noexcept { return byte_offset_; }

private:
    std::size_t byte_offset_;
};

/// A value violates a domain invariant (geometry out of bounds, unknown class...).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Caller broke an operation precondition.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// A named entity (well, project, image) does not exist.
class NotFoundError : public Error {
public:
    using Error::Error;
};

/// Optimistic-concurrency conflict: the expected revision is stale.
class ConflictError : public Error {
public:
    ConflictError(const std::string& message, long current_revision)
        : Error(message), current_revision_(current_revision) {}

    long current_revision() const noexcept { return current_revision_; }

private:
    long current_revision_;
};

/// Operation needs a trained/loaded model.
class StateError : public Error {
public:
    using Error::Error;
};

}  // namespace corestack
