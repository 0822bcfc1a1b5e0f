// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace flowlab {

/// Base of every error raised by the library. Each subclass corresponds to
/// one failure category so callers (and the CLI exit-code mapping) can
/// dispatch on type.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class DegenerateDensityError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class VocabError : public Error {
public:
    using Error::Error;
};

class GroupSizeError : public Error {
public:
    using Error::Error;
};

class CharsetError : public Error {
public:
    using Error::Error;
};

class EditOpError : public Error {
public:
    using Error::Error;
};

/// Invalid or inconsistent configuration (validated before any side effect).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A checkpoint whose model config disagrees with the expected one.
class ConfigMismatchError : public ConfigError {
public:
    ConfigMismatchError(std::string field, const std::string& detail)
        : ConfigError("config mismatch on field '" + field + "': " + detail), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

class TruncatedCheckpointError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

/// Malformed input line in a JSON-lines file; carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& detail)
        : Error("line " + std::to_string(line) + ": " + detail), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace flowlab
