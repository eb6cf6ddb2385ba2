#pragma once

#include <stdexcept>
#include <string>

namespace poolnet {

// Root of every error raised by the library. Callers that only care about
// "something went wrong" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violated precondition on shapes, sizes or argument ranges.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Inconsistent model or run configuration (e.g. width not divisible by heads).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A vector with zero norm reached a cosine computation.
class DegenerateEmbeddingError : public Error {
 public:
  using Error::Error;
};

// --- COLMAP sparse models -------------------------------------------------

class NotAModel : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::string file, std::size_t line, std::string text,
             const std::string& reason)
      : Error(file + ":" + std::to_string(line) + ": " + reason + ": '" +
              text + "'"),
        file_(std::move(file)),
        line_(line),
        text_(std::move(text)) {}

  const std::string& file() const { return file_; }
  std::size_t line() const { return line_; }
  const std::string& text() const { return text_; }

 private:
  std::string file_;
  std::size_t line_;
  std::string text_;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class InsufficientPoses : public Error {
 public:
  using Error::Error;
};

class InsufficientGeometry : public Error {
 public:
  using Error::Error;
};

class NoValidModel : public Error {
 public:
  using Error::Error;
};

// --- Images and datasets --------------------------------------------------

class DecodeError : public Error {
 public:
  using Error::Error;
};

class UnsupportedFormat : public Error {
 public:
  using Error::Error;
};

class ImbalanceError : public Error {
 public:
  using Error::Error;
};

class ScenePredictError : public Error {
 public:
  using Error::Error;
};

// --- Checkpoints ----------------------------------------------------------

class NotACheckpoint : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class CorruptCheckpoint : public Error {
 public:
  using Error::Error;
};

// --- Training -------------------------------------------------------------

// Embedding norms fell below the collapse floor during pretraining.
class CollapseError : public Error {
 public:
  using Error::Error;
};

}  // namespace poolnet
