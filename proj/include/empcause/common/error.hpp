#pragma once

#include <stdexcept>
#include <string>

namespace empcause {

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// A caller violated an operation's documented precondition.
class PreconditionError : public Error {
  public:
    using Error::Error;
};

/// Input data violates a domain invariant.
class ValidationError : public Error {
  public:
    using Error::Error;
};

/// A backend (knowledge model, embedder, rater, LLM endpoint) failed or was unreachable.
class BackendError : public Error {
  public:
    using Error::Error;
};

/// Replay mode was asked for something that was never recorded.
class ReplayMissError : public BackendError {
  public:
    ReplayMissError(const std::string &what, std::string key) : BackendError(what), key_(std::move(key)) {}
    const std::string &key() const { return key_; }

  private:
    std::string key_;
};

class ParseError : public Error {
  public:
    ParseError(const std::string &what, std::string raw) : Error(what), raw_(std::move(raw)) {}
    const std::string &raw() const { return raw_; }

  private:
    std::string raw_;
};

/// An experiment stage failed; carries the stage name.
class StageError : public Error {
  public:
    StageError(std::string stage, const std::string &cause)
        : Error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}
    const std::string &stage() const { return stage_; }

  private:
    std::string stage_;
};

} // namespace empcause
