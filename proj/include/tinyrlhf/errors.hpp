#pragma once

#include <stdexcept>
#include <string>

namespace tinyrlhf {

// Base of every error this library raises. Callers that only care about
// "something in the run went wrong" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid dimensions or hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed arguments: out-of-vocabulary tokens, misaligned arrays, unknown ids.
class InputError : public Error {
 public:
  using Error::Error;
};

// A fixed-size resource (context window, KV cache, block pool) is exhausted.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Non-finite gradients or losses.
class TrainingDivergence : public Error {
 public:
  using Error::Error;
};

// Importance ratio outside the representable range.
class NumericalGuardError : public Error {
 public:
  using Error::Error;
};

// A weight update whose version does not exceed the receiver's current one.
class StaleVersionError : public Error {
 public:
  using Error::Error;
};

// Every group was filtered out and re-rolling did not recover.
class EmptyBatchError : public Error {
 public:
  using Error::Error;
};

// No message flowed through the pipeline within the configured bound.
class WatchdogError : public Error {
 public:
  using Error::Error;
};

// Config text could not be parsed; carries the offending key and line.
class ParseError : public Error {
 public:
  ParseError(const std::string& message, std::string key, int line)
      : Error(message), key_(std::move(key)), line_(line) {}

  const std::string& key() const noexcept { return key_; }
  int line() const noexcept { return line_; }

 private:
  std::string key_;
  int line_;
};

// Weight files that are truncated, corrupt or shaped for another model.
class LoadError : public Error {
 public:
  using Error::Error;
};

}  // namespace tinyrlhf
