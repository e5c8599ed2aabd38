// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <stdexcept>
#include <string>

namespace momuse {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input shorter than an operator's receptive geometry.
class InputTooShortError : public Error {
 public:
  using Error::Error;
};

/// API used outside its contract (bad arguments, wrong call order).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Object is in the wrong state for the requested transition.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Audio and visual streams disagree on timing.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or unsupported file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace momuse
