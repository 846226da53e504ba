// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <stdexcept>
#include <string>

namespace dialectmix {

/// Malformed input file (missing column, bad header, unreadable file).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Well-formed input whose content cannot be used (unmappable characters,
/// empty extraction result, missing feature rows).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent language metadata, e.g. two coordinates for one glottocode.
class MetadataError : public DataError {
 public:
  using DataError::DataError;
};

/// Optimization or numerical failure during fitting.
class InferenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dialectmix
