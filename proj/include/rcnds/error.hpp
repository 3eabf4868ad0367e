#pragma once

#include <stdexcept>
#include <string>

namespace rcnds {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Tensor/layer extent mismatches: bad shapes, mismatched channels, windows
// that do not fit.
class ShapeError : public Error {
public:
  using Error::Error;
};

// Out-of-range scalar arguments: non-positive std, dropout rate outside
// [0,1), negative loss weights, labels >= K, schedule indices past N,
// crops larger than the image.
class ValueError : public Error {
public:
  using Error::Error;
};

// Protocol violations: backward without a matching forward, rewriting a
// graph twice, probing a graph that already has an auxiliary branch.
class StateError : public Error {
public:
  using Error::Error;
};

// Bad configuration or input files: unknown node ids, malformed manifests,
// class-count mismatches, images that do not decode to the declared
// geometry.
class ConfigError : public Error {
public:
  using Error::Error;
};

// Non-finite values where finite ones are required, and training
// divergence.
class NumericError : public Error {
public:
  using Error::Error;
};

// Filesystem-level failures: unreadable or unwritable files, bad magic.
class IoError : public Error {
public:
  using Error::Error;
};

} // namespace rcnds
