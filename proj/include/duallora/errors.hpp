// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace duallora {

/// Incompatible tensor shapes.
class DimensionError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Token, row or class index outside the valid range.
class IndexError : public std::out_of_range {
  public:
    using std::out_of_range::out_of_range;
};

/// A caller violated an operation precondition.
class ContractError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

/// Invalid configuration values (rank, enumerations, sizes).
class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Merge/unmerge requested in the wrong state, or a forward pass that
/// disagrees with what is currently folded into the weights.
class MergeStateError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

/// Malformed corpus or checkpoint file.
class LoadError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// NaN/Inf encountered during training.
class NumericalError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

}  // namespace duallora
