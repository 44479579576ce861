#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace masklm {

// Dimension mismatch between tensors; the message names both shapes.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Token id or position outside the valid range.
struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// A softmax row where every entry is masked: the position can attend to nothing.
struct DegenerateAttentionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed corpus, config, or training-data input.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint file cannot be read back into the declared configuration.
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient during training; carries the step it happened at.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what, std::int64_t step_index)
        : std::runtime_error(what), step(step_index) {}
    std::int64_t step;
};

}  // namespace masklm
