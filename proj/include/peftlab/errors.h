#pragma once

#include <stdexcept>
#include <string>

namespace peftlab {

// Shapes that do not agree for an operation.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed data values (out-of-range ids, unparseable files).
struct DataError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// An API called in a state or with a variant it does not support.
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

// Invalid configuration for a model, adapter, trainer or experiment.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Sequence longer than the model accepts. Inputs are never truncated.
struct LengthError : std::length_error {
    using std::length_error::length_error;
};

// Training diverged (non-finite loss).
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace peftlab
