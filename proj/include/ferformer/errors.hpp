#pragma once

#include <stdexcept>
#include <string>

namespace ferformer {

// Shape/dimension violations (mismatched matmul operands, bad pooling target, ...).
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Out-of-range class / row indices.
struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// API misuse (non-scalar loss, consumed tape, bad CLI invocation).
struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Invalid configuration values (non-divisor patch scale, duplicate class names, ...).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Word not present in the closed template vocabulary.
struct VocabError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Rejected runtime input (image too small, text sequence too long).
struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Dataset ingestion failures; messages name the offending CSV row.
struct IngestError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File / checkpoint I/O failures, including version mismatches.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training diverged (NaN loss); message carries step/lr/batch diagnostics.
struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EvalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A function handed to grad_check produced two different forward results.
struct DeterminismError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace ferformer
