#pragma once

#include <stdexcept>
#include <string>

namespace automixer {

// Invalid configuration value or inconsistent generation parameters.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input file. Carries the 1-based line number.
struct parse_error : std::runtime_error {
    parse_error(const std::string& path, std::size_t line, const std::string& msg)
        : std::runtime_error(path + ":" + std::to_string(line) + ": " + msg), line_number(line) {}
    std::size_t line_number;
};

// Structurally valid input that violates a data invariant (duplicate ids,
// token ids out of range, missing scores, ...).
struct integrity_error : std::runtime_error {
    explicit integrity_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite loss or parameter update during training.
struct divergence_error : std::runtime_error {
    divergence_error(const std::string& msg, long long step)
        : std::runtime_error(msg + " at step " + std::to_string(step)), step(step) {}
    long long step;
};

// A designated layer has lambda == 0 (all training gradients vanish).
struct degenerate_layer_error : std::runtime_error {
    explicit degenerate_layer_error(const std::string& layer)
        : std::runtime_error("degenerate layer '" + layer + "': all training gradients are zero"),
          layer_name(layer) {}
    std::string layer_name;
};

// Min-max scaling is undefined: every score has the same value.
struct all_equal_error : std::runtime_error {
    explicit all_equal_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Wraps any failure inside a pipeline stage with the stage name, so the CLI
// can report which stage aborted.
struct stage_error : std::runtime_error {
    stage_error(const std::string& stage, const std::string& msg)
        : std::runtime_error("stage '" + stage + "': " + msg), stage_name(stage) {}
    std::string stage_name;
};

}  // namespace automixer
