#pragma once

#include <stdexcept>
#include <string>

namespace mstrnn {

// Shape disagreement between tensors handed to a kernel.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Model specification that cannot be assembled (stage chaining, bad extents).
struct BuildError : std::runtime_error {
    explicit BuildError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or inconsistent run configuration / synth spec.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// File-level failures: missing manifest, corrupt checkpoint, unwritable dir.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite loss/gradient/update; message names the offending stage.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mstrnn
