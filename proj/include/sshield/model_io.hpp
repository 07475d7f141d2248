#pragma once

#include <cstdint>
#include <string>

#include "sshield/layers.hpp"

namespace sshield {

// Model container: magic "SSHM", u32 format version, architecture header
// (builder id, input dims, class count, per-layer hyperparameters and
// quantization grids), then a tensor directory of (name, dtype, dims, offset)
// entries followed by raw little-endian float32 payloads. Tensor names are
// "L<i>.<field>" keyed to the layer list.
inline constexpr uint32_t kModelFormatVersion = 1;

// Loading rebuilds the graph, checks every directory entry against the layer
// it names, and validates the result; a damaged file throws without returning
// a partial model. Round trips are bit-exact in both directions.
void save_model(const ModelGraph& m, const std::string& path);
ModelGraph load_model(const std::string& path);

// Bare tensor container ("SSHT") for adversarial-set artifacts: version,
// rank, dims, float32 payload. Same damage rules as the model container.
void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);

}  // namespace sshield
