#pragma once

// Binary weight files. Little-endian throughout:
//
//   magic        8 bytes  "TRLHFWT1"
//   shape_hash   u64      lm::shape_hash of the model config
//   version      u64      parameter version
//   n_tensors    u32
//   per tensor:  u32 name length, name bytes, u32 rank, u64 dims[rank],
//                f64 data[prod(dims)]

#include <string>

#include "tinyrlhf/tinylm.hpp"

namespace tinyrlhf {

void save_weights(const lm::ModelParams& params, const std::string& path);

// Throws LoadError when the file is unreadable, corrupt, or its shape hash,
// tensor names or shapes disagree with `config`.
lm::ModelParams load_weights(const std::string& path, const lm::ModelConfig& config);

}  // namespace tinyrlhf
