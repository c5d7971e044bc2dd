#pragma once

// Checkpoint layout:
//   bytes [0, 8)        header length H as a little-endian uint64
//   bytes [8, 8 + H)    UTF-8 JSON header
//   bytes [8 + H, ...)  tensor payload, 64-bit little-endian IEEE reals
//
// The header holds {"format": "structie-checkpoint-v1", "meta": {...},
// "tensors": [{"name", "shape": [rows, cols], "offset", "count"}]} where
// offset is the byte offset of the tensor inside the payload.

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "structie/tensor.hpp"

namespace structie {

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const std::vector<Tensor>& params, const nlohmann::json& meta);
Checkpoint load_checkpoint(const std::string& path);

/// Copies stored values into same-named parameters.  Every parameter must be
/// present with a matching shape.
void restore_parameters(const Checkpoint& ckpt, std::vector<Tensor>& params);

}  // namespace structie
