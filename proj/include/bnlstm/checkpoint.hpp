#pragma once

#include <string>

#include "bnlstm/model.hpp"
#include "bnlstm/optim.hpp"

namespace bnlstm {

struct Checkpoint {
  ModelState model;
  OptimState opt;
  uint64_t config_hash = 0;
  std::string config_text;
  std::string gate_order;  // block layout tag of stacked gate matrices
};

// Single-file binary checkpoint: versioned header, explicit little-endian
// encoding, parameters, optimizer accumulators, population statistics, the
// config snapshot and its hash, and the gate block order tag.
void save_checkpoint(const std::string& path, const ModelState& model, const OptimState& opt,
                     uint64_t config_hash, const std::string& config_text);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace bnlstm
