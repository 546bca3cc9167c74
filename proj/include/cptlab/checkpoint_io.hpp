#pragma once

// Checkpoint files: one JSON header line, then raw little-endian float32
// tensors in manifest order.

#include <memory>
#include <string>

#include "cptlab/model.hpp"

namespace cptlab {

/// With adapters attached only the adapters are written and `base_ref` names
/// the base checkpoint file they apply to.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt, const std::string& base_ref = "");

/// Adapter-only files need the base weights they were trained on.
Checkpoint load_checkpoint(const std::string& path, std::shared_ptr<const Weights> base = nullptr);

/// The `base_ref` recorded in an adapter-only file (empty for full checkpoints).
std::string checkpoint_base_ref(const std::string& path);

}  // namespace cptlab
