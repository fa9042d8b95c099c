#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "neolab/model.hpp"

namespace neolab {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary layout (little-endian):
///   8 bytes   magic "NEOLABv1"
///   9 x u64   d_model n_layers n_heads n_kv_heads d_ff context_length
///             vocab_size base_vocab_size parameter_count
///   f64       embed_scale
///   f64[]     parameters in LanguageModel::parameters() order
/// The sidecar `<path>.json` carries the vocabulary, dims, parameter names
/// and shapes, and the sha256 of the binary.
void save_checkpoint(const LanguageModel& model, const std::filesystem::path& path);
LanguageModel load_checkpoint(const std::string& path);

std::filesystem::path sidecar_path(const std::filesystem::path& path);

}  // namespace neolab
