#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "atd/categorize.hpp"
#include "atd/cffn.hpp"
#include "atd/dictionary.hpp"
#include "atd/window.hpp"
#include "json.hpp"

namespace atd {

struct ModelConfig {
  std::string preset = "micro";
  std::size_t channels = 16;
  std::size_t blocks = 1;
  std::size_t layers = 2;
  std::size_t dict_size = 16;
  std::size_t reduced_dim = 8;
  std::size_t window = 8;
  std::size_t group_size = 16;
  std::size_t heads = 2;
  std::size_t scale = 2;
  bool use_tdca = true;
  bool use_acmsa = true;
  bool use_category_ffn = true;
  ScaleMode scale_mode = ScaleMode::kReparameterized;

  /// micro, light or full.
  static ModelConfig preset_config(const std::string& name);
  /// Starts from `preset` when given, then applies every other key; unknown keys throw.
  static ModelConfig from_json(const nlohmann::json& j, const ModelConfig& base);
  static ModelConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;

  /// baseline, tdca, tdca_acmsa or full.
  std::string variant() const;
  void set_variant(const std::string& name);
  bool needs_dictionary() const { return use_tdca || use_acmsa || use_category_ffn; }
};

struct AtdLayer {
  TokenDictionary dict;  // entries shared with the owning block
  LayerNorm norm_tdca;
  LayerNorm norm_acmsa;
  LayerNorm norm_window;
  AcmsaParams acmsa;
  WindowParams window;
  CffnParams ffn;
};

struct AtdBlock {
  Tensor entries;
  std::vector<AtdLayer> layers;
  Conv2d conv;
};

/// Routing decisions of one forward pass. In replay mode the recorded
/// assignments are reused instead of recomputed, which keeps the network a
/// smooth function of its parameters (used for finite differences).
struct LayerTrace {
  std::vector<int> argmax_idx;
  std::vector<float> max_weight;
  std::size_t grid_h = 0, grid_w = 0;
};
struct ForwardTrace {
  bool replay = false;
  std::vector<LayerTrace> layers;  // block-major
};

struct AtdModel {
  ModelConfig config;
  Conv2d shallow;
  std::vector<AtdBlock> blocks;
  Conv2d body;
  Conv2d recon_in;
  std::vector<Conv2d> upsample;  // one per pixel-shuffle stage
  Conv2d recon_out;

  static AtdModel create(const ModelConfig& config, std::uint64_t seed);
  /// Every learnable tensor once, in a fixed order.
  std::vector<NamedTensor> parameters() const;
  std::size_t count_params() const;
};

/// Pixel-shuffle factors for an SR scale: 2 -> {2}, 3 -> {3}, 4 -> {2, 2}.
std::vector<std::size_t> upsample_factors(std::size_t scale);

/// One transformer layer on an H x W x C map (extents multiples of the window).
Tensor atd_layer(const Tensor& x, const AtdLayer& layer, const ModelConfig& config, LayerTrace* trace = nullptr,
                 bool replay = false);

/// [H x W x 3] in [0, 1] -> [rH x rW x 3].
Tensor forward_sr(const Tensor& img, const AtdModel& model, ForwardTrace* trace = nullptr);

/// 64-bit FNV-1a over the raw float bytes.
std::uint64_t tensor_hash(const Tensor& t);

// Checkpoints --------------------------------------------------------------------

constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const AtdModel& model);
AtdModel load_checkpoint(const std::string& path);

}  // namespace atd
