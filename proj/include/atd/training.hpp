#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "atd/image.hpp"
#include "atd/model.hpp"
#include "json.hpp"

namespace atd {

struct AdamWConfig {
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.9;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Steps at which the learning rate halves.
  std::vector<std::size_t> milestones;
};

struct OptimState {
  AdamWConfig config;
  std::size_t step = 0;
  std::vector<std::vector<float>> first;   // per parameter, mirrors its shape
  std::vector<std::vector<float>> second;

  static OptimState create(const std::vector<NamedTensor>& params, const AdamWConfig& config);
  /// Learning rate used by the next update.
  double current_lr() const;
};

double scheduled_lr(const AdamWConfig& config, std::size_t step);

/// One AdamW update with decoupled decay. Parameters without a gradient count
/// as zero-gradient. A non-finite gradient throws, naming the parameter.
void adamw_step(const std::vector<NamedTensor>& params, OptimState& state);

enum class LossKind { kL1, kCharbonnier };

struct TrainConfig {
  std::size_t steps = 500;
  /// HQ patch side; the LQ input is this divided by the model scale.
  std::size_t patch = 32;
  std::size_t patches = 1;
  LossKind loss = LossKind::kL1;
  /// Halvings at the same fractions of the run as the long schedule.
  AdamWConfig optim{.milestones = {250, 400, 450, 475}};
  /// 0 disables periodic checkpoints.
  std::size_t checkpoint_every = 0;
  std::size_t log_every = 1;

  /// Unknown keys throw.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct SrPair {
  Tensor lq;  // [h x w x 3]
  Tensor hq;  // [rh x rw x 3]
};

/// LQ by bicubic downscaling; HQ extents must be divisible by the scale.
SrPair make_pair(const Image& hq, std::size_t scale);
/// Deterministic synthetic training set.
std::vector<SrPair> synthetic_dataset(std::size_t count, std::size_t patch, std::size_t scale, std::uint64_t seed);

struct LogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  double psnr = 0.0;  // Y channel, output clamped to [0, 1]
};

struct TrainHooks {
  std::ostream* log = nullptr;  // JSON lines
  std::string checkpoint_dir;   // periodic checkpoints when non-empty
  std::function<void(const LogEntry&)> on_step;
};

struct TrainResult {
  std::vector<LogEntry> history;  // one entry per step, before its update
  double initial_loss = 0.0;
  double final_loss = 0.0;   // after the last update
  double final_psnr = 0.0;
};

/// Y-channel PSNR of a model output against HQ.
double output_psnr(const Tensor& output, const Tensor& hq);

/// Cycles through the dataset in order. Aborts when the loss stays above ten
/// times its initial value for 50 consecutive steps.
TrainResult train_micro(AtdModel& model, const std::vector<SrPair>& data, const TrainConfig& config,
                        const TrainHooks& hooks = {});

/// {"step":..,"loss":..,"psnr":..}
std::string log_line(const LogEntry& e);

}  // namespace atd
