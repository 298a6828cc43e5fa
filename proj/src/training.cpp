#include "atd/training.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <ostream>

#include "atd/ops.hpp"

namespace atd {

using nlohmann::json;

OptimState OptimState::create(const std::vector<NamedTensor>& params, const AdamWConfig& config) {
  OptimState s;
  s.config = config;
  for (const auto& p : params) {
    s.first.emplace_back(p.tensor.numel(), 0.0f);
    s.second.emplace_back(p.tensor.numel(), 0.0f);
  }
  return s;
}

double scheduled_lr(const AdamWConfig& config, std::size_t step) {
  double lr = config.lr;
  for (std::size_t m : config.milestones)
    if (step >= m) lr *= 0.5;
  return lr;
}

double OptimState::current_lr() const { return scheduled_lr(config, step); }

void adamw_step(const std::vector<NamedTensor>& params, OptimState& state) {
  if (params.size() != state.first.size()) throw Error("adamw: parameter list does not match optimizer state");
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad())
      if (!std::isfinite(g)) throw Error("adamw: non-finite gradient in parameter " + p.name);
  }
  const auto& c = state.config;
  const double lr = state.current_lr();
  const double t = static_cast<double>(state.step + 1);
  const double correct1 = 1.0 - std::pow(c.beta1, t), correct2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor param = params[i].tensor;
    auto& m = state.first[i];
    auto& v = state.second[i];
    if (m.size() != param.numel()) throw Error("adamw: state shape mismatch for " + params[i].name);
    auto data = param.mutable_data();
    const bool has = param.has_grad();
    auto grad = has ? param.grad() : std::span<const float>{};
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = has ? grad[k] : 0.0;
      const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * g;
      const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      double w = data[k];
      w -= lr * c.weight_decay * w;
      w -= lr * (mk / correct1) / (std::sqrt(vk / correct2) + c.eps);
      data[k] = static_cast<float>(w);
    }
  }
  ++state.step;
}

// Config -------------------------------------------------------------------------

namespace {

std::size_t count(const json& v, const char* key, bool allow_zero) {
  if (!v.is_number_integer() || v.get<long long>() < (allow_zero ? 0 : 1))
    throw Error(std::string("config: '") + key + "' must be a " + (allow_zero ? "nonnegative" : "positive") +
                " integer");
  return v.get<std::size_t>();
}

double number(const json& v, const char* key) {
  if (!v.is_number()) throw Error(std::string("config: '") + key + "' must be a number");
  return v.get<double>();
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& base) {
  if (!j.is_object()) throw Error("config: train section must be an object");
  TrainConfig c = base;
  for (const auto& [key, v] : j.items()) {
    if (key == "steps") c.steps = count(v, "steps", true);
    else if (key == "patch") c.patch = count(v, "patch", false);
    else if (key == "patches") c.patches = count(v, "patches", false);
    else if (key == "checkpoint_every") c.checkpoint_every = count(v, "checkpoint_every", true);
    else if (key == "log_every") c.log_every = count(v, "log_every", false);
    else if (key == "lr") c.optim.lr = number(v, "lr");
    else if (key == "beta1") c.optim.beta1 = number(v, "beta1");
    else if (key == "beta2") c.optim.beta2 = number(v, "beta2");
    else if (key == "eps") c.optim.eps = number(v, "eps");
    else if (key == "weight_decay") c.optim.weight_decay = number(v, "weight_decay");
    else if (key == "milestones") {
      c.optim.milestones.clear();
      if (!v.is_array()) throw Error("config: 'milestones' must be an array of steps");
      for (const auto& m : v) c.optim.milestones.push_back(count(m, "milestones", true));
    } else if (key == "loss") {
      const auto s = v.get<std::string>();
      if (s == "l1") c.loss = LossKind::kL1;
      else if (s == "charbonnier") c.loss = LossKind::kCharbonnier;
      else throw Error("config: loss must be 'l1' or 'charbonnier'");
    } else {
      throw Error("config: unknown train key '" + key + "'");
    }
  }
  if (!(c.optim.lr > 0) || c.optim.beta1 < 0 || c.optim.beta1 >= 1 || c.optim.beta2 < 0 || c.optim.beta2 >= 1)
    throw Error("config: need lr > 0 and betas in [0, 1)");
  return c;
}

TrainConfig TrainConfig::from_json(const json& j) { return from_json(j, TrainConfig{}); }

json TrainConfig::to_json() const {
  return {{"steps", steps},
          {"patch", patch},
          {"patches", patches},
          {"loss", loss == LossKind::kL1 ? "l1" : "charbonnier"},
          {"lr", optim.lr},
          {"beta1", optim.beta1},
          {"beta2", optim.beta2},
          {"eps", optim.eps},
          {"weight_decay", optim.weight_decay},
          {"milestones", optim.milestones},
          {"checkpoint_every", checkpoint_every},
          {"log_every", log_every}};
}

// Data ---------------------------------------------------------------------------

SrPair make_pair(const Image& hq, std::size_t scale) {
  if (scale == 0 || hq.height % scale || hq.width % scale)
    throw ShapeError("make_pair: HQ extents must be divisible by the scale");
  auto lq = bicubic_resize(hq, hq.height / scale, hq.width / scale);
  return {image_to_tensor(lq), image_to_tensor(hq)};
}

std::vector<SrPair> synthetic_dataset(std::size_t count, std::size_t patch, std::size_t scale, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SrPair> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_pair(synthetic_patch(patch, rng), scale));
  return out;
}

// Loop ---------------------------------------------------------------------------

double output_psnr(const Tensor& output, const Tensor& hq) {
  return psnr(tensor_to_image(output), tensor_to_image(hq), ChannelMode::kY);
}

std::string log_line(const LogEntry& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "{\"step\":%zu,\"loss\":%.9g,\"psnr\":%s}", e.step, e.loss, psnr_json(e.psnr).c_str());
  return buf;
}

namespace {

Tensor pixel_loss(const Tensor& out, const Tensor& hq, LossKind kind) {
  return kind == LossKind::kL1 ? l1_loss(out, hq) : charbonnier_loss(out, hq);
}

}  // namespace

TrainResult train_micro(AtdModel& model, const std::vector<SrPair>& data, const TrainConfig& config,
                        const TrainHooks& hooks) {
  if (data.empty()) throw Error("train: empty dataset");
  const auto params = model.parameters();
  auto state = OptimState::create(params, config.optim);
  if (!hooks.checkpoint_dir.empty()) std::filesystem::create_directories(hooks.checkpoint_dir);
  TrainResult result;
  std::size_t above = 0;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto& pair = data[step % data.size()];
    for (const auto& p : params) Tensor(p.tensor).zero_grad();
    Tensor out = forward_sr(pair.lq, model);
    Tensor loss = pixel_loss(out, pair.hq, config.loss);
    LogEntry entry{step, loss.item(), output_psnr(out, pair.hq)};
    if (!std::isfinite(entry.loss)) throw Error("train: non-finite loss at step " + std::to_string(step));
    if (step == 0) result.initial_loss = entry.loss;
    above = entry.loss > 10.0 * result.initial_loss ? above + 1 : 0;
    if (above >= 50)
      throw Error("train: diverged at step " + std::to_string(step) + " (loss above 10x initial for 50 steps)");
    loss.backward();
    adamw_step(params, state);
    result.history.push_back(entry);
    if (hooks.log && step % config.log_every == 0) *hooks.log << log_line(entry) << '\n';
    if (hooks.on_step) hooks.on_step(entry);
    if (!hooks.checkpoint_dir.empty() && config.checkpoint_every && (step + 1) % config.checkpoint_every == 0)
      save_checkpoint(hooks.checkpoint_dir + "/step_" + std::to_string(step + 1) + ".atdc", model);
  }
  // Closing evaluation after the last update, averaged over the dataset.
  NoGradGuard guard;
  double loss_sum = 0, psnr_sum = 0;
  for (const auto& pair : data) {
    Tensor out = forward_sr(pair.lq, model);
    loss_sum += pixel_loss(out, pair.hq, config.loss).item();
    psnr_sum += output_psnr(out, pair.hq);
  }
  result.final_loss = loss_sum / data.size();
  result.final_psnr = psnr_sum / data.size();
  if (config.steps == 0) result.initial_loss = result.final_loss;
  if (hooks.log) *hooks.log << log_line({config.steps, result.final_loss, result.final_psnr}) << '\n';
  return result;
}

}  // namespace atd
