#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace kbalign {

enum class OptimizerKind { Sgd, Adam };

std::string_view optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Plain SGD or bias-corrected Adam over a flat parameter vector.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerSettings settings, std::size_t size);

  void step(std::span<float> params, std::span<const float> grads);

  const OptimizerSettings& settings() const noexcept { return settings_; }
  void set_learning_rate(double lr) noexcept { settings_.learning_rate = lr; }
  std::uint64_t steps() const noexcept { return t_; }

  // Moment buffers for checkpointing (empty for SGD).
  const std::vector<float>& first_moment() const noexcept { return m_; }
  const std::vector<float>& second_moment() const noexcept { return v_; }
  void restore(std::uint64_t steps, std::vector<float> m, std::vector<float> v);

 private:
  OptimizerSettings settings_;
  std::size_t size_ = 0;
  std::uint64_t t_ = 0;
  std::vector<float> m_, v_;
};

}  // namespace kbalign
