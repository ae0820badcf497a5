#include "kbalign/optim.hpp"

#include <cmath>
#include <string>

#include "kbalign/common.hpp"

namespace kbalign {

std::string_view optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::Sgd ? "sgd" : "adam";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  throw Error(ErrorKind::InvalidArgument, "unknown optimizer '" + std::string(name) + "'");
}

Optimizer::Optimizer(OptimizerSettings settings, std::size_t size)
    : settings_(settings), size_(size) {
  if (settings_.kind == OptimizerKind::Adam) {
    m_.assign(size, 0.0f);
    v_.assign(size, 0.0f);
  }
}

void Optimizer::step(std::span<float> params, std::span<const float> grads) {
  if (params.size() != size_ || grads.size() != size_) {
    throw Error(ErrorKind::InvalidArgument, "optimizer size mismatch");
  }
  ++t_;
  const auto lr = static_cast<float>(settings_.learning_rate);
  if (settings_.kind == OptimizerKind::Sgd) {
    for (std::size_t i = 0; i < size_; ++i) params[i] -= lr * grads[i];
    return;
  }
  const auto b1 = static_cast<float>(settings_.beta1);
  const auto b2 = static_cast<float>(settings_.beta2);
  const auto eps = static_cast<float>(settings_.epsilon);
  const auto c1 = static_cast<float>(1.0 - std::pow(settings_.beta1, double(t_)));
  const auto c2 = static_cast<float>(1.0 - std::pow(settings_.beta2, double(t_)));
  for (std::size_t i = 0; i < size_; ++i) {
    const float g = grads[i];
    m_[i] = b1 * m_[i] + (1.0f - b1) * g;
    v_[i] = b2 * v_[i] + (1.0f - b2) * g * g;
    const float mhat = m_[i] / c1;
    const float vhat = v_[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

void Optimizer::restore(std::uint64_t steps, std::vector<float> m, std::vector<float> v) {
  if (settings_.kind == OptimizerKind::Adam && (m.size() != size_ || v.size() != size_)) {
    throw Error(ErrorKind::Parse, "optimizer state size mismatch");
  }
  t_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace kbalign
