#include "kbalign/align.hpp"

#include <cmath>
#include <random>

namespace kbalign {

std::string_view alignment_variant_name(AlignmentVariant v) {
  switch (v) {
    case AlignmentVariant::SquaredL2: return "squared_l2";
    case AlignmentVariant::SmoothL1: return "smooth_l1";
    case AlignmentVariant::Cosine: return "cosine";
  }
  return "?";
}

AlignmentVariant parse_alignment_variant(std::string_view name) {
  if (name == "squared_l2" || name == "l2") return AlignmentVariant::SquaredL2;
  if (name == "smooth_l1") return AlignmentVariant::SmoothL1;
  if (name == "cosine") return AlignmentVariant::Cosine;
  throw Error(ErrorKind::InvalidArgument, "unknown alignment variant '" + std::string(name) + "'");
}

template <class T>
Projection<T> Projection<T>::zeros(std::size_t d_e, std::size_t d_v) {
  return {d_e, d_v, std::vector<T>(d_e * d_v, T(0)), std::vector<T>(d_v, T(0))};
}

template <class T>
Projection<T> Projection<T>::init(std::size_t d_e, std::size_t d_v, std::uint64_t seed) {
  auto p = zeros(d_e, d_v);
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(double(d_e));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& w : p.weight) w = T(u(rng));
  return p;
}

template <class T>
std::vector<T> expression_embedding(ConstMatrixView<T> word_vectors, const MatchSpan& span) {
  if (span.start >= span.end || span.end > word_vectors.rows) {
    throw Error(ErrorKind::InvalidArgument,
                "span [" + std::to_string(span.start) + ", " + std::to_string(span.end) +
                    ") out of bounds for " + std::to_string(word_vectors.rows) + " tokens");
  }
  std::vector<T> c(word_vectors.cols, T(0));
  for (std::size_t i = span.start; i < span.end; ++i) {
    kernels::axpy(T(1), word_vectors.row(i), c.data(), c.size());
  }
  return c;
}

template <class T>
std::vector<T> project(std::span<const T> c, const Projection<T>& params) {
  if (c.size() != params.d_e) {
    throw Error(ErrorKind::InvalidArgument, "dimension mismatch: expression has " +
                                                std::to_string(c.size()) + " values, projection expects " +
                                                std::to_string(params.d_e));
  }
  std::vector<T> out(params.d_v);
  kernels::serial::linear_forward<T>({c.data(), 1, c.size()}, params.weight_view(), params.bias.data(),
                                     {out.data(), 1, out.size()});
  return out;
}

template <class T>
T alignment_pair(std::span<const T> c, std::span<const T> v, const Projection<T>& params,
                 AlignmentVariant variant, std::span<T> d_weight, std::span<T> d_bias,
                 std::span<T> d_c) {
  if (v.size() != params.d_v) {
    throw Error(ErrorKind::InvalidArgument, "dimension mismatch: target has " +
                                                std::to_string(v.size()) + " values, projection emits " +
                                                std::to_string(params.d_v));
  }
  const auto p = project(c, params);
  const std::size_t dv = params.d_v;
  std::vector<T> dp(dv);
  T loss = 0;
  switch (variant) {
    case AlignmentVariant::SquaredL2:
      for (std::size_t j = 0; j < dv; ++j) {
        const T r = p[j] - v[j];
        loss += r * r;
        dp[j] = T(2) * r;
      }
      break;
    case AlignmentVariant::SmoothL1: {
      const T beta = T(kSmoothL1Threshold);
      for (std::size_t j = 0; j < dv; ++j) {
        const T r = p[j] - v[j];
        if (std::abs(r) < beta) {
          loss += T(0.5) * r * r / beta;
          dp[j] = r / beta;
        } else {
          loss += std::abs(r) - T(0.5) * beta;
          dp[j] = r > 0 ? T(1) : T(-1);
        }
      }
      break;
    }
    case AlignmentVariant::Cosine: {
      const T pn = std::sqrt(kernels::dot(p.data(), p.data(), dv));
      const T vn = std::sqrt(kernels::dot(v.data(), v.data(), dv));
      if (!(pn > T(0)) || !(vn > T(0))) {
        throw Error(ErrorKind::Numeric, "cosine alignment undefined for a zero-norm vector");
      }
      const T pv = kernels::dot(p.data(), v.data(), dv);
      const T cos = pv / (pn * vn);
      loss = T(1) - cos;
      // d(1 - cos)/dp = -(v / (|p||v|) - cos * p / |p|^2)
      for (std::size_t j = 0; j < dv; ++j) dp[j] = -(v[j] / (pn * vn) - cos * p[j] / (pn * pn));
      break;
    }
  }
  if (!d_weight.empty()) {
    kernels::serial::linear_backward<T>({c.data(), 1, c.size()}, params.weight_view(), {dp.data(), 1, dv},
                                        MatrixView<T>{}, {d_weight.data(), dv, params.d_e}, d_bias.data());
  }
  if (!d_c.empty()) {
    std::fill(d_c.begin(), d_c.end(), T(0));
    for (std::size_t j = 0; j < dv; ++j) kernels::axpy(dp[j], params.weight.data() + j * params.d_e, d_c.data(), params.d_e);
  }
  return loss;
}

namespace {

template <class T>
void check_batch(const AlignmentBatch<T>& batch) {
  if (batch.c.size() != batch.v.size()) {
    throw Error(ErrorKind::InvalidArgument, "alignment batch has unequal c and v counts");
  }
}

}  // namespace

template <class T>
T alignment_loss(const AlignmentBatch<T>& batch, const Projection<T>& params,
                 AlignmentVariant variant) {
  check_batch(batch);
  T total = 0;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    total += alignment_pair<T>(batch.c[k], batch.v[k], params, variant, {}, {}, {});
  }
  return total;
}

template <class T>
AlignmentGradients<T> alignment_gradients(const AlignmentBatch<T>& batch,
                                          const Projection<T>& params, AlignmentVariant variant) {
  check_batch(batch);
  AlignmentGradients<T> g;
  g.weight.assign(params.weight.size(), T(0));
  g.bias.assign(params.d_v, T(0));
  g.c.resize(batch.size());
  for (std::size_t k = 0; k < batch.size(); ++k) {
    g.c[k].resize(params.d_e);
    alignment_pair<T>(batch.c[k], batch.v[k], params, variant, g.weight, g.bias, g.c[k]);
  }
  return g;
}

double combined_loss(double main_loss, double align_loss, double lambda) {
  if (!(lambda >= 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "alignment weight lambda must be non-negative");
  }
  if (lambda == 0.0) return main_loss;
  return main_loss + lambda * align_loss;
}

#define KBALIGN_INSTANTIATE(T)                                                                  \
  template struct Projection<T>;                                                                \
  template std::vector<T> expression_embedding<T>(ConstMatrixView<T>, const MatchSpan&);        \
  template std::vector<T> project<T>(std::span<const T>, const Projection<T>&);                 \
  template T alignment_pair<T>(std::span<const T>, std::span<const T>, const Projection<T>&,    \
                               AlignmentVariant, std::span<T>, std::span<T>, std::span<T>);     \
  template T alignment_loss<T>(const AlignmentBatch<T>&, const Projection<T>&, AlignmentVariant); \
  template AlignmentGradients<T> alignment_gradients<T>(const AlignmentBatch<T>&,               \
                                                        const Projection<T>&, AlignmentVariant);

KBALIGN_INSTANTIATE(float)
KBALIGN_INSTANTIATE(double)

#undef KBALIGN_INSTANTIATE

}  // namespace kbalign
