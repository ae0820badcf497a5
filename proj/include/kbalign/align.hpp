#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "kbalign/kernels.hpp"
#include "kbalign/matcher.hpp"

namespace kbalign {

enum class AlignmentVariant { SquaredL2, SmoothL1, Cosine };

std::string_view alignment_variant_name(AlignmentVariant v);
AlignmentVariant parse_alignment_variant(std::string_view name);

/// Affine map from the model's word-embedding space (d_e) into the
/// knowledge space (d_v). `weight` is stored d_v x d_e, row-major.
template <class T>
struct Projection {
  std::size_t d_e = 0;
  std::size_t d_v = 0;
  std::vector<T> weight;
  std::vector<T> bias;

  static Projection zeros(std::size_t d_e, std::size_t d_v);
  // Uniform in +-1/sqrt(d_e), bias zero.
  static Projection init(std::size_t d_e, std::size_t d_v, std::uint64_t seed);

  ConstMatrixView<T> weight_view() const noexcept { return {weight.data(), d_v, d_e}; }
};

/// Matched expressions of one batch: c[k] (d_e values) paired with its
/// knowledge target v[k] (d_v values).
template <class T>
struct AlignmentBatch {
  std::vector<MatchSpan> spans;
  std::vector<std::vector<T>> c;
  std::vector<std::vector<T>> v;

  std::size_t size() const noexcept { return c.size(); }
};

template <class T>
struct AlignmentGradients {
  std::vector<T> weight;                 // d_v x d_e
  std::vector<T> bias;                   // d_v
  std::vector<std::vector<T>> c;         // d_e per pair; shared by every token of the span
};

inline constexpr double kSmoothL1Threshold = 1.0;

/// Sum of the word vectors (rows of `word_vectors`) inside the span.
template <class T>
std::vector<T> expression_embedding(ConstMatrixView<T> word_vectors, const MatchSpan& span);

template <class T>
std::vector<T> project(std::span<const T> c, const Projection<T>& params);

/// Summed (not averaged) distance between projections and targets. An
/// empty batch has loss zero.
template <class T>
T alignment_loss(const AlignmentBatch<T>& batch, const Projection<T>& params,
                 AlignmentVariant variant);

template <class T>
AlignmentGradients<T> alignment_gradients(const AlignmentBatch<T>& batch,
                                          const Projection<T>& params, AlignmentVariant variant);

/// Loss and gradient of one (c, v) pair; accumulates into d_weight and
/// d_bias and overwrites d_c. Used by both routines above and the trainer.
template <class T>
T alignment_pair(std::span<const T> c, std::span<const T> v, const Projection<T>& params,
                 AlignmentVariant variant, std::span<T> d_weight, std::span<T> d_bias,
                 std::span<T> d_c);

double combined_loss(double main_loss, double align_loss, double lambda);

}  // namespace kbalign
