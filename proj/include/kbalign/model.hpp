#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kbalign/common.hpp"
#include "kbalign/kernels.hpp"

namespace kbalign {

enum class HeadKind { MaskedToken, Classification, Binary };

std::string_view head_kind_name(HeadKind kind);
HeadKind parse_head_kind(std::string_view name);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_e = 64;
  std::size_t d_v = 32;
  std::size_t text_layers = 2;
  std::size_t cross_layers = 1;
  std::size_t heads = 2;
  std::size_t ffn_dim = 256;
  std::size_t max_text_len = 20;
  std::size_t visual_dim = 16;
  std::size_t num_answers = 2;
  bool text_only = false;

  void validate() const;
  Fingerprint fingerprint() const;
};

/// Named tensors packed into one flat parameter vector.
class ParamLayout {
 public:
  struct Tensor {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t offset = 0;
    std::size_t size() const noexcept { return rows * cols; }
  };

  std::size_t add(std::string name, std::size_t rows, std::size_t cols);
  std::size_t size() const noexcept { return total_; }
  const std::vector<Tensor>& tensors() const noexcept { return tensors_; }
  const Tensor& tensor(std::string_view name) const;
  const Tensor* find(std::string_view name) const;

 private:
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t, std::less<>> by_name_;
  std::size_t total_ = 0;
};

/// Word-embedding rows for `ids`, before position and segment terms.
template <class T>
std::vector<T> embed_tokens(std::span<const TokenId> ids, ConstMatrixView<T> table) {
  std::vector<T> out;
  out.reserve(ids.size() * table.cols);
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.rows) {
      throw Error(ErrorKind::InvalidArgument, "token id " + std::to_string(id) + " out of range");
    }
    const T* row = table.row(static_cast<std::size_t>(id));
    out.insert(out.end(), row, row + table.cols);
  }
  return out;
}

/// One input example. `segments` may be empty (all zero). `visual` holds
/// `visual_rows` feature vectors of `visual_dim` values each.
template <class T>
struct ExampleInput {
  std::span<const TokenId> ids;
  std::span<const std::uint8_t> segments;
  std::span<const T> visual;
  std::size_t visual_rows = 0;
};

template <class T>
struct LayerNormCache {
  std::vector<T> xhat;
  std::vector<T> rstd;
};

template <class T>
struct BlockCache {
  std::vector<T> input;       // n x d
  LayerNormCache<T> ln1;
  std::vector<T> a;           // ln1 output
  std::vector<T> q, k, v;     // q: n x d, k/v: keys x d
  std::vector<T> probs;       // heads x n x keys
  std::vector<T> attn;        // n x d, concatenated head outputs
  std::vector<T> mid;         // input + attention sublayer
  LayerNormCache<T> ln2;
  std::vector<T> b;           // ln2 output
  std::vector<T> u;           // n x ffn, pre-activation
  std::vector<T> g;           // gelu(u)
  std::vector<T> output;      // n x d
};

template <class T>
struct ForwardState {
  std::size_t n = 0;
  std::size_t m = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> segments;
  std::vector<std::uint8_t> key_valid;  // non-pad positions
  LayerNormCache<T> emb_ln;
  std::vector<T> embedded;              // n x d after embedding LN
  std::vector<T> visual_in;             // m x visual_dim
  LayerNormCache<T> vis_ln;
  std::vector<T> visual;                // m x d
  std::vector<BlockCache<T>> text;
  std::vector<BlockCache<T>> cross;
  LayerNormCache<T> final_ln;
  std::vector<T> hidden;                // n x d, final
  std::vector<T> pooled;                // d

  // Output of text layer `layer` (n x d).
  std::span<const T> layer_output(std::size_t layer) const { return text.at(layer).output; }
};

/// Desk-scale two-stream encoder: word/position/segment embeddings, pre-LN
/// self-attention text layers, then cross layers in which text attends to
/// projected visual features, a final LayerNorm and a tanh pooler on the
/// first token. Padding keys are masked out of every attention.
template <class T>
class Encoder {
 public:
  explicit Encoder(ModelConfig config);

  const ModelConfig& config() const noexcept { return config_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  std::size_t param_count() const noexcept { return layout_.size(); }

  std::vector<T> init_params(std::uint64_t seed) const;

  // Word embedding table view (vocab_size x d_e) within a parameter vector.
  ConstMatrixView<T> word_embeddings(std::span<const T> params) const;
  MatrixView<T> word_embeddings(std::span<T> params) const;
  std::size_t word_embedding_offset() const noexcept { return emb_word_; }

  void forward(std::span<const T> params, const ExampleInput<T>& in, TokenId pad_id,
               ForwardState<T>& state) const;

  /// Accumulates parameter gradients into `grads` given upstream gradients
  /// w.r.t. the final hidden states and/or the pooled output (either may
  /// be empty).
  void backward(std::span<const T> params, const ForwardState<T>& state,
                std::span<const T> d_hidden, std::span<const T> d_pooled,
                std::span<T> grads) const;

  // Head logits. Masked-token logits are computed only for `positions`.
  void mlm_logits(std::span<const T> params, const ForwardState<T>& state,
                  std::span<const std::size_t> positions, std::span<T> logits) const;
  void mlm_backward(std::span<const T> params, const ForwardState<T>& state,
                    std::span<const std::size_t> positions, std::span<const T> d_logits,
                    std::span<T> d_hidden, std::span<T> grads) const;
  void classifier_logits(std::span<const T> params, const ForwardState<T>& state,
                         std::span<T> logits) const;
  void classifier_backward(std::span<const T> params, const ForwardState<T>& state,
                           std::span<const T> d_logits, std::span<T> d_pooled,
                           std::span<T> grads) const;
  T binary_logit(std::span<const T> params, const ForwardState<T>& state) const;
  void binary_backward(std::span<const T> params, const ForwardState<T>& state, T d_logit,
                       std::span<T> d_pooled, std::span<T> grads) const;

  /// Mean of a text layer's output over non-pad positions.
  std::vector<T> pooled_layer_representation(const ForwardState<T>& state, std::size_t layer) const;

 private:
  struct Linear {
    std::size_t w = 0, b = 0, out = 0, in = 0;
  };
  struct Norm {
    std::size_t g = 0, b = 0;
  };
  struct Block {
    Norm ln1;
    Linear q, k, v, o;
    Norm ln2;
    Linear ff1, ff2;
  };

  Linear add_linear(const std::string& name, std::size_t out, std::size_t in);
  Norm add_norm(const std::string& name);
  Block add_block(const std::string& name);

  void block_forward(std::span<const T> p, const Block& blk, std::span<const T> x,
                     std::size_t n, std::span<const T> kv_source, std::size_t n_keys,
                     std::span<const std::uint8_t> key_valid, bool self, BlockCache<T>& c) const;
  void block_backward(std::span<const T> p, const Block& blk, const BlockCache<T>& c,
                      std::size_t n, std::span<const T> kv_source, std::size_t n_keys, bool self,
                      std::span<T> d_out_in, std::span<T> d_kv_source, std::span<T> g) const;

  ModelConfig config_;
  ParamLayout layout_;
  std::size_t emb_word_ = 0, emb_pos_ = 0, emb_seg_ = 0;
  Norm emb_ln_;
  Linear vis_proj_;
  Norm vis_ln_;
  std::vector<Block> text_, cross_;
  Norm final_ln_;
  Linear pooler_, mlm_, cls_, bin_;
};

extern template class Encoder<float>;
extern template class Encoder<double>;

/// Numerically stable softmax cross-entropy of one row; writes
/// d loss / d logits into `grad` when non-empty.
template <class T>
T softmax_cross_entropy(std::span<const T> logits, std::size_t target, std::span<T> grad);

template <class T>
T binary_cross_entropy_with_logit(T logit, int label, T* grad);

/// Main-task loss over a batch of head outputs, mean over rows. For the
/// masked-token and classification heads `logits` is rows x classes; for
/// the binary head it is one logit per row.
template <class T>
T main_loss(ConstMatrixView<T> logits, std::span<const std::size_t> labels, HeadKind kind,
            MatrixView<T> grad = {});

}  // namespace kbalign
