#include "kbalign/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace kbalign {

namespace ks = kernels::serial;

std::string_view head_kind_name(HeadKind kind) {
  switch (kind) {
    case HeadKind::MaskedToken: return "masked-token";
    case HeadKind::Classification: return "classification";
    case HeadKind::Binary: return "binary";
  }
  return "?";
}

HeadKind parse_head_kind(std::string_view name) {
  if (name == "masked-token") return HeadKind::MaskedToken;
  if (name == "classification") return HeadKind::Classification;
  if (name == "binary") return HeadKind::Binary;
  throw Error(ErrorKind::InvalidArgument, "unknown head kind '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw Error(ErrorKind::InvalidArgument, std::string(what) + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_e, "d_e");
  positive(d_v, "d_v");
  positive(text_layers, "text_layers");
  positive(heads, "heads");
  positive(ffn_dim, "ffn_dim");
  positive(max_text_len, "max_text_len");
  positive(num_answers, "num_answers");
  if (!text_only) {
    positive(cross_layers, "cross_layers");
    positive(visual_dim, "visual_dim");
  }
  if (d_e % heads != 0) {
    throw Error(ErrorKind::InvalidArgument, "d_e must be divisible by the head count");
  }
}

Fingerprint ModelConfig::fingerprint() const {
  return Hasher()
      .str("model-config-v1")
      .u64(vocab_size)
      .u64(d_e)
      .u64(d_v)
      .u64(text_layers)
      .u64(text_only ? 0 : cross_layers)
      .u64(heads)
      .u64(ffn_dim)
      .u64(max_text_len)
      .u64(text_only ? 0 : visual_dim)
      .u64(num_answers)
      .u64(text_only)
      .value();
}

std::size_t ParamLayout::add(std::string name, std::size_t rows, std::size_t cols) {
  const std::size_t offset = total_;
  by_name_.emplace(name, tensors_.size());
  tensors_.push_back({std::move(name), rows, cols, offset});
  total_ += rows * cols;
  return offset;
}

const ParamLayout::Tensor* ParamLayout::find(std::string_view name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : &tensors_[it->second];
}

const ParamLayout::Tensor& ParamLayout::tensor(std::string_view name) const {
  if (const auto* t = find(name)) return *t;
  throw Error(ErrorKind::InvalidArgument, "no parameter tensor named '" + std::string(name) + "'");
}

namespace {

constexpr double kLayerNormEps = 1e-5;

template <class T>
void layer_norm_forward(std::span<const T> x, std::size_t rows, std::size_t d, const T* gamma,
                        const T* beta, std::span<T> y, LayerNormCache<T>& cache) {
  cache.xhat.resize(rows * d);
  cache.rstd.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xi = x.data() + i * d;
    T mean = 0;
    for (std::size_t k = 0; k < d; ++k) mean += xi[k];
    mean /= T(d);
    T var = 0;
    for (std::size_t k = 0; k < d; ++k) var += (xi[k] - mean) * (xi[k] - mean);
    var /= T(d);
    const T rstd = T(1) / std::sqrt(var + T(kLayerNormEps));
    cache.rstd[i] = rstd;
    T* xh = cache.xhat.data() + i * d;
    T* yi = y.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) {
      xh[k] = (xi[k] - mean) * rstd;
      yi[k] = gamma[k] * xh[k] + beta[k];
    }
  }
}

// dx += LN backward of dy.
template <class T>
void layer_norm_backward(std::span<const T> dy, std::size_t rows, std::size_t d, const T* gamma,
                         const LayerNormCache<T>& cache, std::span<T> dx, T* dgamma, T* dbeta) {
  std::vector<T> dxhat(d);
  for (std::size_t i = 0; i < rows; ++i) {
    const T* dyi = dy.data() + i * d;
    const T* xh = cache.xhat.data() + i * d;
    T mean_dxhat = 0, mean_dxhat_xhat = 0;
    for (std::size_t k = 0; k < d; ++k) {
      dgamma[k] += dyi[k] * xh[k];
      dbeta[k] += dyi[k];
      dxhat[k] = dyi[k] * gamma[k];
      mean_dxhat += dxhat[k];
      mean_dxhat_xhat += dxhat[k] * xh[k];
    }
    mean_dxhat /= T(d);
    mean_dxhat_xhat /= T(d);
    T* dxi = dx.data() + i * d;
    const T rstd = cache.rstd[i];
    for (std::size_t k = 0; k < d; ++k) {
      dxi[k] += rstd * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xhat);
    }
  }
}

template <class T>
T gelu(T u) {
  const T c = T(0.7978845608028654);
  return T(0.5) * u * (T(1) + std::tanh(c * (u + T(0.044715) * u * u * u)));
}

template <class T>
T gelu_grad(T u) {
  const T c = T(0.7978845608028654);
  const T t = std::tanh(c * (u + T(0.044715) * u * u * u));
  return T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * c * (T(1) + T(3) * T(0.044715) * u * u);
}

template <class T>
MatrixView<const T> cview(std::span<const T> s, std::size_t rows, std::size_t cols) {
  return {s.data(), rows, cols};
}
template <class T>
MatrixView<T> mview(std::span<T> s, std::size_t rows, std::size_t cols) {
  return {s.data(), rows, cols};
}

}  // namespace

template <class T>
Encoder<T>::Encoder(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t d = config_.d_e;
  emb_word_ = layout_.add("emb.word", config_.vocab_size, d);
  emb_pos_ = layout_.add("emb.pos", config_.max_text_len, d);
  emb_seg_ = layout_.add("emb.seg", 2, d);
  emb_ln_ = add_norm("emb.ln");
  for (std::size_t l = 0; l < config_.text_layers; ++l) {
    text_.push_back(add_block("text." + std::to_string(l)));
  }
  if (!config_.text_only) {
    vis_proj_ = add_linear("vis.proj", d, config_.visual_dim);
    vis_ln_ = add_norm("vis.ln");
    for (std::size_t l = 0; l < config_.cross_layers; ++l) {
      cross_.push_back(add_block("cross." + std::to_string(l)));
    }
  }
  final_ln_ = add_norm("final.ln");
  pooler_ = add_linear("pooler", d, d);
  mlm_ = add_linear("head.mlm", config_.vocab_size, d);
  cls_ = add_linear("head.cls", config_.num_answers, d);
  bin_ = add_linear("head.bin", 1, d);
}

template <class T>
typename Encoder<T>::Linear Encoder<T>::add_linear(const std::string& name, std::size_t out,
                                                   std::size_t in) {
  Linear l;
  l.out = out;
  l.in = in;
  l.w = layout_.add(name + ".w", out, in);
  l.b = layout_.add(name + ".b", 1, out);
  return l;
}

template <class T>
typename Encoder<T>::Norm Encoder<T>::add_norm(const std::string& name) {
  Norm n;
  n.g = layout_.add(name + ".g", 1, config_.d_e);
  n.b = layout_.add(name + ".b", 1, config_.d_e);
  return n;
}

template <class T>
typename Encoder<T>::Block Encoder<T>::add_block(const std::string& name) {
  const std::size_t d = config_.d_e;
  Block b;
  b.ln1 = add_norm(name + ".ln1");
  b.q = add_linear(name + ".q", d, d);
  b.k = add_linear(name + ".k", d, d);
  b.v = add_linear(name + ".v", d, d);
  b.o = add_linear(name + ".o", d, d);
  b.ln2 = add_norm(name + ".ln2");
  b.ff1 = add_linear(name + ".ff1", config_.ffn_dim, d);
  b.ff2 = add_linear(name + ".ff2", d, config_.ffn_dim);
  return b;
}

template <class T>
std::vector<T> Encoder<T>::init_params(std::uint64_t seed) const {
  std::vector<T> p(layout_.size(), T(0));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> emb(0.0, 0.02);
  for (const auto& t : layout_.tensors()) {
    T* data = p.data() + t.offset;
    const std::string& name = t.name;
    if (name.starts_with("emb.") && !name.starts_with("emb.ln")) {
      for (std::size_t i = 0; i < t.size(); ++i) data[i] = T(emb(rng));
    } else if (name.ends_with(".g")) {
      std::fill(data, data + t.size(), T(1));
    } else if (name.ends_with(".w")) {
      const double bound = 1.0 / std::sqrt(double(t.cols));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (std::size_t i = 0; i < t.size(); ++i) data[i] = T(u(rng));
    }
  }
  return p;
}

template <class T>
ConstMatrixView<T> Encoder<T>::word_embeddings(std::span<const T> params) const {
  return {params.data() + emb_word_, config_.vocab_size, config_.d_e};
}

template <class T>
MatrixView<T> Encoder<T>::word_embeddings(std::span<T> params) const {
  return {params.data() + emb_word_, config_.vocab_size, config_.d_e};
}

template <class T>
void Encoder<T>::block_forward(std::span<const T> p, const Block& blk, std::span<const T> x,
                               std::size_t n, std::span<const T> kv_source, std::size_t n_keys,
                               std::span<const std::uint8_t> key_valid, bool self,
                               BlockCache<T>& c) const {
  const std::size_t d = config_.d_e;
  const std::size_t heads = config_.heads;
  const std::size_t dh = d / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  const T* P = p.data();

  c.input.assign(x.begin(), x.end());
  c.a.resize(n * d);
  layer_norm_forward<T>(c.input, n, d, P + blk.ln1.g, P + blk.ln1.b, c.a, c.ln1);

  if (self) {
    kv_source = c.a;
    n_keys = n;
  }
  c.q.resize(n * d);
  c.k.resize(n_keys * d);
  c.v.resize(n_keys * d);
  c.probs.assign(heads * n * n_keys, T(0));
  c.attn.assign(n * d, T(0));
  c.mid = c.input;

  if (n_keys > 0) {
    ks::linear_forward<T>(cview<T>(c.a, n, d), {P + blk.q.w, d, d}, P + blk.q.b, mview<T>(c.q, n, d));
    ks::linear_forward<T>(cview(kv_source, n_keys, d), {P + blk.k.w, d, d}, P + blk.k.b,
                          mview<T>(c.k, n_keys, d));
    ks::linear_forward<T>(cview(kv_source, n_keys, d), {P + blk.v.w, d, d}, P + blk.v.b,
                          mview<T>(c.v, n_keys, d));
    std::vector<T> scores(n_keys);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        const T* qi = c.q.data() + i * d + h * dh;
        T max_s = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n_keys; ++j) {
          if (self && !key_valid[j]) continue;
          scores[j] = kernels::dot(qi, c.k.data() + j * d + h * dh, dh) * scale;
          max_s = std::max(max_s, scores[j]);
        }
        if (max_s == -std::numeric_limits<T>::infinity()) continue;  // no valid keys
        T* pr = c.probs.data() + (h * n + i) * n_keys;
        T sum = 0;
        for (std::size_t j = 0; j < n_keys; ++j) {
          if (self && !key_valid[j]) continue;
          pr[j] = std::exp(scores[j] - max_s);
          sum += pr[j];
        }
        T* out = c.attn.data() + i * d + h * dh;
        for (std::size_t j = 0; j < n_keys; ++j) {
          if (pr[j] == T(0)) continue;
          pr[j] /= sum;
          kernels::axpy(pr[j], c.v.data() + j * d + h * dh, out, dh);
        }
      }
    }
    std::vector<T> z(n * d);
    ks::linear_forward<T>(cview<T>(c.attn, n, d), {P + blk.o.w, d, d}, P + blk.o.b, mview<T>(z, n, d));
    for (std::size_t i = 0; i < n * d; ++i) c.mid[i] += z[i];
  }

  const std::size_t f = config_.ffn_dim;
  c.b.resize(n * d);
  layer_norm_forward<T>(c.mid, n, d, P + blk.ln2.g, P + blk.ln2.b, c.b, c.ln2);
  c.u.resize(n * f);
  ks::linear_forward<T>(cview<T>(c.b, n, d), {P + blk.ff1.w, f, d}, P + blk.ff1.b, mview<T>(c.u, n, f));
  c.g.resize(n * f);
  for (std::size_t i = 0; i < n * f; ++i) c.g[i] = gelu(c.u[i]);
  c.output.resize(n * d);
  ks::linear_forward<T>(cview<T>(c.g, n, f), {P + blk.ff2.w, d, f}, P + blk.ff2.b,
                        mview<T>(c.output, n, d));
  for (std::size_t i = 0; i < n * d; ++i) c.output[i] += c.mid[i];
}

template <class T>
void Encoder<T>::block_backward(std::span<const T> p, const Block& blk, const BlockCache<T>& c,
                                std::size_t n, std::span<const T> kv_source, std::size_t n_keys,
                                bool self, std::span<T> d_io, std::span<T> d_kv_source,
                                std::span<T> g) const {
  const std::size_t d = config_.d_e;
  const std::size_t f = config_.ffn_dim;
  const std::size_t heads = config_.heads;
  const std::size_t dh = d / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  const T* P = p.data();
  T* G = g.data();

  // Feed-forward sublayer: output = mid + ff2(gelu(ff1(ln2(mid)))).
  std::vector<T> d_mid(d_io.begin(), d_io.end());
  std::vector<T> dg(n * f, T(0));
  ks::linear_backward<T>(cview<T>(c.g, n, f), {P + blk.ff2.w, d, f}, cview<T>(d_io, n, d),
                         mview<T>(dg, n, f), {G + blk.ff2.w, d, f}, G + blk.ff2.b);
  for (std::size_t i = 0; i < n * f; ++i) dg[i] *= gelu_grad(c.u[i]);
  std::vector<T> db(n * d, T(0));
  ks::linear_backward<T>(cview<T>(c.b, n, d), {P + blk.ff1.w, f, d}, cview<T>(dg, n, f),
                         mview<T>(db, n, d), {G + blk.ff1.w, f, d}, G + blk.ff1.b);
  layer_norm_backward<T>(db, n, d, P + blk.ln2.g, c.ln2, d_mid, G + blk.ln2.g, G + blk.ln2.b);

  // Attention sublayer: mid = input + o(attn(q(a), k(src), v(src))).
  std::copy(d_mid.begin(), d_mid.end(), d_io.begin());
  if (self) {
    kv_source = c.a;
    n_keys = n;
  }
  if (n_keys == 0) return;

  std::vector<T> d_attn(n * d, T(0));
  ks::linear_backward<T>(cview<T>(c.attn, n, d), {P + blk.o.w, d, d}, cview<T>(d_mid, n, d),
                         mview<T>(d_attn, n, d), {G + blk.o.w, d, d}, G + blk.o.b);

  std::vector<T> dq(n * d, T(0)), dk(n_keys * d, T(0)), dv(n_keys * d, T(0));
  std::vector<T> dp(n_keys);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const T* pr = c.probs.data() + (h * n + i) * n_keys;
      const T* dai = d_attn.data() + i * d + h * dh;
      T weighted = 0;
      for (std::size_t j = 0; j < n_keys; ++j) {
        if (pr[j] == T(0)) {
          dp[j] = 0;
          continue;
        }
        dp[j] = kernels::dot(dai, c.v.data() + j * d + h * dh, dh);
        kernels::axpy(pr[j], dai, dv.data() + j * d + h * dh, dh);
        weighted += pr[j] * dp[j];
      }
      const T* qi = c.q.data() + i * d + h * dh;
      T* dqi = dq.data() + i * d + h * dh;
      for (std::size_t j = 0; j < n_keys; ++j) {
        if (pr[j] == T(0)) continue;
        const T ds = pr[j] * (dp[j] - weighted) * scale;
        kernels::axpy(ds, c.k.data() + j * d + h * dh, dqi, dh);
        kernels::axpy(ds, qi, dk.data() + j * d + h * dh, dh);
      }
    }
  }

  std::vector<T> da(n * d, T(0));
  ks::linear_backward<T>(cview<T>(c.a, n, d), {P + blk.q.w, d, d}, cview<T>(dq, n, d),
                         mview<T>(da, n, d), {G + blk.q.w, d, d}, G + blk.q.b);
  MatrixView<T> d_src = self ? mview<T>(da, n, d) : mview<T>(d_kv_source, n_keys, d);
  ks::linear_backward<T>(cview(kv_source, n_keys, d), {P + blk.k.w, d, d}, cview<T>(dk, n_keys, d),
                         d_src, {G + blk.k.w, d, d}, G + blk.k.b);
  ks::linear_backward<T>(cview(kv_source, n_keys, d), {P + blk.v.w, d, d}, cview<T>(dv, n_keys, d),
                         d_src, {G + blk.v.w, d, d}, G + blk.v.b);
  layer_norm_backward<T>(da, n, d, P + blk.ln1.g, c.ln1, d_io, G + blk.ln1.g, G + blk.ln1.b);
}

template <class T>
void Encoder<T>::forward(std::span<const T> params, const ExampleInput<T>& in, TokenId pad_id,
                         ForwardState<T>& s) const {
  const std::size_t d = config_.d_e;
  const std::size_t n = in.ids.size();
  if (params.size() != layout_.size()) {
    throw Error(ErrorKind::InvalidArgument, "parameter vector has wrong size");
  }
  if (n == 0) throw Error(ErrorKind::InvalidArgument, "shape mismatch: empty token sequence");
  if (n > config_.max_text_len) {
    throw Error(ErrorKind::InvalidArgument, "shape mismatch: " + std::to_string(n) +
                                                " tokens exceed max_text_len " +
                                                std::to_string(config_.max_text_len));
  }
  if (!in.segments.empty() && in.segments.size() != n) {
    throw Error(ErrorKind::InvalidArgument, "shape mismatch: segment count differs from token count");
  }
  const std::size_t m = config_.text_only ? 0 : in.visual_rows;
  if (m > 0 && in.visual.size() != m * config_.visual_dim) {
    throw Error(ErrorKind::InvalidArgument, "shape mismatch: visual features must be rows x " +
                                                std::to_string(config_.visual_dim));
  }

  const T* P = params.data();
  s.n = n;
  s.m = m;
  s.ids.assign(in.ids.begin(), in.ids.end());
  s.key_valid.resize(n);
  s.segments.resize(n);
  std::vector<T> x0(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const TokenId id = in.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw Error(ErrorKind::InvalidArgument, "token id " + std::to_string(id) + " out of range");
    }
    s.key_valid[i] = id != pad_id;
    const std::size_t seg = in.segments.empty() ? 0 : std::min<std::size_t>(in.segments[i], 1);
    s.segments[i] = static_cast<std::uint8_t>(seg);
    const T* e = P + emb_word_ + static_cast<std::size_t>(id) * d;
    const T* pe = P + emb_pos_ + i * d;
    const T* se = P + emb_seg_ + seg * d;
    for (std::size_t k = 0; k < d; ++k) x0[i * d + k] = e[k] + pe[k] + se[k];
  }
  s.embedded.resize(n * d);
  layer_norm_forward<T>(x0, n, d, P + emb_ln_.g, P + emb_ln_.b, s.embedded, s.emb_ln);

  s.text.resize(text_.size());
  std::span<const T> x = s.embedded;
  for (std::size_t l = 0; l < text_.size(); ++l) {
    block_forward(params, text_[l], x, n, {}, 0, s.key_valid, true, s.text[l]);
    x = s.text[l].output;
  }

  s.cross.resize(cross_.size());
  if (!cross_.empty()) {
    if (m > 0) {
      s.visual_in.assign(in.visual.begin(), in.visual.end());
      std::vector<T> vf(m * d);
      ks::linear_forward<T>(cview<T>(s.visual_in, m, config_.visual_dim),
                            {P + vis_proj_.w, d, config_.visual_dim}, P + vis_proj_.b,
                            mview<T>(vf, m, d));
      s.visual.resize(m * d);
      layer_norm_forward<T>(vf, m, d, P + vis_ln_.g, P + vis_ln_.b, s.visual, s.vis_ln);
    } else {
      s.visual_in.clear();
      s.visual.clear();
    }
    for (std::size_t l = 0; l < cross_.size(); ++l) {
      block_forward(params, cross_[l], x, n, s.visual, m, {}, false, s.cross[l]);
      x = s.cross[l].output;
    }
  }

  s.hidden.resize(n * d);
  layer_norm_forward<T>(x, n, d, P + final_ln_.g, P + final_ln_.b, s.hidden, s.final_ln);
  s.pooled.resize(d);
  ks::linear_forward<T>(cview<T>(s.hidden, 1, d), {P + pooler_.w, d, d}, P + pooler_.b,
                        mview<T>(s.pooled, 1, d));
  for (auto& v : s.pooled) v = std::tanh(v);
}

template <class T>
void Encoder<T>::backward(std::span<const T> params, const ForwardState<T>& s,
                          std::span<const T> d_hidden, std::span<const T> d_pooled,
                          std::span<T> grads) const {
  const std::size_t d = config_.d_e;
  const std::size_t n = s.n;
  const std::size_t m = s.m;
  const T* P = params.data();
  T* G = grads.data();

  std::vector<T> dh(n * d, T(0));
  if (!d_hidden.empty()) std::copy(d_hidden.begin(), d_hidden.end(), dh.begin());
  if (!d_pooled.empty()) {
    std::vector<T> d_pre(d);
    for (std::size_t k = 0; k < d; ++k) d_pre[k] = d_pooled[k] * (T(1) - s.pooled[k] * s.pooled[k]);
    ks::linear_backward<T>(cview<T>(s.hidden, 1, d), {P + pooler_.w, d, d}, cview<T>(d_pre, 1, d),
                           mview<T>(dh, 1, d), {G + pooler_.w, d, d}, G + pooler_.b);
  }

  std::vector<T> dx(n * d, T(0));
  layer_norm_backward<T>(dh, n, d, P + final_ln_.g, s.final_ln, dx, G + final_ln_.g, G + final_ln_.b);

  if (!cross_.empty()) {
    std::vector<T> d_visual(m * d, T(0));
    for (std::size_t l = cross_.size(); l-- > 0;) {
      block_backward(params, cross_[l], s.cross[l], n, s.visual, m, false, dx, d_visual, grads);
    }
    if (m > 0) {
      std::vector<T> d_vf(m * d, T(0));
      layer_norm_backward<T>(d_visual, m, d, P + vis_ln_.g, s.vis_ln, d_vf, G + vis_ln_.g, G + vis_ln_.b);
      ks::linear_backward<T>(cview<T>(s.visual_in, m, config_.visual_dim),
                             {P + vis_proj_.w, d, config_.visual_dim}, cview<T>(d_vf, m, d),
                             MatrixView<T>{}, {G + vis_proj_.w, d, config_.visual_dim}, G + vis_proj_.b);
    }
  }
  for (std::size_t l = text_.size(); l-- > 0;) {
    block_backward(params, text_[l], s.text[l], n, {}, 0, true, dx, {}, grads);
  }

  std::vector<T> dx0(n * d, T(0));
  layer_norm_backward<T>(dx, n, d, P + emb_ln_.g, s.emb_ln, dx0, G + emb_ln_.g, G + emb_ln_.b);
  for (std::size_t i = 0; i < n; ++i) {
    T* ge = G + emb_word_ + static_cast<std::size_t>(s.ids[i]) * d;
    T* gp = G + emb_pos_ + i * d;
    T* gs = G + emb_seg_ + s.segments[i] * d;
    for (std::size_t k = 0; k < d; ++k) {
      ge[k] += dx0[i * d + k];
      gp[k] += dx0[i * d + k];
      gs[k] += dx0[i * d + k];
    }
  }
}

template <class T>
void Encoder<T>::mlm_logits(std::span<const T> params, const ForwardState<T>& s,
                            std::span<const std::size_t> positions, std::span<T> logits) const {
  const std::size_t d = config_.d_e;
  const std::size_t V = config_.vocab_size;
  const T* P = params.data();
  for (std::size_t r = 0; r < positions.size(); ++r) {
    ks::linear_forward<T>({s.hidden.data() + positions[r] * d, 1, d}, {P + mlm_.w, V, d}, P + mlm_.b,
                          {logits.data() + r * V, 1, V});
  }
}

template <class T>
void Encoder<T>::mlm_backward(std::span<const T> params, const ForwardState<T>& s,
                              std::span<const std::size_t> positions, std::span<const T> d_logits,
                              std::span<T> d_hidden, std::span<T> grads) const {
  const std::size_t d = config_.d_e;
  const std::size_t V = config_.vocab_size;
  const T* P = params.data();
  T* G = grads.data();
  for (std::size_t r = 0; r < positions.size(); ++r) {
    ks::linear_backward<T>({s.hidden.data() + positions[r] * d, 1, d}, {P + mlm_.w, V, d},
                           {d_logits.data() + r * V, 1, V}, {d_hidden.data() + positions[r] * d, 1, d},
                           {G + mlm_.w, V, d}, G + mlm_.b);
  }
}

template <class T>
void Encoder<T>::classifier_logits(std::span<const T> params, const ForwardState<T>& s,
                                   std::span<T> logits) const {
  const std::size_t d = config_.d_e;
  const std::size_t K = config_.num_answers;
  const T* P = params.data();
  ks::linear_forward<T>(cview<T>(s.pooled, 1, d), {P + cls_.w, K, d}, P + cls_.b, mview<T>(logits, 1, K));
}

template <class T>
void Encoder<T>::classifier_backward(std::span<const T> params, const ForwardState<T>& s,
                                     std::span<const T> d_logits, std::span<T> d_pooled,
                                     std::span<T> grads) const {
  const std::size_t d = config_.d_e;
  const std::size_t K = config_.num_answers;
  const T* P = params.data();
  T* G = grads.data();
  ks::linear_backward<T>(cview<T>(s.pooled, 1, d), {P + cls_.w, K, d}, cview<T>(d_logits, 1, K),
                         mview<T>(d_pooled, 1, d), {G + cls_.w, K, d}, G + cls_.b);
}

template <class T>
T Encoder<T>::binary_logit(std::span<const T> params, const ForwardState<T>& s) const {
  const T* P = params.data();
  return P[bin_.b] + kernels::dot(P + bin_.w, s.pooled.data(), config_.d_e);
}

template <class T>
void Encoder<T>::binary_backward(std::span<const T> params, const ForwardState<T>& s, T d_logit,
                                 std::span<T> d_pooled, std::span<T> grads) const {
  const std::size_t d = config_.d_e;
  const T* P = params.data();
  T* G = grads.data();
  kernels::axpy(d_logit, s.pooled.data(), G + bin_.w, d);
  G[bin_.b] += d_logit;
  kernels::axpy(d_logit, P + bin_.w, d_pooled.data(), d);
}

template <class T>
std::vector<T> Encoder<T>::pooled_layer_representation(const ForwardState<T>& s,
                                                       std::size_t layer) const {
  if (layer >= text_.size()) {
    throw Error(ErrorKind::InvalidArgument, "layer " + std::to_string(layer) + " out of range (" +
                                                std::to_string(text_.size()) + " text layers)");
  }
  const std::size_t d = config_.d_e;
  std::vector<T> mean(d, T(0));
  const auto out = s.layer_output(layer);
  std::size_t count = 0;
  for (std::size_t i = 0; i < s.n; ++i) {
    if (!s.key_valid[i]) continue;
    kernels::axpy(T(1), out.data() + i * d, mean.data(), d);
    ++count;
  }
  if (count > 0) {
    for (auto& v : mean) v /= T(count);
  }
  return mean;
}

template class Encoder<float>;
template class Encoder<double>;

template <class T>
T softmax_cross_entropy(std::span<const T> logits, std::size_t target, std::span<T> grad) {
  if (target >= logits.size()) {
    throw Error(ErrorKind::InvalidArgument, "label " + std::to_string(target) +
                                                " out of range for " +
                                                std::to_string(logits.size()) + " classes");
  }
  const T max_l = *std::max_element(logits.begin(), logits.end());
  T sum = 0;
  for (T l : logits) sum += std::exp(l - max_l);
  const T log_z = max_l + std::log(sum);
  if (!grad.empty()) {
    for (std::size_t c = 0; c < logits.size(); ++c) grad[c] = std::exp(logits[c] - log_z);
    grad[target] -= T(1);
  }
  return log_z - logits[target];
}

template <class T>
T binary_cross_entropy_with_logit(T logit, int label, T* grad) {
  if (label != 0 && label != 1) {
    throw Error(ErrorKind::InvalidArgument, "binary label must be 0 or 1");
  }
  // log(1 + exp(-|x|)) + max(x, 0) - x * y
  const T loss = std::log1p(std::exp(-std::abs(logit))) + std::max(logit, T(0)) - logit * T(label);
  if (grad) *grad = T(1) / (T(1) + std::exp(-logit)) - T(label);
  return loss;
}

template <class T>
T main_loss(ConstMatrixView<T> logits, std::span<const std::size_t> labels, HeadKind kind,
            MatrixView<T> grad) {
  if (labels.size() != logits.rows) {
    throw Error(ErrorKind::InvalidArgument, "label count differs from logit rows");
  }
  if (logits.rows == 0) return T(0);
  T total = 0;
  const T inv = T(1) / T(logits.rows);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    if (kind == HeadKind::Binary) {
      if (logits.cols != 1) throw Error(ErrorKind::InvalidArgument, "binary head expects one logit per row");
      if (labels[r] > 1) throw Error(ErrorKind::InvalidArgument, "binary label must be 0 or 1");
      T g = 0;
      total += binary_cross_entropy_with_logit(logits(r, 0), static_cast<int>(labels[r]), &g);
      if (grad.data) grad(r, 0) = g * inv;
    } else {
      std::span<T> g;
      if (grad.data) g = {grad.row(r), logits.cols};
      total += softmax_cross_entropy<T>({logits.row(r), logits.cols}, labels[r], g);
      if (grad.data) {
        for (auto& v : g) v *= inv;
      }
    }
  }
  return total * inv;
}

template float softmax_cross_entropy<float>(std::span<const float>, std::size_t, std::span<float>);
template double softmax_cross_entropy<double>(std::span<const double>, std::size_t, std::span<double>);
template float binary_cross_entropy_with_logit<float>(float, int, float*);
template double binary_cross_entropy_with_logit<double>(double, int, double*);
template float main_loss<float>(ConstMatrixView<float>, std::span<const std::size_t>, HeadKind,
                                MatrixView<float>);
template double main_loss<double>(ConstMatrixView<double>, std::span<const std::size_t>, HeadKind,
                                  MatrixView<double>);

}  // namespace kbalign
