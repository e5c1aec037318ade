#pragma once

// A small BERT-style encoder classifier (post-norm blocks, learned token and
// position tables, classification token read-out) with hand-written reverse
// mode gradients. Templated on the scalar so training runs in float and
// gradient checks run in double.
//
// Sequences in a batch are packed back to back into one (tokens x d_model)
// matrix: the dense projections run over the whole pack and attention runs
// per sequence, so no padding is ever materialised.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <unsupported/Eigen/SpecialFunctions>

#include "attnlab/common.hpp"
#include "attnlab/dataset.hpp"

namespace attnlab {

using Index = Eigen::Index;

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <class S>
using MatMap = Eigen::Map<Mat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const Mat<S>>;
template <class S>
using ConstMatRef = Eigen::Ref<const Mat<S>>;

struct ModelConfig {
  int n_layers = 6;
  int n_heads = 8;
  int d_model = 128;
  int d_ff = 512;
  int vocab_size = kVocabSize;
  int max_len = 512;  // positions, including the two special tokens
  int n_classes = 10;
  double dropout = 0.1;
  std::uint64_t seed = 1;

  int d_head() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || max_len < 3 || n_classes < 2 ||
        vocab_size < kVocabSize) {
      throw Error(ErrorCode::InvalidArgument, "model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw Error(ErrorCode::InvalidArgument, "d_model must be divisible by n_heads");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
      throw Error(ErrorCode::InvalidArgument, "dropout must lie in [0, 1)");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::ordered_json& j, const ModelConfig& c) {
  j = nlohmann::ordered_json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads},
                             {"d_model", c.d_model},   {"d_ff", c.d_ff},
                             {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
                             {"n_classes", c.n_classes}, {"dropout", c.dropout},
                             {"seed", c.seed}};
}

inline void from_json(const nlohmann::ordered_json& j, ModelConfig& c) {
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.n_classes = j.at("n_classes").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

// ---------------------------------------------------------------------------
// Parameter layout

enum class BlockRole { TokenEmbedding, PositionEmbedding, Norm, Attention, FeedForward, Head };

struct BlockInfo {
  std::string name;
  BlockRole role;
  int layer;  // -1 outside the encoder stack
  Index rows;
  Index cols;
  std::size_t offset;

  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

/// Declared order of every parameter block inside one flat buffer.
class ParamLayout {
 public:
  struct Layer {
    int wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
  };

  ParamLayout() = default;

  explicit ParamLayout(const ModelConfig& c) {
    const Index d = c.d_model;
    tok = add("embed.token", BlockRole::TokenEmbedding, -1, c.vocab_size, d);
    pos = add("embed.position", BlockRole::PositionEmbedding, -1, c.max_len, d);
    emb_g = add("embed.norm.scale", BlockRole::Norm, -1, 1, d);
    emb_b = add("embed.norm.shift", BlockRole::Norm, -1, 1, d);
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      Layer L{};
      L.wq = add(p + "attn.query.weight", BlockRole::Attention, l, d, d);
      L.bq = add(p + "attn.query.bias", BlockRole::Attention, l, 1, d);
      L.wk = add(p + "attn.key.weight", BlockRole::Attention, l, d, d);
      L.bk = add(p + "attn.key.bias", BlockRole::Attention, l, 1, d);
      L.wv = add(p + "attn.value.weight", BlockRole::Attention, l, d, d);
      L.bv = add(p + "attn.value.bias", BlockRole::Attention, l, 1, d);
      L.wo = add(p + "attn.output.weight", BlockRole::Attention, l, d, d);
      L.bo = add(p + "attn.output.bias", BlockRole::Attention, l, 1, d);
      L.ln1_g = add(p + "attn.norm.scale", BlockRole::Norm, l, 1, d);
      L.ln1_b = add(p + "attn.norm.shift", BlockRole::Norm, l, 1, d);
      L.w1 = add(p + "ffn.in.weight", BlockRole::FeedForward, l, d, c.d_ff);
      L.b1 = add(p + "ffn.in.bias", BlockRole::FeedForward, l, 1, c.d_ff);
      L.w2 = add(p + "ffn.out.weight", BlockRole::FeedForward, l, c.d_ff, d);
      L.b2 = add(p + "ffn.out.bias", BlockRole::FeedForward, l, 1, d);
      L.ln2_g = add(p + "ffn.norm.scale", BlockRole::Norm, l, 1, d);
      L.ln2_b = add(p + "ffn.norm.shift", BlockRole::Norm, l, 1, d);
      layers.push_back(L);
    }
    cls_w = add("head.weight", BlockRole::Head, -1, d, c.n_classes);
    cls_b = add("head.bias", BlockRole::Head, -1, 1, c.n_classes);
  }

  const std::vector<BlockInfo>& blocks() const { return blocks_; }
  const BlockInfo& block(int id) const { return blocks_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return size_; }

  int tok = 0, pos = 0, emb_g = 0, emb_b = 0, cls_w = 0, cls_b = 0;
  std::vector<Layer> layers;

 private:
  int add(std::string name, BlockRole role, int layer, Index rows, Index cols) {
    blocks_.push_back(BlockInfo{std::move(name), role, layer, rows, cols, size_});
    size_ += static_cast<std::size_t>(rows * cols);
    return static_cast<int>(blocks_.size()) - 1;
  }

  std::vector<BlockInfo> blocks_;
  std::size_t size_ = 0;
};

/// Flat parameter-shaped storage. A fixed 64-byte base alignment keeps SIMD
/// kernel paths, and therefore rounding, identical from run to run.
template <class S>
using Buffer = std::vector<S, Eigen::aligned_allocator<S>>;

/// Views a block of any flat buffer laid out by `layout`.
template <class S>
MatMap<S> block_view(const ParamLayout& layout, Buffer<S>& buf, int id) {
  const BlockInfo& b = layout.block(id);
  return MatMap<S>(buf.data() + b.offset, b.rows, b.cols);
}

template <class S>
ConstMatMap<S> block_view(const ParamLayout& layout, const Buffer<S>& buf, int id) {
  const BlockInfo& b = layout.block(id);
  return ConstMatMap<S>(buf.data() + b.offset, b.rows, b.cols);
}

template <class S>
struct Params {
  ModelConfig config;
  ParamLayout layout;
  Buffer<S> values;

  Params() = default;
  explicit Params(const ModelConfig& c) : config(c), layout(c), values(layout.size(), S(0)) {
    c.validate();
  }

  MatMap<S> operator[](int id) { return block_view(layout, values, id); }
  ConstMatMap<S> operator[](int id) const { return block_view(layout, values, id); }

  /// Seeded initialisation: token table ~ N(0,1), position table sinusoidal,
  /// projections ~ N(0, 1/fan_in), biases 0, norm scales 1.
  static Params init(const ModelConfig& c) {
    Params p(c);
    Rng rng = Rng(c.seed).derive("init");
    for (int id = 0; id < static_cast<int>(p.layout.blocks().size()); ++id) {
      const BlockInfo& b = p.layout.block(id);
      auto m = p[id];
      const bool is_bias = b.rows == 1;
      if (b.role == BlockRole::TokenEmbedding) {
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.normal());
      } else if (b.role == BlockRole::PositionEmbedding) {
        for (Index r = 0; r < m.rows(); ++r) {
          for (Index k = 0; k < m.cols(); ++k) {
            const double freq = std::pow(10000.0, -static_cast<double>(k - k % 2) / static_cast<double>(m.cols()));
            const double angle = static_cast<double>(r) * freq;
            m(r, k) = static_cast<S>(k % 2 == 0 ? std::sin(angle) : std::cos(angle));
          }
        }
      } else if (b.role == BlockRole::Norm) {
        m.setConstant(b.name.ends_with("scale") ? S(1) : S(0));
      } else if (is_bias) {
        m.setZero();
      } else {
        const double sd = 1.0 / std::sqrt(static_cast<double>(b.rows));
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(sd * rng.normal());
      }
    }
    return p;
  }

  template <class T>
  Params<T> cast() const {
    Params<T> out(config);
    for (std::size_t i = 0; i < values.size(); ++i) out.values[i] = static_cast<T>(values[i]);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Freezing

/// Which parameter groups an optimiser may update. `layers` are encoder
/// block indices (0-based) trained in full.
struct FreezePolicy {
  std::vector<int> layers;
  bool norms = true;
  bool embeddings = false;
  bool head = true;

  static FreezePolicy all(int n_layers) {
    FreezePolicy p;
    for (int l = 0; l < n_layers; ++l) p.layers.push_back(l);
    p.embeddings = true;
    return p;
  }

  static FreezePolicy only_layer(int layer) {
    FreezePolicy p;
    p.layers = {layer};
    return p;
  }
};

inline void to_json(nlohmann::ordered_json& j, const FreezePolicy& p) {
  j = nlohmann::ordered_json{{"layers", p.layers}, {"norms", p.norms},
                             {"embeddings", p.embeddings}, {"head", p.head}};
}

inline void from_json(const nlohmann::ordered_json& j, FreezePolicy& p) {
  p.layers = j.at("layers").get<std::vector<int>>();
  p.norms = j.at("norms").get<bool>();
  p.embeddings = j.at("embeddings").get<bool>();
  p.head = j.at("head").get<bool>();
}

struct TrainMask {
  std::vector<char> block_trainable;
  std::size_t trainable_count = 0;
  std::size_t total_count = 0;

  bool trainable(int block) const { return block_trainable[static_cast<std::size_t>(block)] != 0; }
};

inline TrainMask apply_freeze(const ParamLayout& layout, int n_layers, const FreezePolicy& policy) {
  std::vector<char> layer_on(static_cast<std::size_t>(n_layers), 0);
  for (int l : policy.layers) {
    if (l < 0 || l >= n_layers) {
      throw Error(ErrorCode::InvalidLayerIndex,
                  "layer " + std::to_string(l) + " outside 0.." + std::to_string(n_layers - 1),
                  static_cast<std::size_t>(l < 0 ? 0 : l));
    }
    layer_on[static_cast<std::size_t>(l)] = 1;
  }
  TrainMask mask;
  for (const BlockInfo& b : layout.blocks()) {
    bool on = false;
    switch (b.role) {
      case BlockRole::TokenEmbedding:
      case BlockRole::PositionEmbedding: on = policy.embeddings; break;
      case BlockRole::Head: on = policy.head; break;
      case BlockRole::Norm:
        on = policy.norms || (b.layer >= 0 && layer_on[static_cast<std::size_t>(b.layer)]);
        break;
      case BlockRole::Attention:
      case BlockRole::FeedForward: on = layer_on[static_cast<std::size_t>(b.layer)] != 0; break;
    }
    mask.block_trainable.push_back(on ? 1 : 0);
    mask.total_count += b.size();
    if (on) mask.trainable_count += b.size();
  }
  if (mask.trainable_count == 0) {
    throw Error(ErrorCode::InvalidArgument, "freeze policy leaves nothing trainable");
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Attention

/// Row-stochastic scaled dot-product weights softmax(Q K^T / sqrt(d_head)).
/// `key_padding[j] != 0` marks key j as padding; such keys get exactly 0.
template <class S>
Mat<S> attention_weights(const ConstMatRef<S>& queries, const ConstMatRef<S>& keys,
                         std::span<const std::uint8_t> key_padding = {}) {
  if (queries.cols() != keys.cols()) {
    throw Error(ErrorCode::InvalidArgument, "query/key width mismatch");
  }
  if (!key_padding.empty() && static_cast<Index>(key_padding.size()) != keys.rows()) {
    throw Error(ErrorCode::InvalidArgument, "padding mask length differs from key count");
  }
  const S scale = S(1) / std::sqrt(static_cast<S>(queries.cols()));
  Mat<S> w(queries.rows(), keys.rows());
  w.noalias() = queries * keys.transpose();
  w *= scale;
  if (key_padding.empty()) {
    for (Index i = 0; i < w.rows(); ++i) {
      auto row = w.row(i);
      row.array() = (row.array() - row.maxCoeff()).exp();
      row /= row.sum();
    }
    return w;
  }
  bool any_key = false;
  for (auto m : key_padding) any_key |= (m == 0);
  if (!any_key) throw Error(ErrorCode::AllKeysMasked, "every key is padding", 0);
  for (Index i = 0; i < w.rows(); ++i) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Index j = 0; j < w.cols(); ++j) {
      if (!key_padding[static_cast<std::size_t>(j)]) mx = std::max(mx, w(i, j));
    }
    S sum = 0;
    for (Index j = 0; j < w.cols(); ++j) {
      const S e = key_padding[static_cast<std::size_t>(j)] ? S(0) : std::exp(w(i, j) - mx);
      w(i, j) = e;
      sum += e;
    }
    w.row(i) /= sum;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Forward / backward over packed batches

/// Token ids with the classification token prepended and separator appended.
inline std::vector<int> encode(const Tokens& tokens, const ModelConfig& c) {
  if (static_cast<int>(tokens.size()) + 2 > c.max_len) {
    throw Error(ErrorCode::SequenceTooLong,
                std::to_string(tokens.size()) + " tokens exceed max_len " + std::to_string(c.max_len),
                tokens.size());
  }
  std::vector<int> ids;
  ids.reserve(tokens.size() + 2);
  ids.push_back(kClsId);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    try {
      ids.push_back(token_id(tokens[i]));
    } catch (const Error& e) {
      throw Error(ErrorCode::UnknownToken, e.what(), i);
    }
    if (ids.back() >= c.vocab_size) throw Error(ErrorCode::UnknownToken, tokens[i], i);
  }
  ids.push_back(kSepId);
  return ids;
}

struct Batch {
  std::vector<int> ids;
  std::vector<Index> offsets;
  std::vector<Index> lengths;

  Index total() const { return static_cast<Index>(ids.size()); }
  std::size_t size() const { return offsets.size(); }

  void add(std::span<const int> seq) {
    offsets.push_back(total());
    lengths.push_back(static_cast<Index>(seq.size()));
    ids.insert(ids.end(), seq.begin(), seq.end());
  }
};

template <class S>
struct NormCache {
  Mat<S> xhat;
  Vec<S> rstd;
};

template <class S>
struct LayerCache {
  Mat<S> x_in, q, k, v, ctx;
  std::vector<Mat<S>> probs;  // [sequence * n_heads + head]
  Mat<S> drop1;               // empty when dropout is off
  NormCache<S> ln1;
  Mat<S> x1, h_pre, g;
  Mat<S> drop2;
  NormCache<S> ln2;
};

template <class S>
struct BatchCache {
  NormCache<S> emb_ln;
  Mat<S> emb_out;  // embedding norm output, before dropout
  Mat<S> drop0;
  std::vector<LayerCache<S>> layers;
  Mat<S> x_final;
  Mat<S> cls;
  Mat<S> logits;
};

namespace detail {

inline constexpr double kNormEps = 1e-5;

template <class S>
void layer_norm(const Mat<S>& x, const ConstMatMap<S>& gamma, const ConstMatMap<S>& beta, Mat<S>& y,
                NormCache<S>& cache) {
  const Index n = x.rows(), d = x.cols();
  cache.xhat.resize(n, d);
  cache.rstd.resize(n);
  y.resize(n, d);
  for (Index r = 0; r < n; ++r) {
    const S mean = x.row(r).mean();
    const S var = (x.row(r).array() - mean).square().mean();
    const S rstd = S(1) / std::sqrt(var + static_cast<S>(kNormEps));
    cache.rstd(r) = rstd;
    cache.xhat.row(r) = (x.row(r).array() - mean) * rstd;
    y.row(r) = cache.xhat.row(r).cwiseProduct(gamma.row(0)) + beta.row(0);
  }
}

/// Returns d(input); accumulates scale/shift gradients.
template <class S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const NormCache<S>& cache, const ConstMatMap<S>& gamma,
                           MatMap<S> dgamma, MatMap<S> dbeta) {
  dgamma.row(0) += dy.cwiseProduct(cache.xhat).colwise().sum();
  dbeta.row(0) += dy.colwise().sum();
  Mat<S> dxhat = dy.array().rowwise() * gamma.row(0).array();
  Mat<S> dx(dy.rows(), dy.cols());
  const S inv_d = S(1) / static_cast<S>(dy.cols());
  for (Index r = 0; r < dy.rows(); ++r) {
    const S m1 = dxhat.row(r).sum() * inv_d;
    const S m2 = dxhat.row(r).dot(cache.xhat.row(r)) * inv_d;
    dx.row(r) = cache.rstd(r) * (dxhat.row(r).array() - m1 - cache.xhat.row(r).array() * m2);
  }
  return dx;
}

template <class S>
void dropout_mask(Mat<S>& mask, Index rows, Index cols, double p, Rng& rng) {
  mask.resize(rows, cols);
  const S keep = static_cast<S>(1.0 / (1.0 - p));
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < p ? S(0) : keep;
}

template <class S>
Mat<S> gelu(const Mat<S>& x) {
  const S r2 = static_cast<S>(std::numbers::sqrt2);
  return (S(0.5) * x.array() * (S(1) + (x.array() / r2).erf())).matrix();
}

template <class S>
Mat<S> gelu_grad(const Mat<S>& x) {
  const S r2 = static_cast<S>(std::numbers::sqrt2);
  const S inv_sqrt_2pi = static_cast<S>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return (S(0.5) * (S(1) + (x.array() / r2).erf()) +
          x.array() * inv_sqrt_2pi * (S(-0.5) * x.array().square()).exp())
      .matrix();
}

template <class S>
void linear(const Mat<S>& x, const ConstMatMap<S>& w, const ConstMatMap<S>& b, Mat<S>& y) {
  y.resize(x.rows(), w.cols());
  y.noalias() = x * w;
  y.rowwise() += b.row(0);
}

}  // namespace detail

/// Runs the encoder over a packed batch and fills `cache`. Dropout is applied
/// only when `dropout_rng` is non-null and the configured rate is positive.
template <class S>
const Mat<S>& forward_batch(const Params<S>& p, const Batch& batch, BatchCache<S>& cache,
                            Rng* dropout_rng = nullptr) {
  const ModelConfig& c = p.config;
  const ParamLayout& L = p.layout;
  const Index T = batch.total(), d = c.d_model, H = c.n_heads, dh = c.d_head();
  const bool drop = dropout_rng != nullptr && c.dropout > 0.0;

  for (std::size_t s = 0; s < batch.size(); ++s) {
    if (batch.lengths[s] > c.max_len) {
      throw Error(ErrorCode::SequenceTooLong, "sequence longer than max_len", s);
    }
  }

  // Embeddings.
  Mat<S> e(T, d);
  {
    const auto tok = p[L.tok];
    const auto pos = p[L.pos];
    for (std::size_t s = 0; s < batch.size(); ++s) {
      for (Index i = 0; i < batch.lengths[s]; ++i) {
        const Index r = batch.offsets[s] + i;
        const int id = batch.ids[static_cast<std::size_t>(r)];
        if (id < 0 || id >= c.vocab_size) throw Error(ErrorCode::UnknownToken, "token id out of range", static_cast<std::size_t>(r));
        e.row(r) = tok.row(id) + pos.row(i);
      }
    }
  }
  detail::layer_norm<S>(e, p[L.emb_g], p[L.emb_b], cache.emb_out, cache.emb_ln);
  Mat<S> x = cache.emb_out;
  if (drop) {
    detail::dropout_mask(cache.drop0, T, d, c.dropout, *dropout_rng);
    x.array() *= cache.drop0.array();
  } else {
    cache.drop0.resize(0, 0);
  }

  cache.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& B = L.layers[static_cast<std::size_t>(l)];
    LayerCache<S>& lc = cache.layers[static_cast<std::size_t>(l)];
    lc.x_in = std::move(x);
    detail::linear<S>(lc.x_in, p[B.wq], p[B.bq], lc.q);
    detail::linear<S>(lc.x_in, p[B.wk], p[B.bk], lc.k);
    detail::linear<S>(lc.x_in, p[B.wv], p[B.bv], lc.v);
    lc.ctx.resize(T, d);
    lc.probs.resize(batch.size() * static_cast<std::size_t>(H));
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const Index o = batch.offsets[s], n = batch.lengths[s];
      for (Index h = 0; h < H; ++h) {
        Mat<S>& a = lc.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
        a = attention_weights<S>(lc.q.block(o, h * dh, n, dh), lc.k.block(o, h * dh, n, dh));
        lc.ctx.block(o, h * dh, n, dh).noalias() = a * lc.v.block(o, h * dh, n, dh);
      }
    }
    Mat<S> attn;
    detail::linear<S>(lc.ctx, p[B.wo], p[B.bo], attn);
    if (drop) {
      detail::dropout_mask(lc.drop1, T, d, c.dropout, *dropout_rng);
      attn.array() *= lc.drop1.array();
    } else {
      lc.drop1.resize(0, 0);
    }
    Mat<S> r1 = lc.x_in + attn;
    detail::layer_norm<S>(r1, p[B.ln1_g], p[B.ln1_b], lc.x1, lc.ln1);

    detail::linear<S>(lc.x1, p[B.w1], p[B.b1], lc.h_pre);
    lc.g = detail::gelu<S>(lc.h_pre);
    Mat<S> f;
    detail::linear<S>(lc.g, p[B.w2], p[B.b2], f);
    if (drop) {
      detail::dropout_mask(lc.drop2, T, d, c.dropout, *dropout_rng);
      f.array() *= lc.drop2.array();
    } else {
      lc.drop2.resize(0, 0);
    }
    Mat<S> r2 = lc.x1 + f;
    detail::layer_norm<S>(r2, p[B.ln2_g], p[B.ln2_b], x, lc.ln2);
  }
  cache.x_final = std::move(x);

  cache.cls.resize(static_cast<Index>(batch.size()), d);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    cache.cls.row(static_cast<Index>(s)) = cache.x_final.row(batch.offsets[s]);
  }
  detail::linear<S>(cache.cls, p[L.cls_w], p[L.cls_b], cache.logits);
  return cache.logits;
}

/// Mean cross-entropy of `logits` against `labels`.
template <class S>
S cross_entropy(const Mat<S>& logits, std::span<const int> labels) {
  S total = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const S mx = logits.row(r).maxCoeff();
    const S lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    total += lse - logits(r, labels[static_cast<std::size_t>(r)]);
  }
  return total / static_cast<S>(logits.rows());
}

/// Reverse pass over a cache filled by forward_batch. Overwrites `grad`
/// (same layout as the parameters) and returns the mean cross-entropy.
template <class S>
S backward_batch(const Params<S>& p, const Batch& batch, const BatchCache<S>& cache,
                 std::span<const int> labels, Buffer<S>& grad) {
  const ModelConfig& c = p.config;
  const ParamLayout& L = p.layout;
  const Index T = batch.total(), d = c.d_model, H = c.n_heads, dh = c.d_head();
  const auto B = static_cast<Index>(batch.size());
  if (static_cast<Index>(labels.size()) != B) {
    throw Error(ErrorCode::InvalidArgument, "label count differs from batch size");
  }

  grad.assign(p.values.size(), S(0));
  auto G = [&](int id) { return block_view(L, grad, id); };

  const S loss = cross_entropy<S>(cache.logits, labels);
  if (!std::isfinite(static_cast<double>(loss))) {
    throw Error(ErrorCode::NonFiniteLoss, "loss is not finite");
  }

  // Head.
  Mat<S> dlogits(B, c.n_classes);
  for (Index r = 0; r < B; ++r) {
    const S mx = cache.logits.row(r).maxCoeff();
    RowVec<S> e = (cache.logits.row(r).array() - mx).exp();
    dlogits.row(r) = e / e.sum();
    dlogits(r, labels[static_cast<std::size_t>(r)]) -= S(1);
  }
  dlogits /= static_cast<S>(B);
  G(L.cls_w).noalias() += cache.cls.transpose() * dlogits;
  G(L.cls_b).row(0) += dlogits.colwise().sum();
  Mat<S> dcls = dlogits * p[L.cls_w].transpose();

  Mat<S> dx = Mat<S>::Zero(T, d);
  for (Index s = 0; s < B; ++s) dx.row(batch.offsets[static_cast<std::size_t>(s)]) = dcls.row(s);

  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& Bk = L.layers[static_cast<std::size_t>(l)];
    const LayerCache<S>& lc = cache.layers[static_cast<std::size_t>(l)];

    // Feed-forward sub-block.
    Mat<S> dr2 = detail::layer_norm_backward<S>(dx, lc.ln2, p[Bk.ln2_g], G(Bk.ln2_g), G(Bk.ln2_b));
    Mat<S> df = dr2;
    if (lc.drop2.size() > 0) df.array() *= lc.drop2.array();
    G(Bk.w2).noalias() += lc.g.transpose() * df;
    G(Bk.b2).row(0) += df.colwise().sum();
    Mat<S> dh_pre = (df * p[Bk.w2].transpose()).cwiseProduct(detail::gelu_grad<S>(lc.h_pre));
    G(Bk.w1).noalias() += lc.x1.transpose() * dh_pre;
    G(Bk.b1).row(0) += dh_pre.colwise().sum();
    Mat<S> dx1 = dr2;
    dx1.noalias() += dh_pre * p[Bk.w1].transpose();

    // Attention sub-block.
    Mat<S> dr1 = detail::layer_norm_backward<S>(dx1, lc.ln1, p[Bk.ln1_g], G(Bk.ln1_g), G(Bk.ln1_b));
    Mat<S> dattn = dr1;
    if (lc.drop1.size() > 0) dattn.array() *= lc.drop1.array();
    G(Bk.wo).noalias() += lc.ctx.transpose() * dattn;
    G(Bk.bo).row(0) += dattn.colwise().sum();
    Mat<S> dctx = dattn * p[Bk.wo].transpose();

    Mat<S> dq(T, d), dk(T, d), dv(T, d);
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const Index o = batch.offsets[s], n = batch.lengths[s];
      for (Index h = 0; h < H; ++h) {
        const Mat<S>& a = lc.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
        const auto dctx_h = dctx.block(o, h * dh, n, dh);
        Mat<S> da = dctx_h * lc.v.block(o, h * dh, n, dh).transpose();
        dv.block(o, h * dh, n, dh).noalias() = a.transpose() * dctx_h;
        Vec<S> inner = a.cwiseProduct(da).rowwise().sum();
        Mat<S> ds = (a.array() * (da.colwise() - inner).array()).matrix() * scale;
        dq.block(o, h * dh, n, dh).noalias() = ds * lc.k.block(o, h * dh, n, dh);
        dk.block(o, h * dh, n, dh).noalias() = ds.transpose() * lc.q.block(o, h * dh, n, dh);
      }
    }
    G(Bk.wq).noalias() += lc.x_in.transpose() * dq;
    G(Bk.bq).row(0) += dq.colwise().sum();
    G(Bk.wk).noalias() += lc.x_in.transpose() * dk;
    G(Bk.bk).row(0) += dk.colwise().sum();
    G(Bk.wv).noalias() += lc.x_in.transpose() * dv;
    G(Bk.bv).row(0) += dv.colwise().sum();
    dx = dr1;
    dx.noalias() += dq * p[Bk.wq].transpose();
    dx.noalias() += dk * p[Bk.wk].transpose();
    dx.noalias() += dv * p[Bk.wv].transpose();
  }

  // Embeddings.
  if (cache.drop0.size() > 0) dx.array() *= cache.drop0.array();
  Mat<S> de = detail::layer_norm_backward<S>(dx, cache.emb_ln, p[L.emb_g], G(L.emb_g), G(L.emb_b));
  auto gtok = G(L.tok);
  auto gpos = G(L.pos);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    for (Index i = 0; i < batch.lengths[s]; ++i) {
      const Index r = batch.offsets[s] + i;
      gtok.row(batch.ids[static_cast<std::size_t>(r)]) += de.row(r);
      gpos.row(i) += de.row(r);
    }
  }
  return loss;
}

/// Loss and gradient for a list of (already encoded) sequences.
template <class S>
S backward(const Params<S>& p, const std::vector<std::vector<int>>& seqs, std::span<const int> labels,
           Buffer<S>& grad, Rng* dropout_rng = nullptr) {
  Batch batch;
  for (const auto& s : seqs) batch.add(s);
  BatchCache<S> cache;
  forward_batch(p, batch, cache, dropout_rng);
  return backward_batch(p, batch, cache, labels, grad);
}

// ---------------------------------------------------------------------------
// Single-sequence forward with optional trace capture

/// Attention indexed [layer][head] (query x key); hidden states indexed
/// [0..n_layers] (position x d_model) where entry 0 is the embedding output.
template <class S>
struct ForwardTrace {
  std::vector<std::string> tokens;  // including [CLS] and [SEP]
  std::vector<std::vector<Mat<S>>> attention;
  std::vector<Mat<S>> hidden;
  RowVec<S> logits;

  int n_layers() const { return static_cast<int>(attention.size()); }
  int n_heads() const { return attention.empty() ? 0 : static_cast<int>(attention[0].size()); }
  Index seq_len() const { return static_cast<Index>(tokens.size()); }
};

template <class S>
struct ForwardResult {
  RowVec<S> logits;
  std::optional<ForwardTrace<S>> trace;
};

template <class S>
ForwardResult<S> forward(const Params<S>& p, const Tokens& tokens, bool capture) {
  const std::vector<int> ids = encode(tokens, p.config);
  Batch batch;
  batch.add(ids);
  BatchCache<S> cache;
  forward_batch(p, batch, cache);
  ForwardResult<S> out;
  out.logits = cache.logits.row(0);
  if (capture) {
    ForwardTrace<S> t;
    t.tokens.reserve(ids.size());
    for (int id : ids) t.tokens.emplace_back(token_name(id));
    t.hidden.push_back(cache.emb_out);
    for (const auto& lc : cache.layers) {
      t.attention.push_back(lc.probs);
    }
    for (std::size_t l = 1; l < cache.layers.size(); ++l) t.hidden.push_back(cache.layers[l].x_in);
    t.hidden.push_back(cache.x_final);
    t.logits = out.logits;
    out.trace = std::move(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Central finite differences against the analytic gradient at `samples`
/// randomly chosen parameters, in double precision, dropout off.
/// Relative error is |a - n| / max(|a| + |n|, floor).
inline GradCheckResult grad_check(const ModelConfig& config, double eps, std::size_t samples = 128,
                                  std::uint64_t seed = 7, double floor = 1e-6) {
  ModelConfig c = config;
  c.dropout = 0.0;
  Params<double> p = Params<double>::init(c);
  Rng rng = Rng(seed).derive("grad-check");

  // Perturb norms and biases off their init values so their gradients are generic.
  for (double& v : p.values) v += 0.05 * rng.normal();

  const int max_body = std::min(6, c.max_len - 2);
  std::vector<std::vector<int>> seqs;
  std::vector<int> labels;
  for (int s = 0; s < 3; ++s) {
    const int len = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, max_body - 1))));
    std::vector<int> ids{kClsId};
    for (int i = 0; i < len; ++i) ids.push_back(3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(c.vocab_size - 3))));
    ids.push_back(kSepId);
    seqs.push_back(std::move(ids));
    labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(c.n_classes))));
  }

  Buffer<double> grad;
  backward(p, seqs, labels, grad);

  auto loss_at = [&](const Params<double>& q) {
    Batch b;
    for (const auto& s : seqs) b.add(s);
    BatchCache<double> cache;
    forward_batch(q, b, cache);
    return cross_entropy<double>(cache.logits, labels);
  };

  GradCheckResult out;
  for (std::size_t i = 0; i < samples; ++i) {
    const auto k = static_cast<std::size_t>(rng.below(p.values.size()));
    const double orig = p.values[k];
    p.values[k] = orig + eps;
    const double up = loss_at(p);
    p.values[k] = orig - eps;
    const double down = loss_at(p);
    p.values[k] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double rel = std::abs(grad[k] - numeric) / std::max(std::abs(grad[k]) + std::abs(numeric), floor);
    out.max_rel_error = std::max(out.max_rel_error, rel);
    ++out.checked;
  }
  return out;
}

}  // namespace attnlab
