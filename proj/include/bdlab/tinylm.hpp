#pragma once

// Miniature LLaMA-shaped causal transformer: learned token and position
// embeddings, pre-RMSNorm blocks with multi-head causal attention and a SiLU
// gated MLP, no biases. Forward and backward are written out by hand.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bdlab/errors.hpp"
#include "bdlab/lora.hpp"
#include "bdlab/rng.hpp"
#include "bdlab/tensor.hpp"
#include "bdlab/vocab.hpp"

namespace bdlab {

enum class Precision { kSingle, kDouble };

struct TinyLMConfig {
  int n_blocks = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_head = 32;
  int d_ff = 256;
  int vocab_size = 32;
  int max_seq = 32;
  Precision precision = Precision::kSingle;

  void validate() const {
    for (int v : {n_blocks, d_model, n_heads, d_head, d_ff, vocab_size, max_seq}) {
      if (v < 1) throw ConfigError("model config counts must be >= 1");
    }
    if (n_heads * d_head != d_model) {
      throw ConfigError("n_heads * d_head must equal d_model");
    }
    if (vocab_size < kNumReservedTokens) {
      throw ConfigError("vocab_size must be >= " + std::to_string(kNumReservedTokens) +
                        " reserved tokens");
    }
  }

  bool operator==(const TinyLMConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameter naming

namespace names {
inline constexpr const char* kTokEmb = "tok_emb.weight";
inline constexpr const char* kPosEmb = "pos_emb.weight";
inline constexpr const char* kFinalNorm = "norm.weight";
inline constexpr const char* kLmHead = "lm_head.weight";

// Projection kinds inside a block, e.g. "attn.q_proj" or "mlp.down_proj".
inline const std::vector<std::string>& attn_projs() {
  static const std::vector<std::string> v{"attn.q_proj", "attn.k_proj", "attn.v_proj",
                                          "attn.o_proj"};
  return v;
}
inline const std::vector<std::string>& mlp_projs() {
  static const std::vector<std::string> v{"mlp.gate_proj", "mlp.up_proj", "mlp.down_proj"};
  return v;
}

inline std::string block_prefix(int block) { return "blocks." + std::to_string(block) + "."; }
inline std::string proj(int block, const std::string& kind) {
  return block_prefix(block) + kind + ".weight";
}
inline std::string attn_norm(int block) { return block_prefix(block) + "attn_norm.weight"; }
inline std::string mlp_norm(int block) { return block_prefix(block) + "mlp_norm.weight"; }

// Parsed view of a parameter path.
struct PathInfo {
  int block = -1;     // -1 for non-block parameters
  std::string kind;   // "attn.q_proj", "attn_norm", "tok_emb", ...
  bool is_attn() const { return kind.rfind("attn.", 0) == 0; }
  bool is_mlp() const { return kind.rfind("mlp.", 0) == 0; }
};

inline PathInfo parse(const std::string& path) {
  PathInfo info;
  std::string rest = path;
  if (rest.rfind("blocks.", 0) == 0) {
    const auto dot = rest.find('.', 7);
    info.block = std::stoi(rest.substr(7, dot - 7));
    rest = rest.substr(dot + 1);
  }
  const std::string suffix = ".weight";
  if (rest.size() > suffix.size() && rest.compare(rest.size() - suffix.size(), suffix.size(), suffix) == 0) {
    rest.resize(rest.size() - suffix.size());
  }
  info.kind = rest;
  return info;
}
}  // namespace names

inline std::map<std::string, Shape> canonical_shapes(const TinyLMConfig& c) {
  c.validate();
  const std::int64_t d = c.d_model, f = c.d_ff, v = c.vocab_size;
  std::map<std::string, Shape> s;
  s[names::kTokEmb] = {v, d};
  s[names::kPosEmb] = {c.max_seq, d};
  s[names::kFinalNorm] = {d};
  s[names::kLmHead] = {v, d};
  for (int b = 0; b < c.n_blocks; ++b) {
    s[names::attn_norm(b)] = {d};
    s[names::mlp_norm(b)] = {d};
    for (const auto& p : names::attn_projs()) s[names::proj(b, p)] = {d, d};
    s[names::proj(b, "mlp.gate_proj")] = {f, d};
    s[names::proj(b, "mlp.up_proj")] = {f, d};
    s[names::proj(b, "mlp.down_proj")] = {d, f};
  }
  return s;
}

// Every attention and MLP projection, in canonical (sorted) order.
inline std::vector<std::string> projection_paths(const TinyLMConfig& c) {
  std::vector<std::string> out;
  for (const auto& [name, shape] : canonical_shapes(c)) {
    const auto info = names::parse(name);
    if (info.is_attn() || info.is_mlp()) out.push_back(name);
  }
  return out;
}

template <typename T>
struct ParamStore {
  TinyLMConfig config;
  TensorMap<T> tensors;

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw StructuralError("missing parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw StructuralError("missing parameter '" + name + "'");
    return it->second;
  }

  // Key set and shapes must match the config exactly.
  void validate() const {
    const auto shapes = canonical_shapes(config);
    if (shapes.size() != tensors.size()) {
      throw StructuralError("parameter set does not match config");
    }
    for (const auto& [name, shape] : shapes) {
      const auto& t = at(name);
      if (t.shape != shape) {
        throw StructuralError("shape mismatch at '" + name + "': expected " + shape_str(shape) +
                              ", got " + shape_str(t.shape));
      }
      if (t.data.size() != static_cast<std::size_t>(numel(shape))) {
        throw StructuralError("data size mismatch at '" + name + "'");
      }
    }
  }

  bool operator==(const ParamStore&) const = default;
};

// Gradient of the loss; key/shape parity with the params it was computed for.
template <typename T>
struct GradStore {
  TensorMap<T> tensors;
};

template <typename T>
T xavier_bound(const Shape& shape) {
  return static_cast<T>(std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1])));
}

template <typename T>
void fill_xavier(Tensor<T>& t, Rng& rng) {
  const double b = std::sqrt(6.0 / static_cast<double>(t.shape[0] + t.shape[1]));
  for (auto& x : t.data) x = static_cast<T>(uniform(rng, -b, b));
}

// Matrices Xavier-uniform, norm gains one. Tensors are drawn in key order.
template <typename T>
ParamStore<T> init_params(const TinyLMConfig& config, std::uint64_t seed) {
  ParamStore<T> p;
  p.config = config;
  Rng rng = make_rng(seed, 0x1417);
  for (const auto& [name, shape] : canonical_shapes(config)) {
    Tensor<T> t(shape);
    if (shape.size() == 1) {
      std::fill(t.data.begin(), t.data.end(), T(1));
    } else {
      fill_xavier(t, rng);
    }
    p.tensors.emplace(name, std::move(t));
  }
  return p;
}

// W + (alpha/r) A B^T on every adapter target; returns a new store.
template <typename T>
ParamStore<T> merge_adapter(const ParamStore<T>& params, const LoraAdapter<T>& adapter) {
  ParamStore<T> out = params;
  const T s = adapter.scale();
  for (const auto& [name, pair] : adapter.targets) {
    auto it = out.tensors.find(name);
    if (it == out.tensors.end()) throw AdapterError("adapter target '" + name + "' not in model");
    auto& w = it->second;
    if (w.shape.size() != 2 || pair.A.shape.size() != 2 || pair.B.shape.size() != 2 ||
        pair.A.shape[0] != w.shape[0] || pair.B.shape[0] != w.shape[1] ||
        pair.A.shape[1] != adapter.rank || pair.B.shape[1] != adapter.rank) {
      throw AdapterError("adapter shape mismatch at '" + name + "'");
    }
    const auto upd = effective_update(pair, s);
    for (std::size_t i = 0; i < w.data.size(); ++i) w.data[i] += upd.data[i];
  }
  return out;
}

// Adapter with Xavier A and zero B over the given targets (zero effective update).
template <typename T>
LoraAdapter<T> init_adapter(const ParamStore<T>& base, const std::vector<std::string>& targets,
                            int rank, double alpha, std::uint64_t seed) {
  if (rank < 1) throw ConfigError("adapter rank must be >= 1");
  LoraAdapter<T> a;
  a.rank = rank;
  a.alpha = alpha;
  Rng rng = make_rng(seed, 0x10a);
  for (const auto& name : targets) {
    const auto& w = base.at(name);
    if (w.shape.size() != 2) throw AdapterError("adapter target '" + name + "' is not a matrix");
    LoraPair<T> pair{Tensor<T>(Shape{w.shape[0], rank}), Tensor<T>(Shape{w.shape[1], rank})};
    fill_xavier(pair.A, rng);
    a.targets.emplace(name, std::move(pair));
  }
  return a;
}

template <typename T>
void validate_adapter(const ParamStore<T>& base, const LoraAdapter<T>& adapter) {
  for (const auto& [name, pair] : adapter.targets) {
    auto it = base.tensors.find(name);
    if (it == base.tensors.end()) throw AdapterError("adapter target '" + name + "' not in model");
    const auto& w = it->second;
    if (pair.A.shape != Shape{w.shape[0], adapter.rank} ||
        pair.B.shape != Shape{w.shape[1], adapter.rank}) {
      throw AdapterError("adapter shape mismatch at '" + name + "'");
    }
  }
}

inline void validate_tokens(const TinyLMConfig& c, const TokenSeq& s) {
  if (s.empty()) throw InputError("empty token sequence");
  if (static_cast<int>(s.size()) > c.max_seq) {
    throw InputError("sequence length " + std::to_string(s.size()) + " exceeds max_seq " +
                     std::to_string(c.max_seq));
  }
  for (Token t : s) {
    if (t < 0 || t >= c.vocab_size) {
      throw InputError("token id " + std::to_string(t) + " out of vocabulary");
    }
  }
}

// One training/eval example: next-token targets and a per-position loss mask.
struct LmExample {
  TokenSeq input;
  TokenSeq target;
  std::vector<std::uint8_t> mask;
};

// Which gradients backward() should accumulate.
struct GradRequest {
  bool params = true;
  bool adapter = false;
};

// Forward/backward engine over a fixed parameter set (plus optional adapter
// applied on the fly as x W^T + s (x B) A^T). Holds a mutable activation
// cache, so one instance must not be shared across threads.
template <typename T>
class Transformer {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  static constexpr T kNormEps = T(1e-5);

  explicit Transformer(const ParamStore<T>& params, const LoraAdapter<T>* adapter = nullptr)
      : p_(params), adapter_(adapter), c_(params.config) {
    c_.validate();
    if (adapter_) validate_adapter(p_, *adapter_);
  }

  // Runs the stack over a batch of sequences. Returns logits [total_tokens, vocab];
  // rows of sequence s start at offsets()[s].
  const Mat& run(std::span<const TokenSeq> seqs) {
    lengths_.clear();
    offsets_.clear();
    std::int64_t total = 0;
    for (const auto& s : seqs) {
      validate_tokens(c_, s);
      offsets_.push_back(total);
      lengths_.push_back(static_cast<std::int64_t>(s.size()));
      total += static_cast<std::int64_t>(s.size());
    }
    tokens_.assign(seqs.begin(), seqs.end());
    const int d = c_.d_model;

    Mat x(total, d);
    auto tok = weight(names::kTokEmb, c_.vocab_size, d);
    auto pos = weight(names::kPosEmb, c_.max_seq, d);
    for (std::size_t s = 0; s < tokens_.size(); ++s) {
      for (std::int64_t t = 0; t < lengths_[s]; ++t) {
        x.row(offsets_[s] + t) = tok.row(tokens_[s][t]) + pos.row(t);
      }
    }

    blocks_.resize(c_.n_blocks);
    for (int b = 0; b < c_.n_blocks; ++b) {
      auto& bc = blocks_[b];
      bc.x_in = x;
      rms_forward(bc.x_in, gain(names::attn_norm(b)), bc.a, bc.r1);
      linear(bc.a, names::proj(b, "attn.q_proj"), bc.q);
      linear(bc.a, names::proj(b, "attn.k_proj"), bc.k);
      linear(bc.a, names::proj(b, "attn.v_proj"), bc.v);
      attention_forward(bc);
      Mat o;
      linear(bc.att, names::proj(b, "attn.o_proj"), o);
      bc.x_mid = bc.x_in + o;
      rms_forward(bc.x_mid, gain(names::mlp_norm(b)), bc.m, bc.r2);
      linear(bc.m, names::proj(b, "mlp.gate_proj"), bc.g);
      linear(bc.m, names::proj(b, "mlp.up_proj"), bc.u);
      bc.z.resize(bc.g.rows(), bc.g.cols());
      for (Eigen::Index i = 0; i < bc.g.size(); ++i) {
        bc.z.data()[i] = silu(bc.g.data()[i]) * bc.u.data()[i];
      }
      Mat down;
      linear(bc.z, names::proj(b, "mlp.down_proj"), down);
      x = bc.x_mid + down;
    }
    x_out_ = std::move(x);
    rms_forward(x_out_, gain(names::kFinalNorm), f_, rf_);
    linear(f_, names::kLmHead, logits_);
    return logits_;
  }

  const std::vector<std::int64_t>& offsets() const { return offsets_; }

  // Mean masked cross-entropy over the batch plus its gradients.
  // grads/adapter_grads are accumulated into (they must be zero-initialised
  // by the caller, e.g. via zero_grads()/zero_adapter_grads()).
  T loss_and_backward(std::span<const LmExample> batch, GradStore<T>* grads,
                      LoraAdapter<T>* adapter_grads) {
    std::vector<TokenSeq> inputs;
    inputs.reserve(batch.size());
    std::size_t masked = 0;
    for (const auto& ex : batch) {
      if (ex.target.size() != ex.input.size() || ex.mask.size() != ex.input.size()) {
        throw InputError("target/mask not aligned with input");
      }
      for (auto m : ex.mask) masked += m ? 1 : 0;
      inputs.push_back(ex.input);
    }
    if (masked == 0) throw InputError("loss mask is empty");
    run(inputs);

    const int V = c_.vocab_size;
    Mat dlogits = Mat::Zero(logits_.rows(), V);
    double loss = 0;
    const T inv = T(1) / static_cast<T>(masked);
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const auto& ex = batch[s];
      for (std::int64_t t = 0; t < lengths_[s]; ++t) {
        if (!ex.mask[t]) continue;
        const Token y = ex.target[t];
        if (y < 0 || y >= V) throw InputError("target token out of vocabulary");
        const auto row = offsets_[s] + t;
        const T mx = logits_.row(row).maxCoeff();
        T sum = 0;
        for (int j = 0; j < V; ++j) sum += std::exp(logits_(row, j) - mx);
        const T lse = mx + std::log(sum);
        loss += static_cast<double>(lse - logits_(row, y));
        for (int j = 0; j < V; ++j) dlogits(row, j) = std::exp(logits_(row, j) - lse) * inv;
        dlogits(row, y) -= inv;
      }
    }
    if (grads || adapter_grads) backward(dlogits, grads, adapter_grads);
    return static_cast<T>(loss / static_cast<double>(masked));
  }

  // Mean post-activation |silu(gate) * up| per MLP channel over all rows of the
  // last run(); one vector of length d_ff per block.
  std::vector<std::vector<double>> channel_activation_sums() const {
    std::vector<std::vector<double>> out(c_.n_blocks, std::vector<double>(c_.d_ff, 0.0));
    for (int b = 0; b < c_.n_blocks; ++b) {
      const auto& z = blocks_[b].z;
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        for (Eigen::Index j = 0; j < z.cols(); ++j) out[b][j] += std::abs(static_cast<double>(z(i, j)));
      }
    }
    return out;
  }

 private:
  struct BlockCache {
    Mat x_in, a, q, k, v, att, x_mid, m, g, u, z;
    std::vector<T> r1, r2;
    std::vector<Mat> probs;  // [seq * n_heads + head], each L x L
  };

  Eigen::Map<const Mat> weight(const std::string& name, Eigen::Index rows, Eigen::Index cols) const {
    const auto& t = p_.at(name);
    return Eigen::Map<const Mat>(t.data.data(), rows, cols);
  }
  Eigen::Map<const Mat> weight(const std::string& name) const {
    const auto& t = p_.at(name);
    return Eigen::Map<const Mat>(t.data.data(), t.shape[0], t.shape[1]);
  }
  Eigen::Map<const Vec> gain(const std::string& name) const {
    const auto& t = p_.at(name);
    return Eigen::Map<const Vec>(t.data.data(), t.shape[0]);
  }
  const LoraPair<T>* lora(const std::string& name) const {
    if (!adapter_) return nullptr;
    auto it = adapter_->targets.find(name);
    return it == adapter_->targets.end() ? nullptr : &it->second;
  }

  static T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }
  static T silu(T x) { return x * sigmoid(x); }

  void linear(const Mat& x, const std::string& name, Mat& y) const {
    auto w = weight(name);
    y.noalias() = x * w.transpose();
    if (const auto* pair = lora(name)) {
      const auto r = adapter_->rank;
      Eigen::Map<const Mat> A(pair->A.data.data(), pair->A.shape[0], r);
      Eigen::Map<const Mat> B(pair->B.data.data(), pair->B.shape[0], r);
      Mat xb = x * B;
      y.noalias() += adapter_->scale() * (xb * A.transpose());
    }
  }

  // dx = dy * W (+ LoRA path); accumulates dW / dA / dB as requested.
  void linear_backward(const Mat& x, const Mat& dy, const std::string& name, Mat& dx,
                       GradStore<T>* grads, LoraAdapter<T>* adapter_grads) const {
    auto w = weight(name);
    if (grads) {
      auto& g = grads->tensors.at(name);
      Eigen::Map<Mat> dw(g.data.data(), g.shape[0], g.shape[1]);
      dw.noalias() += dy.transpose() * x;
    }
    dx.noalias() = dy * w;
    if (const auto* pair = lora(name)) {
      const auto r = adapter_->rank;
      const T s = adapter_->scale();
      Eigen::Map<const Mat> A(pair->A.data.data(), pair->A.shape[0], r);
      Eigen::Map<const Mat> B(pair->B.data.data(), pair->B.shape[0], r);
      Mat dya = dy * A;
      if (adapter_grads) {
        auto& gp = adapter_grads->targets.at(name);
        Eigen::Map<Mat> dA(gp.A.data.data(), gp.A.shape[0], r);
        Eigen::Map<Mat> dB(gp.B.data.data(), gp.B.shape[0], r);
        Mat xb = x * B;
        dA.noalias() += s * (dy.transpose() * xb);
        dB.noalias() += s * (x.transpose() * dya);
      }
      dx.noalias() += s * (dya * B.transpose());
    }
  }

  void rms_forward(const Mat& x, const Eigen::Map<const Vec>& g, Mat& y, std::vector<T>& r) const {
    const auto d = x.cols();
    y.resize(x.rows(), d);
    r.resize(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const T ms = x.row(i).squaredNorm() / static_cast<T>(d);
      const T ri = T(1) / std::sqrt(ms + kNormEps);
      r[i] = ri;
      y.row(i) = (x.row(i) * ri).cwiseProduct(g.transpose());
    }
  }

  // Returns dx; accumulates dgain into grads[gain_name] when requested.
  void rms_backward(const Mat& x, const std::vector<T>& r, const std::string& gain_name,
                    const Mat& dy, Mat& dx, GradStore<T>* grads) const {
    auto g = gain(gain_name);
    const auto d = x.cols();
    dx.resize(x.rows(), d);
    T* dg = grads ? grads->tensors.at(gain_name).data.data() : nullptr;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const T ri = r[i];
      if (dg) {
        for (Eigen::Index j = 0; j < d; ++j) dg[j] += dy(i, j) * x(i, j) * ri;
      }
      const Eigen::Matrix<T, 1, Eigen::Dynamic> u = dy.row(i).cwiseProduct(g.transpose());
      const T dot = u.dot(x.row(i));
      dx.row(i) = ri * u - (ri * ri * ri * dot / static_cast<T>(d)) * x.row(i);
    }
  }

  void attention_forward(BlockCache& bc) const {
    const int H = c_.n_heads, dh = c_.d_head;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    bc.att.resize(bc.q.rows(), c_.d_model);
    bc.probs.resize(lengths_.size() * H);
    for (std::size_t s = 0; s < lengths_.size(); ++s) {
      const auto o = offsets_[s], L = lengths_[s];
      for (int h = 0; h < H; ++h) {
        auto q = bc.q.block(o, h * dh, L, dh);
        auto k = bc.k.block(o, h * dh, L, dh);
        auto v = bc.v.block(o, h * dh, L, dh);
        Mat& P = bc.probs[s * H + h];
        P.noalias() = scale * (q * k.transpose());
        for (Eigen::Index i = 0; i < L; ++i) {
          T mx = -std::numeric_limits<T>::infinity();
          for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, P(i, j));
          T sum = 0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            P(i, j) = std::exp(P(i, j) - mx);
            sum += P(i, j);
          }
          for (Eigen::Index j = 0; j <= i; ++j) P(i, j) /= sum;
          for (Eigen::Index j = i + 1; j < L; ++j) P(i, j) = T(0);
        }
        bc.att.block(o, h * dh, L, dh).noalias() = P * v;
      }
    }
  }

  void attention_backward(const BlockCache& bc, const Mat& datt, Mat& dq, Mat& dk, Mat& dv) const {
    const int H = c_.n_heads, dh = c_.d_head;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    dq.setZero(bc.q.rows(), c_.d_model);
    dk.setZero(bc.q.rows(), c_.d_model);
    dv.setZero(bc.q.rows(), c_.d_model);
    for (std::size_t s = 0; s < lengths_.size(); ++s) {
      const auto o = offsets_[s], L = lengths_[s];
      for (int h = 0; h < H; ++h) {
        const Mat& P = bc.probs[s * H + h];
        auto q = bc.q.block(o, h * dh, L, dh);
        auto k = bc.k.block(o, h * dh, L, dh);
        auto v = bc.v.block(o, h * dh, L, dh);
        auto dout = datt.block(o, h * dh, L, dh);
        Mat dP = dout * v.transpose();
        dv.block(o, h * dh, L, dh).noalias() = P.transpose() * dout;
        Mat dS(L, L);
        for (Eigen::Index i = 0; i < L; ++i) {
          const T row = P.row(i).dot(dP.row(i));
          for (Eigen::Index j = 0; j < L; ++j) dS(i, j) = P(i, j) * (dP(i, j) - row) * scale;
        }
        dq.block(o, h * dh, L, dh).noalias() = dS * k;
        dk.block(o, h * dh, L, dh).noalias() = dS.transpose() * q;
      }
    }
  }

  void backward(const Mat& dlogits, GradStore<T>* grads, LoraAdapter<T>* adapter_grads) {
    const int d = c_.d_model;
    Mat df, dx;
    linear_backward(f_, dlogits, names::kLmHead, df, grads, adapter_grads);
    rms_backward(x_out_, rf_, names::kFinalNorm, df, dx, grads);

    Mat tmp, dm, da, dq, dk, dv, t1;
    for (int b = c_.n_blocks - 1; b >= 0; --b) {
      const auto& bc = blocks_[b];
      // MLP: x = x_mid + down(silu(g) * u)
      Mat dz;
      linear_backward(bc.z, dx, names::proj(b, "mlp.down_proj"), dz, grads, adapter_grads);
      Mat dg(dz.rows(), dz.cols()), du(dz.rows(), dz.cols());
      for (Eigen::Index i = 0; i < dz.size(); ++i) {
        const T gv = bc.g.data()[i];
        const T sg = sigmoid(gv);
        const T sl = gv * sg;
        du.data()[i] = dz.data()[i] * sl;
        dg.data()[i] = dz.data()[i] * bc.u.data()[i] * sg * (T(1) + gv * (T(1) - sg));
      }
      linear_backward(bc.m, dg, names::proj(b, "mlp.gate_proj"), dm, grads, adapter_grads);
      linear_backward(bc.m, du, names::proj(b, "mlp.up_proj"), t1, grads, adapter_grads);
      dm += t1;
      rms_backward(bc.x_mid, bc.r2, names::mlp_norm(b), dm, tmp, grads);
      Mat dx_mid = dx + tmp;

      // Attention: x_mid = x_in + o_proj(att)
      Mat datt;
      linear_backward(bc.att, dx_mid, names::proj(b, "attn.o_proj"), datt, grads, adapter_grads);
      attention_backward(bc, datt, dq, dk, dv);
      linear_backward(bc.a, dq, names::proj(b, "attn.q_proj"), da, grads, adapter_grads);
      linear_backward(bc.a, dk, names::proj(b, "attn.k_proj"), t1, grads, adapter_grads);
      da += t1;
      linear_backward(bc.a, dv, names::proj(b, "attn.v_proj"), t1, grads, adapter_grads);
      da += t1;
      rms_backward(bc.x_in, bc.r1, names::attn_norm(b), da, tmp, grads);
      dx = dx_mid + tmp;
    }

    if (grads) {
      auto& dtok = grads->tensors.at(names::kTokEmb);
      auto& dpos = grads->tensors.at(names::kPosEmb);
      for (std::size_t s = 0; s < tokens_.size(); ++s) {
        for (std::int64_t t = 0; t < lengths_[s]; ++t) {
          const auto row = offsets_[s] + t;
          T* te = dtok.data.data() + static_cast<std::size_t>(tokens_[s][t]) * d;
          T* pe = dpos.data.data() + static_cast<std::size_t>(t) * d;
          for (int j = 0; j < d; ++j) {
            te[j] += dx(row, j);
            pe[j] += dx(row, j);
          }
        }
      }
    }
  }

  const ParamStore<T>& p_;
  const LoraAdapter<T>* adapter_;
  TinyLMConfig c_;
  std::vector<TokenSeq> tokens_;
  std::vector<std::int64_t> lengths_, offsets_;
  std::vector<BlockCache> blocks_;
  Mat x_out_, f_, logits_;
  std::vector<T> rf_;
};

template <typename T>
GradStore<T> zero_grads(const ParamStore<T>& params) {
  GradStore<T> g;
  for (const auto& [name, t] : params.tensors) g.tensors.emplace(name, Tensor<T>(t.shape));
  return g;
}

template <typename T>
LoraAdapter<T> zero_adapter_grads(const LoraAdapter<T>& adapter) {
  LoraAdapter<T> g;
  g.rank = adapter.rank;
  g.alpha = adapter.alpha;
  for (const auto& [name, pair] : adapter.targets) {
    g.targets.emplace(name, LoraPair<T>{Tensor<T>(pair.A.shape), Tensor<T>(pair.B.shape)});
  }
  return g;
}

// Logits [len, vocab] for a single sequence.
template <typename T>
Tensor<T> forward(const ParamStore<T>& params, const TokenSeq& tokens,
                  const LoraAdapter<T>* adapter = nullptr) {
  Transformer<T> model(params, adapter);
  const auto& logits = model.run(std::span<const TokenSeq>(&tokens, 1));
  Tensor<T> out(Shape{logits.rows(), logits.cols()});
  std::copy(logits.data(), logits.data() + logits.size(), out.data.begin());
  return out;
}

template <typename T>
std::pair<T, GradStore<T>> loss_and_grad(const ParamStore<T>& params,
                                         std::span<const LmExample> batch) {
  Transformer<T> model(params);
  auto grads = zero_grads(params);
  const T loss = model.loss_and_backward(batch, &grads, nullptr);
  return {loss, std::move(grads)};
}

// Gradients with respect to the adapter factors only (backbone frozen).
template <typename T>
std::pair<T, LoraAdapter<T>> loss_and_adapter_grad(const ParamStore<T>& params,
                                                   const LoraAdapter<T>& adapter,
                                                   std::span<const LmExample> batch) {
  Transformer<T> model(params, &adapter);
  auto grads = zero_adapter_grads(adapter);
  const T loss = model.loss_and_backward(batch, nullptr, &grads);
  return {loss, std::move(grads)};
}

// Greedy decoding over a batch of prompts; ties go to the lowest token id.
// Each continuation stops after EOS, after max_new tokens, or when the
// sequence reaches max_seq.
template <typename T>
std::vector<TokenSeq> generate_batch(const ParamStore<T>& params,
                                     std::span<const TokenSeq> prompts, int max_new,
                                     const LoraAdapter<T>* adapter = nullptr) {
  Transformer<T> model(params, adapter);
  std::vector<TokenSeq> seqs(prompts.begin(), prompts.end());
  std::vector<TokenSeq> out(prompts.size());
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    validate_tokens(params.config, seqs[i]);
    if (max_new > 0 && static_cast<int>(seqs[i].size()) < params.config.max_seq) active.push_back(i);
  }
  for (int step = 0; step < max_new && !active.empty(); ++step) {
    std::vector<TokenSeq> batch;
    batch.reserve(active.size());
    for (auto i : active) batch.push_back(seqs[i]);
    const auto& logits = model.run(batch);
    std::vector<std::size_t> next;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const auto i = active[a];
      const auto row = model.offsets()[a] + static_cast<std::int64_t>(seqs[i].size()) - 1;
      Token best = 0;
      T best_v = logits(row, 0);
      for (Eigen::Index j = 1; j < logits.cols(); ++j) {
        if (logits(row, j) > best_v) {
          best_v = logits(row, j);
          best = static_cast<Token>(j);
        }
      }
      seqs[i].push_back(best);
      out[i].push_back(best);
      if (best != tok::EOS && static_cast<int>(seqs[i].size()) < params.config.max_seq) {
        next.push_back(i);
      }
    }
    active = std::move(next);
  }
  return out;
}

template <typename T>
TokenSeq generate(const ParamStore<T>& params, const TokenSeq& prompt, int max_new,
                  const LoraAdapter<T>* adapter = nullptr) {
  return generate_batch(params, std::span<const TokenSeq>(&prompt, 1), max_new, adapter)[0];
}

}  // namespace bdlab
