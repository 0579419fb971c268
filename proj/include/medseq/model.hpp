#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "medseq/common.hpp"
#include "medseq/vocab.hpp"

namespace medseq {

struct ModelConfig {
  int layers = 2;
  int dim = 64;
  int heads = 4;
  int mlp_dim = 256;
  int vocab_size = 0;
  int context = 256;

  void validate() const {
    if (layers <= 0 || dim <= 0 || heads <= 0 || mlp_dim <= 0 ||
        vocab_size <= 0 || context < 2) {
      throw MedseqError("model config fields must be positive, context >= 2");
    }
    if (dim % heads != 0) {
      throw MedseqError("model dim must be divisible by head count");
    }
  }
  int head_dim() const { return dim / heads; }
};

struct ParamCount {
  std::int64_t total = 0;
  std::int64_t non_embedding = 0;  // excludes token embedding and output head
};

inline ParamCount count_params(const ModelConfig& c) {
  c.validate();
  const std::int64_t d = c.dim, m = c.mlp_dim, v = c.vocab_size, l = c.layers;
  ParamCount out;
  out.non_embedding = l * (4 * d * d + 2 * d * m + 2 * d) + d;
  out.total = out.non_embedding + 2 * v * d;
  return out;
}

template <typename T>
using RowMat =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T{}) {}

  MatMap<T> mat() { return MatMap<T>(data.data(), rows, cols); }
  ConstMatMap<T> mat() const {
    return ConstMatMap<T>(data.data(), rows, cols);
  }
  std::size_t size() const { return data.size(); }
  void zero() { std::fill(data.begin(), data.end(), T{}); }
};

template <typename T>
struct ParameterSet {
  ModelConfig config;
  Tensor<T> embed;  // V x d
  struct Layer {
    Tensor<T> ln1_g, wq, wk, wv, wo, ln2_g, w1, w2;
  };
  std::vector<Layer> layers;
  Tensor<T> lnf_g;  // 1 x d
  Tensor<T> head;   // d x V

  static ParameterSet zeros(const ModelConfig& c) {
    c.validate();
    ParameterSet p;
    p.config = c;
    const auto d = static_cast<std::size_t>(c.dim);
    const auto m = static_cast<std::size_t>(c.mlp_dim);
    const auto v = static_cast<std::size_t>(c.vocab_size);
    p.embed = Tensor<T>(v, d);
    p.layers.resize(static_cast<std::size_t>(c.layers));
    for (auto& l : p.layers) {
      l.ln1_g = Tensor<T>(1, d);
      l.wq = Tensor<T>(d, d);
      l.wk = Tensor<T>(d, d);
      l.wv = Tensor<T>(d, d);
      l.wo = Tensor<T>(d, d);
      l.ln2_g = Tensor<T>(1, d);
      l.w1 = Tensor<T>(d, m);
      l.w2 = Tensor<T>(m, d);
    }
    p.lnf_g = Tensor<T>(1, d);
    p.head = Tensor<T>(d, v);
    return p;
  }

  /// Scaled-normal initialization: std 0.02 everywhere, residual output
  /// projections additionally scaled by 1/sqrt(2L), norm gains at 1.
  static ParameterSet init(const ModelConfig& c, std::uint64_t seed) {
    ParameterSet p = zeros(c);
    Rng rng(derive_seed(seed, 0x0de1));
    const double base_std = 0.02;
    const double resid_scale = 1.0 / std::sqrt(2.0 * c.layers);
    auto fill = [&rng](Tensor<T>& t, double std) {
      for (auto& x : t.data) x = static_cast<T>(rng.normal(0.0, std));
    };
    fill(p.embed, base_std);
    for (auto& l : p.layers) {
      l.ln1_g.data.assign(l.ln1_g.size(), T{1});
      l.ln2_g.data.assign(l.ln2_g.size(), T{1});
      fill(l.wq, base_std);
      fill(l.wk, base_std);
      fill(l.wv, base_std);
      fill(l.wo, base_std * resid_scale);
      fill(l.w1, base_std);
      fill(l.w2, base_std * resid_scale);
    }
    p.lnf_g.data.assign(p.lnf_g.size(), T{1});
    fill(p.head, base_std);
    return p;
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    fn("embed", embed);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string prefix = "layer" + std::to_string(i) + ".";
      fn(prefix + "ln1_g", layers[i].ln1_g);
      fn(prefix + "wq", layers[i].wq);
      fn(prefix + "wk", layers[i].wk);
      fn(prefix + "wv", layers[i].wv);
      fn(prefix + "wo", layers[i].wo);
      fn(prefix + "ln2_g", layers[i].ln2_g);
      fn(prefix + "w1", layers[i].w1);
      fn(prefix + "w2", layers[i].w2);
    }
    fn("lnf_g", lnf_g);
    fn("head", head);
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    const_cast<ParameterSet*>(this)->for_each(
        [&fn](const std::string& name, Tensor<T>& t) {
          fn(name, const_cast<const Tensor<T>&>(t));
        });
  }

  std::size_t count() const {
    std::size_t n = 0;
    for_each([&n](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }
};

namespace detail {

constexpr double kNormEps = 1e-5;
constexpr double kRotaryBase = 10000.0;

template <typename T>
void apply_rotary(T* vec, int heads, int head_dim, std::int64_t position,
                  bool inverse) {
  for (int h = 0; h < heads; ++h) {
    T* base = vec + h * head_dim;
    for (int i = 0; i + 1 < head_dim; i += 2) {
      const double exponent = static_cast<double>(i) / head_dim;
      const double theta =
          static_cast<double>(position) * std::pow(kRotaryBase, -exponent);
      const T c = static_cast<T>(std::cos(theta));
      const T s = static_cast<T>(inverse ? -std::sin(theta)
                                         : std::sin(theta));
      const T x0 = base[i];
      const T x1 = base[i + 1];
      base[i] = x0 * c - x1 * s;
      base[i + 1] = x0 * s + x1 * c;
    }
  }
}

template <typename T>
T gelu(T x) {
  return static_cast<T>(0.5) * x *
         (static_cast<T>(1) + static_cast<T>(std::erf(
                                  static_cast<double>(x) / std::sqrt(2.0))));
}

template <typename T>
T gelu_grad(T x) {
  const double xd = static_cast<double>(x);
  const double phi = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * 3.14159265358979323846);
  const double cdf = 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0)));
  return static_cast<T>(cdf + xd * phi);
}

/// Row-wise RMS normalization with learned gain; returns 1/rms per row.
template <typename T>
void rmsnorm_forward(const T* x, const T* gain, T* out, T* inv_rms,
                     std::size_t n_rows, std::size_t d) {
  for (std::size_t r = 0; r < n_rows; ++r) {
    const T* xr = x + r * d;
    T* yr = out + r * d;
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      ss += static_cast<double>(xr[j]) * static_cast<double>(xr[j]);
    }
    const T inv = static_cast<T>(
        1.0 / std::sqrt(ss / static_cast<double>(d) + kNormEps));
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) yr[j] = gain[j] * xr[j] * inv;
  }
}

template <typename T>
void rmsnorm_backward(const T* x, const T* gain, const T* inv_rms,
                      const T* dy, T* dx_accum, T* dgain_accum,
                      std::size_t n_rows, std::size_t d) {
  for (std::size_t r = 0; r < n_rows; ++r) {
    const T* xr = x + r * d;
    const T* dyr = dy + r * d;
    T* dxr = dx_accum + r * d;
    const T inv = inv_rms[r];
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += static_cast<double>(dyr[j]) * static_cast<double>(gain[j]) *
             static_cast<double>(xr[j]);
    }
    const T coeff = static_cast<T>(static_cast<double>(inv) *
                                   static_cast<double>(inv) *
                                   static_cast<double>(inv) * dot /
                                   static_cast<double>(d));
    for (std::size_t j = 0; j < d; ++j) {
      dxr[j] += gain[j] * dyr[j] * inv - coeff * xr[j];
      dgain_accum[j] += dyr[j] * xr[j] * inv;
    }
  }
}

}  // namespace detail

/// Per-layer activations captured during the forward pass for the exact
/// backward pass.
template <typename T>
struct ForwardCache {
  std::size_t batch = 0, seq = 0;
  struct LayerCache {
    Tensor<T> x_in;       // (B*S, d) residual stream entering the block
    Tensor<T> normed1;    // post-ln1
    Tensor<T> inv_rms1;   // (B*S, 1)
    Tensor<T> q, k, v;    // post-rotary q/k
    Tensor<T> probs;      // (B*heads*S, S) attention rows
    Tensor<T> attn_out;   // (B*S, d) concatenated heads
    Tensor<T> x_mid;      // residual after attention
    Tensor<T> normed2;
    Tensor<T> inv_rms2;
    Tensor<T> mlp_pre;    // (B*S, m) pre-activation
    Tensor<T> mlp_act;    // gelu output
  };
  std::vector<LayerCache> layers;
  Tensor<T> x_final;     // (B*S, d)
  Tensor<T> norm_final;  // post-lnf
  Tensor<T> inv_rms_final;
  Tensor<T> logits;      // (B*S, V)
};

/// Causal forward over a row-major (batch, seq) token block. Logits land in
/// cache.logits; the cache holds everything the backward pass needs.
template <typename T>
void forward_batch(const ParameterSet<T>& p, const TokenId* tokens,
                   std::size_t batch, std::size_t seq, ForwardCache<T>& cache) {
  const auto& c = p.config;
  const auto d = static_cast<std::size_t>(c.dim);
  const auto m = static_cast<std::size_t>(c.mlp_dim);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  const auto hd = static_cast<std::size_t>(c.head_dim());
  const auto heads = static_cast<std::size_t>(c.heads);
  const std::size_t ns = batch * seq;
  if (seq > static_cast<std::size_t>(c.context)) {
    throw MedseqError("sequence longer than model context");
  }

  cache.batch = batch;
  cache.seq = seq;
  cache.layers.resize(p.layers.size());

  Tensor<T> x(ns, d);
  for (std::size_t i = 0; i < ns; ++i) {
    const TokenId t = tokens[i];
    if (t >= v) throw MedseqError("token id out of vocabulary range");
    std::copy_n(p.embed.data.data() + t * d, d, x.data.data() + i * d);
  }

  const T inv_sqrt_hd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& lp = p.layers[li];
    auto& lc = cache.layers[li];
    lc.x_in = x;
    lc.normed1 = Tensor<T>(ns, d);
    lc.inv_rms1 = Tensor<T>(ns, 1);
    detail::rmsnorm_forward(x.data.data(), lp.ln1_g.data.data(),
                            lc.normed1.data.data(), lc.inv_rms1.data.data(),
                            ns, d);

    lc.q = Tensor<T>(ns, d);
    lc.k = Tensor<T>(ns, d);
    lc.v = Tensor<T>(ns, d);
    lc.q.mat().noalias() = lc.normed1.mat() * lp.wq.mat();
    lc.k.mat().noalias() = lc.normed1.mat() * lp.wk.mat();
    lc.v.mat().noalias() = lc.normed1.mat() * lp.wv.mat();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t s = 0; s < seq; ++s) {
        const std::size_t row = b * seq + s;
        detail::apply_rotary(lc.q.data.data() + row * d, c.heads,
                             c.head_dim(), static_cast<std::int64_t>(s),
                             false);
        detail::apply_rotary(lc.k.data.data() + row * d, c.heads,
                             c.head_dim(), static_cast<std::int64_t>(s),
                             false);
      }
    }

    lc.probs = Tensor<T>(batch * heads * seq, seq);
    lc.attn_out = Tensor<T>(ns, d);
    lc.attn_out.zero();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        // Strided per-head views into the packed q/k/v buffers.
        Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> qh(
            lc.q.data.data() + b * seq * d + h * hd, seq, hd,
            Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
        Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> kh(
            lc.k.data.data() + b * seq * d + h * hd, seq, hd,
            Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
        Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> vh(
            lc.v.data.data() + b * seq * d + h * hd, seq, hd,
            Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
        MatMap<T> ph(lc.probs.data.data() + (b * heads + h) * seq * seq, seq,
                     seq);
        ph.noalias() = qh * kh.transpose() * inv_sqrt_hd;
        for (std::size_t i = 0; i < seq; ++i) {
          T* row = ph.data() + i * seq;
          T mx = row[0];
          for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
          double sum = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            row[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)));
            sum += static_cast<double>(row[j]);
          }
          const T inv_sum = static_cast<T>(1.0 / sum);
          for (std::size_t j = 0; j <= i; ++j) row[j] *= inv_sum;
          for (std::size_t j = i + 1; j < seq; ++j) row[j] = T{};  // causal
        }
        Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>> oh(
            lc.attn_out.data.data() + b * seq * d + h * hd, seq, hd,
            Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
        oh.noalias() = ph * vh;
      }
    }

    lc.x_mid = Tensor<T>(ns, d);
    lc.x_mid.mat().noalias() = x.mat() + lc.attn_out.mat() * lp.wo.mat();

    lc.normed2 = Tensor<T>(ns, d);
    lc.inv_rms2 = Tensor<T>(ns, 1);
    detail::rmsnorm_forward(lc.x_mid.data.data(), lp.ln2_g.data.data(),
                            lc.normed2.data.data(), lc.inv_rms2.data.data(),
                            ns, d);
    lc.mlp_pre = Tensor<T>(ns, m);
    lc.mlp_pre.mat().noalias() = lc.normed2.mat() * lp.w1.mat();
    lc.mlp_act = Tensor<T>(ns, m);
    for (std::size_t i = 0; i < ns * m; ++i) {
      lc.mlp_act.data[i] = detail::gelu(lc.mlp_pre.data[i]);
    }
    x = Tensor<T>(ns, d);
    x.mat().noalias() = lc.x_mid.mat() + lc.mlp_act.mat() * lp.w2.mat();
  }

  cache.x_final = x;
  cache.norm_final = Tensor<T>(ns, d);
  cache.inv_rms_final = Tensor<T>(ns, 1);
  detail::rmsnorm_forward(x.data.data(), p.lnf_g.data.data(),
                          cache.norm_final.data.data(),
                          cache.inv_rms_final.data.data(), ns, d);
  cache.logits = Tensor<T>(ns, v);
  cache.logits.mat().noalias() = cache.norm_final.mat() * p.head.mat();
}

/// Mean next-token cross-entropy over supervised positions; fills `grads`
/// (pre-zeroed shape) with exact analytic gradients. `supervised` marks
/// non-padding positions; position (r, s) contributes when both it and its
/// successor are supervised.
template <typename T>
T loss_and_grad(const ParameterSet<T>& p, const TokenId* tokens,
                const std::uint8_t* supervised, std::size_t batch,
                std::size_t seq, ParameterSet<T>* grads) {
  const auto& c = p.config;
  const auto d = static_cast<std::size_t>(c.dim);
  const auto m = static_cast<std::size_t>(c.mlp_dim);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  const auto hd = static_cast<std::size_t>(c.head_dim());
  const auto heads = static_cast<std::size_t>(c.heads);
  const std::size_t ns = batch * seq;

  ForwardCache<T> cache;
  forward_batch(p, tokens, batch, seq, cache);

  // Count supervised (position, successor) pairs first.
  std::size_t supervised_pairs = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s + 1 < seq; ++s) {
      const std::size_t i = b * seq + s;
      if ((supervised == nullptr || (supervised[i] && supervised[i + 1]))) {
        ++supervised_pairs;
      }
    }
  }
  if (supervised_pairs == 0) {
    throw MedseqError("no supervised positions in batch");
  }

  double loss = 0.0;
  Tensor<T> dlogits(ns, v);
  const T inv_m = static_cast<T>(1.0 / static_cast<double>(supervised_pairs));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s + 1 < seq; ++s) {
      const std::size_t i = b * seq + s;
      if (!(supervised == nullptr || (supervised[i] && supervised[i + 1]))) {
        continue;
      }
      const TokenId target = tokens[i + 1];
      const T* row = cache.logits.data.data() + i * v;
      T* drow = dlogits.data.data() + i * v;
      T mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < v; ++j) {
        sum += std::exp(static_cast<double>(row[j] - mx));
      }
      const double log_sum = std::log(sum);
      loss += log_sum + static_cast<double>(mx) -
              static_cast<double>(row[target]);
      const double inv_sum = 1.0 / sum;
      for (std::size_t j = 0; j < v; ++j) {
        const double prob =
            std::exp(static_cast<double>(row[j] - mx)) * inv_sum;
        drow[j] = static_cast<T>(prob) * inv_m;
      }
      drow[target] -= inv_m;
    }
  }
  loss /= static_cast<double>(supervised_pairs);

  // ---- backward ----
  const T inv_sqrt_hd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  Tensor<T> dx(ns, d);
  grads->head.mat().noalias() +=
      cache.norm_final.mat().transpose() * dlogits.mat();
  Tensor<T> dnorm_final(ns, d);
  dnorm_final.mat().noalias() = dlogits.mat() * p.head.mat().transpose();
  detail::rmsnorm_backward(cache.x_final.data.data(), p.lnf_g.data.data(),
                           cache.inv_rms_final.data.data(),
                           dnorm_final.data.data(), dx.data.data(),
                           grads->lnf_g.data.data(), ns, d);

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& lp = p.layers[li];
    auto& lc = cache.layers[li];
    auto& lg = grads->layers[li];

    // MLP: x = x_mid + gelu(normed2 @ w1) @ w2
    Tensor<T> dact(ns, m);
    dact.mat().noalias() = dx.mat() * lp.w2.mat().transpose();
    lg.w2.mat().noalias() += lc.mlp_act.mat().transpose() * dx.mat();
    Tensor<T> dpre(ns, m);
    for (std::size_t i = 0; i < ns * m; ++i) {
      dpre.data[i] = dact.data[i] * detail::gelu_grad(lc.mlp_pre.data[i]);
    }
    Tensor<T> dnormed2(ns, d);
    dnormed2.mat().noalias() = dpre.mat() * lp.w1.mat().transpose();
    lg.w1.mat().noalias() += lc.normed2.mat().transpose() * dpre.mat();
    // dx currently holds dL/dx_out; residual passes it through to x_mid.
    detail::rmsnorm_backward(lc.x_mid.data.data(), lp.ln2_g.data.data(),
                             lc.inv_rms2.data.data(), dnormed2.data.data(),
                             dx.data.data(), lg.ln2_g.data.data(), ns, d);

    // Attention: x_mid = x_in + attn_out @ wo
    Tensor<T> dattn(ns, d);
    dattn.mat().noalias() = dx.mat() * lp.wo.mat().transpose();
    lg.wo.mat().noalias() += lc.attn_out.mat().transpose() * dx.mat();

    Tensor<T> dq(ns, d), dk(ns, d), dv(ns, d);
    dq.zero();
    dk.zero();
    dv.zero();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> qh(
            lc.q.data.data() + b * seq * d + h * hd, seq, hd,
            Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
        Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> kh(
            lc.k.data.data() + b * seq * d + h * hd, seq, hd,
            Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
        Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> vh(
            lc.v.data.data() + b * seq * d + h * hd, seq, hd,
            Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
        Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> doh(
            dattn.data.data() + b * seq * d + h * hd, seq, hd,
            Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
        ConstMatMap<T> ph(lc.probs.data.data() + (b * heads + h) * seq * seq,
                          seq, seq);

        RowMat<T> dp = doh * vh.transpose();
        RowMat<T> dvh_full = ph.transpose() * doh;
        // Softmax backward per causal row.
        RowMat<T> ds(seq, seq);
        for (std::size_t i = 0; i < seq; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            dot += static_cast<double>(dp(i, j)) *
                   static_cast<double>(ph(i, j));
          }
          for (std::size_t j = 0; j <= i; ++j) {
            ds(i, j) = ph(i, j) * (dp(i, j) - static_cast<T>(dot));
          }
          for (std::size_t j = i + 1; j < seq; ++j) ds(i, j) = T{};
        }
        RowMat<T> dqh = ds * kh * inv_sqrt_hd;
        RowMat<T> dkh = ds.transpose() * qh * inv_sqrt_hd;
        for (std::size_t s = 0; s < seq; ++s) {
          const std::size_t row = b * seq + s;
          for (std::size_t j = 0; j < hd; ++j) {
            dq.data[row * d + h * hd + j] += dqh(s, j);
            dk.data[row * d + h * hd + j] += dkh(s, j);
            dv.data[row * d + h * hd + j] += dvh_full(s, j);
          }
        }
      }
    }
    // Rotary is a fixed rotation; its adjoint is the inverse rotation.
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t s = 0; s < seq; ++s) {
        const std::size_t row = b * seq + s;
        detail::apply_rotary(dq.data.data() + row * d, c.heads, c.head_dim(),
                             static_cast<std::int64_t>(s), true);
        detail::apply_rotary(dk.data.data() + row * d, c.heads, c.head_dim(),
                             static_cast<std::int64_t>(s), true);
      }
    }

    Tensor<T> dnormed1(ns, d);
    dnormed1.mat().noalias() = dq.mat() * lp.wq.mat().transpose();
    dnormed1.mat().noalias() += dk.mat() * lp.wk.mat().transpose();
    dnormed1.mat().noalias() += dv.mat() * lp.wv.mat().transpose();
    lg.wq.mat().noalias() += lc.normed1.mat().transpose() * dq.mat();
    lg.wk.mat().noalias() += lc.normed1.mat().transpose() * dk.mat();
    lg.wv.mat().noalias() += lc.normed1.mat().transpose() * dv.mat();
    detail::rmsnorm_backward(lc.x_in.data.data(), lp.ln1_g.data.data(),
                             lc.inv_rms1.data.data(), dnormed1.data.data(),
                             dx.data.data(), lg.ln1_g.data.data(), ns, d);
  }

  for (std::size_t i = 0; i < ns; ++i) {
    const TokenId t = tokens[i];
    T* dst = grads->embed.data.data() + t * d;
    const T* src = dx.data.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
  }
  return static_cast<T>(loss);
}

/// Logits for every position of a single row; returns (seq x V) row-major.
template <typename T>
std::vector<T> forward(const ParameterSet<T>& p,
                       std::span<const TokenId> row) {
  ForwardCache<T> cache;
  forward_batch(p, row.data(), 1, row.size(), cache);
  return std::move(cache.logits.data);
}

/// Categorical draw from softmax(logits / temperature); temperature 0 is
/// argmax with lowest-id tie-break.
template <typename T>
TokenId sample_next(std::span<const T> logits, double temperature, Rng& rng) {
  if (logits.empty()) throw MedseqError("empty logits");
  if (temperature < 0.0) throw MedseqError("temperature must be >= 0");
  if (temperature == 0.0) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.size(); ++j) {
      if (logits[j] > logits[best]) best = j;
    }
    return static_cast<TokenId>(best);
  }
  double mx = static_cast<double>(logits[0]);
  for (const T& l : logits) mx = std::max(mx, static_cast<double>(l));
  std::vector<double> weights(logits.size());
  double total = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    weights[j] = std::exp((static_cast<double>(logits[j]) - mx) / temperature);
    total += weights[j];
  }
  double u = rng.uniform01() * total;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    u -= weights[j];
    if (u < 0.0) return static_cast<TokenId>(j);
  }
  return static_cast<TokenId>(weights.size() - 1);
}

/// Incremental decoding over `lanes` trajectories sharing one prompt.
/// Per-lane KV caches make each generated token O(params) instead of a
/// full-context forward pass.
template <typename T>
class GenerationSession {
 public:
  GenerationSession(const ParameterSet<T>& params, std::size_t lanes,
                    std::size_t capacity)
      : p_(&params),
        lanes_(lanes),
        capacity_(capacity),
        kcache_(params.layers.size()),
        vcache_(params.layers.size()) {
    if (capacity_ > static_cast<std::size_t>(params.config.context)) {
      throw MedseqError("generation capacity exceeds model context");
    }
    const auto d = static_cast<std::size_t>(params.config.dim);
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
      kcache_[li] = Tensor<T>(lanes_ * capacity_, d);
      vcache_[li] = Tensor<T>(lanes_ * capacity_, d);
    }
  }

  /// Runs the prompt once and replicates its KV state across all lanes.
  /// Returns the logits at the prompt's last position.
  std::vector<T> prefill(std::span<const TokenId> prompt) {
    if (prompt.empty()) throw MedseqError("prompt must be nonempty");
    if (prompt.size() > capacity_) {
      throw MedseqError("prompt longer than generation capacity");
    }
    ForwardCache<T> cache;
    forward_batch(*p_, prompt.data(), 1, prompt.size(), cache);
    const auto d = static_cast<std::size_t>(p_->config.dim);
    for (std::size_t li = 0; li < p_->layers.size(); ++li) {
      for (std::size_t lane = 0; lane < lanes_; ++lane) {
        std::copy_n(cache.layers[li].k.data.data(), prompt.size() * d,
                    kcache_[li].data.data() + lane * capacity_ * d);
        std::copy_n(cache.layers[li].v.data.data(), prompt.size() * d,
                    vcache_[li].data.data() + lane * capacity_ * d);
      }
    }
    length_ = prompt.size();
    const auto v = static_cast<std::size_t>(p_->config.vocab_size);
    std::vector<T> last(v);
    std::copy_n(cache.logits.data.data() + (prompt.size() - 1) * v, v,
                last.data());
    return last;
  }

  /// Advances every lane by one token; `last_tokens` holds each lane's
  /// previously sampled token. Returns (lanes x V) logits row-major.
  std::vector<T> step(const std::vector<TokenId>& last_tokens) {
    if (last_tokens.size() != lanes_) {
      throw MedseqError("step expects one token per lane");
    }
    if (length_ >= capacity_) {
      throw MedseqError("generation exceeded its capacity");
    }
    const auto& c = p_->config;
    const auto d = static_cast<std::size_t>(c.dim);
    const auto m = static_cast<std::size_t>(c.mlp_dim);
    const auto v = static_cast<std::size_t>(c.vocab_size);
    const auto hd = static_cast<std::size_t>(c.head_dim());
    const auto heads = static_cast<std::size_t>(c.heads);
    const std::size_t pos = length_;

    Tensor<T> x(lanes_, d);
    for (std::size_t lane = 0; lane < lanes_; ++lane) {
      const TokenId t = last_tokens[lane];
      if (t >= v) throw MedseqError("token id out of vocabulary range");
      std::copy_n(p_->embed.data.data() + t * d, d, x.data.data() + lane * d);
    }

    const T inv_sqrt_hd =
        static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    Tensor<T> normed(lanes_, d), inv_rms(lanes_, 1);
    Tensor<T> q(lanes_, d), k(lanes_, d), vv(lanes_, d);
    Tensor<T> attn(lanes_, d);
    Tensor<T> pre(lanes_, m), act(lanes_, m);
    for (std::size_t li = 0; li < p_->layers.size(); ++li) {
      const auto& lp = p_->layers[li];
      detail::rmsnorm_forward(x.data.data(), lp.ln1_g.data.data(),
                              normed.data.data(), inv_rms.data.data(), lanes_,
                              d);
      q.mat().noalias() = normed.mat() * lp.wq.mat();
      k.mat().noalias() = normed.mat() * lp.wk.mat();
      vv.mat().noalias() = normed.mat() * lp.wv.mat();
      for (std::size_t lane = 0; lane < lanes_; ++lane) {
        detail::apply_rotary(q.data.data() + lane * d, c.heads, c.head_dim(),
                             static_cast<std::int64_t>(pos), false);
        detail::apply_rotary(k.data.data() + lane * d, c.heads, c.head_dim(),
                             static_cast<std::int64_t>(pos), false);
        std::copy_n(k.data.data() + lane * d, d,
                    kcache_[li].data.data() + (lane * capacity_ + pos) * d);
        std::copy_n(vv.data.data() + lane * d, d,
                    vcache_[li].data.data() + (lane * capacity_ + pos) * d);
      }
      attn.zero();
      const std::size_t len = pos + 1;
      std::vector<T> scores(len);
      for (std::size_t lane = 0; lane < lanes_; ++lane) {
        for (std::size_t h = 0; h < heads; ++h) {
          const T* qh = q.data.data() + lane * d + h * hd;
          T mx = std::numeric_limits<T>::lowest();
          for (std::size_t j = 0; j < len; ++j) {
            const T* kj =
                kcache_[li].data.data() + (lane * capacity_ + j) * d + h * hd;
            T dot = T{};
            for (std::size_t e = 0; e < hd; ++e) dot += qh[e] * kj[e];
            scores[j] = dot * inv_sqrt_hd;
            mx = std::max(mx, scores[j]);
          }
          double sum = 0.0;
          for (std::size_t j = 0; j < len; ++j) {
            scores[j] =
                static_cast<T>(std::exp(static_cast<double>(scores[j] - mx)));
            sum += static_cast<double>(scores[j]);
          }
          const T inv_sum = static_cast<T>(1.0 / sum);
          T* out = attn.data.data() + lane * d + h * hd;
          for (std::size_t j = 0; j < len; ++j) {
            const T w = scores[j] * inv_sum;
            const T* vj =
                vcache_[li].data.data() + (lane * capacity_ + j) * d + h * hd;
            for (std::size_t e = 0; e < hd; ++e) out[e] += w * vj[e];
          }
        }
      }
      x.mat().noalias() += attn.mat() * lp.wo.mat();
      detail::rmsnorm_forward(x.data.data(), lp.ln2_g.data.data(),
                              normed.data.data(), inv_rms.data.data(), lanes_,
                              d);
      pre.mat().noalias() = normed.mat() * lp.w1.mat();
      for (std::size_t i = 0; i < lanes_ * m; ++i) {
        act.data[i] = detail::gelu(pre.data[i]);
      }
      x.mat().noalias() += act.mat() * lp.w2.mat();
    }
    detail::rmsnorm_forward(x.data.data(), p_->lnf_g.data.data(),
                            normed.data.data(), inv_rms.data.data(), lanes_,
                            d);
    std::vector<T> logits(lanes_ * v);
    MatMap<T>(logits.data(), lanes_, v).noalias() =
        normed.mat() * p_->head.mat();
    ++length_;
    return logits;
  }

  std::size_t length() const { return length_; }
  std::size_t lanes() const { return lanes_; }

 private:
  const ParameterSet<T>* p_;
  std::size_t lanes_;
  std::size_t capacity_;
  std::size_t length_ = 0;
  std::vector<Tensor<T>> kcache_;
  std::vector<Tensor<T>> vcache_;
};

// Checkpoint IO for the float parameter set (training precision).
void save_checkpoint(const std::string& path, const ParameterSet<float>& p,
                     std::uint64_t step, const std::string& rng_state);
struct Checkpoint {
  ParameterSet<float> params;
  std::uint64_t step = 0;
  std::string rng_state;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace medseq
