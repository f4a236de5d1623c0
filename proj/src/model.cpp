#include "drg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "json.hpp"

namespace drg {

using json = nlohmann::json;

const char* mode_name(ModelMode mode) {
  return mode == ModelMode::causal_lm ? "causal_lm" : "cls_classifier";
}

ModelMode mode_from_name(std::string_view name) {
  if (name == "causal_lm") return ModelMode::causal_lm;
  if (name == "cls_classifier") return ModelMode::cls_classifier;
  throw DataError("unknown model mode: " + std::string(name));
}

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || model_dim < 1 || ff_dim < 1 || seq_len < 1)
    throw UsageError("model dimensions must be positive");
  if (model_dim % n_heads != 0)
    throw UsageError("model_dim " + std::to_string(model_dim) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  if (vocab_size < 1) throw UsageError("vocab_size must be positive");
  if (mode == ModelMode::cls_classifier && n_styles < 2)
    throw UsageError("classifier mode needs n_styles >= 2");
}

// =====================================================================
//  Parameter layout
// =====================================================================

static std::vector<TensorSpec> build_layout(const ModelConfig& c) {
  std::vector<TensorSpec> specs;
  size_t cursor = 0;
  auto add = [&](std::string name, std::vector<int> shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    specs.push_back({std::move(name), std::move(shape), cursor, n});
    cursor += n;
  };
  add("tok_emb", {c.vocab_size, c.model_dim});
  add("pos_emb", {c.seq_len, c.model_dim});
  for (int l = 0; l < c.n_layers; ++l) {
    std::string p = "l" + std::to_string(l) + ".";
    add(p + "ln1.gain", {c.model_dim});
    add(p + "ln1.bias", {c.model_dim});
    add(p + "attn.wq", {c.model_dim, c.model_dim});
    add(p + "attn.bq", {c.model_dim});
    add(p + "attn.wk", {c.model_dim, c.model_dim});
    add(p + "attn.bk", {c.model_dim});
    add(p + "attn.wv", {c.model_dim, c.model_dim});
    add(p + "attn.bv", {c.model_dim});
    add(p + "attn.wo", {c.model_dim, c.model_dim});
    add(p + "attn.bo", {c.model_dim});
    add(p + "ln2.gain", {c.model_dim});
    add(p + "ln2.bias", {c.model_dim});
    add(p + "ff.w1", {c.ff_dim, c.model_dim});
    add(p + "ff.b1", {c.ff_dim});
    add(p + "ff.w2", {c.model_dim, c.ff_dim});
    add(p + "ff.b2", {c.model_dim});
  }
  add("ln_f.gain", {c.model_dim});
  add("ln_f.bias", {c.model_dim});
  if (c.mode == ModelMode::causal_lm) {
    add("lm_head.w", {c.vocab_size, c.model_dim});
  } else {
    add("cls_head.w", {c.n_styles, c.model_dim});
    add("cls_head.b", {c.n_styles});
  }
  return specs;
}

size_t ModelConfig::param_count() const {
  auto specs = build_layout(*this);
  return specs.back().offset + specs.back().numel;
}

template <typename S>
void ModelT<S>::rebuild_name_index() {
  by_name_.clear();
  for (size_t i = 0; i < specs.size(); ++i) by_name_[specs[i].name] = static_cast<int>(i);
}

template <typename S>
const TensorSpec& ModelT<S>::spec(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) throw UsageError("unknown tensor: " + std::string(name));
  return specs[it->second];
}

template <typename S>
std::span<S> ModelT<S>::tensor(std::string_view name) {
  const TensorSpec& sp = spec(name);
  return {w.data() + sp.offset, sp.numel};
}

template <typename S>
std::span<const S> ModelT<S>::tensor(std::string_view name) const {
  const TensorSpec& sp = spec(name);
  return {w.data() + sp.offset, sp.numel};
}

template <typename S>
std::span<S> ModelT<S>::grad(std::string_view name) {
  const TensorSpec& sp = spec(name);
  return {g.data() + sp.offset, sp.numel};
}

template <typename S>
ModelT<S> init_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelT<S> m;
  m.cfg = cfg;
  m.specs = build_layout(cfg);
  m.rebuild_name_index();
  size_t total = m.specs.back().offset + m.specs.back().numel;
  m.w.assign(total, S(0));
  m.g.assign(total, S(0));

  Rng rng(mix_seed(seed, 0x90de1));
  for (const TensorSpec& sp : m.specs) {
    S* p = m.w.data() + sp.offset;
    if (sp.name.ends_with(".gain")) {
      std::fill(p, p + sp.numel, S(1));
    } else if (sp.shape.size() == 1) {
      // vector-shaped tensors are biases; stay zero
    } else {
      for (size_t i = 0; i < sp.numel; ++i) p[i] = static_cast<S>(rng.normal() * 0.02);
    }
  }
  return m;
}

template <typename To, typename From>
ModelT<To> cast_model(const ModelT<From>& src) {
  ModelT<To> out;
  out.cfg = src.cfg;
  out.specs = src.specs;
  out.rebuild_name_index();
  out.w.assign(src.w.begin(), src.w.end());
  out.g.assign(src.w.size(), To(0));
  return out;
}

// =====================================================================
//  Kernels
// =====================================================================

// y[M,N] = x[M,K] . w[N,K]^T + b
template <typename S>
static void linear_fwd(const S* __restrict__ x, const S* __restrict__ w, const S* __restrict__ b,
                       S* __restrict__ y, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    const S* xr = x + static_cast<size_t>(m) * K;
    S* yr = y + static_cast<size_t>(m) * N;
    for (int n = 0; n < N; ++n) {
      const S* wr = w + static_cast<size_t>(n) * K;
      S acc = 0;
      for (int k = 0; k < K; ++k) acc += xr[k] * wr[k];
      yr[n] = acc + (b ? b[n] : S(0));
    }
  }
}

// dx[M,K] += dy[M,N] . w[N,K]
template <typename S>
static void linear_bwd_input(const S* __restrict__ dy, const S* __restrict__ w,
                             S* __restrict__ dx, int M, int N, int K) {
  for (int m = 0; m < M; ++m) {
    const S* dyr = dy + static_cast<size_t>(m) * N;
    S* dxr = dx + static_cast<size_t>(m) * K;
    for (int n = 0; n < N; ++n) {
      const S a = dyr[n];
      if (a == S(0)) continue;
      const S* wr = w + static_cast<size_t>(n) * K;
      for (int k = 0; k < K; ++k) dxr[k] += a * wr[k];
    }
  }
}

// dw[N,K] += dy[M,N]^T . x[M,K] ; db[N] += column sums of dy
template <typename S>
static void linear_bwd_params(const S* __restrict__ dy, const S* __restrict__ x,
                              S* __restrict__ dw, S* __restrict__ db, int M, int N, int K) {
  for (int m = 0; m < M; ++m) {
    const S* dyr = dy + static_cast<size_t>(m) * N;
    const S* xr = x + static_cast<size_t>(m) * K;
    for (int n = 0; n < N; ++n) {
      const S a = dyr[n];
      if (db) db[n] += a;
      if (a == S(0)) continue;
      S* dwr = dw + static_cast<size_t>(n) * K;
      for (int k = 0; k < K; ++k) dwr[k] += a * xr[k];
    }
  }
}

constexpr double kLnEps = 1e-5;

template <typename S>
static void layernorm_fwd(const S* __restrict__ x, const S* __restrict__ gain,
                          const S* __restrict__ bias, S* __restrict__ y, S* __restrict__ mean,
                          S* __restrict__ rstd, int T, int D) {
  for (int t = 0; t < T; ++t) {
    const S* xr = x + static_cast<size_t>(t) * D;
    S* yr = y + static_cast<size_t>(t) * D;
    S mu = 0;
    for (int i = 0; i < D; ++i) mu += xr[i];
    mu /= D;
    S var = 0;
    for (int i = 0; i < D; ++i) {
      S d = xr[i] - mu;
      var += d * d;
    }
    var /= D;
    S r = S(1) / std::sqrt(var + S(kLnEps));
    mean[t] = mu;
    rstd[t] = r;
    for (int i = 0; i < D; ++i) yr[i] = (xr[i] - mu) * r * gain[i] + bias[i];
  }
}

template <typename S>
static void layernorm_bwd(const S* __restrict__ dy, const S* __restrict__ x,
                          const S* __restrict__ gain, const S* __restrict__ mean,
                          const S* __restrict__ rstd, S* __restrict__ dx, S* __restrict__ dgain,
                          S* __restrict__ dbias, int T, int D) {
  for (int t = 0; t < T; ++t) {
    const S* dyr = dy + static_cast<size_t>(t) * D;
    const S* xr = x + static_cast<size_t>(t) * D;
    S* dxr = dx + static_cast<size_t>(t) * D;
    const S mu = mean[t], r = rstd[t];
    S m1 = 0, m2 = 0;
    for (int i = 0; i < D; ++i) {
      S xhat = (xr[i] - mu) * r;
      S dxh = dyr[i] * gain[i];
      dgain[i] += dyr[i] * xhat;
      dbias[i] += dyr[i];
      m1 += dxh;
      m2 += dxh * xhat;
    }
    m1 /= D;
    m2 /= D;
    for (int i = 0; i < D; ++i) {
      S xhat = (xr[i] - mu) * r;
      S dxh = dyr[i] * gain[i];
      dxr[i] += r * (dxh - m1 - xhat * m2);
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename S>
static inline S gelu(S x) {
  S u = S(kGeluC) * (x + S(kGeluA) * x * x * x);
  return S(0.5) * x * (S(1) + std::tanh(u));
}

template <typename S>
static inline S gelu_grad(S x) {
  S u = S(kGeluC) * (x + S(kGeluA) * x * x * x);
  S th = std::tanh(u);
  S du = S(kGeluC) * (S(1) + S(3) * S(kGeluA) * x * x);
  return S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th * th) * du;
}

// =====================================================================
//  Forward / backward workspace
// =====================================================================

template <typename S>
struct Workspace {
  int T = 0;
  // per layer caches, indexed [l], each entry sized at ensure() time
  std::vector<std::vector<S>> x;     // layer inputs; x[L] is the final stream
  std::vector<std::vector<S>> ln1, q, k, v, ctx, x_mid, ln2, f1, fa;
  std::vector<std::vector<S>> att;   // [H*T*T] per layer, post-softmax
  std::vector<std::vector<S>> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
  std::vector<S> lnf, lnf_mean, lnf_rstd;
  std::vector<S> logits;

  // backward scratch
  std::vector<S> dx, dnorm, dq, dk, dv, dctx, dmid, df1, dfa, dlnf, dlogits, datt_row;

  void ensure(const ModelConfig& c, int t) {
    T = t;
    const size_t L = static_cast<size_t>(c.n_layers);
    const size_t td = static_cast<size_t>(t) * c.model_dim;
    const size_t tf = static_cast<size_t>(t) * c.ff_dim;
    auto fit = [](auto& vecs, size_t n, size_t len) {
      vecs.resize(n);
      for (auto& v : vecs)
        if (v.size() < len) v.resize(len);
    };
    fit(x, L + 1, td);
    fit(ln1, L, td);
    fit(q, L, td);
    fit(k, L, td);
    fit(v, L, td);
    fit(ctx, L, td);
    fit(x_mid, L, td);
    fit(ln2, L, td);
    fit(f1, L, tf);
    fit(fa, L, tf);
    fit(att, L, static_cast<size_t>(c.n_heads) * t * t);
    fit(ln1_mean, L, t);
    fit(ln1_rstd, L, t);
    fit(ln2_mean, L, t);
    fit(ln2_rstd, L, t);
    auto fit1 = [](std::vector<S>& v, size_t len) {
      if (v.size() < len) v.resize(len);
    };
    fit1(lnf, td);
    fit1(lnf_mean, t);
    fit1(lnf_rstd, t);
    size_t logit_len = c.mode == ModelMode::causal_lm
                           ? static_cast<size_t>(t) * c.vocab_size
                           : static_cast<size_t>(c.n_styles);
    fit1(logits, logit_len);
    fit1(dx, td);
    fit1(dnorm, td);
    fit1(dq, td);
    fit1(dk, td);
    fit1(dv, td);
    fit1(dctx, td);
    fit1(dmid, td);
    fit1(df1, tf);
    fit1(dfa, tf);
    fit1(dlnf, td);
    fit1(dlogits, logit_len);
    fit1(datt_row, t);
  }
};

template <typename S>
static void check_input(const ModelConfig& c, std::span<const int> ids) {
  if (ids.empty()) throw DataError("model input is empty");
  if (static_cast<int>(ids.size()) > c.seq_len)
    throw DataError("input length " + std::to_string(ids.size()) + " exceeds seq_len " +
                    std::to_string(c.seq_len) + " (assembly should have truncated)");
  for (int id : ids)
    if (id < 0 || id >= c.vocab_size)
      throw DataError("token id " + std::to_string(id) + " outside vocabulary");
}

template <typename S>
static void forward_ws(const ModelT<S>& m, std::span<const int> ids, Workspace<S>& ws) {
  const ModelConfig& c = m.cfg;
  check_input<S>(c, ids);
  const int T = static_cast<int>(ids.size());
  const int D = c.model_dim, H = c.n_heads, hd = c.head_dim(), F = c.ff_dim;
  const bool causal = c.mode == ModelMode::causal_lm;
  const S inv_sqrt_hd = S(1) / std::sqrt(static_cast<S>(hd));
  ws.ensure(c, T);

  const S* tok_emb = m.w.data() + m.spec("tok_emb").offset;
  const S* pos_emb = m.w.data() + m.spec("pos_emb").offset;
  for (int t = 0; t < T; ++t) {
    const S* te = tok_emb + static_cast<size_t>(ids[t]) * D;
    const S* pe = pos_emb + static_cast<size_t>(t) * D;
    S* xr = ws.x[0].data() + static_cast<size_t>(t) * D;
    for (int i = 0; i < D; ++i) xr[i] = te[i] + pe[i];
  }

  for (int l = 0; l < c.n_layers; ++l) {
    std::string p = "l" + std::to_string(l) + ".";
    const S* base = m.w.data();
    auto W = [&](const char* n) { return base + m.spec(p + n).offset; };

    layernorm_fwd(ws.x[l].data(), W("ln1.gain"), W("ln1.bias"), ws.ln1[l].data(),
                  ws.ln1_mean[l].data(), ws.ln1_rstd[l].data(), T, D);
    linear_fwd(ws.ln1[l].data(), W("attn.wq"), W("attn.bq"), ws.q[l].data(), T, D, D);
    linear_fwd(ws.ln1[l].data(), W("attn.wk"), W("attn.bk"), ws.k[l].data(), T, D, D);
    linear_fwd(ws.ln1[l].data(), W("attn.wv"), W("attn.bv"), ws.v[l].data(), T, D, D);

    std::fill(ws.ctx[l].begin(), ws.ctx[l].begin() + static_cast<size_t>(T) * D, S(0));
    for (int h = 0; h < H; ++h) {
      const int off = h * hd;
      for (int t = 0; t < T; ++t) {
        S* row = ws.att[l].data() + (static_cast<size_t>(h) * T + t) * T;
        const int limit = causal ? t : T - 1;
        const S* qr = ws.q[l].data() + static_cast<size_t>(t) * D + off;
        S mx = std::numeric_limits<S>::lowest();
        for (int s = 0; s <= limit; ++s) {
          const S* kr = ws.k[l].data() + static_cast<size_t>(s) * D + off;
          S acc = 0;
          for (int j = 0; j < hd; ++j) acc += qr[j] * kr[j];
          acc *= inv_sqrt_hd;
          row[s] = acc;
          mx = acc > mx ? acc : mx;
        }
        S sum = 0;
        for (int s = 0; s <= limit; ++s) {
          row[s] = std::exp(row[s] - mx);
          sum += row[s];
        }
        const S inv = S(1) / sum;
        for (int s = 0; s <= limit; ++s) row[s] *= inv;
        for (int s = limit + 1; s < T; ++s) row[s] = 0;  // masked
        S* cr = ws.ctx[l].data() + static_cast<size_t>(t) * D + off;
        for (int s = 0; s <= limit; ++s) {
          const S a = row[s];
          const S* vr = ws.v[l].data() + static_cast<size_t>(s) * D + off;
          for (int j = 0; j < hd; ++j) cr[j] += a * vr[j];
        }
      }
    }

    // attention projection + residual
    for (int t = 0; t < T; ++t) {
      const S* cr = ws.ctx[l].data() + static_cast<size_t>(t) * D;
      const S* xr = ws.x[l].data() + static_cast<size_t>(t) * D;
      S* mr = ws.x_mid[l].data() + static_cast<size_t>(t) * D;
      const S* wo = W("attn.wo");
      const S* bo = W("attn.bo");
      for (int n = 0; n < D; ++n) {
        const S* wr = wo + static_cast<size_t>(n) * D;
        S acc = 0;
        for (int kk = 0; kk < D; ++kk) acc += cr[kk] * wr[kk];
        mr[n] = xr[n] + acc + bo[n];
      }
    }

    layernorm_fwd(ws.x_mid[l].data(), W("ln2.gain"), W("ln2.bias"), ws.ln2[l].data(),
                  ws.ln2_mean[l].data(), ws.ln2_rstd[l].data(), T, D);
    linear_fwd(ws.ln2[l].data(), W("ff.w1"), W("ff.b1"), ws.f1[l].data(), T, D, F);
    for (size_t i = 0; i < static_cast<size_t>(T) * F; ++i) ws.fa[l][i] = gelu(ws.f1[l][i]);
    // second ff matmul + residual into the next layer input
    for (int t = 0; t < T; ++t) {
      const S* ar = ws.fa[l].data() + static_cast<size_t>(t) * F;
      const S* mr = ws.x_mid[l].data() + static_cast<size_t>(t) * D;
      S* nx = ws.x[l + 1].data() + static_cast<size_t>(t) * D;
      const S* w2 = W("ff.w2");
      const S* b2 = W("ff.b2");
      for (int n = 0; n < D; ++n) {
        const S* wr = w2 + static_cast<size_t>(n) * F;
        S acc = 0;
        for (int kk = 0; kk < F; ++kk) acc += ar[kk] * wr[kk];
        nx[n] = mr[n] + acc + b2[n];
      }
    }
  }

  layernorm_fwd(ws.x[c.n_layers].data(), m.w.data() + m.spec("ln_f.gain").offset,
                m.w.data() + m.spec("ln_f.bias").offset, ws.lnf.data(), ws.lnf_mean.data(),
                ws.lnf_rstd.data(), T, D);

  if (causal) {
    linear_fwd(ws.lnf.data(), m.w.data() + m.spec("lm_head.w").offset, (const S*)nullptr,
               ws.logits.data(), T, D, c.vocab_size);
  } else {
    linear_fwd(ws.lnf.data(), m.w.data() + m.spec("cls_head.w").offset,
               m.w.data() + m.spec("cls_head.b").offset, ws.logits.data(), 1, D, c.n_styles);
  }
}

// Backward through the whole stack given d(logits) in ws.dlogits.
template <typename S>
static void backward_ws(ModelT<S>& m, std::span<const int> ids, Workspace<S>& ws) {
  const ModelConfig& c = m.cfg;
  const int T = static_cast<int>(ids.size());
  const int D = c.model_dim, H = c.n_heads, hd = c.head_dim(), F = c.ff_dim;
  const bool causal = c.mode == ModelMode::causal_lm;
  const S inv_sqrt_hd = S(1) / std::sqrt(static_cast<S>(hd));
  const size_t td = static_cast<size_t>(T) * D;

  std::fill(ws.dlnf.begin(), ws.dlnf.begin() + td, S(0));
  if (causal) {
    const S* wh = m.w.data() + m.spec("lm_head.w").offset;
    S* dwh = m.g.data() + m.spec("lm_head.w").offset;
    linear_bwd_input(ws.dlogits.data(), wh, ws.dlnf.data(), T, c.vocab_size, D);
    linear_bwd_params(ws.dlogits.data(), ws.lnf.data(), dwh, (S*)nullptr, T, c.vocab_size, D);
  } else {
    const S* wh = m.w.data() + m.spec("cls_head.w").offset;
    S* dwh = m.g.data() + m.spec("cls_head.w").offset;
    S* dbh = m.g.data() + m.spec("cls_head.b").offset;
    linear_bwd_input(ws.dlogits.data(), wh, ws.dlnf.data(), 1, c.n_styles, D);
    linear_bwd_params(ws.dlogits.data(), ws.lnf.data(), dwh, dbh, 1, c.n_styles, D);
  }

  std::fill(ws.dx.begin(), ws.dx.begin() + td, S(0));
  layernorm_bwd(ws.dlnf.data(), ws.x[c.n_layers].data(),
                m.w.data() + m.spec("ln_f.gain").offset, ws.lnf_mean.data(), ws.lnf_rstd.data(),
                ws.dx.data(), m.g.data() + m.spec("ln_f.gain").offset,
                m.g.data() + m.spec("ln_f.bias").offset, T, D);

  for (int l = c.n_layers - 1; l >= 0; --l) {
    std::string p = "l" + std::to_string(l) + ".";
    auto W = [&](const char* n) { return m.w.data() + m.spec(p + n).offset; };
    auto G = [&](const char* n) { return m.g.data() + m.spec(p + n).offset; };

    // dx holds d(x[l+1]); residual: dmid = dx, df2 = dx
    // ff.w2 backward
    std::fill(ws.dfa.begin(), ws.dfa.begin() + static_cast<size_t>(T) * F, S(0));
    linear_bwd_input(ws.dx.data(), W("ff.w2"), ws.dfa.data(), T, D, F);
    linear_bwd_params(ws.dx.data(), ws.fa[l].data(), G("ff.w2"), G("ff.b2"), T, D, F);
    for (size_t i = 0; i < static_cast<size_t>(T) * F; ++i)
      ws.df1[i] = ws.dfa[i] * gelu_grad(ws.f1[l][i]);
    std::fill(ws.dnorm.begin(), ws.dnorm.begin() + td, S(0));
    linear_bwd_input(ws.df1.data(), W("ff.w1"), ws.dnorm.data(), T, F, D);
    linear_bwd_params(ws.df1.data(), ws.ln2[l].data(), G("ff.w1"), G("ff.b1"), T, F, D);

    // dmid accumulates residual + LN2 path
    std::copy(ws.dx.begin(), ws.dx.begin() + td, ws.dmid.begin());
    layernorm_bwd(ws.dnorm.data(), ws.x_mid[l].data(), W("ln2.gain"), ws.ln2_mean[l].data(),
                  ws.ln2_rstd[l].data(), ws.dmid.data(), G("ln2.gain"), G("ln2.bias"), T, D);

    // attention projection backward; dmid is also d(attn projection output)
    std::fill(ws.dctx.begin(), ws.dctx.begin() + td, S(0));
    linear_bwd_input(ws.dmid.data(), W("attn.wo"), ws.dctx.data(), T, D, D);
    linear_bwd_params(ws.dmid.data(), ws.ctx[l].data(), G("attn.wo"), G("attn.bo"), T, D, D);

    std::fill(ws.dq.begin(), ws.dq.begin() + td, S(0));
    std::fill(ws.dk.begin(), ws.dk.begin() + td, S(0));
    std::fill(ws.dv.begin(), ws.dv.begin() + td, S(0));
    for (int h = 0; h < H; ++h) {
      const int off = h * hd;
      for (int t = 0; t < T; ++t) {
        const int limit = causal ? t : T - 1;
        const S* row = ws.att[l].data() + (static_cast<size_t>(h) * T + t) * T;
        const S* dcr = ws.dctx.data() + static_cast<size_t>(t) * D + off;
        S* da = ws.datt_row.data();
        S dot_sum = 0;
        for (int s = 0; s <= limit; ++s) {
          const S* vr = ws.v[l].data() + static_cast<size_t>(s) * D + off;
          S acc = 0;
          for (int j = 0; j < hd; ++j) acc += dcr[j] * vr[j];
          da[s] = acc;
          dot_sum += acc * row[s];
          S* dvr = ws.dv.data() + static_cast<size_t>(s) * D + off;
          const S a = row[s];
          for (int j = 0; j < hd; ++j) dvr[j] += a * dcr[j];
        }
        // softmax backward, then chain to q and k
        const S* qr = ws.q[l].data() + static_cast<size_t>(t) * D + off;
        S* dqr = ws.dq.data() + static_cast<size_t>(t) * D + off;
        for (int s = 0; s <= limit; ++s) {
          const S ds = row[s] * (da[s] - dot_sum) * inv_sqrt_hd;
          if (ds == S(0)) continue;
          const S* kr = ws.k[l].data() + static_cast<size_t>(s) * D + off;
          S* dkr = ws.dk.data() + static_cast<size_t>(s) * D + off;
          for (int j = 0; j < hd; ++j) {
            dqr[j] += ds * kr[j];
            dkr[j] += ds * qr[j];
          }
        }
      }
    }

    std::fill(ws.dnorm.begin(), ws.dnorm.begin() + td, S(0));
    linear_bwd_input(ws.dq.data(), W("attn.wq"), ws.dnorm.data(), T, D, D);
    linear_bwd_params(ws.dq.data(), ws.ln1[l].data(), G("attn.wq"), G("attn.bq"), T, D, D);
    linear_bwd_input(ws.dk.data(), W("attn.wk"), ws.dnorm.data(), T, D, D);
    linear_bwd_params(ws.dk.data(), ws.ln1[l].data(), G("attn.wk"), G("attn.bk"), T, D, D);
    linear_bwd_input(ws.dv.data(), W("attn.wv"), ws.dnorm.data(), T, D, D);
    linear_bwd_params(ws.dv.data(), ws.ln1[l].data(), G("attn.wv"), G("attn.bv"), T, D, D);

    // d(x[l]) = dmid (residual) + LN1 path
    std::copy(ws.dmid.begin(), ws.dmid.begin() + td, ws.dx.begin());
    layernorm_bwd(ws.dnorm.data(), ws.x[l].data(), W("ln1.gain"), ws.ln1_mean[l].data(),
                  ws.ln1_rstd[l].data(), ws.dx.data(), G("ln1.gain"), G("ln1.bias"), T, D);
  }

  S* dtok = m.g.data() + m.spec("tok_emb").offset;
  S* dpos = m.g.data() + m.spec("pos_emb").offset;
  for (int t = 0; t < T; ++t) {
    const S* dxr = ws.dx.data() + static_cast<size_t>(t) * D;
    S* te = dtok + static_cast<size_t>(ids[t]) * D;
    S* pe = dpos + static_cast<size_t>(t) * D;
    for (int i = 0; i < D; ++i) {
      te[i] += dxr[i];
      pe[i] += dxr[i];
    }
  }
}

// =====================================================================
//  Public forward
// =====================================================================

template <typename S>
ForwardResult<S> forward(const ModelT<S>& m, std::span<const int> ids) {
  Workspace<S> ws;
  forward_ws(m, ids, ws);
  const int T = static_cast<int>(ids.size());
  ForwardResult<S> out;
  size_t logit_len = m.cfg.mode == ModelMode::causal_lm
                         ? static_cast<size_t>(T) * m.cfg.vocab_size
                         : static_cast<size_t>(m.cfg.n_styles);
  out.logits.assign(ws.logits.begin(), ws.logits.begin() + logit_len);
  out.attention.n_layers = m.cfg.n_layers;
  out.attention.n_heads = m.cfg.n_heads;
  out.attention.len = T;
  out.attention.w.resize(static_cast<size_t>(m.cfg.n_layers) * m.cfg.n_heads * T * T);
  for (int l = 0; l < m.cfg.n_layers; ++l)
    std::copy(ws.att[l].begin(), ws.att[l].begin() + static_cast<size_t>(m.cfg.n_heads) * T * T,
              out.attention.w.begin() + static_cast<size_t>(l) * m.cfg.n_heads * T * T);
  return out;
}

template <typename S>
std::vector<double> classify(const ModelT<S>& m, std::span<const int> ids) {
  if (m.cfg.mode != ModelMode::cls_classifier)
    throw UsageError("classify requires a classifier-mode model");
  Workspace<S> ws;
  forward_ws(m, ids, ws);
  std::vector<double> probs(ws.logits.begin(), ws.logits.begin() + m.cfg.n_styles);
  softmax_inplace(std::span<double>(probs));
  return probs;
}

// =====================================================================
//  Loss
// =====================================================================

template <typename S>
double batch_loss(ModelT<S>& m, const LmBatch& batch, bool backward) {
  if (m.cfg.mode != ModelMode::causal_lm) throw UsageError("LM batch on non-LM model");
  if (batch.ids.size() != batch.targets.size())
    throw UsageError("batch ids/targets size mismatch");
  const int V = m.cfg.vocab_size;

  size_t total_count = 0;
  for (size_t b = 0; b < batch.ids.size(); ++b) {
    if (batch.ids[b].size() != batch.targets[b].size())
      throw UsageError("targets misaligned with ids at batch index " + std::to_string(b));
    for (int tgt : batch.targets[b]) {
      if (tgt >= V) throw UsageError("target id outside vocabulary");
      if (tgt >= 0) ++total_count;
    }
  }
  if (total_count == 0) return 0.0;  // fully masked batch: flat loss, zero grads

  Workspace<S> ws;
  const double scale = 1.0 / static_cast<double>(total_count);
  double loss = 0.0;
  for (size_t b = 0; b < batch.ids.size(); ++b) {
    const auto& ids = batch.ids[b];
    const auto& tgts = batch.targets[b];
    forward_ws(m, ids, ws);
    const int T = static_cast<int>(ids.size());
    double seq_loss = 0.0;
    for (int t = 0; t < T; ++t) {
      S* lg = ws.logits.data() + static_cast<size_t>(t) * V;
      S* dl = ws.dlogits.data() + static_cast<size_t>(t) * V;
      if (tgts[t] < 0) {
        if (backward) std::fill(dl, dl + V, S(0));
        continue;
      }
      S mx = lg[0];
      for (int i = 1; i < V; ++i) mx = lg[i] > mx ? lg[i] : mx;
      double sum = 0;
      for (int i = 0; i < V; ++i) sum += std::exp(static_cast<double>(lg[i] - mx));
      double logz = std::log(sum) + static_cast<double>(mx);
      seq_loss += logz - static_cast<double>(lg[tgts[t]]);
      if (backward) {
        for (int i = 0; i < V; ++i)
          dl[i] = static_cast<S>(std::exp(static_cast<double>(lg[i]) - logz) * scale);
        dl[tgts[t]] -= static_cast<S>(scale);
      }
    }
    if (!std::isfinite(seq_loss))
      throw NumericError("non-finite loss at batch index " + std::to_string(b));
    loss += seq_loss;
    if (backward) backward_ws(m, ids, ws);
  }
  return loss * scale;
}

template <typename S>
double batch_loss(ModelT<S>& m, const ClsBatch& batch, bool backward) {
  if (m.cfg.mode != ModelMode::cls_classifier)
    throw UsageError("classifier batch on non-classifier model");
  if (batch.ids.size() != batch.labels.size())
    throw UsageError("batch ids/labels size mismatch");
  if (batch.ids.empty()) return 0.0;
  const int C = m.cfg.n_styles;

  Workspace<S> ws;
  const double scale = 1.0 / static_cast<double>(batch.ids.size());
  double loss = 0.0;
  for (size_t b = 0; b < batch.ids.size(); ++b) {
    int label = batch.labels[b];
    if (label < 0 || label >= C)
      throw UsageError("style label out of range at batch index " + std::to_string(b));
    forward_ws(m, batch.ids[b], ws);
    S* lg = ws.logits.data();
    S mx = lg[0];
    for (int i = 1; i < C; ++i) mx = lg[i] > mx ? lg[i] : mx;
    double sum = 0;
    for (int i = 0; i < C; ++i) sum += std::exp(static_cast<double>(lg[i] - mx));
    double logz = std::log(sum) + static_cast<double>(mx);
    double ex_loss = logz - static_cast<double>(lg[label]);
    if (!std::isfinite(ex_loss))
      throw NumericError("non-finite loss at batch index " + std::to_string(b));
    loss += ex_loss;
    if (backward) {
      for (int i = 0; i < C; ++i)
        ws.dlogits[i] = static_cast<S>(std::exp(static_cast<double>(lg[i]) - logz) * scale);
      ws.dlogits[label] -= static_cast<S>(scale);
      backward_ws(m, batch.ids[b], ws);
    }
  }
  return loss * scale;
}

// =====================================================================
//  Optimizer
// =====================================================================

template <typename S>
static void adam_update(ModelT<S>& m, AdamState<S>& opt, const TrainConfig& tc) {
  if (opt.m.size() != m.w.size()) {
    opt.m.assign(m.w.size(), S(0));
    opt.v.assign(m.w.size(), S(0));
    opt.t = 0;
  }
  // global-norm clipping
  double norm2 = 0;
  for (S gv : m.g) norm2 += static_cast<double>(gv) * static_cast<double>(gv);
  double norm = std::sqrt(norm2);
  if (tc.clip_norm > 0 && norm > tc.clip_norm) {
    S f = static_cast<S>(tc.clip_norm / norm);
    for (S& gv : m.g) gv *= f;
  }

  opt.t += 1;
  double lr = tc.lr;
  if (tc.warmup_steps > 0 && opt.t < tc.warmup_steps)
    lr *= static_cast<double>(opt.t) / tc.warmup_steps;
  const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(opt.t));
  const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(opt.t));
  const S b1 = static_cast<S>(tc.beta1), b2 = static_cast<S>(tc.beta2);
  for (size_t i = 0; i < m.w.size(); ++i) {
    const S gv = m.g[i];
    opt.m[i] = b1 * opt.m[i] + (S(1) - b1) * gv;
    opt.v[i] = b2 * opt.v[i] + (S(1) - b2) * gv * gv;
    double mhat = static_cast<double>(opt.m[i]) / bc1;
    double vhat = static_cast<double>(opt.v[i]) / bc2;
    m.w[i] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + tc.eps));
  }
}

template <typename S>
double train_step(ModelT<S>& m, const LmBatch& batch, AdamState<S>& opt, const TrainConfig& tc) {
  m.zero_grad();
  double loss = batch_loss(m, batch, /*backward=*/true);
  adam_update(m, opt, tc);
  return loss;
}

template <typename S>
double train_step(ModelT<S>& m, const ClsBatch& batch, AdamState<S>& opt, const TrainConfig& tc) {
  m.zero_grad();
  double loss = batch_loss(m, batch, /*backward=*/true);
  adam_update(m, opt, tc);
  return loss;
}

// =====================================================================
//  Gradient check
// =====================================================================

template <typename BatchT>
static GradcheckReport gradcheck_impl(ModelT<double>& m, const BatchT& batch, double eps,
                                      size_t max_params, uint64_t seed) {
  m.zero_grad();
  batch_loss(m, batch, /*backward=*/true);
  std::vector<double> analytic = m.g;

  std::vector<size_t> idx(m.w.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (max_params < idx.size()) {
    Rng rng(mix_seed(seed, 0x6c));
    for (size_t i = 0; i < max_params; ++i) {
      size_t j = i + rng.uniform_int(idx.size() - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(max_params);
  }

  GradcheckReport report;
  report.n_checked = idx.size();
  for (size_t i : idx) {
    const double keep = m.w[i];
    m.w[i] = keep + eps;
    double lp = batch_loss(m, batch, /*backward=*/false);
    m.w[i] = keep - eps;
    double lm = batch_loss(m, batch, /*backward=*/false);
    m.w[i] = keep;
    double fd = (lp - lm) / (2.0 * eps);
    double a = analytic[i];
    double rel = std::abs(a - fd) / std::max(std::abs(a) + std::abs(fd), 1e-4);
    report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  return report;
}

GradcheckReport gradcheck(ModelT<double>& m, const LmBatch& batch, double eps, size_t max_params,
                          uint64_t seed) {
  return gradcheck_impl(m, batch, eps, max_params, seed);
}
GradcheckReport gradcheck(ModelT<double>& m, const ClsBatch& batch, double eps, size_t max_params,
                          uint64_t seed) {
  return gradcheck_impl(m, batch, eps, max_params, seed);
}

// =====================================================================
//  Checkpoints
// =====================================================================

static constexpr char kMagic[8] = {'D', 'R', 'G', 'M', 'O', 'D', 'E', 'L'};
static constexpr uint32_t kCkptVersion = 1;

static json config_to_json(const ModelConfig& c) {
  return json{{"mode", mode_name(c.mode)},   {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},        {"model_dim", c.model_dim},
              {"ff_dim", c.ff_dim},          {"seq_len", c.seq_len},
              {"vocab_size", c.vocab_size},  {"n_styles", c.n_styles}};
}

static ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.mode = mode_from_name(j.at("mode").get<std::string>());
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.seq_len = j.at("seq_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.n_styles = j.at("n_styles").get<int>();
  return c;
}

void save_model(const Model& m, const std::string& path) {
  json manifest;
  manifest["version"] = kCkptVersion;
  manifest["config"] = config_to_json(m.cfg);
  json tensors = json::array();
  for (const TensorSpec& sp : m.specs) {
    tensors.push_back(json{{"name", sp.name},
                           {"shape", sp.shape},
                           {"dtype", "f32"},
                           {"byte_offset", sp.offset * sizeof(float)},
                           {"numel", sp.numel}});
  }
  manifest["tensors"] = std::move(tensors);
  manifest["data_bytes"] = m.w.size() * sizeof(float);
  std::string mtext = manifest.dump();

  std::string out;
  out.reserve(8 + 4 + 8 + mtext.size() + m.w.size() * sizeof(float));
  out.append(kMagic, 8);
  auto put_le = [&out](uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put_le(kCkptVersion, 4);
  put_le(mtext.size(), 8);
  out += mtext;
  out.append(reinterpret_cast<const char*>(m.w.data()), m.w.size() * sizeof(float));
  write_text_file(path, out);
}

Model load_model(const std::string& path, const ModelConfig* expect) {
  std::string bytes;
  try {
    bytes = read_text_file(path);
  } catch (const DataError&) {
    throw DataError("cannot read checkpoint: " + path);
  }
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw DataError("not a model checkpoint (bad magic): " + path);
  auto get_le = [&bytes](size_t at, int n) {
    uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
    return v;
  };
  uint32_t version = static_cast<uint32_t>(get_le(8, 4));
  if (version != kCkptVersion)
    throw DataError("checkpoint version " + std::to_string(version) + " unsupported: " + path);
  uint64_t mlen = get_le(12, 8);
  if (20 + mlen > bytes.size()) throw DataError("checkpoint manifest truncated: " + path);

  json manifest;
  try {
    manifest = json::parse(bytes.substr(20, mlen));
  } catch (const json::exception& e) {
    throw DataError("checkpoint manifest unparseable: " + std::string(e.what()));
  }
  ModelConfig cfg = config_from_json(manifest.at("config"));
  cfg.validate();
  if (expect && !(cfg == *expect))
    throw DataError("checkpoint config does not match the expected configuration: " + path);

  Model m;
  m.cfg = cfg;
  m.specs = build_layout(cfg);
  m.rebuild_name_index();

  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != m.specs.size())
    throw DataError("checkpoint tensor count mismatch: " + path);
  for (size_t i = 0; i < m.specs.size(); ++i) {
    const auto& tj = tensors[i];
    const TensorSpec& sp = m.specs[i];
    if (tj.at("name").get<std::string>() != sp.name ||
        tj.at("shape").get<std::vector<int>>() != sp.shape ||
        tj.at("byte_offset").get<size_t>() != sp.offset * sizeof(float) ||
        tj.at("numel").get<size_t>() != sp.numel)
      throw DataError("checkpoint shape mismatch on tensor '" + sp.name + "': " + path);
  }
  size_t total = m.specs.back().offset + m.specs.back().numel;
  if (manifest.at("data_bytes").get<size_t>() != total * sizeof(float))
    throw DataError("checkpoint data size mismatch: " + path);
  if (bytes.size() != 20 + mlen + total * sizeof(float))
    throw DataError("checkpoint truncated or padded: " + path);

  m.w.resize(total);
  std::memcpy(m.w.data(), bytes.data() + 20 + mlen, total * sizeof(float));
  m.g.assign(total, 0.0f);
  for (float x : m.w)
    if (!std::isfinite(x)) throw DataError("checkpoint contains non-finite parameters: " + path);
  return m;
}

// =====================================================================
//  Explicit instantiations
// =====================================================================

template struct ModelT<float>;
template struct ModelT<double>;
template ModelT<float> init_model<float>(const ModelConfig&, uint64_t);
template ModelT<double> init_model<double>(const ModelConfig&, uint64_t);
template ModelT<double> cast_model<double, float>(const ModelT<float>&);
template ModelT<float> cast_model<float, double>(const ModelT<double>&);
template ForwardResult<float> forward<float>(const ModelT<float>&, std::span<const int>);
template ForwardResult<double> forward<double>(const ModelT<double>&, std::span<const int>);
template std::vector<double> classify<float>(const ModelT<float>&, std::span<const int>);
template std::vector<double> classify<double>(const ModelT<double>&, std::span<const int>);
template double batch_loss<float>(ModelT<float>&, const LmBatch&, bool);
template double batch_loss<double>(ModelT<double>&, const LmBatch&, bool);
template double batch_loss<float>(ModelT<float>&, const ClsBatch&, bool);
template double batch_loss<double>(ModelT<double>&, const ClsBatch&, bool);
template double train_step<float>(ModelT<float>&, const LmBatch&, AdamState<float>&,
                                  const TrainConfig&);
template double train_step<double>(ModelT<double>&, const LmBatch&, AdamState<double>&,
                                   const TrainConfig&);
template double train_step<float>(ModelT<float>&, const ClsBatch&, AdamState<float>&,
                                  const TrainConfig&);
template double train_step<double>(ModelT<double>&, const ClsBatch&, AdamState<double>&,
                                   const TrainConfig&);

}  // namespace drg
