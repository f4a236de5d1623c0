#ifndef DRG_MODEL_HPP_
#define DRG_MODEL_HPP_

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "drg/common.hpp"

namespace drg {

enum class ModelMode { causal_lm, cls_classifier };

const char* mode_name(ModelMode mode);
ModelMode mode_from_name(std::string_view name);

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int model_dim = 128;
  int ff_dim = 512;
  int seq_len = 64;
  int vocab_size = 0;
  ModelMode mode = ModelMode::causal_lm;
  int n_styles = 0;  // classifier head width

  int head_dim() const { return model_dim / n_heads; }
  void validate() const;       // throws UsageError on bad dimensions
  size_t param_count() const;  // closed-form total parameter count
  bool operator==(const ModelConfig&) const = default;
};

struct TensorSpec {
  std::string name;
  std::vector<int> shape;
  size_t offset = 0;  // element offset into the flat parameter buffer
  size_t numel = 0;
};

// All parameters live in one flat buffer with a named-tensor manifest;
// gradients mirror the layout. Scalar type is float for training and
// double for gradient checking.
template <typename S>
struct ModelT {
  ModelConfig cfg;
  std::vector<TensorSpec> specs;
  std::vector<S> w;  // parameters
  std::vector<S> g;  // gradients, same layout

  std::span<S> tensor(std::string_view name);
  std::span<const S> tensor(std::string_view name) const;
  std::span<S> grad(std::string_view name);
  const TensorSpec& spec(std::string_view name) const;
  size_t n_params() const { return w.size(); }
  void zero_grad() { std::fill(g.begin(), g.end(), S(0)); }

 private:
  std::unordered_map<std::string, int> by_name_;
  void rebuild_name_index();
  template <typename T>
  friend ModelT<T> init_model(const ModelConfig&, uint64_t);
  template <typename To, typename From>
  friend ModelT<To> cast_model(const ModelT<From>&);
  friend ModelT<float> load_model(const std::string&, const ModelConfig*);
};

using Model = ModelT<float>;

// Weights drawn normal(0, 0.02) in manifest order; layer-norm gains 1,
// biases 0. Deterministic given (config, seed).
template <typename S>
ModelT<S> init_model(const ModelConfig& cfg, uint64_t seed);

// e.g. cast_model<double>(m) for the gradcheck path
template <typename To, typename From>
ModelT<To> cast_model(const ModelT<From>& m);

// Post-softmax attention weights for every (layer, head); rows are
// row-stochastic and causal masking zeroes entries above the diagonal.
template <typename S>
struct AttnMapT {
  int n_layers = 0, n_heads = 0, len = 0;
  std::vector<S> w;  // [layer][head][query][key]
  S at(int l, int h, int t, int s) const {
    return w[((static_cast<size_t>(l) * n_heads + h) * len + t) * len + s];
  }
};
using AttentionMap = AttnMapT<float>;

template <typename S>
struct ForwardResult {
  // causal: [T * vocab] next-token logits; classifier: [n_styles] from CLS
  std::vector<S> logits;
  AttnMapT<S> attention;
};

template <typename S>
ForwardResult<S> forward(const ModelT<S>& m, std::span<const int> ids);

// Softmax of the classifier head over styles; input must start with CLS.
template <typename S>
std::vector<double> classify(const ModelT<S>& m, std::span<const int> ids);

// ---- training ----

// Causal LM batch: per sequence, targets align with ids; -1 marks positions
// excluded from the loss (conditioning prefix, padding).
struct LmBatch {
  std::vector<std::vector<int>> ids;
  std::vector<std::vector<int>> targets;
};

// Classifier batch: ids start with CLS, one style label per sequence.
struct ClsBatch {
  std::vector<std::vector<int>> ids;
  std::vector<int> labels;
};

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int warmup_steps = 0;
  double clip_norm = 1.0;
};

template <typename S>
struct AdamState {
  std::vector<S> m, v;
  int64_t t = 0;
};

// Mean cross-entropy over counted positions; fills m.g when backward is set.
// Throws NumericError naming the batch index when a loss goes non-finite.
template <typename S>
double batch_loss(ModelT<S>& m, const LmBatch& batch, bool backward);
template <typename S>
double batch_loss(ModelT<S>& m, const ClsBatch& batch, bool backward);

// One optimizer step: zero grads, backprop, clip global norm, Adam update
// with linear warmup. Returns the batch loss.
template <typename S>
double train_step(ModelT<S>& m, const LmBatch& batch, AdamState<S>& opt, const TrainConfig& tc);
template <typename S>
double train_step(ModelT<S>& m, const ClsBatch& batch, AdamState<S>& opt, const TrainConfig& tc);

// ---- gradient checking (double precision) ----

struct GradcheckReport {
  double max_rel_err = 0.0;
  size_t n_checked = 0;
};

// Central finite differences on a seeded parameter subsample. Relative
// error uses |analytic - fd| / max(|analytic| + |fd|, 1e-4) so near-zero
// gradients do not divide by FD noise.
GradcheckReport gradcheck(ModelT<double>& m, const LmBatch& batch, double eps,
                          size_t max_params, uint64_t seed);
GradcheckReport gradcheck(ModelT<double>& m, const ClsBatch& batch, double eps,
                          size_t max_params, uint64_t seed);

// ---- checkpoints ----
// 8-byte magic, u32 version, u64 manifest length, UTF-8 JSON manifest
// (config + per-tensor name/shape/dtype/byte offset), then raw
// little-endian float32 data. load(save(m)) is bitwise-identical.

void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path, const ModelConfig* expect = nullptr);

}  // namespace drg

#endif  // DRG_MODEL_HPP_
