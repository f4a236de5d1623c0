#ifndef DRG_GENERATE_HPP_
#define DRG_GENERATE_HPP_

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "drg/deletion.hpp"
#include "drg/model.hpp"
#include "drg/retrieve.hpp"
#include "drg/tokenizer.hpp"

namespace drg {

enum class Variant { blind, guided };
const char* variant_name(Variant v);
Variant variant_from_name(std::string_view name);

// Assembled conditioning prefix, ending with OUT_START:
//   blind:  [STYLE_s] [CON] c... [OUT]
//   guided: [ATTR] a... [CON] c... [OUT]
struct GenerationInput {
  std::vector<int> ids;
  Variant variant = Variant::blind;
  bool truncated = false;  // content tail dropped to fit max_prefix
};

GenerationInput assemble_blind(const Vocabulary& vocab, std::span<const std::string> content,
                               int target_style, int max_prefix);
GenerationInput assemble_guided(const Vocabulary& vocab, std::span<const std::string> content,
                                std::span<const std::string> attrs, int max_prefix,
                                bool allow_empty_attrs = false);

// Inverse of assembly; round-trips (variant, attributes, content) exactly.
struct ParsedInput {
  Variant variant = Variant::blind;
  int style = -1;  // blind only
  std::vector<std::string> attrs, content;
};
ParsedInput parse_input(const Vocabulary& vocab, std::span<const int> prefix_ids);

// One reconstruction-training sequence: full ids = prefix + x + EOS with
// targets masked to -1 on the conditioning prefix.
struct TrainingExample {
  std::vector<int> ids;
  std::vector<int> targets;
  int source_style = 0;
  bool noised = false;
  int noise_style = -1;  // style the replacement attributes came from
};

// Builds reconstruction examples from delete-stage splits. The guided
// variant replaces each of two seeded floor(0.05 n)-sized index sets with
// random same-style and other-style attributes; blind is never noised and
// conditions on the sentence's own style token.
std::vector<TrainingExample> make_training_examples(
    const Vocabulary& vocab, std::span<const std::vector<ContentAttributeSplit>> splits_per_style,
    Variant variant, uint64_t noise_seed, int seq_len, size_t* truncated_count = nullptr);

struct GstTrainReport {
  std::vector<double> epoch_loss;
};

// Teacher-forced reconstruction training; loss only on output positions.
GstTrainReport train_gst(Model& m, std::span<const TrainingExample> examples, int epochs,
                         double lr, int batch_size, uint64_t shuffle_seed, int warmup_steps = 50);

// ---- decoding ----

struct Hypothesis {
  std::vector<int> out_ids;  // generated ids, EOS excluded
  double logprob = 0.0;      // cumulative log-probability (EOS step included)
  int steps = 0;
  bool finished = false;
  double score() const { return logprob / std::max(1, steps); }  // length-normalized
};

// Next-token logits given the full id sequence so far. Decoupled from the
// model so toy LMs can drive the decoder in tests.
using StepLogits = std::function<std::vector<float>(std::span<const int>)>;
StepLogits model_step(const Model& m);

// Length-capped beam search; hypotheses finish on eos_id, final ranking is
// by length-normalized log-probability. When nothing finishes within
// max_len the best unfinished hypothesis comes back flagged.
std::vector<Hypothesis> beam_decode(const StepLogits& step, std::span<const int> prefix,
                                    int eos_id, int width, int max_len);

std::vector<int> greedy_decode(const StepLogits& step, std::span<const int> prefix, int eos_id,
                               int max_len);

// Picks the beam the Delete Transformer scores highest for the target
// style; ties go to the higher cumulative log-probability.
using StyleScorer = std::function<std::vector<double>(std::span<const int> out_ids)>;
const Hypothesis& rescore_and_pick(std::span<const Hypothesis> beams, const StyleScorer& scorer,
                                   int target_style);
const Hypothesis& rescore_and_pick(std::span<const Hypothesis> beams, const Model& dt,
                                   int target_style);

// ---- end-to-end transfer ----

struct TransferPipeline {
  const Model* dt = nullptr;
  const Model* gst = nullptr;        // generator matching `variant`
  const Model* gst_blind = nullptr;  // optional fallback for guided no_signal
  const Vocabulary* vocab = nullptr;
  const HeadLayerChoice* choice = nullptr;
  const ContentIndex* index = nullptr;  // guided only
  Variant variant = Variant::blind;
  int beam_width = 5;
  int max_extra_tokens = 8;
};

struct TransferResult {
  std::vector<std::string> input, content, attrs_or_retrieved, output;
  double retrieval_similarity = -1.0;
  bool no_signal = false;
  bool fell_back_blind = false;
};

TransferResult transfer(const TransferPipeline& pipe, std::span<const std::string> tokens,
                        int source_style, int target_style);

}  // namespace drg

#endif  // DRG_GENERATE_HPP_
