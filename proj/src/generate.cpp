#include "drg/generate.hpp"

#include <algorithm>
#include <cmath>

namespace drg {

const char* variant_name(Variant v) { return v == Variant::blind ? "blind" : "guided"; }

Variant variant_from_name(std::string_view name) {
  if (name == "blind") return Variant::blind;
  if (name == "guided") return Variant::guided;
  throw UsageError("unknown generator variant: " + std::string(name));
}

// ---- input assembly ----

GenerationInput assemble_blind(const Vocabulary& vocab, std::span<const std::string> content,
                               int target_style, int max_prefix) {
  if (max_prefix < 3) throw UsageError("prefix budget too small for the blind layout");
  GenerationInput in;
  in.variant = Variant::blind;
  in.ids.push_back(vocab.style_token(target_style));
  in.ids.push_back(Vocabulary::kConStart);
  auto ids = vocab.encode(content);
  size_t keep = std::min(ids.size(), static_cast<size_t>(max_prefix - 3));
  in.truncated = keep < ids.size();
  in.ids.insert(in.ids.end(), ids.begin(), ids.begin() + keep);
  in.ids.push_back(Vocabulary::kOutStart);
  return in;
}

GenerationInput assemble_guided(const Vocabulary& vocab, std::span<const std::string> content,
                                std::span<const std::string> attrs, int max_prefix,
                                bool allow_empty_attrs) {
  if (attrs.empty() && !allow_empty_attrs)
    throw UsageError("guided assembly without attributes (no no_signal fallback in effect)");
  GenerationInput in;
  in.variant = Variant::guided;
  in.ids.push_back(Vocabulary::kAttrStart);
  auto attr_ids = vocab.encode(attrs);
  in.ids.insert(in.ids.end(), attr_ids.begin(), attr_ids.end());
  in.ids.push_back(Vocabulary::kConStart);
  auto ids = vocab.encode(content);
  int room = max_prefix - static_cast<int>(in.ids.size()) - 1;
  if (room < 0) throw UsageError("prefix budget too small for the attribute block");
  size_t keep = std::min(ids.size(), static_cast<size_t>(room));
  in.truncated = keep < ids.size();
  in.ids.insert(in.ids.end(), ids.begin(), ids.begin() + keep);
  in.ids.push_back(Vocabulary::kOutStart);
  return in;
}

ParsedInput parse_input(const Vocabulary& vocab, std::span<const int> prefix_ids) {
  if (prefix_ids.size() < 2 || prefix_ids.back() != Vocabulary::kOutStart)
    throw DataError("assembled input must end with the output marker");
  ParsedInput parsed;
  size_t i = 0;
  if (prefix_ids[0] == Vocabulary::kAttrStart) {
    parsed.variant = Variant::guided;
    ++i;
    while (i < prefix_ids.size() && prefix_ids[i] != Vocabulary::kConStart)
      parsed.attrs.push_back(vocab.surface(prefix_ids[i++]));
  } else {
    parsed.variant = Variant::blind;
    parsed.style = vocab.style_of_token(prefix_ids[0]);
    if (parsed.style < 0) throw DataError("blind input must start with a style token");
    ++i;
  }
  if (i >= prefix_ids.size() || prefix_ids[i] != Vocabulary::kConStart)
    throw DataError("assembled input missing the content marker");
  ++i;
  while (i + 1 < prefix_ids.size()) parsed.content.push_back(vocab.surface(prefix_ids[i++]));
  return parsed;
}

// ---- training examples ----

std::vector<TrainingExample> make_training_examples(
    const Vocabulary& vocab, std::span<const std::vector<ContentAttributeSplit>> splits_per_style,
    Variant variant, uint64_t noise_seed, int seq_len, size_t* truncated_count) {
  struct Slot {
    const ContentAttributeSplit* split;
    int style;
  };
  std::vector<Slot> slots;
  for (size_t s = 0; s < splits_per_style.size(); ++s)
    for (const auto& split : splits_per_style[s])
      slots.push_back({&split, static_cast<int>(s)});
  const size_t n = slots.size();

  // attribute banks per style: every non-empty attribute set seen in training
  std::vector<std::vector<const ContentAttributeSplit*>> banks(splits_per_style.size());
  for (size_t s = 0; s < splits_per_style.size(); ++s)
    for (const auto& split : splits_per_style[s])
      if (!split.attrs.empty()) banks[s].push_back(&split);

  // deterministic noising assignment: floor(0.05 n) same-style, then
  // floor(0.05 n) other-style, over a seeded permutation of the examples
  enum class Noise { none, same_style, other_style };
  std::vector<Noise> assignment(n, Noise::none);
  if (variant == Variant::guided && n > 0) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(noise_seed, 0x0153));
    rng.shuffle(order);
    const size_t k = n / 20;  // floor(0.05 n)
    for (size_t i = 0; i < k; ++i) assignment[order[i]] = Noise::same_style;
    if (splits_per_style.size() > 1)
      for (size_t i = k; i < 2 * k; ++i) assignment[order[i]] = Noise::other_style;
  }

  Rng attr_rng(mix_seed(noise_seed, 0xa77));
  std::vector<TrainingExample> examples;
  examples.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const ContentAttributeSplit& split = *slots[i].split;
    const int style = slots[i].style;
    TrainingExample ex;
    ex.source_style = style;

    std::span<const std::string> attrs = split.attrs;
    if (assignment[i] != Noise::none) {
      int from_style = style;
      if (assignment[i] == Noise::other_style) {
        size_t pick = attr_rng.uniform_int(splits_per_style.size() - 1);
        from_style = static_cast<int>(pick >= static_cast<size_t>(style) ? pick + 1 : pick);
      }
      if (!banks[from_style].empty()) {
        attrs = banks[from_style][attr_rng.uniform_int(banks[from_style].size())]->attrs;
        ex.noised = true;
        ex.noise_style = from_style;
      }
    }

    // reconstruction target is the original sentence, own attrs or not
    auto target_tokens = reconstruct(split);
    auto y = vocab.encode(target_tokens);
    // prefix budget leaves room for the output and its EOS; when the
    // sentence alone fills the window the output tail gets truncated, not
    // the marker/attribute skeleton
    int min_budget = variant == Variant::guided ? static_cast<int>(attrs.size()) + 3 : 3;
    int budget = std::max(min_budget, seq_len - static_cast<int>(y.size()) - 1);
    GenerationInput in =
        variant == Variant::blind
            ? assemble_blind(vocab, split.content, style, budget)
            : assemble_guided(vocab, split.content, attrs, budget, /*allow_empty_attrs=*/true);
    if (static_cast<int>(in.ids.size()) >= seq_len)
      throw DataError("attribute block alone exceeds the model window of " +
                      std::to_string(seq_len) + " tokens");

    if (in.truncated && truncated_count) ++*truncated_count;
    ex.ids = in.ids;
    ex.targets.assign(ex.ids.size(), -1);
    for (int id : y) {
      if (static_cast<int>(ex.ids.size()) >= seq_len) break;
      ex.targets.push_back(-1);  // placeholder, fixed below
      ex.ids.push_back(id);
    }
    if (static_cast<int>(ex.ids.size()) < seq_len) {
      ex.targets.push_back(-1);
      ex.ids.push_back(Vocabulary::kEos);
    }
    // next-token targets: position t predicts ids[t+1], starting at OUT.
    // The final position predicts nothing, so it is dropped outright.
    const size_t prefix_len = in.ids.size();
    for (size_t t = prefix_len - 1; t + 1 < ex.ids.size(); ++t) ex.targets[t] = ex.ids[t + 1];
    ex.targets.pop_back();
    ex.ids.pop_back();
    examples.push_back(std::move(ex));
  }
  return examples;
}

GstTrainReport train_gst(Model& m, std::span<const TrainingExample> examples, int epochs,
                         double lr, int batch_size, uint64_t shuffle_seed, int warmup_steps) {
  if (m.cfg.mode != ModelMode::causal_lm) throw UsageError("GST training needs a causal model");
  GstTrainReport report;
  AdamState<float> opt;
  TrainConfig tc;
  tc.lr = lr;
  tc.warmup_steps = warmup_steps;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    double epoch_loss = 0.0;
    size_t batches = 0;
    for (const auto& batch_idx :
         epoch_batches(examples.size(), batch_size, mix_seed(shuffle_seed, 0x957), epoch)) {
      LmBatch batch;
      for (size_t i : batch_idx) {
        batch.ids.push_back(examples[i].ids);
        batch.targets.push_back(examples[i].targets);
      }
      epoch_loss += train_step(m, batch, opt, tc);
      ++batches;
    }
    report.epoch_loss.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
  }
  return report;
}

// ---- decoding ----

StepLogits model_step(const Model& m) {
  return [&m](std::span<const int> ids) {
    auto out = forward(m, ids);
    const int V = m.cfg.vocab_size;
    std::vector<float> last(out.logits.end() - V, out.logits.end());
    return last;
  };
}

static std::vector<double> log_softmax(std::span<const float> logits) {
  double mx = logits[0];
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - mx);
  double logz = std::log(sum) + mx;
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - logz;
  return out;
}

std::vector<Hypothesis> beam_decode(const StepLogits& step, std::span<const int> prefix,
                                    int eos_id, int width, int max_len) {
  if (width < 1) throw UsageError("beam width must be >= 1");
  if (max_len < 1) throw UsageError("max_len must be >= 1");

  std::vector<Hypothesis> beams{Hypothesis{}};
  std::vector<int> ids(prefix.begin(), prefix.end());
  for (int steps = 0; steps < max_len; ++steps) {
    bool all_done = true;
    for (const auto& b : beams) all_done &= b.finished;
    if (all_done) break;

    std::vector<Hypothesis> candidates;
    for (const Hypothesis& beam : beams) {
      if (beam.finished) {
        candidates.push_back(beam);  // frozen
        continue;
      }
      ids.resize(prefix.size());
      ids.insert(ids.end(), beam.out_ids.begin(), beam.out_ids.end());
      auto logp = log_softmax(step(ids));

      // top `width` next tokens; ties break to the lower id
      std::vector<int> top(logp.size());
      for (size_t i = 0; i < top.size(); ++i) top[i] = static_cast<int>(i);
      size_t take = std::min<size_t>(width, top.size());
      std::partial_sort(top.begin(), top.begin() + take, top.end(), [&](int a, int b) {
        if (logp[a] != logp[b]) return logp[a] > logp[b];
        return a < b;
      });
      for (size_t c = 0; c < take; ++c) {
        Hypothesis next = beam;
        next.logprob += logp[top[c]];
        next.steps += 1;
        if (top[c] == eos_id)
          next.finished = true;
        else
          next.out_ids.push_back(top[c]);
        candidates.push_back(std::move(next));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Hypothesis& a, const Hypothesis& b) { return a.logprob > b.logprob; });
    if (candidates.size() > static_cast<size_t>(width)) candidates.resize(width);
    beams = std::move(candidates);
  }

  // finished hypotheses first, ranked by length-normalized score
  std::stable_sort(beams.begin(), beams.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.finished != b.finished) return a.finished;
    return a.score() > b.score();
  });
  return beams;
}

std::vector<int> greedy_decode(const StepLogits& step, std::span<const int> prefix, int eos_id,
                               int max_len) {
  std::vector<int> ids(prefix.begin(), prefix.end());
  std::vector<int> out;
  for (int t = 0; t < max_len; ++t) {
    auto logits = step(ids);
    int best = 0;
    for (size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[best]) best = static_cast<int>(i);
    if (best == eos_id) break;
    out.push_back(best);
    ids.push_back(best);
  }
  return out;
}

const Hypothesis& rescore_and_pick(std::span<const Hypothesis> beams, const StyleScorer& scorer,
                                   int target_style) {
  if (beams.empty()) throw UsageError("rescore over an empty beam set");
  size_t best = 0;
  double best_p = -1.0;
  for (size_t i = 0; i < beams.size(); ++i) {
    double p = scorer(beams[i].out_ids)[target_style];
    if (p > best_p || (p == best_p && beams[i].logprob > beams[best].logprob)) {
      best_p = p;
      best = i;
    }
  }
  return beams[best];
}

const Hypothesis& rescore_and_pick(std::span<const Hypothesis> beams, const Model& dt,
                                   int target_style) {
  return rescore_and_pick(
      beams,
      [&dt](std::span<const int> out_ids) {
        std::vector<int> ids{Vocabulary::kCls};
        for (int id : out_ids) {
          if (static_cast<int>(ids.size()) >= dt.cfg.seq_len) break;
          ids.push_back(id);
        }
        return classify(dt, ids);
      },
      target_style);
}

// ---- end-to-end ----

TransferResult transfer(const TransferPipeline& pipe, std::span<const std::string> tokens,
                        int source_style, int target_style) {
  if (!pipe.dt || !pipe.gst || !pipe.vocab || !pipe.choice)
    throw UsageError("transfer pipeline is missing a trained component");
  const Vocabulary& vocab = *pipe.vocab;

  TransferResult res;
  res.input.assign(tokens.begin(), tokens.end());
  auto split = split_sentence(*pipe.dt, vocab, *pipe.choice, tokens, source_style);
  res.content = split.content;

  const Model* generator = pipe.gst;
  Variant variant = pipe.variant;
  std::vector<std::string> attrs;
  if (variant == Variant::guided) {
    if (!pipe.index) throw UsageError("guided transfer needs a retrieval index");
    auto hit = pipe.index->retrieve(split.content);
    res.retrieval_similarity = hit.similarity;
    res.no_signal = hit.no_signal;
    if (hit.no_signal) {
      if (!pipe.gst_blind)
        throw DataError("retrieval found no signal and no blind generator is available");
      generator = pipe.gst_blind;
      variant = Variant::blind;
      res.fell_back_blind = true;
    } else {
      attrs = hit.attrs;
      res.attrs_or_retrieved = hit.attrs;
    }
  }

  const int seq_len = generator->cfg.seq_len;
  int want = static_cast<int>(split.content.size() + attrs.size()) + pipe.max_extra_tokens;
  GenerationInput in = variant == Variant::blind
                           ? assemble_blind(vocab, split.content, target_style, seq_len - 2)
                           : assemble_guided(vocab, split.content, attrs, seq_len - 2);
  int max_len = std::min(want, seq_len - static_cast<int>(in.ids.size()));
  auto beams = beam_decode(model_step(*generator), in.ids, Vocabulary::kEos, pipe.beam_width,
                           std::max(1, max_len));
  const Hypothesis& picked = rescore_and_pick(beams, *pipe.dt, target_style);
  res.output = vocab.decode(picked.out_ids);
  return res;
}

}  // namespace drg
