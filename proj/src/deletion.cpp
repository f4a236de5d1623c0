#include "drg/deletion.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>

namespace drg {

std::vector<std::string> reconstruct(const ContentAttributeSplit& split) {
  const size_t total = split.content.size() + split.attrs.size();
  std::vector<std::string> out(total);
  std::vector<bool> taken(total, false);
  for (size_t i = 0; i < split.attrs.size(); ++i) {
    int pos = split.attr_positions[i];
    if (pos < 0 || pos >= static_cast<int>(total) || taken[pos])
      throw DataError("attribute position " + std::to_string(pos) + " invalid for reconstruction");
    out[pos] = split.attrs[i];
    taken[pos] = true;
  }
  size_t ci = 0;
  for (size_t i = 0; i < total; ++i)
    if (!taken[i]) out[i] = split.content[ci++];
  return out;
}

std::vector<int> classifier_input(const Vocabulary& vocab, std::span<const std::string> tokens,
                                  int seq_len) {
  std::vector<int> ids;
  ids.reserve(std::min<size_t>(tokens.size() + 1, seq_len));
  ids.push_back(Vocabulary::kCls);
  auto encoded = vocab.encode(tokens);
  for (int id : encoded) {
    if (static_cast<int>(ids.size()) >= seq_len) break;  // truncate, scored tokens only
    ids.push_back(id);
  }
  return ids;
}

ImportanceScores importance_scores(const Model& dt, const Vocabulary& vocab,
                                   std::span<const std::string> tokens, int head, int layer) {
  if (dt.cfg.mode != ModelMode::cls_classifier)
    throw UsageError("importance scores need a classifier-mode model");
  if (head < 0 || head >= dt.cfg.n_heads || layer < 0 || layer >= dt.cfg.n_layers)
    throw UsageError("(head " + std::to_string(head) + ", layer " + std::to_string(layer) +
                     ") out of range for this model");
  auto ids = classifier_input(vocab, tokens, dt.cfg.seq_len);
  auto out = forward(dt, ids);
  ImportanceScores scores;
  scores.score.assign(tokens.size(), 0.0);
  // CLS row restricted to sentence positions; tokens past the window keep 0
  for (size_t t = 1; t < ids.size(); ++t)
    scores.score[t - 1] = out.attention.at(layer, head, 0, static_cast<int>(t));
  return scores;
}

Reduction reduce(const ImportanceScores& scores, std::span<const std::string> tokens,
                 double gamma) {
  if (gamma < 0.0 || gamma > 1.0) throw UsageError("gamma must be in [0, 1]");
  if (scores.score.size() != tokens.size())
    throw UsageError("importance scores misaligned with tokens");
  Reduction red;
  red.source.assign(tokens.begin(), tokens.end());
  red.gamma = gamma;

  const int n = static_cast<int>(tokens.size());
  int k = static_cast<int>(std::floor(gamma * n + 0.5));  // round half up
  if (gamma > 0.0 && n >= 1 && k == 0) k = 1;  // a no-op reduction cannot confuse anything
  k = std::min(k, n);

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores.score[a] > scores.score[b];  // stable: ties keep leftmost first
  });
  red.removed_positions.assign(order.begin(), order.begin() + k);
  std::sort(red.removed_positions.begin(), red.removed_positions.end());

  std::vector<bool> removed(n, false);
  for (int pos : red.removed_positions) removed[pos] = true;
  for (int i = 0; i < n; ++i)
    if (!removed[i]) red.surviving.push_back(tokens[i]);
  return red;
}

double confusion_score(std::span<const double> style_probs, double lambda) {
  if (lambda <= 0.0) throw UsageError("lambda must be positive");
  if (style_probs.empty()) throw UsageError("empty style distribution");
  double sum = 0.0;
  for (double p : style_probs) sum += p;
  if (std::abs(sum - 1.0) > 1e-6)
    throw UsageError("style probabilities sum to " + format_double(sum) + ", expected 1");
  size_t top = 0;
  for (size_t i = 1; i < style_probs.size(); ++i)
    if (style_probs[i] > style_probs[top]) top = i;
  double rest = 0.0;
  for (size_t i = 0; i < style_probs.size(); ++i)
    if (i != top) rest += style_probs[i];
  return (style_probs[top] + lambda) / (rest + lambda);
}

HeadLayerChoice select_head_layer(const Model& dt, const Vocabulary& vocab,
                                  std::span<const LabeledSentence> val_sentences, double gamma,
                                  double lambda) {
  if (val_sentences.empty()) throw DataError("head-layer selection needs a non-empty validation set");
  const int H = dt.cfg.n_heads, L = dt.cfg.n_layers;

  HeadLayerChoice choice;
  choice.gamma = gamma;
  choice.lambda = lambda;
  choice.n_heads = H;
  choice.n_layers = L;
  choice.mean_z.assign(static_cast<size_t>(H) * L, 0.0);

  for (const LabeledSentence& sent : val_sentences) {
    auto ids = classifier_input(vocab, sent.tokens, dt.cfg.seq_len);
    auto out = forward(dt, ids);
    ImportanceScores scores;
    scores.score.assign(sent.tokens.size(), 0.0);
    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h) {
        for (size_t t = 1; t < ids.size(); ++t)
          scores.score[t - 1] = out.attention.at(l, h, 0, static_cast<int>(t));
        std::fill(scores.score.begin() + (ids.size() - 1), scores.score.end(), 0.0);
        Reduction red = reduce(scores, sent.tokens, gamma);
        auto probs = classify(dt, classifier_input(vocab, red.surviving, dt.cfg.seq_len));
        choice.mean_z[static_cast<size_t>(l) * H + h] += confusion_score(probs, lambda);
      }
    }
  }
  for (double& z : choice.mean_z) z /= static_cast<double>(val_sentences.size());

  // argmin; ties break to the lowest (layer, head)
  double best = choice.mean_z[0];
  choice.layer = 0;
  choice.head = 0;
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) {
      double z = choice.mean_z[static_cast<size_t>(l) * H + h];
      if (z < best) {
        best = z;
        choice.layer = l;
        choice.head = h;
      }
    }
  return choice;
}

ContentAttributeSplit split_sentence(const Model& dt, const Vocabulary& vocab,
                                     const HeadLayerChoice& choice,
                                     std::span<const std::string> tokens, int style) {
  auto scores = importance_scores(dt, vocab, tokens, choice.head, choice.layer);
  Reduction red = reduce(scores, tokens, choice.gamma);
  ContentAttributeSplit split;
  split.content = red.surviving;
  split.attr_positions = red.removed_positions;
  for (int pos : red.removed_positions) split.attrs.push_back(tokens[pos]);
  split.style = style;
  return split;
}

std::string choice_to_text(const HeadLayerChoice& c) {
  std::string out = "drg-head-choice v1\n";
  out += "head " + std::to_string(c.head) + "\n";
  out += "layer " + std::to_string(c.layer) + "\n";
  out += "gamma " + format_double(c.gamma) + "\n";
  out += "lambda " + format_double(c.lambda) + "\n";
  out += "heads " + std::to_string(c.n_heads) + "\n";
  out += "layers " + std::to_string(c.n_layers) + "\n";
  for (int l = 0; l < c.n_layers; ++l)
    for (int h = 0; h < c.n_heads; ++h)
      out += "z " + std::to_string(l) + " " + std::to_string(h) + " " +
             format_double(c.mean_z_at(h, l)) + "\n";
  return out;
}

HeadLayerChoice choice_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string header;
  if (!std::getline(in, header) || header != "drg-head-choice v1")
    throw DataError("not a head-choice file (bad header)");
  HeadLayerChoice c;
  std::string key;
  std::vector<std::array<double, 3>> table;
  while (in >> key) {
    if (key == "head") in >> c.head;
    else if (key == "layer") in >> c.layer;
    else if (key == "gamma") in >> c.gamma;
    else if (key == "lambda") in >> c.lambda;
    else if (key == "heads") in >> c.n_heads;
    else if (key == "layers") in >> c.n_layers;
    else if (key == "z") {
      std::array<double, 3> row{};
      in >> row[0] >> row[1] >> row[2];
      table.push_back(row);
    } else {
      throw DataError("unknown head-choice field: " + key);
    }
  }
  c.mean_z.assign(static_cast<size_t>(c.n_heads) * c.n_layers, 0.0);
  if (table.size() != c.mean_z.size()) throw DataError("head-choice z table incomplete");
  for (const auto& row : table)
    c.mean_z[static_cast<size_t>(row[0]) * c.n_heads + static_cast<size_t>(row[1])] = row[2];
  return c;
}

std::string split_to_tsv(const ContentAttributeSplit& split) {
  std::string out = join(split.content, " ");
  out += '\t';
  out += join(split.attrs, ",");
  out += '\t';
  for (size_t i = 0; i < split.attr_positions.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(split.attr_positions[i]);
  }
  return out;
}

ContentAttributeSplit split_from_tsv(const std::string& line, int style) {
  auto fields = split_on(line, '\t');
  if (fields.size() != 3) throw DataError("delete TSV line needs 3 fields: " + line);
  ContentAttributeSplit split;
  split.style = style;
  split.content = split_ws(fields[0]);
  if (!fields[1].empty()) split.attrs = split_on(fields[1], ',');
  if (!fields[2].empty())
    for (const auto& p : split_on(fields[2], ',')) split.attr_positions.push_back(std::stoi(p));
  if (split.attrs.size() != split.attr_positions.size())
    throw DataError("attribute/position count mismatch (comma inside an attribute token?): " + line);
  return split;
}

}  // namespace drg
