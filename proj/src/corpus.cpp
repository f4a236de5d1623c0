#include "drg/corpus.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace drg {

size_t DatasetSplit::count(Part p) const {
  size_t total = 0;
  for (const auto& per_style : part(p)) total += per_style.size();
  return total;
}

std::vector<LabeledSentence> load_style_file(const std::string& path, const StyleLabel& style,
                                             int* blank_lines_skipped) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const DataError&) {
    throw DataError("style '" + style.name + "': cannot read corpus file " + path);
  }
  std::vector<LabeledSentence> out;
  size_t start = 0;
  while (start <= text.size()) {
    size_t end = text.find('\n', start);
    bool last = end == std::string::npos;
    std::string_view line(text.data() + start, (last ? text.size() : end) - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (last && line.empty()) break;  // no trailing empty pseudo-line
    auto tokens = split_ws(line);
    if (tokens.empty()) {
      if (blank_lines_skipped) ++*blank_lines_skipped;
    } else {
      out.push_back(LabeledSentence{std::move(tokens), std::string(line), style.id});
    }
    if (last) break;
    start = end + 1;
  }
  if (out.empty())
    throw DataError("style '" + style.name + "': corpus file has no sentences: " + path);
  return out;
}

static void load_part(const std::vector<std::string>& paths,
                      const std::vector<std::string>& style_names, Part which,
                      DatasetSplit& split) {
  auto& dest = split.part(which);
  dest.assign(style_names.size(), {});
  if (paths.empty()) return;
  if (paths.size() != style_names.size())
    throw UsageError(std::string(part_name(which)) + " paths: expected " +
                     std::to_string(style_names.size()) + " files, got " +
                     std::to_string(paths.size()));
  for (size_t s = 0; s < paths.size(); ++s) {
    StyleLabel label{static_cast<int>(s), style_names[s]};
    dest[s] = load_style_file(paths[s], label, &split.blank_lines_skipped);
  }
}

DatasetSplit load_corpus(const CorpusPaths& paths, const std::vector<std::string>& style_names) {
  if (style_names.empty()) throw UsageError("no style names given");
  DatasetSplit split;
  split.style_names = style_names;
  load_part(paths.train, style_names, Part::train, split);
  load_part(paths.dev, style_names, Part::dev, split);
  load_part(paths.test, style_names, Part::test, split);
  return split;
}

std::string serialize_sentences(const std::vector<LabeledSentence>& sentences) {
  std::string out;
  for (const auto& s : sentences) {
    out += s.raw;
    out += '\n';
  }
  return out;
}

SynthCorpus synth_corpus(uint64_t seed, int n_per_style,
                         const std::vector<std::string>& content_lexicon,
                         const std::vector<std::vector<std::string>>& style_lexicons,
                         const std::vector<std::string>& style_names) {
  if (style_lexicons.size() != style_names.size())
    throw UsageError("style lexicon count does not match style names");
  if (n_per_style < 0) throw UsageError("n_per_style must be >= 0");

  // ground truth would be ambiguous if any token lives in two lexicons
  std::set<std::string> seen(content_lexicon.begin(), content_lexicon.end());
  if (seen.size() != content_lexicon.size())
    throw DataError("content lexicon contains duplicates");
  for (size_t s = 0; s < style_lexicons.size(); ++s) {
    for (const auto& tok : style_lexicons[s]) {
      if (!seen.insert(tok).second)
        throw DataError("lexicon overlap on token '" + tok + "' (style " + style_names[s] + ")");
    }
  }
  if (n_per_style > 0 && (content_lexicon.empty() ||
                          std::any_of(style_lexicons.begin(), style_lexicons.end(),
                                      [](const auto& l) { return l.empty(); })))
    throw UsageError("lexicons must be non-empty to synthesize sentences");

  SynthCorpus corpus;
  corpus.split.style_names = style_names;
  const int n_styles = static_cast<int>(style_names.size());
  const std::array<Part, 3> parts{Part::train, Part::dev, Part::test};
  const int n_eval = n_per_style > 0 ? std::max(1, n_per_style / 10) : 0;
  const std::array<int, 3> n_for_part{n_per_style, n_eval, n_eval};

  for (Part p : parts) {
    corpus.split.part(p).assign(n_styles, {});
    corpus.planted[static_cast<int>(p)].assign(n_styles, {});
  }

  Rng rng(mix_seed(seed, 0x5e17));
  for (int pi = 0; pi < 3; ++pi) {
    Part p = parts[pi];
    for (int s = 0; s < n_styles; ++s) {
      auto& sentences = corpus.split.part(p)[s];
      auto& annotations = corpus.planted[pi][s];
      for (int i = 0; i < n_for_part[pi]; ++i) {
        // roughly constant attribute density: a quarter of each sentence is
        // style-bearing, so one reduction fraction fits every length
        int n_style = 1 + static_cast<int>(rng.uniform_int(3));            // 1..3
        int n_content = 3 * n_style - 1 + static_cast<int>(rng.uniform_int(3));
        std::vector<std::string> tokens;
        tokens.reserve(n_content + n_style);
        for (int c = 0; c < n_content; ++c)
          tokens.push_back(content_lexicon[rng.uniform_int(content_lexicon.size())]);
        std::vector<int> positions;
        for (int a = 0; a < n_style; ++a) {
          int pos = static_cast<int>(rng.uniform_int(tokens.size() + 1));
          tokens.insert(tokens.begin() + pos, style_lexicons[s][rng.uniform_int(style_lexicons[s].size())]);
          for (int& prev : positions)
            if (prev >= pos) ++prev;
          positions.push_back(pos);
        }
        std::sort(positions.begin(), positions.end());
        LabeledSentence sent;
        sent.raw = join(tokens, " ");
        sent.tokens = std::move(tokens);
        sent.style = s;
        sentences.push_back(std::move(sent));
        annotations.push_back(std::move(positions));
      }
    }
  }
  return corpus;
}

std::string serialize_annotations(const std::vector<LabeledSentence>& sentences,
                                  const std::vector<std::vector<int>>& planted) {
  if (sentences.size() != planted.size())
    throw UsageError("annotation count does not match sentence count");
  std::string out;
  for (size_t i = 0; i < sentences.size(); ++i) {
    out += sentences[i].raw;
    out += '\t';
    for (size_t j = 0; j < planted[i].size(); ++j) {
      if (j) out += ',';
      out += std::to_string(planted[i][j]);
    }
    out += '\n';
  }
  return out;
}

std::vector<std::vector<int>> parse_annotations(const std::string& text,
                                                std::vector<std::vector<std::string>>* sentences) {
  std::vector<std::vector<int>> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    size_t tab = line.rfind('\t');
    if (tab == std::string::npos) throw DataError("annotation line missing TAB: " + line);
    if (sentences) sentences->push_back(split_ws(std::string_view(line).substr(0, tab)));
    std::vector<int> positions;
    std::string idx_field = line.substr(tab + 1);
    if (!idx_field.empty()) {
      for (const auto& tok : split_on(idx_field, ','))
        positions.push_back(std::stoi(tok));
    }
    out.push_back(std::move(positions));
  }
  return out;
}

std::vector<std::vector<size_t>> epoch_batches(size_t n, size_t batch_size, uint64_t seed,
                                               uint64_t epoch) {
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0xba7c4 + epoch));
  rng.shuffle(order);
  std::vector<std::vector<size_t>> batches;
  for (size_t i = 0; i < n; i += batch_size) {
    size_t end = std::min(n, i + batch_size);
    batches.emplace_back(order.begin() + i, order.begin() + end);
  }
  return batches;
}

}  // namespace drg
