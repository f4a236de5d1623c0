#include "drg/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "drg/eval.hpp"
#include "json.hpp"

namespace drg {

namespace fs = std::filesystem;
using json = nlohmann::json;

// =====================================================================
//  Defaults
// =====================================================================

const std::vector<std::string>& default_content_lexicon() {
  static const std::vector<std::string> lex = {
      "the",   "food",   "service", "was",    "is",     "are",    "here",   "there",
      "place", "staff",  "menu",    "meal",   "table",  "waiter", "order",  "time",
      "day",   "price",  "value",   "portion", "room",  "visit",  "lunch",  "dinner",
      "coffee", "drinks", "dessert", "and",   "with",   "very",   "really", "quite",
      "always", "never",  "we",     "they",   "i",      "it",     "this",   "that"};
  return lex;
}

const std::vector<std::vector<std::string>>& default_style_lexicons() {
  static const std::vector<std::vector<std::string>> lex = {
      {"good", "great", "amazing", "excellent", "wonderful", "friendly", "delicious", "lovely",
       "perfect", "fantastic", "tasty", "awesome"},
      {"bad", "terrible", "awful", "horrible", "rude", "bland", "dirty", "slow", "disgusting",
       "mediocre", "stale", "gross"}};
  return lex;
}

void PipelineConfig::validate() const {
  if (styles.size() < 2) throw UsageError("need at least two styles");
  if (gamma < 0.0 || gamma > 1.0) throw UsageError("gamma must be in [0, 1]");
  if (lambda <= 0.0) throw UsageError("lambda must be positive");
  if (beam_width < 1) throw UsageError("beam width must be >= 1");
  if (out_dir.empty()) throw UsageError("output directory must be set");
  if (!synthetic && data_dir.empty())
    throw UsageError("non-synthetic runs need data.dir pointing at the corpus");
  if (synthetic && !style_lexicons.empty() && style_lexicons.size() != styles.size())
    throw UsageError("style lexicon count must match the style list");
}

// =====================================================================
//  INI config
// =====================================================================

namespace {

std::map<std::string, std::string> parse_ini(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(lineno) + " is not key = value: " + line);
    std::string key = trim(t.substr(0, eq));
    if (section.empty()) throw UsageError("config key outside any [section]: " + key);
    kv[section + "." + key] = trim(t.substr(eq + 1));
  }
  return kv;
}

std::vector<std::string> parse_list(const std::string& value) {
  std::vector<std::string> out;
  for (auto& item : split_on(value, ',')) {
    std::string t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw UsageError("not a boolean: " + v);
}

void apply_model_key(ModelSection& m, const std::string& key, const std::string& value) {
  if (key == "layers") m.layers = std::stoi(value);
  else if (key == "heads") m.heads = std::stoi(value);
  else if (key == "dim") m.dim = std::stoi(value);
  else if (key == "ff") m.ff = std::stoi(value);
  else if (key == "seq_len") m.seq_len = std::stoi(value);
  else if (key == "epochs") m.epochs = std::stoi(value);
  else if (key == "batch") m.batch = std::stoi(value);
  else if (key == "warmup") m.warmup = std::stoi(value);
  else if (key == "lr") m.lr = std::stod(value);
  else throw UsageError("unknown model config key: " + key);
}

}  // namespace

void apply_override(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  size_t dot = key.find('.');
  if (dot == std::string::npos) throw UsageError("config keys are section.key: " + key);
  std::string section = key.substr(0, dot), k = key.substr(dot + 1);

  if (section == "data") {
    if (k == "dir") cfg.data_dir = value;
    else if (k == "styles") cfg.styles = parse_list(value);
    else if (k == "synthetic") cfg.synthetic = parse_bool(value);
    else if (k == "synth_n_per_style") cfg.synth_n_per_style = std::stoi(value);
    else if (k == "content_lexicon") cfg.content_lexicon = parse_list(value);
    else if (k.rfind("style_lexicon_", 0) == 0) {
      std::string style = k.substr(14);
      auto it = std::find(cfg.styles.begin(), cfg.styles.end(), style);
      if (it == cfg.styles.end()) throw UsageError("lexicon for unknown style: " + style);
      cfg.style_lexicons.resize(cfg.styles.size());
      cfg.style_lexicons[it - cfg.styles.begin()] = parse_list(value);
    } else throw UsageError("unknown config key: " + key);
  } else if (section == "vocab") {
    if (k == "min_count") cfg.min_count = std::stoi(value);
    else if (k == "max_size") cfg.max_vocab = std::stoi(value);
    else throw UsageError("unknown config key: " + key);
  } else if (section == "dt") {
    if (k == "target_accuracy") cfg.dt_target_accuracy = std::stod(value);
    else if (k == "min_epochs") cfg.dt_min_epochs = std::stoi(value);
    else if (k == "token_dropout") cfg.dt_token_dropout = std::stod(value);
    else apply_model_key(cfg.dt, k, value);
  } else if (section == "delete") {
    if (k == "gamma") cfg.gamma = std::stod(value);
    else if (k == "lambda") cfg.lambda = std::stod(value);
    else if (k == "val_cap") cfg.val_cap = std::stoi(value);
    else throw UsageError("unknown config key: " + key);
  } else if (section == "gst") {
    if (k == "variant") cfg.variant = variant_from_name(value);
    else if (k == "beam_width") cfg.beam_width = std::stoi(value);
    else if (k == "transfer_cap") cfg.transfer_cap = std::stoi(value);
    else apply_model_key(cfg.gst, k, value);
  } else if (section == "eval") {
    if (k == "clf_epochs") cfg.eval_clf_epochs = std::stoi(value);
    else if (k.rfind("lm_", 0) == 0) apply_model_key(cfg.eval_lm, k.substr(3), value);
    else throw UsageError("unknown config key: " + key);
  } else if (section == "run") {
    if (k == "seed") cfg.seed = std::stoull(value);
    else if (k == "out_dir") cfg.out_dir = value;
    else throw UsageError("unknown config key: " + key);
  } else {
    throw UsageError("unknown config section: " + section);
  }
}

PipelineConfig parse_config_text(const std::string& text) {
  PipelineConfig cfg;
  for (const auto& [key, value] : parse_ini(text)) apply_override(cfg, key, value);
  return cfg;
}

PipelineConfig load_config(const std::string& path) {
  return parse_config_text(read_text_file(path));
}

namespace {

std::string model_section_text(const std::string& name, const ModelSection& m) {
  std::string out = "[" + name + "]\n";
  out += "layers = " + std::to_string(m.layers) + "\n";
  out += "heads = " + std::to_string(m.heads) + "\n";
  out += "dim = " + std::to_string(m.dim) + "\n";
  out += "ff = " + std::to_string(m.ff) + "\n";
  out += "seq_len = " + std::to_string(m.seq_len) + "\n";
  out += "epochs = " + std::to_string(m.epochs) + "\n";
  out += "batch = " + std::to_string(m.batch) + "\n";
  out += "warmup = " + std::to_string(m.warmup) + "\n";
  out += "lr = " + format_double(m.lr) + "\n";
  return out;
}

}  // namespace

std::string config_to_text(const PipelineConfig& cfg) {
  std::string out = "[data]\n";
  out += "dir = " + cfg.data_dir + "\n";
  out += "styles = " + join(cfg.styles, ",") + "\n";
  out += std::string("synthetic = ") + (cfg.synthetic ? "true" : "false") + "\n";
  out += "synth_n_per_style = " + std::to_string(cfg.synth_n_per_style) + "\n";
  out += "content_lexicon = " + join(cfg.content_lexicon, ",") + "\n";
  for (size_t s = 0; s < cfg.style_lexicons.size(); ++s)
    out += "style_lexicon_" + cfg.styles[s] + " = " + join(cfg.style_lexicons[s], ",") + "\n";
  out += "\n[vocab]\nmin_count = " + std::to_string(cfg.min_count) + "\n";
  out += "max_size = " + std::to_string(cfg.max_vocab) + "\n";
  out += "\n" + model_section_text("dt", cfg.dt);
  out += "target_accuracy = " + format_double(cfg.dt_target_accuracy) + "\n";
  out += "min_epochs = " + std::to_string(cfg.dt_min_epochs) + "\n";
  out += "token_dropout = " + format_double(cfg.dt_token_dropout) + "\n";
  out += "\n[delete]\ngamma = " + format_double(cfg.gamma) + "\n";
  out += "lambda = " + format_double(cfg.lambda) + "\n";
  out += "val_cap = " + std::to_string(cfg.val_cap) + "\n";
  out += "\n" + model_section_text("gst", cfg.gst);
  out += std::string("variant = ") + variant_name(cfg.variant) + "\n";
  out += "beam_width = " + std::to_string(cfg.beam_width) + "\n";
  out += "transfer_cap = " + std::to_string(cfg.transfer_cap) + "\n";
  out += "\n[eval]\nclf_epochs = " + std::to_string(cfg.eval_clf_epochs) + "\n";
  std::string lm = model_section_text("eval", cfg.eval_lm);
  // eval LM keys carry an lm_ prefix inside [eval]
  std::istringstream lines(lm.substr(lm.find('\n') + 1));
  std::string line;
  while (std::getline(lines, line))
    if (!line.empty()) out += "lm_" + line + "\n";
  out += "\n[run]\nseed = " + std::to_string(cfg.seed) + "\n";
  out += "out_dir = " + cfg.out_dir + "\n";
  return out;
}

// =====================================================================
//  Lock + manifest
// =====================================================================

OutDirLock::OutDirLock(const std::string& out_dir) {
  fs::create_directories(out_dir);
  path_ = (fs::path(out_dir) / ".lock").string();
  int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0)
    throw UsageError("output directory is locked by another run (remove " + path_ +
                     " if that run is gone)");
  ::close(fd);
  held_ = true;
}

OutDirLock::~OutDirLock() {
  if (held_) ::unlink(path_.c_str());
}

namespace {

std::string manifest_file(const std::string& out_dir) {
  return (fs::path(out_dir) / "manifest.json").string();
}

json load_manifest(const std::string& out_dir) {
  std::string path = manifest_file(out_dir);
  if (!file_exists(path)) return json{{"version", 1}, {"stages", json::object()}};
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw DataError("manifest unparseable: " + std::string(e.what()));
  }
}

}  // namespace

void record_stage(const PipelineConfig& cfg, const std::string& stage,
                  const std::vector<std::string>& artifact_rel_paths) {
  json manifest = load_manifest(cfg.out_dir);
  json artifacts = json::object();
  for (const auto& rel : artifact_rel_paths)
    artifacts[rel] = file_digest((fs::path(cfg.out_dir) / rel).string());
  manifest["stages"][stage] = json{
      {"artifacts", artifacts},
      {"config", config_to_text(cfg)},
      {"tool_version", "drg 0.1.0"},
      {"time_unix",
       std::chrono::duration_cast<std::chrono::seconds>(
           std::chrono::system_clock::now().time_since_epoch())
           .count()}};
  write_text_file(manifest_file(cfg.out_dir), manifest.dump(2) + "\n");
}

std::map<std::string, std::string> manifest_artifacts(const std::string& out_dir) {
  json manifest = load_manifest(out_dir);
  std::map<std::string, std::string> out;
  for (const auto& [stage, body] : manifest.at("stages").items())
    for (const auto& [rel, digest] : body.at("artifacts").items())
      out[rel] = digest.get<std::string>();
  return out;
}

std::string artifact_path(const PipelineConfig& cfg, const std::string& rel,
                          const std::string& producing_stage) {
  std::string path = (fs::path(cfg.out_dir) / rel).string();
  if (!file_exists(path))
    throw DataError("missing artifact " + rel + "; run `drg " + producing_stage +
                    "` first to produce it");
  auto recorded = manifest_artifacts(cfg.out_dir);
  auto it = recorded.find(rel);
  if (it != recorded.end() && it->second != file_digest(path))
    throw DataError("artifact " + rel + " does not match its manifest digest (modified?)");
  return path;
}

// =====================================================================
//  Stage helpers
// =====================================================================

namespace {

std::string corpus_rel(Part part, const std::string& style) {
  return "corpus/" + std::string(part_name(part)) + "." + style;
}

SynthCorpus make_synth(const PipelineConfig& cfg) {
  const auto& content =
      cfg.content_lexicon.empty() ? default_content_lexicon() : cfg.content_lexicon;
  const auto& styles =
      cfg.style_lexicons.empty() ? default_style_lexicons() : cfg.style_lexicons;
  if (styles.size() != cfg.styles.size())
    throw UsageError("style lexicon count must match the style list");
  return synth_corpus(cfg.seed, cfg.synth_n_per_style, content, styles, cfg.styles);
}

DatasetSplit load_prepared_corpus(const PipelineConfig& cfg) {
  CorpusPaths paths;
  for (const auto& style : cfg.styles) {
    paths.train.push_back(artifact_path(cfg, corpus_rel(Part::train, style), "prepare"));
    paths.dev.push_back(artifact_path(cfg, corpus_rel(Part::dev, style), "prepare"));
    paths.test.push_back(artifact_path(cfg, corpus_rel(Part::test, style), "prepare"));
  }
  return load_corpus(paths, cfg.styles);
}

Vocabulary load_prepared_vocab(const PipelineConfig& cfg) {
  return Vocabulary::load(artifact_path(cfg, "vocab.tsv", "prepare"));
}

ModelConfig dt_model_config(const PipelineConfig& cfg, int vocab_size) {
  ModelConfig mc;
  mc.n_layers = cfg.dt.layers;
  mc.n_heads = cfg.dt.heads;
  mc.model_dim = cfg.dt.dim;
  mc.ff_dim = cfg.dt.ff;
  mc.seq_len = cfg.dt.seq_len;
  mc.vocab_size = vocab_size;
  mc.mode = ModelMode::cls_classifier;
  mc.n_styles = static_cast<int>(cfg.styles.size());
  return mc;
}

ModelConfig gst_model_config(const PipelineConfig& cfg, int vocab_size) {
  ModelConfig mc;
  mc.n_layers = cfg.gst.layers;
  mc.n_heads = cfg.gst.heads;
  mc.model_dim = cfg.gst.dim;
  mc.ff_dim = cfg.gst.ff;
  mc.seq_len = cfg.gst.seq_len;
  mc.vocab_size = vocab_size;
  return mc;
}

ModelConfig eval_lm_config(const PipelineConfig& cfg, int vocab_size) {
  ModelConfig mc;
  mc.n_layers = cfg.eval_lm.layers;
  mc.n_heads = cfg.eval_lm.heads;
  mc.model_dim = cfg.eval_lm.dim;
  mc.ff_dim = cfg.eval_lm.ff;
  mc.seq_len = cfg.eval_lm.seq_len;
  mc.vocab_size = vocab_size;
  return mc;
}

double dt_dev_accuracy(const Model& dt, const Vocabulary& vocab, const DatasetSplit& split) {
  size_t correct = 0, total = 0;
  for (int s = 0; s < split.n_styles(); ++s)
    for (const auto& sent : split.dev[s]) {
      auto probs = classify(dt, classifier_input(vocab, sent.tokens, dt.cfg.seq_len));
      int pred = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
      correct += pred == s;
      ++total;
    }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

std::string gst_ckpt_rel(Variant v) {
  return v == Variant::blind ? "gst_blind.ckpt" : "gst_guided.ckpt";
}

std::vector<std::vector<ContentAttributeSplit>> load_deletes(const PipelineConfig& cfg,
                                                             Part part) {
  std::vector<std::vector<ContentAttributeSplit>> out(cfg.styles.size());
  for (size_t s = 0; s < cfg.styles.size(); ++s) {
    std::string rel = "deletes/" + std::string(part_name(part)) + "." + cfg.styles[s] + ".tsv";
    std::istringstream in(read_text_file(artifact_path(cfg, rel, "delete")));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) out[s].push_back(split_from_tsv(line, static_cast<int>(s)));
  }
  return out;
}

std::vector<std::vector<std::vector<int>>> load_planted(const PipelineConfig& cfg, Part part) {
  std::vector<std::vector<std::vector<int>>> out(cfg.styles.size());
  for (size_t s = 0; s < cfg.styles.size(); ++s) {
    std::string rel =
        "corpus/" + std::string(part_name(part)) + "." + cfg.styles[s] + ".attrs";
    out[s] = parse_annotations(read_text_file(artifact_path(cfg, rel, "prepare")));
  }
  return out;
}

struct TransferRow {
  std::vector<std::string> input, content, attrs, output;
};

std::string transfers_rel(const PipelineConfig& cfg, size_t src, size_t tgt) {
  return "transfers/test." + cfg.styles[src] + "_to_" + cfg.styles[tgt] + ".tsv";
}

std::vector<TransferRow> load_transfers(const PipelineConfig& cfg, size_t src, size_t tgt) {
  std::istringstream in(
      read_text_file(artifact_path(cfg, transfers_rel(cfg, src, tgt), "transfer")));
  std::vector<TransferRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split_on(line, '\t');
    if (fields.size() != 4) throw DataError("transfer TSV line needs 4 fields: " + line);
    rows.push_back({split_ws(fields[0]), split_ws(fields[1]),
                    fields[2].empty() ? std::vector<std::string>{} : split_on(fields[2], ','),
                    split_ws(fields[3])});
  }
  return rows;
}

}  // namespace

// =====================================================================
//  Stages
// =====================================================================

void stage_prepare(const PipelineConfig& cfg) {
  cfg.validate();
  std::vector<std::string> artifacts;
  DatasetSplit split;
  if (cfg.synthetic) {
    SynthCorpus corpus = make_synth(cfg);
    split = corpus.split;
    for (int p = 0; p < 3; ++p) {
      Part part = static_cast<Part>(p);
      for (size_t s = 0; s < cfg.styles.size(); ++s) {
        std::string rel = corpus_rel(part, cfg.styles[s]);
        write_text_file((fs::path(cfg.out_dir) / rel).string(),
                        serialize_sentences(split.part(part)[s]));
        artifacts.push_back(rel);
        std::string attrs_rel = rel + ".attrs";
        write_text_file((fs::path(cfg.out_dir) / attrs_rel).string(),
                        serialize_annotations(split.part(part)[s], corpus.annotations(part)[s]));
        artifacts.push_back(attrs_rel);
      }
    }
  } else {
    CorpusPaths paths;
    for (const auto& style : cfg.styles) {
      auto path_for = [&](Part p) {
        return (fs::path(cfg.data_dir) / (std::string(part_name(p)) + "." + style)).string();
      };
      paths.train.push_back(path_for(Part::train));
      paths.dev.push_back(path_for(Part::dev));
      paths.test.push_back(path_for(Part::test));
    }
    split = load_corpus(paths, cfg.styles);
    for (int p = 0; p < 3; ++p) {
      Part part = static_cast<Part>(p);
      for (size_t s = 0; s < cfg.styles.size(); ++s) {
        std::string rel = corpus_rel(part, cfg.styles[s]);
        write_text_file((fs::path(cfg.out_dir) / rel).string(),
                        serialize_sentences(split.part(part)[s]));
        artifacts.push_back(rel);
      }
    }
  }

  Vocabulary vocab = Vocabulary::build(split, cfg.min_count, cfg.max_vocab);
  vocab.save((fs::path(cfg.out_dir) / "vocab.tsv").string());
  artifacts.push_back("vocab.tsv");

  std::string report = "drg-prepare v1\n";
  for (int p = 0; p < 3; ++p) {
    Part part = static_cast<Part>(p);
    for (size_t s = 0; s < cfg.styles.size(); ++s)
      report += std::string(part_name(part)) + "." + cfg.styles[s] + " " +
                std::to_string(split.count(part, static_cast<int>(s))) + "\n";
  }
  report += "blank_lines_skipped " + std::to_string(split.blank_lines_skipped) + "\n";
  report += "vocab_size " + std::to_string(vocab.size()) + "\n";
  write_text_file((fs::path(cfg.out_dir) / "prepare_report.txt").string(), report);
  artifacts.push_back("prepare_report.txt");
  record_stage(cfg, "prepare", artifacts);
  std::cerr << "[prepare] " << split.count(Part::train) << " train sentences, vocab "
            << vocab.size() << "\n";
}

void stage_train_dt(const PipelineConfig& cfg) {
  auto split = load_prepared_corpus(cfg);
  auto vocab = load_prepared_vocab(cfg);
  auto dt = init_model<float>(dt_model_config(cfg, vocab.size()), mix_seed(cfg.seed, 0xd7));

  struct Example {
    std::vector<int> ids;
    int label;
  };
  std::vector<Example> examples;
  size_t truncated = 0;
  for (int s = 0; s < split.n_styles(); ++s)
    for (const auto& sent : split.train[s]) {
      truncated += static_cast<int>(sent.tokens.size()) > dt.cfg.seq_len - 1;
      examples.push_back({classifier_input(vocab, sent.tokens, dt.cfg.seq_len), s});
    }
  if (truncated > 0)
    std::cerr << "[train-dt] " << truncated << " sentences truncated to the classifier window of "
              << dt.cfg.seq_len - 1 << " tokens\n";

  AdamState<float> opt;
  TrainConfig tc;
  tc.lr = cfg.dt.lr;
  tc.warmup_steps = cfg.dt.warmup;
  double dev_acc = 0.0;
  std::string report = "drg-dt-report v1\n";
  for (int epoch = 0; epoch < cfg.dt.epochs; ++epoch) {
    Rng drop_rng(mix_seed(cfg.seed, 0xd70 + epoch));
    double loss_sum = 0.0;
    size_t batches = 0;
    for (const auto& batch_idx :
         epoch_batches(examples.size(), cfg.dt.batch, mix_seed(cfg.seed, 0xd7e), epoch)) {
      ClsBatch batch;
      for (size_t i : batch_idx) {
        auto ids = examples[i].ids;
        // word dropout (CLS kept): the classifier has to find whichever
        // style tokens survive, which is what sharpens the CLS attention
        if (cfg.dt_token_dropout > 0.0)
          for (size_t t = 1; t < ids.size(); ++t)
            if (drop_rng.uniform() < cfg.dt_token_dropout) ids[t] = Vocabulary::kUnk;
        batch.ids.push_back(std::move(ids));
        batch.labels.push_back(examples[i].label);
      }
      loss_sum += train_step(dt, batch, opt, tc);
      ++batches;
    }
    dev_acc = dt_dev_accuracy(dt, vocab, split);
    report += "epoch " + std::to_string(epoch) + " loss " +
              format_double(loss_sum / std::max<size_t>(1, batches)) + " dev_acc " +
              format_double(dev_acc) + "\n";
    std::cerr << "[train-dt] epoch " << epoch << " dev_acc " << dev_acc << "\n";
    if (epoch + 1 >= cfg.dt_min_epochs && dev_acc >= cfg.dt_target_accuracy)
      break;  // deterministic early stop
  }
  save_model(dt, (fs::path(cfg.out_dir) / "dt.ckpt").string());
  write_text_file((fs::path(cfg.out_dir) / "dt_report.txt").string(), report);
  record_stage(cfg, "train-dt", {"dt.ckpt", "dt_report.txt"});
}

void stage_select_head(const PipelineConfig& cfg) {
  auto split = load_prepared_corpus(cfg);
  auto vocab = load_prepared_vocab(cfg);
  auto dt = load_model(artifact_path(cfg, "dt.ckpt", "train-dt"));

  // D'_val: dev sentences of every style, round-robin, capped
  std::vector<LabeledSentence> val;
  size_t longest = 0;
  for (int s = 0; s < split.n_styles(); ++s) longest = std::max(longest, split.dev[s].size());
  for (size_t i = 0; i < longest && static_cast<int>(val.size()) < cfg.val_cap; ++i)
    for (int s = 0; s < split.n_styles() && static_cast<int>(val.size()) < cfg.val_cap; ++s)
      if (i < split.dev[s].size()) val.push_back(split.dev[s][i]);

  auto choice = select_head_layer(dt, vocab, val, cfg.gamma, cfg.lambda);
  write_text_file((fs::path(cfg.out_dir) / "head_choice.txt").string(), choice_to_text(choice));
  record_stage(cfg, "select-head", {"head_choice.txt"});
  std::cerr << "[select-head] picked head " << choice.head << " layer " << choice.layer
            << " (mean z " << choice.mean_z_at(choice.head, choice.layer) << ")\n";
}

void stage_delete(const PipelineConfig& cfg) {
  auto split = load_prepared_corpus(cfg);
  auto vocab = load_prepared_vocab(cfg);
  auto dt = load_model(artifact_path(cfg, "dt.ckpt", "train-dt"));
  auto choice = choice_from_text(read_text_file(artifact_path(cfg, "head_choice.txt", "select-head")));

  std::vector<std::string> artifacts;
  for (int p = 0; p < 3; ++p) {
    Part part = static_cast<Part>(p);
    for (size_t s = 0; s < cfg.styles.size(); ++s) {
      std::string out;
      for (const auto& sent : split.part(part)[s]) {
        auto cas = split_sentence(dt, vocab, choice, sent.tokens, static_cast<int>(s));
        out += split_to_tsv(cas);
        out += '\n';
      }
      std::string rel = "deletes/" + std::string(part_name(part)) + "." + cfg.styles[s] + ".tsv";
      write_text_file((fs::path(cfg.out_dir) / rel).string(), out);
      artifacts.push_back(rel);
    }
  }
  record_stage(cfg, "delete", artifacts);
}

void stage_retrieve(const PipelineConfig& cfg) {
  auto deletes = load_deletes(cfg, Part::train);
  std::vector<std::string> artifacts;
  for (size_t s = 0; s < cfg.styles.size(); ++s) {
    auto index = TfIdfIndex::build(deletes[s]);
    std::string rel = "retrieve/index." + cfg.styles[s] + ".txt";
    write_text_file((fs::path(cfg.out_dir) / rel).string(), index.to_text());
    artifacts.push_back(rel);
  }
  record_stage(cfg, "retrieve", artifacts);
}

void stage_train_gst(const PipelineConfig& cfg) {
  auto vocab = load_prepared_vocab(cfg);
  auto deletes = load_deletes(cfg, Part::train);
  auto gst = init_model<float>(gst_model_config(cfg, vocab.size()), mix_seed(cfg.seed, 0x657));
  size_t truncated = 0;
  auto examples = make_training_examples(vocab, deletes, cfg.variant,
                                         mix_seed(cfg.seed, 0x4015e), gst.cfg.seq_len, &truncated);
  if (truncated > 0)
    std::cerr << "[train-gst] " << truncated << " examples had their content tail truncated to fit seq_len "
              << gst.cfg.seq_len << "\n";
  auto report = train_gst(gst, examples, cfg.gst.epochs, cfg.gst.lr, cfg.gst.batch,
                          mix_seed(cfg.seed, 0x657e), cfg.gst.warmup);
  save_model(gst, (fs::path(cfg.out_dir) / gst_ckpt_rel(cfg.variant)).string());
  std::string text = "drg-gst-report v1\nvariant " + std::string(variant_name(cfg.variant)) + "\n";
  for (size_t e = 0; e < report.epoch_loss.size(); ++e) {
    text += "epoch " + std::to_string(e) + " loss " + format_double(report.epoch_loss[e]) + "\n";
    std::cerr << "[train-gst] epoch " << e << " loss " << report.epoch_loss[e] << "\n";
  }
  write_text_file((fs::path(cfg.out_dir) / "gst_report.txt").string(), text);
  record_stage(cfg, "train-gst", {gst_ckpt_rel(cfg.variant), "gst_report.txt"});
}

void stage_transfer(const PipelineConfig& cfg) {
  auto split = load_prepared_corpus(cfg);
  auto vocab = load_prepared_vocab(cfg);
  auto dt = load_model(artifact_path(cfg, "dt.ckpt", "train-dt"));
  auto choice = choice_from_text(read_text_file(artifact_path(cfg, "head_choice.txt", "select-head")));
  auto gst = load_model(artifact_path(cfg, gst_ckpt_rel(cfg.variant), "train-gst"));

  TransferPipeline pipe;
  pipe.dt = &dt;
  pipe.gst = &gst;
  pipe.vocab = &vocab;
  pipe.choice = &choice;
  pipe.variant = cfg.variant;
  pipe.beam_width = cfg.beam_width;

  Model gst_blind_fallback;
  if (cfg.variant == Variant::guided && file_exists((fs::path(cfg.out_dir) / "gst_blind.ckpt").string())) {
    gst_blind_fallback = load_model(artifact_path(cfg, "gst_blind.ckpt", "train-gst"));
    pipe.gst_blind = &gst_blind_fallback;
  }

  std::vector<TfIdfIndex> indexes;
  std::vector<std::vector<ContentAttributeSplit>> deletes;
  if (cfg.variant == Variant::guided) {
    deletes = load_deletes(cfg, Part::train);
    for (size_t s = 0; s < cfg.styles.size(); ++s) {
      auto text = read_text_file(artifact_path(cfg, "retrieve/index." + cfg.styles[s] + ".txt",
                                               "retrieve"));
      indexes.push_back(TfIdfIndex::from_text(text, deletes[s]));
    }
  }

  std::vector<std::string> artifacts;
  for (size_t src = 0; src < cfg.styles.size(); ++src) {
    for (size_t tgt = 0; tgt < cfg.styles.size(); ++tgt) {
      if (src == tgt) continue;
      if (cfg.variant == Variant::guided) pipe.index = &indexes[tgt];
      std::string out;
      int done = 0;
      for (const auto& sent : split.test[src]) {
        if (cfg.transfer_cap > 0 && done >= cfg.transfer_cap) break;
        auto res = transfer(pipe, sent.tokens, static_cast<int>(src), static_cast<int>(tgt));
        out += join(res.input, " ") + "\t" + join(res.content, " ") + "\t" +
               join(res.attrs_or_retrieved, ",") + "\t" + join(res.output, " ") + "\n";
        ++done;
      }
      std::string rel = transfers_rel(cfg, src, tgt);
      write_text_file((fs::path(cfg.out_dir) / rel).string(), out);
      artifacts.push_back(rel);
      std::cerr << "[transfer] " << cfg.styles[src] << " -> " << cfg.styles[tgt] << ": " << done
                << " sentences\n";
    }
  }
  record_stage(cfg, "transfer", artifacts);
}

void stage_evaluate(const PipelineConfig& cfg) {
  auto split = load_prepared_corpus(cfg);
  auto vocab = load_prepared_vocab(cfg);

  // internal eval models, trained on the prepared corpus
  double clf_dev_acc = 0.0;
  auto clf = train_style_classifier(split, mix_seed(cfg.seed, 0xeca), cfg.eval_clf_epochs, 0.5,
                                    &clf_dev_acc);
  write_text_file((fs::path(cfg.out_dir) / "eval" / "classifier.txt").string(), clf.to_text());

  auto lm = init_model<float>(eval_lm_config(cfg, vocab.size()), mix_seed(cfg.seed, 0xe111));
  {
    std::vector<std::vector<int>> ids_all;
    for (int s = 0; s < split.n_styles(); ++s)
      for (const auto& sent : split.train[s]) {
        std::vector<int> ids{Vocabulary::kEos};
        for (int id : vocab.encode(sent.tokens)) {
          if (static_cast<int>(ids.size()) >= lm.cfg.seq_len) break;
          ids.push_back(id);
        }
        ids_all.push_back(std::move(ids));
      }
    AdamState<float> opt;
    TrainConfig tc;
    tc.lr = cfg.eval_lm.lr;
    tc.warmup_steps = cfg.eval_lm.warmup;
    for (int epoch = 0; epoch < cfg.eval_lm.epochs; ++epoch) {
      for (const auto& batch_idx :
           epoch_batches(ids_all.size(), cfg.eval_lm.batch, mix_seed(cfg.seed, 0xe1e), epoch)) {
        LmBatch batch;
        for (size_t i : batch_idx) {
          const auto& ids = ids_all[i];
          std::vector<int> tgt(ids.begin() + 1, ids.end());
          tgt.push_back(Vocabulary::kEos);
          batch.ids.push_back(ids);
          batch.targets.push_back(tgt);
        }
        train_step(lm, batch, opt, tc);
      }
    }
  }
  save_model(lm, (fs::path(cfg.out_dir) / "eval" / "lm.ckpt").string());

  // synthetic references: planted style tokens swapped into the target
  // lexicon, deterministic in the run seed
  std::vector<std::vector<std::vector<int>>> planted;
  if (cfg.synthetic) planted = load_planted(cfg, Part::test);
  const auto& style_lex =
      cfg.style_lexicons.empty() ? default_style_lexicons() : cfg.style_lexicons;

  std::vector<std::vector<std::string>> all_hyps, all_srcs;
  std::vector<EvalTriplet> triplets;
  size_t style_hits = 0, style_total = 0;
  for (size_t src = 0; src < cfg.styles.size(); ++src) {
    for (size_t tgt = 0; tgt < cfg.styles.size(); ++tgt) {
      if (src == tgt) continue;
      auto rows = load_transfers(cfg, src, tgt);
      std::vector<std::vector<std::string>> test_sentences;
      if (cfg.synthetic) {
        std::string rel = "corpus/test." + cfg.styles[src] + ".attrs";
        parse_annotations(read_text_file(artifact_path(cfg, rel, "prepare")), &test_sentences);
        if (rows.size() > test_sentences.size())
          throw DataError("more transfer outputs than test sentences for " +
                          transfers_rel(cfg, src, tgt));
      }
      Rng ref_rng(mix_seed(cfg.seed, 0x2ef + src * 16 + tgt));
      for (size_t i = 0; i < rows.size(); ++i) {
        all_hyps.push_back(rows[i].output);
        all_srcs.push_back(rows[i].input);
        style_hits += clf.predict(rows[i].output) == static_cast<int>(tgt);
        ++style_total;
        if (cfg.synthetic) {
          // reference: the original test sentence with its planted style
          // tokens swapped into the target lexicon
          EvalTriplet t;
          t.src = test_sentences[i];
          t.hyp = rows[i].output;
          t.ref = test_sentences[i];
          for (int pos : planted[src][i])
            t.ref[pos] = style_lex[tgt][ref_rng.uniform_int(style_lex[tgt].size())];
          triplets.push_back(std::move(t));
        }
      }
    }
  }
  if (all_hyps.empty()) throw DataError("no transfer outputs to evaluate");

  EvalReport report;
  report.n_sentences = all_hyps.size();
  report.bleu_vs_src = bleu(all_hyps, all_srcs);
  if (!triplets.empty()) report.gleu_x100 = 100.0 * gleu(triplets);
  report.style_acc = static_cast<double>(style_hits) / static_cast<double>(style_total);
  report.ppl = perplexity(lm, vocab, all_hyps);

  std::string text = report.to_text();
  text += "classifier_dev_accuracy " + format_double(clf_dev_acc) + "\n";
  write_text_file((fs::path(cfg.out_dir) / "eval" / "report.txt").string(), text);
  record_stage(cfg, "evaluate", {"eval/classifier.txt", "eval/lm.ckpt", "eval/report.txt"});
  std::cerr << "[evaluate] " << text;
}

void stage_pipeline(const PipelineConfig& cfg) {
  stage_prepare(cfg);
  stage_train_dt(cfg);
  stage_select_head(cfg);
  stage_delete(cfg);
  stage_retrieve(cfg);
  stage_train_gst(cfg);
  stage_transfer(cfg);
  stage_evaluate(cfg);
}

}  // namespace drg
