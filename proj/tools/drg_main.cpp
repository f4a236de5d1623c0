// drg: delete / retrieve / generate style-transfer pipeline driver.
//
// Subcommands mirror the pipeline stages; `pipeline` runs them all. Every
// stage is idempotent given the same inputs and seeds, artifacts land under
// --out-dir with a manifest, logs go to stderr.

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "drg/eval.hpp"
#include "drg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace drg;

namespace {

struct CliState {
  std::string config_path;
  std::string out_dir;
  std::string seed;
  std::vector<std::string> overrides;  // section.key=value

  // standalone-mode inputs
  std::string input_path, output_path;
  std::string src_path, ref_path, hyp_path;
  std::string classifier_path, lm_path, vocab_path;
  std::string source_style, target_style;
  std::string attrs;  // manual attribute override, comma-joined
  std::string gamma, variant, beam_width, min_count, max_vocab;
};

PipelineConfig effective_config(const CliState& st) {
  PipelineConfig cfg;
  if (!st.config_path.empty()) cfg = load_config(st.config_path);
  if (!st.out_dir.empty()) cfg.out_dir = st.out_dir;
  if (!st.seed.empty()) apply_override(cfg, "run.seed", st.seed);
  if (!st.gamma.empty()) apply_override(cfg, "delete.gamma", st.gamma);
  if (!st.variant.empty()) apply_override(cfg, "gst.variant", st.variant);
  if (!st.beam_width.empty()) apply_override(cfg, "gst.beam_width", st.beam_width);
  if (!st.min_count.empty()) apply_override(cfg, "vocab.min_count", st.min_count);
  if (!st.max_vocab.empty()) apply_override(cfg, "vocab.max_size", st.max_vocab);
  for (const auto& kv : st.overrides) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects section.key=value, got " + kv);
    apply_override(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

std::vector<std::vector<std::string>> read_sentence_file(const std::string& path) {
  std::vector<std::vector<std::string>> out;
  std::istringstream in(read_text_file(path));
  std::string line;
  while (std::getline(in, line)) {
    auto tokens = split_ws(line);
    if (!tokens.empty()) out.push_back(std::move(tokens));
  }
  return out;
}

int style_id_of(const PipelineConfig& cfg, const std::string& name) {
  for (size_t s = 0; s < cfg.styles.size(); ++s)
    if (cfg.styles[s] == name) return static_cast<int>(s);
  throw UsageError("unknown style '" + name + "'; configured styles: " + join(cfg.styles, ","));
}

// delete run against an explicit sentence file instead of the corpus
void standalone_delete(const PipelineConfig& cfg, const CliState& st) {
  if (st.output_path.empty()) throw UsageError("--input needs --output (data goes to files)");
  auto vocab = Vocabulary::load(artifact_path(cfg, "vocab.tsv", "prepare"));
  auto dt = load_model(artifact_path(cfg, "dt.ckpt", "train-dt"));
  auto choice =
      choice_from_text(read_text_file(artifact_path(cfg, "head_choice.txt", "select-head")));
  int style = st.source_style.empty() ? 0 : style_id_of(cfg, st.source_style);
  std::string out;
  for (const auto& tokens : read_sentence_file(st.input_path)) {
    auto split = split_sentence(dt, vocab, choice, tokens, style);
    out += split_to_tsv(split);
    out += '\n';
  }
  write_text_file(st.output_path, out);
}

void standalone_retrieve(const PipelineConfig& cfg, const CliState& st) {
  if (st.output_path.empty()) throw UsageError("--input needs --output (data goes to files)");
  if (st.target_style.empty()) throw UsageError("retrieve needs --target-style");
  int tgt = style_id_of(cfg, st.target_style);
  // rebuild the target index from its artifacts
  std::vector<ContentAttributeSplit> docs;
  {
    std::string rel = "deletes/train." + cfg.styles[tgt] + ".tsv";
    std::istringstream in(read_text_file(artifact_path(cfg, rel, "delete")));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) docs.push_back(split_from_tsv(line, tgt));
  }
  auto index = TfIdfIndex::from_text(
      read_text_file(artifact_path(cfg, "retrieve/index." + cfg.styles[tgt] + ".txt", "retrieve")),
      std::move(docs));
  std::string out;
  for (const auto& content : read_sentence_file(st.input_path)) {
    auto res = index.retrieve(content);
    out += join(res.sentence, " ") + "\t" + join(res.attrs, ",") + "\t" +
           format_double(res.similarity) + (res.no_signal ? "\tno_signal" : "") + "\n";
  }
  write_text_file(st.output_path, out);
}

void standalone_transfer(const PipelineConfig& cfg, const CliState& st) {
  if (st.output_path.empty()) throw UsageError("--input needs --output (data goes to files)");
  if (st.target_style.empty()) throw UsageError("transfer needs --target-style");
  if (st.source_style.empty()) throw UsageError("transfer needs --source-style");
  int src = style_id_of(cfg, st.source_style);
  int tgt = style_id_of(cfg, st.target_style);

  auto vocab = Vocabulary::load(artifact_path(cfg, "vocab.tsv", "prepare"));
  auto dt = load_model(artifact_path(cfg, "dt.ckpt", "train-dt"));
  auto choice =
      choice_from_text(read_text_file(artifact_path(cfg, "head_choice.txt", "select-head")));
  std::string gst_rel = cfg.variant == Variant::blind ? "gst_blind.ckpt" : "gst_guided.ckpt";
  auto gst = load_model(artifact_path(cfg, gst_rel, "train-gst"));

  TransferPipeline pipe;
  pipe.dt = &dt;
  pipe.gst = &gst;
  pipe.vocab = &vocab;
  pipe.choice = &choice;
  pipe.variant = cfg.variant;
  pipe.beam_width = cfg.beam_width;

  std::vector<ContentAttributeSplit> docs;
  TfIdfIndex index;
  if (cfg.variant == Variant::guided && st.attrs.empty()) {
    std::string rel = "deletes/train." + cfg.styles[tgt] + ".tsv";
    std::istringstream in(read_text_file(artifact_path(cfg, rel, "delete")));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) docs.push_back(split_from_tsv(line, tgt));
    index = TfIdfIndex::from_text(
        read_text_file(
            artifact_path(cfg, "retrieve/index." + cfg.styles[tgt] + ".txt", "retrieve")),
        std::move(docs));
    pipe.index = &index;
  }

  std::string out;
  for (const auto& tokens : read_sentence_file(st.input_path)) {
    TransferResult res;
    if (!st.attrs.empty()) {
      // manually specified target attributes skip Retrieve entirely
      auto manual = split_on(st.attrs, ',');
      auto split = split_sentence(dt, vocab, choice, tokens, src);
      auto in = assemble_guided(vocab, split.content, manual, gst.cfg.seq_len - 2);
      int max_len = std::max(
          1, std::min(static_cast<int>(split.content.size() + manual.size()) + 8,
                      gst.cfg.seq_len - static_cast<int>(in.ids.size())));
      auto beams = beam_decode(model_step(gst), in.ids, Vocabulary::kEos, cfg.beam_width, max_len);
      const Hypothesis& picked = rescore_and_pick(beams, dt, tgt);
      res.input.assign(tokens.begin(), tokens.end());
      res.content = split.content;
      res.attrs_or_retrieved = manual;
      res.output = vocab.decode(picked.out_ids);
    } else {
      res = transfer(pipe, tokens, src, tgt);
    }
    out += join(res.input, " ") + "\t" + join(res.content, " ") + "\t" +
           join(res.attrs_or_retrieved, ",") + "\t" + join(res.output, " ") + "\n";
  }
  write_text_file(st.output_path, out);
}

void standalone_evaluate(const PipelineConfig& cfg, const CliState& st) {
  auto srcs = read_sentence_file(st.src_path);
  auto hyps = read_sentence_file(st.hyp_path);
  if (srcs.size() != hyps.size())
    throw DataError("evaluate: src and hyp line counts differ (" + std::to_string(srcs.size()) +
                    " vs " + std::to_string(hyps.size()) + ")");

  EvalReport report;
  report.n_sentences = hyps.size();
  report.bleu_vs_src = bleu(hyps, srcs);

  if (!st.ref_path.empty()) {
    auto refs = read_sentence_file(st.ref_path);
    if (refs.size() != hyps.size()) throw DataError("evaluate: ref line count differs from hyp");
    std::vector<EvalTriplet> triplets;
    for (size_t i = 0; i < hyps.size(); ++i) triplets.push_back({srcs[i], refs[i], hyps[i]});
    report.gleu_x100 = 100.0 * gleu(triplets);
  }
  if (!st.classifier_path.empty()) {
    if (st.target_style.empty()) throw UsageError("--classifier needs --target-style");
    auto clf = NgramClassifier::from_text(read_text_file(st.classifier_path));
    report.style_acc = style_accuracy(clf, hyps, style_id_of(cfg, st.target_style));
  }
  if (!st.lm_path.empty()) {
    std::string vocab_path = st.vocab_path.empty()
                                 ? (fs::path(cfg.out_dir) / "vocab.tsv").string()
                                 : st.vocab_path;
    auto vocab = Vocabulary::load(vocab_path);
    auto lm = load_model(st.lm_path);
    report.ppl = perplexity(lm, vocab, hyps);
  }

  std::string out_path = st.output_path.empty()
                             ? (fs::path(cfg.out_dir) / "eval" / "report.txt").string()
                             : st.output_path;
  write_text_file(out_path, report.to_text());
  std::cerr << report.to_text();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"delete-retrieve-generate style transfer pipeline"};
  app.require_subcommand(1);
  CliState st;

  app.add_option("--config", st.config_path, "pipeline config file (INI)");
  app.add_option("--out-dir", st.out_dir, "output directory for artifacts");
  app.add_option("--seed", st.seed, "master seed recorded into every artifact");
  app.add_option("--set", st.overrides, "config override, section.key=value")->take_all();

  auto* prepare = app.add_subcommand("prepare", "load or synthesize the corpus, build the vocab");
  prepare->add_option("--min-count", st.min_count, "vocabulary frequency threshold");
  prepare->add_option("--max-vocab", st.max_vocab, "vocabulary size cap");

  auto* train_dt = app.add_subcommand("train-dt", "train the style classifier (DT)");

  auto* select_head = app.add_subcommand("select-head", "pick the (head, layer) pair on dev");
  select_head->add_option("--gamma", st.gamma, "reduction fraction");

  auto* del = app.add_subcommand("delete", "split sentences into content and attributes");
  del->add_option("--input", st.input_path, "sentence file (one per line) instead of the corpus");
  del->add_option("--output", st.output_path, "TSV output path for --input mode");
  del->add_option("--source-style", st.source_style, "style label for --input sentences");
  del->add_option("--gamma", st.gamma, "reduction fraction");

  auto* retrieve = app.add_subcommand("retrieve", "build target indexes / query them");
  retrieve->add_option("--input", st.input_path, "content file to query instead of building");
  retrieve->add_option("--output", st.output_path, "TSV output path for --input mode");
  retrieve->add_option("--target-style", st.target_style, "style corpus to search");

  auto* train_gst = app.add_subcommand("train-gst", "train the generator");
  train_gst->add_option("--variant", st.variant, "blind or guided");

  auto* transfer_cmd = app.add_subcommand("transfer", "rewrite sentences into the target style");
  transfer_cmd->add_option("--input", st.input_path, "sentence file instead of the test corpus");
  transfer_cmd->add_option("--output", st.output_path, "TSV output path for --input mode");
  transfer_cmd->add_option("--source-style", st.source_style, "style of the input sentences");
  transfer_cmd->add_option("--target-style", st.target_style, "style to rewrite into");
  transfer_cmd->add_option("--variant", st.variant, "blind or guided");
  transfer_cmd->add_option("--beam-width", st.beam_width, "beam search width");
  transfer_cmd->add_option("--attrs", st.attrs,
                           "comma-joined manual target attributes (skips Retrieve)");

  auto* evaluate = app.add_subcommand("evaluate", "score hypothesis files or the pipeline output");
  evaluate->add_option("--src", st.src_path, "source sentences, one per line");
  evaluate->add_option("--ref", st.ref_path, "reference sentences (enables GLEU)");
  evaluate->add_option("--hyp", st.hyp_path, "hypothesis sentences");
  evaluate->add_option("--classifier", st.classifier_path, "style classifier artifact");
  evaluate->add_option("--lm", st.lm_path, "perplexity LM checkpoint");
  evaluate->add_option("--vocab", st.vocab_path, "vocabulary for the LM (defaults to out-dir)");
  evaluate->add_option("--target-style", st.target_style, "style the hypotheses should carry");
  evaluate->add_option("--output", st.output_path, "report path");

  auto* pipeline = app.add_subcommand("pipeline", "run every stage in order");
  pipeline->add_option("--variant", st.variant, "blind or guided");
  pipeline->add_option("--beam-width", st.beam_width, "beam search width");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) ? 1 : 0;
  }

  try {
    PipelineConfig cfg = effective_config(st);
    OutDirLock lock(cfg.out_dir);

    if (prepare->parsed()) stage_prepare(cfg);
    else if (train_dt->parsed()) stage_train_dt(cfg);
    else if (select_head->parsed()) stage_select_head(cfg);
    else if (del->parsed()) st.input_path.empty() ? stage_delete(cfg) : standalone_delete(cfg, st);
    else if (retrieve->parsed())
      st.input_path.empty() ? stage_retrieve(cfg) : standalone_retrieve(cfg, st);
    else if (train_gst->parsed()) stage_train_gst(cfg);
    else if (transfer_cmd->parsed())
      st.input_path.empty() ? stage_transfer(cfg) : standalone_transfer(cfg, st);
    else if (evaluate->parsed())
      st.hyp_path.empty() ? stage_evaluate(cfg) : standalone_evaluate(cfg, st);
    else if (pipeline->parsed()) stage_pipeline(cfg);
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
