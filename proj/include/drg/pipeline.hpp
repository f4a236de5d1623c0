#ifndef DRG_PIPELINE_HPP_
#define DRG_PIPELINE_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "drg/generate.hpp"

namespace drg {

struct ModelSection {
  int layers = 2, heads = 2, dim = 64, ff = 256, seq_len = 64;
  int epochs = 10, batch = 16, warmup = 50;
  double lr = 1e-3;
};

// Everything a run needs, file-configurable with flag overrides.
struct PipelineConfig {
  // [data]
  std::string data_dir;  // real-corpus mode when non-empty
  std::vector<std::string> styles = {"pos", "neg"};
  bool synthetic = true;
  int synth_n_per_style = 1000;
  std::vector<std::string> content_lexicon;                // defaults applied when empty
  std::vector<std::vector<std::string>> style_lexicons;    // parallel to styles

  // [vocab]
  int min_count = 1;
  int max_vocab = 1 << 20;

  // [dt]
  ModelSection dt{4, 4, 64, 256, 48, 6, 16, 50, 1e-3};
  double dt_target_accuracy = 0.97;  // early stop once dev reaches this
  int dt_min_epochs = 4;             // attention needs longer than accuracy does
  double dt_token_dropout = 0.3;     // train-time UNK masking keeps heads searching

  // [delete]
  double gamma = 0.15;
  double lambda = 1e-3;
  int val_cap = 200;

  // [gst]
  ModelSection gst{2, 2, 64, 256, 64, 24, 16, 50, 1e-3};
  Variant variant = Variant::blind;
  int beam_width = 5;
  int transfer_cap = 0;  // 0 = transfer every test sentence

  // [eval]
  ModelSection eval_lm{2, 2, 48, 192, 48, 6, 16, 50, 2e-3};
  int eval_clf_epochs = 12;

  // [run]
  uint64_t seed = 1;
  std::string out_dir = "out";

  void validate() const;
};

PipelineConfig load_config(const std::string& path);
PipelineConfig parse_config_text(const std::string& text);
// dotted key, e.g. "delete.gamma" or "run.seed"
void apply_override(PipelineConfig& cfg, const std::string& key, const std::string& value);
std::string config_to_text(const PipelineConfig& cfg);

// One lock file per output directory; concurrent runs are refused.
class OutDirLock {
 public:
  explicit OutDirLock(const std::string& out_dir);
  ~OutDirLock();
  OutDirLock(const OutDirLock&) = delete;
  OutDirLock& operator=(const OutDirLock&) = delete;

 private:
  std::string path_;
  bool held_ = false;
};

// manifest.json bookkeeping: per stage, the artifact digests plus the
// effective config; loading via artifact_path() verifies digests so edits
// behind the pipeline's back surface as errors.
void record_stage(const PipelineConfig& cfg, const std::string& stage,
                  const std::vector<std::string>& artifact_rel_paths);
std::map<std::string, std::string> manifest_artifacts(const std::string& out_dir);
// Resolves out_dir-relative path; errors name the producing stage when the
// artifact is missing and detect digest mismatches when it is recorded.
std::string artifact_path(const PipelineConfig& cfg, const std::string& rel,
                          const std::string& producing_stage);

// Pipeline stages; each reads its prerequisites from the output directory
// and writes its artifacts plus a manifest entry.
void stage_prepare(const PipelineConfig& cfg);
void stage_train_dt(const PipelineConfig& cfg);
void stage_select_head(const PipelineConfig& cfg);
void stage_delete(const PipelineConfig& cfg);
void stage_retrieve(const PipelineConfig& cfg);
void stage_train_gst(const PipelineConfig& cfg);
void stage_transfer(const PipelineConfig& cfg);
void stage_evaluate(const PipelineConfig& cfg);
void stage_pipeline(const PipelineConfig& cfg);

// Built-in synthetic lexicons (used when the config leaves them empty).
const std::vector<std::string>& default_content_lexicon();
const std::vector<std::vector<std::string>>& default_style_lexicons();

}  // namespace drg

#endif  // DRG_PIPELINE_HPP_
