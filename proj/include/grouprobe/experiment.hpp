#pragma once

// Experiment orchestration: flat key=value configs, annotate -> train -> eval
// over seeds, eta sweeps, manifests and summary tables.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "grouprobe/baseline_annotators.hpp"
#include "grouprobe/metrics.hpp"
#include "grouprobe/robust_trainer.hpp"

namespace grouprobe {

inline constexpr const char* kToolkitVersion = "0.1.0";

enum class Annotator { ZeroShot, KMeans, ErmConfidence };

const char* to_string(Annotator annotator);
std::optional<Annotator> parse_annotator(std::string_view text);

struct AnnotatorConfig {
  Annotator kind = Annotator::ZeroShot;
  std::size_t kmeans_dims = 8;  // 0 skips PCA
  std::uint64_t seed = 0;       // k-means init / ERM-confidence training seed
  std::size_t kmeans_iters = 100;
  double kmeans_tol = 1e-6;
  bool reuse_existing = true;   // keep s_pseudo already present in the bundle
};

struct SweepSpec {
  std::string param;
  std::vector<std::string> values;
};

struct ExperimentConfig {
  std::filesystem::path bundle;
  std::filesystem::path out = "runs/experiment";
  std::optional<std::filesystem::path> cache_dir;  // defaults to <out>/annotations
  AnnotatorConfig annotator;
  TrainConfig train;
  GroupSource train_groups = GroupSource::Pseudo;
  std::optional<GroupSource> eval_groups;  // default: true when s_true is known
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::optional<SweepSpec> sweep;

  // Throws Validation when paths are missing or seeds empty.
  void validate() const;
};

// Config file: one `key = value` per line, `#` comments. Keys match the CLI
// flag names without dashes prefix (e.g. `kmeans-dims = 8`, `seeds = 0,1,2`,
// `sweep = eta:0,2,5`).
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(std::string_view text, const std::string& origin = "<config>");
KeyValues read_key_values(const std::filesystem::path& path);
// Applies `kv` on top of `cfg`; relative paths resolve against `base_dir`.
void apply_key_values(ExperimentConfig& cfg, const KeyValues& kv,
                      const std::filesystem::path& base_dir = {});
// Every key, in a stable order, as apply_key_values would accept it.
KeyValues to_key_values(const ExperimentConfig& cfg);

struct AnnotationOutcome {
  SampleTable samples;  // with s_pseudo filled
  std::string fingerprint;
  bool from_cache = false;
  std::size_t ties = 0;
  std::optional<AnnotationQualityReport> quality;  // when s_true is fully known
};

// Runs the configured annotator over every split. Results are cached under
// `cache_dir/<fingerprint>.csv` when cache_dir is given.
AnnotationOutcome annotate_bundle(const DatasetBundle& bundle, const AnnotatorConfig& cfg,
                                  const std::optional<std::filesystem::path>& cache_dir);

std::string annotation_fingerprint(const DatasetBundle& bundle, const AnnotatorConfig& cfg);

// Runs every seed (or every sweep point) and writes the manifest. Returns the
// manifest JSON. Stage failures are recorded per seed.
nlohmann::json run_experiment(const ExperimentConfig& cfg);
nlohmann::json run_sweep(const ExperimentConfig& cfg);

// Half-even rounding to one decimal.
double round_half_even_1dp(double value);

struct ReportOutput {
  std::string table;
  nlohmann::json json;
};

// Table columns: Method | val WG Avg Gap | test WG Avg Gap, in percent.
// Accepts a run manifest or a sweep manifest.
ReportOutput emit_report(const nlohmann::json& manifest);

}  // namespace grouprobe
