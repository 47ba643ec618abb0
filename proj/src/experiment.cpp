#include "grouprobe/experiment.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include "grouprobe/error.hpp"

namespace grouprobe {
namespace fs = std::filesystem;

const char* to_string(Annotator annotator) {
  switch (annotator) {
    case Annotator::ZeroShot: return "zeroshot";
    case Annotator::KMeans: return "kmeans";
    case Annotator::ErmConfidence: return "erm-confidence";
  }
  return "?";
}

std::optional<Annotator> parse_annotator(std::string_view text) {
  if (text == "zeroshot") return Annotator::ZeroShot;
  if (text == "kmeans") return Annotator::KMeans;
  if (text == "erm-confidence") return Annotator::ErmConfidence;
  return std::nullopt;
}

void ExperimentConfig::validate() const {
  if (bundle.empty()) fail(ErrorKind::Validation, "config is missing 'bundle'");
  if (!fs::is_directory(bundle))
    fail(ErrorKind::Validation, "bundle directory " + bundle.string() + " does not exist");
  if (seeds.empty()) fail(ErrorKind::Validation, "config needs at least one seed");
  train.validate();
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find(sep, start);
    const auto piece = trim(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start));
    if (!piece.empty()) out.push_back(piece);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    fail(ErrorKind::Validation, "config key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    fail(ErrorKind::Validation,
         "config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(ErrorKind::Validation, "config key '" + key + "': expected true/false, got '" + v + "'");
}

template <typename T>
T parse_enum(const std::string& key, const std::string& v, std::optional<T> parsed,
             const char* allowed) {
  if (!parsed)
    fail(ErrorKind::Validation,
         "config key '" + key + "': '" + v + "' is not one of " + allowed);
  return *parsed;
}

std::string format_number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::uint64_t fnv1a(std::uint64_t h, std::string_view bytes) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::uint64_t fnv1a(std::uint64_t h, const std::vector<std::uint8_t>& bytes) {
  return fnv1a(h, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << text;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string method_label(const TrainConfig& t) {
  std::string label = to_string(t.method);
  if (t.method == Method::Dpt) label += "(eta=" + format_number(t.eta) + ")";
  return label;
}

}  // namespace

KeyValues parse_key_values(std::string_view text, const std::string& origin) {
  KeyValues kv;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::Validation,
           origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    kv[trim(stripped.substr(0, eq))] = trim(stripped.substr(eq + 1));
  }
  return kv;
}

KeyValues read_key_values(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Validation, "cannot open config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_key_values(buf.str(), path.string());
}

void apply_key_values(ExperimentConfig& cfg, const KeyValues& kv, const fs::path& base_dir) {
  auto resolve = [&](const std::string& v) {
    fs::path p(v);
    return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  };
  for (const auto& [key, v] : kv) {
    auto& t = cfg.train;
    auto& a = cfg.annotator;
    if (key == "bundle") cfg.bundle = resolve(v);
    else if (key == "out") cfg.out = resolve(v);
    else if (key == "cache-dir") cfg.cache_dir = resolve(v);
    else if (key == "annotator")
      a.kind = parse_enum(key, v, parse_annotator(v), "zeroshot, kmeans, erm-confidence");
    else if (key == "kmeans-dims") a.kmeans_dims = to_u64(key, v);
    else if (key == "kmeans-seed" || key == "annotator-seed") a.seed = to_u64(key, v);
    else if (key == "kmeans-iters") a.kmeans_iters = to_u64(key, v);
    else if (key == "kmeans-tol") a.kmeans_tol = to_double(key, v);
    else if (key == "reuse-pseudo") a.reuse_existing = to_bool(key, v);
    else if (key == "method")
      t.method = parse_enum(key, v, parse_method(v), "erm, group-balanced, dpt, gdro");
    else if (key == "eta") t.eta = to_double(key, v);
    else if (key == "momentum") t.momentum = to_double(key, v);
    else if (key == "scale") t.scale = to_double(key, v);
    else if (key == "lr-start") t.lr_start = to_double(key, v);
    else if (key == "lr-end") t.lr_end = to_double(key, v);
    else if (key == "epochs") t.epochs = to_u64(key, v);
    else if (key == "batch-size") t.batch_size = to_u64(key, v);
    else if (key == "gdro-step") t.gdro_step = to_double(key, v);
    else if (key == "init") t.init = parse_enum(key, v, parse_head_init(v), "random, prompts");
    else if (key == "select")
      t.selection = parse_enum(key, v, parse_model_selection(v), "final, best-val-wg");
    else if (key == "trajectory") t.record_trajectory = to_bool(key, v);
    else if (key == "groups")
      cfg.train_groups = parse_enum(key, v, parse_group_source(v), "true, pseudo");
    else if (key == "eval-groups") {
      if (v == "auto") cfg.eval_groups.reset();
      else cfg.eval_groups = parse_enum(key, v, parse_group_source(v), "true, pseudo, auto");
    } else if (key == "seed") cfg.seeds = {to_u64(key, v)};
    else if (key == "seeds") {
      cfg.seeds.clear();
      for (const auto& s : split_list(v)) cfg.seeds.push_back(to_u64(key, s));
    } else if (key == "sweep") {
      if (v.empty() || v == "none") {
        cfg.sweep.reset();
        continue;
      }
      const auto colon = v.find(':');
      if (colon == std::string::npos)
        fail(ErrorKind::Validation, "config key 'sweep': expected 'param:v1,v2,...'");
      SweepSpec spec{trim(std::string_view(v).substr(0, colon)),
                     split_list(std::string_view(v).substr(colon + 1))};
      if (spec.values.empty()) fail(ErrorKind::Validation, "sweep needs at least one value");
      cfg.sweep = std::move(spec);
    } else {
      fail(ErrorKind::Validation, "unknown config key '" + key + "'");
    }
  }
}

KeyValues to_key_values(const ExperimentConfig& cfg) {
  KeyValues kv;
  const auto& t = cfg.train;
  const auto& a = cfg.annotator;
  kv["bundle"] = cfg.bundle.string();
  kv["out"] = cfg.out.string();
  if (cfg.cache_dir) kv["cache-dir"] = cfg.cache_dir->string();
  kv["annotator"] = to_string(a.kind);
  kv["kmeans-dims"] = std::to_string(a.kmeans_dims);
  kv["kmeans-seed"] = std::to_string(a.seed);
  kv["kmeans-iters"] = std::to_string(a.kmeans_iters);
  kv["kmeans-tol"] = format_number(a.kmeans_tol);
  kv["reuse-pseudo"] = a.reuse_existing ? "true" : "false";
  kv["method"] = to_string(t.method);
  kv["eta"] = format_number(t.eta);
  kv["momentum"] = format_number(t.momentum);
  kv["scale"] = format_number(t.scale);
  kv["lr-start"] = format_number(t.lr_start);
  kv["lr-end"] = format_number(t.lr_end);
  kv["epochs"] = std::to_string(t.epochs);
  kv["batch-size"] = std::to_string(t.batch_size);
  kv["gdro-step"] = format_number(t.gdro_step);
  kv["init"] = to_string(t.init);
  kv["select"] = to_string(t.selection);
  kv["trajectory"] = t.record_trajectory ? "true" : "false";
  kv["groups"] = to_string(cfg.train_groups);
  kv["eval-groups"] = cfg.eval_groups ? to_string(*cfg.eval_groups) : "auto";
  std::string seeds;
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
    seeds += (i ? "," : "") + std::to_string(cfg.seeds[i]);
  kv["seeds"] = seeds;
  if (cfg.sweep) {
    std::string s = cfg.sweep->param + ":";
    for (std::size_t i = 0; i < cfg.sweep->values.size(); ++i)
      s += (i ? "," : "") + cfg.sweep->values[i];
    kv["sweep"] = s;
  } else {
    kv["sweep"] = "none";
  }
  return kv;
}

std::string annotation_fingerprint(const DatasetBundle& bundle, const AnnotatorConfig& cfg) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  h = fnv1a(h, encode_embeddings(bundle.images));
  h = fnv1a(h, encode_embeddings(bundle.prompts.class_embeddings));
  h = fnv1a(h, encode_embeddings(bundle.prompts.attr_embeddings));
  SampleTable cleared = bundle.samples;
  for (auto& r : cleared.rows) r.s_pseudo = kUnknownAttribute;
  h = fnv1a(h, format_sample_table(cleared));
  std::string params = std::string(to_string(cfg.kind));
  if (cfg.kind == Annotator::KMeans)
    params += ";dims=" + std::to_string(cfg.kmeans_dims) + ";seed=" + std::to_string(cfg.seed) +
              ";iters=" + std::to_string(cfg.kmeans_iters) + ";tol=" + format_number(cfg.kmeans_tol);
  if (cfg.kind == Annotator::ErmConfidence) params += ";seed=" + std::to_string(cfg.seed);
  h = fnv1a(h, params);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

AnnotationOutcome annotate_bundle(const DatasetBundle& bundle, const AnnotatorConfig& cfg,
                                  const std::optional<fs::path>& cache_dir) {
  AnnotationOutcome out;
  const std::size_t K = bundle.num_classes(), S = bundle.num_attrs();
  out.fingerprint = annotation_fingerprint(bundle, cfg);

  std::optional<fs::path> cached;
  if (cache_dir) cached = *cache_dir / (out.fingerprint + ".csv");
  std::vector<int> labels;
  if (cached && fs::exists(*cached)) {
    out.samples = read_sample_table(*cached);
    if (out.samples.size() != bundle.samples.size())
      fail(ErrorKind::Corruption, "cached annotation " + cached->string() + " has wrong row count");
    out.from_cache = true;
    for (const auto& r : out.samples.rows) labels.push_back(r.s_pseudo);
  } else {
    switch (cfg.kind) {
      case Annotator::ZeroShot: {
        auto zs = annotate_attributes(bundle.images, bundle.prompts.attr_embeddings);
        labels = std::move(zs.labels);
        out.ties = zs.ties;
        break;
      }
      case Annotator::KMeans: {
        Matrix features = l2_normalize(bundle.images).matrix();
        if (cfg.kmeans_dims > 0 && cfg.kmeans_dims < features.cols)
          features = pca_reduce(features, cfg.kmeans_dims).projected;
        const auto clusters = kmeans_cluster(
            features, {S, cfg.seed, cfg.kmeans_iters, cfg.kmeans_tol});
        labels = clusters.assignments;
        break;
      }
      case Annotator::ErmConfidence: {
        TrainConfig erm;
        erm.method = Method::Erm;
        erm.seed = cfg.seed;
        erm.record_trajectory = false;
        const auto result = train(bundle, GroupAssignment{}, erm);
        const auto zs = annotate_attributes(bundle.images, bundle.prompts.attr_embeddings);
        const auto probs = forward_probs(result.head, bundle.images.matrix());
        labels = erm_confidence_annotate(probs, bundle.samples, S, zs.labels).labels;
        break;
      }
    }
    out.samples = with_pseudo_attributes(bundle.samples, labels);
    if (cached) {
      fs::create_directories(*cache_dir);
      write_sample_table(out.samples, *cached);
    }
  }

  if (bundle.samples.has_true_attributes()) {
    std::vector<int> scored = labels;
    std::vector<int> perm;
    if (cfg.kind == Annotator::KMeans) {
      std::vector<int> truth;
      for (const auto& r : bundle.samples.rows) truth.push_back(r.s_true);
      auto mapping = map_clusters_to_attributes(labels, truth, S, S);
      scored = mapping.labels;
      perm = mapping.permutation;
    }
    auto quality = annotation_quality(scored, bundle.samples, K, S);
    quality.permutation = perm;
    out.quality = std::move(quality);
  }
  return out;
}

namespace {

nlohmann::json quality_json(const AnnotationQualityReport& q) {
  nlohmann::json accs = nlohmann::json::array();
  for (const auto& a : q.group_accuracy) accs.push_back(a ? nlohmann::json(*a) : nlohmann::json());
  return {{"group_accs", accs},
          {"group_sizes", q.group_sizes},
          {"wg", q.worst_group},
          {"overall", q.overall},
          {"permutation", q.permutation}};
}

nlohmann::json train_json(const TrainReport& r) {
  return {{"epoch_loss", r.epoch_loss},
          {"val_worst_group", r.val_worst_group},
          {"selected_epoch", r.selected_epoch}};
}

bool split_has_true(const SampleTable& t, Split s) {
  return !t.indices(s).empty() && t.has_true_attributes(s);
}

}  // namespace

nlohmann::json run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const DatasetBundle original = read_bundle(cfg.bundle);
  const auto findings = validate_bundle(original);
  if (!findings.ok()) {
    std::string msg = "bundle " + cfg.bundle.string() + " failed validation:";
    for (const auto& f : findings.findings) msg += "\n  - " + f;
    fail(ErrorKind::Validation, msg);
  }
  fs::create_directories(cfg.out);

  DatasetBundle bundle = original;
  nlohmann::json annotation = {{"annotator", to_string(cfg.annotator.kind)}};
  std::optional<std::string> annotation_error;
  const bool needs_pseudo =
      cfg.train_groups == GroupSource::Pseudo || cfg.eval_groups == GroupSource::Pseudo;
  if (needs_pseudo) {
    if (cfg.annotator.reuse_existing && original.samples.has_pseudo_attributes()) {
      annotation["source"] = "bundle";
    } else {
      try {
        const auto outcome = annotate_bundle(
            original, cfg.annotator, cfg.cache_dir ? *cfg.cache_dir : cfg.out / "annotations");
        bundle.samples = outcome.samples;
        annotation["source"] = outcome.from_cache ? "cache" : "computed";
        annotation["fingerprint"] = outcome.fingerprint;
        annotation["ties"] = outcome.ties;
        if (outcome.quality) annotation["quality"] = quality_json(*outcome.quality);
      } catch (const std::exception& e) {
        annotation_error = e.what();
        annotation["error"] = e.what();
      }
    }
  }

  const GroupSource eval_source =
      cfg.eval_groups ? *cfg.eval_groups
                      : (split_has_true(bundle.samples, Split::Test) ? GroupSource::True
                                                                     : GroupSource::Pseudo);

  nlohmann::json seeds = nlohmann::json::array();
  struct Totals {
    double wg = 0, avg = 0, gap = 0;
    std::size_t count = 0;
  };
  std::map<std::string, Totals> totals;

  for (const std::uint64_t seed : cfg.seeds) {
    nlohmann::json entry = {{"seed", seed}};
    const fs::path dir = cfg.out / ("seed_" + std::to_string(seed));
    std::string stage = "annotate";
    try {
      if (annotation_error) fail(ErrorKind::Validation, *annotation_error);
      fs::create_directories(dir);
      stage = "groups";
      GroupAssignment groups;
      if (cfg.train.method != Method::Erm || cfg.train.selection != ModelSelection::Final)
        groups = form_groups(bundle.samples, bundle.num_classes(), bundle.num_attrs(),
                             cfg.train_groups);
      stage = "train";
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      auto result = train(bundle, groups, tc);
      result.report.checkpoint_path = (dir / "head").string();
      save_head(result.head, tc, dir / "head");
      if (tc.record_trajectory) write_trajectory_csv(result.report, dir / "weights.csv");
      write_text(dir / "train.json", train_json(result.report).dump(2) + "\n");

      stage = "eval";
      nlohmann::json reports = nlohmann::json::object();
      const RunTag tag{to_string(tc.method), seed, tc.eta};
      for (Split split : {Split::Val, Split::Test}) {
        if (bundle.samples.indices(split).empty()) continue;
        const auto report = eval_report(result.head, bundle, split, eval_source);
        const fs::path file = dir / (std::string("report_") + to_string(split) + ".json");
        write_text(file, to_json(report, tag).dump(2) + "\n");
        reports[to_string(split)] = fs::relative(file, cfg.out).string();
        auto& t = totals[to_string(split)];
        t.wg += report.wg;
        t.avg += report.avg;
        t.gap += report.gap;
        ++t.count;
      }
      entry["status"] = "ok";
      entry["reports"] = reports;
      entry["checkpoint"] = fs::relative(dir / "head", cfg.out).string();
    } catch (const std::exception& e) {
      entry["status"] = "failed";
      entry["stage"] = stage;
      entry["error"] = e.what();
    }
    seeds.push_back(entry);
  }

  nlohmann::json aggregate = nlohmann::json::object();
  for (const auto& [split, t] : totals) {
    const double c = static_cast<double>(t.count);
    aggregate[split] = {{"wg", t.wg / c}, {"avg", t.avg / c}, {"gap", t.gap / c},
                        {"seeds", t.count}};
  }

  KeyValues snapshot = to_key_values(cfg);
  nlohmann::json manifest = {{"toolkit_version", kToolkitVersion},
                             {"created_utc", utc_timestamp()},
                             {"label", method_label(cfg.train)},
                             {"config", snapshot},
                             {"annotation", annotation},
                             {"eval_groups", to_string(eval_source)},
                             {"seeds", seeds},
                             {"aggregate", aggregate}};
  write_text(cfg.out / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

nlohmann::json run_sweep(const ExperimentConfig& cfg) {
  if (!cfg.sweep) fail(ErrorKind::Validation, "sweep requested without a sweep spec");
  cfg.validate();
  fs::create_directories(cfg.out);
  nlohmann::json children = nlohmann::json::array();
  for (const auto& value : cfg.sweep->values) {
    ExperimentConfig child = cfg;
    child.sweep.reset();
    apply_key_values(child, {{cfg.sweep->param, value}});
    child.out = cfg.out / "sweep" / (cfg.sweep->param + "=" + value);
    child.cache_dir = cfg.cache_dir ? *cfg.cache_dir : cfg.out / "annotations";
    const auto manifest = run_experiment(child);
    children.push_back({{"value", value},
                        {"label", manifest.at("label")},
                        {"manifest", fs::relative(child.out / "manifest.json", cfg.out).string()},
                        {"aggregate", manifest.at("aggregate")},
                        {"annotation", manifest.at("annotation")}});
  }
  nlohmann::json manifest = {{"toolkit_version", kToolkitVersion},
                             {"created_utc", utc_timestamp()},
                             {"sweep", {{"param", cfg.sweep->param}, {"values", cfg.sweep->values}}},
                             {"config", to_key_values(cfg)},
                             {"children", children}};
  write_text(cfg.out / "sweep_manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

double round_half_even_1dp(double value) {
  // Scaling by 10 is exact for the tie cases that matter (x.x5 with a short
  // binary expansion); nearbyint rounds ties to even in the default mode.
  return std::nearbyint(value * 10.0) / 10.0;
}

ReportOutput emit_report(const nlohmann::json& manifest) {
  struct Row {
    std::string method;
    nlohmann::json aggregate;
  };
  std::vector<Row> rows;
  if (manifest.contains("children")) {
    for (const auto& child : manifest.at("children")) {
      std::string label = child.at("label").get<std::string>();
      const std::string point = manifest.at("sweep").at("param").get<std::string>() + "=" +
                                child.at("value").get<std::string>();
      if (label.find(point) == std::string::npos) label += " [" + point + "]";
      rows.push_back({label, child.at("aggregate")});
    }
  } else {
    rows.push_back({manifest.at("label").get<std::string>(), manifest.at("aggregate")});
  }

  const char* splits[] = {"val", "test"};
  const char* metrics[] = {"wg", "avg", "gap"};
  const char* titles[] = {"WG", "Avg", "Gap"};
  std::size_t method_width = 6;
  for (const auto& r : rows) method_width = std::max(method_width, r.method.size());

  std::string table;
  char cell[64];
  std::snprintf(cell, sizeof cell, "%-*s", static_cast<int>(method_width), "Method");
  table += cell;
  for (const char* s : splits)
    for (const char* t : titles) {
      std::snprintf(cell, sizeof cell, " | %4s %-3s", s, t);
      table += cell;
    }
  table += '\n';
  table += std::string(method_width, '-');
  for (std::size_t k = 0; k < 6; ++k) table += "-+---------";
  table += '\n';

  nlohmann::json json_rows = nlohmann::json::array();
  for (const auto& r : rows) {
    std::snprintf(cell, sizeof cell, "%-*s", static_cast<int>(method_width), r.method.c_str());
    table += cell;
    nlohmann::json jr = {{"method", r.method}};
    for (const char* s : splits) {
      const bool present = r.aggregate.contains(s);
      jr[s] = present ? nlohmann::json{{"wg", r.aggregate[s]["wg"]},
                                       {"avg", r.aggregate[s]["avg"]},
                                       {"gap", r.aggregate[s]["gap"]}}
                      : nlohmann::json(nullptr);
      for (const char* m : metrics) {
        if (present) {
          const double pct = round_half_even_1dp(100.0 * r.aggregate[s][m].get<double>());
          std::snprintf(cell, sizeof cell, " | %8.1f", pct);
        } else {
          // Pad by display width: the dash is one column but three bytes.
          std::snprintf(cell, sizeof cell, " | %7s%s", "", "—");
        }
        table += cell;
      }
    }
    table += '\n';
    json_rows.push_back(jr);
  }
  return {table, {{"rows", json_rows}}};
}

}  // namespace grouprobe
