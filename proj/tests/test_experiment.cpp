#include <doctest.h>

#include <fstream>

#include "grouprobe/experiment.hpp"
#include "grouprobe/kernels.hpp"
#include "grouprobe/synth.hpp"
#include "test_util.hpp"

using namespace grouprobe;
using testutil::kind_of;
using testutil::TempDir;

namespace {

std::filesystem::path make_bundle(const TempDir& tmp, double sigma, std::uint64_t seed = 0,
                                  std::size_t n_test = 400) {
  SynthConfig c;
  c.sigma = sigma;
  c.n_train = 400;
  c.n_val = 200;
  c.n_test = n_test;
  c.seed = seed;
  const auto dir = tmp / ("bundle_" + std::to_string(seed));
  write_bundle(gen_spurious_dataset(c), dir);
  return dir;
}

ExperimentConfig quick(const std::filesystem::path& bundle, const std::filesystem::path& out) {
  ExperimentConfig cfg;
  cfg.bundle = bundle;
  cfg.out = out;
  cfg.train.epochs = 5;
  return cfg;
}

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST_CASE("key=value parsing") {
  const auto kv = parse_key_values("# comment\n method = dpt \n\neta=5 # trailing\nseeds = 0, 1,2\n");
  CHECK(kv.size() == 3);
  CHECK(kv.at("method") == "dpt");
  CHECK(kv.at("eta") == "5");
  CHECK(kv.at("seeds") == "0, 1,2");
  CHECK(kind_of([] { parse_key_values("method dpt\n"); }) == ErrorKind::Validation);

  ExperimentConfig cfg;
  apply_key_values(cfg, kv);
  CHECK(cfg.train.method == Method::Dpt);
  CHECK(cfg.train.eta == 5.0);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{0, 1, 2});

  CHECK(kind_of([&] { apply_key_values(cfg, {{"colour", "red"}}); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { apply_key_values(cfg, {{"eta", "five"}}); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { apply_key_values(cfg, {{"method", "jtt"}}); }) == ErrorKind::Validation);
  CHECK(kind_of([&] { apply_key_values(cfg, {{"epochs", "-3"}}); }) == ErrorKind::Validation);

  apply_key_values(cfg, {{"bundle", "data/b"}, {"sweep", "eta:0,2,5"}, {"annotator", "kmeans"},
                         {"kmeans-dims", "0"}},
                   "/etc/exp");
  CHECK(cfg.bundle == std::filesystem::path("/etc/exp/data/b"));
  REQUIRE(cfg.sweep);
  CHECK(cfg.sweep->param == "eta");
  CHECK(cfg.sweep->values == std::vector<std::string>{"0", "2", "5"});
  CHECK(cfg.annotator.kind == Annotator::KMeans);
  CHECK(cfg.annotator.kmeans_dims == 0);
}

TEST_CASE("config snapshot round-trips") {
  ExperimentConfig cfg;
  apply_key_values(cfg, {{"method", "gdro"}, {"eta", "0.1"}, {"lr-start", "0.003"},
                         {"eval-groups", "pseudo"}, {"sweep", "momentum:0.1,0.5"}});
  const auto kv = to_key_values(cfg);
  ExperimentConfig again;
  apply_key_values(again, kv);
  CHECK(to_key_values(again) == kv);
  CHECK(kv.at("eta") == "0.1");
  CHECK(kv.at("lr-start") == "0.003");
}

TEST_CASE("validation of experiment configs") {
  ExperimentConfig cfg;
  CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::Validation);
  TempDir tmp("cfg");
  cfg.bundle = tmp.path;
  cfg.seeds.clear();
  CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::Validation);
}

TEST_CASE("DPT on a noiseless bundle is perfect on test") {
  TempDir tmp("noiseless");
  auto cfg = quick(make_bundle(tmp, 0.0), tmp / "run");
  cfg.seeds = {1};
  cfg.train.method = Method::Dpt;
  cfg.train.epochs = 20;
  const auto manifest = run_experiment(cfg);
  CHECK(manifest["seeds"][0]["status"] == "ok");
  CHECK(manifest["aggregate"]["test"]["wg"] == 1.0);
  const auto report = read_json(tmp / "run" / "seed_1" / "report_test.json");
  CHECK(report["wg"] == 1.0);
  CHECK(std::filesystem::exists(tmp / "run" / "seed_1" / "head.emb"));
  CHECK(std::filesystem::exists(tmp / "run" / "manifest.json"));
}

TEST_CASE("aggregate is the exact mean of per-seed reports") {
  TempDir tmp("agg");
  auto cfg = quick(make_bundle(tmp, 0.6), tmp / "run");
  cfg.seeds = {1, 2, 3};
  const auto manifest = run_experiment(cfg);
  for (const char* split : {"val", "test"})
    for (const char* metric : {"wg", "avg", "gap"}) {
      double sum = 0.0;
      for (std::uint64_t s : cfg.seeds) {
        const auto r = read_json(tmp / "run" / ("seed_" + std::to_string(s)) /
                                 (std::string("report_") + split + ".json"));
        sum += r[metric].get<double>();
      }
      CHECK(manifest["aggregate"][split][metric].get<double>() == sum / 3.0);
    }
  CHECK(manifest["annotation"]["source"] == "computed");
  CHECK(manifest["eval_groups"] == "true");
}

TEST_CASE("reports are byte-identical across reruns") {
  TempDir tmp("det");
  kernels::set_thread_count(1);
  const auto bundle = make_bundle(tmp, 0.6);
  auto a = quick(bundle, tmp / "a");
  auto b = quick(bundle, tmp / "b");
  a.seeds = b.seeds = {4};
  run_experiment(a);
  run_experiment(b);
  kernels::set_thread_count(0);
  for (const char* f : {"report_val.json", "report_test.json", "weights.csv", "head.emb",
                        "head.json", "train.json"})
    CHECK(testutil::file_bytes(tmp / "a" / "seed_4" / f) ==
          testutil::file_bytes(tmp / "b" / "seed_4" / f));
}

TEST_CASE("sweep writes child manifests and reuses annotations") {
  TempDir tmp("sweep");
  auto cfg = quick(make_bundle(tmp, 0.6), tmp / "sweep");
  cfg.seeds = {0};
  cfg.sweep = SweepSpec{"eta", {"0", "5", "10"}};
  const auto manifest = run_sweep(cfg);
  REQUIRE(manifest["children"].size() == 3);
  std::vector<std::string> sources;
  for (const auto& child : manifest["children"]) {
    const auto path = tmp / "sweep" / child["manifest"].get<std::string>();
    CHECK(std::filesystem::exists(path));
    sources.push_back(read_json(path)["annotation"]["source"].get<std::string>());
  }
  CHECK(sources == std::vector<std::string>{"computed", "cache", "cache"});
  CHECK(std::filesystem::exists(tmp / "sweep" / "sweep_manifest.json"));
  const auto child = read_json(tmp / "sweep" / manifest["children"][2]["manifest"].get<std::string>());
  CHECK(child["config"]["eta"] == "10");

  const auto report = emit_report(manifest);
  CHECK(report.json["rows"].size() == 3);
}

TEST_CASE("stage failures are recorded per seed") {
  TempDir tmp("fail");
  const auto dir = make_bundle(tmp, 0.6);
  auto bundle = read_bundle(dir);
  for (auto& r : bundle.samples.rows)
    if (r.split == Split::Train && r.id.back() == '7') r.s_true = kUnknownAttribute;
  write_bundle(bundle, dir);
  auto cfg = quick(dir, tmp / "run");
  cfg.seeds = {0, 1};
  cfg.train_groups = GroupSource::True;
  cfg.eval_groups = GroupSource::Pseudo;
  const auto manifest = run_experiment(cfg);
  REQUIRE(manifest["seeds"].size() == 2);
  for (const auto& s : manifest["seeds"]) {
    CHECK(s["status"] == "failed");
    CHECK(s["stage"] == "groups");
  }
  CHECK(manifest["aggregate"].empty());
}

TEST_CASE("a bundle that fails validation is rejected up front") {
  TempDir tmp("invalid");
  const auto dir = make_bundle(tmp, 0.6);
  auto bundle = read_bundle(dir);
  bundle.samples.rows[0].y = 9;
  write_bundle(bundle, dir);
  CHECK(kind_of([&] { run_experiment(quick(dir, tmp / "run")); }) == ErrorKind::Validation);
}

TEST_CASE("annotation fingerprint and cache") {
  TempDir tmp("fp");
  const auto bundle = read_bundle(make_bundle(tmp, 0.6));
  AnnotatorConfig zs;
  AnnotatorConfig km{Annotator::KMeans};
  AnnotatorConfig km2 = km;
  km2.kmeans_dims = 4;
  CHECK(annotation_fingerprint(bundle, zs) == annotation_fingerprint(bundle, zs));
  CHECK(annotation_fingerprint(bundle, zs) != annotation_fingerprint(bundle, km));
  CHECK(annotation_fingerprint(bundle, km) != annotation_fingerprint(bundle, km2));

  const auto first = annotate_bundle(bundle, km, tmp / "cache");
  const auto second = annotate_bundle(bundle, km, tmp / "cache");
  CHECK(!first.from_cache);
  CHECK(second.from_cache);
  CHECK(first.samples == second.samples);
  REQUIRE(first.quality);
  CHECK(first.quality->permutation.size() == 2);

  AnnotatorConfig ec{Annotator::ErmConfidence};
  const auto erm = annotate_bundle(bundle, ec, std::nullopt);
  CHECK(erm.samples.has_pseudo_attributes());
}

TEST_CASE("half-even rounding") {
  CHECK(round_half_even_1dp(12.25) == 12.2);
  CHECK(round_half_even_1dp(12.75) == 12.8);
  CHECK(round_half_even_1dp(0.25) == 0.2);
  CHECK(round_half_even_1dp(0.35) == 0.4);
  CHECK(round_half_even_1dp(99.96) == 100.0);
}

TEST_CASE("report layout") {
  nlohmann::json manifest = {
      {"label", "dpt(eta=5)"},
      {"aggregate",
       {{"val", {{"wg", 0.8125}, {"avg", 0.9}, {"gap", 0.0875}}},
        {"test", {{"wg", 0.7725}, {"avg", 0.9025}, {"gap", 0.13}}}}}};
  const auto out = emit_report(manifest);
  CHECK(out.table ==
        "Method     |  val WG  |  val Avg |  val Gap | test WG  | test Avg | test Gap\n"
        "-----------+----------+----------+----------+----------+----------+---------\n"
        "dpt(eta=5) |     81.2 |     90.0 |      8.8 |     77.2 |     90.2 |     13.0\n");
  CHECK(out.json["rows"][0]["test"]["wg"] == 0.7725);
  CHECK(emit_report(manifest).table == out.table);

  manifest["aggregate"].erase("test");
  const auto partial = emit_report(manifest);
  CHECK(partial.table.find("|        —") != std::string::npos);
  CHECK(partial.json["rows"][0]["test"].is_null());
}
