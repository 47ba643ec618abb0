// grouprobe command-line entry point.
//
// Exit codes: 0 success, 2 validation error (bad flags, config, bundle),
// 1 runtime failure.

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>

#include <CLI11.hpp>

#include "grouprobe/error.hpp"
#include "grouprobe/experiment.hpp"
#include "grouprobe/kernels.hpp"
#include "grouprobe/synth.hpp"

namespace fs = std::filesystem;
using namespace grouprobe;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;

struct ConfigFlags {
  std::string config_file;
  KeyValues overrides;
};

const std::vector<std::pair<const char*, const char*>> kAnnotatorKeys = {
    {"annotator", "zeroshot | kmeans | erm-confidence"},
    {"kmeans-dims", "PCA dimensions before k-means (0 = none)"},
    {"kmeans-seed", "k-means / ERM-confidence seed"},
    {"kmeans-iters", "k-means iteration cap"},
    {"kmeans-tol", "k-means relative inertia tolerance"},
    {"reuse-pseudo", "keep s_pseudo already in the bundle (true/false)"},
    {"cache-dir", "annotation cache directory"},
};

const std::vector<std::pair<const char*, const char*>> kTrainKeys = {
    {"method", "erm | group-balanced | dpt | gdro"},
    {"eta", "DPT temperature"},
    {"momentum", "DPT weight EMA factor"},
    {"scale", "logit scale"},
    {"lr-start", "initial learning rate"},
    {"lr-end", "final learning rate"},
    {"epochs", "training epochs"},
    {"batch-size", "mini-batch size"},
    {"gdro-step", "GDRO group-weight step size"},
    {"init", "random | prompts"},
    {"select", "final | best-val-wg"},
    {"trajectory", "record per-batch group weights (true/false)"},
    {"groups", "training group source: true | pseudo"},
};

const std::vector<std::pair<const char*, const char*>> kRunKeys = {
    {"bundle", "bundle directory"},
    {"out", "output directory"},
    {"eval-groups", "evaluation group source: true | pseudo | auto"},
    {"seed", "single seed"},
    {"seeds", "comma-separated seeds"},
    {"sweep", "param:v1,v2,..."},
};

void add_keys(CLI::App* app, KeyValues& kv,
              const std::vector<std::pair<const char*, const char*>>& keys) {
  for (const auto& [key, help] : keys) {
    const std::string name = key;
    app->add_option_function<std::string>(
        "--" + name, [&kv, name](const std::string& v) { kv[name] = v; }, help);
  }
}

ExperimentConfig resolve_config(const ConfigFlags& flags) {
  ExperimentConfig cfg;
  if (!flags.config_file.empty()) {
    const fs::path path = flags.config_file;
    apply_key_values(cfg, read_key_values(path), path.parent_path());
  }
  apply_key_values(cfg, flags.overrides);
  return cfg;
}

void write_json(const nlohmann::json& doc, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Validation, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }
}

DatasetBundle load_checked_bundle(const fs::path& dir) {
  DatasetBundle bundle = read_bundle(dir);
  const auto report = validate_bundle(bundle);
  if (!report.ok()) {
    std::string msg = "bundle " + dir.string() + " failed validation:";
    for (const auto& f : report.findings) msg += "\n  - " + f;
    fail(ErrorKind::Validation, msg);
  }
  return bundle;
}

int seed_failures(const nlohmann::json& manifest) {
  int failed = 0;
  for (const auto& s : manifest.at("seeds")) {
    if (s.at("status") != "ok") {
      std::fprintf(stderr, "seed %llu failed at %s: %s\n",
                   static_cast<unsigned long long>(s.at("seed").get<std::uint64_t>()),
                   s.at("stage").get<std::string>().c_str(),
                   s.at("error").get<std::string>().c_str());
      ++failed;
    }
  }
  return failed;
}

}  // namespace

int main(int argc, char** argv) {
  kernels::apply_thread_env();

  CLI::App app{"grouprobe: group-robust heads on frozen embeddings"};
  app.set_version_flag("--version", kToolkitVersion);
  app.require_subcommand(1);

  std::function<void()> action;

  // synth
  SynthConfig synth;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic bundle");
  synth_cmd->add_option("--out", synth_out, "bundle directory")->required();
  synth_cmd->add_option("--d", synth.d, "embedding dimension");
  synth_cmd->add_option("--n-train", synth.n_train);
  synth_cmd->add_option("--n-val", synth.n_val);
  synth_cmd->add_option("--n-test", synth.n_test);
  synth_cmd->add_option("--classes", synth.num_classes);
  synth_cmd->add_option("--attrs", synth.num_attrs);
  synth_cmd->add_option("--rho", synth.rho, "spurious correlation strength");
  synth_cmd->add_option("--alpha", synth.alpha, "core signal scale");
  synth_cmd->add_option("--beta", synth.beta, "spurious signal scale");
  synth_cmd->add_option("--sigma", synth.sigma, "noise scale");
  synth_cmd->add_option("--seed", synth.seed);
  synth_cmd->callback([&] {
    action = [&] {
      const auto bundle = gen_spurious_dataset(synth);
      write_bundle(bundle, synth_out);
      std::printf("wrote %zu samples to %s\n", bundle.samples.size(), synth_out.c_str());
    };
  });

  // oracle
  std::size_t mc_samples = 20000;
  SynthConfig oracle_cfg;
  auto* oracle_cmd = app.add_subcommand("oracle", "Bayes-optimal group accuracy of a synth config");
  oracle_cmd->add_option("--d", oracle_cfg.d);
  oracle_cmd->add_option("--classes", oracle_cfg.num_classes);
  oracle_cmd->add_option("--attrs", oracle_cfg.num_attrs);
  oracle_cmd->add_option("--rho", oracle_cfg.rho);
  oracle_cmd->add_option("--alpha", oracle_cfg.alpha);
  oracle_cmd->add_option("--beta", oracle_cfg.beta);
  oracle_cmd->add_option("--sigma", oracle_cfg.sigma);
  oracle_cmd->add_option("--seed", oracle_cfg.seed);
  oracle_cmd->add_option("--mc", mc_samples, "Monte Carlo samples per group");
  oracle_cmd->callback([&] {
    action = [&] {
      const auto report = bayes_oracle(oracle_cfg, mc_samples);
      std::printf("group | prior    | bayes acc | s.e.\n");
      for (std::size_t g = 0; g < report.group_accuracy.size(); ++g)
        std::printf("%5zu | %.6f | %9.4f | %.4f\n", g, report.group_prior[g],
                    report.group_accuracy[g], report.standard_error[g]);
      std::printf("prior-weighted accuracy %.4f\n", report.prior_weighted_accuracy);
    };
  });

  // annotate
  ConfigFlags annotate_flags;
  std::string annotate_bundle_dir, annotate_out;
  auto* annotate_cmd = app.add_subcommand("annotate", "fill s_pseudo in a bundle");
  annotate_cmd->add_option("--bundle", annotate_bundle_dir)->required()->check(CLI::ExistingDirectory);
  annotate_cmd->add_option("--out", annotate_out, "output bundle directory")->required();
  add_keys(annotate_cmd, annotate_flags.overrides, kAnnotatorKeys);
  annotate_cmd->callback([&] {
    action = [&] {
      ExperimentConfig cfg;
      apply_key_values(cfg, annotate_flags.overrides);
      DatasetBundle bundle = load_checked_bundle(annotate_bundle_dir);
      cfg.annotator.reuse_existing = false;
      const auto outcome = annotate_bundle(bundle, cfg.annotator, cfg.cache_dir);
      bundle.samples = outcome.samples;
      write_bundle(bundle, annotate_out);
      std::printf("annotator %s, fingerprint %s%s, ties %zu\n", to_string(cfg.annotator.kind),
                  outcome.fingerprint.c_str(), outcome.from_cache ? " (cached)" : "",
                  outcome.ties);
      if (outcome.quality) {
        const auto& q = *outcome.quality;
        for (std::size_t g = 0; g < q.group_accuracy.size(); ++g) {
          if (q.group_accuracy[g])
            std::printf("group %zu  n=%zu  attr acc %.4f\n", g, q.group_sizes[g],
                        *q.group_accuracy[g]);
          else
            std::printf("group %zu  n=%zu  attr acc —\n", g, q.group_sizes[g]);
        }
        std::printf("worst group %.4f  overall %.4f\n", q.worst_group, q.overall);
      }
    };
  });

  // train
  ConfigFlags train_flags;
  std::string train_bundle_dir, train_out;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "train one head");
  train_cmd->add_option("--bundle", train_bundle_dir)->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--seed", train_seed);
  add_keys(train_cmd, train_flags.overrides, kTrainKeys);
  train_cmd->callback([&] {
    action = [&] {
      ExperimentConfig cfg;
      apply_key_values(cfg, train_flags.overrides);
      cfg.train.seed = train_seed;
      cfg.train.validate();
      const DatasetBundle bundle = load_checked_bundle(train_bundle_dir);
      GroupAssignment groups;
      if (cfg.train.method != Method::Erm || cfg.train.selection != ModelSelection::Final)
        groups = form_groups(bundle.samples, bundle.num_classes(), bundle.num_attrs(),
                             cfg.train_groups);
      const auto result = train(bundle, groups, cfg.train);
      const fs::path dir = train_out;
      fs::create_directories(dir);
      save_head(result.head, cfg.train, dir / "head");
      if (cfg.train.record_trajectory) write_trajectory_csv(result.report, dir / "weights.csv");
      std::printf("trained %s for %zu epochs, final loss %.6f, head at %s\n",
                  to_string(cfg.train.method), cfg.train.epochs,
                  result.report.epoch_loss.empty() ? 0.0 : result.report.epoch_loss.back(),
                  (dir / "head").c_str());
    };
  });

  // eval
  std::string eval_bundle_dir, eval_head, eval_split = "test", eval_groups = "true", eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a saved head");
  eval_cmd->add_option("--bundle", eval_bundle_dir)->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--head", eval_head, "checkpoint stem (without .emb/.json)")->required();
  eval_cmd->add_option("--split", eval_split, "train | val | test");
  eval_cmd->add_option("--groups", eval_groups, "true | pseudo");
  eval_cmd->add_option("--out", eval_out, "write the JSON report here");
  eval_cmd->callback([&] {
    action = [&] {
      const auto split = parse_split(eval_split);
      if (!split) fail(ErrorKind::Validation, "unknown split '" + eval_split + "'");
      const auto source = parse_group_source(eval_groups);
      if (!source) fail(ErrorKind::Validation, "unknown group source '" + eval_groups + "'");
      const DatasetBundle bundle = load_checked_bundle(eval_bundle_dir);
      const auto head = load_head(eval_head);
      const auto report = eval_report(head, bundle, *split, *source);
      std::fputs(format_eval_table(report).c_str(), stdout);
      if (!eval_out.empty()) write_json(to_json(report, {}), eval_out);
    };
  });

  // run / sweep
  ConfigFlags run_flags, sweep_flags;
  int run_status = 0;
  for (auto [name, flags, help] :
       {std::tuple{"run", &run_flags, "annotate, train and evaluate over seeds"},
        std::tuple{"sweep", &sweep_flags, "run once per sweep value"}}) {
    auto* cmd = app.add_subcommand(name, help);
    cmd->add_option("--config", flags->config_file, "key = value config file")
        ->check(CLI::ExistingFile);
    add_keys(cmd, flags->overrides, kRunKeys);
    add_keys(cmd, flags->overrides, kAnnotatorKeys);
    add_keys(cmd, flags->overrides, kTrainKeys);
    const bool is_sweep = std::string(name) == "sweep";
    cmd->callback([&, flags, is_sweep] {
      action = [&, flags, is_sweep] {
        const ExperimentConfig cfg = resolve_config(*flags);
        nlohmann::json manifest;
        if (is_sweep) {
          manifest = run_sweep(cfg);
          for (const auto& child : manifest.at("children"))
            run_status |= seed_failures(read_json(cfg.out / child.at("manifest").get<std::string>()));
        } else if (cfg.sweep) {
          fail(ErrorKind::Validation, "config has a sweep; use 'grouprobe sweep'");
        } else {
          manifest = run_experiment(cfg);
          run_status |= seed_failures(manifest);
        }
        std::fputs(emit_report(manifest).table.c_str(), stdout);
      };
    });
  }

  // report
  std::string report_manifest, report_json;
  auto* report_cmd = app.add_subcommand("report", "tabulate a run or sweep manifest");
  report_cmd->add_option("manifest", report_manifest, "manifest.json or sweep_manifest.json")
      ->required();
  report_cmd->add_option("--json", report_json, "also write the JSON mirror here");
  report_cmd->callback([&] {
    action = [&] {
      const auto out = emit_report(read_json(report_manifest));
      std::fputs(out.table.c_str(), stdout);
      if (!report_json.empty()) write_json(out.json, report_json);
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (action) action();
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.is_validation() ? kExitValidation : kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return run_status ? kExitRuntime : 0;
}
