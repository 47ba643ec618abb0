#pragma once

// Per-group accuracy, worst-group accuracy (WG), overall accuracy (Avg) and
// robustness gap (Gap = Avg - WG).

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "grouprobe/robust_trainer.hpp"

namespace grouprobe {

struct GroupAccuracy {
  std::size_t size = 0;
  std::optional<double> accuracy;  // absent for empty groups
};

// Rows with group < 0 are skipped.
std::vector<GroupAccuracy> per_group_accuracy(const std::vector<int>& predictions,
                                              const std::vector<int>& labels,
                                              const std::vector<int>& groups,
                                              std::size_t num_groups);

struct EvalReport {
  std::string split;
  std::vector<GroupAccuracy> groups;
  double wg = 0.0;
  double avg = 0.0;           // sample-weighted
  double gap = 0.0;           // avg - wg
  double balanced_avg = 0.0;  // mean over nonempty groups
  std::size_t n_evaluated = 0;
};

EvalReport summarize(std::string split, const std::vector<int>& predictions,
                     const std::vector<int>& labels, const std::vector<int>& groups,
                     std::size_t num_groups);

std::vector<int> predict(const ClassifierHead& head, const Matrix& rows);

EvalReport eval_report(const ClassifierHead& head, const DatasetBundle& bundle, Split split,
                       GroupSource group_source);

struct RunTag {
  std::string method;
  std::uint64_t seed = 0;
  double eta = 0.0;
};

nlohmann::json to_json(const EvalReport& report, const RunTag& tag);
EvalReport eval_report_from_json(const nlohmann::json& doc);

// Aligned plain-text table of one report: group | size | acc, then WG/Avg/Gap.
std::string format_eval_table(const EvalReport& report);

}  // namespace grouprobe
