#include "grouprobe/metrics.hpp"

#include <algorithm>
#include <cstdio>

#include "grouprobe/error.hpp"

namespace grouprobe {

std::vector<GroupAccuracy> per_group_accuracy(const std::vector<int>& predictions,
                                              const std::vector<int>& labels,
                                              const std::vector<int>& groups,
                                              std::size_t num_groups) {
  if (predictions.size() != labels.size() || labels.size() != groups.size())
    fail(ErrorKind::Validation, "predictions, labels and groups differ in length");
  std::vector<std::size_t> hits(num_groups, 0);
  std::vector<GroupAccuracy> out(num_groups);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (groups[i] < 0) continue;
    const auto g = static_cast<std::size_t>(groups[i]);
    if (g >= num_groups) fail(ErrorKind::Validation, "group index out of range");
    ++out[g].size;
    hits[g] += predictions[i] == labels[i];
  }
  for (std::size_t g = 0; g < num_groups; ++g)
    if (out[g].size)
      out[g].accuracy = static_cast<double>(hits[g]) / static_cast<double>(out[g].size);
  return out;
}

EvalReport summarize(std::string split, const std::vector<int>& predictions,
                     const std::vector<int>& labels, const std::vector<int>& groups,
                     std::size_t num_groups) {
  EvalReport r;
  r.split = std::move(split);
  r.groups = per_group_accuracy(predictions, labels, groups, num_groups);
  std::size_t hits = 0, n = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (groups[i] < 0) continue;
    ++n;
    hits += predictions[i] == labels[i];
  }
  if (n == 0) fail(ErrorKind::Validation, "no grouped rows to evaluate in split " + r.split);
  r.n_evaluated = n;
  r.avg = static_cast<double>(hits) / static_cast<double>(n);
  r.wg = 1.0;
  double sum = 0.0;
  std::size_t nonempty = 0;
  for (const auto& g : r.groups) {
    if (!g.accuracy) continue;
    r.wg = std::min(r.wg, *g.accuracy);
    sum += *g.accuracy;
    ++nonempty;
  }
  r.balanced_avg = sum / static_cast<double>(nonempty);
  r.gap = r.avg - r.wg;
  return r;
}

std::vector<int> predict(const ClassifierHead& head, const Matrix& rows) {
  const Matrix probs = forward_probs(head, rows);
  std::vector<int> out(rows.rows);
  for (std::size_t i = 0; i < rows.rows; ++i) {
    auto r = probs.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

EvalReport eval_report(const ClassifierHead& head, const DatasetBundle& bundle, Split split,
                       GroupSource group_source) {
  const auto rows = bundle.samples.indices(split);
  if (rows.empty())
    fail(ErrorKind::Validation, std::string("split '") + to_string(split) + "' has no rows");
  const auto assignment = form_groups(bundle.samples, bundle.num_classes(), bundle.num_attrs(),
                                      group_source, split);
  const auto predictions = predict(head, gather_rows(bundle.images.matrix(), rows));
  std::vector<int> labels(rows.size()), groups(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    labels[r] = bundle.samples.rows[rows[r]].y;
    groups[r] = assignment.group[rows[r]];
  }
  return summarize(to_string(split), predictions, labels, groups, assignment.num_groups());
}

nlohmann::json to_json(const EvalReport& report, const RunTag& tag) {
  nlohmann::json accs = nlohmann::json::array(), sizes = nlohmann::json::array();
  for (const auto& g : report.groups) {
    accs.push_back(g.accuracy ? nlohmann::json(*g.accuracy) : nlohmann::json(nullptr));
    sizes.push_back(g.size);
  }
  return {{"split", report.split},
          {"group_accs", accs},
          {"group_sizes", sizes},
          {"wg", report.wg},
          {"avg", report.avg},
          {"gap", report.gap},
          {"balanced_avg", report.balanced_avg},
          {"n_evaluated", report.n_evaluated},
          {"method", tag.method},
          {"seed", tag.seed},
          {"eta", tag.eta}};
}

EvalReport eval_report_from_json(const nlohmann::json& doc) {
  EvalReport r;
  try {
    r.split = doc.at("split").get<std::string>();
    const auto& accs = doc.at("group_accs");
    const auto& sizes = doc.at("group_sizes");
    for (std::size_t g = 0; g < accs.size(); ++g) {
      GroupAccuracy ga;
      ga.size = sizes.at(g).get<std::size_t>();
      if (!accs[g].is_null()) ga.accuracy = accs[g].get<double>();
      r.groups.push_back(ga);
    }
    r.wg = doc.at("wg").get<double>();
    r.avg = doc.at("avg").get<double>();
    r.gap = doc.at("gap").get<double>();
    r.balanced_avg = doc.value("balanced_avg", 0.0);
    r.n_evaluated = doc.value("n_evaluated", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Schema, std::string("eval report: ") + e.what());
  }
  return r;
}

std::string format_eval_table(const EvalReport& report) {
  std::string out;
  char line[128];
  std::snprintf(line, sizeof line, "split: %s (n=%zu)\n", report.split.c_str(),
                report.n_evaluated);
  out += line;
  std::snprintf(line, sizeof line, "%-8s %8s %8s\n", "group", "size", "acc%");
  out += line;
  for (std::size_t g = 0; g < report.groups.size(); ++g) {
    const auto& ga = report.groups[g];
    if (ga.accuracy)
      std::snprintf(line, sizeof line, "%-8zu %8zu %8.1f\n", g, ga.size, 100.0 * *ga.accuracy);
    else
      std::snprintf(line, sizeof line, "%-8zu %8zu %7s—\n", g, ga.size, "");
    out += line;
  }
  std::snprintf(line, sizeof line, "WG %.1f  Avg %.1f  Gap %.1f\n", 100.0 * report.wg,
                100.0 * report.avg, 100.0 * report.gap);
  out += line;
  return out;
}

}  // namespace grouprobe
