#include "grouprobe/robust_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include <json.hpp>

#include "grouprobe/error.hpp"
#include "grouprobe/kernels.hpp"

namespace grouprobe {

const char* to_string(Method method) {
  switch (method) {
    case Method::Erm: return "erm";
    case Method::GroupBalanced: return "group-balanced";
    case Method::Dpt: return "dpt";
    case Method::Gdro: return "gdro";
  }
  return "?";
}

std::optional<Method> parse_method(std::string_view text) {
  if (text == "erm") return Method::Erm;
  if (text == "group-balanced") return Method::GroupBalanced;
  if (text == "dpt") return Method::Dpt;
  if (text == "gdro") return Method::Gdro;
  return std::nullopt;
}

const char* to_string(HeadInit init) { return init == HeadInit::Random ? "random" : "prompts"; }

std::optional<HeadInit> parse_head_init(std::string_view text) {
  if (text == "random") return HeadInit::Random;
  if (text == "prompts") return HeadInit::Prompts;
  return std::nullopt;
}

const char* to_string(ModelSelection selection) {
  return selection == ModelSelection::Final ? "final" : "best-val-wg";
}

std::optional<ModelSelection> parse_model_selection(std::string_view text) {
  if (text == "final") return ModelSelection::Final;
  if (text == "best-val-wg") return ModelSelection::BestValWorstGroup;
  return std::nullopt;
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorKind::InvalidArgument, what); };
  if (!(eta >= 0.0) || !std::isfinite(eta)) bad("eta must be >= 0");
  if (!(momentum > 0.0 && momentum <= 1.0)) bad("momentum must be in (0, 1]");
  if (!(scale >= 0.0) || !std::isfinite(scale)) bad("scale must be >= 0");
  if (!(lr_end > 0.0) || !(lr_start >= lr_end)) bad("need lr_start >= lr_end > 0");
  if (epochs < 1) bad("epochs must be >= 1");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (!(gdro_step >= 0.0)) bad("gdro_step must be >= 0");
}

namespace {

// Everything one batch needs: cosines, probabilities and inverse norms.
struct BatchForward {
  Matrix cosine;
  Matrix probs;
  std::vector<double> inv_x;
  std::vector<double> inv_theta;
};

BatchForward run_forward(const ClassifierHead& head, const Matrix& batch) {
  if (batch.cols != head.dim())
    fail(ErrorKind::Validation, "dimension mismatch: batch d=" + std::to_string(batch.cols) +
                                    ", head d=" + std::to_string(head.dim()));
  BatchForward f;
  f.inv_x = kernels::inverse_row_norms(batch);
  f.inv_theta = kernels::inverse_row_norms(head.theta);
  f.cosine = kernels::cosine_logits(batch, head.theta, 1.0);
  Matrix logits(f.cosine.rows, f.cosine.cols);
  for (std::size_t k = 0; k < logits.values.size(); ++k)
    logits.values[k] = head.scale * f.cosine.values[k];
  f.probs = kernels::row_softmax(logits);
  return f;
}

// -log softmax(z)_y. When y is the argmax this is log1p of the other terms,
// which stays accurate as the loss goes to zero.
double cross_entropy(const ClassifierHead& head, const BatchForward& f, std::size_t i, int y) {
  const auto c = f.cosine.row(i);
  const double z_y = head.scale * c[static_cast<std::size_t>(y)];
  double mx = z_y;
  for (double v : c) mx = std::max(mx, head.scale * v);
  double rest = 0.0;
  for (std::size_t j = 0; j < c.size(); ++j)
    if (j != static_cast<std::size_t>(y)) rest += std::exp(head.scale * c[j] - mx);
  if (mx == z_y) return std::log1p(rest);
  return (mx - z_y) + std::log(std::exp(z_y - mx) + rest);
}

void check_aligned(const Matrix& batch, std::span<const int> labels,
                   std::span<const double> weights, std::size_t K) {
  if (labels.size() != batch.rows || weights.size() != batch.rows)
    fail(ErrorKind::Validation, "labels/weights do not align with the batch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= K)
      fail(ErrorKind::Validation, "label out of range");
}

double loss_from(const ClassifierHead& head, const BatchForward& f,
                 std::span<const int> labels, std::span<const double> weights) {
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    total += weights[i] * cross_entropy(head, f, i, labels[i]);
  return total;
}

Matrix gradient_from(const ClassifierHead& head, const Matrix& batch, const BatchForward& f,
                     std::span<const int> labels, std::span<const double> weights) {
  const std::size_t n = batch.rows, K = head.num_classes(), d = head.dim();
  // dL/dz_ij, then chain through z = scale * x̂·θ / |θ|.
  Matrix coeff(n, K);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < K; ++j)
      coeff(i, j) = weights[i] * (f.probs(i, j) - (labels[i] == static_cast<int>(j) ? 1.0 : 0.0));

  Matrix unit_x = batch;
  for (std::size_t i = 0; i < n; ++i)
    for (double& v : unit_x.row(i)) v *= f.inv_x[i];

  Matrix grad = kernels::transpose_times(coeff, unit_x);
  for (std::size_t j = 0; j < K; ++j) {
    double along = 0.0;
    for (std::size_t i = 0; i < n; ++i) along += coeff(i, j) * f.cosine(i, j);
    const double inv = f.inv_theta[j];
    auto g = grad.row(j);
    auto t = head.theta.row(j);
    for (std::size_t c = 0; c < d; ++c)
      g[c] = head.scale * inv * (g[c] - along * t[c] * inv);
  }
  return grad;
}

void normalize_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows; ++i) {
    auto r = m.row(i);
    const double nrm = norm2(r);
    if (nrm == 0.0) fail(ErrorKind::Degenerate, "head row " + std::to_string(i) + " collapsed to zero");
    for (double& v : r) v /= nrm;
  }
}

}  // namespace

Matrix forward_probs(const ClassifierHead& head, const Matrix& batch) {
  return run_forward(head, batch).probs;
}

double weighted_loss(const ClassifierHead& head, const Matrix& batch,
                     std::span<const int> labels, std::span<const double> weights) {
  check_aligned(batch, labels, weights, head.num_classes());
  return loss_from(head, run_forward(head, batch), labels, weights);
}

Matrix loss_gradient(const ClassifierHead& head, const Matrix& batch,
                     std::span<const int> labels, std::span<const double> weights) {
  check_aligned(batch, labels, weights, head.num_classes());
  return gradient_from(head, batch, run_forward(head, batch), labels, weights);
}

std::vector<GroupBatchStat> batch_group_stats(const Matrix& probs, std::span<const int> labels,
                                              std::span<const int> groups,
                                              std::size_t num_groups) {
  if (labels.size() != probs.rows || groups.size() != probs.rows)
    fail(ErrorKind::Validation, "batch statistics inputs are misaligned");
  std::vector<GroupBatchStat> stats(num_groups);
  std::vector<double> sums(num_groups, 0.0);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    if (groups[i] < 0) continue;
    const auto g = static_cast<std::size_t>(groups[i]);
    ++stats[g].count;
    sums[g] += probs(i, static_cast<std::size_t>(labels[i]));
  }
  for (std::size_t g = 0; g < num_groups; ++g)
    if (stats[g].count) stats[g].mean_true_prob = sums[g] / static_cast<double>(stats[g].count);
  return stats;
}

std::vector<int> class_of_groups(std::size_t num_classes, std::size_t num_attrs) {
  std::vector<int> out(num_classes * num_attrs);
  for (std::size_t g = 0; g < out.size(); ++g) out[g] = static_cast<int>(g / num_attrs);
  return out;
}

namespace {

// exp(eta (1 - p̄_g) - max over the class); 0 for unscored groups.
std::vector<double> shifted_exponentials(std::span<const std::optional<double>> pbar,
                                         std::span<const std::size_t> sizes, double eta,
                                         std::span<const int> class_of_group) {
  if (!(eta >= 0.0)) fail(ErrorKind::InvalidArgument, "eta must be >= 0");
  const std::size_t G = pbar.size();
  if (sizes.size() != G || class_of_group.size() != G)
    fail(ErrorKind::Validation, "group weight inputs are misaligned");

  auto scored = [&](std::size_t g) { return pbar[g].has_value() && sizes[g] >= 1; };
  const int num_classes =
      G ? *std::max_element(class_of_group.begin(), class_of_group.end()) + 1 : 0;
  std::vector<double> shift(static_cast<std::size_t>(num_classes),
                            -std::numeric_limits<double>::infinity());
  for (std::size_t g = 0; g < G; ++g) {
    if (!scored(g)) continue;
    const double p = *pbar[g];
    if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::InvalidArgument, "mean probability outside [0,1]");
    auto& s = shift[static_cast<std::size_t>(class_of_group[g])];
    s = std::max(s, eta * (1.0 - p));
  }
  std::vector<double> e(G, 0.0);
  for (std::size_t g = 0; g < G; ++g)
    if (scored(g))
      e[g] = std::exp(eta * (1.0 - *pbar[g]) - shift[static_cast<std::size_t>(class_of_group[g])]);
  return e;
}

std::size_t class_count(std::span<const int> class_of_group) {
  return class_of_group.empty()
             ? 0
             : static_cast<std::size_t>(
                   *std::max_element(class_of_group.begin(), class_of_group.end()) + 1);
}

}  // namespace

std::vector<double> raw_group_weights(std::span<const std::optional<double>> pbar,
                                      std::span<const std::size_t> sizes, double eta,
                                      std::span<const int> class_of_group) {
  auto w = shifted_exponentials(pbar, sizes, eta, class_of_group);
  for (std::size_t g = 0; g < w.size(); ++g)
    if (w[g] > 0.0) w[g] /= static_cast<double>(sizes[g]);
  return w;
}

std::vector<double> normalized_group_weights(std::span<const std::optional<double>> pbar,
                                             std::span<const std::size_t> sizes, double eta,
                                             std::span<const int> class_of_group,
                                             std::span<const double> target_mass) {
  const auto e = shifted_exponentials(pbar, sizes, eta, class_of_group);
  const std::size_t K = class_count(class_of_group);
  if (!target_mass.empty() && target_mass.size() != K)
    fail(ErrorKind::Validation, "target mass needs one entry per class");
  // ŵ_k N_k = e_k, so the class denominator is the plain sum of exponentials.
  std::vector<double> z(K, 0.0);
  for (std::size_t g = 0; g < e.size(); ++g) z[static_cast<std::size_t>(class_of_group[g])] += e[g];
  std::vector<double> w(e.size(), 0.0);
  for (std::size_t c = 0; c < K; ++c) {
    const double target = target_mass.empty() ? 1.0 : target_mass[c];
    if (z[c] == 0.0) {
      if (target == 0.0) continue;
      fail(ErrorKind::Degenerate, "class " + std::to_string(c) + " has no scored group");
    }
    for (std::size_t g = 0; g < e.size(); ++g)
      if (static_cast<std::size_t>(class_of_group[g]) == c && e[g] > 0.0)
        w[g] = target * (e[g] / (static_cast<double>(sizes[g]) * z[c]));
  }
  return w;
}

std::vector<double> class_normalize(std::span<const double> w_hat,
                                    std::span<const std::size_t> sizes,
                                    std::span<const int> class_of_group,
                                    std::span<const double> target_mass) {
  const std::size_t G = w_hat.size();
  if (sizes.size() != G || class_of_group.size() != G)
    fail(ErrorKind::Validation, "group weight inputs are misaligned");
  const int num_classes =
      G ? *std::max_element(class_of_group.begin(), class_of_group.end()) + 1 : 0;
  if (!target_mass.empty() && target_mass.size() != static_cast<std::size_t>(num_classes))
    fail(ErrorKind::Validation, "target mass needs one entry per class");

  std::vector<double> denom(static_cast<std::size_t>(num_classes), 0.0);
  for (std::size_t g = 0; g < G; ++g)
    denom[static_cast<std::size_t>(class_of_group[g])] += w_hat[g] * static_cast<double>(sizes[g]);

  std::vector<double> out(w_hat.begin(), w_hat.end());
  for (int c = 0; c < num_classes; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    const double target = target_mass.empty() ? 1.0 : target_mass[ci];
    if (denom[ci] == 0.0) {
      if (target == 0.0) continue;
      fail(ErrorKind::Degenerate, "class " + std::to_string(c) + " has all-zero group weights");
    }
    for (std::size_t g = 0; g < G; ++g)
      if (class_of_group[g] == c) out[g] = target * w_hat[g] / denom[ci];
  }
  return out;
}

std::size_t GroupWeightState::num_classes() const {
  return class_of_group.empty()
             ? 0
             : static_cast<std::size_t>(
                   *std::max_element(class_of_group.begin(), class_of_group.end()) + 1);
}

double GroupWeightState::class_mass(int c) const {
  double mass = 0.0;
  for (std::size_t g = 0; g < w.size(); ++g)
    if (class_of_group[g] == c) mass += w[g] * static_cast<double>(sizes[g]);
  return mass;
}

GroupWeightState init_group_weights(std::span<const std::size_t> sizes,
                                    std::span<const int> class_of_group, double eta,
                                    double momentum) {
  GroupWeightState state;
  state.sizes.assign(sizes.begin(), sizes.end());
  state.class_of_group.assign(class_of_group.begin(), class_of_group.end());
  state.eta = eta;
  state.momentum = momentum;
  const double uniform = 1.0 / static_cast<double>(std::max<std::size_t>(state.num_classes(), 1));
  std::vector<std::optional<double>> pbar(sizes.size());
  for (std::size_t g = 0; g < sizes.size(); ++g)
    if (sizes[g] > 0) pbar[g] = uniform;
  std::vector<double> targets(state.num_classes(), 0.0);
  for (std::size_t g = 0; g < sizes.size(); ++g)
    if (sizes[g] > 0) targets[static_cast<std::size_t>(class_of_group[g])] = 1.0;
  state.w = normalized_group_weights(pbar, sizes, eta, class_of_group, targets);
  return state;
}

GroupWeightState ema_update(const GroupWeightState& state, std::span<const double> w_hat,
                            double momentum) {
  if (!(momentum > 0.0 && momentum <= 1.0))
    fail(ErrorKind::InvalidArgument, "momentum must be in (0, 1]");
  if (w_hat.size() != state.w.size())
    fail(ErrorKind::Validation, "ŵ does not match the group count");
  GroupWeightState next = state;
  for (std::size_t k = 0; k < next.w.size(); ++k)
    if (w_hat[k] > 0.0)
      next.w[k] = momentum == 1.0 ? w_hat[k] : state.w[k] + momentum * (w_hat[k] - state.w[k]);
  return next;
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_start, double lr_end) {
  if (total_steps == 0) return lr_start;
  if (step > total_steps) fail(ErrorKind::InvalidArgument, "step beyond total_steps");
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(std::numbers::pi * t));
}

ClassifierHead init_head_random(std::size_t num_classes, std::size_t dim, std::uint64_t seed,
                                double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ClassifierHead head{Matrix(num_classes, dim), scale};
  for (double& v : head.theta.values) v = normal(rng);
  normalize_rows(head.theta);
  return head;
}

ClassifierHead init_head_from_prompts(const PromptBank& prompts, double scale) {
  return {l2_normalize(prompts.class_embeddings).matrix(), scale};
}

TrainResult train(const DatasetBundle& bundle, const GroupAssignment& groups,
                  const TrainConfig& cfg) {
  cfg.validate();
  const std::size_t K = bundle.num_classes();
  const std::size_t d = bundle.images.cols();
  const auto train_rows = bundle.samples.indices(Split::Train);
  const auto val_rows = bundle.samples.indices(Split::Val);
  const std::size_t n = train_rows.size();
  if (n == 0) fail(ErrorKind::Validation, "no train rows");

  const bool uses_groups = cfg.method != Method::Erm;
  const std::size_t G = groups.num_groups();
  if (uses_groups) {
    if (groups.group.size() != bundle.samples.size() || G == 0)
      fail(ErrorKind::Validation, "group assignment does not cover the sample table");
    if (groups.num_classes != K)
      fail(ErrorKind::Validation, "group assignment class count differs from the bundle");
  }

  // Train-split group sizes.
  std::vector<std::size_t> sizes(G, 0);
  if (groups.group.size() == bundle.samples.size()) {
    for (std::size_t i : train_rows) {
      const int g = groups.group[i];
      if (g >= 0) ++sizes[static_cast<std::size_t>(g)];
      else if (uses_groups)
        fail(ErrorKind::IncompleteAnnotation,
             "train row '" + bundle.samples.rows[i].id + "' has no group");
    }
  }
  const auto class_of = G ? class_of_groups(K, groups.num_attrs) : std::vector<int>{};

  std::mt19937_64 rng(cfg.seed);
  ClassifierHead head = cfg.init == HeadInit::Prompts
                            ? init_head_from_prompts(bundle.prompts, cfg.scale)
                            : init_head_random(K, d, rng(), cfg.scale);
  if (head.num_classes() != K || head.dim() != d)
    fail(ErrorKind::Validation, "head shape does not match the bundle");

  const Matrix x_train = gather_rows(bundle.images.matrix(), train_rows);
  std::vector<int> y_train(n), g_train(n, -1);
  for (std::size_t r = 0; r < n; ++r) {
    y_train[r] = bundle.samples.rows[train_rows[r]].y;
    if (groups.group.size() == bundle.samples.size()) g_train[r] = groups.group[train_rows[r]];
  }

  GroupWeightState state;
  if (uses_groups)
    state = init_group_weights(sizes, class_of,
                               cfg.method == Method::GroupBalanced ? 0.0 : cfg.eta,
                               cfg.momentum);
  std::vector<double> gdro_q(G, 0.0);
  if (cfg.method == Method::Gdro) {
    std::size_t nonempty = 0;
    for (std::size_t g = 0; g < G; ++g) nonempty += sizes[g] > 0;
    for (std::size_t g = 0; g < G; ++g)
      gdro_q[g] = sizes[g] > 0 ? 1.0 / static_cast<double>(nonempty) : 0.0;
  }

  // Per-sample weight scale so a batch sum estimates the full-dataset sum.
  const double erm_weight = static_cast<double>(K) / static_cast<double>(n);

  const std::size_t B = std::min(cfg.batch_size, n);
  const std::size_t steps_per_epoch = (n + B - 1) / B;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;

  // Val evaluation uses whatever groups the assignment gives val rows.
  std::vector<std::size_t> val_scored;
  for (std::size_t i : val_rows)
    if (groups.group.size() == bundle.samples.size() && groups.group[i] >= 0)
      val_scored.push_back(i);
  const Matrix x_val = gather_rows(bundle.images.matrix(), val_scored);

  TrainResult result{head, {}};
  double best_val_wg = -1.0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = b * B, hi = std::min(n, lo + B);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      const Matrix xb = gather_rows(x_train, idx);
      std::vector<int> yb(idx.size()), gb(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) {
        yb[r] = y_train[idx[r]];
        gb[r] = g_train[idx[r]];
      }
      const BatchForward f = run_forward(head, xb);

      std::vector<double> group_w;
      switch (cfg.method) {
        case Method::Erm:
          break;
        case Method::GroupBalanced:
          group_w = state.w;
          break;
        case Method::Dpt: {
          const auto stats = batch_group_stats(f.probs, yb, gb, G);
          std::vector<std::optional<double>> pbar(G);
          std::vector<double> target(K, 0.0);
          for (std::size_t g = 0; g < G; ++g) {
            if (!stats[g].present() || sizes[g] == 0) continue;
            pbar[g] = stats[g].mean_true_prob;
            target[static_cast<std::size_t>(class_of[g])] +=
                state.w[g] * static_cast<double>(sizes[g]);
          }
          const auto w_hat = normalized_group_weights(pbar, sizes, cfg.eta, class_of, target);
          state = ema_update(state, w_hat, cfg.momentum);
          for (std::size_t c = 0; c < K; ++c) {
            const double mass = state.class_mass(static_cast<int>(c));
            bool has = false;
            for (std::size_t g = 0; g < G; ++g) has |= class_of[g] == static_cast<int>(c) && sizes[g];
            if (has && std::abs(mass - 1.0) > 1e-9)
              fail(ErrorKind::Degenerate, "class weight mass drifted to " + std::to_string(mass));
          }
          group_w = state.w;
          break;
        }
        case Method::Gdro: {
          std::vector<double> loss_sum(G, 0.0);
          std::vector<std::size_t> count(G, 0);
          for (std::size_t r = 0; r < idx.size(); ++r) {
            const auto g = static_cast<std::size_t>(gb[r]);
            loss_sum[g] += cross_entropy(head, f, r, yb[r]);
            ++count[g];
          }
          double z = 0.0;
          for (std::size_t g = 0; g < G; ++g) {
            if (count[g])
              gdro_q[g] *= std::exp(cfg.gdro_step * loss_sum[g] / static_cast<double>(count[g]));
            z += gdro_q[g];
          }
          group_w.assign(G, 0.0);
          for (std::size_t g = 0; g < G; ++g) {
            gdro_q[g] /= z;
            if (sizes[g])
              group_w[g] = static_cast<double>(K) * gdro_q[g] / static_cast<double>(sizes[g]);
          }
          break;
        }
      }

      const double batch_scale = static_cast<double>(n) / static_cast<double>(idx.size());
      std::vector<double> sw(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const double w = cfg.method == Method::Erm
                             ? erm_weight
                             : group_w[static_cast<std::size_t>(gb[r])];
        sw[r] = w * batch_scale;
      }
      if (cfg.record_trajectory && !group_w.empty())
        for (std::size_t g = 0; g < G; ++g)
          result.report.trajectory.push_back({epoch + 1, b + 1, g, group_w[g]});

      epoch_loss += loss_from(head, f, yb, sw);
      const Matrix grad = gradient_from(head, xb, f, yb, sw);
      const double lr = cosine_lr(step, total_steps, cfg.lr_start, cfg.lr_end);
      for (std::size_t k = 0; k < head.theta.values.size(); ++k)
        head.theta.values[k] -= lr * grad.values[k];
      normalize_rows(head.theta);
      ++step;
    }
    result.report.epoch_loss.push_back(epoch_loss / static_cast<double>(steps_per_epoch));

    if (!val_scored.empty()) {
      const Matrix pv = run_forward(head, x_val).probs;
      std::vector<std::size_t> hits(G, 0), totals(G, 0);
      for (std::size_t r = 0; r < val_scored.size(); ++r) {
        auto row = pv.row(r);
        const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        const auto g = static_cast<std::size_t>(groups.group[val_scored[r]]);
        ++totals[g];
        hits[g] += pred == bundle.samples.rows[val_scored[r]].y;
      }
      std::vector<std::optional<double>> accs(G);
      double wg = 1.0;
      for (std::size_t g = 0; g < G; ++g)
        if (totals[g]) {
          accs[g] = static_cast<double>(hits[g]) / static_cast<double>(totals[g]);
          wg = std::min(wg, *accs[g]);
        }
      result.report.val_group_accuracy.push_back(std::move(accs));
      result.report.val_worst_group.push_back(wg);
      if (cfg.selection == ModelSelection::BestValWorstGroup && wg > best_val_wg) {
        best_val_wg = wg;
        result.head = head;
        result.report.selected_epoch = epoch + 1;
      }
    }
  }
  if (cfg.selection == ModelSelection::Final || result.report.selected_epoch == 0) {
    result.head = head;
    result.report.selected_epoch = cfg.epochs;
  }
  return result;
}

void save_head(const ClassifierHead& head, const TrainConfig& cfg,
               const std::filesystem::path& stem) {
  auto emb = stem;
  emb += ".emb";
  write_embeddings(EmbeddingMatrix(head.theta, Dtype::F64, true), emb);
  nlohmann::json meta = {{"scale", head.scale},
                         {"K", head.num_classes()},
                         {"d", head.dim()},
                         {"method", to_string(cfg.method)},
                         {"seed", cfg.seed},
                         {"eta", cfg.eta},
                         {"m", cfg.momentum}};
  auto json_path = stem;
  json_path += ".json";
  std::ofstream out(json_path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + json_path.string());
  out << meta.dump(2) << "\n";
}

ClassifierHead load_head(const std::filesystem::path& stem) {
  auto emb = stem;
  emb += ".emb";
  auto json_path = stem;
  json_path += ".json";
  const auto theta = read_embeddings(emb);
  std::ifstream in(json_path);
  if (!in) fail(ErrorKind::Io, "cannot open " + json_path.string());
  nlohmann::json meta;
  try {
    in >> meta;
    const auto K = meta.at("K").get<std::size_t>();
    const auto d = meta.at("d").get<std::size_t>();
    if (K != theta.rows() || d != theta.cols())
      fail(ErrorKind::Validation, json_path.string() + ": K/d disagree with the theta file");
    return {theta.matrix(), meta.at("scale").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Schema, json_path.string() + ": " + e.what());
  }
}

void write_trajectory_csv(const TrainReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << "epoch,batch,group,w\n";
  char buf[64];
  for (const auto& s : report.trajectory) {
    std::snprintf(buf, sizeof buf, "%.17g", s.w);
    out << s.epoch << ',' << s.batch << ',' << s.group << ',' << buf << '\n';
  }
}

}  // namespace grouprobe
