#include <doctest.h>

#include <cmath>
#include <numeric>

#include "grouprobe/robust_trainer.hpp"
#include "grouprobe/synth.hpp"
#include "test_util.hpp"

using namespace grouprobe;
using testutil::kind_of;

namespace {

// Eqs. 3-4 for N=(90,10), p̄=(0.9,0.6), eta=5, evaluated at 40 digits with
// mpmath and rounded to double.
constexpr double kW1 = 0.002026950264515070;
constexpr double kW2 = 0.08175744761936437;
constexpr double kRawRatio = 0.7389056098930650 / 0.01831912523000142;  // (e^2/10)/(e^0.5/90)
constexpr double kTwoLn2 = 1.3862943611198906;
constexpr double kLog1pExpMinus30 = 9.357622968839737e-14;
constexpr double kP0Orthonormal3 = 0.9999999999998128;  // e^30 / (e^30 + 2)

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

ClassifierHead random_head(std::size_t K, std::size_t d, std::mt19937_64& rng, double scale,
                           bool unit) {
  ClassifierHead h{testutil::gaussian_matrix(K, d, rng), scale};
  if (unit)
    for (std::size_t k = 0; k < K; ++k) {
      const double n = norm2(h.theta.row(k));
      for (double& v : h.theta.row(k)) v /= n;
    }
  return h;
}

DatasetBundle one_group_per_class_bundle(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  DatasetBundle b{testutil::unit_rows(testutil::gaussian_matrix(n, d, rng)), {},
                  testutil::axis_prompts(2, 2, d)};
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    b.samples.rows.push_back({"r" + std::to_string(i), y, y, Split::Train, -1});
  }
  // Nudge the classes apart so training has something to learn.
  Matrix m = b.images.matrix();
  for (std::size_t i = 0; i < n; ++i) m(i, 0) += i % 2 ? 1.0 : -1.0;
  b.images = testutil::unit_rows(m);
  return b;
}

}  // namespace

TEST_CASE("forward_probs examples") {
  ClassifierHead h{Matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}), 30.0};
  const auto p = forward_probs(h, Matrix(1, 3, {1, 0, 0}));
  CHECK(rel(p(0, 0), kP0Orthonormal3) <= 1e-15);

  ClassifierHead two{Matrix(2, 2, {1, 0, 0, 1}), 30.0};
  const auto q = forward_probs(two, Matrix(1, 2, {1, 1}));
  CHECK(q(0, 0) == 0.5);
  CHECK(q(0, 1) == 0.5);

  ClassifierHead flat{Matrix(4, 2, {1, 0, 0, 1, -1, 0, 3, 3}), 0.0};
  const auto u = forward_probs(flat, Matrix(2, 2, {0.3, 0.7, -1, 2}));
  for (double v : u.values) CHECK(v == 0.25);

  std::mt19937_64 rng(1);
  const auto hr = random_head(5, 7, rng, 30.0, true);
  const auto pr = forward_probs(hr, testutil::gaussian_matrix(20, 7, rng));
  for (std::size_t i = 0; i < pr.rows; ++i) {
    double s = 0;
    for (double v : pr.row(i)) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
  CHECK(kind_of([&] { forward_probs(hr, Matrix(1, 6, 1.0)); }) == ErrorKind::Validation);
}

TEST_CASE("weighted loss examples") {
  ClassifierHead two{Matrix(2, 2, {1, 0, 0, 1}), 30.0};
  const Matrix x(1, 2, {1, 1});
  const std::vector<int> y{0};
  CHECK(rel(weighted_loss(two, x, y, std::vector<double>{2.0}), kTwoLn2) <= 1e-15);

  // logits (30, 0): the loss is log1p(e^-30) and keeps its relative accuracy
  const double tiny = weighted_loss(two, Matrix(1, 2, {1, 0}), y, std::vector<double>{1.0});
  CHECK(rel(tiny, kLog1pExpMinus30) <= 1e-14);

  std::mt19937_64 rng(2);
  const auto h = random_head(4, 6, rng, 30.0, true);
  const Matrix b = testutil::gaussian_matrix(9, 6, rng);
  std::vector<int> labels(9);
  for (auto& l : labels) l = static_cast<int>(rng() % 4);
  std::vector<double> ones(9, 1.0), twos(9, 2.0);
  const double base = weighted_loss(h, b, labels, ones);
  CHECK(weighted_loss(h, b, labels, twos) == 2.0 * base);

  const auto p = forward_probs(h, b);
  double ce = 0.0;
  for (std::size_t i = 0; i < 9; ++i) ce -= std::log(p(i, static_cast<std::size_t>(labels[i])));
  CHECK(rel(base, ce) <= 1e-12);

  // a saturated wrong prediction stays finite
  ClassifierHead big{Matrix(2, 2, {1, 0, 0, 1}), 1e4};
  CHECK(std::isfinite(weighted_loss(big, Matrix(1, 2, {1, 0}), std::vector<int>{1},
                                    std::vector<double>{1.0})));
}

TEST_CASE("analytic gradient matches central differences") {
  std::mt19937_64 rng(3);
  constexpr double h = 1e-5;
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t K = 2 + rng() % 4, d = 2 + rng() % 15, n = 1 + rng() % 32;
    const double scale = std::uniform_real_distribution<double>(0.5, 30.0)(rng);
    const auto head = random_head(K, d, rng, scale, trial % 2 == 0);
    const Matrix x = testutil::gaussian_matrix(n, d, rng);
    std::vector<int> y(n);
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng() % K);
      w[i] = std::uniform_real_distribution<double>(0.1, 2.0)(rng);
    }
    const Matrix g = loss_gradient(head, x, y, w);
    double max_abs = 0.0, max_err = 0.0;
    for (std::size_t k = 0; k < head.theta.values.size(); ++k) {
      auto plus = head, minus = head;
      plus.theta.values[k] += h;
      minus.theta.values[k] -= h;
      const double fd = (weighted_loss(plus, x, y, w) - weighted_loss(minus, x, y, w)) / (2 * h);
      max_abs = std::max(max_abs, std::abs(fd));
      max_err = std::max(max_err, std::abs(fd - g.values[k]));
    }
    worst = std::max(worst, max_err / std::max(max_abs, 1e-300));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("gradient structure") {
  std::mt19937_64 rng(4);
  const auto head = random_head(3, 8, rng, 30.0, true);
  const Matrix x = testutil::gaussian_matrix(10, 8, rng);
  std::vector<int> y(10);
  for (auto& l : y) l = static_cast<int>(rng() % 3);

  const Matrix zero = loss_gradient(head, x, y, std::vector<double>(10, 0.0));
  for (double v : zero.values) CHECK(v == 0.0);

  const Matrix g = loss_gradient(head, x, y, std::vector<double>(10, 1.0));
  for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(dot(g.row(k), head.theta.row(k))) <= 1e-10);
}

TEST_CASE("batch group statistics") {
  const Matrix probs(4, 2, {0.2, 0.8, 0.8, 0.2, 0.3, 0.7, 0.6, 0.4});
  const std::vector<int> labels{0, 0, 1, 0};
  const std::vector<int> groups{1, 1, 2, -1};
  const auto s = batch_group_stats(probs, labels, groups, 4);
  CHECK(!s[0].present());
  CHECK(s[1].count == 2);
  CHECK(s[1].mean_true_prob == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s[2].mean_true_prob == 0.7);
  CHECK(!s[3].present());
}

TEST_CASE("raw weights and class normalization reproduce the worked example") {
  const std::vector<std::size_t> N{90, 10};
  const std::vector<int> cls{0, 0};
  const std::vector<std::optional<double>> pbar{0.9, 0.6};
  const auto raw = raw_group_weights(pbar, N, 5.0, cls);
  CHECK(rel(raw[1] / raw[0], kRawRatio) <= 1e-14);

  const auto w = class_normalize(raw, N, cls);
  CHECK(std::abs(w[0] - kW1) <= 1e-9);
  CHECK(std::abs(w[1] - kW2) <= 1e-9);
  CHECK(std::abs(w[0] * 90 + w[1] * 10 - 1.0) <= 1e-12);
  const auto fused = normalized_group_weights(pbar, N, 5.0, cls);
  CHECK(rel(fused[0], kW1) <= 1e-15);
  CHECK(rel(fused[1], kW2) <= 1e-15);

  const auto balanced = class_normalize(raw_group_weights(pbar, N, 0.0, cls), N, cls);
  CHECK(rel(balanced[0], 1.0 / 180) <= 1e-15);
  CHECK(rel(balanced[1], 1.0 / 20) <= 1e-15);

  std::vector<double> scaled = raw;
  for (double& v : scaled) v *= 7;
  const auto w7 = class_normalize(scaled, N, cls);
  CHECK(rel(w7[0], w[0]) <= 1e-15);
  CHECK(rel(w7[1], w[1]) <= 1e-15);

  CHECK(kind_of([&] { raw_group_weights(pbar, N, -1.0, cls); }) == ErrorKind::InvalidArgument);
  CHECK(kind_of([&] { class_normalize(std::vector<double>{0, 0}, N, cls); }) ==
        ErrorKind::Degenerate);
}

TEST_CASE("eta = 0 reduces to group-balanced weights") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 30; ++t) {
    const std::size_t K = 2 + rng() % 3, S = 2 + rng() % 3;
    const auto cls = class_of_groups(K, S);
    std::vector<std::size_t> N(K * S);
    std::vector<std::optional<double>> pbar(K * S);
    for (std::size_t g = 0; g < K * S; ++g) {
      N[g] = 1 + rng() % 500;
      pbar[g] = std::uniform_real_distribution<double>(0, 1)(rng);
    }
    const auto w = normalized_group_weights(pbar, N, 0.0, cls);
    const auto two_step = class_normalize(raw_group_weights(pbar, N, 0.0, cls), N, cls);
    for (std::size_t g = 0; g < K * S; ++g) {
      const double balanced = 1.0 / (static_cast<double>(N[g]) * static_cast<double>(S));
      CHECK(w[g] == balanced);
      CHECK(rel(two_step[g], balanced) <= 4e-16 * S);
    }

    // With m = 1 the EMA hands these weights over unchanged.
    const auto state = init_group_weights(N, cls, 0.0, 1.0);
    const auto next = ema_update(state, w, 1.0);
    CHECK(next.w == w);
  }
}

TEST_CASE("shift stabilization") {
  std::mt19937_64 rng(6);
  const std::vector<std::size_t> N{90, 10, 40, 60};
  const auto cls = class_of_groups(2, 2);
  for (int t = 0; t < 50; ++t) {
    std::vector<std::optional<double>> pbar(4), shifted(4);
    const double eta = std::uniform_real_distribution<double>(0.1, 20)(rng);
    std::uniform_real_distribution<double> shift(-0.15 * eta, 0.15 * eta);
    const double c[2] = {shift(rng), shift(rng)};
    for (std::size_t g = 0; g < 4; ++g) {
      pbar[g] = std::uniform_real_distribution<double>(0.2, 0.8)(rng);
      // eta (1 - p̄) + c  <=>  p̄ - c / eta
      shifted[g] = *pbar[g] - c[cls[g]] / eta;
    }
    const auto a = class_normalize(raw_group_weights(pbar, N, eta, cls), N, cls);
    const auto b = class_normalize(raw_group_weights(shifted, N, eta, cls), N, cls);
    const auto fa = normalized_group_weights(pbar, N, eta, cls);
    const auto fb = normalized_group_weights(shifted, N, eta, cls);
    for (std::size_t g = 0; g < 4; ++g) {
      CHECK(std::abs(a[g] - b[g]) <= 1e-12);
      CHECK(std::abs(fa[g] - fb[g]) <= 1e-12);
    }
  }

  const std::vector<std::size_t> N2{90, 10};
  const std::vector<int> one_class{0, 0};
  const auto raw = raw_group_weights(std::vector<std::optional<double>>{0.9, 0.6}, N2, 1000.0,
                                     one_class);
  const auto w = class_normalize(raw, N2, one_class);
  for (double v : raw) CHECK(std::isfinite(v));
  for (double v : w) CHECK(std::isfinite(v));
  // log(ŵ2/ŵ1) = 1000 * 0.3 + log 9 = 302.197...; the ratio is e^302, representable.
  CHECK(rel(std::log(raw[1]) - std::log(raw[0]), 300.0 + std::log(9.0)) <= 1e-12);
  CHECK(std::abs(w[1] * 10 - 1.0) <= 1e-12);
}

TEST_CASE("harder groups get more weight") {
  const std::vector<std::size_t> N{50, 30, 20};
  const std::vector<int> cls{0, 0, 0};
  std::vector<std::optional<double>> pbar{0.8, 0.7, 0.6};
  double prev = class_normalize(raw_group_weights(pbar, N, 3.0, cls), N, cls)[1];
  for (double p = 0.65; p > 0.0; p -= 0.05) {
    pbar[1] = p;
    const double w = class_normalize(raw_group_weights(pbar, N, 3.0, cls), N, cls)[1];
    CHECK(w > prev);
    prev = w;
  }
}

TEST_CASE("EMA update") {
  GroupWeightState s{{0.02}, {1}, {0}, 5.0, 0.3};
  CHECK(ema_update(s, std::vector<double>{0.08}, 0.3).w[0] == doctest::Approx(0.038).epsilon(1e-15));
  CHECK(ema_update(s, std::vector<double>{0.08}, 1.0).w[0] == 0.08);
  CHECK(ema_update(s, std::vector<double>{0.02}, 0.3).w[0] == 0.02);
  // an absent group (ŵ = 0) keeps its weight
  GroupWeightState two{{0.02, 0.5}, {1, 1}, {0, 0}, 5.0, 0.3};
  CHECK(ema_update(two, std::vector<double>{0.08, 0.0}, 0.3).w[1] == 0.5);
}

TEST_CASE("initial weights are group-balanced per class") {
  const std::vector<std::size_t> N{90, 10, 0, 25};
  const auto s = init_group_weights(N, class_of_groups(2, 2), 5.0, 0.3);
  CHECK(rel(s.w[0], 1.0 / 180) <= 1e-15);
  CHECK(rel(s.w[1], 1.0 / 20) <= 1e-15);
  CHECK(rel(s.w[3], 1.0 / 25) <= 1e-15);
  CHECK(std::abs(s.class_mass(0) - 1.0) <= 1e-12);
  CHECK(std::abs(s.class_mass(1) - 1.0) <= 1e-12);
}

TEST_CASE("cosine learning rate") {
  CHECK(cosine_lr(0, 100, 1e-3, 1e-4) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(cosine_lr(100, 100, 1e-3, 1e-4) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(cosine_lr(50, 100, 1e-3, 1e-4) == doctest::Approx(5.5e-4).epsilon(1e-14));
}

TEST_CASE("head initialization") {
  const auto a = init_head_random(3, 10, 17);
  const auto b = init_head_random(3, 10, 17);
  CHECK(a.theta == b.theta);
  for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(norm2(a.theta.row(k)) - 1.0) <= 1e-12);

  SynthConfig cfg;
  cfg.n_train = 200;
  cfg.n_val = 50;
  cfg.n_test = 50;
  const auto bundle = gen_spurious_dataset(cfg);
  const auto warm = init_head_from_prompts(bundle.prompts);
  const auto preds = forward_probs(warm, bundle.images.matrix());
  const auto zs = zs_classify(bundle.images, bundle.prompts.class_embeddings);
  for (std::size_t i = 0; i < bundle.samples.size(); ++i) {
    const auto row = preds.row(i);
    CHECK(std::max_element(row.begin(), row.end()) - row.begin() == zs.labels[i]);
  }
}

TEST_CASE("ERM equals DPT when every group weight is uniform") {
  std::mt19937_64 rng(7);
  const auto bundle = one_group_per_class_bundle(200, 6, rng);
  const auto groups = form_groups(bundle.samples, 2, 2, GroupSource::True);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 3;
  cfg.method = Method::Erm;
  const auto erm = train(bundle, groups, cfg);
  cfg.method = Method::Dpt;
  const auto dpt = train(bundle, groups, cfg);
  for (std::size_t k = 0; k < erm.head.theta.values.size(); ++k)
    CHECK(std::abs(erm.head.theta.values[k] - dpt.head.theta.values[k]) <= 1e-10);
}

TEST_CASE("training is deterministic and keeps the mass invariant") {
  SynthConfig sc;
  sc.n_train = 400;
  sc.n_val = 100;
  sc.n_test = 10;
  const auto bundle = gen_spurious_dataset(sc);
  const auto groups = form_groups(bundle.samples, 2, 2, GroupSource::True);
  for (Method m : {Method::Erm, Method::GroupBalanced, Method::Dpt, Method::Gdro}) {
    TrainConfig cfg;
    cfg.method = m;
    cfg.epochs = 4;
    const auto a = train(bundle, groups, cfg);
    const auto b = train(bundle, groups, cfg);
    CHECK(a.head.theta == b.head.theta);
    CHECK(a.report.epoch_loss.size() == 4);
    CHECK(a.report.val_worst_group.size() == 4);
    for (std::size_t k = 0; k < 2; ++k)
      CHECK(std::abs(norm2(a.head.theta.row(k)) - 1.0) <= 1e-12);
  }

  TrainConfig cfg;
  cfg.epochs = 3;
  const auto r = train(bundle, groups, cfg);
  const std::size_t G = 4;
  REQUIRE(r.report.trajectory.size() % G == 0);
  const auto train_groups = form_groups(bundle.samples, 2, 2, GroupSource::True, Split::Train);
  for (std::size_t t = 0; t < r.report.trajectory.size(); t += G) {
    double mass[2] = {0, 0};
    for (std::size_t g = 0; g < G; ++g)
      mass[g / 2] += r.report.trajectory[t + g].w * static_cast<double>(train_groups.sizes[g]);
    CHECK(std::abs(mass[0] - 1.0) <= 1e-9);
    CHECK(std::abs(mass[1] - 1.0) <= 1e-9);
  }
}

TEST_CASE("checkpoint and trajectory files") {
  testutil::TempDir tmp("head");
  std::mt19937_64 rng(8);
  const auto head = random_head(3, 5, rng, 12.5, true);
  TrainConfig cfg;
  save_head(head, cfg, tmp / "h");
  const auto back = load_head(tmp / "h");
  CHECK(back.theta == head.theta);
  CHECK(back.scale == 12.5);

  TrainReport rep;
  rep.trajectory = {{1, 1, 0, 0.1}, {1, 1, 1, 1.0 / 3}};
  write_trajectory_csv(rep, tmp / "w.csv");
  CHECK(testutil::file_text(tmp / "w.csv") ==
        "epoch,batch,group,w\n1,1,0,0.10000000000000001\n1,1,1,0.33333333333333331\n");
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  cfg.lr_end = 1e-2;
  CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::InvalidArgument);
  cfg = {};
  cfg.batch_size = 0;
  CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::InvalidArgument);
}
