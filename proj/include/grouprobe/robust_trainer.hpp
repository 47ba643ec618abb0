#pragma once

// Classifier head over frozen embeddings trained with dynamic group
// re-weighting (DPT) plus ERM, group-balanced and GDRO baselines.
//
// The head holds one learnable vector per class in the embedding space;
// predictions are softmax(scale * cos(x, theta_j)). DPT per-batch weights:
//
//   raw:        ŵ_g = exp(eta * (1 - p̄_g)) / N_g
//   normalize:  ŵ_g /= sum_{k in class(g)} ŵ_k * N_k
//   smooth:     w_g = (1 - m) * w_g + m * ŵ_g
//
// and the loss is sum_i w_{g(i)} * CE(x_i, y_i).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grouprobe/tensor_io.hpp"
#include "grouprobe/zeroshot.hpp"

namespace grouprobe {

struct ClassifierHead {
  Matrix theta;  // K x d, unit rows after every update
  double scale = kDefaultLogitScale;

  std::size_t num_classes() const { return theta.rows; }
  std::size_t dim() const { return theta.cols; }
};

enum class Method { Erm, GroupBalanced, Dpt, Gdro };
enum class HeadInit { Random, Prompts };
enum class ModelSelection { Final, BestValWorstGroup };

const char* to_string(Method method);
std::optional<Method> parse_method(std::string_view text);
const char* to_string(HeadInit init);
std::optional<HeadInit> parse_head_init(std::string_view text);
const char* to_string(ModelSelection selection);
std::optional<ModelSelection> parse_model_selection(std::string_view text);

struct TrainConfig {
  Method method = Method::Dpt;
  double eta = 5.0;
  double momentum = 0.3;
  double scale = kDefaultLogitScale;
  double lr_start = 1e-3;
  double lr_end = 1e-4;
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double gdro_step = 0.01;
  HeadInit init = HeadInit::Random;
  ModelSelection selection = ModelSelection::Final;
  bool record_trajectory = true;

  // Throws InvalidArgument on out-of-range fields.
  void validate() const;
};

// forward / loss / gradient over a batch of embedding rows. `weights` are the
// per-sample loss weights.
Matrix forward_probs(const ClassifierHead& head, const Matrix& batch);
double weighted_loss(const ClassifierHead& head, const Matrix& batch,
                     std::span<const int> labels, std::span<const double> weights);
Matrix loss_gradient(const ClassifierHead& head, const Matrix& batch,
                     std::span<const int> labels, std::span<const double> weights);

struct GroupBatchStat {
  std::size_t count = 0;
  double mean_true_prob = 0.0;  // meaningful only when count > 0

  bool present() const { return count > 0; }
};

// Rows with group < 0 are ignored.
std::vector<GroupBatchStat> batch_group_stats(const Matrix& probs, std::span<const int> labels,
                                              std::span<const int> groups,
                                              std::size_t num_groups);

// Class index of every group for a K x |S| grid.
std::vector<int> class_of_groups(std::size_t num_classes, std::size_t num_attrs);

// ŵ_g ∝ exp(eta (1 - p̄_g)) / N_g for scored groups (pbar set, N_g >= 1);
// unscored groups get 0. The within-class maximum of eta (1 - p̄) is
// subtracted before exponentiating.
std::vector<double> raw_group_weights(std::span<const std::optional<double>> pbar,
                                      std::span<const std::size_t> sizes, double eta,
                                      std::span<const int> class_of_group);

// ŵ_g <- target_c * ŵ_g / sum_{k in c} ŵ_k N_k. Targets default to 1. A class
// whose ŵ are all zero is an error unless its target is 0.
std::vector<double> class_normalize(std::span<const double> w_hat,
                                    std::span<const std::size_t> sizes,
                                    std::span<const int> class_of_group,
                                    std::span<const double> target_mass = {});

// class_normalize(raw_group_weights(...)) evaluated as
// target_c * e_g / (N_g * sum_{k in c} e_k) with e the shifted exponentials.
// Same value up to rounding; with eta = 0 it is exactly 1 / (N_g * |scored
// groups in c|). Used by the trainer.
std::vector<double> normalized_group_weights(std::span<const std::optional<double>> pbar,
                                             std::span<const std::size_t> sizes, double eta,
                                             std::span<const int> class_of_group,
                                             std::span<const double> target_mass = {});

struct GroupWeightState {
  std::vector<double> w;
  std::vector<std::size_t> sizes;
  std::vector<int> class_of_group;
  double eta = 0.0;
  double momentum = 0.3;

  std::size_t num_classes() const;
  // sum_{g in c} w_g N_g
  double class_mass(int c) const;
};

// Weights from raw_group_weights + class_normalize with p̄ = 1/K everywhere,
// i.e. w_g = 1 / (N_g * nonempty groups in class).
GroupWeightState init_group_weights(std::span<const std::size_t> sizes,
                                    std::span<const int> class_of_group, double eta,
                                    double momentum);

// w_k <- (1 - m) w_k + m ŵ_k for groups with ŵ_k > 0; others are left alone.
GroupWeightState ema_update(const GroupWeightState& state, std::span<const double> w_hat,
                            double momentum);

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_start, double lr_end);

ClassifierHead init_head_random(std::size_t num_classes, std::size_t dim, std::uint64_t seed,
                                double scale = kDefaultLogitScale);
ClassifierHead init_head_from_prompts(const PromptBank& prompts,
                                      double scale = kDefaultLogitScale);

struct WeightSnapshot {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  std::size_t group = 0;
  double w = 0.0;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  // Per epoch, per group accuracy on val rows (groups from the assignment
  // passed to train). Empty when there is no grouped val split.
  std::vector<std::vector<std::optional<double>>> val_group_accuracy;
  std::vector<double> val_worst_group;
  std::vector<WeightSnapshot> trajectory;
  std::size_t selected_epoch = 0;  // 1-based
  std::string checkpoint_path;
};

struct TrainResult {
  ClassifierHead head;
  TrainReport report;
};

// Trains on rows with split == train. `groups` must assign every train row for
// the group-aware methods; ERM ignores it. Deterministic given cfg.seed.
TrainResult train(const DatasetBundle& bundle, const GroupAssignment& groups,
                  const TrainConfig& cfg);

// Checkpoint: <stem>.emb (theta in the embedding format) + <stem>.json.
void save_head(const ClassifierHead& head, const TrainConfig& cfg,
               const std::filesystem::path& stem);
ClassifierHead load_head(const std::filesystem::path& stem);

void write_trajectory_csv(const TrainReport& report, const std::filesystem::path& path);

}  // namespace grouprobe
