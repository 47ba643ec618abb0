#pragma once

// Zero-shot classification against prompt embeddings and pseudo-annotation of
// spurious attributes.

#include <optional>
#include <vector>

#include "grouprobe/tensor_io.hpp"

namespace grouprobe {

inline constexpr double kDefaultLogitScale = 30.0;

// scale * cosine(image_i, prompt_j). The scale multiplies the cosine; pass
// 1/30 to get the literal cos/τ convention with τ = 30.
struct LogitMatrix {
  Matrix values;
  double scale = kDefaultLogitScale;
};

LogitMatrix cosine_logits(const EmbeddingMatrix& images, const EmbeddingMatrix& prompts,
                          double scale = kDefaultLogitScale);
Matrix softmax_probs(const LogitMatrix& logits);

// Per-row argmax, lowest index on exact ties. `ties` counts rows whose
// maximum was shared by more than one column.
struct ZeroShotLabels {
  std::vector<int> labels;
  std::size_t ties = 0;
};

ZeroShotLabels argmax_rows(const Matrix& scores);

ZeroShotLabels zs_classify(const EmbeddingMatrix& images, const EmbeddingMatrix& prompts);
ZeroShotLabels annotate_attributes(const EmbeddingMatrix& images,
                                   const EmbeddingMatrix& attr_prompts);

// Collapses per-class attribute prompts ("a photo of a landbird in a forest",
// ...) into one row per attribute value by averaging the unit-normalized
// rows. Input rows are ordered class-major: row c*|S| + s.
EmbeddingMatrix merge_attribute_prompts(const EmbeddingMatrix& per_class_prompts,
                                        std::size_t num_classes);

// Returns a copy of `samples` with s_pseudo set from `labels`.
SampleTable with_pseudo_attributes(const SampleTable& samples, const std::vector<int>& labels);

enum class GroupSource { True, Pseudo };

const char* to_string(GroupSource source);
std::optional<GroupSource> parse_group_source(std::string_view text);

// g = y * |S| + s for every row in scope; rows outside `only` get -1 and are
// not counted in `sizes`.
struct GroupAssignment {
  std::vector<int> group;
  std::vector<std::size_t> sizes;
  std::size_t num_classes = 0;
  std::size_t num_attrs = 0;

  std::size_t num_groups() const { return num_classes * num_attrs; }
  int class_of(std::size_t g) const { return static_cast<int>(g / num_attrs); }
};

inline int group_index(int y, int s, std::size_t num_attrs) {
  return y * static_cast<int>(num_attrs) + s;
}

GroupAssignment form_groups(const SampleTable& samples, std::size_t num_classes,
                            std::size_t num_attrs, GroupSource source,
                            std::optional<Split> only = std::nullopt);

}  // namespace grouprobe
