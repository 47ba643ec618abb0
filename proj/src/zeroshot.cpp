#include "grouprobe/zeroshot.hpp"

#include <cmath>

#include "grouprobe/error.hpp"
#include "grouprobe/kernels.hpp"

namespace grouprobe {
namespace {

void check_no_zero_rows(const Matrix& m, const char* what) {
  for (std::size_t i = 0; i < m.rows; ++i)
    if (norm2(m.row(i)) == 0.0)
      fail(ErrorKind::Degenerate, std::string(what) + " row " + std::to_string(i) +
                                      " has zero norm");
}

}  // namespace

LogitMatrix cosine_logits(const EmbeddingMatrix& images, const EmbeddingMatrix& prompts,
                          double scale) {
  if (images.cols() != prompts.cols())
    fail(ErrorKind::Validation, "dimension mismatch: images d=" +
                                    std::to_string(images.cols()) + ", prompts d=" +
                                    std::to_string(prompts.cols()));
  if (!(scale > 0.0) || !std::isfinite(scale))
    fail(ErrorKind::InvalidArgument, "logit scale must be positive");
  check_no_zero_rows(images.matrix(), "image");
  check_no_zero_rows(prompts.matrix(), "prompt");
  return {kernels::cosine_logits(images.matrix(), prompts.matrix(), scale), scale};
}

Matrix softmax_probs(const LogitMatrix& logits) { return kernels::row_softmax(logits.values); }

ZeroShotLabels argmax_rows(const Matrix& scores) {
  ZeroShotLabels out;
  out.labels.resize(scores.rows);
  for (std::size_t i = 0; i < scores.rows; ++i) {
    auto r = scores.row(i);
    std::size_t best = 0;
    bool tied = false;
    for (std::size_t j = 1; j < r.size(); ++j) {
      if (r[j] > r[best]) {
        best = j;
        tied = false;
      } else if (r[j] == r[best]) {
        tied = true;
      }
    }
    out.labels[i] = static_cast<int>(best);
    if (tied) ++out.ties;
  }
  return out;
}

ZeroShotLabels zs_classify(const EmbeddingMatrix& images, const EmbeddingMatrix& prompts) {
  // Scale of 1 keeps raw cosines, so exact ties stay exact.
  return argmax_rows(cosine_logits(images, prompts, 1.0).values);
}

ZeroShotLabels annotate_attributes(const EmbeddingMatrix& images,
                                   const EmbeddingMatrix& attr_prompts) {
  if (attr_prompts.rows() < 2)
    fail(ErrorKind::Validation, "attribute annotation needs at least 2 attribute prompts");
  return zs_classify(images, attr_prompts);
}

EmbeddingMatrix merge_attribute_prompts(const EmbeddingMatrix& per_class_prompts,
                                        std::size_t num_classes) {
  if (num_classes == 0 || per_class_prompts.rows() % num_classes != 0)
    fail(ErrorKind::Validation, "per-class attribute prompts must have K*|S| rows");
  const std::size_t S = per_class_prompts.rows() / num_classes;
  const auto unit = l2_normalize(per_class_prompts);
  Matrix merged(S, unit.cols());
  for (std::size_t c = 0; c < num_classes; ++c)
    for (std::size_t s = 0; s < S; ++s) {
      auto src = unit.row(c * S + s);
      auto dst = merged.row(s);
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k] / num_classes;
    }
  return EmbeddingMatrix(std::move(merged), Dtype::F64, false);
}

SampleTable with_pseudo_attributes(const SampleTable& samples, const std::vector<int>& labels) {
  if (labels.size() != samples.size())
    fail(ErrorKind::Validation, "pseudo-attribute count does not match the sample table");
  SampleTable out = samples;
  for (std::size_t i = 0; i < labels.size(); ++i) out.rows[i].s_pseudo = labels[i];
  return out;
}

const char* to_string(GroupSource source) {
  return source == GroupSource::True ? "true" : "pseudo";
}

std::optional<GroupSource> parse_group_source(std::string_view text) {
  if (text == "true") return GroupSource::True;
  if (text == "pseudo") return GroupSource::Pseudo;
  return std::nullopt;
}

GroupAssignment form_groups(const SampleTable& samples, std::size_t num_classes,
                            std::size_t num_attrs, GroupSource source,
                            std::optional<Split> only) {
  GroupAssignment out;
  out.num_classes = num_classes;
  out.num_attrs = num_attrs;
  out.group.assign(samples.size(), -1);
  out.sizes.assign(num_classes * num_attrs, 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& r = samples.rows[i];
    if (only && r.split != *only) continue;
    const int s = source == GroupSource::True ? r.s_true : r.s_pseudo;
    if (s < 0)
      fail(ErrorKind::IncompleteAnnotation,
           "row '" + r.id + "' has no " + to_string(source) + " attribute");
    if (r.y < 0 || static_cast<std::size_t>(r.y) >= num_classes ||
        static_cast<std::size_t>(s) >= num_attrs)
      fail(ErrorKind::Validation, "row '" + r.id + "' has out-of-range class or attribute");
    const int g = group_index(r.y, s, num_attrs);
    out.group[i] = g;
    ++out.sizes[static_cast<std::size_t>(g)];
  }
  return out;
}

}  // namespace grouprobe
