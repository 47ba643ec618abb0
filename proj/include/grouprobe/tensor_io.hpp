#pragma once

// On-disk and in-memory data model shared by every module: embedding
// matrices, per-sample metadata, prompt banks and the dataset bundle.
//
// Embedding file layout (little-endian):
//   0..3   magic "GRPE"
//   4      version (1)
//   5      dtype (0 = f32, 1 = f64)
//   6      flags (bit0 = rows unit-normalized)
//   7      reserved (0)
//   8..11  n (u32)
//   12..15 d (u32)
//   16..   n*d values, row-major

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grouprobe/matrix.hpp"

namespace grouprobe {

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

inline constexpr std::size_t kEmbeddingHeaderBytes = 16;
inline constexpr std::uint8_t kEmbeddingVersion = 1;

// Immutable n x d matrix of encoder outputs. Values are held as f64; when the
// storage dtype is f32 they are rounded to float precision on construction so
// that write/read round-trips are exact.
class EmbeddingMatrix {
 public:
  // Throws Validation if n < 1, d < 2, any value is non-finite, or the
  // normalized flag is set while some row norm is off by more than 1e-5.
  explicit EmbeddingMatrix(Matrix values, Dtype dtype = Dtype::F64,
                           bool normalized = false);

  std::size_t rows() const { return values_.rows; }
  std::size_t cols() const { return values_.cols; }
  Dtype dtype() const { return dtype_; }
  bool normalized() const { return normalized_; }
  const Matrix& matrix() const { return values_; }
  std::span<const double> row(std::size_t i) const { return values_.row(i); }

  bool operator==(const EmbeddingMatrix&) const = default;

 private:
  Matrix values_;
  Dtype dtype_;
  bool normalized_;
};

std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m);
EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes,
                                  const std::string& origin = "<memory>");

EmbeddingMatrix read_embeddings(const std::filesystem::path& path);
void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);

// Unit-normalizes every row. Throws Degenerate naming the first zero row.
EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m);

enum class Split { Train, Val, Test };

const char* to_string(Split split);
std::optional<Split> parse_split(std::string_view text);

inline constexpr int kUnknownAttribute = -1;

struct SampleRow {
  std::string id;
  int y = 0;
  int s_true = kUnknownAttribute;
  Split split = Split::Train;
  int s_pseudo = kUnknownAttribute;

  bool operator==(const SampleRow&) const = default;
};

struct SampleTable {
  std::vector<SampleRow> rows;

  std::size_t size() const { return rows.size(); }
  std::vector<std::size_t> indices(Split split) const;
  bool has_pseudo_attributes() const;
  bool has_true_attributes(std::optional<Split> split = std::nullopt) const;

  bool operator==(const SampleTable&) const = default;
};

inline constexpr std::string_view kSampleTableHeader = "id,y,s_true,split,s_pseudo";

SampleTable parse_sample_table(std::string_view csv, const std::string& origin = "<memory>");
std::string format_sample_table(const SampleTable& table);
SampleTable read_sample_table(const std::filesystem::path& path);
void write_sample_table(const SampleTable& table, const std::filesystem::path& path);

enum class PromptRole { Class, Attribute };

struct PromptEntry {
  PromptRole role = PromptRole::Class;
  std::size_t index = 0;
  std::string text;

  bool operator==(const PromptEntry&) const = default;
};

struct PromptBank {
  EmbeddingMatrix class_embeddings;
  EmbeddingMatrix attr_embeddings;
  std::vector<PromptEntry> manifest;

  std::size_t num_classes() const { return class_embeddings.rows(); }
  std::size_t num_attrs() const { return attr_embeddings.rows(); }
};

// Directory with class.emb, attr.emb and manifest.json.
PromptBank read_prompt_bank(const std::filesystem::path& dir);
void write_prompt_bank(const PromptBank& bank, const std::filesystem::path& dir);

struct DatasetBundle {
  EmbeddingMatrix images;
  SampleTable samples;
  PromptBank prompts;

  std::size_t num_classes() const { return prompts.num_classes(); }
  std::size_t num_attrs() const { return prompts.num_attrs(); }
};

// Bundle directory: images.emb, samples.csv, prompts/.
DatasetBundle read_bundle(const std::filesystem::path& dir);
void write_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir);

struct ValidationReport {
  std::vector<std::string> findings;
  bool ok() const { return findings.empty(); }
};

ValidationReport validate_bundle(const DatasetBundle& bundle);

}  // namespace grouprobe
