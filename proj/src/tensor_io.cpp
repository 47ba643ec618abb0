#include "grouprobe/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "grouprobe/error.hpp"

namespace grouprobe {
namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'G', 'R', 'P', 'E'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(in[at + b]) << (8 * b);
  return v;
}

template <typename Bits>
void put_le(std::vector<std::uint8_t>& out, Bits v) {
  for (std::size_t b = 0; b < sizeof(Bits); ++b)
    out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

template <typename Bits>
Bits get_le(std::span<const std::uint8_t> in, std::size_t at) {
  Bits v = 0;
  for (std::size_t b = 0; b < sizeof(Bits); ++b)
    v |= static_cast<Bits>(in[at + b]) << (8 * b);
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return std::move(buffer).str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

int parse_int(std::string_view text, const std::string& where) {
  int value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size())
    fail(ErrorKind::Schema, where + ": expected integer, got '" + std::string(text) + "'");
  return value;
}

}  // namespace

EmbeddingMatrix::EmbeddingMatrix(Matrix values, Dtype dtype, bool normalized)
    : values_(std::move(values)), dtype_(dtype), normalized_(normalized) {
  if (values_.rows < 1)
    fail(ErrorKind::Validation, "embedding matrix needs n >= 1");
  if (values_.cols < 2)
    fail(ErrorKind::Validation,
         "embedding matrix needs d >= 2 (got d=" + std::to_string(values_.cols) + ")");
  if (values_.values.size() != values_.rows * values_.cols)
    fail(ErrorKind::Validation, "embedding data length does not equal n*d");
  for (std::size_t k = 0; k < values_.values.size(); ++k) {
    double& v = values_.values[k];
    if (!std::isfinite(v))
      fail(ErrorKind::Validation, "non-finite value at row " +
                                      std::to_string(k / values_.cols) + ", column " +
                                      std::to_string(k % values_.cols));
    if (dtype_ == Dtype::F32) v = static_cast<double>(static_cast<float>(v));
  }
  if (normalized_) {
    for (std::size_t i = 0; i < values_.rows; ++i) {
      if (std::abs(norm2(values_.row(i)) - 1.0) > 1e-5)
        fail(ErrorKind::Validation,
             "row " + std::to_string(i) + " is flagged normalized but its norm is not 1");
    }
  }
}

std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m) {
  const std::size_t width = m.dtype() == Dtype::F32 ? 4 : 8;
  std::vector<std::uint8_t> out;
  out.reserve(kEmbeddingHeaderBytes + m.rows() * m.cols() * width);
  for (char c : kMagic) out.push_back(static_cast<std::uint8_t>(c));
  out.push_back(kEmbeddingVersion);
  out.push_back(static_cast<std::uint8_t>(m.dtype()));
  out.push_back(m.normalized() ? 1 : 0);
  out.push_back(0);
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (double v : m.matrix().values) {
    if (m.dtype() == Dtype::F32)
      put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    else
      put_le(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes,
                                  const std::string& origin) {
  if (bytes.size() < kEmbeddingHeaderBytes)
    fail(ErrorKind::Corruption, origin + ": file shorter than the 16-byte header");
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    fail(ErrorKind::Format, origin + ": bad magic (expected GRPE)");
  if (bytes[4] != kEmbeddingVersion)
    fail(ErrorKind::Format, origin + ": unsupported version " + std::to_string(bytes[4]));
  if (bytes[5] > 1)
    fail(ErrorKind::Format, origin + ": unknown dtype code " + std::to_string(bytes[5]));
  if ((bytes[6] & ~1u) != 0 || bytes[7] != 0)
    fail(ErrorKind::Format, origin + ": reserved header bits set");

  const auto dtype = static_cast<Dtype>(bytes[5]);
  const bool normalized = (bytes[6] & 1u) != 0;
  const std::size_t n = get_u32(bytes, 8);
  const std::size_t d = get_u32(bytes, 12);
  const std::size_t width = dtype == Dtype::F32 ? 4 : 8;
  const std::size_t expected = kEmbeddingHeaderBytes + n * d * width;
  if (bytes.size() != expected)
    fail(ErrorKind::Corruption, origin + ": payload is " +
                                    std::to_string(bytes.size() - kEmbeddingHeaderBytes) +
                                    " bytes, header declares " +
                                    std::to_string(expected - kEmbeddingHeaderBytes));

  Matrix values(n, d);
  std::size_t at = kEmbeddingHeaderBytes;
  for (double& v : values.values) {
    if (dtype == Dtype::F32) {
      v = std::bit_cast<float>(get_le<std::uint32_t>(bytes, at));
    } else {
      v = std::bit_cast<double>(get_le<std::uint64_t>(bytes, at));
    }
    at += width;
  }
  try {
    return EmbeddingMatrix(std::move(values), dtype, normalized);
  } catch (const Error& e) {
    fail(e.kind(), origin + ": " + e.what());
  }
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  return decode_embeddings(
      {reinterpret_cast<const std::uint8_t*>(raw.data()), raw.size()}, path.string());
}

void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  const auto bytes = encode_embeddings(m);
  write_file(path, {reinterpret_cast<const char*>(bytes.data()), bytes.size()});
}

EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m) {
  Matrix out = m.matrix();
  for (std::size_t i = 0; i < out.rows; ++i) {
    auto r = out.row(i);
    const double norm = norm2(r);
    if (norm == 0.0)
      fail(ErrorKind::Degenerate, "row " + std::to_string(i) + " has zero norm");
    for (double& v : r) v /= norm;
  }
  return EmbeddingMatrix(std::move(out), m.dtype(), true);
}

const char* to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

std::optional<Split> parse_split(std::string_view text) {
  if (text == "train") return Split::Train;
  if (text == "val") return Split::Val;
  if (text == "test") return Split::Test;
  return std::nullopt;
}

std::vector<std::size_t> SampleTable::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].split == split) out.push_back(i);
  return out;
}

bool SampleTable::has_pseudo_attributes() const {
  return !rows.empty() && std::all_of(rows.begin(), rows.end(), [](const SampleRow& r) {
    return r.s_pseudo != kUnknownAttribute;
  });
}

bool SampleTable::has_true_attributes(std::optional<Split> split) const {
  bool any = false;
  for (const auto& r : rows) {
    if (split && r.split != *split) continue;
    if (r.s_true == kUnknownAttribute) return false;
    any = true;
  }
  return any;
}

SampleTable parse_sample_table(std::string_view csv, const std::string& origin) {
  SampleTable table;
  std::size_t line_no = 0;
  std::unordered_set<std::string> seen;
  bool header_seen = false;
  std::size_t start = 0;
  while (start < csv.size()) {
    auto end = csv.find('\n', start);
    if (end == std::string_view::npos) end = csv.size();
    std::string_view line = csv.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r')
      fail(ErrorKind::Schema, origin + ": CRLF line endings are not accepted");
    if (!header_seen) {
      if (line != kSampleTableHeader) {
        auto cols = split_fields(line);
        for (std::string_view col : split_fields(kSampleTableHeader)) {
          if (std::find(cols.begin(), cols.end(), col) == cols.end())
            fail(ErrorKind::Schema,
                 origin + ": missing column '" + std::string(col) + "'");
        }
        fail(ErrorKind::Schema, origin + ": header must be exactly '" +
                                    std::string(kSampleTableHeader) + "'");
      }
      header_seen = true;
      continue;
    }
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(line_no);
    auto fields = split_fields(line);
    if (fields.size() != 5)
      fail(ErrorKind::Schema, where + ": expected 5 fields, got " +
                                  std::to_string(fields.size()));
    SampleRow row;
    row.id = std::string(fields[0]);
    if (row.id.empty()) fail(ErrorKind::Schema, where + ": empty id");
    row.y = parse_int(fields[1], where);
    row.s_true = parse_int(fields[2], where);
    auto split = parse_split(fields[3]);
    if (!split)
      fail(ErrorKind::Schema, where + ": split '" + std::string(fields[3]) +
                                  "' is not one of train, val, test");
    row.split = *split;
    row.s_pseudo = parse_int(fields[4], where);
    if (row.y < 0) fail(ErrorKind::Validation, where + ": negative class label");
    if (row.s_true < kUnknownAttribute || row.s_pseudo < kUnknownAttribute)
      fail(ErrorKind::Validation, where + ": attribute index below -1");
    if (!seen.insert(row.id).second)
      fail(ErrorKind::Validation, where + ": duplicate id '" + row.id + "'");
    table.rows.push_back(std::move(row));
  }
  if (!header_seen) fail(ErrorKind::Schema, origin + ": empty sample table");
  return table;
}

std::string format_sample_table(const SampleTable& table) {
  std::string out(kSampleTableHeader);
  out += '\n';
  for (const auto& r : table.rows) {
    out += r.id;
    out += ',' + std::to_string(r.y) + ',' + std::to_string(r.s_true) + ',' +
           to_string(r.split) + ',' + std::to_string(r.s_pseudo) + '\n';
  }
  return out;
}

SampleTable read_sample_table(const std::filesystem::path& path) {
  return parse_sample_table(read_file(path), path.string());
}

void write_sample_table(const SampleTable& table, const std::filesystem::path& path) {
  write_file(path, format_sample_table(table));
}

PromptBank read_prompt_bank(const std::filesystem::path& dir) {
  auto class_emb = read_embeddings(dir / "class.emb");
  auto attr_emb = read_embeddings(dir / "attr.emb");
  std::vector<PromptEntry> manifest;
  const auto manifest_path = dir / "manifest.json";
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(manifest_path));
    for (const auto& item : doc.at("entries")) {
      PromptEntry entry;
      const auto role = item.at("role").get<std::string>();
      if (role == "class")
        entry.role = PromptRole::Class;
      else if (role == "attribute")
        entry.role = PromptRole::Attribute;
      else
        fail(ErrorKind::Schema, manifest_path.string() + ": unknown role '" + role + "'");
      entry.index = item.at("index").get<std::size_t>();
      entry.text = item.at("text").get<std::string>();
      manifest.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Schema, manifest_path.string() + ": " + e.what());
  }
  return PromptBank{std::move(class_emb), std::move(attr_emb), std::move(manifest)};
}

void write_prompt_bank(const PromptBank& bank, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_embeddings(bank.class_embeddings, dir / "class.emb");
  write_embeddings(bank.attr_embeddings, dir / "attr.emb");
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : bank.manifest) {
    entries.push_back({{"role", e.role == PromptRole::Class ? "class" : "attribute"},
                       {"index", e.index},
                       {"text", e.text}});
  }
  write_file(dir / "manifest.json", nlohmann::json{{"entries", entries}}.dump(2) + "\n");
}

DatasetBundle read_bundle(const std::filesystem::path& dir) {
  return DatasetBundle{read_embeddings(dir / "images.emb"),
                       read_sample_table(dir / "samples.csv"),
                       read_prompt_bank(dir / "prompts")};
}

void write_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_embeddings(bundle.images, dir / "images.emb");
  write_sample_table(bundle.samples, dir / "samples.csv");
  write_prompt_bank(bundle.prompts, dir / "prompts");
}

ValidationReport validate_bundle(const DatasetBundle& bundle) {
  ValidationReport report;
  auto add = [&](std::string s) { report.findings.push_back(std::move(s)); };

  const auto& images = bundle.images;
  const auto& samples = bundle.samples;
  const auto& prompts = bundle.prompts;
  const std::size_t K = prompts.num_classes();
  const std::size_t S = prompts.num_attrs();

  if (samples.size() != images.rows())
    add("sample count mismatch: samples has " + std::to_string(samples.size()) +
        " rows, images has n=" + std::to_string(images.rows()));
  if (K < 2) add("prompt bank needs at least 2 classes (K=" + std::to_string(K) + ")");
  if (S < 2) add("prompt bank needs at least 2 attributes (|S|=" + std::to_string(S) + ")");
  if (prompts.class_embeddings.cols() != images.cols())
    add("dimension mismatch: class prompts d=" +
        std::to_string(prompts.class_embeddings.cols()) + ", images d=" +
        std::to_string(images.cols()));
  if (prompts.attr_embeddings.cols() != images.cols())
    add("dimension mismatch: attribute prompts d=" +
        std::to_string(prompts.attr_embeddings.cols()) + ", images d=" +
        std::to_string(images.cols()));

  std::unordered_set<std::string> ids;
  std::size_t bad_y = 0, bad_s_true = 0, bad_s_pseudo = 0, dup = 0;
  for (const auto& r : samples.rows) {
    if (!ids.insert(r.id).second) ++dup;
    if (r.y < 0 || static_cast<std::size_t>(r.y) >= K) ++bad_y;
    if (r.s_true < kUnknownAttribute || (r.s_true >= 0 && static_cast<std::size_t>(r.s_true) >= S))
      ++bad_s_true;
    if (r.s_pseudo < kUnknownAttribute ||
        (r.s_pseudo >= 0 && static_cast<std::size_t>(r.s_pseudo) >= S))
      ++bad_s_pseudo;
  }
  if (dup) add(std::to_string(dup) + " duplicate sample id(s)");
  if (bad_y) add(std::to_string(bad_y) + " row(s) with y outside [0," + std::to_string(K) + ")");
  if (bad_s_true)
    add(std::to_string(bad_s_true) + " row(s) with s_true outside [-1," + std::to_string(S) + ")");
  if (bad_s_pseudo)
    add(std::to_string(bad_s_pseudo) + " row(s) with s_pseudo outside [-1," +
        std::to_string(S) + ")");

  std::vector<int> class_cover(K, 0), attr_cover(S, 0);
  for (const auto& e : prompts.manifest) {
    auto& cover = e.role == PromptRole::Class ? class_cover : attr_cover;
    if (e.index >= cover.size()) {
      add(std::string("manifest entry for missing ") +
          (e.role == PromptRole::Class ? "class" : "attribute") + " row " +
          std::to_string(e.index));
      continue;
    }
    ++cover[e.index];
  }
  for (std::size_t i = 0; i < K; ++i)
    if (class_cover[i] != 1)
      add("manifest covers class row " + std::to_string(i) + " " +
          std::to_string(class_cover[i]) + " times");
  for (std::size_t i = 0; i < S; ++i)
    if (attr_cover[i] != 1)
      add("manifest covers attribute row " + std::to_string(i) + " " +
          std::to_string(attr_cover[i]) + " times");
  return report;
}

}  // namespace grouprobe
