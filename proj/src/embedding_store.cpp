#include "gcp/embedding_store.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "gcp/error.hpp"

namespace gcp {

std::string_view category_name(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::kUsage: return "usage";
    case ErrorCategory::kConfig: return "config";
    case ErrorCategory::kIo: return "io";
    case ErrorCategory::kFormat: return "format";
    case ErrorCategory::kDimensionMismatch: return "dimension_mismatch";
    case ErrorCategory::kNonFinite: return "non_finite";
    case ErrorCategory::kMissingColumn: return "missing_column";
    case ErrorCategory::kEmptyInput: return "empty_input";
    case ErrorCategory::kDuplicateId: return "duplicate_id";
    case ErrorCategory::kUnknownClass: return "unknown_class";
    case ErrorCategory::kUnknownCamera: return "unknown_camera";
    case ErrorCategory::kNumeric: return "numeric";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// LabelMap

std::uint32_t LabelMap::intern(const std::string& label, std::vector<std::string>& labels,
                               std::unordered_map<std::string, std::uint32_t>& lookup) {
  auto it = lookup.find(label);
  if (it != lookup.end()) return it->second;
  const auto id = static_cast<std::uint32_t>(labels.size());
  labels.push_back(label);
  lookup.emplace(label, id);
  return id;
}

void LabelMap::ensure(std::uint32_t id, std::vector<std::string>& labels,
                      std::unordered_map<std::string, std::uint32_t>& lookup) {
  while (labels.size() <= id) {
    const auto next = static_cast<std::uint32_t>(labels.size());
    std::string name = std::to_string(next);
    lookup.emplace(name, next);  // keeps an existing mapping on collision
    labels.push_back(std::move(name));
  }
}

ClassId LabelMap::intern_class(const std::string& label) {
  return intern(label, class_labels_, class_lookup_);
}
CameraId LabelMap::intern_camera(const std::string& label) {
  return intern(label, camera_labels_, camera_lookup_);
}
void LabelMap::ensure_class(ClassId id) { ensure(id, class_labels_, class_lookup_); }
void LabelMap::ensure_camera(CameraId id) { ensure(id, camera_labels_, camera_lookup_); }

const std::string& LabelMap::class_label(ClassId id) const { return class_labels_.at(id); }
const std::string& LabelMap::camera_label(CameraId id) const { return camera_labels_.at(id); }

// ---------------------------------------------------------------------------
// EmbeddingSet

EmbeddingSet::EmbeddingSet(std::vector<EmbeddingRecord> records, LabelMap labels)
    : records_(std::move(records)), labels_(std::move(labels)) {
  if (records_.empty()) {
    throw Error(ErrorCategory::kEmptyInput, "embedding set has no records");
  }
  dim_ = records_.front().vector.size();
  if (dim_ == 0) {
    throw Error(ErrorCategory::kDimensionMismatch,
                "record '" + records_.front().id + "' has an empty vector");
  }
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    if (r.vector.size() != dim_) {
      throw Error(ErrorCategory::kDimensionMismatch,
                  "record '" + r.id + "' has dimension " + std::to_string(r.vector.size()) +
                      ", expected " + std::to_string(dim_));
    }
    for (double v : r.vector) {
      if (!std::isfinite(v)) {
        throw Error(ErrorCategory::kNonFinite, "record '" + r.id + "' has a non-finite value");
      }
    }
    if (!seen.insert(r.id).second) {
      throw Error(ErrorCategory::kDuplicateId, "duplicate record id '" + r.id + "'");
    }
    class_index_[r.class_id].push_back(i);
    camera_index_[{r.class_id, r.camera_id}].push_back(i);
    camera_count_ = std::max<std::size_t>(camera_count_, std::size_t{r.camera_id} + 1);
    labels_.ensure_class(r.class_id);
    labels_.ensure_camera(r.camera_id);
  }
  class_ids_.reserve(class_index_.size());
  for (const auto& [c, _] : class_index_) class_ids_.push_back(c);
}

std::size_t EmbeddingSet::class_size(ClassId c) const {
  auto it = class_index_.find(c);
  return it == class_index_.end() ? 0 : it->second.size();
}

const std::vector<std::size_t>& EmbeddingSet::class_indices(ClassId c) const {
  auto it = class_index_.find(c);
  if (it == class_index_.end()) {
    throw Error(ErrorCategory::kUnknownClass, "unknown class " + std::to_string(c));
  }
  return it->second;
}

const std::vector<std::size_t>& EmbeddingSet::camera_indices(ClassId c, CameraId cam) const {
  static const std::vector<std::size_t> kEmpty;
  auto it = camera_index_.find({c, cam});
  return it == camera_index_.end() ? kEmpty : it->second;
}

RecordView class_view(const EmbeddingSet& set, ClassId class_id) {
  RecordView out;
  for (std::size_t i : set.class_indices(class_id)) out.push_back(&set[i]);
  return out;
}

RecordView camera_filtered_view(const EmbeddingSet& set, ClassId class_id,
                                CameraId excluded_camera) {
  RecordView out;
  for (std::size_t i : set.class_indices(class_id)) {
    if (set[i].camera_id != excluded_camera) out.push_back(&set[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// File formats

FileFormat parse_file_format(const std::string& name) {
  if (name == "csv") return FileFormat::kCsv;
  if (name == "binary" || name == "bin") return FileFormat::kBinary;
  throw Error(ErrorCategory::kUsage, "unknown file format '" + name + "'");
}

FileFormat format_from_extension(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  return (ext == ".bin" || ext == ".gcpe") ? FileFormat::kBinary : FileFormat::kCsv;
}

namespace {

constexpr std::array<char, 4> kMagic = {'G', 'C', 'P', 'E'};
constexpr std::uint32_t kBinaryVersion = 1;

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  return s;
}

std::string where(std::size_t line_no, std::string_view id) {
  return "line " + std::to_string(line_no) + " (record '" + std::string(id) + "')";
}

EmbeddingSet load_csv(const std::filesystem::path& path, LabelMap& labels) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::kIo, "cannot open " + path.string());

  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) {
      have_header = true;
      break;
    }
  }
  if (!have_header) throw Error(ErrorCategory::kEmptyInput, path.string() + " is empty");

  const auto header = split_commas(trim(line));
  if (header.size() < 3 || trim(header[0]) != "id" || trim(header[1]) != "class" ||
      trim(header[2]) != "camera") {
    throw Error(ErrorCategory::kMissingColumn,
                path.string() + ": header must start with id,class,camera");
  }

  std::vector<EmbeddingRecord> records;
  std::size_t dim = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto fields = split_commas(body);
    const auto id = trim(fields[0]);
    if (fields.size() < 3 || trim(fields[1]).empty() || trim(fields[2]).empty()) {
      throw Error(ErrorCategory::kMissingColumn,
                  path.string() + ": " + where(line_no, id) + " lacks a class or camera value");
    }
    const std::size_t d = fields.size() - 3;
    if (records.empty()) {
      if (d == 0) {
        throw Error(ErrorCategory::kDimensionMismatch,
                    path.string() + ": " + where(line_no, id) + " has no feature columns");
      }
      dim = d;
    } else if (d != dim) {
      throw Error(ErrorCategory::kDimensionMismatch,
                  path.string() + ": " + where(line_no, id) + " has dimension " +
                      std::to_string(d) + ", expected " + std::to_string(dim));
    }
    EmbeddingRecord rec;
    rec.id = std::string(id);
    rec.vector.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
      const auto text = trim(fields[3 + j]);
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw Error(ErrorCategory::kFormat, path.string() + ": " + where(line_no, id) +
                                                " has unparsable value '" + std::string(text) +
                                                "'");
      }
      if (!std::isfinite(v)) {
        throw Error(ErrorCategory::kNonFinite,
                    path.string() + ": " + where(line_no, id) + " has a non-finite value");
      }
      rec.vector[j] = v;
    }
    rec.class_id = labels.intern_class(std::string(trim(fields[1])));
    rec.camera_id = labels.intern_camera(std::string(trim(fields[2])));
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw Error(ErrorCategory::kEmptyInput, path.string() + " has no records");
  return EmbeddingSet(std::move(records), labels);
}

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::filesystem::path& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw Error(ErrorCategory::kFormat, path.string() + ": truncated file");
  return value;
}

EmbeddingSet load_binary(const std::filesystem::path& path, LabelMap& labels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCategory::kIo, "cannot open " + path.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() == 0) throw Error(ErrorCategory::kEmptyInput, path.string() + " is empty");
  if (!in || magic != kMagic) {
    throw Error(ErrorCategory::kFormat, path.string() + ": bad magic, not a GCPE file");
  }
  const auto version = read_le<std::uint32_t>(in, path);
  if (version != kBinaryVersion) {
    throw Error(ErrorCategory::kFormat,
                path.string() + ": unsupported version " + std::to_string(version));
  }
  const auto count = read_le<std::uint32_t>(in, path);
  const auto dim = read_le<std::uint32_t>(in, path);
  if (count == 0) throw Error(ErrorCategory::kEmptyInput, path.string() + " has no records");
  std::vector<EmbeddingRecord> records(count);
  for (auto& rec : records) {
    const auto id_len = read_le<std::uint32_t>(in, path);
    rec.id.resize(id_len);
    in.read(rec.id.data(), id_len);
    rec.class_id = read_le<std::uint32_t>(in, path);
    rec.camera_id = read_le<std::uint32_t>(in, path);
    rec.vector.resize(dim);
    for (auto& v : rec.vector) v = read_le<double>(in, path);
  }
  for (const auto& rec : records) {
    labels.ensure_class(rec.class_id);
    labels.ensure_camera(rec.camera_id);
  }
  return EmbeddingSet(std::move(records), labels);
}

void save_csv(const EmbeddingSet& set, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCategory::kIo, "cannot write " + path.string());
  out << "id,class,camera";
  for (std::size_t j = 0; j < set.dim(); ++j) out << ",f" << j;
  out << '\n';
  std::array<char, 64> buf{};
  for (const auto& r : set.records()) {
    out << r.id << ',' << set.labels().class_label(r.class_id) << ','
        << set.labels().camera_label(r.camera_id);
    for (double v : r.vector) {
      auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v,
                                     std::chars_format::general, 17);
      out << ',' << std::string_view(buf.data(), static_cast<std::size_t>(ptr - buf.data()));
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorCategory::kIo, "write failed for " + path.string());
}

void save_binary(const EmbeddingSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCategory::kIo, "cannot write " + path.string());
  out.write(kMagic.data(), kMagic.size());
  write_le<std::uint32_t>(out, kBinaryVersion);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(set.size()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(set.dim()));
  for (const auto& r : set.records()) {
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.id.size()));
    out.write(r.id.data(), static_cast<std::streamsize>(r.id.size()));
    write_le<std::uint32_t>(out, r.class_id);
    write_le<std::uint32_t>(out, r.camera_id);
    for (double v : r.vector) write_le<double>(out, v);
  }
  if (!out) throw Error(ErrorCategory::kIo, "write failed for " + path.string());
}

}  // namespace

EmbeddingSet load_embedding_set(const std::filesystem::path& path, FileFormat format) {
  LabelMap labels;
  return load_embedding_set(path, format, labels);
}

EmbeddingSet load_embedding_set(const std::filesystem::path& path, FileFormat format,
                                LabelMap& labels) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCategory::kIo, "no such file: " + path.string());
  }
  return format == FileFormat::kCsv ? load_csv(path, labels) : load_binary(path, labels);
}

void save_embedding_set(const EmbeddingSet& set, const std::filesystem::path& path,
                        FileFormat format) {
  if (format == FileFormat::kCsv) {
    save_csv(set, path);
  } else {
    save_binary(set, path);
  }
}

// ---------------------------------------------------------------------------
// PrototypeSet

std::string selector_name(SelectorKind kind) {
  switch (kind) {
    case SelectorKind::kInstance: return "instance";
    case SelectorKind::kCentroid: return "centroid";
    case SelectorKind::kKCentroid: return "kcentroid";
    case SelectorKind::kFps: return "fps";
    case SelectorKind::kAlphaFps: return "alphafps";
    case SelectorKind::kGcp: return "gcp";
  }
  return "unknown";
}

SelectorKind parse_selector(const std::string& name) {
  for (auto kind : {SelectorKind::kInstance, SelectorKind::kCentroid, SelectorKind::kKCentroid,
                    SelectorKind::kFps, SelectorKind::kAlphaFps, SelectorKind::kGcp}) {
    if (selector_name(kind) == name) return kind;
  }
  if (name == "alpha_fps" || name == "alpha-fps") return SelectorKind::kAlphaFps;
  throw Error(ErrorCategory::kUsage, "unknown selector '" + name + "'");
}

std::size_t PrototypeSet::total_count() const {
  std::size_t n = 0;
  for (const auto& [_, protos] : per_class) n += protos.size();
  return n;
}

}  // namespace gcp
