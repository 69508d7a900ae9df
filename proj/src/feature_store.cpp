#include "mmt/feature_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <spdlog/spdlog.h>

#include "json.hpp"

namespace mmt {

namespace fs = std::filesystem;

namespace {

constexpr int kManifestVersion = 1;

std::string file_name_for(const std::string& id) {
  std::ostringstream out;
  for (unsigned char c : id) {
    if (std::isalnum(c) || c == '-' || c == '_') {
      out << c;
    } else {
      out << '%' << std::uppercase << std::hex << std::setw(2) << std::setfill('0') << int(c);
    }
  }
  return out.str() + ".f32";
}

std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

std::string encode_record(const VisualFeatures& f) {
  std::string bytes(FeatureStore::kRecordBytes, '\0');
  const auto grid_bytes = sizeof(float) * static_cast<std::size_t>(f.grid.size());
  std::memcpy(bytes.data(), f.grid.data(), grid_bytes);
  std::memcpy(bytes.data() + grid_bytes, f.pooled.data(), sizeof(float) * f.pooled.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes.size(); i += 4) {
      std::swap(bytes[i], bytes[i + 3]);
      std::swap(bytes[i + 1], bytes[i + 2]);
    }
  }
  return bytes;
}

VisualFeatures decode_record(std::string bytes) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes.size(); i += 4) {
      std::swap(bytes[i], bytes[i + 3]);
      std::swap(bytes[i + 1], bytes[i + 2]);
    }
  }
  VisualFeatures f;
  f.grid.resize(kGridChannels, kGridPositions);
  f.pooled.resize(kPooledDim);
  const auto grid_bytes = sizeof(float) * static_cast<std::size_t>(f.grid.size());
  std::memcpy(f.grid.data(), bytes.data(), grid_bytes);
  std::memcpy(f.pooled.data(), bytes.data() + grid_bytes, sizeof(float) * f.pooled.size());
  return f;
}

void write_atomically(const fs::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

void VisualFeatures::validate() const {
  if (grid.rows() != kGridChannels || grid.cols() != kGridPositions) {
    throw ShapeError("grid features must have shape (1024,14,14); got " + std::to_string(grid.rows()) +
                     " channels x " + std::to_string(grid.cols()) + " positions");
  }
  if (pooled.size() != kPooledDim) {
    throw ShapeError("pooled features must have length 2048; got " + std::to_string(pooled.size()));
  }
  if (!grid.allFinite() || !pooled.allFinite()) throw Error("visual features contain non-finite values");
}

VisualFeatures synth_features(GenderLabel label, double noise_sigma, Rng& rng) {
  if (noise_sigma < 0.0) throw Error("noise_sigma must be >= 0");
  const float signal = label == GenderLabel::male ? 1.0f : -1.0f;
  VisualFeatures f;
  f.pooled = PooledFeatures::Zero(kPooledDim);
  f.grid = GridFeatures::Zero(kGridChannels, kGridPositions);
  if (noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, noise_sigma);
    for (Eigen::Index i = 0; i < f.pooled.size(); ++i) f.pooled[i] = static_cast<float>(noise(rng));
    float* g = f.grid.data();
    for (Eigen::Index i = 0; i < f.grid.size(); ++i) g[i] = static_cast<float>(noise(rng));
  }
  f.pooled[0] += signal;
  f.grid.row(0).array() += signal;
  return f;
}

void InMemoryFeatures::put(const std::string& image_id, VisualFeatures features) {
  features.validate();
  items_[image_id] = std::make_shared<const VisualFeatures>(std::move(features));
}

std::shared_ptr<const VisualFeatures> InMemoryFeatures::get(const std::string& image_id) const {
  auto it = items_.find(image_id);
  if (it == items_.end()) throw NotFoundError("no features for image_id '" + image_id + "'");
  return it->second;
}

FeatureStore::FeatureStore(fs::path root) : root_(std::move(root)) {
  fs::create_directories(root_ / "features");
  load_manifest();
}

void FeatureStore::load_manifest() {
  const auto path = root_ / "manifest.json";
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  nlohmann::json j;
  try {
    in >> j;
    if (j.at("version").get<int>() != kManifestVersion) {
      throw IntegrityError("unsupported feature manifest version in " + path.string());
    }
    if (j.at("grid_shape") != nlohmann::json::array({kGridChannels, kGridSide, kGridSide}) ||
        j.at("pooled_shape") != nlohmann::json::array({kPooledDim})) {
      throw IntegrityError("feature manifest declares unexpected shapes: " + path.string());
    }
    for (const auto& [id, e] : j.at("entries").items()) {
      entries_[id] = {e.at("file").get<std::string>(), e.at("bytes").get<std::size_t>(),
                      e.at("fnv1a64").get<std::string>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("unreadable feature manifest " + path.string() + ": " + e.what());
  }
}

void FeatureStore::write_manifest() const {
  nlohmann::ordered_json j;
  j["version"] = kManifestVersion;
  j["grid_shape"] = {kGridChannels, kGridSide, kGridSide};
  j["pooled_shape"] = {kPooledDim};
  j["entries"] = nlohmann::ordered_json::object();
  for (const auto& [id, e] : entries_) {
    j["entries"][id] = {{"file", e.file}, {"bytes", e.bytes}, {"fnv1a64", e.checksum}};
  }
  write_atomically(root_ / "manifest.json", j.dump(1) + "\n");
}

void FeatureStore::store(const std::string& image_id, const VisualFeatures& features) {
  features.validate();
  std::lock_guard lock(mutex_);
  if (entries_.count(image_id)) spdlog::warn("feature store: overwriting image_id '{}'", image_id);
  const auto bytes = encode_record(features);
  Entry entry{file_name_for(image_id), bytes.size(), hex64(fnv1a64(bytes))};
  write_atomically(record_path(entry), bytes);
  entries_[image_id] = entry;
  write_manifest();
}

VisualFeatures FeatureStore::load(const std::string& image_id) const {
  Entry entry;
  {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(image_id);
    if (it == entries_.end()) {
      throw NotFoundError("image_id '" + image_id + "' not found in feature store " + root_.string());
    }
    entry = it->second;
  }
  const auto path = record_path(entry);
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IntegrityError("manifest lists '" + image_id + "' but " + path.string() + " is missing");
  }
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != kRecordBytes || entry.bytes != kRecordBytes) {
    throw IntegrityError("record for '" + image_id + "' has " + std::to_string(bytes.size()) +
                         " bytes; expected " + std::to_string(kRecordBytes));
  }
  if (hex64(fnv1a64(bytes)) != entry.checksum) {
    throw IntegrityError("checksum mismatch for '" + image_id + "'");
  }
  return decode_record(std::move(bytes));
}

std::shared_ptr<const VisualFeatures> FeatureStore::get(const std::string& image_id) const {
  return std::make_shared<const VisualFeatures>(load(image_id));
}

bool FeatureStore::contains(const std::string& image_id) const {
  std::lock_guard lock(mutex_);
  return entries_.count(image_id) > 0;
}

std::vector<std::string> FeatureStore::ids() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [id, e] : entries_) out.push_back(id);
  return out;
}

std::size_t FeatureStore::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

StoreValidation FeatureStore::validate(const std::set<std::string>& required) const {
  StoreValidation report;
  std::set<std::string> known_files;
  for (const auto& id : ids()) {
    {
      std::lock_guard lock(mutex_);
      known_files.insert(entries_.at(id).file);
    }
    try {
      load(id);
    } catch (const Error& e) {
      report.integrity_errors.push_back(e.what());
    }
  }
  for (const auto& id : required) {
    if (!contains(id)) report.missing.push_back(id);
  }
  for (const auto& item : fs::directory_iterator(root_ / "features")) {
    const auto name = item.path().filename().string();
    if (!known_files.count(name)) report.orphan_files.push_back(name);
  }
  std::sort(report.orphan_files.begin(), report.orphan_files.end());
  return report;
}

void store_features(const fs::path& store_path, const std::string& image_id,
                    const VisualFeatures& features) {
  FeatureStore(store_path).store(image_id, features);
}

VisualFeatures load_features(const fs::path& store_path, const std::string& image_id) {
  if (!fs::exists(store_path / "manifest.json")) {
    throw NotFoundError("no feature store at " + store_path.string());
  }
  return FeatureStore(store_path).load(image_id);
}

}  // namespace mmt
