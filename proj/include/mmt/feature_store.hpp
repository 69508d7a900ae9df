#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mmt/common.hpp"

namespace mmt {

inline constexpr Eigen::Index kGridChannels = 1024;
inline constexpr Eigen::Index kGridSide = 14;
inline constexpr Eigen::Index kGridPositions = kGridSide * kGridSide;  // 196
inline constexpr Eigen::Index kPooledDim = 2048;

/// Channel-major grid: row c holds channel c over the 14x14 positions in
/// (row, column) order, which is also the on-disk order.
using GridFeatures = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using PooledFeatures = Eigen::VectorXf;

struct VisualFeatures {
  GridFeatures grid;      // 1024 x 196
  PooledFeatures pooled;  // 2048

  /// Throws ShapeError on a wrong shape, Error on non-finite values.
  void validate() const;
};

enum class GenderLabel { male, female };

/// Synthetic stand-in for the CNN extractor. pooled[0] and every grid
/// position of channel 0 carry +1 (male) or -1 (female); Gaussian noise with
/// standard deviation `noise_sigma` is added to every coordinate, pooled
/// first, then the grid in storage order.
VisualFeatures synth_features(GenderLabel label, double noise_sigma, Rng& rng);

/// Read-only access used by training and evaluation.
class FeatureSource {
 public:
  virtual ~FeatureSource() = default;
  /// Throws NotFoundError naming the id.
  virtual std::shared_ptr<const VisualFeatures> get(const std::string& image_id) const = 0;
  virtual bool contains(const std::string& image_id) const = 0;
};

class InMemoryFeatures : public FeatureSource {
 public:
  void put(const std::string& image_id, VisualFeatures features);
  std::shared_ptr<const VisualFeatures> get(const std::string& image_id) const override;
  bool contains(const std::string& image_id) const override { return items_.count(image_id) > 0; }
  std::size_t size() const { return items_.size(); }

 private:
  std::map<std::string, std::shared_ptr<const VisualFeatures>> items_;
};

struct StoreValidation {
  std::vector<std::string> missing;           // required ids absent from the manifest
  std::vector<std::string> integrity_errors;  // one message per bad record
  std::vector<std::string> orphan_files;      // feature files not in the manifest

  bool ok() const { return missing.empty() && integrity_errors.empty() && orphan_files.empty(); }
};

/// Directory-backed store:
///   <root>/manifest.json              {"version", "grid_shape", "pooled_shape", "entries"}
///   <root>/features/<name>.f32        raw little-endian float32, grid then pooled
/// Each manifest entry records the file name, byte length and an FNV-1a 64
/// checksum. Manifest rewrites go through a temporary file and a rename.
class FeatureStore : public FeatureSource {
 public:
  explicit FeatureStore(std::filesystem::path root);

  void store(const std::string& image_id, const VisualFeatures& features);
  VisualFeatures load(const std::string& image_id) const;

  std::shared_ptr<const VisualFeatures> get(const std::string& image_id) const override;
  bool contains(const std::string& image_id) const override;

  std::vector<std::string> ids() const;
  std::size_t size() const;
  const std::filesystem::path& root() const { return root_; }

  StoreValidation validate(const std::set<std::string>& required) const;

  static constexpr std::size_t kRecordBytes =
      sizeof(float) * static_cast<std::size_t>(kGridChannels * kGridPositions + kPooledDim);

 private:
  struct Entry {
    std::string file;
    std::size_t bytes = 0;
    std::string checksum;
  };

  void load_manifest();
  void write_manifest() const;
  std::filesystem::path record_path(const Entry& e) const { return root_ / "features" / e.file; }

  std::filesystem::path root_;
  std::map<std::string, Entry> entries_;
  mutable std::mutex mutex_;
};

void store_features(const std::filesystem::path& store_path, const std::string& image_id,
                    const VisualFeatures& features);
VisualFeatures load_features(const std::filesystem::path& store_path, const std::string& image_id);

}  // namespace mmt
