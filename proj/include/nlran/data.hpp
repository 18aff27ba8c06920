#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nlran/tensor.hpp"

namespace nlran {

enum class ClassLabel : int { CP = 0, NCP = 1, Normal = 2 };
inline constexpr std::size_t kNumClasses = 3;

std::string to_string(ClassLabel label);
ClassLabel parse_label(const std::string& name);

enum class Split { Train, Val, Test };
std::string to_string(Split split);
Split parse_split(const std::string& name);

/// One CT scan: S x H x W voxels in [0, 255] with an optional {0,1} lung mask.
struct Volume {
  std::string id;
  Tensor<float> voxels;
  std::optional<Tensor<float>> mask;
  ClassLabel label = ClassLabel::Normal;

  std::size_t slices() const { return voxels.dim(0); }
  std::size_t height() const { return voxels.dim(1); }
  std::size_t width() const { return voxels.dim(2); }

  /// Throws DataError on rank, range or mask violations.
  void validate() const;
};

/// Interval sampling / duplication along the slice axis: output slice i is
/// input slice floor(i * S / target).
std::vector<std::size_t> slice_indices(std::size_t slices, std::size_t target);
Tensor<float> resample_slices(const Tensor<float>& stack, std::size_t target);
Volume resample_slices(const Volume& v, std::size_t target);

/// Fixed middle crop with top-left (floor((H-h)/2), floor((W-w)/2)).
Tensor<float> center_crop(const Tensor<float>& stack, std::size_t height, std::size_t width);
Volume center_crop(const Volume& v, std::size_t height, std::size_t width);

/// Zeroes voxels outside the lung mask.
Volume apply_mask(const Volume& v);

struct PreprocessConfig {
  std::size_t target_slices = 64;
  std::size_t crop_height = 160;
  std::size_t crop_width = 160;
  bool use_mask = true;
};

/// mask -> crop -> resample.
Volume preprocess(const Volume& v, const PreprocessConfig& cfg);
/// The geometric part only (crop -> resample), for ground-truth label maps.
Tensor<float> preprocess_geometry(const Tensor<float>& stack, const PreprocessConfig& cfg);

// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string id;
  std::string path;
  ClassLabel label = ClassLabel::Normal;
  std::optional<std::string> mask_path;
  std::optional<Split> split;
  /// Ground-truth lesion mask, written for synthetic phantoms.
  std::optional<std::string> lesion_path;
};

/// JSON-lines dataset index. Relative paths resolve against the directory
/// holding the manifest file.
class Manifest {
 public:
  Manifest() = default;
  explicit Manifest(std::vector<ManifestRecord> records, std::string base_dir = ".");

  /// Parses and checks uniqueness of ids and that every referenced file exists.
  static Manifest load(const std::string& path);
  void save(const std::string& path) const;

  const std::vector<ManifestRecord>& records() const noexcept { return records_; }
  std::vector<ManifestRecord>& records() noexcept { return records_; }
  const std::string& base_dir() const noexcept { return base_dir_; }
  std::string resolve(const std::string& path) const;
  std::size_t size() const noexcept { return records_.size(); }

  const ManifestRecord* find(const std::string& id) const;
  std::vector<ManifestRecord> select(Split split) const;

 private:
  std::vector<ManifestRecord> records_;
  std::string base_dir_ = ".";
};

/// Seeded stratified split. Split totals follow largest-remainder rounding
/// of n * ratio / sum(ratios); per-class counts are rounded so that they sum
/// to both their class size and those totals.
Manifest split(const Manifest& manifest, const std::array<std::size_t, 3>& ratios, std::uint64_t seed,
               bool stratified = true);

/// Largest-remainder apportionment of `total` items over `ratios`.
std::vector<std::size_t> apportion(std::size_t total, const std::vector<std::size_t>& ratios);

Volume load_volume(const Manifest& manifest, const ManifestRecord& record);
void save_volume(const std::string& path, const Tensor<float>& voxels);

/// Network-ready sample: [1, S, H, W] intensities scaled by 1/255.
struct Sample {
  std::string id;
  Tensor<float> input;
  int label = 0;
};

Sample to_sample(const Volume& v);
std::vector<Sample> load_samples(const Manifest& manifest, Split split);

}  // namespace nlran
