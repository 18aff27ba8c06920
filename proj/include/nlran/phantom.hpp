#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nlran/data.hpp"

namespace nlran {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct LesionRule {
  std::array<int, 2> count{0, 0};
  Range radius;           // in-plane radius in voxels
  float intensity = 0.0f;
  Range radial_position;  // normalised distance of the centre from the lung centre
};

/// Desk-scale surrogate for chest CT: body ellipse, two dark lungs, bright
/// vessel streaks in every class, and class-specific lesions.
///   Normal: no lesions.
///   CP:     a few large bright ellipsoids.
///   NCP:    many small, lower-contrast peripheral blobs.
struct PhantomSpec {
  std::size_t count = 300;
  std::array<std::size_t, 2> slice_range{12, 24};  // raw S drawn uniformly
  std::size_t height = 36;
  std::size_t width = 36;
  /// Slice count after preprocessing; lesion z-radii are scaled by S / this.
  std::size_t reference_slices = 16;
  float body_intensity = 150.0f;
  float lung_intensity = 40.0f;
  float vessel_intensity = 120.0f;
  std::array<int, 2> vessel_count{3, 6};
  float texture_amplitude = 6.0f;
  double noise_level = 8.0;
  LesionRule cp{{1, 2}, {3.0, 4.5}, 215.0f, {0.0, 0.55}};
  LesionRule ncp{{4, 7}, {1.6, 2.4}, 105.0f, {0.45, 0.85}};
  int max_retries = 200;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Lesion {
  std::array<double, 3> center;  // z, y, x in voxels
  std::array<double, 3> radii;
};

struct Phantom {
  Volume volume;             // voxels + lung mask + label
  Tensor<float> lesion_mask; // {0,1}, same shape as the voxels
  std::vector<Lesion> lesions;
};

/// Rasterises lesions clipped to the lung mask; the oracle for lesion_mask.
Tensor<float> rasterize_lesions(const std::vector<Lesion>& lesions, const Tensor<float>& lung_mask);

/// Phantom i has label i % 3 (CP, NCP, Normal) and its own seeded stream.
Phantom generate_phantom(const PhantomSpec& spec, std::size_t index);
std::vector<Phantom> generate_phantoms(const PhantomSpec& spec);

/// Generated, preprocessed and split phantoms held in memory.
struct PhantomDataset {
  std::vector<Sample> train, val, test;
  /// Preprocessed lesion masks [D,H,W] keyed by sample id.
  std::map<std::string, Tensor<float>> lesion_masks;

  const std::vector<Sample>& part(Split s) const;
};

PhantomDataset make_phantom_dataset(const PhantomSpec& spec, const PreprocessConfig& preprocess,
                                    const std::array<std::size_t, 3>& ratios, std::uint64_t split_seed,
                                    bool stratified = true);

}  // namespace nlran
