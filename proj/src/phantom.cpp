#include "nlran/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "nlran/errors.hpp"
#include "nlran/random.hpp"

namespace nlran {

void PhantomSpec::validate() const {
  if (count == 0) throw ConfigError("phantom count must be positive");
  if (slice_range[0] == 0 || slice_range[0] > slice_range[1]) throw ConfigError("phantom slice_range invalid");
  if (height < 8 || width < 8) throw ConfigError("phantom slices must be at least 8x8");
  if (reference_slices == 0) throw ConfigError("phantom reference_slices must be positive");
  if (noise_level < 0.0) throw ConfigError("phantom noise_level must be non-negative");
  for (const auto* rule : {&cp, &ncp}) {
    if (rule->count[0] < 0 || rule->count[0] > rule->count[1]) throw ConfigError("phantom lesion count range invalid");
    if (rule->radius.lo <= 0.0 || rule->radius.lo > rule->radius.hi) throw ConfigError("phantom lesion radius invalid");
  }
}

namespace {

struct Lung {
  double cz, cy, cx, rz, ry, rx;
  double radial(double z, double y, double x) const {
    const double dz = (z - cz) / rz, dy = (y - cy) / ry, dx = (x - cx) / rx;
    return std::sqrt(dz * dz + dy * dy + dx * dx);
  }
};

bool inside(const Lesion& l, double z, double y, double x) {
  const double dz = (z - l.center[0]) / l.radii[0];
  const double dy = (y - l.center[1]) / l.radii[1];
  const double dx = (x - l.center[2]) / l.radii[2];
  return dz * dz + dy * dy + dx * dx <= 1.0;
}

std::uint64_t stream_seed(std::uint64_t seed, std::size_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Tensor<float> rasterize_lesions(const std::vector<Lesion>& lesions, const Tensor<float>& lung_mask) {
  Tensor<float> out(lung_mask.shape());
  const std::size_t S = lung_mask.dim(0), H = lung_mask.dim(1), W = lung_mask.dim(2);
  for (const auto& l : lesions) {
    for (std::size_t z = 0; z < S; ++z) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t i = (z * H + y) * W + x;
          if (lung_mask[i] > 0.0f && inside(l, double(z), double(y), double(x))) out[i] = 1.0f;
        }
      }
    }
  }
  return out;
}

Phantom generate_phantom(const PhantomSpec& spec, std::size_t index) {
  Rng rng(stream_seed(spec.seed, index));
  const auto label = static_cast<ClassLabel>(index % 3);
  const std::size_t S = static_cast<std::size_t>(
      rng.integer(static_cast<long long>(spec.slice_range[0]), static_cast<long long>(spec.slice_range[1])));
  const std::size_t H = spec.height, W = spec.width;
  const double zscale = double(S) / double(spec.reference_slices);

  const double cy = (H - 1) / 2.0 + rng.uniform(-0.5, 0.5);
  const double cx = (W - 1) / 2.0 + rng.uniform(-0.5, 0.5);
  const std::array<Lung, 2> lungs{
      Lung{(S - 1) / 2.0, cy, cx - W * 0.2, S * 0.42, H * 0.3, W * 0.16},
      Lung{(S - 1) / 2.0, cy, cx + W * 0.2, S * 0.42, H * 0.3, W * 0.16},
  };

  Tensor<float> voxels(Shape{S, H, W});
  Tensor<float> lung(Shape{S, H, W});
  std::vector<std::size_t> lung_voxels;
  for (std::size_t z = 0; z < S; ++z) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t i = (z * H + y) * W + x;
        const double by = (y - cy) / (H * 0.45), bx = (x - cx) / (W * 0.47);
        if (by * by + bx * bx <= 1.0) voxels[i] = spec.body_intensity;
        for (const auto& l : lungs) {
          if (l.radial(double(z), double(y), double(x)) <= 1.0) {
            lung[i] = 1.0f;
            voxels[i] = spec.lung_intensity;
          }
        }
        if (lung[i] > 0.0f) lung_voxels.push_back(i);
      }
    }
  }
  if (lung_voxels.empty()) throw DataError("phantom " + std::to_string(index) + ": empty lung field");

  auto coords = [&](std::size_t i) {
    return std::array<double, 3>{double(i / (H * W)), double((i / W) % H), double(i % W)};
  };

  // Vessel streaks: short segments of radius ~1 inside the lungs.
  const int vessels = static_cast<int>(rng.integer(spec.vessel_count[0], spec.vessel_count[1]));
  for (int v = 0; v < vessels; ++v) {
    const auto a = coords(lung_voxels[rng.below(lung_voxels.size())]);
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double len = rng.uniform(5.0, 10.0);
    const std::array<double, 3> dir{rng.uniform(-0.3, 0.3), std::sin(theta), std::cos(theta)};
    for (double t = 0.0; t <= len; t += 0.25) {
      const double pz = a[0] + dir[0] * t, py = a[1] + dir[1] * t, px = a[2] + dir[2] * t;
      for (int dz = -1; dz <= 1; ++dz) {
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const long z = std::lround(pz) + dz, y = std::lround(py) + dy, x = std::lround(px) + dx;
            if (z < 0 || y < 0 || x < 0 || z >= long(S) || y >= long(H) || x >= long(W)) continue;
            const double d2 = (z - pz) * (z - pz) + (y - py) * (y - py) + (x - px) * (x - px);
            const std::size_t i = (std::size_t(z) * H + std::size_t(y)) * W + std::size_t(x);
            if (d2 <= 0.8 && lung[i] > 0.0f) voxels[i] = spec.vessel_intensity;
          }
        }
      }
    }
  }

  std::vector<Lesion> lesions;
  const LesionRule* rule = label == ClassLabel::CP ? &spec.cp : label == ClassLabel::NCP ? &spec.ncp : nullptr;
  if (rule) {
    const int count = static_cast<int>(rng.integer(rule->count[0], rule->count[1]));
    for (int k = 0; k < count; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
        const auto c = coords(lung_voxels[rng.below(lung_voxels.size())]);
        const auto& l = lungs[c[2] < cx ? 0 : 1];
        const double r = l.radial(c[0], c[1], c[2]);
        if (r < rule->radial_position.lo || r > rule->radial_position.hi) continue;
        const double radius = rng.uniform(rule->radius.lo, rule->radius.hi);
        const Lesion candidate{c, {std::max(1.0, radius * zscale), radius, radius}};
        bool clear = true;
        for (const auto& other : lesions) {
          const double dz = (candidate.center[0] - other.center[0]) / zscale;
          const double dy = candidate.center[1] - other.center[1];
          const double dx = candidate.center[2] - other.center[2];
          if (std::sqrt(dz * dz + dy * dy + dx * dx) < candidate.radii[1] + other.radii[1] + 1.0) clear = false;
        }
        if (!clear) continue;
        lesions.push_back(candidate);
        placed = true;
      }
      if (!placed) {
        throw DataError("phantom " + std::to_string(index) + ": could not place lesion " + std::to_string(k) +
                        " after " + std::to_string(spec.max_retries) + " attempts");
      }
    }
  }
  Tensor<float> lesion_mask = rasterize_lesions(lesions, lung);
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    if (lesion_mask[i] > 0.0f) voxels[i] = rule->intensity;
  }

  // Low-frequency texture and noise inside the body, then 8-bit quantisation.
  const double p0 = rng.uniform(0.0, 2.0 * std::numbers::pi), p1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    const auto c = coords(i);
    double v = voxels[i];
    if (v > 0.0f) {
      v += spec.texture_amplitude * std::sin(c[1] * 0.35 + p0) * std::cos(c[2] * 0.3 + p1);
      if (spec.noise_level > 0.0) v += spec.noise_level * rng.normal();
    }
    voxels[i] = static_cast<float>(std::clamp(std::round(v), 0.0, 255.0));
  }

  Phantom p;
  char id[32];
  std::snprintf(id, sizeof id, "phantom_%04zu", index);
  p.volume.id = id;
  p.volume.voxels = std::move(voxels);
  p.volume.mask = std::move(lung);
  p.volume.label = label;
  p.lesion_mask = std::move(lesion_mask);
  p.lesions = std::move(lesions);
  return p;
}

std::vector<Phantom> generate_phantoms(const PhantomSpec& spec) {
  spec.validate();
  std::vector<Phantom> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) out.push_back(generate_phantom(spec, i));
  return out;
}

const std::vector<Sample>& PhantomDataset::part(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Val: return val;
    case Split::Test: return test;
  }
  throw InternalError("unknown split");
}

PhantomDataset make_phantom_dataset(const PhantomSpec& spec, const PreprocessConfig& preprocess,
                                    const std::array<std::size_t, 3>& ratios, std::uint64_t split_seed,
                                    bool stratified) {
  const auto phantoms = generate_phantoms(spec);
  std::vector<ManifestRecord> records;
  std::map<std::string, Sample> samples;
  PhantomDataset out;
  for (const auto& p : phantoms) {
    records.push_back({p.volume.id, p.volume.id, p.volume.label, std::nullopt, std::nullopt, std::nullopt});
    samples.emplace(p.volume.id, to_sample(nlran::preprocess(p.volume, preprocess)));
    out.lesion_masks.emplace(p.volume.id, preprocess_geometry(p.lesion_mask, preprocess));
  }
  const auto assigned = split(Manifest(std::move(records)), ratios, split_seed, stratified);
  for (const auto& r : assigned.records()) {
    auto& dst = *r.split == Split::Train ? out.train : *r.split == Split::Val ? out.val : out.test;
    dst.push_back(samples.at(r.id));
  }
  return out;
}

}  // namespace nlran
