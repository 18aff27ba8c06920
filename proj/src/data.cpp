#include "nlran/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "nlran/errors.hpp"
#include "nlran/random.hpp"

namespace nlran {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ClassLabel label) {
  switch (label) {
    case ClassLabel::CP: return "CP";
    case ClassLabel::NCP: return "NCP";
    case ClassLabel::Normal: return "Normal";
  }
  return "?";
}

ClassLabel parse_label(const std::string& name) {
  if (name == "CP") return ClassLabel::CP;
  if (name == "NCP") return ClassLabel::NCP;
  if (name == "Normal") return ClassLabel::Normal;
  throw DataError("unknown label '" + name + "' (expected CP|NCP|Normal)");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw DataError("unknown split '" + name + "' (expected train|val|test)");
}

void Volume::validate() const {
  if (voxels.rank() != 3) throw DataError(id + ": volume must be rank 3, got " + to_string(voxels.shape()));
  for (float v : voxels.values()) {
    if (!(v >= 0.0f && v <= 255.0f)) throw DataError(id + ": voxel value outside [0,255]");
  }
  if (mask) {
    if (mask->shape() != voxels.shape()) throw DataError(id + ": mask shape differs from volume");
    for (float m : mask->values()) {
      if (m != 0.0f && m != 1.0f) throw DataError(id + ": mask must be strictly {0,1}");
    }
  }
}

std::vector<std::size_t> slice_indices(std::size_t slices, std::size_t target) {
  if (slices == 0) throw DataError("resample_slices: volume has no slices");
  if (target == 0) throw DataError("resample_slices: target slice count must be positive");
  std::vector<std::size_t> idx(target);
  for (std::size_t i = 0; i < target; ++i) idx[i] = i * slices / target;
  return idx;
}

Tensor<float> resample_slices(const Tensor<float>& stack, std::size_t target) {
  if (stack.rank() != 3) throw DataError("resample_slices: expected an S x H x W stack");
  const std::size_t plane = stack.dim(1) * stack.dim(2);
  const auto idx = slice_indices(stack.dim(0), target);
  Tensor<float> out(Shape{target, stack.dim(1), stack.dim(2)});
  for (std::size_t i = 0; i < target; ++i) {
    std::copy_n(stack.data() + idx[i] * plane, plane, out.data() + i * plane);
  }
  return out;
}

Volume resample_slices(const Volume& v, std::size_t target) {
  Volume out = v;
  out.voxels = resample_slices(v.voxels, target);
  if (v.mask) out.mask = resample_slices(*v.mask, target);
  return out;
}

Tensor<float> center_crop(const Tensor<float>& stack, std::size_t height, std::size_t width) {
  if (stack.rank() != 3) throw DataError("center_crop: expected an S x H x W stack");
  const std::size_t S = stack.dim(0), H = stack.dim(1), W = stack.dim(2);
  if (H < height || W < width) {
    throw DataError("center_crop: slice " + std::to_string(H) + "x" + std::to_string(W) + " smaller than crop " +
                    std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t top = (H - height) / 2, left = (W - width) / 2;
  Tensor<float> out(Shape{S, height, width});
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t r = 0; r < height; ++r) {
      std::copy_n(stack.data() + (s * H + top + r) * W + left, width, out.data() + (s * height + r) * width);
    }
  }
  return out;
}

Volume center_crop(const Volume& v, std::size_t height, std::size_t width) {
  Volume out = v;
  out.voxels = center_crop(v.voxels, height, width);
  if (v.mask) out.mask = center_crop(*v.mask, height, width);
  return out;
}

Volume apply_mask(const Volume& v) {
  if (!v.mask) throw DataError(v.id + ": apply_mask needs a lung mask");
  if (v.mask->shape() != v.voxels.shape()) throw DataError(v.id + ": mask shape differs from volume");
  Volume out = v;
  for (std::size_t i = 0; i < out.voxels.size(); ++i) out.voxels[i] *= (*v.mask)[i];
  return out;
}

Volume preprocess(const Volume& v, const PreprocessConfig& cfg) {
  Volume out = (cfg.use_mask && v.mask) ? apply_mask(v) : v;
  out = center_crop(out, cfg.crop_height, cfg.crop_width);
  return resample_slices(out, cfg.target_slices);
}

Tensor<float> preprocess_geometry(const Tensor<float>& stack, const PreprocessConfig& cfg) {
  return resample_slices(center_crop(stack, cfg.crop_height, cfg.crop_width), cfg.target_slices);
}

// ---------------------------------------------------------------------------

Manifest::Manifest(std::vector<ManifestRecord> records, std::string base_dir)
    : records_(std::move(records)), base_dir_(std::move(base_dir)) {}

std::string Manifest::resolve(const std::string& path) const {
  fs::path p(path);
  if (p.is_absolute()) return p.string();
  return (fs::path(base_dir_) / p).string();
}

Manifest Manifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  std::vector<ManifestRecord> records;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  const auto base = fs::path(path).parent_path().string();
  Manifest m({}, base.empty() ? "." : base);
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ManifestRecord r;
    try {
      const auto j = json::parse(line);
      r.id = j.at("id").get<std::string>();
      r.path = j.at("path").get<std::string>();
      r.label = parse_label(j.at("label").get<std::string>());
      if (j.contains("mask_path") && !j["mask_path"].is_null()) r.mask_path = j["mask_path"].get<std::string>();
      if (j.contains("split") && !j["split"].is_null()) r.split = parse_split(j["split"].get<std::string>());
      if (j.contains("lesion_path") && !j["lesion_path"].is_null()) r.lesion_path = j["lesion_path"].get<std::string>();
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!ids.insert(r.id).second) throw DataError(path + ": duplicate scan id '" + r.id + "'");
    for (const auto* p : {&r.path, r.mask_path ? &*r.mask_path : nullptr, r.lesion_path ? &*r.lesion_path : nullptr}) {
      if (p && !fs::exists(m.resolve(*p))) throw DataError(path + ": missing file " + *p + " for scan " + r.id);
    }
    records.push_back(std::move(r));
  }
  m.records_ = std::move(records);
  return m;
}

void Manifest::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path);
  for (const auto& r : records_) {
    json j{{"id", r.id}, {"path", r.path}, {"label", to_string(r.label)}};
    if (r.mask_path) j["mask_path"] = *r.mask_path;
    if (r.split) j["split"] = to_string(*r.split);
    if (r.lesion_path) j["lesion_path"] = *r.lesion_path;
    out << j.dump() << '\n';
  }
}

const ManifestRecord* Manifest::find(const std::string& id) const {
  for (const auto& r : records_) {
    if (r.id == id) return &r;
  }
  return nullptr;
}

std::vector<ManifestRecord> Manifest::select(Split split) const {
  std::vector<ManifestRecord> out;
  for (const auto& r : records_) {
    if (r.split && *r.split == split) out.push_back(r);
  }
  return out;
}

std::vector<std::size_t> apportion(std::size_t total, const std::vector<std::size_t>& ratios) {
  std::size_t denom = 0;
  for (auto r : ratios) denom += r;
  if (denom == 0) throw ConfigError("split ratios must be positive");
  std::vector<std::size_t> counts(ratios.size());
  std::vector<std::pair<std::size_t, std::size_t>> remainders;  // (remainder numerator, index)
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    counts[i] = total * ratios[i] / denom;
    assigned += counts[i];
    remainders.emplace_back(total * ratios[i] % denom, i);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++counts[remainders[k].second];
  return counts;
}

Manifest split(const Manifest& manifest, const std::array<std::size_t, 3>& ratios, std::uint64_t seed,
               bool stratified) {
  for (auto r : ratios) {
    if (r == 0) throw ConfigError("split ratios must be positive");
  }
  const std::size_t n = manifest.size();
  if (n < ratios.size()) {
    throw DataError("split: " + std::to_string(n) + " records cannot fill " + std::to_string(ratios.size()) + " splits");
  }
  const std::vector<std::size_t> rv(ratios.begin(), ratios.end());
  const auto totals = apportion(n, rv);
  const std::size_t denom = ratios[0] + ratios[1] + ratios[2];

  // Groups in a fixed order: classes by label value, or one group.
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) {
    groups[stratified ? static_cast<int>(manifest.records()[i].label) : 0].push_back(i);
  }
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> members;
  for (auto& [label, idx] : groups) {
    rng.shuffle(idx);
    members.push_back(idx);
  }

  // Controlled rounding: floors first, then +1 to cells in order of largest
  // fractional part while both the class and the split still lack items.
  const std::size_t G = members.size();
  std::vector<std::array<std::size_t, 3>> cells(G);
  std::vector<std::size_t> class_need(G);
  std::array<std::size_t, 3> split_need = {totals[0], totals[1], totals[2]};
  struct Frac {
    std::size_t num, g, s;
  };
  std::vector<Frac> fracs;
  for (std::size_t g = 0; g < G; ++g) {
    const std::size_t ng = members[g].size();
    std::size_t used = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      cells[g][s] = ng * ratios[s] / denom;
      used += cells[g][s];
      split_need[s] -= std::min(split_need[s], cells[g][s]);
      fracs.push_back({ng * ratios[s] % denom, g, s});
    }
    class_need[g] = ng - used;
  }
  std::stable_sort(fracs.begin(), fracs.end(), [](const Frac& a, const Frac& b) { return a.num > b.num; });
  auto place = [&](std::size_t g, std::size_t s) {
    ++cells[g][s];
    --class_need[g];
    --split_need[s];
  };
  for (const auto& f : fracs) {
    if (class_need[f.g] > 0 && split_need[f.s] > 0) place(f.g, f.s);
  }
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t s = 0; s < 3 && class_need[g] > 0; ++s) {
      while (class_need[g] > 0 && split_need[s] > 0) place(g, s);
    }
  }

  Manifest out = manifest;
  constexpr Split order[3] = {Split::Train, Split::Val, Split::Test};
  for (std::size_t g = 0; g < G; ++g) {
    std::size_t pos = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t k = 0; k < cells[g][s]; ++k) out.records()[members[g][pos++]].split = order[s];
    }
  }
  return out;
}

Volume load_volume(const Manifest& manifest, const ManifestRecord& record) {
  Volume v;
  v.id = record.id;
  v.label = record.label;
  try {
    v.voxels = load_tensor<float>(manifest.resolve(record.path));
    if (record.mask_path) v.mask = load_tensor<float>(manifest.resolve(*record.mask_path));
  } catch (const FormatError& e) {
    throw DataError(record.id + ": " + e.what());
  }
  v.validate();
  return v;
}

void save_volume(const std::string& path, const Tensor<float>& voxels) {
  if (voxels.rank() != 3) throw DataError("volume files hold rank-3 tensors");
  save_tensor(path, voxels);
}

Sample to_sample(const Volume& v) {
  Sample s;
  s.id = v.id;
  s.label = static_cast<int>(v.label);
  Tensor<float> input(Shape{1, v.slices(), v.height(), v.width()});
  for (std::size_t i = 0; i < input.size(); ++i) input[i] = v.voxels[i] / 255.0f;
  s.input = std::move(input);
  return s;
}

std::vector<Sample> load_samples(const Manifest& manifest, Split split) {
  std::vector<Sample> out;
  for (const auto& r : manifest.select(split)) out.push_back(to_sample(load_volume(manifest, r)));
  return out;
}

}  // namespace nlran
