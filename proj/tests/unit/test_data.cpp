#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "nlran/errors.hpp"
#include "nlran/phantom.hpp"

using namespace nlran;
namespace fs = std::filesystem;

namespace {

Tensor<float> ramp_stack(std::size_t s, std::size_t h, std::size_t w) {
  Tensor<float> t({s, h, w});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = float(i % 251);
  return t;
}

Manifest synthetic_manifest(std::size_t n) {
  std::vector<ManifestRecord> records;
  for (std::size_t i = 0; i < n; ++i) {
    ManifestRecord r;
    r.id = "scan" + std::to_string(i);
    r.path = r.id + ".nlt";
    r.label = static_cast<ClassLabel>(i % 3);
    records.push_back(r);
  }
  return Manifest(records);
}

std::map<Split, std::vector<std::string>> ids_by_split(const Manifest& m) {
  std::map<Split, std::vector<std::string>> out;
  for (const auto& r : m.records()) out[*r.split].push_back(r.id);
  return out;
}

}  // namespace

TEST(Labels, ParseAndPrint) {
  EXPECT_EQ(parse_label("NCP"), ClassLabel::NCP);
  EXPECT_EQ(to_string(ClassLabel::Normal), "Normal");
  EXPECT_THROW(parse_label("covid"), DataError);
  EXPECT_EQ(parse_split("val"), Split::Val);
  EXPECT_THROW(parse_split("dev"), DataError);
}

TEST(Volume, Validation) {
  Volume v{"v", Tensor<float>({2, 2, 2}, 10.0f), std::nullopt, ClassLabel::CP};
  EXPECT_NO_THROW(v.validate());
  v.voxels[3] = 256.0f;
  EXPECT_THROW(v.validate(), DataError);
  v.voxels[3] = 0.0f;
  v.mask = Tensor<float>({2, 2, 2}, 0.5f);
  EXPECT_THROW(v.validate(), DataError);
  v.mask = Tensor<float>({2, 2, 1}, 1.0f);
  EXPECT_THROW(v.validate(), DataError);
  v.mask.reset();
  v.voxels = Tensor<float>({4, 4});
  EXPECT_THROW(v.validate(), DataError);
}

TEST(ResampleSlices, IndexFormula) {
  std::vector<std::size_t> identity(64);
  for (std::size_t i = 0; i < 64; ++i) identity[i] = i;
  EXPECT_EQ(slice_indices(64, 64), identity);
  const auto down = slice_indices(128, 64);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(down[i], 2 * i);
  const auto up = slice_indices(32, 64);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(up[i], i / 2);
  EXPECT_THROW(slice_indices(0, 64), DataError);
}

TEST(ResampleSlices, CopiesWholeSlicesAndIsIdempotent) {
  const auto stack = ramp_stack(7, 3, 4);
  const auto once = resample_slices(stack, 5);
  ASSERT_EQ(once.shape(), (Shape{5, 3, 4}));
  const auto idx = slice_indices(7, 5);
  for (std::size_t s = 0; s < 5; ++s)
    for (std::size_t p = 0; p < 12; ++p) EXPECT_EQ(once[s * 12 + p], stack[idx[s] * 12 + p]);
  EXPECT_EQ(resample_slices(once, 5), once);
}

TEST(CenterCrop, OffsetsAndErrors) {
  const auto stack = ramp_stack(2, 6, 6);
  EXPECT_EQ(center_crop(stack, 6, 6), stack);
  const auto c = center_crop(stack, 4, 4);
  EXPECT_EQ(c.at({1, 0, 0}), stack.at({1, 1, 1}));
  EXPECT_EQ(c.at({0, 3, 3}), stack.at({0, 4, 4}));
  const auto odd = center_crop(ramp_stack(1, 5, 7), 2, 2);
  EXPECT_EQ(odd.at({0, 0, 0}), ramp_stack(1, 5, 7).at({0, 1, 2}));
  EXPECT_THROW(center_crop(stack, 8, 4), DataError);
}

TEST(ApplyMask, Identities) {
  Volume v{"v", Tensor<float>({2, 2, 2}, 9.0f), Tensor<float>({2, 2, 2}, 1.0f), ClassLabel::CP};
  EXPECT_EQ(apply_mask(v).voxels, v.voxels);
  v.mask->fill(0.0f);
  const auto zeroed = apply_mask(v).voxels;
  for (float x : zeroed.values()) EXPECT_EQ(x, 0.0f);
  for (std::size_t i = 0; i < 8; ++i) (*v.mask)[i] = float((i + i / 2 + i / 4) % 2);
  const auto m = apply_mask(v).voxels;
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(m[i], (*v.mask)[i] > 0 ? 9.0f : 0.0f);
  v.mask.reset();
  EXPECT_THROW(apply_mask(v), DataError);
}

TEST(Preprocess, OutputShapeIndependentOfInput) {
  const PreprocessConfig cfg{16, 32, 32, true};
  for (auto [s, h, w] : std::vector<std::array<std::size_t, 3>>{{5, 32, 32}, {16, 40, 33}, {70, 36, 36}}) {
    Volume v{"v", ramp_stack(s, h, w), Tensor<float>({s, h, w}, 1.0f), ClassLabel::NCP};
    const auto out = preprocess(v, cfg);
    EXPECT_EQ(out.voxels.shape(), (Shape{16, 32, 32}));
    EXPECT_EQ(preprocess_geometry(v.voxels, cfg).shape(), (Shape{16, 32, 32}));
  }
  const auto sample = to_sample(Volume{"v", Tensor<float>({2, 2, 2}, 255.0f), std::nullopt, ClassLabel::NCP});
  EXPECT_EQ(sample.input.shape(), (Shape{1, 2, 2, 2}));
  EXPECT_EQ(sample.input[0], 1.0f);
  EXPECT_EQ(sample.label, 1);
}

TEST(Split, ApportionmentExamples) {
  EXPECT_EQ(apportion(10, {8, 1, 1}), (std::vector<std::size_t>{8, 1, 1}));
  EXPECT_EQ(apportion(4079, {8, 1, 1}), (std::vector<std::size_t>{3263, 408, 408}));
  EXPECT_EQ(apportion(300, {8, 1, 1}), (std::vector<std::size_t>{240, 30, 30}));
}

TEST(Split, PreservesRecordsAndIsSeeded) {
  for (std::size_t n : {10u, 31u, 300u}) {
    const auto m = synthetic_manifest(n);
    const auto a = split(m, {8, 1, 1}, 7), b = split(m, {8, 1, 1}, 7);
    EXPECT_EQ(ids_by_split(a), ids_by_split(b));
    std::multiset<std::string> all;
    for (const auto& r : a.records()) {
      ASSERT_TRUE(r.split.has_value());
      all.insert(r.id);
    }
    std::multiset<std::string> original;
    for (const auto& r : m.records()) original.insert(r.id);
    EXPECT_EQ(all, original);
    const auto sizes = apportion(n, {8, 1, 1});
    auto parts = ids_by_split(a);
    EXPECT_EQ(parts[Split::Train].size(), sizes[0]);
    EXPECT_EQ(parts[Split::Val].size(), sizes[1]);
    EXPECT_EQ(parts[Split::Test].size(), sizes[2]);
  }
  const auto m = synthetic_manifest(300);
  EXPECT_NE(ids_by_split(split(m, {8, 1, 1}, 7)), ids_by_split(split(m, {8, 1, 1}, 8)));
  EXPECT_THROW(split(synthetic_manifest(2), {8, 1, 1}, 7), DataError);
}

TEST(Split, StratifiedClassBalance) {
  const auto parts = split(synthetic_manifest(300), {8, 1, 1}, 3);
  std::map<std::pair<Split, ClassLabel>, int> counts;
  for (const auto& r : parts.records()) counts[{*r.split, r.label}]++;
  for (auto label : {ClassLabel::CP, ClassLabel::NCP, ClassLabel::Normal}) {
    EXPECT_EQ((counts[{Split::Train, label}]), 80);
    EXPECT_EQ((counts[{Split::Val, label}]), 10);
    EXPECT_EQ((counts[{Split::Test, label}]), 10);
  }
}

TEST(Manifest, SaveLoadAndChecks) {
  const auto dir = fs::temp_directory_path() / "nlran_manifest_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_volume((dir / "a.nlt").string(), Tensor<float>({2, 3, 3}, 4.0f));
  ManifestRecord r;
  r.id = "a";
  r.path = "a.nlt";
  r.label = ClassLabel::CP;
  r.split = Split::Test;
  Manifest(std::vector<ManifestRecord>{r}, dir.string()).save((dir / "m.jsonl").string());
  const auto m = Manifest::load((dir / "m.jsonl").string());
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m.records()[0].split, Split::Test);
  EXPECT_EQ(load_volume(m, m.records()[0]).voxels.shape(), (Shape{2, 3, 3}));
  EXPECT_EQ(m.select(Split::Test).size(), 1u);
  EXPECT_EQ(m.select(Split::Train).size(), 0u);

  auto dup = r;
  Manifest(std::vector<ManifestRecord>{r, dup}, dir.string()).save((dir / "dup.jsonl").string());
  EXPECT_THROW(Manifest::load((dir / "dup.jsonl").string()), DataError);
  auto missing = r;
  missing.path = "nope.nlt";
  Manifest(std::vector<ManifestRecord>{missing}, dir.string()).save((dir / "miss.jsonl").string());
  EXPECT_THROW(Manifest::load((dir / "miss.jsonl").string()), DataError);
}

TEST(Phantom, DeterministicAndBalanced) {
  PhantomSpec spec;
  spec.count = 12;
  const auto a = generate_phantoms(spec), b = generate_phantoms(spec);
  std::array<int, 3> per_class{};
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].volume.voxels, b[i].volume.voxels);
    EXPECT_EQ(a[i].lesion_mask, b[i].lesion_mask);
    EXPECT_NO_THROW(a[i].volume.validate());
    per_class[int(a[i].volume.label)]++;
  }
  // Majority-class predictor accuracy on a balanced set.
  EXPECT_LE(*std::max_element(per_class.begin(), per_class.end()) / double(a.size()), 0.4);
  spec.seed = 2;
  EXPECT_FALSE(generate_phantom(spec, 0).volume.voxels == a[0].volume.voxels);
}

TEST(Phantom, LesionMaskMatchesRasterizedLesions) {
  PhantomSpec spec;
  for (std::size_t i = 0; i < 9; ++i) {
    const auto p = generate_phantom(spec, i);
    EXPECT_EQ(p.lesion_mask, rasterize_lesions(p.lesions, *p.volume.mask));
    double lesion_voxels = 0;
    for (float m : p.lesion_mask.values()) lesion_voxels += m;
    if (p.volume.label == ClassLabel::Normal) {
      EXPECT_TRUE(p.lesions.empty());
      EXPECT_EQ(lesion_voxels, 0.0);
    } else {
      EXPECT_GT(lesion_voxels, 0.0);
    }
  }
}

TEST(Phantom, NoiselessClassesFollowBlobIntensities) {
  PhantomSpec spec;
  spec.noise_level = 0.0;
  const float tex = spec.texture_amplitude;
  for (std::size_t i = 0; i < 30; ++i) {
    const auto p = generate_phantom(spec, i);
    bool bright = false, faint = false;
    for (std::size_t k = 0; k < p.volume.voxels.size(); ++k) {
      if ((*p.volume.mask)[k] == 0.0f) continue;
      const float v = p.volume.voxels[k];
      bright = bright || v >= spec.cp.intensity - tex - 1;
      faint = faint || std::abs(v - spec.ncp.intensity) <= tex + 1;
    }
    const auto predicted = bright ? ClassLabel::CP : faint ? ClassLabel::NCP : ClassLabel::Normal;
    EXPECT_EQ(predicted, p.volume.label) << p.volume.id;
  }
}

TEST(Phantom, InMemoryDatasetSplits) {
  PhantomSpec spec;
  spec.count = 30;
  const auto ds = make_phantom_dataset(spec, {16, 32, 32, true}, {8, 1, 1}, 7);
  EXPECT_EQ(ds.train.size(), 24u);
  EXPECT_EQ(ds.val.size(), 3u);
  EXPECT_EQ(ds.test.size(), 3u);
  EXPECT_EQ(ds.lesion_masks.size(), 30u);
  for (const auto& s : ds.test) {
    EXPECT_EQ(s.input.shape(), (Shape{1, 16, 32, 32}));
    EXPECT_EQ(ds.lesion_masks.at(s.id).shape(), (Shape{16, 32, 32}));
  }
  spec.count = 0;
  EXPECT_THROW(spec.validate(), ConfigError);
}
