#include "nlran/explain.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nlran/metrics.hpp"

namespace nlran {

namespace fs = std::filesystem;

std::string to_string(HeatSource s) { return s == HeatSource::Attention ? "attention" : "cam"; }

HeatFormat parse_heat_format(const std::string& name) {
  if (name == "pgm-stack" || name == "pgm") return HeatFormat::PgmStack;
  if (name == "csv") return HeatFormat::CSV;
  throw ConfigError("unknown heat-map format '" + name + "' (expected pgm-stack or csv)");
}

Tensor<double> min_max_normalize(const Tensor<double>& x) {
  const auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
  Tensor<double> out(x.shape());
  if (*hi == *lo) {
    out.fill(0.5);
    return out;
  }
  const double span = *hi - *lo;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - *lo) / span;
  return out;
}

namespace {

Extent3 spatial(const Tensor<double>& x) {
  if (x.rank() != 4) throw RankError("expected a [C,D,H,W] activation, got " + to_string(x.shape()));
  return {x.dim(1), x.dim(2), x.dim(3)};
}

Tensor<double> resize_and_normalize(const Tensor<double>& map, const Extent3& extents) {
  Tensor<double> resized = map.shape() == Shape{extents[0], extents[1], extents[2]}
                               ? map
                               : resize_trilinear(map.reshaped({1, map.dim(0), map.dim(1), map.dim(2)}), extents)
                                     .reshaped({extents[0], extents[1], extents[2]});
  return min_max_normalize(resized);
}

template <typename T>
Tensor<T> as_batch(const Tensor<T>& volume) {
  if (volume.rank() == 5) {
    if (volume.dim(0) != 1) throw ShapeError("explain expects a single volume");
    return volume;
  }
  if (volume.rank() == 4) return volume.reshaped({1, volume.dim(0), volume.dim(1), volume.dim(2), volume.dim(3)});
  if (volume.rank() == 3) return volume.reshaped({1, 1, volume.dim(0), volume.dim(1), volume.dim(2)});
  throw RankError("explain expects [D,H,W], [C,D,H,W] or [1,C,D,H,W], got " + to_string(volume.shape()));
}

/// Drops the batch axis of a [1,C,d,h,w] value and widens to double.
template <typename T>
Tensor<double> first_sample(const Tensor<T>& x) {
  return x.template cast<double>().reshaped({x.dim(1), x.dim(2), x.dim(3), x.dim(4)});
}

}  // namespace

Tensor<double> activation_heatmap(const Tensor<double>& activation, const Extent3& extents,
                                  ChannelReduction reduction) {
  const auto [d, h, w] = spatial(activation);
  const std::size_t c = activation.dim(0), plane = d * h * w;
  Tensor<double> reduced(Shape{d, h, w});
  for (std::size_t i = 0; i < plane; ++i) {
    double acc = reduction == ChannelReduction::Mean ? 0.0 : activation[i];
    for (std::size_t k = 0; k < c; ++k) {
      const double v = activation[k * plane + i];
      acc = reduction == ChannelReduction::Mean ? acc + v : std::max(acc, v);
    }
    reduced[i] = reduction == ChannelReduction::Mean ? acc / double(c) : acc;
  }
  return resize_and_normalize(reduced, extents);
}

Tensor<double> cam_from_features(const Tensor<double>& features, const std::vector<double>& weights,
                                 const Extent3& extents) {
  const auto [d, h, w] = spatial(features);
  const std::size_t c = features.dim(0), plane = d * h * w;
  if (weights.size() != c) throw ShapeError("cam: weight count does not match feature channels");
  Tensor<double> heat(Shape{d, h, w});
  for (std::size_t i = 0; i < plane; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < c; ++k) acc += weights[k] * features[k * plane + i];
    heat[i] = std::max(acc, 0.0);
  }
  return resize_and_normalize(heat, extents);
}

template <typename T>
Explanation<T> explain(const Model<T>& model, const Tensor<T>& volume, bool want_attention, bool want_cam,
                       int cam_target, const std::string& scan_id) {
  const auto& cfg = model.config();
  if (want_attention && model.attention_module_count() == 0) {
    throw CapabilityError("attention heat map needs a model with at least one attention module");
  }
  if (want_cam && (cam_target < 0 || static_cast<std::size_t>(cam_target) >= cfg.num_classes)) {
    throw ConfigError("cam target class " + std::to_string(cam_target) + " outside [0," +
                      std::to_string(cfg.num_classes) + ")");
  }
  Tape<T> tape;
  tape.set_grad_enabled(false);
  ForwardCapture<T> capture;
  auto logits = model.forward(tape, tape.constant(as_batch(volume)), &capture);

  Explanation<T> out;
  out.logits = logits.value();
  if (want_attention) {
    const auto mask = first_sample(capture.attention_masks.front().value());
    out.attention = HeatMap{activation_heatmap(mask, cfg.input_shape), HeatSource::Attention, scan_id, -1};
  }
  if (want_cam) {
    const auto features = first_sample(capture.features.value());
    const auto& w = model.classifier().weight().value;  // [K,F]
    std::vector<double> row(w.dim(1));
    for (std::size_t k = 0; k < row.size(); ++k) row[k] = double(w[static_cast<std::size_t>(cam_target) * w.dim(1) + k]);
    out.cam = HeatMap{cam_from_features(features, row, cfg.input_shape), HeatSource::CAM, scan_id, cam_target};
  }
  return out;
}

template <typename T>
HeatMap attention_heatmap(const Model<T>& model, const Tensor<T>& volume, const std::string& scan_id,
                          ChannelReduction reduction) {
  if (model.attention_module_count() == 0) {
    throw CapabilityError("attention heat map needs a model with at least one attention module");
  }
  Tape<T> tape;
  tape.set_grad_enabled(false);
  ForwardCapture<T> capture;
  model.forward(tape, tape.constant(as_batch(volume)), &capture);
  const auto mask = first_sample(capture.attention_masks.front().value());
  return HeatMap{activation_heatmap(mask, model.config().input_shape, reduction), HeatSource::Attention, scan_id, -1};
}

template <typename T>
HeatMap cam_heatmap(const Model<T>& model, const Tensor<T>& volume, int target_class, const std::string& scan_id) {
  return *explain(model, volume, false, true, target_class, scan_id).cam;
}

OverlapScore overlap_score(const HeatMap& h, const Tensor<double>& lesion_mask) {
  if (h.values.shape() != lesion_mask.shape()) {
    throw ShapeError("overlap_score: heat map " + to_string(h.values.shape()) + " vs mask " +
                     to_string(lesion_mask.shape()));
  }
  std::vector<double> scores(h.values.storage());
  std::vector<int> truth(lesion_mask.size());
  double inside = 0, outside = 0;
  std::size_t n_in = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    truth[i] = lesion_mask[i] > 0 ? 1 : 0;
    if (truth[i]) {
      inside += scores[i];
      ++n_in;
    } else {
      outside += scores[i];
    }
  }
  if (n_in == 0) throw DataError("overlap_score: lesion mask is empty");
  if (n_in == truth.size()) throw DataError("overlap_score: lesion mask covers every voxel");
  OverlapScore s;
  s.difference = inside / double(n_in) - outside / double(truth.size() - n_in);
  s.voxel_auc = auc(roc_curve(scores, truth));
  return s;
}

void export_heatmap(const HeatMap& h, const std::string& path, HeatFormat format, const std::string& stem) {
  const auto& v = h.values;
  if (v.rank() != 3) throw RankError("export_heatmap expects a [D,H,W] map");
  const std::size_t d = v.dim(0), rows = v.dim(1), cols = v.dim(2);
  if (format == HeatFormat::CSV) {
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out.precision(17);
    out << "slice,row,col,value\n";
    for (std::size_t z = 0; z < d; ++z) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) out << z << ',' << r << ',' << c << ',' << v[(z * rows + r) * cols + c] << '\n';
      }
    }
    if (!out) throw Error("write failed for " + path);
    return;
  }
  fs::create_directories(path);
  const int width = std::max<int>(3, static_cast<int>(std::to_string(d - 1).size()));
  for (std::size_t z = 0; z < d; ++z) {
    std::string index = std::to_string(z);
    index.insert(0, static_cast<std::size_t>(width) - std::min<std::size_t>(index.size(), width), '0');
    const auto file = (fs::path(path) / (stem + "_s" + index + ".pgm")).string();
    std::ofstream out(file, std::ios::binary);
    if (!out) throw Error("cannot write " + file);
    out << "P5\n" << cols << ' ' << rows << "\n255\n";
    std::vector<unsigned char> bytes(rows * cols);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      const double x = std::clamp(v[z * rows * cols + i], 0.0, 1.0);
      bytes[i] = static_cast<unsigned char>(std::lround(255.0 * x));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + file);
  }
}

Tensor<double> read_heatmap_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "slice,row,col,value") throw FormatError(path + ": bad csv header");
  struct Cell {
    std::size_t z, r, c;
    double v;
  };
  std::vector<Cell> cells;
  std::size_t d = 0, rows = 0, cols = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Cell cell{};
    char c1, c2, c3;
    std::istringstream ls(line);
    if (!(ls >> cell.z >> c1 >> cell.r >> c2 >> cell.c >> c3 >> cell.v) || c1 != ',' || c2 != ',' || c3 != ',') {
      throw FormatError(path + ": malformed row '" + line + "'");
    }
    d = std::max(d, cell.z + 1);
    rows = std::max(rows, cell.r + 1);
    cols = std::max(cols, cell.c + 1);
    cells.push_back(cell);
  }
  if (cells.size() != d * rows * cols || cells.empty()) throw FormatError(path + ": incomplete grid");
  Tensor<double> out(Shape{d, rows, cols});
  for (const auto& c : cells) out.at({c.z, c.r, c.c}) = c.v;
  return out;
}

Tensor<double> read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::string magic;
  std::size_t cols = 0, rows = 0, maxval = 0;
  in >> magic >> cols >> rows >> maxval;
  if (magic != "P5" || maxval != 255 || cols == 0 || rows == 0) throw FormatError(path + ": not an 8-bit P5 image");
  in.get();
  std::vector<unsigned char> bytes(rows * cols);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw FormatError(path + ": truncated pixel data");
  Tensor<double> out(Shape{rows, cols});
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = bytes[i];
  return out;
}

template Explanation<float> explain(const Model<float>&, const Tensor<float>&, bool, bool, int, const std::string&);
template Explanation<double> explain(const Model<double>&, const Tensor<double>&, bool, bool, int, const std::string&);
template HeatMap attention_heatmap(const Model<float>&, const Tensor<float>&, const std::string&, ChannelReduction);
template HeatMap attention_heatmap(const Model<double>&, const Tensor<double>&, const std::string&, ChannelReduction);
template HeatMap cam_heatmap(const Model<float>&, const Tensor<float>&, int, const std::string&);
template HeatMap cam_heatmap(const Model<double>&, const Tensor<double>&, int, const std::string&);

}  // namespace nlran
