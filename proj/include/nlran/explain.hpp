#pragma once

#include <string>

#include "nlran/model.hpp"

namespace nlran {

enum class HeatSource { Attention, CAM };
enum class ChannelReduction { Mean, Max };
enum class HeatFormat { PgmStack, CSV };

std::string to_string(HeatSource s);
HeatFormat parse_heat_format(const std::string& name);

struct HeatMap {
  Tensor<double> values;  // [D,H,W] in [0,1], aligned with the network input grid
  HeatSource source = HeatSource::Attention;
  std::string scan_id;
  int target_class = -1;  // CAM only
};

/// Per-volume min-max scaling to [0,1]; a flat map becomes all 0.5.
Tensor<double> min_max_normalize(const Tensor<double>& x);

/// Reduces a [C,d,h,w] activation over channels, resizes it trilinearly to
/// `extents` and normalizes.
Tensor<double> activation_heatmap(const Tensor<double>& activation, const Extent3& extents,
                                  ChannelReduction reduction = ChannelReduction::Mean);

/// relu(sum_c weights[c] * features[c]) resized to `extents`, normalized.
Tensor<double> cam_from_features(const Tensor<double>& features, const std::vector<double>& weights,
                                 const Extent3& extents);

/// Heat map from the mask of the first attention module for one volume
/// ([1,D,H,W] or [1,1,D,H,W]). Throws CapabilityError without attention.
template <typename T>
HeatMap attention_heatmap(const Model<T>& model, const Tensor<T>& volume, const std::string& scan_id = {},
                          ChannelReduction reduction = ChannelReduction::Mean);

template <typename T>
HeatMap cam_heatmap(const Model<T>& model, const Tensor<T>& volume, int target_class,
                    const std::string& scan_id = {});

/// Both maps plus the logits from a single forward pass.
template <typename T>
struct Explanation {
  Tensor<T> logits;  // [1,K]
  std::optional<HeatMap> attention;
  std::optional<HeatMap> cam;
};

template <typename T>
Explanation<T> explain(const Model<T>& model, const Tensor<T>& volume, bool want_attention, bool want_cam,
                       int cam_target = -1, const std::string& scan_id = {});

struct OverlapScore {
  double difference = 0;  // mean inside lesion - mean outside
  double voxel_auc = 0;   // heat as a voxel-level lesion detector
};

/// Mask voxels > 0 count as lesion. Throws DataError for an empty mask or
/// a mask without background.
OverlapScore overlap_score(const HeatMap& h, const Tensor<double>& lesion_mask);

/// pgm-stack: one P5 file per slice named <stem>_sNNN.pgm inside `path`
/// (a directory). csv: single file "slice,row,col,value".
void export_heatmap(const HeatMap& h, const std::string& path, HeatFormat format,
                    const std::string& stem = "heat");

/// Reads a csv export back.
Tensor<double> read_heatmap_csv(const std::string& path);
/// Reads one P5 slice as raw 8-bit values in [0,255].
Tensor<double> read_pgm(const std::string& path);

}  // namespace nlran
