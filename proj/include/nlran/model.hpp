#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlran/attention.hpp"
#include "nlran/errors.hpp"
#include "nlran/nonlocal.hpp"

namespace nlran {

/// Declarative NL-RAN variant. Stage widths double after every
/// downsampling: stage k uses bottleneck width base*2^k and output width
/// 4*base*2^k.
struct NetworkConfig {
  std::size_t base_channels = 8;
  std::array<std::size_t, 3> attention_stacks{1, 1, 1};
  AttentionVariant attention_variant = AttentionVariant::Mixed;
  bool use_nonlocal = true;
  std::size_t num_classes = 3;
  Extent3 input_shape{16, 32, 32};  // D, H, W
  std::size_t input_channels = 1;

  static NetworkConfig resmix3() { return NetworkConfig{}; }
  static NetworkConfig resmix6() {
    NetworkConfig c;
    c.attention_stacks = {1, 2, 3};
    return c;
  }
  /// Full-size network: C=64 on 64x160x160 inputs.
  static NetworkConfig full_scale(bool six_stacks = false) {
    NetworkConfig c = six_stacks ? resmix6() : resmix3();
    c.base_channels = 64;
    c.input_shape = {64, 160, 160};
    return c;
  }
  /// Plain 3D ResNet ablation: no attention modules, no non-local block.
  static NetworkConfig resnet_baseline() {
    NetworkConfig c;
    c.attention_stacks = {0, 0, 0};
    c.use_nonlocal = false;
    return c;
  }

  std::size_t final_channels() const { return 32 * base_channels; }

  /// Throws ConfigError naming the failing stage when shapes are infeasible.
  void validate() const;

  nlohmann::json to_json() const;
  /// Unknown keys are rejected.
  static NetworkConfig from_json(const nlohmann::json& j);
  /// FNV-1a over the canonical JSON text, as 16 hex digits.
  std::string hash() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// One row of the symbolic architecture walk.
struct LayerRecord {
  std::string name;
  std::string kind;   // conv, maxpool, residual_unit, attention, nonlocal, gap, fc, ...
  std::size_t channels = 0;
  Extent3 extents{};  // output D, H, W
  std::size_t params = 0;
  std::uint64_t macs = 0;
  bool stage_row = false;  // one of the printed architecture-table rows
};

/// Walks the architecture without allocating activations: output shapes,
/// parameter counts and multiply-add counts per layer for a batch of one.
///
/// MAC convention: a convolution costs Cout*D'*H'*W'*Cin*kd*kh*kw; the fully
/// connected head costs K*F; a non-local block adds 2*P^2*Cb for the
/// pairwise form (affinity plus weighted sum) on top of its four 1x1x1
/// convolutions. Pooling, activations, resizes and elementwise ops are free.
std::vector<LayerRecord> describe(const NetworkConfig& cfg);
std::size_t count_params(const NetworkConfig& cfg);
std::uint64_t count_flops(const NetworkConfig& cfg);

/// Intermediate values captured during a forward pass.
template <typename T>
struct ForwardCapture {
  std::vector<Var<T>> attention_masks;  // in network order
  Var<T> features;                      // last map before global average pooling
  Var<T> pooled;
};

template <typename T>
class Model {
 public:
  /// Builds and initialises every parameter from `seed`.
  explicit Model(const NetworkConfig& cfg, std::uint64_t seed = 0);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// x: [N, input_channels, D, H, W] -> logits [N, num_classes].
  Var<T> forward(Tape<T>& tape, Var<T> x, ForwardCapture<T>* capture = nullptr) const;

  /// Convenience inference: logits without retaining gradients.
  Tensor<T> predict_logits(const Tensor<T>& x) const;

  const NetworkConfig& config() const noexcept { return cfg_; }
  ParameterStore<T>& parameters() noexcept { return *store_; }
  const ParameterStore<T>& parameters() const noexcept { return *store_; }
  std::size_t attention_module_count() const;
  const LinearLayer<T>& classifier() const noexcept { return fc_; }

  /// Copies parameter values from another model with the same config.
  template <typename U>
  void copy_parameters_from(const Model<U>& other);

 private:
  NetworkConfig cfg_;
  std::unique_ptr<ParameterStore<T>> store_;
  Conv3dLayer<T> stem_;
  std::vector<ResidualUnit<T>> stage_entry_;
  std::vector<AttentionStack<T>> stacks_;
  std::vector<ResidualUnit<T>> tail_;
  std::optional<NonLocalBlock<T>> nonlocal_;
  LinearLayer<T> fc_;
};

template <typename T>
template <typename U>
void Model<T>::copy_parameters_from(const Model<U>& other) {
  if (other.config() != cfg_) throw ConfigError("copy_parameters_from: config mismatch");
  for (std::size_t i = 0; i < store_->size(); ++i) {
    (*store_)[i].value = other.parameters()[i].value.template cast<T>();
  }
}

std::size_t count_params(const Model<float>& model);
std::size_t count_params(const Model<double>& model);

extern template class Model<float>;
extern template class Model<double>;

// ---------------------------------------------------------------------------
// Checkpoint: "NLCK", u16 version, u64 LE length + canonical JSON header
// ({"config", "config_hash", "epoch", "best_metric"}), u32 tensor count, then
// per tensor a u32 name length, the name bytes and an NLT1 container.

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointInfo {
  NetworkConfig config;
  std::int64_t epoch = -1;
  double best_metric = 0.0;
};

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path, std::int64_t epoch = -1,
                     double best_metric = 0.0);

/// Loads and rebuilds the model. When `expected` is given its hash must
/// match the stored config hash.
template <typename T>
Model<T> load_checkpoint(const std::string& path, CheckpointInfo* info = nullptr,
                         const NetworkConfig* expected = nullptr);

CheckpointInfo read_checkpoint_info(const std::string& path);

}  // namespace nlran
