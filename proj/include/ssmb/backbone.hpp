// SPDX-License-Identifier: Apache-2.0
//
// Small convolutional embedding network used as the frozen recognition
// backbone. Three conv stages (3×3, stride 1, pad 1) each followed by ReLU, an
// optional SSMB slot, and 2×2 max pooling; a fully connected layer maps the
// flattened 32×(4×4) map to the embedding. An optional classification head is
// present only while pretraining.

#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ssmb/checkpoint.hpp"
#include "ssmb/ssmb_block.hpp"
#include "ssmb/tensor.hpp"

namespace ssmb {

inline constexpr std::size_t kNumStages = 3;

struct BackboneConfig {
  std::size_t input_channels = 3;
  std::size_t image_size = 32;
  std::array<std::size_t, kNumStages> stage_channels{8, 16, 32};
  std::size_t kernel = 3;
  std::size_t pool = 2;
  std::size_t embedding_dim = 64;
  std::size_t num_pretrain_classes = 0;  // 0 = no classification head

  void validate() const;
  std::size_t stage_input_channels(std::size_t stage) const;
  std::size_t flat_features() const;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool frozen = false;
};

// Records the executed layer sequence; routed experts are kept separately so
// that traces from different inputs compare structurally.
struct ExecutionTrace {
  std::vector<std::string> layers;
  std::vector<std::vector<std::size_t>> routed_experts;  // one entry per executed SSMB slot
};

template <typename T>
struct ForwardContext {
  std::vector<RoutingStats<T>> routing;               // per populated slot, in slot order
  std::vector<std::vector<std::size_t>> winners;      // per populated slot
  ExecutionTrace* trace = nullptr;
};

template <typename T>
class Model {
 public:
  Model() = default;
  explicit Model(const BackboneConfig& config) : config_(config) {}
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  // Deep copy: no tensor storage is shared with the source.
  Model clone() const;
  template <typename U>
  Model<U> cast() const;

  const BackboneConfig& config() const { return config_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  const Parameter<T>& parameter(const std::string& name) const;
  Parameter<T>& parameter(const std::string& name);
  bool has_parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  const std::optional<SSMBBlock<T>>& slot(std::size_t index) const { return slots_.at(index); }
  bool has_ssmb() const;
  // Installs a block into an insertion point and registers its parameters.
  void install_ssmb(std::size_t index, SSMBBlock<T> block);
  void remove_head();
  bool has_head() const { return has_parameter("head.weight"); }

  void set_frozen(const std::string& name, bool frozen);
  void freeze_all();
  // Student configuration: only SSMB-owned parameters trainable.
  void freeze_all_but_ssmb();
  void unfreeze_all();

  void add_parameter(std::string name, Tensor<T> value, bool frozen = false);

 private:
  template <typename U>
  friend class Model;

  BackboneConfig config_;
  std::vector<Parameter<T>> params_;
  std::array<std::optional<SSMBBlock<T>>, kNumStages> slots_;
};

template <typename T>
Model<T> build_backbone(const BackboneConfig& config, std::uint64_t seed);

template <typename T>
Tensor<T> forward_embed(const Model<T>& model, const Tensor<T>& images, ForwardContext<T>* context = nullptr);

// Embedding followed by the classification head.
template <typename T>
Tensor<T> forward_logits(const Model<T>& model, const Tensor<T>& images);

// 1×H×W -> 3×H×W, or N×1×H×W -> N×3×H×W.
template <typename T>
Tensor<T> replicate_channels(const Tensor<T>& image);

std::string ssmb_param_name(std::size_t slot, const std::string& local);
bool is_ssmb_param(const std::string& name);

std::vector<NamedTensor> to_named_tensors(const Model<float>& model);
Model<float> model_from_named_tensors(const std::vector<NamedTensor>& tensors);
void save_checkpoint(const Model<float>& model, const std::filesystem::path& path);
Model<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace ssmb
