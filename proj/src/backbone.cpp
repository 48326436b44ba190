// SPDX-License-Identifier: Apache-2.0

#include "ssmb/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "ssmb/rng.hpp"

namespace ssmb {

void BackboneConfig::validate() const {
  if (input_channels == 0 || embedding_dim == 0) throw Error("backbone channels and embedding_dim must be positive");
  if (kernel % 2 == 0) throw Error("backbone kernel must be odd");
  if (pool == 0) throw Error("backbone pool must be positive");
  std::size_t side = image_size;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    if (stage_channels[s] == 0) throw Error("stage channels must be positive");
    if (side % pool != 0) throw Error("image size not divisible by pooling at stage " + std::to_string(s));
    side /= pool;
  }
  if (side == 0) throw Error("image size too small for three pooling stages");
}

std::size_t BackboneConfig::stage_input_channels(std::size_t stage) const {
  return stage == 0 ? input_channels : stage_channels.at(stage - 1);
}

std::size_t BackboneConfig::flat_features() const {
  std::size_t side = image_size;
  for (std::size_t s = 0; s < kNumStages; ++s) side /= pool;
  return stage_channels[kNumStages - 1] * side * side;
}

std::string ssmb_param_name(std::size_t slot, const std::string& local) {
  return "ssmb." + std::to_string(slot) + "." + local;
}

bool is_ssmb_param(const std::string& name) { return name.rfind("ssmb.", 0) == 0; }

namespace {

template <typename T>
Tensor<T> he_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from(shape, std::move(values));
}

template <typename T>
SSMBBlock<T> block_from_params(const Model<T>& model, std::size_t slot, const SSMBConfig& config) {
  auto get = [&](const std::string& local) { return model.parameter(ssmb_param_name(slot, local)).value; };
  std::vector<Tensor<T>> weights, biases;
  for (std::size_t e = 0; e < config.num_experts; ++e) {
    weights.push_back(get("expert." + std::to_string(e) + ".weight"));
    biases.push_back(get("expert." + std::to_string(e) + ".bias"));
  }
  return SSMBBlock<T>(config, get("router.weight"), get("router.bias"), std::move(weights), std::move(biases));
}

}  // namespace

// ---- Model -----------------------------------------------------------------

template <typename T>
const Parameter<T>& Model<T>::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw Error("no parameter named " + name);
}

template <typename T>
Parameter<T>& Model<T>::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw Error("no parameter named " + name);
}

template <typename T>
bool Model<T>::has_parameter(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const auto& p) { return p.name == name; });
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.value.numel();
  return total;
}

template <typename T>
bool Model<T>::has_ssmb() const {
  return std::any_of(slots_.begin(), slots_.end(), [](const auto& s) { return s.has_value(); });
}

template <typename T>
void Model<T>::add_parameter(std::string name, Tensor<T> value, bool frozen) {
  if (has_parameter(name)) throw Error("duplicate parameter " + name);
  value.set_requires_grad(!frozen);
  params_.push_back({std::move(name), std::move(value), frozen});
}

template <typename T>
void Model<T>::install_ssmb(std::size_t index, SSMBBlock<T> block) {
  if (index >= kNumStages) throw Error("SSMB slot " + std::to_string(index) + " does not exist");
  if (slots_[index]) throw Error("SSMB slot " + std::to_string(index) + " already populated");
  if (block.config().channels != config_.stage_channels[index]) {
    throw ShapeError("SSMB block has " + std::to_string(block.config().channels) + " channels, slot " +
                     std::to_string(index) + " carries " + std::to_string(config_.stage_channels[index]));
  }
  for (auto& [local, tensor] : block.named_parameters()) add_parameter(ssmb_param_name(index, local), tensor, false);
  slots_[index] = std::move(block);
}

template <typename T>
void Model<T>::remove_head() {
  std::erase_if(params_, [](const auto& p) { return p.name.rfind("head.", 0) == 0; });
  config_.num_pretrain_classes = 0;
}

template <typename T>
void Model<T>::set_frozen(const std::string& name, bool frozen) {
  auto& p = parameter(name);
  p.frozen = frozen;
  p.value.set_requires_grad(!frozen);
}

template <typename T>
void Model<T>::freeze_all() {
  for (auto& p : params_) {
    p.frozen = true;
    p.value.set_requires_grad(false);
  }
}

template <typename T>
void Model<T>::freeze_all_but_ssmb() {
  for (auto& p : params_) {
    p.frozen = !is_ssmb_param(p.name);
    p.value.set_requires_grad(!p.frozen);
  }
}

template <typename T>
void Model<T>::unfreeze_all() {
  for (auto& p : params_) {
    p.frozen = false;
    p.value.set_requires_grad(true);
  }
}

template <typename T>
Model<T> Model<T>::clone() const {
  return cast<T>();
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> out(config_);
  for (const auto& p : params_) {
    auto value = p.value.template cast<U>();
    value.set_requires_grad(!p.frozen);
    out.params_.push_back({p.name, value, p.frozen});
  }
  for (std::size_t s = 0; s < kNumStages; ++s) {
    if (slots_[s]) out.slots_[s] = block_from_params(out, s, slots_[s]->config());
  }
  return out;
}

// ---- construction and forward ----------------------------------------------

template <typename T>
Model<T> build_backbone(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(mix_seed({seed, 0xBAC4B09EULL}));
  Model<T> model(config);
  const std::size_t k = config.kernel;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::size_t cin = config.stage_input_channels(s), cout = config.stage_channels[s];
    const std::string prefix = "conv." + std::to_string(s);
    model.add_parameter(prefix + ".weight", he_uniform<T>({cout, cin, k, k}, cin * k * k, rng));
    model.add_parameter(prefix + ".bias", Tensor<T>::zeros({cout}));
  }
  const std::size_t flat = config.flat_features();
  model.add_parameter("fc.weight", he_uniform<T>({flat, config.embedding_dim}, flat, rng));
  model.add_parameter("fc.bias", Tensor<T>::zeros({config.embedding_dim}));
  if (config.num_pretrain_classes > 0) {
    model.add_parameter("head.weight",
                        he_uniform<T>({config.embedding_dim, config.num_pretrain_classes}, config.embedding_dim, rng));
    model.add_parameter("head.bias", Tensor<T>::zeros({config.num_pretrain_classes}));
  }
  return model;
}

template <typename T>
Tensor<T> forward_embed(const Model<T>& model, const Tensor<T>& images, ForwardContext<T>* context) {
  const auto& cfg = model.config();
  if (images.rank() != 4 || images.dim(1) != cfg.input_channels || images.dim(2) != cfg.image_size ||
      images.dim(3) != cfg.image_size) {
    throw ShapeError("backbone expects N×" + std::to_string(cfg.input_channels) + "×" + std::to_string(cfg.image_size) +
                     "×" + std::to_string(cfg.image_size) + " images, got " + shape_str(images.shape()));
  }
  ExecutionTrace* trace = context ? context->trace : nullptr;
  auto mark = [trace](std::string layer) {
    if (trace) trace->layers.push_back(std::move(layer));
  };

  Tensor<T> x = images;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::string stage = std::to_string(s);
    x = conv2d(x, model.parameter("conv." + stage + ".weight").value, model.parameter("conv." + stage + ".bias").value,
               {1, cfg.kernel / 2});
    mark("conv." + stage);
    x = relu(x);
    mark("relu." + stage);
    if (const auto& block = model.slot(s)) {
      auto out = block->forward(x);
      x = out.out;
      mark("ssmb." + stage);
      if (trace) trace->routed_experts.push_back(out.winners);
      if (context) {
        context->routing.push_back(std::move(out.stats));
        context->winners.push_back(std::move(out.winners));
      }
    }
    x = max_pool2d(x, cfg.pool);
    mark("pool." + stage);
  }
  x = reshape(x, {images.dim(0), cfg.flat_features()});
  auto embedding = matmul(x, model.parameter("fc.weight").value) + model.parameter("fc.bias").value;
  mark("fc");
  return embedding;
}

template <typename T>
Tensor<T> forward_logits(const Model<T>& model, const Tensor<T>& images) {
  if (!model.has_head()) throw Error("model has no classification head");
  return matmul(forward_embed(model, images), model.parameter("head.weight").value) + model.parameter("head.bias").value;
}

template <typename T>
Tensor<T> replicate_channels(const Tensor<T>& image) {
  if (image.rank() == 3 && image.dim(0) == 1) return concat<T>({image, image, image}, 0);
  if (image.rank() == 4 && image.dim(1) == 1) return concat<T>({image, image, image}, 1);
  throw ShapeError("replicate_channels expects a single-channel image, got " + shape_str(image.shape()));
}

// ---- checkpoint mapping ----------------------------------------------------

std::vector<NamedTensor> to_named_tensors(const Model<float>& model) {
  std::vector<NamedTensor> out;
  for (const auto& p : model.parameters()) {
    out.push_back({p.name, p.value.shape(), {p.value.data().begin(), p.value.data().end()}});
  }
  for (std::size_t s = 0; s < kNumStages; ++s) {
    if (const auto& block = model.slot(s)) {
      const float code = block->config().gate_mode == GateMode::kScaled ? 0.0f : 1.0f;
      out.push_back({ssmb_param_name(s, "gate_mode"), {}, {code}});
    }
  }
  return out;
}

Model<float> model_from_named_tensors(const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) {
    if (!by_name.emplace(t.name, &t).second) {
      throw CheckpointError(CheckpointErrorKind::kShapeMismatch, "duplicate tensor " + t.name);
    }
  }
  std::map<std::string, const NamedTensor*> unused = by_name;
  auto take = [&](const std::string& name) -> const NamedTensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError(CheckpointErrorKind::kMissingTensor, name);
    unused.erase(name);
    return *it->second;
  };
  auto expect = [](const NamedTensor& t, const Shape& shape) {
    if (t.shape != shape) {
      throw CheckpointError(CheckpointErrorKind::kShapeMismatch,
                            t.name + " has shape " + shape_str(t.shape) + ", expected " + shape_str(shape));
    }
  };

  BackboneConfig cfg;
  const auto& w0 = take("conv.0.weight");
  if (w0.shape.size() != 4 || w0.shape[2] != w0.shape[3]) {
    throw CheckpointError(CheckpointErrorKind::kShapeMismatch, "conv.0.weight must be a square rank-4 kernel");
  }
  cfg.input_channels = w0.shape[1];
  cfg.kernel = w0.shape[2];
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const auto& w = take("conv." + std::to_string(s) + ".weight");
    if (w.shape.size() != 4) throw CheckpointError(CheckpointErrorKind::kShapeMismatch, w.name + " must be rank 4");
    cfg.stage_channels[s] = w.shape[0];
  }
  const auto& fcw = take("fc.weight");
  if (fcw.shape.size() != 2) throw CheckpointError(CheckpointErrorKind::kShapeMismatch, "fc.weight must be rank 2");
  cfg.embedding_dim = fcw.shape[1];
  const std::size_t last = cfg.stage_channels[kNumStages - 1];
  const std::size_t spatial = last ? fcw.shape[0] / last : 0;
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(spatial))));
  if (last == 0 || side * side * last != fcw.shape[0]) {
    throw CheckpointError(CheckpointErrorKind::kShapeMismatch, "fc.weight rows do not match the final feature map");
  }
  cfg.image_size = side * cfg.pool * cfg.pool * cfg.pool;
  const bool head = by_name.count("head.weight") > 0;
  if (head) {
    const auto& hw = take("head.weight");
    if (hw.shape.size() != 2) throw CheckpointError(CheckpointErrorKind::kShapeMismatch, "head.weight must be rank 2");
    cfg.num_pretrain_classes = hw.shape[1];
  }
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw CheckpointError(CheckpointErrorKind::kShapeMismatch, e.what());
  }

  Model<float> model(cfg);
  auto add = [&](const std::string& name, const Shape& shape) {
    const auto& t = take(name);
    expect(t, shape);
    model.add_parameter(name, Tensor<float>::from(t.shape, t.values));
  };
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::string prefix = "conv." + std::to_string(s);
    add(prefix + ".weight", {cfg.stage_channels[s], cfg.stage_input_channels(s), cfg.kernel, cfg.kernel});
    add(prefix + ".bias", {cfg.stage_channels[s]});
  }
  add("fc.weight", {cfg.flat_features(), cfg.embedding_dim});
  add("fc.bias", {cfg.embedding_dim});
  if (head) {
    add("head.weight", {cfg.embedding_dim, cfg.num_pretrain_classes});
    add("head.bias", {cfg.num_pretrain_classes});
  }

  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::string router = ssmb_param_name(s, "router.weight");
    if (!by_name.count(router)) continue;
    const auto& rw = take(router);
    const std::size_t width = 2 * cfg.stage_channels[s];
    if (rw.shape.size() != 2 || rw.shape[0] != width || rw.shape[1] == 0) {
      throw CheckpointError(CheckpointErrorKind::kShapeMismatch,
                            router + " has shape " + shape_str(rw.shape) + " for a " +
                                std::to_string(cfg.stage_channels[s]) + "-channel slot");
    }
    SSMBConfig bc;
    bc.channels = cfg.stage_channels[s];
    bc.num_experts = rw.shape[1];
    const auto& mode = take(ssmb_param_name(s, "gate_mode"));
    expect(mode, {});
    bc.gate_mode = mode.values[0] == 0.0f ? GateMode::kScaled : GateMode::kValuePreserving;

    std::vector<Tensor<float>> weights, biases;
    auto get = [&](const std::string& local, const Shape& shape) {
      const auto& t = take(ssmb_param_name(s, local));
      expect(t, shape);
      return Tensor<float>::from(t.shape, t.values);
    };
    auto rwt = Tensor<float>::from(rw.shape, rw.values);
    auto rbt = get("router.bias", {bc.num_experts});
    for (std::size_t e = 0; e < bc.num_experts; ++e) {
      weights.push_back(get("expert." + std::to_string(e) + ".weight", {width, width}));
      biases.push_back(get("expert." + std::to_string(e) + ".bias", {width}));
    }
    model.install_ssmb(s, SSMBBlock<float>(bc, rwt, rbt, std::move(weights), std::move(biases)));
  }
  if (!unused.empty()) {
    throw CheckpointError(CheckpointErrorKind::kShapeMismatch, "unexpected tensor " + unused.begin()->first);
  }
  return model;
}

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path) {
  write_checkpoint_file(path, to_named_tensors(model));
}

Model<float> load_checkpoint(const std::filesystem::path& path) {
  return model_from_named_tensors(read_checkpoint_file(path));
}

#define SSMB_INSTANTIATE_BACKBONE(T)                                                             \
  template class Model<T>;                                                                       \
  template Model<T> build_backbone<T>(const BackboneConfig&, std::uint64_t);                     \
  template Tensor<T> forward_embed<T>(const Model<T>&, const Tensor<T>&, ForwardContext<T>*);    \
  template Tensor<T> forward_logits<T>(const Model<T>&, const Tensor<T>&);                       \
  template Tensor<T> replicate_channels<T>(const Tensor<T>&);

SSMB_INSTANTIATE_BACKBONE(float)
SSMB_INSTANTIATE_BACKBONE(double)

template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;

}  // namespace ssmb
