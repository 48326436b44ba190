// SPDX-License-Identifier: Apache-2.0

#include "ssmb/ssmb_block.hpp"

#include <algorithm>

namespace ssmb {

std::string_view gate_mode_name(GateMode mode) {
  return mode == GateMode::kScaled ? "scaled" : "value-preserving";
}

GateMode parse_gate_mode(std::string_view text) {
  if (text == "scaled" || text == "gate-scaled") return GateMode::kScaled;
  if (text == "value-preserving") return GateMode::kValuePreserving;
  throw Error("unknown gate mode '" + std::string(text) + "' (expected scaled|value-preserving)");
}

void SSMBConfig::validate() const {
  if (channels == 0) throw Error("SSMB channels must be positive");
  if (num_experts == 0) throw Error("SSMB needs at least one expert");
  if (!(epsilon > 0.0)) throw Error("SSMB epsilon must be positive");
}

template <typename T>
ChannelStats<T> channel_stats(const Tensor<T>& features, double epsilon) {
  if (features.rank() != 4) throw ShapeError("channel_stats expects N×C×H×W, got " + shape_str(features.shape()));
  const std::size_t batch = features.dim(0), channels = features.dim(1);
  auto mu = mean(features, {2, 3});
  auto centered = features - reshape(mu, {batch, channels, 1, 1});
  auto var = mean(centered * centered, {2, 3});
  auto sigma = sqrt(var + static_cast<T>(epsilon));
  return {mu, sigma};
}

template <typename T>
Tensor<T> router_input(const ChannelStats<T>& stats) {
  return concat<T>({stats.mu, stats.sigma}, 1);
}

template <typename T>
std::vector<double> RoutingStats<T>::mean_prob_values() const {
  return {mean_prob.data().begin(), mean_prob.data().end()};
}

template <typename T>
RoutingStats<T> collect_routing_stats(const std::vector<std::size_t>& winners, const Tensor<T>& probs) {
  if (probs.rank() != 2 || probs.dim(0) != winners.size() || winners.empty()) {
    throw ShapeError("routing stats need B×N probabilities for B >= 1 winners");
  }
  const std::size_t experts = probs.dim(1);
  RoutingStats<T> stats;
  stats.batch = winners.size();
  stats.dispatch_fraction.assign(experts, 0.0);
  for (auto w : winners) {
    if (w >= experts) throw ShapeError("winner index out of range");
    stats.dispatch_fraction[w] += 1.0;
  }
  for (auto& f : stats.dispatch_fraction) f /= static_cast<double>(winners.size());
  stats.mean_prob = mean(probs, {0});
  return stats;
}

template <typename T>
SSMBBlock<T>::SSMBBlock(const SSMBConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t width = 2 * config_.channels;
  const std::size_t n = config_.num_experts;
  std::vector<T> rw(width * n);
  for (auto& v : rw) v = static_cast<T>(rng.uniform(-1e-3, 1e-3));
  router_weight = Tensor<T>::from({width, n}, std::move(rw));
  router_bias = Tensor<T>::zeros({n});
  for (std::size_t e = 0; e < n; ++e) {
    auto w = Tensor<T>::zeros({width, width});
    auto data = w.mutable_data();
    for (std::size_t i = 0; i < width; ++i) data[i * width + i] = T(1);
    expert_weights.push_back(w);
    expert_biases.push_back(Tensor<T>::zeros({width}));
  }
  check_shapes();
}

template <typename T>
SSMBBlock<T>::SSMBBlock(const SSMBConfig& config, Tensor<T> rw, Tensor<T> rb, std::vector<Tensor<T>> ew,
                        std::vector<Tensor<T>> eb)
    : router_weight(std::move(rw)),
      router_bias(std::move(rb)),
      expert_weights(std::move(ew)),
      expert_biases(std::move(eb)),
      config_(config) {
  config_.validate();
  check_shapes();
}

template <typename T>
void SSMBBlock<T>::check_shapes() const {
  const std::size_t width = 2 * config_.channels;
  const std::size_t n = config_.num_experts;
  if (router_weight.shape() != Shape{width, n} || router_bias.shape() != Shape{n}) {
    throw ShapeError("SSMB router expects " + shape_str({width, n}) + " weights, got " + shape_str(router_weight.shape()));
  }
  if (expert_weights.size() != n || expert_biases.size() != n) throw ShapeError("SSMB expert count mismatch");
  for (std::size_t e = 0; e < n; ++e) {
    if (expert_weights[e].shape() != Shape{width, width} || expert_biases[e].shape() != Shape{width}) {
      throw ShapeError("SSMB expert " + std::to_string(e) + " has shape " + shape_str(expert_weights[e].shape()));
    }
  }
}

template <typename T>
Routing<T> SSMBBlock<T>::route(const Tensor<T>& input) const {
  if (input.rank() != 2 || input.dim(1) != 2 * config_.channels) {
    throw ShapeError("router input must be B×2C, got " + shape_str(input.shape()));
  }
  Routing<T> r;
  r.probs = softmax(matmul(input, router_weight) + router_bias, 1);
  const std::size_t batch = input.dim(0), n = config_.num_experts;
  const auto p = r.probs.data();
  r.winner.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t best = 0;
    for (std::size_t e = 1; e < n; ++e) {
      if (p[b * n + e] > p[b * n + best]) best = e;
    }
    r.winner[b] = best;
  }
  r.gate = take_per_row(r.probs, r.winner);
  return r;
}

template <typename T>
ModulationParams<T> SSMBBlock<T>::expert_modulation_params(const Tensor<T>& input,
                                                           const std::vector<std::size_t>& winner,
                                                           const Tensor<T>& gate) const {
  const std::size_t batch = input.dim(0), c = config_.channels;
  if (winner.size() != batch || gate.shape() != Shape{batch, 1}) throw ShapeError("routing does not match batch");

  // Each expert processes only the samples dispatched to it; rows are then
  // restored to batch order.
  std::vector<Tensor<T>> parts;
  std::vector<std::size_t> position(batch);
  std::size_t placed = 0;
  for (std::size_t e = 0; e < config_.num_experts; ++e) {
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < batch; ++b) {
      if (winner[b] == e) rows.push_back(b);
    }
    if (rows.empty()) continue;
    for (auto b : rows) position[b] = placed++;
    parts.push_back(matmul(index_select(input, rows), expert_weights[e]) + expert_biases[e]);
  }
  auto grouped = parts.size() == 1 ? parts.front() : concat(parts, 0);
  auto raw = index_select(grouped, position);

  if (config_.gate_mode == GateMode::kScaled) {
    raw = raw * gate;
  } else {
    raw = raw * (gate / gate.detach());
  }
  return {slice(raw, 1, 0, c), slice(raw, 1, c, 2 * c)};
}

template <typename T>
SSMBOutput<T> SSMBBlock<T>::forward(const Tensor<T>& features) const {
  if (features.rank() != 4 || features.dim(1) != config_.channels) {
    throw ShapeError("SSMB block with " + std::to_string(config_.channels) + " channels got " +
                     shape_str(features.shape()));
  }
  const std::size_t batch = features.dim(0), c = config_.channels;
  const Shape per_channel{batch, c, 1, 1};

  const auto stats = channel_stats(features, config_.epsilon);
  const auto input = router_input(stats);
  auto routing = route(input);
  const auto mod = expert_modulation_params(input, routing.winner, routing.gate);

  auto normalized = (features - reshape(stats.mu, per_channel)) / reshape(stats.sigma, per_channel);
  auto styled = reshape(mod.sigma_s, per_channel) * normalized + reshape(mod.mu_s, per_channel);
  auto out = (styled + features) * T(0.5);

  return {out, collect_routing_stats(routing.winner, routing.probs), std::move(routing.winner)};
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> SSMBBlock<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> named{{"router.weight", router_weight}, {"router.bias", router_bias}};
  for (std::size_t e = 0; e < expert_weights.size(); ++e) {
    named.emplace_back("expert." + std::to_string(e) + ".weight", expert_weights[e]);
    named.emplace_back("expert." + std::to_string(e) + ".bias", expert_biases[e]);
  }
  return named;
}

#define SSMB_INSTANTIATE_BLOCK(T)                                                                         \
  template struct RoutingStats<T>;                                                                        \
  template class SSMBBlock<T>;                                                                            \
  template ChannelStats<T> channel_stats<T>(const Tensor<T>&, double);                                   \
  template Tensor<T> router_input<T>(const ChannelStats<T>&);                                             \
  template RoutingStats<T> collect_routing_stats<T>(const std::vector<std::size_t>&, const Tensor<T>&);

SSMB_INSTANTIATE_BLOCK(float)
SSMB_INSTANTIATE_BLOCK(double)

}  // namespace ssmb
