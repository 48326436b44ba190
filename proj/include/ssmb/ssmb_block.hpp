// SPDX-License-Identifier: Apache-2.0
//
// Switch style modulation block.
//
// Per sample and channel the block measures mean and standard deviation of a
// C×H×W feature map, feeds the 2C statistic vector [mu, sigma] to a softmax
// router over N style experts, and lets only the winning expert (top-1) emit
// new modulation parameters [mu_s, sigma_s]. The instance-normalized map is
// re-styled with them and averaged with the input:
//
//   out = 0.5 * (sigma_s * (F - mu) / sigma + mu_s + F)
//
// Experts are affine maps on the statistic vector, initialized to identity,
// so with a value-preserving gate a fresh block returns its input unchanged.

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "ssmb/rng.hpp"
#include "ssmb/tensor.hpp"

namespace ssmb {

enum class GateMode {
  kScaled,           // modulation parameters multiplied by the winning gate value
  kValuePreserving,  // multiplied by gate / stop_gradient(gate): value 1, router still trained
};

std::string_view gate_mode_name(GateMode mode);
GateMode parse_gate_mode(std::string_view text);

struct SSMBConfig {
  std::size_t channels = 1;
  std::size_t num_experts = 4;
  GateMode gate_mode = GateMode::kScaled;
  double epsilon = 1e-5;

  void validate() const;
};

template <typename T>
struct ChannelStats {
  Tensor<T> mu;     // B×C
  Tensor<T> sigma;  // B×C, sqrt(population variance + eps)
};

template <typename T>
ChannelStats<T> channel_stats(const Tensor<T>& features, double epsilon);

// Router input [mu, sigma] (B×2C) in that order.
template <typename T>
Tensor<T> router_input(const ChannelStats<T>& stats);

template <typename T>
struct Routing {
  Tensor<T> probs;                  // B×N softmax over experts
  std::vector<std::size_t> winner;  // argmax per sample, lowest index on ties
  Tensor<T> gate;                   // B×1, probs[b, winner[b]]
};

template <typename T>
struct ModulationParams {
  Tensor<T> mu_s;     // B×C
  Tensor<T> sigma_s;  // B×C
};

template <typename T>
struct RoutingStats {
  std::vector<double> dispatch_fraction;  // f_i, piecewise constant
  Tensor<T> mean_prob;                    // P_i, differentiable, shape N
  std::size_t batch = 0;

  std::size_t num_experts() const { return dispatch_fraction.size(); }
  std::vector<double> mean_prob_values() const;
};

template <typename T>
RoutingStats<T> collect_routing_stats(const std::vector<std::size_t>& winners, const Tensor<T>& probs);

template <typename T>
struct SSMBOutput {
  Tensor<T> out;
  RoutingStats<T> stats;
  std::vector<std::size_t> winners;
};

template <typename T>
class SSMBBlock {
 public:
  SSMBBlock(const SSMBConfig& config, Rng& rng);
  // Takes ownership of existing parameter handles (checkpoint loading, casts).
  SSMBBlock(const SSMBConfig& config, Tensor<T> router_weight, Tensor<T> router_bias,
            std::vector<Tensor<T>> expert_weights, std::vector<Tensor<T>> expert_biases);

  const SSMBConfig& config() const { return config_; }

  Routing<T> route(const Tensor<T>& router_input) const;
  ModulationParams<T> expert_modulation_params(const Tensor<T>& router_input, const std::vector<std::size_t>& winner,
                                               const Tensor<T>& gate) const;
  SSMBOutput<T> forward(const Tensor<T>& features) const;

  // Parameters under their checkpoint names relative to `ssmb.<slot>.`.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;

  Tensor<T> router_weight;  // 2C×N, logits = input · W + b
  Tensor<T> router_bias;    // N
  std::vector<Tensor<T>> expert_weights;  // N × (2C×2C), raw = input · W + b
  std::vector<Tensor<T>> expert_biases;   // N × 2C

 private:
  void check_shapes() const;

  SSMBConfig config_;
};

}  // namespace ssmb
