// SPDX-License-Identifier: Apache-2.0
//
// Optimizer, teacher pretraining, SSMB student training, routing inspection
// and the expert-count sweep.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssmb/backbone.hpp"
#include "ssmb/eval.hpp"
#include "ssmb/losses.hpp"
#include "ssmb/synthdata.hpp"

namespace ssmb {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

struct AdamState {
  std::size_t step = 0;
  std::map<std::string, AdamMoments> moments;  // keyed by parameter name
};

// One bias-corrected Adam update of every non-frozen parameter from its
// accumulated gradient (absent gradient = zero). Frozen parameters are never
// touched.
template <typename T>
void adam_step(std::vector<Parameter<T>>& params, AdamState& state, const AdamConfig& config);

// Raw update on one buffer; `step` is the 1-based count after increment.
template <typename T>
void adam_update(std::span<T> values, std::span<const T> grad, AdamMoments& moments, std::size_t step,
                 const AdamConfig& config);

struct PretrainConfig {
  std::size_t epochs = 60;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 7;
};

struct PretrainResult {
  Model<float> model;  // head removed
  double train_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

// Cross-entropy over train identities on source-modality images.
PretrainResult pretrain_teacher(const ImageStore& store, const PretrainConfig& config);

struct TrainConfig {
  double lr = 1e-4;
  std::size_t epochs = 50;
  std::size_t batch_size = 48;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double gamma = 0.5;
  double alpha = 0.01;
  double margin = 0.0;
  std::size_t num_experts = 4;
  GateMode gate_mode = GateMode::kScaled;
  std::uint64_t seed = 7;
  double genuine_fraction = 0.5;
  std::size_t steps_per_epoch = 0;  // 0: derived from the train split
  bool train_backbone = false;      // unfreeze every parameter (separability ceiling runs)

  void validate() const;
  LossConfig loss() const { return {margin, gamma, alpha}; }
  AdamConfig adam() const { return {lr, beta1, beta2, adam_epsilon}; }
};

// ceil(train identities × samples per identity / batch).
std::size_t default_steps_per_epoch(const DatasetManifest& manifest, std::size_t batch_size);

struct StepLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double contrastive = 0.0;
  double tsi = 0.0;
  double balance = 0.0;
  double total = 0.0;
};

struct RunLog {
  TrainConfig config;
  std::size_t steps_per_epoch = 0;
  std::vector<StepLog> steps;
  // [epoch][block][expert] winner counts over both pair sides.
  std::vector<std::vector<std::vector<std::size_t>>> routing;
  std::optional<MetricsReport> final_metrics;

  double epoch_mean_total(std::size_t epoch) const;
  std::string to_text() const;
};

// Student = teacher weights + one fresh SSMB block per insertion point. The
// backbone copy is frozen; only SSMB parameters are updated.
template <typename T>
Model<T> make_student(const Model<T>& teacher, std::size_t num_experts, GateMode gate_mode, std::uint64_t seed);

// Weighted loss for one pair batch. The student sees source and target images
// as one concatenated batch; the teacher sees the source images without
// recording gradients.
template <typename T>
LossTerms<T> student_loss(const Model<T>& student, const Model<T>& teacher, const Tensor<T>& source,
                          const Tensor<T>& target, std::span<const int> labels, const LossConfig& config,
                          ForwardContext<T>* context = nullptr);

Model<float> train_student(const Model<float>& teacher, const ImageStore& store, const TrainConfig& config,
                           RunLog* log = nullptr);

struct RoutingReport {
  std::size_t num_experts = 0;
  // [block] -> modality name -> winner counts over dev probes.
  std::vector<std::map<std::string, std::vector<std::size_t>>> blocks;
  std::map<std::string, std::size_t> probes;

  std::string to_text() const;
};

RoutingReport inspect_routing(const Model<float>& student, const ImageStore& store);
RoutingReport inspect_routing(const Model<float>& student, const ImageStore& store,
                              std::span<const std::size_t> records);

struct SweepRow {
  std::string label;
  MetricsBlock metrics;
};

// Baseline row for the frozen teacher, then one row per expert count.
std::vector<SweepRow> expert_sweep(const Model<float>& teacher, const ImageStore& store, const TrainConfig& base,
                                   std::span<const std::size_t> expert_counts);
std::string format_sweep_table(const std::vector<SweepRow>& rows);

}  // namespace ssmb
