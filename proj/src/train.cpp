// SPDX-License-Identifier: Apache-2.0

#include "ssmb/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace ssmb {

// ---- Adam ----------------------------------------------------------------------

template <typename T>
void adam_update(std::span<T> values, std::span<const T> grad, AdamMoments& moments, std::size_t step,
                 const AdamConfig& config) {
  if (step == 0) throw Error("Adam step count must be at least 1");
  if (!grad.empty() && grad.size() != values.size()) throw ShapeError("Adam gradient does not match parameter");
  if (moments.m.empty()) {
    moments.m.assign(values.size(), 0.0);
    moments.v.assign(values.size(), 0.0);
  }
  if (moments.m.size() != values.size() || moments.v.size() != values.size()) {
    throw ShapeError("Adam moments do not match parameter");
  }
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
    moments.m[i] = config.beta1 * moments.m[i] + (1.0 - config.beta1) * g;
    moments.v[i] = config.beta2 * moments.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = moments.m[i] / c1;
    const double v_hat = moments.v[i] / c2;
    values[i] = static_cast<T>(static_cast<double>(values[i]) - config.lr * m_hat / (std::sqrt(v_hat) + config.epsilon));
  }
}

template <typename T>
void adam_step(std::vector<Parameter<T>>& params, AdamState& state, const AdamConfig& config) {
  ++state.step;
  for (auto& p : params) {
    if (p.frozen) continue;
    std::span<const T> grad;
    if (p.value.has_grad()) grad = p.value.grad();
    adam_update(p.value.mutable_data(), grad, state.moments[p.name], state.step, config);
  }
}

// ---- pretraining -------------------------------------------------------------

PretrainResult pretrain_teacher(const ImageStore& store, const PretrainConfig& config) {
  if (config.epochs == 0 || config.batch_size == 0) throw Error("pretraining needs epochs and batch size > 0");
  if (!(config.lr > 0.0)) throw Error("learning rate must be positive");
  const auto& manifest = store.manifest();
  std::vector<std::size_t> records;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (r.split == Split::kTrain && r.modality == Modality::kVis) records.push_back(i);
  }
  if (records.empty()) throw DataError("empty-dataset: no source-modality training images");
  const auto ids = manifest.identities(Split::kTrain);
  auto label_of = [&](std::size_t record) {
    const int id = manifest.records[record].identity;
    return static_cast<std::size_t>(std::lower_bound(ids.begin(), ids.end(), id) - ids.begin());
  };

  BackboneConfig bc;
  bc.num_pretrain_classes = ids.size();
  auto model = build_backbone<float>(bc, config.seed);
  Rng rng(mix_seed({config.seed, 0x9E7A1Cull}));
  AdamConfig adam;
  adam.lr = config.lr;
  AdamState state;

  PretrainResult result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(records);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < records.size(); start += config.batch_size) {
      const std::span<const std::size_t> chunk(records.data() + start,
                                               std::min(config.batch_size, records.size() - start));
      std::vector<std::size_t> labels;
      for (auto r : chunk) labels.push_back(label_of(r));
      auto loss = cross_entropy(forward_logits(model, store.batch(chunk)), labels);
      backward(loss);
      adam_step(model.parameters(), state, adam);
      for (auto& p : model.parameters()) p.value.zero_grad();
      loss_sum += loss.item();
      ++batches;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }

  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < records.size(); start += 64) {
    const std::span<const std::size_t> chunk(records.data() + start, std::min<std::size_t>(64, records.size() - start));
    const auto logits = forward_logits(model, store.batch(chunk));
    const std::size_t k = logits.dim(1);
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      const auto row = logits.data().subspan(r * k, k);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == label_of(chunk[r])) ++correct;
    }
  }
  result.train_accuracy = static_cast<double>(correct) / static_cast<double>(records.size());
  model.remove_head();
  model.unfreeze_all();
  result.model = std::move(model);
  return result;
}

// ---- student ---------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw Error("learning rate must be positive");
  if (epochs == 0) throw Error("epochs must be at least 1");
  if (batch_size < 2) throw Error("batch size must be at least 2");
  if (num_experts == 0) throw Error("at least one expert is required");
  if (!(genuine_fraction > 0.0 && genuine_fraction < 1.0)) throw Error("genuine fraction must lie in (0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw Error("Adam betas must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw Error("Adam epsilon must be positive");
  loss().validate();
}

std::size_t default_steps_per_epoch(const DatasetManifest& manifest, std::size_t batch_size) {
  const auto ids = manifest.identities(Split::kTrain);
  if (ids.empty()) throw DataError("missing-split: manifest has no train records");
  if (batch_size == 0) throw Error("batch size must be positive");
  const std::size_t per_id = manifest.count(Split::kTrain, Modality::kVis) / ids.size();
  const std::size_t pairs = ids.size() * per_id;
  return std::max<std::size_t>(1, (pairs + batch_size - 1) / batch_size);
}

template <typename T>
Model<T> make_student(const Model<T>& teacher, std::size_t num_experts, GateMode gate_mode, std::uint64_t seed) {
  if (teacher.has_ssmb()) throw Error("teacher already carries SSMB blocks");
  if (teacher.has_head()) throw Error("teacher still carries a classification head");
  auto student = teacher.clone();
  for (std::size_t s = 0; s < kNumStages; ++s) {
    Rng rng(mix_seed({seed, 0x55A1B0ull, s}));
    SSMBConfig sc;
    sc.channels = student.config().stage_channels[s];
    sc.num_experts = num_experts;
    sc.gate_mode = gate_mode;
    student.install_ssmb(s, SSMBBlock<T>(sc, rng));
  }
  student.freeze_all_but_ssmb();
  return student;
}

template <typename T>
LossTerms<T> student_loss(const Model<T>& student, const Model<T>& teacher, const Tensor<T>& source,
                          const Tensor<T>& target, std::span<const int> labels, const LossConfig& config,
                          ForwardContext<T>* context) {
  if (source.shape() != target.shape()) throw ShapeError("pair sides differ in shape");
  const std::size_t b = source.dim(0);
  ForwardContext<T> local;
  ForwardContext<T>& ctx = context ? *context : local;
  const auto emb = forward_embed(student, concat(std::vector<Tensor<T>>{source, target}, 0), &ctx);
  const auto student_source = slice(emb, 0, 0, b);
  const auto student_target = slice(emb, 0, b, 2 * b);
  Tensor<T> teacher_source;
  {
    NoGradGuard no_grad;
    teacher_source = forward_embed(teacher, source);
  }
  return total_loss(student_source, student_target, teacher_source, labels, ctx.routing, config);
}

Model<float> train_student(const Model<float>& teacher_in, const ImageStore& store, const TrainConfig& config,
                           RunLog* log) {
  config.validate();
  auto teacher = teacher_in.clone();
  teacher.freeze_all();
  auto student = make_student(teacher, config.num_experts, config.gate_mode, config.seed);
  if (config.train_backbone) student.unfreeze_all();
  const std::size_t steps =
      config.steps_per_epoch ? config.steps_per_epoch : default_steps_per_epoch(store.manifest(), config.batch_size);
  const PairSampler sampler(store);
  Rng rng(mix_seed({config.seed, 0xDA7A5A3Eull}));
  AdamState state;
  const auto adam = config.adam();
  const auto loss_config = config.loss();
  if (log) {
    *log = RunLog{};
    log->config = config;
    log->steps_per_epoch = steps;
  }

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::vector<std::size_t>> hist(kNumStages, std::vector<std::size_t>(config.num_experts, 0));
    for (std::size_t step = 0; step < steps; ++step) {
      const auto pairs = sampler.sample(config.batch_size, config.genuine_fraction, rng);
      ForwardContext<float> ctx;
      const auto terms = student_loss(student, teacher, pairs.source, pairs.target, pairs.labels, loss_config, &ctx);
      backward(terms.total);
      adam_step(student.parameters(), state, adam);
      for (auto& p : student.parameters()) p.value.zero_grad();
      for (std::size_t k = 0; k < ctx.winners.size(); ++k) {
        for (auto w : ctx.winners[k]) ++hist[k][w];
      }
      if (log) {
        log->steps.push_back({epoch, step, terms.contrastive.item(), terms.tsi.item(), terms.balance.item(),
                              terms.total.item()});
      }
    }
    if (log) log->routing.push_back(std::move(hist));
  }
  return student;
}

double RunLog::epoch_mean_total(std::size_t epoch) const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : steps) {
    if (s.epoch != epoch) continue;
    sum += s.total;
    ++n;
  }
  if (n == 0) throw Error("run log has no steps for epoch " + std::to_string(epoch));
  return sum / static_cast<double>(n);
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::string counts(const std::vector<std::size_t>& c) {
  std::string out = "[";
  for (std::size_t i = 0; i < c.size(); ++i) out += (i ? ", " : "") + std::to_string(c[i]);
  return out + "]";
}

}  // namespace

std::string RunLog::to_text() const {
  std::ostringstream os;
  os << "# ssmb-runlog-v1\n";
  os << "config:\n";
  os << "  lr: " << num(config.lr) << '\n';
  os << "  epochs: " << config.epochs << '\n';
  os << "  batch_size: " << config.batch_size << '\n';
  os << "  adam: [" << num(config.beta1) << ", " << num(config.beta2) << ", " << num(config.adam_epsilon) << "]\n";
  os << "  gamma: " << num(config.gamma) << '\n';
  os << "  alpha: " << num(config.alpha) << '\n';
  os << "  margin: " << num(config.margin) << '\n';
  os << "  experts: " << config.num_experts << '\n';
  os << "  gate_mode: " << gate_mode_name(config.gate_mode) << '\n';
  os << "  seed: " << config.seed << '\n';
  os << "  steps_per_epoch: " << steps_per_epoch << '\n';
  os << "  train_backbone: " << (config.train_backbone ? "true" : "false") << '\n';
  os << "steps:  # epoch step contrastive tsi balance total\n";
  for (const auto& s : steps) {
    os << "  - [" << s.epoch << ", " << s.step << ", " << num(s.contrastive) << ", " << num(s.tsi) << ", "
       << num(s.balance) << ", " << num(s.total) << "]\n";
  }
  os << "routing:\n";
  for (std::size_t e = 0; e < routing.size(); ++e) {
    os << "  epoch." << e << ":\n";
    for (std::size_t k = 0; k < routing[e].size(); ++k) os << "    block." << k << ": " << counts(routing[e][k]) << '\n';
  }
  if (final_metrics) {
    os << "final_metrics:\n";
    std::istringstream lines(final_metrics->to_text());
    for (std::string line; std::getline(lines, line);) os << "  " << line << '\n';
  }
  return os.str();
}

// ---- routing inspection ------------------------------------------------------------

RoutingReport inspect_routing(const Model<float>& student, const ImageStore& store) {
  std::vector<std::size_t> probes;
  const auto& records = store.manifest().records;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == Split::kDevProbe) probes.push_back(i);
  }
  return inspect_routing(student, store, probes);
}

RoutingReport inspect_routing(const Model<float>& student, const ImageStore& store,
                              std::span<const std::size_t> records) {
  RoutingReport report;
  std::vector<std::size_t> slots;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    if (student.slot(s)) {
      slots.push_back(s);
      report.num_experts = student.slot(s)->config().num_experts;
    }
  }
  if (slots.empty()) throw Error("model has no SSMB blocks to inspect");
  report.blocks.resize(slots.size());
  const auto& manifest = store.manifest();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::string m(modality_name(manifest.records.at(records[i]).modality));
    ++report.probes[m];
    for (auto& block : report.blocks) block.try_emplace(m, report.num_experts, 0);
  }
  NoGradGuard no_grad;
  constexpr std::size_t kBatch = 64;
  for (std::size_t start = 0; start < records.size(); start += kBatch) {
    const auto chunk = records.subspan(start, std::min(kBatch, records.size() - start));
    ForwardContext<float> ctx;
    forward_embed(student, store.batch(chunk), &ctx);
    for (std::size_t k = 0; k < ctx.winners.size(); ++k) {
      for (std::size_t r = 0; r < chunk.size(); ++r) {
        const std::string m(modality_name(manifest.records[chunk[r]].modality));
        ++report.blocks[k][m][ctx.winners[k][r]];
      }
    }
  }
  return report;
}

std::string RoutingReport::to_text() const {
  std::ostringstream os;
  os << "experts: " << num_experts << '\n';
  os << "probes:\n";
  for (const auto& [m, n] : probes) os << "  " << m << ": " << n << '\n';
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    os << "block." << k << ":\n";
    for (auto mod : kAllModalities) {
      const auto it = blocks[k].find(std::string(modality_name(mod)));
      if (it != blocks[k].end()) os << "  " << it->first << ": " << counts(it->second) << '\n';
    }
  }
  return os.str();
}

// ---- expert sweep ----------------------------------------------------------------

std::vector<SweepRow> expert_sweep(const Model<float>& teacher, const ImageStore& store, const TrainConfig& base,
                                   std::span<const std::size_t> expert_counts) {
  std::vector<SweepRow> rows;
  rows.push_back({"baseline", evaluate(score_protocol(teacher, store)).aggregate});
  for (auto n : expert_counts) {
    auto config = base;
    config.num_experts = n;
    const auto student = train_student(teacher, store, config);
    rows.push_back({std::to_string(n), evaluate(score_protocol(student, store)).aggregate});
  }
  return rows;
}

std::string format_sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "| Experts (N) | AUC | EER | Rank-1 |\n";
  os << "|---|---|---|---|\n";
  for (const auto& r : rows) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "| %s | %.2f | %.2f | %.2f |\n", r.label.c_str(), r.metrics.auc, r.metrics.eer,
                  r.metrics.rank1);
    os << buf;
  }
  return os.str();
}

#define SSMB_INSTANTIATE_TRAIN(T)                                                                                   \
  template void adam_step<T>(std::vector<Parameter<T>>&, AdamState&, const AdamConfig&);                            \
  template void adam_update<T>(std::span<T>, std::span<const T>, AdamMoments&, std::size_t, const AdamConfig&);     \
  template Model<T> make_student<T>(const Model<T>&, std::size_t, GateMode, std::uint64_t);                         \
  template LossTerms<T> student_loss<T>(const Model<T>&, const Model<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                        std::span<const int>, const LossConfig&, ForwardContext<T>*);

SSMB_INSTANTIATE_TRAIN(float)
SSMB_INSTANTIATE_TRAIN(double)

}  // namespace ssmb
