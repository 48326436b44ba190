// SPDX-License-Identifier: Apache-2.0

#include "ssmb/losses.hpp"

namespace ssmb {

void LossConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error("gamma must lie in [0, 1]");
  if (!(alpha >= 0.0)) throw Error("alpha must be non-negative");
  if (!(margin >= -1.0 && margin <= 1.0)) throw Error("margin must lie in [-1, 1]");
}

template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() || a.rank() < 1 || a.rank() > 2) {
    throw ShapeError("cosine_similarity needs matching B×D or D shapes, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const auto lhs = a.rank() == 1 ? reshape(a, {1, a.dim(0)}) : a;
  const auto rhs = b.rank() == 1 ? reshape(b, {1, b.dim(0)}) : b;
  auto dot = sum(lhs * rhs, {1});
  auto sq_a = sum(lhs * lhs, {1});
  auto sq_b = sum(rhs * rhs, {1});
  for (std::size_t i = 0; i < sq_a.numel(); ++i) {
    if (sq_a.data()[i] == T(0) || sq_b.data()[i] == T(0)) throw DomainError("cosine similarity of a zero-norm embedding");
  }
  return dot / (sqrt(sq_a) * sqrt(sq_b));
}

template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& source, const Tensor<T>& target, std::span<const int> labels,
                           double margin) {
  auto cos = cosine_similarity(source, target);
  if (labels.size() != cos.numel()) throw ShapeError("contrastive_loss label count does not match batch");
  std::vector<T> genuine(labels.size()), impostor(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DomainError("pair labels must be 0 or 1");
    genuine[i] = static_cast<T>(labels[i]);
    impostor[i] = T(1) - genuine[i];
  }
  const auto y = Tensor<T>::from({labels.size()}, std::move(genuine));
  const auto not_y = Tensor<T>::from({labels.size()}, std::move(impostor));
  auto pull = y * (T(1) - cos);
  auto push = not_y * maximum(cos - static_cast<T>(margin), Tensor<T>::scalar(T(0)));
  return mean(pull + push);
}

template <typename T>
Tensor<T> tsi_loss(const Tensor<T>& teacher, const Tensor<T>& student) {
  return mean(T(1) - cosine_similarity(teacher.detach(), student));
}

template <typename T>
Tensor<T> load_balance_loss(const std::vector<RoutingStats<T>>& stats) {
  if (stats.empty()) throw Error("load balance loss needs at least one routing block");
  Tensor<T> total;
  for (std::size_t k = 0; k < stats.size(); ++k) {
    const auto& s = stats[k];
    const std::size_t n = s.num_experts();
    if (s.mean_prob.shape() != Shape{n}) throw ShapeError("routing stats dispatch/probability size mismatch");
    std::vector<T> f(s.dispatch_fraction.begin(), s.dispatch_fraction.end());
    auto block = sum(Tensor<T>::from({n}, std::move(f)) * s.mean_prob) * static_cast<T>(n);
    total = k == 0 ? block : total + block;
  }
  return total / static_cast<T>(stats.size());
}

template <typename T>
LossTerms<T> total_loss(const Tensor<T>& student_source, const Tensor<T>& student_target,
                        const Tensor<T>& teacher_source, std::span<const int> labels,
                        const std::vector<RoutingStats<T>>& stats, const LossConfig& config) {
  config.validate();
  LossTerms<T> terms;
  terms.contrastive = contrastive_loss(student_source, student_target, labels, config.margin);
  terms.tsi = tsi_loss(teacher_source, student_source);
  terms.balance = stats.empty() ? Tensor<T>::scalar(T(0)) : load_balance_loss(stats);
  terms.total = terms.contrastive * static_cast<T>(1.0 - config.gamma) + terms.tsi * static_cast<T>(config.gamma) +
                terms.balance * static_cast<T>(config.alpha);
  return terms;
}

double combine_losses(double contrastive, double tsi, double balance, const LossConfig& config) {
  return (1.0 - config.gamma) * contrastive + config.gamma * tsi + config.alpha * balance;
}

#define SSMB_INSTANTIATE_LOSSES(T)                                                                              \
  template Tensor<T> cosine_similarity<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> contrastive_loss<T>(const Tensor<T>&, const Tensor<T>&, std::span<const int>, double);    \
  template Tensor<T> tsi_loss<T>(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> load_balance_loss<T>(const std::vector<RoutingStats<T>>&);                                 \
  template LossTerms<T> total_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::span<const int>, \
                                      const std::vector<RoutingStats<T>>&, const LossConfig&);

SSMB_INSTANTIATE_LOSSES(float)
SSMB_INSTANTIATE_LOSSES(double)

}  // namespace ssmb
