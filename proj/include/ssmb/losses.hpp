// SPDX-License-Identifier: Apache-2.0
//
// Training objectives for the student network: cosine contrastive loss over
// source/target pairs, teacher-student identity loss on source images, the
// switch load-balance term, and their weighted sum
//
//   total = (1 - gamma) * contrastive + gamma * tsi + alpha * balance

#pragma once

#include <span>
#include <vector>

#include "ssmb/ssmb_block.hpp"
#include "ssmb/tensor.hpp"

namespace ssmb {

struct LossConfig {
  double margin = 0.0;
  double gamma = 0.5;
  double alpha = 0.01;

  void validate() const;
};

// Row-wise cosine similarity of two B×D batches (or two D-vectors) -> B.
// Throws DomainError on zero-norm rows.
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b);

// Mean over pairs of y·(1 − cos) + (1 − y)·max(0, cos − m); labels are 0/1.
template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& source, const Tensor<T>& target, std::span<const int> labels,
                           double margin);

template <typename T>
Tensor<T> tsi_loss(const Tensor<T>& teacher, const Tensor<T>& student);

// Mean over blocks of N · Σ_i f_i · P_i. Gradient flows through P only.
template <typename T>
Tensor<T> load_balance_loss(const std::vector<RoutingStats<T>>& stats);

template <typename T>
struct LossTerms {
  Tensor<T> contrastive;
  Tensor<T> tsi;
  Tensor<T> balance;
  Tensor<T> total;
};

template <typename T>
LossTerms<T> total_loss(const Tensor<T>& student_source, const Tensor<T>& student_target,
                        const Tensor<T>& teacher_source, std::span<const int> labels,
                        const std::vector<RoutingStats<T>>& stats, const LossConfig& config);

// Scalar recombination used when reporting logged loss parts.
double combine_losses(double contrastive, double tsi, double balance, const LossConfig& config);

}  // namespace ssmb
