// SPDX-License-Identifier: Apache-2.0
//
// Biometric verification and identification metrics on cosine scores.
//
// Conventions shared by every threshold metric: a comparison is accepted when
// score >= t, so FAR(t) = #{impostor >= t} / I and FRR(t) = #{genuine < t} / G.
// No ROC interpolation is performed anywhere.

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ssmb/backbone.hpp"
#include "ssmb/synthdata.hpp"

namespace ssmb {

struct ScoreSet {
  std::vector<double> genuine;
  std::vector<double> impostor;
  // Optional per-score tags (probe modality), parallel to the score lists when non-empty.
  std::vector<std::string> genuine_tags;
  std::vector<std::string> impostor_tags;

  void add(double score, bool is_genuine, const std::string& tag = {});
  bool tagged() const { return !genuine_tags.empty() || !impostor_tags.empty(); }
  ScoreSet with_tag(const std::string& tag) const;
  ScoreSet without_tag(const std::string& tag) const;
};

// Probability that a random genuine score beats a random impostor, ties ½.
double roc_auc(const ScoreSet& scores);
// Midpoint of FAR and FRR at the distinct-score threshold minimizing |FAR − FRR|.
double eer(const ScoreSet& scores);
// Genuine acceptance at the smallest threshold with FAR <= far_target; 0 if none.
double vr_at_far(const ScoreSet& scores, double far_target);

using Embedding = std::vector<double>;

double cosine(std::span<const double> a, std::span<const double> b);

// Fraction of probes whose best-scoring gallery template (lowest index on
// ties) carries the probe's identity.
double rank1(const std::vector<Embedding>& probes, std::span<const int> probe_ids,
             const std::vector<Embedding>& gallery, std::span<const int> gallery_ids);

struct MetricsBlock {
  double auc = 0.0;  // all rates in percent
  double eer = 0.0;
  double rank1 = 0.0;
  double vr_far_01 = 0.0;  // FAR = 0.1 %
  double vr_far_1 = 0.0;   // FAR = 1 %
  std::size_t genuine = 0;
  std::size_t impostor = 0;
  std::size_t probes = 0;
};

struct MetricsReport {
  MetricsBlock aggregate;  // cross-modal probes pooled
  std::vector<std::pair<std::string, MetricsBlock>> per_modality;  // cross-modal, modality order
  std::vector<std::pair<std::string, MetricsBlock>> homogeneous;   // source-modality probes

  const MetricsBlock& modality(const std::string& name) const;
  std::string to_text() const;
  std::string to_csv() const;
};

struct ProtocolScores {
  ScoreSet scores;  // tagged with probe modality
  std::vector<Embedding> probe_embeddings;
  std::vector<int> probe_ids;
  std::vector<std::string> probe_tags;
  std::vector<Embedding> gallery;  // mean enroll embedding per dev identity
  std::vector<int> gallery_ids;
};

// Embeds records in fixed-size batches without recording gradients.
std::vector<Embedding> embed_records(const Model<float>& model, const ImageStore& store,
                                     std::span<const std::size_t> records);

// Source-modality gallery, probes in any modality. No modality information
// reaches the model.
ProtocolScores score_protocol(const Model<float>& model, const ImageStore& store);

MetricsBlock compute_block(const ProtocolScores& protocol, const std::vector<std::string>& tags);
MetricsReport evaluate(const ProtocolScores& protocol);

}  // namespace ssmb
