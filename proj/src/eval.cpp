// SPDX-License-Identifier: Apache-2.0

#include "ssmb/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

namespace ssmb {

void ScoreSet::add(double score, bool is_genuine, const std::string& tag) {
  (is_genuine ? genuine : impostor).push_back(score);
  if (!tag.empty()) (is_genuine ? genuine_tags : impostor_tags).push_back(tag);
}

namespace {

ScoreSet filter(const ScoreSet& s, const std::string& tag, bool keep_matching) {
  if (s.genuine_tags.size() != s.genuine.size() || s.impostor_tags.size() != s.impostor.size()) {
    throw Error("score set is not fully tagged");
  }
  ScoreSet out;
  for (std::size_t i = 0; i < s.genuine.size(); ++i) {
    if ((s.genuine_tags[i] == tag) == keep_matching) out.add(s.genuine[i], true, s.genuine_tags[i]);
  }
  for (std::size_t i = 0; i < s.impostor.size(); ++i) {
    if ((s.impostor_tags[i] == tag) == keep_matching) out.add(s.impostor[i], false, s.impostor_tags[i]);
  }
  return out;
}

void require_nonempty(const ScoreSet& s) {
  if (s.genuine.empty() || s.impostor.empty()) throw Error("metrics need non-empty genuine and impostor scores");
}

std::vector<double> sorted(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v;
}

// Count of values >= t / < t in a sorted list.
std::size_t count_at_least(const std::vector<double>& s, double t) {
  return static_cast<std::size_t>(s.end() - std::lower_bound(s.begin(), s.end(), t));
}

std::vector<double> distinct_thresholds(const ScoreSet& s) {
  std::vector<double> all = s.genuine;
  all.insert(all.end(), s.impostor.begin(), s.impostor.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  return all;
}

}  // namespace

ScoreSet ScoreSet::with_tag(const std::string& tag) const { return filter(*this, tag, true); }
ScoreSet ScoreSet::without_tag(const std::string& tag) const { return filter(*this, tag, false); }

double roc_auc(const ScoreSet& scores) {
  require_nonempty(scores);
  const auto imp = sorted(scores.impostor);
  // Twice the Mann–Whitney U statistic, kept integral.
  unsigned long long twice_u = 0;
  for (double g : scores.genuine) {
    const auto lo = std::lower_bound(imp.begin(), imp.end(), g);
    const auto hi = std::upper_bound(lo, imp.end(), g);
    twice_u += 2ULL * static_cast<unsigned long long>(lo - imp.begin()) + static_cast<unsigned long long>(hi - lo);
  }
  return static_cast<double>(twice_u) /
         (2.0 * static_cast<double>(scores.genuine.size()) * static_cast<double>(scores.impostor.size()));
}

double eer(const ScoreSet& scores) {
  require_nonempty(scores);
  const auto gen = sorted(scores.genuine);
  const auto imp = sorted(scores.impostor);
  const auto g_count = static_cast<long long>(gen.size());
  const auto i_count = static_cast<long long>(imp.size());
  long long best_gap = -1;
  long long best_far = 0, best_frr = 0;
  for (double t : distinct_thresholds(scores)) {
    const auto far = static_cast<long long>(count_at_least(imp, t));
    const auto frr = g_count - static_cast<long long>(count_at_least(gen, t));
    // |far/I − frr/G| compared exactly through cross-multiplication.
    const long long gap = std::llabs(far * g_count - frr * i_count);
    if (best_gap < 0 || gap < best_gap) {
      best_gap = gap;
      best_far = far;
      best_frr = frr;
    }
  }
  return (static_cast<double>(best_far) / static_cast<double>(i_count) +
          static_cast<double>(best_frr) / static_cast<double>(g_count)) /
         2.0;
}

double vr_at_far(const ScoreSet& scores, double far_target) {
  require_nonempty(scores);
  if (!(far_target > 0.0 && far_target < 1.0)) throw Error("FAR target must lie in (0, 1)");
  const auto gen = sorted(scores.genuine);
  const auto imp = sorted(scores.impostor);
  const auto i_count = static_cast<double>(imp.size());
  for (double t : distinct_thresholds(scores)) {
    if (static_cast<double>(count_at_least(imp, t)) / i_count <= far_target) {
      return static_cast<double>(count_at_least(gen, t)) / static_cast<double>(gen.size());
    }
  }
  return 0.0;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("cosine of mismatched embeddings");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine of a zero-norm embedding");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double rank1(const std::vector<Embedding>& probes, std::span<const int> probe_ids, const std::vector<Embedding>& gallery,
             std::span<const int> gallery_ids) {
  if (probes.size() != probe_ids.size() || gallery.size() != gallery_ids.size()) {
    throw ShapeError("rank1 embeddings and identities differ in count");
  }
  if (probes.empty() || gallery.empty()) throw Error("rank1 needs probes and a gallery");
  std::size_t hits = 0;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    if (std::find(gallery_ids.begin(), gallery_ids.end(), probe_ids[p]) == gallery_ids.end()) {
      throw Error("probe identity " + std::to_string(probe_ids[p]) + " missing from gallery");
    }
    std::size_t best = 0;
    double best_score = cosine(probes[p], gallery[0]);
    for (std::size_t g = 1; g < gallery.size(); ++g) {
      const double s = cosine(probes[p], gallery[g]);
      if (s > best_score) {
        best_score = s;
        best = g;
      }
    }
    if (gallery_ids[best] == probe_ids[p]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

// ---- protocol ----------------------------------------------------------------

std::vector<Embedding> embed_records(const Model<float>& model, const ImageStore& store,
                                     std::span<const std::size_t> records) {
  constexpr std::size_t kBatch = 64;
  NoGradGuard no_grad;
  std::vector<Embedding> out;
  out.reserve(records.size());
  for (std::size_t start = 0; start < records.size(); start += kBatch) {
    const auto chunk = records.subspan(start, std::min(kBatch, records.size() - start));
    const auto emb = forward_embed(model, store.batch(chunk));
    const std::size_t dim = emb.dim(1);
    const auto values = emb.data();
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      out.emplace_back(values.begin() + static_cast<std::ptrdiff_t>(r * dim),
                       values.begin() + static_cast<std::ptrdiff_t>((r + 1) * dim));
    }
  }
  return out;
}

ProtocolScores score_protocol(const Model<float>& model, const ImageStore& store) {
  const auto& manifest = store.manifest();
  std::vector<std::size_t> enroll, probe;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    if (manifest.records[i].split == Split::kDevEnroll) enroll.push_back(i);
    if (manifest.records[i].split == Split::kDevProbe) probe.push_back(i);
  }
  if (enroll.empty()) throw DataError("missing-split: manifest has no dev-enroll records");
  if (probe.empty()) throw DataError("missing-split: manifest has no dev-probe records");

  ProtocolScores out;
  out.gallery_ids = manifest.identities(Split::kDevEnroll);
  const auto enroll_emb = embed_records(model, store, enroll);
  for (int id : out.gallery_ids) {
    Embedding tmpl;
    std::size_t n = 0;
    for (std::size_t k = 0; k < enroll.size(); ++k) {
      if (manifest.records[enroll[k]].identity != id) continue;
      if (tmpl.empty()) tmpl.assign(enroll_emb[k].size(), 0.0);
      for (std::size_t d = 0; d < tmpl.size(); ++d) tmpl[d] += enroll_emb[k][d];
      ++n;
    }
    for (auto& v : tmpl) v /= static_cast<double>(n);
    out.gallery.push_back(std::move(tmpl));
  }

  out.probe_embeddings = embed_records(model, store, probe);
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const auto& rec = manifest.records[probe[k]];
    out.probe_ids.push_back(rec.identity);
    out.probe_tags.emplace_back(modality_name(rec.modality));
    for (std::size_t g = 0; g < out.gallery.size(); ++g) {
      out.scores.add(cosine(out.probe_embeddings[k], out.gallery[g]), out.gallery_ids[g] == rec.identity,
                     out.probe_tags.back());
    }
  }
  return out;
}

MetricsBlock compute_block(const ProtocolScores& protocol, const std::vector<std::string>& tags) {
  auto selected = [&](const std::string& tag) { return std::find(tags.begin(), tags.end(), tag) != tags.end(); };
  ScoreSet scores;
  for (std::size_t i = 0; i < protocol.scores.genuine.size(); ++i) {
    if (selected(protocol.scores.genuine_tags[i])) scores.add(protocol.scores.genuine[i], true, protocol.scores.genuine_tags[i]);
  }
  for (std::size_t i = 0; i < protocol.scores.impostor.size(); ++i) {
    if (selected(protocol.scores.impostor_tags[i])) scores.add(protocol.scores.impostor[i], false, protocol.scores.impostor_tags[i]);
  }
  std::vector<Embedding> probes;
  std::vector<int> ids;
  for (std::size_t p = 0; p < protocol.probe_embeddings.size(); ++p) {
    if (!selected(protocol.probe_tags[p])) continue;
    probes.push_back(protocol.probe_embeddings[p]);
    ids.push_back(protocol.probe_ids[p]);
  }
  MetricsBlock block;
  block.auc = 100.0 * roc_auc(scores);
  block.eer = 100.0 * eer(scores);
  block.rank1 = 100.0 * rank1(probes, ids, protocol.gallery, protocol.gallery_ids);
  block.vr_far_01 = 100.0 * vr_at_far(scores, 0.001);
  block.vr_far_1 = 100.0 * vr_at_far(scores, 0.01);
  block.genuine = scores.genuine.size();
  block.impostor = scores.impostor.size();
  block.probes = probes.size();
  return block;
}

MetricsReport evaluate(const ProtocolScores& protocol) {
  const std::string source(modality_name(Modality::kVis));
  std::vector<std::string> cross;
  bool has_source = false;
  for (auto m : kAllModalities) {
    const std::string name(modality_name(m));
    if (std::find(protocol.probe_tags.begin(), protocol.probe_tags.end(), name) == protocol.probe_tags.end()) continue;
    if (name == source) {
      has_source = true;
    } else {
      cross.push_back(name);
    }
  }
  if (cross.empty()) throw DataError("protocol has no cross-modal probes");
  MetricsReport report;
  report.aggregate = compute_block(protocol, cross);
  for (const auto& m : cross) report.per_modality.emplace_back(m, compute_block(protocol, {m}));
  if (has_source) report.homogeneous.emplace_back(source, compute_block(protocol, {source}));
  return report;
}

const MetricsBlock& MetricsReport::modality(const std::string& name) const {
  for (const auto& [m, block] : per_modality) {
    if (m == name) return block;
  }
  for (const auto& [m, block] : homogeneous) {
    if (m == name) return block;
  }
  throw Error("report has no modality " + name);
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

void write_block(std::ostringstream& os, const MetricsBlock& b, const std::string& indent) {
  os << indent << "auc: " << pct(b.auc) << '\n';
  os << indent << "eer: " << pct(b.eer) << '\n';
  os << indent << "rank1: " << pct(b.rank1) << '\n';
  os << indent << "vr_far_0.1: " << pct(b.vr_far_01) << '\n';
  os << indent << "vr_far_1.0: " << pct(b.vr_far_1) << '\n';
  os << indent << "genuine: " << b.genuine << '\n';
  os << indent << "impostor: " << b.impostor << '\n';
  os << indent << "probes: " << b.probes << '\n';
}

void csv_block(std::ostringstream& os, const MetricsBlock& b, const std::string& modality) {
  os << "auc," << modality << ',' << pct(b.auc) << '\n';
  os << "eer," << modality << ',' << pct(b.eer) << '\n';
  os << "rank1," << modality << ',' << pct(b.rank1) << '\n';
  os << "vr_far_0.1," << modality << ',' << pct(b.vr_far_01) << '\n';
  os << "vr_far_1.0," << modality << ',' << pct(b.vr_far_1) << '\n';
}

}  // namespace

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  write_block(os, aggregate, "");
  os << "per_modality:\n";
  for (const auto& [m, b] : per_modality) {
    os << "  " << m << ":\n";
    write_block(os, b, "    ");
  }
  if (!homogeneous.empty()) {
    os << "homogeneous:\n";
    for (const auto& [m, b] : homogeneous) {
      os << "  " << m << ":\n";
      write_block(os, b, "    ");
    }
  }
  return os.str();
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "metric,modality,value\n";
  csv_block(os, aggregate, "all");
  for (const auto& [m, b] : per_modality) csv_block(os, b, m);
  for (const auto& [m, b] : homogeneous) csv_block(os, b, m);
  return os.str();
}

}  // namespace ssmb
