#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "pls/common.hpp"
#include "pls/dataset.hpp"
#include "pls/mining.hpp"
#include "pls/model.hpp"

namespace pls {

struct EvalProtocol {
  std::vector<int> query;
  std::vector<int> gallery;
  // Market1501-style: drop gallery samples sharing both identity and camera
  // with the query. The query's own index is always dropped.
  bool same_camera_exclusion = true;
  std::vector<int> ranks_to_report{1, 5, 10};
};

struct MetricsReport {
  std::vector<int> ranks;
  std::vector<double> cmc;  // aligned with ranks
  double mean_ap = 0.0;
  std::vector<double> per_query_ap;
  int skipped_queries = 0;  // queries with no valid positive

  double pseudo_precision = 1.0;
  double pseudo_recall = 0.0;
  double pseudo_ratio = 0.0;
  bool pseudo_precision_defaulted = false;

  double rank_at(int k) const {
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      if (ranks[i] == k) return cmc[i];
    }
    throw ValidationError("MetricsReport: rank " + std::to_string(k) +
                          " was not reported");
  }
};

// CMC rank-k and mAP over ranked gallery lists, ascending L2 distance on
// eval-mode embeddings. Distance ties break toward the lower gallery index.
inline MetricsReport evaluate(const ModelParams& model, const Dataset& dataset,
                              const EvalProtocol& protocol) {
  require(!protocol.query.empty(), "evaluate: empty query set");
  require(!protocol.gallery.empty(), "evaluate: empty gallery");
  require(!protocol.ranks_to_report.empty(), "evaluate: no ranks requested");

  // Embed every index referenced by the protocol exactly once.
  std::vector<int> needed = protocol.query;
  needed.insert(needed.end(), protocol.gallery.begin(), protocol.gallery.end());
  std::sort(needed.begin(), needed.end());
  needed.erase(std::unique(needed.begin(), needed.end()), needed.end());
  const Batch features = detail::embed_samples(model, dataset, needed);
  auto feature_of = [&](int idx) -> const Vec& {
    const auto it = std::lower_bound(needed.begin(), needed.end(), idx);
    return features[static_cast<std::size_t>(it - needed.begin())];
  };

  MetricsReport report;
  report.ranks = protocol.ranks_to_report;
  report.cmc.assign(report.ranks.size(), 0.0);

  for (const int q : protocol.query) {
    const auto& qs = dataset.samples[static_cast<std::size_t>(q)];
    struct Entry {
      double distance;
      int index;
      bool relevant;
    };
    std::vector<Entry> ranked;
    ranked.reserve(protocol.gallery.size());
    bool has_positive = false;
    for (const int g : protocol.gallery) {
      if (g == q) continue;
      const auto& gs = dataset.samples[static_cast<std::size_t>(g)];
      if (protocol.same_camera_exclusion && gs.identity == qs.identity &&
          gs.camera == qs.camera) {
        continue;
      }
      const bool relevant = gs.identity == qs.identity;
      has_positive = has_positive || relevant;
      ranked.push_back({l2_distance(feature_of(q), feature_of(g)), g, relevant});
    }
    if (!has_positive) {
      ++report.skipped_queries;
      continue;
    }
    std::sort(ranked.begin(), ranked.end(), [](const Entry& a, const Entry& b) {
      return a.distance < b.distance ||
             (a.distance == b.distance && a.index < b.index);
    });

    int first_hit = -1;
    int relevant_seen = 0;
    double ap = 0.0;
    for (std::size_t pos = 0; pos < ranked.size(); ++pos) {
      if (!ranked[pos].relevant) continue;
      ++relevant_seen;
      ap += static_cast<double>(relevant_seen) / static_cast<double>(pos + 1);
      if (first_hit < 0) first_hit = static_cast<int>(pos);
    }
    ap /= static_cast<double>(relevant_seen);
    report.per_query_ap.push_back(ap);
    for (std::size_t r = 0; r < report.ranks.size(); ++r) {
      if (first_hit < report.ranks[r]) report.cmc[r] += 1.0;
    }
  }

  const auto evaluated = report.per_query_ap.size();
  require(evaluated > 0, "evaluate: every query lacked a valid positive");
  for (auto& c : report.cmc) c /= static_cast<double>(evaluated);
  report.mean_ap =
      std::accumulate(report.per_query_ap.begin(), report.per_query_ap.end(),
                      0.0) /
      static_cast<double>(evaluated);
  return report;
}

struct PseudoQuality {
  double precision = 1.0;
  double recall = 0.0;
  double ratio = 0.0;
  bool precision_defaulted = false;
};

// Precision/recall/coverage of a pseudo-label set against withheld ground
// truth; diagnostics only, never an input to mining or training.
inline PseudoQuality pseudo_quality(const PseudoLabelSet& pseudo,
                                    const Dataset& dataset,
                                    std::size_t total_unlabeled) {
  require(total_unlabeled > 0, "pseudo_quality: no unlabeled samples");
  PseudoQuality q;
  if (pseudo.assignments.empty()) {
    q.precision_defaulted = true;  // undefined; reported as 1.0 with a flag
    return q;
  }
  long correct = 0;
  for (const auto& [index, a] : pseudo.assignments) {
    if (dataset.samples[static_cast<std::size_t>(index)].identity ==
        a.identity) {
      ++correct;
    }
  }
  const auto assigned = static_cast<double>(pseudo.assignments.size());
  q.precision = static_cast<double>(correct) / assigned;
  q.recall = static_cast<double>(correct) / static_cast<double>(total_unlabeled);
  q.ratio = assigned / static_cast<double>(total_unlabeled);
  return q;
}

inline nlohmann::ordered_json metrics_report_to_json(
    const MetricsReport& report) {
  nlohmann::ordered_json j;
  for (std::size_t i = 0; i < report.ranks.size(); ++i) {
    j["rank" + std::to_string(report.ranks[i])] = report.cmc[i];
  }
  j["mAP"] = report.mean_ap;
  j["evaluated_queries"] = report.per_query_ap.size();
  j["skipped_queries"] = report.skipped_queries;
  j["pseudo_precision"] = report.pseudo_precision;
  j["pseudo_recall"] = report.pseudo_recall;
  j["pseudo_ratio"] = report.pseudo_ratio;
  if (report.pseudo_precision_defaulted) {
    j["pseudo_precision_defaulted"] = true;
  }
  return j;
}

}  // namespace pls
