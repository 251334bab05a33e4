#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include "pls/common.hpp"

namespace pls {

enum class MemberRole { LabeledAnchor, Pseudo };

// B identity groups of S members each; exactly one labeled anchor per group.
// Members index into a batch-wide embedding array so gradients line up with
// the forward pass.
struct TripletBatch {
  struct Member {
    int batch_index = 0;
    MemberRole role = MemberRole::Pseudo;
  };
  struct Group {
    int identity = 0;
    std::vector<Member> members;
  };
  std::vector<Group> groups;
  int batch_size = 0;
};

inline void validate_triplet_batch(const TripletBatch& batch) {
  require(batch.groups.size() >= 2,
          "triplet batch: need B >= 2 groups so a negative pair exists");
  const std::size_t group_size = batch.groups.front().members.size();
  std::set<int> identities;
  for (const auto& group : batch.groups) {
    require(group.members.size() == group_size,
            "triplet batch: all groups must have the same size");
    require(!group.members.empty(), "triplet batch: empty group");
    require(identities.insert(group.identity).second,
            "triplet batch: duplicate identity across groups");
    int anchors = 0;
    for (const auto& m : group.members) {
      require(m.batch_index >= 0 && m.batch_index < batch.batch_size,
              "triplet batch: member index out of range");
      if (m.role == MemberRole::LabeledAnchor) ++anchors;
    }
    require(anchors == 1, "triplet batch: exactly one labeled anchor per group");
  }
}

enum class TripletNorm { Sum, MeanOverAnchors };

struct TripletOptions {
  double margin = 0.3;
  bool hinge = true;  // clamp per-anchor terms at zero
  TripletNorm norm = TripletNorm::Sum;
};

struct AnchorDiagnostics {
  int batch_index = 0;
  double positive_distance = 0.0;  // hardest (or soften) positive term
  double negative_distance = 0.0;  // hardest negative
  bool hinge_active = false;
};

struct LossValue {
  double value = 0.0;
  std::vector<Vec> embedding_grads;  // per batch index; empty if unused
  std::vector<Vec> logit_grads;      // per batch index; empty if unused
  std::vector<AnchorDiagnostics> anchors;
  int active_hinge_count = 0;
};

// Mean over the batch of -log softmax(logits)[label], with max-subtraction.
inline LossValue softmax_ce(const std::vector<Vec>& logits,
                            const std::vector<int>& labels) {
  require(!logits.empty(), "softmax_ce: empty batch");
  require(logits.size() == labels.size(),
          "softmax_ce: labels/logits size mismatch");
  const std::size_t classes = logits.front().size();

  LossValue out;
  out.logit_grads.assign(logits.size(), Vec(classes, 0.0));
  const double inv_n = 1.0 / static_cast<double>(logits.size());
  for (std::size_t b = 0; b < logits.size(); ++b) {
    require(logits[b].size() == classes, "softmax_ce: ragged logits");
    const int label = labels[b];
    require(label >= 0 && static_cast<std::size_t>(label) < classes,
            "softmax_ce: label out of range");
    const double max_logit =
        *std::max_element(logits[b].begin(), logits[b].end());
    double denom = 0.0;
    for (const double z : logits[b]) denom += std::exp(z - max_logit);
    const double log_denom = std::log(denom);
    out.value += -(logits[b][static_cast<std::size_t>(label)] - max_logit -
                   log_denom) * inv_n;
    for (std::size_t k = 0; k < classes; ++k) {
      const double p = std::exp(logits[b][k] - max_logit) / denom;
      out.logit_grads[b][k] =
          (p - (static_cast<int>(k) == label ? 1.0 : 0.0)) * inv_n;
    }
  }
  return out;
}

namespace detail {

// Gradient of ||a - b||; zero at coincident points (subgradient choice,
// matching the all-identical-embeddings edge case).
inline Vec unit_difference(const Vec& a, const Vec& b) {
  Vec diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
  const double norm = l2_norm(diff);
  if (norm < 1e-300) return Vec(a.size(), 0.0);
  for (auto& d : diff) d /= norm;
  return diff;
}

struct HardestNegative {
  int batch_index = -1;
  double distance = std::numeric_limits<double>::infinity();
};

// Nearest other-group member; ties go to the lowest batch index because
// members are scanned in index order with strict comparison.
inline HardestNegative hardest_negative(const TripletBatch& batch,
                                        const std::vector<Vec>& embeddings,
                                        std::size_t group_index,
                                        int anchor_index) {
  HardestNegative best;
  for (std::size_t g = 0; g < batch.groups.size(); ++g) {
    if (g == group_index) continue;
    for (const auto& m : batch.groups[g].members) {
      const double d =
          l2_distance(embeddings[static_cast<std::size_t>(anchor_index)],
                      embeddings[static_cast<std::size_t>(m.batch_index)]);
      const bool better =
          d < best.distance ||
          (d == best.distance && m.batch_index < best.batch_index);
      if (better) best = {m.batch_index, d};
    }
  }
  return best;
}

inline double normalization_factor(const TripletBatch& batch,
                                   TripletNorm norm) {
  if (norm == TripletNorm::Sum) return 1.0;
  const double anchors = static_cast<double>(
      batch.groups.size() * batch.groups.front().members.size());
  return 1.0 / anchors;
}

}  // namespace detail

// Hardest-positive / hardest-negative triplet loss over every member of
// every group, hinged at the margin.
inline LossValue msm_loss(const TripletBatch& batch,
                          const std::vector<Vec>& embeddings,
                          const TripletOptions& opts) {
  validate_triplet_batch(batch);
  require(opts.margin >= 0.0, "msm_loss: margin must be >= 0");
  require(embeddings.size() == static_cast<std::size_t>(batch.batch_size),
          "msm_loss: embeddings size mismatch");

  LossValue out;
  const std::size_t dim = embeddings.front().size();
  out.embedding_grads.assign(embeddings.size(), Vec(dim, 0.0));
  const double w = detail::normalization_factor(batch, opts.norm);

  for (std::size_t g = 0; g < batch.groups.size(); ++g) {
    const auto& group = batch.groups[g];
    for (const auto& anchor : group.members) {
      const auto ai = static_cast<std::size_t>(anchor.batch_index);
      // Hardest positive: farthest same-group member (the anchor itself
      // contributes distance zero and never wins unless all coincide).
      int hp_index = -1;
      double hp = -1.0;
      for (const auto& m : group.members) {
        const double d = l2_distance(
            embeddings[ai], embeddings[static_cast<std::size_t>(m.batch_index)]);
        if (d > hp || (d == hp && m.batch_index < hp_index)) {
          hp = d;
          hp_index = m.batch_index;
        }
      }
      const auto neg = detail::hardest_negative(batch, embeddings, g,
                                                anchor.batch_index);
      const double raw = hp - neg.distance + opts.margin;
      const bool active = raw > 0.0;
      const double term = (opts.hinge && !active) ? 0.0 : raw;
      out.value += w * term;
      out.anchors.push_back(
          {anchor.batch_index, hp, neg.distance, active});
      if (active) ++out.active_hinge_count;

      if (!opts.hinge || active) {
        const auto pi = static_cast<std::size_t>(hp_index);
        const auto ni = static_cast<std::size_t>(neg.batch_index);
        const Vec up = detail::unit_difference(embeddings[ai], embeddings[pi]);
        const Vec un = detail::unit_difference(embeddings[ai], embeddings[ni]);
        axpy(w, up, out.embedding_grads[ai]);
        axpy(-w, up, out.embedding_grads[pi]);
        axpy(-w, un, out.embedding_grads[ai]);
        axpy(w, un, out.embedding_grads[ni]);
      }
    }
  }
  return out;
}

// Triplet loss with the hardest positive replaced by the distance to the
// group's mean embedding; the mean's dependence on the anchor is part of
// the gradient.
inline LossValue hsoften_loss(const TripletBatch& batch,
                              const std::vector<Vec>& embeddings,
                              const TripletOptions& opts) {
  validate_triplet_batch(batch);
  require(opts.margin >= 0.0, "hsoften_loss: margin must be >= 0");
  require(embeddings.size() == static_cast<std::size_t>(batch.batch_size),
          "hsoften_loss: embeddings size mismatch");

  LossValue out;
  const std::size_t dim = embeddings.front().size();
  out.embedding_grads.assign(embeddings.size(), Vec(dim, 0.0));
  const double w = detail::normalization_factor(batch, opts.norm);

  for (std::size_t g = 0; g < batch.groups.size(); ++g) {
    const auto& group = batch.groups[g];
    const double group_size = static_cast<double>(group.members.size());
    Vec mean(dim, 0.0);
    for (const auto& m : group.members) {
      axpy(1.0 / group_size, embeddings[static_cast<std::size_t>(m.batch_index)],
           mean);
    }
    for (const auto& anchor : group.members) {
      const auto ai = static_cast<std::size_t>(anchor.batch_index);
      const double soft_positive = l2_distance(embeddings[ai], mean);
      const auto neg = detail::hardest_negative(batch, embeddings, g,
                                                anchor.batch_index);
      const double raw = soft_positive - neg.distance + opts.margin;
      const bool active = raw > 0.0;
      const double term = (opts.hinge && !active) ? 0.0 : raw;
      out.value += w * term;
      out.anchors.push_back(
          {anchor.batch_index, soft_positive, neg.distance, active});
      if (active) ++out.active_hinge_count;

      if (!opts.hinge || active) {
        const Vec u = detail::unit_difference(embeddings[ai], mean);
        // d||x_a - mean||/dx_m = u * (1[m==a] - 1/S)
        axpy(w * (1.0 - 1.0 / group_size), u, out.embedding_grads[ai]);
        for (const auto& m : group.members) {
          if (m.batch_index == anchor.batch_index) continue;
          axpy(-w / group_size, u,
               out.embedding_grads[static_cast<std::size_t>(m.batch_index)]);
        }
        const auto ni = static_cast<std::size_t>(neg.batch_index);
        const Vec un = detail::unit_difference(embeddings[ai], embeddings[ni]);
        axpy(-w, un, out.embedding_grads[ai]);
        axpy(w, un, out.embedding_grads[ni]);
      }
    }
  }
  return out;
}

// Softmax plus HSoften-Triplet-Loss, gradients combined.
inline LossValue overall_loss(const TripletBatch& batch,
                              const std::vector<Vec>& embeddings,
                              const std::vector<Vec>& logits,
                              const std::vector<int>& labels,
                              const TripletOptions& opts) {
  LossValue ce = softmax_ce(logits, labels);
  LossValue triplet = hsoften_loss(batch, embeddings, opts);
  LossValue out;
  out.value = ce.value + triplet.value;
  out.logit_grads = std::move(ce.logit_grads);
  out.embedding_grads = std::move(triplet.embedding_grads);
  out.anchors = std::move(triplet.anchors);
  out.active_hinge_count = triplet.active_hinge_count;
  return out;
}

}  // namespace pls
