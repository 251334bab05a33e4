#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "pls/common.hpp"
#include "pls/dataset.hpp"
#include "pls/gan.hpp"
#include "pls/model.hpp"

namespace pls {

// Row descriptor of the mining matrix: a labeled sample or a camera-center
// reference, with the identity it votes for.
struct RowRef {
  int identity = 0;
  int sample_index = -1;  // -1 for synthesized center references
};

// Pairwise L2 distances from labeled references (rows) to unlabeled
// samples (columns).
struct DistanceMatrix {
  Matrix values;
  std::vector<RowRef> row_refs;
  std::vector<int> col_refs;  // unlabeled sample indices

  std::size_t rows() const { return values.rows; }
  std::size_t cols() const { return values.cols; }
};

inline DistanceMatrix distance_matrix(const std::vector<Vec>& ref_features,
                                      const std::vector<Vec>& unlabeled_features,
                                      std::vector<RowRef> row_refs = {},
                                      std::vector<int> col_refs = {}) {
  require(!ref_features.empty() && !unlabeled_features.empty(),
          "distance_matrix: need at least one row and one column");
  const std::size_t dim = ref_features.front().size();
  for (const auto& r : ref_features) {
    require(r.size() == dim, "distance_matrix: ref feature dim mismatch");
  }
  for (const auto& u : unlabeled_features) {
    require(u.size() == dim, "distance_matrix: unlabeled feature dim mismatch");
  }

  DistanceMatrix m;
  m.values = Matrix(ref_features.size(), unlabeled_features.size());
  for (std::size_t i = 0; i < ref_features.size(); ++i) {
    for (std::size_t j = 0; j < unlabeled_features.size(); ++j) {
      m.values.at(i, j) = l2_distance(ref_features[i], unlabeled_features[j]);
    }
  }
  if (row_refs.empty()) {
    for (std::size_t i = 0; i < ref_features.size(); ++i) {
      m.row_refs.push_back({static_cast<int>(i), static_cast<int>(i)});
    }
  } else {
    require(row_refs.size() == ref_features.size(),
            "distance_matrix: row_refs size mismatch");
    m.row_refs = std::move(row_refs);
  }
  if (col_refs.empty()) {
    m.col_refs.resize(unlabeled_features.size());
    std::iota(m.col_refs.begin(), m.col_refs.end(), 0);
  } else {
    require(col_refs.size() == unlabeled_features.size(),
            "distance_matrix: col_refs size mismatch");
    m.col_refs = std::move(col_refs);
  }
  return m;
}

// Preliminary pseudo-label claims: for each row, its T closest columns.
struct PreliminarySelection {
  std::vector<std::vector<int>> columns_per_row;  // column positions, not ids
  int selection_count = 0;                        // the T that produced it
};

inline PreliminarySelection select_preliminary(const DistanceMatrix& m,
                                               int count) {
  require(count >= 1, "select_preliminary: T must be >= 1");
  PreliminarySelection sel;
  sel.selection_count = count;
  sel.columns_per_row.resize(m.rows());
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(count),
                                          m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    std::vector<int> order(m.cols());
    std::iota(order.begin(), order.end(), 0);
    // Ties break toward the lower column index.
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return m.values.at(i, static_cast<std::size_t>(a)) <
             m.values.at(i, static_cast<std::size_t>(b));
    });
    sel.columns_per_row[i].assign(order.begin(),
                                  order.begin() + static_cast<long>(take));
  }
  return sel;
}

// The current pseudo-label assignment set, keyed by unlabeled sample index.
struct PseudoLabelSet {
  struct Assignment {
    int identity = 0;
    int iteration_added = 0;
    double distance = 0.0;
  };
  std::map<int, Assignment> assignments;
  std::vector<int> rejected;  // sample indices discarded by refinement

  std::vector<int> members_of(int identity) const {
    std::vector<int> out;
    for (const auto& [index, a] : assignments) {
      if (a.identity == identity) out.push_back(index);
    }
    return out;
  }
};

// Relative-distance refinement: keep a claim on column j by row i only when
// M[i,j] is strictly below every other row's distance to j. Tied columns
// are dropped, and multi-claimed columns resolve themselves because at most
// one row can be the strict argmin.
inline PseudoLabelSet refine(const PreliminarySelection& preliminary,
                             const DistanceMatrix& m, int iteration = 0,
                             const PseudoLabelSet* previous = nullptr) {
  require(preliminary.columns_per_row.size() == m.rows(),
          "refine: selection does not match the matrix");

  // Strict row-wise argmin per column; -1 where the minimum is tied.
  std::vector<int> strict_argmin(m.cols(), -1);
  for (std::size_t j = 0; j < m.cols(); ++j) {
    int best_row = 0;
    double best = m.values.at(0, j);
    bool tied = false;
    for (std::size_t i = 1; i < m.rows(); ++i) {
      const double d = m.values.at(i, j);
      if (d < best) {
        best = d;
        best_row = static_cast<int>(i);
        tied = false;
      } else if (d == best) {
        tied = true;
      }
    }
    strict_argmin[j] = tied ? -1 : best_row;
  }

  PseudoLabelSet out;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (const int j : preliminary.columns_per_row[i]) {
      const int sample_index = m.col_refs[static_cast<std::size_t>(j)];
      if (strict_argmin[static_cast<std::size_t>(j)] != static_cast<int>(i)) {
        out.rejected.push_back(sample_index);
        continue;
      }
      PseudoLabelSet::Assignment a;
      a.identity = m.row_refs[i].identity;
      a.distance = m.values.at(i, static_cast<std::size_t>(j));
      a.iteration_added = iteration;
      if (previous) {
        const auto it = previous->assignments.find(sample_index);
        if (it != previous->assignments.end() &&
            it->second.identity == a.identity) {
          a.iteration_added = it->second.iteration_added;
        }
      }
      out.assignments.emplace(sample_index, a);
    }
  }
  std::sort(out.rejected.begin(), out.rejected.end());
  out.rejected.erase(std::unique(out.rejected.begin(), out.rejected.end()),
                     out.rejected.end());
  return out;
}

// Mean feature of each identity across its A per-camera features.
struct CameraCenters {
  std::vector<Vec> centers;
};

inline CameraCenters camera_centers(
    const std::vector<std::vector<Vec>>& features_by_identity) {
  require(!features_by_identity.empty(), "camera_centers: empty input");
  CameraCenters out;
  for (std::size_t i = 0; i < features_by_identity.size(); ++i) {
    const auto& per_camera = features_by_identity[i];
    require(!per_camera.empty(), "camera_centers: identity with no features");
    for (const auto& f : per_camera) {
      if (f.empty()) {
        throw ValidationError("camera_centers: identity " + std::to_string(i) +
                              " is missing a camera feature");
      }
    }
    Vec center(per_camera.front().size(), 0.0);
    for (const auto& f : per_camera) {
      require(f.size() == center.size(),
              "camera_centers: feature dim mismatch");
      axpy(1.0 / static_cast<double>(per_camera.size()), f, center);
    }
    out.centers.push_back(std::move(center));
  }
  return out;
}

namespace detail {

inline Batch embed_samples(const ModelParams& model, const Dataset& dataset,
                           const std::vector<int>& indices) {
  Batch inputs;
  inputs.reserve(indices.size());
  for (const int idx : indices) {
    inputs.push_back(dataset.samples[static_cast<std::size_t>(idx)].input);
  }
  return embed(model, inputs, Mode::Eval);
}

}  // namespace detail

// One full mining pass with the latest model: embed references and the
// unlabeled pool in eval mode, take the T (or A*T in camera mode) closest
// columns per reference, refine by relative distance. The returned set
// supersedes `previous` entirely; `previous` only preserves the iteration
// at which a surviving assignment first appeared.
//
// Vanilla mode mines the real unlabeled samples with one row per labeled
// sample. Camera mode requires the enhanced dataset: rows are per-labeled-
// sample feature centers over the A camera variants (the real sample plus
// its generated copies) and columns are the augmented unlabeled pool of
// size AN - AC.
inline PseudoLabelSet mine_iteration(const ModelParams& model,
                                     const Dataset& dataset,
                                     const OneShotSplit& split,
                                     const PseudoLabelSet& previous,
                                     int selection_count, int iteration,
                                     bool camera_mode,
                                     const EnhancedDataset* enhanced = nullptr,
                                     DistanceMatrix* matrix_out = nullptr) {
  require(selection_count >= 1, "mine_iteration: T must be >= 1");
  require(!camera_mode || enhanced != nullptr,
          "mine_iteration: camera mode requires the enhanced dataset");

  std::vector<RowRef> row_refs;
  std::vector<Vec> ref_features;
  std::vector<int> col_refs;
  std::vector<Vec> col_features;
  int per_row = selection_count;

  if (!camera_mode) {
    ref_features = detail::embed_samples(model, dataset, split.labeled);
    for (const int idx : split.labeled) {
      row_refs.push_back(
          {dataset.samples[static_cast<std::size_t>(idx)].identity, idx});
    }
    col_refs = split.unlabeled;
    col_features = detail::embed_samples(model, dataset, split.unlabeled);
  } else {
    const Dataset& full = enhanced->data;
    require(full.input_dim == dataset.input_dim &&
                enhanced->original_count == dataset.size(),
            "mine_iteration: enhanced dataset does not match");
    per_row = selection_count * full.camera_count;

    // Group each labeled sample with its generated copies, ordered by
    // camera, and average their embeddings into one center row.
    std::vector<bool> in_extension(full.samples.size(), false);
    const auto extension = enhanced->labeled_extension(split.labeled);
    for (const int idx : extension) {
      in_extension[static_cast<std::size_t>(idx)] = true;
    }
    for (const int labeled_idx : split.labeled) {
      std::vector<int> family{labeled_idx};
      for (int idx = enhanced->original_count; idx < full.size(); ++idx) {
        if (enhanced->source_index[static_cast<std::size_t>(idx)] ==
            labeled_idx) {
          family.push_back(idx);
        }
      }
      require(static_cast<int>(family.size()) == full.camera_count,
              "mine_iteration: labeled sample lacks camera copies");
      const Batch family_embeddings =
          detail::embed_samples(model, full, family);
      std::vector<std::vector<Vec>> grouped{family_embeddings};
      ref_features.push_back(camera_centers(grouped).centers.front());
      row_refs.push_back(
          {full.samples[static_cast<std::size_t>(labeled_idx)].identity,
           labeled_idx});
    }
    for (int idx = 0; idx < full.size(); ++idx) {
      if (!in_extension[static_cast<std::size_t>(idx)]) col_refs.push_back(idx);
    }
    col_features = detail::embed_samples(model, full, col_refs);
  }

  DistanceMatrix m = distance_matrix(ref_features, col_features,
                                     std::move(row_refs), std::move(col_refs));
  const PreliminarySelection preliminary = select_preliminary(m, per_row);
  PseudoLabelSet mined = refine(preliminary, m, iteration, &previous);
  if (matrix_out) *matrix_out = std::move(m);
  return mined;
}

// CSV dumps for offline inspection.
inline void write_distance_matrix_csv(const DistanceMatrix& m,
                                      const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_distance_matrix_csv: cannot open " + path);
  out << "row,col,distance\n";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      out << i << ',' << m.col_refs[j] << ','
          << detail::format_double(m.values.at(i, j)) << '\n';
    }
  }
}

inline void write_assignments_csv(const PseudoLabelSet& set,
                                  const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_assignments_csv: cannot open " + path);
  out << "col,identity,iteration\n";
  for (const auto& [index, a] : set.assignments) {
    out << index << ',' << a.identity << ',' << a.iteration_added << '\n';
  }
}

}  // namespace pls
