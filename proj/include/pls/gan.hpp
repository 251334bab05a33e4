#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "pls/common.hpp"
#include "pls/dataset.hpp"
#include "pls/mlp.hpp"
#include "pls/rng.hpp"

namespace pls {

enum class GeneratorKind { Affine, Mlp };

struct AffineMap {
  Matrix weight;  // D x D
  Vec bias;       // D

  Vec apply(const Vec& x) const {
    Vec out(bias.size());
    for (std::size_t r = 0; r < weight.rows; ++r) {
      out[r] = dot(weight.row(r), x) + bias[r];
    }
    return out;
  }

  bool operator==(const AffineMap&) const = default;
};

// Feature-space translator network for one direction of a camera pair.
// Affine generators match the synthetic camera model; the MLP variant
// exercises the nonlinear case.
struct Generator {
  GeneratorKind kind = GeneratorKind::Affine;
  AffineMap affine;
  Mlp net;

  bool operator==(const Generator&) const = default;
};

namespace detail {

struct GenTrace {
  Batch inputs;
  MlpTrace mlp;
};

inline Batch gen_forward(const Generator& gen, const Batch& inputs,
                         GenTrace* trace = nullptr) {
  if (gen.kind == GeneratorKind::Mlp) {
    return mlp_forward(gen.net, inputs, trace ? &trace->mlp : nullptr);
  }
  if (trace) trace->inputs = inputs;
  Batch out(inputs.size());
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    out[b] = gen.affine.apply(inputs[b]);
  }
  return out;
}

struct GenGrads {
  Matrix weight;  // affine
  Vec bias;
  MlpGradients mlp;
  Batch input_grads;
  bool initialized = false;
};

inline void accumulate_gen_backward(const Generator& gen, const GenTrace& trace,
                                    const Batch& out_grads, GenGrads& grads) {
  if (gen.kind == GeneratorKind::Mlp) {
    MlpGradients g = mlp_backward(gen.net, trace.mlp, out_grads);
    if (!grads.initialized) {
      grads.mlp = zero_gradients(gen.net);
      grads.initialized = true;
    }
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
      for (std::size_t i = 0; i < g.layers[l].weight.data.size(); ++i) {
        grads.mlp.layers[l].weight.data[i] += g.layers[l].weight.data[i];
      }
      for (std::size_t i = 0; i < g.layers[l].bias.size(); ++i) {
        grads.mlp.layers[l].bias[i] += g.layers[l].bias[i];
      }
    }
    grads.input_grads = std::move(g.input_grads);
    return;
  }
  if (!grads.initialized) {
    grads.weight = Matrix(gen.affine.weight.rows, gen.affine.weight.cols);
    grads.bias.assign(gen.affine.bias.size(), 0.0);
    grads.initialized = true;
  }
  grads.input_grads.assign(out_grads.size(),
                           Vec(gen.affine.weight.cols, 0.0));
  for (std::size_t b = 0; b < out_grads.size(); ++b) {
    for (std::size_t r = 0; r < gen.affine.weight.rows; ++r) {
      const double g = out_grads[b][r];
      grads.bias[r] += g;
      axpy(g, trace.inputs[b], grads.weight.row(r));
      axpy(g, gen.affine.weight.row(r), grads.input_grads[b]);
    }
  }
}

struct GenAdam {
  AdamSlot weight_slot, bias_slot;
  MlpAdam mlp;
  long step = 0;

  void update(Generator& gen, const GenGrads& grads, const AdamParams& cfg) {
    if (!grads.initialized) return;
    if (gen.kind == GeneratorKind::Mlp) {
      mlp.update(gen.net, grads.mlp, cfg);
      return;
    }
    ++step;
    adam_update(gen.affine.weight.data, grads.weight.data, weight_slot, cfg,
                step);
    adam_update(gen.affine.bias, grads.bias, bias_slot, cfg, step);
  }
};

}  // namespace detail

// One unordered camera pair: generators in both directions plus one
// discriminator per domain.
struct PairTranslator {
  int cam_lo = 0;
  int cam_hi = 1;
  Generator forward_gen;   // cam_lo -> cam_hi
  Generator backward_gen;  // cam_hi -> cam_lo
  Mlp disc_hi;             // judges cam_hi features (real vs forward_gen)
  Mlp disc_lo;             // judges cam_lo features (real vs backward_gen)

  bool operator==(const PairTranslator&) const = default;
};

// Translators for all C(A,2) unordered camera pairs.
struct CameraTranslator {
  int camera_count = 0;
  int input_dim = 0;
  GeneratorKind kind = GeneratorKind::Affine;
  double lambda = 10.0;
  std::vector<PairTranslator> pairs;

  const PairTranslator& pair(int a, int b) const {
    const int lo = std::min(a, b);
    const int hi = std::max(a, b);
    require(lo >= 0 && hi < camera_count && lo != hi,
            "CameraTranslator: bad camera pair");
    // pairs are stored lexicographically: (0,1), (0,2), ..., (A-2,A-1)
    const int index = lo * camera_count - lo * (lo + 1) / 2 + (hi - lo - 1);
    return pairs[static_cast<std::size_t>(index)];
  }

  Vec translate(const Vec& x, int from, int to) const {
    const auto& p = pair(from, to);
    const Generator& gen = from < to ? p.forward_gen : p.backward_gen;
    return detail::gen_forward(gen, {x}).front();
  }

  bool operator==(const CameraTranslator&) const = default;
};

struct GanOptions {
  int epochs = 300;
  double lambda = 10.0;
  double adversarial_weight = 1.0;
  double lr = 0.02;
  GeneratorKind generator = GeneratorKind::Affine;
  int mlp_hidden = 32;
  int disc_hidden = 16;
  bool identity_init = false;  // affine generators start as identity maps
  std::uint64_t seed = 1;
};

namespace detail {

inline Generator init_generator(const GanOptions& opts, int dim,
                                std::uint64_t seed) {
  Generator gen;
  gen.kind = opts.generator;
  if (opts.generator == GeneratorKind::Mlp) {
    gen.net = init_mlp({dim, opts.mlp_hidden, dim}, Activation::Tanh, seed);
    return gen;
  }
  const auto d = static_cast<std::size_t>(dim);
  gen.affine.weight = Matrix(d, d);
  gen.affine.bias.assign(d, 0.0);
  if (opts.identity_init) {
    for (std::size_t i = 0; i < d; ++i) gen.affine.weight.at(i, i) = 1.0;
  } else {
    Rng rng(mix_seed(seed, 0xaff1e));
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (auto& w : gen.affine.weight.data) w = rng.gaussian() * scale;
  }
  return gen;
}

// L1 cycle penalty, averaged over samples: d/d(rec) = sign(rec - x) / n.
inline double cycle_l1(const Batch& reconstructed, const Batch& originals,
                       Batch* grads) {
  double total = 0.0;
  if (grads) grads->assign(reconstructed.size(), Vec());
  const double inv_n = 1.0 / static_cast<double>(reconstructed.size());
  for (std::size_t b = 0; b < reconstructed.size(); ++b) {
    Vec g(reconstructed[b].size(), 0.0);
    for (std::size_t j = 0; j < reconstructed[b].size(); ++j) {
      const double d = reconstructed[b][j] - originals[b][j];
      total += std::abs(d) * inv_n;
      g[j] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * inv_n;
    }
    if (grads) (*grads)[b] = std::move(g);
  }
  return total;
}

// Least-squares adversarial loss toward `target`; returns mean (s-target)^2
// and fills d/d(score).
inline double lsgan_score_loss(const Batch& scores, double target,
                               Batch* grads) {
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(scores.size());
  if (grads) grads->assign(scores.size(), Vec(1, 0.0));
  for (std::size_t b = 0; b < scores.size(); ++b) {
    const double d = scores[b][0] - target;
    total += d * d * inv_n;
    if (grads) (*grads)[b][0] = 2.0 * d * inv_n;
  }
  return total;
}

}  // namespace detail

// Trains cycle-consistent translators for every unordered camera pair with
// the least-squares adversarial loss plus lambda-weighted L1 cycle loss.
// Only sample features and camera ids are read; identity labels never
// influence the result. epochs == 0 returns the seeded initialization.
inline CameraTranslator train_translators(
    const Dataset& dataset, const GanOptions& opts,
    const std::vector<int>* train_indices = nullptr) {
  require(dataset.camera_count >= 2, "train_translators: need >= 2 cameras");
  require(opts.lambda > 0.0, "train_translators: lambda must be > 0");
  require(opts.epochs >= 0, "train_translators: epochs must be >= 0");

  std::vector<Batch> by_camera(static_cast<std::size_t>(dataset.camera_count));
  auto add_index = [&](int idx) {
    const auto& s = dataset.samples[static_cast<std::size_t>(idx)];
    by_camera[static_cast<std::size_t>(s.camera)].push_back(s.input);
  };
  if (train_indices) {
    for (const int idx : *train_indices) add_index(idx);
  } else {
    for (int idx = 0; idx < dataset.size(); ++idx) add_index(idx);
  }
  for (std::size_t a = 0; a < by_camera.size(); ++a) {
    if (by_camera[a].size() < 2) {
      throw ValidationError("train_translators: camera " + std::to_string(a) +
                            " has fewer than 2 samples");
    }
  }

  CameraTranslator translator;
  translator.camera_count = dataset.camera_count;
  translator.input_dim = dataset.input_dim;
  translator.kind = opts.generator;
  translator.lambda = opts.lambda;

  const AdamParams adam{opts.lr, 0.9, 0.999, 1e-8};
  int pair_id = 0;
  for (int lo = 0; lo < dataset.camera_count; ++lo) {
    for (int hi = lo + 1; hi < dataset.camera_count; ++hi, ++pair_id) {
      PairTranslator pair;
      pair.cam_lo = lo;
      pair.cam_hi = hi;
      const std::uint64_t pair_seed =
          mix_seed(opts.seed, 0x9a7, static_cast<std::uint64_t>(pair_id));
      pair.forward_gen =
          detail::init_generator(opts, dataset.input_dim, mix_seed(pair_seed, 1));
      pair.backward_gen =
          detail::init_generator(opts, dataset.input_dim, mix_seed(pair_seed, 2));
      pair.disc_hi = init_mlp({dataset.input_dim, opts.disc_hidden, 1},
                              Activation::Tanh, mix_seed(pair_seed, 3));
      pair.disc_lo = init_mlp({dataset.input_dim, opts.disc_hidden, 1},
                              Activation::Tanh, mix_seed(pair_seed, 4));

      const Batch& real_lo = by_camera[static_cast<std::size_t>(lo)];
      const Batch& real_hi = by_camera[static_cast<std::size_t>(hi)];

      detail::GenAdam adam_fwd, adam_bwd;
      MlpAdam adam_disc_hi, adam_disc_lo;

      for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        // --- Discriminator step (generators detached) ---
        const Batch fake_hi = detail::gen_forward(pair.forward_gen, real_lo);
        const Batch fake_lo = detail::gen_forward(pair.backward_gen, real_hi);
        auto disc_step = [&](Mlp& disc, MlpAdam& state, const Batch& real,
                             const Batch& fake) {
          MlpTrace tr_real, tr_fake;
          const Batch s_real = mlp_forward(disc, real, &tr_real);
          const Batch s_fake = mlp_forward(disc, fake, &tr_fake);
          Batch g_real, g_fake;
          detail::lsgan_score_loss(s_real, 1.0, &g_real);
          detail::lsgan_score_loss(s_fake, 0.0, &g_fake);
          for (auto& g : g_real) g[0] *= 0.5;
          for (auto& g : g_fake) g[0] *= 0.5;
          MlpGradients gr = mlp_backward(disc, tr_real, g_real);
          const MlpGradients gf = mlp_backward(disc, tr_fake, g_fake);
          for (std::size_t l = 0; l < gr.layers.size(); ++l) {
            for (std::size_t i = 0; i < gr.layers[l].weight.data.size(); ++i) {
              gr.layers[l].weight.data[i] += gf.layers[l].weight.data[i];
            }
            for (std::size_t i = 0; i < gr.layers[l].bias.size(); ++i) {
              gr.layers[l].bias[i] += gf.layers[l].bias[i];
            }
          }
          state.update(disc, gr, adam);
        };
        disc_step(pair.disc_hi, adam_disc_hi, real_hi, fake_hi);
        disc_step(pair.disc_lo, adam_disc_lo, real_lo, fake_lo);

        // --- Generator step (both directions, discriminators frozen) ---
        detail::GenGrads grads_fwd, grads_bwd;

        // lo -> hi -> lo: adversarial on fake_hi, cycle back to real_lo.
        {
          detail::GenTrace tr_g;
          const Batch fake =
              detail::gen_forward(pair.forward_gen, real_lo, &tr_g);
          MlpTrace tr_d;
          const Batch scores = mlp_forward(pair.disc_hi, fake, &tr_d);
          Batch g_scores;
          detail::lsgan_score_loss(scores, 1.0, &g_scores);
          for (auto& g : g_scores) g[0] *= opts.adversarial_weight;
          const MlpGradients d_back = mlp_backward(pair.disc_hi, tr_d, g_scores);
          Batch d_fake = d_back.input_grads;

          detail::GenTrace tr_cycle;
          const Batch rec =
              detail::gen_forward(pair.backward_gen, fake, &tr_cycle);
          Batch g_rec;
          detail::cycle_l1(rec, real_lo, &g_rec);
          for (auto& g : g_rec) {
            for (auto& v : g) v *= opts.lambda;
          }
          detail::accumulate_gen_backward(pair.backward_gen, tr_cycle, g_rec,
                                          grads_bwd);
          for (std::size_t b = 0; b < d_fake.size(); ++b) {
            axpy(1.0, grads_bwd.input_grads[b], d_fake[b]);
          }
          detail::accumulate_gen_backward(pair.forward_gen, tr_g, d_fake,
                                          grads_fwd);
        }
        // hi -> lo -> hi: adversarial on fake_lo, cycle back to real_hi.
        {
          detail::GenTrace tr_g;
          const Batch fake =
              detail::gen_forward(pair.backward_gen, real_hi, &tr_g);
          MlpTrace tr_d;
          const Batch scores = mlp_forward(pair.disc_lo, fake, &tr_d);
          Batch g_scores;
          detail::lsgan_score_loss(scores, 1.0, &g_scores);
          for (auto& g : g_scores) g[0] *= opts.adversarial_weight;
          const MlpGradients d_back = mlp_backward(pair.disc_lo, tr_d, g_scores);
          Batch d_fake = d_back.input_grads;

          detail::GenTrace tr_cycle;
          const Batch rec =
              detail::gen_forward(pair.forward_gen, fake, &tr_cycle);
          Batch g_rec;
          detail::cycle_l1(rec, real_hi, &g_rec);
          for (auto& g : g_rec) {
            for (auto& v : g) v *= opts.lambda;
          }
          detail::accumulate_gen_backward(pair.forward_gen, tr_cycle, g_rec,
                                          grads_fwd);
          for (std::size_t b = 0; b < d_fake.size(); ++b) {
            axpy(1.0, grads_fwd.input_grads[b], d_fake[b]);
          }
          detail::accumulate_gen_backward(pair.backward_gen, tr_g, d_fake,
                                          grads_bwd);
        }

        adam_fwd.update(pair.forward_gen, grads_fwd, adam);
        adam_bwd.update(pair.backward_gen, grads_bwd, adam);
      }
      translator.pairs.push_back(std::move(pair));
    }
  }
  return translator;
}

// Mean round-trip residual ||F(G(x)) - x||_2 over all ordered camera pairs,
// optionally restricted to a subset of sample indices.
inline double mean_cycle_residual(const CameraTranslator& translator,
                                  const Dataset& dataset,
                                  const std::vector<int>* indices = nullptr) {
  double total = 0.0;
  long count = 0;
  auto visit = [&](const Sample& s) {
    for (int to = 0; to < translator.camera_count; ++to) {
      if (to == s.camera) continue;
      const Vec there = translator.translate(s.input, s.camera, to);
      const Vec back = translator.translate(there, to, s.camera);
      total += l2_distance(back, s.input);
      ++count;
    }
  };
  if (indices) {
    for (const int idx : *indices) {
      visit(dataset.samples[static_cast<std::size_t>(idx)]);
    }
  } else {
    for (const auto& s : dataset.samples) visit(s);
  }
  require(count > 0, "mean_cycle_residual: no samples");
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Dataset enhancement

// Original dataset (indices preserved) plus one generated sample per
// (real sample, other camera), appended in source order then target camera
// order. source_index maps every sample back to its real source.
struct EnhancedDataset {
  Dataset data;
  std::vector<int> source_index;
  int original_count = 0;

  // Labeled extension: the one-shot samples plus all their generated
  // copies; size A * |labeled|.
  std::vector<int> labeled_extension(const std::vector<int>& labeled) const {
    std::vector<bool> is_labeled(static_cast<std::size_t>(original_count),
                                 false);
    for (const int idx : labeled) {
      is_labeled[static_cast<std::size_t>(idx)] = true;
    }
    std::vector<int> extended = labeled;
    for (int idx = original_count; idx < data.size(); ++idx) {
      if (is_labeled[static_cast<std::size_t>(
              source_index[static_cast<std::size_t>(idx)])]) {
        extended.push_back(idx);
      }
    }
    return extended;
  }
};

inline EnhancedDataset augment_dataset(const Dataset& dataset,
                                       const CameraTranslator& translator) {
  require(translator.camera_count == dataset.camera_count,
          "augment_dataset: camera count mismatch");
  require(translator.input_dim == dataset.input_dim,
          "augment_dataset: input dim mismatch");
  require(static_cast<int>(translator.pairs.size()) ==
              dataset.camera_count * (dataset.camera_count - 1) / 2,
          "augment_dataset: translator does not cover all camera pairs");
  for (const auto& s : dataset.samples) {
    require(s.provenance == Provenance::Real,
            "augment_dataset: input dataset must contain only real samples");
  }

  EnhancedDataset enhanced;
  enhanced.data.input_dim = dataset.input_dim;
  enhanced.data.camera_count = dataset.camera_count;
  enhanced.data.identity_count = dataset.identity_count;
  enhanced.original_count = dataset.size();
  enhanced.data.samples = dataset.samples;
  enhanced.source_index.resize(static_cast<std::size_t>(dataset.size()));
  for (int idx = 0; idx < dataset.size(); ++idx) {
    enhanced.source_index[static_cast<std::size_t>(idx)] = idx;
  }
  for (int idx = 0; idx < dataset.size(); ++idx) {
    const auto& src = dataset.samples[static_cast<std::size_t>(idx)];
    for (int target = 0; target < dataset.camera_count; ++target) {
      if (target == src.camera) continue;
      Sample gen;
      gen.input = translator.translate(src.input, src.camera, target);
      gen.identity = src.identity;
      gen.camera = target;
      gen.provenance = Provenance::Generated;
      gen.source_camera = src.camera;
      enhanced.data.samples.push_back(std::move(gen));
      enhanced.source_index.push_back(idx);
    }
  }
  return enhanced;
}

// Rebuilds the source mapping of an augmented dataset written to disk. The
// file format keeps only the source camera, but the writer's ordering (all
// real rows first, then generated rows grouped by source) pins the mapping.
inline EnhancedDataset enhanced_from_dataset(const Dataset& dataset) {
  EnhancedDataset enhanced;
  int real_count = 0;
  while (real_count < dataset.size() &&
         dataset.samples[static_cast<std::size_t>(real_count)].provenance ==
             Provenance::Real) {
    ++real_count;
  }
  require(real_count > 0, "enhanced dataset: no real samples");
  for (int idx = real_count; idx < dataset.size(); ++idx) {
    require(
        dataset.samples[static_cast<std::size_t>(idx)].provenance ==
            Provenance::Generated,
        "enhanced dataset: real samples must precede all generated samples");
  }
  const int per_source = dataset.camera_count - 1;
  require(dataset.size() == real_count * dataset.camera_count,
          "enhanced dataset: size must be A times the real sample count");

  enhanced.data = dataset;
  enhanced.original_count = real_count;
  enhanced.source_index.resize(static_cast<std::size_t>(dataset.size()));
  for (int idx = 0; idx < real_count; ++idx) {
    enhanced.source_index[static_cast<std::size_t>(idx)] = idx;
  }
  for (int g = 0; g < real_count * per_source; ++g) {
    const int source = g / per_source;
    const int idx = real_count + g;
    const auto& gen = dataset.samples[static_cast<std::size_t>(idx)];
    const auto& src = dataset.samples[static_cast<std::size_t>(source)];
    require(gen.identity == src.identity && gen.source_camera == src.camera &&
                gen.camera != src.camera,
            "enhanced dataset: generated rows are not in source-major order");
    enhanced.source_index[static_cast<std::size_t>(idx)] = source;
  }
  return enhanced;
}

}  // namespace pls
