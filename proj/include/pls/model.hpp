#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "pls/common.hpp"
#include "pls/mlp.hpp"
#include "pls/rng.hpp"

namespace pls {

enum class Mode { Train, Eval };

// Batch normalization over the embedding dimension, as used inside the
// classifier head (the embedding itself stays un-normalized).
struct BatchNormState {
  Vec scale, shift;
  Vec running_mean, running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  bool operator==(const BatchNormState&) const = default;
};

// Embedding network phi plus the classifier head applied on top of it:
// logits = W * dropout(batchnorm(phi(x))). head_weight is stored with one
// row per class.
struct ModelParams {
  Mlp embedding;
  Matrix head_weight;  // C x E
  BatchNormState bn;
  double dropout_rate = 0.5;

  int input_dim() const { return embedding.input_dim(); }
  int embedding_dim() const { return embedding.output_dim(); }
  int class_count() const { return static_cast<int>(head_weight.rows); }

  bool operator==(const ModelParams&) const = default;
};

// Deep copy of the parameters at their common starting point; restoring it
// before each mining iteration's retraining resets the model to the shared
// initialization.
struct ModelSnapshot {
  ModelParams params;
  std::uint64_t init_seed = 0;
};

struct ModelInit {
  ModelParams params;
  ModelSnapshot initial;
};

inline ModelInit init_model(int input_dim, const std::vector<int>& hidden_sizes,
                            int embedding_dim, int class_count,
                            double dropout_rate, std::uint64_t seed,
                            Activation activation = Activation::Tanh) {
  require(input_dim >= 1 && embedding_dim >= 1,
          "init_model: input and embedding dims must be >= 1");
  require(class_count >= 1, "init_model: class_count must be >= 1");
  require(dropout_rate >= 0.0 && dropout_rate < 1.0,
          "init_model: dropout_rate must be in [0, 1)");

  std::vector<int> dims;
  dims.push_back(input_dim);
  for (const int h : hidden_sizes) dims.push_back(h);
  dims.push_back(embedding_dim);

  ModelParams p;
  p.embedding = init_mlp(dims, activation, mix_seed(seed, 0xe0b));
  p.dropout_rate = dropout_rate;

  Rng rng(mix_seed(seed, 0x4ead));
  p.head_weight = Matrix(static_cast<std::size_t>(class_count),
                         static_cast<std::size_t>(embedding_dim));
  const double scale = 1.0 / std::sqrt(static_cast<double>(embedding_dim));
  for (auto& w : p.head_weight.data) w = rng.gaussian() * scale;

  const auto e = static_cast<std::size_t>(embedding_dim);
  p.bn.scale.assign(e, 1.0);
  p.bn.shift.assign(e, 0.0);
  p.bn.running_mean.assign(e, 0.0);
  p.bn.running_var.assign(e, 1.0);

  ModelInit init;
  init.initial = ModelSnapshot{p, seed};
  init.params = std::move(p);
  return init;
}

inline ModelSnapshot take_snapshot(const ModelParams& params,
                                   std::uint64_t init_seed = 0) {
  return ModelSnapshot{params, init_seed};
}

inline ModelParams restore(const ModelSnapshot& snapshot) {
  return snapshot.params;
}

struct EmbedTrace {
  MlpTrace mlp;
  std::size_t batch_size = 0;
};

// Eval mode is a pure function of (params, inputs); train mode records the
// activations needed by backward().
inline Batch embed(const ModelParams& params, const Batch& inputs, Mode mode,
                   EmbedTrace* trace = nullptr) {
  require(mode == Mode::Eval || trace != nullptr,
          "embed: train mode requires a trace");
  Batch out = mlp_forward(params.embedding, inputs,
                          trace ? &trace->mlp : nullptr);
  if (trace) trace->batch_size = inputs.size();
  return out;
}

struct ClassifyTrace {
  std::size_t batch_size = 0;
  Vec inv_std;           // 1/sqrt(var + eps), per feature (train stats)
  Batch xhat;            // normalized embeddings
  Batch dropout_scale;   // 0 or 1/(1-rate), per sample per feature
  Batch head_input;      // after batchnorm scale/shift and dropout
  Vec new_running_mean, new_running_var;  // pending update, train mode
};

// Batchnorm (batch stats in train, running stats in eval), inverted dropout
// (train only), then the linear head. Pure: the pending running-stat update
// is parked in the trace; commit_batch_stats applies it.
inline Batch classify(const ModelParams& params, const Batch& embeddings,
                      Mode mode,
                      std::optional<std::uint64_t> dropout_seed = std::nullopt,
                      ClassifyTrace* trace = nullptr) {
  const auto e = static_cast<std::size_t>(params.embedding_dim());
  require(!embeddings.empty(), "classify: empty batch");
  for (const auto& x : embeddings) {
    require(x.size() == e, "classify: embedding dimension mismatch");
  }
  if (mode == Mode::Train) {
    require(dropout_seed.has_value(),
            "classify: train mode requires a dropout seed");
    require(trace != nullptr, "classify: train mode requires a trace");
  }

  const std::size_t n = embeddings.size();
  Vec mean(e, 0.0), var(e, 0.0);
  if (mode == Mode::Train) {
    for (const auto& x : embeddings) axpy(1.0, x, mean);
    for (auto& m : mean) m /= static_cast<double>(n);
    for (const auto& x : embeddings) {
      for (std::size_t j = 0; j < e; ++j) {
        const double d = x[j] - mean[j];
        var[j] += d * d;
      }
    }
    for (auto& v : var) v /= static_cast<double>(n);
  } else {
    mean = params.bn.running_mean;
    var = params.bn.running_var;
  }

  Vec inv_std(e);
  for (std::size_t j = 0; j < e; ++j) {
    inv_std[j] = 1.0 / std::sqrt(var[j] + params.bn.epsilon);
  }

  Batch xhat(n, Vec(e));
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < e; ++j) {
      xhat[b][j] = (embeddings[b][j] - mean[j]) * inv_std[j];
    }
  }

  const double keep = 1.0 - params.dropout_rate;
  Batch dropout_scale;
  if (mode == Mode::Train) {
    Rng rng(mix_seed(*dropout_seed, 0xd40));
    dropout_scale.assign(n, Vec(e));
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t j = 0; j < e; ++j) {
        dropout_scale[b][j] = rng.uniform() < keep ? 1.0 / keep : 0.0;
      }
    }
  }

  Batch head_input(n, Vec(e));
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < e; ++j) {
      double h = params.bn.scale[j] * xhat[b][j] + params.bn.shift[j];
      if (mode == Mode::Train) h *= dropout_scale[b][j];
      head_input[b][j] = h;
    }
  }

  Batch logits(n, Vec(params.head_weight.rows));
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t r = 0; r < params.head_weight.rows; ++r) {
      logits[b][r] = dot(params.head_weight.row(r), head_input[b]);
    }
  }

  if (trace) {
    trace->batch_size = n;
    trace->inv_std = std::move(inv_std);
    trace->xhat = std::move(xhat);
    trace->dropout_scale = std::move(dropout_scale);
    trace->head_input = std::move(head_input);
    if (mode == Mode::Train) {
      const double m = params.bn.momentum;
      trace->new_running_mean.resize(e);
      trace->new_running_var.resize(e);
      for (std::size_t j = 0; j < e; ++j) {
        trace->new_running_mean[j] =
            (1.0 - m) * params.bn.running_mean[j] + m * mean[j];
        trace->new_running_var[j] =
            (1.0 - m) * params.bn.running_var[j] + m * var[j];
      }
    }
  }
  return logits;
}

// Applies the running-stat update recorded by a train-mode classify pass.
inline void commit_batch_stats(ModelParams& params, const ClassifyTrace& trace) {
  require(!trace.new_running_mean.empty(),
          "commit_batch_stats: trace has no pending update");
  params.bn.running_mean = trace.new_running_mean;
  params.bn.running_var = trace.new_running_var;
}

struct ModelGradients {
  MlpGradients embedding;  // includes input_grads
  Matrix head_weight;
  Vec bn_scale, bn_shift;
};

// Backward through head + batchnorm (batch statistics) + embedding MLP.
// logit_grads may be empty when the loss touches embeddings only;
// extra_embedding_grads may be empty when the loss is head-only.
inline ModelGradients backward(const ModelParams& params,
                               const EmbedTrace& embed_trace,
                               const ClassifyTrace* head_trace,
                               const Batch& logit_grads,
                               const Batch& extra_embedding_grads) {
  const std::size_t n = embed_trace.batch_size;
  const auto e = static_cast<std::size_t>(params.embedding_dim());
  require(embed_trace.mlp.activations.size() ==
              params.embedding.layers.size() + 1,
          "backward: stale embed trace");
  require(logit_grads.empty() || logit_grads.size() == n,
          "backward: logit gradient batch size mismatch");
  require(extra_embedding_grads.empty() || extra_embedding_grads.size() == n,
          "backward: embedding gradient batch size mismatch");

  ModelGradients grads;
  grads.head_weight =
      Matrix(params.head_weight.rows, params.head_weight.cols);
  grads.bn_scale.assign(e, 0.0);
  grads.bn_shift.assign(e, 0.0);

  Batch d_embed(n, Vec(e, 0.0));
  if (!extra_embedding_grads.empty()) {
    for (std::size_t b = 0; b < n; ++b) {
      require(extra_embedding_grads[b].size() == e,
              "backward: embedding gradient dimension mismatch");
      axpy(1.0, extra_embedding_grads[b], d_embed[b]);
    }
  }

  if (!logit_grads.empty()) {
    require(head_trace != nullptr && head_trace->batch_size == n,
            "backward: stale classify trace");
    // Head: logits = W h  =>  dW = g x h, dh = W^T g.
    Batch dh(n, Vec(e, 0.0));
    for (std::size_t b = 0; b < n; ++b) {
      require(logit_grads[b].size() == params.head_weight.rows,
              "backward: logit gradient dimension mismatch");
      for (std::size_t r = 0; r < params.head_weight.rows; ++r) {
        const double g = logit_grads[b][r];
        axpy(g, head_trace->head_input[b], grads.head_weight.row(r));
        axpy(g, params.head_weight.row(r), dh[b]);
      }
    }
    // Dropout (train-mode traces carry the mask; eval passes through).
    if (!head_trace->dropout_scale.empty()) {
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t j = 0; j < e; ++j) {
          dh[b][j] *= head_trace->dropout_scale[b][j];
        }
      }
    }
    // Batchnorm backward through the batch statistics.
    Batch dxhat(n, Vec(e));
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t j = 0; j < e; ++j) {
        grads.bn_scale[j] += dh[b][j] * head_trace->xhat[b][j];
        grads.bn_shift[j] += dh[b][j];
        dxhat[b][j] = dh[b][j] * params.bn.scale[j];
      }
    }
    Vec sum_dxhat(e, 0.0), sum_dxhat_xhat(e, 0.0);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t j = 0; j < e; ++j) {
        sum_dxhat[j] += dxhat[b][j];
        sum_dxhat_xhat[j] += dxhat[b][j] * head_trace->xhat[b][j];
      }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t j = 0; j < e; ++j) {
        d_embed[b][j] += head_trace->inv_std[j] * inv_n *
                         (static_cast<double>(n) * dxhat[b][j] - sum_dxhat[j] -
                          head_trace->xhat[b][j] * sum_dxhat_xhat[j]);
      }
    }
  }

  grads.embedding = mlp_backward(params.embedding, embed_trace.mlp, d_embed);
  return grads;
}

// ---------------------------------------------------------------------------
// Optimizer: Adam with separate learning rates for the embedding network
// (backbone) and the classifier block (head + batchnorm affine).

struct OptimizerConfig {
  double lr_backbone = 0.00035;
  double lr_head = 0.0035;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct ModelAdam {
  std::vector<AdamSlot> weight_slots, bias_slots;
  AdamSlot head_slot, bn_scale_slot, bn_shift_slot;
  long step = 0;
};

inline void adam_step(ModelParams& params, const ModelGradients& grads,
                      ModelAdam& state, const OptimizerConfig& cfg) {
  require(grads.embedding.layers.size() == params.embedding.layers.size(),
          "adam_step: gradient shape mismatch");
  if (state.weight_slots.empty()) {
    state.weight_slots.resize(params.embedding.layers.size());
    state.bias_slots.resize(params.embedding.layers.size());
  }
  ++state.step;
  AdamParams backbone{cfg.lr_backbone, cfg.beta1, cfg.beta2, cfg.epsilon};
  AdamParams head{cfg.lr_head, cfg.beta1, cfg.beta2, cfg.epsilon};
  for (std::size_t l = 0; l < params.embedding.layers.size(); ++l) {
    adam_update(params.embedding.layers[l].weight.data,
                grads.embedding.layers[l].weight.data, state.weight_slots[l],
                backbone, state.step);
    adam_update(params.embedding.layers[l].bias,
                grads.embedding.layers[l].bias, state.bias_slots[l], backbone,
                state.step);
  }
  adam_update(params.head_weight.data, grads.head_weight.data, state.head_slot,
              head, state.step);
  adam_update(params.bn.scale, grads.bn_scale, state.bn_scale_slot, head,
              state.step);
  adam_update(params.bn.shift, grads.bn_shift, state.bn_shift_slot, head,
              state.step);
}

}  // namespace pls
