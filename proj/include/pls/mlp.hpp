#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "pls/common.hpp"
#include "pls/rng.hpp"

namespace pls {

enum class Activation { Tanh, Relu };

inline double activate(Activation act, double z) {
  return act == Activation::Tanh ? std::tanh(z) : (z > 0.0 ? z : 0.0);
}

// Derivative expressed through the activation output, so traces only need
// to keep post-activation values.
inline double activate_grad_from_output(Activation act, double a) {
  return act == Activation::Tanh ? 1.0 - a * a : (a > 0.0 ? 1.0 : 0.0);
}

struct DenseLayer {
  Matrix weight;  // out x in
  Vec bias;       // out

  bool operator==(const DenseLayer&) const = default;
};

// Plain MLP with a linear output layer and the activation on hidden layers.
struct Mlp {
  std::vector<DenseLayer> layers;
  Activation activation = Activation::Tanh;

  int input_dim() const {
    return layers.empty() ? 0 : static_cast<int>(layers.front().weight.cols);
  }
  int output_dim() const {
    return layers.empty() ? 0 : static_cast<int>(layers.back().weight.rows);
  }

  bool operator==(const Mlp&) const = default;
};

// dims = {in, hidden..., out}. Weights are fan-in scaled Gaussians.
inline Mlp init_mlp(const std::vector<int>& dims, Activation act,
                    std::uint64_t seed) {
  require(dims.size() >= 2, "init_mlp: need at least input and output dims");
  for (const int d : dims) require(d >= 1, "init_mlp: dims must be >= 1");
  Mlp net;
  net.activation = act;
  Rng rng(mix_seed(seed, 0x317b));
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    DenseLayer layer;
    const auto in = static_cast<std::size_t>(dims[l]);
    const auto out = static_cast<std::size_t>(dims[l + 1]);
    layer.weight = Matrix(out, in);
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& w : layer.weight.data) w = rng.gaussian() * scale;
    layer.bias.assign(out, 0.0);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

using Batch = std::vector<Vec>;

// activations[0] is the input batch; activations[l+1] the output of layer l
// (post-activation on hidden layers, linear on the last).
struct MlpTrace {
  std::vector<Batch> activations;
};

inline Batch mlp_forward(const Mlp& net, const Batch& inputs,
                         MlpTrace* trace = nullptr) {
  require(!net.layers.empty(), "mlp_forward: empty network");
  for (const auto& x : inputs) {
    require(static_cast<int>(x.size()) == net.input_dim(),
            "mlp_forward: input dimension mismatch");
  }
  Batch current = inputs;
  if (trace) {
    trace->activations.clear();
    trace->activations.push_back(current);
  }
  const std::size_t last = net.layers.size() - 1;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    Batch next(current.size());
    for (std::size_t b = 0; b < current.size(); ++b) {
      Vec out(layer.weight.rows);
      for (std::size_t r = 0; r < layer.weight.rows; ++r) {
        double z = layer.bias[r] + dot(layer.weight.row(r), current[b]);
        out[r] = (l == last) ? z : activate(net.activation, z);
      }
      next[b] = std::move(out);
    }
    current = std::move(next);
    if (trace) trace->activations.push_back(current);
  }
  return current;
}

struct MlpGradients {
  std::vector<DenseLayer> layers;  // same shapes as the network
  Batch input_grads;
};

inline MlpGradients zero_gradients(const Mlp& net) {
  MlpGradients g;
  g.layers.reserve(net.layers.size());
  for (const auto& layer : net.layers) {
    DenseLayer zero;
    zero.weight = Matrix(layer.weight.rows, layer.weight.cols);
    zero.bias.assign(layer.bias.size(), 0.0);
    g.layers.push_back(std::move(zero));
  }
  return g;
}

// output_grads are d(loss)/d(final outputs); gradients are summed over the
// batch (no implicit averaging).
inline MlpGradients mlp_backward(const Mlp& net, const MlpTrace& trace,
                                 const Batch& output_grads) {
  require(trace.activations.size() == net.layers.size() + 1,
          "mlp_backward: trace does not match network depth");
  require(output_grads.size() == trace.activations.front().size(),
          "mlp_backward: stale trace, batch size mismatch");

  MlpGradients grads = zero_gradients(net);
  Batch grad = output_grads;
  const std::size_t last = net.layers.size() - 1;
  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const auto& layer = net.layers[li];
    const Batch& inputs = trace.activations[li];
    const Batch& outputs = trace.activations[li + 1];
    Batch next_grad(grad.size(), Vec(layer.weight.cols, 0.0));
    for (std::size_t b = 0; b < grad.size(); ++b) {
      require(grad[b].size() == layer.weight.rows,
              "mlp_backward: gradient dimension mismatch");
      for (std::size_t r = 0; r < layer.weight.rows; ++r) {
        double g = grad[b][r];
        if (li != last) {
          g *= activate_grad_from_output(net.activation, outputs[b][r]);
        }
        grads.layers[li].bias[r] += g;
        axpy(g, inputs[b], grads.layers[li].weight.row(r));
        axpy(g, layer.weight.row(r), next_grad[b]);
      }
    }
    grad = std::move(next_grad);
  }
  grads.input_grads = std::move(grad);
  return grads;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamSlot {
  Vec m, v;
};

// One Adam update for a flat parameter block. `step` is 1-based and shared
// across all blocks updated together.
inline void adam_update(std::span<double> param, std::span<const double> grad,
                        AdamSlot& slot, const AdamParams& cfg, long step) {
  require(param.size() == grad.size(), "adam_update: shape mismatch");
  if (slot.m.empty()) {
    slot.m.assign(param.size(), 0.0);
    slot.v.assign(param.size(), 0.0);
  }
  require(slot.m.size() == param.size(), "adam_update: stale state shape");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * grad[i];
    slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = slot.m[i] / bc1;
    const double vhat = slot.v[i] / bc2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
  }
}

// Adam over a whole MLP; one slot per tensor.
struct MlpAdam {
  std::vector<AdamSlot> weight_slots, bias_slots;
  long step = 0;

  void update(Mlp& net, const MlpGradients& grads, const AdamParams& cfg) {
    if (weight_slots.empty()) {
      weight_slots.resize(net.layers.size());
      bias_slots.resize(net.layers.size());
    }
    ++step;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      adam_update(net.layers[l].weight.data, grads.layers[l].weight.data,
                  weight_slots[l], cfg, step);
      adam_update(net.layers[l].bias, grads.layers[l].bias, bias_slots[l], cfg,
                  step);
    }
  }
};

}  // namespace pls
