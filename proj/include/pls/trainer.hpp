#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pls/common.hpp"
#include "pls/dataset.hpp"
#include "pls/eval.hpp"
#include "pls/gan.hpp"
#include "pls/loss.hpp"
#include "pls/mining.hpp"
#include "pls/model.hpp"
#include "pls/rng.hpp"
#include "pls/serialize.hpp"

namespace pls {

enum class LossMode { Msm, Hsoften };

// All knobs of the self-training loop. Field-for-field mirror of the flat
// key=value run configuration file (keys in parse_config below).
struct TrainConfig {
  int identities_per_batch = 16;  // B
  int samples_per_identity = 6;   // S
  double margin = 0.3;            // alpha
  int epochs_per_iteration = 25;
  int t_step = 1;
  bool camera_mode = false;
  LossMode loss_mode = LossMode::Hsoften;
  int shots = 1;
  std::uint64_t seed = 1;
  std::uint64_t split_seed = 1;

  OptimizerConfig optimizer;

  bool triplet_hinge = true;
  TripletNorm triplet_norm = TripletNorm::Sum;

  std::vector<int> hidden_sizes{64};
  int embedding_dim = 32;
  double dropout_rate = 0.5;
  Activation activation = Activation::Tanh;
  double bn_momentum = 0.1;

  int gan_epochs = 300;
  double gan_lambda = 10.0;
  GeneratorKind gan_generator = GeneratorKind::Affine;
  double gan_lr = 0.02;

  bool eval_same_camera_exclusion = true;

  TripletOptions triplet_options() const {
    return TripletOptions{margin, triplet_hinge, triplet_norm};
  }
};

inline void validate_config(const TrainConfig& c) {
  require(c.identities_per_batch >= 2, "config: B must be >= 2");
  require(c.samples_per_identity >= 2, "config: S must be >= 2");
  require(c.margin >= 0.0, "config: alpha must be >= 0");
  require(c.epochs_per_iteration >= 0,
          "config: epochs_per_iteration must be >= 0");
  require(c.t_step >= 1, "config: T_step must be >= 1");
  require(c.shots >= 1, "config: shots must be >= 1");
  require(c.dropout_rate >= 0.0 && c.dropout_rate < 1.0,
          "config: dropout_rate must be in [0, 1)");
  require(c.embedding_dim >= 1, "config: embedding_dim must be >= 1");
  for (const int h : c.hidden_sizes) {
    require(h >= 1, "config: hidden_sizes entries must be >= 1");
  }
  require(c.bn_momentum > 0.0 && c.bn_momentum <= 1.0,
          "config: bn_momentum must be in (0, 1]");
  require(c.gan_epochs >= 0 && c.gan_lambda > 0.0,
          "config: gan settings out of range");
}

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ValidationError("config: bad boolean for " + key + ": '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  std::string token;
  std::istringstream ss(v);
  while (std::getline(ss, token, ',')) {
    if (token.empty()) continue;
    out.push_back(std::stoi(token));
  }
  return out;
}

}  // namespace detail

// Flat key=value text; '#' starts a comment. Unknown keys are rejected.
inline TrainConfig parse_config_text(std::istream& in) {
  TrainConfig c;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::string key, eq, value;
    std::istringstream ss(line);
    if (!(ss >> key)) continue;
    if (!(ss >> eq) || eq != "=" || !(ss >> value)) {
      throw ValidationError("config line " + std::to_string(line_no) +
                            ": expected 'key = value'");
    }
    try {
      if (key == "B") c.identities_per_batch = std::stoi(value);
      else if (key == "S") c.samples_per_identity = std::stoi(value);
      else if (key == "alpha") c.margin = std::stod(value);
      else if (key == "epochs_per_iteration") c.epochs_per_iteration = std::stoi(value);
      else if (key == "T_step") c.t_step = std::stoi(value);
      else if (key == "camera_mode") c.camera_mode = detail::parse_bool(value, key);
      else if (key == "loss_mode") {
        if (value == "msm") c.loss_mode = LossMode::Msm;
        else if (value == "hsoften") c.loss_mode = LossMode::Hsoften;
        else throw ValidationError("config: loss_mode must be msm or hsoften");
      }
      else if (key == "shots") c.shots = std::stoi(value);
      else if (key == "seed") c.seed = std::stoull(value);
      else if (key == "split_seed") c.split_seed = std::stoull(value);
      else if (key == "lr_backbone") c.optimizer.lr_backbone = std::stod(value);
      else if (key == "lr_head") c.optimizer.lr_head = std::stod(value);
      else if (key == "adam_beta1") c.optimizer.beta1 = std::stod(value);
      else if (key == "adam_beta2") c.optimizer.beta2 = std::stod(value);
      else if (key == "triplet_hinge") c.triplet_hinge = detail::parse_bool(value, key);
      else if (key == "triplet_normalization") {
        if (value == "sum") c.triplet_norm = TripletNorm::Sum;
        else if (value == "mean") c.triplet_norm = TripletNorm::MeanOverAnchors;
        else throw ValidationError("config: triplet_normalization must be sum or mean");
      }
      else if (key == "hidden_sizes") c.hidden_sizes = detail::parse_int_list(value);
      else if (key == "embedding_dim") c.embedding_dim = std::stoi(value);
      else if (key == "dropout_rate") c.dropout_rate = std::stod(value);
      else if (key == "activation") c.activation = detail::activation_from_name(value);
      else if (key == "bn_momentum") c.bn_momentum = std::stod(value);
      else if (key == "gan_epochs") c.gan_epochs = std::stoi(value);
      else if (key == "gan_lambda") c.gan_lambda = std::stod(value);
      else if (key == "gan_generator") {
        if (value == "affine") c.gan_generator = GeneratorKind::Affine;
        else if (value == "mlp") c.gan_generator = GeneratorKind::Mlp;
        else throw ValidationError("config: gan_generator must be affine or mlp");
      }
      else if (key == "gan_lr") c.gan_lr = std::stod(value);
      else if (key == "eval_same_camera_exclusion") {
        c.eval_same_camera_exclusion = detail::parse_bool(value, key);
      }
      else throw ValidationError("config line " + std::to_string(line_no) +
                                 ": unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw ValidationError("config line " + std::to_string(line_no) +
                            ": bad value for " + key);
    } catch (const std::out_of_range&) {
      throw ValidationError("config line " + std::to_string(line_no) +
                            ": value out of range for " + key);
    }
  }
  validate_config(c);
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_config: cannot open " + path);
  return parse_config_text(in);
}

inline std::string serialize_config(const TrainConfig& c) {
  std::ostringstream out;
  out << "B = " << c.identities_per_batch << '\n';
  out << "S = " << c.samples_per_identity << '\n';
  out << "alpha = " << detail::format_double(c.margin) << '\n';
  out << "epochs_per_iteration = " << c.epochs_per_iteration << '\n';
  out << "T_step = " << c.t_step << '\n';
  out << "camera_mode = " << (c.camera_mode ? "true" : "false") << '\n';
  out << "loss_mode = " << (c.loss_mode == LossMode::Msm ? "msm" : "hsoften")
      << '\n';
  out << "shots = " << c.shots << '\n';
  out << "seed = " << c.seed << '\n';
  out << "split_seed = " << c.split_seed << '\n';
  out << "lr_backbone = " << detail::format_double(c.optimizer.lr_backbone)
      << '\n';
  out << "lr_head = " << detail::format_double(c.optimizer.lr_head) << '\n';
  out << "adam_beta1 = " << detail::format_double(c.optimizer.beta1) << '\n';
  out << "adam_beta2 = " << detail::format_double(c.optimizer.beta2) << '\n';
  out << "triplet_hinge = " << (c.triplet_hinge ? "true" : "false") << '\n';
  out << "triplet_normalization = "
      << (c.triplet_norm == TripletNorm::Sum ? "sum" : "mean") << '\n';
  out << "hidden_sizes = ";
  for (std::size_t i = 0; i < c.hidden_sizes.size(); ++i) {
    out << (i ? "," : "") << c.hidden_sizes[i];
  }
  out << '\n';
  out << "embedding_dim = " << c.embedding_dim << '\n';
  out << "dropout_rate = " << detail::format_double(c.dropout_rate) << '\n';
  out << "activation = " << detail::activation_name(c.activation) << '\n';
  out << "bn_momentum = " << detail::format_double(c.bn_momentum) << '\n';
  out << "gan_epochs = " << c.gan_epochs << '\n';
  out << "gan_lambda = " << detail::format_double(c.gan_lambda) << '\n';
  out << "gan_generator = "
      << (c.gan_generator == GeneratorKind::Affine ? "affine" : "mlp") << '\n';
  out << "gan_lr = " << detail::format_double(c.gan_lr) << '\n';
  out << "eval_same_camera_exclusion = "
      << (c.eval_same_camera_exclusion ? "true" : "false") << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Batch formation (one labeled anchor + S-1 pseudo members per group)

struct LabeledPool {
  // identity -> anchor candidate sample indices (the one-shot samples, or
  // the labeled extension in camera mode)
  std::map<int, std::vector<int>> anchors_by_identity;
};

struct PseudoPool {
  std::map<int, std::vector<int>> members_by_identity;
};

struct FormedBatch {
  TripletBatch triplets;
  std::vector<int> sample_indices;  // per batch position
  std::vector<int> labels;          // class indices for the softmax head
  int repeated_members = 0;         // with-replacement fills
};

// B distinct identities drawn uniformly without replacement, preferring
// identities holding at least S-1 pseudo members; groups are filled with
// replacement when an identity has fewer. Identities without any pseudo
// member never enter a triplet batch.
inline FormedBatch form_batch(const LabeledPool& labeled,
                              const PseudoPool& pseudo, int group_count,
                              int group_size,
                              const std::map<int, int>& class_of_identity,
                              Rng& rng, bool allow_reduced_batch = true) {
  require(group_count >= 2, "form_batch: B must be >= 2");
  require(group_size >= 2, "form_batch: S must be >= 2");

  std::vector<int> eligible, preferred;
  for (const auto& [identity, members] : pseudo.members_by_identity) {
    if (members.empty()) continue;
    if (labeled.anchors_by_identity.find(identity) ==
        labeled.anchors_by_identity.end()) {
      continue;
    }
    eligible.push_back(identity);
    if (static_cast<int>(members.size()) >= group_size - 1) {
      preferred.push_back(identity);
    }
  }
  int batch_groups = group_count;
  if (static_cast<int>(eligible.size()) < group_count) {
    if (!allow_reduced_batch || eligible.size() < 2) {
      throw ValidationError(
          "form_batch: only " + std::to_string(eligible.size()) +
          " identities have pseudo samples, need " +
          std::to_string(group_count));
    }
    batch_groups = static_cast<int>(eligible.size());
  }

  std::vector<int> chosen;
  if (static_cast<int>(preferred.size()) >= batch_groups) {
    for (const auto k : rng.sample_without_replacement(
             preferred.size(), static_cast<std::size_t>(batch_groups))) {
      chosen.push_back(preferred[k]);
    }
  } else {
    chosen = preferred;
    std::vector<int> rest;
    for (const int id : eligible) {
      if (std::find(preferred.begin(), preferred.end(), id) == preferred.end()) {
        rest.push_back(id);
      }
    }
    const auto need = static_cast<std::size_t>(batch_groups) - chosen.size();
    for (const auto k : rng.sample_without_replacement(rest.size(), need)) {
      chosen.push_back(rest[k]);
    }
  }

  FormedBatch out;
  int next_index = 0;
  for (const int identity : chosen) {
    TripletBatch::Group group;
    group.identity = identity;
    const auto& anchors = labeled.anchors_by_identity.at(identity);
    const int anchor =
        anchors[rng.uniform_index(anchors.size())];
    group.members.push_back({next_index, MemberRole::LabeledAnchor});
    out.sample_indices.push_back(anchor);
    out.labels.push_back(class_of_identity.at(identity));
    ++next_index;

    const auto& members = pseudo.members_by_identity.at(identity);
    std::vector<int> picked;
    const auto want = static_cast<std::size_t>(group_size - 1);
    if (members.size() >= want) {
      for (const auto k : rng.sample_without_replacement(members.size(), want)) {
        picked.push_back(members[k]);
      }
    } else {
      picked = members;
      rng.shuffle(picked);
      while (picked.size() < want) {
        picked.push_back(members[rng.uniform_index(members.size())]);
        ++out.repeated_members;
      }
    }
    for (const int idx : picked) {
      group.members.push_back({next_index, MemberRole::Pseudo});
      out.sample_indices.push_back(idx);
      out.labels.push_back(class_of_identity.at(identity));
      ++next_index;
    }
    out.triplets.groups.push_back(std::move(group));
  }
  out.triplets.batch_size = next_index;
  return out;
}

// ---------------------------------------------------------------------------
// The self-training loop

struct IterationMetrics {
  int iteration = 0;
  int selection_count = 0;  // T for this iteration
  double ratio = 0.0;
  double pseudo_precision = 1.0;
  double pseudo_recall = 0.0;
  double rank1 = 0.0, rank5 = 0.0, rank10 = 0.0;
  double mean_ap = 0.0;
};

struct RunState {
  TrainConfig config;
  ModelParams params;
  ModelSnapshot initial;
  PseudoLabelSet pseudo;
  int iteration = 0;
  int selection_count = 0;
  bool finished = false;
  std::vector<IterationMetrics> history;
};

using IterationCallback = std::function<void(const RunState&)>;

namespace detail {

struct TrainContext {
  const Dataset* train_data = nullptr;  // original or enhanced
  LabeledPool labeled;
  std::map<int, int> class_of_identity;
  EvalProtocol protocol;
  std::size_t unlabeled_total = 0;
};

inline TrainContext make_context(const Dataset& dataset,
                                 const OneShotSplit& split,
                                 const TrainConfig& config,
                                 const EnhancedDataset* enhanced) {
  TrainContext ctx;
  ctx.train_data = config.camera_mode ? &enhanced->data : &dataset;

  const std::vector<int> anchor_pool =
      config.camera_mode ? enhanced->labeled_extension(split.labeled)
                         : split.labeled;
  for (const int idx : anchor_pool) {
    const int identity =
        ctx.train_data->samples[static_cast<std::size_t>(idx)].identity;
    ctx.labeled.anchors_by_identity[identity].push_back(idx);
  }
  int next_class = 0;
  for (const auto& [identity, anchors] : ctx.labeled.anchors_by_identity) {
    ctx.class_of_identity[identity] = next_class++;
  }

  ctx.protocol.query = split.unlabeled;
  ctx.protocol.gallery.resize(static_cast<std::size_t>(dataset.size()));
  std::iota(ctx.protocol.gallery.begin(), ctx.protocol.gallery.end(), 0);
  ctx.protocol.same_camera_exclusion = config.eval_same_camera_exclusion;

  ctx.unlabeled_total =
      config.camera_mode
          ? static_cast<std::size_t>(enhanced->data.size()) -
                enhanced->labeled_extension(split.labeled).size()
          : split.unlabeled.size();
  return ctx;
}

// Classification-only steps over random labeled anchors; used for vanilla
// initial training where one-shot groups have no positives.
inline void softmax_phase(ModelParams& params, const TrainContext& ctx,
                          const TrainConfig& config, std::uint64_t phase_seed) {
  const int identity_count = static_cast<int>(ctx.class_of_identity.size());
  const int steps_per_epoch = std::max(
      1, (identity_count + config.identities_per_batch - 1) /
             config.identities_per_batch);
  const long total_steps =
      static_cast<long>(config.epochs_per_iteration) * steps_per_epoch;

  std::vector<int> identities;
  for (const auto& [identity, anchors] : ctx.labeled.anchors_by_identity) {
    identities.push_back(identity);
  }
  ModelAdam adam;
  for (long step = 0; step < total_steps; ++step) {
    Rng rng(mix_seed(phase_seed, 0xba7c4, static_cast<std::uint64_t>(step)));
    const auto take = std::min<std::size_t>(
        static_cast<std::size_t>(config.identities_per_batch),
        identities.size());
    Batch inputs;
    std::vector<int> labels;
    for (const auto k :
         rng.sample_without_replacement(identities.size(), take)) {
      const int identity = identities[k];
      const auto& anchors = ctx.labeled.anchors_by_identity.at(identity);
      const int idx = anchors[rng.uniform_index(anchors.size())];
      inputs.push_back(
          ctx.train_data->samples[static_cast<std::size_t>(idx)].input);
      labels.push_back(ctx.class_of_identity.at(identity));
    }
    EmbedTrace embed_trace;
    const Batch embeddings = embed(params, inputs, Mode::Train, &embed_trace);
    ClassifyTrace head_trace;
    const Batch logits =
        classify(params, embeddings, Mode::Train,
                 mix_seed(phase_seed, 0xd407, static_cast<std::uint64_t>(step)),
                 &head_trace);
    const LossValue ce = softmax_ce(logits, labels);
    const ModelGradients grads =
        backward(params, embed_trace, &head_trace, ce.logit_grads, {});
    commit_batch_stats(params, head_trace);
    adam_step(params, grads, adam, config.optimizer);
  }
}

// Joint softmax + triplet steps over formed batches.
inline void triplet_phase(ModelParams& params, const TrainContext& ctx,
                          const PseudoPool& pseudo_pool, int group_size,
                          const TrainConfig& config,
                          std::uint64_t phase_seed) {
  const int identity_count = static_cast<int>(ctx.class_of_identity.size());
  const int steps_per_epoch = std::max(
      1, (identity_count + config.identities_per_batch - 1) /
             config.identities_per_batch);
  const long total_steps =
      static_cast<long>(config.epochs_per_iteration) * steps_per_epoch;

  const TripletOptions triplet_opts = config.triplet_options();
  ModelAdam adam;
  for (long step = 0; step < total_steps; ++step) {
    Rng rng(mix_seed(phase_seed, 0xba7c4, static_cast<std::uint64_t>(step)));
    const FormedBatch batch =
        form_batch(ctx.labeled, pseudo_pool, config.identities_per_batch,
                   group_size, ctx.class_of_identity, rng);
    Batch inputs;
    inputs.reserve(batch.sample_indices.size());
    for (const int idx : batch.sample_indices) {
      inputs.push_back(
          ctx.train_data->samples[static_cast<std::size_t>(idx)].input);
    }
    EmbedTrace embed_trace;
    const Batch embeddings = embed(params, inputs, Mode::Train, &embed_trace);
    ClassifyTrace head_trace;
    const Batch logits =
        classify(params, embeddings, Mode::Train,
                 mix_seed(phase_seed, 0xd407, static_cast<std::uint64_t>(step)),
                 &head_trace);
    const LossValue ce = softmax_ce(logits, batch.labels);
    const LossValue triplet =
        config.loss_mode == LossMode::Msm
            ? msm_loss(batch.triplets, embeddings, triplet_opts)
            : hsoften_loss(batch.triplets, embeddings, triplet_opts);
    const ModelGradients grads = backward(params, embed_trace, &head_trace,
                                          ce.logit_grads,
                                          triplet.embedding_grads);
    commit_batch_stats(params, head_trace);
    adam_step(params, grads, adam, config.optimizer);
  }
}

inline PseudoPool pool_from_pseudo_set(const PseudoLabelSet& pseudo) {
  PseudoPool pool;
  for (const auto& [index, a] : pseudo.assignments) {
    pool.members_by_identity[a.identity].push_back(index);
  }
  return pool;
}

// In camera mode the generated copies of the one-shot samples stand in as
// group members, so the full loss applies from the start.
inline PseudoPool initial_camera_pool(const EnhancedDataset& enhanced,
                                      const OneShotSplit& split) {
  PseudoPool pool;
  std::vector<bool> labeled(static_cast<std::size_t>(enhanced.original_count),
                            false);
  for (const int idx : split.labeled) {
    labeled[static_cast<std::size_t>(idx)] = true;
  }
  for (int idx = enhanced.original_count; idx < enhanced.data.size(); ++idx) {
    const int source = enhanced.source_index[static_cast<std::size_t>(idx)];
    if (labeled[static_cast<std::size_t>(source)]) {
      const int identity =
          enhanced.data.samples[static_cast<std::size_t>(idx)].identity;
      pool.members_by_identity[identity].push_back(idx);
    }
  }
  return pool;
}

inline IterationMetrics snapshot_metrics(const RunState& state,
                                         const MetricsReport& report,
                                         const PseudoQuality& quality) {
  IterationMetrics m;
  m.iteration = state.iteration;
  m.selection_count = state.selection_count;
  m.ratio = quality.ratio;
  m.pseudo_precision = quality.precision;
  m.pseudo_recall = quality.recall;
  m.rank1 = report.rank_at(1);
  m.rank5 = report.rank_at(5);
  m.rank10 = report.rank_at(10);
  m.mean_ap = report.mean_ap;
  return m;
}

}  // namespace detail

// Upper bound on the schedule: the iteration count at which preliminary
// selection can claim every unlabeled column.
inline int max_selection_count(std::size_t unlabeled_total,
                               std::size_t reference_count,
                               int per_reference_factor) {
  const auto denom = reference_count * static_cast<std::size_t>(
                                           per_reference_factor);
  require(denom > 0, "max_selection_count: no references");
  return static_cast<int>((unlabeled_total + denom - 1) / denom);
}

// Initial model: one-shot samples only. Vanilla mode has no positive pairs,
// so it trains with softmax alone; camera mode forms triplet groups from
// the labeled extension. epochs_per_iteration == 0 leaves params untouched.
inline ModelParams train_initial(const ModelParams& init,
                                 const Dataset& dataset,
                                 const OneShotSplit& split,
                                 const TrainConfig& config,
                                 const EnhancedDataset* enhanced = nullptr) {
  validate_config(config);
  require(!split.labeled.empty(), "train_initial: empty labeled set");
  require(!config.camera_mode || enhanced != nullptr,
          "train_initial: camera mode requires the enhanced dataset");
  const detail::TrainContext ctx =
      detail::make_context(dataset, split, config, enhanced);
  ModelParams params = init;
  const std::uint64_t phase_seed = mix_seed(config.seed, 0x1417);
  if (config.camera_mode) {
    const PseudoPool pool = detail::initial_camera_pool(*enhanced, split);
    const int group_size =
        std::min(config.samples_per_identity, dataset.camera_count);
    detail::triplet_phase(params, ctx, pool, group_size, config, phase_seed);
  } else {
    detail::softmax_phase(params, ctx, config, phase_seed);
  }
  return params;
}

// Continues a run from its current state until the schedule is exhausted.
// The callback fires after every recorded history entry.
inline void continue_pls(RunState& state, const Dataset& dataset,
                         const OneShotSplit& split,
                         const EnhancedDataset* enhanced = nullptr,
                         const IterationCallback& on_iteration = nullptr) {
  const TrainConfig& config = state.config;
  validate_config(config);
  require(!config.camera_mode || enhanced != nullptr,
          "continue_pls: camera mode requires the enhanced dataset");

  const detail::TrainContext ctx =
      detail::make_context(dataset, split, config, enhanced);
  const Dataset& pseudo_truth =
      config.camera_mode ? enhanced->data : dataset;
  const int per_ref = config.camera_mode ? dataset.camera_count : 1;
  const int t_max =
      max_selection_count(ctx.unlabeled_total, split.labeled.size(), per_ref);

  // Iteration 0: the one-shot baseline, before any mining.
  if (state.history.empty()) {
    state.params = train_initial(restore(state.initial), dataset, split,
                                 config, enhanced);
    const MetricsReport report = evaluate(state.params, dataset, ctx.protocol);
    PseudoQuality quality;
    quality.precision_defaulted = true;
    state.history.push_back(detail::snapshot_metrics(state, report, quality));
    if (on_iteration) on_iteration(state);
  }

  while (state.selection_count < t_max) {
    state.selection_count =
        std::min(state.selection_count + config.t_step, t_max);
    ++state.iteration;

    // Mine with the latest model, then retrain from the initial snapshot.
    state.pseudo = mine_iteration(state.params, dataset, split, state.pseudo,
                                  state.selection_count, state.iteration,
                                  config.camera_mode, enhanced);
    const PseudoQuality quality =
        pseudo_quality(state.pseudo, pseudo_truth, ctx.unlabeled_total);

    state.params = restore(state.initial);
    // (S-1) <= T: early iterations cap the group size at T+1 so groups
    // never request more pseudo members than the schedule has released.
    const int cap = config.camera_mode
                        ? state.selection_count * dataset.camera_count + 1
                        : state.selection_count + 1;
    const int group_size = std::min(config.samples_per_identity, cap);
    const PseudoPool pool = detail::pool_from_pseudo_set(state.pseudo);
    detail::triplet_phase(
        state.params, ctx, pool, std::max(2, group_size), config,
        mix_seed(config.seed, 0x17e4,
                 static_cast<std::uint64_t>(state.iteration)));

    const MetricsReport report = evaluate(state.params, dataset, ctx.protocol);
    state.history.push_back(detail::snapshot_metrics(state, report, quality));
    if (on_iteration) on_iteration(state);
  }
  state.finished = true;
  if (on_iteration) on_iteration(state);
}

// Full run: seeded initialization, initial training, then mining/training
// iterations until every unlabeled sample can hold a pseudo label.
inline RunState run_pls(const Dataset& dataset, const OneShotSplit& split,
                        const TrainConfig& config,
                        const EnhancedDataset* enhanced = nullptr,
                        const IterationCallback& on_iteration = nullptr) {
  validate_config(config);
  RunState state;
  state.config = config;
  ModelInit init = init_model(
      dataset.input_dim, config.hidden_sizes, config.embedding_dim,
      static_cast<int>(
          detail::make_context(dataset, split, config, enhanced)
              .class_of_identity.size()),
      config.dropout_rate, mix_seed(config.seed, 0x91), config.activation);
  init.params.bn.momentum = config.bn_momentum;
  init.initial.params.bn.momentum = config.bn_momentum;
  state.params = std::move(init.params);
  state.initial = std::move(init.initial);
  continue_pls(state, dataset, split, enhanced, on_iteration);
  return state;
}

// ---------------------------------------------------------------------------
// Metrics log (JSON lines) and run-state checkpoints

inline nlohmann::ordered_json metrics_to_json(const IterationMetrics& m) {
  nlohmann::ordered_json j;
  j["iteration"] = m.iteration;
  j["T"] = m.selection_count;
  j["ratio"] = m.ratio;
  j["pseudo_precision"] = m.pseudo_precision;
  j["pseudo_recall"] = m.pseudo_recall;
  j["rank1"] = m.rank1;
  j["rank5"] = m.rank5;
  j["rank10"] = m.rank10;
  j["mAP"] = m.mean_ap;
  return j;
}

inline IterationMetrics metrics_from_json(const nlohmann::json& j) {
  IterationMetrics m;
  m.iteration = j.at("iteration").get<int>();
  m.selection_count = j.at("T").get<int>();
  m.ratio = j.at("ratio").get<double>();
  m.pseudo_precision = j.at("pseudo_precision").get<double>();
  m.pseudo_recall = j.at("pseudo_recall").get<double>();
  m.rank1 = j.at("rank1").get<double>();
  m.rank5 = j.at("rank5").get<double>();
  m.rank10 = j.at("rank10").get<double>();
  m.mean_ap = j.at("mAP").get<double>();
  return m;
}

inline std::vector<IterationMetrics> load_metrics_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_metrics_log: cannot open " + path);
  std::vector<IterationMetrics> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("metrics log " + path + ":" +
                            std::to_string(line_no) + ": " + e.what());
    }
    try {
      out.push_back(metrics_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("metrics log " + path + ":" +
                            std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline constexpr const char* kRunStateFormatHeader = "pls-runstate 1";

inline void save_run_state(const RunState& state, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_run_state: cannot open " + path);
  out << kRunStateFormatHeader << '\n';
  out << "config-begin\n" << serialize_config(state.config) << "config-end\n";
  out << "progress " << state.iteration << ' ' << state.selection_count << ' '
      << (state.finished ? 1 : 0) << '\n';
  out << "params\n";
  detail::write_model_body(out, state.params);
  out << "snapshot " << state.initial.init_seed << '\n';
  detail::write_model_body(out, state.initial.params);
  out << "pseudo " << state.pseudo.assignments.size() << '\n';
  for (const auto& [index, a] : state.pseudo.assignments) {
    out << index << ' ' << a.identity << ' ' << a.iteration_added << ' '
        << detail::format_double(a.distance) << '\n';
  }
  out << "rejected " << state.pseudo.rejected.size();
  for (const int idx : state.pseudo.rejected) out << ' ' << idx;
  out << '\n';
  out << "history " << state.history.size() << '\n';
  for (const auto& m : state.history) {
    out << metrics_to_json(m).dump() << '\n';
  }
  if (!out) throw IoError("save_run_state: write failed for " + path);
}

inline RunState load_run_state(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_run_state: cannot open " + path);
  std::string word, version;
  if (!(in >> word >> version) || word != "pls-runstate" || version != "1") {
    throw ValidationError("load_run_state: " + path +
                          ": missing or unsupported format header");
  }
  std::string line;
  std::getline(in, line);
  std::getline(in, line);
  require(line == "config-begin", "load_run_state: missing config block");
  std::ostringstream config_text;
  while (std::getline(in, line) && line != "config-end") {
    config_text << line << '\n';
  }
  std::istringstream config_in(config_text.str());
  RunState state;
  state.config = parse_config_text(config_in);

  detail::expect_token(in, "progress");
  int finished = 0;
  if (!(in >> state.iteration >> state.selection_count >> finished)) {
    throw ValidationError("load_run_state: bad progress line");
  }
  state.finished = finished != 0;
  detail::expect_token(in, "params");
  state.params = detail::read_model_body(in);
  detail::expect_token(in, "snapshot");
  if (!(in >> state.initial.init_seed)) {
    throw ValidationError("load_run_state: bad snapshot seed");
  }
  state.initial.params = detail::read_model_body(in);

  detail::expect_token(in, "pseudo");
  std::size_t count = 0;
  if (!(in >> count)) throw ValidationError("load_run_state: bad pseudo count");
  for (std::size_t i = 0; i < count; ++i) {
    int index = 0;
    PseudoLabelSet::Assignment a;
    if (!(in >> index >> a.identity >> a.iteration_added >> a.distance)) {
      throw ValidationError("load_run_state: bad pseudo assignment");
    }
    state.pseudo.assignments.emplace(index, a);
  }
  detail::expect_token(in, "rejected");
  if (!(in >> count)) {
    throw ValidationError("load_run_state: bad rejected count");
  }
  state.pseudo.rejected.resize(count);
  for (auto& idx : state.pseudo.rejected) {
    if (!(in >> idx)) throw ValidationError("load_run_state: bad rejected id");
  }
  detail::expect_token(in, "history");
  if (!(in >> count)) {
    throw ValidationError("load_run_state: bad history count");
  }
  std::getline(in, line);
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) {
      throw ValidationError("load_run_state: truncated history");
    }
    state.history.push_back(metrics_from_json(nlohmann::json::parse(line)));
  }
  return state;
}

}  // namespace pls
