#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pls/dataset.hpp"
#include "pls/eval.hpp"
#include "pls/gan.hpp"
#include "pls/mining.hpp"
#include "pls/serialize.hpp"
#include "pls/trainer.hpp"

namespace pls::cli {

// Exit codes: 0 success, 2 usage/validation error, 3 runtime failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

inline EvalProtocol default_eval_protocol(const Dataset& dataset,
                                          const std::vector<int>& queries,
                                          bool same_camera_exclusion) {
  EvalProtocol protocol;
  protocol.query = queries;
  protocol.gallery.resize(static_cast<std::size_t>(dataset.size()));
  std::iota(protocol.gallery.begin(), protocol.gallery.end(), 0);
  protocol.same_camera_exclusion = same_camera_exclusion;
  return protocol;
}

namespace detail {

struct GenDataArgs {
  SyntheticParams params;
  std::string out;
};

inline void cmd_gen_data(const GenDataArgs& args) {
  const Dataset ds = generate_synthetic(args.params);
  save_dataset(ds, args.out);
  std::cout << "wrote " << ds.size() << " samples (D=" << ds.input_dim
            << " A=" << ds.camera_count << " C=" << ds.identity_count
            << ") to " << args.out << '\n';
}

struct TrainGanArgs {
  std::string data;
  std::string out;
  GanOptions options;
};

inline void cmd_train_gan(const TrainGanArgs& args) {
  const Dataset ds = load_dataset(args.data);
  const CameraTranslator translator = train_translators(ds, args.options);
  save_translators(translator, args.out);
  std::cout << "trained " << translator.pairs.size()
            << " camera-pair translators, residual "
            << mean_cycle_residual(translator, ds) << ", wrote " << args.out
            << '\n';
}

struct AugmentArgs {
  std::string data;
  std::string translators;
  std::string out;
};

inline void cmd_augment(const AugmentArgs& args) {
  const Dataset ds = load_dataset(args.data);
  const CameraTranslator translator = load_translators(args.translators);
  const EnhancedDataset enhanced = augment_dataset(ds, translator);
  save_dataset(enhanced.data, args.out);
  std::cout << "wrote enhanced dataset with " << enhanced.data.size()
            << " samples to " << args.out << '\n';
}

struct MineStepArgs {
  std::string data;
  std::string model;
  std::string out;
  std::string dump_matrix;
  std::string augmented;
  int shots = 1;
  std::uint64_t split_seed = 1;
  int selection_count = 1;
  bool camera_mode = false;
};

inline void cmd_mine_step(const MineStepArgs& args) {
  const Dataset ds = load_dataset(args.data);
  const ModelParams model = load_model(args.model);
  const OneShotSplit split = split_one_shot(ds, args.shots, args.split_seed);
  EnhancedDataset enhanced;
  const EnhancedDataset* enhanced_ptr = nullptr;
  if (args.camera_mode) {
    require(!args.augmented.empty(),
            "mine-step: --camera-mode requires --augmented");
    enhanced = enhanced_from_dataset(load_dataset(args.augmented));
    enhanced_ptr = &enhanced;
  }
  PseudoLabelSet previous;
  DistanceMatrix matrix;
  const PseudoLabelSet mined =
      mine_iteration(model, ds, split, previous, args.selection_count,
                     /*iteration=*/1, args.camera_mode, enhanced_ptr, &matrix);
  write_assignments_csv(mined, args.out);
  if (!args.dump_matrix.empty()) {
    write_distance_matrix_csv(matrix, args.dump_matrix);
  }
  std::cout << "mined " << mined.assignments.size() << " pseudo labels ("
            << mined.rejected.size() << " rejected), wrote " << args.out
            << '\n';
}

struct EvaluateArgs {
  std::string data;
  std::string model;
  std::string out;
  int shots = 0;  // 0: every sample is a query
  std::uint64_t split_seed = 1;
  bool no_camera_exclusion = false;
};

inline void cmd_evaluate(const EvaluateArgs& args) {
  const Dataset ds = load_dataset(args.data);
  const ModelParams model = load_model(args.model);
  std::vector<int> queries;
  if (args.shots > 0) {
    queries = split_one_shot(ds, args.shots, args.split_seed).unlabeled;
  } else {
    queries.resize(static_cast<std::size_t>(ds.size()));
    std::iota(queries.begin(), queries.end(), 0);
  }
  const EvalProtocol protocol =
      default_eval_protocol(ds, queries, !args.no_camera_exclusion);
  const MetricsReport report = evaluate(model, ds, protocol);
  std::ofstream out(args.out);
  if (!out) throw IoError("evaluate: cannot open " + args.out);
  out << metrics_report_to_json(report).dump(2) << '\n';
  std::cout << "rank1 " << report.rank_at(1) << " mAP " << report.mean_ap
            << ", wrote " << args.out << '\n';
}

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out_dir;
  std::string augmented;
  std::string loss_override;
  bool resume = false;
};

inline void cmd_train(const TrainArgs& args) {
  namespace fs = std::filesystem;
  const Dataset ds = load_dataset(args.data);
  fs::create_directories(args.out_dir);
  const std::string runstate_path = args.out_dir + "/runstate.txt";
  const std::string metrics_path = args.out_dir + "/metrics.jsonl";

  RunState state;
  if (args.resume) {
    state = load_run_state(runstate_path);
  } else {
    state.config =
        args.config.empty() ? TrainConfig{} : load_config(args.config);
    if (args.loss_override == "msm") state.config.loss_mode = LossMode::Msm;
    else if (args.loss_override == "hsoften") {
      state.config.loss_mode = LossMode::Hsoften;
    } else if (!args.loss_override.empty()) {
      throw ValidationError("train: --loss must be msm or hsoften");
    }
    validate_config(state.config);
  }
  const TrainConfig& config = state.config;
  const OneShotSplit split =
      split_one_shot(ds, config.shots, config.split_seed);

  EnhancedDataset enhanced;
  const EnhancedDataset* enhanced_ptr = nullptr;
  if (config.camera_mode) {
    if (!args.augmented.empty()) {
      enhanced = enhanced_from_dataset(load_dataset(args.augmented));
      require(enhanced.original_count == ds.size(),
              "train: augmented dataset does not match --data");
    } else {
      GanOptions gan;
      gan.epochs = config.gan_epochs;
      gan.lambda = config.gan_lambda;
      gan.generator = config.gan_generator;
      gan.lr = config.gan_lr;
      gan.seed = mix_seed(config.seed, 0x9a2);
      const CameraTranslator translator = train_translators(ds, gan);
      save_translators(translator, args.out_dir + "/translators.txt");
      enhanced = augment_dataset(ds, translator);
      save_dataset(enhanced.data, args.out_dir + "/augmented.txt");
    }
    enhanced_ptr = &enhanced;
  }

  {
    std::ofstream cfg(args.out_dir + "/config.txt");
    if (!cfg) throw IoError("train: cannot write config echo");
    cfg << serialize_config(config);
  }

  // The metrics log is rewritten from the authoritative history on every
  // callback, so interrupted and resumed runs leave no gaps or duplicates.
  const auto on_iteration = [&](const RunState& s) {
    std::ofstream log(metrics_path, std::ios::trunc);
    if (!log) throw IoError("train: cannot write " + metrics_path);
    for (const auto& m : s.history) {
      log << metrics_to_json(m).dump() << '\n';
    }
    save_run_state(s, runstate_path);
  };

  if (!args.resume) {
    ModelInit init;
    {
      // Class count = identities in the labeled pool.
      std::map<int, int> ids;
      for (const int idx : split.labeled) {
        ids.emplace(ds.samples[static_cast<std::size_t>(idx)].identity, 0);
      }
      init = init_model(ds.input_dim, config.hidden_sizes,
                        config.embedding_dim, static_cast<int>(ids.size()),
                        config.dropout_rate, mix_seed(config.seed, 0x91),
                        config.activation);
    }
    init.params.bn.momentum = config.bn_momentum;
    init.initial.params.bn.momentum = config.bn_momentum;
    state.params = std::move(init.params);
    state.initial = std::move(init.initial);
  }
  continue_pls(state, ds, split, enhanced_ptr, on_iteration);

  save_model(state.params, args.out_dir + "/model.txt");
  const EvalProtocol protocol = default_eval_protocol(
      ds, split.unlabeled, config.eval_same_camera_exclusion);
  MetricsReport report = evaluate(state.params, ds, protocol);
  const PseudoQuality quality =
      pseudo_quality(state.pseudo,
                     config.camera_mode ? enhanced.data : ds,
                     config.camera_mode
                         ? enhanced.data.samples.size() -
                               enhanced.labeled_extension(split.labeled).size()
                         : split.unlabeled.size());
  report.pseudo_precision = quality.precision;
  report.pseudo_recall = quality.recall;
  report.pseudo_ratio = quality.ratio;
  report.pseudo_precision_defaulted = quality.precision_defaulted;
  std::ofstream final_report(args.out_dir + "/final_report.json");
  if (!final_report) throw IoError("train: cannot write final report");
  final_report << metrics_report_to_json(report).dump(2) << '\n';
  std::cout << "finished " << state.history.size() - 1 << " iterations, rank1 "
            << report.rank_at(1) << " mAP " << report.mean_ap << ", outputs in "
            << args.out_dir << '\n';
}

struct ReportArgs {
  std::vector<std::string> logs;
  std::string out;
};

inline void cmd_report(const ReportArgs& args) {
  require(!args.logs.empty(), "report: need at least one metrics log");
  std::vector<std::vector<IterationMetrics>> histories;
  std::vector<std::string> labels;
  for (const auto& path : args.logs) {
    auto history = load_metrics_log(path);
    require(!history.empty(), "report: empty log " + path);
    for (std::size_t i = 0; i < history.size(); ++i) {
      if (history[i].iteration != static_cast<int>(i)) {
        throw ValidationError("report: " + path + ": iteration " +
                              std::to_string(i) + " is missing (found " +
                              std::to_string(history[i].iteration) + ")");
      }
    }
    histories.push_back(std::move(history));
    std::string label = std::filesystem::path(path).stem().string();
    // metrics.jsonl inside a run directory: label by the directory instead.
    if (label == "metrics") {
      const auto parent = std::filesystem::path(path).parent_path().filename();
      if (!parent.empty()) label = parent.string();
    }
    labels.push_back(label);
  }
  for (std::size_t i = 1; i < histories.size(); ++i) {
    require(histories[i].size() == histories.front().size(),
            "report: logs cover different iteration counts");
  }
  // Deduplicate labels.
  std::map<std::string, int> seen;
  for (auto& label : labels) {
    const int n = ++seen[label];
    if (n > 1) label += "_" + std::to_string(n);
  }

  std::ofstream out(args.out);
  if (!out) throw IoError("report: cannot open " + args.out);
  const bool single = histories.size() == 1;
  if (single) {
    out << "ratio,rank1,mAP,precision,recall\n";
  } else {
    bool first = true;
    for (const auto& label : labels) {
      for (const char* col :
           {"ratio", "rank1", "mAP", "precision", "recall"}) {
        out << (first ? "" : ",") << col << '_' << label;
        first = false;
      }
    }
    out << '\n';
  }
  for (std::size_t row = 0; row < histories.front().size(); ++row) {
    bool first = true;
    for (const auto& history : histories) {
      const auto& m = history[row];
      for (const double v : {m.ratio, m.rank1, m.mean_ap, m.pseudo_precision,
                             m.pseudo_recall}) {
        out << (first ? "" : ",") << pls::detail::format_double(v);
        first = false;
      }
    }
    out << '\n';
  }
  std::cout << "wrote " << histories.front().size() << " rows to " << args.out
            << '\n';
}

}  // namespace detail

// Parses and runs one command; returns the process exit code.
inline int run(std::vector<std::string> args) {
  CLI::App app{"Progressive pseudo-label sampling for one-shot metric learning"};
  app.require_subcommand(1);

  detail::GenDataArgs gen_data;
  auto* gen = app.add_subcommand("gen-data",
                                 "Generate a synthetic camera-style dataset");
  gen->add_option("--C", gen_data.params.identity_count, "identity count")
      ->capture_default_str();
  gen->add_option("--per", gen_data.params.per_identity,
                  "samples per identity")
      ->capture_default_str();
  gen->add_option("--D", gen_data.params.input_dim, "feature dimension")
      ->capture_default_str();
  gen->add_option("--A", gen_data.params.camera_count, "camera count")
      ->capture_default_str();
  gen->add_option("--spread", gen_data.params.identity_spread,
                  "identity center scale")
      ->capture_default_str();
  gen->add_option("--shift", gen_data.params.camera_shift_scale,
                  "camera style scale")
      ->capture_default_str();
  gen->add_option("--noise", gen_data.params.noise_scale, "sample noise scale")
      ->capture_default_str();
  gen->add_option("--seed", gen_data.params.seed, "rng seed")
      ->capture_default_str();
  gen->add_option("--out", gen_data.out, "output dataset file")->required();
  gen->callback([&] { detail::cmd_gen_data(gen_data); });

  detail::TrainGanArgs train_gan;
  auto* tg = app.add_subcommand(
      "train-gan", "Train feature-space camera translators (CycleGAN)");
  tg->add_option("--data", train_gan.data, "dataset file")->required();
  tg->add_option("--out", train_gan.out, "translator checkpoint")->required();
  tg->add_option("--epochs", train_gan.options.epochs, "training epochs")
      ->capture_default_str();
  tg->add_option("--lambda", train_gan.options.lambda, "cycle loss weight")
      ->capture_default_str();
  tg->add_option("--lr", train_gan.options.lr, "learning rate")
      ->capture_default_str();
  tg->add_option("--generator", train_gan.options.generator,
                 "generator kind (affine|mlp)")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, GeneratorKind>{
              {"affine", GeneratorKind::Affine},
              {"mlp", GeneratorKind::Mlp}},
          CLI::ignore_case));
  tg->add_option("--seed", train_gan.options.seed, "rng seed")
      ->capture_default_str();
  tg->callback([&] { detail::cmd_train_gan(train_gan); });

  detail::AugmentArgs augment;
  auto* aug = app.add_subcommand(
      "augment", "Expand a dataset with camera-translated samples");
  aug->add_option("--data", augment.data, "dataset file")->required();
  aug->add_option("--translators", augment.translators,
                  "translator checkpoint")
      ->required();
  aug->add_option("--out", augment.out, "output dataset file")->required();
  aug->callback([&] { detail::cmd_augment(augment); });

  detail::TrainArgs train;
  auto* tr = app.add_subcommand("train", "Run the full self-training loop");
  tr->add_option("--data", train.data, "dataset file")->required();
  tr->add_option("--config", train.config, "run configuration file");
  tr->add_option("--out-dir", train.out_dir, "output directory")->required();
  tr->add_option("--augmented", train.augmented,
                 "pre-built augmented dataset (camera mode)");
  tr->add_option("--loss", train.loss_override, "override loss (msm|hsoften)");
  tr->add_flag("--resume", train.resume, "continue from out-dir/runstate.txt");
  tr->callback([&] { detail::cmd_train(train); });

  detail::MineStepArgs mine;
  auto* ms = app.add_subcommand("mine-step",
                                "One mining pass with a trained model");
  ms->add_option("--data", mine.data, "dataset file")->required();
  ms->add_option("--model", mine.model, "model checkpoint")->required();
  ms->add_option("--out", mine.out, "assignments CSV")->required();
  ms->add_option("--T", mine.selection_count, "samples per reference")
      ->capture_default_str();
  ms->add_option("--shots", mine.shots, "labeled samples per identity")
      ->capture_default_str();
  ms->add_option("--split-seed", mine.split_seed, "split rng seed")
      ->capture_default_str();
  ms->add_flag("--camera-mode", mine.camera_mode,
               "mine the augmented pool from camera centers");
  ms->add_option("--augmented", mine.augmented,
                 "augmented dataset (camera mode)");
  ms->add_option("--dump-matrix", mine.dump_matrix,
                 "also write the distance matrix CSV here");
  ms->callback([&] { detail::cmd_mine_step(mine); });

  detail::EvaluateArgs eval_args;
  auto* ev = app.add_subcommand("evaluate", "CMC / mAP evaluation");
  ev->add_option("--data", eval_args.data, "dataset file")->required();
  ev->add_option("--model", eval_args.model, "model checkpoint")->required();
  ev->add_option("--out", eval_args.out, "report JSON")->required();
  ev->add_option("--shots", eval_args.shots,
                 "query only the unlabeled side of a k-shot split")
      ->capture_default_str();
  ev->add_option("--split-seed", eval_args.split_seed, "split rng seed")
      ->capture_default_str();
  ev->add_flag("--no-camera-exclusion", eval_args.no_camera_exclusion,
               "keep same-camera matches in the gallery");
  ev->callback([&] { detail::cmd_evaluate(eval_args); });

  detail::ReportArgs report;
  auto* rp = app.add_subcommand("report",
                                "Merge metrics logs into curve CSV data");
  rp->add_option("--log", report.logs, "metrics.jsonl file (repeatable)")
      ->required();
  rp->add_option("--out", report.out, "output CSV")->required();
  rp->callback([&] { detail::cmd_report(report); });

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace pls::cli
