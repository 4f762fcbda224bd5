#pragma once

// Command-line verbs. Each cmd_* returns a process exit code:
// 0 success, 1 check failed or internal error, 2 configuration error,
// 3 data or I/O error.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "p2s/checkpoint.hpp"
#include "p2s/config.hpp"
#include "p2s/data.hpp"
#include "p2s/errors.hpp"
#include "p2s/model.hpp"
#include "p2s/training.hpp"

namespace p2s {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;

struct CommonOptions {
  std::string config;                // optional config file
  std::vector<std::string> sets;     // section.key=value, applied in order
  std::optional<std::string> out;    // output.dir
  std::optional<std::uint64_t> seed;
};

namespace detail {

/// Runs `body`, mapping exceptions to exit codes with a message on `err`.
inline int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ArgumentError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailed;
  }
}

inline void echo_config(std::ostream& out, const RunConfig& cfg) {
  out << "# effective configuration\n" << format_config(cfg) << "# end configuration\n";
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
}

inline std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

inline std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (width.size() <= c) width.push_back(0);
      width[c] = std::max(width[c], r[c].size());
    }
  std::string out;
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) line += "  ";
      line += r[c] + std::string(width[c] - r[c].size(), ' ');
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  return out;
}

}  // namespace detail

/// Defaults, then the config file, then --set overrides, then --out/--seed.
/// --seed sets train.seed, or data.seed when `seed_in_data`.
inline RunConfig resolve_config(const CommonOptions& opts, bool seed_in_data = false) {
  RunConfig cfg = opts.config.empty() ? RunConfig{} : load_config(opts.config);
  for (const auto& s : opts.sets) apply_override(cfg, s);
  if (opts.out) cfg.output_dir = *opts.out;
  if (opts.seed) (seed_in_data ? cfg.data.seed : cfg.train.seed) = *opts.seed;
  return cfg;
}

// Evaluation summary, one row per split; identical between train and eval.
inline std::string summary_table(Point2Sequence& model, const Dataset& ds, const std::vector<std::string>& splits) {
  const bool cls = model.config().task == Task::classification;
  std::vector<std::vector<std::string>> rows;
  if (cls) {
    rows.push_back({"split", "shapes", "class_acc", "instance_acc"});
  } else {
    rows.push_back({"split", "shapes", "mean"});
    for (const auto& n : ds.names) rows[0].push_back(n);
  }
  for (const auto& split : splits) {
    const auto prepared = prepare_samples(model, ds.split(split));
    std::vector<std::string> row{split, std::to_string(prepared.size())};
    if (cls) {
      const auto m = evaluate_classification(model, prepared);
      row.push_back(detail::fixed6(m.class_accuracy));
      row.push_back(detail::fixed6(m.instance_accuracy));
    } else {
      const auto m = evaluate_segmentation(model, prepared, ds.part_ranges);
      row.push_back(detail::fixed6(m.instance_miou));
      for (std::size_t c = 0; c < ds.names.size(); ++c)
        row.push_back(m.category_count[c] ? detail::fixed6(m.category_miou[c]) : "-");
    }
    rows.push_back(row);
  }
  return detail::table(rows);
}

namespace detail {

inline void check_compatible(const ModelConfig& model, const Dataset& ds) {
  if (model.task != ds.task)
    throw ConfigError("checkpoint task " + to_string(model.task) + " does not match dataset task " + to_string(ds.task));
  if (ds.output_count() > model.outputs)
    throw ConfigError("dataset needs " + std::to_string(ds.output_count()) + " outputs, model has " +
                      std::to_string(model.outputs));
}

}  // namespace detail

/// Trains on the configured dataset; writes config.txt, metrics.log and
/// model.ckpt (best epoch) to the output directory.
inline int cmd_train(const CommonOptions& opts, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    RunConfig cfg = resolve_config(opts);
    const Dataset ds = load_dataset(cfg);
    cfg.model.task = ds.task;
    cfg.model.outputs = ds.output_count();
    cfg.validate();
    detail::echo_config(out, cfg);

    const std::filesystem::path dir = cfg.output_dir;
    detail::ensure_dir(dir);
    write_text_file(dir / "config.txt", format_config(cfg));
    std::ofstream log(dir / "metrics.log");
    if (!log) throw DataError("cannot write " + (dir / "metrics.log").string());

    TrainResult result = train(ds, cfg.model, cfg.train, [&](const EpochRecord& r) {
      const std::string line = format_epoch(r, cfg.model.task);
      log << line << "\n";
      out << line << "\n";
    });
    save_checkpoint(dir / "model.ckpt", result.model);

    std::vector<std::string> splits;
    for (const char* split : {"train", "val", "test"})
      if (!ds.split(split).empty()) splits.push_back(split);
    const std::string summary =
        "best_epoch=" + std::to_string(result.best_epoch) + "\n" + summary_table(result.model, ds, splits);
    log << summary;
    out << summary;
    if (!log) throw DataError("cannot write " + (dir / "metrics.log").string());
    return kExitOk;
  });
}

/// Evaluates a checkpoint on one split of a manifest (or the configured dataset).
inline int cmd_eval(const std::string& checkpoint, const std::string& manifest, const std::string& split,
                    const CommonOptions& opts, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    RunConfig cfg = resolve_config(opts);
    if (!manifest.empty()) cfg.data.manifest = manifest;
    if (split != "train" && split != "val" && split != "test") throw ConfigError("unknown split '" + split + "'");
    Point2Sequence model = load_checkpoint(checkpoint);
    const Dataset ds = load_dataset(cfg);
    detail::check_compatible(model.config(), ds);
    if (ds.split(split).empty()) throw DataError("split '" + split + "' is empty");
    out << "# checkpoint configuration\n" << checkpoint_config_text(model.config());
    out << summary_table(model, ds, {split});
    return kExitOk;
  });
}

/// Finite-difference check of every parameter on the tiny classification and
/// segmentation configurations. Exit 0 iff every error is below `tolerance`.
inline int cmd_gradcheck(double tolerance, std::uint64_t seed, std::ostream& out, std::ostream& err,
                         GradCheckReport* report_out = nullptr) {
  return detail::guarded(err, [&] {
    if (!(tolerance > 0.0)) throw ConfigError("tolerance must be positive");
    GradCheckReport all;
    std::vector<std::vector<std::string>> rows{{"parameter", "checked", "max_rel_error"}};
    for (Task task : {Task::classification, Task::segmentation}) {
      const std::string prefix = task == Task::classification ? "cls/" : "seg/";
      for (auto e : gradient_check(tiny_config(task), 20, seed).entries) {
        e.name = prefix + e.name;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.3e", e.max_rel_error);
        rows.push_back({e.name, std::to_string(e.checked), buf});
        all.entries.push_back(e);
      }
    }
    out << detail::table(rows);
    char buf[96];
    std::snprintf(buf, sizeof buf, "max_rel_error=%.3e tolerance=%.3e ", all.max_error(), tolerance);
    const bool ok = all.max_error() < tolerance;
    out << buf << (ok ? "PASS" : "FAIL") << "\n";
    if (report_out) *report_out = all;
    return ok ? kExitOk : kExitFailed;
  });
}

struct AblationResult {
  std::string axis;
  std::vector<std::string> labels;
  std::vector<double> primary;    // test instance accuracy or instance mIoU
  std::vector<double> secondary;  // test class accuracy (classification)
};

namespace detail {

struct AxisPoint {
  std::string label;
  std::function<void(RunConfig&)> apply;
};

inline std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

inline std::string aggregation_label(Aggregation a) {
  switch (a) {
    case Aggregation::attention: return "Att+ED";
    case Aggregation::no_attention: return "No Att";
    case Aggregation::no_decoder: return "No Dec";
    case Aggregation::concat: return "Con";
    case Aggregation::maxpool: return "MP";
  }
  return "";
}

inline std::vector<AxisPoint> axis_points(const std::string& axis, const std::string& values, const RunConfig& base) {
  std::vector<std::string> v = split_values(values);
  std::vector<AxisPoint> pts;
  if (axis == "M") {
    if (v.empty()) v = {"128", "256", "384", "512"};
    for (const auto& s : v)
      pts.push_back({s, [s](RunConfig& c) { set_config_value(c, "model.centroids", s); }});
  } else if (axis == "T") {
    // T scales keep the largest areas: T=2 of [16,32,64,128] is [64,128].
    const std::size_t full = base.model.scales.size();
    if (v.empty())
      for (std::size_t t = full; t >= 1; --t) v.push_back(std::to_string(t));
    for (const auto& s : v) {
      const auto t = parse_config_number<std::size_t>("T", s);
      if (t < 1 || t > full) throw ConfigError("T=" + s + " outside 1.." + std::to_string(full));
      pts.push_back({s, [t](RunConfig& c) {
                       c.model.scales.erase(c.model.scales.begin(),
                                            c.model.scales.end() - static_cast<std::ptrdiff_t>(t));
                     }});
    }
  } else if (axis == "rnn-hidden") {
    if (v.empty()) v = {"64", "128", "256"};
    for (const auto& s : v)
      pts.push_back({s, [s](RunConfig& c) { set_config_value(c, "model.hidden_dim", s); }});
  } else if (axis == "aggregation") {
    if (v.empty()) v = {"attention", "no-attention", "no-decoder", "concat", "maxpool"};
    for (const auto& s : v) {
      const Aggregation a = parse_aggregation(s);
      pts.push_back({aggregation_label(a), [a](RunConfig& c) { c.model.aggregation = a; }});
    }
  } else if (axis == "lr") {
    if (v.empty()) v = {"0.0005", "0.001", "0.002"};
    for (const auto& s : v) pts.push_back({s, [s](RunConfig& c) { set_config_value(c, "train.lr", s); }});
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "' (M, T, rnn-hidden, aggregation, lr)");
  }
  return pts;
}

}  // namespace detail

/// Trains one model per axis value on the configured dataset and prints a
/// table of test accuracy (or mIoU) per value. `values` is a comma list; empty
/// selects the axis defaults.
inline int cmd_ablate(const CommonOptions& opts, const std::string& axis, const std::string& values,
                      std::ostream& out, std::ostream& err, AblationResult* result_out = nullptr) {
  return detail::guarded(err, [&] {
    RunConfig base = resolve_config(opts);
    const Dataset ds = load_dataset(base);
    base.model.task = ds.task;
    base.model.outputs = ds.output_count();
    const auto points = detail::axis_points(axis, values, base);
    std::vector<RunConfig> runs;
    for (const auto& p : points) {
      RunConfig c = base;
      p.apply(c);
      c.validate();
      runs.push_back(c);
    }
    detail::echo_config(out, base);
    out << "# axis " << axis << ":";
    for (const auto& p : points) out << " " << p.label;
    out << "\n";

    const bool cls = ds.task == Task::classification;
    AblationResult res{axis, {}, {}, {}};
    const auto test_or_train = ds.test.empty() ? std::string("train") : std::string("test");
    for (std::size_t i = 0; i < runs.size(); ++i) {
      TrainResult r = train(ds, runs[i].model, runs[i].train);
      const auto prepared = prepare_samples(r.model, ds.split(test_or_train));
      double primary = 0.0, secondary = 0.0;
      if (cls) {
        const auto m = evaluate_classification(r.model, prepared);
        primary = m.instance_accuracy;
        secondary = m.class_accuracy;
      } else {
        primary = secondary = evaluate_segmentation(r.model, prepared, ds.part_ranges).instance_miou;
      }
      out << "run " << axis << "=" << points[i].label << " best_epoch=" << r.best_epoch << " " << test_or_train
          << "_" << (cls ? "instance_acc=" : "miou=") << detail::fixed6(primary) << "\n";
      res.labels.push_back(points[i].label);
      res.primary.push_back(primary);
      res.secondary.push_back(secondary);
    }

    std::vector<std::vector<std::string>> rows{{axis}};
    rows.push_back({cls ? "Acc (%)" : "mIoU (%)"});
    if (cls) rows.push_back({"Class (%)"});
    for (std::size_t i = 0; i < res.labels.size(); ++i) {
      rows[0].push_back(res.labels[i]);
      rows[1].push_back(detail::percent(res.primary[i]));
      if (cls) rows[2].push_back(detail::percent(res.secondary[i]));
    }
    const std::string t = detail::table(rows);
    out << t;
    detail::ensure_dir(base.output_dir);
    write_text_file(std::filesystem::path(base.output_dir) / ("ablation_" + axis + ".txt"), t);
    if (result_out) *result_out = res;
    return kExitOk;
  });
}

/// Writes the configured synthetic dataset as point files plus manifest.txt.
inline int cmd_synth(const CommonOptions& opts, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    RunConfig cfg = resolve_config(opts, true);
    cfg.data.manifest.clear();
    cfg.validate();
    detail::echo_config(out, cfg);
    const Dataset ds = load_dataset(cfg);
    write_dataset(ds, cfg.output_dir);
    out << "wrote " << ds.train.size() + ds.val.size() + ds.test.size() << " point files and manifest.txt to "
        << cfg.output_dir << "\n";
    return kExitOk;
  });
}

/// Parses argv and dispatches to the verbs.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Point cloud classification and part segmentation with multi-scale area sequences"};
  app.require_subcommand(1);

  CommonOptions common;
  auto add_common = [&](CLI::App* sub, bool with_out) {
    sub->add_option("--config", common.config, "Run configuration file (section.key = value)");
    sub->add_option("--set", common.sets, "Override one key, SECTION.KEY=VALUE (repeatable)");
    if (with_out) sub->add_option("--out", common.out, "Output directory (output.dir)");
    sub->add_option("--seed", common.seed, "Random seed");
  };

  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint plus metrics log");
  add_common(train_cmd, true);

  std::string checkpoint, manifest, split = "test";
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--manifest", manifest, "Dataset manifest (default: the configured dataset)");
  eval_cmd->add_option("--split", split, "train, val or test");
  add_common(eval_cmd, false);

  double tolerance = 1e-4;
  std::uint64_t grad_seed = 3;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  grad_cmd->add_option("--tolerance", tolerance, "Maximum relative error");
  grad_cmd->add_option("--seed", grad_seed, "Seed for parameters, inputs and sampled coordinates");

  std::string axis, values;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train one model per value of an ablation axis");
  ablate_cmd->add_option("--axis", axis, "M, T, rnn-hidden, aggregation or lr")->required();
  ablate_cmd->add_option("--values", values, "Comma-separated axis values (default: the standard sweep)");
  add_common(ablate_cmd, true);

  std::string synth_task;
  std::optional<std::size_t> synth_points, synth_train, synth_test;
  std::optional<double> synth_noise;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset as point files and a manifest");
  synth_cmd->add_option("--task", synth_task, "classification or segmentation (data.synthetic)");
  synth_cmd->add_option("--points", synth_points, "Points per cloud (data.points)");
  synth_cmd->add_option("--train", synth_train, "Training clouds, per class for classification (data.train_count)");
  synth_cmd->add_option("--test", synth_test, "Test clouds, per class for classification (data.test_count)");
  synth_cmd->add_option("--noise", synth_noise, "Gaussian noise amplitude (data.noise)");
  add_common(synth_cmd, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  }

  if (train_cmd->parsed()) return cmd_train(common, out, err);
  if (eval_cmd->parsed()) return cmd_eval(checkpoint, manifest, split, common, out, err);
  if (grad_cmd->parsed()) return cmd_gradcheck(tolerance, grad_seed, out, err);
  if (ablate_cmd->parsed()) return cmd_ablate(common, axis, values, out, err);
  if (!synth_task.empty()) common.sets.push_back("data.synthetic=" + synth_task);
  if (synth_points) common.sets.push_back("data.points=" + std::to_string(*synth_points));
  if (synth_train) common.sets.push_back("data.train_count=" + std::to_string(*synth_train));
  if (synth_test) common.sets.push_back("data.test_count=" + std::to_string(*synth_test));
  if (synth_noise) common.sets.push_back("data.noise=" + detail::format_double(*synth_noise));
  return cmd_synth(common, out, err);
}

}  // namespace p2s
