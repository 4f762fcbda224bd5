#pragma once

// Run configuration: "section.key = value" lines, '#' starts a comment.
// Unknown keys are rejected. format_config() echoes every key so that the
// echo parses back to the identical configuration.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "p2s/data.hpp"
#include "p2s/errors.hpp"
#include "p2s/model.hpp"
#include "p2s/training.hpp"

namespace p2s {

struct DataConfig {
  std::string manifest;               // empty: use the synthetic generator
  std::string synthetic = "classification";
  std::size_t points = 64;
  std::size_t train_count = 20;       // per class for classification
  std::size_t test_count = 10;
  double noise = 0.0;
  std::uint64_t seed = 1;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "run";

  void validate() const {
    model.validate();
    train.validate();
    if (data.manifest.empty() && data.synthetic != "classification" && data.synthetic != "segmentation")
      throw ConfigError("data.synthetic must be classification or segmentation");
    if (data.manifest.empty() && data.train_count == 0) throw ConfigError("data.train_count must be positive");
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string format_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

template <class T>
T parse_config_number(const std::string& key, std::string_view text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc{} || r.ptr != end) throw ConfigError(key + ": invalid number '" + std::string(text) + "'");
  return v;
}

inline std::vector<std::size_t> parse_config_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) out.push_back(parse_config_number<std::size_t>(key, trim(item)));
  return out;
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field number_field(T RunConfig::*section, auto member, const std::string& key) {
  using V = std::remove_cvref_t<decltype(std::declval<T&>().*member)>;
  return {[=](RunConfig& c, const std::string& v) { (c.*section).*member = parse_config_number<V>(key, v); },
          [=](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<V>)
              return format_double((c.*section).*member);
            else
              return std::to_string((c.*section).*member);
          }};
}

template <class T>
Field list_field(T RunConfig::*section, std::vector<std::size_t> T::*member, const std::string& key) {
  return {[=](RunConfig& c, const std::string& v) { (c.*section).*member = parse_config_list(key, v); },
          [=](const RunConfig& c) { return format_list((c.*section).*member); }};
}

// Ordered, so the echo is stable.
inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    const auto M = &RunConfig::model;
    const auto T = &RunConfig::train;
    const auto D = &RunConfig::data;
    f["model.task"] = {[](RunConfig& c, const std::string& v) { c.model.task = parse_task(v); },
                       [](const RunConfig& c) { return to_string(c.model.task); }};
    f["model.aggregation"] = {[](RunConfig& c, const std::string& v) { c.model.aggregation = parse_aggregation(v); },
                              [](const RunConfig& c) { return to_string(c.model.aggregation); }};
    f["model.centroids"] = number_field(M, &ModelConfig::centroids, "model.centroids");
    f["model.scales"] = list_field(M, &ModelConfig::scales, "model.scales");
    f["model.feature_dim"] = number_field(M, &ModelConfig::feature_dim, "model.feature_dim");
    f["model.hidden_dim"] = number_field(M, &ModelConfig::hidden_dim, "model.hidden_dim");
    f["model.area_mlp"] = list_field(M, &ModelConfig::area_mlp, "model.area_mlp");
    f["model.global_mlp"] = list_field(M, &ModelConfig::global_mlp, "model.global_mlp");
    f["model.classifier"] = list_field(M, &ModelConfig::classifier, "model.classifier");
    f["model.seg_region_mlp"] = list_field(M, &ModelConfig::seg_region_mlp, "model.seg_region_mlp");
    f["model.seg_point_mlp"] = list_field(M, &ModelConfig::seg_point_mlp, "model.seg_point_mlp");
    f["model.seg_head"] = list_field(M, &ModelConfig::seg_head, "model.seg_head");
    f["model.interp_neighbors"] = number_field(M, &ModelConfig::interp_neighbors, "model.interp_neighbors");
    // Set from the dataset by training; present so checkpoints carry it.
    f["model.outputs"] = number_field(M, &ModelConfig::outputs, "model.outputs");
    f["train.dropout"] = number_field(M, &ModelConfig::dropout, "train.dropout");
    f["train.lr"] = number_field(T, &TrainConfig::lr, "train.lr");
    f["train.batch_size"] = number_field(T, &TrainConfig::batch_size, "train.batch_size");
    f["train.lr_decay"] = number_field(T, &TrainConfig::lr_decay, "train.lr_decay");
    f["train.lr_floor"] = number_field(T, &TrainConfig::lr_floor, "train.lr_floor");
    f["train.bn_momentum"] = number_field(T, &TrainConfig::bn_momentum, "train.bn_momentum");
    f["train.bn_decay"] = number_field(T, &TrainConfig::bn_decay, "train.bn_decay");
    f["train.bn_floor"] = number_field(T, &TrainConfig::bn_floor, "train.bn_floor");
    f["train.decay_every"] = number_field(T, &TrainConfig::decay_every, "train.decay_every");
    f["train.epochs"] = number_field(T, &TrainConfig::epochs, "train.epochs");
    f["train.seed"] = number_field(T, &TrainConfig::seed, "train.seed");
    f["data.manifest"] = {[](RunConfig& c, const std::string& v) { c.data.manifest = v; },
                          [](const RunConfig& c) { return c.data.manifest; }};
    f["data.synthetic"] = {[](RunConfig& c, const std::string& v) { c.data.synthetic = v; },
                           [](const RunConfig& c) { return c.data.synthetic; }};
    f["data.points"] = number_field(D, &DataConfig::points, "data.points");
    f["data.train_count"] = number_field(D, &DataConfig::train_count, "data.train_count");
    f["data.test_count"] = number_field(D, &DataConfig::test_count, "data.test_count");
    f["data.noise"] = number_field(D, &DataConfig::noise, "data.noise");
    f["data.seed"] = number_field(D, &DataConfig::seed, "data.seed");
    f["output.dir"] = {[](RunConfig& c, const std::string& v) { c.output_dir = v; },
                       [](const RunConfig& c) { return c.output_dir; }};
    return f;
  }();
  return table;
}

}  // namespace detail

/// Applies one "section.key=value" assignment.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& f = detail::fields();
  const auto it = f.find(key);
  if (it == f.end()) throw ConfigError("unknown configuration key '" + key + "'");
  it->second.set(cfg, value);
}

inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Parses config text on top of `base` (defaults when omitted).
inline RunConfig parse_config(const std::string& text, RunConfig base = {}, const std::string& source = "<config>") {
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(number) + ": expected section.key = value");
    try {
      set_config_value(base, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text, {}, path.string());
}

/// Every key, one per line, in a form parse_config() reads back exactly.
/// `prefix` restricts the echo to one section ("model." for checkpoints).
inline std::string format_config(const RunConfig& cfg, std::string_view prefix = "") {
  std::string out;
  for (const auto& [key, field] : detail::fields())
    if (key.starts_with(prefix)) out += key + " = " + field.get(cfg) + "\n";
  return out;
}

inline Dataset load_dataset(const RunConfig& cfg) {
  if (!cfg.data.manifest.empty()) return load_manifest(cfg.data.manifest);
  if (cfg.data.synthetic == "segmentation")
    return synthetic_segmentation(cfg.data.points, cfg.data.noise, cfg.data.seed, cfg.data.train_count,
                                  cfg.data.test_count);
  return synthetic_classification(cfg.data.points, cfg.data.noise, cfg.data.seed, cfg.data.train_count,
                                  cfg.data.test_count);
}

}  // namespace p2s
