#pragma once

// The Point2Sequence network.
//
// Layout conventions: features are rows, so a weight matrix W of shape
// [in x out] maps x (1 x in) to x W. A batch of G regions is a G-row matrix;
// every sequence operation below runs on all regions of a batch at once.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "p2s/autograd.hpp"
#include "p2s/errors.hpp"
#include "p2s/geometry.hpp"

namespace p2s {

using ag::Tensor;

enum class Task { classification, segmentation };

// How the T area features of a region are reduced to one region feature.
enum class Aggregation {
  attention,     // LSTM encoder + one-step decoder with attention
  no_attention,  // encoder + decoder, region feature is the decoder output
  no_decoder,    // encoder only, region feature is the last hidden state
  concat,        // concatenate the T features, project to D
  maxpool,       // elementwise max over the T features
};

inline std::string to_string(Task t) { return t == Task::classification ? "classification" : "segmentation"; }

inline std::string to_string(Aggregation a) {
  switch (a) {
    case Aggregation::attention: return "attention";
    case Aggregation::no_attention: return "no-attention";
    case Aggregation::no_decoder: return "no-decoder";
    case Aggregation::concat: return "concat";
    case Aggregation::maxpool: return "maxpool";
  }
  return "attention";
}

inline Aggregation parse_aggregation(const std::string& s) {
  for (Aggregation a : {Aggregation::attention, Aggregation::no_attention, Aggregation::no_decoder,
                        Aggregation::concat, Aggregation::maxpool})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown aggregation '" + s + "'");
}

inline Task parse_task(const std::string& s) {
  if (s == "classification") return Task::classification;
  if (s == "segmentation") return Task::segmentation;
  throw ConfigError("unknown task '" + s + "'");
}

struct ModelConfig {
  Task task = Task::classification;
  std::size_t centroids = 384;                          // M
  std::vector<std::size_t> scales{16, 32, 64, 128};     // K_1..K_T
  std::size_t feature_dim = 128;                        // D
  std::size_t hidden_dim = 128;                         // h
  std::vector<std::size_t> area_mlp{64, 128};           // hidden widths; a final layer of width D follows
  std::vector<std::size_t> global_mlp{256, 512, 1024};  // last width is the global feature size
  std::vector<std::size_t> classifier{512, 256};        // hidden widths; a final layer of width C follows
  std::vector<std::size_t> seg_region_mlp{256, 128};
  std::vector<std::size_t> seg_point_mlp{128, 128};
  std::vector<std::size_t> seg_head{128};
  std::size_t interp_neighbors = 3;
  std::size_t outputs = 40;  // classes C, or part labels P for segmentation
  Aggregation aggregation = Aggregation::attention;
  double dropout = 0.4;

  std::size_t steps() const { return scales.size(); }
  std::size_t global_dim() const { return global_mlp.back(); }

  void validate() const {
    ScaleSpec{scales}.validate(scales.empty() ? 0 : scales.back());
    if (centroids == 0) throw ConfigError("model.centroids must be positive");
    if (feature_dim == 0 || hidden_dim == 0) throw ConfigError("model dimensions must be positive");
    if (global_mlp.empty()) throw ConfigError("model.global_mlp needs at least one layer");
    if (outputs < 1) throw ConfigError("model.outputs must be positive");
    if (interp_neighbors == 0) throw ConfigError("model.interp_neighbors must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout ratio must lie in [0, 1)");
    if (aggregation == Aggregation::no_decoder && hidden_dim != feature_dim)
      throw ConfigError("the no-decoder variant uses h_T as the region feature and needs hidden_dim == feature_dim");
    for (const auto* widths : {&area_mlp, &global_mlp, &classifier, &seg_region_mlp, &seg_point_mlp, &seg_head})
      for (std::size_t w : *widths)
        if (w == 0) throw ConfigError("layer widths must be positive");
    if (task == Task::segmentation && area_mlp.empty())
      throw ConfigError("segmentation reuses the first area MLP layer and needs a non-empty model.area_mlp");
  }
};

struct ParamTensor {
  std::string name;
  Tensor tensor;
};

// Non-trainable state (batch-norm running statistics).
struct Buffer {
  std::string name;
  ag::Shape shape;
  std::vector<double> values;
};

class ModelParams {
 public:
  Tensor& add(const std::string& name, ag::Shape shape, std::vector<double> values) {
    if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.push_back({name, Tensor::parameter(shape, std::move(values))});
    return params_.back().tensor;
  }

  Buffer& add_buffer(const std::string& name, ag::Shape shape, double fill) {
    if (buffer_index_.count(name)) throw ContractError("duplicate buffer name " + name);
    buffer_index_[name] = buffers_.size();
    buffers_.push_back({name, shape, std::vector<double>(shape.size(), fill)});
    return buffers_.back();
  }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named " + name);
    return params_[it->second].tensor;
  }

  Buffer& buffer(const std::string& name) {
    auto it = buffer_index_.find(name);
    if (it == buffer_index_.end()) throw ContractError("no buffer named " + name);
    return buffers_[it->second];
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<ParamTensor>& params() { return params_; }
  const std::vector<ParamTensor>& params() const { return params_; }
  std::vector<Buffer>& buffers() { return buffers_; }
  const std::vector<Buffer>& buffers() const { return buffers_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Deep copy: fresh leaves holding the same values.
  ModelParams clone() const {
    ModelParams out;
    for (const auto& p : params_)
      out.add(p.name, p.tensor.shape(), std::vector<double>(p.tensor.values().begin(), p.tensor.values().end()));
    for (const auto& b : buffers_) out.add_buffer(b.name, b.shape, 0.0).values = b.values;
    return out;
  }

 private:
  std::vector<ParamTensor> params_;
  std::vector<Buffer> buffers_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::size_t> buffer_index_;
};

// ---------------------------------------------------------------------------
// Sequence building blocks

struct LstmWeights {
  Tensor weight;  // (h + in) x 4h, gate column blocks [input | forget | output | candidate]
  Tensor bias;    // 1 x 4h
};

struct LstmState {
  Tensor hidden;
  Tensor cell;
};

/// One LSTM step for a batch of rows: gates from [h_prev ; x].
inline LstmState lstm_step(const LstmState& prev, const Tensor& input, const LstmWeights& w) {
  const std::size_t h = prev.hidden.cols();
  if (w.weight.cols() != 4 * h || w.weight.rows() != h + input.cols() || w.bias.cols() != 4 * h ||
      prev.cell.cols() != h || prev.hidden.rows() != input.rows())
    throw DimensionError("lstm_step: weights " + w.weight.shape().str() + " incompatible with hidden " +
                         prev.hidden.shape().str() + " and input " + input.shape().str());
  const Tensor pre = ag::add(ag::matmul(ag::concat(prev.hidden, input, 1), w.weight), w.bias);
  const Tensor in_gate = ag::sigmoid(ag::slice_cols(pre, 0, h));
  const Tensor forget_gate = ag::sigmoid(ag::slice_cols(pre, h, h));
  const Tensor out_gate = ag::sigmoid(ag::slice_cols(pre, 2 * h, h));
  const Tensor candidate = ag::tanh(ag::slice_cols(pre, 3 * h, h));
  Tensor cell = ag::add(ag::mul(forget_gate, prev.cell), ag::mul(in_gate, candidate));
  Tensor hidden = ag::mul(out_gate, ag::tanh(cell));
  return {std::move(hidden), std::move(cell)};
}

inline LstmState zero_state(std::size_t rows, std::size_t hidden) {
  return {Tensor::zeros({rows, hidden}), Tensor::zeros({rows, hidden})};
}

struct EncoderTrace {
  std::vector<Tensor> hidden;   // h_1..h_T, each G x h
  std::vector<Tensor> cells;    // c_1..c_T
  std::vector<Tensor> outputs;  // y_t = h_t W_a

  std::size_t steps() const { return hidden.size(); }
  const Tensor& last() const { return hidden.back(); }
};

/// Runs the encoder cell over the area features in scale order from a zero state.
inline EncoderTrace encode_sequence(std::span<const Tensor> steps, const LstmWeights& cell, const Tensor& output_weight) {
  if (steps.empty()) throw ContractError("encode_sequence: empty feature sequence");
  const std::size_t h = cell.weight.cols() / 4;
  EncoderTrace trace;
  LstmState state = zero_state(steps[0].rows(), h);
  for (const Tensor& x : steps) {
    state = lstm_step(state, x, cell);
    trace.hidden.push_back(state.hidden);
    trace.cells.push_back(state.cell);
    trace.outputs.push_back(ag::matmul(state.hidden, output_weight));
  }
  return trace;
}

/// alpha(t) = softmax_t( hbar^T W_c h_t ), one row of T weights per region.
inline Tensor attention_scores(const Tensor& decoder_hidden, const EncoderTrace& trace, const Tensor& score_weight) {
  if (trace.steps() == 0) throw ContractError("attention over an empty trace");
  const Tensor query = ag::matmul(decoder_hidden, score_weight);
  std::vector<Tensor> scores;
  scores.reserve(trace.steps());
  for (const Tensor& ht : trace.hidden) {
    if (ht.shape() != query.shape())
      throw DimensionError("attention: hidden state " + ht.shape().str() + " vs query " + query.shape().str());
    scores.push_back(ag::row_sum(ag::mul(query, ht)));
  }
  return ag::softmax(ag::concat_cols(scores));
}

struct SeqWeights {
  LstmWeights encoder;
  LstmWeights decoder;
  Tensor encoder_output;  // W_a
  Tensor decoder_output;  // W_b
  Tensor score;           // W_c
  Tensor combine;         // W_d
  Tensor project;         // W_s
};

struct RegionFeature {
  Tensor feature;         // r_j = W_s h~_1, G x D
  Tensor attention;       // alpha, G x T
  Tensor context;         // c = sum_t alpha(t) h_t
  Tensor decoder_hidden;  // hbar_1
  Tensor decoder_output;  // ybar_1 = W_b hbar_1 (not consumed downstream)
  Tensor attentional;     // h~_1 = tanh(W_d [c; hbar_1])
};

/// One-step attention decoder whose input is the encoder's last hidden state.
inline RegionFeature decode_region(const EncoderTrace& trace, const SeqWeights& w) {
  if (trace.steps() == 0) throw ContractError("decode_region: empty trace");
  const Tensor& last = trace.last();
  const std::size_t h = w.decoder.weight.cols() / 4;
  RegionFeature out;
  out.decoder_hidden = lstm_step(zero_state(last.rows(), h), last, w.decoder).hidden;
  out.decoder_output = ag::matmul(out.decoder_hidden, w.decoder_output);
  out.attention = attention_scores(out.decoder_hidden, trace, w.score);
  Tensor context = ag::mul(trace.hidden[0], ag::slice_cols(out.attention, 0, 1));
  for (std::size_t t = 1; t < trace.steps(); ++t)
    context = ag::add(context, ag::mul(trace.hidden[t], ag::slice_cols(out.attention, t, 1)));
  out.context = context;
  out.attentional = ag::tanh(ag::matmul(ag::concat(out.context, out.decoder_hidden, 1), w.combine));
  out.feature = ag::matmul(out.attentional, w.project);
  return out;
}

// ---------------------------------------------------------------------------
// Feature propagation

inline constexpr double kExactMatchDistance = 1e-10;

// Row-normalized inverse-square-distance weights over the k nearest sources.
struct Interpolation {
  std::size_t neighbors = 0;
  std::vector<std::size_t> index;  // targets x neighbors
  std::vector<double> weight;
};

inline Interpolation interpolation_weights(std::span<const Point3> targets, std::span<const Point3> sources,
                                           std::size_t k) {
  if (sources.empty()) throw ArgumentError("interpolation needs at least one source point");
  if (k == 0 || k > sources.size())
    throw ArgumentError("interpolation: k=" + std::to_string(k) + " exceeds " + std::to_string(sources.size()) +
                        " sources");
  const KdTree tree(sources);
  Interpolation out;
  out.neighbors = k;
  out.index.reserve(targets.size() * k);
  out.weight.reserve(targets.size() * k);
  for (const Point3& p : targets) {
    const auto nn = tree.nearest(p, k);
    std::vector<double> w(k);
    bool exact = false;
    for (std::size_t i = 0; i < k; ++i) {
      const double d2 = squared_distance(p, sources[nn[i]]);
      if (std::sqrt(d2) < kExactMatchDistance) {
        // Nearest coincident source wins outright.
        std::fill(w.begin(), w.end(), 0.0);
        w[i] = 1.0;
        exact = true;
        break;
      }
      w[i] = 1.0 / d2;
    }
    if (!exact) {
      double total = 0.0;
      for (double v : w) total += v;
      for (double& v : w) v /= total;
    }
    out.index.insert(out.index.end(), nn.begin(), nn.end());
    out.weight.insert(out.weight.end(), w.begin(), w.end());
  }
  return out;
}

/// phi(p) = sum_i w_i phi(p_i) / sum_i w_i over the k nearest sources, w_i = 1/|p - p_i|^2.
inline Tensor interpolate_features(std::span<const Point3> targets, std::span<const Point3> sources,
                                   const Tensor& source_features, std::size_t k) {
  if (source_features.rows() != sources.size())
    throw DimensionError("interpolate_features: " + std::to_string(sources.size()) + " sources but features " +
                         source_features.shape().str());
  Interpolation interp = interpolation_weights(targets, sources, k);
  return ag::weighted_rows(source_features, std::move(interp.index), std::move(interp.weight), k);
}

// ---------------------------------------------------------------------------
// The network

struct ForwardMode {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // dropout masks; required when training with dropout > 0
};

// Geometry that depends only on the input cloud, computed once and reused.
struct PreparedCloud {
  PointCloud cloud;
  Centroids centroids;
  MultiScaleGrouping grouping;
  std::vector<double> relative;  // M x K_T x 3 centroid-relative coordinates
  Interpolation to_points;       // centroids -> points (segmentation only)
};

struct AreaFeature {
  Tensor pooled;   // max-pooled MLP output before the centroid is attached, 1 x D
  Tensor feature;  // s_j^t after combining with the centroid coordinates, 1 x D
};

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

class Point2Sequence {
 public:
  // Parameters are drawn from `rng`: weights uniform in +-1/sqrt(fan_in),
  // biases zero except the LSTM forget gate (+1), batch-norm scale 1 shift 0.
  Point2Sequence(ModelConfig config, std::mt19937_64& rng) : config_(std::move(config)) {
    config_.validate();
    build(rng);
  }

  // Adopts existing parameters (checkpoint loading); names and shapes must match the config.
  Point2Sequence(ModelConfig config, ModelParams params) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(0);
    build(rng);
    adopt(std::move(params));
  }

  const ModelConfig& config() const { return config_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  double bn_momentum = 0.5;

  PreparedCloud prepare(const PointCloud& cloud) const {
    const std::size_t m = config_.centroids;
    if (cloud.size() < m)
      throw ArgumentError("cloud of " + std::to_string(cloud.size()) + " points is smaller than M=" + std::to_string(m));
    PreparedCloud p;
    p.cloud = cloud;
    p.centroids = farthest_point_sample(cloud, m);
    p.grouping = group_areas(cloud, p.centroids, ScaleSpec{config_.scales});
    const std::size_t k = p.grouping.largest();
    p.relative.resize(m * k * 3);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t q = 0; q < k; ++q) {
        const Point3& pt = cloud.points[p.grouping.neighbors[j * k + q]];
        for (std::size_t a = 0; a < 3; ++a) p.relative[(j * k + q) * 3 + a] = pt[a] - p.centroids.coordinates[j][a];
      }
    if (config_.task == Task::segmentation)
      p.to_points = interpolation_weights(cloud.points, p.centroids.coordinates,
                                          std::min(config_.interp_neighbors, m));
    return p;
  }

  /// Logits for a batch: B x C (classification) or (sum of N_b) x P (segmentation).
  Tensor forward(std::span<const PreparedCloud* const> batch, const ForwardMode& mode) {
    if (batch.empty()) throw ContractError("forward on an empty batch");
    const Encoded enc = encode_batch(batch, mode);
    return config_.task == Task::classification ? classify_head(enc.global, mode) : segment_head(batch, enc, mode);
  }

  /// Evaluation-mode logits for one normalized cloud, 1 x C.
  Tensor classify_forward(const PointCloud& cloud) {
    if (config_.task != Task::classification) throw ContractError("classify_forward on a segmentation model");
    const PreparedCloud p = prepare(cloud);
    const PreparedCloud* one[] = {&p};
    return forward(one, {});
  }

  /// Evaluation-mode per-point logits for one normalized cloud, N x P.
  Tensor segment_forward(const PointCloud& cloud) {
    if (config_.task != Task::segmentation) throw ContractError("segment_forward on a classification model");
    const PreparedCloud p = prepare(cloud);
    const PreparedCloud* one[] = {&p};
    return forward(one, {});
  }

  /// Shared MLP over K centroid-relative points, max pooled, then combined
  /// with the centroid coordinates by a linear map back to D.
  AreaFeature area_feature(std::span<const Point3> relative, const Point3& centroid, const ForwardMode& mode = {}) {
    if (relative.empty()) throw ContractError("area_feature: empty area");
    std::vector<double> flat;
    flat.reserve(relative.size() * 3);
    for (const auto& p : relative) flat.insert(flat.end(), p.begin(), p.end());
    const Tensor x = area_mlp(Tensor::constant({relative.size(), 3}, std::move(flat)), mode);
    AreaFeature out;
    out.pooled = ag::max_reduce(x).values;
    out.feature = combine_centroid(out.pooled, Tensor::constant({1, 3}, {centroid[0], centroid[1], centroid[2]}));
    return out;
  }

  SeqWeights seq_weights() const {
    SeqWeights w;
    w.encoder = {param("seq.encoder.weight"), param("seq.encoder.bias")};
    w.encoder_output = param("seq.encoder.output.weight");
    if (config_.aggregation == Aggregation::attention || config_.aggregation == Aggregation::no_attention) {
      w.decoder = {param("seq.decoder.weight"), param("seq.decoder.bias")};
      w.decoder_output = param("seq.decoder.output.weight");
    }
    if (config_.aggregation == Aggregation::attention) {
      w.score = param("seq.attention.score.weight");
      w.combine = param("seq.attention.combine.weight");
      w.project = param("seq.attention.project.weight");
    }
    return w;
  }

  /// Reduces the T per-scale features of each region (steps[t] is G x D) to G x D.
  Tensor aggregate_sequence(std::span<const Tensor> steps) const {
    if (steps.empty()) throw ContractError("aggregate_sequence: empty sequence");
    switch (config_.aggregation) {
      case Aggregation::attention: {
        const SeqWeights w = seq_weights();
        return decode_region(encode_sequence(steps, w.encoder, w.encoder_output), w).feature;
      }
      case Aggregation::no_attention: {
        const SeqWeights w = seq_weights();
        const EncoderTrace trace = encode_sequence(steps, w.encoder, w.encoder_output);
        const std::size_t h = config_.hidden_dim;
        const Tensor hbar = lstm_step(zero_state(trace.last().rows(), h), trace.last(), w.decoder).hidden;
        return ag::matmul(hbar, w.decoder_output);
      }
      case Aggregation::no_decoder: {
        const SeqWeights w = seq_weights();
        return encode_sequence(steps, w.encoder, w.encoder_output).last();
      }
      case Aggregation::concat:
        return linear(ag::concat_cols(steps), "seq.concat", true);
      case Aggregation::maxpool: {
        const std::size_t groups = steps[0].rows(), T = steps.size(), d = steps[0].cols();
        const Tensor stacked = ag::reshape(ag::concat_cols(steps), {groups * T, d});
        std::vector<ag::RowRange> regions(groups);
        for (std::size_t g = 0; g < groups; ++g) regions[g] = {g * T, T};
        return ag::segment_max(stacked, regions);
      }
    }
    throw ContractError("unknown aggregation");
  }

  /// Concatenates each region feature with its centroid, applies the shared
  /// global MLP and max-pools over the regions of each cloud: B x global_dim.
  Tensor aggregate_global(const Tensor& region_features, const Tensor& centroid_coords, std::size_t regions_per_cloud,
                          const ForwardMode& mode = {}) {
    if (regions_per_cloud == 0 || region_features.rows() % regions_per_cloud != 0)
      throw DimensionError("aggregate_global: " + std::to_string(region_features.rows()) +
                           " regions do not split into clouds of " + std::to_string(regions_per_cloud));
    Tensor x = ag::concat(region_features, centroid_coords, 1);
    for (std::size_t i = 0; i < config_.global_mlp.size(); ++i) x = dense_bn_relu(x, "global.mlp." + std::to_string(i), mode);
    std::vector<ag::RowRange> clouds;
    for (std::size_t b = 0; b < region_features.rows() / regions_per_cloud; ++b)
      clouds.push_back({b * regions_per_cloud, regions_per_cloud});
    return ag::segment_max(x, clouds);
  }

 private:
  struct Encoded {
    Tensor regions;    // G x D region features r_j
    Tensor centroids;  // G x 3
    Tensor global;     // B x global_dim
  };

  const Tensor& param(const std::string& name) const { return params_.get(name); }

  Tensor linear(const Tensor& x, const std::string& name, bool bias) const {
    Tensor y = ag::matmul(x, param(name + ".weight"));
    return bias ? ag::add(y, param(name + ".bias")) : y;
  }

  Tensor batch_norm(const Tensor& x, const std::string& name, const ForwardMode& mode) {
    Buffer& mean = params_.buffer(name + ".running_mean");
    Buffer& var = params_.buffer(name + ".running_var");
    return ag::batch_norm(x, param(name + ".gamma"), param(name + ".beta"), mean.values, var.values, bn_momentum,
                          mode.training);
  }

  // Linear (no bias) -> batch norm -> ReLU.
  Tensor dense_bn_relu(const Tensor& x, const std::string& name, const ForwardMode& mode) {
    return ag::relu(batch_norm(linear(x, name, false), name + ".bn", mode));
  }

  Tensor drop(const Tensor& x, const ForwardMode& mode) const {
    if (!mode.training || config_.dropout == 0.0) return x;
    if (!mode.rng) throw ContractError("training-mode dropout needs a random stream");
    return ag::dropout(x, config_.dropout, true, *mode.rng);
  }

  std::size_t area_layers() const { return config_.area_mlp.size() + 1; }

  Tensor area_mlp(Tensor x, const ForwardMode& mode) {
    for (std::size_t i = 0; i < area_layers(); ++i) x = dense_bn_relu(x, "area.mlp." + std::to_string(i), mode);
    return x;
  }

  Tensor combine_centroid(const Tensor& pooled, const Tensor& centroid) const {
    return linear(ag::concat(pooled, centroid, 1), "area.centroid", true);
  }

  Encoded encode_batch(std::span<const PreparedCloud* const> batch, const ForwardMode& mode) {
    const std::size_t m = config_.centroids, T = config_.steps(), k = config_.scales.back();
    const std::size_t groups = batch.size() * m;

    std::vector<double> rel;
    rel.reserve(groups * k * 3);
    std::vector<double> cent;
    cent.reserve(groups * 3);
    for (const PreparedCloud* p : batch) {
      if (p->centroids.size() != m || p->grouping.largest() != k)
        throw DimensionError("prepared cloud does not match the model's centroid/scale configuration");
      rel.insert(rel.end(), p->relative.begin(), p->relative.end());
      for (const auto& c : p->centroids.coordinates) cent.insert(cent.end(), c.begin(), c.end());
    }
    const Tensor features = area_mlp(Tensor::constant({groups * k, 3}, std::move(rel)), mode);

    // Nested areas share a neighbor list, so scale t pools its first K_t rows.
    std::vector<ag::RowRange> areas;
    areas.reserve(groups * T);
    std::vector<std::size_t> centroid_rows;
    centroid_rows.reserve(groups * T);
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t t = 0; t < T; ++t) {
        areas.push_back({g * k, config_.scales[t]});
        centroid_rows.push_back(g);
      }
    const Tensor centroids = Tensor::constant({groups, 3}, std::move(cent));
    const Tensor pooled = ag::segment_max(features, areas);
    const Tensor seq = ag::reshape(combine_centroid(pooled, ag::gather_rows(centroids, centroid_rows)),
                                   {groups, T * config_.feature_dim});
    std::vector<Tensor> steps;
    steps.reserve(T);
    for (std::size_t t = 0; t < T; ++t) steps.push_back(ag::slice_cols(seq, t * config_.feature_dim, config_.feature_dim));

    Encoded enc;
    enc.regions = aggregate_sequence(steps);
    enc.centroids = centroids;
    enc.global = aggregate_global(enc.regions, centroids, m, mode);
    return enc;
  }

  Tensor classify_head(Tensor x, const ForwardMode& mode) {
    for (std::size_t i = 0; i < config_.classifier.size(); ++i)
      x = drop(dense_bn_relu(x, "cls.fc." + std::to_string(i), mode), mode);
    return linear(x, "cls.out", true);
  }

  Tensor segment_head(std::span<const PreparedCloud* const> batch, const Encoded& enc, const ForwardMode& mode) {
    const std::size_t m = config_.centroids;

    // Propagation 1: global feature copied to every centroid, joined with r_j.
    std::vector<std::size_t> owner(batch.size() * m);
    for (std::size_t g = 0; g < owner.size(); ++g) owner[g] = g / m;
    Tensor regional = ag::concat(ag::gather_rows(enc.global, owner), enc.regions, 1);
    for (std::size_t i = 0; i < config_.seg_region_mlp.size(); ++i)
      regional = dense_bn_relu(regional, "seg.region_mlp." + std::to_string(i), mode);

    // Propagation 2: interpolate centroid features onto every point and join
    // with the point-level features of the first shared MLP layer.
    std::vector<std::size_t> index;
    std::vector<double> weight;
    std::vector<double> coords;
    std::size_t neighbors = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Interpolation& in = batch[b]->to_points;
      neighbors = in.neighbors;
      for (std::size_t idx : in.index) index.push_back(b * m + idx);
      weight.insert(weight.end(), in.weight.begin(), in.weight.end());
      for (const auto& p : batch[b]->cloud.points) coords.insert(coords.end(), p.begin(), p.end());
    }
    const std::size_t total_points = coords.size() / 3;
    const Tensor interpolated = ag::weighted_rows(regional, std::move(index), std::move(weight), neighbors);
    const Tensor points = Tensor::constant({total_points, 3}, std::move(coords));
    const Tensor skip = ag::relu(batch_norm(linear(points, "area.mlp.0", false), "seg.skip.bn", mode));

    Tensor x = ag::concat(interpolated, skip, 1);
    for (std::size_t i = 0; i < config_.seg_point_mlp.size(); ++i)
      x = dense_bn_relu(x, "seg.point_mlp." + std::to_string(i), mode);
    for (std::size_t i = 0; i < config_.seg_head.size(); ++i)
      x = drop(dense_bn_relu(x, "seg.head." + std::to_string(i), mode), mode);
    return linear(x, "seg.out", true);
  }

  // --- parameter construction -------------------------------------------

  void weight(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> v(in * out);
    for (double& x : v) x = (2.0 * uniform01(rng) - 1.0) * bound;
    params_.add(name + ".weight", {in, out}, std::move(v));
  }

  void bias(const std::string& name, std::size_t out) { params_.add(name + ".bias", {1, out}, std::vector<double>(out, 0.0)); }

  void bn(const std::string& name, std::size_t width) {
    params_.add(name + ".gamma", {1, width}, std::vector<double>(width, 1.0));
    params_.add(name + ".beta", {1, width}, std::vector<double>(width, 0.0));
    params_.add_buffer(name + ".running_mean", {1, width}, 0.0);
    params_.add_buffer(name + ".running_var", {1, width}, 1.0);
  }

  // Returns the output width.
  std::size_t mlp(const std::string& prefix, std::size_t in, const std::vector<std::size_t>& widths, std::mt19937_64& rng) {
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string name = prefix + "." + std::to_string(i);
      weight(name, in, widths[i], rng);
      bn(name + ".bn", widths[i]);
      in = widths[i];
    }
    return in;
  }

  void lstm(const std::string& name, std::size_t input, std::size_t h, std::mt19937_64& rng) {
    weight(name, h + input, 4 * h, rng);
    std::vector<double> b(4 * h, 0.0);
    std::fill(b.begin() + static_cast<std::ptrdiff_t>(h), b.begin() + static_cast<std::ptrdiff_t>(2 * h), 1.0);
    params_.add(name + ".bias", {1, 4 * h}, std::move(b));
  }

  void build(std::mt19937_64& rng) {
    const std::size_t D = config_.feature_dim, h = config_.hidden_dim, T = config_.steps();
    std::vector<std::size_t> area_widths = config_.area_mlp;
    area_widths.push_back(D);
    mlp("area.mlp", 3, area_widths, rng);
    weight("area.centroid", D + 3, D, rng);
    bias("area.centroid", D);

    switch (config_.aggregation) {
      case Aggregation::attention:
        lstm("seq.encoder", D, h, rng);
        weight("seq.encoder.output", h, D, rng);
        lstm("seq.decoder", h, h, rng);
        weight("seq.decoder.output", h, D, rng);
        weight("seq.attention.score", h, h, rng);
        weight("seq.attention.combine", 2 * h, h, rng);
        weight("seq.attention.project", h, D, rng);
        break;
      case Aggregation::no_attention:
        lstm("seq.encoder", D, h, rng);
        weight("seq.encoder.output", h, D, rng);
        lstm("seq.decoder", h, h, rng);
        weight("seq.decoder.output", h, D, rng);
        break;
      case Aggregation::no_decoder:
        lstm("seq.encoder", D, h, rng);
        weight("seq.encoder.output", h, D, rng);
        break;
      case Aggregation::concat:
        weight("seq.concat", T * D, D, rng);
        bias("seq.concat", D);
        break;
      case Aggregation::maxpool:
        break;
    }

    mlp("global.mlp", D + 3, config_.global_mlp, rng);

    if (config_.task == Task::classification) {
      const std::size_t width = mlp("cls.fc", config_.global_dim(), config_.classifier, rng);
      weight("cls.out", width, config_.outputs, rng);
      bias("cls.out", config_.outputs);
    } else {
      bn("seg.skip.bn", area_widths.front());
      const std::size_t regional = mlp("seg.region_mlp", config_.global_dim() + D, config_.seg_region_mlp, rng);
      std::size_t width = mlp("seg.point_mlp", regional + area_widths.front(), config_.seg_point_mlp, rng);
      width = mlp("seg.head", width, config_.seg_head, rng);
      weight("seg.out", width, config_.outputs, rng);
      bias("seg.out", config_.outputs);
    }
  }

  void adopt(ModelParams loaded) {
    const auto& expected = params_.params();
    const auto& got = loaded.params();
    if (expected.size() != got.size())
      throw DataError("parameter count " + std::to_string(got.size()) + " does not match configuration (" +
                      std::to_string(expected.size()) + ")");
    for (std::size_t i = 0; i < expected.size(); ++i)
      if (expected[i].name != got[i].name || expected[i].tensor.shape() != got[i].tensor.shape())
        throw DataError("parameter " + got[i].name + " " + got[i].tensor.shape().str() + " does not match expected " +
                        expected[i].name + " " + expected[i].tensor.shape().str());
    const auto& eb = params_.buffers();
    const auto& gb = loaded.buffers();
    if (eb.size() != gb.size()) throw DataError("buffer count does not match configuration");
    for (std::size_t i = 0; i < eb.size(); ++i)
      if (eb[i].name != gb[i].name || eb[i].shape != gb[i].shape) throw DataError("buffer " + gb[i].name + " does not match");
    params_ = std::move(loaded);
  }

  ModelConfig config_;
  ModelParams params_;
};

}  // namespace p2s
