#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "p2s/autograd.hpp"
#include "p2s/data.hpp"
#include "p2s/errors.hpp"
#include "p2s/model.hpp"

namespace p2s {

struct TrainConfig {
  double lr = 0.001;
  std::size_t batch_size = 16;
  double lr_decay = 0.3;  // multiplicative, every decay_every epochs
  double lr_floor = 1e-5;
  double bn_momentum = 0.5;
  double bn_decay = 0.5;
  double bn_floor = 0.01;
  std::size_t decay_every = 20;
  std::size_t epochs = 200;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
    if (!(lr_decay > 0.0) || !(bn_decay > 0.0)) throw ConfigError("decay factors must be positive");
    if (!(lr_floor > 0.0) || !(bn_floor > 0.0)) throw ConfigError("rate floors must be positive");
    if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) throw ConfigError("train.bn_momentum must lie in (0, 1]");
    if (decay_every < 1) throw ConfigError("train.decay_every must be at least 1");
  }
};

/// Mean over rows of -log softmax(logits)[target].
inline Tensor cross_entropy_loss(const Tensor& logits, std::span<const std::size_t> targets) {
  return ag::softmax_cross_entropy(logits, targets);
}

// ---------------------------------------------------------------------------
// Optimizer and schedules

struct AdamState {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> first, second;  // parallel to ModelParams::params()
};

inline AdamState make_adam(const ModelParams& params, double lr) {
  AdamState s;
  s.lr = lr;
  for (const auto& p : params.params()) {
    s.first.emplace_back(p.tensor.size(), 0.0);
    s.second.emplace_back(p.tensor.size(), 0.0);
  }
  return s;
}

/// One bias-corrected ADAM update using the accumulated gradients.
inline void adam_step(ModelParams& params, AdamState& state) {
  auto& list = params.params();
  if (state.first.size() != list.size()) throw ContractError("optimizer state does not match the parameter list");
  for (const auto& p : list)
    if (!p.tensor.has_grad()) throw ContractError("parameter " + p.name + " has no gradient");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < list.size(); ++k) {
    auto values = list[k].tensor.mutable_values();
    const auto grad = list[k].tensor.grad();
    auto& m = state.first[k];
    auto& v = state.second[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      values[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

struct ScheduledRates {
  double lr;
  double bn_momentum;
};

/// Rates in effect during `epoch` (0-based): both decay multiplicatively at
/// every multiple of decay_every, clamped at their floors.
inline ScheduledRates scheduled_rates(const TrainConfig& cfg, std::size_t epoch) {
  const double steps = static_cast<double>(epoch / cfg.decay_every);
  return {std::max(cfg.lr_floor, cfg.lr * std::pow(cfg.lr_decay, steps)),
          std::max(cfg.bn_floor, cfg.bn_momentum * std::pow(cfg.bn_decay, steps))};
}

inline ScheduledRates apply_schedules(const TrainConfig& cfg, std::size_t epoch, AdamState& optimizer,
                                      Point2Sequence& model) {
  const ScheduledRates r = scheduled_rates(cfg, epoch);
  optimizer.lr = r.lr;
  model.bn_momentum = r.bn_momentum;
  return r;
}

// ---------------------------------------------------------------------------
// Metrics

struct ClassificationMetrics {
  double instance_accuracy = 0.0;
  double class_accuracy = 0.0;
  std::vector<double> per_class;         // NaN for classes absent from the set
  std::vector<std::size_t> class_count;
};

/// Instance accuracy is correct/total; class accuracy is the unweighted mean
/// over classes present in `truth`.
inline ClassificationMetrics classification_metrics(std::span<const std::size_t> predicted,
                                                    std::span<const std::size_t> truth, std::size_t classes) {
  if (predicted.size() != truth.size()) throw DimensionError("prediction and label counts differ");
  ClassificationMetrics m;
  m.class_count.assign(classes, 0);
  std::vector<std::size_t> hits(classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= classes) throw DataError("label " + std::to_string(truth[i]) + " outside class range");
    ++m.class_count[truth[i]];
    if (predicted[i] == truth[i]) {
      ++hits[truth[i]];
      ++correct;
    }
  }
  m.instance_accuracy = truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth.size());
  m.per_class.assign(classes, std::numeric_limits<double>::quiet_NaN());
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (m.class_count[c] == 0) continue;
    m.per_class[c] = static_cast<double>(hits[c]) / static_cast<double>(m.class_count[c]);
    total += m.per_class[c];
    ++present;
  }
  m.class_accuracy = present ? total / static_cast<double>(present) : 0.0;
  return m;
}

/// Mean IoU over the part types of one shape's category. A part absent from
/// both prediction and ground truth scores 1.
inline double shape_miou(std::span<const int> predicted, std::span<const int> truth, PartRange parts) {
  if (predicted.size() != truth.size()) throw DimensionError("prediction and label counts differ");
  for (int t : truth)
    if (!parts.contains(t)) throw DataError("part label " + std::to_string(t) + " outside the category's part set");
  double total = 0.0;
  for (int part = parts.first; part <= parts.last; ++part) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const bool p = predicted[i] == part, g = truth[i] == part;
      inter += p && g;
      uni += p || g;
    }
    total += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return total / static_cast<double>(parts.last - parts.first + 1);
}

struct SegmentationMetrics {
  std::vector<double> category_miou;  // NaN for categories without shapes
  std::vector<std::size_t> category_count;
  double instance_miou = 0.0;  // mean over all shapes
};

// A sample with its geometry precomputed for a given model configuration.
struct PreparedSample {
  PreparedCloud prepared;
  std::size_t label = 0;
  std::vector<std::size_t> targets;  // per-point parts (segmentation)
};

inline std::vector<PreparedSample> prepare_samples(const Point2Sequence& model, const std::vector<Sample>& samples) {
  std::vector<PreparedSample> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) {
    PreparedSample p;
    p.prepared = model.prepare(s.cloud);
    p.label = s.label;
    if (model.config().task == Task::segmentation) {
      if (!s.cloud.labeled()) throw DataError("segmentation sample without part labels");
      p.targets.assign(s.cloud.labels.begin(), s.cloud.labels.end());
    }
    out.push_back(std::move(p));
  }
  return out;
}

namespace detail {

inline std::size_t argmax_row(std::span<const double> logits, std::size_t row, std::size_t cols, std::size_t first,
                              std::size_t last) {
  std::size_t best = first;
  for (std::size_t j = first + 1; j <= last; ++j)
    if (logits[row * cols + j] > logits[row * cols + best]) best = j;
  return best;
}

inline constexpr std::size_t kEvalBatch = 32;

}  // namespace detail

inline ClassificationMetrics evaluate_classification(Point2Sequence& model, std::span<const PreparedSample> samples) {
  const std::size_t classes = model.config().outputs;
  std::vector<std::size_t> predicted, truth;
  for (std::size_t start = 0; start < samples.size(); start += detail::kEvalBatch) {
    std::vector<const PreparedCloud*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + detail::kEvalBatch); ++i) {
      batch.push_back(&samples[i].prepared);
      truth.push_back(samples[i].label);
    }
    const Tensor logits = model.forward(batch, {});
    for (std::size_t r = 0; r < batch.size(); ++r)
      predicted.push_back(detail::argmax_row(logits.values(), r, classes, 0, classes - 1));
  }
  return classification_metrics(predicted, truth, classes);
}

/// Per-point predictions are restricted to the parts of the shape's category.
inline SegmentationMetrics evaluate_segmentation(Point2Sequence& model, std::span<const PreparedSample> samples,
                                                 std::span<const PartRange> categories) {
  const std::size_t parts = model.config().outputs;
  SegmentationMetrics m;
  m.category_miou.assign(categories.size(), 0.0);
  m.category_count.assign(categories.size(), 0);
  double total = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += detail::kEvalBatch) {
    std::vector<const PreparedCloud*> batch;
    const std::size_t end = std::min(samples.size(), start + detail::kEvalBatch);
    for (std::size_t i = start; i < end; ++i) batch.push_back(&samples[i].prepared);
    const Tensor logits = model.forward(batch, {});
    std::size_t row = 0;
    for (std::size_t i = start; i < end; ++i) {
      const PreparedSample& s = samples[i];
      if (s.label >= categories.size()) throw DataError("category index outside the category map");
      const PartRange range = categories[s.label];
      if (static_cast<std::size_t>(range.last) >= parts) throw DataError("category part range exceeds model outputs");
      std::vector<int> pred(s.targets.size()), gt(s.targets.size());
      for (std::size_t p = 0; p < s.targets.size(); ++p, ++row) {
        pred[p] = static_cast<int>(detail::argmax_row(logits.values(), row, parts, static_cast<std::size_t>(range.first),
                                                      static_cast<std::size_t>(range.last)));
        gt[p] = static_cast<int>(s.targets[p]);
      }
      const double iou = shape_miou(pred, gt, range);
      m.category_miou[s.label] += iou;
      ++m.category_count[s.label];
      total += iou;
    }
  }
  for (std::size_t c = 0; c < categories.size(); ++c)
    m.category_miou[c] = m.category_count[c] ? m.category_miou[c] / static_cast<double>(m.category_count[c])
                                             : std::numeric_limits<double>::quiet_NaN();
  m.instance_miou = samples.empty() ? 0.0 : total / static_cast<double>(samples.size());
  return m;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double bn_momentum = 0.0;
  // Classification: instance / class accuracy. Segmentation: instance mIoU in `primary`.
  double primary = 0.0;
  double secondary = 0.0;
  std::optional<double> val_primary;
  std::optional<double> val_secondary;
};

inline std::string format_epoch(const EpochRecord& r, Task task) {
  char buf[512];
  int n = 0;
  if (task == Task::classification)
    n = std::snprintf(buf, sizeof buf, "epoch=%zu loss=%.9g lr=%.9g bn_momentum=%.9g train_instance_acc=%.6f train_class_acc=%.6f",
                      r.epoch, r.loss, r.lr, r.bn_momentum, r.primary, r.secondary);
  else
    n = std::snprintf(buf, sizeof buf, "epoch=%zu loss=%.9g lr=%.9g bn_momentum=%.9g train_miou=%.6f", r.epoch, r.loss,
                      r.lr, r.bn_momentum, r.primary);
  std::string line(buf, static_cast<std::size_t>(n));
  if (r.val_primary) {
    n = task == Task::classification
            ? std::snprintf(buf, sizeof buf, " val_instance_acc=%.6f val_class_acc=%.6f", *r.val_primary, *r.val_secondary)
            : std::snprintf(buf, sizeof buf, " val_miou=%.6f", *r.val_primary);
    line.append(buf, static_cast<std::size_t>(n));
  }
  return line;
}

struct TrainResult {
  Point2Sequence model;  // best checkpoint by validation metric (train metric without a val split)
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

struct SplitScore {
  double primary = 0.0;
  double secondary = 0.0;
};

inline SplitScore score_split(Point2Sequence& model, std::span<const PreparedSample> samples, const Dataset& ds) {
  if (model.config().task == Task::classification) {
    const auto m = evaluate_classification(model, samples);
    return {m.instance_accuracy, m.class_accuracy};
  }
  const auto m = evaluate_segmentation(model, samples, ds.part_ranges);
  return {m.instance_miou, m.instance_miou};
}

/// Mini-batch ADAM training. A single random stream seeded by cfg.seed is
/// consumed in this order: parameter initialization, then per epoch one draw
/// for the shuffle seed followed by the dropout masks of that epoch.
inline TrainResult train(const Dataset& ds, ModelConfig model_cfg, const TrainConfig& cfg,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (ds.train.empty()) throw DataError("training split is empty");
  if (model_cfg.task != ds.task) throw ConfigError("model task does not match the dataset task");
  model_cfg.outputs = ds.output_count();

  std::mt19937_64 rng(cfg.seed);
  Point2Sequence model(model_cfg, rng);
  const auto train_set = prepare_samples(model, ds.train);
  const auto val_set = prepare_samples(model, ds.val);
  AdamState optimizer = make_adam(model.params(), cfg.lr);

  TrainResult result{model, {}, 0};
  double best_metric = -1.0, best_loss = std::numeric_limits<double>::infinity();
  ModelParams best = model.params().clone();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch + 1;
    const ScheduledRates rates = apply_schedules(cfg, epoch, optimizer, model);
    rec.lr = rates.lr;
    rec.bn_momentum = rates.bn_momentum;

    const std::uint64_t shuffle_seed = rng();
    double loss_sum = 0.0;
    const ForwardMode mode{true, &rng};
    for (const auto& batch_idx : batch_iterator(train_set.size(), cfg.batch_size, shuffle_seed)) {
      std::vector<const PreparedCloud*> batch;
      std::vector<std::size_t> targets;
      for (std::size_t i : batch_idx) {
        batch.push_back(&train_set[i].prepared);
        if (ds.task == Task::classification)
          targets.push_back(train_set[i].label);
        else
          targets.insert(targets.end(), train_set[i].targets.begin(), train_set[i].targets.end());
      }
      model.params().zero_grad();
      const Tensor loss = cross_entropy_loss(model.forward(batch, mode), targets);
      ag::backward(loss);
      adam_step(model.params(), optimizer);
      loss_sum += loss.item() * static_cast<double>(batch.size());
    }
    rec.loss = loss_sum / static_cast<double>(train_set.size());

    const SplitScore tr = score_split(model, train_set, ds);
    rec.primary = tr.primary;
    rec.secondary = tr.secondary;
    double metric = tr.primary;
    if (!val_set.empty()) {
      const SplitScore va = score_split(model, val_set, ds);
      rec.val_primary = va.primary;
      rec.val_secondary = va.secondary;
      metric = va.primary;
    }
    if (metric > best_metric || (metric == best_metric && rec.loss < best_loss)) {
      best_metric = metric;
      best_loss = rec.loss;
      best = model.params().clone();
      result.best_epoch = rec.epoch;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.model = Point2Sequence(model_cfg, std::move(best));
  result.model.bn_momentum = model.bn_momentum;
  return result;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
};

// Below this magnitude a gradient difference is measured in absolute terms.
// Central differences on an O(1) loss carry roundoff of roughly 1e-10 at the
// default step, so smaller gradients cannot be resolved to 1e-4 relative.
inline constexpr double kGradCheckFloor = 1e-5;
// Small enough to rarely straddle a ReLU or max-pool kink, large enough to
// keep roundoff below the floor.
inline constexpr double kGradCheckStep = 5e-6;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
}

/// Compares backward() against central differences on up to `samples`
/// randomly chosen coordinates of every parameter. `loss_fn` must be a
/// deterministic function of the parameter values. `mutate` may alter the
/// analytic gradients before comparison (detector sanity checks).
inline GradCheckReport check_gradients(ModelParams& params, const std::function<Tensor()>& loss_fn, std::size_t samples,
                                       std::uint64_t seed, double step = kGradCheckStep,
                                       const std::function<void(ParamTensor&)>& mutate = {}) {
  GradCheckReport report;
  if (params.params().empty()) return report;
  params.zero_grad();
  ag::backward(loss_fn());
  std::mt19937_64 rng(seed);
  for (auto& p : params.params()) {
    if (mutate) mutate(p);
    const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    std::vector<std::size_t> coords(p.tensor.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    for (std::size_t i = coords.size(); i > 1; --i) std::swap(coords[i - 1], coords[rng() % i]);
    coords.resize(std::min(samples, coords.size()));

    GradCheckEntry entry{p.name, coords.size(), 0.0};
    auto values = p.tensor.mutable_values();
    for (std::size_t c : coords) {
      const double saved = values[c];
      values[c] = saved + step;
      const double up = loss_fn().item();
      values[c] = saved - step;
      const double down = loss_fn().item();
      values[c] = saved;
      const double numeric = (up - down) / (2.0 * step);
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(analytic[c], numeric));
    }
    report.entries.push_back(entry);
  }
  return report;
}

// The smallest configurations exercised by the gradient check.
inline ModelConfig tiny_config(Task task) {
  ModelConfig c;
  c.task = task;
  c.centroids = 4;
  c.scales = {2, 4};
  c.feature_dim = 8;
  c.hidden_dim = 8;
  c.area_mlp = {8};
  c.global_mlp = {16, 16};
  c.classifier = {16, 8};
  c.seg_region_mlp = {8};
  c.seg_point_mlp = {8};
  c.seg_head = {8};
  c.interp_neighbors = 3;
  c.outputs = 3;
  c.dropout = 0.4;
  return c;
}

/// Gradient check of the full network on tiny random clouds (N=16). Dropout
/// masks are replayed from a fixed seed on every evaluation, so the loss is a
/// deterministic function of the parameters.
inline GradCheckReport gradient_check(const ModelConfig& config, std::size_t samples = 20, std::uint64_t seed = 3,
                                      const std::function<void(ParamTensor&)>& mutate = {}) {
  std::mt19937_64 init(seed);
  Point2Sequence model(config, init);
  const std::size_t clouds = 3, points = 16;
  std::vector<PreparedCloud> prepared;
  std::vector<std::size_t> targets;
  for (std::size_t b = 0; b < clouds; ++b) {
    PointCloud c;
    for (std::size_t i = 0; i < points; ++i)
      c.points.push_back({2.0 * uniform01(init) - 1.0, 2.0 * uniform01(init) - 1.0, 2.0 * uniform01(init) - 1.0});
    c = normalize_unit_ball(std::move(c));
    prepared.push_back(model.prepare(c));
    if (config.task == Task::classification)
      targets.push_back(b % config.outputs);
    else
      for (std::size_t i = 0; i < points; ++i) targets.push_back(init() % config.outputs);
  }
  std::vector<const PreparedCloud*> batch;
  for (const auto& p : prepared) batch.push_back(&p);

  const std::uint64_t dropout_seed = init();
  auto loss_fn = [&]() {
    std::mt19937_64 masks(dropout_seed);
    return cross_entropy_loss(model.forward(batch, {true, &masks}), targets);
  };
  return check_gradients(model.params(), loss_fn, samples, seed + 1, kGradCheckStep, mutate);
}

}  // namespace p2s
