#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "p2s/training.hpp"
#include "support.hpp"

using namespace p2s;
using ag::Tensor;

namespace {

ModelParams one_param(std::vector<double> values) {
  ModelParams p;
  const std::size_t n = values.size();
  p.add("w", {1, n}, std::move(values));
  return p;
}

// Sets the gradient of every parameter to `g` by back-propagating sum(w * g).
void set_grad(ModelParams& p, const std::vector<double>& g) {
  p.zero_grad();
  Tensor& w = p.params()[0].tensor;
  ag::backward(ag::sum(ag::mul(w, Tensor::constant(w.shape(), g))));
}

// Hand-rolled ADAM for one scalar, from the update rule.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double x, double g, double lr) {
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    return x - lr * mh / (std::sqrt(vh) + 1e-8);
  }
};

Dataset one_sample_dataset(std::uint64_t seed) {
  Dataset ds = synthetic_classification(16, 0.0, seed, 1, 0);
  ds.train.resize(1);
  return ds;
}

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  for (std::size_t c : {2u, 3u, 10u, 40u}) {
    const std::vector<std::size_t> t{c - 1, 0};
    EXPECT_NEAR(cross_entropy_loss(Tensor::zeros({2, c}), t).item(), std::log(static_cast<double>(c)), 1e-12);
  }
}

TEST(CrossEntropy, WorkedExampleAndLimit) {
  const std::size_t one[] = {1};
  EXPECT_NEAR(cross_entropy_loss(Tensor::row({0, std::log(3.0)}), one).item(), 0.2876820724517809, 1e-12);
  EXPECT_LT(cross_entropy_loss(Tensor::row({-60, 60}), one).item(), 1e-50);
  const std::size_t bad[] = {5};
  EXPECT_THROW(cross_entropy_loss(Tensor::row({0, 0}), bad), DataError);
}

TEST(CrossEntropy, AveragesOverRows) {
  const std::size_t t[] = {0, 1};
  const double a = -std::log(std::exp(2.0) / (std::exp(2.0) + std::exp(1.0)));
  const double b = -std::log(0.5);
  EXPECT_NEAR(cross_entropy_loss(Tensor::matrix({{2, 1}, {0, 0}}), t).item(), (a + b) / 2, 1e-12);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  ModelParams p = one_param({0.5, -1.5});
  AdamState s = make_adam(p, 0.01);
  set_grad(p, {0, 0});
  adam_step(p, s);
  EXPECT_EQ(s.step, 1u);
  EXPECT_EQ(p.get("w").values()[0], 0.5);
  EXPECT_EQ(p.get("w").values()[1], -1.5);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  ModelParams p = one_param({0.0, 0.0, 0.0});
  AdamState s = make_adam(p, 0.001);
  const std::vector<double> g{3.0, -0.2, 1e-3};
  set_grad(p, g);
  adam_step(p, s);
  for (std::size_t i = 0; i < 3; ++i) {
    const double expected = -0.001 * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(p.get("w").values()[i], expected, 1e-15);
    EXPECT_NEAR(p.get("w").values()[i], -0.001 * (g[i] > 0 ? 1 : -1), 1e-8);
  }
}

TEST(Adam, SecondIdenticalStepIsNoLarger) {
  ModelParams p = one_param({1.0});
  AdamState s = make_adam(p, 0.01);
  set_grad(p, {2.0});
  adam_step(p, s);
  const double first = 1.0 - p.get("w").values()[0];
  const double after_one = p.get("w").values()[0];
  set_grad(p, {2.0});
  adam_step(p, s);
  const double second = after_one - p.get("w").values()[0];
  EXPECT_LE(second, first + 1e-12);
}

TEST(Adam, MatchesScalarOracleOverManySteps) {
  std::mt19937_64 rng(1);
  ModelParams p = one_param({0.3});
  AdamState s = make_adam(p, 0.005);
  ScalarAdam oracle;
  double x = 0.3;
  for (int t = 0; t < 50; ++t) {
    const double g = test::uniform(rng, -2, 2);
    set_grad(p, {g});
    adam_step(p, s);
    x = oracle.step(x, g, 0.005);
    EXPECT_NEAR(p.get("w").values()[0], x, 1e-14);
  }
}

TEST(Adam, ZeroLearningRateIsExactNoOp) {
  std::mt19937_64 rng(2);
  ModelParams p = one_param({0.1, 0.2, 0.3});
  AdamState s = make_adam(p, 0.0);
  for (int t = 0; t < 10; ++t) {
    set_grad(p, {test::uniform(rng, -1, 1), test::uniform(rng, -1, 1), test::uniform(rng, -1, 1)});
    adam_step(p, s);
  }
  EXPECT_EQ(p.get("w").values()[0], 0.1);
  EXPECT_EQ(p.get("w").values()[1], 0.2);
  EXPECT_EQ(p.get("w").values()[2], 0.3);
}

TEST(Adam, MissingGradientIsContractError) {
  ModelParams p = one_param({1.0});
  p.add("unused", {1, 1}, {2.0});
  AdamState s = make_adam(p, 0.01);
  p.params()[1].tensor = Tensor::constant({1, 1}, {2.0});  // a frozen entry has no gradient buffer
  ag::backward(ag::sum(p.params()[0].tensor));
  EXPECT_THROW(adam_step(p, s), ContractError);
}

TEST(Schedule, StepsAtMultiplesOfTwenty) {
  const TrainConfig cfg;
  EXPECT_DOUBLE_EQ(scheduled_rates(cfg, 0).lr, 0.001);
  EXPECT_DOUBLE_EQ(scheduled_rates(cfg, 19).lr, 0.001);
  EXPECT_DOUBLE_EQ(scheduled_rates(cfg, 19).bn_momentum, 0.5);
  EXPECT_NEAR(scheduled_rates(cfg, 20).lr, 0.0003, 1e-18);
  EXPECT_DOUBLE_EQ(scheduled_rates(cfg, 20).bn_momentum, 0.25);
  EXPECT_NEAR(scheduled_rates(cfg, 40).lr, 0.00009, 1e-18);
  EXPECT_DOUBLE_EQ(scheduled_rates(cfg, 40).bn_momentum, 0.125);
}

TEST(Schedule, FloorsHold) {
  const TrainConfig cfg;
  const ScheduledRates late = scheduled_rates(cfg, 1000);
  EXPECT_EQ(late.lr, 1e-5);
  EXPECT_EQ(late.bn_momentum, 0.01);
}

TEST(Schedule, ApplyUpdatesOptimizerAndModel) {
  std::mt19937_64 rng(1);
  Point2Sequence model(tiny_config(Task::classification), rng);
  AdamState opt = make_adam(model.params(), 0.001);
  apply_schedules(TrainConfig{}, 25, opt, model);
  EXPECT_NEAR(opt.lr, 0.0003, 1e-18);
  EXPECT_EQ(model.bn_momentum, 0.25);
}

TEST(Schedule, InvalidConfig) {
  TrainConfig cfg;
  cfg.lr = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(ClassificationMetrics, WorkedExample) {
  // Class 0: 10 samples, all right. Class 1: 90 samples, 45 right.
  std::vector<std::size_t> truth, pred;
  for (int i = 0; i < 10; ++i) truth.push_back(0), pred.push_back(0);
  for (int i = 0; i < 90; ++i) truth.push_back(1), pred.push_back(i % 2 ? 1 : 0);
  const auto m = classification_metrics(pred, truth, 3);
  EXPECT_NEAR(m.instance_accuracy, 0.55, 1e-15);
  EXPECT_NEAR(m.class_accuracy, 0.75, 1e-15);
  EXPECT_TRUE(std::isnan(m.per_class[2]));
}

TEST(ClassificationMetrics, PerfectAndFrequencyIdentity) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t classes = 2 + rng() % 6, n = 1 + rng() % 200;
    std::vector<std::size_t> truth(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = rng() % classes;
      pred[i] = rng() % 3 ? truth[i] : rng() % classes;
    }
    const auto m = classification_metrics(pred, truth, classes);
    double weighted = 0.0;
    for (std::size_t c = 0; c < classes; ++c)
      if (m.class_count[c]) weighted += m.per_class[c] * static_cast<double>(m.class_count[c]) / static_cast<double>(n);
    EXPECT_NEAR(weighted, m.instance_accuracy, 1e-12);
    const auto perfect = classification_metrics(truth, truth, classes);
    EXPECT_EQ(perfect.instance_accuracy, 1.0);
    EXPECT_EQ(perfect.class_accuracy, 1.0);
  }
}

TEST(SegmentationMetrics, WorkedExample) {
  const int gt[] = {0, 0, 1, 1}, pred[] = {0, 1, 1, 1};
  EXPECT_NEAR(shape_miou(pred, gt, {0, 1}), 7.0 / 12.0, 1e-15);
  EXPECT_EQ(shape_miou(gt, gt, {0, 1}), 1.0);
}

TEST(SegmentationMetrics, AbsentPartScoresOneAndRangeChecked) {
  const int gt[] = {4, 4, 5}, pred[] = {4, 4, 5};
  EXPECT_EQ(shape_miou(pred, gt, {4, 6}), 1.0);  // part 6 absent from both
  const int bad[] = {4, 7, 5};
  EXPECT_THROW(shape_miou(pred, bad, {4, 6}), DataError);
}

TEST(Format, EpochLine) {
  EpochRecord r;
  r.epoch = 3;
  r.loss = 0.5;
  r.lr = 0.001;
  r.bn_momentum = 0.5;
  r.primary = 1.0;
  r.secondary = 0.75;
  EXPECT_EQ(format_epoch(r, Task::classification),
            "epoch=3 loss=0.5 lr=0.001 bn_momentum=0.5 train_instance_acc=1.000000 train_class_acc=0.750000");
  r.val_primary = 0.5;
  r.val_secondary = 0.5;
  EXPECT_EQ(format_epoch(r, Task::segmentation),
            "epoch=3 loss=0.5 lr=0.001 bn_momentum=0.5 train_miou=1.000000 val_miou=0.500000");
}

TEST(GradCheck, MutationIsDetected) {
  const auto report = gradient_check(tiny_config(Task::classification), 20, 3, [](ParamTensor& p) {
    if (p.name == "cls.out.weight") {
      auto g = p.tensor.grad();
      for (std::size_t i = 0; i < g.size(); ++i) p.tensor.mutable_grad()[i] = g[i] * 1.5 + 0.01;
    }
  });
  double mutated = 0.0;
  for (const auto& e : report.entries)
    if (e.name == "cls.out.weight") mutated = e.max_rel_error;
  EXPECT_GT(mutated, 1e-2);
  EXPECT_GT(report.max_error(), 1e-2);
}

TEST(GradCheck, EmptyModelGivesEmptyReport) {
  ModelParams empty;
  const auto report = check_gradients(empty, [] { return Tensor::row({0.0}); }, 20, 1);
  EXPECT_TRUE(report.entries.empty());
  EXPECT_EQ(report.max_error(), 0.0);
}

TEST(GradCheck, TinyConfigsPass) {
  for (Task task : {Task::classification, Task::segmentation}) {
    const auto report = gradient_check(tiny_config(task));
    EXPECT_LT(report.max_error(), 1e-4);
    for (const auto& e : report.entries) EXPECT_LE(e.checked, 20u);
  }
}

TEST(Training, EmptyDatasetIsDataError) {
  Dataset ds = synthetic_classification(16, 0.0, 1, 1, 0);
  ds.train.clear();
  EXPECT_THROW(train(ds, tiny_config(Task::classification), TrainConfig{}), DataError);
}

TEST(Training, FixedSeedIsBitIdentical) {
  const Dataset ds = synthetic_classification(16, 0.02, 4, 3, 1);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  cfg.seed = 9;
  const TrainResult a = train(ds, tiny_config(Task::classification), cfg);
  const TrainResult b = train(ds, tiny_config(Task::classification), cfg);
  ASSERT_EQ(a.history.size(), 4u);
  for (std::size_t e = 0; e < a.history.size(); ++e)
    EXPECT_EQ(format_epoch(a.history[e], Task::classification), format_epoch(b.history[e], Task::classification));
  for (std::size_t k = 0; k < a.model.params().params().size(); ++k) {
    const auto& pa = a.model.params().params()[k].tensor;
    const auto& pb = b.model.params().params()[k].tensor;
    EXPECT_EQ(std::vector<double>(pa.values().begin(), pa.values().end()), std::vector<double>(pb.values().begin(), pb.values().end()));
  }
  cfg.seed = 10;
  const TrainResult c = train(ds, tiny_config(Task::classification), cfg);
  EXPECT_NE(a.history[0].loss, c.history[0].loss);
}

// One repeated sample, no dropout noise: after a short warmup the loss does
// not go up.
TEST(Training, SingleSampleLossIsMonotoneAfterWarmup) {
  ModelConfig cfg = tiny_config(Task::classification);
  cfg.dropout = 0.0;
  TrainConfig tc;
  tc.epochs = 60;
  tc.batch_size = 1;
  tc.seed = 5;
  const TrainResult r = train(one_sample_dataset(2), cfg, tc);
  for (std::size_t e = 5; e + 1 < r.history.size(); ++e)
    EXPECT_LE(r.history[e + 1].loss, r.history[e].loss) << "epoch " << r.history[e + 1].epoch;
}

// The step schedule bounds how far ADAM can move any weight, so decay is
// switched off to test capacity alone. With one cloud per batch the batch
// norms see a single row and the fit runs through the head biases.
TEST(Training, SingleSampleIsMemorized) {
  TrainConfig tc;
  tc.decay_every = 1000;
  tc.epochs = 1000;
  tc.batch_size = 1;
  tc.seed = 6;
  tc.lr = 0.1;
  const TrainResult r = train(one_sample_dataset(3), tiny_config(Task::classification), tc);
  EXPECT_LT(r.history.back().loss, 1e-3);
  EXPECT_EQ(r.history.back().primary, 1.0);
}

TEST(Training, BestEpochTracksTrainMetricWithoutValidation) {
  const Dataset ds = synthetic_classification(16, 0.02, 4, 2, 0);
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 3;
  const TrainResult r = train(ds, tiny_config(Task::classification), cfg);
  double best = -1.0;
  for (const auto& h : r.history) best = std::max(best, h.primary);
  EXPECT_EQ(r.history[r.best_epoch - 1].primary, best);
  const auto prepared = prepare_samples(r.model, ds.train);
  Point2Sequence model = r.model;
  EXPECT_EQ(evaluate_classification(model, prepared).instance_accuracy, best);
}

TEST(Training, SegmentationRunsAndScores) {
  const Dataset ds = synthetic_segmentation(24, 0.0, 2, 4, 2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  const TrainResult r = train(ds, tiny_config(Task::segmentation), cfg);
  EXPECT_EQ(r.model.config().outputs, ds.output_count());
  for (const auto& h : r.history) {
    EXPECT_GE(h.primary, 0.0);
    EXPECT_LE(h.primary, 1.0);
  }
}
