// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Usage: acceptance [configs-dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "p2s/checkpoint.hpp"
#include "p2s/cli.hpp"
#include "p2s/config.hpp"
#include "p2s/data.hpp"
#include "p2s/geometry.hpp"
#include "p2s/model.hpp"
#include "p2s/training.hpp"

using namespace p2s;
using ag::Tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Half of the clouds live on a coarse grid so that distance ties and
// duplicate points actually occur.
PointCloud random_cloud(std::mt19937_64& rng, std::size_t n, bool grid = false) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    Point3 p;
    for (double& x : p) x = grid ? static_cast<double>(static_cast<int>(rng() % 7) - 3) / 4.0 : uniform(rng, -1, 1);
    c.points.push_back(p);
  }
  return c;
}

Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo, double hi) {
  std::vector<double> v(r * c);
  for (double& x : v) x = uniform(rng, lo, hi);
  return Tensor::constant({r, c}, std::move(v));
}

bool before(const PointCloud& c, const Point3& q, std::size_t a, std::size_t b) {
  const double da = squared_distance(c.points[a], q), db = squared_distance(c.points[b], q);
  if (da != db) return da < db;
  if (c.points[a] != c.points[b]) return c.points[a] < c.points[b];
  return a < b;
}

// Greedy selection by exhaustive recomputation of each candidate's distance
// to the whole selected set.
std::vector<std::size_t> greedy_fps(const PointCloud& c, std::size_t m) {
  const Point3 mean = order_independent_mean(c.points);
  std::size_t start = 0;
  for (std::size_t i = 1; i < c.size(); ++i) {
    const double di = squared_distance(c.points[i], mean), ds = squared_distance(c.points[start], mean);
    if (di > ds || (di == ds && c.points[i] < c.points[start])) start = i;
  }
  std::vector<std::size_t> chosen{start};
  while (chosen.size() < m) {
    std::size_t best = c.size();
    double best_d = -1.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t s : chosen) d = std::min(d, squared_distance(c.points[i], c.points[s]));
      if (d > best_d || (d == best_d && c.points[i] < c.points[best])) {
        best = i;
        best_d = d;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  std::ostringstream out, err;
  GradCheckReport report;
  const int code = cmd_gradcheck(1e-4, 3, out, err, &report);
  const double secs = seconds_since(t0);
  const bool ok = code == kExitOk && !report.entries.empty() && report.max_error() < 1e-4 && secs < 120.0;
  return {ok, std::to_string(report.entries.size()) + " tensors, max rel err " + fmt("%.3g", report.max_error()) +
                  ", " + fmt("%.1f", secs) + "s"};
}

Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  std::size_t knn_checks = 0, knn_bad = 0, fps_bad = 0;
  const int clouds = 120;
  for (int t = 0; t < clouds; ++t) {
    const PointCloud c = random_cloud(rng, 1 + rng() % 256, t % 2 == 0);
    for (int q = 0; q < 8; ++q) {
      const Point3 query = q % 2 ? c.points[rng() % c.size()] : random_cloud(rng, 1, t % 2 == 0).points[0];
      const std::size_t k = 1 + rng() % c.size();
      std::vector<std::size_t> sorted(c.size());
      std::iota(sorted.begin(), sorted.end(), 0);
      std::sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) { return before(c, query, a, b); });
      sorted.resize(k);
      const auto tree = knn_search(c, query, k), brute = brute_force_knn(c, query, k);
      knn_bad += tree != brute || brute != sorted;
      ++knn_checks;
    }
    const std::size_t m = 1 + rng() % std::min<std::size_t>(c.size(), 64);
    fps_bad += farthest_point_sample(c, m).indices != greedy_fps(c, m);
  }
  const double secs = seconds_since(t0);
  return {knn_bad == 0 && fps_bad == 0 && secs < 60.0,
          std::to_string(clouds) + " clouds, kNN mismatches " + std::to_string(knn_bad) + "/" +
              std::to_string(knn_checks) + ", FPS mismatches " + std::to_string(fps_bad) + ", " + fmt("%.1f", secs) +
              "s"};
}

Outcome invariance(const RunConfig& cls_cfg) {
  std::mt19937_64 rng(99);
  ModelConfig mc = cls_cfg.model;
  mc.task = Task::classification;
  mc.outputs = 3;

  // Permutation: every aggregation variant, relative to the largest logit.
  double worst_perm = 0.0;
  for (Aggregation agg : {Aggregation::attention, Aggregation::no_attention, Aggregation::no_decoder,
                          Aggregation::concat, Aggregation::maxpool}) {
    mc.aggregation = agg;
    Point2Sequence model(mc, rng);
    for (int t = 0; t < 20; ++t) {
      const PointCloud c = normalize_unit_ball(random_cloud(rng, 64));
      PointCloud p = c;
      std::shuffle(p.points.begin(), p.points.end(), rng);
      const Tensor a = model.classify_forward(c), b = model.classify_forward(p);
      double diff = 0.0, scale = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::abs(a.values()[i] - b.values()[i]));
        scale = std::max(scale, std::abs(a.values()[i]));
      }
      worst_perm = std::max(worst_perm, diff / std::max(scale, std::numeric_limits<double>::min()));
    }
  }

  // Translation: pooled area features before the centroid is attached, for
  // every centroid and scale of 20 clouds.
  mc.aggregation = Aggregation::attention;
  Point2Sequence model(mc, rng);
  double worst_shift = 0.0;
  for (int t = 0; t < 20; ++t) {
    const PointCloud c = normalize_unit_ball(random_cloud(rng, 64));
    const Point3 v{uniform(rng, -5, 5), uniform(rng, -5, 5), uniform(rng, -5, 5)};
    const PreparedCloud prep = model.prepare(c);
    for (std::size_t j = 0; j < prep.centroids.size(); ++j) {
      const Point3 cj = prep.centroids.coordinates[j];
      const Point3 cm{cj[0] + v[0], cj[1] + v[1], cj[2] + v[2]};
      for (std::size_t s = 0; s < prep.grouping.sizes.size(); ++s) {
        std::vector<Point3> a, b;
        for (std::size_t i : prep.grouping.area(j, s)) {
          const Point3& p = c.points[i];
          a.push_back(p);
          b.push_back({p[0] + v[0], p[1] + v[1], p[2] + v[2]});
        }
        const auto fa = model.area_feature(to_relative(a, cj), cj);
        const auto fb = model.area_feature(to_relative(b, cm), cm);
        for (std::size_t i = 0; i < fa.pooled.size(); ++i)
          worst_shift = std::max(worst_shift, std::abs(fa.pooled.values()[i] - fb.pooled.values()[i]));
      }
    }
  }

  double worst_sum = 0.0;
  bool negative = false;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t H = 1 + rng() % 16, T = 1 + rng() % 6, G = 1 + rng() % 4;
    EncoderTrace trace;
    for (std::size_t s = 0; s < T; ++s) trace.hidden.push_back(random_tensor(rng, G, H, -3, 3));
    const Tensor w = attention_scores(random_tensor(rng, G, H, -3, 3), trace, random_tensor(rng, H, H, -5, 5));
    for (std::size_t g = 0; g < G; ++g) {
      double sum = 0.0;
      for (std::size_t k = 0; k < T; ++k) {
        negative |= w.at(g, k) < 0.0;
        sum += w.at(g, k);
      }
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    }
  }

  std::size_t outside = 0;
  for (int t = 0; t < 1000; ++t) {
    const PointCloud src = random_cloud(rng, 1 + rng() % 40, t % 4 == 0), tgt = random_cloud(rng, 1 + rng() % 12);
    const std::size_t k = 1 + rng() % std::min<std::size_t>(src.size(), 4), dims = 1 + rng() % 6;
    const Tensor feats = random_tensor(rng, src.size(), dims, -10, 10);
    const Tensor out = interpolate_features(tgt.points, src.points, feats, k);
    for (std::size_t i = 0; i < tgt.size(); ++i) {
      const auto nn = brute_force_knn(src, tgt.points[i], k);
      for (std::size_t d = 0; d < dims; ++d) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (std::size_t j : nn) {
          lo = std::min(lo, feats.at(j, d));
          hi = std::max(hi, feats.at(j, d));
        }
        const double slack = 1e-12 * std::max({1.0, std::abs(lo), std::abs(hi)});
        outside += out.at(i, d) < lo - slack || out.at(i, d) > hi + slack;
      }
    }
  }

  const bool ok = worst_perm <= 1e-6 && worst_shift <= 1e-9 && worst_sum <= 1e-9 && !negative && outside == 0;
  return {ok, "perm rel " + fmt("%.2g", worst_perm) + ", shift abs " + fmt("%.2g", worst_shift) + ", attention |sum-1| " +
                  fmt("%.2g", worst_sum) + ", interpolation out of hull " + std::to_string(outside)};
}

struct DeskRun {
  TrainResult result;
  Dataset data;
  double seconds = 0.0;
};

DeskRun train_from(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  Dataset data = load_dataset(cfg);
  ModelConfig mc = cfg.model;
  mc.task = data.task;
  mc.outputs = data.output_count();
  TrainResult result = train(data, mc, cfg.train);
  return {std::move(result), std::move(data), seconds_since(t0)};
}

Outcome desk_classification(DeskRun& run) {
  double best_train = 0.0;
  for (const auto& r : run.result.history) best_train = std::max(best_train, r.primary);
  const auto m = evaluate_classification(run.result.model, prepare_samples(run.result.model, run.data.test));
  const bool ok = run.data.train.size() == 60 && run.data.test.size() == 30 && best_train >= 0.99 &&
                  m.instance_accuracy >= 0.90 && run.seconds < 900.0;
  return {ok, "train acc " + fmt("%.4f", best_train) + ", test instance acc " + fmt("%.4f", m.instance_accuracy) +
                  " (best epoch " + std::to_string(run.result.best_epoch) + "), " + fmt("%.1f", run.seconds) + "s"};
}

Outcome desk_segmentation(const RunConfig& cfg) {
  DeskRun run = train_from(cfg);
  const auto m =
      evaluate_segmentation(run.result.model, prepare_samples(run.result.model, run.data.test), run.data.part_ranges);
  const bool ok = run.data.train.size() == 40 && run.data.test.size() == 20 && m.instance_miou >= 0.80 &&
                  run.seconds < 1200.0;
  return {ok, "test mIoU " + fmt("%.4f", m.instance_miou) + " (best epoch " + std::to_string(run.result.best_epoch) +
                  "), " + fmt("%.1f", run.seconds) + "s"};
}

Outcome ablation(const fs::path& config, const fs::path& out_dir) {
  CommonOptions opts;
  opts.config = config.string();
  opts.out = out_dir.string();
  std::ostringstream out, err;
  AblationResult res;
  const int code = cmd_ablate(opts, "aggregation", "", out, err, &res);
  if (code != kExitOk) return {false, "cmd_ablate exited " + std::to_string(code) + ": " + err.str()};
  std::printf("%s", out.str().substr(out.str().rfind("aggregation")).c_str());
  auto at = [&](const std::string& label) {
    const auto it = std::find(res.labels.begin(), res.labels.end(), label);
    return it == res.labels.end() ? std::numeric_limits<double>::quiet_NaN() : res.primary[it - res.labels.begin()];
  };
  const double att = at("Att+ED"), mp = at("MP");
  const bool ok = res.labels.size() == 5 && att >= mp - 0.02;
  return {ok, std::to_string(res.labels.size()) + " variants, Att+ED " + fmt("%.4f", att) + " vs MP " + fmt("%.4f", mp)};
}

Outcome determinism(const fs::path& config, const fs::path& dir, const Point2Sequence& library_model) {
  std::string logs[2], ckpts[2];
  for (int i = 0; i < 2; ++i) {
    CommonOptions opts;
    opts.config = config.string();
    opts.out = (dir / ("run" + std::to_string(i))).string();
    std::ostringstream out, err;
    if (const int code = cmd_train(opts, out, err); code != kExitOk)
      return {false, "cmd_train exited " + std::to_string(code) + ": " + err.str()};
    logs[i] = read_text_file(fs::path(*opts.out) / "metrics.log");
    ckpts[i] = read_text_file(fs::path(*opts.out) / "model.ckpt");
  }
  // The in-process training above must agree with the CLI as well.
  const bool same_as_library = ckpts[0] == serialize_checkpoint(library_model);
  const bool ok = !logs[0].empty() && logs[0] == logs[1] && ckpts[0] == ckpts[1] && same_as_library;
  return {ok, "metrics.log " + std::string(logs[0] == logs[1] ? "identical" : "differs") + " (" +
                  std::to_string(logs[0].size()) + " bytes), model.ckpt " +
                  (ckpts[0] == ckpts[1] ? "identical" : "differs") + " (" + std::to_string(ckpts[0].size()) +
                  " bytes), matches in-process run: " + (same_as_library ? "yes" : "no")};
}

Outcome round_trips(const fs::path& dir, const Point2Sequence& trained) {
  double worst = 0.0;
  bool labels_ok = true;
  const Dataset ds = synthetic_segmentation(128, 0.02, 11, 10, 0);
  std::mt19937_64 rng(12);
  std::vector<PointCloud> clouds;
  for (const auto& s : ds.train) clouds.push_back(s.cloud);
  for (int t = 0; t < 10; ++t) clouds.push_back(normalize_unit_ball(random_cloud(rng, 200)));
  for (const auto& c : clouds) {
    write_point_file(dir / "cloud.pts", c);
    const PointCloud back = load_point_file(dir / "cloud.pts");
    labels_ok &= back.labels == c.labels && back.size() == c.size();
    for (std::size_t i = 0; i < std::min(back.size(), c.size()); ++i)
      for (int k = 0; k < 3; ++k) worst = std::max(worst, std::abs(back.points[i][k] - c.points[i][k]));
  }

  const std::string bytes = serialize_checkpoint(trained);
  save_checkpoint(dir / "model.ckpt", trained);
  const Point2Sequence loaded = load_checkpoint(dir / "model.ckpt");
  bool params_exact = loaded.params().params().size() == trained.params().params().size();
  for (std::size_t i = 0; params_exact && i < trained.params().params().size(); ++i) {
    const auto a = trained.params().params()[i].tensor.values(), b = loaded.params().params()[i].tensor.values();
    params_exact = a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
  }
  const bool ckpt_exact = read_text_file(dir / "model.ckpt") == bytes && serialize_checkpoint(loaded) == bytes;
  const bool ok = worst <= 1e-12 && labels_ok && ckpt_exact && params_exact;
  return {ok, std::to_string(clouds.size()) + " point files, max coord err " + fmt("%.2g", worst) + ", checkpoint " +
                  (ckpt_exact && params_exact ? "bit-exact" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path configs = argc > 1 ? fs::path(argv[1]) : fs::path("configs");
  const fs::path cls_conf = configs / "synthetic-classification.conf";
  const fs::path seg_conf = configs / "synthetic-segmentation.conf";
  const fs::path scratch = fs::temp_directory_path() / ("p2s-acceptance-" + std::to_string(std::random_device{}()));
  fs::create_directories(scratch);

  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& body) {
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s [%d] %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
  };

  std::optional<DeskRun> cls_run;
  try {
    const RunConfig cls_cfg = load_config(cls_conf.string());
    report(1, "gradient fidelity", gradient_fidelity);
    report(2, "oracle equivalence", oracle_equivalence);
    report(3, "invariance suite", [&] { return invariance(cls_cfg); });
    report(4, "desk classification", [&] {
      cls_run.emplace(train_from(cls_cfg));
      return desk_classification(*cls_run);
    });
    report(5, "desk segmentation", [&] { return desk_segmentation(load_config(seg_conf.string())); });
    report(6, "aggregation ablation", [&] { return ablation(cls_conf, scratch / "ablate"); });
    report(7, "determinism", [&] {
      if (!cls_run) return Outcome{false, "criterion 4 produced no run"};
      return determinism(cls_conf, scratch, cls_run->result.model);
    });
    report(8, "round trips", [&] {
      if (!cls_run) return Outcome{false, "criterion 4 produced no run"};
      return round_trips(scratch, cls_run->result.model);
    });
  } catch (const std::exception& e) {
    std::printf("FAIL setup: %s\n", e.what());
    failures = 1;
  }
  std::error_code ec;
  fs::remove_all(scratch, ec);
  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
