#pragma once

// Dataset ingestion and the synthetic shape generator.
//
// Point file: one point per line, "x y z" or "x y z part_label", whitespace
// separated. Every line of a file has the same column count. Blank lines are
// ignored. Clouds are normalized into the unit ball when loaded.
//
// Manifest: "key = value" header lines, then one record per sample
// "split path label" where split is train|val|test and label is a class name
// (classification) or category name (segmentation). Paths are relative to the
// manifest's directory. Lines starting with '#' are comments.
//
//   task = segmentation
//   categories = mug table
//   parts.mug = 0-1
//   parts.table = 2-4
//   train mug/0001.pts mug

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "p2s/errors.hpp"
#include "p2s/geometry.hpp"
#include "p2s/model.hpp"

namespace p2s {

struct Sample {
  PointCloud cloud;
  std::size_t label = 0;  // class index, or category index for segmentation
  std::string path;       // source file, empty for generated samples
};

struct PartRange {
  int first = 0;
  int last = 0;  // inclusive

  bool contains(int part) const { return part >= first && part <= last; }
};

struct Dataset {
  Task task = Task::classification;
  std::vector<std::string> names;     // classes, or categories for segmentation
  std::vector<PartRange> part_ranges;  // per category (segmentation only)
  std::vector<Sample> train, val, test;

  // Class count C, or global part label count P.
  std::size_t output_count() const {
    if (task == Task::classification) return names.size();
    int top = -1;
    for (const auto& r : part_ranges) top = std::max(top, r.last);
    return static_cast<std::size_t>(top + 1);
  }

  const std::vector<Sample>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ArgumentError("unknown split '" + name + "'");
  }
};

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace detail

/// Parses point-file text without normalizing.
inline PointCloud parse_points(const std::string& text, const std::string& source = "<points>") {
  PointCloud cloud;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::size_t columns = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto tok = detail::split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 3 && tok.size() != 4) throw ParseError(source, line_no, "expected 3 or 4 columns");
    if (columns == 0) columns = tok.size();
    if (tok.size() != columns) throw ParseError(source, line_no, "column count differs from earlier lines");
    Point3 p{};
    for (std::size_t a = 0; a < 3; ++a)
      if (!detail::parse_number(tok[a], p[a]) || !std::isfinite(p[a]))
        throw ParseError(source, line_no, "invalid coordinate '" + std::string(tok[a]) + "'");
    cloud.points.push_back(p);
    if (columns == 4) {
      int label = 0;
      if (!detail::parse_number(tok[3], label) || label < 0)
        throw ParseError(source, line_no, "invalid part label '" + std::string(tok[3]) + "'");
      cloud.labels.push_back(label);
    }
  }
  if (cloud.points.empty()) throw DataError(source + ": no points");
  return cloud;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Reads a point file and normalizes it into the unit ball.
inline PointCloud load_point_file(const std::filesystem::path& path) {
  return normalize_unit_ball(parse_points(read_text_file(path), path.string()));
}

/// Writes 17 significant digits, enough for an exact round trip.
inline std::string format_points(const PointCloud& cloud) {
  std::string out;
  char buf[128];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    int n = std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g", p[0], p[1], p[2]);
    out.append(buf, static_cast<std::size_t>(n));
    if (cloud.labeled()) {
      n = std::snprintf(buf, sizeof buf, " %d", cloud.labels[i]);
      out.append(buf, static_cast<std::size_t>(n));
    }
    out.push_back('\n');
  }
  return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

inline void write_point_file(const std::filesystem::path& path, const PointCloud& cloud) {
  write_text_file(path, format_points(cloud));
}

/// Loads a manifest and every cloud it references, validating labels.
inline Dataset load_manifest(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  const std::filesystem::path base = path.parent_path();
  const std::string source = path.string();

  Dataset ds;
  bool have_task = false;
  std::map<std::string, PartRange> parts;
  struct Record {
    std::string split, file, label;
    std::size_t line;
  };
  std::vector<Record> records;

  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq != std::string::npos) {
      const std::string key = detail::trim(std::string_view(t).substr(0, eq));
      const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
      if (key == "task") {
        try {
          ds.task = parse_task(value);
        } catch (const ConfigError& e) {
          throw ParseError(source, line_no, e.what());
        }
        have_task = true;
      } else if (key == "classes" || key == "categories") {
        for (auto name : detail::split_ws(value)) ds.names.emplace_back(name);
      } else if (key.rfind("parts.", 0) == 0) {
        const auto dash = value.find('-');
        PartRange r;
        if (dash == std::string::npos || !detail::parse_number(detail::trim(value.substr(0, dash)), r.first) ||
            !detail::parse_number(detail::trim(value.substr(dash + 1)), r.last) || r.first < 0 || r.last < r.first)
          throw ParseError(source, line_no, "part range must look like 'first-last'");
        parts[key.substr(6)] = r;
      } else {
        throw ParseError(source, line_no, "unknown manifest key '" + key + "'");
      }
      continue;
    }
    const auto tok = detail::split_ws(t);
    if (tok.size() != 3) throw ParseError(source, line_no, "record must be 'split path label'");
    if (tok[0] != "train" && tok[0] != "val" && tok[0] != "test")
      throw ParseError(source, line_no, "unknown split '" + std::string(tok[0]) + "'");
    records.push_back({std::string(tok[0]), std::string(tok[1]), std::string(tok[2]), line_no});
  }
  if (!have_task) throw DataError(source + ": missing 'task' header");
  if (ds.names.empty()) throw DataError(source + ": no classes or categories declared");
  if (ds.task == Task::segmentation)
    for (const auto& name : ds.names) {
      auto it = parts.find(name);
      if (it == parts.end()) throw DataError(source + ": category '" + name + "' has no parts range");
      ds.part_ranges.push_back(it->second);
    }

  for (const Record& r : records) {
    const auto it = std::find(ds.names.begin(), ds.names.end(), r.label);
    if (it == ds.names.end()) throw DataError(source + ":" + std::to_string(r.line) + ": undeclared label '" + r.label + "'");
    const std::filesystem::path file = base / r.file;
    if (!std::filesystem::exists(file)) throw DataError(source + ":" + std::to_string(r.line) + ": missing file " + file.string());
    Sample s;
    s.label = static_cast<std::size_t>(it - ds.names.begin());
    s.path = file.string();
    s.cloud = load_point_file(file);
    if (ds.task == Task::segmentation) {
      if (!s.cloud.labeled()) throw DataError(file.string() + ": segmentation samples need per-point part labels");
      const PartRange range = ds.part_ranges[s.label];
      for (int part : s.cloud.labels)
        if (!range.contains(part))
          throw DataError(file.string() + ": part label " + std::to_string(part) + " outside category '" + r.label +
                          "' range " + std::to_string(range.first) + "-" + std::to_string(range.last));
    }
    (r.split == "train" ? ds.train : r.split == "val" ? ds.val : ds.test).push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class ShapeKind { sphere, cube, plane, composite };

inline std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::cube: return "cube";
    case ShapeKind::plane: return "plane";
    case ShapeKind::composite: return "composite";
  }
  return "sphere";
}

struct SyntheticSpec {
  ShapeKind kind = ShapeKind::sphere;
  std::size_t points = 64;
  double noise = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (points < 8) throw ConfigError("synthetic clouds need at least 8 points");
    if (!(noise >= 0.0)) throw ConfigError("synthetic noise must be non-negative");
  }
};

namespace detail {

inline Point3 random_unit_vector(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    Point3 v{normal(rng), normal(rng), normal(rng)};
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (n > 1e-12) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

using Rotation = std::array<Point3, 3>;  // rows of an orthonormal matrix

inline Rotation random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  double q[4];
  double n = 0.0;
  do {
    n = 0.0;
    for (double& c : q) {
      c = normal(rng);
      n += c * c;
    }
  } while (n < 1e-12);
  n = std::sqrt(n);
  const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
  return {Point3{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
          Point3{2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
          Point3{2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}};
}

inline Point3 rotate(const Rotation& r, const Point3& p) {
  return {r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2], r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
          r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2]};
}

// Uniform in the unit disc in the z = 0 plane.
inline Point3 disc_point(std::mt19937_64& rng) {
  const double r = std::sqrt(uniform01(rng));
  const double phi = 2.0 * std::numbers::pi * uniform01(rng);
  return {r * std::cos(phi), r * std::sin(phi), 0.0};
}

inline Point3 cube_surface_point(std::mt19937_64& rng) {
  const auto face = static_cast<int>(rng() % 6);
  const double u = uniform01(rng) - 0.5, v = uniform01(rng) - 0.5;
  const double s = face % 2 == 0 ? 0.5 : -0.5;
  switch (face / 2) {
    case 0: return {s, u, v};
    case 1: return {u, s, v};
    default: return {u, v, s};
  }
}

}  // namespace detail

/// One raw (unnormalized, noise-free unless spec.noise > 0) cloud of the given kind.
inline PointCloud sample_shape(ShapeKind kind, std::size_t points, double noise, std::mt19937_64& rng) {
  PointCloud c;
  c.points.reserve(points);
  switch (kind) {
    case ShapeKind::sphere:
      for (std::size_t i = 0; i < points; ++i) c.points.push_back(detail::random_unit_vector(rng));
      break;
    case ShapeKind::cube:
      for (std::size_t i = 0; i < points; ++i) c.points.push_back(detail::cube_surface_point(rng));
      break;
    case ShapeKind::plane: {
      const auto rot = detail::random_rotation(rng);
      for (std::size_t i = 0; i < points; ++i) c.points.push_back(detail::rotate(rot, detail::disc_point(rng)));
      break;
    }
    case ShapeKind::composite: {
      // Upper unit hemisphere (part 0) closed by its base disc (part 1), in
      // proportion to their areas 2:1. Kept in canonical orientation, like
      // aligned part-segmentation corpora.
      const std::size_t disc = points / 3;
      const std::size_t dome = points - disc;
      for (std::size_t i = 0; i < dome; ++i) {
        Point3 p = detail::random_unit_vector(rng);
        p[2] = std::abs(p[2]);
        c.points.push_back(p);
        c.labels.push_back(0);
      }
      for (std::size_t i = 0; i < disc; ++i) {
        c.points.push_back(detail::disc_point(rng));
        c.labels.push_back(1);
      }
      break;
    }
  }
  if (noise > 0.0) {
    std::normal_distribution<double> jitter(0.0, noise);
    for (auto& p : c.points)
      for (double& v : p) v += jitter(rng);
  }
  return c;
}

/// `count` normalized clouds of spec.kind, deterministic in spec.seed.
inline std::vector<Sample> generate_synthetic(const SyntheticSpec& spec, std::size_t count) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::vector<Sample> out(count);
  for (auto& s : out) s.cloud = normalize_unit_ball(sample_shape(spec.kind, spec.points, spec.noise, rng));
  return out;
}

/// Three-class sphere / cube / plane set with balanced splits.
inline Dataset synthetic_classification(std::size_t points, double noise, std::uint64_t seed, std::size_t train_per_class,
                                        std::size_t test_per_class) {
  Dataset ds;
  ds.task = Task::classification;
  const ShapeKind kinds[] = {ShapeKind::sphere, ShapeKind::cube, ShapeKind::plane};
  for (std::size_t c = 0; c < 3; ++c) {
    ds.names.push_back(to_string(kinds[c]));
    auto samples = generate_synthetic({kinds[c], points, noise, seed * 1000 + c}, train_per_class + test_per_class);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      samples[i].label = c;
      (i < train_per_class ? ds.train : ds.test).push_back(std::move(samples[i]));
    }
  }
  return ds;
}

/// Single-category, two-part (dome / base) segmentation set.
inline Dataset synthetic_segmentation(std::size_t points, double noise, std::uint64_t seed, std::size_t train_count,
                                      std::size_t test_count) {
  Dataset ds;
  ds.task = Task::segmentation;
  ds.names = {"composite"};
  ds.part_ranges = {{0, 1}};
  auto samples = generate_synthetic({ShapeKind::composite, points, noise, seed * 1000 + 7}, train_count + test_count);
  for (std::size_t i = 0; i < samples.size(); ++i) (i < train_count ? ds.train : ds.test).push_back(std::move(samples[i]));
  return ds;
}

/// Writes every sample as a point file under `dir` plus dir/manifest.txt.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  std::ostringstream manifest;
  manifest << "task = " << to_string(ds.task) << "\n";
  manifest << (ds.task == Task::classification ? "classes =" : "categories =");
  for (const auto& n : ds.names) manifest << ' ' << n;
  manifest << "\n";
  for (std::size_t c = 0; c < ds.part_ranges.size(); ++c)
    manifest << "parts." << ds.names[c] << " = " << ds.part_ranges[c].first << "-" << ds.part_ranges[c].last << "\n";
  for (const char* split : {"train", "val", "test"}) {
    const auto& samples = ds.split(split);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "%s_%04zu.pts", split, i);
      write_point_file(dir / name, samples[i].cloud);
      manifest << split << ' ' << name << ' ' << ds.names[samples[i].label] << "\n";
    }
  }
  write_text_file(dir / "manifest.txt", manifest.str());
}

/// Mini-batches of sample indices; shuffled deterministically by `shuffle_seed`.
/// The final short batch is kept.
inline std::vector<std::vector<std::size_t>> batch_iterator(std::size_t sample_count, std::size_t batch_size,
                                                            std::uint64_t shuffle_seed, bool shuffle = true) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::size_t> order(sample_count);
  for (std::size_t i = 0; i < sample_count; ++i) order[i] = i;
  if (shuffle) {
    std::mt19937_64 rng(shuffle_seed);
    for (std::size_t i = sample_count; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < sample_count; start += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(sample_count, start + batch_size)));
  return batches;
}

}  // namespace p2s
