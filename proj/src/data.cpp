/*
 * Copyright 2026 The SPCM Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "spcm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "spcm/container.hpp"
#include "spcm/random.hpp"

namespace spcm {

namespace {

constexpr std::uint32_t kHasFeats = 1;
constexpr std::uint32_t kHasFlows = 2;
constexpr std::uint32_t kHasMasks = 4;
constexpr std::uint32_t kHasFutureFlows = 8;

std::string hex_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

bool finite3(const Vec3& v) { return std::isfinite(v[0]) && std::isfinite(v[1]) && std::isfinite(v[2]); }

}  // namespace

void SceneSpec::validate() const {
  if (objects.empty()) throw DataError("scene has zero objects");
  if (frames < 2) throw DataError("scene needs at least two input frames");
  if (points == 0) throw DataError("scene needs a positive point count");
  if (!(occlusion >= 0.0 && occlusion < 1.0)) throw DataError("occlusion fraction must be in [0, 1)");
  std::size_t pool = 0;
  for (const auto& o : objects) {
    if (o.surface_points == 0) throw DataError("object with zero surface points");
    if (!finite3(o.extent) || !finite3(o.position) || !finite3(o.orientation) ||
        !finite3(o.rotation_per_step) || !finite3(o.translation_per_step))
      throw DataError("object parameters must be finite");
    if (o.extent[0] <= 0.0 || (o.shape != ShapeKind::kSphereShell && (o.extent[1] <= 0.0)) ||
        (o.shape == ShapeKind::kBox && o.extent[2] <= 0.0))
      throw DataError("object extents must be positive");
    pool += o.surface_points;
  }
  if (pool < points)
    throw DataError("scene surfaces hold " + std::to_string(pool) + " points, fewer than the " +
                    std::to_string(points) + " requested per frame");
}

std::uint64_t spec_hash(const SceneSpec& s) {
  std::ostringstream os;
  os << "T=" << s.frames << ";K=" << s.future << ";N=" << s.points << ";occ=" << hex_double(s.occlusion)
     << ";res=" << s.resample << ";seed=" << s.seed;
  auto v3 = [&](const Vec3& v) { os << hex_double(v[0]) << ',' << hex_double(v[1]) << ',' << hex_double(v[2]) << ';'; };
  for (const auto& o : s.objects) {
    os << "obj=" << static_cast<int>(o.shape) << ',' << o.surface_points << ';';
    v3(o.extent);
    v3(o.position);
    v3(o.orientation);
    v3(o.rotation_per_step);
    v3(o.translation_per_step);
  }
  return fnv1a(os.str());
}

std::array<double, 9> rotation_matrix(const Vec3& w) {
  const double theta = std::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
  if (theta == 0.0) return {1, 0, 0, 0, 1, 0, 0, 0, 1};
  const double x = w[0] / theta, y = w[1] / theta, z = w[2] / theta;
  const double c = std::cos(theta), s = std::sin(theta), C = 1.0 - c;
  return {c + x * x * C,     x * y * C - z * s, x * z * C + y * s,
          y * x * C + z * s, c + y * y * C,     y * z * C - x * s,
          z * x * C - y * s, z * y * C + x * s, c + z * z * C};
}

namespace {

using Mat3 = std::array<double, 9>;

Mat3 matmul3(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[3 * i + j] += a[3 * i + k] * b[3 * k + j];
  return r;
}

Vec3 rotate(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

Vec3 unit_vector(Rng& rng) {
  for (;;) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (n > 1e-12) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

/// Points on the object surface in its local frame.
std::vector<Vec3> sample_surface(const ObjectSpec& o, Rng& rng) {
  std::vector<Vec3> pts;
  pts.reserve(o.surface_points);
  const Vec3& e = o.extent;
  for (std::size_t i = 0; i < o.surface_points; ++i) {
    switch (o.shape) {
      case ShapeKind::kSphereShell: {
        const Vec3 u = unit_vector(rng);
        pts.push_back({u[0] * e[0], u[1] * e[0], u[2] * e[0]});
        break;
      }
      case ShapeKind::kPlanarPatch:
        pts.push_back({rng.uniform(-e[0], e[0]), rng.uniform(-e[1], e[1]), 0.0});
        break;
      case ShapeKind::kBox: {
        // Face chosen with probability proportional to its area.
        const double axy = e[0] * e[1], axz = e[0] * e[2], ayz = e[1] * e[2];
        const double r = rng.uniform() * (axy + axz + ayz);
        const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        const double a = rng.uniform(-1.0, 1.0), b = rng.uniform(-1.0, 1.0);
        if (r < axy)
          pts.push_back({a * e[0], b * e[1], sign * e[2]});
        else if (r < axy + axz)
          pts.push_back({a * e[0], sign * e[1], b * e[2]});
        else
          pts.push_back({sign * e[0], a * e[1], b * e[2]});
        break;
      }
    }
  }
  return pts;
}

/// World positions of every surface point at every step.
std::vector<std::vector<Vec3>> transport(const SceneSpec& spec, std::size_t steps) {
  std::vector<std::vector<Vec3>> world(steps);
  for (std::size_t oi = 0; oi < spec.objects.size(); ++oi) {
    const ObjectSpec& o = spec.objects[oi];
    Rng rng(derive_seed(spec.seed, "surface" + std::to_string(oi)));
    const auto local = sample_surface(o, rng);
    const Mat3 step_rot = rotation_matrix(o.rotation_per_step);
    Mat3 rot = rotation_matrix(o.orientation);
    Vec3 center = o.position;
    for (std::size_t s = 0; s < steps; ++s) {
      if (s > 0) {
        rot = matmul3(step_rot, rot);
        for (int a = 0; a < 3; ++a) center[a] += o.translation_per_step[a];
      }
      for (const Vec3& p : local) {
        const Vec3 q = rotate(rot, p);
        world[s].push_back({q[0] + center[0], q[1] + center[1], q[2] + center[2]});
      }
    }
  }
  return world;
}

std::vector<std::uint32_t> choose(std::size_t pool, std::size_t n, Rng& rng) {
  std::vector<std::uint32_t> idx(pool);
  std::iota(idx.begin(), idx.end(), 0u);
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.below(pool - i)]);
  idx.resize(n);
  return idx;
}

Matrix positions(const std::vector<Vec3>& world, const std::vector<std::uint32_t>& idx) {
  Matrix m(idx.size(), 3);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int a = 0; a < 3; ++a) m(i, a) = world[idx[i]][a];
  return m;
}

Matrix displacement(const std::vector<Vec3>& now, const std::vector<Vec3>& before,
                    const std::vector<std::uint32_t>& idx) {
  Matrix m(idx.size(), 3);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int a = 0; a < 3; ++a) m(i, a) = now[idx[i]][a] - before[idx[i]][a];
  return m;
}

/// Masks the floor(f * N) points lying furthest along a random direction.
std::vector<std::uint8_t> occlusion_mask(const Matrix& coords, double fraction, Rng& rng) {
  const std::size_t n = coords.rows;
  const auto hidden = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  std::vector<std::uint8_t> mask(n, 1);
  if (hidden == 0) return mask;
  const Vec3 u = unit_vector(rng);
  std::vector<std::pair<double, std::uint32_t>> proj(n);
  for (std::size_t i = 0; i < n; ++i)
    proj[i] = {-(coords(i, 0) * u[0] + coords(i, 1) * u[1] + coords(i, 2) * u[2]), static_cast<std::uint32_t>(i)};
  std::sort(proj.begin(), proj.end());
  for (std::size_t i = 0; i < hidden; ++i) mask[proj[i].second] = 0;
  return mask;
}

}  // namespace

CloudSequence generate_scene(const SceneSpec& spec) {
  spec.validate();
  const std::size_t steps = spec.frames + spec.future;
  const auto world = transport(spec, steps);
  const std::size_t pool = world[0].size();
  Rng rng(derive_seed(spec.seed, "sampling"));
  Rng occ(derive_seed(spec.seed, "occlusion"));

  CloudSequence seq;
  std::vector<std::uint32_t> idx = choose(pool, spec.points, rng);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    if (t > 0 && spec.resample) idx = choose(pool, spec.points, rng);
    Matrix coords = positions(world[t], idx);
    auto mask = occlusion_mask(coords, spec.occlusion, occ);
    seq.frames.emplace_back(std::move(coords), std::nullopt, std::move(mask));
    if (t > 0) seq.gt_flows.push_back(displacement(world[t], world[t - 1], idx));
  }
  for (std::size_t k = 0; k < spec.future; ++k) {
    const std::size_t s = spec.frames + k;
    Matrix coords = positions(world[s], idx);
    auto mask = occlusion_mask(coords, spec.occlusion, occ);
    seq.future_frames.emplace_back(std::move(coords), std::nullopt, std::move(mask));
    seq.future_flows.push_back(displacement(world[s], world[s - 1], idx));
  }
  return seq;
}

void write_sequence(const CloudSequence& seq, const std::filesystem::path& path) {
  seq.validate();
  std::uint32_t d = 0;
  bool feats = false, masks = false;
  auto scan = [&](const PointCloudFrame& f) {
    if (f.feats()) {
      if (feats && f.feats()->cols != d) throw DataError("frames disagree on feature width");
      feats = true;
      d = static_cast<std::uint32_t>(f.feats()->cols);
    }
    for (auto m : f.valid_mask())
      if (m != 1) masks = true;
  };
  for (const auto& f : seq.frames) scan(f);
  for (const auto& f : seq.future_frames) scan(f);
  if (feats) {
    for (const auto& f : seq.frames)
      if (!f.feats()) throw DataError("either every frame or none carries features");
    for (const auto& f : seq.future_frames)
      if (!f.feats()) throw DataError("either every frame or none carries features");
  }
  const std::uint32_t flags = (feats ? kHasFeats : 0) | (seq.has_flows() ? kHasFlows : 0) |
                              (masks ? kHasMasks : 0) | (seq.future_flows.empty() ? 0 : kHasFutureFlows);
  ByteWriter w;
  w.bytes(kSequenceMagic);
  w.u32(static_cast<std::uint32_t>(seq.frames.size()));
  w.u32(static_cast<std::uint32_t>(seq.future_frames.size()));
  w.u32(d);
  w.u32(flags);
  for (const auto& f : seq.frames) w.u32(static_cast<std::uint32_t>(f.size()));
  for (const auto& f : seq.future_frames) w.u32(static_cast<std::uint32_t>(f.size()));
  auto frame = [&](const PointCloudFrame& f, const Matrix* flow) {
    w.f64s(f.coords().data);
    if (feats) w.f64s(f.feats()->data);
    if (masks)
      for (auto m : f.valid_mask()) w.u8(m);
    if (flow) w.f64s(flow->data);
  };
  for (std::size_t t = 0; t < seq.frames.size(); ++t)
    frame(seq.frames[t], t > 0 && seq.has_flows() ? &seq.gt_flows[t - 1] : nullptr);
  for (std::size_t k = 0; k < seq.future_frames.size(); ++k)
    frame(seq.future_frames[k], seq.future_flows.empty() ? nullptr : &seq.future_flows[k]);
  w.finish();
  w.save(path);
}

CloudSequence read_sequence(const std::filesystem::path& path) {
  ByteReader r = ByteReader::load(path);
  r.expect_magic(kSequenceMagic);
  const std::uint32_t T = r.u32();
  const std::uint32_t K = r.u32();
  const std::uint32_t d = r.u32();
  const std::uint32_t flags = r.u32();
  if (T < 2) throw FormatError(FormatErrorKind::kMalformed, "header declares fewer than two frames");
  if (flags & ~(kHasFeats | kHasFlows | kHasMasks | kHasFutureFlows))
    throw FormatError(FormatErrorKind::kMalformed, "header has unknown flag bits");
  if (((flags & kHasFeats) != 0) != (d > 0))
    throw FormatError(FormatErrorKind::kMalformed, "feature width disagrees with the feature flag");
  if (static_cast<std::uint64_t>(T) + K > r.remaining() / 4)
    throw FormatError(FormatErrorKind::kMalformed, "header frame counts exceed the file size");
  std::vector<std::uint32_t> sizes(T + K);
  for (auto& n : sizes) {
    n = r.u32();
    if (n == 0) throw FormatError(FormatErrorKind::kMalformed, "header declares an empty frame");
  }
  auto matrix = [&](std::size_t rows, std::size_t cols) {
    if (rows * cols > r.remaining() / 8)
      throw FormatError(FormatErrorKind::kTruncated, "frame block runs past the end of the file");
    Matrix m(rows, cols);
    r.f64s(m.data);
    return m;
  };
  CloudSequence seq;
  auto frame = [&](std::size_t n, bool with_flow, std::vector<PointCloudFrame>& out,
                   std::vector<Matrix>& flows) {
    Matrix coords = matrix(n, 3);
    std::optional<Matrix> feats;
    if (flags & kHasFeats) feats = matrix(n, d);
    std::vector<std::uint8_t> mask;
    if (flags & kHasMasks) {
      mask.resize(n);
      for (auto& m : mask) {
        m = r.u8();
        if (m > 1) throw FormatError(FormatErrorKind::kMalformed, "mask byte is neither 0 nor 1");
      }
    }
    try {
      out.emplace_back(std::move(coords), std::move(feats), std::move(mask));
    } catch (const GeometryError& e) {
      throw FormatError(FormatErrorKind::kMalformed, std::string("invalid frame: ") + e.what());
    }
    if (with_flow) flows.push_back(matrix(n, 3));
  };
  for (std::uint32_t t = 0; t < T; ++t) frame(sizes[t], t > 0 && (flags & kHasFlows), seq.frames, seq.gt_flows);
  for (std::uint32_t k = 0; k < K; ++k)
    frame(sizes[T + k], (flags & kHasFutureFlows) != 0, seq.future_frames, seq.future_flows);
  r.expect_end();
  return seq;
}

void GeneratorConfig::validate() const {
  if (frames < 2) throw DataError("generator needs at least two frames");
  if (points == 0) throw DataError("generator needs a positive point count");
  if (min_objects == 0 || min_objects > max_objects) throw DataError("object count range is invalid");
  if (!(max_translation >= 0.0) || !(max_rotation_deg >= 0.0)) throw DataError("motion limits must be >= 0");
  if (!(occlusion >= 0.0 && occlusion < 1.0)) throw DataError("occlusion fraction must be in [0, 1)");
}

SceneSpec random_scene(const GeneratorConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(derive_seed(seed, "scene"));
  SceneSpec s;
  s.frames = c.frames;
  s.future = c.future;
  s.points = c.points;
  s.occlusion = c.occlusion;
  s.resample = c.resample;
  s.seed = seed;
  const std::size_t count = c.min_objects + rng.below(c.max_objects - c.min_objects + 1);
  const std::size_t per_object = (2 * c.points + count - 1) / count;
  const double max_rot = c.max_rotation_deg * std::numbers::pi / 180.0;
  for (std::size_t i = 0; i < count; ++i) {
    ObjectSpec o;
    o.shape = static_cast<ShapeKind>(rng.below(3));
    o.surface_points = per_object;
    o.extent = {rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6)};
    o.position = {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-0.5, 0.5)};
    const Vec3 axis = unit_vector(rng);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    o.orientation = {axis[0] * angle, axis[1] * angle, axis[2] * angle};
    const Vec3 step_axis = unit_vector(rng);
    const double step_angle = rng.uniform(0.0, max_rot);
    o.rotation_per_step = {step_axis[0] * step_angle, step_axis[1] * step_angle, step_axis[2] * step_angle};
    const Vec3 dir = unit_vector(rng);
    const double speed = rng.uniform(0.0, c.max_translation);
    o.translation_per_step = {dir[0] * speed, dir[1] * speed, dir[2] * speed};
    s.objects.push_back(o);
  }
  return s;
}

const std::vector<Preset>& presets() {
  static const std::vector<Preset> kPresets = [] {
    std::vector<Preset> p;
    GeneratorConfig toy;
    toy.max_objects = 2;
    toy.max_rotation_deg = 5.0;
    p.push_back({"toy", toy, 8, 2, 2});
    p.push_back({"default", GeneratorConfig{}, 48, 8, 8});
    GeneratorConfig occluded;
    occluded.occlusion = 0.1;
    p.push_back({"occluded", occluded, 48, 8, 8});
    return p;
  }();
  return kPresets;
}

const Preset& find_preset(const std::string& name) {
  for (const auto& p : presets())
    if (p.name == name) return p;
  std::string names;
  for (const auto& p : presets()) names += (names.empty() ? "" : ", ") + p.name;
  throw DataError("unknown preset '" + name + "' (available: " + names + ")");
}

std::vector<ManifestEntry> make_split(const std::vector<std::pair<std::string, std::uint64_t>>& items,
                                      SplitCounts counts, std::uint64_t seed) {
  const std::size_t wanted = counts.train + counts.val + counts.test;
  if (wanted > items.size())
    throw DataError("split counts " + std::to_string(counts.train) + "/" + std::to_string(counts.val) + "/" +
                    std::to_string(counts.test) + " overlap: only " + std::to_string(items.size()) +
                    " items available");
  Rng rng(derive_seed(seed, "split"));
  const auto order = choose(items.size(), items.size(), rng);
  std::vector<ManifestEntry> out;
  for (std::size_t i = 0; i < wanted; ++i) {
    const auto& [path, hash] = items[order[i]];
    const char* split = i < counts.train ? "train" : i < counts.train + counts.val ? "val" : "test";
    out.push_back({path, hash, split});
  }
  return out;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["path"] = e.path;
    j["spec_hash"] = e.spec_hash;
    j["split"] = e.split;
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("write failed for manifest " + path.string());
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("path").get<std::string>(), j.at("spec_hash").get<std::uint64_t>(),
                     j.at("split").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed manifest line: " + e.what());
    }
  }
  return out;
}

}  // namespace spcm
