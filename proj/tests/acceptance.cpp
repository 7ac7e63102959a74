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

// Acceptance gate. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails. Arguments select a subset, e.g.
// `spcm_acceptance 1 3 8`.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "spcm/costvol.hpp"
#include "spcm/metrics.hpp"
#include "spcm/net.hpp"
#include "spcm/objectives.hpp"
#include "spcm/rcv.hpp"
#include "spcm/train.hpp"
#include "test_util.hpp"

namespace spcm {
namespace {

using testing::permute_rows;
using testing::random_cloud;
using testing::random_permutation;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Collects failed checks of one criterion.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (!ok && failures_.size() < 8) failures_.push_back(what);
    failed_ += !ok;
  }
  bool ok() const { return failed_ == 0; }
  std::string summary() const {
    std::ostringstream s;
    s << total_ - failed_ << "/" << total_ << " checks";
    for (const auto& f : failures_) s << "; " << f;
    return s.str();
  }

 private:
  std::size_t total_ = 0, failed_ = 0;
  std::vector<std::string> failures_;
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c, d);
  return buf;
}

NeighborhoodSpec knn(std::size_t k) {
  NeighborhoodSpec s;
  s.k = k;
  return s;
}

void jitter(ParamStore& p, std::uint64_t seed, double scale) {
  const Matrix j = random_cloud(1, seed, -scale, scale, p.size());
  for (std::size_t i = 0; i < p.size(); ++i) p.values()[i] += j.data[i];
}

// Parameters followed by the flattened inputs; `build` returns a scalar.
using Builder = std::function<Var(Tape&, ParamBinding&, const std::vector<Var>&)>;

void gradient_check(Check& check, const std::string& name, const ParamStore& p, const std::vector<Matrix>& inputs,
                    const Builder& build, std::size_t stride = 1) {
  std::vector<double> x = p.values();
  for (const auto& m : inputs) x.insert(x.end(), m.data.begin(), m.data.end());
  auto run = [&](const std::vector<double>& v, std::vector<double>* grad) {
    ParamStore q = p;
    std::copy(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(q.size()), q.values().begin());
    Tape tape;
    ParamBinding bound(tape, q);
    std::vector<Var> vars;
    std::size_t off = q.size();
    for (const auto& m : inputs) {
      const auto first = v.begin() + static_cast<std::ptrdiff_t>(off);
      vars.push_back(tape.variable(Tensor(m.rows, m.cols, std::vector<double>(first, first + m.data.size()))));
      off += m.data.size();
    }
    const Var out = build(tape, bound, vars);
    if (grad) {
      tape.backward(out);
      *grad = q.size() ? bound.gradient() : std::vector<double>{};
      for (Var in : vars) {
        const auto& g = tape.grad(in.id).values;
        grad->insert(grad->end(), g.begin(), g.end());
      }
    }
    return out.value().item();
  };
  std::vector<double> analytic;
  run(x, &analytic);
  const auto r = testing::finite_difference_check([&](const auto& v) { return run(v, nullptr); }, x, analytic,
                                                  1e-5, 1e-4, 1e-7, stride);
  check.expect(r.ok, name + fmt(" worst rel %.3g at %g", r.worst_rel, double(r.worst)));
}

Var weighted_sum(Tape& tape, Var v, std::uint64_t seed) {
  const Tensor w = Tensor::from_matrix(random_cloud(v.value().rows(), seed, -1, 1, v.value().cols()));
  return sum(mul(v, tape.constant(w)));
}

Outcome gradients() {
  const auto t0 = Clock::now();
  Check check;

  // Matching cost and cost volume.
  const CostVolumeSpec cv = make_cost_volume_spec("cv", 2, 1, 3, 5, 4, knn(3), knn(3));
  ParamStore cvp;
  cv.declare(cvp);
  init_cost_volume(cv, cvp, 8);
  jitter(cvp, 9, 0.1);
  gradient_check(check, "matching cost", cvp,
                 {random_cloud(6, 1), random_cloud(6, 2, -1, 1, 2), random_cloud(6, 3), random_cloud(6, 4, -1, 1, 1)},
                 [&](Tape& tape, ParamBinding& b, const auto& v) {
                   return weighted_sum(tape, matching_cost(cv, b, v[0], v[1], v[2], v[3]), 5);
                 });
  const Matrix cur = random_cloud(8, 31), prev = random_cloud(8, 33);
  const auto geometry = cost_volume_geometry(cv.within, cv.across, cur, prev);
  gradient_check(check, "cost volume", cvp,
                 {cur, random_cloud(8, 32, -1, 1, 1), prev, random_cloud(8, 34, -1, 1, 2)},
                 [&](Tape& tape, ParamBinding& b, const auto& v) {
                   return weighted_sum(tape, cost_volume(cv, b, geometry, v[0], v[1], v[2], v[3]), 35);
                 });

  // One RCV step and a two-step rollout.
  const RcvSpec rcv = make_rcv_spec("rcv", 3, 4, 6, 4, knn(3), knn(3));
  ParamStore rp;
  rcv.declare(rp);
  init_rcv(rcv, rp, 50);
  jitter(rp, 51, 0.1);
  const std::vector<Matrix> coords{random_cloud(10, 52), random_cloud(9, 53), random_cloud(11, 54)};
  const std::vector<Matrix> feats{random_cloud(9, 55, -1, 1, 3), random_cloud(11, 56, -1, 1, 3)};
  RcvState s0 = rcv_init(coords[0], 4);
  s0.hidden = random_cloud(10, 57, -1, 1, 4);
  s0.cell = random_cloud(10, 58, -1, 1, 4);
  for (std::size_t steps : {1u, 2u}) {
    gradient_check(check, steps == 1 ? "rcv step" : "two-step rollout", rp,
                   std::vector<Matrix>(feats.begin(), feats.begin() + static_cast<std::ptrdiff_t>(steps)),
                   [&](Tape& tape, ParamBinding& b, const auto& v) {
                     RcvStateVar s = bind_state(tape, s0);
                     Var out;
                     for (std::size_t t = 1; t <= steps; ++t) {
                       const auto g = cost_volume_geometry(rcv.cv_input.within, rcv.cv_input.across, coords[t],
                                                           s.anchor_coords.value().to_matrix());
                       const auto r = rcv_step(rcv, b, s, tape.constant(Tensor::from_matrix(coords[t])), v[t - 1], g);
                       s = r.state;
                       out = r.output;
                     }
                     return add(weighted_sum(tape, out, 59), weighted_sum(tape, s.cell, 60));
                   });
  }

  // Two-level flow estimation with its loss.
  ArchConfig a = default_arch(2);
  a.conv_k = 4;
  a.neighborhoods.assign(2, knn(4));
  a.hidden = 4;
  a.cost_hidden = 4;
  a.weight_hidden = 3;
  a.feature_dims = {6, 4};
  a.refine_width = 4;
  a.head_width = 4;
  const Model model(a);
  ParamStore mp = model.init_params(7);
  jitter(mp, 8, 0.05);
  const CloudSequence seq = testing::small_sequence(16, 3, 0, 9);
  const SequenceGeometry sg = sequence_geometry(a, seq);
  const std::vector<double> level_alpha{0.3, 1.0};
  gradient_check(check, "estimate_flows", mp, {}, [&](Tape&, ParamBinding& b, const auto&) {
    return ssfe_loss(estimate_flows(model, b, seq, sg), seq, sg, level_alpha);
  });

  // Every loss with respect to its predictions.
  const std::vector<double> alpha{0.5, 1.5};
  const LevelMasks masks{{{1, 0, 1, 1}, {1, 1, 1, 0, 1, 1, 1, 1, 1}}};
  const std::vector<std::vector<Matrix>> gt{{random_cloud(4, 20), random_cloud(9, 21)}};
  const std::vector<std::vector<Matrix>> future{{random_cloud(5, 28), random_cloud(12, 29)}};
  const ParamStore none;
  gradient_check(check, "ssfe loss", none, {random_cloud(4, 22), random_cloud(9, 23)},
                 [&](Tape&, ParamBinding&, const auto& v) { return ssfe_loss({{v[0], v[1]}}, gt, masks, alpha); });
  gradient_check(check, "spf loss", none, {random_cloud(4, 24), random_cloud(9, 25)}, [&](Tape&, ParamBinding&, const auto& v) {
    return spf_supervised_loss({{v[0], v[1]}}, gt, masks, alpha);
  });
  gradient_check(check, "chamfer", none, {random_cloud(7, 26), random_cloud(5, 27)},
                 [](Tape&, ParamBinding&, const auto& v) { return chamfer(v[0], v[1]); });
  gradient_check(check, "self-supervised spf loss", none, {random_cloud(4, 30), random_cloud(10, 31)},
                 [&](Tape&, ParamBinding&, const auto& v) { return spf_selfsup_loss({{v[0], v[1]}}, future, alpha); });

  const double secs = seconds_since(t0);
  check.expect(secs < 120.0, fmt("took %.1f s", secs));
  return {check.ok(), check.summary() + fmt(", %.1f s", secs)};
}

CloudSequence permute_sequence(const CloudSequence& seq, std::uint64_t seed) {
  CloudSequence out = seq;
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    const auto perm = random_permutation(seq.frames[t].size(), seed + t);
    out.frames[t] = PointCloudFrame(permute_rows(seq.frames[t].coords(), perm));
    if (t > 0) out.gt_flows[t - 1] = permute_rows(seq.gt_flows[t - 1], perm);
  }
  out.future_frames.clear();
  out.future_flows.clear();
  return out;
}

Outcome equivariance() {
  Check check;
  constexpr std::size_t n = 64;
  constexpr std::uint64_t perms = 50;

  const RcvSpec rcv = make_rcv_spec("rcv", 3, 4, 6, 4, knn(8), knn(8));
  ParamStore rp;
  rcv.declare(rp);
  init_rcv(rcv, rp, 1);
  jitter(rp, 2, 0.1);
  RcvState s0 = rcv_init(random_cloud(n, 3), 4);
  s0.hidden = random_cloud(n, 4, -1, 1, 4);
  s0.cell = random_cloud(n, 5, -1, 1, 4);
  const PointCloudFrame frame(random_cloud(n, 6), random_cloud(n, 7, -1, 1, 3));
  const auto [state, out] = rcv_step(rcv, rp, s0, frame);

  const CostVolumeSpec cv = make_cost_volume_spec("cv", 4, 2, 6, 8, 4, knn(8), knn(8));
  ParamStore cp;
  cv.declare(cp);
  init_cost_volume(cv, cp, 8);
  jitter(cp, 9, 0.1);
  const PointCloudFrame cur(random_cloud(n, 10), random_cloud(n, 11, -1, 1, 2));
  const Matrix prev = random_cloud(n, 12), prev_feats = random_cloud(n, 13, -1, 1, 4);
  auto eval_cv = [&](const PointCloudFrame& c, const Matrix& p, const Matrix& pf) {
    Tape tape;
    ParamBinding bound(tape, cp);
    return cost_volume(cv, bound, c, p, pf).value().to_matrix();
  };
  const Matrix cv_base = eval_cv(cur, prev, prev_feats);

  const Model model(default_arch(3));
  const ParamStore mp = model.init_params(14);
  const CloudSequence seq = testing::small_sequence(n, 3, 0, 15);
  const FlowPyramid flows = estimate_flows(model, mp, seq);
  const Forecast fc = forecast(model, mp, seq, 2);

  for (std::uint64_t s = 0; s < perms; ++s) {
    const auto perm = random_permutation(n, 1000 + s);
    const PointCloudFrame pframe(permute_rows(frame.coords(), perm), permute_rows(*frame.feats(), perm));
    const auto [ps, po] = rcv_step(rcv, rp, s0, pframe);
    check.expect(po == permute_rows(out, perm) && ps.cell == permute_rows(state.cell, perm), "rcv_step");

    const auto other = random_permutation(n, 2000 + s);
    check.expect(eval_cv(PointCloudFrame(permute_rows(cur.coords(), perm), permute_rows(*cur.feats(), perm)),
                         permute_rows(prev, other), permute_rows(prev_feats, other)) == permute_rows(cv_base, perm),
                 "cost_volume");

    const std::uint64_t base = 10 * (s + 1) * 1000;
    const CloudSequence moved = permute_sequence(seq, base);
    const FlowPyramid pf = estimate_flows(model, mp, moved);
    for (std::size_t t = 0; t < 2; ++t)
      check.expect(pf.finest(t) == permute_rows(flows.finest(t), random_permutation(n, base + t + 1)),
                   "estimate_flows");
    const Forecast pfc = forecast(model, mp, moved, 2);
    const auto last = random_permutation(n, base + 2);
    for (std::size_t k = 0; k < 2; ++k)
      check.expect(pfc.frames[k] == permute_rows(fc.frames[k], last), "forecast");
  }
  return {check.ok(), check.summary()};
}

double chamfer_oracle(const Matrix& a, const Matrix& b) {
  auto one_way = [](const Matrix& x, const Matrix& y) {
    double total = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < y.rows; ++j) {
        const double d = testing::brute_distance(x, i, y, j);
        best = std::min(best, d * d);
      }
      total += best;
    }
    return total / static_cast<double>(x.rows);
  };
  return one_way(a, b) + one_way(b, a);
}

double emd_oracle(const Matrix& a, const Matrix& b) {
  std::vector<std::size_t> perm(a.rows);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i) {
      const double d = testing::brute_distance(a, i, b, perm[i]);
      s += d * d;
    }
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(a.rows);
}

Matrix row_matrix(std::vector<double> v) {
  const std::size_t rows = v.size() / 3;
  return testing::make_matrix(rows, 3, std::move(v));
}

Outcome metric_oracles() {
  Check check;
  for (std::size_t n : {1u, 7u, 32u, 128u})
    for (std::size_t m : {1u, 19u, 64u, 128u}) {
      const Matrix a = random_cloud(n, 100 + n), b = random_cloud(m, 300 + m, -1.5, 0.5);
      check.expect(std::abs(chamfer_distance(a, b) - chamfer_oracle(a, b)) <= 1e-12, fmt("chamfer %g x %g", n, m));
    }
  for (std::size_t n = 1; n <= 7; ++n)
    for (std::uint64_t s = 0; s < 4; ++s) {
      const Matrix a = random_cloud(n, 500 + 10 * n + s), b = random_cloud(n, 600 + 10 * n + s);
      check.expect(std::abs(emd(a, b) - emd_oracle(a, b)) <= 1e-9, fmt("emd n=%g", n));
    }

  // Hand-computed flow statistics.
  const FlowStats large = flow_stats(row_matrix({1.2, 0, 0}), row_matrix({1.0, 0, 0}));
  check.expect(std::abs(large.epe3d - 0.2) <= 1e-15 && large.acc3ds == 0 && large.acc3dr == 0 &&
                   large.outliers3d == 1 && large.rect_outliers3d == 1,
               "flow_stats large error");
  const FlowStats small = flow_stats(row_matrix({0, 0.25, 0}), row_matrix({0, 0.05, 0}));
  check.expect(small.outliers3d == 1 && small.rect_outliers3d == 0, "flow_stats rectification");
  const FlowStats rel = flow_stats(row_matrix({2.08, 0, 0}), row_matrix({2.0, 0, 0}));
  check.expect(rel.acc3ds == 1 && rel.acc3dr == 1 && rel.outliers3d == 0, "flow_stats relative accept");
  const Matrix gt = row_matrix({1, 0, 0, 0, 1, 0});
  const std::vector<Matrix> preds{row_matrix({1, 0, 0, 0, 5, 0}), gt}, gts{gt, gt};
  const FlowStats pooled = flow_stats(preds, gts, std::vector<std::vector<std::uint8_t>>(2));
  check.expect(std::abs(pooled.epe3d - 1.0) <= 1e-15 && pooled.acc3ds == 0.75 && pooled.valid_count == 4,
               "flow_stats pooling");
  return {check.ok(), check.summary()};
}

Outcome sinkhorn_properties() {
  Check check;
  Matrix a(8, 3);
  for (std::size_t i = 0; i < 8; ++i) a(i, 0) = double(i);
  const SinkhornResult id = sinkhorn(a, a);
  bool identity = true;
  for (std::size_t i = 0; i < 8; ++i) identity &= id.match[i] == i;
  check.expect(identity && id.distance <= 1e-12, fmt("identity, SD %.3g", id.distance));

  for (std::uint64_t s = 0; s < 5; ++s) {
    const Matrix x = random_cloud(12 + s, 10 + s), y = random_cloud(15 - s, 20 + s);
    std::vector<SinkhornPass> trace;
    sinkhorn(x, y, {}, &trace);
    double worst = 0.0;
    for (const auto& pass : trace) {
      const Matrix& p = pass.probs;
      const std::size_t outer = pass.rows ? x.rows : y.rows;
      for (std::size_t i = 0; i < outer; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < (pass.rows ? p.cols : p.rows); ++j) total += pass.rows ? p(i, j) : p(j, i);
        worst = std::max(worst, std::abs(total - 1.0));
      }
    }
    check.expect(trace.size() == 10 && worst <= 1e-9, fmt("normalization off by %.3g", worst));
  }

  Matrix b(6, 3);
  for (std::size_t i = 0; i < 6; ++i) b(i, 1) = 0.5 * double(i);
  Matrix o = b;
  o.data.insert(o.data.end(), {100.0, 100.0, 100.0});
  o.rows = 7;
  const SinkhornResult out = sinkhorn(o, b);
  check.expect(out.match[6] == kSlack && out.valid_count == 6, "outlier to slack");
  return {check.ok(), check.summary()};
}

std::vector<char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome generator_invariants() {
  Check check;
  double worst_flow = 0.0, worst_rigid = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    GeneratorConfig g = find_preset("toy").generator;
    g.resample = false;
    g.points = 64;
    const CloudSequence seq = generate_scene(random_scene(g, s));
    auto chain = [&](const Matrix& cur, const Matrix& flow, const Matrix& prev) {
      for (std::size_t i = 0; i < cur.data.size(); ++i)
        worst_flow = std::max(worst_flow, std::abs(cur.data[i] - flow.data[i] - prev.data[i]));
    };
    for (std::size_t t = 1; t < seq.frames.size(); ++t)
      chain(seq.frames[t].coords(), seq.gt_flows[t - 1], seq.frames[t - 1].coords());
    for (std::size_t k = 0; k < seq.future_frames.size(); ++k)
      chain(seq.future_frames[k].coords(), seq.future_flows[k],
            k == 0 ? seq.frames.back().coords() : seq.future_frames[k - 1].coords());

    // Points of one object keep their pairwise distances.
    const SceneSpec spec = random_scene(g, s);
    SceneSpec single = spec;
    single.objects.resize(1);
    const CloudSequence rigid = generate_scene(single);
    const Matrix& first = rigid.frames.front().coords();
    for (std::size_t t = 1; t < rigid.frames.size(); ++t) {
      const Matrix& m = rigid.frames[t].coords();
      for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = i + 1; j < m.rows; ++j)
          worst_rigid = std::max(worst_rigid, std::abs(testing::brute_distance(m, i, m, j) -
                                                       testing::brute_distance(first, i, first, j)));
    }

    const auto dir = testing::temp_dir("acceptance_roundtrip");
    write_sequence(seq, dir / "a.spcm");
    const CloudSequence back = read_sequence(dir / "a.spcm");
    write_sequence(back, dir / "b.spcm");
    check.expect(back == seq && file_bytes(dir / "a.spcm") == file_bytes(dir / "b.spcm"), "round trip");
  }
  check.expect(worst_flow <= 1e-12, fmt("flows off by %.3g", worst_flow));
  check.expect(worst_rigid <= 1e-12, fmt("distances off by %.3g", worst_rigid));
  return {check.ok(), check.summary() + fmt(", flow err %.2g, rigid err %.2g", worst_flow, worst_rigid)};
}

// Shared toy setup for the training criteria.
struct Toy {
  ArchConfig arch = default_arch(3);
  Model model{arch};
  Dataset train;
  Dataset val;
  static constexpr std::size_t kSeeds = 5;
  static constexpr std::size_t kSteps = 400;
  static constexpr std::size_t kForecastSteps = 200;  // both forecasting runs
  std::vector<ParamStore> pretrained;  // SSFE weights of every seed
  std::vector<double> pretrain_seconds;

  Toy() : train(arch, make(12, 1000)), val(arch, make(4, 2000)) {}

  static std::vector<CloudSequence> make(std::size_t count, std::uint64_t first) {
    std::vector<CloudSequence> out;
    const GeneratorConfig& g = find_preset("toy").generator;
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(random_scene(g, first + i)));
    return out;
  }

  TrainOptions options(std::uint64_t seed, LossMode mode) const {
    TrainOptions o;
    o.seed = seed;
    o.loss.mode = mode;
    o.epochs = 1000;
    o.max_steps = kSteps;
    o.optim.lr = 2e-3;
    o.optim.milestones = {300};
    o.augment.enabled = true;
    return o;
  }
};

Outcome training(Toy& toy) {
  const auto t0 = Clock::now();
  std::size_t halved = 0, memory_helps = 0;
  for (std::uint64_t seed = 0; seed < Toy::kSeeds; ++seed) {
    const auto ts = Clock::now();
    const ParamStore init = toy.model.init_params(seed);
    double trained[2], untrained[2];
    for (int reset = 0; reset < 2; ++reset) {
      const RolloutOptions ro{reset == 1};
      TrainOptions o = toy.options(seed, LossMode::kSupervisedSsfe);
      o.reset_state = reset == 1;
      untrained[reset] = evaluate_flows(toy.model, init, toy.val, ro).epe3d;
      const TrainResult r = train(toy.model, init, toy.train, nullptr, o);
      trained[reset] = evaluate_flows(toy.model, r.last, toy.val, ro).epe3d;
      if (reset == 0) {
        toy.pretrained.push_back(r.last);
        toy.pretrain_seconds.push_back(seconds_since(ts));
      }
    }
    const double ratio = trained[0] / untrained[0];
    halved += ratio <= 0.5;
    memory_helps += trained[0] <= trained[1];
    std::cerr << "  seed " << seed << fmt(": trained EPE %.4f untrained %.4f ratio %.3f no-memory %.4f", trained[0],
                                          untrained[0], ratio, trained[1])
              << fmt(" (%.0f s)", seconds_since(t0)) << std::endl;
  }
  // Zero flow as a fixed reference point.
  std::vector<Matrix> pred, gt;
  for (std::size_t i = 0; i < toy.val.size(); ++i)
    for (const Matrix& f : toy.val.sequence(i).gt_flows) {
      gt.push_back(f);
      pred.push_back(Matrix(f.rows, 3));
    }
  const double zero_epe = flow_stats(pred, gt, std::vector<std::vector<std::uint8_t>>(gt.size())).epe3d;
  const double secs = seconds_since(t0);
  const bool pass = halved >= 3 && memory_helps >= 3 && secs < 900.0;
  std::string detail = fmt("EPE halved in %g/5 seeds, recurrent <= no-memory in %g/5 seeds, zero-flow EPE %.4f, %.0f s",
                           double(halved), double(memory_helps), zero_epe, secs);
  return {pass, detail};
}

Outcome transfer(Toy& toy) {
  const auto t0 = Clock::now();
  if (toy.pretrained.size() < Toy::kSeeds) {
    for (std::uint64_t seed = toy.pretrained.size(); seed < Toy::kSeeds; ++seed) {
      const auto ts = Clock::now();
      toy.pretrained.push_back(train(toy.model, toy.model.init_params(seed), toy.train, nullptr,
                                     toy.options(seed, LossMode::kSupervisedSsfe))
                                   .last);
      toy.pretrain_seconds.push_back(seconds_since(ts));
    }
  }
  double pretrain = 0.0;
  for (double s : toy.pretrain_seconds) pretrain += s;
  std::size_t wins = 0;
  for (std::uint64_t seed = 0; seed < Toy::kSeeds; ++seed) {
    TrainOptions o = toy.options(seed, LossMode::kSupervisedSpf);
    o.max_steps = Toy::kForecastSteps;
    o.optim.milestones = {Toy::kForecastSteps * 3 / 4};
    const ParamStore tuned = train(toy.model, toy.pretrained[seed], toy.train, nullptr, o).last;
    const ParamStore scratch = train(toy.model, toy.model.init_params(seed), toy.train, nullptr, o).last;
    const double a = evaluate_forecast(toy.model, tuned, toy.val, 0).ade;
    const double b = evaluate_forecast(toy.model, scratch, toy.val, 0).ade;
    wins += a <= b;
    std::cerr << "  seed " << seed << fmt(": pretrained ADE %.4f scratch ADE %.4f (%.0f s)", a, b, seconds_since(t0))
              << std::endl;
  }
  const double secs = seconds_since(t0) + pretrain;
  return {wins >= 3 && secs < 1800.0,
          fmt("pretrained <= scratch in %g/5 seeds, %.0f s including %.0f s of pretraining", double(wins), secs, pretrain)};
}

Outcome degenerate_cases() {
  Check check;
  const Model model(default_arch(3));
  ParamStore p = model.init_params(11);
  for (const auto& name : model.head_slices())
    for (double& v : p.values(name)) v = 0.0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const CloudSequence seq = testing::small_sequence(64, 4, 3, 12 + s);
    const Forecast f = forecast(model, p, seq, 3);
    for (const Matrix& m : f.frames) check.expect(m == seq.frames.back().coords(), "zero head moved points");
  }

  const CloudSequence seq = testing::small_sequence(64, 3, 3, 20);
  const FlowStats fs = flow_stats(seq.gt_flows, seq.gt_flows, std::vector<std::vector<std::uint8_t>>(2));
  check.expect(fs.epe3d == 0 && fs.acc3ds == 1 && fs.acc3dr == 1 && fs.outliers3d == 0 && fs.rect_outliers3d == 0,
               "flow_stats of exact flows");
  std::vector<Matrix> future;
  for (const auto& f : seq.future_frames) future.push_back(f.coords());
  const auto de = ade_fde(future, future, std::vector<std::vector<std::uint8_t>>(future.size()));
  check.expect(de.ade == 0 && de.fde == 0, "ade/fde of exact forecast");
  for (const Matrix& m : future) {
    check.expect(chamfer_distance(m, m) == 0, "chamfer of exact forecast");
    check.expect(emd(m, m) == 0, "emd of exact forecast");
    check.expect(sinkhorn_distance(m, m) == 0, "sinkhorn of exact forecast");
  }
  return {check.ok(), check.summary()};
}

}  // namespace
}  // namespace spcm

int main(int argc, char** argv) {
  using namespace spcm;
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  auto wanted = [&](int c) { return selected.empty() || selected.count(c) > 0; };

  std::optional<Toy> toy;
  auto get_toy = [&]() -> Toy& {
    if (!toy) toy.emplace();
    return *toy;
  };
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradients match finite differences", gradients},
      {"permutation equivariance is bit-identical", equivariance},
      {"metrics match brute-force oracles", metric_oracles},
      {"sinkhorn identity, normalization and slack", sinkhorn_properties},
      {"generator flows, rigidity and file round trip", generator_invariants},
      {"toy training halves EPE and memory helps", [&] { return training(get_toy()); }},
      {"flow pretraining helps forecasting", [&] { return transfer(get_toy()); }},
      {"degenerate predictions give exact metrics", degenerate_cases},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
