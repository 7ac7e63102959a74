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

#include "spcm/cli.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "spcm/container.hpp"
#include "spcm/data.hpp"
#include "spcm/metrics.hpp"
#include "spcm/objectives.hpp"
#include "spcm/random.hpp"

namespace spcm::cli {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw FormatError(FormatErrorKind::kIo, "failed writing " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw FormatError(FormatErrorKind::kIo, "cannot create output directory " + dir.string());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct Row {
  std::string name;
  std::vector<double> values;
};

std::vector<std::string> metric_names(LossMode mode) {
  if (mode == LossMode::kSupervisedSsfe) return {"EPE3D", "Acc3DS", "Acc3DR", "Outliers3D", "RectOutliers3D"};
  return {"ADE", "FDE", "CD", "EMD", "SD"};
}

std::vector<double> flow_values(const FlowStats& s) {
  return {s.epe3d, s.acc3ds, s.acc3dr, s.outliers3d, s.rect_outliers3d};
}

Matrix valid_rows(const Matrix& m, const std::vector<std::uint8_t>& mask) {
  std::size_t n = 0;
  for (std::size_t r = 0; r < m.rows; ++r) n += mask.empty() || mask[r];
  Matrix out(n, m.cols);
  std::size_t k = 0;
  for (std::size_t r = 0; r < m.rows; ++r) {
    if (!mask.empty() && !mask[r]) continue;
    std::copy(m.row(r).begin(), m.row(r).end(), out.row(k++).begin());
  }
  return out;
}

double mean_finite(const std::vector<double>& v) {
  double sum = 0.0;
  std::size_t n = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      sum += x;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

/// Per-sequence predictions of one evaluation.
struct FlowPrediction {
  std::vector<Matrix> pred, gt;
  std::vector<std::vector<std::uint8_t>> masks;
};

struct ForecastPrediction {
  std::vector<Matrix> pred, gt;
  std::vector<std::vector<std::uint8_t>> masks;
};

FlowPrediction predict_flows(const RunConfig& config, const std::optional<Model>& model, const ParamStore& params,
                             const CloudSequence& seq) {
  if (!seq.has_flows()) throw DataError("flow evaluation needs sequences with ground-truth flows");
  FlowPrediction p;
  std::vector<Matrix> predicted;
  if (config.eval.predictor == Predictor::kModel) {
    const SequenceGeometry geometry = sequence_geometry(model->arch(), seq);
    Tape tape;
    ParamBinding bound(tape, params);
    const auto flows = estimate_flows(*model, bound, seq, geometry, RolloutOptions{config.train.reset_state});
    for (const auto& f : flows.flows) predicted.push_back(f.back().value().to_matrix());
  }
  for (std::size_t t = 0; t < seq.gt_flows.size(); ++t) {
    const Matrix& gt = seq.gt_flows[t];
    switch (config.eval.predictor) {
      case Predictor::kModel: p.pred.push_back(predicted[t]); break;
      case Predictor::kOracle: p.pred.push_back(gt); break;
      case Predictor::kZero: p.pred.push_back(Matrix(gt.rows, 3)); break;
    }
    p.gt.push_back(gt);
    p.masks.push_back(seq.frames[t + 1].valid_mask());
  }
  return p;
}

ForecastPrediction predict_future(const RunConfig& config, const std::optional<Model>& model,
                                  const ParamStore& params, const CloudSequence& seq) {
  if (seq.future_frames.empty()) throw DataError("forecast evaluation needs sequences with future frames");
  TrainOptions o;
  o.horizon = config.eval.horizon;
  const std::size_t k = effective_horizon(o, seq);
  ForecastPrediction p;
  if (config.eval.predictor == Predictor::kModel) {
    const SequenceGeometry geometry = sequence_geometry(model->arch(), seq);
    Tape tape;
    ParamBinding bound(tape, params);
    const auto f = forecast(*model, bound, seq, geometry, k, RolloutOptions{config.train.reset_state});
    for (std::size_t s = 0; s < k; ++s) p.pred.push_back(f.frames[s].value().to_matrix());
  }
  for (std::size_t s = 0; s < k; ++s) {
    const PointCloudFrame& g = seq.future_frames[s];
    if (g.size() != seq.frames.back().size())
      throw DataError("future frames must correspond row by row with the last input frame");
    switch (config.eval.predictor) {
      case Predictor::kModel: break;
      case Predictor::kOracle: p.pred.push_back(g.coords()); break;
      case Predictor::kZero: p.pred.push_back(seq.frames.back().coords()); break;
    }
    p.gt.push_back(g.coords());
    p.masks.push_back(g.valid_mask());
  }
  return p;
}

struct ForecastScores {
  std::vector<double> cd, emd, sd;  // per step
  std::size_t degenerate = 0;
};

ForecastScores score_forecast(const ForecastPrediction& p) {
  ForecastScores s;
  for (std::size_t k = 0; k < p.pred.size(); ++k) {
    const Matrix a = valid_rows(p.pred[k], p.masks[k]);
    const Matrix b = valid_rows(p.gt[k], p.masks[k]);
    if (a.rows == 0) throw MetricError("forecast evaluation: a future frame has no valid points");
    s.cd.push_back(chamfer_distance(a, b));
    s.emd.push_back(emd(a, b));
    try {
      s.sd.push_back(sinkhorn_distance(a, b));
    } catch (const MetricError&) {
      s.sd.push_back(std::numeric_limits<double>::quiet_NaN());
      ++s.degenerate;
    }
  }
  return s;
}

void write_reports(const fs::path& out_dir, const ordered_json& report, const std::vector<std::string>& columns,
                   const std::vector<Row>& rows) {
  make_dir(out_dir);
  write_text(out_dir / "report.json", report.dump(2) + "\n");
  std::ostringstream csv;
  csv << "sequence";
  for (const auto& c : columns) csv << ',' << c;
  csv << '\n';
  for (const auto& r : rows) {
    csv << r.name;
    for (double v : r.values) csv << ',' << format_number(v);
    csv << '\n';
  }
  write_text(out_dir / "report.csv", csv.str());
}

ordered_json metrics_object(const std::vector<std::string>& names, const std::vector<double>& values) {
  ordered_json o = ordered_json::object();
  for (std::size_t i = 0; i < names.size(); ++i) o[names[i]] = values[i];
  return o;
}

}  // namespace

LoadedSplit load_split(const fs::path& manifest, const std::string& split) {
  if (!fs::exists(manifest)) throw DataError("manifest not found: " + manifest.string());
  const auto entries = read_manifest(manifest);
  LoadedSplit out;
  for (const auto& e : entries) {
    if (e.split != split) continue;
    out.names.push_back(e.path);
    out.sequences.push_back(read_sequence(manifest.parent_path() / e.path));
  }
  return out;
}

void generate(const RunConfig& config, const fs::path& out_dir, std::ostream& log) {
  const Preset* found = nullptr;
  try {
    found = &find_preset(config.preset);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  const Preset& preset = *found;
  make_dir(out_dir);
  const std::size_t total = preset.train + preset.val + preset.test;
  std::vector<std::pair<std::string, std::uint64_t>> items;
  for (std::size_t i = 0; i < total; ++i) {
    const SceneSpec spec = random_scene(preset.generator, derive_seed(config.train.seed, "seq" + std::to_string(i)));
    char name[32];
    std::snprintf(name, sizeof name, "seq_%04zu.spcm", i);
    write_sequence(generate_scene(spec), out_dir / name);
    items.emplace_back(name, spec_hash(spec));
  }
  const auto manifest = make_split(items, {preset.train, preset.val, preset.test}, config.train.seed);
  write_manifest(manifest, out_dir / "manifest.jsonl");
  log << "generated " << total << " sequences (preset " << preset.name << ") in " << out_dir.string() << "\n";
}

TrainResult train(const RunConfig& config, const fs::path& out_dir, std::ostream& log) {
  const Model model(config.arch);
  ParamStore init;
  if (!config.init_checkpoint.empty()) {
    const Checkpoint ck = read_checkpoint(config.init_checkpoint);
    if (arch_hash(ck.arch) != arch_hash(config.arch))
      throw ConfigError("init checkpoint " + config.init_checkpoint + " has architecture hash " +
                        hex64(arch_hash(ck.arch)) + ", config expects " + hex64(arch_hash(config.arch)));
    init = ck.params;
  } else {
    init = model.init_params(config.train.seed);
  }

  const fs::path manifest(config.manifest);
  LoadedSplit train_split = load_split(manifest, "train");
  LoadedSplit val_split = load_split(manifest, "val");
  if (train_split.sequences.empty() && config.train.epochs > 0)
    throw DataError("manifest " + manifest.string() + " has no training sequences");
  const Dataset train_data(config.arch, std::move(train_split.sequences));
  const Dataset val_data(config.arch, std::move(val_split.sequences));

  make_dir(out_dir);
  const std::uint64_t hash = config_hash(config);
  write_text(out_dir / "config.json", dump_config(config));

  std::ostringstream curve;
  curve << "epoch,step,lr,train_loss,val_loss\n";
  TrainResult result = spcm::train(model, std::move(init), train_data, val_data.size() ? &val_data : nullptr,
                                   config.train, [&](const CurveRow& r) {
                                     curve << r.epoch << ',' << r.step << ',' << format_number(r.lr) << ','
                                           << format_number(r.train_loss) << ','
                                           << (std::isnan(r.val_loss) ? "" : format_number(r.val_loss)) << '\n';
                                     log << "epoch " << r.epoch << " step " << r.step << " lr "
                                         << format_number(r.lr) << " train_loss " << format_number(r.train_loss);
                                     if (!std::isnan(r.val_loss)) log << " val_loss " << format_number(r.val_loss);
                                     log << "\n";
                                   });
  write_text(out_dir / "loss_curve.csv", curve.str());
  write_checkpoint(out_dir / "last.ckpt", {config.arch, result.last, hash, result.steps});
  write_checkpoint(out_dir / "best.ckpt", {config.arch, result.best, hash, result.best_step});
  log << "trained " << result.steps << " steps; checkpoints in " << out_dir.string() << "\n";
  return result;
}

void evaluate(const RunConfig& config, const fs::path& checkpoint, const fs::path& out_dir, std::ostream& log) {
  const LossMode mode = config.train.loss.mode;
  std::optional<Model> model;
  ParamStore params;
  std::string checkpoint_hash;
  if (config.eval.predictor == Predictor::kModel) {
    const Checkpoint ck = read_checkpoint(checkpoint);
    if (arch_hash(ck.arch) != arch_hash(config.arch))
      throw ConfigError("checkpoint " + checkpoint.string() + " has architecture hash " + hex64(arch_hash(ck.arch)) +
                        ", config expects " + hex64(arch_hash(config.arch)));
    model.emplace(ck.arch);
    params = ck.params;
    checkpoint_hash = hex64(file_hash(checkpoint));
  }

  const LoadedSplit split = load_split(fs::path(config.manifest), config.eval.split);
  const std::size_t n = split.sequences.size();
  if (n == 0) throw DataError("manifest " + config.manifest + " has no '" + config.eval.split + "' sequences");

  const auto names = metric_names(mode);
  std::vector<Row> rows(n);
  ordered_json sequences = ordered_json::array();
  ordered_json aggregate, curves;

  if (mode == LossMode::kSupervisedSsfe) {
    std::vector<FlowPrediction> preds(n);
    parallel_for(n, config.train.threads, [&](std::size_t i) {
      preds[i] = predict_flows(config, model, params, split.sequences[i]);
    });
    FlowPrediction all;
    std::vector<FlowPrediction> per_step;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = preds[i];
      rows[i] = {split.names[i], flow_values(flow_stats(p.pred, p.gt, p.masks))};
      for (std::size_t t = 0; t < p.pred.size(); ++t) {
        all.pred.push_back(p.pred[t]);
        all.gt.push_back(p.gt[t]);
        all.masks.push_back(p.masks[t]);
        if (per_step.size() <= t) per_step.resize(t + 1);
        per_step[t].pred.push_back(p.pred[t]);
        per_step[t].gt.push_back(p.gt[t]);
        per_step[t].masks.push_back(p.masks[t]);
      }
    }
    rows.push_back({"ALL", flow_values(flow_stats(all.pred, all.gt, all.masks))});
    ordered_json steps = ordered_json::array(), epe = ordered_json::array();
    for (std::size_t t = 0; t < per_step.size(); ++t) {
      steps.push_back(t + 1);
      epe.push_back(flow_stats(per_step[t].pred, per_step[t].gt, per_step[t].masks).epe3d);
    }
    curves = ordered_json{{"timestep", steps}, {"EPE3D", epe}};
  } else {
    std::vector<ForecastPrediction> preds(n);
    std::vector<ForecastScores> scores(n);
    parallel_for(n, config.train.threads, [&](std::size_t i) {
      preds[i] = predict_future(config, model, params, split.sequences[i]);
      scores[i] = score_forecast(preds[i]);
    });
    ForecastPrediction all;
    std::vector<double> cd_all, emd_all, sd_all;
    std::vector<std::vector<double>> step_cd;
    std::vector<ForecastPrediction> per_step;
    std::size_t degenerate = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = preds[i];
      const auto& s = scores[i];
      const DisplacementErrors d = ade_fde(p.pred, p.gt, p.masks);
      rows[i] = {split.names[i], {d.ade, d.fde, mean_finite(s.cd), mean_finite(s.emd), mean_finite(s.sd)}};
      degenerate += s.degenerate;
      for (std::size_t k = 0; k < p.pred.size(); ++k) {
        if (per_step.size() <= k) {
          per_step.resize(k + 1);
          step_cd.resize(k + 1);
        }
        per_step[k].pred.push_back(p.pred[k]);
        per_step[k].gt.push_back(p.gt[k]);
        per_step[k].masks.push_back(p.masks[k]);
        step_cd[k].push_back(s.cd[k]);
        cd_all.push_back(s.cd[k]);
        emd_all.push_back(s.emd[k]);
        sd_all.push_back(s.sd[k]);
      }
    }
    // ADE/FDE pool every valid point; FDE needs the sequences' final steps.
    double ade_sum = 0.0, fde_sum = 0.0;
    std::size_t ade_n = 0, fde_n = 0;
    ordered_json steps = ordered_json::array(), ade_curve = ordered_json::array(), cd_curve = ordered_json::array();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = preds[i];
      for (std::size_t k = 0; k < p.pred.size(); ++k)
        for (std::size_t r = 0; r < p.pred[k].rows; ++r) {
          if (!p.masks[k].empty() && !p.masks[k][r]) continue;
          const double e = distance(p.pred[k].row(r), p.gt[k].row(r));
          ade_sum += e;
          ++ade_n;
          if (k + 1 == p.pred.size()) {
            fde_sum += e;
            ++fde_n;
          }
        }
    }
    if (ade_n == 0 || fde_n == 0) throw MetricError("forecast evaluation: no valid points");
    rows.push_back({"ALL",
                    {ade_sum / static_cast<double>(ade_n), fde_sum / static_cast<double>(fde_n), mean_finite(cd_all),
                     mean_finite(emd_all), mean_finite(sd_all)}});
    for (std::size_t k = 0; k < per_step.size(); ++k) {
      steps.push_back(k + 1);
      ade_curve.push_back(ade_fde(per_step[k].pred, per_step[k].gt, per_step[k].masks).ade);
      cd_curve.push_back(mean_finite(step_cd[k]));
    }
    curves = ordered_json{{"step", steps}, {"ADE", ade_curve}, {"CD", cd_curve}};
    aggregate["degenerate_sinkhorn_frames"] = degenerate;
  }

  for (std::size_t i = 0; i < n; ++i)
    sequences.push_back(ordered_json{{"sequence", rows[i].name}, {"metrics", metrics_object(names, rows[i].values)}});
  ordered_json agg = metrics_object(names, rows.back().values);
  for (const auto& item : aggregate.items()) agg[item.key()] = item.value();

  const std::string predictor = config.eval.predictor == Predictor::kModel    ? "model"
                                : config.eval.predictor == Predictor::kOracle ? "oracle"
                                                                              : "zero";
  ordered_json report{{"schema_version", kReportSchemaVersion},
                      {"version", std::string(kVersion)},
                      {"task", task_name(mode)},
                      {"predictor", predictor},
                      {"split", config.eval.split},
                      {"config_hash", hex64(config_hash(config))},
                      {"checkpoint_hash", checkpoint_hash},
                      {"seed", config.train.seed},
                      {"sequences", sequences},
                      {"aggregate", agg},
                      {"curves", curves}};
  write_reports(out_dir, report, names, rows);
  log << "evaluated " << n << " sequences (" << config.eval.split << "):";
  for (std::size_t c = 0; c < names.size(); ++c) log << ' ' << names[c] << '=' << format_number(rows.back().values[c]);
  log << "\n";
}

int exit_code_for_current_exception(std::ostream& err) {
  try {
    throw;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const GeometryError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const MetricError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sequential point cloud flow estimation and forecasting"};
  app.require_subcommand(1);
  struct Flags {
    std::string config, out, checkpoint, preset;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    std::optional<bool> deterministic;
  } flags;
  auto add_flags = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "run configuration (JSON)");
    sub->add_option("--seed", flags.seed, "random seed");
    sub->add_option("--out", flags.out, "output directory");
    sub->add_option("--checkpoint", flags.checkpoint, "checkpoint to evaluate, or to initialize training from");
    sub->add_option("--preset", flags.preset, "dataset preset");
    sub->add_option("--threads", flags.threads, "worker threads (SPCM_THREADS overrides)");
    sub->add_option("--deterministic", flags.deterministic, "reduce gradients in a fixed order");
  };
  CLI::App* gen = app.add_subcommand("generate", "generate a synthetic dataset and manifest");
  CLI::App* tr = app.add_subcommand("train", "train a model");
  CLI::App* ev = app.add_subcommand("eval", "evaluate a model or a reference predictor");
  add_flags(gen);
  add_flags(tr);
  add_flags(ev);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    RunConfig config = flags.config.empty() ? RunConfig{} : load_config(flags.config);
    if (flags.seed) config.train.seed = *flags.seed;
    if (!flags.preset.empty()) config.preset = flags.preset;
    if (flags.threads) config.train.threads = *flags.threads;
    if (flags.deterministic) config.train.deterministic = *flags.deterministic;
    if (const char* env = std::getenv("SPCM_THREADS"); env && *env) {
      char* end = nullptr;
      const long long v = std::strtoll(env, &end, 10);
      if (*end != '\0' || v <= 0) throw ConfigError("SPCM_THREADS must be a positive integer, got '" + std::string(env) + "'");
      config.train.threads = static_cast<std::size_t>(v);
    }
    if (config.train.threads == 0) throw ConfigError("threads must be positive");

    if (gen->parsed()) {
      const fs::path out_dir = flags.out.empty() ? fs::path(config.manifest).parent_path() : fs::path(flags.out);
      generate(config, out_dir.empty() ? fs::path(".") : out_dir, out);
    } else if (tr->parsed()) {
      if (!flags.out.empty()) config.out = flags.out;
      if (!flags.checkpoint.empty()) config.init_checkpoint = flags.checkpoint;
      train(config, config.out, out);
    } else {
      const fs::path ckpt = flags.checkpoint.empty() ? fs::path(config.out) / "best.ckpt" : fs::path(flags.checkpoint);
      if (!flags.out.empty()) config.out = flags.out;
      evaluate(config, ckpt, config.out, out);
    }
  } catch (...) {
    return exit_code_for_current_exception(err);
  }
  return kOk;
}

}  // namespace spcm::cli
