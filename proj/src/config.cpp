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

#include "spcm/config.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include <json.hpp>

#include "spcm/container.hpp"
#include "spcm/random.hpp"

namespace spcm {

using nlohmann::json;

namespace {

/// Reads fields of one JSON object and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail("expected an object");
  }

  [[noreturn]] void fail(const std::string& what) const { throw ConfigError(where_ + ": " + what); }

  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const char* key, std::size_t& out) {
    if (const json* v = find(key)) out = as_count(*v, key);
  }
  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(std::string(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(std::string(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(std::string(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(std::string(key) + " must be an array");
      out.clear();
      for (const auto& e : *v) out.push_back(as_count(e, key));
    }
  }
  void get(const char* key, std::vector<double>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(std::string(key) + " must be an array");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) fail(std::string(key) + " must hold numbers");
        out.push_back(e.get<double>());
      }
    }
  }
  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) fail("unknown key '" + item.key() + "'");
  }

 private:
  std::size_t as_count(const json& v, const char* key) const {
    if (!v.is_number_unsigned()) fail(std::string(key) + " must be a non-negative integer");
    return v.get<std::size_t>();
  }

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json arch_json(const ArchConfig& a) {
  json nbs = json::array();
  for (const auto& nb : a.neighborhoods) {
    json n{{"mode", nb.mode == NeighborhoodSpec::Mode::kKnn ? "knn" : "ball"}, {"k", nb.k}};
    if (nb.mode == NeighborhoodSpec::Mode::kBall) n["radius"] = nb.radius;
    nbs.push_back(n);
  }
  return json{{"levels", a.levels},
              {"level_divisor", a.level_divisor},
              {"feature_dims", a.feature_dims},
              {"input_dim", a.input_dim},
              {"hidden", a.hidden},
              {"cost_hidden", a.cost_hidden},
              {"weight_hidden", a.weight_hidden},
              {"neighborhoods", nbs},
              {"conv_k", a.conv_k},
              {"idw_k", a.idw_k},
              {"refine_width", a.refine_width},
              {"head_width", a.head_width},
              {"residual_refinement", a.residual_refinement}};
}

ArchConfig parse_arch(const json& j) {
  Fields f(j, "arch");
  std::size_t levels = 3;
  f.get("levels", levels);
  ArchConfig a = default_arch(levels);
  f.get("level_divisor", a.level_divisor);
  f.get("feature_dims", a.feature_dims);
  f.get("input_dim", a.input_dim);
  f.get("hidden", a.hidden);
  f.get("cost_hidden", a.cost_hidden);
  f.get("weight_hidden", a.weight_hidden);
  if (const json* nbs = f.find("neighborhoods")) {
    if (!nbs->is_array()) f.fail("neighborhoods must be an array");
    a.neighborhoods.clear();
    for (const auto& e : *nbs) {
      Fields n(e, "arch.neighborhoods");
      NeighborhoodSpec spec;
      std::string mode = "knn";
      n.get("mode", mode);
      if (mode == "knn") spec.mode = NeighborhoodSpec::Mode::kKnn;
      else if (mode == "ball") spec.mode = NeighborhoodSpec::Mode::kBall;
      else n.fail("mode must be \"knn\" or \"ball\"");
      n.get("k", spec.k);
      n.get("radius", spec.radius);
      n.finish();
      a.neighborhoods.push_back(spec);
    }
  }
  f.get("conv_k", a.conv_k);
  f.get("idw_k", a.idw_k);
  f.get("refine_width", a.refine_width);
  f.get("head_width", a.head_width);
  f.get("residual_refinement", a.residual_refinement);
  f.finish();
  try {
    a.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return a;
}

std::string predictor_name(Predictor p) {
  switch (p) {
    case Predictor::kModel: return "model";
    case Predictor::kOracle: return "oracle";
    case Predictor::kZero: return "zero";
  }
  return "model";
}

json config_json(const RunConfig& c) {
  const TrainOptions& t = c.train;
  const AdamConfig& adam = t.optim.adam;
  return json{
      {"task", task_name(t.loss.mode)},
      {"seed", t.seed},
      {"threads", t.threads},
      {"deterministic", t.deterministic},
      {"preset", c.preset},
      {"manifest", c.manifest},
      {"out", c.out},
      {"init_checkpoint", c.init_checkpoint},
      {"arch", arch_json(c.arch)},
      {"loss", {{"alpha", t.loss.alpha}}},
      {"optim",
       {{"lr", t.optim.lr},
        {"milestones", t.optim.milestones},
        {"gamma", t.optim.gamma},
        {"beta1", adam.beta1},
        {"beta2", adam.beta2},
        {"eps", adam.eps},
        {"weight_decay", adam.weight_decay},
        {"clip_norm", adam.clip_norm}}},
      {"train",
       {{"epochs", t.epochs},
        {"max_steps", t.max_steps},
        {"batch_size", t.batch_size},
        {"reset_state", t.reset_state},
        {"horizon", t.horizon},
        {"augment",
         {{"enabled", t.augment.enabled},
          {"rotate_z", t.augment.rotate_z},
          {"max_shift", t.augment.max_shift},
          {"max_velocity", t.augment.max_velocity}}}}},
      {"eval",
       {{"split", c.eval.split}, {"predictor", predictor_name(c.eval.predictor)}, {"horizon", c.eval.horizon}}}};
}

}  // namespace

std::string task_name(LossMode mode) {
  switch (mode) {
    case LossMode::kSupervisedSsfe: return "ssfe";
    case LossMode::kSupervisedSpf: return "spf_sup";
    case LossMode::kSelfSupervisedSpf: return "spf_selfsup";
  }
  return "ssfe";
}

LossMode parse_task(std::string_view name) {
  if (name == "ssfe") return LossMode::kSupervisedSsfe;
  if (name == "spf_sup") return LossMode::kSupervisedSpf;
  if (name == "spf_selfsup") return LossMode::kSelfSupervisedSpf;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected ssfe, spf_sup or spf_selfsup)");
}

RunConfig parse_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Fields f(j, "config");
  std::string task = "ssfe";
  f.get("task", task);
  c.train.loss.mode = parse_task(task);
  f.get("seed", c.train.seed);
  f.get("threads", c.train.threads);
  f.get("deterministic", c.train.deterministic);
  f.get("preset", c.preset);
  f.get("manifest", c.manifest);
  f.get("out", c.out);
  f.get("init_checkpoint", c.init_checkpoint);
  if (const json* a = f.find("arch")) c.arch = parse_arch(*a);
  if (const json* l = f.find("loss")) {
    Fields lf(*l, "loss");
    lf.get("alpha", c.train.loss.alpha);
    lf.finish();
  }
  if (const json* o = f.find("optim")) {
    Fields of(*o, "optim");
    OptimConfig& opt = c.train.optim;
    of.get("lr", opt.lr);
    of.get("milestones", opt.milestones);
    of.get("gamma", opt.gamma);
    of.get("beta1", opt.adam.beta1);
    of.get("beta2", opt.adam.beta2);
    of.get("eps", opt.adam.eps);
    of.get("weight_decay", opt.adam.weight_decay);
    of.get("clip_norm", opt.adam.clip_norm);
    of.finish();
  }
  if (const json* t = f.find("train")) {
    Fields tf(*t, "train");
    tf.get("epochs", c.train.epochs);
    tf.get("max_steps", c.train.max_steps);
    tf.get("batch_size", c.train.batch_size);
    tf.get("reset_state", c.train.reset_state);
    tf.get("horizon", c.train.horizon);
    if (const json* a = tf.find("augment")) {
      Fields af(*a, "train.augment");
      af.get("enabled", c.train.augment.enabled);
      af.get("rotate_z", c.train.augment.rotate_z);
      af.get("max_shift", c.train.augment.max_shift);
      af.get("max_velocity", c.train.augment.max_velocity);
      af.finish();
    }
    tf.finish();
  }
  if (const json* e = f.find("eval")) {
    Fields ef(*e, "eval");
    ef.get("split", c.eval.split);
    std::string predictor = "model";
    ef.get("predictor", predictor);
    if (predictor == "model") c.eval.predictor = Predictor::kModel;
    else if (predictor == "oracle") c.eval.predictor = Predictor::kOracle;
    else if (predictor == "zero") c.eval.predictor = Predictor::kZero;
    else ef.fail("predictor must be model, oracle or zero");
    ef.get("horizon", c.eval.horizon);
    ef.finish();
  }
  f.finish();

  try {
    c.train.loss.validate(c.arch.levels);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (c.train.batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (c.train.threads == 0) throw ConfigError("threads must be positive");
  if (!(c.train.optim.lr > 0.0)) throw ConfigError("optim: lr must be positive");
  if (c.eval.split != "train" && c.eval.split != "val" && c.eval.split != "test")
    throw ConfigError("eval: split must be train, val or test");
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const RunConfig& config) { return config_json(config).dump(2) + "\n"; }

std::uint64_t config_hash(const RunConfig& config) {
  json j = config_json(config);
  j.erase("out");
  j.erase("threads");
  return fnv1a(j.dump());
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  Container c;
  c.magic = std::string(kCheckpointMagic);
  json meta{{"arch", arch_json(checkpoint.arch)},
            {"arch_hash", hex64(arch_hash(checkpoint.arch))},
            {"config_hash", hex64(checkpoint.config_hash)},
            {"version", std::string(kVersion)},
            {"step", checkpoint.step}};
  c.meta = meta.dump();
  for (const auto& s : checkpoint.params.slices()) {
    Matrix m(s.rows, s.cols);
    const auto v = checkpoint.params.values(s.name);
    m.data.assign(v.begin(), v.end());
    c.add(s.name, std::move(m));
  }
  write_container(c, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path, kCheckpointMagic);
  json meta;
  try {
    meta = json::parse(c.meta);
  } catch (const json::parse_error&) {
    throw FormatError(FormatErrorKind::kMalformed, path.string() + ": checkpoint metadata is not JSON");
  }
  if (!meta.is_object() || !meta.contains("arch") || !meta.contains("arch_hash") ||
      !meta.contains("config_hash") || !meta.contains("step"))
    throw FormatError(FormatErrorKind::kMalformed, path.string() + ": checkpoint metadata is incomplete");
  Checkpoint ck;
  ck.arch = parse_arch(meta["arch"]);
  if (meta["arch_hash"] != hex64(arch_hash(ck.arch)))
    throw FormatError(FormatErrorKind::kMalformed, path.string() + ": architecture hash does not match");
  try {
    ck.config_hash = std::stoull(meta["config_hash"].get<std::string>(), nullptr, 16);
    ck.step = meta["step"].get<std::uint64_t>();
  } catch (const std::exception&) {
    throw FormatError(FormatErrorKind::kMalformed, path.string() + ": bad checkpoint metadata");
  }
  ck.params = Model(ck.arch).layout();
  if (c.entries.size() != ck.params.slices().size())
    throw ConfigError(path.string() + ": checkpoint has " + std::to_string(c.entries.size()) +
                      " parameter slices, architecture declares " +
                      std::to_string(ck.params.slices().size()));
  for (const auto& s : ck.params.slices()) {
    if (!c.contains(s.name)) throw ConfigError(path.string() + ": missing parameter slice " + s.name);
    const Matrix& m = c.matrix(s.name);
    if (m.rows != s.rows || m.cols != s.cols)
      throw ConfigError(path.string() + ": parameter slice " + s.name + " has the wrong shape");
    auto dst = ck.params.values(s.name);
    std::copy(m.data.begin(), m.data.end(), dst.begin());
  }
  return ck;
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a(bytes);
}

}  // namespace spcm
