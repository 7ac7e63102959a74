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

// Run configuration (JSON) and model checkpoints.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "spcm/net.hpp"
#include "spcm/train.hpp"

namespace spcm {

inline constexpr std::string_view kVersion = "0.1.0";

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Predictor { kModel, kOracle, kZero };

struct EvalConfig {
  std::string split = "test";
  Predictor predictor = Predictor::kModel;
  std::size_t horizon = 0;  // forecasting steps; 0 uses every future frame
};

/// Everything a generate/train/eval run needs. `train.loss.mode` is the task.
struct RunConfig {
  ArchConfig arch;
  TrainOptions train;
  EvalConfig eval;
  std::string preset = "toy";
  std::string manifest = "data/manifest.jsonl";
  std::string out = "run";
  std::string init_checkpoint;  // empty: train from scratch
};

std::string task_name(LossMode mode);
LossMode parse_task(std::string_view name);

/// Strict parse: unknown keys and wrong types raise ConfigError. Absent keys
/// keep their defaults.
RunConfig parse_config(std::string_view json_text);
RunConfig load_config(const std::filesystem::path& path);
/// Canonical JSON with every field present.
std::string dump_config(const RunConfig& config);

/// Hash of the canonical config without `out` and `threads`.
std::uint64_t config_hash(const RunConfig& config);

std::string hex64(std::uint64_t v);

struct Checkpoint {
  ArchConfig arch;
  ParamStore params;
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Raises FormatError on a damaged file and ConfigError when the stored
/// parameters do not fit the stored architecture.
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// FNV-1a of the checkpoint file's bytes.
std::uint64_t file_hash(const std::filesystem::path& path);

}  // namespace spcm
