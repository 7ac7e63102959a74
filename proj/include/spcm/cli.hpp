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

// The `spcm` command: generate, train and eval.
//
// Report CSV columns (frozen):
//   flow tasks:        sequence,EPE3D,Acc3DS,Acc3DR,Outliers3D,RectOutliers3D
//   forecasting tasks: sequence,ADE,FDE,CD,EMD,SD
// One row per evaluated sequence, then a final row named ALL.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "spcm/config.hpp"
#include "spcm/train.hpp"

namespace spcm::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDataError = 3, kNumericError = 4 };

inline constexpr int kReportSchemaVersion = 1;

/// Parses arguments, runs one subcommand and maps errors to exit codes.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Exit code for the exception currently being handled.
int exit_code_for_current_exception(std::ostream& err);

struct LoadedSplit {
  std::vector<std::string> names;  // manifest paths
  std::vector<CloudSequence> sequences;
};

/// Sequences of one split; paths resolve against the manifest's directory.
LoadedSplit load_split(const std::filesystem::path& manifest, const std::string& split);

/// Writes seq_XXXX.spcm files and manifest.jsonl for the configured preset.
void generate(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log);

/// Writes best.ckpt, last.ckpt, loss_curve.csv and config.json to `out_dir`.
TrainResult train(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log);

/// Writes report.json and report.csv to `out_dir`. `checkpoint` is only read
/// for the model predictor.
void evaluate(const RunConfig& config, const std::filesystem::path& checkpoint,
              const std::filesystem::path& out_dir, std::ostream& log);

}  // namespace spcm::cli
