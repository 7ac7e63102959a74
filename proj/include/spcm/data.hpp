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

// Synthetic scenes of rigidly moving objects with exact backward flow, the
// binary sequence format and dataset split manifests.
//
// Sequence file layout (little endian):
//   "SPCMSEQ1" | u32 T | u32 K | u32 d | u32 flags | u32 N[T+K] |
//   per frame (inputs, then futures):
//     f64 coords[N*3] | f64 feats[N*d] (kHasFeats) | u8 mask[N] (kHasMasks) |
//     f64 flow[N*3] (input frames t >= 1 with kHasFlows, futures with kHasFutureFlows)
//   u32 crc32

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "spcm/geom.hpp"

namespace spcm {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ShapeKind { kBox, kSphereShell, kPlanarPatch };

struct ObjectSpec {
  ShapeKind shape = ShapeKind::kBox;
  std::size_t surface_points = 256;
  Vec3 extent{0.5, 0.5, 0.5};  // box/patch half extents; sphere radius in [0]
  Vec3 position{0.0, 0.0, 0.0};
  Vec3 orientation{0.0, 0.0, 0.0};       // axis-angle
  Vec3 rotation_per_step{0.0, 0.0, 0.0};  // axis-angle about the object center
  Vec3 translation_per_step{0.0, 0.0, 0.0};
};

struct SceneSpec {
  std::vector<ObjectSpec> objects;
  std::size_t frames = 5;  // T
  std::size_t future = 5;  // K
  std::size_t points = 256;
  double occlusion = 0.0;  // fraction of points masked per frame
  bool resample = true;    // independent subsampling per input frame
  std::uint64_t seed = 0;

  void validate() const;
};

std::uint64_t spec_hash(const SceneSpec& spec);

/// Rotation matrix of an axis-angle vector (row-major).
std::array<double, 9> rotation_matrix(const Vec3& axis_angle);

/// Renders the scene. Future frames transport the points of the last input
/// frame, so they correspond row by row with it.
CloudSequence generate_scene(const SceneSpec& spec);

void write_sequence(const CloudSequence& seq, const std::filesystem::path& path);
CloudSequence read_sequence(const std::filesystem::path& path);

/// Random scene parameters for dataset generation.
struct GeneratorConfig {
  std::size_t frames = 5;
  std::size_t future = 5;
  std::size_t points = 256;
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  double max_translation = 0.15;   // meters per step
  double max_rotation_deg = 15.0;  // per step
  double occlusion = 0.0;
  bool resample = true;

  void validate() const;
};

SceneSpec random_scene(const GeneratorConfig& config, std::uint64_t seed);

struct Preset {
  std::string name;
  GeneratorConfig generator;
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

const std::vector<Preset>& presets();
/// Throws DataError listing the available names.
const Preset& find_preset(const std::string& name);

struct ManifestEntry {
  std::string path;
  std::uint64_t spec_hash = 0;
  std::string split;
  bool operator==(const ManifestEntry&) const = default;
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

/// Deterministic disjoint assignment of items to train/val/test.
std::vector<ManifestEntry> make_split(const std::vector<std::pair<std::string, std::uint64_t>>& items,
                                      SplitCounts counts, std::uint64_t seed);

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

}  // namespace spcm
