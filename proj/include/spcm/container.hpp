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

// Little-endian binary containers shared by sequence files, checkpoints and
// recurrent-state dumps. Every file starts with an 8-byte magic whose last
// character is the format version and ends with a CRC32 of all prior bytes.
//
// Named-matrix container layout (checkpoints, states):
//   magic[8] | u32 meta_len | meta (UTF-8 JSON) | u32 count |
//   count x { u32 name_len | name | u64 rows | u64 cols | f64[rows*cols] } |
//   u32 crc32

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spcm/geom.hpp"

namespace spcm {

enum class FormatErrorKind { kIo, kMagic, kVersion, kTruncated, kChecksum, kMalformed };

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

inline constexpr std::string_view kSequenceMagic = "SPCMSEQ1";
inline constexpr std::string_view kCheckpointMagic = "SPCMCKP1";
inline constexpr std::string_view kStateMagic = "SPCMSTA1";

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

class ByteWriter {
 public:
  void bytes(std::string_view s);
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(std::span<const double> v);
  /// Appends the CRC32 of everything written so far.
  void finish();
  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  /// Loads the file and verifies the trailing CRC32.
  static ByteReader load(const std::filesystem::path& path);
  explicit ByteReader(std::vector<std::uint8_t> data);

  /// Reads the 8-byte magic and checks family and version against `expected`.
  void expect_magic(std::string_view expected);
  std::string bytes(std::size_t n);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  void f64s(std::span<double> out);
  /// Fails unless only the checksum remains.
  void expect_end() const;
  std::size_t remaining() const { return payload_end_ - pos_; }

 private:
  void need(std::size_t n) const;
  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::size_t payload_end_ = 0;
};

struct Container {
  std::string magic;
  std::string meta;
  std::vector<std::pair<std::string, Matrix>> entries;

  void add(std::string name, Matrix m) { entries.emplace_back(std::move(name), std::move(m)); }
  bool contains(std::string_view name) const;
  const Matrix& matrix(std::string_view name) const;
};

void write_container(const Container& c, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path, std::string_view expected_magic);

}  // namespace spcm
