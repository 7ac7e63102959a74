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

#include "spcm/container.hpp"

#include <zlib.h>

#include <bit>
#include <fstream>
#include <iterator>
#include <sstream>

namespace spcm {

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = ::crc32(crc, bytes.data() + pos, chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void ByteWriter::bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::f64s(std::span<const double> v) {
  buf_.reserve(buf_.size() + 8 * v.size());
  for (double x : v) f64(x);
}

void ByteWriter::finish() { u32(crc32(buf_)); }

void ByteWriter::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw FormatError(FormatErrorKind::kIo, "write failed for " + path.string());
}

ByteReader ByteReader::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return ByteReader(std::move(data));
}

ByteReader::ByteReader(std::vector<std::uint8_t> data) : data_(std::move(data)) {
  if (data_.size() < 12)
    throw FormatError(FormatErrorKind::kTruncated,
                      "file is truncated (" + std::to_string(data_.size()) + " bytes)");
  payload_end_ = data_.size() - 4;
}

void ByteReader::need(std::size_t n) const {
  if (pos_ + n > payload_end_)
    throw FormatError(FormatErrorKind::kTruncated,
                      "file is truncated: needed " + std::to_string(n) + " bytes at offset " +
                          std::to_string(pos_));
}

void ByteReader::expect_magic(std::string_view expected) {
  need(8);
  const std::string got(data_.begin(), data_.begin() + 8);
  pos_ = 8;
  if (got.substr(0, 7) != expected.substr(0, 7))
    throw FormatError(FormatErrorKind::kMagic,
                      "bad magic '" + got + "', expected '" + std::string(expected) + "'");
  if (got[7] != expected[7]) {
    std::ostringstream os;
    os << "unsupported " << expected.substr(0, 7) << " version " << got[7] << " (reader supports version "
       << expected[7] << ")";
    throw FormatError(FormatErrorKind::kVersion, os.str());
  }
  // Magic and version are fine; any remaining damage is a checksum problem.
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(data_[payload_end_ + i]) << (8 * i);
  const std::uint32_t actual = crc32({data_.data(), payload_end_});
  if (stored != actual) {
    std::ostringstream os;
    os << "checksum mismatch (stored " << std::hex << stored << ", computed " << actual
       << "); file is corrupt or truncated";
    throw FormatError(FormatErrorKind::kChecksum, os.str());
  }
}

std::string ByteReader::bytes(std::size_t n) {
  need(n);
  std::string s(data_.begin() + static_cast<std::ptrdiff_t>(pos_),
                data_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
  pos_ += n;
  return s;
}

std::uint8_t ByteReader::u8() {
  need(1);
  return data_[pos_++];
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

void ByteReader::f64s(std::span<double> out) {
  need(8 * out.size());
  for (double& x : out) x = f64();
}

void ByteReader::expect_end() const {
  if (pos_ != payload_end_)
    throw FormatError(FormatErrorKind::kMalformed,
                      std::to_string(payload_end_ - pos_) + " unexpected trailing bytes");
}

bool Container::contains(std::string_view name) const {
  for (const auto& [n, m] : entries)
    if (n == name) return true;
  return false;
}

const Matrix& Container::matrix(std::string_view name) const {
  for (const auto& [n, m] : entries)
    if (n == name) return m;
  throw FormatError(FormatErrorKind::kMalformed, "missing entry '" + std::string(name) + "'");
}

void write_container(const Container& c, const std::filesystem::path& path) {
  if (c.magic.size() != 8) throw std::logic_error("container magic must be 8 bytes");
  ByteWriter w;
  w.bytes(c.magic);
  w.u32(static_cast<std::uint32_t>(c.meta.size()));
  w.bytes(c.meta);
  w.u32(static_cast<std::uint32_t>(c.entries.size()));
  for (const auto& [name, m] : c.entries) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u64(m.rows);
    w.u64(m.cols);
    w.f64s(m.data);
  }
  w.finish();
  w.save(path);
}

Container read_container(const std::filesystem::path& path, std::string_view expected_magic) {
  ByteReader r = ByteReader::load(path);
  r.expect_magic(expected_magic);
  Container c;
  c.magic = std::string(expected_magic);
  c.meta = r.bytes(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.u32());
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    if (cols != 0 && rows > r.remaining() / 8 / cols)
      throw FormatError(FormatErrorKind::kMalformed, "entry '" + name + "' is larger than the file");
    Matrix m(rows, cols);
    r.f64s(m.data);
    c.add(std::move(name), std::move(m));
  }
  r.expect_end();
  return c;
}

}  // namespace spcm
