// Copyright 2026 The dvemb Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef DVEMB_BINARY_IO_H_
#define DVEMB_BINARY_IO_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace dvemb {

// Appends little-endian scalars to a byte buffer.
class ByteWriter {
 public:
  void PutU8(std::uint8_t v) { buffer_.push_back(static_cast<char>(v)); }
  void PutU32(std::uint32_t v);
  void PutU64(std::uint64_t v);
  void PutF32(float v);
  void PutF64(double v);
  void PutBytes(std::string_view bytes) { buffer_.append(bytes); }

  const std::string& bytes() const { return buffer_; }
  std::string& mutable_bytes() { return buffer_; }
  std::size_t size() const { return buffer_.size(); }
  void Clear() { buffer_.clear(); }

 private:
  std::string buffer_;
};

// Reads little-endian scalars; throws a kFormat error on truncation.
class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint8_t GetU8();
  std::uint32_t GetU32();
  std::uint64_t GetU64();
  float GetF32();
  double GetF64();
  std::string_view GetBytes(std::size_t n);

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  void Seek(std::size_t pos);

 private:
  void Need(std::size_t n) const;

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t Crc32(std::string_view bytes);

std::string ReadFileBytes(const std::filesystem::path& path);
// Writes via a temporary sibling and rename so readers never see a partial
// file.
void WriteFileBytes(const std::filesystem::path& path, std::string_view bytes);

std::uint32_t ReadBigEndianU32(std::string_view bytes, std::size_t offset);

}  // namespace dvemb

#endif  // DVEMB_BINARY_IO_H_
