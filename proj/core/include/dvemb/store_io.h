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

#ifndef DVEMB_STORE_IO_H_
#define DVEMB_STORE_IO_H_

#include <filesystem>
#include <string>
#include <string_view>

#include "dvemb/engine.h"

namespace dvemb {

// Embedding store file: "DVES", version, log header, step range and target,
// then (step, sample_id, f32 vectors) records, an offset index and a CRC32
// over everything before it.
std::string SerializeEmbeddingStore(const EmbeddingStore& store);
EmbeddingStore ParseEmbeddingStore(std::string_view bytes);
void SaveEmbeddingStore(const std::filesystem::path& path, const EmbeddingStore& store);
EmbeddingStore LoadEmbeddingStore(const std::filesystem::path& path);

// Kernel file: "DVEK", version, step range, per-layer f64 square matrices
// (row-major), CRC32.
std::string SerializeKernel(const SegmentKernel& kernel);
SegmentKernel ParseKernel(std::string_view bytes);
void SaveKernel(const std::filesystem::path& path, const SegmentKernel& kernel);
SegmentKernel LoadKernel(const std::filesystem::path& path);

}  // namespace dvemb

#endif  // DVEMB_STORE_IO_H_
