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

#include "dvemb/gradlog.h"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>

#include "dvemb/binary_io.h"
#include "dvemb/errors.h"

namespace dvemb {
namespace {

constexpr char kLogMagic[4] = {'D', 'V', 'L', 'G'};
constexpr char kIndexMagic[4] = {'D', 'V', 'I', 'X'};
constexpr char kEndMagic[4] = {'D', 'V', 'L', 'E'};
constexpr std::uint32_t kLogVersion = 1;
// step u64 + count u32 + eta f64
constexpr std::uint64_t kBlockPrefixBytes = 20;
// trailer_offset u64 + end magic
constexpr std::uint64_t kTrailerTailBytes = 12;

std::uint64_t RecordBytes(const LogHeader& header) {
  std::uint64_t bytes = 8;
  for (std::size_t l = 0; l < header.num_layers(); ++l) {
    bytes += 4 * header.projected_dim(l);
  }
  return bytes;
}

std::string EncodeBlock(const LogHeader& header, const StepBlock& block) {
  ByteWriter out;
  out.PutU64(block.step);
  out.PutU32(static_cast<std::uint32_t>(block.records.size()));
  out.PutF64(block.eta);
  for (const GradientRecord& r : block.records) {
    Require(r.layers.size() == header.num_layers(), ErrorKind::kInvalidArgument,
            "record layer count does not match log header");
    out.PutU64(r.sample_id);
    for (std::size_t l = 0; l < r.layers.size(); ++l) {
      Require(static_cast<std::size_t>(r.layers[l].size()) == header.projected_dim(l),
              ErrorKind::kInvalidArgument,
              "record width " + std::to_string(r.layers[l].size()) +
                  " does not match header width " +
                  std::to_string(header.projected_dim(l)) + " for layer " +
                  std::to_string(l));
      for (Eigen::Index i = 0; i < r.layers[l].size(); ++i) {
        const auto v = static_cast<float>(r.layers[l](i));
        Require(std::isfinite(v), ErrorKind::kDivergence,
                "non-finite gradient at step " + std::to_string(block.step));
        out.PutF32(v);
      }
    }
  }
  out.PutU32(Crc32(out.bytes()));
  return out.bytes();
}

StepBlock DecodeBlock(const LogHeader& header, std::string_view bytes) {
  Require(bytes.size() >= kBlockPrefixBytes + 4, ErrorKind::kFormat, "short log block");
  const std::uint32_t stored =
      ByteReader(bytes.substr(bytes.size() - 4)).GetU32();
  Require(Crc32(bytes.substr(0, bytes.size() - 4)) == stored, ErrorKind::kFormat,
          "gradient log checksum failure");
  ByteReader in(bytes.substr(0, bytes.size() - 4));
  StepBlock block;
  block.step = in.GetU64();
  const std::uint32_t count = in.GetU32();
  block.eta = in.GetF64();
  block.records.resize(count);
  for (GradientRecord& r : block.records) {
    r.sample_id = in.GetU64();
    r.layers.resize(header.num_layers());
    for (std::size_t l = 0; l < header.num_layers(); ++l) {
      Eigen::VectorXd v(static_cast<Eigen::Index>(header.projected_dim(l)));
      for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = static_cast<double>(in.GetF32());
      r.layers[l] = std::move(v);
    }
  }
  return block;
}

}  // namespace

std::vector<std::size_t> LogHeader::projected_dims() const {
  std::vector<std::size_t> dims;
  for (std::size_t l = 0; l < num_layers(); ++l) dims.push_back(projected_dim(l));
  return dims;
}

LogHeader LogHeader::For(const RunManifest& manifest, const ProjectionPair& pair) {
  Require(pair.num_layers() == manifest.spec.num_layers(), ErrorKind::kInvalidArgument,
          "projection does not match model layers");
  LogHeader h;
  h.spec_hash = manifest.spec.Hash();
  h.projection_seed = pair.seed();
  h.identity = pair.identity();
  h.total_steps = manifest.total_steps();
  h.batch_size = manifest.batch_size;
  h.schedule_digest = manifest.Rates().Digest();
  for (std::size_t l = 0; l < pair.num_layers(); ++l) {
    h.layers.push_back({pair.layer(l).r_a, pair.layer(l).r_s});
  }
  return h;
}

void EncodeLogHeader(const LogHeader& header, ByteWriter& out) {
  out.PutU64(header.spec_hash);
  out.PutU64(header.projection_seed);
  out.PutU8(header.identity ? 1 : 0);
  out.PutU64(header.total_steps);
  out.PutU64(header.batch_size);
  out.PutU64(header.schedule_digest);
  out.PutU32(static_cast<std::uint32_t>(header.layers.size()));
  for (const SketchWidths& w : header.layers) {
    out.PutU64(w.r_a);
    out.PutU64(w.r_s);
  }
}

LogHeader DecodeLogHeader(ByteReader& in) {
  LogHeader h;
  h.spec_hash = in.GetU64();
  h.projection_seed = in.GetU64();
  h.identity = in.GetU8() != 0;
  h.total_steps = in.GetU64();
  h.batch_size = in.GetU64();
  h.schedule_digest = in.GetU64();
  const std::uint32_t layers = in.GetU32();
  Require(layers < 4096, ErrorKind::kFormat, "implausible layer count in header");
  for (std::uint32_t l = 0; l < layers; ++l) {
    SketchWidths w;
    w.r_a = in.GetU64();
    w.r_s = in.GetU64();
    h.layers.push_back(w);
  }
  return h;
}

ReverseCursor::ReverseCursor(const StepSource& source, std::int64_t from,
                             std::int64_t to)
    : source_(&source), next_(from), to_(to) {
  if (from < to) return;
  Require(to >= 0, ErrorKind::kInvalidArgument, "negative step in range");
  Require(source.HasStep(static_cast<std::uint64_t>(from)) &&
              source.HasStep(static_cast<std::uint64_t>(to)),
          ErrorKind::kInvalidArgument,
          "step range [" + std::to_string(to) + ", " + std::to_string(from) +
              "] is outside the log");
}

std::optional<StepBlock> ReverseCursor::Next() {
  if (next_ < to_) return std::nullopt;
  StepBlock block = source_->ReadStep(static_cast<std::uint64_t>(next_));
  --next_;
  return block;
}

ReverseCursor ReadReverse(const StepSource& source, std::int64_t from_step,
                          std::int64_t to_step) {
  return ReverseCursor(source, from_step, to_step);
}

void InMemoryLog::AppendStep(StepBlock block) {
  Require(blocks_.empty() || block.step > blocks_.back().step,
          ErrorKind::kInvalidArgument,
          "out-of-order step " + std::to_string(block.step));
  for (const GradientRecord& r : block.records) {
    Require(r.layers.size() == header_.num_layers(), ErrorKind::kInvalidArgument,
            "record layer count does not match log header");
    for (std::size_t l = 0; l < r.layers.size(); ++l) {
      Require(static_cast<std::size_t>(r.layers[l].size()) == header_.projected_dim(l),
              ErrorKind::kInvalidArgument, "record width does not match log header");
    }
  }
  index_[block.step] = blocks_.size();
  blocks_.push_back(std::move(block));
}

StepBlock InMemoryLog::ReadStep(std::uint64_t step) const {
  auto it = index_.find(step);
  Require(it != index_.end(), ErrorKind::kNotFound,
          "step " + std::to_string(step) + " not in log");
  return blocks_[it->second];
}

std::vector<std::uint64_t> InMemoryLog::Steps() const {
  std::vector<std::uint64_t> steps;
  for (const auto& [step, _] : index_) steps.push_back(step);
  return steps;
}

GradientLogWriter::GradientLogWriter(std::FILE* file, LogHeader header,
                                     std::uint64_t offset)
    : file_(file), header_(std::move(header)), offset_(offset) {}

std::unique_ptr<GradientLogWriter> GradientLogWriter::Create(
    const std::filesystem::path& path, const LogHeader& header) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::FILE* file = std::fopen(path.c_str(), "wb");
  Require(file != nullptr, ErrorKind::kInvalidArgument,
          "cannot create gradient log " + path.string());
  ByteWriter header_bytes;
  EncodeLogHeader(header, header_bytes);
  ByteWriter out;
  out.PutBytes(std::string_view(kLogMagic, 4));
  out.PutU32(kLogVersion);
  out.PutU32(static_cast<std::uint32_t>(header_bytes.size()));
  out.PutBytes(header_bytes.bytes());
  out.PutU32(Crc32(header_bytes.bytes()));
  if (std::fwrite(out.bytes().data(), 1, out.size(), file) != out.size()) {
    std::fclose(file);
    Fail(ErrorKind::kInvalidArgument, "cannot write gradient log header");
  }
  return std::unique_ptr<GradientLogWriter>(
      new GradientLogWriter(file, header, out.size()));
}

GradientLogWriter::~GradientLogWriter() {
  try {
    Close();
  } catch (...) {
  }
}

void GradientLogWriter::AppendStep(const StepBlock& block) {
  Require(file_ != nullptr, ErrorKind::kInvalidArgument, "gradient log is closed");
  Require(!last_step_ || block.step > *last_step_, ErrorKind::kInvalidArgument,
          "out-of-order step " + std::to_string(block.step) + " after " +
              (last_step_ ? std::to_string(*last_step_) : std::string("none")));
  const std::string bytes = EncodeBlock(header_, block);
  Require(std::fwrite(bytes.data(), 1, bytes.size(), file_) == bytes.size(),
          ErrorKind::kInvalidArgument, "gradient log write failed");
  index_.emplace_back(block.step, offset_);
  offset_ += bytes.size();
  last_step_ = block.step;
  records_written_ += block.records.size();
}

void GradientLogWriter::Flush() {
  if (file_ == nullptr) return;
  Require(std::fflush(file_) == 0, ErrorKind::kInvalidArgument, "gradient log flush failed");
  ::fsync(::fileno(file_));
}

void GradientLogWriter::Close() {
  if (file_ == nullptr) return;
  ByteWriter trailer;
  trailer.PutBytes(std::string_view(kIndexMagic, 4));
  trailer.PutU64(index_.size());
  for (const auto& [step, offset] : index_) {
    trailer.PutU64(step);
    trailer.PutU64(offset);
  }
  trailer.PutU32(Crc32(trailer.bytes()));
  trailer.PutU64(offset_);
  trailer.PutBytes(std::string_view(kEndMagic, 4));
  std::FILE* file = file_;
  file_ = nullptr;
  const bool wrote = std::fwrite(trailer.bytes().data(), 1, trailer.size(), file) == trailer.size();
  std::fflush(file);
  ::fsync(::fileno(file));
  const bool closed = std::fclose(file) == 0;
  Require(wrote && closed, ErrorKind::kInvalidArgument, "failed to finalize gradient log");
}

GradientLogReader::~GradientLogReader() {
  if (fd_ >= 0) ::close(fd_);
}

std::string GradientLogReader::ReadAt(std::uint64_t offset, std::uint64_t length) const {
  Require(offset + length <= file_size_, ErrorKind::kFormat,
          "read past end of gradient log " + path_.string());
  std::string buf(length, '\0');
  std::uint64_t done = 0;
  while (done < length) {
    const ssize_t n = ::pread(fd_, buf.data() + done, length - done,
                              static_cast<off_t>(offset + done));
    if (n < 0 && errno == EINTR) continue;
    Require(n > 0, ErrorKind::kFormat, "short read from gradient log " + path_.string());
    done += static_cast<std::uint64_t>(n);
  }
  return buf;
}

std::unique_ptr<GradientLogReader> GradientLogReader::Open(const std::filesystem::path& path) {
  Require(std::filesystem::exists(path), ErrorKind::kMissingArtifact,
          "gradient log not found: " + path.string());
  std::unique_ptr<GradientLogReader> reader(new GradientLogReader());
  reader->path_ = path;
  reader->fd_ = ::open(path.c_str(), O_RDONLY);
  Require(reader->fd_ >= 0, ErrorKind::kMissingArtifact,
          "cannot open gradient log " + path.string());
  struct stat st {};
  ::fstat(reader->fd_, &st);
  reader->file_size_ = static_cast<std::uint64_t>(st.st_size);

  const std::string prefix = reader->ReadAt(0, 12);
  Require(prefix.substr(0, 4) == std::string_view(kLogMagic, 4), ErrorKind::kFormat,
          "bad gradient log magic in " + path.string());
  ByteReader prefix_in(prefix);
  prefix_in.GetBytes(4);
  const std::uint32_t version = prefix_in.GetU32();
  Require(version == kLogVersion, ErrorKind::kFormat,
          "unsupported gradient log version " + std::to_string(version));
  const std::uint32_t header_len = prefix_in.GetU32();
  const std::string header_bytes = reader->ReadAt(12, header_len + 4);
  const std::string_view body = std::string_view(header_bytes).substr(0, header_len);
  Require(Crc32(body) == ByteReader(std::string_view(header_bytes).substr(header_len)).GetU32(),
          ErrorKind::kFormat, "gradient log header checksum failure");
  ByteReader header_in(body);
  reader->header_ = DecodeLogHeader(header_in);
  reader->record_bytes_ = RecordBytes(reader->header_);
  const std::uint64_t data_start = 12 + header_len + 4;

  // Prefer the trailing index written by Close().
  bool have_index = false;
  if (reader->file_size_ >= data_start + kTrailerTailBytes) {
    const std::string tail =
        reader->ReadAt(reader->file_size_ - kTrailerTailBytes, kTrailerTailBytes);
    if (tail.substr(8) == std::string_view(kEndMagic, 4)) {
      const std::uint64_t trailer_offset = ByteReader(tail).GetU64();
      Require(trailer_offset >= data_start &&
                  trailer_offset < reader->file_size_ - kTrailerTailBytes,
              ErrorKind::kFormat, "bad gradient log trailer offset");
      const std::string trailer = reader->ReadAt(
          trailer_offset, reader->file_size_ - kTrailerTailBytes - trailer_offset);
      const std::string_view trailer_body =
          std::string_view(trailer).substr(0, trailer.size() - 4);
      Require(Crc32(trailer_body) ==
                  ByteReader(std::string_view(trailer).substr(trailer.size() - 4)).GetU32(),
              ErrorKind::kFormat, "gradient log index checksum failure");
      ByteReader in(trailer_body);
      Require(in.GetBytes(4) == std::string_view(kIndexMagic, 4), ErrorKind::kFormat,
              "bad gradient log index magic");
      const std::uint64_t entries = in.GetU64();
      for (std::uint64_t i = 0; i < entries; ++i) {
        const std::uint64_t step = in.GetU64();
        const std::uint64_t offset = in.GetU64();
        const std::string block_prefix = reader->ReadAt(offset, kBlockPrefixBytes);
        ByteReader bp(block_prefix);
        Require(bp.GetU64() == step, ErrorKind::kFormat,
                "gradient log index points at the wrong step");
        reader->index_[step] = {offset, bp.GetU32()};
      }
      have_index = true;
    }
  }

  if (!have_index) {
    // Recovery scan: keep every complete block whose checksum verifies.
    reader->recovered_ = true;
    std::uint64_t offset = data_start;
    std::optional<std::uint64_t> last;
    while (offset + kBlockPrefixBytes <= reader->file_size_) {
      const std::string block_prefix = reader->ReadAt(offset, kBlockPrefixBytes);
      ByteReader bp(block_prefix);
      const std::uint64_t step = bp.GetU64();
      const std::uint32_t count = bp.GetU32();
      const std::uint64_t length = kBlockPrefixBytes + count * reader->record_bytes_ + 4;
      if (offset + length > reader->file_size_) break;
      if (last && step <= *last) break;
      try {
        DecodeBlock(reader->header_, reader->ReadAt(offset, length));
      } catch (const Error&) {
        break;
      }
      reader->index_[step] = {offset, count};
      last = step;
      offset += length;
    }
  }
  return reader;
}

StepBlock GradientLogReader::ReadStep(std::uint64_t step) const {
  auto it = index_.find(step);
  Require(it != index_.end(), ErrorKind::kNotFound,
          "step " + std::to_string(step) + " not in gradient log " + path_.string());
  const auto [offset, count] = it->second;
  const std::uint64_t length = kBlockPrefixBytes + count * record_bytes_ + 4;
  StepBlock block = DecodeBlock(header_, ReadAt(offset, length));
  Require(block.step == step, ErrorKind::kFormat, "gradient log block has wrong step");
  return block;
}

std::vector<std::uint64_t> GradientLogReader::Steps() const {
  std::vector<std::uint64_t> steps;
  for (const auto& [step, _] : index_) steps.push_back(step);
  return steps;
}

std::uint64_t GradientLogReader::record_count() const {
  std::uint64_t total = 0;
  for (const auto& [_, entry] : index_) total += entry.second;
  return total;
}

StepBlock ProjectStep(const ProjectionPair& pair, const StepGradients& step) {
  const std::vector<RowMatrix> projected = ProjectCapture(pair, *step.capture);
  StepBlock block;
  block.step = step.step;
  block.eta = step.eta;
  block.records.resize(step.sample_ids.size());
  for (std::size_t i = 0; i < step.sample_ids.size(); ++i) {
    block.records[i].sample_id = step.sample_ids[i];
    for (const RowMatrix& layer : projected) {
      block.records[i].layers.push_back(layer.row(static_cast<Eigen::Index>(i)).transpose());
    }
  }
  return block;
}

LogWriterSink::LogWriterSink(GradientLogWriter& writer, const ProjectionPair& pair,
                             bool async)
    : writer_(writer), pair_(pair), async_(async) {
  if (async_) worker_ = std::thread([this] { Run(); });
}

LogWriterSink::~LogWriterSink() {
  if (worker_.joinable()) {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      done_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }
}

void LogWriterSink::Write(const Pending& pending) {
  BackpropCapture capture;
  capture.activations = pending.activations;
  capture.output_grads = pending.output_grads;
  capture.sample_losses.assign(pending.ids.size(), 0.0);
  StepGradients step{pending.step, pending.eta, pending.ids, &capture};
  writer_.AppendStep(ProjectStep(pair_, step));
}

void LogWriterSink::Run() {
  for (;;) {
    Pending pending;
    {
      std::unique_lock<std::mutex> lock(mutex_);
      cv_.wait(lock, [this] { return done_ || !queue_.empty(); });
      if (queue_.empty()) return;
      pending = std::move(queue_.front());
    }
    try {
      if (!failure_) Write(pending);
    } catch (...) {
      std::lock_guard<std::mutex> lock(mutex_);
      failure_ = std::current_exception();
    }
    {
      std::lock_guard<std::mutex> lock(mutex_);
      queue_.pop_front();
    }
    cv_.notify_all();
  }
}

void LogWriterSink::RethrowIfFailed() {
  std::lock_guard<std::mutex> lock(mutex_);
  if (failure_) std::rethrow_exception(failure_);
}

void LogWriterSink::Consume(const StepGradients& step) {
  Pending pending{step.step, step.eta,
                  std::vector<std::uint64_t>(step.sample_ids.begin(), step.sample_ids.end()),
                  step.capture->activations, step.capture->output_grads};
  if (!async_) {
    Write(pending);
    return;
  }
  RethrowIfFailed();
  {
    std::lock_guard<std::mutex> lock(mutex_);
    queue_.push_back(std::move(pending));
  }
  cv_.notify_all();
}

void LogWriterSink::Finish() {
  if (async_) {
    std::unique_lock<std::mutex> lock(mutex_);
    cv_.wait(lock, [this] { return queue_.empty(); });
  }
  RethrowIfFailed();
  writer_.Flush();
}

void InMemoryLogSink::Consume(const StepGradients& step) {
  log_.AppendStep(ProjectStep(pair_, step));
}

}  // namespace dvemb
