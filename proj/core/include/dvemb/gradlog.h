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

#ifndef DVEMB_GRADLOG_H_
#define DVEMB_GRADLOG_H_

#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <exception>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include <Eigen/Core>

#include "dvemb/manifest.h"
#include "dvemb/projection.h"
#include "dvemb/trainer.h"

namespace dvemb {

struct SketchWidths {
  std::uint64_t r_a = 0;
  std::uint64_t r_s = 0;

  bool operator==(const SketchWidths&) const = default;
};

// Identifies the run and sketch a gradient log (or embedding store) was built
// from.
struct LogHeader {
  std::uint64_t spec_hash = 0;
  std::uint64_t projection_seed = 0;
  bool identity = false;
  std::uint64_t total_steps = 0;
  std::uint64_t batch_size = 0;
  std::uint64_t schedule_digest = 0;
  std::vector<SketchWidths> layers;

  std::size_t num_layers() const { return layers.size(); }
  std::size_t projected_dim(std::size_t l) const {
    return static_cast<std::size_t>(layers.at(l).r_a * layers.at(l).r_s);
  }
  std::vector<std::size_t> projected_dims() const;

  static LogHeader For(const RunManifest& manifest, const ProjectionPair& pair);

  bool operator==(const LogHeader&) const = default;
};

// One training sample's projected gradient at one step.
struct GradientRecord {
  std::uint64_t sample_id = 0;
  std::vector<Eigen::VectorXd> layers;
};

struct StepBlock {
  std::uint64_t step = 0;
  double eta = 0.0;
  std::vector<GradientRecord> records;
};

// Random access to the per-step records of a trajectory.
class StepSource {
 public:
  virtual ~StepSource() = default;
  virtual const LogHeader& header() const = 0;
  virtual bool HasStep(std::uint64_t step) const = 0;
  // Throws kNotFound for an absent step.
  virtual StepBlock ReadStep(std::uint64_t step) const = 0;
  // Steps present, ascending.
  virtual std::vector<std::uint64_t> Steps() const = 0;
};

// Yields steps from..to (inclusive) in descending order; empty when
// from < to. One step is held in memory at a time.
class ReverseCursor {
 public:
  ReverseCursor(const StepSource& source, std::int64_t from, std::int64_t to);
  std::optional<StepBlock> Next();

 private:
  const StepSource* source_;
  std::int64_t next_;
  std::int64_t to_;
};

ReverseCursor ReadReverse(const StepSource& source, std::int64_t from_step,
                          std::int64_t to_step);

// Exact f64 records held in memory.
class InMemoryLog : public StepSource {
 public:
  explicit InMemoryLog(LogHeader header) : header_(std::move(header)) {}

  void AppendStep(StepBlock block);

  const LogHeader& header() const override { return header_; }
  bool HasStep(std::uint64_t step) const override { return index_.contains(step); }
  StepBlock ReadStep(std::uint64_t step) const override;
  std::vector<std::uint64_t> Steps() const override;

  const std::vector<StepBlock>& blocks() const { return blocks_; }

 private:
  LogHeader header_;
  std::vector<StepBlock> blocks_;
  std::map<std::uint64_t, std::size_t> index_;
};

// Append-only binary log ("DVLG"). Blocks are grouped by step and carry a
// CRC32; Close() appends an offset index. Records are stored as f32.
class GradientLogWriter {
 public:
  static std::unique_ptr<GradientLogWriter> Create(const std::filesystem::path& path,
                                                   const LogHeader& header);
  ~GradientLogWriter();
  GradientLogWriter(const GradientLogWriter&) = delete;
  GradientLogWriter& operator=(const GradientLogWriter&) = delete;

  // Step must be strictly greater than the previous one.
  void AppendStep(const StepBlock& block);
  // Pushes buffered steps to the OS and syncs them to disk.
  void Flush();
  void Close();

  std::uint64_t records_written() const { return records_written_; }
  const LogHeader& header() const { return header_; }

 private:
  GradientLogWriter(std::FILE* file, LogHeader header, std::uint64_t offset);

  std::FILE* file_;
  LogHeader header_;
  std::uint64_t offset_;
  std::optional<std::uint64_t> last_step_;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> index_;
  std::uint64_t records_written_ = 0;
};

class GradientLogReader : public StepSource {
 public:
  // Validates the header and loads the offset index. A log without an index
  // (writer did not close) is recovered by scanning checksummed blocks up to
  // the first incomplete one.
  static std::unique_ptr<GradientLogReader> Open(const std::filesystem::path& path);
  ~GradientLogReader() override;

  const LogHeader& header() const override { return header_; }
  bool HasStep(std::uint64_t step) const override { return index_.contains(step); }
  StepBlock ReadStep(std::uint64_t step) const override;
  std::vector<std::uint64_t> Steps() const override;

  bool recovered() const { return recovered_; }
  std::uint64_t record_count() const;

 private:
  GradientLogReader() = default;
  std::string ReadAt(std::uint64_t offset, std::uint64_t length) const;

  int fd_ = -1;
  std::filesystem::path path_;
  std::uint64_t file_size_ = 0;
  LogHeader header_;
  std::uint64_t record_bytes_ = 0;
  // step -> (offset, record count)
  std::map<std::uint64_t, std::pair<std::uint64_t, std::uint32_t>> index_;
  bool recovered_ = false;
};

// Projects the trainer's captures into a log. With async set, projection and
// disk writes run on a background thread fed through an ordered queue.
class LogWriterSink : public GradientSink {
 public:
  LogWriterSink(GradientLogWriter& writer, const ProjectionPair& pair, bool async = true);
  ~LogWriterSink() override;

  void Consume(const StepGradients& step) override;
  void Finish() override;

 private:
  struct Pending {
    std::uint64_t step;
    double eta;
    std::vector<std::uint64_t> ids;
    std::vector<RowMatrix> activations;
    std::vector<RowMatrix> output_grads;
  };

  void Write(const Pending& pending);
  void Run();
  void RethrowIfFailed();

  GradientLogWriter& writer_;
  const ProjectionPair& pair_;
  bool async_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<Pending> queue_;
  bool done_ = false;
  std::exception_ptr failure_;
  std::thread worker_;
};

// Projects the trainer's captures into an InMemoryLog (exact f64).
class InMemoryLogSink : public GradientSink {
 public:
  InMemoryLogSink(InMemoryLog& log, const ProjectionPair& pair) : log_(log), pair_(pair) {}
  void Consume(const StepGradients& step) override;

 private:
  InMemoryLog& log_;
  const ProjectionPair& pair_;
};

StepBlock ProjectStep(const ProjectionPair& pair, const StepGradients& step);

class ByteWriter;
class ByteReader;
void EncodeLogHeader(const LogHeader& header, ByteWriter& out);
LogHeader DecodeLogHeader(ByteReader& in);

}  // namespace dvemb

#endif  // DVEMB_GRADLOG_H_
