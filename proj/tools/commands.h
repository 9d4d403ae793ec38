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


#ifndef DVEMB_TOOLS_COMMANDS_H_
#define DVEMB_TOOLS_COMMANDS_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "config.h"
#include "dvemb/engine.h"
#include "dvemb/trainer.h"

namespace dvemb::cli {

// Artifact locations under one output directory.
struct RunLayout {
  explicit RunLayout(std::filesystem::path root) : root(std::move(root)) {}

  std::filesystem::path root;
  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path log() const { return root / "gradients.dvlg"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path train_meta() const { return root / "train.json"; }
  std::filesystem::path embed_dir() const { return root / "embed"; }
  std::filesystem::path final_store() const { return embed_dir() / "final.dves"; }
  std::filesystem::path segment_store(std::size_t k) const;
  std::filesystem::path kernel(std::size_t k) const;
  std::filesystem::path embed_meta() const { return embed_dir() / "embed.json"; }
  std::filesystem::path oracle_dir() const { return root / "oracle"; }
  std::filesystem::path probes() const { return oracle_dir() / "probes.json"; }
  std::filesystem::path oracle_scores() const { return oracle_dir() / "oracle_scores.csv"; }
  std::filesystem::path eval_dir() const { return root / "eval"; }
  std::filesystem::path report_dir() const { return root / "report"; }
};

struct EmbedArgs {
  std::optional<std::size_t> checkpoints;  // defaults to the config's count
  std::size_t jobs = 1;
  bool verify = false;
  std::size_t verify_records = 4;
};

struct QueryArgs {
  std::optional<std::filesystem::path> store;
  std::optional<std::size_t> test_sample;
  std::optional<std::filesystem::path> test_grad_file;
  std::size_t top = 0;  // 0: all
  std::optional<std::filesystem::path> out;
};

struct OracleArgs {
  std::optional<std::filesystem::path> probes;
  std::size_t jobs = 1;
};

struct VerifyArgs {
  std::optional<std::size_t> checkpoints;
};

void CmdTrain(const ExperimentConfig& config, std::ostream& out);
void CmdEmbed(const ExperimentConfig& config, const EmbedArgs& args, std::ostream& out);
void CmdQuery(const ExperimentConfig& config, const QueryArgs& args, std::ostream& out);
void CmdOracle(const ExperimentConfig& config, const OracleArgs& args, std::ostream& out);
void CmdEval(const ExperimentConfig& config, std::ostream& out);
void CmdReport(const ExperimentConfig& config, std::ostream& out);
void CmdVerify(const ExperimentConfig& config, const VerifyArgs& args, std::ostream& out);

// Loads the final parameters and every manifest checkpoint from disk.
TrainResult LoadBaseline(const RunLayout& layout, const RunManifest& manifest);

// Projected gradient file: {"projection_seed", "identity", "layers": [[...]]}.
ProjectedGradient LoadProjectedGradient(const std::filesystem::path& path);
void SaveProjectedGradient(const std::filesystem::path& path, const ProjectedGradient& grad);

// Score descending, then step, then sample id.
void RankScores(std::vector<InfluenceScore>& scores);

// Parses argv, runs one subcommand and maps failures to exit codes.
int RunCli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int RunCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dvemb::cli

#endif  // DVEMB_TOOLS_COMMANDS_H_
