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

#ifndef DVEMB_ERRORS_H_
#define DVEMB_ERRORS_H_

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dvemb {

enum class ErrorKind {
  kInvalidArgument,
  kConfig,
  kDivergence,
  kMissingArtifact,
  kVerification,
  kFormat,
  kNotFound,
};

const char* ErrorKindName(ErrorKind kind);

// Every failure raised by the library is an Error; the kind drives the CLI
// exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

// Raised when a loss or update turns non-finite.
class DivergenceError : public Error {
 public:
  DivergenceError(std::uint64_t step, const std::string& message)
      : Error(ErrorKind::kDivergence,
              "divergence at step " + std::to_string(step) + ": " + message),
        step_(step) {}

  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

[[noreturn]] void Fail(ErrorKind kind, const std::string& message);

inline void Require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) Fail(kind, message);
}

// 0 ok, 2 config, 3 numeric divergence, 4 missing artifact, 5 verification.
int ExitCodeFor(ErrorKind kind);

}  // namespace dvemb

#endif  // DVEMB_ERRORS_H_
