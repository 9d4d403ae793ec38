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

#include "dvemb/errors.h"

namespace dvemb {

const char* ErrorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid argument";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kDivergence: return "divergence";
    case ErrorKind::kMissingArtifact: return "missing artifact";
    case ErrorKind::kVerification: return "verification failure";
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kNotFound: return "not found";
  }
  return "unknown";
}

void Fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

int ExitCodeFor(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kInvalidArgument:
    case ErrorKind::kNotFound:
      return 2;
    case ErrorKind::kDivergence:
      return 3;
    case ErrorKind::kMissingArtifact:
    case ErrorKind::kFormat:
      return 4;
    case ErrorKind::kVerification:
      return 5;
  }
  return 1;
}

}  // namespace dvemb
