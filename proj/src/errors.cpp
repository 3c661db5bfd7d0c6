// Copyright 2026 The MIM Authors.
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

#include "mim/errors.hpp"

namespace mim {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension_error";
    case ErrorKind::kContract: return "contract_error";
    case ErrorKind::kNumeric: return "numeric_error";
    case ErrorKind::kValidation: return "validation_error";
    case ErrorKind::kDegenerate: return "degenerate_input";
    case ErrorKind::kCheckpoint: return "checkpoint_error";
    case ErrorKind::kConfig: return "config_error";
    case ErrorKind::kData: return "data_error";
    case ErrorKind::kParse: return "parse_error";
    case ErrorKind::kIo: return "io_error";
    case ErrorKind::kNotFound: return "not_found";
    case ErrorKind::kFormat: return "format_error";
  }
  return "error";
}

}  // namespace mim
