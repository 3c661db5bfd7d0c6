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

#ifndef MIM_ERRORS_HPP
#define MIM_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace mim {

/// Broad failure classes. The CLI maps these onto exit codes.
enum class ErrorKind {
  kDimension,
  kContract,
  kNumeric,
  kValidation,
  kDegenerate,
  kCheckpoint,
  kConfig,
  kData,
  kParse,
  kIo,
  kNotFound,
  kFormat,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

#define MIM_DEFINE_ERROR(Name, Kind)                                   \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& message) : Error(Kind, message) {} \
  }

MIM_DEFINE_ERROR(DimensionError, ErrorKind::kDimension);
MIM_DEFINE_ERROR(ContractError, ErrorKind::kContract);
MIM_DEFINE_ERROR(NumericError, ErrorKind::kNumeric);
MIM_DEFINE_ERROR(ValidationError, ErrorKind::kValidation);
MIM_DEFINE_ERROR(DegenerateInputError, ErrorKind::kDegenerate);
MIM_DEFINE_ERROR(CheckpointError, ErrorKind::kCheckpoint);
MIM_DEFINE_ERROR(ConfigError, ErrorKind::kConfig);
MIM_DEFINE_ERROR(DataError, ErrorKind::kData);
MIM_DEFINE_ERROR(ParseError, ErrorKind::kParse);
MIM_DEFINE_ERROR(IoError, ErrorKind::kIo);
MIM_DEFINE_ERROR(NotFoundError, ErrorKind::kNotFound);
MIM_DEFINE_ERROR(FormatError, ErrorKind::kFormat);

#undef MIM_DEFINE_ERROR

}  // namespace mim

#endif  // MIM_ERRORS_HPP
