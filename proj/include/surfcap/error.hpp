// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace surfcap {

enum class ErrorCode {
  DegenerateTriangle,
  BehindCamera,
  InvalidCamera,
  FrameOutOfRange,
  DimensionMismatch,
  ShapeMismatch,
  LengthMismatch,
  NonFinite,
  EmptySequence,
  MissingFile,
  ParseError,
  GridIncomplete,
  TopologyOutOfRange,
  InvalidArgument,
  GradientCheckFailed,
};

std::string_view to_string(ErrorCode code);

/// Exception carrying a machine-readable code; the CLI prints both on stderr.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace surfcap
