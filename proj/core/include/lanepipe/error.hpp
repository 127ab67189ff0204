/* Copyright 2026 The Lanepipe Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef LANEPIPE_ERROR_HPP_
#define LANEPIPE_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace lanepipe {

enum class ErrorCode {
  kShapeMismatch,
  kLabelOutOfRange,
  kNotScalar,
  kGraphAlreadyConsumed,
  kDuplicateLaneId,
  kEmptyLaneSet,
  kLaneFailure,
  kIncompleteTable,
  kTooLarge,
  kInvalidPlan,
  kUnknownLane,
  kTooFewBlocks,
  kOversize,
  kMalformedFrame,
  kUnknownMsgType,
  kCrcMismatch,
  kTransportClosed,
  kTimeout,
  kStashMiss,
  kInvalidConfig,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kLabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::kNotScalar: return "NotScalar";
    case ErrorCode::kGraphAlreadyConsumed: return "GraphAlreadyConsumed";
    case ErrorCode::kDuplicateLaneId: return "DuplicateLaneId";
    case ErrorCode::kEmptyLaneSet: return "EmptyLaneSet";
    case ErrorCode::kLaneFailure: return "LaneFailure";
    case ErrorCode::kIncompleteTable: return "IncompleteTable";
    case ErrorCode::kTooLarge: return "TooLarge";
    case ErrorCode::kInvalidPlan: return "InvalidPlan";
    case ErrorCode::kUnknownLane: return "UnknownLane";
    case ErrorCode::kTooFewBlocks: return "TooFewBlocks";
    case ErrorCode::kOversize: return "Oversize";
    case ErrorCode::kMalformedFrame: return "MalformedFrame";
    case ErrorCode::kUnknownMsgType: return "UnknownMsgType";
    case ErrorCode::kCrcMismatch: return "CrcMismatch";
    case ErrorCode::kTransportClosed: return "TransportClosed";
    case ErrorCode::kTimeout: return "Timeout";
    case ErrorCode::kStashMiss: return "StashMiss";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

}  // namespace lanepipe

#endif  // LANEPIPE_ERROR_HPP_
