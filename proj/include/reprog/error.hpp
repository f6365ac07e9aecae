#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace reprog {

enum class ErrorCode {
  kLengthMismatch,
  kInvalidState,
  kEmptyAudio,
  kNonFiniteSamples,
  kZeroStd,
  kBadDims,
  kShapeMismatch,
  kWeightsUnavailable,
  kEmptyAssignment,
  kIndexOutOfRange,
  kNonFiniteInput,
  kEpochOutOfRange,
  kNonFiniteLoss,
  kEmptySplit,
  kBadThreshold,
  kZeroVariance,
  kMissingSplitFile,
  kUnknownInstrument,
  kUnresolvedAudio,
  kFractionOutOfRange,
  kConfigInvalid,
  kDatasetUnavailable,
  kFingerprintMismatch,
  kCheckpointCorrupt,
  kNoRunsFound,
  kIo,
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kLengthMismatch: return "LENGTH_MISMATCH";
    case ErrorCode::kInvalidState: return "INVALID_STATE";
    case ErrorCode::kEmptyAudio: return "EMPTY_AUDIO";
    case ErrorCode::kNonFiniteSamples: return "NON_FINITE_SAMPLES";
    case ErrorCode::kZeroStd: return "ZERO_STD";
    case ErrorCode::kBadDims: return "BAD_DIMS";
    case ErrorCode::kShapeMismatch: return "SHAPE_MISMATCH";
    case ErrorCode::kWeightsUnavailable: return "WEIGHTS_UNAVAILABLE";
    case ErrorCode::kEmptyAssignment: return "EMPTY_ASSIGNMENT";
    case ErrorCode::kIndexOutOfRange: return "INDEX_OUT_OF_RANGE";
    case ErrorCode::kNonFiniteInput: return "NON_FINITE_INPUT";
    case ErrorCode::kEpochOutOfRange: return "EPOCH_OUT_OF_RANGE";
    case ErrorCode::kNonFiniteLoss: return "NON_FINITE_LOSS";
    case ErrorCode::kEmptySplit: return "EMPTY_SPLIT";
    case ErrorCode::kBadThreshold: return "BAD_THRESHOLD";
    case ErrorCode::kZeroVariance: return "ZERO_VARIANCE";
    case ErrorCode::kMissingSplitFile: return "MISSING_SPLIT_FILE";
    case ErrorCode::kUnknownInstrument: return "UNKNOWN_INSTRUMENT";
    case ErrorCode::kUnresolvedAudio: return "UNRESOLVED_AUDIO";
    case ErrorCode::kFractionOutOfRange: return "FRACTION_OUT_OF_RANGE";
    case ErrorCode::kConfigInvalid: return "CONFIG_INVALID";
    case ErrorCode::kDatasetUnavailable: return "DATASET_UNAVAILABLE";
    case ErrorCode::kFingerprintMismatch: return "FINGERPRINT_MISMATCH";
    case ErrorCode::kCheckpointCorrupt: return "CHECKPOINT_CORRUPT";
    case ErrorCode::kNoRunsFound: return "NO_RUNS_FOUND";
    case ErrorCode::kIo: return "IO_ERROR";
  }
  return "UNKNOWN";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace reprog
