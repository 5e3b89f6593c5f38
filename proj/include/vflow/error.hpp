#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vflow {

enum class Errc {
  ShapeMismatch,
  NonFiniteInput,
  DuplicateAnchors,
  AnchorOutsideBox,
  NonPositiveScale,
  IndexOutOfRange,
  NegativeInput,
  NonUnitDirection,
  NoExit,
  PointOutsideCell,
  AlphaOutOfRange,
  LogOfNonPositive,
  DivisionByZero,
  NonScalarRoot,
  NonFiniteActivation,
  BoundaryPoint,
  DivergedLoss,
  EmptyFile,
  RaggedRows,
  BadRatios,
  ConfigInvalid,
  VocabMismatch,
  NotTwoDimensional,
  CheckpointInvalid,
  Io,
};

std::string_view errc_name(Errc code) noexcept;

/// Every failure raised by the library carries one of the codes above so
/// callers (and tests) can branch on the kind rather than the message.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace vflow
