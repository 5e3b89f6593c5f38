#include "vflow/error.hpp"

namespace vflow {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonFiniteInput: return "NonFiniteInput";
    case Errc::DuplicateAnchors: return "DuplicateAnchors";
    case Errc::AnchorOutsideBox: return "AnchorOutsideBox";
    case Errc::NonPositiveScale: return "NonPositiveScale";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::NegativeInput: return "NegativeInput";
    case Errc::NonUnitDirection: return "NonUnitDirection";
    case Errc::NoExit: return "NoExit";
    case Errc::PointOutsideCell: return "PointOutsideCell";
    case Errc::AlphaOutOfRange: return "AlphaOutOfRange";
    case Errc::LogOfNonPositive: return "LogOfNonPositive";
    case Errc::DivisionByZero: return "DivisionByZero";
    case Errc::NonScalarRoot: return "NonScalarRoot";
    case Errc::NonFiniteActivation: return "NonFiniteActivation";
    case Errc::BoundaryPoint: return "BoundaryPoint";
    case Errc::DivergedLoss: return "DivergedLoss";
    case Errc::EmptyFile: return "EmptyFile";
    case Errc::RaggedRows: return "RaggedRows";
    case Errc::BadRatios: return "BadRatios";
    case Errc::ConfigInvalid: return "ConfigInvalid";
    case Errc::VocabMismatch: return "VocabMismatch";
    case Errc::NotTwoDimensional: return "NotTwoDimensional";
    case Errc::CheckpointInvalid: return "CheckpointInvalid";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace vflow
