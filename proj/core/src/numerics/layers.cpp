#include "mvcbm/numerics/layers.hpp"

namespace mvcbm::num {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kLinear:
      return "linear";
    case LayerKind::kRelu:
      return "relu";
    case LayerKind::kSigmoid:
      return "sigmoid";
    case LayerKind::kTanh:
      return "tanh";
    case LayerKind::kDropout:
      return "dropout";
    case LayerKind::kBatchNorm:
      return "batchnorm";
    case LayerKind::kLstm:
      return "lstm";
  }
  return "unknown";
}

}  // namespace mvcbm::num
