#pragma once

#include <cstddef>
#include <vector>

#include "aegpo/tensor.hpp"

namespace aegpo {

/// Cross-attention maps captured at one denoising step.
///
/// maps[l] is layer l's softmax(QK^T / sqrt(d_k)) over (image features x text tokens).
/// selected_layers picks which layers are averaged when the entropy signal is formed.
struct AttentionRecord {
  std::size_t step = 0;
  std::vector<Tensor> maps;
  std::vector<std::size_t> selected_layers;
};

}  // namespace aegpo
