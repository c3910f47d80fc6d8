// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "peftref/tensor.hpp"

namespace peftref::detail {

// (B,T,a) x (a,b) -> (B,T,b)
Tensor linear3(const Tensor& x, const Tensor& w);
// (n,d) -> (B,n,d), the same rows for every batch entry
Tensor tile_batch(const Tensor& rows, std::size_t batch);

inline std::string layer_name(std::size_t layer, const std::string& what) {
    return "layer" + std::to_string(layer) + "." + what;
}

}  // namespace peftref::detail
