#pragma once

#include <span>
#include <vector>

#include "xsmoe/tensor.hpp"

namespace xsmoe {

/// Pooled backbone outputs l_0..l_depth for every item of one modality,
/// stored item-major: values[(item * layers + layer) * dim + c].
struct FeatureBank {
  std::size_t items = 0;
  std::size_t layers = 0;  // depth + 1
  std::size_t dim = 0;
  std::vector<float> values;

  std::span<const float> vector(std::size_t item, std::size_t layer) const {
    return std::span<const float>(values).subspan((item * layers + layer) * dim, dim);
  }

  /// One [rows.size(), dim] constant tensor per layer.
  template <typename T>
  std::vector<Tensor<T>> gather(std::span<const std::size_t> rows) const {
    std::vector<Tensor<T>> out;
    out.reserve(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      std::vector<T> v(rows.size() * dim);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= items) throw ContractError("FeatureBank::gather: item index out of range");
        auto src = vector(rows[r], l);
        for (std::size_t c = 0; c < dim; ++c) v[r * dim + c] = static_cast<T>(src[c]);
      }
      out.push_back(Tensor<T>::from({rows.size(), dim}, std::move(v)));
    }
    return out;
  }
};

template <typename T>
struct FeatureBatch {
  std::vector<Tensor<T>> visual;
  std::vector<Tensor<T>> textual;
};

}  // namespace xsmoe
