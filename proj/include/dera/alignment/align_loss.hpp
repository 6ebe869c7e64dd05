#pragma once

#include <string>

#include "dera/alignment/teacher.hpp"
#include "dera/tokenizer/layers.hpp"

namespace dera {

/// d -> 2 d_t -> d_t MLP with GELU mapping encoder features into teacher space.
template <class T>
struct ProjectionHead {
  Linear<T> fc1, fc2;
  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }
};

template <class T>
ProjectionHead<T> make_projection_head(ParameterSet<T>& ps, const std::string& name, std::size_t width,
                                       std::size_t teacher_dim, std::uint64_t seed) {
  return {make_linear(ps, name + ".fc1", width, 2 * teacher_dim, seed, 1.0 / std::sqrt(static_cast<double>(width))),
          make_linear(ps, name + ".fc2", 2 * teacher_dim, teacher_dim, seed,
                      1.0 / std::sqrt(static_cast<double>(2 * teacher_dim)))};
}

template <class T>
Tensor<T> to_tensor(const FeatureGrid& g) {
  return Tensor<T>::constant({g.rows, g.cols}, std::vector<T>(g.data.begin(), g.data.end()));
}

/// Negative mean cosine similarity between projected features (N x d after
/// `project`) and fixed targets (N x d_t).
template <class T>
Tensor<T> negative_cosine(const Tensor<T>& projected, const Tensor<T>& targets) {
  if (projected.shape() != targets.shape()) {
    throw ValidationError("alignment: features " + shape_str(projected.shape()) + " vs targets " +
                          shape_str(targets.shape()));
  }
  return scale(mean(cosine_similarity(targets, projected)), T(-1));
}

template <class T, class Head>
Tensor<T> align_loss(const Tensor<T>& features, const Tensor<T>& targets, const Head& head) {
  if (features.rank() != 2 || targets.rank() != 2 || features.dim(0) != targets.dim(0)) {
    throw ValidationError("alignment: " + std::to_string(features.rank() == 2 ? features.dim(0) : 0) +
                          " feature rows vs " + std::to_string(targets.rank() == 2 ? targets.dim(0) : 0) +
                          " target rows");
  }
  return negative_cosine(head(features), stop_gradient(targets));
}

}  // namespace dera
