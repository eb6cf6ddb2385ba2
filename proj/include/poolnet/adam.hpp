#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "poolnet/tensor.hpp"

namespace poolnet {

struct AdamHyperparameters {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction over a fixed list of parameter tensors.
//
// Moments are stored per parameter in the parameter's shape. step() reads the
// gradient buffer of every parameter (a parameter with no gradient buffer is
// treated as having a zero gradient) and updates values in place.
template <typename T>
class BasicAdam {
 public:
  BasicAdam(std::vector<BasicTensor<T>> parameters,
            AdamHyperparameters hyper = {});

  void step();
  void zero_grad();

  std::uint64_t step_count() const { return step_count_; }
  const AdamHyperparameters& hyperparameters() const { return hyper_; }
  const std::vector<BasicTensor<T>>& parameters() const { return params_; }
  const std::vector<BasicTensor<T>>& first_moments() const { return m_; }
  const std::vector<BasicTensor<T>>& second_moments() const { return v_; }

  // Restores moments and step counter, e.g. from a checkpoint. Shapes must
  // match the parameters.
  void restore(std::vector<BasicTensor<T>> first,
               std::vector<BasicTensor<T>> second, std::uint64_t step_count);

 private:
  std::vector<BasicTensor<T>> params_;
  std::vector<BasicTensor<T>> m_;
  std::vector<BasicTensor<T>> v_;
  AdamHyperparameters hyper_;
  std::uint64_t step_count_ = 0;
};

using Adam = BasicAdam<float>;

}  // namespace poolnet
