#include "poolnet/adam.hpp"

#include <cmath>

namespace poolnet {

template <typename T>
BasicAdam<T>::BasicAdam(std::vector<BasicTensor<T>> parameters,
                        AdamHyperparameters hyper)
    : params_(std::move(parameters)), hyper_(hyper) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(BasicTensor<T>::zeros(p.shape()));
    v_.push_back(BasicTensor<T>::zeros(p.shape()));
  }
}

template <typename T>
void BasicAdam<T>::step() {
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double correction1 = 1.0 - std::pow(hyper_.beta1, t);
  const double correction2 = 1.0 - std::pow(hyper_.beta2, t);
  const T b1 = T(hyper_.beta1), b2 = T(hyper_.beta2);
  for (std::size_t p = 0; p < params_.size(); ++p) {
    auto& param = params_[p];
    if (!param.has_grad()) {
      param.mutable_grad();  // no buffer yet: zero gradient
    }
    auto values = param.mutable_data();
    const auto grad = param.grad();
    auto m = m_[p].mutable_data();
    auto v = v_[p].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T g = grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const double m_hat = double(m[i]) / correction1;
      const double v_hat = double(v[i]) / correction2;
      values[i] -= T(hyper_.learning_rate * m_hat /
                     (std::sqrt(v_hat) + hyper_.epsilon));
    }
  }
}

template <typename T>
void BasicAdam<T>::zero_grad() {
  for (auto& p : params_) {
    p.zero_grad();
  }
}

template <typename T>
void BasicAdam<T>::restore(std::vector<BasicTensor<T>> first,
                           std::vector<BasicTensor<T>> second,
                           std::uint64_t step_count) {
  if (first.size() != params_.size() || second.size() != params_.size()) {
    throw ContractError("Adam::restore: moment count does not match parameters");
  }
  for (std::size_t p = 0; p < params_.size(); ++p) {
    if (first[p].shape() != params_[p].shape() ||
        second[p].shape() != params_[p].shape()) {
      throw ContractError("Adam::restore: moment shape " +
                          shape_to_string(first[p].shape()) +
                          " does not match parameter " +
                          shape_to_string(params_[p].shape()));
    }
  }
  m_ = std::move(first);
  v_ = std::move(second);
  step_count_ = step_count;
}

template class BasicAdam<float>;
template class BasicAdam<double>;

}  // namespace poolnet
