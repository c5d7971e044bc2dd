#include "structie/optim.hpp"

#include <cmath>

#include "structie/error.hpp"

namespace structie {

Tensor ParameterStore::add(const std::string& name, Shape shape, std::vector<double> init) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  Tensor t = Tensor::parameter(name, shape, std::move(init));
  index_[name] = params_.size();
  params_.push_back(t);
  return t;
}

Tensor ParameterStore::add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
  std::vector<double> init(shape.size());
  for (double& x : init) x = rng.normal(0.0, stddev);
  return add(name, shape, std::move(init));
}

Tensor ParameterStore::add_constant(const std::string& name, Shape shape, double value) {
  return add(name, shape, std::vector<double>(shape.size(), value));
}

const Tensor& ParameterStore::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return params_[it->second];
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.size();
  return total;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void sgd_step(std::vector<Tensor>& params, double lr) {
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    auto x = p.mutable_data();
    const auto g = p.grad();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= lr * g[i];
    p.clear_grad();
  }
}

double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  double ss = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) ss += g * g;
  }
  const double norm = std::sqrt(ss);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

void Adam::step(std::vector<Tensor>& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (auto& p : params) {
    // Parameters that took no part in the loss keep their value and moments.
    if (!p.has_grad()) continue;
    auto& st = state_[p.name()];
    if (st.m.size() != p.size()) {
      st.m.assign(p.size(), 0.0);
      st.v.assign(p.size(), 0.0);
    }
    auto x = p.mutable_data();
    const auto g = p.grad();
    for (std::size_t i = 0; i < x.size(); ++i) {
      st.m[i] = options_.beta1 * st.m[i] + (1.0 - options_.beta1) * g[i];
      st.v[i] = options_.beta2 * st.v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      const double m_hat = st.m[i] / bc1;
      const double v_hat = st.v[i] / bc2;
      x[i] -= options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
    p.clear_grad();
  }
}

}  // namespace structie
