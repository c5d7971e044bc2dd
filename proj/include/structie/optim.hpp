#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "structie/rng.hpp"
#include "structie/tensor.hpp"

namespace structie {

/// Ordered, uniquely named collection of trainable tensors.
class ParameterStore {
 public:
  /// Registers a parameter; names must be unique.
  Tensor add(const std::string& name, Shape shape, std::vector<double> init);
  /// Gaussian init with the given standard deviation.
  Tensor add_normal(const std::string& name, Shape shape, double stddev, Rng& rng);
  Tensor add_constant(const std::string& name, Shape shape, double value);

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::vector<Tensor>& all() { return params_; }
  const std::vector<Tensor>& all() const { return params_; }
  std::size_t scalar_count() const;

  /// Allocates zeroed gradient buffers for every parameter.
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  std::map<std::string, std::size_t> index_;
};

/// Plain gradient descent; clears the gradients afterwards.
void sgd_step(std::vector<Tensor>& params, double lr);

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  /// One bias-corrected update of every parameter that has a gradient; clears the gradients afterwards.
  void step(std::vector<Tensor>& params);

  std::int64_t steps() const { return t_; }
  const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamOptions options_;
  std::int64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace structie
