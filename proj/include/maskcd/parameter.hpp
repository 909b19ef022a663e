#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "maskcd/tensor.hpp"

namespace maskcd {

/// The single random source of a run. Default seed matches the reference training setup.
using Rng = std::mt19937_64;
inline constexpr std::uint64_t kDefaultSeed = 8888;

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

struct Parameter {
  std::string name;
  Tensor tensor;
  AdamState adam;
};

enum class Init { Zeros, Ones, Normal002, XavierUniform, KaimingUniform, StandardNormal };

inline void initialize(std::vector<double>& data, const Shape& shape, Init init, Rng& rng) {
  switch (init) {
    case Init::Zeros:
      std::fill(data.begin(), data.end(), 0.0);
      return;
    case Init::Ones:
      std::fill(data.begin(), data.end(), 1.0);
      return;
    case Init::StandardNormal: {
      std::normal_distribution<double> dist(0.0, 1.0);
      for (double& v : data) v = dist(rng);
      return;
    }
    case Init::Normal002: {
      // Truncated at two standard deviations.
      std::normal_distribution<double> dist(0.0, 0.02);
      for (double& v : data) {
        do v = dist(rng);
        while (std::abs(v) > 0.04);
      }
      return;
    }
    case Init::XavierUniform:
    case Init::KaimingUniform: {
      // Weights are stored [fan_in, fan_out] for linear layers and [O, C, kh, kw] for kernels.
      double fan_in = 1, fan_out = 1;
      if (shape.size() == 2) {
        fan_in = static_cast<double>(shape[0]);
        fan_out = static_cast<double>(shape[1]);
      } else if (shape.size() == 4) {
        const double rf = static_cast<double>(shape[2] * shape[3]);
        fan_in = static_cast<double>(shape[1]) * rf;
        fan_out = static_cast<double>(shape[0]) * rf;
      } else if (!shape.empty()) {
        fan_in = fan_out = static_cast<double>(shape.back());
      }
      const double bound = init == Init::XavierUniform ? std::sqrt(6.0 / (fan_in + fan_out)) : std::sqrt(1.0 / fan_in);
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (double& v : data) v = dist(rng);
      return;
    }
  }
}

/// Owns every learnable tensor of a model under a unique dotted name.
/// Iteration order is registration order, which keeps optimizer updates
/// and checkpoints deterministic.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Tensor create(const std::string& name, Shape shape, Init init, Rng& rng) {
    if (index_.count(name)) throw UsageError("duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->tensor = Tensor(std::move(shape));
    initialize(data_of(p->tensor), p->tensor.shape(), init, rng);
    p->tensor.set_requires_grad(true);
    p->tensor.zero_grad();
    p->adam.m.assign(p->tensor.size(), 0.0);
    p->adam.v.assign(p->tensor.size(), 0.0);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return params_.back()->tensor;
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  Parameter* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& p : params_) out.push_back(p->name);
    return out;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->tensor.zero_grad();
  }

 private:
  static std::vector<double>& data_of(Tensor& t) { return t.impl()->data; }

  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

/// One bias-corrected Adam update on every parameter, then clears gradients.
/// Throws NumericError naming the first parameter with a non-finite gradient;
/// in that case no parameter is modified.
inline void adam_step(ParameterStore& store, double lr, const AdamOptions& opt = {}) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Parameter& p = store[i];
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store[i];
    auto& st = p.adam;
    ++st.step;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(st.step));
    std::span<double> w = p.tensor.mutable_data();
    const std::span<const double> g = p.tensor.grad();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g.empty() ? 0.0 : g[k];
      st.m[k] = opt.beta1 * st.m[k] + (1.0 - opt.beta1) * gk;
      st.v[k] = opt.beta2 * st.v[k] + (1.0 - opt.beta2) * gk * gk;
      const double mhat = st.m[k] / bc1;
      const double vhat = st.v[k] / bc2;
      w[k] -= lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
    p.tensor.zero_grad();
  }
}

}  // namespace maskcd
