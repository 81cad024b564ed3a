#pragma once

// Shared fixtures for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>

#include <Eigen/Core>

#include "cbp/predictor.hpp"
#include "cbp/scenario.hpp"

namespace cbp::testing {

// Small model for finite-difference checks.
inline PredictorConfig tiny_model(std::size_t past = 3, std::size_t future = 5) {
  PredictorConfig c;
  c.past_steps = past;
  c.future_steps = future;
  c.modes = 2;
  c.degree = 2;
  c.encoder_width = 5;
  c.trunk_width = 6;
  return c;
}

inline SimConfig tiny_sim(std::size_t past = 3, std::size_t future = 5) {
  SimConfig s;
  s.past_steps = past;
  s.future_steps = future;
  return s;
}

// Central-difference gradient of f at params.weights().
inline Eigen::VectorXd numeric_gradient(PredictorParams params,
                                        const std::function<double(const PredictorParams&)>& f,
                                        double eps) {
  Eigen::VectorXd g(params.weights().size());
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double w0 = params.weights()(i);
    params.weights()(i) = w0 + eps;
    const double up = f(params);
    params.weights()(i) = w0 - eps;
    const double down = f(params);
    params.weights()(i) = w0;
    g(i) = (up - down) / (2.0 * eps);
  }
  return g;
}

// |a - b| / max(|a|, |b|) over the whole vector.
inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / scale;
}

}  // namespace cbp::testing
