#pragma once

#include <Eigen/Dense>
#include <vector>

#include "adl/errors.hpp"

namespace adl {

/// Rank-1 projector along `direction`: keep the source's component on the
/// direction, keep the target's component off it.
///   out = P*source + (I-P)*target,  P = dd^T / (d^T d)
inline Eigen::VectorXf project_replace(const Eigen::VectorXf& target,
                                       const Eigen::VectorXf& source,
                                       const Eigen::VectorXf& direction) {
  if (target.size() != source.size() || target.size() != direction.size())
    throw ValidationError("project_replace dimension mismatch");
  float dd = direction.squaredNorm();
  if (dd == 0.0f) throw NumericError("project_replace direction has zero norm");
  float cs = direction.dot(source) / dd;
  float ct = direction.dot(target) / dd;
  return target + (cs - ct) * direction;
}

/// Gram-Schmidt with near-dependent vectors dropped. Rows in, rows out.
inline std::vector<Eigen::VectorXf> orthonormalize(const std::vector<Eigen::VectorXf>& vectors,
                                                   float tol = 1e-6f) {
  std::vector<Eigen::VectorXf> basis;
  for (const auto& v : vectors) {
    if (v.size() == 0) throw ValidationError("orthonormalize: empty vector");
    Eigen::VectorXf u = v;
    for (const auto& b : basis) u -= b.dot(u) * b;
    float n = u.norm();
    if (n > tol * std::max(1.0f, v.norm())) basis.push_back(u / n);
  }
  return basis;
}

/// Remove the span of an orthonormal basis from h: h - sum_b <b,h> b.
inline Eigen::VectorXf ablate_span(const Eigen::VectorXf& h,
                                   const std::vector<Eigen::VectorXf>& basis) {
  Eigen::VectorXf out = h;
  for (const auto& b : basis) out -= b.dot(out) * b;
  return out;
}

}  // namespace adl
