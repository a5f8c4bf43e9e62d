// Copyright (c) nsmpc contributors
#ifndef NSMPC_PSS_HPP_
#define NSMPC_PSS_HPP_

#include <Eigen/Core>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nsmpc/expr.hpp"

namespace nsmpc::pss {

/// Piecewise-smooth system: m smooth vector fields f_i(x,u) on regions
/// encoded by discriminant functions g(x); region i is active where g_i is
/// the strict minimum. The boundary set is the tie set of g.
struct PssModel {
  int n_x = 0;
  int n_u = 0;
  std::vector<expr::FunctionHandle> modes;  // blocks ("x","u") -> n_x each
  expr::FunctionHandle discriminants;       // block ("x") -> m
  std::vector<std::string> labels;

  int mode_count() const { return int(modes.size()); }
};

/// Validates dimensions and block layout; throws expr::ExprError on mismatch.
void validate(const PssModel& model);

/// Dynamic complementarity system derived from the KKT conditions of the
/// selector LP  min_theta g(x)'theta  s.t.  1'theta = 1, theta >= 0.
struct DcsModel {
  PssModel pss;
  /// Filippov right-hand side sum_i theta_i f_i(x,u); blocks ("x","u","theta").
  expr::FunctionHandle rhs;
  /// Stacked [g(x) - lambda - mu*1; 1 - 1'theta]; blocks
  /// ("x","theta","lambda","mu") -> m+1.
  expr::FunctionHandle kkt_residual;
  /// Pairing (theta_i, lambda_i), indices into the respective blocks.
  std::vector<std::pair<int, int>> complementarity_pairs;
};

DcsModel build_stewart_dcs(const PssModel& model);

struct RegionQuery {
  int index = -1;
  bool tie = false;
  double gap = 0.0;            // separation between the two smallest g values
  std::vector<int> tied;       // argmin set when tie is reported
};

/// argmin over the discriminants with tie reporting (absolute tolerance).
RegionQuery select_region(const PssModel& model, std::span<const double> x,
                          double tie_tol = 1e-12);

struct SelectorSolution {
  Eigen::VectorXd theta;
  Eigen::VectorXd lambda;
  double mu = 0.0;
};

/// Closed-form selector LP solution: mu = min g, lambda = g - mu*1, theta
/// uniform over the exact argmin set. Zeroes the KKT residual and satisfies
/// theta'lambda = 0 exactly.
SelectorSolution solve_selector_lp(std::span<const double> g_values);

}  // namespace nsmpc::pss

#endif  // NSMPC_PSS_HPP_
