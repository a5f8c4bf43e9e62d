// Copyright (c) nsmpc contributors
#include "nsmpc/pss.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <map>

namespace nsmpc::pss {

void validate(const PssModel& model) {
  if (model.mode_count() < 1)
    throw expr::ExprError("PssModel needs at least one mode");
  if (model.n_x <= 0) throw expr::ExprError("PssModel: n_x must be positive");
  for (const auto& f : model.modes) {
    if (f.output_size() != model.n_x)
      throw expr::ExprError("PssModel: mode output dimension != n_x");
    const auto& in = f.inputs();
    if (in.size() != 2 || in[0].name != "x" || in[1].name != "u" ||
        in[0].size != model.n_x || in[1].size != model.n_u)
      throw expr::ExprError("PssModel: mode must take blocks (x,u)");
  }
  if (model.discriminants.output_size() != model.mode_count())
    throw expr::ExprError("PssModel: discriminant count != mode count");
  const auto& gi = model.discriminants.inputs();
  if (gi.size() != 1 || gi[0].name != "x" || gi[0].size != model.n_x)
    throw expr::ExprError("PssModel: discriminants must take block (x)");
}

DcsModel build_stewart_dcs(const PssModel& model) {
  validate(model);
  const int m = model.mode_count();
  DcsModel dcs;
  dcs.pss = model;

  {
    expr::GraphBuilder gb({{"x", model.n_x}, {"u", model.n_u}, {"theta", m}});
    std::map<std::string, std::vector<expr::Scalar>> args;
    std::vector<expr::Scalar> xs, us;
    for (int i = 0; i < model.n_x; ++i) xs.push_back(gb.var("x", i));
    for (int i = 0; i < model.n_u; ++i) us.push_back(gb.var("u", i));
    args.emplace("x", xs);
    args.emplace("u", us);
    std::vector<expr::Scalar> sum(std::size_t(model.n_x), gb.constant(0.0));
    for (int i = 0; i < m; ++i) {
      auto fi = gb.call(model.modes[std::size_t(i)], args);
      auto th = gb.var("theta", i);
      for (int r = 0; r < model.n_x; ++r)
        sum[std::size_t(r)] = sum[std::size_t(r)] + th * fi[std::size_t(r)];
    }
    dcs.rhs = gb.finish(sum);
  }

  {
    expr::GraphBuilder gb(
        {{"x", model.n_x}, {"theta", m}, {"lambda", m}, {"mu", 1}});
    std::vector<expr::Scalar> xs;
    for (int i = 0; i < model.n_x; ++i) xs.push_back(gb.var("x", i));
    auto g = gb.call(model.discriminants, {{"x", xs}});
    auto mu = gb.var("mu", 0);
    std::vector<expr::Scalar> out;
    for (int i = 0; i < m; ++i)
      out.push_back(g[std::size_t(i)] - gb.var("lambda", i) - mu);
    auto simplex = gb.constant(1.0);
    for (int i = 0; i < m; ++i) simplex = simplex - gb.var("theta", i);
    out.push_back(simplex);
    dcs.kkt_residual = gb.finish(out);
  }

  for (int i = 0; i < m; ++i) dcs.complementarity_pairs.emplace_back(i, i);
  return dcs;
}

RegionQuery select_region(const PssModel& model, std::span<const double> x,
                          double tie_tol) {
  std::vector<double> g(std::size_t(model.mode_count()), 0.0);
  expr::Workspace ws;
  std::array<std::span<const double>, 1> blocks{x};
  model.discriminants.eval(blocks, g, ws);

  RegionQuery q;
  q.index = int(std::min_element(g.begin(), g.end()) - g.begin());
  const double gmin = g[std::size_t(q.index)];
  double second = std::numeric_limits<double>::infinity();
  for (int i = 0; i < int(g.size()); ++i) {
    if (i == q.index) continue;
    second = std::min(second, g[std::size_t(i)]);
  }
  q.gap = second - gmin;
  if (int(g.size()) > 1 && q.gap < tie_tol) {
    q.tie = true;
    for (int i = 0; i < int(g.size()); ++i)
      if (g[std::size_t(i)] - gmin < tie_tol) q.tied.push_back(i);
  }
  return q;
}

SelectorSolution solve_selector_lp(std::span<const double> g_values) {
  const int m = int(g_values.size());
  SelectorSolution s;
  s.theta = Eigen::VectorXd::Zero(m);
  s.lambda = Eigen::VectorXd::Zero(m);
  s.mu = *std::min_element(g_values.begin(), g_values.end());
  int support = 0;
  for (int i = 0; i < m; ++i)
    if (g_values[std::size_t(i)] == s.mu) ++support;
  for (int i = 0; i < m; ++i) {
    s.lambda[i] = g_values[std::size_t(i)] - s.mu;
    if (g_values[std::size_t(i)] == s.mu) s.theta[i] = 1.0 / support;
  }
  return s;
}

}  // namespace nsmpc::pss
