// Copyright (c) nsmpc contributors
#include "nsmpc/expr.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <sstream>

namespace nsmpc::expr {

namespace detail {

int GraphData::input_size() const {
  int n = 0;
  for (const auto& b : inputs) n += b.size;
  return n;
}

int GraphData::block_index(std::string_view name) const {
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (inputs[i].name == name) return int(i);
  return -1;
}

int GraphData::block_offset(int block) const {
  int off = 0;
  for (int i = 0; i < block; ++i) off += inputs[i].size;
  return off;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// GraphBuilder
// ---------------------------------------------------------------------------

GraphBuilder::GraphBuilder(std::vector<Block> inputs) : inputs_(std::move(inputs)) {
  int off = 0;
  for (const auto& b : inputs_) {
    if (b.size < 0) throw ExprError("negative block size for '" + b.name + "'");
    block_offsets_.push_back(off);
    off += b.size;
  }
}

std::size_t GraphBuilder::NodeKeyHash::operator()(const NodeKey& k) const {
  std::size_t h = std::hash<int>()(int(k.op));
  auto mix = [&h](std::size_t v) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  };
  mix(std::size_t(std::uint32_t(k.a)));
  mix(std::size_t(std::uint32_t(k.b)));
  mix(std::size_t(std::uint32_t(k.c)));
  mix(std::size_t(std::uint32_t(k.d)));
  mix(std::size_t(k.value_bits));
  return h;
}

namespace {
std::uint64_t bits_of(double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, sizeof(u));
  return u;
}
}  // namespace

std::int32_t GraphBuilder::add_node(Op op, std::int32_t a, std::int32_t b,
                                    double value, std::int32_t c,
                                    std::int32_t d) {
  const auto is_const = [this](std::int32_t id, double v) {
    return id >= 0 && nodes_[id].op == Op::kConst && nodes_[id].value == v;
  };
  const auto const_val = [this](std::int32_t id) { return nodes_[id].value; };
  const auto both_const = [this](std::int32_t x, std::int32_t y) {
    return nodes_[x].op == Op::kConst && nodes_[y].op == Op::kConst;
  };

  // Constant folding and identity simplification.
  switch (op) {
    case Op::kAdd:
      if (both_const(a, b)) return add_node(Op::kConst, -1, -1, const_val(a) + const_val(b));
      if (is_const(a, 0.0)) return b;
      if (is_const(b, 0.0)) return a;
      if (a > b) std::swap(a, b);  // commutative canonical order
      break;
    case Op::kSub:
      if (both_const(a, b)) return add_node(Op::kConst, -1, -1, const_val(a) - const_val(b));
      if (is_const(b, 0.0)) return a;
      if (a == b) return add_node(Op::kConst, -1, -1, 0.0);
      break;
    case Op::kMul:
      if (both_const(a, b)) return add_node(Op::kConst, -1, -1, const_val(a) * const_val(b));
      if (is_const(a, 1.0)) return b;
      if (is_const(b, 1.0)) return a;
      if (is_const(a, 0.0) || is_const(b, 0.0)) return add_node(Op::kConst, -1, -1, 0.0);
      if (a > b) std::swap(a, b);
      break;
    case Op::kDiv:
      if (both_const(a, b)) return add_node(Op::kConst, -1, -1, const_val(a) / const_val(b));
      if (is_const(b, 1.0)) return a;
      if (is_const(a, 0.0)) return a;
      break;
    case Op::kSqrt:
      if (nodes_[a].op == Op::kConst) return add_node(Op::kConst, -1, -1, std::sqrt(const_val(a)));
      break;
    case Op::kMax:
      if (both_const(a, b)) return add_node(Op::kConst, -1, -1, std::max(const_val(a), const_val(b)));
      if (a == b) return a;
      break;
    case Op::kPow:
      if (value == 1.0) return a;
      if (value == 0.0) return add_node(Op::kConst, -1, -1, 1.0);
      if (nodes_[a].op == Op::kConst) return add_node(Op::kConst, -1, -1, std::pow(const_val(a), value));
      break;
    case Op::kSelGe:
      if (c == d) return c;
      break;
    case Op::kConst:
    case Op::kVar:
      break;
  }

  NodeKey key{op, a, b, c, d, bits_of(value)};
  auto it = cse_.find(key);
  if (it != cse_.end()) return it->second;
  Node n;
  n.op = op;
  n.a = a;
  n.b = b;
  n.c = c;
  n.d = d;
  n.value = value;
  nodes_.push_back(n);
  const auto id = std::int32_t(nodes_.size() - 1);
  cse_.emplace(key, id);
  return id;
}

Scalar GraphBuilder::constant(double v) { return wrap(add_node(Op::kConst, -1, -1, v)); }

Scalar GraphBuilder::var(std::string_view block, int index) {
  for (std::size_t i = 0; i < inputs_.size(); ++i) {
    if (inputs_[i].name == block) {
      if (index < 0 || index >= inputs_[i].size)
        throw ExprError("variable index " + std::to_string(index) +
                        " out of range for block '" + std::string(block) + "'");
      const std::int32_t slot = block_offsets_[i] + index;
      return wrap(add_node(Op::kVar, slot));
    }
  }
  throw ExprError("undeclared input block '" + std::string(block) + "'");
}

std::vector<Scalar> GraphBuilder::call(
    const FunctionHandle& f, const std::map<std::string, std::vector<Scalar>>& args) {
  const auto& data = *f.data_;
  // Flattened substitution: slot in f -> node id here.
  std::vector<std::int32_t> sub(std::size_t(data.input_size()), -1);
  int off = 0;
  for (const auto& blk : data.inputs) {
    auto it = args.find(blk.name);
    if (it == args.end())
      throw ExprError("call: missing argument for block '" + blk.name + "'");
    if (int(it->second.size()) != blk.size)
      throw ExprError("call: argument size mismatch for block '" + blk.name + "'");
    for (int i = 0; i < blk.size; ++i) sub[std::size_t(off + i)] = it->second[std::size_t(i)].id();
    off += blk.size;
  }
  std::vector<std::int32_t> tr(data.nodes.size(), -1);
  for (std::size_t i = 0; i < data.nodes.size(); ++i) {
    const Node& n = data.nodes[i];
    switch (n.op) {
      case Op::kConst:
        tr[i] = add_node(Op::kConst, -1, -1, n.value);
        break;
      case Op::kVar:
        tr[i] = sub[std::size_t(n.a)];
        break;
      default:
        tr[i] = add_node(n.op, n.a >= 0 ? tr[std::size_t(n.a)] : -1,
                         n.b >= 0 ? tr[std::size_t(n.b)] : -1, n.value,
                         n.c >= 0 ? tr[std::size_t(n.c)] : -1,
                         n.d >= 0 ? tr[std::size_t(n.d)] : -1);
        break;
    }
  }
  std::vector<Scalar> out;
  out.reserve(data.outputs.size());
  for (auto o : data.outputs) out.push_back(wrap(tr[std::size_t(o)]));
  return out;
}

FunctionHandle GraphBuilder::finish(std::span<const Scalar> outputs) const {
  // Compact: keep only nodes reachable from the outputs, preserving order.
  std::vector<char> live(nodes_.size(), 0);
  for (const auto& s : outputs) {
    if (s.builder() != this) throw ExprError("finish: output from another builder");
    live[std::size_t(s.id())] = 1;
  }
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (!live[i]) continue;
    const Node& n = nodes_[i];
    for (auto v : {n.a, n.b, n.c, n.d})
      if (v >= 0 && n.op != Op::kVar) live[std::size_t(v)] = 1;
  }
  auto data = std::make_shared<detail::GraphData>();
  data->inputs = inputs_;
  std::vector<std::int32_t> remap(nodes_.size(), -1);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!live[i]) continue;
    Node n = nodes_[i];
    if (n.op != Op::kVar) {
      if (n.a >= 0) n.a = remap[std::size_t(n.a)];
      if (n.b >= 0) n.b = remap[std::size_t(n.b)];
      if (n.c >= 0) n.c = remap[std::size_t(n.c)];
      if (n.d >= 0) n.d = remap[std::size_t(n.d)];
    }
    data->nodes.push_back(n);
    remap[i] = std::int32_t(data->nodes.size() - 1);
  }
  for (const auto& s : outputs) data->outputs.push_back(remap[std::size_t(s.id())]);
  return FunctionHandle(std::move(data));
}

FunctionHandle GraphBuilder::finish(std::initializer_list<Scalar> outputs) const {
  return finish(std::span<const Scalar>(outputs.begin(), outputs.size()));
}

// ---------------------------------------------------------------------------
// Scalar operators
// ---------------------------------------------------------------------------

namespace {
GraphBuilder* common_builder(const Scalar& x, const Scalar& y) {
  if (x.builder() != y.builder())
    throw ExprError("operands belong to different builders");
  return x.builder();
}
}  // namespace

Scalar operator+(Scalar x, Scalar y) {
  auto* gb = common_builder(x, y);
  return gb->wrap(gb->add_node(Op::kAdd, x.id(), y.id()));
}
Scalar operator-(Scalar x, Scalar y) {
  auto* gb = common_builder(x, y);
  return gb->wrap(gb->add_node(Op::kSub, x.id(), y.id()));
}
Scalar operator*(Scalar x, Scalar y) {
  auto* gb = common_builder(x, y);
  return gb->wrap(gb->add_node(Op::kMul, x.id(), y.id()));
}
Scalar operator/(Scalar x, Scalar y) {
  auto* gb = common_builder(x, y);
  return gb->wrap(gb->add_node(Op::kDiv, x.id(), y.id()));
}
Scalar operator+(Scalar x, double c) { return x + x.builder()->constant(c); }
Scalar operator+(double c, Scalar x) { return x.builder()->constant(c) + x; }
Scalar operator-(Scalar x, double c) { return x - x.builder()->constant(c); }
Scalar operator-(double c, Scalar x) { return x.builder()->constant(c) - x; }
Scalar operator*(Scalar x, double c) { return x * x.builder()->constant(c); }
Scalar operator*(double c, Scalar x) { return x.builder()->constant(c) * x; }
Scalar operator/(Scalar x, double c) { return x / x.builder()->constant(c); }
Scalar operator/(double c, Scalar x) { return x.builder()->constant(c) / x; }
Scalar operator-(Scalar x) { return x.builder()->constant(0.0) - x; }
Scalar sqrt(Scalar x) {
  auto* gb = x.builder();
  return gb->wrap(gb->add_node(Op::kSqrt, x.id()));
}
Scalar max(Scalar x, Scalar y) {
  auto* gb = common_builder(x, y);
  return gb->wrap(gb->add_node(Op::kMax, x.id(), y.id()));
}
Scalar pow(Scalar x, double exponent) {
  auto* gb = x.builder();
  return gb->wrap(gb->add_node(Op::kPow, x.id(), -1, exponent));
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

void FunctionHandle::eval(std::span<const std::span<const double>> blocks,
                          std::span<double> out, Workspace& ws) const {
  const auto& data = *data_;
  if (blocks.size() != data.inputs.size())
    throw ExprError("eval: expected " + std::to_string(data.inputs.size()) +
                    " input blocks, got " + std::to_string(blocks.size()));
  for (std::size_t i = 0; i < blocks.size(); ++i)
    if (int(blocks[i].size()) != data.inputs[i].size)
      throw ExprError("eval: size mismatch for block '" + data.inputs[i].name + "'");
  if (int(out.size()) != int(data.outputs.size()))
    throw ExprError("eval: output size mismatch");

  // Gather the flattened input vector once.
  const int nin = data.input_size();
  auto& vals = ws.values();
  vals.resize(data.nodes.size());
  auto& flat = ws.flat();
  flat.resize(std::size_t(nin));
  {
    int off = 0;
    for (const auto& blk : blocks) {
      std::copy(blk.begin(), blk.end(), flat.begin() + off);
      off += int(blk.size());
    }
  }

  const Node* nds = data.nodes.data();
  double* v = vals.data();
  const std::size_t n = data.nodes.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Node& nd = nds[i];
    switch (nd.op) {
      case Op::kConst: v[i] = nd.value; break;
      case Op::kVar: v[i] = flat[std::size_t(nd.a)]; break;
      case Op::kAdd: v[i] = v[nd.a] + v[nd.b]; break;
      case Op::kSub: v[i] = v[nd.a] - v[nd.b]; break;
      case Op::kMul: v[i] = v[nd.a] * v[nd.b]; break;
      case Op::kDiv: v[i] = v[nd.a] / v[nd.b]; break;
      case Op::kSqrt:
        if (v[nd.a] < 0.0)
          throw ExprError("sqrt of negative argument (" + std::to_string(v[nd.a]) +
                              ") at node " + std::to_string(i),
                          int(i));
        v[i] = std::sqrt(v[nd.a]);
        break;
      case Op::kMax: v[i] = v[nd.a] >= v[nd.b] ? v[nd.a] : v[nd.b]; break;
      case Op::kPow: v[i] = std::pow(v[nd.a], nd.value); break;
      case Op::kSelGe: v[i] = v[nd.a] >= v[nd.b] ? v[nd.c] : v[nd.d]; break;
    }
  }
  for (std::size_t k = 0; k < data.outputs.size(); ++k) {
    const double y = v[data.outputs[k]];
    if (!std::isfinite(y))
      throw ExprError("non-finite value in output " + std::to_string(k),
                      int(data.outputs[k]));
    out[k] = y;
  }
}

std::vector<double> FunctionHandle::operator()(
    std::initializer_list<std::span<const double>> blocks) const {
  Workspace ws;
  std::vector<double> out(std::size_t(output_size()), 0.0);
  eval(std::span<const std::span<const double>>(blocks.begin(), blocks.size()),
       out, ws);
  return out;
}

// ---------------------------------------------------------------------------
// Differentiation
// ---------------------------------------------------------------------------

namespace {

// Reverse sweep over `nodes` seeded at `root` with adjoint 1. Emits adjoint
// node ids (in `gb`) for every kVar slot flagged in `wanted`; `tr` maps source
// nodes to their translation in gb (forward values, built lazily).
class ReverseSweep {
 public:
  ReverseSweep(const std::vector<Node>& nodes, GraphBuilder& gb,
               std::vector<std::int32_t>& tr)
      : nodes_(nodes), gb_(gb), tr_(tr), adj_(nodes.size(), -1) {}

  // Returns pairs (slot, adjoint node id), slot-sorted.
  std::vector<std::pair<int, std::int32_t>> run(std::int32_t root,
                                                const std::vector<char>& wanted) {
    for (auto i : touched_) adj_[std::size_t(i)] = -1;
    touched_.clear();
    std::vector<std::pair<int, std::int32_t>> grad;
    seed(root, one());
    for (std::int32_t i = root; i >= 0; --i) {
      const std::int32_t a = adj_[std::size_t(i)];
      if (a < 0) continue;
      const Node& n = nodes_[std::size_t(i)];
      switch (n.op) {
        case Op::kConst:
          break;
        case Op::kVar:
          if (wanted[std::size_t(n.a)]) grad.emplace_back(n.a, a);
          break;
        case Op::kAdd:
          seed(n.a, a);
          seed(n.b, a);
          break;
        case Op::kSub:
          seed(n.a, a);
          seed(n.b, gb_.add_node(Op::kSub, zero(), a));
          break;
        case Op::kMul:
          seed(n.a, gb_.add_node(Op::kMul, a, fwd(n.b)));
          seed(n.b, gb_.add_node(Op::kMul, a, fwd(n.a)));
          break;
        case Op::kDiv: {
          const auto B = fwd(n.b);
          const auto q = gb_.add_node(Op::kDiv, a, B);
          seed(n.a, q);
          // d/db (a/b) = -(a/b)/b
          const auto self = fwd(std::int32_t(i));
          const auto t = gb_.add_node(Op::kMul, a, gb_.add_node(Op::kDiv, self, B));
          seed(n.b, gb_.add_node(Op::kSub, zero(), t));
          break;
        }
        case Op::kSqrt: {
          const auto self = fwd(std::int32_t(i));
          const auto denom = gb_.add_node(Op::kMul, gb_.add_node(Op::kConst, -1, -1, 2.0), self);
          seed(n.a, gb_.add_node(Op::kDiv, a, denom));
          break;
        }
        case Op::kMax: {
          const auto A = fwd(n.a), B = fwd(n.b);
          seed(n.a, gb_.add_node(Op::kSelGe, A, B, 0.0, a, zero()));
          seed(n.b, gb_.add_node(Op::kSelGe, A, B, 0.0, zero(), a));
          break;
        }
        case Op::kPow: {
          // d/dx x^p = p * x^(p-1)
          const auto A = fwd(n.a);
          const auto xp1 = gb_.add_node(Op::kPow, A, -1, n.value - 1.0);
          const auto p = gb_.add_node(Op::kConst, -1, -1, n.value);
          seed(n.a, gb_.add_node(Op::kMul, a, gb_.add_node(Op::kMul, p, xp1)));
          break;
        }
        case Op::kSelGe: {
          const auto A = fwd(n.a), B = fwd(n.b);
          seed(n.c, gb_.add_node(Op::kSelGe, A, B, 0.0, a, zero()));
          seed(n.d, gb_.add_node(Op::kSelGe, A, B, 0.0, zero(), a));
          break;
        }
      }
    }
    std::sort(grad.begin(), grad.end());
    return grad;
  }

 private:
  std::int32_t fwd(std::int32_t src) {
    if (tr_[std::size_t(src)] >= 0) return tr_[std::size_t(src)];
    const Node& n = nodes_[std::size_t(src)];
    std::int32_t id;
    switch (n.op) {
      case Op::kConst: id = gb_.add_node(Op::kConst, -1, -1, n.value); break;
      case Op::kVar: id = gb_.var(block_of(n.a), index_of(n.a)).id(); break;
      default:
        id = gb_.add_node(n.op, n.a >= 0 ? fwd(n.a) : -1, n.b >= 0 ? fwd(n.b) : -1,
                          n.value, n.c >= 0 ? fwd(n.c) : -1,
                          n.d >= 0 ? fwd(n.d) : -1);
        break;
    }
    tr_[std::size_t(src)] = id;
    return id;
  }

  std::string block_of(std::int32_t slot) const {
    int off = 0;
    for (const auto& b : gb_.inputs()) {
      if (slot < off + b.size) return b.name;
      off += b.size;
    }
    throw ExprError("internal: slot outside layout");
  }
  int index_of(std::int32_t slot) const {
    int off = 0;
    for (const auto& b : gb_.inputs()) {
      if (slot < off + b.size) return slot - off;
      off += b.size;
    }
    throw ExprError("internal: slot outside layout");
  }

  void seed(std::int32_t node, std::int32_t amt) {
    auto& slot = adj_[std::size_t(node)];
    if (slot < 0) {
      slot = amt;
      touched_.push_back(node);
    } else {
      slot = gb_.add_node(Op::kAdd, slot, amt);
    }
  }
  std::int32_t zero() { return gb_.add_node(Op::kConst, -1, -1, 0.0); }
  std::int32_t one() { return gb_.add_node(Op::kConst, -1, -1, 1.0); }

  const std::vector<Node>& nodes_;
  GraphBuilder& gb_;
  std::vector<std::int32_t>& tr_;
  std::vector<std::int32_t> adj_;
  std::vector<std::int32_t> touched_;
};

std::vector<char> wanted_slots(const std::vector<Block>& blocks,
                               std::span<const std::string> wrt, int total,
                               std::vector<int>& slot_to_col) {
  std::vector<char> wanted(std::size_t(total), 0);
  slot_to_col.assign(std::size_t(total), -1);
  int col = 0, off = 0;
  for (const auto& b : blocks) {
    const bool take =
        wrt.empty() || std::find(wrt.begin(), wrt.end(), b.name) != wrt.end();
    for (int i = 0; i < b.size; ++i) {
      if (take) {
        wanted[std::size_t(off + i)] = 1;
        slot_to_col[std::size_t(off + i)] = col++;
      }
    }
    off += b.size;
  }
  return wanted;
}

}  // namespace

FunctionHandle jacobian(const FunctionHandle& f, std::span<const std::string> wrt) {
  const auto& data = *f.data_;
  GraphBuilder gb(data.inputs);
  std::vector<std::int32_t> tr(data.nodes.size(), -1);
  std::vector<int> slot_to_col;
  const auto wanted = wanted_slots(data.inputs, wrt, data.input_size(), slot_to_col);
  int ncols = 0;
  for (auto c : slot_to_col) ncols = std::max(ncols, c + 1);

  ReverseSweep sweep(data.nodes, gb, tr);
  std::vector<Scalar> entries;
  std::vector<std::pair<int, int>> pattern;
  for (std::size_t r = 0; r < data.outputs.size(); ++r) {
    for (const auto& [slot, node] : sweep.run(data.outputs[r], wanted)) {
      pattern.emplace_back(int(r), slot_to_col[std::size_t(slot)]);
      entries.push_back(gb.wrap(node));
    }
  }
  FunctionHandle h = gb.finish(entries);
  auto mutable_data = std::const_pointer_cast<detail::GraphData>(h.data_);
  mutable_data->sparsity = std::move(pattern);
  mutable_data->sparse_rows = int(data.outputs.size());
  mutable_data->sparse_cols = ncols;
  return h;
}

FunctionHandle lagrangian_hessian(const FunctionHandle& objective,
                                  const FunctionHandle& constraints,
                                  const std::string& multiplier_block,
                                  std::span<const std::string> wrt) {
  if (objective.output_size() != 1)
    throw ExprError("lagrangian_hessian: objective must be scalar");
  // Union layout of both functions, plus the multiplier block.
  std::vector<Block> layout = objective.data_->inputs;
  if (constraints.valid()) {
    for (const auto& b : constraints.data_->inputs) {
      bool found = false;
      for (const auto& e : layout) {
        if (e.name == b.name) {
          if (e.size != b.size)
            throw ExprError("lagrangian_hessian: block '" + b.name + "' size conflict");
          found = true;
        }
      }
      if (!found) layout.push_back(b);
    }
  }
  const int n_mult = constraints.valid() ? constraints.output_size() : 0;
  for (const auto& b : layout)
    if (b.name == multiplier_block)
      throw ExprError("lagrangian_hessian: multiplier block name collides");
  layout.push_back(Block{multiplier_block, n_mult});

  GraphBuilder gb(layout);
  const auto blocks_of = [&gb](const FunctionHandle& h) {
    std::map<std::string, std::vector<Scalar>> args;
    for (const auto& b : h.data_->inputs) {
      std::vector<Scalar> v;
      v.reserve(std::size_t(b.size));
      for (int i = 0; i < b.size; ++i) v.push_back(gb.var(b.name, i));
      args.emplace(b.name, std::move(v));
    }
    return args;
  };

  Scalar lag = gb.call(objective, blocks_of(objective))[0];
  if (n_mult > 0) {
    auto cons = gb.call(constraints, blocks_of(constraints));
    for (int i = 0; i < n_mult; ++i)
      lag = lag + gb.var(multiplier_block, i) * cons[std::size_t(i)];
  }

  // The Hessian is taken with respect to the primal blocks only; the
  // multiplier block is excluded unless explicitly requested.
  std::vector<std::string> primal;
  if (wrt.empty()) {
    for (const auto& b : layout)
      if (b.name != multiplier_block) primal.push_back(b.name);
  } else {
    primal.assign(wrt.begin(), wrt.end());
  }

  int total = 0;
  for (const auto& b : layout) total += b.size;
  std::vector<int> slot_to_col;
  const auto wanted = wanted_slots(layout, primal, total, slot_to_col);
  int ncols = 0;
  for (auto c : slot_to_col) ncols = std::max(ncols, c + 1);

  // Gradient of the Lagrangian (first reverse sweep on the builder graph).
  std::vector<std::int32_t> tr0(gb.nodes().size(), -1);
  for (std::size_t i = 0; i < tr0.size(); ++i) tr0[i] = std::int32_t(i);  // same graph
  std::vector<Node> snapshot = gb.nodes();
  ReverseSweep sweep0(snapshot, gb, tr0);
  auto grad = sweep0.run(lag.id(), wanted);

  // Second sweeps: one per structurally-present gradient component.
  std::vector<Node> snapshot2 = gb.nodes();
  std::vector<std::int32_t> tr1(snapshot2.size(), -1);
  for (std::size_t i = 0; i < tr1.size(); ++i) tr1[i] = std::int32_t(i);
  ReverseSweep sweep1(snapshot2, gb, tr1);

  std::map<std::pair<int, int>, std::int32_t> lower;  // (row,col) col<=row
  for (const auto& [slot_i, gnode] : grad) {
    const int row = slot_to_col[std::size_t(slot_i)];
    for (const auto& [slot_j, hnode] : sweep1.run(gnode, wanted)) {
      const int col = slot_to_col[std::size_t(slot_j)];
      const auto key = row >= col ? std::make_pair(row, col) : std::make_pair(col, row);
      // Keep the first expression encountered; symmetric counterparts are
      // mathematically equal.
      lower.emplace(key, hnode);
    }
  }

  std::vector<Scalar> entries;
  std::vector<std::pair<int, int>> pattern;
  for (const auto& [rc, node] : lower) {
    pattern.push_back(rc);
    entries.push_back(gb.wrap(node));
  }
  FunctionHandle h = gb.finish(entries);
  auto mutable_data = std::const_pointer_cast<detail::GraphData>(h.data_);
  mutable_data->sparsity = std::move(pattern);
  mutable_data->sparse_rows = ncols;
  mutable_data->sparse_cols = ncols;
  mutable_data->lower_triangular = true;
  return h;
}

std::vector<double> dense(const FunctionHandle& derivative,
                          std::span<const double> entry_values) {
  const int rows = derivative.sparse_rows();
  const int cols = derivative.sparse_cols();
  const auto& pat = derivative.sparsity();
  if (entry_values.size() != pat.size())
    throw ExprError("dense: entry count mismatch");
  std::vector<double> m(std::size_t(rows) * std::size_t(cols), 0.0);
  for (std::size_t k = 0; k < pat.size(); ++k) {
    const auto [r, c] = pat[k];
    m[std::size_t(r) * std::size_t(cols) + std::size_t(c)] = entry_values[k];
    if (derivative.lower_triangular() && r != c)
      m[std::size_t(c) * std::size_t(cols) + std::size_t(r)] = entry_values[k];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Debug dump
// ---------------------------------------------------------------------------

std::string FunctionHandle::dump() const {
  const auto& data = *data_;
  std::ostringstream os;
  std::function<void(std::int32_t)> rec = [&](std::int32_t id) {
    const Node& n = data.nodes[std::size_t(id)];
    switch (n.op) {
      case Op::kConst: os << n.value; return;
      case Op::kVar: {
        int off = 0;
        for (const auto& b : data.inputs) {
          if (n.a < off + b.size) {
            os << "(var " << b.name << " " << (n.a - off) << ")";
            return;
          }
          off += b.size;
        }
        os << "(var ? " << n.a << ")";
        return;
      }
      case Op::kAdd: os << "(+ "; break;
      case Op::kSub: os << "(- "; break;
      case Op::kMul: os << "(* "; break;
      case Op::kDiv: os << "(/ "; break;
      case Op::kSqrt: os << "(sqrt "; break;
      case Op::kMax: os << "(max "; break;
      case Op::kPow: os << "(pow "; break;
      case Op::kSelGe: os << "(sel-ge "; break;
    }
    bool first = true;
    for (auto v : {n.a, n.b, n.c, n.d}) {
      if (v < 0) continue;
      if (!first) os << " ";
      rec(v);
      first = false;
    }
    if (n.op == Op::kPow) os << " " << n.value;
    os << ")";
  };
  for (std::size_t k = 0; k < data.outputs.size(); ++k) {
    os << "(out" << k << " ";
    rec(data.outputs[k]);
    os << ")\n";
  }
  return os.str();
}

}  // namespace nsmpc::expr
