// Copyright (c) nsmpc contributors
#ifndef NSMPC_EXPR_HPP_
#define NSMPC_EXPR_HPP_

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace nsmpc::expr {

/// Scalar operations supported by the graph. kSelGe is internal: it is the
/// branch selector generated when differentiating kMax (left argument wins
/// ties) and is never produced by user-facing builder calls.
enum class Op : std::uint8_t {
  kConst,
  kVar,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kSqrt,
  kMax,
  kPow,    // operand ^ constant exponent (exponent stored in value)
  kSelGe,  // a >= b ? u : v
};

struct Node {
  Op op = Op::kConst;
  std::int32_t a = -1;
  std::int32_t b = -1;
  std::int32_t c = -1;
  std::int32_t d = -1;
  double value = 0.0;  // constant payload, or exponent for kPow
};

/// Named input block of a function: a contiguous group of scalar variables.
struct Block {
  std::string name;
  int size = 0;
};

class ExprError : public std::runtime_error {
 public:
  ExprError(std::string msg, int node_id = -1)
      : std::runtime_error(std::move(msg)), node(node_id) {}
  int node = -1;
};

namespace detail {
struct GraphData {
  std::vector<Node> nodes;
  std::vector<Block> inputs;
  std::vector<std::int32_t> outputs;
  // Optional structural sparsity (row, col) per output entry; used by
  // jacobian()/lagrangian_hessian() results. Empty for plain functions.
  std::vector<std::pair<int, int>> sparsity;
  int sparse_rows = 0;
  int sparse_cols = 0;
  bool lower_triangular = false;

  int input_size() const;
  int block_index(std::string_view name) const;
  int block_offset(int block) const;
};
}  // namespace detail

/// Reusable evaluation scratch. One per thread of evaluation.
class Workspace {
 public:
  std::vector<double>& values() { return values_; }
  std::vector<double>& flat() { return flat_; }

 private:
  std::vector<double> values_;
  std::vector<double> flat_;
};

/// Immutable function built on an expression graph. Evaluation is reentrant;
/// concurrent calls need distinct Workspace objects.
class FunctionHandle {
 public:
  FunctionHandle() = default;

  int output_size() const { return data_ ? int(data_->outputs.size()) : 0; }
  const std::vector<Block>& inputs() const { return data_->inputs; }
  int input_size() const { return data_->input_size(); }
  std::size_t node_count() const { return data_ ? data_->nodes.size() : 0; }
  bool valid() const { return data_ != nullptr; }

  /// Evaluates outputs into `out`. `blocks` must match the declared layout
  /// in order and size. sqrt of a negative argument and non-finite outputs
  /// raise ExprError naming the offending node/output.
  void eval(std::span<const std::span<const double>> blocks,
            std::span<double> out, Workspace& ws) const;

  /// Convenience evaluation allocating its own workspace.
  std::vector<double> operator()(
      std::initializer_list<std::span<const double>> blocks) const;

  /// Structural sparsity of a derivative handle: (row, col) per output entry.
  const std::vector<std::pair<int, int>>& sparsity() const {
    return data_->sparsity;
  }
  int sparse_rows() const { return data_->sparse_rows; }
  int sparse_cols() const { return data_->sparse_cols; }
  /// True for lagrangian_hessian results: entries cover the lower triangle.
  bool lower_triangular() const { return data_->lower_triangular; }

  /// Plain-text lisp-like dump for debugging; no stability guarantees.
  std::string dump() const;

 private:
  friend class GraphBuilder;
  friend FunctionHandle jacobian(const FunctionHandle&,
                                 std::span<const std::string> wrt);
  friend FunctionHandle lagrangian_hessian(const FunctionHandle&,
                                           const FunctionHandle&,
                                           const std::string&,
                                           std::span<const std::string> wrt);
  explicit FunctionHandle(std::shared_ptr<const detail::GraphData> data)
      : data_(std::move(data)) {}
  std::shared_ptr<const detail::GraphData> data_;
};

class GraphBuilder;

/// Value-semantics reference to a node in a GraphBuilder.
class Scalar {
 public:
  Scalar() = default;

  friend Scalar operator+(Scalar x, Scalar y);
  friend Scalar operator-(Scalar x, Scalar y);
  friend Scalar operator*(Scalar x, Scalar y);
  friend Scalar operator/(Scalar x, Scalar y);
  friend Scalar operator+(Scalar x, double c);
  friend Scalar operator+(double c, Scalar x);
  friend Scalar operator-(Scalar x, double c);
  friend Scalar operator-(double c, Scalar x);
  friend Scalar operator*(Scalar x, double c);
  friend Scalar operator*(double c, Scalar x);
  friend Scalar operator/(Scalar x, double c);
  friend Scalar operator/(double c, Scalar x);
  friend Scalar operator-(Scalar x);
  friend Scalar sqrt(Scalar x);
  friend Scalar max(Scalar x, Scalar y);
  friend Scalar pow(Scalar x, double exponent);

  GraphBuilder* builder() const { return gb_; }
  std::int32_t id() const { return id_; }

 private:
  friend class GraphBuilder;
  Scalar(GraphBuilder* gb, std::int32_t id) : gb_(gb), id_(id) {}
  GraphBuilder* gb_ = nullptr;
  std::int32_t id_ = -1;
};

/// Builds expression graphs with hash-consing and algebraic simplification.
/// finish() snapshots the reachable subgraph into an immutable handle; the
/// builder stays usable, so several handles can share subexpressions.
class GraphBuilder {
 public:
  explicit GraphBuilder(std::vector<Block> inputs);

  Scalar constant(double v);
  Scalar var(std::string_view block, int index);

  /// Inlines `f` into this graph, substituting each of f's input blocks by
  /// the given argument expressions. Returns f's outputs as local nodes.
  std::vector<Scalar> call(const FunctionHandle& f,
                           const std::map<std::string, std::vector<Scalar>>& args);

  FunctionHandle finish(std::span<const Scalar> outputs) const;
  FunctionHandle finish(std::initializer_list<Scalar> outputs) const;

  const std::vector<Block>& inputs() const { return inputs_; }

  // Low-level node creation (used by the differentiation pass).
  std::int32_t add_node(Op op, std::int32_t a = -1, std::int32_t b = -1,
                        double value = 0.0, std::int32_t c = -1,
                        std::int32_t d = -1);
  Scalar wrap(std::int32_t id) { return Scalar(this, id); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  struct NodeKey {
    Op op;
    std::int32_t a, b, c, d;
    std::uint64_t value_bits;
    bool operator==(const NodeKey&) const = default;
  };
  struct NodeKeyHash {
    std::size_t operator()(const NodeKey& k) const;
  };

  std::vector<Block> inputs_;
  std::vector<int> block_offsets_;
  std::vector<Node> nodes_;
  std::unordered_map<NodeKey, std::int32_t, NodeKeyHash> cse_;
};

/// Exact Jacobian of f with respect to the listed input blocks (all blocks
/// when `wrt` is empty). The result is sparse: outputs are the structural
/// nonzeros, positions given by sparsity(). max-of-two differentiates along
/// the larger argument, left on ties.
FunctionHandle jacobian(const FunctionHandle& f,
                        std::span<const std::string> wrt = {});

/// Symmetric Hessian of objective(x) + multipliers . constraints(x) with
/// respect to the listed blocks (all of objective/constraints' blocks when
/// empty). The multiplier block is appended to the input layout under
/// `multiplier_block`. Outputs are the lower-triangle structural nonzeros.
FunctionHandle lagrangian_hessian(const FunctionHandle& objective,
                                  const FunctionHandle& constraints,
                                  const std::string& multiplier_block = "mult",
                                  std::span<const std::string> wrt = {});

/// Scatters a sparse derivative handle evaluation into a dense row-major
/// matrix (rows*cols); symmetric completion for lower-triangular handles.
std::vector<double> dense(const FunctionHandle& derivative,
                          std::span<const double> entry_values);

}  // namespace nsmpc::expr

#endif  // NSMPC_EXPR_HPP_
