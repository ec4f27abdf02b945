#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "bittrace/kernels.hpp"
#include "bittrace/linalg.hpp"
#include "bittrace/ptensor.hpp"

namespace bittrace {

using NodeId = std::int64_t;

enum class OpKind : std::uint8_t {
    Placeholder,
    Literal,    // persistent constant/data tensor
    Parameter,  // persistent trainable tensor
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Abs,
    Relu,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Sqrt,
    MatMul,
    Permute,
    Reshape,
    ReduceSum,
    ReduceMean,
    ReduceMax,
    Im2Col,
    GatherRows,
    SubRowMax,
};

const char* op_name(OpKind k);

/// Read-only view of the temporaries a hook captured at forward time.
/// Entries are null when the underlying tensor has already been released.
struct TempView {
    std::vector<std::shared_ptr<const PTensor>> temps;
};

/// A hook observes a node's fully summed gradient after every incoming
/// contribution has been added and before any predecessor's backward runs.
/// It may return a replacement exact-bits plane to install on the gradient.
/// Hooks are once-callable; the graph drops them after the pass.
struct Hook {
    using Fn = std::function<std::optional<std::vector<ExactBits>>(
        const PTensor& summed_grad, const TempView& temps)>;
    Fn fn;
    std::vector<NodeId> capture;  // node ids whose forward values to capture
};

struct NodeAttrs {
    MatmulStrategy strategy = MatmulStrategy::Rigorous;
    int axis = -1;
    std::vector<int> perm;
    Shape shape;  // placeholder/reshape target
    Conv2dGeom conv;
    std::vector<std::int64_t> labels;
};

/// One DAG vertex: operation, edges, and (during an active pass) its value
/// and gradient tensors.
struct Node {
    NodeId id = -1;
    OpKind op = OpKind::Literal;
    NodeAttrs attrs;
    std::vector<NodeId> preds;
    std::vector<NodeId> succs;
};

/// A DAG of tracked operations with deterministic forward and backward
/// schedules.  Building is append-only; node creation order is always a
/// valid linearization, and an alternative linear extension may be supplied
/// to exercise schedule independence.
///
/// A Graph instance is single-threaded during forward/backward; distinct
/// instances may run concurrently.
class Graph {
public:
    explicit Graph(Precision p = Precision::Single);

    Precision precision() const { return prec_; }

    // -- construction -------------------------------------------------------
    NodeId placeholder(Shape shape);
    NodeId literal(PTensor t);
    NodeId parameter(PTensor t);
    /// Replaces a literal/parameter value (same shape) between passes.
    void set_value(NodeId id, PTensor t);

    NodeId add(NodeId a, NodeId b) { return binary(OpKind::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary(OpKind::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary(OpKind::Mul, a, b); }
    NodeId divide(NodeId a, NodeId b) { return binary(OpKind::Div, a, b); }
    NodeId unary(OpKind f, NodeId a);
    NodeId relu(NodeId a) { return unary(OpKind::Relu, a); }
    NodeId matmul(NodeId a, NodeId b, MatmulStrategy s = MatmulStrategy::Rigorous);
    NodeId permute(NodeId a, std::vector<int> axes);
    NodeId reshape(NodeId a, Shape shape);
    NodeId reduce(ReduceOp op, NodeId a, int axis);
    NodeId im2col(NodeId x, std::int64_t kh, std::int64_t kw, std::int64_t stride);
    NodeId gather_rows(NodeId x, std::vector<std::int64_t> labels);
    NodeId sub_rowmax(NodeId x);
    /// Rebinds the label vector of a gather_rows node between passes.
    void set_labels(NodeId id, std::vector<std::int64_t> labels);

    void set_sink(NodeId id);
    NodeId sink() const { return sink_; }

    /// Supplies an alternative topological order (must be a linear extension
    /// of the edge set over all nodes).
    void set_linearization(std::vector<NodeId> order);

    // -- execution ----------------------------------------------------------
    /// Computes every node value in schedule order; returns the sink value.
    PTensor forward(const std::unordered_map<NodeId, PTensor>& inputs);

    /// Reverse pass.  Returns gradients (with bits) for every leaf node
    /// (placeholders and parameters) that received contributions.  Releases
    /// temporaries and consumed hooks before returning.
    std::map<NodeId, PTensor> backward();

    void register_hook(NodeId id, Hook h);

    /// Drops temporary value references, remaining gradients of interior
    /// nodes, and all hooks.  Idempotent; also runs when backward unwinds.
    void release_temporaries();

    // -- introspection -------------------------------------------------------
    std::size_t node_count() const { return nodes_.size(); }
    const Node& node(NodeId id) const;
    /// Forward value handle; null when unavailable (not computed or released).
    std::shared_ptr<const PTensor> value_handle(NodeId id) const;
    const PTensor* value_of(NodeId id) const;
    /// Gradient of a leaf after backward; null otherwise.
    const PTensor* grad_of(NodeId id) const;
    /// Number of still-registered temporary value references.
    std::size_t temporary_count() const { return computed_.size(); }
    /// Node evaluations performed by the last forward pass.
    std::int64_t last_forward_evals() const { return forward_evals_; }
    /// Hook invocations performed by the last backward pass.
    std::int64_t last_hook_invocations() const { return hook_invocations_; }

    /// One line per node: `id op shape bits_min bits_max preds=[..] succs=[..]`.
    /// Shape and bits come from the current forward values where available.
    std::string debug_dump() const;

private:
    friend struct GraphExecAccess;

    struct HookRecord {
        Hook hook;
        std::vector<std::weak_ptr<const PTensor>> temp_refs;
        bool resolved = false;
        bool consumed = false;
    };

    NodeId binary(OpKind k, NodeId a, NodeId b);
    NodeId new_node(OpKind k, std::vector<NodeId> preds, NodeAttrs attrs);
    void check_id(NodeId id) const;
    void resolve_hook_captures();

    Precision prec_;
    std::vector<Node> nodes_;
    std::vector<NodeId> order_;  // linearization; creation order by default
    NodeId sink_ = -1;
    bool in_backward_ = false;

    std::unordered_map<NodeId, std::shared_ptr<const PTensor>> persistent_;
    std::unordered_map<NodeId, std::shared_ptr<const PTensor>> computed_;
    std::unordered_map<NodeId, PTensor> leaf_grads_;
    std::unordered_map<NodeId, std::vector<HookRecord>> hooks_;
    bool forward_done_ = false;
    std::int64_t forward_evals_ = 0;
    std::int64_t hook_invocations_ = 0;
};

}  // namespace bittrace
