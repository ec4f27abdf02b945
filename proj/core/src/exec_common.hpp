#pragma once

// Shared forward/backward driver for the tracked engine and the shadow
// re-execution.  Both instantiations walk the same linearization, use the
// same per-operation kernels through an Ops policy, and sum gradient
// contributions in ascending (successor id, operand slot) order, which makes
// results independent of the particular linear extension chosen.

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <unordered_map>
#include <vector>

#include "bittrace/errors.hpp"
#include "bittrace/graph.hpp"

namespace bittrace {

struct GraphExecAccess {
    static const std::vector<Node>& nodes(const Graph& g) { return g.nodes_; }
    static const std::vector<NodeId>& order(const Graph& g) { return g.order_; }
    static std::shared_ptr<const PTensor> persistent(const Graph& g, NodeId id) {
        const auto it = g.persistent_.find(id);
        return it == g.persistent_.end() ? nullptr : it->second;
    }
};

namespace detail {

inline FuncId func_of(OpKind k) {
    switch (k) {
        case OpKind::Neg: return FuncId::Neg;
        case OpKind::Abs: return FuncId::Abs;
        case OpKind::Relu: return FuncId::Relu;
        case OpKind::Exp: return FuncId::Exp;
        case OpKind::Log: return FuncId::Log;
        case OpKind::Tanh: return FuncId::Tanh;
        case OpKind::Sigmoid: return FuncId::Sigmoid;
        case OpKind::Sqrt: return FuncId::Sqrt;
        default: throw graph_error("not a unary op");
    }
}

inline std::vector<int> inverse_perm(const std::vector<int>& axes) {
    std::vector<int> inv(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        inv[static_cast<std::size_t>(axes[i])] = static_cast<int>(i);
    }
    return inv;
}

template <class Ops>
class Evaluator {
public:
    using T = typename Ops::Tensor;
    using Handle = std::shared_ptr<const T>;
    using ValueMap = std::unordered_map<NodeId, Handle>;

    Evaluator(const Graph& g, ValueMap& values)
        : graph_(g),
          nodes_(GraphExecAccess::nodes(g)),
          order_(GraphExecAccess::order(g)),
          values_(values) {}

    std::int64_t eval_count() const { return eval_count_; }

    Handle value(NodeId id) const {
        const auto it = values_.find(id);
        if (it != values_.end()) return it->second;
        return nullptr;
    }

    void run_forward(const std::unordered_map<NodeId, PTensor>& inputs) {
        eval_count_ = 0;
        for (const NodeId id : order_) {
            const Node& n = nodes_[static_cast<std::size_t>(id)];
            Handle out;
            try {
                out = compute_node(n, inputs);
            } catch (const shape_error& e) {
                throw shape_error("node " + std::to_string(id) + " (" +
                                  op_name(n.op) + "): " + e.what());
            }
            values_[id] = std::move(out);
            ++eval_count_;
        }
    }

    /// Runs the reverse schedule.  `on_grad` fires once per node that
    /// received contributions, after they are fully summed and before any
    /// predecessor contribution is emitted; it may mutate the gradient.
    std::unordered_map<NodeId, T> run_backward(
        NodeId sink, const std::function<void(NodeId, T&)>& on_grad) {
        struct Contribution {
            NodeId succ;
            int slot;
            T tensor;
        };
        std::unordered_map<NodeId, std::vector<Contribution>> pending;
        std::unordered_map<NodeId, T> grads;

        {
            const Handle sink_value = value(sink);
            if (!sink_value) throw graph_error("backward before forward");
            T seed = Ops::resh(Ops::scalar(1.0, graph_.precision()),
                               Ops::shape_of(*sink_value));
            pending[sink].push_back(Contribution{-1, 0, std::move(seed)});
        }

        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            const NodeId id = *it;
            const Node& n = nodes_[static_cast<std::size_t>(id)];
            const auto pit = pending.find(id);
            if (pit == pending.end() || pit->second.empty()) continue;

            std::vector<Contribution>& contribs = pit->second;
            std::stable_sort(contribs.begin(), contribs.end(),
                             [](const Contribution& a, const Contribution& b) {
                                 return a.succ != b.succ ? a.succ < b.succ
                                                         : a.slot < b.slot;
                             });
            check_contributions(n, contribs, grads);

            T g = std::move(contribs.front().tensor);
            for (std::size_t i = 1; i < contribs.size(); ++i) {
                g = Ops::ew(BinOp::Add, g, contribs[i].tensor);
            }
            pending.erase(pit);

            on_grad(id, g);
            emit_pred_contributions(n, g, pending);
            grads.emplace(id, std::move(g));
        }
        return grads;
    }

private:
    Handle compute_node(const Node& n,
                        const std::unordered_map<NodeId, PTensor>& inputs) {
        switch (n.op) {
            case OpKind::Placeholder: {
                const auto it = inputs.find(n.id);
                if (it == inputs.end()) {
                    throw graph_error("missing input for placeholder node " +
                                      std::to_string(n.id));
                }
                if (it->second.shape() != n.attrs.shape) {
                    throw shape_error("node " + std::to_string(n.id) +
                                      " (placeholder): input shape " +
                                      it->second.shape().str() + " != declared " +
                                      n.attrs.shape.str());
                }
                return std::make_shared<const T>(Ops::widen(it->second));
            }
            case OpKind::Literal:
            case OpKind::Parameter: {
                const auto p = GraphExecAccess::persistent(graph_, n.id);
                if (!p) throw graph_error("unset literal node " + std::to_string(n.id));
                return std::make_shared<const T>(Ops::widen(*p));
            }
            case OpKind::Add:
            case OpKind::Sub:
            case OpKind::Mul:
            case OpKind::Div: {
                const BinOp op = n.op == OpKind::Add   ? BinOp::Add
                                 : n.op == OpKind::Sub ? BinOp::Sub
                                 : n.op == OpKind::Mul ? BinOp::Mul
                                                       : BinOp::Div;
                return std::make_shared<const T>(
                    Ops::ew(op, *value(n.preds[0]), *value(n.preds[1])));
            }
            case OpKind::Neg:
            case OpKind::Abs:
            case OpKind::Relu:
            case OpKind::Exp:
            case OpKind::Log:
            case OpKind::Tanh:
            case OpKind::Sigmoid:
            case OpKind::Sqrt:
                return std::make_shared<const T>(
                    Ops::un(func_of(n.op), *value(n.preds[0])));
            case OpKind::MatMul:
                return std::make_shared<const T>(Ops::mm(
                    *value(n.preds[0]), *value(n.preds[1]), n.attrs.strategy));
            case OpKind::Permute:
                return std::make_shared<const T>(
                    Ops::perm(*value(n.preds[0]), n.attrs.perm));
            case OpKind::Reshape:
                return std::make_shared<const T>(
                    Ops::resh(*value(n.preds[0]), n.attrs.shape));
            case OpKind::ReduceSum:
                return std::make_shared<const T>(
                    Ops::red(ReduceOp::Sum, *value(n.preds[0]), n.attrs.axis));
            case OpKind::ReduceMean:
                return std::make_shared<const T>(
                    Ops::red(ReduceOp::Mean, *value(n.preds[0]), n.attrs.axis));
            case OpKind::ReduceMax:
                return std::make_shared<const T>(
                    Ops::red(ReduceOp::Max, *value(n.preds[0]), n.attrs.axis));
            case OpKind::Im2Col:
                return std::make_shared<const T>(
                    Ops::im2col(*value(n.preds[0]), n.attrs.conv));
            case OpKind::GatherRows:
                return std::make_shared<const T>(
                    Ops::gather(*value(n.preds[0]), n.attrs.labels));
            case OpKind::SubRowMax:
                return std::make_shared<const T>(
                    Ops::sub_rowmax(*value(n.preds[0])));
        }
        throw graph_error("unknown op");
    }

    template <class Contribs, class Grads>
    void check_contributions(const Node& n, const Contribs& contribs,
                             const Grads& grads) const {
        // Every successor that received a gradient must have delivered one
        // contribution per operand slot referencing this node.
        std::int64_t expected = (n.id == graph_.sink()) ? 1 : 0;
        for (const NodeId s : n.succs) {
            if (!grads.count(s)) continue;
            const Node& sn = nodes_[static_cast<std::size_t>(s)];
            for (const NodeId p : sn.preds) {
                if (p == n.id) ++expected;
            }
        }
        if (expected != static_cast<std::int64_t>(contribs.size())) {
            throw graph_error("node " + std::to_string(n.id) +
                              ": gradient contributions incomplete (got " +
                              std::to_string(contribs.size()) + ", expected " +
                              std::to_string(expected) + ")");
        }
    }

    template <class Pending>
    void emit_pred_contributions(const Node& n, const T& g, Pending& pending) {
        if (n.preds.empty()) return;
        const auto emit = [&](int slot, T t) {
            pending[n.preds[static_cast<std::size_t>(slot)]].push_back(
                {n.id, slot, std::move(t)});
        };
        const Precision p = graph_.precision();
        switch (n.op) {
            case OpKind::Add: {
                const T& va = *value(n.preds[0]);
                const T& vb = *value(n.preds[1]);
                emit(0, Ops::reduce_to(g, Ops::shape_of(va)));
                emit(1, Ops::reduce_to(g, Ops::shape_of(vb)));
                break;
            }
            case OpKind::Sub: {
                const T& va = *value(n.preds[0]);
                const T& vb = *value(n.preds[1]);
                emit(0, Ops::reduce_to(g, Ops::shape_of(va)));
                emit(1, Ops::reduce_to(Ops::un(FuncId::Neg, g), Ops::shape_of(vb)));
                break;
            }
            case OpKind::Mul: {
                const T& va = *value(n.preds[0]);
                const T& vb = *value(n.preds[1]);
                emit(0, Ops::reduce_to(Ops::ew(BinOp::Mul, g, vb), Ops::shape_of(va)));
                emit(1, Ops::reduce_to(Ops::ew(BinOp::Mul, g, va), Ops::shape_of(vb)));
                break;
            }
            case OpKind::Div: {
                const T& va = *value(n.preds[0]);
                const T& vb = *value(n.preds[1]);
                const T& vz = *value(n.id);
                emit(0, Ops::reduce_to(Ops::ew(BinOp::Div, g, vb), Ops::shape_of(va)));
                emit(1, Ops::reduce_to(
                            Ops::un(FuncId::Neg,
                                    Ops::ew(BinOp::Div, Ops::ew(BinOp::Mul, g, vz), vb)),
                            Ops::shape_of(vb)));
                break;
            }
            case OpKind::Neg:
                emit(0, Ops::un(FuncId::Neg, g));
                break;
            case OpKind::Abs:
                emit(0, Ops::abs_grad(g, *value(n.preds[0])));
                break;
            case OpKind::Relu:
                emit(0, Ops::relu_grad(g, *value(n.preds[0])));
                break;
            case OpKind::Exp:
                emit(0, Ops::ew(BinOp::Mul, g, *value(n.id)));
                break;
            case OpKind::Log:
                emit(0, Ops::ew(BinOp::Div, g, *value(n.preds[0])));
                break;
            case OpKind::Tanh: {
                const T& vz = *value(n.id);
                const T one = Ops::scalar(1.0, p);
                emit(0, Ops::ew(BinOp::Mul, g,
                                Ops::ew(BinOp::Sub, one, Ops::ew(BinOp::Mul, vz, vz))));
                break;
            }
            case OpKind::Sigmoid: {
                const T& vz = *value(n.id);
                const T one = Ops::scalar(1.0, p);
                emit(0, Ops::ew(BinOp::Mul, g,
                                Ops::ew(BinOp::Mul, vz, Ops::ew(BinOp::Sub, one, vz))));
                break;
            }
            case OpKind::Sqrt: {
                const T& vz = *value(n.id);
                emit(0, Ops::ew(BinOp::Div,
                                Ops::ew(BinOp::Mul, g, Ops::scalar(0.5, p)), vz));
                break;
            }
            case OpKind::MatMul: {
                const T& va = *value(n.preds[0]);
                const T& vb = *value(n.preds[1]);
                emit(0, Ops::mm(g, Ops::perm(vb, {1, 0}), n.attrs.strategy));
                emit(1, Ops::mm(Ops::perm(va, {1, 0}), g, n.attrs.strategy));
                break;
            }
            case OpKind::Permute:
                emit(0, Ops::perm(g, inverse_perm(n.attrs.perm)));
                break;
            case OpKind::Reshape:
                emit(0, Ops::resh(g, Ops::shape_of(*value(n.preds[0]))));
                break;
            case OpKind::ReduceSum:
                emit(0, unreduce(g, *value(n.preds[0]), n.attrs.axis));
                break;
            case OpKind::ReduceMean: {
                const Shape& in_shape = Ops::shape_of(*value(n.preds[0]));
                const std::int64_t count =
                    n.attrs.axis == -1
                        ? in_shape.numel()
                        : in_shape.extent(static_cast<std::size_t>(n.attrs.axis));
                const T gm = Ops::ew(BinOp::Div, g,
                                     Ops::scalar(static_cast<double>(count), p));
                emit(0, unreduce(gm, *value(n.preds[0]), n.attrs.axis));
                break;
            }
            case OpKind::ReduceMax:
                emit(0, Ops::max_scatter(g, *value(n.preds[0]), n.attrs.axis));
                break;
            case OpKind::Im2Col:
                emit(0, Ops::col2im(g, n.attrs.conv));
                break;
            case OpKind::GatherRows: {
                const Shape& in_shape = Ops::shape_of(*value(n.preds[0]));
                emit(0, Ops::scatter(g, n.attrs.labels, in_shape.extent(1)));
                break;
            }
            case OpKind::SubRowMax:
                emit(0, Ops::sub_rowmax_grad(g, *value(n.preds[0])));
                break;
            default:
                throw graph_error("op has no backward rule");
        }
    }

    T unreduce(const T& g, const T& input, int axis) {
        const Shape& in_shape = Ops::shape_of(input);
        if (axis == -1) {
            return Ops::broadcast(g, in_shape);
        }
        std::vector<std::int64_t> with_one = in_shape.dims();
        with_one[static_cast<std::size_t>(axis)] = 1;
        return Ops::broadcast(Ops::resh(g, Shape(std::move(with_one))), in_shape);
    }

    const Graph& graph_;
    const std::vector<Node>& nodes_;
    const std::vector<NodeId>& order_;
    ValueMap& values_;
    std::int64_t eval_count_ = 0;
};

}  // namespace detail
}  // namespace bittrace
