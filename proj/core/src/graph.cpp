#include "bittrace/graph.hpp"

#include <algorithm>
#include <sstream>

#include "bittrace/errors.hpp"
#include "exec_common.hpp"

namespace bittrace {

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Placeholder: return "placeholder";
        case OpKind::Literal: return "literal";
        case OpKind::Parameter: return "parameter";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::Neg: return "neg";
        case OpKind::Abs: return "abs";
        case OpKind::Relu: return "relu";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Tanh: return "tanh";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Sqrt: return "sqrt";
        case OpKind::MatMul: return "matmul";
        case OpKind::Permute: return "permute";
        case OpKind::Reshape: return "reshape";
        case OpKind::ReduceSum: return "reduce_sum";
        case OpKind::ReduceMean: return "reduce_mean";
        case OpKind::ReduceMax: return "reduce_max";
        case OpKind::Im2Col: return "im2col";
        case OpKind::GatherRows: return "gather_rows";
        case OpKind::SubRowMax: return "sub_rowmax";
    }
    return "?";
}

namespace {

/// Tracked-tensor kernel policy for the shared evaluator.
struct TrackedOps {
    using Tensor = PTensor;
    static PTensor widen(const PTensor& t) { return t; }
    static PTensor ew(BinOp op, const PTensor& a, const PTensor& b) {
        return ew_binary(op, a, b);
    }
    static PTensor un(FuncId f, const PTensor& a) { return ew_unary(f, a); }
    static PTensor mm(const PTensor& a, const PTensor& b, MatmulStrategy s) {
        return ::bittrace::matmul(a, b, s);
    }
    static PTensor red(ReduceOp op, const PTensor& a, int axis) {
        return ::bittrace::reduce(op, a, axis);
    }
    static PTensor resh(const PTensor& a, Shape s) {
        return ::bittrace::reshape(a, std::move(s));
    }
    static PTensor perm(const PTensor& a, const std::vector<int>& ax) {
        return ::bittrace::permute(a, ax);
    }
    static PTensor im2col(const PTensor& a, const Conv2dGeom& g) {
        return ::bittrace::im2col(a, g);
    }
    static PTensor col2im(const PTensor& a, const Conv2dGeom& g) {
        return ::bittrace::col2im_scatter(a, g);
    }
    static PTensor gather(const PTensor& a, const std::vector<std::int64_t>& l) {
        return ::bittrace::gather_rows(a, l);
    }
    static PTensor scatter(const PTensor& g, const std::vector<std::int64_t>& l,
                           std::int64_t num_cols) {
        return ::bittrace::scatter_rows(g, l, num_cols);
    }
    static PTensor relu_grad(const PTensor& g, const PTensor& x) {
        return ::bittrace::relu_grad(g, x);
    }
    static PTensor sub_rowmax(const PTensor& x) { return ::bittrace::sub_rowmax(x); }
    static PTensor sub_rowmax_grad(const PTensor& g, const PTensor& x) {
        return ::bittrace::sub_rowmax_grad(g, x);
    }
    static PTensor abs_grad(const PTensor& g, const PTensor& x) {
        return ::bittrace::abs_grad(g, x);
    }
    static PTensor max_scatter(const PTensor& g, const PTensor& x, int axis) {
        return ::bittrace::max_grad_scatter(g, x, axis);
    }
    static PTensor reduce_to(const PTensor& g, const Shape& s) {
        return ::bittrace::reduce_to_shape(g, s);
    }
    static PTensor broadcast(const PTensor& a, const Shape& s) {
        return ::bittrace::broadcast_to(a, s);
    }
    static PTensor scalar(double v, Precision p) {
        return PTensor::exact_scalar(v, p);
    }
    static const Shape& shape_of(const PTensor& t) { return t.shape(); }
};

}  // namespace

Graph::Graph(Precision p) : prec_(p) {}

void Graph::check_id(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
        throw graph_error("unknown node id " + std::to_string(id));
    }
}

const Node& Graph::node(NodeId id) const {
    check_id(id);
    return nodes_[static_cast<std::size_t>(id)];
}

NodeId Graph::new_node(OpKind k, std::vector<NodeId> preds, NodeAttrs attrs) {
    for (const NodeId p : preds) check_id(p);
    const NodeId id = static_cast<NodeId>(nodes_.size());
    Node n;
    n.id = id;
    n.op = k;
    n.attrs = std::move(attrs);
    n.preds = std::move(preds);
    nodes_.push_back(std::move(n));
    for (const NodeId p : nodes_.back().preds) {
        nodes_[static_cast<std::size_t>(p)].succs.push_back(id);
    }
    order_.push_back(id);
    return id;
}

NodeId Graph::placeholder(Shape shape) {
    NodeAttrs attrs;
    attrs.shape = std::move(shape);
    return new_node(OpKind::Placeholder, {}, std::move(attrs));
}

NodeId Graph::literal(PTensor t) {
    if (t.precision() != prec_) throw numeric_error("literal precision mismatch");
    NodeAttrs attrs;
    attrs.shape = t.shape();
    const NodeId id = new_node(OpKind::Literal, {}, std::move(attrs));
    persistent_[id] = std::make_shared<const PTensor>(std::move(t));
    return id;
}

NodeId Graph::parameter(PTensor t) {
    if (t.precision() != prec_) throw numeric_error("parameter precision mismatch");
    NodeAttrs attrs;
    attrs.shape = t.shape();
    const NodeId id = new_node(OpKind::Parameter, {}, std::move(attrs));
    persistent_[id] = std::make_shared<const PTensor>(std::move(t));
    return id;
}

void Graph::set_value(NodeId id, PTensor t) {
    check_id(id);
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.op != OpKind::Literal && n.op != OpKind::Parameter) {
        throw graph_error("set_value requires a literal or parameter node");
    }
    if (t.shape() != n.attrs.shape) {
        throw shape_error("set_value shape " + t.shape().str() + " != " +
                          n.attrs.shape.str());
    }
    if (t.precision() != prec_) throw numeric_error("set_value precision mismatch");
    persistent_[id] = std::make_shared<const PTensor>(std::move(t));
}

NodeId Graph::binary(OpKind k, NodeId a, NodeId b) {
    check_id(a);
    check_id(b);
    return new_node(k, {a, b}, NodeAttrs{});
}

NodeId Graph::unary(OpKind f, NodeId a) {
    check_id(a);
    switch (f) {
        case OpKind::Neg:
        case OpKind::Abs:
        case OpKind::Relu:
        case OpKind::Exp:
        case OpKind::Log:
        case OpKind::Tanh:
        case OpKind::Sigmoid:
        case OpKind::Sqrt:
            break;
        default:
            throw graph_error("unary() expects a unary op kind");
    }
    return new_node(f, {a}, NodeAttrs{});
}

NodeId Graph::matmul(NodeId a, NodeId b, MatmulStrategy s) {
    check_id(a);
    check_id(b);
    NodeAttrs attrs;
    attrs.strategy = s;
    return new_node(OpKind::MatMul, {a, b}, std::move(attrs));
}

NodeId Graph::permute(NodeId a, std::vector<int> axes) {
    check_id(a);
    NodeAttrs attrs;
    attrs.perm = std::move(axes);
    return new_node(OpKind::Permute, {a}, std::move(attrs));
}

NodeId Graph::reshape(NodeId a, Shape shape) {
    check_id(a);
    NodeAttrs attrs;
    attrs.shape = std::move(shape);
    return new_node(OpKind::Reshape, {a}, std::move(attrs));
}

NodeId Graph::reduce(ReduceOp op, NodeId a, int axis) {
    check_id(a);
    NodeAttrs attrs;
    attrs.axis = axis;
    const OpKind k = op == ReduceOp::Sum    ? OpKind::ReduceSum
                     : op == ReduceOp::Mean ? OpKind::ReduceMean
                                            : OpKind::ReduceMax;
    return new_node(k, {a}, std::move(attrs));
}

NodeId Graph::im2col(NodeId x, std::int64_t kh, std::int64_t kw, std::int64_t stride) {
    check_id(x);
    const Node& src = nodes_[static_cast<std::size_t>(x)];
    // Patch geometry needs static extents; leaves carry them and im2col is
    // only ever applied directly to an input or a reshape of one.
    Shape in_shape = src.attrs.shape;
    if (in_shape.rank() != 4) {
        throw shape_error("im2col source must have a static [b,c,h,w] shape");
    }
    NodeAttrs attrs;
    attrs.conv = make_conv_geom(in_shape, kh, kw, stride);
    return new_node(OpKind::Im2Col, {x}, std::move(attrs));
}

NodeId Graph::gather_rows(NodeId x, std::vector<std::int64_t> labels) {
    check_id(x);
    NodeAttrs attrs;
    attrs.labels = std::move(labels);
    return new_node(OpKind::GatherRows, {x}, std::move(attrs));
}

NodeId Graph::sub_rowmax(NodeId x) {
    check_id(x);
    return new_node(OpKind::SubRowMax, {x}, NodeAttrs{});
}

void Graph::set_labels(NodeId id, std::vector<std::int64_t> labels) {
    check_id(id);
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.op != OpKind::GatherRows) {
        throw graph_error("set_labels requires a gather_rows node");
    }
    if (in_backward_) throw graph_error("set_labels during backward");
    n.attrs.labels = std::move(labels);
}

void Graph::set_sink(NodeId id) {
    check_id(id);
    sink_ = id;
}

void Graph::set_linearization(std::vector<NodeId> order) {
    if (order.size() != nodes_.size()) {
        throw graph_error("linearization must cover every node");
    }
    std::vector<std::int64_t> pos(nodes_.size(), -1);
    for (std::size_t i = 0; i < order.size(); ++i) {
        const NodeId id = order[i];
        check_id(id);
        if (pos[static_cast<std::size_t>(id)] != -1) {
            throw graph_error("linearization repeats node " + std::to_string(id));
        }
        pos[static_cast<std::size_t>(id)] = static_cast<std::int64_t>(i);
    }
    for (const Node& n : nodes_) {
        for (const NodeId p : n.preds) {
            if (pos[static_cast<std::size_t>(p)] >= pos[static_cast<std::size_t>(n.id)]) {
                throw graph_error("linearization violates edge " + std::to_string(p) +
                                  " -> " + std::to_string(n.id));
            }
        }
    }
    order_ = std::move(order);
}

PTensor Graph::forward(const std::unordered_map<NodeId, PTensor>& inputs) {
    if (in_backward_) throw graph_error("forward during backward");
    if (sink_ < 0) throw graph_error("sink not set");
    computed_.clear();
    detail::Evaluator<TrackedOps> ev(*this, computed_);
    ev.run_forward(inputs);
    forward_evals_ = ev.eval_count();
    forward_done_ = true;
    resolve_hook_captures();
    return *computed_.at(sink_);
}

void Graph::resolve_hook_captures() {
    for (auto& [id, records] : hooks_) {
        (void)id;
        for (HookRecord& rec : records) {
            if (rec.resolved) continue;
            rec.temp_refs.clear();
            for (const NodeId cap : rec.hook.capture) {
                rec.temp_refs.emplace_back(value_handle(cap));
            }
            rec.resolved = true;
        }
    }
}

void Graph::register_hook(NodeId id, Hook h) {
    check_id(id);
    if (in_backward_) throw graph_error("hook registration during backward");
    for (const NodeId cap : h.capture) check_id(cap);
    HookRecord rec;
    rec.hook = std::move(h);
    if (forward_done_) {
        for (const NodeId cap : rec.hook.capture) {
            rec.temp_refs.emplace_back(value_handle(cap));
        }
        rec.resolved = true;
    }
    hooks_[id].push_back(std::move(rec));
}

std::map<NodeId, PTensor> Graph::backward() {
    if (!forward_done_) throw graph_error("backward before forward");
    const auto sink_value = computed_.find(sink_);
    if (sink_value == computed_.end()) throw graph_error("backward before forward");
    if (sink_value->second->numel() != 1) {
        throw graph_error("backward requires a scalar sink, got " +
                          sink_value->second->shape().str());
    }

    in_backward_ = true;
    hook_invocations_ = 0;
    std::map<NodeId, PTensor> result;
    try {
        detail::Evaluator<TrackedOps> ev(*this, computed_);
        auto grads = ev.run_backward(sink_, [this](NodeId id, PTensor& g) {
            const auto hit = hooks_.find(id);
            if (hit == hooks_.end()) return;
            for (HookRecord& rec : hit->second) {
                if (rec.consumed) continue;
                TempView view;
                view.temps.reserve(rec.temp_refs.size());
                for (const auto& w : rec.temp_refs) view.temps.push_back(w.lock());
                auto replacement = rec.hook.fn ? rec.hook.fn(g, view) : std::nullopt;
                rec.consumed = true;
                ++hook_invocations_;
                rec.temp_refs.clear();
                if (replacement) g = g.with_bits(std::move(*replacement));
            }
        });
        leaf_grads_.clear();
        for (auto& [id, g] : grads) {
            const OpKind k = nodes_[static_cast<std::size_t>(id)].op;
            if (k == OpKind::Placeholder || k == OpKind::Parameter ||
                k == OpKind::Literal) {
                result.emplace(id, g);
                leaf_grads_.emplace(id, std::move(g));
            }
        }
    } catch (...) {
        in_backward_ = false;
        release_temporaries();
        throw;
    }
    in_backward_ = false;
    release_temporaries();
    return result;
}

void Graph::release_temporaries() {
    computed_.clear();
    hooks_.clear();
    forward_done_ = false;
}

std::shared_ptr<const PTensor> Graph::value_handle(NodeId id) const {
    check_id(id);
    const auto it = computed_.find(id);
    if (it != computed_.end()) return it->second;
    const auto pit = persistent_.find(id);
    if (pit != persistent_.end()) return pit->second;
    return nullptr;
}

const PTensor* Graph::value_of(NodeId id) const {
    const auto h = value_handle(id);
    return h ? h.get() : nullptr;
}

const PTensor* Graph::grad_of(NodeId id) const {
    const auto it = leaf_grads_.find(id);
    return it == leaf_grads_.end() ? nullptr : &it->second;
}

std::string Graph::debug_dump() const {
    std::ostringstream os;
    for (const Node& n : nodes_) {
        const PTensor* v = value_of(n.id);
        os << n.id << ' ' << op_name(n.op) << ' ';
        if (v) {
            os << v->shape().str() << ' ' << static_cast<int>(v->min_bits()) << ' '
               << static_cast<int>(v->max_bits_present());
        } else {
            os << n.attrs.shape.str() << " - -";
        }
        os << " preds=[";
        for (std::size_t i = 0; i < n.preds.size(); ++i) {
            if (i) os << ',';
            os << n.preds[i];
        }
        os << "] succs=[";
        for (std::size_t i = 0; i < n.succs.size(); ++i) {
            if (i) os << ',';
            os << n.succs[i];
        }
        os << "]\n";
    }
    return os.str();
}

}  // namespace bittrace
