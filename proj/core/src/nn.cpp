#include "bittrace/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "bittrace/errors.hpp"
#include "bittrace/ptensor_io.hpp"

namespace bittrace::nn {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Builders.

NodeId linear(Graph& g, NodeId x, NodeId weight, NodeId bias) {
    const NodeId wt = g.permute(weight, {1, 0});
    const NodeId mm = g.matmul(x, wt, MatmulStrategy::Rigorous);
    return g.add(mm, bias);
}

NodeId conv2d(Graph& g, NodeId x, NodeId kernel, NodeId bias, std::int64_t stride) {
    const Shape& xs = g.node(x).attrs.shape;
    const Shape& ks = g.node(kernel).attrs.shape;
    if (ks.rank() != 4) {
        throw shape_error("conv kernel must be [oc,c,kh,kw], got " + ks.str());
    }
    const std::int64_t oc = ks.extent(0);
    const std::int64_t kh = ks.extent(2);
    const std::int64_t kw = ks.extent(3);
    const Conv2dGeom geom = make_conv_geom(xs, kh, kw, stride);
    if (ks.extent(1) != geom.channels) {
        throw shape_error("conv kernel channels " + ks.str() + " do not match input " +
                          xs.str());
    }
    const NodeId cols = g.im2col(x, kh, kw, stride);
    const NodeId kmat = g.reshape(kernel, Shape{oc, geom.cols()});
    const NodeId kt = g.permute(kmat, {1, 0});
    const NodeId prod = g.matmul(cols, kt, MatmulStrategy::Rigorous);
    const NodeId biased = g.add(prod, bias);
    const NodeId grouped =
        g.reshape(biased, Shape{geom.batch, geom.out_h, geom.out_w, oc});
    return g.permute(grouped, {0, 3, 1, 2});
}

NodeId mse_loss(Graph& g, NodeId pred, NodeId target) {
    const NodeId d = g.sub(pred, target);
    const NodeId sq = g.mul(d, d);
    return g.reduce(ReduceOp::Mean, sq, -1);
}

NodeId cross_entropy(Graph& g, NodeId logits,
                     const std::vector<std::int64_t>& labels, NodeId* gather_node) {
    const NodeId shifted = g.sub_rowmax(logits);
    const NodeId e = g.unary(OpKind::Exp, shifted);
    const NodeId s = g.reduce(ReduceOp::Sum, e, 1);
    const NodeId lse = g.unary(OpKind::Log, s);
    const NodeId picked = g.gather_rows(shifted, labels);
    if (gather_node) *gather_node = picked;
    const NodeId per_sample = g.sub(lse, picked);
    return g.reduce(ReduceOp::Mean, per_sample, -1);
}

PTensor init_uniform(Shape shape, std::int64_t fan_in, Rng& rng, Precision p) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> values(static_cast<std::size_t>(shape.numel()));
    for (double& v : values) v = rng.uniform(-bound, bound);
    return PTensor::exact(std::move(values), std::move(shape), p);
}

// ---------------------------------------------------------------------------
// Significance guard.

SignificanceReport significance_check(const PTensor& loss,
                                      const std::map<NodeId, PTensor>& grads) {
    SignificanceReport rep;
    rep.loss_bits = loss.bits_at(0);
    ExactBits min_grad = static_cast<ExactBits>(max_bits(loss.precision()));
    for (const auto& [id, g] : grads) {
        (void)id;
        min_grad = std::min(min_grad, g.min_bits());
    }
    rep.min_grad_bits = min_grad;
    rep.verdict = (rep.loss_bits == 0 || rep.min_grad_bits == 0)
                      ? SignificanceReport::Verdict::SkipStep
                      : SignificanceReport::Verdict::Proceed;
    return rep;
}

// ---------------------------------------------------------------------------
// Continuous-error scalar arithmetic used for the optimizer state.  Values
// follow the working-precision evaluation exactly; relative bounds follow
// the same rules as the tensor kernels without the per-step uint8 floor.

namespace {

struct RV {
    double v = 0.0;
    double r = 0.0;
};

constexpr double kInf = std::numeric_limits<double>::infinity();

RV rv_addsub(BinOp op, RV a, RV b, Precision p) {
    const double v = eval_binary(op, a.v, b.v, p);
    if (!std::isfinite(v)) return {v, kInf};
    const double abs_err = std::fabs(a.v) * a.r + std::fabs(b.v) * b.r;
    if (v == 0.0) return {v, abs_err == 0.0 ? 0.0 : kInf};
    const double rounding = (a.v != 0.0 && b.v != 0.0) ? unit_roundoff(p) : 0.0;
    return {v, abs_err / std::fabs(v) + rounding};
}

RV rv_mul(RV a, RV b, Precision p) {
    const double v = eval_binary(BinOp::Mul, a.v, b.v, p);
    if (!std::isfinite(v)) return {v, kInf};
    if (v == 0.0) return {v, (a.v == 0.0 || b.v == 0.0) ? 0.0 : kInf};
    if (below_normal_range(v, p)) return {v, kInf};
    return {v, a.r + b.r + unit_roundoff(p)};
}

RV rv_div(RV a, RV b, Precision p) {
    const double v = eval_binary(BinOp::Div, a.v, b.v, p);
    if (!std::isfinite(v) || b.v == 0.0) return {v, kInf};
    if (v == 0.0) return {v, a.v == 0.0 ? a.r : kInf};
    if (below_normal_range(v, p)) return {v, kInf};
    return {v, a.r + b.r + unit_roundoff(p)};
}

RV rv_sqrt(RV a, Precision p) {
    if (a.v < 0.0) return {std::numeric_limits<double>::quiet_NaN(), kInf};
    const double v = eval_unary(FuncId::Sqrt, a.v, p);
    if (a.v == 0.0) return {0.0, a.r == 0.0 ? 0.0 : kInf};
    return {v, 0.5 * a.r + unit_roundoff(p)};
}

RV rv_const(double c, Precision p) {
    return {round_to_working(c, p), unit_roundoff(p)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Adam.

Adam::Tracked Adam::make_tracked(const PTensor& t) {
    Tracked tr;
    tr.tensor = t;
    tr.rel.resize(static_cast<std::size_t>(t.numel()));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        tr.rel[static_cast<std::size_t>(i)] =
            t.value_at(i) == 0.0 && t.bits_at(i) == max_bits(t.precision())
                ? 0.0
                : rel_from_bits(t.bits_at(i), t.precision());
    }
    return tr;
}

Adam::Adam(Graph& g, std::vector<NodeId> params, AdamConfig cfg)
    : graph_(&g), param_ids_(std::move(params)), cfg_(cfg), prec_(g.precision()) {
    for (const NodeId id : param_ids_) {
        const PTensor* t = g.value_of(id);
        if (!t) throw graph_error("optimizer parameter node has no value");
        params_.push_back(make_tracked(*t));
        m_.push_back(make_tracked(PTensor::zeros(t->shape(), prec_)));
        v_.push_back(make_tracked(PTensor::zeros(t->shape(), prec_)));
        // exact zero moments carry no error yet
        std::fill(m_.back().rel.begin(), m_.back().rel.end(), 0.0);
        std::fill(v_.back().rel.begin(), v_.back().rel.end(), 0.0);
    }
}

bool Adam::step(std::map<NodeId, PTensor>& grads,
                const SignificanceReport& report) {
    if (report.verdict == SignificanceReport::Verdict::SkipStep) {
        ++skipped_;
        for (const NodeId id : param_ids_) {
            const auto it = grads.find(id);
            if (it != grads.end()) {
                it->second = PTensor::zeros(it->second.shape(), prec_);
            }
        }
        return false;
    }

    ++t_;
    const RV b1 = rv_const(cfg_.beta1, prec_);
    const RV b2 = rv_const(cfg_.beta2, prec_);
    const RV one = rv_const(1.0, prec_);
    const RV lr = rv_const(cfg_.lr, prec_);
    const RV eps = rv_const(cfg_.eps, prec_);
    const RV one_minus_b1 = rv_addsub(BinOp::Sub, one, b1, prec_);
    const RV one_minus_b2 = rv_addsub(BinOp::Sub, one, b2, prec_);

    RV b1t{beta1_t_, beta1_t_rel_};
    RV b2t{beta2_t_, beta2_t_rel_};
    b1t = rv_mul(b1t, b1, prec_);
    b2t = rv_mul(b2t, b2, prec_);
    beta1_t_ = b1t.v;
    beta1_t_rel_ = b1t.r;
    beta2_t_ = b2t.v;
    beta2_t_rel_ = b2t.r;
    const RV corr1 = rv_addsub(BinOp::Sub, one, b1t, prec_);
    const RV corr2 = rv_addsub(BinOp::Sub, one, b2t, prec_);

    for (std::size_t pi = 0; pi < param_ids_.size(); ++pi) {
        const NodeId id = param_ids_[pi];
        const auto git = grads.find(id);
        if (git == grads.end()) {
            throw graph_error("missing gradient for parameter node " +
                              std::to_string(id));
        }
        const PTensor& grad = git->second;
        Tracked& pt = params_[pi];
        Tracked& mt = m_[pi];
        Tracked& vt = v_[pi];
        if (grad.shape() != pt.tensor.shape()) {
            throw shape_error("gradient shape " + grad.shape().str() +
                              " does not match parameter " + pt.tensor.shape().str());
        }
        const std::int64_t n = pt.tensor.numel();
        std::vector<double> pv(static_cast<std::size_t>(n)),
            mv(static_cast<std::size_t>(n)), vv(static_cast<std::size_t>(n));
        std::vector<ExactBits> pb(static_cast<std::size_t>(n)),
            mb(static_cast<std::size_t>(n)), vb(static_cast<std::size_t>(n));

        for (std::int64_t i = 0; i < n; ++i) {
            const std::size_t si = static_cast<std::size_t>(i);
            const RV gv{grad.value_at(i),
                        grad.value_at(i) == 0.0 &&
                                grad.bits_at(i) == max_bits(prec_)
                            ? 0.0
                            : rel_from_bits(grad.bits_at(i), prec_)};
            RV m{mt.tensor.value_at(i), mt.rel[si]};
            RV v{vt.tensor.value_at(i), vt.rel[si]};
            RV param{pt.tensor.value_at(i), pt.rel[si]};

            m = rv_addsub(BinOp::Add, rv_mul(b1, m, prec_),
                          rv_mul(one_minus_b1, gv, prec_), prec_);
            v = rv_addsub(BinOp::Add, rv_mul(b2, v, prec_),
                          rv_mul(one_minus_b2, rv_mul(gv, gv, prec_), prec_),
                          prec_);
            const RV mhat = rv_div(m, corr1, prec_);
            const RV vhat = rv_div(v, corr2, prec_);
            const RV denom = rv_addsub(BinOp::Add, rv_sqrt(vhat, prec_), eps, prec_);
            const RV update = rv_mul(lr, rv_div(mhat, denom, prec_), prec_);
            param = rv_addsub(BinOp::Sub, param, update, prec_);

            mv[si] = m.v;
            mb[si] = bits_from_rel(m.r, prec_);
            mt.rel[si] = m.r;
            vv[si] = v.v;
            vb[si] = bits_from_rel(v.r, prec_);
            vt.rel[si] = v.r;
            pv[si] = param.v;
            pb[si] = bits_from_rel(param.r, prec_);
            pt.rel[si] = param.r;
        }
        mt.tensor = PTensor::from_parts(pt.tensor.shape(), std::move(mv),
                                        std::move(mb), prec_);
        vt.tensor = PTensor::from_parts(pt.tensor.shape(), std::move(vv),
                                        std::move(vb), prec_);
        pt.tensor = PTensor::from_parts(pt.tensor.shape(), std::move(pv),
                                        std::move(pb), prec_);
        graph_->set_value(id, pt.tensor);
    }
    return true;
}

ExactBits Adam::min_param_bits() const {
    ExactBits m = static_cast<ExactBits>(max_bits(prec_));
    for (const Tracked& t : params_) m = std::min(m, t.tensor.min_bits());
    return m;
}

std::uint64_t Adam::state_digest() const {
    std::ostringstream os(std::ios::binary);
    for (const Tracked& t : params_) write_ptensor(os, t.tensor);
    for (const Tracked& t : m_) write_ptensor(os, t.tensor);
    for (const Tracked& t : v_) write_ptensor(os, t.tensor);
    os.write(reinterpret_cast<const char*>(&t_), sizeof(t_));
    const std::string bytes = os.str();
    std::uint64_t h = 1469598103934665603ull;
    for (const unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

void Adam::restore(std::vector<PTensor> m, std::vector<PTensor> v, std::int64_t t,
                   std::int64_t skipped) {
    if (m.size() != param_ids_.size() || v.size() != param_ids_.size()) {
        throw graph_error("optimizer restore: tensor count mismatch");
    }
    for (std::size_t i = 0; i < param_ids_.size(); ++i) {
        const PTensor* pv = graph_->value_of(param_ids_[i]);
        params_[i] = make_tracked(*pv);
        m_[i] = make_tracked(m[i]);
        v_[i] = make_tracked(v[i]);
    }
    t_ = t;
    skipped_ = skipped;
    // Rebuild the tracked beta powers deterministically.
    const RV b1 = rv_const(cfg_.beta1, prec_);
    const RV b2 = rv_const(cfg_.beta2, prec_);
    RV b1t{1.0, 0.0}, b2t{1.0, 0.0};
    for (std::int64_t k = 0; k < t_; ++k) {
        b1t = rv_mul(b1t, b1, prec_);
        b2t = rv_mul(b2t, b2, prec_);
    }
    beta1_t_ = b1t.v;
    beta1_t_rel_ = b1t.r;
    beta2_t_ = b2t.v;
    beta2_t_rel_ = b2t.r;
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace {

std::string tensor_file(const std::string& prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%03zu.ptsr", prefix.c_str(), i);
    return buf;
}

}  // namespace

void save_checkpoint(const std::string& dir, const Graph& g, const Adam& opt,
                     const std::map<std::string, std::string>& extra_meta) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw io_error("cannot create checkpoint directory " + dir);
    const auto& ids = opt.params();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const PTensor* t = g.value_of(ids[i]);
        if (!t) throw graph_error("parameter has no value while checkpointing");
        save_ptensor(dir + "/" + tensor_file("param", i), *t);
        save_ptensor(dir + "/" + tensor_file("adam_m", i), opt.moment_m(i));
        save_ptensor(dir + "/" + tensor_file("adam_v", i), opt.moment_v(i));
    }
    std::ofstream meta(dir + "/meta.txt");
    if (!meta) throw io_error("cannot write checkpoint metadata in " + dir);
    char num[64];
    const AdamConfig& cfg = opt.config();
    std::snprintf(num, sizeof(num), "%.17g", cfg.lr);
    meta << "lr=" << num << '\n';
    std::snprintf(num, sizeof(num), "%.17g", cfg.beta1);
    meta << "beta1=" << num << '\n';
    std::snprintf(num, sizeof(num), "%.17g", cfg.beta2);
    meta << "beta2=" << num << '\n';
    std::snprintf(num, sizeof(num), "%.17g", cfg.eps);
    meta << "eps=" << num << '\n';
    meta << "t=" << opt.step_count() << '\n';
    meta << "skipped_steps=" << opt.skipped_steps() << '\n';
    meta << "params=" << ids.size() << '\n';
    meta << "precision=" << (g.precision() == Precision::Single ? "single" : "double")
         << '\n';
    for (const auto& [k, v] : extra_meta) meta << k << '=' << v << '\n';
}

std::map<std::string, std::string> load_checkpoint(const std::string& dir,
                                                   Graph& g, Adam& opt) {
    std::ifstream meta(dir + "/meta.txt");
    if (!meta) throw io_error("cannot read checkpoint metadata in " + dir);
    std::map<std::string, std::string> fields;
    std::string line;
    while (std::getline(meta, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        fields[line.substr(0, eq)] = line.substr(eq + 1);
    }
    const auto& ids = opt.params();
    std::vector<PTensor> m, v;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        g.set_value(ids[i], load_ptensor(dir + "/" + tensor_file("param", i)));
        m.push_back(load_ptensor(dir + "/" + tensor_file("adam_m", i)));
        v.push_back(load_ptensor(dir + "/" + tensor_file("adam_v", i)));
    }
    const std::int64_t t = fields.count("t") ? std::stoll(fields.at("t")) : 0;
    const std::int64_t skipped =
        fields.count("skipped_steps") ? std::stoll(fields.at("skipped_steps")) : 0;
    opt.restore(std::move(m), std::move(v), t, skipped);
    return fields;
}

}  // namespace bittrace::nn
