#pragma once

#include <map>
#include <string>

#include "bittrace/graph.hpp"
#include "bittrace/rng.hpp"

namespace bittrace::nn {

// ---------------------------------------------------------------------------
// Layer and loss builders.  Each appends tracked nodes to the graph and
// returns the output node.

/// y = x W^T + b as two tracked operations: a rigorous matmul against the
/// transposed weight, then a broadcast bias addition.
/// x: [batch, in], W: [out, in], b: [out].
NodeId linear(Graph& g, NodeId x, NodeId weight, NodeId bias);

/// Convolution by im2col lowering: patch gather (selection), rigorous
/// matmul, broadcast bias add.  x: [b, c, h, w] with static shape,
/// kernel: [oc, c, kh, kw], bias: [oc].  Returns [b, oc, oh, ow].
NodeId conv2d(Graph& g, NodeId x, NodeId kernel, NodeId bias, std::int64_t stride);

/// Mean of squared tracked differences (scalar node).
NodeId mse_loss(Graph& g, NodeId pred, NodeId target);

/// Numerically stable cross-entropy over rank-2 logits [batch, classes]:
/// row-max shift, exp, row sums, log, label gather, batch mean.  When
/// `gather_node` is non-null it receives the id of the label-gather node so
/// that callers can rebind labels between batches.
NodeId cross_entropy(Graph& g, NodeId logits, const std::vector<std::int64_t>& labels,
                     NodeId* gather_node = nullptr);

/// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization, declared exact.
PTensor init_uniform(Shape shape, std::int64_t fan_in, Rng& rng, Precision p);

// ---------------------------------------------------------------------------
// Significance guard.

struct SignificanceReport {
    ExactBits loss_bits = 0;
    ExactBits min_grad_bits = 0;
    enum class Verdict : std::uint8_t { Proceed, SkipStep } verdict = Verdict::Proceed;
};

/// SkipStep exactly when the loss or any gradient element has no exact bits.
SignificanceReport significance_check(const PTensor& loss,
                                      const std::map<NodeId, PTensor>& grads);

// ---------------------------------------------------------------------------
// Adam with the skip-step policy.

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam whose parameters and moment tensors stay precision-tracked.  The
/// exact-bit planes on parameters and moments are floored views of a
/// continuous relative-error state carried across steps, so long runs decay
/// additively (one roundoff per operation) instead of compounding the
/// uint8 floor every step.
class Adam {
public:
    Adam(Graph& g, std::vector<NodeId> params, AdamConfig cfg);

    /// Applies one update, or skips it (parameters, moments and step count
    /// untouched, gradients zeroed, skipped_steps incremented) when the
    /// report says SkipStep.  Returns true when the update was applied.
    bool step(std::map<NodeId, PTensor>& grads, const SignificanceReport& report);

    const AdamConfig& config() const { return cfg_; }
    std::int64_t step_count() const { return t_; }
    std::int64_t skipped_steps() const { return skipped_; }
    const std::vector<NodeId>& params() const { return param_ids_; }

    const PTensor& moment_m(std::size_t i) const { return m_[i].tensor; }
    const PTensor& moment_v(std::size_t i) const { return v_[i].tensor; }

    ExactBits min_param_bits() const;

    /// FNV-1a digest over serialized parameters, moments and step counter;
    /// used to verify that skipped steps leave the state byte-identical.
    std::uint64_t state_digest() const;

    /// Restores optimizer state (used by checkpoint loading).
    void restore(std::vector<PTensor> m, std::vector<PTensor> v, std::int64_t t,
                 std::int64_t skipped);

private:
    struct Tracked {
        PTensor tensor;
        std::vector<double> rel;  // continuous relative-error state
    };

    static Tracked make_tracked(const PTensor& t);

    Graph* graph_;
    std::vector<NodeId> param_ids_;
    AdamConfig cfg_;
    Precision prec_;
    std::vector<Tracked> params_;
    std::vector<Tracked> m_;
    std::vector<Tracked> v_;
    // running beta powers, tracked continuously
    double beta1_t_ = 1.0, beta2_t_ = 1.0;
    double beta1_t_rel_ = 0.0, beta2_t_rel_ = 0.0;
    std::int64_t t_ = 0;
    std::int64_t skipped_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpointing: a directory of tensor files plus a key=value metadata file.

void save_checkpoint(const std::string& dir, const Graph& g, const Adam& opt,
                     const std::map<std::string, std::string>& extra_meta = {});

/// Loads parameters back into the graph and state into the optimizer.
/// Returns the metadata map.
std::map<std::string, std::string> load_checkpoint(const std::string& dir,
                                                   Graph& g, Adam& opt);

}  // namespace bittrace::nn
