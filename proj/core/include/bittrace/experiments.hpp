#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bittrace/idx.hpp"
#include "bittrace/nn.hpp"
#include "bittrace/rng.hpp"

namespace bittrace::experiments {

// ---------------------------------------------------------------------------
// Piecewise-linear regression experiment.

struct PwlConfig {
    int breaks = 3;
    int neurons = 7;
    int grid_n = 64;
    std::uint64_t seed = 0;
    std::int64_t steps = 200000;
    double lr = 1e-3;
    /// Skip-step policy.  Off by default here: with a fixed full batch a
    /// skipped step reproduces the same state forever, so guarding would
    /// freeze the run at the first zero-bit event.
    bool guard = false;
    Precision precision = Precision::Single;
};

/// Continuous piecewise-linear function on [-1, 1].
struct PwlSpec {
    std::vector<double> breakpoints;  // sorted, interior
    std::vector<double> slopes;       // one per segment (breakpoints + 1)
    double start = 0.0;               // value at x = -1

    double eval(double x) const;
};

PwlSpec random_pwl(int breaks, Rng& rng);

/// Text format: `breakpoints ...` / `slopes ...` / `start v` lines.
PwlSpec load_pwl_spec(const std::string& path);

struct Dataset1d {
    PTensor x;  // [n, 1]
    PTensor y;  // [n, 1]
};

/// Uniform grid on [-1, 1] with exact-literal samples of the function.
Dataset1d sample_pwl(const PwlSpec& spec, int grid_n, Precision p);

/// Random function per cfg.seed, then sample_pwl.
Dataset1d gen_pwl(const PwlConfig& cfg);

// ---------------------------------------------------------------------------
// Per-step training trace.

struct StepRecord {
    std::int64_t step = 0;
    double loss = 0.0;
    ExactBits loss_bits = 0;
    ExactBits min_grad_bits = 0;
    double mean_grad_bits = 0.0;
    ExactBits min_param_bits = 0;
    bool skipped = false;
};

struct TrainTrace {
    std::vector<StepRecord> records;
    std::int64_t skipped_steps = 0;
};

/// Trains the 1 -> neurons -> 1 ReLU network with full-batch MSE and Adam,
/// recording one trace row per optimizer call.  `spec_override` replaces the
/// random function (used with explicit spec files).
TrainTrace run_pwl_experiment(const PwlConfig& cfg,
                              const PwlSpec* spec_override = nullptr);

// ---------------------------------------------------------------------------
// Trace export and fluctuation detection.

/// CSV with pinned header
/// `step,loss,loss_bits,min_grad_bits,mean_grad_bits,min_param_bits,skipped`.
void export_trace_csv(const TrainTrace& trace, const std::string& path);
TrainTrace parse_trace_csv(const std::string& path);

/// Two stacked panels: log10 loss on top, loss exact bits below.
void export_trace_svg(const TrainTrace& trace, const std::string& path);

struct FluctuationEvents {
    std::vector<std::int64_t> explosion_steps;
    std::vector<bool> precursor_fired;  // aligned with explosion_steps
};

/// Pinned detectors: an explosion is a step whose loss exceeds 10x the
/// trailing-1000-step median (events deduplicated with a 1000-step
/// refractory window); its precursor is a drop of at least 5 loss exact
/// bits inside the preceding 2000 steps.
FluctuationEvents detect_fluctuations(const TrainTrace& trace);

// ---------------------------------------------------------------------------
// Masked-digit loss rendering.

/// Fixed-point rendering (one integer digit, six decimals for losses < 10)
/// where every digit whose place value could be perturbed by the absolute
/// error |v| * 2^-e is replaced by '?'.  Negative or non-finite values
/// render as "?.??????".
std::string mask_digits(double v, ExactBits e, Precision p);

// ---------------------------------------------------------------------------
// Classification experiment (MNIST subset or synthetic blobs).

struct MnistConfig {
    std::string images_path;
    std::string labels_path;
    bool synthetic = false;
    std::int64_t subset = 600;
    std::int64_t batch = 60;
    std::int64_t epochs = 1;
    std::int64_t hidden = 32;
    std::uint64_t seed = 0;
    Precision precision = Precision::Single;
};

struct MnistResult {
    TrainTrace trace;
    std::vector<std::string> log_lines;
    std::int64_t classes = 0;
    std::int64_t samples = 0;
};

/// Trains conv(1->4, 3x3) -> relu -> flatten -> linear -> relu -> linear
/// with cross-entropy and the skip-step policy active.  Per batch, appends
/// (and optionally streams) `batch_num=N <masked loss> <correct>/<batch>`.
MnistResult run_mnist_experiment(const MnistConfig& cfg,
                                 std::ostream* live_log = nullptr);

/// Seeded 8x8 three-class blob images in IDX byte form, so the synthetic
/// path exercises the same loader and scaling pipeline as file input.
void make_synthetic_blobs(std::int64_t count, std::uint64_t seed,
                          IdxData& images, IdxData& labels);

}  // namespace bittrace::experiments
