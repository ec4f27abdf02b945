// Command-line front end: the piecewise-linear fluctuation experiment, the
// classification experiment with masked-loss logging, and a stdin filter
// that renders value/bits pairs with inexact digits masked.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "bittrace/errors.hpp"
#include "bittrace/experiments.hpp"

namespace {

using namespace bittrace;
namespace xp = bittrace::experiments;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;

Precision precision_from_env() {
    const char* env = std::getenv("BITTRACE_PRECISION");
    if (!env) return Precision::Single;
    const std::string v = env;
    if (v == "single") return Precision::Single;
    if (v == "double") return Precision::Double;
    throw numeric_error("BITTRACE_PRECISION must be 'single' or 'double', got '" +
                        v + "'");
}

void print_metadata(const std::string& experiment, std::uint64_t seed, Precision p) {
    std::cout << "meta: experiment=" << experiment << " seed=" << seed
              << " precision=" << (p == Precision::Single ? "single" : "double")
              << " adam lr=0.001 beta1=0.9 beta2=0.999 eps=1e-08"
              << " matmul=rigorous tropical=sum-abs-aggregate\n";
}

int run_pwl(const xp::PwlConfig& cfg, const std::string& spec_path,
            const std::string& csv_path, const std::string& svg_path,
            const std::string& checkpoint_dir) {
    (void)checkpoint_dir;
    print_metadata("pwl", cfg.seed, cfg.precision);
    std::optional<xp::PwlSpec> spec;
    if (!spec_path.empty()) spec = xp::load_pwl_spec(spec_path);
    const xp::TrainTrace trace =
        xp::run_pwl_experiment(cfg, spec ? &*spec : nullptr);
    if (!csv_path.empty()) xp::export_trace_csv(trace, csv_path);
    if (!svg_path.empty()) xp::export_trace_svg(trace, svg_path);
    const xp::FluctuationEvents events = xp::detect_fluctuations(trace);
    std::size_t fired = 0;
    for (const bool f : events.precursor_fired) fired += f ? 1 : 0;
    std::cout << "steps=" << trace.records.size()
              << " skipped=" << trace.skipped_steps
              << " explosions=" << events.explosion_steps.size()
              << " precursors=" << fired << "\n";
    if (!trace.records.empty()) {
        const auto& last = trace.records.back();
        std::cout << "final loss=" << last.loss
                  << " loss_bits=" << static_cast<int>(last.loss_bits)
                  << " min_param_bits=" << static_cast<int>(last.min_param_bits)
                  << "\n";
    }
    return kExitOk;
}

int run_mnist(const xp::MnistConfig& cfg, const std::string& csv_path) {
    print_metadata("mnist", cfg.seed, cfg.precision);
    const xp::MnistResult result = xp::run_mnist_experiment(cfg, &std::cout);
    if (!csv_path.empty()) xp::export_trace_csv(result.trace, csv_path);
    std::cout << "batches=" << result.trace.records.size()
              << " skipped=" << result.trace.skipped_steps
              << " classes=" << result.classes << " samples=" << result.samples
              << "\n";
    return kExitOk;
}

int run_fmt(Precision p) {
    std::string line;
    while (std::getline(std::cin, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        double value = 0.0;
        int bits = 0;
        if (!(ls >> value >> bits) || bits < 0 || bits > 255) {
            std::cerr << "fmt: expected '<value> <bits>' per line, got: " << line
                      << "\n";
            return kExitUsage;
        }
        std::cout << xp::mask_digits(value, static_cast<ExactBits>(bits), p) << "\n";
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"precision-tracked training experiments"};
    app.require_subcommand(1);

    xp::PwlConfig pwl_cfg;
    std::string pwl_spec_path, pwl_csv, pwl_svg, pwl_ckpt;
    CLI::App* pwl = app.add_subcommand("pwl", "piecewise-linear regression run");
    pwl->add_option("--breaks", pwl_cfg.breaks, "interior breakpoints (>= 1)");
    pwl->add_option("--neurons", pwl_cfg.neurons, "hidden width");
    pwl->add_option("--grid", pwl_cfg.grid_n, "grid points on [-1,1]");
    pwl->add_option("--steps", pwl_cfg.steps, "optimizer steps");
    pwl->add_option("--seed", pwl_cfg.seed, "RNG seed");
    pwl->add_option("--lr", pwl_cfg.lr, "Adam learning rate");
    pwl->add_option("--csv", pwl_csv, "trace CSV output path");
    pwl->add_option("--svg", pwl_svg, "trace SVG output path");
    pwl->add_option("--function", pwl_spec_path,
                    "explicit piecewise-linear spec file (overrides the random "
                    "function)");
    pwl->add_flag("--guard", pwl_cfg.guard,
                  "activate the skip-step policy (off by default: a skipped "
                  "full-batch step would repeat forever)");
    pwl->add_option("--checkpoint-out", pwl_ckpt, "unused placeholder");

    xp::MnistConfig mn_cfg;
    std::string mn_csv;
    CLI::App* mn = app.add_subcommand("mnist", "classification run with masked log");
    mn->add_option("--images", mn_cfg.images_path, "IDX image file");
    mn->add_option("--labels", mn_cfg.labels_path, "IDX label file");
    mn->add_flag("--synthetic", mn_cfg.synthetic, "generate seeded 8x8 blobs");
    mn->add_option("--subset", mn_cfg.subset, "training samples to use");
    mn->add_option("--epochs", mn_cfg.epochs, "epochs");
    mn->add_option("--batch", mn_cfg.batch, "batch size");
    mn->add_option("--hidden", mn_cfg.hidden, "hidden width");
    mn->add_option("--seed", mn_cfg.seed, "RNG seed");
    mn->add_option("--csv", mn_csv, "trace CSV output path");

    CLI::App* fmt = app.add_subcommand(
        "fmt", "read '<value> <bits>' pairs from stdin, print masked strings");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
    }

    try {
        const Precision p = precision_from_env();
        pwl_cfg.precision = p;
        mn_cfg.precision = p;
        if (pwl->parsed()) {
            if (pwl_cfg.breaks < 1 && pwl_spec_path.empty()) {
                std::cerr << "pwl: --breaks must be >= 1\n";
                return kExitUsage;
            }
            if (pwl_cfg.neurons < 1 || pwl_cfg.grid_n < 2 || pwl_cfg.steps < 0) {
                std::cerr << "pwl: invalid configuration\n";
                return kExitUsage;
            }
            return run_pwl(pwl_cfg, pwl_spec_path, pwl_csv, pwl_svg, pwl_ckpt);
        }
        if (mn->parsed()) {
            if (!mn_cfg.synthetic &&
                (mn_cfg.images_path.empty() || mn_cfg.labels_path.empty())) {
                std::cerr << "mnist: provide --images and --labels, or --synthetic\n";
                return kExitUsage;
            }
            return run_mnist(mn_cfg, mn_csv);
        }
        if (fmt->parsed()) {
            return run_fmt(p);
        }
    } catch (const io_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitUsage;
}
