#include "bittrace/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "bittrace/errors.hpp"

namespace bittrace::experiments {

// ---------------------------------------------------------------------------
// Piecewise-linear targets.

double PwlSpec::eval(double x) const {
    double v = start;
    double prev = -1.0;
    for (std::size_t i = 0; i < slopes.size(); ++i) {
        const double seg_end = i < breakpoints.size() ? breakpoints[i] : 1.0;
        if (x <= seg_end) {
            return v + slopes[i] * (x - prev);
        }
        v += slopes[i] * (seg_end - prev);
        prev = seg_end;
    }
    return v;
}

PwlSpec random_pwl(int breaks, Rng& rng) {
    if (breaks < 1) throw numeric_error("piecewise-linear target needs breaks >= 1");
    PwlSpec spec;
    spec.breakpoints.resize(static_cast<std::size_t>(breaks));
    for (double& b : spec.breakpoints) b = rng.uniform(-1.0, 1.0);
    std::sort(spec.breakpoints.begin(), spec.breakpoints.end());
    spec.slopes.resize(static_cast<std::size_t>(breaks) + 1);
    for (double& s : spec.slopes) s = rng.uniform(-2.0, 2.0);
    spec.start = rng.uniform(-1.0, 1.0);
    return spec;
}

PwlSpec load_pwl_spec(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open function spec: " + path);
    PwlSpec spec;
    bool have_slopes = false, have_start = false;
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        if (key == "breakpoints") {
            double v;
            while (ls >> v) spec.breakpoints.push_back(v);
        } else if (key == "slopes") {
            double v;
            while (ls >> v) spec.slopes.push_back(v);
            have_slopes = true;
        } else if (key == "start") {
            if (!(ls >> spec.start)) throw io_error("bad start line in " + path);
            have_start = true;
        } else {
            throw io_error("unknown key '" + key + "' in " + path);
        }
    }
    if (!have_slopes || !have_start ||
        spec.slopes.size() != spec.breakpoints.size() + 1) {
        throw io_error("function spec needs breakpoints, slopes (one more than "
                       "breakpoints) and start: " + path);
    }
    if (!std::is_sorted(spec.breakpoints.begin(), spec.breakpoints.end())) {
        throw io_error("breakpoints must be sorted: " + path);
    }
    return spec;
}

Dataset1d sample_pwl(const PwlSpec& spec, int grid_n, Precision p) {
    if (grid_n < 2) throw numeric_error("grid needs at least 2 points");
    std::vector<double> xs(static_cast<std::size_t>(grid_n));
    std::vector<double> ys(static_cast<std::size_t>(grid_n));
    for (int i = 0; i < grid_n; ++i) {
        const double x = -1.0 + 2.0 * static_cast<double>(i) /
                                    static_cast<double>(grid_n - 1);
        xs[static_cast<std::size_t>(i)] = x;
        ys[static_cast<std::size_t>(i)] = spec.eval(x);
    }
    Dataset1d ds;
    ds.x = PTensor::exact(std::move(xs), Shape{grid_n, 1}, p);
    ds.y = PTensor::exact(std::move(ys), Shape{grid_n, 1}, p);
    return ds;
}

Dataset1d gen_pwl(const PwlConfig& cfg) {
    Rng rng(cfg.seed);
    const PwlSpec spec = random_pwl(cfg.breaks, rng);
    return sample_pwl(spec, cfg.grid_n, cfg.precision);
}

// ---------------------------------------------------------------------------
// Training loops.

namespace {

struct GradStats {
    ExactBits min_bits;
    double bit_sum = 0.0;
    std::int64_t count = 0;

    explicit GradStats(Precision p)
        : min_bits(static_cast<ExactBits>(max_bits(p))) {}

    double mean() const {
        return count > 0 ? bit_sum / static_cast<double>(count) : 0.0;
    }
};

/// Gradient-bit statistics are collected through the hook protocol: one
/// once-callable hook per parameter observes the fully summed gradient.
void register_stat_hooks(Graph& g, const std::vector<NodeId>& params,
                         GradStats& stats) {
    for (const NodeId id : params) {
        Hook h;
        h.fn = [&stats](const PTensor& grad, const TempView&)
            -> std::optional<std::vector<ExactBits>> {
            stats.min_bits = std::min(stats.min_bits, grad.min_bits());
            for (const ExactBits b : grad.bits()) stats.bit_sum += b;
            stats.count += grad.numel();
            return std::nullopt;
        };
        g.register_hook(id, std::move(h));
    }
}

}  // namespace

TrainTrace run_pwl_experiment(const PwlConfig& cfg, const PwlSpec* spec_override) {
    Rng rng(cfg.seed);
    const PwlSpec spec = spec_override ? *spec_override : random_pwl(cfg.breaks, rng);
    const Dataset1d ds = sample_pwl(spec, cfg.grid_n, cfg.precision);

    Graph g(cfg.precision);
    const NodeId x = g.literal(ds.x);
    const NodeId y = g.literal(ds.y);
    const std::int64_t h = cfg.neurons;
    const NodeId w1 = g.parameter(nn::init_uniform(Shape{h, 1}, 1, rng, cfg.precision));
    const NodeId b1 = g.parameter(nn::init_uniform(Shape{h}, 1, rng, cfg.precision));
    const NodeId w2 = g.parameter(nn::init_uniform(Shape{1, h}, h, rng, cfg.precision));
    const NodeId b2 = g.parameter(nn::init_uniform(Shape{1}, h, rng, cfg.precision));
    const std::vector<NodeId> params = {w1, b1, w2, b2};

    const NodeId hidden = g.relu(nn::linear(g, x, w1, b1));
    const NodeId pred = nn::linear(g, hidden, w2, b2);
    const NodeId loss = nn::mse_loss(g, pred, y);
    g.set_sink(loss);

    nn::AdamConfig acfg;
    acfg.lr = cfg.lr;
    nn::Adam opt(g, params, acfg);

    TrainTrace trace;
    trace.records.reserve(static_cast<std::size_t>(cfg.steps));
    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        GradStats stats(cfg.precision);
        register_stat_hooks(g, params, stats);
        const PTensor loss_t = g.forward({});
        auto grads = g.backward();
        nn::SignificanceReport report = nn::significance_check(loss_t, grads);

        bool skipped = false;
        if (cfg.guard) {
            skipped = !opt.step(grads, report);
        } else {
            nn::SignificanceReport forced = report;
            forced.verdict = nn::SignificanceReport::Verdict::Proceed;
            opt.step(grads, forced);
        }

        StepRecord rec;
        rec.step = step;
        rec.loss = loss_t.value_at(0);
        rec.loss_bits = loss_t.bits_at(0);
        rec.min_grad_bits = stats.min_bits;
        rec.mean_grad_bits = stats.mean();
        rec.min_param_bits = opt.min_param_bits();
        rec.skipped = skipped;
        trace.records.push_back(rec);
    }
    trace.skipped_steps = opt.skipped_steps();
    return trace;
}

// ---------------------------------------------------------------------------
// CSV / SVG export.

void export_trace_csv(const TrainTrace& trace, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw io_error("cannot open for writing: " + path);
    os << "step,loss,loss_bits,min_grad_bits,mean_grad_bits,min_param_bits,skipped\n";
    char buf[160];
    for (const StepRecord& r : trace.records) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%d,%d,%.4f,%d,%d\n",
                      static_cast<long long>(r.step), r.loss,
                      static_cast<int>(r.loss_bits), static_cast<int>(r.min_grad_bits),
                      r.mean_grad_bits, static_cast<int>(r.min_param_bits),
                      r.skipped ? 1 : 0);
        os << buf;
    }
    if (!os) throw io_error("failed writing " + path);
}

TrainTrace parse_trace_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw io_error("empty trace file: " + path);
    if (line != "step,loss,loss_bits,min_grad_bits,mean_grad_bits,min_param_bits,skipped") {
        throw io_error("unexpected trace header in " + path);
    }
    TrainTrace trace;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        StepRecord r;
        long long step = 0;
        int lb = 0, gb = 0, pb = 0, sk = 0;
        if (std::sscanf(line.c_str(), "%lld,%lg,%d,%d,%lg,%d,%d", &step, &r.loss,
                        &lb, &gb, &r.mean_grad_bits, &pb, &sk) != 7) {
            throw io_error("bad trace row: " + line);
        }
        r.step = step;
        r.loss_bits = static_cast<ExactBits>(lb);
        r.min_grad_bits = static_cast<ExactBits>(gb);
        r.min_param_bits = static_cast<ExactBits>(pb);
        r.skipped = sk != 0;
        trace.records.push_back(r);
        if (r.skipped) ++trace.skipped_steps;
    }
    return trace;
}

namespace {

struct SvgPanel {
    double x0, y0, w, h;
};

void polyline(std::ostream& os, const SvgPanel& p,
              const std::vector<double>& xs, const std::vector<double>& ys,
              const char* color) {
    double ymin = std::numeric_limits<double>::infinity();
    double ymax = -std::numeric_limits<double>::infinity();
    for (const double y : ys) {
        if (std::isfinite(y)) {
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    if (!std::isfinite(ymin)) {
        ymin = 0.0;
        ymax = 1.0;
    }
    if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
    const double xmax = xs.empty() ? 1.0 : xs.back();
    os << "<polyline fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"1\" points=\"";
    char buf[64];
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!std::isfinite(ys[i])) continue;
        const double px = p.x0 + p.w * (xmax > 0 ? xs[i] / xmax : 0.0);
        const double py = p.y0 + p.h * (1.0 - (ys[i] - ymin) / (ymax - ymin));
        std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", px, py);
        os << buf;
    }
    os << "\"/>\n";
}

}  // namespace

void export_trace_svg(const TrainTrace& trace, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw io_error("cannot open for writing: " + path);
    const std::size_t n = trace.records.size();
    const std::size_t stride = std::max<std::size_t>(1, n / 2000);
    std::vector<double> xs, log_loss, bits;
    for (std::size_t i = 0; i < n; i += stride) {
        const StepRecord& r = trace.records[i];
        xs.push_back(static_cast<double>(r.step));
        log_loss.push_back(r.loss > 0 ? std::log10(r.loss)
                                      : std::numeric_limits<double>::quiet_NaN());
        bits.push_back(static_cast<double>(r.loss_bits));
    }
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"520\" "
          "viewBox=\"0 0 800 520\">\n";
    os << "<rect width=\"800\" height=\"520\" fill=\"white\"/>\n";
    os << "<text x=\"40\" y=\"20\" font-size=\"13\">log10 loss</text>\n";
    os << "<text x=\"40\" y=\"280\" font-size=\"13\">loss exact bits</text>\n";
    os << "<rect x=\"40\" y=\"30\" width=\"720\" height=\"200\" fill=\"none\" "
          "stroke=\"black\" stroke-width=\"0.5\"/>\n";
    os << "<rect x=\"40\" y=\"290\" width=\"720\" height=\"200\" fill=\"none\" "
          "stroke=\"black\" stroke-width=\"0.5\"/>\n";
    polyline(os, SvgPanel{40, 30, 720, 200}, xs, log_loss, "#1f5fbf");
    polyline(os, SvgPanel{40, 290, 720, 200}, xs, bits, "#bf3f1f");
    os << "</svg>\n";
    if (!os) throw io_error("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Fluctuation detectors.

namespace {

/// Order-statistics window over the trailing losses (lower median).
class SlidingMedian {
public:
    void insert(double v) {
        if (lo_.empty() || v <= *lo_.rbegin()) {
            lo_.insert(v);
        } else {
            hi_.insert(v);
        }
        rebalance();
    }
    void erase(double v) {
        const auto it = lo_.find(v);
        if (it != lo_.end()) {
            lo_.erase(it);
        } else {
            hi_.erase(hi_.find(v));
        }
        rebalance();
    }
    double median() const { return *lo_.rbegin(); }
    std::size_t size() const { return lo_.size() + hi_.size(); }

private:
    void rebalance() {
        while (lo_.size() > hi_.size() + 1) {
            hi_.insert(*lo_.rbegin());
            lo_.erase(std::prev(lo_.end()));
        }
        while (hi_.size() > lo_.size()) {
            lo_.insert(*hi_.begin());
            hi_.erase(hi_.begin());
        }
    }
    std::multiset<double> lo_, hi_;
};

constexpr std::int64_t kMedianWindow = 1000;
constexpr std::int64_t kRefractory = 1000;
constexpr std::int64_t kPrecursorWindow = 2000;
constexpr int kPrecursorDrop = 5;

bool precursor_in_window(const std::vector<StepRecord>& rs, std::int64_t t) {
    const std::int64_t lo = std::max<std::int64_t>(0, t - kPrecursorWindow);
    int run_max = -1;
    for (std::int64_t i = lo; i < t; ++i) {
        const int b = rs[static_cast<std::size_t>(i)].loss_bits;
        run_max = std::max(run_max, b);
        if (run_max - b >= kPrecursorDrop) return true;
    }
    return false;
}

}  // namespace

FluctuationEvents detect_fluctuations(const TrainTrace& trace) {
    FluctuationEvents ev;
    const auto& rs = trace.records;
    SlidingMedian window;
    std::int64_t last_explosion = std::numeric_limits<std::int64_t>::min();
    for (std::int64_t t = 0; t < static_cast<std::int64_t>(rs.size()); ++t) {
        const double loss = rs[static_cast<std::size_t>(t)].loss;
        if (window.size() == static_cast<std::size_t>(kMedianWindow)) {
            const double med = window.median();
            const bool explosion = std::isfinite(loss) && loss > 10.0 * med;
            if (explosion) {
                if (t - last_explosion > kRefractory) {
                    ev.explosion_steps.push_back(t);
                    ev.precursor_fired.push_back(precursor_in_window(rs, t));
                }
                last_explosion = t;
            }
        }
        window.insert(loss);
        if (window.size() > static_cast<std::size_t>(kMedianWindow)) {
            window.erase(rs[static_cast<std::size_t>(t - kMedianWindow)].loss);
        }
    }
    return ev;
}

// ---------------------------------------------------------------------------
// Masked digits.

std::string mask_digits(double v, ExactBits e, Precision p) {
    if (!std::isfinite(v) || v < 0.0) return "?.??????";
    const int emax = max_bits(p);
    double abs_err;
    if (e >= emax) {
        abs_err = 0.0;
    } else if (e == 0) {
        abs_err = v != 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    } else {
        abs_err = v * std::ldexp(1.0, -static_cast<int>(e));
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    std::string s = buf;
    const std::size_t dot = s.find('.');
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i == dot) continue;
        const int place = i < dot ? static_cast<int>(dot - 1 - i)
                                  : -static_cast<int>(i - dot);
        const double threshold = 0.5 * std::pow(10.0, place);
        if (!(abs_err < threshold)) s[i] = '?';
    }
    return s;
}

// ---------------------------------------------------------------------------
// Classification experiment.

void make_synthetic_blobs(std::int64_t count, std::uint64_t seed,
                          IdxData& images, IdxData& labels) {
    constexpr std::int64_t kSide = 8;
    constexpr double kCenters[3][2] = {{2.0, 2.0}, {5.0, 5.0}, {2.0, 5.0}};
    Rng rng(seed);
    images.dims = {count, kSide, kSide};
    images.bytes.assign(static_cast<std::size_t>(count * kSide * kSide), 0);
    labels.dims = {count};
    labels.bytes.resize(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        const int cls = static_cast<int>(i % 3);
        labels.bytes[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(cls);
        const double cx = kCenters[cls][0] + rng.uniform(-0.5, 0.5);
        const double cy = kCenters[cls][1] + rng.uniform(-0.5, 0.5);
        for (std::int64_t y = 0; y < kSide; ++y) {
            for (std::int64_t x = 0; x < kSide; ++x) {
                const double d2 = (static_cast<double>(x) - cx) * (static_cast<double>(x) - cx) +
                                  (static_cast<double>(y) - cy) * (static_cast<double>(y) - cy);
                double val = 220.0 * std::exp(-d2 / (2.0 * 1.3 * 1.3)) +
                             rng.uniform(0.0, 30.0);
                val = std::clamp(val, 0.0, 255.0);
                images.bytes[static_cast<std::size_t>((i * kSide + y) * kSide + x)] =
                    static_cast<std::uint8_t>(val);
            }
        }
    }
}

MnistResult run_mnist_experiment(const MnistConfig& cfg, std::ostream* live_log) {
    IdxData images, labels;
    if (cfg.synthetic) {
        make_synthetic_blobs(cfg.subset, cfg.seed, images, labels);
    } else {
        images = load_idx(cfg.images_path);
        labels = load_idx(cfg.labels_path);
    }
    if (images.dims.size() != 3 || labels.dims.size() != 1) {
        throw io_error("expected a 3-d image file and a 1-d label file");
    }
    if (images.dims[0] != labels.dims[0]) {
        throw io_error("image/label counts disagree");
    }
    const std::int64_t total = std::min<std::int64_t>(images.dims[0], cfg.subset);
    const std::int64_t height = images.dims[1];
    const std::int64_t width = images.dims[2];
    std::int64_t classes = 0;
    for (std::int64_t i = 0; i < total; ++i) {
        classes = std::max<std::int64_t>(classes, labels.bytes[static_cast<std::size_t>(i)] + 1);
    }
    const Precision p = cfg.precision;
    const std::int64_t batch = cfg.batch;
    if (batch < 1 || total < batch) {
        throw numeric_error("subset smaller than one batch");
    }

    Rng rng(cfg.seed + 1);  // distinct stream from the synthetic generator
    Graph g(p);
    const NodeId x = g.placeholder(Shape{batch, 1, height, width});
    const Conv2dGeom geom = make_conv_geom(Shape{batch, 1, height, width}, 3, 3, 1);
    const NodeId kernel = g.parameter(nn::init_uniform(Shape{4, 1, 3, 3}, 9, rng, p));
    const NodeId kbias = g.parameter(nn::init_uniform(Shape{4}, 9, rng, p));
    const std::int64_t flat = 4 * geom.out_h * geom.out_w;
    const NodeId w1 = g.parameter(nn::init_uniform(Shape{cfg.hidden, flat}, flat, rng, p));
    const NodeId b1 = g.parameter(nn::init_uniform(Shape{cfg.hidden}, flat, rng, p));
    const NodeId w2 = g.parameter(nn::init_uniform(Shape{classes, cfg.hidden}, cfg.hidden, rng, p));
    const NodeId b2 = g.parameter(nn::init_uniform(Shape{classes}, cfg.hidden, rng, p));
    const std::vector<NodeId> params = {kernel, kbias, w1, b1, w2, b2};

    const NodeId conv = nn::conv2d(g, x, kernel, kbias, 1);
    const NodeId act = g.relu(conv);
    const NodeId flattened = g.reshape(act, Shape{batch, flat});
    const NodeId fc1 = g.relu(nn::linear(g, flattened, w1, b1));
    const NodeId logits = nn::linear(g, fc1, w2, b2);
    std::vector<std::int64_t> batch_labels(static_cast<std::size_t>(batch), 0);
    NodeId gather_node = -1;
    const NodeId loss = nn::cross_entropy(g, logits, batch_labels, &gather_node);
    g.set_sink(loss);

    nn::Adam opt(g, params, nn::AdamConfig{});

    const PTensor scale = PTensor::exact_scalar(256.0, p);
    std::vector<std::int64_t> index(static_cast<std::size_t>(total));
    for (std::int64_t i = 0; i < total; ++i) index[static_cast<std::size_t>(i)] = i;

    MnistResult result;
    result.classes = classes;
    result.samples = total;
    std::int64_t batch_num = 0;
    const std::int64_t batches_per_epoch = total / batch;

    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(index);
        for (std::int64_t bi = 0; bi < batches_per_epoch; ++bi) {
            ++batch_num;
            std::vector<double> raw(static_cast<std::size_t>(batch * height * width));
            std::vector<std::int64_t> lab(static_cast<std::size_t>(batch));
            for (std::int64_t j = 0; j < batch; ++j) {
                const std::int64_t src = index[static_cast<std::size_t>(bi * batch + j)];
                lab[static_cast<std::size_t>(j)] =
                    labels.bytes[static_cast<std::size_t>(src)];
                for (std::int64_t k = 0; k < height * width; ++k) {
                    raw[static_cast<std::size_t>(j * height * width + k)] =
                        static_cast<double>(
                            images.bytes[static_cast<std::size_t>(src * height * width + k)]);
                }
            }
            // Pixels enter as exact byte values and are scaled to [0,1) by a
            // tracked division.
            const PTensor bytes =
                PTensor::exact(std::move(raw), Shape{batch, 1, height, width}, p);
            const PTensor xin = div(bytes, scale);
            g.set_labels(gather_node, lab);

            GradStats stats(p);
            register_stat_hooks(g, params, stats);
            const PTensor loss_t = g.forward({{x, xin}});
            const PTensor logit_vals = *g.value_of(logits);
            auto grads = g.backward();
            const nn::SignificanceReport report = nn::significance_check(loss_t, grads);
            const bool applied = opt.step(grads, report);

            std::int64_t correct = 0;
            for (std::int64_t j = 0; j < batch; ++j) {
                std::int64_t best = 0;
                for (std::int64_t c = 1; c < classes; ++c) {
                    if (logit_vals.value_at(j * classes + c) >
                        logit_vals.value_at(j * classes + best)) {
                        best = c;
                    }
                }
                if (best == lab[static_cast<std::size_t>(j)]) ++correct;
            }

            char line[96];
            std::snprintf(line, sizeof(line), "batch_num=%lld %s %lld/%lld",
                          static_cast<long long>(batch_num),
                          mask_digits(loss_t.value_at(0), loss_t.bits_at(0), p).c_str(),
                          static_cast<long long>(correct),
                          static_cast<long long>(batch));
            result.log_lines.emplace_back(line);
            if (live_log) (*live_log) << line << '\n';

            StepRecord rec;
            rec.step = batch_num;
            rec.loss = loss_t.value_at(0);
            rec.loss_bits = loss_t.bits_at(0);
            rec.min_grad_bits = stats.min_bits;
            rec.mean_grad_bits = stats.mean();
            rec.min_param_bits = opt.min_param_bits();
            rec.skipped = !applied;
            result.trace.records.push_back(rec);
        }
    }
    result.trace.skipped_steps = opt.skipped_steps();
    return result;
}

}  // namespace bittrace::experiments
