// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include "bstnn/cli.hpp"
#include "bstnn/graph.hpp"
#include "bstnn/layers.hpp"
#include "bstnn/metrics.hpp"
#include "bstnn/models.hpp"
#include "bstnn/synthdata.hpp"
#include "bstnn/training.hpp"
#include "bstnn/variational.hpp"
#include "gradcheck.hpp"
#include "metric_examples.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

using namespace bstnn;
using bstnn::testing::grad_check;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = scale * rng.normal();
    return Tensor(std::move(shape), std::move(v));
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s << std::setprecision(precision) << v;
    return s.str();
}

// 1 -----------------------------------------------------------------------

Outcome gradient_correctness() {
    constexpr int kInstances = 20;
    constexpr double kTolerance = 1e-6;
    double worst[4] = {0, 0, 0, 0};
    for (int i = 0; i < kInstances; ++i) {
        Rng rng(1000 + i);
        {
            Tensor x = random_tensor({3, 4}, rng);
            Tensor w = random_tensor({4, 2}, rng, 0.5);
            Tensor b = random_tensor({2}, rng);
            const BayesianDense dense("d", 4, 2, rng);
            auto f = [&] {
                const std::vector<Tensor> ws{w, b};
                return sum(tanh(dense.forward(x, ws)));
            };
            worst[0] = std::max(worst[0], grad_check(f, {x, w, b}).relative_error);
        }
        {
            const std::size_t in = 3, H = 2, B = 2;
            Tensor x = random_tensor({B, in}, rng);
            Tensor h = random_tensor({B, H}, rng);
            Tensor c = random_tensor({B, H}, rng);
            Tensor W = random_tensor({in, 4 * H}, rng, 0.7);
            Tensor U = random_tensor({H, 4 * H}, rng, 0.7);
            Tensor bias = random_tensor({4 * H}, rng, 0.5);
            auto f = [&] {
                const LstmState s = lstm_step(x, {h, c}, {W, U, bias});
                return add(sum(square(s.h)), sum(s.c));
            };
            worst[1] = std::max(worst[1], grad_check(f, {x, h, c, W, U, bias}).relative_error);
        }
        {
            const std::size_t T = 2, N = 3, K = 2, F = 2;
            Tensor hin = random_tensor({T, N, K}, rng);
            Tensor s = random_tensor({N, N}, rng, 0.5);
            Tensor theta = random_tensor({K, F}, rng);
            auto f = [&] { return sum(square(graph_conv_forward(hin, s, theta))); };
            worst[2] = std::max(worst[2], grad_check(f, {hin, theta}).relative_error);
        }
        {
            auto vp = VariationalParameter::create("w", {2, 3}, 2, rng, {.rho = -1.0, .with_eta = true, .eta = 0.05});
            for (auto& r : vp.rho.mutable_data()) r += 0.5 * rng.normal();
            for (auto& e : vp.eta->mutable_data()) e += 0.02 * rng.normal();
            const Tensor eps = rng.standard_normal({2, 3});
            const Tensor eps2 = rng.standard_normal({2, 3});
            const Tensor g = rng.standard_normal({2, 3});
            const SharpeningConfig cfg{0.02, true};
            auto f = [&] {
                const Tensor w = sharpen(sample_weight(vp, eps), g, vp, cfg, eps2);
                return add(sum(mul(w, tanh(w))), sharpening_loss(*vp.eta, g, cfg));
            };
            worst[3] = std::max(worst[3], grad_check(f, {vp.mu, vp.rho, *vp.eta}).relative_error);
        }
    }
    const double overall = *std::max_element(worst, worst + 4);
    return {overall < kTolerance, std::to_string(kInstances) + " instances per layer; max relative error dense " +
                                      fmt(worst[0]) + ", lstm step " + fmt(worst[1]) + ", graph conv " +
                                      fmt(worst[2]) + ", sampling path " + fmt(worst[3])};
}

// 2 -----------------------------------------------------------------------

Outcome kl_oracle() {
    Rng pick(20);
    Rng mc(21);
    double worst = 0.0;
    int pairs = 0;
    while (pairs < 10) {
        const GaussianDist q{pick.normal(), 0.2 + 1.8 * pick.uniform()};
        const GaussianDist p{pick.normal(), 0.2 + 1.8 * pick.uniform()};
        const double exact = kl_gaussian_analytic(q, p);
        if (exact < 0.2) continue;
        const double est = kl_monte_carlo(q, Prior::gaussian(p.mean, p.std), 1000000, mc);
        worst = std::max(worst, std::abs(est - exact) / exact);
        ++pairs;
    }
    return {worst < 0.01, "10 pairs, M = 1e6, max relative deviation " + fmt(worst)};
}

// 3 -----------------------------------------------------------------------

Outcome graph_conv_equivalence() {
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        Rng rng(3000 + i);
        const std::size_t T = 1 + rng.index(4), N = 1 + rng.index(6), K = 1 + rng.index(4), F = 1 + rng.index(4);
        const Tensor h = random_tensor({T, N, K}, rng);
        std::vector<Coord> coords(N);
        for (auto& c : coords) c = {2000.0 * rng.uniform(), 2000.0 * rng.uniform()};
        const Tensor s = normalize_adjacency(build_adjacency_diffusion(coords, 1000.0));
        const Tensor theta = random_tensor({K, F}, rng);
        const Tensor z = graph_conv_forward(h, s, theta);
        for (std::size_t t = 0; t < T; ++t) {
            // Per-step product with plain loops.
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t f = 0; f < F; ++f) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < N; ++j)
                        for (std::size_t k = 0; k < K; ++k)
                            acc += s.at(n, j) * h[(t * N + j) * K + k] * theta.at(k, f);
                    worst = std::max(worst, std::abs(acc - z[(t * N + n) * F + f]));
                }
            }
        }
    }
    return {worst <= 1e-10, "50 instances, max abs difference " + fmt(worst)};
}

// 4 -----------------------------------------------------------------------

class CountingNoise : public NoiseSource {
public:
    explicit CountingNoise(std::uint64_t seed) : rng_(seed) {}
    void fill_normal(std::span<double> out) override {
        ++calls;
        rng_.fill_normal(out);
    }
    std::size_t calls = 0;

private:
    Rng rng_;
};

Outcome forward_contract() {
    Architecture arch;
    bool draws_ok = true;
    double worst = 0.0;
    std::size_t params = 0, draws = 0;
    for (int trial = 0; trial < 5; ++trial) {
        Rng rng(4000 + trial);
        const std::size_t N = 6, T = 12;
        std::vector<Coord> coords(N);
        for (auto& c : coords) c = {3000.0 * rng.uniform(), 3000.0 * rng.uniform()};
        const auto graph = SpatialGraph::diffusion(coords, 1000.0);
        std::vector<std::size_t> perm(N);
        for (std::size_t i = 0; i < N; ++i) perm[i] = i;
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        Rng ia(50 + trial), ib(50 + trial);
        const BSTNNModel a(arch, graph, ia);
        const BSTNNModel b(arch, graph.permuted(perm), ib);
        const Tensor x = random_tensor({T, N, arch.features}, rng);
        Tensor xp(x.shape());
        auto d = xp.mutable_data();
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t k = 0; k < arch.features; ++k)
                    d[(t * N + n) * arch.features + k] = x[(t * N + perm[n]) * arch.features + k];
        CountingNoise na(9 + trial), nb(9 + trial);
        const Tensor y = a.bstnn_forward(x, na);
        const Tensor yp = b.bstnn_forward(xp, nb);
        params = a.parameters().size();
        draws = na.calls;
        draws_ok = draws_ok && na.calls == params && nb.calls == params;
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t n = 0; n < N; ++n) worst = std::max(worst, std::abs(yp[t * N + n] - y[t * N + perm[n]]));
    }
    return {draws_ok && worst <= 1e-8, "draws per forward " + std::to_string(draws) + " for " +
                                           std::to_string(params) + " parameters; permutation max difference " +
                                           fmt(worst)};
}

// 5 -----------------------------------------------------------------------

Outcome sharpening_closed_form() {
    Rng pick(50);
    Rng mc(51);
    double worst = 0.0;
    for (int i = 0; i < 10; ++i) {
        const double sigma0 = 0.01 + 0.09 * pick.uniform();
        const double shift = sigma0 * (0.75 + 2.25 * pick.uniform()) * (pick.uniform() < 0.5 ? -1.0 : 1.0);
        const double eta = 0.01 + 0.2 * pick.uniform();
        const double g = shift / eta;
        const double w = pick.normal();
        const double closed =
            sharpening_loss(Tensor::vector({eta}), Tensor::vector({g}), {sigma0, true}).item();
        const double est = kl_monte_carlo({w - eta * g, sigma0}, Prior::gaussian(w, sigma0), 1000000, mc);
        worst = std::max(worst, std::abs(est - closed) / closed);
    }
    return {worst < 0.01, "10 random (eta*g, sigma0), M = 1e6, max relative deviation " + fmt(worst)};
}

// 6-8 ---------------------------------------------------------------------

struct SeedScores {
    MetricReport btnn;
    MetricReport pt;
    MetricReport comp;
};

MetricReport score(const TrainedModel& m, const SpatioTemporalDataset& ds, const DatasetSplit& split,
                   const TrainingConfig& cfg, std::uint64_t seed) {
    ForecastOptions o;
    o.members = 11;
    o.seed = seed;
    o.window = cfg.window;
    o.horizon = cfg.horizon;
    o.workers = std::max(1u, std::thread::hardware_concurrency());
    const std::size_t b = split.test_begin(), e = split.test_end(), n = ds.nodes;
    const auto ens = forecast(m, ds, b, e, o);
    const std::vector<double> target(ds.targets.begin() + b * n, ds.targets.begin() + e * n);
    const std::vector<std::uint8_t> mask(ds.valid.begin() + b * n, ds.valid.begin() + e * n);
    const std::vector<double> levels{0.75, 0.9};
    const auto start = ds.start_hour + static_cast<std::int64_t>(b);
    if (kind_of(m.model) == ModelKind::CompBNN) {
        const auto var = compbnn_total_variance(ens);
        return evaluate_ensemble(ens, target, mask, levels, start, IntervalMethod::Gaussian, var);
    }
    return evaluate_ensemble(ens, target, mask, levels, start);
}

SeedScores run_seed(std::uint64_t seed) {
    SyntheticConfig sc;
    sc.seed = seed;
    const auto ds = simulate(sc);
    TrainingConfig base;
    base.seed = seed;
    const auto split = split_weekly(ds, base.test_year, base.val_fraction, seed, base.weeks_per_year);

    TrainingConfig bc = base;
    bc.mode = Regime::BTNN;
    bc.epochs = 30;
    bc.max_windows_per_epoch = 4000;
    bc.max_validation_windows = 2000;
    const auto btnn = train(bc, ds, split);

    TrainingConfig pc = base;
    pc.mode = Regime::PT;
    pc.epochs = 40;
    pc.max_windows_per_epoch = 1000;
    pc.max_validation_windows = 300;
    const auto pt = train(pc, ds, split, &btnn.trained);

    TrainingConfig cc = base;
    cc.mode = Regime::CompBNN;
    cc.epochs = 40;
    cc.max_windows_per_epoch = 4000;
    const auto comp = train(cc, ds, split);

    return {score(btnn.trained, ds, split, bc, seed), score(pt.trained, ds, split, pc, seed),
            score(comp.trained, ds, split, cc, seed)};
}

double picp90(const MetricReport& r) { return r.at_level(0.9)->picp.value_or(std::nan("")); }
double mpiw90(const MetricReport& r) { return r.at_level(0.9)->mpiw.value_or(std::nan("")); }

// 10 ----------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool run_pipeline(const fs::path& root, std::string& error) {
    std::ostringstream out, err;
    const std::string data = (root / "data").string();
    const std::vector<std::vector<std::string>> steps{
        {"simulate", "--out", data, "--seed", "11"},
        {"train", "--data", data, "--mode", "JT", "--epochs", "2", "--seed", "11", "--max-windows", "64",
         "--max-validation-windows", "32", "--out", (root / "jt").string()},
        {"evaluate", "--data", data, "--from", (root / "jt" / "model.ckpt").string(), "--ensemble", "3", "--seed",
         "11", "--out", (root / "eval").string()},
    };
    for (const auto& args : steps) {
        if (run_cli(args, out, err) != kExitOk) {
            error = args[0] + " failed: " + err.str();
            return false;
        }
    }
    return true;
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / "bstnn_acceptance_determinism";
    fs::remove_all(root);
    std::string error;
    if (!run_pipeline(root / "a", error) || !run_pipeline(root / "b", error)) return {false, error};
    std::size_t compared = 0;
    std::vector<std::string> differing;
    for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
        if (!entry.is_regular_file() || entry.path().extension() == ".log") continue;
        const fs::path rel = fs::relative(entry.path(), root / "a");
        ++compared;
        if (!fs::exists(root / "b" / rel) || slurp(entry.path()) != slurp(root / "b" / rel))
            differing.push_back(rel.string());
    }
    fs::remove_all(root);
    std::string detail = std::to_string(compared) + " output files compared byte-wise";
    for (const auto& d : differing) detail += "; differs: " + d;
    return {differing.empty() && compared > 0, detail};
}

} // namespace

int main() {
    int failures = 0;
    auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& ex) {
            o = {false, std::string("exception: ") + ex.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!o.pass) ++failures;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << o.detail << " ["
                  << fmt(secs, 3) << " s]" << std::endl;
    };

    report(1, "gradient correctness", gradient_correctness);
    report(2, "KL oracle equivalence", kl_oracle);
    report(3, "graph-conv equivalence", graph_conv_equivalence);
    report(4, "forward sampling contract", forward_contract);
    report(5, "sharpening closed form", sharpening_closed_form);

    std::vector<SeedScores> seeds;
    std::string training_error;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        for (std::uint64_t seed : {1, 2, 3}) {
            seeds.push_back(run_seed(seed));
            const auto& s = seeds.back();
            std::cout << "  seed " << seed << ": BTNN picp90 " << fmt(picp90(s.btnn)) << " mpiw90 "
                      << fmt(mpiw90(s.btnn)) << " | PT R2bar " << fmt(s.pt.mean_r2.value_or(std::nan(""))) << " picp90 "
                      << fmt(picp90(s.pt)) << " mpiw90 " << fmt(mpiw90(s.pt)) << " | compBNN picp90 "
                      << fmt(picp90(s.comp)) << " mpiw90 " << fmt(mpiw90(s.comp)) << std::endl;
        }
    } catch (const std::exception& ex) {
        training_error = ex.what();
    }
    const double train_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool trained = training_error.empty();
    std::cout << "  synthetic runs: " << fmt(train_secs, 4) << " s" << std::endl;

    report(6, "synthetic end-to-end accuracy", [&]() -> Outcome {
        if (!trained) return {false, training_error};
        std::vector<double> r2, cov;
        for (const auto& s : seeds) {
            r2.push_back(s.pt.mean_r2.value_or(std::nan("")));
            cov.push_back(picp90(s.pt));
        }
        const double m_r2 = median_of(r2), m_cov = median_of(cov);
        return {m_r2 >= 0.7 && m_cov >= 0.80 && m_cov <= 0.98,
                "PT median R2bar " + fmt(m_r2) + " (>= 0.7), median PICP_90 " + fmt(m_cov) + " (in [0.80, 0.98])"};
    });
    report(7, "regime trend", [&]() -> Outcome {
        if (!trained) return {false, training_error};
        std::vector<double> gap;
        for (const auto& s : seeds) gap.push_back(picp90(s.pt) - picp90(s.btnn));
        const double m = median_of(gap);
        return {m >= 0.05, "median PICP_90(PT) - PICP_90(BTNN) = " + fmt(m) + " (>= 0.05)"};
    });
    report(8, "baseline parity trend", [&]() -> Outcome {
        if (!trained) return {false, training_error};
        std::vector<double> ratio, gap;
        for (const auto& s : seeds) {
            ratio.push_back(mpiw90(s.pt) / mpiw90(s.comp));
            gap.push_back(picp90(s.pt) - picp90(s.comp));
        }
        const double mr = median_of(ratio), mg = median_of(gap);
        return {mr <= 1.10 && mg >= -0.02, "median MPIW_90 ratio BSTNN/compBNN " + fmt(mr) +
                                               " (<= 1.10), median PICP_90 difference " + fmt(mg) + " (>= -0.02)"};
    });
    report(9, "metric worked examples", [] {
        const auto examples = bstnn::testing::metric_examples();
        std::string failed;
        for (const auto& ex : examples)
            if (!ex.check()) failed += "; failed: " + ex.name;
        return Outcome{failed.empty(), std::to_string(examples.size()) + " examples" + failed};
    });
    report(10, "determinism", determinism);

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
