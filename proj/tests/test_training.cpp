#include "bstnn/checkpoint.hpp"
#include "bstnn/errors.hpp"
#include "bstnn/synthdata.hpp"
#include "bstnn/training.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

using namespace bstnn;

namespace {

const SpatioTemporalDataset& small_dataset() {
    static const SpatioTemporalDataset ds = [] {
        SyntheticConfig c;
        c.nodes = 5;
        c.seed = 3;
        c.mask_rate = 0.2;
        return simulate(c);
    }();
    return ds;
}

TrainingConfig small_config(Regime mode, std::uint64_t seed) {
    TrainingConfig c;
    c.mode = mode;
    c.seed = seed;
    c.epochs = 5;
    c.window = 24;
    c.horizon = 6;
    c.batch_size = 16;
    c.max_windows_per_epoch = 96;
    c.max_validation_windows = 32;
    c.arch.lstm1_units = 6;
    c.arch.lstm2_units = 8;
    c.arch.graph_units = 8;
    return c;
}

DatasetSplit small_split(const TrainingConfig& c) {
    return split_weekly(small_dataset(), c.test_year, c.val_fraction, c.seed);
}

Tensor random_tensor(Shape shape, Rng& rng) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.normal();
    return Tensor(std::move(shape), std::move(v));
}

double first_to_last_change(const TrainingResult& r) {
    return r.history.back().train_loss - r.history.front().train_loss;
}

double median3(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[1];
}

} // namespace

TEST(SplitWeekly, TwoYearsWithTwentyPercentValidation) {
    const auto s = split_weekly(104 * 168, 1, 0.2, 7);
    EXPECT_EQ(s.test_weeks.size(), 52u);
    EXPECT_EQ(s.validation_weeks.size(), 10u);
    EXPECT_EQ(s.train_weeks.size(), 42u);
    EXPECT_EQ(s.test_begin(), 52u * 168u);
    EXPECT_EQ(s.test_end(), 104u * 168u);
    std::set<std::size_t> all(s.train_weeks.begin(), s.train_weeks.end());
    all.insert(s.validation_weeks.begin(), s.validation_weeks.end());
    all.insert(s.test_weeks.begin(), s.test_weeks.end());
    EXPECT_EQ(all.size(), 104u);
}

TEST(SplitWeekly, NoValidationFraction) {
    const auto s = split_weekly(104 * 168, 1, 0.0, 7);
    EXPECT_TRUE(s.validation_weeks.empty());
    EXPECT_EQ(s.train_weeks.size(), 52u);
}

TEST(SplitWeekly, SeedDeterminesSplit) {
    const auto a = split_weekly(104 * 168, 1, 0.2, 7);
    const auto b = split_weekly(104 * 168, 1, 0.2, 7);
    const auto c = split_weekly(104 * 168, 1, 0.2, 8);
    EXPECT_EQ(a.validation_weeks, b.validation_weeks);
    EXPECT_EQ(a.roles, b.roles);
    EXPECT_NE(a.validation_weeks, c.validation_weeks);
}

TEST(SplitWeekly, WindowsStayInsideTheirRole) {
    const auto s = split_weekly(104 * 168, 0, 0.2, 1);
    EXPECT_EQ(s.test_begin(), 0u);
    for (std::size_t start : s.windows(WeekRole::Validation, 36, 5)) {
        for (std::size_t h = start; h < start + 36; ++h) EXPECT_EQ(s.roles[s.week_of(h)], WeekRole::Validation);
    }
    EXPECT_FALSE(s.window_inside(0, 200, WeekRole::Train));
    EXPECT_TRUE(s.window_inside(0, 168, WeekRole::Test));
}

TEST(SplitWeekly, TooShortOrInvalid) {
    EXPECT_THROW(split_weekly(60 * 168, 1, 0.2, 1), ContractError);
    EXPECT_THROW(split_weekly(104 * 168, 1, 1.0, 1), ContractError);
}

TEST(Standardizer, TrainingFeaturesAreCentredAndScaled) {
    const auto& ds = small_dataset();
    const auto split = split_weekly(ds, 1, 0.2, 1);
    const auto st = Standardizer::fit(ds, split);
    const auto f = st.features(ds);
    const auto y = st.targets(ds);
    for (std::size_t d = 0; d < ds.channels; ++d) {
        double s = 0, s2 = 0, n = 0;
        for (std::size_t t = 0; t < ds.steps; ++t) {
            if (split.roles[split.week_of(t)] != WeekRole::Train) continue;
            for (std::size_t k = 0; k < ds.nodes; ++k) {
                const double v = f[(t * ds.nodes + k) * ds.channels + d];
                s += v;
                s2 += v * v;
                ++n;
            }
        }
        EXPECT_NEAR(s / n, 0.0, 1e-9);
        EXPECT_NEAR(s2 / n - (s / n) * (s / n), 1.0, 1e-6);
    }
    double s = 0, n = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (!ds.valid[i] || split.roles[split.week_of(i / ds.nodes)] != WeekRole::Train) continue;
        s += y[i];
        ++n;
    }
    EXPECT_NEAR(s / n, 0.0, 1e-9);
    EXPECT_NEAR(st.to_original(1.0), st.target_mean + st.target_std, 1e-12);
    EXPECT_NEAR(st.log_variance_to_original(0.0), 2.0 * std::log(st.target_std), 1e-12);
    const auto round = standardizer_from_json(standardizer_to_json(st));
    EXPECT_EQ(round.feature_mean, st.feature_mean);
    EXPECT_EQ(round.target_std, st.target_std);
}

TEST(Losses, PerfectPredictionWithoutRegularizers) {
    const Tensor y = Tensor::vector({1.0, 2.0, 3.0});
    const std::vector<std::uint8_t> mask{1, 1, 1};
    const auto l = loss_btnn(y, y, mask, Tensor::scalar(0.0), Tensor::scalar(0.0));
    ASSERT_TRUE(l.has_value());
    EXPECT_EQ(l->total.item(), 0.0);
}

TEST(Losses, ConstantOffsetOfTwo) {
    const Tensor y = Tensor::vector({1.0, 2.0, 3.0, 9.0});
    const Tensor p = Tensor::vector({3.0, 4.0, 5.0, 0.0});
    const std::vector<std::uint8_t> mask{1, 1, 1, 0};
    EXPECT_DOUBLE_EQ(loss_btnn(p, y, mask, Tensor::scalar(0.0), Tensor::scalar(0.0))->total.item(), 4.0);
    EXPECT_DOUBLE_EQ(loss_bstnn(p, y, mask, Tensor::scalar(0.0))->total.item(), 4.0);
}

TEST(Losses, KlTermIncreasesLoss) {
    VariationalParameter vp;
    vp.mu = Tensor::parameter({2}, {0.5, -0.3});
    vp.rho = Tensor::parameter({2}, {-2.0, -1.0});
    const VariationalParameter* ps[] = {&vp};
    Rng rng(1);
    const Tensor kl = kl_loss(ps, Prior::gaussian(0, 1), 0.01, rng);
    const Tensor y = Tensor::vector({1.0});
    const Tensor p = Tensor::vector({1.5});
    const std::vector<std::uint8_t> mask{1};
    EXPECT_GT(loss_bstnn(p, y, mask, kl)->total.item(), loss_bstnn(p, y, mask, Tensor::scalar(0.0))->total.item());
}

TEST(Losses, EmptyMaskSkipsBatch) {
    const Tensor y = Tensor::vector({1.0, 2.0});
    const std::vector<std::uint8_t> mask{0, 0};
    EXPECT_FALSE(masked_mse(y, y, mask).has_value());
    EXPECT_FALSE(loss_bstnn(y, y, mask, Tensor::scalar(0.0)).has_value());
    EXPECT_FALSE(loss_compbnn(y, y, Tensor::vector({0.0, 0.0}), mask).has_value());
}

TEST(Losses, MaskedTargetsMayBeNan) {
    const Tensor y = Tensor::vector({1.0, std::nan("")});
    const Tensor p = Tensor::vector({2.0, 0.0});
    const std::vector<std::uint8_t> mask{1, 0};
    EXPECT_DOUBLE_EQ(masked_mse(p, y, mask)->item(), 1.0);
}

TEST(CompBnnLoss, KnownValues) {
    const std::vector<std::uint8_t> mask{1};
    EXPECT_EQ(loss_compbnn(Tensor::vector({2.0}), Tensor::vector({2.0}), Tensor::vector({0.0}), mask)->item(), 0.0);
    EXPECT_DOUBLE_EQ(loss_compbnn(Tensor::vector({3.0}), Tensor::vector({2.0}), Tensor::vector({0.0}), mask)->item(),
                     0.5);
}

TEST(CompBnnLoss, OptimizerFindsZeroLogVarianceForUnitResidual) {
    Tensor s = Tensor::parameter({1}, {1.5});
    Adam opt({&s}, {.learning_rate = 0.05});
    const std::vector<std::uint8_t> mask{1};
    for (int i = 0; i < 2000; ++i) {
        opt.zero_grad();
        Tape tape;
        TapeScope scope(tape);
        tape.backward(*loss_compbnn(Tensor::vector({1.0}), Tensor::vector({0.0}), s, mask));
        ASSERT_TRUE(opt.step());
    }
    EXPECT_GE(s[0], -0.05);
    EXPECT_LE(s[0], 0.05);
}

TEST(Adam, ZeroGradientLeavesParameters) {
    Tensor x = Tensor::parameter({2}, {1.0, -2.0});
    Adam opt({&x}, {});
    opt.zero_grad();
    {
        Tape tape;
        TapeScope scope(tape);
        tape.backward(scale(sum(x), 0.0));
    }
    ASSERT_TRUE(opt.step());
    EXPECT_EQ(x[0], 1.0);
    EXPECT_EQ(x[1], -2.0);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
    Tensor x = Tensor::parameter({3}, {0.0, 0.0, 0.0});
    Adam opt({&x}, {.learning_rate = 0.01});
    {
        Tape tape;
        TapeScope scope(tape);
        tape.backward(sum(mul(x, Tensor::vector({3.0, -0.2, 50.0}))));
    }
    ASSERT_TRUE(opt.step());
    EXPECT_NEAR(x[0], -0.01, 1e-9);
    EXPECT_NEAR(x[1], 0.01, 1e-9);
    EXPECT_NEAR(x[2], -0.01, 1e-9);
}

TEST(Adam, ConvergesOnQuadraticBowl) {
    Tensor x = Tensor::parameter({1}, {5.0});
    Adam opt({&x}, {.learning_rate = 0.1});
    for (int i = 0; i < 200; ++i) {
        opt.zero_grad();
        Tape tape;
        TapeScope scope(tape);
        tape.backward(sum(square(x)));
        opt.step();
    }
    EXPECT_LT(std::abs(x[0]), 0.5);
}

TEST(Adam, NonFiniteGradientAbortsStep) {
    Tensor x = Tensor::parameter({1}, {0.0});
    Adam opt({&x}, {});
    {
        Tape tape;
        TapeScope scope(tape);
        tape.backward(sum(log(x)));
    }
    EXPECT_FALSE(opt.step());
    EXPECT_EQ(x[0], 0.0);
    EXPECT_EQ(opt.steps(), 0u);
}

TEST(Objectives, FrozenTemporalGroupGetsNoGradient) {
    Rng rng(1);
    TrainingConfig cfg = small_config(Regime::PT, 1);
    const auto graph = dataset_graph(small_dataset(), 1000.0);
    BSTNNModel m(cfg.arch, graph, rng);
    const Tensor x = random_tensor({8, 2, 5, 4}, rng);
    const Tensor y = random_tensor({6, 2, 5}, rng);
    const std::vector<std::uint8_t> mask(60, 1);
    for (auto* p : m.parameters()) {
        p->mu.set_requires_grad(true);
        p->rho.set_requires_grad(true);
    }
    {
        Tape tape;
        TapeScope scope(tape);
        auto terms = spatial_objective(m, x, y, mask, cfg, cfg.make_prior(), 1.0, false, rng);
        ASSERT_TRUE(terms.has_value());
        tape.backward(terms->total);
    }
    const auto ps = m.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        double norm = 0.0;
        if (ps[i]->mu.has_grad())
            for (double g : ps[i]->mu.grad()) norm += std::abs(g);
        if (i < m.temporal_parameter_count()) {
            EXPECT_EQ(norm, 0.0) << ps[i]->name;
        } else {
            EXPECT_GT(norm, 0.0) << ps[i]->name;
        }
    }
}

TEST(Objectives, JointTrainingReachesEveryGroup) {
    Rng rng(2);
    TrainingConfig cfg = small_config(Regime::JT, 1);
    BSTNNModel m(cfg.arch, dataset_graph(small_dataset(), 1000.0), rng);
    const Tensor x = random_tensor({8, 2, 5, 4}, rng);
    const Tensor y = random_tensor({6, 2, 5}, rng);
    const std::vector<std::uint8_t> mask(60, 1);
    for (auto* p : m.parameters()) {
        p->mu.set_requires_grad(true);
        p->rho.set_requires_grad(true);
    }
    {
        Tape tape;
        TapeScope scope(tape);
        tape.backward(spatial_objective(m, x, y, mask, cfg, cfg.make_prior(), 1.0, true, rng)->total);
    }
    double temporal = 0.0, spatial = 0.0;
    const auto ps = m.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        ASSERT_TRUE(ps[i]->mu.has_grad()) << ps[i]->name;
        for (double g : ps[i]->mu.grad()) (i < m.temporal_parameter_count() ? temporal : spatial) += std::abs(g);
    }
    EXPECT_GT(temporal, 0.0);
    EXPECT_GT(spatial, 0.0);
}

TEST(Objectives, AllMaskedBatchIsSkipped) {
    Rng rng(3);
    TrainingConfig cfg = small_config(Regime::BTNN, 1);
    BTNNModel m(cfg.arch, rng);
    const std::vector<std::uint8_t> mask(12, 0);
    Tape tape;
    TapeScope scope(tape);
    EXPECT_FALSE(btnn_objective(m, random_tensor({8, 2, 4}, rng), random_tensor({6, 2}, rng), mask, cfg,
                                cfg.make_prior(), 1.0, rng)
                     .has_value());
}

TEST(Train, LossDecreasesForEveryRegime) {
    std::vector<double> btnn, pt, ft, jt, comp;
    const auto small_config = [](Regime mode, std::uint64_t seed) {
        TrainingConfig c = ::small_config(mode, seed);
        c.max_windows_per_epoch = 640;
        return c;
    };
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto split = small_split(small_config(Regime::BTNN, seed));
        const auto b = train(small_config(Regime::BTNN, seed), small_dataset(), split);
        btnn.push_back(first_to_last_change(b));
        const auto p = train(small_config(Regime::PT, seed), small_dataset(), split, &b.trained);
        pt.push_back(first_to_last_change(p));
        const auto f = train(small_config(Regime::FT, seed), small_dataset(), split, &p.trained);
        ft.push_back(first_to_last_change(f));
        jt.push_back(first_to_last_change(train(small_config(Regime::JT, seed), small_dataset(), split)));
        comp.push_back(first_to_last_change(train(small_config(Regime::CompBNN, seed), small_dataset(), split)));
    }
    EXPECT_LT(median3(btnn), 0.0);
    EXPECT_LT(median3(pt), 0.0);
    EXPECT_LT(median3(ft), 0.0);
    EXPECT_LT(median3(jt), 0.0);
    EXPECT_LT(median3(comp), 0.0);
}

TEST(Train, PretrainingFreezesTemporalWeights) {
    const auto cfg = small_config(Regime::BTNN, 4);
    const auto split = small_split(cfg);
    TrainingConfig bc = cfg;
    bc.epochs = 1;
    const auto b = train(bc, small_dataset(), split);
    TrainingConfig pc = small_config(Regime::PT, 4);
    pc.epochs = 2;
    const auto p = train(pc, small_dataset(), split, &b.trained);
    EXPECT_EQ(parameter_hash(p.trained.model, ParameterGroup::Temporal),
              parameter_hash(b.trained.model, ParameterGroup::Temporal));
    TrainingConfig fc = small_config(Regime::FT, 4);
    fc.epochs = 1;
    const auto f = train(fc, small_dataset(), split, &p.trained);
    EXPECT_NE(parameter_hash(f.trained.model, ParameterGroup::Temporal),
              parameter_hash(p.trained.model, ParameterGroup::Temporal));
    EXPECT_NE(parameter_hash(f.trained.model, ParameterGroup::Spatial),
              parameter_hash(p.trained.model, ParameterGroup::Spatial));
}

TEST(Train, SeededJointRunIsReproducible) {
    TrainingConfig c = small_config(Regime::JT, 5);
    c.epochs = 2;
    const auto split = small_split(c);
    const auto a = train(c, small_dataset(), split);
    const auto b = train(c, small_dataset(), split);
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
        EXPECT_EQ(a.history[i].validation_mse, b.history[i].validation_mse);
    }
    EXPECT_EQ(parameter_hash(a.trained.model, ParameterGroup::All), parameter_hash(b.trained.model, ParameterGroup::All));
}

TEST(Train, RegimesRequireMatchingSourceModel) {
    const auto split = small_split(small_config(Regime::PT, 1));
    EXPECT_THROW(train(small_config(Regime::PT, 1), small_dataset(), split), ContractError);
    EXPECT_THROW(train(small_config(Regime::FT, 1), small_dataset(), split), ContractError);
    TrainingConfig bc = small_config(Regime::BTNN, 1);
    bc.epochs = 1;
    const auto b = train(bc, small_dataset(), split);
    EXPECT_THROW(train(small_config(Regime::FT, 1), small_dataset(), split, &b.trained), ContractError);
}

TEST(Train, InvalidConfigurationRejected) {
    TrainingConfig c = small_config(Regime::BTNN, 1);
    c.horizon = c.window + 1;
    EXPECT_THROW(c.validate(), ContractError);
    c = small_config(Regime::BTNN, 1);
    c.learning_rate = 0.0;
    EXPECT_THROW(c.validate(), ContractError);
    EXPECT_EQ(regime_from_string("JT"), Regime::JT);
    EXPECT_THROW(regime_from_string("XX"), ContractError);
    const auto j = config_to_json(small_config(Regime::FT, 9));
    const auto back = config_from_json(j);
    EXPECT_EQ(back.mode, Regime::FT);
    EXPECT_EQ(back.seed, 9u);
    EXPECT_EQ(back.window, 24u);
}

TEST(Checkpoint, RoundTripPreservesModelAndForecast) {
    const auto dir = std::filesystem::temp_directory_path() / "bstnn_ckpt_test";
    std::filesystem::create_directories(dir);
    TrainingConfig c = small_config(Regime::JT, 6);
    c.epochs = 1;
    const auto split = small_split(c);
    const auto r = train(c, small_dataset(), split);
    save_checkpoint(dir / "m.ckpt", r.trained, c);
    const auto back = load_checkpoint(dir / "m.ckpt");
    EXPECT_EQ(parameter_hash(back.trained.model, ParameterGroup::All),
              parameter_hash(r.trained.model, ParameterGroup::All));
    EXPECT_EQ(back.config.mode, Regime::JT);
    ForecastOptions o;
    o.members = 3;
    o.window = c.window;
    o.horizon = c.horizon;
    const auto a = forecast(r.trained, small_dataset(), 9000, 9100, o);
    const auto b = forecast(back.trained, small_dataset(), 9000, 9100, o);
    EXPECT_EQ(a.samples, b.samples);
    EXPECT_EQ(a.steps, 100u);
    EXPECT_EQ(a.nodes, 5u);
    for (double v : a.samples) EXPECT_TRUE(std::isfinite(v));

    auto j = checkpoint_to_json(r.trained, c);
    j["graph"]["hash"] = "12345";
    EXPECT_THROW(checkpoint_from_json(j), DataError);
    EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), DataError);
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, CompBnnRoundTrip) {
    TrainingConfig c = small_config(Regime::CompBNN, 7);
    c.epochs = 1;
    const auto r = train(c, small_dataset(), small_split(c));
    const auto back = checkpoint_from_json(checkpoint_to_json(r.trained, c));
    EXPECT_EQ(parameter_hash(back.trained.model, ParameterGroup::All),
              parameter_hash(r.trained.model, ParameterGroup::All));
}

TEST(Forecast, WorkerCountAndChunkingDoNotChangeResult) {
    TrainingConfig c = small_config(Regime::BTNN, 8);
    c.epochs = 1;
    const auto r = train(c, small_dataset(), small_split(c));
    ForecastOptions o;
    o.members = 4;
    o.window = c.window;
    o.horizon = c.horizon;
    const auto a = forecast(r.trained, small_dataset(), 100, 400, o);
    o.workers = 3;
    const auto b = forecast(r.trained, small_dataset(), 100, 400, o);
    EXPECT_EQ(a.samples, b.samples);
    const auto head = forecast(r.trained, small_dataset(), 0, 10, o);
    EXPECT_EQ(head.steps, 10u);
}
