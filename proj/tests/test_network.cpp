#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "test_util.hpp"

using namespace lsk;
using lsk::testing::Gen;

namespace {

Sample<float> labelled_sample(Gen& g, std::size_t n, int extent, const OffsetList& off, int classes = 3) {
    Sample<float> s;
    s.tensor = lsk::testing::random_tensor<float>(g, n, extent, 2);
    s.nmap = std::make_shared<const NeighborMap>(gather_neighbors(s.tensor, off));
    s.points.num_voxels = n;
    for (std::size_t i = 0; i < n; ++i) {
        s.points.point_to_voxel.push_back(static_cast<std::int32_t>(i));
        // label is a function of the features so it is learnable
        s.labels.push_back(s.tensor.feats(i, 0) > 0.3f ? 2 : (s.tensor.feats(i, 0) < -0.3f ? 0 : 1));
    }
    if (classes != 3)
        for (auto& l : s.labels) l %= classes;
    return s;
}

TrainSchedule tiny_schedule(int iterations = 20) {
    TrainSchedule s;
    s.iterations = iterations;
    s.sparsity.sparsity = 0.4;
    s.sparsity.adapt_every = 5;
    s.sparsity.seed = 11;
    s.peak_lr = 1e-2;
    return s;
}

}  // namespace

TEST(BlockForward, ZeroWeightsGiveIdentity) {
    Gen g(1);
    auto cfg = lsk::testing::tiny_config(3, 1.0, 3, 1);
    LskNetwork<float> net(cfg);
    auto& b = net.blocks[0];
    std::fill(b.conv2.kernel.weight.begin(), b.conv2.kernel.weight.end(), 0.0f);
    const auto x = lsk::testing::random_tensor<float>(g, 40, 5, 3);
    const auto nmap = gather_neighbors(x, net.offsets);
    const auto y = lsk_block_forward(x, b, nmap);
    EXPECT_EQ(y.coords, x.coords);
    EXPECT_EQ(y.feats, x.feats);
}

TEST(BlockForward, IsolatedVoxelUsesCenterTapOnly) {
    auto cfg = lsk::testing::tiny_config(1, 1.0, 3, 1);
    LskNetwork<float> net(cfg);
    auto& b = net.blocks[0];
    const std::size_t c = 13;
    std::fill(b.conv1.kernel.weight.begin(), b.conv1.kernel.weight.end(), 5.0f);
    std::fill(b.conv2.kernel.weight.begin(), b.conv2.kernel.weight.end(), 7.0f);
    b.conv1.kernel.weight[c] = 2.0f;
    b.conv2.kernel.weight[c] = 3.0f;
    b.bn1.running_mean = {1.0f};
    b.bn1.running_var = {1.0f - 1e-5f};
    b.bn1.gamma.value = {1.0f};
    b.bn1.beta.value = {0.0f};
    SparseTensor3D<float> x({{4, 4, 4}}, Matrix<float>(1, 1, 1.5f));
    const auto nmap = gather_neighbors(x, net.offsets);
    const auto y = lsk_block_forward(x, b, nmap);
    // h = 2*1.5 = 3, bn -> 2, relu -> 2, conv2 -> 6, plus residual 1.5
    EXPECT_NEAR(y.feats(0, 0), 7.5f, 1e-5f);
}

TEST(BlockForward, CompositionOracle) {
    Gen g(2);
    auto cfg = lsk::testing::tiny_config(4, 1.0, 3, 1);
    LskNetwork<float> net(cfg);
    auto& b = net.blocks[0];
    b.conv1.kernel = lsk::testing::random_kernel<float>(g, cfg.partition(), 4, 4, 0.6);
    b.conv2.kernel = lsk::testing::random_kernel<float>(g, cfg.partition(), 4, 4, 0.6);
    for (std::size_t k = 0; k < 4; ++k) {
        b.bn1.running_mean[k] = static_cast<float>(g.uniform(-0.5, 0.5));
        b.bn1.running_var[k] = static_cast<float>(g.uniform(0.5, 2.0));
        b.bn1.gamma.value[k] = static_cast<float>(g.uniform(0.5, 1.5));
        b.bn1.beta.value[k] = static_cast<float>(g.uniform(-0.2, 0.2));
    }
    const auto x = lsk::testing::random_tensor<float>(g, 60, 5, 4);
    const auto nmap = gather_neighbors(x, net.offsets);
    const auto y = lsk_block_forward(x, b, nmap);
    const auto h = lsk::testing::dense_conv_oracle(x, b.conv1.kernel);
    Matrix<float> a(x.size(), 4);
    for (std::size_t r = 0; r < x.size(); ++r)
        for (std::size_t k = 0; k < 4; ++k) {
            const double v = (h(r, k) - b.bn1.running_mean[k]) / std::sqrt(b.bn1.running_var[k] + 1e-5) *
                                 b.bn1.gamma.value[k] +
                             b.bn1.beta.value[k];
            a(r, k) = static_cast<float>(std::max(0.0, v));
        }
    const auto o = lsk::testing::dense_conv_oracle(SparseTensor3D<float>(x.coords, a), b.conv2.kernel);
    for (std::size_t r = 0; r < x.size(); ++r)
        for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(y.feats(r, k), o(r, k) + x.feats(r, k), 1e-4);
}

TEST(CrossEntropy, ConfidentCorrectIsNearZero) {
    Matrix<float> z(1, 3);
    z(0, 1) = 30.0f;
    const std::vector<int> y{1};
    const std::vector<double> w{1, 1, 1};
    EXPECT_LT(weighted_ce_loss(z, std::span<const int>(y), std::span<const double>(w)).loss, 1e-6f);
}

TEST(CrossEntropy, EqualLogitsGiveLn2) {
    Matrix<double> z(4, 2, 0.7);
    const std::vector<int> y{0, 1, 1, 0};
    const std::vector<double> w{1, 3};
    EXPECT_NEAR(weighted_ce_loss(z, std::span<const int>(y), std::span<const double>(w)).loss, std::log(2.0), 1e-12);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
    Gen g(3);
    for (int trial = 0; trial < 10; ++trial) {
        auto z = lsk::testing::random_matrix<double>(g, 6, 4, 3.0);
        std::vector<int> y;
        for (int i = 0; i < 6; ++i) y.push_back(g.integer(0, 3));
        std::vector<double> w;
        for (int k = 0; k < 4; ++k) w.push_back(g.uniform(0.2, 2.0));
        const auto res = weighted_ce_loss(z, std::span<const int>(y), std::span<const double>(w));
        for (std::size_t i = 0; i < z.data.size(); ++i) {
            const double h = 1e-5;
            auto zp = z, zm = z;
            zp.data[i] += h;
            zm.data[i] -= h;
            const double fd = (weighted_ce_loss(zp, std::span<const int>(y), std::span<const double>(w)).loss -
                               weighted_ce_loss(zm, std::span<const int>(y), std::span<const double>(w)).loss) /
                              (2 * h);
            EXPECT_LT(lsk::testing::rel_err(res.grad.data[i], fd, 1e-4), 1e-5);
        }
    }
}

TEST(CrossEntropy, LabelOutOfRange) {
    Matrix<float> z(1, 3);
    const std::vector<int> y{3};
    const std::vector<double> w{1, 1, 1};
    EXPECT_THROW(weighted_ce_loss(z, std::span<const int>(y), std::span<const double>(w)), std::invalid_argument);
}

TEST(NetworkGradient, MatchesFiniteDifferences) {
    Gen g(4);
    auto cfg = lsk::testing::tiny_config(3, 1.0, 3, 1);
    LskNetwork<double> net(cfg);
    init_masks(net, 0.3, 5);
    Sample<double> s;
    s.tensor = lsk::testing::random_tensor<double>(g, 30, 4, 2);
    s.nmap = std::make_shared<const NeighborMap>(gather_neighbors(s.tensor, net.offsets));
    std::vector<int> labels;
    for (int i = 0; i < 30; ++i) labels.push_back(g.integer(0, 2));
    const std::vector<double> w{1, 1, 1};
    auto loss_of = [&](LskNetwork<double>& n) {
        auto z = n.forward(s.tensor.feats, *s.nmap, Mode::eval);
        return weighted_ce_loss(z, std::span<const int>(labels), std::span<const double>(w));
    };
    net.zero_grad();
    ForwardCache<double> cache;
    auto z = net.forward(s.tensor.feats, *s.nmap, Mode::eval, &cache);
    auto res = weighted_ce_loss(z, std::span<const int>(labels), std::span<const double>(w));
    net.backward(cache, res.grad, *s.nmap);
    auto params = net.params();
    int checked = 0;
    for (auto& p : params) {
        if (!p.grad) continue;
        for (std::size_t i = 0; i < p.value->size(); i += 7) {
            if (p.mask && !(*p.mask)[i]) continue;
            const double keep = (*p.value)[i];
            const double h = 1e-6;
            (*p.value)[i] = keep + h;
            const double lp = loss_of(net).loss;
            (*p.value)[i] = keep - h;
            const double lm = loss_of(net).loss;
            (*p.value)[i] = keep;
            const double fd = (lp - lm) / (2 * h);
            EXPECT_LT(lsk::testing::rel_err((*p.grad)[i], fd, 1e-6), 1e-4) << p.name << "[" << i << "]";
            ++checked;
        }
    }
    EXPECT_GT(checked, 50);
}

TEST(TrainStep, ZeroLearningRateChangesNoParameter) {
    Gen g(5);
    auto cfg = lsk::testing::tiny_config(4, 1.0, 3, 1);
    auto sched = tiny_schedule();
    sched.weight_decay = 0.5;
    auto st = make_train_state<float>(cfg, sched);
    const auto s = labelled_sample(g, 50, 5, st.net.offsets);
    auto before = st.net;
    train_step(st, s, 0.0, sched);
    auto a = st.net.params();
    auto b = before.params();
    for (std::size_t k = 0; k < a.size(); ++k)
        if (a[k].grad) {
            EXPECT_EQ(*a[k].value, *b[k].value) << a[k].name;
        }
}

TEST(TrainStep, LossDecreases) {
    Gen g(6);
    auto cfg = lsk::testing::tiny_config(4, 1.0, 3, 1);
    auto sched = tiny_schedule();
    auto st = make_train_state<float>(cfg, sched);
    const auto s = labelled_sample(g, 60, 5, st.net.offsets);
    const double first = train_step(st, s, 1e-2, sched).loss;
    double last = first;
    for (int i = 0; i < 30; ++i) last = train_step(st, s, 1e-2, sched).loss;
    EXPECT_LT(last, first);
}

TEST(TrainStep, MaskedWeightsStayZero) {
    Gen g(7);
    auto cfg = lsk::testing::tiny_config(4, 1.5, 3, 1);
    auto sched = tiny_schedule();
    auto st = make_train_state<float>(cfg, sched);
    const auto s = labelled_sample(g, 60, 5, st.net.offsets);
    for (int i = 0; i < 100; ++i) {
        train_step(st, s, 1e-2, sched);
        for (const auto* l : st.net.sparse_layers()) ASSERT_TRUE(l->kernel.mask_consistent()) << "step " << i;
    }
}

TEST(TrainStep, NonFiniteLossReportsDivergence) {
    Gen g(8);
    auto cfg = lsk::testing::tiny_config(4, 1.0, 3, 1);
    auto sched = tiny_schedule();
    auto st = make_train_state<float>(cfg, sched);
    const auto s = labelled_sample(g, 20, 4, st.net.offsets);
    st.net.head.bias.value[0] = std::numeric_limits<float>::infinity();
    try {
        train_step(st, s, 1e-2, sched);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_STREQ(e.what(), "diverged");
    }
}

TEST(TrainingLoop, EventCounts) {
    Gen g(9);
    auto cfg = lsk::testing::tiny_config(1, 2.0, 1, 1);
    cfg.width.sort_every = 12000;
    TrainSchedule sched;
    sched.iterations = 24000;
    sched.sparsity.adapt_every = 2000;
    sched.peak_lr = 1e-3;
    auto st = make_train_state<float>(cfg, sched);
    std::vector<Sample<float>> data{labelled_sample(g, 4, 3, st.net.offsets)};
    std::int64_t sds = 0, sorts = 0, rows = 0;
    training_loop<float>(st, sched, data, [&](const IterationRecord& r) {
        ++rows;
        sds += r.sds_event;
        sorts += r.sort_event;
        if (r.sds_event) {
            EXPECT_EQ(r.iteration % 2000, 0);
        }
    });
    EXPECT_EQ(rows, 24000);
    EXPECT_EQ(sds, 12);
    EXPECT_EQ(sorts, 2);
    EXPECT_EQ(st.sds_events, 12);
    EXPECT_EQ(st.sort_events, 2);
}

TEST(TrainingLoop, DenseNativeHasNoEvents) {
    Gen g(10);
    auto cfg = lsk::testing::tiny_config(2, 1.0, 3, 1);
    auto sched = tiny_schedule(30);
    sched.sparsity.sparsity = 0.0;
    auto st = make_train_state<float>(cfg, sched);
    std::vector<Sample<float>> data{labelled_sample(g, 20, 4, st.net.offsets)};
    int events = 0;
    training_loop<float>(st, sched, data, [&](const IterationRecord& r) { events += r.sds_event + r.sort_event; });
    EXPECT_EQ(events, 0);
    for (const auto* l : st.net.sparse_layers()) EXPECT_EQ(l->kernel.nonzero(), l->kernel.size());
}

TEST(TrainingLoop, ValidationErrors) {
    Gen g(11);
    auto cfg = lsk::testing::tiny_config(2, 2.0, 3, 1);
    cfg.width.sort_every = 7;
    auto sched = tiny_schedule(30);
    EXPECT_THROW(make_train_state<float>(cfg, sched), std::invalid_argument);
    cfg.width.sort_every = 10;
    auto st = make_train_state<float>(cfg, sched);
    EXPECT_THROW(training_loop<float>(st, sched, {}), std::invalid_argument);
}

TEST(TrainingLoop, DeterministicAcrossRunsAndThreads) {
    Gen g(12);
    auto cfg = lsk::testing::tiny_config(3, 2.0, 3, 1);
    auto sched = tiny_schedule(30);
    std::vector<Sample<float>> data;
    {
        LskNetwork<float> probe(cfg);
        for (int i = 0; i < 3; ++i) data.push_back(labelled_sample(g, 40, 5, probe.offsets));
    }
    const int saved = num_threads();
    std::string bytes[2];
    for (int run = 0; run < 2; ++run) {
        set_num_threads(run == 0 ? 1 : 3);
        auto st = make_train_state<float>(cfg, sched);
        training_loop<float>(st, sched, data);
        bytes[run] = encode_checkpoint(st, sched);
    }
    set_num_threads(saved);
    EXPECT_EQ(bytes[0], bytes[1]);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    Gen g(13);
    auto cfg = lsk::testing::tiny_config(3, 2.0, 3, 2);
    auto sched = tiny_schedule(20);
    auto st = make_train_state<float>(cfg, sched);
    std::vector<Sample<float>> data{labelled_sample(g, 40, 5, st.net.offsets)};
    training_loop<float>(st, sched, data);
    const auto dir = lsk::testing::temp_dir("ckpt_rt");
    save_checkpoint(st, sched, dir / "c.bin");
    auto loaded = load_checkpoint<float>(dir / "c.bin");
    EXPECT_EQ(loaded.schedule, sched);
    EXPECT_EQ(loaded.state.net.config, st.net.config);
    EXPECT_EQ(loaded.state.iteration, 20);
    EXPECT_EQ(loaded.state.net.channel_ids, st.net.channel_ids);
    EXPECT_EQ(loaded.state.last_permutation.perms, st.last_permutation.perms);
    const auto& s = data[0];
    EXPECT_EQ(loaded.state.net.forward(s.tensor.feats, *s.nmap, Mode::eval),
              st.net.forward(s.tensor.feats, *s.nmap, Mode::eval));
    EXPECT_EQ(encode_checkpoint(loaded.state, loaded.schedule), encode_checkpoint(st, sched));
}

TEST(Checkpoint, CorruptFilesRejected) {
    auto cfg = lsk::testing::tiny_config(2, 1.0, 3, 1);
    auto sched = tiny_schedule(20);
    auto st = make_train_state<float>(cfg, sched);
    const auto bytes = encode_checkpoint(st, sched);
    for (std::size_t cut : {std::size_t(0), std::size_t(3), bytes.size() / 2, bytes.size() - 1}) {
        try {
            decode_checkpoint<float>(bytes.substr(0, cut));
            FAIL() << cut;
        } catch (const std::runtime_error& e) {
            const std::string msg = e.what();
            EXPECT_TRUE(msg == "truncated checkpoint" || msg.rfind("incompatible checkpoint", 0) == 0) << msg;
        }
    }
    auto bad = bytes;
    bad[0] = 'X';
    try {
        decode_checkpoint<float>(bad);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_STREQ(e.what(), "incompatible checkpoint");
    }
    EXPECT_THROW(decode_checkpoint<double>(bytes), std::runtime_error);
    EXPECT_THROW(decode_checkpoint<float>(bytes + "x"), std::runtime_error);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
    Gen g(14);
    auto cfg = lsk::testing::tiny_config(3, 2.0, 3, 1);
    auto sched = tiny_schedule(30);
    std::vector<Sample<float>> data;
    {
        LskNetwork<float> probe(cfg);
        for (int i = 0; i < 2; ++i) data.push_back(labelled_sample(g, 30, 5, probe.offsets));
    }
    auto full = make_train_state<float>(cfg, sched);
    training_loop<float>(full, sched, data);
    auto part = make_train_state<float>(cfg, sched);
    training_loop<float>(part, sched, data, {}, 13);
    EXPECT_EQ(part.iteration, 13);
    auto resumed = decode_checkpoint<float>(encode_checkpoint(part, sched));
    training_loop<float>(resumed.state, resumed.schedule, data);
    EXPECT_EQ(encode_checkpoint(resumed.state, sched), encode_checkpoint(full, sched));
}

TEST(OneCycle, ShapeOfSchedule) {
    const double peak = 0.01;
    EXPECT_NEAR(one_cycle_lr(peak, 0, 1000), peak / 25, 1e-15);
    EXPECT_NEAR(one_cycle_lr(peak, 299, 1000), peak, 1e-15);
    EXPECT_NEAR(one_cycle_lr(peak, 999, 1000), peak / 25e4, 1e-15);
    double prev = 0;
    for (int s = 0; s < 300; ++s) {
        const double lr = one_cycle_lr(peak, s, 1000);
        EXPECT_GE(lr, prev);
        prev = lr;
    }
    for (int s = 300; s < 1000; ++s) {
        const double lr = one_cycle_lr(peak, s, 1000);
        EXPECT_LE(lr, prev);
        prev = lr;
    }
    EXPECT_EQ(one_cycle_lr(peak, 0, 1), peak);
}
