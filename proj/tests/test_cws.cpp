#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "test_util.hpp"

using namespace lsk;
using lsk::testing::Gen;

namespace {

/// Expanded-width network with random masks and perturbed norm/bias parameters
/// so every tensor carries information.
LskNetwork<float> random_network(Gen& g, int base = 4, double factor = 1.75, int blocks = 2, int kernel = 3) {
    auto cfg = lsk::testing::tiny_config(base, factor, kernel, blocks);
    cfg.init_seed = g.eng();
    LskNetwork<float> net(cfg);
    init_masks(net, 0.4, g.eng());
    for (auto& p : net.params()) {
        if (p.mask) continue;
        for (auto& v : *p.value) v += static_cast<float>(g.uniform(-0.3, 0.3));
        if (p.name.find("running_var") != std::string::npos)
            for (auto& v : *p.value) v = std::abs(v) + 0.5f;
    }
    for (auto& p : net.params())
        if (p.grad)
            for (std::size_t i = 0; i < p.value->size(); ++i) {
                (*p.grad)[i] = static_cast<float>(g.uniform(-1, 1));
                (*p.m)[i] = static_cast<float>(g.uniform(-1, 1));
                (*p.v)[i] = static_cast<float>(g.uniform(0, 1));
            }
    return net;
}

Sample<float> random_sample(Gen& g, std::size_t n, int extent, const OffsetList& off) {
    Sample<float> s;
    s.tensor = lsk::testing::random_tensor<float>(g, n, extent, 2);
    s.nmap = std::make_shared<const NeighborMap>(gather_neighbors(s.tensor, off));
    return s;
}

}  // namespace

TEST(ChannelL1, Examples) {
    GroupedSparseKernel<float> k(single_group(3), 3, 2);
    k.weight[k.index(5, 1, 1)] = -2.5f;
    const auto s = channel_l1_scores(k);
    EXPECT_EQ(s[0], 0.0);
    EXPECT_EQ(s[1], 2.5);
    EXPECT_EQ(s[2], 0.0);
}

TEST(ChannelL1, ReductionOracle) {
    Gen g(1);
    const auto k = lsk::testing::random_kernel<float>(g, partition_groups(3, {1, 2}), 5, 3, 0.5);
    const auto s = channel_l1_scores(k);
    for (std::size_t o = 0; o < 5; ++o) {
        double acc = 0;
        for (std::size_t sl = 0; sl < 27; ++sl)
            for (std::size_t i = 0; i < 3; ++i) acc += std::abs(static_cast<double>(k.weight[(sl * 5 + o) * 3 + i]));
        EXPECT_NEAR(s[o], acc, 1e-9);
    }
}

TEST(DescendingOrder, TiesKeepLowerIndex) {
    EXPECT_EQ(descending_order({1.0, 3.0}), (std::vector<int>{1, 0}));
    EXPECT_EQ(descending_order({2.0, 5.0, 2.0, 5.0}), (std::vector<int>{1, 3, 0, 2}));
}

TEST(SortChannels, SortedNetworkGivesIdentity) {
    Gen g(2);
    auto net = random_network(g);
    sort_channels(net);
    const auto again = sort_channels(net);
    EXPECT_TRUE(again.is_identity());
}

TEST(SortChannels, TwoChannelSwap) {
    auto cfg = lsk::testing::tiny_config(1, 2.0, 1, 1);
    LskNetwork<float> net(cfg);
    ASSERT_EQ(net.width, 2u);
    auto& c1 = net.blocks[0].conv1.kernel;
    auto& c2 = net.blocks[0].conv2.kernel;
    // stream scores from conv2 rows: (1.0, 3.0); inner scores from conv1 rows: (3.0, 1.0)
    c2.weight = {0.5f, -0.5f, 1.0f, 2.0f};
    c1.weight = {2.0f, 1.0f, 0.5f, 0.5f};
    const auto p = sort_channels(net);
    EXPECT_EQ(p.perms[0], (std::vector<int>{1, 0}));
    EXPECT_EQ(p.perms[1], (std::vector<int>{0, 1}));
    EXPECT_EQ(c2.weight, (std::vector<float>{1.0f, 2.0f, 0.5f, -0.5f}));
}

TEST(SortChannels, FunctionPreservedBitExactly) {
    Gen g(3);
    for (int trial = 0; trial < 5; ++trial) {
        auto net = random_network(g);
        const auto s = random_sample(g, 80, 6, net.offsets);
        const auto before = net.forward(s.tensor.feats, *s.nmap, Mode::eval);
        const auto trunk_before = net.trunk_forward(s.tensor.feats, *s.nmap, Mode::eval, nullptr);
        const auto perm = sort_channels(net);
        EXPECT_FALSE(perm.is_identity());
        EXPECT_EQ(net.forward(s.tensor.feats, *s.nmap, Mode::eval), before);
        // trunk features are a channel permutation of the old ones
        const auto trunk_after = net.trunk_forward(s.tensor.feats, *s.nmap, Mode::eval, nullptr);
        for (std::size_t r = 0; r < trunk_after.rows; ++r)
            for (std::size_t k = 0; k < trunk_after.cols; ++k)
                EXPECT_EQ(trunk_after(r, k), trunk_before(r, static_cast<std::size_t>(perm.perms[0][k])));
        for (const auto* l : net.sparse_layers()) EXPECT_TRUE(l->kernel.mask_consistent());
    }
}

TEST(SortChannels, TrainModeForwardPreserved) {
    Gen g(4);
    auto net = random_network(g);
    const auto s = random_sample(g, 60, 5, net.offsets);
    auto copy = net;
    const auto a = copy.forward(s.tensor.feats, *s.nmap, Mode::train);
    sort_channels(net);
    EXPECT_EQ(net.forward(s.tensor.feats, *s.nmap, Mode::train), a);
}

TEST(SortChannels, InverseRestoresEveryTensor) {
    Gen g(5);
    auto net = random_network(g);
    auto orig = net;
    const auto perm = sort_channels(net);
    apply_permutation(net, perm.inverse());
    auto a = net.params();
    auto b = orig.params();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
        EXPECT_EQ(*a[k].value, *b[k].value) << a[k].name;
        if (a[k].grad) {
            EXPECT_EQ(*a[k].grad, *b[k].grad);
            EXPECT_EQ(*a[k].m, *b[k].m);
            EXPECT_EQ(*a[k].v, *b[k].v);
        }
        if (a[k].mask) {
            EXPECT_EQ(*a[k].mask, *b[k].mask);
        }
    }
    EXPECT_EQ(net.channel_ids, orig.channel_ids);
}

TEST(SortChannels, MomentsFollowWeights) {
    Gen g(6);
    auto net = random_network(g);
    const auto orig = net;
    const auto perm = sort_channels(net);
    const auto& before = orig.blocks[1].conv1;
    const auto& after = net.blocks[1].conv1;
    const std::size_t w = net.width;
    for (std::size_t s = 0; s < after.kernel.slots; ++s)
        for (std::size_t o = 0; o < w; ++o)
            for (std::size_t i = 0; i < w; ++i) {
                const auto src = before.kernel.index(s, static_cast<std::size_t>(perm.perms[2][o]),
                                                     static_cast<std::size_t>(perm.perms[0][i]));
                const auto dst = after.kernel.index(s, o, i);
                EXPECT_EQ(after.kernel.weight[dst], before.kernel.weight[src]);
                EXPECT_EQ(after.m[dst], before.m[src]);
                EXPECT_EQ(after.v[dst], before.v[src]);
                EXPECT_EQ(after.kernel.mask[dst], before.kernel.mask[src]);
            }
    for (std::size_t k = 0; k < w; ++k) {
        const auto src = static_cast<std::size_t>(perm.perms[2][k]);
        EXPECT_EQ(net.blocks[1].bn1.running_mean[k], orig.blocks[1].bn1.running_mean[src]);
        EXPECT_EQ(net.blocks[1].bn1.gamma.m[k], orig.blocks[1].bn1.gamma.m[src]);
    }
}

TEST(SelectChannels, DegenerateWidths) {
    Gen g(7);
    auto cfg = lsk::testing::tiny_config(4, 1.0, 3, 1);
    LskNetwork<float> net(cfg);
    const auto s = random_sample(g, 30, 4, net.offsets);
    auto sel = select_channels(net, 4);
    EXPECT_EQ(sel.forward(s.tensor.feats, *s.nmap, Mode::eval), net.forward(s.tensor.feats, *s.nmap, Mode::eval));
    auto wide = random_network(g);
    auto full = select_channels(wide, static_cast<int>(wide.width));
    EXPECT_EQ(full.forward(s.tensor.feats, *s.nmap, Mode::eval), wide.forward(s.tensor.feats, *s.nmap, Mode::eval));
    try {
        select_channels(wide, static_cast<int>(wide.width) + 1);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_STREQ(e.what(), "selected width exceeds expanded width");
    }
}

TEST(SelectChannels, TopKOracleAndNativeShapes) {
    Gen g(8);
    auto net = random_network(g, 8, 1.8, 2, 3);
    ASSERT_EQ(net.width, 14u);
    const auto scores = boundary_scores(net);
    auto orig = net;
    const auto perm = sort_channels(net);
    auto sel = select_channels(net, 8);
    for (std::size_t b = 0; b < scores.size(); ++b) {
        // top-8 by score, ties to the lower index, via an independent partial sort
        std::vector<int> idx(14);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](int x, int y) {
            const double sx = scores[b][static_cast<std::size_t>(x)], sy = scores[b][static_cast<std::size_t>(y)];
            return sx != sy ? sx > sy : x < y;
        });
        const std::set<int> expect(idx.begin(), idx.begin() + 8);
        const std::set<int> kept(perm.perms[b].begin(), perm.perms[b].begin() + 8);
        EXPECT_EQ(kept, expect);
        for (int k : expect)
            for (int d = 0; d < 14; ++d)
                if (!expect.count(d)) {
                    EXPECT_GE(scores[b][static_cast<std::size_t>(k)], scores[b][static_cast<std::size_t>(d)]);
                }
    }
    auto native_cfg = net.config;
    native_cfg.width.width_factor = 1.0;
    LskNetwork<float> native(native_cfg);
    auto a = sel.params();
    auto c = native.params();
    ASSERT_EQ(a.size(), c.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
        EXPECT_EQ(a[k].shape, c[k].shape) << a[k].name;
        EXPECT_EQ(a[k].value->size(), c[k].value->size());
    }
    // selected weights are the old top channels
    const auto& w0 = orig.blocks[0].conv2.kernel;
    const auto& ws = sel.blocks[0].conv2.kernel;
    for (std::size_t o = 0; o < 8; ++o)
        for (std::size_t i = 0; i < 8; ++i)
            EXPECT_EQ(ws.weight[ws.index(4, o, i)],
                      w0.weight[w0.index(4, static_cast<std::size_t>(perm.perms[0][o]),
                                         static_cast<std::size_t>(perm.perms[1][i]))]);
    const auto s = random_sample(g, 50, 5, sel.offsets);
    const auto out = sel.forward(s.tensor.feats, *s.nmap, Mode::eval);
    for (float v : out.data) EXPECT_TRUE(std::isfinite(v));
}
