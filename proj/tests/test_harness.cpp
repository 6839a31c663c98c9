#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "test_util.hpp"

using namespace lsk;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string l; std::getline(ss, l);) out.push_back(l);
    return out;
}

struct CliResult {
    int code = -1;
    std::string out, err;
};

CliResult cli(const std::string& args, const fs::path& work) {
    const auto o = work / "stdout.txt", e = work / "stderr.txt";
    const std::string cmd = std::string(LSK_CLI) + " " + args + " >" + o.string() + " 2>" + e.string();
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(o);
    r.err = slurp(e);
    return r;
}

SyntheticSceneSpec small_spec(std::uint64_t seed = 5) {
    SyntheticSceneSpec s;
    s.extent = 10;
    s.boxes = 1;
    s.spheres = 1;
    s.seed = seed;
    s.voxel_size = 0.1;
    return s;
}

/// Small run config whose datasets live under `dir`.
RunConfig small_run(const fs::path& dir, int iterations = 100, int adapt_every = 10, double sparsity = 0.4,
                    double factor = 1.5) {
    RunConfig rc;
    rc.network = lsk::testing::tiny_config(4, factor, 3, 1);
    rc.network.voxel_size = 0.1;
    rc.network.width.sort_every = 5 * adapt_every;
    rc.schedule.iterations = iterations;
    rc.schedule.sparsity.sparsity = sparsity;
    rc.schedule.sparsity.adapt_every = adapt_every;
    rc.schedule.sparsity.seed = 3;
    rc.data = small_spec();
    rc.train_data = (dir / "data").string();
    rc.output_dir = (dir / "run").string();
    if (!fs::exists(dir / "data" / kManifestName)) gen_dataset(rc.data, 3, dir / "data");
    return rc;
}

fs::path write_config(const RunConfig& rc, const fs::path& dir, const std::string& name = "run.cfg") {
    detail::write_file(dir / name, serialize_run_config(rc));
    return dir / name;
}

}  // namespace

TEST(Config, RoundTrip) {
    const auto dir = lsk::testing::temp_dir("cfg_rt");
    auto rc = small_run(dir);
    rc.network.class_weights = {1.0, 0.25, 3.5};
    rc.schedule.peak_lr = 0.1 + 0.2;
    const auto text = serialize_run_config(rc);
    const auto back = parse_run_config(text);
    EXPECT_EQ(back, rc);
    EXPECT_EQ(serialize_run_config(back), text);
}

TEST(Config, DeskConfigParses) {
    const auto rc = parse_run_config(detail::read_file(fs::path(LSK_SOURCE_DIR) / "configs" / "desk.cfg"));
    EXPECT_EQ(rc.network.kernel_size, 9);
    EXPECT_EQ(rc.network.group_divisions, (std::vector<int>{3, 3, 3}));
    EXPECT_EQ(rc.schedule.sparsity.sparsity, 0.4);
    EXPECT_EQ(rc.schedule.sparsity.prune_rate, 0.3);
    EXPECT_EQ(rc.network.width.width_factor, 1.8);
    EXPECT_EQ(rc.network.width.sort_every, 6 * rc.schedule.sparsity.adapt_every);
    EXPECT_EQ(parse_run_config(serialize_run_config(rc)), rc);
}

TEST(Config, Errors) {
    const auto dir = lsk::testing::temp_dir("cfg_err");
    const auto text = serialize_run_config(small_run(dir));
    auto expect_error = [](const std::string& t, const std::string& needle) {
        try {
            parse_run_config(t);
            FAIL() << needle;
        } catch (const ConfigError& e) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    std::string extra = text;
    extra.insert(extra.find("[network]\n") + 10, "bogus = 1\n");
    expect_error(extra, "unknown key 'bogus' in [network]");
    expect_error(text + "\n[network]\nin_feats = 3\n", "duplicate section [network]");
    expect_error("[network]\nkernel_size 9\n", "expected key = value");
    expect_error("[network\n", "bad section header");
    expect_error(text + "\n[extra]\na = 1\n", "unknown section [extra]");
    std::string bad = text;
    bad.replace(bad.find("kernel_size = 3"), 15, "kernel_size = x");
    EXPECT_THROW(parse_run_config(bad), ConfigError);
}

TEST(GenDataset, CountZeroWritesManifestOnly) {
    const auto dir = lsk::testing::temp_dir("gen0");
    const auto m = gen_dataset(small_spec(), 0, dir / "d");
    EXPECT_TRUE(m.files.empty());
    std::size_t entries = 0;
    for (const auto& e : fs::directory_iterator(dir / "d")) {
        EXPECT_EQ(e.path().filename(), kManifestName);
        ++entries;
    }
    EXPECT_EQ(entries, 1u);
    EXPECT_TRUE(load_dataset(dir / "d").empty());
}

TEST(GenDataset, SeededGenerationIsByteIdentical) {
    const auto dir = lsk::testing::temp_dir("gen_det");
    gen_dataset(small_spec(9), 3, dir / "a");
    gen_dataset(small_spec(9), 3, dir / "b");
    for (const auto& e : fs::directory_iterator(dir / "a"))
        EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / e.path().filename())) << e.path();
    gen_dataset(small_spec(10), 1, dir / "c");
    EXPECT_NE(slurp(dir / "a" / scene_file_name(0)), slurp(dir / "c" / scene_file_name(0)));
}

TEST(GenDataset, HistogramMatchesRecount) {
    const auto dir = lsk::testing::temp_dir("gen_hist");
    auto spec = small_spec(2);
    spec.extent = 16;
    const auto m = gen_dataset(spec, 20, dir);
    const auto parsed = DatasetManifest::parse(slurp(dir / kManifestName));
    EXPECT_EQ(parsed.histogram, m.histogram);
    EXPECT_EQ(parsed.seed, 2u);
    std::vector<std::uint64_t> recount(3, 0);
    std::uint64_t total = 0, hist_total = 0;
    for (const auto& f : parsed.files) {
        const auto s = load_scene(dir / f);
        total += s.size();
        for (auto y : s.labels) ++recount[y];
    }
    for (auto h : m.histogram) hist_total += h;
    EXPECT_EQ(recount, m.histogram);
    EXPECT_EQ(hist_total, total);
    for (auto h : m.histogram) EXPECT_GT(h, 0u);
}

TEST(GenDataset, InvalidSpec) {
    auto spec = small_spec();
    spec.extent = 7;
    EXPECT_THROW(gen_dataset(spec, 1, lsk::testing::temp_dir("gen_bad")), std::invalid_argument);
}

TEST(Cli, TrainWritesOneRowPerIteration) {
    const auto dir = lsk::testing::temp_dir("cli_train");
    const auto cfg = write_config(small_run(dir), dir);
    const auto r = cli("train --config " + cfg.string(), dir);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir / "run" / "checkpoint.lskc"));
    const auto rows = lines_of(slurp(dir / "run" / "metrics.csv"));
    ASSERT_EQ(rows.size(), 101u);
    EXPECT_EQ(rows[0], "iteration,loss,base_loss,lr,sds_event,sort_event,sparsity_l0,sparsity_l1");
    EXPECT_EQ(rows[100].rfind("100,", 0), 0u);
}

TEST(Cli, SdsEventsMarked) {
    const auto dir = lsk::testing::temp_dir("cli_sds");
    const auto cfg = write_config(small_run(dir, 50, 10), dir);
    ASSERT_EQ(cli("train --config " + cfg.string() + " --out " + (dir / "o").string(), dir).code, 0);
    const auto rows = lines_of(slurp(dir / "o" / "metrics.csv"));
    int sds = 0, sorts = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        std::vector<std::string> f;
        std::stringstream ss(rows[i]);
        for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
        sds += f[4] == "1";
        sorts += f[5] == "1";
        if (f[4] == "1") {
            EXPECT_EQ(std::stoi(f[0]) % 10, 0);
        }
    }
    EXPECT_EQ(sds, 5);
    EXPECT_EQ(sorts, 1);
}

TEST(Cli, RerunIsIdenticalAcrossThreadCounts) {
    const auto dir = lsk::testing::temp_dir("cli_det");
    const auto cfg = write_config(small_run(dir, 60, 10), dir);
    ASSERT_EQ(cli("train --config " + cfg.string() + " --out " + (dir / "a").string(), dir).code, 0);
    ASSERT_EQ(cli("train --config " + cfg.string() + " --out " + (dir / "b").string(), dir).code, 0);
    ASSERT_EQ(::setenv("LSK_THREADS", "3", 1), 0);
    const auto c = cli("train --config " + cfg.string() + " --out " + (dir / "c").string(), dir);
    ::unsetenv("LSK_THREADS");
    ASSERT_EQ(c.code, 0);
    for (const char* f : {"metrics.csv", "checkpoint.lskc"}) {
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "c" / f)) << f;
    }
}

TEST(Cli, ExitCodes) {
    const auto dir = lsk::testing::temp_dir("cli_exit");
    EXPECT_EQ(cli("", dir).code, 1);
    EXPECT_EQ(cli("frobnicate", dir).code, 1);
    EXPECT_EQ(cli("train", dir).code, 1);
    detail::write_file(dir / "broken.cfg", "[network]\nkernel_size = banana\n");
    const auto bad = cli("train --config " + (dir / "broken.cfg").string() + " --out " + (dir / "o").string(), dir);
    EXPECT_EQ(bad.code, 1);
    EXPECT_EQ(bad.err.rfind("config error:", 0), 0u) << bad.err;
    const auto missing = cli("eval --checkpoint " + (dir / "nope.lskc").string() + " --data " + dir.string() +
                                 " --out " + (dir / "e").string(),
                             dir);
    EXPECT_EQ(missing.code, 2);
    EXPECT_EQ(missing.err.rfind("error:", 0), 0u) << missing.err;
    EXPECT_EQ(cli("--help", dir).code, 0);
}

TEST(Cli, EvalAndEmptyDataset) {
    const auto dir = lsk::testing::temp_dir("cli_eval");
    const auto cfg = write_config(small_run(dir, 50, 10), dir);
    ASSERT_EQ(cli("train --config " + cfg.string(), dir).code, 0);
    const auto ck = (dir / "run" / "checkpoint.lskc").string();
    const auto ok = cli("eval --checkpoint " + ck + " --data " + (dir / "data").string() + " --out " +
                            (dir / "ev").string(),
                        dir);
    ASSERT_EQ(ok.code, 0) << ok.err;
    EXPECT_EQ(ok.out.rfind("mIoU ", 0), 0u);
    const auto rows = lines_of(slurp(dir / "ev" / "iou.csv"));
    EXPECT_EQ(rows.size(), 5u);
    gen_dataset(small_spec(), 0, dir / "empty");
    const auto empty = cli("eval --checkpoint " + ck + " --data " + (dir / "empty").string() + " --out " +
                               (dir / "ev2").string(),
                           dir);
    EXPECT_EQ(empty.code, 2);
    EXPECT_NE(empty.err.find("no scenes"), std::string::npos) << empty.err;
}

TEST(Cli, CountRatioDenseVsSparse) {
    const auto dir = lsk::testing::temp_dir("cli_count");
    auto dense = small_run(dir, 10, 10, 0.0, 1.0);
    auto sparse = small_run(dir, 10, 10, 0.4, 1.0);
    dense.output_dir = (dir / "dense").string();
    sparse.output_dir = (dir / "sparse").string();
    ASSERT_EQ(cli("train --config " + write_config(dense, dir, "d.cfg").string(), dir).code, 0);
    ASSERT_EQ(cli("train --config " + write_config(sparse, dir, "s.cfg").string(), dir).code, 0);
    const auto scene = (dir / "data" / scene_file_name(0)).string();
    for (const char* which : {"dense", "sparse"})
        ASSERT_EQ(cli(std::string("count --checkpoint ") + (dir / which / "checkpoint.lskc").string() + " --scene " +
                          scene + " --out " + (dir / (std::string(which) + "_c")).string(),
                      dir)
                      .code,
                  0);
    auto row = [&](const std::string& which) {
        for (const auto& l : lines_of(slurp(dir / (which + "_c") / "costs.csv")))
            if (l.rfind("block0.conv1,", 0) == 0) {
                std::vector<double> f;
                std::stringstream ss(l.substr(13));
                for (std::string x; std::getline(ss, x, ',');) f.push_back(std::stod(x));
                return f;
            }
        return std::vector<double>{};
    };
    const auto d = row("dense"), s = row("sparse");
    ASSERT_EQ(d.size(), 3u);
    ASSERT_EQ(s.size(), 3u);
    EXPECT_EQ(d[0], s[0]);
    EXPECT_EQ(d[1], d[0]);
    const double scale = 1.0 - (4.0 + 4 + 9) / (4.0 * 4 * 27);
    EXPECT_NEAR(s[1] / d[1], 1.0 - 0.4 * scale, 3e-3);
    EXPECT_LT(s[2], d[2]);
}

TEST(Cli, ErfMissingCenterAndDeterminism) {
    const auto dir = lsk::testing::temp_dir("cli_erf");
    const auto cfg = write_config(small_run(dir, 50, 10), dir);
    ASSERT_EQ(cli("train --config " + cfg.string(), dir).code, 0);
    const auto ck = (dir / "run" / "checkpoint.lskc").string();
    const auto scene = (dir / "data" / scene_file_name(1)).string();
    const auto miss = cli("erf --checkpoint " + ck + " --scene " + scene + " --center 999,999,999 --out " +
                              (dir / "m").string(),
                          dir);
    EXPECT_EQ(miss.code, 2);
    EXPECT_NE(miss.err.find("center not in scene"), std::string::npos) << miss.err;
    for (const char* o : {"e1", "e2"})
        ASSERT_EQ(cli("erf --checkpoint " + ck + " --scene " + scene + " --out " + (dir / o).string(), dir).code, 0);
    EXPECT_EQ(slurp(dir / "e1" / "erf.svg"), slurp(dir / "e2" / "erf.svg"));
    EXPECT_EQ(slurp(dir / "e1" / "erf.csv"), slurp(dir / "e2" / "erf.csv"));
    EXPECT_FALSE(slurp(dir / "e1" / "erf.svg").empty());
}

TEST(Cli, GenDataMatchesLibrary) {
    const auto dir = lsk::testing::temp_dir("cli_gen");
    const auto cfg = write_config(small_run(dir), dir);
    const auto r = cli("gen-data --config " + cfg.string() + " --count 2 --seed 5 --out " + (dir / "g").string(), dir);
    ASSERT_EQ(r.code, 0) << r.err;
    gen_dataset(small_spec(5), 2, dir / "lib");
    for (const auto& f : {std::string(kManifestName), scene_file_name(0), scene_file_name(1)})
        EXPECT_EQ(slurp(dir / "g" / f), slurp(dir / "lib" / f)) << f;
}
