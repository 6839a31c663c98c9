#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "lsk/lsk.hpp"

namespace {

std::optional<lsk::Coord3> parse_center(const std::string& text) {
    if (text.empty()) return std::nullopt;
    std::vector<int> v;
    try {
        v = lsk::cfg::parse_list<int>("center", text);
    } catch (const lsk::ConfigError&) {
        throw lsk::ConfigError("--center expects x,y,z voxel coordinates");
    }
    if (v.size() != 3) throw lsk::ConfigError("--center expects x,y,z voxel coordinates");
    return lsk::Coord3{v[0], v[1], v[2]};
}

}  // namespace

int main(int argc, char** argv) {
    lsk::apply_thread_env();
    CLI::App app{"Large sparse kernel 3D segmentation toolkit"};
    app.require_subcommand(1);

    std::string config, checkpoint, out, data, scene, center;
    std::size_t count = 20;
    std::optional<std::uint64_t> seed;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic labelled dataset");
    gen->add_option("--config", config, "Run config; its [data] section is used")->check(CLI::ExistingFile);
    gen->add_option("--count", count, "Number of scenes");
    gen->add_option("--seed", seed, "Override the [data] seed");
    gen->add_option("--out", out, "Output directory")->required();

    auto* train = app.add_subcommand("train", "Train from a run config");
    train->add_option("--config", config, "Run config")->required();
    train->add_option("--out", out, "Output directory (default: [run] output_dir)");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint at base width");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--data", data, "Dataset directory")->required();
    eval->add_option("--out", out, "Output directory")->required();

    auto* erf = app.add_subcommand("erf", "Effective receptive field of one voxel");
    erf->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    erf->add_option("--scene", scene, "Scene file")->required();
    erf->add_option("--center", center, "Voxel x,y,z (default: voxel nearest the bounding-box centre)");
    erf->add_option("--out", out, "Output directory")->required();

    auto* cnt = app.add_subcommand("count", "Parameter and FLOPs report");
    cnt->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    cnt->add_option("--scene", scene, "Scene file")->required();
    cnt->add_option("--out", out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            lsk::SyntheticSceneSpec spec;
            if (!config.empty()) spec = lsk::load_run_config(config).data;
            if (seed) spec.seed = *seed;
            try {
                spec.validate();
            } catch (const std::invalid_argument& e) {
                throw lsk::ConfigError(e.what());
            }
            const auto m = lsk::run_gen_data(spec, count, out);
            std::uint64_t total = 0;
            for (auto h : m.histogram) total += h;
            std::cout << "wrote " << m.files.size() << " scenes (" << total << " points) to " << out << "\n";
        } else if (train->parsed()) {
            const auto rc = lsk::load_run_config(config);
            const std::string dir = out.empty() ? rc.output_dir : out;
            if (dir.empty()) throw lsk::ConfigError("no output directory: pass --out or set [run] output_dir");
            const auto sum = lsk::run_train(rc, dir, std::cerr);
            std::cout << "trained " << sum.iterations << " iterations, " << sum.sds_events << " sds events, "
                      << sum.sort_events << " sort events, final loss " << sum.final_loss << "\n";
            if (sum.validation) std::cout << "validation mIoU " << sum.validation->mean << "\n";
        } else if (eval->parsed()) {
            const auto r = lsk::run_eval(checkpoint, data, out);
            std::cout << "mIoU " << r.mean << "\n";
        } else if (erf->parsed()) {
            const auto map = lsk::run_erf(checkpoint, scene, parse_center(center), out);
            std::cout << "erf support " << map.support().size() << " of " << map.coords.size() << " voxels\n";
        } else if (cnt->parsed()) {
            const auto rep = lsk::run_count(checkpoint, scene, out);
            const auto t = rep.total();
            std::cout << "params " << t.nnz_params << "/" << t.dense_params << " flops " << t.flops << "\n";
        }
    } catch (const lsk::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
