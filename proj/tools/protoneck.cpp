#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "protoneck/checkpoint.hpp"
#include "protoneck/config.hpp"
#include "protoneck/mapviz.hpp"
#include "protoneck/model.hpp"
#include "protoneck/train.hpp"

namespace pn = protoneck;

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::string out_dir;
    std::vector<std::string> overrides;  // key=value, applied after the file
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "run configuration file (key = value lines)");
    cmd->add_option("--seed", args.seed, "override the run seed");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--set", args.overrides, "extra key=value override, repeatable");
}

pn::RunConfig load_config(const CommonArgs& args) {
    pn::RunConfig cfg =
        args.config_path.empty() ? pn::RunConfig{} : pn::parse_config_file(args.config_path);
    pn::detail::ConfigCursor at{"<cli>", 0};
    for (const std::string& kv : args.overrides) {
        ++at.line;
        size_t eq = kv.find('=');
        if (eq == std::string::npos) at.fail("expected key=value, got '" + kv + "'");
        pn::detail::apply_key(cfg, pn::detail::trim(kv.substr(0, eq)),
                              pn::detail::trim(kv.substr(eq + 1)), at);
    }
    if (args.seed) cfg.seed = *args.seed;
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    pn::validate_config(cfg);
    return cfg;
}

// {seed} in a checkpoint path selects per-seed files during aggregation.
std::string with_seed(std::string path, uint64_t seed) {
    const std::string token = "{seed}";
    size_t pos = path.find(token);
    if (pos != std::string::npos) path.replace(pos, token.size(), std::to_string(seed));
    return path;
}

pn::Model load_model(const pn::RunConfig& cfg, const std::string& ckpt, uint64_t seed) {
    pn::Model model = pn::model_init(cfg.model_config(), seed);
    std::vector<pn::NamedParam> params = model.params();
    pn::load_checkpoint(ckpt, params);
    return model;
}

void print_report(std::ostream& os, const std::string& label, const pn::MetricsReport& r) {
    os << label << ": map50_95 " << r.map_50_95 << " map50 " << r.map_50 << " ee " << r.ee
       << " ae " << (r.ae ? std::to_string(*r.ae) : std::string("n/a")) << " px " << r.px
       << " aap " << r.aap << "\n";
}

int cmd_train(const CommonArgs& args) {
    pn::RunConfig cfg = load_config(args);
    std::cout << "config " << pn::config_hash(cfg) << " seed " << cfg.seed << " out "
              << cfg.out_dir << "\n";
    pn::TrainResult res = pn::train_run(cfg, cfg.seed, &std::cout);
    std::cout << "best epoch " << res.best_epoch << " loss " << res.best_loss << "\n";
    std::cout << "wrote " << res.loss_csv_path << ", " << res.best_path << ", " << res.final_path
              << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& ckpt, const std::string& split,
             const std::vector<uint64_t>& seeds) {
    pn::RunConfig cfg = load_config(args);
    std::filesystem::create_directories(cfg.out_dir);
    std::vector<std::pair<std::string, pn::MetricsReport>> rows;
    std::vector<uint64_t> use = seeds.empty() ? std::vector<uint64_t>{cfg.seed} : seeds;
    for (uint64_t seed : use) {
        pn::Model model = load_model(cfg, with_seed(ckpt, seed), seed);
        pn::EvalOutput out = pn::eval_split(cfg, model, split);
        rows.emplace_back(std::to_string(seed), out.report);
        print_report(std::cout, "seed " + std::to_string(seed), out.report);
    }
    std::string csv = cfg.out_dir + "/metrics.csv";
    pn::write_metrics_csv(csv, pn::config_hash(cfg), rows);
    if (rows.size() > 1) {
        // Recompute the aggregate the same way the CSV writer does, for stdout.
        std::vector<double> maps;
        for (auto& [l, r] : rows) maps.push_back(r.map_50_95);
        std::cout << "mean map50_95 " << pn::detail::mean_of(maps) << " +/- "
                  << pn::detail::sample_std(maps) << "\n";
    }
    std::cout << "wrote " << csv << "\n";
    return 0;
}

int cmd_explain(const CommonArgs& args, const std::string& ckpt, const std::string& split,
                int64_t index, const std::string& mode, int topk, int query, int proto) {
    pn::RunConfig cfg = load_config(args);
    if (!cfg.has_neck())
        throw pn::config_error("explain needs a prototype neck (neck_mode is 'none')");
    int count = pn::split_sample_count(cfg, split);
    if (index < 0 || index >= count)
        throw pn::data_error("index " + std::to_string(index) + " outside split '" + split +
                             "' (0.." + std::to_string(count - 1) + ")");
    pn::Model model = load_model(cfg, ckpt, cfg.seed);
    pn::SceneSample sample =
        pn::generate(pn::kDataSeed, pn::split_index_base(split) + static_cast<uint64_t>(index),
                     cfg.data_spec());
    pn::NeckNormMode nm = cfg.soft_mode();
    pn::ForwardOut f = pn::model_forward(model, sample, nm);
    pn::PrototypeMap pm = pn::prototype_map_from_tokens(f.proto_tokens.data(), cfg.prototypes,
                                                        f.grid_h, f.grid_w, nm);
    pn::PrototypeAssignment assign = pn::assignment_for(cfg);
    pn::Palette pal = pn::default_palette();
    int k = std::min<int>(cfg.topk, static_cast<int>(pal.colors.size()));
    if (topk > 0) k = topk;

    std::filesystem::create_directories(cfg.out_dir);
    std::vector<std::string> written;
    auto emit = [&](const pn::RgbImage& img, char tag, int id) {
        std::string name = pn::map_filename(split, static_cast<uint64_t>(index), mode, tag, id);
        pn::write_ppm(cfg.out_dir + "/" + name, img);
        written.push_back(name);
    };

    if (mode == "single") {
        if (proto < 0) {
            // No prototype requested: render the strongest one.
            std::vector<double> mass(static_cast<size_t>(pm.p), 0.0);
            for (size_t i = 0; i < pm.values.size(); ++i)
                mass[i / (static_cast<size_t>(pm.h) * pm.w)] += pm.values[i];
            proto = pn::rank_prototypes(mass, 1)[0];
        }
        emit(pn::render_single(pm, proto, sample), 'p', proto);
    } else if (mode == "multi") {
        emit(pn::render_multi(pm, k, pal, sample, &assign), 0, -1);
    } else if (mode == "product") {
        std::vector<int> queries;
        if (query >= 0) {
            if (query >= cfg.queries)
                throw pn::config_error("query " + std::to_string(query) + " outside 0.." +
                                       std::to_string(cfg.queries - 1));
            queries.push_back(query);
        } else {
            pn::MatchResult match = pn::match_detections(f.class_logits, f.boxes, sample.targets,
                                                         cfg.loss_coeffs().match);
            for (auto& [qi, ti] : match.pairs) queries.push_back(qi);
            if (queries.empty()) {
                // Nothing matched; fall back to the most confident query.
                std::vector<pn::ScoredDetection> dets =
                    pn::scored_detections(f.class_logits, f.boxes);
                int best = 0;
                for (size_t q = 1; q < dets.size(); ++q)
                    if (dets[q].score > dets[static_cast<size_t>(best)].score)
                        best = static_cast<int>(q);
                queries.push_back(best);
            }
        }
        for (int q : queries)
            emit(pn::render_product(f.attention[static_cast<size_t>(q)], pm, k, pal, sample,
                                    cfg.blur_sigma, &assign),
                 'q', q);
    } else {
        throw pn::config_error("unknown mode '" + mode + "' (single|multi|product)");
    }

    // Sidecar: which prototype belongs to which class, and how much each one
    // fires on this image.
    std::string side = cfg.out_dir + "/" + split + "_" + std::to_string(index) + "_explain.txt";
    std::ofstream txt(side);
    if (!txt) throw pn::data_error("cannot open '" + side + "' for writing");
    txt << "config_hash " << pn::config_hash(cfg) << "\n";
    txt << "split " << split << " index " << index << " mode " << mode << " norm "
        << pn::to_string(nm) << "\n";
    txt << std::setprecision(6);
    double cells = static_cast<double>(pm.h) * pm.w;
    for (int p = 0; p < pm.p; ++p) {
        double mass = 0;
        for (int i = 0; i < pm.h; ++i)
            for (int j = 0; j < pm.w; ++j) mass += pm.at(p, i, j);
        txt << "prototype " << p << " class " << assign.class_of[static_cast<size_t>(p)]
            << " activation " << mass / cells << "\n";
    }
    for (const std::string& name : written) txt << "file " << name << "\n";
    std::cout << "wrote " << written.size() << " map(s) + " << side << "\n";
    return 0;
}

int cmd_sweep(const CommonArgs& args) {
    pn::RunConfig cfg = load_config(args);
    std::filesystem::create_directories(cfg.out_dir);
    std::vector<pn::SweepCell> cells = pn::sweep_run(cfg, &std::cout);
    std::string csv = cfg.out_dir + "/sweep.csv";
    pn::write_sweep_csv(csv, pn::config_hash(cfg), cells);
    std::cout << "wrote " << csv << "\n";
    return 0;
}

int cmd_export(const CommonArgs& args, const std::string& split, int count,
               const std::string& file) {
    pn::RunConfig cfg = load_config(args);
    int n = count > 0 ? count : pn::split_sample_count(cfg, split);
    if (n <= 0) throw pn::data_error("split '" + split + "' is empty");
    uint64_t base = pn::split_index_base(split);
    pn::DataSpec ds = cfg.data_spec();
    std::vector<pn::SceneSample> samples;
    samples.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        samples.push_back(pn::generate(pn::kDataSeed, base + static_cast<uint64_t>(i), ds));
    pn::write_dataset(file, samples);
    std::cout << "wrote " << n << " samples to " << file << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prototype-bottleneck detector: training, evaluation, explanation maps"};
    app.require_subcommand(1);

    CommonArgs targs, eargs, xargs, sargs, dargs;
    std::string ckpt, split = "val", mode = "multi", data_file = "dataset.bin";
    std::string seed_list;
    int64_t index = 0;
    int topk = -1, query = -1, proto = -1, count = 0;

    CLI::App* train = app.add_subcommand("train", "train a model, write loss curve + checkpoints");
    add_common(train, targs);

    CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on a split");
    add_common(eval, eargs);
    eval->add_option("--checkpoint", ckpt, "checkpoint path; {seed} expands per seed")->required();
    eval->add_option("--split", split, "train|val|test");
    eval->add_option("--seeds", seed_list, "comma-separated seeds for mean/std aggregation");

    CLI::App* explain = app.add_subcommand("explain", "render prototype/product maps for an image");
    add_common(explain, xargs);
    explain->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    explain->add_option("--split", split, "train|val|test");
    explain->add_option("--index", index, "image index inside the split")->required();
    explain->add_option("--mode", mode, "single|multi|product");
    explain->add_option("--topk", topk, "colored prototypes (default from config)");
    explain->add_option("--query", query, "restrict product maps to one decoder query");
    explain->add_option("--proto", proto, "prototype for single mode (default: most active)");

    CLI::App* sweep = app.add_subcommand("sweep", "train/eval the variant matrix from the config");
    add_common(sweep, sargs);

    CLI::App* export_data = app.add_subcommand("export-data", "write a synthetic split to a file");
    add_common(export_data, dargs);
    export_data->add_option("--split", split, "train|val|test");
    export_data->add_option("--count", count, "samples to write (default: split size)");
    export_data->add_option("--file", data_file, "output path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(targs);
        if (eval->parsed()) {
            std::vector<uint64_t> seeds;
            if (!seed_list.empty()) {
                pn::detail::ConfigCursor at{"--seeds", 1};
                for (const std::string& part : at.split_list(seed_list))
                    seeds.push_back(static_cast<uint64_t>(at.to_int(part)));
            }
            return cmd_eval(eargs, ckpt, split, seeds);
        }
        if (explain->parsed()) return cmd_explain(xargs, ckpt, split, index, mode, topk, query, proto);
        if (sweep->parsed()) return cmd_sweep(sargs);
        if (export_data->parsed()) return cmd_export(dargs, split, count, data_file);
    } catch (const pn::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const pn::checkpoint_error& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return 3;
    } catch (const pn::data_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
