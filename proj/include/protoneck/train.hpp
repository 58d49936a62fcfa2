#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "protoneck/checkpoint.hpp"
#include "protoneck/config.hpp"
#include "protoneck/metrics.hpp"
#include "protoneck/model.hpp"
#include "protoneck/parallel.hpp"

namespace protoneck {

// Scene content is addressed purely by (data seed, split base + index), so
// every run sees the same dataset regardless of its model seed and nothing
// is ever cached to disk.
inline constexpr uint64_t kDataSeed = 0xd47a5eedull;

inline int split_sample_count(const RunConfig& cfg, const std::string& split) {
    if (split == "train") return cfg.train_samples;
    if (split == "val") return cfg.val_samples;
    if (split == "test") return cfg.test_samples;
    throw config_error("unknown split '" + split + "' (train|val|test)");
}

struct EpochStats {
    double ce = 0, l1 = 0, giou = 0, align = 0, total = 0;
};

struct TrainResult {
    std::vector<EpochStats> epochs;
    int best_epoch = -1;
    double best_loss = 0;
    std::string final_path, best_path, loss_csv_path;
};

inline PrototypeAssignment assignment_for(const RunConfig& cfg) {
    if (!cfg.has_neck()) return {};
    return assign_prototypes(cfg.prototypes, cfg.num_classes, cfg.protos_extra);
}

// Batch gradient norms sit around 8-30 here; the threshold only catches the
// spike tail, it does not renormalize routine steps.
inline constexpr double kGradClipNorm = 25.0;

// Cosine decay from the configured rate down to 5% of it by the end of the
// run; cheap insurance that late epochs refine boxes instead of overshooting.
inline double lr_at(double base_lr, double progress) {
    double c = 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::clamp(progress, 0.0, 1.0)));
    return base_lr * (0.05 + 0.95 * c);
}

// Deterministic single-threaded training; writes loss.csv plus best and
// final checkpoints under out_dir.
inline TrainResult train_run(const RunConfig& cfg, uint64_t seed, std::ostream* log = nullptr) {
    validate_config(cfg);
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    std::string hash = config_hash(cfg);

    Model model = model_init(cfg.model_config(), seed);
    std::vector<NamedParam> params = model.params();
    AdamState opt;
    adam_init(opt, params);
    PrototypeAssignment assign = assignment_for(cfg);
    LossCoeffs co = cfg.loss_coeffs();
    DataSpec ds = cfg.data_spec();
    ArgmaxSchedule sched = cfg.argmax_schedule();
    NeckNormMode soft = cfg.soft_mode();
    bool align_on = cfg.has_neck();

    Rng order_rng(seed, 2);
    Rng mode_rng(seed, 3);

    TrainResult res;
    res.loss_csv_path = cfg.out_dir + "/loss.csv";
    res.final_path = cfg.out_dir + "/final.ckpt";
    res.best_path = cfg.out_dir + "/best.ckpt";
    std::ofstream csv(res.loss_csv_path);
    if (!csv) throw data_error("cannot open '" + res.loss_csv_path + "' for writing");
    csv << "# config_hash " << hash << "\n";
    csv << "epoch,ce,l1,giou,align,total\n";
    csv << std::setprecision(10);

    const int n = cfg.train_samples;
    std::map<std::string, std::string> meta{{"config_hash", hash},
                                            {"neck_mode", cfg.neck_mode},
                                            {"config", config_dump(cfg)}};
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order = order_rng.permutation(n);
        EpochStats st;
        for (int start = 0; start < n; start += cfg.batch_size) {
            int bsz = std::min(cfg.batch_size, n - start);
            Tape tape;
            Tensor batch_total = Tensor::scalar(0.0);
            for (int bi = 0; bi < bsz; ++bi) {
                int i = start + bi;
                double t = (epoch + static_cast<double>(i) / n) / cfg.epochs;
                SceneSample s = generate(
                    kDataSeed, kTrainIndexBase + static_cast<uint64_t>(order[static_cast<size_t>(i)]),
                    ds);
                NeckNormMode mode =
                    align_on ? pick_norm_mode_for_image(t, soft, sched, mode_rng) : soft;
                double coef = align_on ? align_coef_at(t, cfg.align_start, cfg.align_end) : 0.0;
                ForwardOut f = model_forward(model, s, mode);
                ImageLoss l = image_loss(f.class_logits, f.boxes, f.proto_tokens, f.grid_h,
                                         f.grid_w, s.targets, assign, co, coef);
                batch_total = add(batch_total, l.total);
                st.ce += l.ce.item();
                st.l1 += l.l1.item();
                st.giou += l.giou.item();
                st.align += l.align.item();
                st.total += l.total.item();
            }
            tape.backward(scale(batch_total, 1.0 / bsz));
            // Matching flips between epochs make the loss surface spiky; a
            // generous clip keeps the odd bad batch from derailing Adam.
            clip_grad_norm(params, kGradClipNorm);
            adam_step(params, opt, lr_at(cfg.lr, (epoch + static_cast<double>(start) / n) / cfg.epochs));
            zero_grads(params);
        }
        st.ce /= n;
        st.l1 /= n;
        st.giou /= n;
        st.align /= n;
        st.total /= n;
        res.epochs.push_back(st);
        csv << epoch << ',' << st.ce << ',' << st.l1 << ',' << st.giou << ',' << st.align << ','
            << st.total << "\n";
        csv.flush();
        if (log)
            *log << "epoch " << epoch << " total " << st.total << " (ce " << st.ce << ", l1 "
                 << st.l1 << ", giou " << st.giou << ", align " << st.align << ")\n";
        if (res.best_epoch < 0 || st.total < res.best_loss) {
            res.best_epoch = epoch;
            res.best_loss = st.total;
            save_checkpoint(res.best_path, params, meta);
        }
    }
    save_checkpoint(res.final_path, params, meta);
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOutput {
    MetricsReport report;
    int images = 0;
};

// Scores one split: detection quality via the COCO protocol plus the four
// prototype-map scores. Per-image work may fan out over the worker pool;
// reduction order is fixed by index.
inline EvalOutput eval_split(const RunConfig& cfg, Model& model, const std::string& split) {
    int count = split_sample_count(cfg, split);
    if (count <= 0) throw data_error("split '" + split + "' is empty");
    DataSpec ds = cfg.data_spec();
    uint64_t base = split_index_base(split);
    NeckNormMode mode = cfg.soft_mode();
    bool neck = cfg.has_neck();
    PrototypeAssignment assign = assignment_for(cfg);
    LossCoeffs co = cfg.loss_coeffs();

    struct PerImage {
        double ee = 0, px = 0, aap = 0;
        std::optional<double> ae;
        std::vector<ScoredDetection> dets;
        std::vector<Target> targets;
    };
    std::vector<PerImage> slots(static_cast<size_t>(count));
    parallel_for(count, [&](int64_t i) {
        SceneSample s = generate(kDataSeed, base + static_cast<uint64_t>(i), ds);
        ForwardOut f = model_forward(model, s, mode);
        PerImage& out = slots[static_cast<size_t>(i)];
        out.dets = scored_detections(f.class_logits, f.boxes);
        out.targets = s.targets;
        if (!neck) return;
        PrototypeMap pm = prototype_map_from_tokens(f.proto_tokens.data(), cfg.prototypes,
                                                    f.grid_h, f.grid_w, mode);
        out.ee = exclusion_error(pm);
        out.px = perplexity(pm);
        out.aap = avg_active_prototypes(pm);
        MatchResult match = match_detections(f.class_logits, f.boxes, s.targets, co.match);
        std::vector<std::pair<int, AttentionMap>> matched;
        for (auto& [qi, ti] : match.pairs)
            matched.emplace_back(s.targets[static_cast<size_t>(ti)].cls,
                                 f.attention[static_cast<size_t>(qi)]);
        out.ae = alignment_error(matched, pm, assign);
    });

    std::vector<std::vector<ScoredDetection>> dets;
    std::vector<std::vector<Target>> tgts;
    double ee = 0, px = 0, aap = 0, ae = 0;
    int ae_n = 0;
    for (PerImage& s : slots) {
        dets.push_back(std::move(s.dets));
        tgts.push_back(std::move(s.targets));
        ee += s.ee;
        px += s.px;
        aap += s.aap;
        if (s.ae) {
            ae += *s.ae;
            ++ae_n;
        }
    }
    MapBreakdown bd = coco_map_breakdown(dets, tgts, cfg.num_classes);

    EvalOutput out;
    out.images = count;
    MetricsReport& r = out.report;
    if (neck) {
        r.ee = ee / count;
        r.px = px / count;
        r.aap = aap / count;
        if (ae_n > 0) r.ae = ae / ae_n;
    } else {
        r.ee = r.px = r.aap = std::numeric_limits<double>::quiet_NaN();
    }
    r.map_50_95 = bd.map_50_95;
    r.map_50 = bd.map_50;
    r.mode = cfg.neck_mode;
    r.num_prototypes = cfg.prototypes;
    r.align_start = cfg.align_start;
    r.align_end = cfg.align_end;
    return out;
}

namespace detail {

inline std::string csv_num(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream o;
    o << std::setprecision(10) << v;
    return o.str();
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean_of(v), s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace detail

// metrics.csv: one row per seed plus mean/std rows when aggregating.
inline void write_metrics_csv(const std::string& path, const std::string& hash,
                              const std::vector<std::pair<std::string, MetricsReport>>& rows) {
    std::ofstream f(path);
    if (!f) throw data_error("cannot open '" + path + "' for writing");
    f << "# config_hash " << hash << "\n";
    f << "seed,ee,ae,px,aap,map_50_95,map_50,mode\n";
    auto emit = [&](const std::string& label, const MetricsReport& r) {
        f << label << ',' << detail::csv_num(r.ee) << ','
          << (r.ae ? detail::csv_num(*r.ae) : "nan") << ',' << detail::csv_num(r.px) << ','
          << detail::csv_num(r.aap) << ',' << detail::csv_num(r.map_50_95) << ','
          << detail::csv_num(r.map_50) << ',' << r.mode << "\n";
    };
    for (const auto& [label, r] : rows) emit(label, r);
    if (rows.size() > 1) {
        auto column = [&](auto get) {
            std::vector<double> v;
            for (const auto& [label, r] : rows) {
                double x = get(r);
                if (!std::isnan(x)) v.push_back(x);
            }
            return v;
        };
        MetricsReport mean, sd;
        auto fill = [&](MetricsReport& dst, auto stat) {
            dst.ee = stat(column([](const MetricsReport& r) { return r.ee; }));
            auto aev = column([](const MetricsReport& r) {
                return r.ae ? *r.ae : std::numeric_limits<double>::quiet_NaN();
            });
            if (!aev.empty()) dst.ae = stat(aev);
            dst.px = stat(column([](const MetricsReport& r) { return r.px; }));
            dst.aap = stat(column([](const MetricsReport& r) { return r.aap; }));
            dst.map_50_95 = stat(column([](const MetricsReport& r) { return r.map_50_95; }));
            dst.map_50 = stat(column([](const MetricsReport& r) { return r.map_50; }));
        };
        fill(mean, detail::mean_of);
        fill(sd, detail::sample_std);
        mean.mode = rows.front().second.mode;
        sd.mode = rows.front().second.mode;
        emit("mean", mean);
        emit("std", sd);
    }
}

// ---------------------------------------------------------------------------
// Variant sweep: alignment-strength axis and quantization-frequency axis.

struct SweepCell {
    std::string axis;  // "align" or "quant"
    double value = 0;
    std::vector<MetricsReport> per_seed;
};

inline RunConfig sweep_arm_config(const RunConfig& base, const std::string& axis, double value,
                                  const std::string& arm_dir) {
    RunConfig arm = base;
    arm.sweep_align.clear();
    arm.sweep_quant.clear();
    arm.out_dir = arm_dir;
    if (axis == "align") {
        arm.align_start = arm.align_end = value;
    } else if (axis == "quant") {
        if (value >= 100.0) {
            arm.neck_mode = "argmax";
            arm.argmax_start = arm.argmax_end = 100.0;
        } else {
            arm.argmax_start = arm.argmax_end = value;
        }
    } else {
        throw config_error("unknown sweep axis '" + axis + "'");
    }
    return arm;
}

inline std::vector<SweepCell> sweep_run(const RunConfig& base, std::ostream* log = nullptr) {
    std::vector<std::pair<std::string, double>> cells;
    for (double v : base.sweep_align) cells.emplace_back("align", v);
    for (double v : base.sweep_quant) cells.emplace_back("quant", v);
    std::vector<SweepCell> out;
    for (auto& [axis, value] : cells) {
        SweepCell cell;
        cell.axis = axis;
        cell.value = value;
        for (uint64_t seed : base.seeds) {
            std::ostringstream dir;
            dir << base.out_dir << "/sweep/" << axis << "_" << value << "/seed_" << seed;
            RunConfig arm = sweep_arm_config(base, axis, value, dir.str());
            if (log)
                *log << "sweep " << axis << "=" << value << " seed " << seed << "\n";
            TrainResult tr = train_run(arm, seed, log);
            Model model = model_init(arm.model_config(), seed);
            std::vector<NamedParam> params = model.params();
            load_checkpoint(tr.best_path, params);
            cell.per_seed.push_back(eval_split(arm, model, "val").report);
        }
        out.push_back(std::move(cell));
    }
    return out;
}

// Sweep table: per axis one block, scores as rows, variant values as columns.
inline void write_sweep_csv(const std::string& path, const std::string& hash,
                            const std::vector<SweepCell>& cells) {
    std::ofstream f(path);
    if (!f) throw data_error("cannot open '" + path + "' for writing");
    f << "# config_hash " << hash << "\n";
    const char* metrics[] = {"map_50_95", "map_50", "ee", "ae", "px", "aap"};
    auto metric_values = [](const SweepCell& c, const std::string& name) {
        std::vector<double> v;
        for (const MetricsReport& r : c.per_seed) {
            double x = name == "map_50_95" ? r.map_50_95
                       : name == "map_50"  ? r.map_50
                       : name == "ee"      ? r.ee
                       : name == "ae" ? (r.ae ? *r.ae : std::numeric_limits<double>::quiet_NaN())
                       : name == "px" ? r.px
                                      : r.aap;
            if (!std::isnan(x)) v.push_back(x);
        }
        return v;
    };
    for (const char* axis : {"align", "quant"}) {
        std::vector<const SweepCell*> row;
        for (const SweepCell& c : cells)
            if (c.axis == axis) row.push_back(&c);
        f << "axis,metric";
        for (const SweepCell* c : row) f << ',' << detail::csv_num(c->value);
        f << "\n";
        if (row.empty()) continue;
        for (const char* m : metrics)
            for (const char* stat : {"mean", "std"}) {
                f << axis << ',' << m << '_' << stat;
                for (const SweepCell* c : row) {
                    std::vector<double> v = metric_values(*c, m);
                    f << ','
                      << detail::csv_num(std::string(stat) == "mean" ? detail::mean_of(v)
                                                                     : detail::sample_std(v));
                }
                f << "\n";
            }
    }
}

}  // namespace protoneck
