#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "protoneck/losses.hpp"
#include "protoneck/maps.hpp"

namespace protoneck {

// How much probability mass per location falls outside the dominant
// prototype; 0 exactly when every location is one-hot.
inline double exclusion_error(const PrototypeMap& m) {
    double acc = 0.0;
    for (int i = 0; i < m.h; ++i)
        for (int j = 0; j < m.w; ++j) {
            double mx = 0.0;
            for (int p = 0; p < m.p; ++p) mx = std::max(mx, m.at(p, i, j));
            acc += 1.0 - mx;
        }
    return acc / static_cast<double>(m.h * m.w);
}

// Attended mass landing on prototypes of the wrong class, averaged over
// matched detections. No detections: score undefined, reported absent.
inline std::optional<double> alignment_error(const std::vector<std::pair<int, AttentionMap>>& matched,
                                             const PrototypeMap& m, const PrototypeAssignment& assign) {
    if (matched.empty()) return std::nullopt;
    double acc = 0.0;
    for (const auto& [cls, att] : matched) {
        if (att.h != m.h || att.w != m.w)
            throw shape_error("alignment_error: attention and prototype grids differ");
        for (int i = 0; i < m.h; ++i)
            for (int j = 0; j < m.w; ++j) {
                double owned_mass = 0.0;
                for (int p : assign.owned[static_cast<size_t>(cls)]) owned_mass += m.at(p, i, j);
                acc += att.at(i, j) * (1.0 - owned_mass);
            }
    }
    return acc / static_cast<double>(matched.size());
}

// Exponentiated entropy of the spatially averaged prototype distribution:
// 1 when a single prototype dominates everywhere, P at maximal diversity.
inline double perplexity(const PrototypeMap& m) {
    std::vector<double> avg(static_cast<size_t>(m.p), 0.0);
    for (int p = 0; p < m.p; ++p)
        for (int i = 0; i < m.h; ++i)
            for (int j = 0; j < m.w; ++j) avg[static_cast<size_t>(p)] += m.at(p, i, j);
    double ent = 0.0;
    for (double& v : avg) {
        v /= static_cast<double>(m.h * m.w);
        if (v > 0.0) ent -= v * std::log(v);
    }
    return std::exp(ent);
}

// Mean count of strictly positive prototype activations per location.
inline double avg_active_prototypes(const PrototypeMap& m) {
    int64_t active = 0;
    for (double v : m.values) active += v > 0.0;
    return static_cast<double>(active) / static_cast<double>(m.h * m.w);
}

// ---------------------------------------------------------------------------
// Detection quality

struct ScoredDetection {
    int cls = 0;
    double score = 0.0;
    Box box;
};

struct MapBreakdown {
    std::vector<double> thresholds;               // 0.50 .. 0.95
    std::map<int, std::vector<double>> ap;        // class -> AP per threshold
    double map_50_95 = 0.0;
    double map_50 = 0.0;
};

// COCO-flavored mAP: greedy matching per class at IoU thresholds
// 0.50:0.05:0.95, 101-point interpolated AP, single area range, unlimited
// detections. Classes without any ground truth are skipped. Ties in
// confidence rank by (image index, detection index), fixed and documented.
inline MapBreakdown coco_map_breakdown(const std::vector<std::vector<ScoredDetection>>& dets,
                                       const std::vector<std::vector<Target>>& tgts,
                                       int num_classes) {
    MapBreakdown out;
    for (int t = 0; t < 10; ++t) out.thresholds.push_back(0.50 + 0.05 * t);

    size_t images = tgts.size();
    double ap_sum = 0.0, ap50_sum = 0.0;
    int classes_seen = 0;
    for (int cls = 0; cls < num_classes; ++cls) {
        // (score, image, det index) for this class.
        std::vector<std::tuple<double, int, int>> ranked;
        int total_gt = 0;
        for (size_t im = 0; im < images; ++im) {
            for (const Target& t : tgts[im])
                if (t.cls == cls) ++total_gt;
            if (im < dets.size())
                for (size_t d = 0; d < dets[im].size(); ++d)
                    if (dets[im][d].cls == cls)
                        ranked.emplace_back(dets[im][d].score, static_cast<int>(im), static_cast<int>(d));
        }
        if (total_gt == 0) continue;
        ++classes_seen;
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
            if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
            return std::get<2>(a) < std::get<2>(b);
        });

        auto& aps = out.ap[cls];
        for (double thr : out.thresholds) {
            std::vector<std::vector<bool>> taken(images);
            for (size_t im = 0; im < images; ++im) taken[im].assign(tgts[im].size(), false);
            int tp = 0;
            std::vector<std::pair<double, double>> pr;  // (recall, precision) after each det
            int seen = 0;
            for (const auto& [score, im, d] : ranked) {
                (void)score;
                ++seen;
                const Box& pbox = dets[static_cast<size_t>(im)][static_cast<size_t>(d)].box;
                int best = -1;
                double best_iou = thr;
                const auto& gts = tgts[static_cast<size_t>(im)];
                for (size_t g = 0; g < gts.size(); ++g) {
                    if (gts[g].cls != cls || taken[static_cast<size_t>(im)][g]) continue;
                    double v = iou(pbox, gts[g].box);
                    if (v >= best_iou) {
                        best_iou = v;
                        best = static_cast<int>(g);
                    }
                }
                if (best >= 0) {
                    taken[static_cast<size_t>(im)][static_cast<size_t>(best)] = true;
                    ++tp;
                }
                pr.emplace_back(static_cast<double>(tp) / total_gt,
                                static_cast<double>(tp) / seen);
            }
            // Monotone precision envelope, sampled at 101 recall points.
            for (int i = static_cast<int>(pr.size()) - 2; i >= 0; --i)
                pr[static_cast<size_t>(i)].second =
                    std::max(pr[static_cast<size_t>(i)].second, pr[static_cast<size_t>(i + 1)].second);
            double ap = 0.0;
            for (int r = 0; r <= 100; ++r) {
                double recall = r / 100.0;
                double prec = 0.0;
                for (const auto& [rc, pc] : pr)
                    if (rc >= recall - 1e-12) {
                        prec = pc;
                        break;
                    }
                ap += prec;
            }
            ap /= 101.0;
            aps.push_back(ap);
        }
        double cls_mean = 0.0;
        for (double v : aps) cls_mean += v;
        ap_sum += cls_mean / static_cast<double>(aps.size());
        ap50_sum += aps[0];
    }
    if (classes_seen > 0) {
        out.map_50_95 = ap_sum / classes_seen;
        out.map_50 = ap50_sum / classes_seen;
    }
    return out;
}

inline double coco_map(const std::vector<std::vector<ScoredDetection>>& dets,
                       const std::vector<std::vector<Target>>& tgts, int num_classes) {
    return coco_map_breakdown(dets, tgts, num_classes).map_50_95;
}

// One evaluation's worth of scores plus the context needed to read them.
struct MetricsReport {
    double ee = 0.0;
    std::optional<double> ae;
    double px = 1.0;
    double aap = 1.0;
    double map_50_95 = 0.0;
    double map_50 = 0.0;
    std::string mode;
    int num_prototypes = 0;
    double align_start = 0.0, align_end = 0.0;
};

}  // namespace protoneck
