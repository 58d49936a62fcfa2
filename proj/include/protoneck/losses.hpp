#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <utility>
#include <vector>

#include "protoneck/errors.hpp"
#include "protoneck/sparse_activations.hpp"
#include "protoneck/tensor.hpp"

namespace protoneck {

// Boxes travel as (cx, cy, w, h) in normalized [0,1] image coordinates.
struct Box {
    double cx = 0, cy = 0, w = 0, h = 0;
};

inline Box box_from_corners(double x0, double y0, double x1, double y1) {
    return Box{(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
}

struct Target {
    int cls = 0;
    Box box;
};

// Generalized IoU: IoU minus the hull's share of dead space. In (-1, 1],
// 1 exactly for identical boxes.
inline double giou(const Box& a, const Box& b) {
    if (a.w <= 0 || a.h <= 0 || b.w <= 0 || b.h <= 0)
        throw contract_error("giou: degenerate box (non-positive extent)");
    double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2, ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
    double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2, by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
    double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    double inter = iw * ih;
    double uni = a.w * a.h + b.w * b.h - inter;
    double hull = (std::max(ax1, bx1) - std::min(ax0, bx0)) * (std::max(ay1, by1) - std::min(ay0, by0));
    return inter / uni - (hull - uni) / hull;
}

inline double iou(const Box& a, const Box& b) {
    double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2, ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
    double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2, by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
    double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    double inter = iw * ih;
    return inter / (a.w * a.h + b.w * b.h - inter);
}

// Differentiable row-wise gIoU for [D,4] box tensors in (cx,cy,w,h) form.
inline Tensor giou_rows(const Tensor& a, const Tensor& b) {
    auto col = [](const Tensor& t, int64_t j) { return index_select(t, 1, {j}); };
    Tensor ax0 = sub(col(a, 0), scale(col(a, 2), 0.5)), ax1 = add(col(a, 0), scale(col(a, 2), 0.5));
    Tensor ay0 = sub(col(a, 1), scale(col(a, 3), 0.5)), ay1 = add(col(a, 1), scale(col(a, 3), 0.5));
    Tensor bx0 = sub(col(b, 0), scale(col(b, 2), 0.5)), bx1 = add(col(b, 0), scale(col(b, 2), 0.5));
    Tensor by0 = sub(col(b, 1), scale(col(b, 3), 0.5)), by1 = add(col(b, 1), scale(col(b, 3), 0.5));
    Tensor iw = relu(sub(minimum(ax1, bx1), maximum(ax0, bx0)));
    Tensor ih = relu(sub(minimum(ay1, by1), maximum(ay0, by0)));
    Tensor inter = mul(iw, ih);
    Tensor uni = sub(add(mul(col(a, 2), col(a, 3)), mul(col(b, 2), col(b, 3))), inter);
    Tensor hull = mul(sub(maximum(ax1, bx1), minimum(ax0, bx0)), sub(maximum(ay1, by1), minimum(ay0, by0)));
    return sub(div(inter, uni), div(sub(hull, uni), hull));
}

// ---------------------------------------------------------------------------
// Saliency

// Gaussian centered on a box, one-sixth of each extent per axis, sampled at
// cell centers of an [h, w] grid over the unit square. Padding cells (valid
// false) are zeroed before renormalizing to a distribution.
struct SaliencyMap {
    int h = 0, w = 0;
    std::vector<double> values;  // row-major [h*w]
    std::vector<uint8_t> valid;
};

inline SaliencyMap build_saliency(const Box& box, int h, int w,
                                  const std::vector<uint8_t>& valid_mask = {}) {
    if (box.w <= 0 || box.h <= 0) throw contract_error("build_saliency: non-positive box extent");
    SaliencyMap m;
    m.h = h;
    m.w = w;
    m.values.assign(static_cast<size_t>(h) * static_cast<size_t>(w), 0.0);
    m.valid = valid_mask.empty() ? std::vector<uint8_t>(m.values.size(), 1) : valid_mask;
    double sx = box.w / 6.0, sy = box.h / 6.0;
    double total = 0.0;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            size_t at = static_cast<size_t>(i) * static_cast<size_t>(w) + static_cast<size_t>(j);
            if (!m.valid[at]) continue;
            double x = (j + 0.5) / w, y = (i + 0.5) / h;
            double dx = (x - box.cx) / sx, dy = (y - box.cy) / sy;
            double v = std::exp(-0.5 * (dx * dx + dy * dy));
            m.values[at] = v;
            total += v;
        }
    if (total <= 0.0) throw contract_error("build_saliency: no valid cells");
    for (double& v : m.values) v /= total;
    return m;
}

// ---------------------------------------------------------------------------
// Prototype ownership

struct PrototypeAssignment {
    int num_classes = 0;
    std::vector<int> class_of;            // prototype -> class
    std::vector<std::vector<int>> owned;  // class -> prototypes
};

// Fixed before training. Override classes take their extra prototypes first;
// the remainder spreads round-robin, earlier classes absorbing the leftover.
inline PrototypeAssignment assign_prototypes(int num_prototypes, int num_classes,
                                             const std::map<int, int>& extra = {}) {
    if (num_prototypes < num_classes)
        throw config_error("assign_prototypes: " + std::to_string(num_prototypes) +
                           " prototypes cannot cover " + std::to_string(num_classes) + " classes");
    int extra_total = 0;
    for (auto& [cls, n] : extra) {
        if (cls < 0 || cls >= num_classes) throw config_error("assign_prototypes: override for unknown class");
        if (n < 0) throw config_error("assign_prototypes: negative override");
        extra_total += n;
    }
    int base_pool = num_prototypes - extra_total;
    if (base_pool < num_classes)
        throw config_error("assign_prototypes: overrides leave fewer prototypes than classes");
    PrototypeAssignment a;
    a.num_classes = num_classes;
    a.owned.resize(static_cast<size_t>(num_classes));
    std::vector<int> count(static_cast<size_t>(num_classes), 0);
    for (int c = 0; c < num_classes; ++c)
        count[static_cast<size_t>(c)] = base_pool / num_classes + (c < base_pool % num_classes ? 1 : 0);
    for (auto& [cls, n] : extra) count[static_cast<size_t>(cls)] += n;
    int next = 0;
    for (int c = 0; c < num_classes; ++c)
        for (int k = 0; k < count[static_cast<size_t>(c)]; ++k) {
            a.owned[static_cast<size_t>(c)].push_back(next);
            a.class_of.push_back(c);
            ++next;
        }
    return a;
}

// ---------------------------------------------------------------------------
// Bipartite matching

struct MatchResult {
    std::vector<std::pair<int, int>> pairs;  // (query, target), sorted by target
    double total_cost = 0.0;
};

// Kuhn-Munkres with potentials on the transposed view (targets as rows).
// cost is [Q][T] with T <= Q.
inline MatchResult hungarian_match(const std::vector<std::vector<double>>& cost) {
    int q = static_cast<int>(cost.size());
    int t = q ? static_cast<int>(cost[0].size()) : 0;
    if (t > q)
        throw contract_error("hungarian_match: " + std::to_string(t) + " targets exceed " +
                             std::to_string(q) + " queries");
    MatchResult res;
    if (t == 0) return res;
    for (auto& row : cost)
        for (double v : row)
            if (!std::isfinite(v)) throw numeric_error("hungarian_match: non-finite cost");

    const double kInf = std::numeric_limits<double>::infinity();
    // 1-indexed; a[i][j] = cost of target i taking query j.
    std::vector<double> u(static_cast<size_t>(t) + 1, 0.0), v(static_cast<size_t>(q) + 1, 0.0);
    std::vector<int> p(static_cast<size_t>(q) + 1, 0), way(static_cast<size_t>(q) + 1, 0);
    for (int i = 1; i <= t; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(q) + 1, kInf);
        std::vector<bool> used(static_cast<size_t>(q) + 1, false);
        do {
            used[static_cast<size_t>(j0)] = true;
            int i0 = p[static_cast<size_t>(j0)], j1 = -1;
            double delta = kInf;
            for (int j = 1; j <= q; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                double cur = cost[static_cast<size_t>(j - 1)][static_cast<size_t>(i0 - 1)] -
                             u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= q; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    for (int j = 1; j <= q; ++j) {
        int i = p[static_cast<size_t>(j)];
        if (i > 0) {
            res.pairs.emplace_back(j - 1, i - 1);
            res.total_cost += cost[static_cast<size_t>(j - 1)][static_cast<size_t>(i - 1)];
        }
    }
    std::sort(res.pairs.begin(), res.pairs.end(),
              [](auto& a, auto& b) { return a.second < b.second; });
    return res;
}

struct MatchWeights {
    double cls = 2.0, l1 = 5.0, giou = 2.0;
};

// Matching potential of one (prediction, target) pair.
inline double detection_cost(const std::vector<double>& class_probs, const Box& pred,
                             const Target& tgt, const MatchWeights& w = {}) {
    double l1 = std::fabs(pred.cx - tgt.box.cx) + std::fabs(pred.cy - tgt.box.cy) +
                std::fabs(pred.w - tgt.box.w) + std::fabs(pred.h - tgt.box.h);
    return w.cls * (-class_probs[static_cast<size_t>(tgt.cls)]) + w.l1 * l1 +
           w.giou * (1.0 - giou(pred, tgt.box));
}

// ---------------------------------------------------------------------------
// Alignment loss

struct AlignmentResult {
    Tensor value;
    bool no_detections = false;
};

// Mean over matched detections of -log(eps + <saliency, owned prototype
// mass>). Differentiable through the prototype map; the saliency side is a
// constant built from the target box.
inline AlignmentResult alignment_loss(const std::vector<std::pair<int, SaliencyMap>>& matched,
                                      const Tensor& proto_tokens, const PrototypeAssignment& assign,
                                      double eps = 1e-3) {
    if (matched.empty()) return {Tensor::scalar(0.0), true};
    int64_t hw = proto_tokens.dim(0), np = proto_tokens.dim(1);
    Tensor acc = Tensor::scalar(0.0);
    for (const auto& [cls, sal] : matched) {
        if (static_cast<int64_t>(sal.values.size()) != hw)
            throw shape_error("alignment_loss: saliency grid does not match prototype map");
        Tensor sal_col = Tensor::from_data({hw, 1}, sal.values);
        std::vector<double> mask(static_cast<size_t>(np), 0.0);
        for (int pr : assign.owned[static_cast<size_t>(cls)]) mask[static_cast<size_t>(pr)] = 1.0;
        Tensor mask_row = Tensor::from_data({np}, mask);
        Tensor aligned = sum(mul(mul(proto_tokens, mask_row), sal_col));
        acc = add(acc, log(add_scalar(aligned, eps)));
    }
    return {scale(acc, -1.0 / static_cast<double>(matched.size())), false};
}

// Linear schedule for the alignment weight over training progress t in [0,1].
inline double align_coef_at(double t, double start = 1.2, double end = 0.7) {
    t = std::clamp(t, 0.0, 1.0);
    return start + (end - start) * t;
}

// ---------------------------------------------------------------------------
// Full per-image detection loss

struct LossCoeffs {
    double ce = 1.0, l1 = 5.0, giou = 2.0;
    double no_object_weight = 0.1;
    double align_eps = 1e-3;
    MatchWeights match;
};

struct ImageLoss {
    Tensor ce, l1, giou, align, total;
    MatchResult match;
    bool no_detections = false;
};

// Assigns targets to queries by minimum total detection cost; runs on the
// output values only (no gradient flows through the assignment).
inline MatchResult match_detections(const Tensor& class_logits, const Tensor& boxes,
                                    const std::vector<Target>& targets, const MatchWeights& mw) {
    int64_t nq = class_logits.dim(0);
    int64_t ncls = class_logits.dim(1);
    int nt = static_cast<int>(targets.size());
    if (nt == 0) return {};
    Tensor probs = softmax_axis(class_logits.detach(), 1);
    std::vector<std::vector<double>> cost(static_cast<size_t>(nq),
                                          std::vector<double>(static_cast<size_t>(nt)));
    for (int64_t qi = 0; qi < nq; ++qi) {
        std::vector<double> pq(static_cast<size_t>(ncls));
        for (int64_t c = 0; c < ncls; ++c) pq[static_cast<size_t>(c)] = probs.at({qi, c});
        Box pb{boxes.at({qi, 0}), boxes.at({qi, 1}), boxes.at({qi, 2}), boxes.at({qi, 3})};
        for (int ti = 0; ti < nt; ++ti)
            cost[static_cast<size_t>(qi)][static_cast<size_t>(ti)] =
                detection_cost(pq, pb, targets[static_cast<size_t>(ti)], mw);
    }
    return hungarian_match(cost);
}

// Matches targets to queries on detached outputs, then composes the
// differentiable terms: weighted CE over every query (matched queries get
// their target class, the rest "no object"), L1 and gIoU over matched boxes,
// and the alignment term over matched saliencies.
inline ImageLoss image_loss(const Tensor& class_logits, const Tensor& boxes,
                            const Tensor& proto_tokens, int grid_h, int grid_w,
                            const std::vector<Target>& targets, const PrototypeAssignment& assign,
                            const LossCoeffs& co, double align_coef,
                            const std::vector<uint8_t>& valid_mask = {}) {
    int64_t nq = class_logits.dim(0);
    int64_t ncls = class_logits.dim(1);  // K+1, last is no-object
    ImageLoss out;
    out.match = match_detections(class_logits, boxes, targets, co.match);

    // Classification over all queries.
    std::vector<double> onehot(static_cast<size_t>(nq * ncls), 0.0);
    std::vector<double> weights(static_cast<size_t>(nq), co.no_object_weight);
    for (int64_t qi = 0; qi < nq; ++qi) onehot[static_cast<size_t>(qi * ncls + ncls - 1)] = 1.0;
    for (auto& [qi, ti] : out.match.pairs) {
        onehot[static_cast<size_t>(qi) * static_cast<size_t>(ncls) + static_cast<size_t>(ncls - 1)] = 0.0;
        onehot[static_cast<size_t>(qi) * static_cast<size_t>(ncls) +
               static_cast<size_t>(targets[static_cast<size_t>(ti)].cls)] = 1.0;
        weights[static_cast<size_t>(qi)] = 1.0;
    }
    double wsum = 0.0;
    for (double v : weights) wsum += v;
    Tensor oh = Tensor::from_data({nq, ncls}, std::move(onehot));
    Tensor wcol = Tensor::from_data({nq, 1}, std::move(weights));
    Tensor mx = max_axis_detached(class_logits, 1);
    Tensor lse = add(mx, log(sum_axis(exp(sub(class_logits, mx)), 1)));
    Tensor nll = sub(lse, sum_axis(mul(oh, class_logits), 1));
    out.ce = scale(sum(mul(wcol, nll)), 1.0 / wsum);

    // Box terms over matched pairs only.
    std::vector<std::pair<int, SaliencyMap>> matched_sal;
    if (!out.match.pairs.empty()) {
        std::vector<int64_t> qidx;
        std::vector<double> tboxes;
        for (auto& [qi, ti] : out.match.pairs) {
            qidx.push_back(qi);
            const Box& b = targets[static_cast<size_t>(ti)].box;
            tboxes.insert(tboxes.end(), {b.cx, b.cy, b.w, b.h});
            matched_sal.emplace_back(targets[static_cast<size_t>(ti)].cls,
                                     build_saliency(b, grid_h, grid_w, valid_mask));
        }
        int64_t nd = static_cast<int64_t>(qidx.size());
        Tensor pred = index_select(boxes, 0, qidx);
        Tensor tgt = Tensor::from_data({nd, 4}, std::move(tboxes));
        out.l1 = scale(sum(abs(sub(pred, tgt))), 1.0 / static_cast<double>(nd));
        out.giou = scale(sum(add_scalar(neg(giou_rows(pred, tgt)), 1.0)),
                         1.0 / static_cast<double>(nd));
    } else {
        out.l1 = Tensor::scalar(0.0);
        out.giou = Tensor::scalar(0.0);
    }

    if (align_coef != 0.0) {
        AlignmentResult ar = alignment_loss(matched_sal, proto_tokens, assign, co.align_eps);
        out.align = ar.value;
        out.no_detections = ar.no_detections;
    } else {
        // Alignment switched off (or no neck at all): stay clear of the
        // prototype map entirely so ablated models need not produce one.
        out.align = Tensor::scalar(0.0);
        out.no_detections = matched_sal.empty();
    }

    out.total = add(add(scale(out.ce, co.ce), add(scale(out.l1, co.l1), scale(out.giou, co.giou))),
                    scale(out.align, align_coef));
    return out;
}

}  // namespace protoneck
