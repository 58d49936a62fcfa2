#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "protoneck/losses.hpp"
#include "protoneck/rng.hpp"

using namespace protoneck;

namespace {

Box random_box(Rng& rng, double min_side = 0.1, double max_side = 0.5) {
    double w = rng.uniform(min_side, max_side);
    double h = rng.uniform(min_side, max_side);
    double cx = rng.uniform(w / 2, 1.0 - w / 2);
    double cy = rng.uniform(h / 2, 1.0 - h / 2);
    return Box{cx, cy, w, h};
}

}  // namespace

TEST(Hungarian, TwoByTwoHandCase) {
    MatchResult r = hungarian_match({{1, 2}, {2, 1}});
    ASSERT_EQ(r.pairs.size(), 2u);
    EXPECT_EQ(r.pairs[0], (std::pair<int, int>{0, 0}));
    EXPECT_EQ(r.pairs[1], (std::pair<int, int>{1, 1}));
    EXPECT_DOUBLE_EQ(r.total_cost, 2.0);
}

TEST(Hungarian, DiagonalFavorsIdentity) {
    std::vector<std::vector<double>> cost(5, std::vector<double>(5, 10.0));
    for (int i = 0; i < 5; ++i) cost[static_cast<size_t>(i)][static_cast<size_t>(i)] = 0.0;
    MatchResult r = hungarian_match(cost);
    for (auto& [q, t] : r.pairs) EXPECT_EQ(q, t);
    EXPECT_DOUBLE_EQ(r.total_cost, 0.0);
}

TEST(Hungarian, MatchesBruteForceOnRandomMatrices) {
    Rng rng(41);
    for (int trial = 0; trial < 200; ++trial) {
        int q = 7, t = 5;
        std::vector<std::vector<double>> cost(static_cast<size_t>(q), std::vector<double>(static_cast<size_t>(t)));
        for (auto& row : cost)
            for (double& v : row) v = rng.uniform(-3.0, 3.0);
        MatchResult r = hungarian_match(cost);
        ASSERT_EQ(r.pairs.size(), static_cast<size_t>(t));
        // Oracle works target-major: transpose.
        std::vector<std::vector<double>> tc(static_cast<size_t>(t), std::vector<double>(static_cast<size_t>(q)));
        for (int i = 0; i < q; ++i)
            for (int j = 0; j < t; ++j) tc[static_cast<size_t>(j)][static_cast<size_t>(i)] = cost[static_cast<size_t>(i)][static_cast<size_t>(j)];
        double want = oracles::brute_force_assignment(tc);
        EXPECT_NEAR(r.total_cost, want, 1e-9);
    }
}

TEST(Hungarian, AllSmallSizesMatchBruteForce) {
    Rng rng(42);
    for (int t = 1; t <= 7; ++t)
        for (int q = t; q <= 7; ++q)
            for (int trial = 0; trial < 20; ++trial) {
                std::vector<std::vector<double>> cost(static_cast<size_t>(q),
                                                      std::vector<double>(static_cast<size_t>(t)));
                for (auto& row : cost)
                    for (double& v : row) v = rng.uniform(0.0, 5.0);
                std::vector<std::vector<double>> tc(static_cast<size_t>(t),
                                                    std::vector<double>(static_cast<size_t>(q)));
                for (int i = 0; i < q; ++i)
                    for (int j = 0; j < t; ++j)
                        tc[static_cast<size_t>(j)][static_cast<size_t>(i)] =
                            cost[static_cast<size_t>(i)][static_cast<size_t>(j)];
                EXPECT_NEAR(hungarian_match(cost).total_cost, oracles::brute_force_assignment(tc), 1e-9);
            }
}

TEST(Hungarian, RejectsMoreTargetsThanQueries) {
    EXPECT_THROW(hungarian_match({{1, 2, 3}, {4, 5, 6}}), contract_error);
}

TEST(Hungarian, RejectsNonFiniteCosts) {
    EXPECT_THROW(hungarian_match({{1.0, std::nan("")}, {1.0, 2.0}}), numeric_error);
}

TEST(Giou, IdenticalBoxesScoreOne) {
    Box b{0.5, 0.5, 0.4, 0.3};
    EXPECT_NEAR(giou(b, b), 1.0, 1e-12);
}

TEST(Giou, DisjointCornerBoxes) {
    // Unit squares at (0,0)-(1,1) and (2,2)-(3,3): hull 9, union 2, IoU 0.
    Box a = box_from_corners(0, 0, 1, 1);
    Box b = box_from_corners(2, 2, 3, 3);
    EXPECT_NEAR(giou(a, b), -7.0 / 9.0, 1e-12);
}

TEST(Giou, SymmetricAndBoundedByIou) {
    Rng rng(43);
    for (int trial = 0; trial < 500; ++trial) {
        Box a = random_box(rng), b = random_box(rng);
        double g = giou(a, b);
        EXPECT_NEAR(g, giou(b, a), 1e-12);
        EXPECT_LE(g, iou(a, b) + 1e-12);
        EXPECT_GT(g, -1.0);
        EXPECT_LE(g, 1.0 + 1e-12);
    }
    // Equality holds exactly when the hull is the union (nested boxes).
    Box outer{0.5, 0.5, 0.6, 0.6}, inner{0.5, 0.5, 0.2, 0.2};
    EXPECT_NEAR(giou(outer, inner), iou(outer, inner), 1e-12);
}

TEST(Giou, DegenerateBoxThrows) {
    Box ok{0.5, 0.5, 0.2, 0.2}, bad{0.5, 0.5, 0.0, 0.2};
    EXPECT_THROW(giou(ok, bad), contract_error);
    EXPECT_THROW(giou(bad, ok), contract_error);
}

TEST(GiouRows, AgreesWithScalarForm) {
    Rng rng(44);
    const int n = 20;
    std::vector<double> ad, bd;
    std::vector<Box> as, bs;
    for (int i = 0; i < n; ++i) {
        Box a = random_box(rng), b = random_box(rng);
        as.push_back(a);
        bs.push_back(b);
        ad.insert(ad.end(), {a.cx, a.cy, a.w, a.h});
        bd.insert(bd.end(), {b.cx, b.cy, b.w, b.h});
    }
    Tensor ta = Tensor::from_data({n, 4}, ad), tb = Tensor::from_data({n, 4}, bd);
    Tensor g = giou_rows(ta, tb);
    for (int i = 0; i < n; ++i)
        EXPECT_NEAR(g.data()[static_cast<size_t>(i)], giou(as[static_cast<size_t>(i)], bs[static_cast<size_t>(i)]), 1e-12);
}

TEST(GiouRows, GradMatchesFiniteDifferences) {
    Rng rng(45);
    // Overlapping pairs keep the intersection away from the clamp kink.
    const int n = 8;
    std::vector<double> ad, bd;
    for (int i = 0; i < n; ++i) {
        Box b = random_box(rng, 0.3, 0.5);
        Box a{b.cx + rng.uniform(-0.05, 0.05), b.cy + rng.uniform(-0.05, 0.05),
              b.w + rng.uniform(-0.05, 0.05), b.h + rng.uniform(-0.05, 0.05)};
        ad.insert(ad.end(), {a.cx, a.cy, a.w, a.h});
        bd.insert(bd.end(), {b.cx, b.cy, b.w, b.h});
    }
    Tensor ta = Tensor::from_data({n, 4}, ad), tb = Tensor::from_data({n, 4}, bd);
    Tensor w = Tensor::zeros({n, 1});
    for (double& v : w.data()) v = rng.uniform(-1.0, 1.0);
    ta.set_requires_grad(true);
    ta.zero_grad();
    {
        Tape tape;
        tape.backward(sum(mul(w, giou_rows(ta, tb))));
    }
    ta.set_requires_grad(false);
    auto fd = oracles::fd_gradient(ta.data(), [&]() { return sum(mul(w, giou_rows(ta, tb))).item(); });
    EXPECT_LE(oracles::max_scaled_err(ta.grad(), fd, 0.01), 1e-5);
}

TEST(DetectionCost, PerfectPredictionCostsMinusClassWeight) {
    Target t{2, Box{0.4, 0.6, 0.2, 0.3}};
    std::vector<double> probs{0, 0, 1.0, 0, 0};
    EXPECT_NEAR(detection_cost(probs, t.box, t), -2.0, 1e-12);
}

TEST(DetectionCost, MatchesTermwiseRecomputation) {
    Rng rng(46);
    for (int trial = 0; trial < 100; ++trial) {
        Box pred = random_box(rng);
        Target tgt{static_cast<int>(rng.below(4)), random_box(rng)};
        std::vector<double> probs(5);
        double s = 0;
        for (double& p : probs) {
            p = rng.uniform(0.01, 1.0);
            s += p;
        }
        for (double& p : probs) p /= s;
        double cls_term = -probs[static_cast<size_t>(tgt.cls)];
        double l1_term = std::fabs(pred.cx - tgt.box.cx) + std::fabs(pred.cy - tgt.box.cy) +
                         std::fabs(pred.w - tgt.box.w) + std::fabs(pred.h - tgt.box.h);
        double giou_term = 1.0 - giou(pred, tgt.box);
        EXPECT_NEAR(detection_cost(probs, pred, tgt), 2 * cls_term + 5 * l1_term + 2 * giou_term, 1e-12);
    }
}

TEST(Saliency, PeaksInTheCellContainingTheCenter) {
    Rng rng(47);
    for (int trial = 0; trial < 100; ++trial) {
        Box b = random_box(rng);
        SaliencyMap m = build_saliency(b, 8, 8);
        size_t arg = 0;
        for (size_t i = 1; i < m.values.size(); ++i)
            if (m.values[i] > m.values[arg]) arg = i;
        int ci = static_cast<int>(b.cy * 8), cj = static_cast<int>(b.cx * 8);
        EXPECT_EQ(static_cast<int>(arg), ci * 8 + cj);
    }
}

TEST(Saliency, SumsToOneOverValidCells) {
    Rng rng(48);
    for (int trial = 0; trial < 50; ++trial) {
        SaliencyMap m = build_saliency(random_box(rng), 8, 8);
        double s = 0;
        for (double v : m.values) {
            EXPECT_GE(v, 0.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Saliency, MaskedCellsAreZeroAndMassRenormalizes) {
    std::vector<uint8_t> mask(64, 1);
    for (int j = 0; j < 8; ++j) {
        mask[static_cast<size_t>(j)] = 0;  // top row padded
        mask[static_cast<size_t>(56 + j)] = 0;
    }
    SaliencyMap m = build_saliency(Box{0.5, 0.5, 0.6, 0.6}, 8, 8, mask);
    double s = 0;
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
            double v = m.values[static_cast<size_t>(i * 8 + j)];
            if (i == 0 || i == 7) {
                EXPECT_EQ(v, 0.0);
            }
            s += v;
        }
    EXPECT_NEAR(s, 1.0, 1e-9);
}

TEST(Saliency, AllCellsMaskedThrows) {
    std::vector<uint8_t> mask(64, 0);
    EXPECT_THROW(build_saliency(Box{0.5, 0.5, 0.5, 0.5}, 8, 8, mask), contract_error);
}

TEST(Saliency, ThreeSigmaMassAgainstDenseIntegration) {
    // Box spanning +-3 sigma per axis. On a 16x16 grid the in-box mass of the
    // built map should agree with a 10x-resolution integration of the same
    // Gaussian, both near the continuous two-axis three-sigma mass (~0.9946).
    Box b{0.5, 0.5, 0.5, 0.5};
    SaliencyMap m = build_saliency(b, 16, 16);
    auto in_box = [&](double x, double y) {
        return std::fabs(x - b.cx) <= b.w / 2 && std::fabs(y - b.cy) <= b.h / 2;
    };
    double coarse = 0;
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j)
            if (in_box((j + 0.5) / 16, (i + 0.5) / 16)) coarse += m.values[static_cast<size_t>(i * 16 + j)];
    double dense_in = 0, dense_all = 0;
    const int r = 160;
    double sx = b.w / 6, sy = b.h / 6;
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j) {
            double x = (j + 0.5) / r, y = (i + 0.5) / r;
            double dx = (x - b.cx) / sx, dy = (y - b.cy) / sy;
            double v = std::exp(-0.5 * (dx * dx + dy * dy));
            dense_all += v;
            if (in_box(x, y)) dense_in += v;
        }
    double dense = dense_in / dense_all;
    EXPECT_NEAR(coarse, dense, 0.01);
    EXPECT_NEAR(dense, 0.997, 0.01);
}

TEST(AssignPrototypes, EvenSplitWithoutOverrides) {
    PrototypeAssignment a = assign_prototypes(16, 4);
    for (int c = 0; c < 4; ++c) EXPECT_EQ(a.owned[static_cast<size_t>(c)].size(), 4u);
    for (int p = 0; p < 16; ++p) EXPECT_EQ(a.class_of[static_cast<size_t>(p)], p / 4);
}

TEST(AssignPrototypes, OverrideTakesExtrasThenRoundRobin) {
    PrototypeAssignment a = assign_prototypes(16, 4, {{0, 2}});
    EXPECT_EQ(a.owned[0].size(), 6u);
    EXPECT_EQ(a.owned[1].size(), 4u);
    EXPECT_EQ(a.owned[2].size(), 3u);
    EXPECT_EQ(a.owned[3].size(), 3u);
}

TEST(AssignPrototypes, IsAPartition) {
    Rng rng(49);
    for (int trial = 0; trial < 30; ++trial) {
        int classes = 2 + static_cast<int>(rng.below(5));
        int protos = classes + static_cast<int>(rng.below(20));
        PrototypeAssignment a = assign_prototypes(protos, classes);
        std::vector<int> seen(static_cast<size_t>(protos), 0);
        for (int c = 0; c < classes; ++c) {
            EXPECT_GE(a.owned[static_cast<size_t>(c)].size(), 1u);
            for (int p : a.owned[static_cast<size_t>(c)]) {
                seen[static_cast<size_t>(p)]++;
                EXPECT_EQ(a.class_of[static_cast<size_t>(p)], c);
            }
        }
        for (int v : seen) EXPECT_EQ(v, 1);
    }
}

TEST(AssignPrototypes, TooFewPrototypesThrows) {
    EXPECT_THROW(assign_prototypes(3, 4), config_error);
    EXPECT_THROW(assign_prototypes(8, 4, {{0, 6}}), config_error);
}

TEST(Alignment, FullMassOnSalientCells) {
    // One prototype owns class 0 and carries the whole distribution at every
    // location: inner product is exactly 1, loss -log(1 + eps).
    const int hw = 16, np = 4;
    std::vector<double> mp(hw * np, 0.0);
    PrototypeAssignment assign = assign_prototypes(np, 4);
    int owned = assign.owned[0][0];
    for (int loc = 0; loc < hw; ++loc) mp[static_cast<size_t>(loc * np + owned)] = 1.0;
    Tensor proto = Tensor::from_data({hw, np}, mp);
    SaliencyMap sal = build_saliency(Box{0.5, 0.5, 0.5, 0.5}, 4, 4);
    AlignmentResult r = alignment_loss({{0, sal}}, proto, assign);
    EXPECT_FALSE(r.no_detections);
    EXPECT_NEAR(r.value.item(), -std::log(1.001), 1e-9);
    EXPECT_NEAR(r.value.item(), -9.995e-4, 1e-6);
}

TEST(Alignment, ZeroMassHitsTheEpsilonCeiling) {
    const int hw = 16, np = 4;
    PrototypeAssignment assign = assign_prototypes(np, 4);
    // All mass on a prototype owned by a different class.
    std::vector<double> mp(hw * np, 0.0);
    int foreign = assign.owned[1][0];
    for (int loc = 0; loc < hw; ++loc) mp[static_cast<size_t>(loc * np + foreign)] = 1.0;
    Tensor proto = Tensor::from_data({hw, np}, mp);
    SaliencyMap sal = build_saliency(Box{0.5, 0.5, 0.5, 0.5}, 4, 4);
    AlignmentResult r = alignment_loss({{0, sal}}, proto, assign);
    EXPECT_NEAR(r.value.item(), -std::log(1e-3), 1e-12);
    EXPECT_NEAR(r.value.item(), 6.9078, 1e-4);
}

TEST(Alignment, MatchesExplicitLoopRecomputation) {
    Rng rng(50);
    const int h = 5, w = 6, hw = h * w, np = 7, classes = 3;
    PrototypeAssignment assign = assign_prototypes(np, classes);
    Tensor proto = Tensor::zeros({hw, np});
    // Random per-location distributions.
    for (int loc = 0; loc < hw; ++loc) {
        double s = 0;
        for (int p = 0; p < np; ++p) {
            double v = rng.uniform(0.0, 1.0);
            proto.data()[static_cast<size_t>(loc * np + p)] = v;
            s += v;
        }
        for (int p = 0; p < np; ++p) proto.data()[static_cast<size_t>(loc * np + p)] /= s;
    }
    std::vector<std::pair<int, SaliencyMap>> matched;
    for (int d = 0; d < 4; ++d)
        matched.emplace_back(static_cast<int>(rng.below(classes)), build_saliency(random_box(rng), h, w));
    AlignmentResult r = alignment_loss(matched, proto, assign);

    double want = 0;
    for (auto& [cls, sal] : matched) {
        double ip = 0;
        for (int loc = 0; loc < hw; ++loc)
            for (int p : assign.owned[static_cast<size_t>(cls)])
                ip += sal.values[static_cast<size_t>(loc)] * proto.data()[static_cast<size_t>(loc * np + p)];
        want += -std::log(1e-3 + ip);
    }
    want /= static_cast<double>(matched.size());
    EXPECT_LE(std::fabs(r.value.item() - want), 1e-12);
}

TEST(Alignment, StaysWithinTheoreticalRange) {
    Rng rng(51);
    const int hw = 9, np = 5;
    PrototypeAssignment assign = assign_prototypes(np, 2);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor proto = Tensor::zeros({hw, np});
        for (int loc = 0; loc < hw; ++loc) {
            double s = 0;
            for (int p = 0; p < np; ++p) {
                double v = rng.uniform(0.0, 1.0);
                proto.data()[static_cast<size_t>(loc * np + p)] = v;
                s += v;
            }
            for (int p = 0; p < np; ++p) proto.data()[static_cast<size_t>(loc * np + p)] /= s;
        }
        std::vector<std::pair<int, SaliencyMap>> matched{
            {static_cast<int>(rng.below(2)), build_saliency(random_box(rng), 3, 3)}};
        double v = alignment_loss(matched, proto, assign).value.item();
        EXPECT_GE(v, -std::log(1.0 + 1e-3) - 1e-12);
        EXPECT_LE(v, -std::log(1e-3) + 1e-12);
    }
}

TEST(Alignment, MovingMassTowardOwnedPrototypeLowersLoss) {
    const int hw = 4, np = 2;
    PrototypeAssignment assign = assign_prototypes(np, 2);
    SaliencyMap sal = build_saliency(Box{0.5, 0.5, 0.8, 0.8}, 2, 2);
    auto loss_with_mix = [&](double aligned_share) {
        Tensor proto = Tensor::zeros({hw, np});
        for (int loc = 0; loc < hw; ++loc) {
            proto.data()[static_cast<size_t>(loc * np + 0)] = aligned_share;
            proto.data()[static_cast<size_t>(loc * np + 1)] = 1.0 - aligned_share;
        }
        return alignment_loss({{0, sal}}, proto, assign).value.item();
    };
    EXPECT_LT(loss_with_mix(0.8), loss_with_mix(0.5));
    EXPECT_LT(loss_with_mix(0.5), loss_with_mix(0.2));
}

TEST(Alignment, EmptyMatchReturnsZeroWithFlag) {
    Tensor proto = Tensor::filled({4, 2}, 0.5);
    AlignmentResult r = alignment_loss({}, proto, assign_prototypes(2, 2));
    EXPECT_TRUE(r.no_detections);
    EXPECT_EQ(r.value.item(), 0.0);
}

TEST(Alignment, GradMatchesFiniteDifferences) {
    Rng rng(52);
    const int hw = 9, np = 4;
    PrototypeAssignment assign = assign_prototypes(np, 2);
    Tensor proto = Tensor::zeros({hw, np});
    for (double& v : proto.data()) v = rng.uniform(0.05, 1.0);
    std::vector<std::pair<int, SaliencyMap>> matched{{0, build_saliency(Box{0.4, 0.4, 0.5, 0.5}, 3, 3)},
                                                     {1, build_saliency(Box{0.7, 0.6, 0.3, 0.4}, 3, 3)}};
    proto.set_requires_grad(true);
    proto.zero_grad();
    {
        Tape tape;
        tape.backward(alignment_loss(matched, proto, assign).value);
    }
    proto.set_requires_grad(false);
    auto fd = oracles::fd_gradient(proto.data(),
                                   [&]() { return alignment_loss(matched, proto, assign).value.item(); });
    EXPECT_LE(oracles::max_scaled_err(proto.grad(), fd, 0.01), 1e-5);
}

TEST(AlignCoef, ScheduleEndpointsAndClamp) {
    EXPECT_DOUBLE_EQ(align_coef_at(0.0), 1.2);
    EXPECT_DOUBLE_EQ(align_coef_at(1.0), 0.7);
    EXPECT_DOUBLE_EQ(align_coef_at(0.5), 0.95);
    EXPECT_DOUBLE_EQ(align_coef_at(-1.0), 1.2);
    EXPECT_DOUBLE_EQ(align_coef_at(2.0), 0.7);
    EXPECT_DOUBLE_EQ(align_coef_at(0.5, 8.0, 8.0), 8.0);
    EXPECT_DOUBLE_EQ(align_coef_at(0.3, 0.0, 0.0), 0.0);
}

TEST(ImageLoss, TermsMatchIndependentRecomputation) {
    Rng rng(53);
    const int nq = 6, k = 4, hw = 16, np = 8, gh = 4, gw = 4;
    PrototypeAssignment assign = assign_prototypes(np, k);
    Tensor logits = Tensor::zeros({nq, k + 1});
    for (double& v : logits.data()) v = rng.uniform(-2.0, 2.0);
    Tensor boxes = Tensor::zeros({nq, 4});
    for (int qi = 0; qi < nq; ++qi) {
        Box b = random_box(rng);
        boxes.data()[static_cast<size_t>(qi * 4 + 0)] = b.cx;
        boxes.data()[static_cast<size_t>(qi * 4 + 1)] = b.cy;
        boxes.data()[static_cast<size_t>(qi * 4 + 2)] = b.w;
        boxes.data()[static_cast<size_t>(qi * 4 + 3)] = b.h;
    }
    Tensor proto = Tensor::zeros({hw, np});
    for (int loc = 0; loc < hw; ++loc) {
        double s = 0;
        for (int p = 0; p < np; ++p) {
            double v = rng.uniform(0.01, 1.0);
            proto.data()[static_cast<size_t>(loc * np + p)] = v;
            s += v;
        }
        for (int p = 0; p < np; ++p) proto.data()[static_cast<size_t>(loc * np + p)] /= s;
    }
    std::vector<Target> targets{{1, random_box(rng)}, {3, random_box(rng)}};
    LossCoeffs co;
    ImageLoss il = image_loss(logits, boxes, proto, gh, gw, targets, assign, co, 0.95);

    // CE recomputed with plain loops.
    std::vector<int> label(nq, k);
    std::vector<double> weight(nq, co.no_object_weight);
    for (auto& [qi, ti] : il.match.pairs) {
        label[static_cast<size_t>(qi)] = targets[static_cast<size_t>(ti)].cls;
        weight[static_cast<size_t>(qi)] = 1.0;
    }
    double ce = 0, wsum = 0;
    for (int qi = 0; qi < nq; ++qi) {
        double mx = -1e300, lse = 0;
        for (int c = 0; c <= k; ++c) mx = std::max(mx, logits.at({qi, c}));
        for (int c = 0; c <= k; ++c) lse += std::exp(logits.at({qi, c}) - mx);
        lse = mx + std::log(lse);
        ce += weight[static_cast<size_t>(qi)] * (lse - logits.at({qi, label[static_cast<size_t>(qi)]}));
        wsum += weight[static_cast<size_t>(qi)];
    }
    ce /= wsum;
    EXPECT_NEAR(il.ce.item(), ce, 1e-9);

    // Box terms recomputed per matched pair.
    double l1 = 0, gl = 0;
    for (auto& [qi, ti] : il.match.pairs) {
        Box p{boxes.at({qi, 0}), boxes.at({qi, 1}), boxes.at({qi, 2}), boxes.at({qi, 3})};
        const Box& t = targets[static_cast<size_t>(ti)].box;
        l1 += std::fabs(p.cx - t.cx) + std::fabs(p.cy - t.cy) + std::fabs(p.w - t.w) + std::fabs(p.h - t.h);
        gl += 1.0 - giou(p, t);
    }
    l1 /= static_cast<double>(il.match.pairs.size());
    gl /= static_cast<double>(il.match.pairs.size());
    EXPECT_NEAR(il.l1.item(), l1, 1e-9);
    EXPECT_NEAR(il.giou.item(), gl, 1e-9);

    // Alignment recomputed by loop.
    double align = 0;
    for (auto& [qi, ti] : il.match.pairs) {
        (void)qi;
        SaliencyMap sal = build_saliency(targets[static_cast<size_t>(ti)].box, gh, gw);
        double ip = 0;
        for (int loc = 0; loc < hw; ++loc)
            for (int p : assign.owned[static_cast<size_t>(targets[static_cast<size_t>(ti)].cls)])
                ip += sal.values[static_cast<size_t>(loc)] * proto.data()[static_cast<size_t>(loc * np + p)];
        align += -std::log(1e-3 + ip);
    }
    align /= static_cast<double>(il.match.pairs.size());
    EXPECT_NEAR(il.align.item(), align, 1e-12);

    EXPECT_NEAR(il.total.item(), co.ce * ce + co.l1 * l1 + co.giou * gl + 0.95 * align, 1e-9);
}

TEST(ImageLoss, NoTargetsTrainsOnlyNoObject) {
    Rng rng(54);
    const int nq = 5, k = 4;
    Tensor logits = Tensor::zeros({nq, k + 1});
    for (double& v : logits.data()) v = rng.uniform(-1.0, 1.0);
    Tensor boxes = Tensor::filled({nq, 4}, 0.5);
    Tensor proto = Tensor::filled({16, 8}, 1.0 / 8);
    ImageLoss il = image_loss(logits, boxes, proto, 4, 4, {}, assign_prototypes(8, k), LossCoeffs{}, 1.0);
    EXPECT_TRUE(il.match.pairs.empty());
    EXPECT_TRUE(il.no_detections);
    EXPECT_EQ(il.l1.item(), 0.0);
    EXPECT_EQ(il.giou.item(), 0.0);
    EXPECT_EQ(il.align.item(), 0.0);
    EXPECT_GT(il.ce.item(), 0.0);
}

TEST(ImageLoss, GradMatchesFiniteDifferences) {
    Rng rng(55);
    const int nq = 4, k = 2, hw = 9, np = 4, gh = 3, gw = 3;
    PrototypeAssignment assign = assign_prototypes(np, k);
    Tensor logits = Tensor::zeros({nq, k + 1});
    for (double& v : logits.data()) v = rng.uniform(-1.5, 1.5);
    Tensor boxes = Tensor::zeros({nq, 4});
    for (int qi = 0; qi < nq; ++qi) {
        Box b = random_box(rng, 0.25, 0.45);
        boxes.data()[static_cast<size_t>(qi * 4 + 0)] = b.cx;
        boxes.data()[static_cast<size_t>(qi * 4 + 1)] = b.cy;
        boxes.data()[static_cast<size_t>(qi * 4 + 2)] = b.w;
        boxes.data()[static_cast<size_t>(qi * 4 + 3)] = b.h;
    }
    Tensor proto = Tensor::zeros({hw, np});
    for (double& v : proto.data()) v = rng.uniform(0.05, 0.5);
    std::vector<Target> targets{{0, Box{0.3, 0.3, 0.4, 0.4}}, {1, Box{0.7, 0.65, 0.3, 0.35}}};
    LossCoeffs co;
    auto value = [&]() {
        return image_loss(logits, boxes, proto, gh, gw, targets, assign, co, 1.0).total.item();
    };
    for (Tensor* p : {&logits, &boxes, &proto}) {
        p->set_requires_grad(true);
        p->zero_grad();
        {
            Tape tape;
            tape.backward(image_loss(logits, boxes, proto, gh, gw, targets, assign, co, 1.0).total);
        }
        p->set_requires_grad(false);
        auto fd = oracles::fd_gradient(p->data(), value);
        EXPECT_LE(oracles::max_scaled_err(p->grad(), fd, 0.01), 1e-4);
    }
}
