#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <numeric>
#include <vector>

#include "tog/detector.hpp"

namespace oracle {

// Reduced-size detector: 8x8 input, 2x2 grid, two narrow blocks.
inline tog::DetectorConfig small_config(tog::Rng& rng) {
    tog::DetectorConfig c;
    c.input_height = c.input_width = 8;
    c.input_channels = rng.uniform_int(1, 3);
    c.channel_widths = {rng.uniform_int(2, 5), rng.uniform_int(2, 5)};
    c.grid = 2;
    c.num_classes = rng.uniform_int(2, 3);
    c.anchors.clear();
    const int B = rng.uniform_int(1, 3);
    for (int b = 0; b < B; ++b) c.anchors.push_back({rng.uniform(0.2, 0.7), rng.uniform(0.2, 0.7)});
    c.seed = rng.next_u64();
    return c;
}

inline std::vector<tog::GroundTruthObject> random_objects(const tog::DetectorConfig& c, tog::Rng& rng, int n) {
    std::vector<tog::GroundTruthObject> out;
    for (int i = 0; i < n; ++i) {
        const double w = rng.uniform(0.1, 0.5), h = rng.uniform(0.1, 0.5);
        out.push_back({{rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h},
                       rng.uniform_int(1, c.num_classes)});
    }
    return out;
}

// Greedy NMS output is the unique subset S with: i in S iff no j in S ranked
// ahead of i has the same class and IoU above the threshold. Search all 2^n.
// `solutions` receives how many subsets satisfy that (should be exactly 1).
inline std::vector<int> nms(const std::vector<tog::DetectedObject>& dets, double thr, int& solutions) {
    const int n = static_cast<int>(dets.size());
    std::vector<int> rank(n);
    std::iota(rank.begin(), rank.end(), 0);
    std::sort(rank.begin(), rank.end(), [&](int a, int b) {
        if (dets[a].confidence != dets[b].confidence) return dets[a].confidence > dets[b].confidence;
        return dets[a].slot < dets[b].slot;
    });
    std::vector<int> pos(n);
    for (int r = 0; r < n; ++r) pos[rank[r]] = r;
    std::vector<int> found;
    solutions = 0;
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
        bool ok = true;
        for (int i = 0; i < n && ok; ++i) {
            bool suppressed = false;
            for (int j = 0; j < n; ++j) {
                if ((mask >> j & 1) && pos[j] < pos[i] && dets[j].class_id == dets[i].class_id &&
                    tog::iou(dets[j].box, dets[i].box) > thr) {
                    suppressed = true;
                }
            }
            if (static_cast<bool>(mask >> i & 1) == suppressed) ok = false;
        }
        if (!ok) continue;
        ++solutions;
        found.clear();
        for (int r = 0; r < n; ++r) {
            if (mask >> rank[r] & 1) found.push_back(rank[r]);
        }
    }
    return found;
}

// Random candidate set on a coarse lattice so ties and heavy overlap are common.
inline std::vector<tog::DetectedObject> random_candidates(tog::Rng& rng, int n) {
    std::vector<tog::DetectedObject> d;
    for (int i = 0; i < n; ++i) {
        const double conf = 0.5 + 0.1 * rng.uniform_int(0, 4);
        d.push_back({{0.3 + 0.05 * rng.uniform_int(0, 6), 0.3 + 0.05 * rng.uniform_int(0, 6),
                      0.1 + 0.05 * rng.uniform_int(0, 4), 0.1 + 0.05 * rng.uniform_int(0, 4)},
                     rng.uniform_int(1, 2),
                     conf,
                     i});
    }
    return d;
}

// Interpolated precision at each of the N recall levels i/N is the best
// precision over all cutoffs reaching at least that recall; AP is their mean.
inline double average_precision(const std::vector<bool>& tp, std::size_t n_gt) {
    double sum = 0.0;
    for (std::size_t level = 1; level <= n_gt; ++level) {
        double best = 0.0;
        for (std::size_t cut = 1; cut <= tp.size(); ++cut) {
            std::size_t hits = 0;
            for (std::size_t k = 0; k < cut; ++k) hits += tp[k];
            if (hits >= level) best = std::max(best, static_cast<double>(hits) / cut);
        }
        sum += best;
    }
    return sum / static_cast<double>(n_gt);
}

// Worst relative error of the full-chain input gradient against central
// differences on one random reduced-size config, in double precision.
inline tog::GradCheckResult input_gradient_check(tog::Rng& rng, bool maximize) {
    const tog::DetectorConfig c = small_config(rng);
    auto weights = tog::build_detector(c).cast<double>();
    for (auto& l : weights.layers) {
        for (auto& b : l.bias) b = rng.uniform(-0.3, 0.3);
    }
    tog::BasicTensor<double> image(c.image_shape());
    for (auto& v : image.data) v = rng.uniform();
    const auto a = tog::assign_targets(random_objects(c, rng, rng.uniform_int(0, 2)), c);
    const double sign = maximize ? -1.0 : 1.0;
    const auto g = tog::loss_and_input_gradient(weights, image, a, sign);
    const std::function<double(const tog::BasicTensor<double>&)> f = [&](const tog::BasicTensor<double>& x) {
        return sign * tog::detection_loss(tog::raw_head(weights, x), a, c).total;
    };
    return tog::grad_check(f, g.gradient, image, 1e-6);
}

}  // namespace oracle
