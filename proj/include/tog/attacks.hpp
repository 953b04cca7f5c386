#pragma once

// Targeted objectness-gradient attacks. Every per-input attack runs the same
// projected sign-gradient iteration
//
//     x'_{t+1} = Proj_{x,eps}[ x'_t - alpha * sign(d L*(x'_t) / d x'_t) ]
//
// starting at x'_0 = x, and differs only in the target detections O* and the
// sign of L*:
//
//     vanishing    O* = {}                        L* =  L
//     fabrication  O* = benign detections         L* = -L
//     mislabel ML  O* = benign, 2nd-likely class  L* =  L
//     mislabel LL  O* = benign, least-likely      L* =  L
//
// The universal variant accumulates sign steps of the vanishing objective
// over a training set into a single input-agnostic perturbation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tog/detector.hpp"
#include "tog/error.hpp"
#include "tog/geometry.hpp"
#include "tog/io.hpp"
#include "tog/rng.hpp"
#include "tog/tensor.hpp"

namespace tog {

enum class AttackVariant { vanishing, fabrication, mislabel_ml, mislabel_ll, universal_apply };

inline constexpr AttackVariant kAllVariants[] = {AttackVariant::vanishing, AttackVariant::fabrication,
                                                 AttackVariant::mislabel_ml, AttackVariant::mislabel_ll,
                                                 AttackVariant::universal_apply};

inline std::string_view variant_name(AttackVariant v) {
    switch (v) {
        case AttackVariant::vanishing: return "vanishing";
        case AttackVariant::fabrication: return "fabrication";
        case AttackVariant::mislabel_ml: return "mislabel_ml";
        case AttackVariant::mislabel_ll: return "mislabel_ll";
        case AttackVariant::universal_apply: return "universal";
    }
    return "unknown";
}

inline std::string valid_variant_list() {
    std::string s;
    for (auto v : kAllVariants) {
        if (!s.empty()) s += ", ";
        s += variant_name(v);
    }
    return s;
}

inline AttackVariant parse_variant(std::string_view name) {
    for (auto v : kAllVariants) {
        if (variant_name(v) == name) return v;
    }
    throw ValidationError("unknown attack variant \"" + std::string(name) + "\"; valid variants: " +
                          valid_variant_list());
}

inline bool is_mislabel(AttackVariant v) {
    return v == AttackVariant::mislabel_ml || v == AttackVariant::mislabel_ll;
}

struct AttackConfig {
    AttackVariant variant = AttackVariant::vanishing;
    double epsilon = 0.031;
    double step_size = 0.008;
    int max_iterations = 10;
    // Only the L-inf norm is implemented.
    std::string norm = "linf";

    // Success predicate thresholds.
    double fabrication_factor = 3.0;
    int fabrication_min_count = 5;
    double mislabel_match_iou = 0.5;

    /// epsilon = 0 is accepted (it yields x' = x); otherwise 0 < alpha <= epsilon.
    void validate() const {
        std::vector<std::string> problems;
        if (!(epsilon >= 0.0 && epsilon < 1.0)) problems.push_back("epsilon must be in [0,1)");
        if (!(step_size >= 0.0)) problems.push_back("step_size must be non-negative");
        if (epsilon > 0.0 && step_size > epsilon) problems.push_back("step_size must not exceed epsilon");
        if (max_iterations < 1) problems.push_back("max_iterations must be >= 1");
        if (norm != "linf") problems.push_back("norm must be \"linf\"");
        if (!(fabrication_factor >= 1.0)) problems.push_back("fabrication_factor must be >= 1");
        if (!(mislabel_match_iou > 0.0 && mislabel_match_iou <= 1.0)) {
            problems.push_back("mislabel_match_iou must be in (0,1]");
        }
        if (!problems.empty()) {
            std::string msg = "invalid attack config:";
            for (const auto& p : problems) msg += "\n  " + p;
            throw ValidationError(msg);
        }
    }
};

/// Elementwise -1 / 0 / +1.
template <typename T>
BasicTensor<T> sign(const BasicTensor<T>& g) {
    BasicTensor<T> out = g;
    for (auto& v : out.data) v = static_cast<T>((v > T(0)) - (v < T(0)));
    return out;
}

/// Clamp into [x - eps, x + eps], then into [0, 1].
inline ImageTensor project_linf(const ImageTensor& candidate, const ImageTensor& origin, double epsilon) {
    require_same_shape(origin, candidate, "project_linf");
    ImageTensor out = candidate;
    const float eps = static_cast<float>(epsilon);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const float lo = origin.data[i] - eps, hi = origin.data[i] + eps;
        out.data[i] = std::clamp(std::clamp(out.data[i], lo, hi), 0.0f, 1.0f);
    }
    return out;
}

inline double linf_distance(const ImageTensor& a, const ImageTensor& b) {
    return static_cast<double>(max_abs_diff(a, b));
}

/// O* for one attack, with its slot assignment and the sign applied to L.
struct DetectionTarget {
    std::vector<GroundTruthObject> target_objects;
    Assignment assignment;
    int loss_sign = 1;
    std::vector<DetectedObject> benign;  // detections on x; target_objects[i] derives from benign[i]
};

namespace detail {

/// Detected boxes may poke out of the image; targets must not.
inline Box clip_to_image(const Box& b) {
    const double l = std::clamp(b.left(), 0.0, 1.0), r = std::clamp(b.right(), 0.0, 1.0);
    const double t = std::clamp(b.top(), 0.0, 1.0), btm = std::clamp(b.bottom(), 0.0, 1.0);
    Box out{0.5 * (l + r), 0.5 * (t + btm), r - l, btm - t};
    constexpr double kMin = 1e-6;
    if (out.bw < kMin) out.bw = kMin;
    if (out.bh < kMin) out.bh = kMin;
    return out;
}

}  // namespace detail

/// Second most likely class (1-based). Classes tied with the maximum are
/// skipped; among the rest the lowest index wins ties.
inline int most_likely_target(const std::vector<double>& probs, int detected_class) {
    const double top = *std::max_element(probs.begin(), probs.end());
    int best = -1;
    for (std::size_t c = 0; c < probs.size(); ++c) {
        if (probs[c] == top) continue;
        if (best < 0 || probs[c] > probs[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    }
    if (best >= 0) return best + 1;
    return detected_class == 1 ? 2 : 1;  // all classes tied
}

/// Least likely class (1-based), lowest index on ties.
inline int least_likely_target(const std::vector<double>& probs, int detected_class) {
    const int c = static_cast<int>(std::min_element(probs.begin(), probs.end()) - probs.begin()) + 1;
    if (c != detected_class) return c;
    return detected_class == 1 ? 2 : 1;  // all classes tied
}

/// Builds O* from the benign detections (already computed from `benign_head`).
template <typename T>
DetectionTarget build_target_from(const DetectorConfig& config, const BasicTensor<T>& benign_head,
                                  std::vector<DetectedObject> benign, AttackVariant variant) {
    DetectionTarget target;
    target.benign = std::move(benign);
    switch (variant) {
        case AttackVariant::vanishing:
        case AttackVariant::universal_apply:
            target.assignment = empty_assignment(config);
            target.loss_sign = 1;
            return target;
        default:
            break;
    }
    if (target.benign.empty()) {
        throw EmptyDetectionsError(std::string(variant_name(variant)) +
                                   " attack needs at least one benign detection; none found");
    }
    const auto candidates = decode(benign_head, config);
    for (const auto& d : target.benign) {
        GroundTruthObject o;
        o.box = detail::clip_to_image(d.box);
        o.class_id = d.class_id;
        const auto& probs = candidates[static_cast<std::size_t>(d.slot)].class_probs;
        if (variant == AttackVariant::mislabel_ml) o.class_id = most_likely_target(probs, d.class_id);
        if (variant == AttackVariant::mislabel_ll) o.class_id = least_likely_target(probs, d.class_id);
        target.target_objects.push_back(o);
    }
    target.assignment = assign_targets(target.target_objects, config);
    target.loss_sign = variant == AttackVariant::fabrication ? -1 : 1;
    return target;
}

inline DetectionTarget build_target(const Detector& detector, const ImageTensor& image, AttackVariant variant) {
    const Tensor head = raw_head(detector, image);
    return build_target_from(detector.config, head, detect_from_head(head, detector.config), variant);
}

/// Termination predicate checked after every iteration.
///   vanishing / universal: no detections remain.
///   fabrication: at least factor x benign count and at least min_count.
///   mislabeling: >= 1 adversarial box matches a benign box (IoU >= threshold)
///                and every such match carries that box's target class.
inline bool attack_success(const std::vector<DetectedObject>& benign, const std::vector<DetectedObject>& adversarial,
                           const DetectionTarget& target, AttackVariant variant, const AttackConfig& config) {
    switch (variant) {
        case AttackVariant::vanishing:
        case AttackVariant::universal_apply:
            return adversarial.empty();
        case AttackVariant::fabrication: {
            const double n = static_cast<double>(adversarial.size());
            return n >= config.fabrication_factor * static_cast<double>(benign.size()) &&
                   static_cast<int>(adversarial.size()) >= config.fabrication_min_count;
        }
        case AttackVariant::mislabel_ml:
        case AttackVariant::mislabel_ll: {
            int matches = 0;
            for (const auto& a : adversarial) {
                double best = 0.0;
                int best_index = -1;
                for (std::size_t i = 0; i < benign.size(); ++i) {
                    const double v = iou(a.box, benign[i].box);
                    if (v >= config.mislabel_match_iou && v > best) {
                        best = v;
                        best_index = static_cast<int>(i);
                    }
                }
                if (best_index < 0) continue;
                ++matches;
                if (a.class_id != target.target_objects[static_cast<std::size_t>(best_index)].class_id) return false;
            }
            return matches >= 1;
        }
    }
    return false;
}

struct AttackLogEntry {
    int iteration = 0;  // number of updates applied so far
    double loss = 0.0;  // L (unsigned) at x'_t
    int detections = 0;
};

struct AttackResult {
    ImageTensor adversarial;
    DetectionTarget target;
    std::vector<DetectedObject> final_detections;
    std::vector<AttackLogEntry> log;
    int iterations = 0;
    bool success = false;
    bool stalled = false;
};

/// Per-input attack. Starts at x'_0 = x, checks the success predicate on a
/// fresh detection of every iterate, and stops on success or after
/// max_iterations updates. Throws EmptyDetectionsError for fabrication and
/// mislabeling when x has no detections.
inline AttackResult tog_attack(const Detector& detector, const ImageTensor& image, const AttackConfig& config) {
    config.validate();
    if (config.variant == AttackVariant::universal_apply) {
        throw ValidationError("tog_attack: the universal variant is applied with apply_universal");
    }
    const DetectorConfig& dc = detector.config;
    AttackResult result;
    result.adversarial = image;

    auto pass = forward(detector, image);
    auto detections = detect_from_head(pass.raw_head, dc);
    result.target = build_target_from(dc, pass.raw_head, detections, config.variant);

    for (int t = 0;; ++t) {
        Tensor grad_head;
        const auto loss = detection_loss(pass.raw_head, result.target.assignment, dc, &grad_head,
                                         static_cast<double>(result.target.loss_sign));
        result.log.push_back({t, loss.total, static_cast<int>(detections.size())});
        result.iterations = t;
        if (attack_success(result.target.benign, detections, result.target, config.variant, config)) {
            result.success = true;
            break;
        }
        if (t == config.max_iterations) break;

        const Tensor grad = backward(detector, pass, grad_head, true, false).wrt_image;
        if (!grad.all_finite()) throw NonFiniteError("tog_attack: non-finite input gradient");
        if (t == 0 && max_abs(grad.values()) == 0.0f) {
            result.stalled = true;
            break;
        }
        const float alpha = static_cast<float>(config.step_size);
        Tensor next = result.adversarial;
        for (std::size_t i = 0; i < next.size(); ++i) {
            const float g = grad.data[i];
            next.data[i] -= alpha * static_cast<float>((g > 0.0f) - (g < 0.0f));
        }
        result.adversarial = project_linf(next, image, config.epsilon);
        pass = forward(detector, result.adversarial);
        detections = detect_from_head(pass.raw_head, dc);
    }
    result.final_detections = std::move(detections);
    return result;
}

// ---------------------------------------------------------------------------
// Universal perturbation

struct Perturbation {
    Tensor delta;  // image-shaped
    double epsilon = 0.0;

    friend bool operator==(const Perturbation&, const Perturbation&) = default;
};

struct UniversalConfig {
    double epsilon = 0.031;
    double step_size = 0.002;
    int epochs = 20;
    double kappa = 95.0;  // percent of benign detections that must vanish
    std::size_t training_set_size = 512;
    std::uint64_t seed = 7;

    void validate() const {
        std::vector<std::string> problems;
        if (!(epsilon >= 0.0 && epsilon < 1.0)) problems.push_back("epsilon must be in [0,1)");
        if (!(step_size >= 0.0)) problems.push_back("step_size must be non-negative");
        if (epochs < 1) problems.push_back("epochs must be >= 1");
        if (!(kappa > 0.0 && kappa <= 100.0)) problems.push_back("kappa must be in (0,100]");
        if (training_set_size < 1) problems.push_back("training_set_size must be >= 1");
        if (!problems.empty()) {
            std::string msg = "invalid universal config:";
            for (const auto& p : problems) msg += "\n  " + p;
            throw ValidationError(msg);
        }
    }
};

/// clamp(x + eta, 0, 1). One elementwise pass, no detector evaluation.
inline ImageTensor apply_universal(const ImageTensor& image, const Perturbation& eta) {
    require_same_shape(image, eta.delta, "apply_universal");
    ImageTensor out = image;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = std::clamp(out.data[i] + eta.delta.data[i], 0.0f, 1.0f);
    return out;
}

/// 1 - (detections left on perturbed images / benign detections), clamped to [0,1].
inline double vanish_rate(std::size_t benign_count, std::size_t adversarial_count) {
    if (benign_count == 0) return 1.0;
    return std::clamp(1.0 - static_cast<double>(adversarial_count) / static_cast<double>(benign_count), 0.0, 1.0);
}

struct UniversalResult {
    Perturbation eta;
    std::vector<double> epoch_vanish_rate;  // measured on the training set after each epoch
    bool reached_kappa = false;
};

using UniversalCallback = std::function<void(int epoch, double vanish_rate)>;

/// Trains eta from zero: for every training image (order reshuffled each epoch)
/// take one sign step of the vanishing objective at clamp(x + eta) and clip eta
/// back into [-eps, eps]. Stops once kappa percent of the benign detections on
/// the training set vanish, or after `epochs` epochs.
inline UniversalResult train_universal(const Detector& detector, std::span<const ImageTensor> dataset,
                                       const UniversalConfig& config, const UniversalCallback& on_epoch = {}) {
    config.validate();
    if (dataset.empty()) throw ValidationError("train_universal: dataset must be non-empty");
    const DetectorConfig& dc = detector.config;
    UniversalResult result;
    result.eta = {Tensor(dc.image_shape()), config.epsilon};
    for (const auto& x : dataset) require_image_shape(x, dc);

    std::size_t benign_total = 0;
    for (const auto& x : dataset) benign_total += detect(detector, x).size();

    const Assignment vanish = empty_assignment(dc);
    const float eps = static_cast<float>(config.epsilon);
    const float alpha = static_cast<float>(config.step_size);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, "universal/shuffle"));

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t idx : order) {
            const ImageTensor perturbed = apply_universal(dataset[idx], result.eta);
            const Tensor grad = loss_input_gradient(detector, perturbed, vanish);
            auto& delta = result.eta.delta.data;
            for (std::size_t i = 0; i < delta.size(); ++i) {
                const float g = grad.data[i];
                const float step = -alpha * static_cast<float>((g > 0.0f) - (g < 0.0f));
                delta[i] = std::clamp(delta[i] + step, -eps, eps);
            }
        }
        std::size_t remaining = 0;
        for (const auto& x : dataset) remaining += detect(detector, apply_universal(x, result.eta)).size();
        const double rate = vanish_rate(benign_total, remaining);
        result.epoch_vanish_rate.push_back(rate);
        if (on_epoch) on_epoch(epoch + 1, rate);
        if (rate * 100.0 >= config.kappa) {
            result.reached_kappa = true;
            break;
        }
    }
    return result;
}

// TOGP: "TOGP", u16 version, f64 epsilon, u32 rank, u32 dims, f32 values (LE).

inline constexpr std::uint16_t kPerturbationVersion = 1;

inline Bytes serialize_perturbation(const Perturbation& p) {
    ByteWriter w;
    w.magic("TOGP");
    w.uint<std::uint16_t>(kPerturbationVersion);
    w.f64(p.epsilon);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(p.delta.rank()));
    for (int d : p.delta.shape) w.uint<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float v : p.delta.data) w.f32(v);
    return w.take();
}

inline Perturbation deserialize_perturbation(const Bytes& bytes) {
    ByteReader r(bytes);
    r.expect_magic("TOGP");
    const auto version_at = r.offset();
    const auto version = r.uint<std::uint16_t>("version");
    if (version != kPerturbationVersion) {
        throw ParseError("unsupported perturbation version " + std::to_string(version), version_at);
    }
    Perturbation p;
    p.epsilon = r.f64("epsilon");
    const auto rank_at = r.offset();
    const auto rank = r.uint<std::uint32_t>("rank");
    if (rank > 8) throw ParseError("implausible rank " + std::to_string(rank), rank_at);
    std::vector<int> shape;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const auto at = r.offset();
        const auto d = r.uint<std::uint32_t>("dimension");
        if (d > (1u << 16)) throw ParseError("implausible dimension " + std::to_string(d), at);
        shape.push_back(static_cast<int>(d));
        n *= d;
    }
    r.need(4 * n, "values");
    std::vector<float> values(n);
    for (auto& v : values) v = r.f32("value");
    if (!r.at_end()) throw ParseError("trailing bytes after values", r.offset());
    p.delta = Tensor(std::move(shape), std::move(values));
    return p;
}

inline void save_perturbation(const std::filesystem::path& path, const Perturbation& p) {
    write_file_atomic(path, serialize_perturbation(p));
}

inline Perturbation load_perturbation(const std::filesystem::path& path) {
    return deserialize_perturbation(read_file(path));
}

}  // namespace tog
