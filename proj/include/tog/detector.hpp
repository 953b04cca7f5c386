#pragma once

// Single-scale anchor-based detector: a stack of stride-2 conv blocks and a
// 1x1 head producing, per grid cell and anchor, (tx, ty, tw, th, t_obj,
// t_c1..t_cK). Includes candidate decoding, confidence filtering, class-aware
// NMS, the training loss and its gradients with respect to both the weights
// and the input image.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tog/error.hpp"
#include "tog/geometry.hpp"
#include "tog/io.hpp"
#include "tog/numerics.hpp"
#include "tog/rng.hpp"
#include "tog/tensor.hpp"

namespace tog {

struct Anchor {
    double w = 0.0;
    double h = 0.0;
    friend bool operator==(const Anchor&, const Anchor&) = default;
};

struct DetectorConfig {
    int input_height = 64;
    int input_width = 64;
    int input_channels = 3;
    int grid = 4;
    std::vector<Anchor> anchors{{0.25, 0.25}, {0.55, 0.55}};
    int num_classes = 3;
    std::vector<int> channel_widths{16, 32, 64, 64};
    double leaky_slope = 0.1;
    double lambda_noobj = 0.5;
    double lambda_loc = 5.0;
    double confidence_threshold = 0.5;
    double nms_iou_threshold = 0.45;
    std::uint64_t seed = 7;

    int num_anchors() const { return static_cast<int>(anchors.size()); }
    int values_per_anchor() const { return 5 + num_classes; }
    int head_channels() const { return num_anchors() * values_per_anchor(); }
    int slots() const { return grid * grid * num_anchors(); }

    std::vector<int> image_shape() const { return {input_height, input_width, input_channels}; }
    std::vector<int> head_shape() const { return {grid, grid, head_channels()}; }

    /// Collects every violated field into one diagnostic.
    void validate() const {
        std::vector<std::string> problems;
        if (input_height <= 0 || input_width <= 0) problems.push_back("input_size must be positive");
        if (input_channels <= 0) problems.push_back("input_channels must be positive");
        if (grid <= 0) problems.push_back("grid must be positive");
        if (anchors.empty()) problems.push_back("anchors must be non-empty");
        for (std::size_t i = 0; i < anchors.size(); ++i) {
            if (!(anchors[i].w > 0.0 && anchors[i].h > 0.0)) {
                problems.push_back("anchors[" + std::to_string(i) + "] must have positive dims");
            }
        }
        if (num_classes < 2) problems.push_back("num_classes must be >= 2");
        if (channel_widths.empty()) problems.push_back("channel_widths must be non-empty");
        for (std::size_t i = 0; i < channel_widths.size(); ++i) {
            if (channel_widths[i] <= 0) problems.push_back("channel_widths[" + std::to_string(i) + "] must be positive");
        }
        if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) problems.push_back("leaky_slope must be in (0,1)");
        if (!(lambda_noobj >= 0.0)) problems.push_back("lambda_noobj must be non-negative");
        if (!(lambda_loc >= 0.0)) problems.push_back("lambda_loc must be non-negative");
        if (!(confidence_threshold > 0.0 && confidence_threshold < 1.0)) {
            problems.push_back("confidence_threshold must be in (0,1)");
        }
        if (!(nms_iou_threshold > 0.0 && nms_iou_threshold < 1.0)) {
            problems.push_back("nms_iou_threshold must be in (0,1)");
        }
        if (problems.empty()) {
            int h = input_height, w = input_width;
            for (std::size_t i = 0; i < channel_widths.size(); ++i) {
                h = (h - 1) / 2 + 1;
                w = (w - 1) / 2 + 1;
            }
            if (h != grid || w != grid) {
                problems.push_back("grid " + std::to_string(grid) + " does not match backbone output " +
                                   std::to_string(h) + "x" + std::to_string(w));
            }
        }
        if (!problems.empty()) {
            std::string msg = "invalid detector config:";
            for (const auto& p : problems) msg += "\n  " + p;
            throw ValidationError(msg);
        }
    }

    friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

template <typename T>
struct DetectorWeights {
    DetectorConfig config;
    std::vector<BasicConvLayer<T>> layers;  // backbone blocks followed by the head

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.kernels.size() + l.bias.size();
        return n;
    }

    template <typename U>
    DetectorWeights<U> cast() const {
        DetectorWeights<U> out;
        out.config = config;
        for (const auto& l : layers) out.layers.push_back(l.template cast<U>());
        return out;
    }

    friend bool operator==(const DetectorWeights&, const DetectorWeights&) = default;
};

using Detector = DetectorWeights<float>;

namespace detail {

struct LayerShape {
    int in_ch, out_ch, kernel, stride, padding;
    Activation activation;
};

inline std::vector<LayerShape> layer_shapes(const DetectorConfig& c) {
    std::vector<LayerShape> shapes;
    int in = c.input_channels;
    for (int w : c.channel_widths) {
        shapes.push_back({in, w, 3, 2, 1, Activation::leaky_relu});
        in = w;
    }
    shapes.push_back({in, c.head_channels(), 1, 1, 0, Activation::linear});
    return shapes;
}

}  // namespace detail

/// Fresh weights, drawn deterministically from config.seed. Hidden layers use
/// U(-sqrt(6/fan_in), +sqrt(6/fan_in)); the head uses U(-sqrt(1/fan_in), ..).
/// Biases are zero except objectness, which starts at logit(0.01).
inline Detector build_detector(const DetectorConfig& config) {
    config.validate();
    Rng rng(derive_seed(config.seed, "detector/init"));
    Detector det;
    det.config = config;
    const auto shapes = detail::layer_shapes(config);
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        const auto& s = shapes[i];
        ConvLayer layer;
        layer.kernels = Tensor({s.out_ch, s.in_ch, s.kernel, s.kernel});
        layer.bias.assign(static_cast<std::size_t>(s.out_ch), 0.0f);
        layer.stride = s.stride;
        layer.padding = s.padding;
        layer.activation = s.activation;
        layer.slope = static_cast<float>(config.leaky_slope);
        const double fan_in = static_cast<double>(s.in_ch) * s.kernel * s.kernel;
        const bool head = i + 1 == shapes.size();
        const double bound = head ? std::sqrt(1.0 / fan_in) : std::sqrt(6.0 / fan_in);
        for (auto& v : layer.kernels.data) v = static_cast<float>(rng.uniform(-bound, bound));
        if (head) {
            // objectness starts at a small prior so early steps are not spent silencing every slot
            const int per_anchor = config.values_per_anchor();
            for (int a = 0; a < config.num_anchors(); ++a) {
                layer.bias[static_cast<std::size_t>(a * per_anchor + 4)] = static_cast<float>(std::log(0.01 / 0.99));
            }
        }
        det.layers.push_back(std::move(layer));
    }
    return det;
}

template <typename T>
struct ForwardPass {
    std::vector<ConvCache<T>> caches;
    BasicTensor<T> raw_head;  // G x G x B*(5+K)
};

template <typename T>
void require_image_shape(const BasicTensor<T>& image, const DetectorConfig& config) {
    if (image.shape != config.image_shape()) {
        throw ShapeError("detector: expected image shape " + dims_to_string(config.image_shape()) + ", got " +
                         dims_to_string(image.shape));
    }
}

template <typename T>
ForwardPass<T> forward(const DetectorWeights<T>& weights, const BasicTensor<T>& image) {
    require_image_shape(image, weights.config);
    ForwardPass<T> pass;
    pass.caches.resize(weights.layers.size());
    BasicTensor<T> x = hwc_to_chw(image);
    for (std::size_t i = 0; i < weights.layers.size(); ++i) {
        x = conv2d_forward(x, weights.layers[i], &pass.caches[i]);
    }
    pass.raw_head = chw_to_hwc(x);
    return pass;
}

template <typename T>
BasicTensor<T> raw_head(const DetectorWeights<T>& weights, const BasicTensor<T>& image) {
    require_image_shape(image, weights.config);
    BasicTensor<T> x = hwc_to_chw(image);
    for (const auto& layer : weights.layers) x = conv2d_forward(x, layer);
    return chw_to_hwc(x);
}

template <typename T>
struct BackwardResult {
    BasicTensor<T> wrt_image;                   // HWC, empty unless requested
    std::vector<BasicGradientPair<T>> layers;  // empty unless requested
};

/// Reverse sweep through the conv stack given d(loss)/d(raw_head).
template <typename T>
BackwardResult<T> backward(const DetectorWeights<T>& weights, const ForwardPass<T>& pass,
                           const BasicTensor<T>& grad_head, bool need_image, bool need_weights) {
    require_same_shape(pass.raw_head, grad_head, "detector backward");
    BackwardResult<T> result;
    if (need_weights) result.layers.resize(weights.layers.size());
    BasicTensor<T> upstream = hwc_to_chw(grad_head);
    for (std::size_t i = weights.layers.size(); i-- > 0;) {
        const bool need_input = i > 0 || need_image;
        auto g = conv2d_backward_cached(pass.caches[i], weights.layers[i], upstream, need_input, need_weights);
        if (need_input) upstream = std::move(g.wrt_input);
        if (need_weights) {
            g.wrt_input = {};
            result.layers[i] = std::move(g);
        }
    }
    if (need_image) result.wrt_image = chw_to_hwc(upstream);
    return result;
}

/// One of the S raw detector slots after decoding.
struct Candidate {
    Box box;
    double objectness = 0.0;
    std::vector<double> class_probs;
    int slot = 0;  // ((cy * G) + cx) * B + anchor, 0-based

    /// max_c objectness * p_c, with the arg-max class (1-based, lowest index on ties).
    std::pair<double, int> best_score() const {
        double best = -1.0;
        int cls = 1;
        for (std::size_t c = 0; c < class_probs.size(); ++c) {
            const double s = objectness * class_probs[c];
            if (s > best) {
                best = s;
                cls = static_cast<int>(c) + 1;
            }
        }
        return {best, cls};
    }
};

template <typename T>
void require_head_shape(const BasicTensor<T>& head, const DetectorConfig& config) {
    if (head.shape != config.head_shape()) {
        throw ShapeError("detector head: expected shape " + dims_to_string(config.head_shape()) + ", got " +
                         dims_to_string(head.shape));
    }
}

/// bx = (cx + sig(tx)) / G, by = (cy + sig(ty)) / G, bw = aw * exp(tw),
/// bh = ah * exp(th), C = sig(t_obj), p_c = sig(t_c).
template <typename T>
std::vector<Candidate> decode(const BasicTensor<T>& head, const DetectorConfig& config) {
    require_head_shape(head, config);
    const int G = config.grid, B = config.num_anchors(), V = config.values_per_anchor();
    std::vector<Candidate> out;
    out.reserve(static_cast<std::size_t>(config.slots()));
    for (int cy = 0; cy < G; ++cy) {
        for (int cx = 0; cx < G; ++cx) {
            for (int b = 0; b < B; ++b) {
                const int base = b * V;
                auto t = [&](int j) { return static_cast<double>(head.at(cy, cx, base + j)); };
                Candidate c;
                c.slot = (cy * G + cx) * B + b;
                c.box.bx = (cx + sigmoid(t(0))) / G;
                c.box.by = (cy + sigmoid(t(1))) / G;
                c.box.bw = config.anchors[b].w * std::exp(t(2));
                c.box.bh = config.anchors[b].h * std::exp(t(3));
                c.objectness = sigmoid(t(4));
                c.class_probs.resize(static_cast<std::size_t>(config.num_classes));
                for (int k = 0; k < config.num_classes; ++k) c.class_probs[k] = sigmoid(t(5 + k));
                out.push_back(std::move(c));
            }
        }
    }
    return out;
}

namespace detail {

inline bool detection_order(const DetectedObject& a, const DetectedObject& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.slot < b.slot;
}

}  // namespace detail

/// Greedy class-aware NMS. Visits boxes by descending confidence and drops any
/// box whose IoU with an already kept box of the same class exceeds the threshold.
inline std::vector<DetectedObject> non_max_suppression(std::vector<DetectedObject> dets, double iou_threshold) {
    std::stable_sort(dets.begin(), dets.end(), detail::detection_order);
    std::vector<DetectedObject> kept;
    for (const auto& d : dets) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const DetectedObject& k) {
            return k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold;
        });
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

inline std::vector<DetectedObject> filter_candidates(const std::vector<Candidate>& candidates,
                                                     const DetectorConfig& config) {
    std::vector<DetectedObject> dets;
    for (const auto& c : candidates) {
        const auto [score, cls] = c.best_score();
        if (score < config.confidence_threshold) continue;
        const Box& b = c.box;
        if (!(std::isfinite(b.bw) && std::isfinite(b.bh) && b.bw > 0.0 && b.bh > 0.0)) continue;
        dets.push_back({c.box, cls, score, c.slot});
    }
    return non_max_suppression(std::move(dets), config.nms_iou_threshold);
}

template <typename T>
std::vector<DetectedObject> detect_from_head(const BasicTensor<T>& head, const DetectorConfig& config) {
    return filter_candidates(decode(head, config), config);
}

/// Final detections sorted by descending confidence.
template <typename T>
std::vector<DetectedObject> detect(const DetectorWeights<T>& weights, const BasicTensor<T>& image) {
    return detect_from_head(raw_head(weights, image), weights.config);
}

/// Which slots are responsible for an object, and what they should predict.
struct Assignment {
    std::vector<std::uint8_t> mask;           // one entry per slot
    std::vector<GroundTruthObject> targets;   // meaningful where mask == 1
    int dropped = 0;                          // objects lost to slot collisions
    std::vector<std::uint8_t> ignore;         // optional; unassigned slots here skip the no-object term

    int assigned_count() const { return static_cast<int>(std::count(mask.begin(), mask.end(), 1)); }
};

inline Assignment empty_assignment(const DetectorConfig& config) {
    Assignment a;
    a.mask.assign(static_cast<std::size_t>(config.slots()), 0);
    a.targets.resize(static_cast<std::size_t>(config.slots()));
    return a;
}

inline int best_anchor(const Box& box, const DetectorConfig& config) {
    int best = 0;
    double best_iou = -1.0;
    for (int b = 0; b < config.num_anchors(); ++b) {
        const double v = centered_iou(box.bw, box.bh, config.anchors[b].w, config.anchors[b].h);
        if (v > best_iou) {
            best_iou = v;
            best = b;
        }
    }
    return best;
}

/// Each object goes to cell (floor(bx*G), floor(by*G)) and the anchor of
/// highest centered IoU. A later object landing on an occupied slot is dropped.
inline Assignment assign_targets(const std::vector<GroundTruthObject>& objects, const DetectorConfig& config) {
    Assignment a = empty_assignment(config);
    const int G = config.grid;
    for (std::size_t i = 0; i < objects.size(); ++i) {
        const auto& o = objects[i];
        validate_ground_truth(o, config.num_classes, i);
        const int cx = std::clamp(static_cast<int>(std::floor(o.box.bx * G)), 0, G - 1);
        const int cy = std::clamp(static_cast<int>(std::floor(o.box.by * G)), 0, G - 1);
        const int slot = (cy * G + cx) * config.num_anchors() + best_anchor(o.box, config);
        if (a.mask[slot]) {
            ++a.dropped;
            continue;
        }
        a.mask[slot] = 1;
        a.targets[slot] = o;
    }
    return a;
}

struct LossBreakdown {
    double obj = 0.0;
    double noobj = 0.0;
    double loc = 0.0;
    double prob = 0.0;
    double total = 0.0;
};

inline constexpr double kBceClamp = 1e-7;

namespace detail {

/// BCE against a clamped probability and its derivative with respect to the
/// logit. Outside the clamp range the loss is flat.
struct BceTerm {
    double value;
    double dlogit;
};

inline BceTerm bce_from_logit(double target, double logit) {
    const double p = sigmoid(logit);
    const double pc = std::clamp(p, kBceClamp, 1.0 - kBceClamp);
    const double value = -(target * std::log(pc) + (1.0 - target) * std::log(1.0 - pc));
    const bool inside = p > kBceClamp && p < 1.0 - kBceClamp;
    return {value, inside ? p - target : 0.0};
}

}  // namespace detail

/// L = L_obj + lambda_noobj * L_noobj + lambda_loc * L_loc + L_prob.
/// When `grad` is non-null it receives scale * dL/d(raw_head).
template <typename T>
LossBreakdown detection_loss(const BasicTensor<T>& head, const Assignment& assignment, const DetectorConfig& config,
                             BasicTensor<T>* grad = nullptr, double scale = 1.0) {
    require_head_shape(head, config);
    if (assignment.mask.size() != static_cast<std::size_t>(config.slots()) ||
        assignment.targets.size() != assignment.mask.size()) {
        throw ShapeError("detection_loss: assignment has " + std::to_string(assignment.mask.size()) +
                         " slots, expected " + std::to_string(config.slots()));
    }
    const int G = config.grid, B = config.num_anchors(), V = config.values_per_anchor(), K = config.num_classes;
    if (grad) *grad = BasicTensor<T>(head.shape);

    LossBreakdown loss;
    for (int cy = 0; cy < G; ++cy) {
        for (int cx = 0; cx < G; ++cx) {
            for (int b = 0; b < B; ++b) {
                const int slot = (cy * G + cx) * B + b;
                const int base = b * V;
                auto t = [&](int j) { return static_cast<double>(head.at(cy, cx, base + j)); };
                auto g = [&](int j, double v) {
                    if (grad) grad->at(cy, cx, base + j) = static_cast<T>(scale * v);
                };
                if (!assignment.mask[slot]) {
                    if (!assignment.ignore.empty() && assignment.ignore[slot]) continue;
                    const auto term = detail::bce_from_logit(0.0, t(4));
                    loss.noobj += term.value;
                    g(4, config.lambda_noobj * term.dlogit);
                    continue;
                }
                const GroundTruthObject& target = assignment.targets[slot];

                const auto obj = detail::bce_from_logit(1.0, t(4));
                loss.obj += obj.value;
                g(4, obj.dlogit);

                // Centre error in grid-cell units, size error on square roots of relative dims.
                const double sx = sigmoid(t(0)), sy = sigmoid(t(1));
                const double root_w = std::sqrt(config.anchors[b].w) * std::exp(0.5 * t(2));
                const double root_h = std::sqrt(config.anchors[b].h) * std::exp(0.5 * t(3));
                const double ex = cx + sx - target.box.bx * G, ey = cy + sy - target.box.by * G;
                const double ew = root_w - std::sqrt(target.box.bw), eh = root_h - std::sqrt(target.box.bh);
                loss.loc += ex * ex + ey * ey + ew * ew + eh * eh;
                const double l = config.lambda_loc;
                g(0, l * 2.0 * ex * sx * (1.0 - sx));
                g(1, l * 2.0 * ey * sy * (1.0 - sy));
                g(2, l * ew * root_w);
                g(3, l * eh * root_h);

                for (int k = 0; k < K; ++k) {
                    const double y = target.class_id == k + 1 ? 1.0 : 0.0;
                    const auto term = detail::bce_from_logit(y, t(5 + k));
                    loss.prob += term.value;
                    g(5 + k, term.dlogit);
                }
            }
        }
    }
    loss.total = loss.obj + config.lambda_noobj * loss.noobj + config.lambda_loc * loss.loc + loss.prob;

    const std::pair<const char*, double> parts[] = {
        {"obj", loss.obj}, {"noobj", loss.noobj}, {"loc", loss.loc}, {"prob", loss.prob}};
    for (const auto& [name, v] : parts) {
        if (!std::isfinite(v)) throw NonFiniteError(std::string("detection_loss: non-finite ") + name + " component");
    }
    return loss;
}

template <typename T>
struct InputGradient {
    LossBreakdown loss;
    BasicTensor<T> gradient;  // HWC, same shape as the image
    BasicTensor<T> raw_head;
};

/// Loss (for the given assignment) and its gradient with respect to the input
/// image, weights held fixed.
template <typename T>
InputGradient<T> loss_and_input_gradient(const DetectorWeights<T>& weights, const BasicTensor<T>& image,
                                         const Assignment& assignment, double scale = 1.0) {
    auto pass = forward(weights, image);
    BasicTensor<T> grad_head;
    InputGradient<T> out;
    out.loss = detection_loss(pass.raw_head, assignment, weights.config, &grad_head, scale);
    out.gradient = backward(weights, pass, grad_head, true, false).wrt_image;
    if (!out.gradient.all_finite()) throw NonFiniteError("loss_input_gradient: non-finite gradient");
    out.raw_head = std::move(pass.raw_head);
    return out;
}

template <typename T>
BasicTensor<T> loss_input_gradient(const DetectorWeights<T>& weights, const BasicTensor<T>& image,
                                   const Assignment& assignment) {
    return loss_and_input_gradient(weights, image, assignment).gradient;
}

// ---------------------------------------------------------------------------
// Training

struct TrainSample {
    ImageTensor image;
    std::vector<GroundTruthObject> objects;
};

enum class Optimizer { sgd, adam };

struct TrainOptions {
    int epochs = 30;
    Optimizer optimizer = Optimizer::adam;
    double learning_rate = 6e-3;
    int batch_size = 16;
    double momentum = 0.9;  // sgd only
    double beta1 = 0.9;     // adam only
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    bool flip_augment = true;  // mirror each sample left-right with probability 1/2
    int max_shift = 8;         // random translation in pixels, limited so every box stays inside
    bool cosine_decay = true;  // anneal the rate to zero over the run
    // Unassigned slots whose predicted box already overlaps a truth above this
    // IoU are not pushed towards zero objectness. 1 or more disables it.
    double ignore_iou = 0.5;
    std::uint64_t seed = 7;
};

/// Per-weight optimizer buffers (momentum, or Adam first/second moments).
struct OptimizerState {
    std::vector<std::vector<float>> first;
    std::vector<std::vector<float>> second;
    long step = 0;
};

struct StepResult {
    Detector weights;
    double mean_loss = 0.0;  // batch loss before the update
};

namespace detail {

inline void require_finite_loss(double loss, double last_finite) {
    if (!std::isfinite(loss)) {
        throw NonFiniteError("training diverged; last finite loss " + std::to_string(last_finite));
    }
}

/// Accumulates the batch-mean gradient of every weight array, in a fixed
/// sample order so results are reproducible.
inline void mark_ignored(Assignment& a, const Tensor& head, const std::vector<GroundTruthObject>& objects,
                         const DetectorConfig& config, double threshold) {
    a.ignore.assign(a.mask.size(), 0);
    for (const auto& c : decode(head, config)) {
        if (a.mask[c.slot]) continue;
        for (const auto& o : objects) {
            if (iou(c.box, o.box) > threshold) a.ignore[c.slot] = 1;
        }
    }
}

inline double batch_gradient(const Detector& weights, std::span<const TrainSample> samples,
                             std::span<const Assignment> assignments, std::vector<std::vector<float>>& grads,
                             double ignore_iou = 1.0) {
    const std::size_t L = weights.layers.size();
    grads.resize(2 * L);
    for (std::size_t i = 0; i < L; ++i) {
        grads[2 * i].assign(weights.layers[i].kernels.size(), 0.0f);
        grads[2 * i + 1].assign(weights.layers[i].bias.size(), 0.0f);
    }
    const double inv = 1.0 / static_cast<double>(samples.size());
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < samples.size(); ++s) {
        auto pass = forward(weights, samples[s].image);
        Tensor grad_head;
        double total = 0.0;
        if (ignore_iou < 1.0) {
            Assignment a = assignments[s];
            mark_ignored(a, pass.raw_head, samples[s].objects, weights.config, ignore_iou);
            total = detection_loss(pass.raw_head, a, weights.config, &grad_head, inv).total;
        } else {
            total = detection_loss(pass.raw_head, assignments[s], weights.config, &grad_head, inv).total;
        }
        loss_sum += total;
        auto back = backward(weights, pass, grad_head, false, true);
        for (std::size_t i = 0; i < L; ++i) {
            auto& gk = grads[2 * i];
            const auto& lk = back.layers[i].wrt_kernels.data;
            for (std::size_t j = 0; j < gk.size(); ++j) gk[j] += lk[j];
            auto& gb = grads[2 * i + 1];
            for (std::size_t j = 0; j < gb.size(); ++j) gb[j] += back.layers[i].wrt_bias[j];
        }
    }
    return loss_sum * inv;
}

inline StepResult optimizer_step(const Detector& weights, std::span<const TrainSample> samples,
                                 std::span<const Assignment> assignments, const TrainOptions& options,
                                 OptimizerState* state, double last_finite) {
    if (samples.empty()) throw ValidationError("train_step: batch must be non-empty");
    std::vector<std::vector<float>> grads;
    const double mean_loss = batch_gradient(weights, samples, assignments, grads, options.ignore_iou);
    require_finite_loss(mean_loss, last_finite);

    if (state && state->first.size() != grads.size()) {
        state->first.clear();
        state->second.clear();
        for (const auto& g : grads) {
            state->first.emplace_back(g.size(), 0.0f);
            state->second.emplace_back(g.size(), 0.0f);
        }
        state->step = 0;
    }
    if (state) ++state->step;
    const double lr = options.learning_rate;
    const bool adam = state && options.optimizer == Optimizer::adam;
    const double bias1 = adam ? 1.0 - std::pow(options.beta1, static_cast<double>(state->step)) : 1.0;
    const double bias2 = adam ? 1.0 - std::pow(options.beta2, static_cast<double>(state->step)) : 1.0;

    StepResult result{weights, mean_loss};
    for (std::size_t i = 0; i < result.weights.layers.size(); ++i) {
        auto& layer = result.weights.layers[i];
        std::span<float> params[2] = {layer.kernels.data, layer.bias};
        for (std::size_t part = 0; part < 2; ++part) {
            const std::size_t k = 2 * i + part;
            const auto& g = grads[k];
            auto p = params[part];
            if (!state) {
                for (std::size_t j = 0; j < g.size(); ++j) p[j] -= static_cast<float>(lr * g[j]);
            } else if (!adam) {
                auto& v = state->first[k];
                for (std::size_t j = 0; j < g.size(); ++j) {
                    v[j] = static_cast<float>(options.momentum * v[j] + g[j]);
                    p[j] -= static_cast<float>(lr * v[j]);
                }
            } else {
                auto& m = state->first[k];
                auto& v = state->second[k];
                for (std::size_t j = 0; j < g.size(); ++j) {
                    m[j] = static_cast<float>(options.beta1 * m[j] + (1.0 - options.beta1) * g[j]);
                    v[j] = static_cast<float>(options.beta2 * v[j] + (1.0 - options.beta2) * g[j] * g[j]);
                    const double mhat = m[j] / bias1, vhat = v[j] / bias2;
                    p[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + options.adam_epsilon));
                }
            }
            for (float x : p) {
                if (!std::isfinite(x)) {
                    throw NonFiniteError("training diverged; last finite loss " + std::to_string(mean_loss));
                }
            }
        }
    }
    return result;
}

}  // namespace detail

/// One plain gradient-descent update against the mean loss over the batch.
inline StepResult train_step(const Detector& weights, std::span<const TrainSample> batch, double learning_rate) {
    std::vector<Assignment> assignments;
    for (const auto& s : batch) assignments.push_back(assign_targets(s.objects, weights.config));
    TrainOptions options;
    options.learning_rate = learning_rate;
    options.ignore_iou = 1.0;
    return detail::optimizer_step(weights, batch, assignments, options, nullptr, 0.0);
}

/// Mean detection loss over a set of samples, without updating anything.
inline double mean_loss(const Detector& weights, std::span<const TrainSample> samples) {
    if (samples.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& s : samples) {
        sum += detection_loss(raw_head(weights, s.image), assign_targets(s.objects, weights.config), weights.config)
                   .total;
    }
    return sum / static_cast<double>(samples.size());
}

struct TrainResult {
    Detector weights;
    std::vector<double> loss_history;  // mean batch loss per epoch, in epoch order
};

using EpochCallback = std::function<void(int epoch, double loss)>;

/// Mini-batch training with Adam (default) or SGD with momentum. Sample order is reshuffled every epoch from
/// options.seed; the weights start from build_detector(config).
namespace detail {

inline TrainSample mirrored(const TrainSample& s) {
    TrainSample out{s.image, s.objects};
    const int H = s.image.dim(0), W = s.image.dim(1), C = s.image.dim(2);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c) out.image.at(y, x, c) = s.image.at(y, W - 1 - x, c);
    for (auto& o : out.objects) o.box.bx = 1.0 - o.box.bx;
    return out;
}

// Translate by (dx, dy) pixels, replicating the edge.
inline TrainSample shifted(const TrainSample& s, int dx, int dy) {
    TrainSample out{s.image, s.objects};
    const int H = s.image.dim(0), W = s.image.dim(1), C = s.image.dim(2);
    for (int y = 0; y < H; ++y) {
        const int sy = std::clamp(y - dy, 0, H - 1);
        for (int x = 0; x < W; ++x) {
            const int sx = std::clamp(x - dx, 0, W - 1);
            for (int c = 0; c < C; ++c) out.image.at(y, x, c) = s.image.at(sy, sx, c);
        }
    }
    for (auto& o : out.objects) {
        o.box.bx += static_cast<double>(dx) / W;
        o.box.by += static_cast<double>(dy) / H;
    }
    return out;
}

inline TrainSample augmented(const TrainSample& s, const TrainOptions& options, Rng& rng) {
    const int H = s.image.dim(0), W = s.image.dim(1);
    // Shift range that keeps every box fully inside the frame.
    int lo_x = -options.max_shift, hi_x = options.max_shift, lo_y = lo_x, hi_y = hi_x;
    for (const auto& o : s.objects) {
        lo_x = std::max(lo_x, -static_cast<int>(std::floor(o.box.left() * W)));
        hi_x = std::min(hi_x, static_cast<int>(std::floor((1.0 - o.box.right()) * W)));
        lo_y = std::max(lo_y, -static_cast<int>(std::floor(o.box.top() * H)));
        hi_y = std::min(hi_y, static_cast<int>(std::floor((1.0 - o.box.bottom()) * H)));
    }
    const bool flip = options.flip_augment && rng.uniform() < 0.5;
    const int dx = lo_x < hi_x ? rng.uniform_int(lo_x, hi_x) : 0;
    const int dy = lo_y < hi_y ? rng.uniform_int(lo_y, hi_y) : 0;
    TrainSample out = flip ? mirrored(s) : s;
    // Mirroring swaps the horizontal limits.
    return (dx || dy) ? shifted(out, flip ? -dx : dx, dy) : out;
}


}  // namespace detail

inline TrainResult train(const DetectorConfig& config, std::span<const TrainSample> dataset,
                         const TrainOptions& options, const EpochCallback& on_epoch = {}) {
    if (dataset.empty()) throw ValidationError("train: dataset must be non-empty");
    if (options.epochs < 0) throw ValidationError("train: epochs must be non-negative");
    if (options.batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
    TrainResult result{build_detector(config), {}};

    std::vector<Assignment> assignments;
    assignments.reserve(dataset.size());
    for (const auto& s : dataset) assignments.push_back(assign_targets(s.objects, config));

    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(options.seed, "train/shuffle"));
    Rng aug_rng(derive_seed(options.seed, "train/augment"));
    const std::size_t batches_per_epoch =
        (dataset.size() + static_cast<std::size_t>(options.batch_size) - 1) / static_cast<std::size_t>(options.batch_size);
    const double total_steps = static_cast<double>(batches_per_epoch) * std::max(options.epochs, 1);
    TrainOptions step_options = options;
    OptimizerState state;
    double last_finite = 0.0;
    std::vector<TrainSample> batch;
    std::vector<Assignment> batch_assign;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
            batch.clear();
            batch_assign.clear();
            for (std::size_t k = start; k < end; ++k) {
                if (options.flip_augment || options.max_shift > 0) {
                    batch.push_back(detail::augmented(dataset[order[k]], options, aug_rng));
                    batch_assign.push_back(assign_targets(batch.back().objects, config));
                } else {
                    batch.push_back(dataset[order[k]]);
                    batch_assign.push_back(assignments[order[k]]);
                }
            }
            if (options.cosine_decay) {
                const double progress = static_cast<double>(state.step) / total_steps;
                step_options.learning_rate = 0.5 * options.learning_rate * (1.0 + std::cos(std::numbers::pi * progress));
            }
            auto step = detail::optimizer_step(result.weights, batch, batch_assign, step_options, &state, last_finite);
            result.weights = std::move(step.weights);
            last_finite = step.mean_loss;
            epoch_loss += step.mean_loss;
            ++batches;
        }
        result.loss_history.push_back(epoch_loss / batches);
        if (on_epoch) on_epoch(epoch + 1, result.loss_history.back());
    }
    return result;
}

// ---------------------------------------------------------------------------
// TOGW checkpoint: "TOGW", u16 version, config block, then little-endian f32
// kernels and biases layer by layer.

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline Bytes serialize_checkpoint(const Detector& det) {
    const DetectorConfig& c = det.config;
    ByteWriter w;
    w.magic("TOGW");
    w.uint<std::uint16_t>(kCheckpointVersion);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(c.input_height));
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(c.input_width));
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(c.input_channels));
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(c.grid));
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(c.anchors.size()));
    for (const auto& a : c.anchors) {
        w.f64(a.w);
        w.f64(a.h);
    }
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(c.num_classes));
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(c.channel_widths.size()));
    for (int cw : c.channel_widths) w.uint<std::uint32_t>(static_cast<std::uint32_t>(cw));
    w.f64(c.leaky_slope);
    w.f64(c.lambda_noobj);
    w.f64(c.lambda_loc);
    w.f64(c.confidence_threshold);
    w.f64(c.nms_iou_threshold);
    w.uint<std::uint64_t>(c.seed);
    for (const auto& layer : det.layers) {
        for (float v : layer.kernels.data) w.f32(v);
        for (float v : layer.bias) w.f32(v);
    }
    return w.take();
}

inline Detector deserialize_checkpoint(const Bytes& bytes) {
    ByteReader r(bytes);
    r.expect_magic("TOGW");
    const auto version_at = r.offset();
    const auto version = r.uint<std::uint16_t>("version");
    if (version != kCheckpointVersion) {
        throw ParseError("unsupported checkpoint version " + std::to_string(version), version_at);
    }
    constexpr std::uint32_t kSane = 1u << 16;
    auto count = [&](const char* what) {
        const auto at = r.offset();
        const auto v = r.uint<std::uint32_t>(what);
        if (v > kSane) throw ParseError(std::string("implausible ") + what + " " + std::to_string(v), at);
        return static_cast<int>(v);
    };
    DetectorConfig c;
    c.input_height = count("input_height");
    c.input_width = count("input_width");
    c.input_channels = count("input_channels");
    c.grid = count("grid");
    c.anchors.resize(static_cast<std::size_t>(count("anchor count")));
    for (auto& a : c.anchors) {
        a.w = r.f64("anchor w");
        a.h = r.f64("anchor h");
    }
    c.num_classes = count("num_classes");
    c.channel_widths.resize(static_cast<std::size_t>(count("block count")));
    for (auto& cw : c.channel_widths) cw = count("channel width");
    c.leaky_slope = r.f64("leaky_slope");
    c.lambda_noobj = r.f64("lambda_noobj");
    c.lambda_loc = r.f64("lambda_loc");
    c.confidence_threshold = r.f64("confidence_threshold");
    c.nms_iou_threshold = r.f64("nms_iou_threshold");
    c.seed = r.uint<std::uint64_t>("seed");
    const auto config_end = r.offset();
    try {
        c.validate();
    } catch (const ValidationError& e) {
        throw ParseError(std::string("checkpoint config block: ") + e.what(), config_end);
    }

    Detector det;
    det.config = c;
    for (const auto& s : detail::layer_shapes(c)) {
        ConvLayer layer;
        layer.kernels = Tensor({s.out_ch, s.in_ch, s.kernel, s.kernel});
        layer.bias.resize(static_cast<std::size_t>(s.out_ch));
        layer.stride = s.stride;
        layer.padding = s.padding;
        layer.activation = s.activation;
        layer.slope = static_cast<float>(c.leaky_slope);
        r.need(4 * (layer.kernels.size() + layer.bias.size()), "weights");
        for (auto& v : layer.kernels.data) v = r.f32("kernel");
        for (auto& v : layer.bias) v = r.f32("bias");
        det.layers.push_back(std::move(layer));
    }
    if (!r.at_end()) throw ParseError("trailing bytes after weights", r.offset());
    return det;
}

inline void save_checkpoint(const std::filesystem::path& path, const Detector& det) {
    write_file_atomic(path, serialize_checkpoint(det));
}

inline Detector load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace tog
