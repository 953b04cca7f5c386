#pragma once

// Detection quality and attack-effect metrics.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tog/attacks.hpp"
#include "tog/detector.hpp"
#include "tog/error.hpp"
#include "tog/geometry.hpp"
#include "tog/parallel.hpp"

namespace tog {

/// One detection of a single class, tagged with the image it came from.
struct RankedDetection {
    std::size_t image = 0;
    Box box;
    double confidence = 0.0;
};

/// Greedy matching in the given order: a detection is a true positive when
/// some still-unmatched ground truth in its image has IoU >= threshold; the
/// best-IoU such ground truth is consumed.
inline std::vector<bool> match_detections(std::span<const RankedDetection> ranked,
                                          const std::vector<std::vector<Box>>& truths, double iou_threshold) {
    std::vector<std::vector<bool>> used(truths.size());
    for (std::size_t i = 0; i < truths.size(); ++i) used[i].assign(truths[i].size(), false);
    std::vector<bool> tp(ranked.size(), false);
    for (std::size_t k = 0; k < ranked.size(); ++k) {
        const auto& d = ranked[k];
        if (d.image >= truths.size()) throw ValidationError("match_detections: detection image index out of range");
        double best = -1.0;
        int best_gt = -1;
        for (std::size_t g = 0; g < truths[d.image].size(); ++g) {
            if (used[d.image][g]) continue;
            const double v = iou(d.box, truths[d.image][g]);
            if (v >= iou_threshold && v > best) {
                best = v;
                best_gt = static_cast<int>(g);
            }
        }
        if (best_gt >= 0) {
            used[d.image][static_cast<std::size_t>(best_gt)] = true;
            tp[k] = true;
        }
    }
    return tp;
}

/// All-point interpolated area under the precision/recall curve for a list
/// of TP/FP flags ordered by descending confidence.
inline double average_precision_from_flags(const std::vector<bool>& tp, std::size_t num_truths) {
    if (num_truths == 0) return tp.empty() ? 1.0 : 0.0;
    const std::size_t n = tp.size();
    std::vector<double> recall(n), precision(n);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (tp[i]) ++hits;
        recall[i] = static_cast<double>(hits) / static_cast<double>(num_truths);
        precision[i] = static_cast<double>(hits) / static_cast<double>(i + 1);
    }
    // Precision envelope, then sum rectangles wherever recall increases.
    for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (recall[i] > prev_recall) {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    return std::clamp(ap, 0.0, 1.0);
}

/// AP for one class. `ranked` must be sorted by descending confidence.
inline double average_precision(std::span<const RankedDetection> ranked, const std::vector<std::vector<Box>>& truths,
                                 double iou_threshold = 0.5) {
    for (std::size_t i = 1; i < ranked.size(); ++i) {
        if (ranked[i].confidence > ranked[i - 1].confidence) {
            throw ValidationError("average_precision: detections must be sorted by descending confidence");
        }
    }
    std::size_t num_truths = 0;
    for (const auto& t : truths) num_truths += t.size();
    return average_precision_from_flags(match_detections(ranked, truths, iou_threshold), num_truths);
}

/// Single-image convenience overload.
inline double average_precision(const std::vector<DetectedObject>& ranked, const std::vector<Box>& truths,
                                double iou_threshold = 0.5) {
    std::vector<RankedDetection> r;
    for (const auto& d : ranked) r.push_back({0, d.box, d.confidence});
    return average_precision(r, std::vector<std::vector<Box>>{truths}, iou_threshold);
}

struct AttackMetrics {
    std::string variant;
    double vanish_rate = 0.0;        // 1 - adversarial/benign detection count
    double fabrication_ratio = 0.0;  // adversarial / benign detection count
    double mislabel_rate = 0.0;      // benign boxes now reported with their target class
    double box_retention = 0.0;      // benign boxes with an adversarial box at IoU >= 0.5
    double target_class_rate = 0.0;  // of the retained boxes, share reported with the target class
    double zero_detection_fraction = 0.0;
    double success_rate = 0.0;
    double linf_distortion_max = 0.0;
    bool all_pixels_valid = true;
    double mean_attack_seconds = 0.0;
    double mean_iterations = 0.0;
    std::size_t skipped = 0;  // images left unperturbed (no benign detections to target)
};

struct EvalReport {
    std::string condition = "benign";
    std::map<int, double> per_class_ap;  // classes present in the ground truth
    double mAP = 0.0;
    double detection_count_mean = 0.0;
    double precision = 0.0;  // at the detector's confidence threshold, IoU 0.5
    double recall = 0.0;
    std::size_t images = 0;
    std::optional<AttackMetrics> attack;
};

/// Which attack (if any) evaluate() applies to every image first.
struct AttackPlan {
    AttackConfig config;
    std::optional<Perturbation> eta;  // required for the universal variant
};

/// Perturbed images and per-image bookkeeping from one attack pass.
struct PerturbedSet {
    std::vector<ImageTensor> images;
    std::vector<std::vector<DetectedObject>> benign;   // on the attacking detector
    std::vector<std::vector<GroundTruthObject>> targets;  // O* per image (empty for vanishing/universal)
    std::vector<bool> success;
    std::vector<int> iterations;
    std::vector<bool> skipped;
    std::vector<double> seconds;
};

/// Runs the attack in `plan` against `detector` on every image, on up to
/// `jobs` threads. Images with no benign detections are left untouched for
/// fabrication and mislabeling.
inline PerturbedSet perturb_dataset(const Detector& detector, std::span<const TrainSample> dataset,
                                    const AttackPlan& plan, int jobs = 1) {
    using clock = std::chrono::steady_clock;
    const auto variant = plan.config.variant;
    if (variant == AttackVariant::universal_apply && !plan.eta) {
        throw ValidationError("universal attack requires a trained perturbation");
    }
    const std::size_t n = dataset.size();
    PerturbedSet out;
    out.images.resize(n);
    out.benign.resize(n);
    out.targets.resize(n);
    out.success.assign(n, false);
    out.iterations.assign(n, 0);
    out.skipped.assign(n, false);
    out.seconds.assign(n, 0.0);
    std::vector<char> success(n, 0), skipped(n, 0);  // vector<bool> slots are not thread-safe

    parallel_for(n, jobs, [&](std::size_t i) {
        const auto& sample = dataset[i];
        out.benign[i] = detect(detector, sample.image);
        const auto start = clock::now();
        if (variant == AttackVariant::universal_apply) {
            out.images[i] = apply_universal(sample.image, *plan.eta);
            out.seconds[i] = std::chrono::duration<double>(clock::now() - start).count();
            success[i] = detect(detector, out.images[i]).empty();
            return;
        }
        try {
            auto r = tog_attack(detector, sample.image, plan.config);
            out.seconds[i] = std::chrono::duration<double>(clock::now() - start).count();
            out.images[i] = std::move(r.adversarial);
            out.targets[i] = std::move(r.target.target_objects);
            success[i] = r.success;
            out.iterations[i] = r.iterations;
        } catch (const EmptyDetectionsError&) {
            out.seconds[i] = std::chrono::duration<double>(clock::now() - start).count();
            out.images[i] = sample.image;
            skipped[i] = 1;
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        out.success[i] = success[i] != 0;
        out.skipped[i] = skipped[i] != 0;
    }
    return out;
}

namespace detail {

inline void score_detections(EvalReport& report, const std::vector<std::vector<DetectedObject>>& detections,
                             std::span<const TrainSample> dataset, int num_classes) {
    std::size_t total_dets = 0, total_tp = 0, total_gt = 0;
    double ap_sum = 0.0;
    int present = 0;
    for (int cls = 1; cls <= num_classes; ++cls) {
        std::vector<std::vector<Box>> truths(dataset.size());
        std::size_t n_gt = 0;
        for (std::size_t i = 0; i < dataset.size(); ++i) {
            for (const auto& o : dataset[i].objects) {
                if (o.class_id == cls) {
                    truths[i].push_back(o.box);
                    ++n_gt;
                }
            }
        }
        std::vector<RankedDetection> ranked;
        std::vector<int> slots;
        for (std::size_t i = 0; i < detections.size(); ++i) {
            for (const auto& d : detections[i]) {
                if (d.class_id == cls) ranked.push_back({i, d.box, d.confidence});
            }
        }
        std::stable_sort(ranked.begin(), ranked.end(), [](const RankedDetection& a, const RankedDetection& b) {
            return a.confidence > b.confidence;
        });
        const auto tp = match_detections(ranked, truths, 0.5);
        total_dets += ranked.size();
        total_tp += static_cast<std::size_t>(std::count(tp.begin(), tp.end(), true));
        total_gt += n_gt;
        if (n_gt == 0) continue;
        const double ap = average_precision_from_flags(tp, n_gt);
        report.per_class_ap[cls] = ap;
        ap_sum += ap;
        ++present;
    }
    report.mAP = present ? ap_sum / present : 0.0;
    report.images = dataset.size();
    report.detection_count_mean = dataset.empty() ? 0.0 : static_cast<double>(total_dets) / dataset.size();
    report.precision = total_dets ? static_cast<double>(total_tp) / total_dets : 0.0;
    report.recall = total_gt ? static_cast<double>(total_tp) / total_gt : 0.0;
}

}  // namespace detail

/// Scores `detector` on `images` (perturbed or not) against the clean ground
/// truth of `dataset`.
inline EvalReport evaluate_images(const Detector& detector, std::span<const TrainSample> dataset,
                                  std::span<const ImageTensor> images, int jobs = 1) {
    if (images.size() != dataset.size()) throw ShapeError("evaluate_images: image count does not match dataset");
    std::vector<std::vector<DetectedObject>> detections(images.size());
    parallel_for(images.size(), jobs, [&](std::size_t i) { detections[i] = detect(detector, images[i]); });
    EvalReport report;
    detail::score_detections(report, detections, dataset, detector.config.num_classes);
    return report;
}

inline AttackMetrics attack_metrics(const Detector& detector, std::span<const TrainSample> dataset,
                                    const PerturbedSet& set, const AttackPlan& plan) {
    AttackMetrics m;
    m.variant = std::string(variant_name(plan.config.variant));
    std::size_t benign_total = 0, adv_total = 0, retained = 0, on_target = 0, zero = 0, successes = 0;
    double seconds = 0.0, iterations = 0.0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto adv = detect(detector, set.images[i]);
        const auto& benign = set.benign[i];
        benign_total += benign.size();
        adv_total += adv.size();
        if (adv.empty()) ++zero;
        if (set.success[i]) ++successes;
        if (set.skipped[i]) ++m.skipped;
        seconds += set.seconds[i];
        iterations += set.iterations[i];
        m.linf_distortion_max = std::max(m.linf_distortion_max, linf_distance(set.images[i], dataset[i].image));
        for (float v : set.images[i].data) {
            if (!(v >= 0.0f && v <= 1.0f)) m.all_pixels_valid = false;
        }
        for (std::size_t b = 0; b < benign.size(); ++b) {
            // The highest-confidence adversarial box overlapping this benign box.
            const DetectedObject* match = nullptr;
            for (const auto& a : adv) {
                if (iou(a.box, benign[b].box) >= plan.config.mislabel_match_iou &&
                    (!match || a.confidence > match->confidence)) {
                    match = &a;
                }
            }
            if (!match) continue;
            ++retained;
            if (b < set.targets[i].size() && match->class_id == set.targets[i][b].class_id) ++on_target;
        }
    }
    const double n = dataset.empty() ? 1.0 : static_cast<double>(dataset.size());
    m.vanish_rate = vanish_rate(benign_total, adv_total);
    m.fabrication_ratio = benign_total ? static_cast<double>(adv_total) / benign_total : 0.0;
    m.box_retention = benign_total ? static_cast<double>(retained) / benign_total : 0.0;
    m.target_class_rate = retained ? static_cast<double>(on_target) / retained : 0.0;
    m.mislabel_rate = benign_total ? static_cast<double>(on_target) / benign_total : 0.0;
    m.zero_detection_fraction = static_cast<double>(zero) / n;
    m.success_rate = static_cast<double>(successes) / n;
    m.mean_attack_seconds = seconds / n;
    m.mean_iterations = iterations / n;
    return m;
}

/// Benign evaluation when `plan` is empty; otherwise every image is attacked
/// first and the adversarial detections are scored against clean labels.
inline EvalReport evaluate(const Detector& detector, std::span<const TrainSample> dataset,
                           const AttackPlan* plan = nullptr, int jobs = 1) {
    if (dataset.empty()) throw ValidationError("evaluate: dataset must be non-empty");
    for (const auto& s : dataset) {
        for (const auto& o : s.objects) {
            if (o.class_id > detector.config.num_classes) {
                throw ValidationError("evaluate: dataset class " + std::to_string(o.class_id) +
                                      " exceeds detector class count " + std::to_string(detector.config.num_classes));
            }
        }
    }
    if (!plan) {
        std::vector<ImageTensor> images;
        for (const auto& s : dataset) images.push_back(s.image);
        return evaluate_images(detector, dataset, images, jobs);
    }
    const PerturbedSet set = perturb_dataset(detector, dataset, *plan, jobs);
    EvalReport report = evaluate_images(detector, dataset, set.images, jobs);
    report.condition = std::string(variant_name(plan->config.variant));
    report.attack = attack_metrics(detector, dataset, set, *plan);
    return report;
}

// ---------------------------------------------------------------------------
// Transferability

struct TransferCell {
    std::size_t source = 0;
    std::size_t target = 0;
    std::string variant;
    double benign_map = 0.0;       // target detector on clean images
    double adversarial_map = 0.0;  // target detector on images attacked through the source
    bool transfers = false;
};

/// `plans_per_source[s]` lists the attacks generated against detector s
/// (universal plans carry that detector's own perturbation). A cell transfers
/// when adversarial mAP <= threshold * benign mAP on the target.
inline std::vector<TransferCell> transfer_matrix(const std::vector<Detector>& detectors,
                                                 const std::vector<std::vector<AttackPlan>>& plans_per_source,
                                                 std::span<const TrainSample> dataset,
                                                 double transfer_threshold = 0.5, int jobs = 1) {
    if (detectors.size() < 2) throw ValidationError("transfer_matrix: needs at least 2 detectors");
    if (plans_per_source.size() != detectors.size()) {
        throw ValidationError("transfer_matrix: need one plan list per detector");
    }
    for (const auto& d : detectors) {
        if (d.config.image_shape() != detectors.front().config.image_shape()) {
            throw ShapeError("transfer_matrix: detectors disagree on input size (" +
                             dims_to_string(detectors.front().config.image_shape()) + " vs " +
                             dims_to_string(d.config.image_shape()) + ")");
        }
        if (d.config.num_classes != detectors.front().config.num_classes) {
            throw ValidationError("transfer_matrix: detectors disagree on class count");
        }
    }
    std::vector<double> benign;
    for (const auto& d : detectors) benign.push_back(evaluate(d, dataset, nullptr, jobs).mAP);

    std::vector<TransferCell> cells;
    for (std::size_t s = 0; s < detectors.size(); ++s) {
        for (const auto& plan : plans_per_source[s]) {
            const PerturbedSet set = perturb_dataset(detectors[s], dataset, plan, jobs);
            for (std::size_t t = 0; t < detectors.size(); ++t) {
                TransferCell cell;
                cell.source = s;
                cell.target = t;
                cell.variant = std::string(variant_name(plan.config.variant));
                cell.benign_map = benign[t];
                cell.adversarial_map = evaluate_images(detectors[t], dataset, set.images, jobs).mAP;
                cell.transfers = cell.adversarial_map <= transfer_threshold * cell.benign_map;
                cells.push_back(cell);
            }
        }
    }
    return cells;
}

// ---------------------------------------------------------------------------
// Report emission

inline std::string format_fixed(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

/// condition,class,ap rows: one per class per condition plus a "mAP" row.
inline std::string reports_to_csv(const std::vector<EvalReport>& reports) {
    std::ostringstream out;
    out << "condition,class,ap\n";
    for (const auto& r : reports) {
        for (const auto& [cls, ap] : r.per_class_ap) out << r.condition << ',' << cls << ',' << format_fixed(ap) << '\n';
        out << r.condition << ",mAP," << format_fixed(r.mAP) << '\n';
    }
    return out.str();
}

struct CsvRow {
    std::string condition;
    std::string cls;
    double ap = 0.0;
};

inline std::vector<CsvRow> parse_metrics_csv(const std::string& text) {
    std::vector<CsvRow> rows;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
        const std::size_t here = offset;
        offset += line.size() + 1;
        if (line_no++ == 0) {
            if (line != "condition,class,ap") throw ParseError("metrics CSV: unexpected header", 0);
            continue;
        }
        if (line.empty()) continue;
        const auto a = line.find(',');
        const auto b = a == std::string::npos ? a : line.find(',', a + 1);
        if (b == std::string::npos) throw ParseError("metrics CSV: expected 3 fields", here);
        CsvRow row{line.substr(0, a), line.substr(a + 1, b - a - 1), 0.0};
        try {
            row.ap = std::stod(line.substr(b + 1));
        } catch (const std::exception&) {
            throw ParseError("metrics CSV: bad ap value", here + b + 1);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string condition_heading(const std::string& condition) {
    if (condition == "benign") return "Benign mAP (%)";
    if (condition == "vanishing") return "TOG-vanishing";
    if (condition == "fabrication") return "TOG-fabrication";
    if (condition == "mislabel_ml") return "TOG-mislabeling (ML)";
    if (condition == "mislabel_ll") return "TOG-mislabeling (LL)";
    if (condition == "universal") return "TOG-universal";
    return condition;
}

/// Markdown table: one row per detector, one column per condition (benign
/// first, then the attacks), values are mAP in percent.
inline std::string markdown_summary(const std::vector<std::pair<std::string, std::vector<CsvRow>>>& detectors) {
    static const std::vector<std::string> kOrder = {"benign",      "vanishing",   "fabrication",
                                                    "mislabel_ml", "mislabel_ll", "universal"};
    std::vector<std::string> columns;
    auto seen = [&](const std::string& c) { return std::find(columns.begin(), columns.end(), c) != columns.end(); };
    for (const auto& name : kOrder) {
        for (const auto& [det, rows] : detectors) {
            for (const auto& r : rows) {
                if (r.condition == name && !seen(name)) columns.push_back(name);
            }
        }
    }
    for (const auto& [det, rows] : detectors) {
        for (const auto& r : rows) {
            if (!seen(r.condition)) columns.push_back(r.condition);
        }
    }
    std::ostringstream out;
    out << "| Detector |";
    for (const auto& c : columns) out << ' ' << condition_heading(c) << " |";
    out << "\n|---|";
    for (std::size_t i = 0; i < columns.size(); ++i) out << "---:|";
    out << '\n';
    for (const auto& [det, rows] : detectors) {
        out << "| " << det << " |";
        for (const auto& c : columns) {
            auto it = std::find_if(rows.begin(), rows.end(),
                                   [&](const CsvRow& r) { return r.condition == c && r.cls == "mAP"; });
            out << ' ' << (it == rows.end() ? std::string("-") : format_fixed(100.0 * it->ap, 2)) << " |";
        }
        out << '\n';
    }
    return out.str();
}

inline std::string transfer_to_csv(const std::vector<TransferCell>& cells) {
    std::ostringstream out;
    out << "source,target,variant,benign_map,adversarial_map,transfers\n";
    for (const auto& c : cells) {
        out << c.source << ',' << c.target << ',' << c.variant << ',' << format_fixed(c.benign_map) << ','
            << format_fixed(c.adversarial_map) << ',' << (c.transfers ? "yes" : "no") << '\n';
    }
    return out.str();
}

inline std::string transfer_to_markdown(const std::vector<TransferCell>& cells, const std::vector<std::string>& names) {
    std::ostringstream out;
    out << "| Source | Target | Attack | Benign mAP (%) | Adversarial mAP (%) | Verdict |\n";
    out << "|---|---|---|---:|---:|---|\n";
    for (const auto& c : cells) {
        out << "| " << names.at(c.source) << " | " << names.at(c.target) << " | " << condition_heading(c.variant)
            << " | " << format_fixed(100.0 * c.benign_map, 2) << " | " << format_fixed(100.0 * c.adversarial_map, 2)
            << " | " << (c.transfers ? "Transfer Succeeds" : "Transfer Fails") << " |\n";
    }
    return out.str();
}

}  // namespace tog
