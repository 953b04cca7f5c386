#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "tog/error.hpp"

namespace tog {

/// Axis-aligned box in center-size form, relative image units.
struct Box {
    double bx = 0.0;
    double by = 0.0;
    double bw = 0.0;
    double bh = 0.0;

    double left() const { return bx - 0.5 * bw; }
    double right() const { return bx + 0.5 * bw; }
    double top() const { return by - 0.5 * bh; }
    double bottom() const { return by + 0.5 * bh; }
    double area() const { return bw * bh; }

    friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union. Both boxes must have positive dimensions.
inline double iou(const Box& a, const Box& b) {
    if (!(a.bw > 0.0 && a.bh > 0.0 && b.bw > 0.0 && b.bh > 0.0)) {
        throw ValidationError("iou: box dimensions must be positive");
    }
    const double iw = std::min(a.right(), b.right()) - std::max(a.left(), b.left());
    const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top());
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    // areas from the same corners, so identical boxes give exactly 1
    const auto span = [](const Box& x) { return (x.right() - x.left()) * (x.bottom() - x.top()); };
    const double inter = iw * ih;
    const double uni = span(a) + span(b) - inter;
    return std::clamp(inter / uni, 0.0, 1.0);
}

/// IoU of two boxes sharing a center; used to pick the anchor for an object.
inline double centered_iou(double w1, double h1, double w2, double h2) {
    const double inter = std::min(w1, w2) * std::min(h1, h2);
    return inter / (w1 * h1 + w2 * h2 - inter);
}

/// Annotated object. Classes are numbered 1..K.
struct GroundTruthObject {
    Box box;
    int class_id = 1;

    friend bool operator==(const GroundTruthObject&, const GroundTruthObject&) = default;
};

/// A detection surviving confidence filtering and NMS.
struct DetectedObject {
    Box box;
    int class_id = 1;
    double confidence = 0.0;
    int slot = -1;  // source candidate slot, 0-based

    friend bool operator==(const DetectedObject&, const DetectedObject&) = default;
};

inline void validate_ground_truth(const GroundTruthObject& o, int num_classes, std::size_t index) {
    const std::string where = "object " + std::to_string(index);
    if (o.class_id < 1 || o.class_id > num_classes) {
        throw ValidationError(where + ": class_id " + std::to_string(o.class_id) + " outside 1.." +
                              std::to_string(num_classes));
    }
    const Box& b = o.box;
    const bool finite = std::isfinite(b.bx) && std::isfinite(b.by) && std::isfinite(b.bw) && std::isfinite(b.bh);
    constexpr double slack = 1e-6;  // annotations carry 6 significant digits
    if (!finite || !(b.bw > 0.0) || !(b.bh > 0.0) || b.left() < -slack || b.top() < -slack ||
        b.right() > 1.0 + slack || b.bottom() > 1.0 + slack) {
        throw ValidationError(where + ": box outside [0,1]");
    }
}

}  // namespace tog
