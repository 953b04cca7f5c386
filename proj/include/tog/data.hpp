#pragma once

// Procedural synthetic-shapes detection data: solid-color scenes with filled
// circles (class 1), squares (class 2) and triangles (class 3), plus the file
// formats the toolkit reads and writes (binary PPM, JSON annotations, JSON
// dataset manifest).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tog/detector.hpp"
#include "tog/error.hpp"
#include "tog/geometry.hpp"
#include "tog/io.hpp"
#include "tog/rng.hpp"
#include "tog/tensor.hpp"

namespace tog {

enum class ShapeKind : int { circle = 1, square = 2, triangle = 3 };

inline constexpr int kShapeClasses = 3;

struct SceneSpec {
    int image_size = 64;
    int min_objects = 1;
    int max_objects = 3;
    double min_size = 0.15;  // shape extent as a fraction of the image side
    double max_size = 0.45;
    double noise_std = 0.02;
    double min_center_distance = 0.2;
    double min_contrast = 0.35;  // L-inf color distance between shape and background
    double max_contrast = 1.0;
    std::uint64_t seed = 7;

    void validate() const {
        std::vector<std::string> problems;
        if (image_size < 8) problems.push_back("image_size must be >= 8");
        if (min_objects < 0 || max_objects < min_objects) problems.push_back("need 0 <= min_objects <= max_objects");
        if (!(min_size > 0.0 && min_size <= max_size && max_size < 1.0)) {
            problems.push_back("need 0 < min_size <= max_size < 1");
        }
        if (!(noise_std >= 0.0)) problems.push_back("noise_std must be non-negative");
        if (!(min_center_distance >= 0.0)) problems.push_back("min_center_distance must be non-negative");
        if (!(min_contrast >= 0.0 && min_contrast < 0.5)) problems.push_back("min_contrast must be in [0,0.5)");
        if (!(max_contrast >= min_contrast && max_contrast <= 1.0)) {
            problems.push_back("max_contrast must be in [min_contrast,1]");
        }
        if (!problems.empty()) {
            std::string msg = "invalid scene spec:";
            for (const auto& p : problems) msg += "\n  " + p;
            throw ValidationError(msg);
        }
    }

    friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

/// A shape placement before rasterization; center and size in relative units.
struct ShapeInstance {
    ShapeKind kind = ShapeKind::circle;
    double cx = 0.5;
    double cy = 0.5;
    double size = 0.2;
    float color[3] = {1.0f, 1.0f, 1.0f};
};

struct Scene {
    ImageTensor image;
    std::vector<GroundTruthObject> objects;
};

namespace detail {

inline bool shape_covers(const ShapeInstance& s, double px, double py) {
    const double half = 0.5 * s.size;
    const double dx = px - s.cx, dy = py - s.cy;
    switch (s.kind) {
        case ShapeKind::circle:
            return dx * dx + dy * dy <= half * half;
        case ShapeKind::square:
            return std::abs(dx) <= half && std::abs(dy) <= half;
        case ShapeKind::triangle: {
            // Apex up, base along the bottom edge of the size x size square.
            if (dy < -half || dy > half) return false;
            const double frac = (dy + half) / s.size;  // 0 at apex, 1 at base
            return std::abs(dx) <= half * frac;
        }
    }
    return false;
}

}  // namespace detail

/// Paints shapes in order over a solid background. Each object's box is the
/// tight box around the pixels its shape covers (pixel centers sampled).
inline Scene render_scene(int image_size, const float background[3], const std::vector<ShapeInstance>& shapes) {
    const int n = image_size;
    Scene scene;
    scene.image = ImageTensor({n, n, 3});
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            for (int c = 0; c < 3; ++c) scene.image.at(y, x, c) = background[c];

    for (const auto& s : shapes) {
        int x0 = n, x1 = -1, y0 = n, y1 = -1;
        for (int y = 0; y < n; ++y) {
            const double py = (y + 0.5) / n;
            for (int x = 0; x < n; ++x) {
                const double px = (x + 0.5) / n;
                if (!detail::shape_covers(s, px, py)) continue;
                for (int c = 0; c < 3; ++c) scene.image.at(y, x, c) = s.color[c];
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
            }
        }
        if (x1 < 0) continue;  // shape too small to cover any pixel center
        GroundTruthObject o;
        o.class_id = static_cast<int>(s.kind);
        o.box.bw = static_cast<double>(x1 + 1 - x0) / n;
        o.box.bh = static_cast<double>(y1 + 1 - y0) / n;
        o.box.bx = 0.5 * static_cast<double>(x0 + x1 + 1) / n;
        o.box.by = 0.5 * static_cast<double>(y0 + y1 + 1) / n;
        scene.objects.push_back(o);
    }
    return scene;
}

/// Deterministic in the rng state. If an object cannot be placed within 100
/// rejection-sampling tries the scene is regenerated with one object fewer.
inline Scene generate_scene(const SceneSpec& spec, Rng& rng) {
    spec.validate();
    int count = rng.uniform_int(spec.min_objects, spec.max_objects);
    float background[3];
    for (auto& c : background) c = static_cast<float>(rng.uniform());

    for (;;) {
        std::vector<ShapeInstance> shapes;
        bool placed_all = true;
        for (int i = 0; i < count && placed_all; ++i) {
            ShapeInstance s;
            s.kind = static_cast<ShapeKind>(rng.uniform_int(1, kShapeClasses));
            s.size = rng.uniform(spec.min_size, spec.max_size);
            // Each channel within max_contrast of the background; retry until
            // some channel is at least min_contrast away.
            for (int attempt = 0;; ++attempt) {
                float contrast = 0.0f;
                for (int c = 0; c < 3; ++c) {
                    const double lo = std::max(0.0, background[c] - spec.max_contrast);
                    const double hi = std::min(1.0, background[c] + spec.max_contrast);
                    s.color[c] = static_cast<float>(rng.uniform(lo, hi));
                    contrast = std::max(contrast, std::abs(s.color[c] - background[c]));
                }
                if (contrast >= spec.min_contrast) break;
                if (attempt >= 100) {
                    const float b = background[0], d = static_cast<float>(spec.min_contrast);
                    s.color[0] = b + d <= 1.0f ? b + d : b - d;
                    break;
                }
            }
            bool ok = false;
            for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
                s.cx = rng.uniform(0.5 * s.size, 1.0 - 0.5 * s.size);
                s.cy = rng.uniform(0.5 * s.size, 1.0 - 0.5 * s.size);
                ok = std::all_of(shapes.begin(), shapes.end(), [&](const ShapeInstance& o) {
                    return std::hypot(o.cx - s.cx, o.cy - s.cy) >= spec.min_center_distance;
                });
            }
            if (ok) {
                shapes.push_back(s);
            } else {
                placed_all = false;
            }
        }
        if (!placed_all) {
            --count;
            continue;
        }
        Scene scene = render_scene(spec.image_size, background, shapes);
        if (spec.noise_std > 0.0) {
            for (auto& v : scene.image.data) {
                v = static_cast<float>(std::clamp(v + spec.noise_std * rng.normal(), 0.0, 1.0));
            }
        }
        return scene;
    }
}

/// Snaps every intensity to the nearest 8-bit level, exactly as a PPM
/// save/load round trip would.
inline ImageTensor quantize(const ImageTensor& image) {
    ImageTensor out = image;
    for (auto& v : out.data) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
    return out;
}

/// Rounds to 6 significant decimal digits so written values parse back exactly.
inline double round_significant6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return std::strtod(buf, nullptr);
}

inline std::uint64_t scene_seed(const SceneSpec& spec, const std::string& split, std::size_t index) {
    return derive_seed(spec.seed, "data/" + split, index);
}

/// In-memory split, quantized so it is identical to what generate_dataset writes.
inline std::vector<TrainSample> generate_split(const SceneSpec& spec, const std::string& split, std::size_t n) {
    std::vector<TrainSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(scene_seed(spec, split, i));
        Scene scene = generate_scene(spec, rng);
        for (auto& o : scene.objects) {
            for (double* v : {&o.box.bx, &o.box.by, &o.box.bw, &o.box.bh}) *v = round_significant6(*v);
        }
        out.push_back({quantize(scene.image), std::move(scene.objects)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)

inline Bytes encode_ppm(const ImageTensor& image) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw ShapeError("encode_ppm: expected HxWx3 image, got " + dims_to_string(image.shape));
    }
    const std::string header =
        "P6\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n";
    Bytes out(header.begin(), header.end());
    out.reserve(header.size() + image.size());
    for (float v : image.data) {
        out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    }
    return out;
}

inline ImageTensor decode_ppm(const Bytes& bytes) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&](const char* what) {
        skip_space();
        const std::size_t start = pos;
        long v = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos] - '0');
            if (v > (1L << 20)) throw ParseError(std::string("PPM ") + what + " too large", start);
            ++pos;
        }
        if (pos == start) throw ParseError(std::string("PPM: expected ") + what, start);
        return static_cast<int>(v);
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw ParseError("PPM: missing P6 magic", 0);
    pos = 2;
    const int width = read_int("width");
    const int height = read_int("height");
    const std::size_t maxval_at = pos;
    const int maxval = read_int("maxval");
    if (maxval != 255) throw ParseError("PPM: only maxval 255 is supported", maxval_at);
    if (width <= 0 || height <= 0) throw ParseError("PPM: non-positive dimensions", maxval_at);
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw ParseError("PPM: missing header terminator", pos);
    ++pos;
    const std::size_t payload = static_cast<std::size_t>(width) * height * 3;
    if (bytes.size() - pos < payload) {
        throw ParseError("PPM: truncated payload, expected " + std::to_string(payload) + " bytes", bytes.size());
    }
    if (bytes.size() - pos > payload) throw ParseError("PPM: trailing bytes after payload", pos + payload);
    ImageTensor image({height, width, 3});
    for (std::size_t i = 0; i < payload; ++i) image.data[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
    return image;
}

inline void save_image(const std::filesystem::path& path, const ImageTensor& image) {
    write_file_atomic(path, encode_ppm(image));
}

inline ImageTensor load_image(const std::filesystem::path& path) { return decode_ppm(read_file(path)); }

// ---------------------------------------------------------------------------
// Annotations: {"objects":[{"class_id":int,"bx":..,"by":..,"bw":..,"bh":..}]}

inline std::string annotations_to_json(const std::vector<GroundTruthObject>& objects) {
    nlohmann::ordered_json doc;
    doc["objects"] = nlohmann::ordered_json::array();
    for (const auto& o : objects) {
        nlohmann::ordered_json rec;
        rec["class_id"] = o.class_id;
        rec["bx"] = round_significant6(o.box.bx);
        rec["by"] = round_significant6(o.box.by);
        rec["bw"] = round_significant6(o.box.bw);
        rec["bh"] = round_significant6(o.box.bh);
        doc["objects"].push_back(rec);
    }
    return doc.dump(1) + "\n";
}

inline std::vector<GroundTruthObject> annotations_from_json(const std::string& text, int num_classes = kShapeClasses) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("annotations: ") + e.what(), e.byte);
    }
    if (!doc.is_object() || !doc.contains("objects") || !doc["objects"].is_array()) {
        throw ValidationError("annotations: expected an object with an \"objects\" array");
    }
    std::vector<GroundTruthObject> out;
    std::size_t index = 0;
    for (const auto& rec : doc["objects"]) {
        const std::string where = "annotations: record " + std::to_string(index);
        if (!rec.is_object()) throw ValidationError(where + ": not an object");
        for (const char* key : {"class_id", "bx", "by", "bw", "bh"}) {
            if (!rec.contains(key) || !rec[key].is_number()) {
                throw ValidationError(where + ": missing or non-numeric \"" + key + "\"");
            }
        }
        if (!rec["class_id"].is_number_integer()) throw ValidationError(where + ": class_id must be an integer");
        GroundTruthObject o;
        o.class_id = rec["class_id"].get<int>();
        o.box = {rec["bx"].get<double>(), rec["by"].get<double>(), rec["bw"].get<double>(), rec["bh"].get<double>()};
        try {
            validate_ground_truth(o, num_classes, index);
        } catch (const ValidationError& e) {
            throw ValidationError(std::string("annotations: ") + e.what());
        }
        out.push_back(o);
        ++index;
    }
    return out;
}

inline void save_annotations(const std::filesystem::path& path, const std::vector<GroundTruthObject>& objects) {
    write_file_atomic(path, annotations_to_json(objects));
}

inline std::vector<GroundTruthObject> load_annotations(const std::filesystem::path& path,
                                                       int num_classes = kShapeClasses) {
    const Bytes bytes = read_file(path);
    return annotations_from_json(std::string(bytes.begin(), bytes.end()), num_classes);
}

// ---------------------------------------------------------------------------
// Dataset manifest

struct ManifestEntry {
    std::string image;        // relative to the manifest directory
    std::string annotations;  // relative to the manifest directory
    std::uint64_t seed = 0;
};

struct DatasetManifest {
    std::uint64_t seed = 0;
    SceneSpec spec;
    std::vector<ManifestEntry> train;
    std::vector<ManifestEntry> test;
    std::filesystem::path root;  // directory holding manifest.json; not serialized

    std::size_t entry_count() const { return train.size() + test.size(); }
    const std::vector<ManifestEntry>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "test") return test;
        throw ValidationError("unknown split \"" + name + "\" (expected train or test)");
    }
};

inline nlohmann::ordered_json scene_spec_to_json(const SceneSpec& s) {
    nlohmann::ordered_json j;
    j["image_size"] = s.image_size;
    j["min_objects"] = s.min_objects;
    j["max_objects"] = s.max_objects;
    j["min_size"] = s.min_size;
    j["max_size"] = s.max_size;
    j["noise_std"] = s.noise_std;
    j["min_center_distance"] = s.min_center_distance;
    j["min_contrast"] = s.min_contrast;
    j["max_contrast"] = s.max_contrast;
    j["seed"] = s.seed;
    return j;
}

inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
    SceneSpec s;
    s.image_size = j.at("image_size").get<int>();
    s.min_objects = j.at("min_objects").get<int>();
    s.max_objects = j.at("max_objects").get<int>();
    s.min_size = j.at("min_size").get<double>();
    s.max_size = j.at("max_size").get<double>();
    s.noise_std = j.at("noise_std").get<double>();
    s.min_center_distance = j.at("min_center_distance").get<double>();
    s.min_contrast = j.at("min_contrast").get<double>();
    s.max_contrast = j.at("max_contrast").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

inline std::string manifest_to_json(const DatasetManifest& m) {
    nlohmann::ordered_json doc;
    doc["format"] = "tog-dataset";
    doc["version"] = 1;
    doc["seed"] = m.seed;
    doc["spec"] = scene_spec_to_json(m.spec);
    for (const char* split : {"train", "test"}) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& e : m.split(split)) {
            nlohmann::ordered_json rec;
            rec["image"] = e.image;
            rec["annotations"] = e.annotations;
            rec["seed"] = e.seed;
            arr.push_back(rec);
        }
        doc[split] = arr;
    }
    return doc.dump(1) + "\n";
}

/// Parses a manifest and checks that every referenced file exists.
inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    const Bytes bytes = read_file(path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("manifest: " + std::string(e.what()), e.byte);
    }
    DatasetManifest m;
    m.root = path.parent_path();
    try {
        if (doc.at("format") != "tog-dataset") throw ValidationError("manifest: unexpected format tag");
        m.seed = doc.at("seed").get<std::uint64_t>();
        m.spec = scene_spec_from_json(doc.at("spec"));
        for (const char* split : {"train", "test"}) {
            auto& dst = std::string(split) == "train" ? m.train : m.test;
            for (const auto& rec : doc.at(split)) {
                dst.push_back({rec.at("image").get<std::string>(), rec.at("annotations").get<std::string>(),
                               rec.at("seed").get<std::uint64_t>()});
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("manifest: " + std::string(e.what()));
    }
    for (const auto* split : {&m.train, &m.test}) {
        for (const auto& e : *split) {
            for (const auto& rel : {e.image, e.annotations}) {
                if (!std::filesystem::exists(m.root / rel)) {
                    throw ValidationError("manifest: referenced file missing: " + (m.root / rel).string());
                }
            }
        }
    }
    return m;
}

/// Writes <out_dir>/{train,test}/NNNNNN.{ppm,json} and <out_dir>/manifest.json.
/// Train and test scenes draw from disjoint seed streams.
inline DatasetManifest generate_dataset(const SceneSpec& spec, std::size_t n_train, std::size_t n_test,
                                        const std::filesystem::path& out_dir) {
    spec.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "train", ec);
    if (!ec) std::filesystem::create_directories(out_dir / "test", ec);
    if (ec) throw ValidationError("cannot create output directory " + out_dir.string() + ": " + ec.message());

    DatasetManifest m;
    m.seed = spec.seed;
    m.spec = spec;
    m.root = out_dir;
    for (const auto& [split, n] : {std::pair<std::string, std::size_t>{"train", n_train}, {"test", n_test}}) {
        auto& entries = split == "train" ? m.train : m.test;
        for (std::size_t i = 0; i < n; ++i) {
            char stem[16];
            std::snprintf(stem, sizeof stem, "%06zu", i);
            const std::uint64_t seed = scene_seed(spec, split, i);
            Rng rng(seed);
            const Scene scene = generate_scene(spec, rng);
            ManifestEntry e{split + "/" + stem + ".ppm", split + "/" + stem + ".json", seed};
            save_image(out_dir / e.image, scene.image);
            save_annotations(out_dir / e.annotations, scene.objects);
            entries.push_back(std::move(e));
        }
    }
    write_file_atomic(out_dir / "manifest.json", manifest_to_json(m));
    return m;
}

inline std::vector<TrainSample> load_split(const DatasetManifest& m, const std::string& split) {
    std::vector<TrainSample> out;
    for (const auto& e : m.split(split)) {
        out.push_back({load_image(m.root / e.image), load_annotations(m.root / e.annotations)});
    }
    return out;
}

}  // namespace tog
