// tog: data generation, detector training, TOG attacks, evaluation and
// reporting from one binary. Exit status: 0 ok, 1 usage, 2 validation,
// 3 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tog/tog.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Everything a command can consume. Defaults here are the desk-scale defaults.
struct RunConfig {
    std::uint64_t seed = 7;
    int jobs = 1;
    tog::SceneSpec scene;
    std::size_t n_train = 2000;
    std::size_t n_test = 200;
    tog::DetectorConfig detector;
    tog::TrainOptions train;
    tog::AttackConfig attack;
    tog::UniversalConfig universal;
    std::string split = "test";
    double transfer_threshold = 0.5;
};

std::string optimizer_name(tog::Optimizer o) { return o == tog::Optimizer::adam ? "adam" : "sgd"; }

tog::Optimizer parse_optimizer(const std::string& s) {
    if (s == "adam") return tog::Optimizer::adam;
    if (s == "sgd") return tog::Optimizer::sgd;
    throw tog::ValidationError("optimizer must be \"adam\" or \"sgd\", got \"" + s + "\"");
}

void reject_unknown(const json& obj, const std::string& section, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw tog::ValidationError("config: \"" + section + "\" must be an object");
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, _] : obj.items()) {
        if (!ok.count(key)) {
            std::string list;
            for (const auto& k : ok) list += (list.empty() ? "" : ", ") + k;
            throw tog::ValidationError("config: unknown key \"" + key + "\" in " + section + " (allowed: " + list + ")");
        }
    }
}

template <typename T>
void take(const json& obj, const char* key, T& dst, const std::string& section) {
    if (!obj.contains(key)) return;
    try {
        dst = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw tog::ValidationError("config: " + section + "." + key + " has the wrong type");
    }
}

RunConfig load_run_config(const fs::path& path) {
    const tog::Bytes bytes = tog::read_file(path);
    json doc;
    try {
        doc = json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw tog::ParseError("config " + path.string() + ": " + e.what(), e.byte);
    }
    RunConfig rc;
    reject_unknown(doc, "top level", {"seed", "jobs", "data", "detector", "train", "attack", "universal", "eval"});
    take(doc, "seed", rc.seed, "top level");
    take(doc, "jobs", rc.jobs, "top level");

    if (doc.contains("data")) {
        const auto& d = doc["data"];
        reject_unknown(d, "data", {"train", "test", "image_size", "min_objects", "max_objects", "min_size", "max_size",
                                   "noise_std", "min_center_distance", "min_contrast", "max_contrast"});
        take(d, "train", rc.n_train, "data");
        take(d, "test", rc.n_test, "data");
        take(d, "image_size", rc.scene.image_size, "data");
        take(d, "min_objects", rc.scene.min_objects, "data");
        take(d, "max_objects", rc.scene.max_objects, "data");
        take(d, "min_size", rc.scene.min_size, "data");
        take(d, "max_size", rc.scene.max_size, "data");
        take(d, "noise_std", rc.scene.noise_std, "data");
        take(d, "min_center_distance", rc.scene.min_center_distance, "data");
        take(d, "min_contrast", rc.scene.min_contrast, "data");
        take(d, "max_contrast", rc.scene.max_contrast, "data");
    }
    if (doc.contains("detector")) {
        const auto& d = doc["detector"];
        reject_unknown(d, "detector", {"input_size", "grid", "anchors", "num_classes", "channel_widths", "leaky_slope",
                                       "lambda_noobj", "lambda_loc", "confidence_threshold", "nms_iou_threshold"});
        int size = rc.detector.input_height;
        take(d, "input_size", size, "detector");
        rc.detector.input_height = rc.detector.input_width = size;
        take(d, "grid", rc.detector.grid, "detector");
        if (d.contains("anchors")) {
            std::vector<std::vector<double>> raw;
            take(d, "anchors", raw, "detector");
            rc.detector.anchors.clear();
            for (const auto& a : raw) {
                if (a.size() != 2) throw tog::ValidationError("config: detector.anchors entries must be [w, h]");
                rc.detector.anchors.push_back({a[0], a[1]});
            }
        }
        take(d, "num_classes", rc.detector.num_classes, "detector");
        take(d, "channel_widths", rc.detector.channel_widths, "detector");
        take(d, "leaky_slope", rc.detector.leaky_slope, "detector");
        take(d, "lambda_noobj", rc.detector.lambda_noobj, "detector");
        take(d, "lambda_loc", rc.detector.lambda_loc, "detector");
        take(d, "confidence_threshold", rc.detector.confidence_threshold, "detector");
        take(d, "nms_iou_threshold", rc.detector.nms_iou_threshold, "detector");
    }
    if (doc.contains("train")) {
        const auto& d = doc["train"];
        reject_unknown(d, "train", {"epochs", "learning_rate", "batch_size", "optimizer", "momentum", "beta1", "beta2",
                                    "flip_augment", "max_shift", "cosine_decay", "ignore_iou"});
        take(d, "epochs", rc.train.epochs, "train");
        take(d, "learning_rate", rc.train.learning_rate, "train");
        take(d, "batch_size", rc.train.batch_size, "train");
        if (d.contains("optimizer")) {
            std::string o;
            take(d, "optimizer", o, "train");
            rc.train.optimizer = parse_optimizer(o);
        }
        take(d, "momentum", rc.train.momentum, "train");
        take(d, "beta1", rc.train.beta1, "train");
        take(d, "beta2", rc.train.beta2, "train");
        take(d, "flip_augment", rc.train.flip_augment, "train");
        take(d, "max_shift", rc.train.max_shift, "train");
        take(d, "cosine_decay", rc.train.cosine_decay, "train");
        take(d, "ignore_iou", rc.train.ignore_iou, "train");
    }
    if (doc.contains("attack")) {
        const auto& d = doc["attack"];
        reject_unknown(d, "attack", {"variant", "epsilon", "step_size", "max_iterations", "fabrication_factor",
                                     "fabrication_min_count", "mislabel_match_iou"});
        if (d.contains("variant")) {
            std::string v;
            take(d, "variant", v, "attack");
            rc.attack.variant = tog::parse_variant(v);
        }
        take(d, "epsilon", rc.attack.epsilon, "attack");
        take(d, "step_size", rc.attack.step_size, "attack");
        take(d, "max_iterations", rc.attack.max_iterations, "attack");
        take(d, "fabrication_factor", rc.attack.fabrication_factor, "attack");
        take(d, "fabrication_min_count", rc.attack.fabrication_min_count, "attack");
        take(d, "mislabel_match_iou", rc.attack.mislabel_match_iou, "attack");
    }
    if (doc.contains("universal")) {
        const auto& d = doc["universal"];
        reject_unknown(d, "universal", {"epsilon", "step_size", "epochs", "kappa", "training_set_size"});
        take(d, "epsilon", rc.universal.epsilon, "universal");
        take(d, "step_size", rc.universal.step_size, "universal");
        take(d, "epochs", rc.universal.epochs, "universal");
        take(d, "kappa", rc.universal.kappa, "universal");
        take(d, "training_set_size", rc.universal.training_set_size, "universal");
    }
    if (doc.contains("eval")) {
        const auto& d = doc["eval"];
        reject_unknown(d, "eval", {"split", "transfer_threshold"});
        take(d, "split", rc.split, "eval");
        take(d, "transfer_threshold", rc.transfer_threshold, "eval");
    }
    return rc;
}

ordered_json to_json(const RunConfig& rc) {
    ordered_json j;
    j["seed"] = rc.seed;
    j["jobs"] = rc.jobs;
    auto data = tog::scene_spec_to_json(rc.scene);
    data.erase("seed");
    data["train"] = rc.n_train;
    data["test"] = rc.n_test;
    j["data"] = data;
    ordered_json det;
    det["input_size"] = rc.detector.input_height;
    det["grid"] = rc.detector.grid;
    auto anchors = ordered_json::array();
    for (const auto& a : rc.detector.anchors) anchors.push_back({a.w, a.h});
    det["anchors"] = anchors;
    det["num_classes"] = rc.detector.num_classes;
    det["channel_widths"] = rc.detector.channel_widths;
    det["leaky_slope"] = rc.detector.leaky_slope;
    det["lambda_noobj"] = rc.detector.lambda_noobj;
    det["lambda_loc"] = rc.detector.lambda_loc;
    det["confidence_threshold"] = rc.detector.confidence_threshold;
    det["nms_iou_threshold"] = rc.detector.nms_iou_threshold;
    j["detector"] = det;
    j["train"] = {{"epochs", rc.train.epochs},
                  {"learning_rate", rc.train.learning_rate},
                  {"batch_size", rc.train.batch_size},
                  {"optimizer", optimizer_name(rc.train.optimizer)},
                  {"momentum", rc.train.momentum},
                  {"beta1", rc.train.beta1},
                  {"beta2", rc.train.beta2},
                  {"flip_augment", rc.train.flip_augment},
                  {"max_shift", rc.train.max_shift},
                  {"cosine_decay", rc.train.cosine_decay},
                  {"ignore_iou", rc.train.ignore_iou}};
    j["attack"] = {{"variant", std::string(tog::variant_name(rc.attack.variant))},
                   {"epsilon", rc.attack.epsilon},
                   {"step_size", rc.attack.step_size},
                   {"max_iterations", rc.attack.max_iterations},
                   {"fabrication_factor", rc.attack.fabrication_factor},
                   {"fabrication_min_count", rc.attack.fabrication_min_count},
                   {"mislabel_match_iou", rc.attack.mislabel_match_iou}};
    j["universal"] = {{"epsilon", rc.universal.epsilon},
                      {"step_size", rc.universal.step_size},
                      {"epochs", rc.universal.epochs},
                      {"kappa", rc.universal.kappa},
                      {"training_set_size", rc.universal.training_set_size}};
    j["eval"] = {{"split", rc.split}, {"transfer_threshold", rc.transfer_threshold}};
    return j;
}

// Flag values; unset flags leave the config-file (or default) value alone.
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    std::optional<std::size_t> n_train, n_test;
    std::optional<int> epochs, batch_size, iterations, u_epochs;
    std::optional<double> lr, epsilon, alpha, kappa, u_epsilon, u_alpha, threshold;
    std::optional<std::size_t> u_size;
    std::optional<std::string> optimizer, variant, split;
};

void apply(RunConfig& rc, const Overrides& o) {
    if (o.seed) rc.seed = *o.seed;
    if (o.jobs) rc.jobs = *o.jobs;
    if (o.n_train) rc.n_train = *o.n_train;
    if (o.n_test) rc.n_test = *o.n_test;
    if (o.epochs) rc.train.epochs = *o.epochs;
    if (o.batch_size) rc.train.batch_size = *o.batch_size;
    if (o.lr) rc.train.learning_rate = *o.lr;
    if (o.optimizer) rc.train.optimizer = parse_optimizer(*o.optimizer);
    if (o.variant) {
        try {
            rc.attack.variant = tog::parse_variant(*o.variant);
        } catch (const tog::ValidationError& e) {
            throw UsageError(e.what());
        }
    }
    if (o.epsilon) rc.attack.epsilon = *o.epsilon;
    if (o.alpha) rc.attack.step_size = *o.alpha;
    if (o.iterations) rc.attack.max_iterations = *o.iterations;
    if (o.u_epsilon) rc.universal.epsilon = *o.u_epsilon;
    if (o.u_alpha) rc.universal.step_size = *o.u_alpha;
    if (o.u_epochs) rc.universal.epochs = *o.u_epochs;
    if (o.kappa) rc.universal.kappa = *o.kappa;
    if (o.u_size) rc.universal.training_set_size = *o.u_size;
    if (o.split) rc.split = *o.split;
    if (o.threshold) rc.transfer_threshold = *o.threshold;

    // One root seed feeds every named sub-stream.
    rc.scene.seed = rc.seed;
    rc.detector.seed = rc.seed;
    rc.train.seed = rc.seed;
    rc.universal.seed = rc.seed;
    rc.detector.input_width = rc.detector.input_height;
    if (rc.jobs < 1) throw tog::ValidationError("jobs must be >= 1");
    if (rc.split != "train" && rc.split != "test") throw tog::ValidationError("split must be train or test");
}

void echo(const std::string& command, const RunConfig& rc, const ordered_json& paths) {
    ordered_json j;
    j["command"] = command;
    j["paths"] = paths;
    j["config"] = to_json(rc);
    std::cout << "effective config:\n" << j.dump(2) << "\n" << std::flush;
}

void check_train_options(const tog::TrainOptions& t) {
    std::vector<std::string> problems;
    if (t.epochs < 0) problems.push_back("epochs must be >= 0");
    if (!(t.learning_rate >= 0.0)) problems.push_back("learning_rate must be non-negative");
    if (t.batch_size < 1) problems.push_back("batch_size must be >= 1");
    if (t.max_shift < 0) problems.push_back("max_shift must be >= 0");
    if (!(t.ignore_iou >= 0.0)) problems.push_back("ignore_iou must be non-negative");
    if (!problems.empty()) {
        std::string msg = "invalid training options:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw tog::ValidationError(msg);
    }
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string stem_of(const std::string& rel) { return fs::path(rel).stem().string(); }

// ---------------------------------------------------------------------------

void cmd_gen_data(const RunConfig& rc, const std::string& out) {
    echo("gen-data", rc, {{"out", out}});
    const auto m = tog::generate_dataset(rc.scene, rc.n_train, rc.n_test, out);
    std::cout << "wrote " << m.train.size() << " train + " << m.test.size() << " test scenes (seed " << m.seed
              << ") to " << (fs::path(out) / "manifest.json").string() << "\n";
}

void cmd_train(const RunConfig& rc, const std::string& data, const std::string& out) {
    echo("train", rc, {{"data", data}, {"out", out}});
    check_train_options(rc.train);
    const auto manifest = tog::load_manifest(data);
    const auto samples = tog::load_split(manifest, "train");
    rc.detector.validate();
    if (manifest.spec.image_size != rc.detector.input_height) {
        throw tog::ValidationError("dataset image_size " + std::to_string(manifest.spec.image_size) +
                                   " does not match detector input_size " +
                                   std::to_string(rc.detector.input_height));
    }
    const auto start = std::chrono::steady_clock::now();
    const auto result = tog::train(rc.detector, samples, rc.train, [&](int epoch, double loss) {
        const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("epoch %d loss %.6f (%.1fs)\n", epoch, loss, t);
        std::fflush(stdout);
    });
    tog::save_checkpoint(out, result.weights);
    std::cout << "saved " << out << " (" << result.weights.parameter_count() << " parameters)\n";
    if (!manifest.test.empty()) {
        const auto test = tog::load_split(manifest, "test");
        const auto report = tog::evaluate(result.weights, test, nullptr, rc.jobs);
        std::printf("benign mAP %.6f on %zu test scenes\n", report.mAP, test.size());
    }
}

void cmd_attack(const RunConfig& rc, const std::string& model, const std::string& data, const std::string& eta_path,
                const std::string& out) {
    echo("attack", rc, {{"model", model}, {"data", data}, {"eta", eta_path}, {"out", out}});
    rc.attack.validate();
    const auto detector = tog::load_checkpoint(model);
    const auto manifest = tog::load_manifest(data);
    const auto samples = tog::load_split(manifest, rc.split);
    tog::AttackPlan plan{rc.attack, std::nullopt};
    if (rc.attack.variant == tog::AttackVariant::universal_apply) {
        if (eta_path.empty()) throw UsageError("--variant universal needs --eta");
        plan.eta = tog::load_perturbation(eta_path);
    }
    const auto set = tog::perturb_dataset(detector, samples, plan, rc.jobs);

    fs::create_directories(out);
    const auto& entries = manifest.split(rc.split);
    std::ostringstream log;
    log << "image,benign_detections,adversarial_detections,success,iterations,skipped,linf\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::string name = stem_of(entries[i].image) + ".ppm";
        tog::save_image(fs::path(out) / name, set.images[i]);
        const auto adv = tog::detect(detector, set.images[i]);
        log << name << ',' << set.benign[i].size() << ',' << adv.size() << ',' << (set.success[i] ? 1 : 0) << ','
            << set.iterations[i] << ',' << (set.skipped[i] ? 1 : 0) << ','
            << tog::format_fixed(tog::linf_distance(set.images[i], samples[i].image), 6) << '\n';
    }
    tog::write_file_atomic(fs::path(out) / "attack_log.csv", log.str());
    const auto successes = std::count(set.success.begin(), set.success.end(), true);
    std::cout << "attacked " << samples.size() << " images, " << successes << " successful; log at "
              << (fs::path(out) / "attack_log.csv").string() << "\n";
}

void cmd_universal(const RunConfig& rc, const std::string& model, const std::string& data, const std::string& out,
                   std::string log_path) {
    if (log_path.empty()) log_path = out + ".log.csv";
    echo("universal", rc, {{"model", model}, {"data", data}, {"out", out}, {"log", log_path}});
    rc.universal.validate();
    const auto detector = tog::load_checkpoint(model);
    const auto manifest = tog::load_manifest(data);
    auto samples = tog::load_split(manifest, "train");
    if (samples.empty()) throw tog::ValidationError("universal: the train split is empty");
    std::vector<tog::ImageTensor> images;
    for (std::size_t i = 0; i < samples.size() && i < rc.universal.training_set_size; ++i) {
        images.push_back(samples[i].image);
    }
    std::ostringstream log;
    log << "epoch,vanish_rate\n";
    const auto result = tog::train_universal(detector, images, rc.universal, [&](int epoch, double rate) {
        log << epoch << ',' << tog::format_fixed(rate) << '\n';
        std::printf("epoch %d vanish rate %.4f\n", epoch, rate);
        std::fflush(stdout);
    });
    tog::save_perturbation(out, result.eta);
    tog::write_file_atomic(log_path, log.str());
    std::cout << "saved " << out << (result.reached_kappa ? " (reached kappa)" : " (epoch budget exhausted)")
              << "\n";
}

void cmd_eval(const RunConfig& rc, const std::string& model, const std::string& data, const std::string& attacks,
              const std::string& eta_path, const std::string& out) {
    echo("eval", rc, {{"model", model}, {"data", data}, {"attacks", attacks}, {"eta", eta_path}, {"out", out}});
    const auto detector = tog::load_checkpoint(model);
    const auto manifest = tog::load_manifest(data);
    const auto samples = tog::load_split(manifest, rc.split);
    if (samples.empty()) throw tog::ValidationError("eval: split \"" + rc.split + "\" is empty");

    std::vector<tog::AttackPlan> plans;
    for (const auto& name : split_list(attacks)) {
        if (name == "benign") continue;
        tog::AttackPlan plan{rc.attack, std::nullopt};
        try {
            plan.config.variant = tog::parse_variant(name);
        } catch (const tog::ValidationError& e) {
            throw UsageError(e.what());
        }
        if (plan.config.variant == tog::AttackVariant::universal_apply) {
            if (eta_path.empty()) throw UsageError("attack \"universal\" needs --eta");
            plan.eta = tog::load_perturbation(eta_path);
        } else {
            plan.config.validate();
        }
        plans.push_back(std::move(plan));
    }

    std::vector<tog::EvalReport> reports{tog::evaluate(detector, samples, nullptr, rc.jobs)};
    std::printf("%-12s mAP %.4f dets/img %.3f precision %.3f recall %.3f\n", "benign", reports[0].mAP,
                reports[0].detection_count_mean, reports[0].precision, reports[0].recall);
    for (const auto& plan : plans) {
        reports.push_back(tog::evaluate(detector, samples, &plan, rc.jobs));
        const auto& r = reports.back();
        std::printf("%-12s mAP %.4f dets/img %.3f precision %.3f recall %.3f linf %.6f s/img %.5f\n",
                    r.condition.c_str(), r.mAP, r.detection_count_mean, r.precision, r.recall,
                    r.attack->linf_distortion_max, r.attack->mean_attack_seconds);
    }
    tog::write_file_atomic(out, tog::reports_to_csv(reports));

    std::ostringstream attack_csv;
    attack_csv << "condition,vanish_rate,fabrication_ratio,mislabel_rate,box_retention,target_class_rate,"
                  "zero_detection_fraction,success_rate,linf_distortion_max,all_pixels_valid,skipped\n";
    for (const auto& r : reports) {
        if (!r.attack) continue;
        const auto& a = *r.attack;
        attack_csv << r.condition << ',' << tog::format_fixed(a.vanish_rate) << ',' << tog::format_fixed(a.fabrication_ratio)
                   << ',' << tog::format_fixed(a.mislabel_rate) << ',' << tog::format_fixed(a.box_retention) << ','
                   << tog::format_fixed(a.target_class_rate) << ',' << tog::format_fixed(a.zero_detection_fraction)
                   << ',' << tog::format_fixed(a.success_rate) << ',' << tog::format_fixed(a.linf_distortion_max)
                   << ',' << (a.all_pixels_valid ? 1 : 0) << ',' << a.skipped << '\n';
    }
    if (!plans.empty()) {
        const fs::path side = fs::path(out).replace_extension("").string() + "_attacks.csv";
        tog::write_file_atomic(side, attack_csv.str());
    }
    std::cout << "wrote " << out << "\n";
}

void cmd_transfer(const RunConfig& rc, const std::vector<std::string>& models, const std::vector<std::string>& etas,
                  const std::string& data, const std::string& attacks, const std::string& out) {
    if (models.size() < 2) throw UsageError("transfer needs at least 2 --model checkpoints");
    echo("transfer", rc, {{"models", models}, {"etas", etas}, {"data", data}, {"attacks", attacks}, {"out", out}});
    std::vector<tog::Detector> detectors;
    for (const auto& m : models) detectors.push_back(tog::load_checkpoint(m));
    const auto manifest = tog::load_manifest(data);
    const auto samples = tog::load_split(manifest, rc.split);
    if (samples.empty()) throw tog::ValidationError("transfer: split \"" + rc.split + "\" is empty");

    std::vector<std::vector<tog::AttackPlan>> plans(models.size());
    for (const auto& name : split_list(attacks)) {
        tog::AttackVariant v;
        try {
            v = tog::parse_variant(name);
        } catch (const tog::ValidationError& e) {
            throw UsageError(e.what());
        }
        if (v == tog::AttackVariant::universal_apply && etas.size() != models.size()) {
            throw UsageError("attack \"universal\" needs one --eta per --model");
        }
        for (std::size_t s = 0; s < models.size(); ++s) {
            tog::AttackPlan plan{rc.attack, std::nullopt};
            plan.config.variant = v;
            if (v == tog::AttackVariant::universal_apply) {
                plan.eta = tog::load_perturbation(etas[s]);
            } else {
                plan.config.validate();
            }
            plans[s].push_back(std::move(plan));
        }
    }
    if (plans.front().empty()) throw UsageError("transfer needs at least one attack");
    const auto cells = tog::transfer_matrix(detectors, plans, samples, rc.transfer_threshold, rc.jobs);
    std::vector<std::string> names;
    for (const auto& m : models) names.push_back(fs::path(m).stem().string());
    fs::create_directories(out);
    tog::write_file_atomic(fs::path(out) / "transfer.csv", tog::transfer_to_csv(cells));
    tog::write_file_atomic(fs::path(out) / "transfer.md", tog::transfer_to_markdown(cells, names));
    std::cout << tog::transfer_to_markdown(cells, names);
}

void cmd_report(const std::vector<std::string>& metrics, const std::vector<std::string>& names,
                const std::string& out) {
    if (!names.empty() && names.size() != metrics.size()) throw UsageError("--name must be given once per --metrics");
    std::vector<std::pair<std::string, std::vector<tog::CsvRow>>> detectors;
    for (std::size_t i = 0; i < metrics.size(); ++i) {
        const auto bytes = tog::read_file(metrics[i]);
        const std::string label = names.empty() ? fs::path(metrics[i]).stem().string() : names[i];
        detectors.emplace_back(label, tog::parse_metrics_csv(std::string(bytes.begin(), bytes.end())));
    }
    std::string md = "# Detection mAP under attack\n\n" + tog::markdown_summary(detectors);
    tog::write_file_atomic(out, md);
    std::cout << md;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Train a micro detector on synthetic shapes and attack it with TOG"};
    app.require_subcommand(1);

    std::string config_path;
    Overrides ov;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON run config; flags override it")->check(CLI::ExistingFile);
        sub->add_option("--seed", ov.seed, "root seed for every random stream");
        sub->add_option("--jobs", ov.jobs, "worker threads for per-image work");
    };

    std::string out, data, model, eta, log_path, attacks = "benign";
    std::vector<std::string> models, etas, metrics, names;

    auto* gen = app.add_subcommand("gen-data", "render the synthetic shapes dataset");
    common(gen);
    gen->add_option("--train", ov.n_train, "train scenes");
    gen->add_option("--test", ov.n_test, "test scenes");
    gen->add_option("--out", out, "output directory")->required();

    auto* tr = app.add_subcommand("train", "train a detector");
    common(tr);
    tr->add_option("--data", data, "dataset manifest")->required();
    tr->add_option("--out", out, "checkpoint path (.togw)")->required();
    tr->add_option("--epochs", ov.epochs);
    tr->add_option("--lr", ov.lr, "learning rate");
    tr->add_option("--batch-size", ov.batch_size);
    tr->add_option("--optimizer", ov.optimizer, "adam or sgd");

    auto* at = app.add_subcommand("attack", "attack every image of a split");
    common(at);
    at->add_option("--model", model)->required();
    at->add_option("--data", data)->required();
    at->add_option("--out", out, "output directory")->required();
    at->add_option("--variant", ov.variant, tog::valid_variant_list());
    at->add_option("--epsilon", ov.epsilon);
    at->add_option("--alpha", ov.alpha, "step size");
    at->add_option("--iterations", ov.iterations);
    at->add_option("--eta", eta, "perturbation file for the universal variant");
    at->add_option("--split", ov.split);

    auto* un = app.add_subcommand("universal", "train a universal perturbation");
    common(un);
    un->add_option("--model", model)->required();
    un->add_option("--data", data)->required();
    un->add_option("--out", out, "perturbation path (.togp)")->required();
    un->add_option("--log", log_path, "per-epoch log CSV (default <out>.log.csv)");
    un->add_option("--epsilon", ov.u_epsilon);
    un->add_option("--alpha", ov.u_alpha, "step size");
    un->add_option("--epochs", ov.u_epochs);
    un->add_option("--kappa", ov.kappa, "target vanish percentage");
    un->add_option("--size", ov.u_size, "training images");

    auto* ev = app.add_subcommand("eval", "score a detector, optionally under attack");
    common(ev);
    ev->add_option("--model", model)->required();
    ev->add_option("--data", data)->required();
    ev->add_option("--out", out, "metrics CSV")->required();
    ev->add_option("--attacks", attacks, "comma list: benign," + tog::valid_variant_list());
    ev->add_option("--eta", eta);
    ev->add_option("--epsilon", ov.epsilon);
    ev->add_option("--alpha", ov.alpha);
    ev->add_option("--iterations", ov.iterations);
    ev->add_option("--split", ov.split);

    auto* tf = app.add_subcommand("transfer", "transferability matrix across detectors");
    common(tf);
    tf->add_option("--model", models, "checkpoints (at least 2)")->required();
    tf->add_option("--eta", etas, "one perturbation per model, for universal");
    tf->add_option("--data", data)->required();
    tf->add_option("--out", out, "output directory")->required();
    tf->add_option("--attacks", attacks, "comma list of attacks (default vanishing)");
    tf->add_option("--threshold", ov.threshold, "transfer verdict threshold (relative mAP)");
    tf->add_option("--split", ov.split);

    auto* rp = app.add_subcommand("report", "markdown table from metrics CSVs");
    rp->add_option("--metrics", metrics, "metrics CSV per detector")->required();
    rp->add_option("--name", names, "row label per metrics file");
    rp->add_option("--out", out, "markdown path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        RunConfig rc = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        apply(rc, ov);
        if (*gen) cmd_gen_data(rc, out);
        if (*tr) cmd_train(rc, data, out);
        if (*at) cmd_attack(rc, model, data, eta, out);
        if (*un) cmd_universal(rc, model, data, out, log_path);
        if (*ev) cmd_eval(rc, model, data, attacks, eta, out);
        if (*tf) cmd_transfer(rc, models, etas, data, attacks == "benign" ? "vanishing" : attacks, out);
        if (*rp) cmd_report(metrics, names, out);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const tog::ValidationError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return kExitValidation;
    } catch (const tog::ParseError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return kExitValidation;
    } catch (const tog::ShapeError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
