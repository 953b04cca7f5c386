#include <gtest/gtest.h>

#include <filesystem>

#include "tog/attacks.hpp"

namespace {

// Untrained backbone with head biases set so every anchor-0 slot fires as class 1.
tog::Detector eager_detector() {
    auto d = tog::build_detector(tog::DetectorConfig{});
    auto& head = d.layers.back();
    head.bias[4] = 2.0f;
    head.bias[5] = 3.0f;
    head.bias[8 + 4] = -6.0f;
    return d;
}

tog::ImageTensor random_image(std::uint64_t seed) {
    tog::Rng rng(seed);
    tog::ImageTensor img({64, 64, 3});
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

tog::DetectedObject det(double bx, double by, double w, double h, int cls) { return {{bx, by, w, h}, cls, 0.9, 0}; }

}  // namespace

TEST(Variant, NamesRoundTripAndUnknownListsAll) {
    for (auto v : tog::kAllVariants) EXPECT_EQ(tog::parse_variant(tog::variant_name(v)), v);
    try {
        tog::parse_variant("vanish");
        FAIL();
    } catch (const tog::ValidationError& e) {
        const std::string msg = e.what();
        for (const char* n : {"vanishing", "fabrication", "mislabel_ml", "mislabel_ll", "universal"}) {
            EXPECT_NE(msg.find(n), std::string::npos) << n;
        }
    }
}

TEST(Config, DefaultsAndValidation) {
    tog::AttackConfig c;
    EXPECT_DOUBLE_EQ(c.epsilon, 0.031);
    EXPECT_DOUBLE_EQ(c.step_size, 0.008);
    EXPECT_EQ(c.max_iterations, 10);
    EXPECT_NO_THROW(c.validate());
    c.step_size = 0.05;
    EXPECT_THROW(c.validate(), tog::ValidationError);
    c.epsilon = 0.0;
    EXPECT_NO_THROW(c.validate());
    c.norm = "l2";
    EXPECT_THROW(c.validate(), tog::ValidationError);

    tog::UniversalConfig u;
    EXPECT_EQ(u.epochs, 20);
    EXPECT_EQ(u.training_set_size, 512u);
    EXPECT_DOUBLE_EQ(u.kappa, 95.0);
}

TEST(Sign, ValuesAndZero) {
    tog::Tensor g({4}, {-0.3f, 0.0f, 2.0f, -0.0f});
    EXPECT_EQ(tog::sign(g).data, (std::vector<float>{-1, 0, 1, 0}));
}

TEST(Project, ClampsToBallThenUnitRange) {
    tog::Tensor x({4}, {0.5f, 0.01f, 0.99f, 0.5f});
    tog::Tensor cand({4}, {0.6f, -0.2f, 1.5f, 0.49f});
    const auto p = tog::project_linf(cand, x, 0.031);
    EXPECT_FLOAT_EQ(p.data[0], 0.531f);
    EXPECT_FLOAT_EQ(p.data[1], 0.0f);
    EXPECT_FLOAT_EQ(p.data[2], 1.0f);
    EXPECT_FLOAT_EQ(p.data[3], 0.49f);
    EXPECT_LE(tog::linf_distance(p, x), 0.031 + 1e-6);
}

TEST(Project, RandomCandidatesStayInBudget) {
    tog::Rng rng(17);
    for (int t = 0; t < 200; ++t) {
        tog::Tensor x({10}), c({10});
        for (std::size_t i = 0; i < 10; ++i) {
            x.data[i] = static_cast<float>(rng.uniform());
            c.data[i] = static_cast<float>(rng.uniform(-0.5, 1.5));
        }
        const double eps = rng.uniform(0.0, 0.1);
        const auto p = tog::project_linf(c, x, eps);
        EXPECT_LE(tog::linf_distance(p, x), eps + 1e-6);
        for (float v : p.data) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
}

TEST(Targets, MostAndLeastLikely) {
    EXPECT_EQ(tog::most_likely_target({0.7, 0.2, 0.1}, 1), 2);
    EXPECT_EQ(tog::least_likely_target({0.7, 0.2, 0.1}, 1), 3);
    EXPECT_EQ(tog::most_likely_target({0.1, 0.3, 0.3}, 2), 1);  // both top classes skipped
    EXPECT_EQ(tog::least_likely_target({0.1, 0.1, 0.9}, 3), 1);
    EXPECT_EQ(tog::most_likely_target({0.4, 0.4, 0.4}, 1), 2);
    EXPECT_EQ(tog::least_likely_target({0.4, 0.4, 0.4}, 1), 2);
}

TEST(Targets, VanishingIsEmptyFabricationCopiesDetections) {
    const auto d = eager_detector();
    const auto img = random_image(1);
    const auto v = tog::build_target(d, img, tog::AttackVariant::vanishing);
    EXPECT_TRUE(v.target_objects.empty());
    EXPECT_EQ(v.loss_sign, 1);
    EXPECT_EQ(v.assignment.assigned_count(), 0);

    const auto f = tog::build_target(d, img, tog::AttackVariant::fabrication);
    ASSERT_FALSE(f.benign.empty());
    EXPECT_EQ(f.target_objects.size(), f.benign.size());
    EXPECT_EQ(f.loss_sign, -1);

    const auto ml = tog::build_target(d, img, tog::AttackVariant::mislabel_ml);
    const auto ll = tog::build_target(d, img, tog::AttackVariant::mislabel_ll);
    for (std::size_t i = 0; i < ml.target_objects.size(); ++i) {
        EXPECT_NE(ml.target_objects[i].class_id, ml.benign[i].class_id);
        EXPECT_NE(ll.target_objects[i].class_id, ll.benign[i].class_id);
    }
}

TEST(Targets, NoDetectionsIsAnExplicitError) {
    auto d = tog::build_detector(tog::DetectorConfig{});
    for (std::size_t i = 0; i < d.layers.back().bias.size(); i += 8) d.layers.back().bias[i + 4] = -10.0f;
    const auto img = random_image(2);
    ASSERT_TRUE(tog::detect(d, img).empty());
    EXPECT_THROW(tog::build_target(d, img, tog::AttackVariant::fabrication), tog::EmptyDetectionsError);
    EXPECT_THROW(tog::build_target(d, img, tog::AttackVariant::mislabel_ll), tog::EmptyDetectionsError);
    EXPECT_NO_THROW(tog::build_target(d, img, tog::AttackVariant::vanishing));
}

TEST(Success, FabricationThresholds) {
    tog::AttackConfig c;
    c.variant = tog::AttackVariant::fabrication;
    const std::vector<tog::DetectedObject> benign(2, det(0.5, 0.5, 0.2, 0.2, 1));
    const tog::DetectionTarget target;
    EXPECT_TRUE(tog::attack_success(benign, std::vector(11, det(0.3, 0.3, 0.1, 0.1, 1)), target, c.variant, c));
    EXPECT_FALSE(tog::attack_success(benign, std::vector(4, det(0.3, 0.3, 0.1, 0.1, 1)), target, c.variant, c));
    // One benign box: 3x would be 3, the floor of 5 still applies.
    const std::vector<tog::DetectedObject> one(1, det(0.5, 0.5, 0.2, 0.2, 1));
    EXPECT_FALSE(tog::attack_success(one, std::vector(4, det(0.3, 0.3, 0.1, 0.1, 1)), target, c.variant, c));
}

TEST(Success, MislabelNeedsEveryMatchOnTarget) {
    tog::AttackConfig c;
    const auto v = tog::AttackVariant::mislabel_ml;
    tog::DetectionTarget target;
    const std::vector<tog::DetectedObject> benign = {det(0.3, 0.3, 0.2, 0.2, 1), det(0.7, 0.7, 0.2, 0.2, 2)};
    target.target_objects = {{{0.3, 0.3, 0.2, 0.2}, 2}, {{0.7, 0.7, 0.2, 0.2}, 3}};
    EXPECT_TRUE(tog::attack_success(benign, {det(0.31, 0.3, 0.2, 0.2, 2)}, target, v, c));
    EXPECT_FALSE(tog::attack_success(benign, {det(0.31, 0.3, 0.2, 0.2, 2), det(0.7, 0.7, 0.2, 0.2, 2)}, target, v, c));
    EXPECT_FALSE(tog::attack_success(benign, {}, target, v, c));
    EXPECT_FALSE(tog::attack_success(benign, {det(0.1, 0.9, 0.05, 0.05, 2)}, target, v, c));
}

TEST(Attack, BudgetHoldsForEveryVariant) {
    const auto d = eager_detector();
    for (std::uint64_t s = 0; s < 3; ++s) {
        const auto img = random_image(10 + s);
        for (auto v : {tog::AttackVariant::vanishing, tog::AttackVariant::fabrication, tog::AttackVariant::mislabel_ml,
                       tog::AttackVariant::mislabel_ll}) {
            tog::AttackConfig c;
            c.variant = v;
            const auto r = tog::tog_attack(d, img, c);
            EXPECT_LE(tog::linf_distance(r.adversarial, img), 0.031 + 1e-6);
            for (float x : r.adversarial.data) {
                ASSERT_GE(x, 0.0f);
                ASSERT_LE(x, 1.0f);
            }
            EXPECT_LE(r.iterations, 10);
            EXPECT_EQ(r.log.size(), static_cast<std::size_t>(r.iterations) + 1);
        }
    }
}

TEST(Attack, ZeroStepOrZeroBudgetReturnsInput) {
    const auto d = eager_detector();
    const auto img = random_image(4);
    tog::AttackConfig c;
    c.step_size = 0.0;
    EXPECT_EQ(tog::tog_attack(d, img, c).adversarial, img);
    c.step_size = 0.008;
    c.epsilon = 0.0;
    EXPECT_EQ(tog::tog_attack(d, img, c).adversarial, img);
}

TEST(Attack, DeterministicAndUniversalVariantRejected) {
    const auto d = eager_detector();
    const auto img = random_image(5);
    tog::AttackConfig c;
    c.variant = tog::AttackVariant::fabrication;
    EXPECT_EQ(tog::tog_attack(d, img, c).adversarial, tog::tog_attack(d, img, c).adversarial);
    c.variant = tog::AttackVariant::universal_apply;
    EXPECT_THROW(tog::tog_attack(d, img, c), tog::ValidationError);
}

TEST(Attack, VanishingLowersObjectness) {
    const auto d = eager_detector();
    const auto img = random_image(6);
    tog::AttackConfig c;
    const auto r = tog::tog_attack(d, img, c);
    auto mean_obj = [&](const tog::ImageTensor& x) {
        double s = 0;
        const auto cands = tog::decode(tog::raw_head(d, x), d.config);
        for (const auto& cd : cands) s += cd.objectness;
        return s / cands.size();
    };
    EXPECT_LT(mean_obj(r.adversarial), mean_obj(img));
}

TEST(Universal, EtaBoundedZeroStepAndDeterministic) {
    const auto d = eager_detector();
    std::vector<tog::ImageTensor> imgs;
    for (std::uint64_t s = 0; s < 4; ++s) imgs.push_back(random_image(20 + s));
    tog::UniversalConfig u;
    u.epochs = 2;
    u.step_size = 0.01;
    const auto r = tog::train_universal(d, imgs, u);
    EXPECT_LE(tog::max_abs(r.eta.delta.values()), static_cast<float>(u.epsilon));
    EXPECT_LE(r.epoch_vanish_rate.size(), 2u);
    EXPECT_EQ(tog::train_universal(d, imgs, u).eta, r.eta);

    u.step_size = 0.0;
    const auto z = tog::train_universal(d, imgs, u);
    EXPECT_EQ(tog::max_abs(z.eta.delta.values()), 0.0f);
    EXPECT_EQ(tog::apply_universal(imgs[0], z.eta), imgs[0]);
    EXPECT_THROW(tog::train_universal(d, {}, u), tog::ValidationError);
}

TEST(Universal, VanishRateDefinition) {
    EXPECT_DOUBLE_EQ(tog::vanish_rate(10, 3), 0.7);
    EXPECT_DOUBLE_EQ(tog::vanish_rate(10, 15), 0.0);
    EXPECT_DOUBLE_EQ(tog::vanish_rate(0, 0), 1.0);
}

TEST(Perturbation, RoundTripAndCorruption) {
    tog::Rng rng(8);
    tog::Perturbation p{tog::Tensor({64, 64, 3}), 0.031};
    for (auto& v : p.delta.data) v = static_cast<float>(rng.uniform(-0.031, 0.031));
    const auto bytes = tog::serialize_perturbation(p);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TOGP");
    EXPECT_EQ(tog::deserialize_perturbation(bytes), p);
    EXPECT_EQ(bytes.size(), 4u + 2 + 8 + 4 + 12 + 64 * 64 * 3 * 4);

    const auto path = std::filesystem::temp_directory_path() / "tog_test_eta.togp";
    tog::save_perturbation(path, p);
    EXPECT_EQ(tog::load_perturbation(path), p);
    std::filesystem::remove(path);

    auto truncated = bytes;
    truncated.resize(100);
    EXPECT_THROW(tog::deserialize_perturbation(truncated), tog::ParseError);
    auto bad = bytes;
    bad[3] = 'W';
    EXPECT_THROW(tog::deserialize_perturbation(bad), tog::ParseError);
}
