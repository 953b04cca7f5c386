#include <gtest/gtest.h>

#include <filesystem>

#include "tog/data.hpp"

namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("tog_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    const auto b = tog::read_file(p);
    return {b.begin(), b.end()};
}

}  // namespace

TEST(Render, SquareBoxMatchesGeometry) {
    const float bg[3] = {0, 0, 0};
    tog::ShapeInstance s;
    s.kind = tog::ShapeKind::square;
    s.size = 0.2;
    const auto scene = tog::render_scene(64, bg, {s});
    ASSERT_EQ(scene.objects.size(), 1u);
    const auto& b = scene.objects[0].box;
    const double px = 1.0 / 64;
    EXPECT_NEAR(b.bx, 0.5, px);
    EXPECT_NEAR(b.by, 0.5, px);
    EXPECT_NEAR(b.bw, 0.2, px);
    EXPECT_NEAR(b.bh, 0.2, px);
    EXPECT_EQ(scene.objects[0].class_id, 2);
    // Pixel centres 26.5/64 .. 37.5/64 fall inside [0.4, 0.6]: 12 pixels.
    EXPECT_DOUBLE_EQ(b.bw, 12.0 / 64);
    EXPECT_DOUBLE_EQ(b.bx, 0.5);
}

TEST(Render, TriangleAndCircleBoxesAreTight) {
    const float bg[3] = {0, 0, 0};
    for (auto kind : {tog::ShapeKind::circle, tog::ShapeKind::triangle}) {
        tog::ShapeInstance s;
        s.kind = kind;
        s.cx = 0.4;
        s.cy = 0.6;
        s.size = 0.3;
        const auto scene = tog::render_scene(64, bg, {s});
        ASSERT_EQ(scene.objects.size(), 1u);
        const auto& b = scene.objects[0].box;
        // Every painted pixel lies inside the box, and each box edge touches paint.
        int painted = 0;
        for (int y = 0; y < 64; ++y) {
            for (int x = 0; x < 64; ++x) {
                if (scene.image.at(y, x, 0) == 0.0f) continue;
                ++painted;
                EXPECT_GE((x + 0.5) / 64, b.left());
                EXPECT_LE((x + 0.5) / 64, b.right());
                EXPECT_GE((y + 0.5) / 64, b.top());
                EXPECT_LE((y + 0.5) / 64, b.bottom());
            }
        }
        EXPECT_GT(painted, 0);
        EXPECT_NEAR(b.bh, 0.3, 2.0 / 64);
    }
}

TEST(Generate, ExactObjectCountAndDeterminism) {
    tog::SceneSpec spec;
    spec.min_objects = spec.max_objects = 1;
    spec.noise_std = 0.0;
    tog::Rng a(5), b(5);
    const auto s1 = tog::generate_scene(spec, a);
    const auto s2 = tog::generate_scene(spec, b);
    EXPECT_EQ(s1.objects.size(), 1u);
    EXPECT_EQ(s1.image, s2.image);
    EXPECT_EQ(s1.objects, s2.objects);
}

TEST(Generate, InvariantsHoldOverManyScenes) {
    tog::SceneSpec spec;
    const auto split = tog::generate_split(spec, "train", 300);
    for (const auto& s : split) {
        EXPECT_GE(s.objects.size(), 1u);
        EXPECT_LE(s.objects.size(), 3u);
        for (std::size_t i = 0; i < s.objects.size(); ++i) {
            EXPECT_NO_THROW(tog::validate_ground_truth(s.objects[i], 3, i));
            for (std::size_t j = 0; j < i; ++j) {
                // Centres of the tight boxes sit within a pixel of the placement centre.
                const double d = std::hypot(s.objects[i].box.bx - s.objects[j].box.bx,
                                            s.objects[i].box.by - s.objects[j].box.by);
                EXPECT_GE(d, 0.2 - 2.0 / 64);
            }
        }
        for (float v : s.image.data) {
            ASSERT_GE(v, 0.0f);
            ASSERT_LE(v, 1.0f);
        }
    }
}

TEST(Generate, SplitsUseDisjointStreams) {
    tog::SceneSpec spec;
    EXPECT_NE(tog::scene_seed(spec, "train", 0), tog::scene_seed(spec, "test", 0));
    const auto tr = tog::generate_split(spec, "train", 3);
    const auto te = tog::generate_split(spec, "test", 3);
    EXPECT_NE(tr[0].image, te[0].image);
}

TEST(Ppm, SizeAndRoundTrip) {
    tog::Rng rng(3);
    tog::ImageTensor img({64, 64, 3});
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    const auto bytes = tog::encode_ppm(img);
    EXPECT_EQ(bytes.size(), 12288u + 13u);
    const auto back = tog::decode_ppm(bytes);
    EXPECT_LE(tog::max_abs_diff(back, img), 0.5f / 255 + 1e-7f);
    EXPECT_EQ(back, tog::quantize(img));
    EXPECT_EQ(tog::encode_ppm(back), bytes);

    tog::ImageTensor black({8, 8, 3});
    EXPECT_EQ(tog::decode_ppm(tog::encode_ppm(black)), black);
}

TEST(Ppm, MalformedInputsReportOffsets) {
    tog::ImageTensor img({4, 4, 3});
    auto bytes = tog::encode_ppm(img);
    auto bad = bytes;
    bad[1] = '3';
    EXPECT_THROW(tog::decode_ppm(bad), tog::ParseError);
    auto truncated = bytes;
    truncated.resize(truncated.size() - 5);
    try {
        tog::decode_ppm(truncated);
        FAIL();
    } catch (const tog::ParseError& e) {
        EXPECT_GT(e.offset(), 0u);
    }
    const std::string wrong_max = "P6\n4 4\n65535\n";
    EXPECT_THROW(tog::decode_ppm(tog::Bytes(wrong_max.begin(), wrong_max.end())), tog::ParseError);
}

TEST(Quantize, KeepsAttackBudgetWithinTwoLevels) {
    tog::Rng rng(9);
    for (int t = 0; t < 50; ++t) {
        tog::ImageTensor x({4, 4, 3}), adv({4, 4, 3});
        for (std::size_t i = 0; i < x.size(); ++i) {
            x.data[i] = static_cast<float>(rng.uniform());
            adv.data[i] = std::clamp(x.data[i] + static_cast<float>(rng.uniform(-0.031, 0.031)), 0.0f, 1.0f);
        }
        EXPECT_LE(tog::max_abs_diff(tog::quantize(adv), tog::quantize(x)), 0.031f + 2.0f / 255 + 1e-6f);
    }
}

TEST(Annotations, RoundTripAndValidation) {
    const std::vector<tog::GroundTruthObject> objs = {
        {{0.123456789, 0.5, 0.2, 0.25}, 1}, {{0.7, 0.3, 0.1, 0.1}, 3}, {{0.4, 0.8, 0.3, 0.2}, 2}};
    const auto text = tog::annotations_to_json(objs);
    const auto back = tog::annotations_from_json(text);
    ASSERT_EQ(back.size(), 3u);
    EXPECT_DOUBLE_EQ(back[0].box.bx, 0.123457);
    EXPECT_EQ(back[1], objs[1]);
    EXPECT_EQ(tog::annotations_to_json(back), text);
    EXPECT_TRUE(tog::annotations_from_json(tog::annotations_to_json({})).empty());

    const std::string zero_class = R"({"objects":[{"class_id":1,"bx":0.5,"by":0.5,"bw":0.1,"bh":0.1},
                                       {"class_id":0,"bx":0.5,"by":0.5,"bw":0.1,"bh":0.1}]})";
    try {
        tog::annotations_from_json(zero_class);
        FAIL();
    } catch (const tog::ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("1"), std::string::npos);
    }
    const std::string outside = R"({"objects":[{"class_id":1,"bx":0.98,"by":0.5,"bw":0.1,"bh":0.1}]})";
    EXPECT_THROW(tog::annotations_from_json(outside), tog::ValidationError);
    EXPECT_THROW(tog::annotations_from_json("{\"objects\": ["), tog::ParseError);
}

TEST(Dataset, GenerateLoadAndRegenerateByteIdentical) {
    const auto dir = scratch_dir("ds");
    tog::SceneSpec spec;
    const auto m = tog::generate_dataset(spec, 5, 3, dir / "a");
    EXPECT_EQ(m.entry_count(), 8u);
    tog::generate_dataset(spec, 5, 3, dir / "b");
    EXPECT_EQ(slurp(dir / "a" / "manifest.json"), slurp(dir / "b" / "manifest.json"));
    for (const auto& e : m.train) {
        EXPECT_EQ(slurp(dir / "a" / e.image), slurp(dir / "b" / e.image));
        EXPECT_EQ(slurp(dir / "a" / e.annotations), slurp(dir / "b" / e.annotations));
    }
    const auto loaded = tog::load_manifest(dir / "a" / "manifest.json");
    EXPECT_EQ(loaded.train.size(), 5u);
    EXPECT_EQ(loaded.spec, spec);

    // The in-memory split is exactly what lands on disk.
    const auto disk = tog::load_split(loaded, "train");
    const auto mem = tog::generate_split(spec, "train", 5);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(disk[i].image, mem[i].image);
        EXPECT_EQ(disk[i].objects, mem[i].objects);
    }
    fs::remove(dir / "a" / m.test[0].image);
    EXPECT_THROW(tog::load_manifest(dir / "a" / "manifest.json"), tog::ValidationError);
    fs::remove_all(dir);
}

TEST(Dataset, EmptyTrainSplit) {
    const auto dir = scratch_dir("empty");
    const auto m = tog::generate_dataset(tog::SceneSpec{}, 0, 2, dir);
    EXPECT_TRUE(tog::load_manifest(dir / "manifest.json").train.empty());
    EXPECT_EQ(m.test.size(), 2u);
    fs::remove_all(dir);
}
