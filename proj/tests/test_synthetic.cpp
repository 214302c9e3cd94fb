#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ibf/dataset.hpp"
#include "ibf/error.hpp"
#include "ibf/synthetic.hpp"
#include "pixel_oracle.hpp"

using namespace ibf;
namespace fs = std::filesystem;

TEST_CASE("camera bank: determinism, margin and preconditions") {
    const auto a = make_camera_bank(4, 7);
    const auto b = make_camera_bank(4, 7);
    REQUIRE(a.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(to_json(a[i]) == to_json(b[i]));
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) CHECK(spec_distance(a[i], a[j]) >= CameraBankConfig{}.margin);
    for (std::uint64_t seed : {1ULL, 2ULL, 99ULL}) {
        const auto two = make_camera_bank(2, seed);
        CHECK(spec_distance(two[0], two[1]) >= CameraBankConfig{}.margin);
    }
    CHECK_THROWS_AS(make_camera_bank(1, 7), ConfigError);
    for (const auto& s : a) {
        double norm = 0;
        for (double k : s.noise_kernel) norm += k * k;
        CHECK(norm == doctest::Approx(1.0));
        CHECK(camera_spec_from_json(to_json(s)).noise_sigma == s.noise_sigma);
    }
}

TEST_CASE("render: degenerate pipeline reproduces the quantized scene") {
    CameraModelSpec spec;
    for (auto& site : spec.cfa_gain) site = {1.0, 1.0, 1.0};
    spec.noise_kernel = {0, 0, 0, 0, 1, 0, 0, 0, 0};
    spec.noise_sigma = 0.0;
    spec.quant_step = 1.0 / 255.0;
    Image scene = render_scene(5, 32);
    const Image img = render(5, spec, 32).pixels;
    snap_to_8bit(scene);
    REQUIRE(img.data.size() == scene.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(img.data[i] == doctest::Approx(scene.data[i]).epsilon(1e-12));
}

TEST_CASE("render: determinism and camera dependence") {
    const auto bank = make_camera_bank(2, 3);
    const auto a = render(11, bank[0], 32), b = render(11, bank[0], 32), c = render(11, bank[1], 32);
    CHECK(a.pixels.data == b.pixels.data);
    double diff = 0;
    for (std::size_t i = 0; i < a.pixels.data.size(); ++i) diff += std::abs(a.pixels.data[i] - c.pixels.data[i]);
    CHECK(diff / a.pixels.data.size() > 0.0);
    for (double v : a.pixels.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(std::abs(v * 255.0 - std::round(v * 255.0)) < 1e-9);
    }
}

TEST_CASE("splice: mask correctness, bounds and determinism") {
    const auto bank = make_camera_bank(2, 3);
    const auto host = render(1, bank[0], 64), donor = render(2, bank[1], 64);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const SpliceCase sc = make_splice(host, donor, seed);
        CHECK(sc.area_fraction >= 0.05);
        CHECK(sc.area_fraction <= 0.40);
        CHECK(sc.area_fraction == doctest::Approx(static_cast<double>(sc.mask.count()) / (64 * 64)));
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 64; ++y)
                for (int x = 0; x < 64; ++x) {
                    const double expected = sc.mask.at(y, x) ? donor.pixels.at(c, y, x) : host.pixels.at(c, y, x);
                    CHECK(sc.composite.at(c, y, x) == expected);
                }
    }
    const SpliceCase a = make_splice(host, donor, 9), b = make_splice(host, donor, 9);
    CHECK(a.composite.data == b.composite.data);
    CHECK(a.mask.data == b.mask.data);
    CHECK(a.shape == b.shape);

    const SpliceCase big = make_splice(host, donor, 4, 0.5);
    CHECK(big.area_fraction <= 0.40);
    CHECK(big.area_fraction >= 0.05);

    CHECK_THROWS_AS(make_splice(host, host, 1), ConfigError);
    SyntheticImage self = host;
    self.camera_id = 99;
    const SpliceCase seamless = make_splice(host, self, 3);
    CHECK(seamless.composite.data == host.pixels.data);
    CHECK(seamless.mask.count() > 0);
    CHECK_THROWS_AS(make_splice(host, render(2, bank[1], 32), 1), ShapeError);
}

TEST_CASE("pixel statistics oracle separates the default bank") {
    const SynthConfig cfg;
    const auto bank = make_camera_bank(cfg.num_models, cfg.seed, cfg.bank);
    CHECK(testing::pixel_oracle_accuracy(bank, cfg.image_size, 28, 50, 1) >= 0.90);
}

TEST_CASE("dataset plan, layout and reload") {
    SynthConfig cfg;
    cfg.images_per_model = 10;
    cfg.num_splices = 3;
    cfg.splice_image_size = 48;
    const DatasetManifest m = plan_dataset(cfg);
    CHECK(m.cameras.size() == 4);
    int train = 0, val = 0, test = 0;
    for (const auto& e : m.images) (e.split == "train" ? train : e.split == "val" ? val : test) += 1;
    CHECK(train == 4 * 7);
    CHECK(val == 4 * 2);
    CHECK(test == 4 * 1);
    CHECK(m.splices.size() == 3);
    for (const auto& s : m.splices) CHECK(s.host_camera != s.donor_camera);

    const fs::path root = fs::temp_directory_path() / "ibf_test_dataset";
    fs::remove_all(root);
    write_dataset(root, m);
    for (const char* split : {"train", "val", "test"}) CHECK(fs::is_directory(root / split));
    CHECK(fs::exists(root / "manifest.json"));
    CHECK(fs::exists(root / "splices" / m.splices[0].case_id / "meta.json"));

    const Dataset rendered = render_dataset(m);
    const Dataset loaded = load_dataset(root);
    CHECK(loaded.num_classes == 4);
    REQUIRE(loaded.train.size() == rendered.train.size());
    for (std::size_t i = 0; i < loaded.train.size(); ++i) {
        CHECK(loaded.train[i].label == rendered.train[i].label);
        CHECK(loaded.train[i].image.data == rendered.train[i].image.data);
    }
    const auto splices = load_splices(root / "splices");
    REQUIRE(splices.size() == 3);
    const SpliceCase sc = render_splice(m, m.splices[0]);
    CHECK(splices[0].image.data == sc.composite.data);
    CHECK(splices[0].mask.data == sc.mask.data);
    CHECK(to_json(read_manifest(root)) == to_json(m));
    fs::remove_all(root);

    SynthConfig bad;
    bad.num_models = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
