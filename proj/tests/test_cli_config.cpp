#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cli_runner.hpp"
#include "ibf/config_file.hpp"
#include "ibf/error.hpp"
#include "ibf/image.hpp"

using namespace ibf;
using ibf::testing::read_bytes;
using ibf::testing::run_cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("ibf_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(2); }

}  // namespace

TEST_CASE("config overrides, defaults and rejection") {
    const RunConfig def = run_config_from_json(nlohmann::json::object());
    CHECK(def.synth.num_models == 4);
    CHECK(def.model.encoder.patch_size == 17);
    CHECK(def.train.epochs == 40);
    CHECK(def.betas.size() == 4);

    const RunConfig c = run_config_from_json({{"synth", {{"num_models", 3}}}, {"train", {{"beta", 1e-3}}}});
    CHECK(c.synth.num_models == 3);
    CHECK(c.model.num_classes == 3);
    CHECK(c.train.loss.beta == 1e-3);
    CHECK(c.train.batch_size == 64);

    CHECK_THROWS_AS(run_config_from_json({{"synth", {{"num_model", 3}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"extra", 1}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"train", {{"epochs", "ten"}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"synth", {{"num_models", 1}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"localize", {{"upsampling", "cubic"}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"sweep", {{"betas", {-1.0}}}}}), ConfigError);

    const RunConfig back = run_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));

    const fs::path dir = scratch("cfg");
    std::ofstream(dir / "bad.json") << "{ not json";
    CHECK_THROWS_AS(load_run_config(dir / "bad.json"), ConfigError);
    CHECK_THROWS_AS(load_run_config(dir / "missing.json"), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("cli synth: layout, determinism and invalid config") {
    const fs::path dir = scratch("synth");
    write_json(dir / "small.json", {{"synth", {{"images_per_model", 10}, {"num_splices", 2}}}});
    const std::string cfg = "--config " + (dir / "small.json").string();
    REQUIRE(run_cli(cfg + " --single-thread --out " + (dir / "a").string() + " synth") == 0);
    REQUIRE(run_cli(cfg + " --single-thread --out " + (dir / "b").string() + " synth") == 0);
    for (const char* split : {"train", "val", "test"})
        for (int cam = 0; cam < 4; ++cam) CHECK(fs::is_directory(dir / "a" / split / std::to_string(cam)));
    CHECK(fs::exists(dir / "a" / "run_manifest.json"));
    int compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
        if (!e.is_regular_file() || e.path().filename() == "run_manifest.json") continue;
        const fs::path other = dir / "b" / fs::relative(e.path(), dir / "a");
        CHECK(read_bytes(e.path()) == read_bytes(other));
        ++compared;
    }
    CHECK(compared > 40);

    write_json(dir / "one.json", {{"synth", {{"num_models", 1}}}});
    CHECK(run_cli("--config " + (dir / "one.json").string() + " --out " + (dir / "c").string() + " synth") == 2);
    CHECK(run_cli("--out " + (dir / "d").string() + " nosuchcommand") == 2);
    fs::remove_all(dir);
}

TEST_CASE("cli train without a dataset fails with a message") {
    const fs::path dir = scratch("nodata");
    CHECK(run_cli("--out " + (dir / "t").string() + " train --data " + (dir / "missing").string()) == 1);
    fs::remove_all(dir);
}

TEST_CASE("cli localize: empty directory") {
    const fs::path dir = scratch("loc");
    fs::create_directories(dir / "empty");
    // A valid checkpoint is needed before inputs are read.
    const FingerprintModel model(ModelConfig::toy_default());
    save_checkpoint(dir / "m.ckpt", Checkpoint{model.config(), model.init_params(1), "", nlohmann::json::object()});
    CHECK(run_cli("--out " + (dir / "o").string() + " localize --checkpoint " + (dir / "m.ckpt").string() + " " +
                  (dir / "empty").string()) == 1);

    // One undersized image and one valid image: exit 0 with a skipped report.
    fs::create_directories(dir / "in");
    write_png(dir / "in" / "small.png", Image(10, 10, 3, 0.5));
    Image img(40, 40, 3);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = ((i * 7919) % 255) / 255.0;
    write_png(dir / "in" / "ok.png", img);
    CHECK(run_cli("--single-thread --out " + (dir / "o").string() + " localize --checkpoint " +
                  (dir / "m.ckpt").string() + " " + (dir / "in").string()) == 0);
    CHECK(fs::exists(dir / "o" / "ok.png"));
    CHECK(fs::exists(dir / "o" / "ok.json"));
    CHECK_FALSE(fs::exists(dir / "o" / "small.png"));
    CHECK(read_bytes(dir / "o" / "skipped.txt").find("small.png") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("cli evaluate: perfect maps and a missing truth file") {
    const fs::path dir = scratch("eval");
    fs::create_directories(dir / "maps");
    fs::create_directories(dir / "truth");
    for (const char* id : {"case_000", "case_001", "case_002"}) {
        Mask m(16, 16);
        for (int y = 4; y < 10; ++y)
            for (int x = 3; x < 12; ++x) m.set(y, x, true);
        Image map(16, 16, 1);
        for (std::size_t i = 0; i < m.data.size(); ++i) map.data[i] = m.data[i];
        write_png(dir / "maps" / (std::string(id) + ".png"), map);
        if (std::string(id) != "case_002") {
            fs::create_directories(dir / "truth" / id);
            write_mask_png(dir / "truth" / id / "mask.png", m);
        }
    }
    REQUIRE(run_cli("-q --out " + (dir / "o").string() + " evaluate --heatmaps " + (dir / "maps").string() +
                    " --truth " + (dir / "truth").string()) == 0);
    std::ifstream is(dir / "o" / "scores.json");
    const auto j = nlohmann::json::parse(is);
    CHECK(j.at("cases").size() == 2);
    CHECK(j.at("skipped") == nlohmann::json::array({"case_002"}));
    for (const char* k : {"f1_optimal", "f1_otsu", "mcc_optimal", "mcc_otsu", "auc"})
        CHECK(j.at("mean").at(k).get<double>() == doctest::Approx(1.0));
    CHECK(fs::exists(dir / "o" / "scores.txt"));
    CHECK(run_cli("--out " + (dir / "o2").string() + " evaluate --heatmaps " + (dir / "nothing").string() +
                  " --truth " + (dir / "truth").string()) == 1);
    fs::remove_all(dir);
}
