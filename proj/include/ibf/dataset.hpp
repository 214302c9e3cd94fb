#pragma once

// Synthetic dataset planning, rendering and the on-disk layout:
//
//   <root>/manifest.json
//   <root>/<split>/<camera_id>/<image_id>.png        split in {train, val, test}
//   <root>/splices/<case_id>/{image.png, mask.png, meta.json}

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibf/synthetic.hpp"

namespace ibf {

struct SynthConfig {
    int num_models = 4;
    int images_per_model = 40;
    int image_size = 64;
    std::uint64_t seed = 7;
    int num_splices = 20;
    int splice_image_size = 128;
    double train_fraction = 0.7;
    double val_fraction = 0.2;
    CameraBankConfig bank;
    SpliceBounds bounds;

    void validate() const;
};

nlohmann::json to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j);

struct ImageEntry {
    std::string split;
    int camera_id = 0;
    int image_id = 0;
    std::uint64_t scene_seed = 0;
};

struct SpliceEntry {
    std::string case_id;
    int host_camera = 0;
    int donor_camera = 0;
    std::uint64_t host_seed = 0;
    std::uint64_t donor_seed = 0;
    std::uint64_t region_seed = 0;
};

struct DatasetManifest {
    SynthConfig config;
    std::vector<CameraModelSpec> cameras;
    std::vector<ImageEntry> images;
    std::vector<SpliceEntry> splices;
};

nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);

/// Deterministic in the config seed: camera bank, per-image scene seeds, a
/// per-camera random 70/20/10 split and the splice case list.
DatasetManifest plan_dataset(const SynthConfig& cfg);

struct LabeledImage {
    Image image;
    int label = 0;
    int image_id = 0;
};

struct Dataset {
    int num_classes = 0;
    std::vector<LabeledImage> train;
    std::vector<LabeledImage> val;
    std::vector<LabeledImage> test;

    const std::vector<LabeledImage>& split(const std::string& name) const;
};

/// Renders every planned image in memory. Each image depends only on its own
/// seeds, so the loop is parallel and the result matches serial rendering.
Dataset render_dataset(const DatasetManifest& m);
SpliceCase render_splice(const DatasetManifest& m, const SpliceEntry& e);

std::filesystem::path image_path(const std::filesystem::path& root, const ImageEntry& e);

void write_dataset(const std::filesystem::path& root, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& root);
/// Reads images listed in the manifest.
Dataset load_dataset(const std::filesystem::path& root);

struct SpliceRecord {
    std::string case_id;
    Image image;
    Mask mask;
    nlohmann::json meta;
};

/// Loads every `<dir>/<case_id>/` holding image.png (mask.png optional).
std::vector<SpliceRecord> load_splices(const std::filesystem::path& dir);

}  // namespace ibf
