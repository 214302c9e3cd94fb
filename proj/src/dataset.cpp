#include "ibf/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "ibf/error.hpp"

namespace ibf {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
    return splitmix64(splitmix64(splitmix64(base) ^ a) ^ (b + 0x632be59bd9b4e019ULL));
}

std::string case_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "case_%03d", i);
    return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + path.string());
    os << text;
}

}  // namespace

void SynthConfig::validate() const {
    if (num_models < 2) throw ConfigError("num_models must be >= 2 (got " + std::to_string(num_models) + ")");
    if (images_per_model < 3) throw ConfigError("images_per_model must be >= 3");
    if (image_size < 8 || splice_image_size < 8) throw ConfigError("image sizes must be >= 8");
    if (num_splices < 0) throw ConfigError("num_splices must be >= 0");
    if (!(train_fraction > 0.0 && val_fraction > 0.0 && train_fraction + val_fraction < 1.0))
        throw ConfigError("split fractions must be positive and leave room for a test split");
    bank.validate();
}

nlohmann::json to_json(const SynthConfig& c) {
    return {{"num_models", c.num_models},
            {"images_per_model", c.images_per_model},
            {"image_size", c.image_size},
            {"seed", c.seed},
            {"num_splices", c.num_splices},
            {"splice_image_size", c.splice_image_size},
            {"train_fraction", c.train_fraction},
            {"val_fraction", c.val_fraction},
            {"bank",
             {{"gain_spread", c.bank.gain_spread},
              {"sigma_min", c.bank.sigma_min},
              {"sigma_max", c.bank.sigma_max},
              {"kernel_spread", c.bank.kernel_spread},
              {"margin", c.bank.margin},
              {"quant_steps", c.bank.quant_steps}}},
            {"splice_bounds", {{"min_fraction", c.bounds.min_fraction}, {"max_fraction", c.bounds.max_fraction}}}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
    SynthConfig c;
    c.num_models = j.at("num_models").get<int>();
    c.images_per_model = j.at("images_per_model").get<int>();
    c.image_size = j.at("image_size").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.num_splices = j.at("num_splices").get<int>();
    c.splice_image_size = j.at("splice_image_size").get<int>();
    c.train_fraction = j.at("train_fraction").get<double>();
    c.val_fraction = j.at("val_fraction").get<double>();
    const auto& b = j.at("bank");
    c.bank.gain_spread = b.at("gain_spread").get<double>();
    c.bank.sigma_min = b.at("sigma_min").get<double>();
    c.bank.sigma_max = b.at("sigma_max").get<double>();
    c.bank.kernel_spread = b.at("kernel_spread").get<double>();
    c.bank.margin = b.at("margin").get<double>();
    c.bank.quant_steps = b.at("quant_steps").get<std::vector<double>>();
    c.bounds.min_fraction = j.at("splice_bounds").at("min_fraction").get<double>();
    c.bounds.max_fraction = j.at("splice_bounds").at("max_fraction").get<double>();
    return c;
}

nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["config"] = to_json(m.config);
    j["cameras"] = nlohmann::json::array();
    for (const auto& c : m.cameras) j["cameras"].push_back(to_json(c));
    j["images"] = nlohmann::json::array();
    for (const auto& e : m.images)
        j["images"].push_back(
            {{"split", e.split}, {"camera_id", e.camera_id}, {"image_id", e.image_id}, {"scene_seed", e.scene_seed}});
    j["splices"] = nlohmann::json::array();
    for (const auto& s : m.splices)
        j["splices"].push_back({{"case_id", s.case_id},
                                {"host_camera", s.host_camera},
                                {"donor_camera", s.donor_camera},
                                {"host_seed", s.host_seed},
                                {"donor_seed", s.donor_seed},
                                {"region_seed", s.region_seed}});
    return j;
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.config = synth_config_from_json(j.at("config"));
        for (const auto& c : j.at("cameras")) m.cameras.push_back(camera_spec_from_json(c));
        for (const auto& e : j.at("images"))
            m.images.push_back({e.at("split").get<std::string>(), e.at("camera_id").get<int>(),
                                e.at("image_id").get<int>(), e.at("scene_seed").get<std::uint64_t>()});
        for (const auto& s : j.at("splices"))
            m.splices.push_back({s.at("case_id").get<std::string>(), s.at("host_camera").get<int>(),
                                 s.at("donor_camera").get<int>(), s.at("host_seed").get<std::uint64_t>(),
                                 s.at("donor_seed").get<std::uint64_t>(), s.at("region_seed").get<std::uint64_t>()});
    } catch (const nlohmann::json::exception& ex) {
        throw DataError(std::string("malformed manifest: ") + ex.what());
    }
    return m;
}

DatasetManifest plan_dataset(const SynthConfig& cfg) {
    cfg.validate();
    DatasetManifest m;
    m.config = cfg;
    m.cameras = make_camera_bank(cfg.num_models, derive_seed(cfg.seed, 1, 0), cfg.bank);

    const int n = cfg.images_per_model;
    const int n_train = std::max(1, static_cast<int>(std::lround(cfg.train_fraction * n)));
    const int n_val = std::max(1, static_cast<int>(std::lround(cfg.val_fraction * n)));
    if (n_train + n_val >= n) throw ConfigError("images_per_model too small for a three-way split");

    int next_id = 0;
    for (int cam = 0; cam < cfg.num_models; ++cam) {
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(derive_seed(cfg.seed, 2, cam));
        std::shuffle(order.begin(), order.end(), rng);
        for (int i = 0; i < n; ++i) {
            const int slot = order[i];
            ImageEntry e;
            e.split = slot < n_train ? "train" : (slot < n_train + n_val ? "val" : "test");
            e.camera_id = cam;
            e.image_id = next_id++;
            e.scene_seed = derive_seed(cfg.seed, 3, static_cast<std::uint64_t>(e.image_id));
            m.images.push_back(e);
        }
    }

    for (int i = 0; i < cfg.num_splices; ++i) {
        SpliceEntry s;
        s.case_id = case_name(i);
        s.host_camera = i % cfg.num_models;
        s.donor_camera = (s.host_camera + 1 + (i / cfg.num_models) % (cfg.num_models - 1)) % cfg.num_models;
        s.host_seed = derive_seed(cfg.seed, 4, static_cast<std::uint64_t>(i));
        s.donor_seed = derive_seed(cfg.seed, 5, static_cast<std::uint64_t>(i));
        s.region_seed = derive_seed(cfg.seed, 6, static_cast<std::uint64_t>(i));
        m.splices.push_back(s);
    }
    return m;
}

const std::vector<LabeledImage>& Dataset::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw DataError("unknown split " + name);
}

Dataset render_dataset(const DatasetManifest& m) {
    std::vector<LabeledImage> rendered(m.images.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < m.images.size(); ++i) {
        const auto& e = m.images[i];
        rendered[i] = {render(e.scene_seed, m.cameras.at(e.camera_id), m.config.image_size).pixels, e.camera_id,
                       e.image_id};
    }
    Dataset d;
    d.num_classes = static_cast<int>(m.cameras.size());
    for (std::size_t i = 0; i < m.images.size(); ++i) {
        auto& target = m.images[i].split == "train" ? d.train : (m.images[i].split == "val" ? d.val : d.test);
        target.push_back(std::move(rendered[i]));
    }
    return d;
}

SpliceCase render_splice(const DatasetManifest& m, const SpliceEntry& e) {
    const int size = m.config.splice_image_size;
    const auto host = render(e.host_seed, m.cameras.at(e.host_camera), size);
    const auto donor = render(e.donor_seed, m.cameras.at(e.donor_camera), size);
    return make_splice(host, donor, e.region_seed, std::nullopt, m.config.bounds);
}

std::filesystem::path image_path(const std::filesystem::path& root, const ImageEntry& e) {
    return root / e.split / std::to_string(e.camera_id) / (std::to_string(e.image_id) + ".png");
}

void write_dataset(const std::filesystem::path& root, const DatasetManifest& m) {
    std::filesystem::create_directories(root);
    for (const char* split : {"train", "val", "test"})
        for (const auto& c : m.cameras) std::filesystem::create_directories(root / split / std::to_string(c.id));

    const Dataset d = render_dataset(m);
    std::size_t tr = 0, va = 0, te = 0;
    for (const auto& e : m.images) {
        const LabeledImage& li = e.split == "train" ? d.train[tr++] : (e.split == "val" ? d.val[va++] : d.test[te++]);
        write_png(image_path(root, e), li.image);
    }
    for (const auto& s : m.splices) {
        const SpliceCase sc = render_splice(m, s);
        const auto dir = root / "splices" / s.case_id;
        write_png(dir / "image.png", sc.composite);
        write_mask_png(dir / "mask.png", sc.mask);
        const nlohmann::json meta = {{"case_id", s.case_id},         {"host_camera", sc.host_camera},
                                     {"donor_camera", sc.donor_camera}, {"shape", sc.shape},
                                     {"area_fraction", sc.area_fraction}, {"region_seed", s.region_seed}};
        write_text(dir / "meta.json", meta.dump(2) + "\n");
    }
    write_text(root / "manifest.json", to_json(m).dump(2) + "\n");
}

DatasetManifest read_manifest(const std::filesystem::path& root) {
    std::ifstream is(root / "manifest.json");
    if (!is) throw DataError("no manifest.json under " + root.string());
    try {
        return manifest_from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::parse_error& ex) {
        throw DataError(std::string("manifest.json: ") + ex.what());
    }
}

Dataset load_dataset(const std::filesystem::path& root) {
    const DatasetManifest m = read_manifest(root);
    Dataset d;
    d.num_classes = static_cast<int>(m.cameras.size());
    for (const auto& e : m.images) {
        LabeledImage li{read_png(image_path(root, e)), e.camera_id, e.image_id};
        (e.split == "train" ? d.train : (e.split == "val" ? d.val : d.test)).push_back(std::move(li));
    }
    return d;
}

std::vector<SpliceRecord> load_splices(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    std::vector<std::filesystem::path> cases;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_directory() && std::filesystem::exists(entry.path() / "image.png")) cases.push_back(entry.path());
    std::sort(cases.begin(), cases.end());
    std::vector<SpliceRecord> out;
    for (const auto& p : cases) {
        SpliceRecord r;
        r.case_id = p.filename().string();
        r.image = read_png(p / "image.png");
        if (std::filesystem::exists(p / "mask.png")) r.mask = read_mask_png(p / "mask.png");
        if (std::filesystem::exists(p / "meta.json")) {
            std::ifstream is(p / "meta.json");
            r.meta = nlohmann::json::parse(is, nullptr, false);
        }
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace ibf
