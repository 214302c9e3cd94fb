#include "ibf/config_file.hpp"

#include <fstream>

#include "ibf/error.hpp"

namespace ibf {

namespace {

void reject_unknown(const nlohmann::json& defaults, const nlohmann::json& given, const std::string& path) {
    if (!given.is_object()) return;
    if (!defaults.is_object()) throw ConfigError("config key '" + path + "' is not a section");
    for (const auto& [key, value] : given.items()) {
        const std::string full = path.empty() ? key : path + "." + key;
        if (!defaults.contains(key)) throw ConfigError("unknown config key '" + full + "'");
        if (value.is_object()) reject_unknown(defaults.at(key), value, full);
    }
}

template <class E>
E enum_from(const nlohmann::json& j, const char* key, std::initializer_list<std::pair<const char*, E>> options) {
    const auto s = j.at(key).get<std::string>();
    for (const auto& [name, v] : options)
        if (s == name) return v;
    throw ConfigError(std::string("invalid value '") + s + "' for " + key);
}

}  // namespace

TrainingConfig training_config_from_json(const nlohmann::json& j) {
    TrainingConfig c;
    c.epochs = j.at("epochs").get<int>();
    c.patches_per_epoch = j.at("patches_per_epoch").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.base_lr = j.at("base_lr").get<double>();
    c.final_linear_lr = j.at("final_linear_lr").get<double>();
    c.constant_epochs = j.at("constant_epochs").get<int>();
    c.linear_epochs = j.at("linear_epochs").get<int>();
    c.exponential_epochs = j.at("exponential_epochs").get<int>();
    c.exp_decay = j.at("exp_decay").get<double>();
    c.loss.beta = j.at("beta").get<double>();
    c.loss.lambda = j.at("lambda").get<double>();
    c.loss.omega1 = j.at("omega1").get<double>();
    c.loss.omega2 = j.at("omega2").get<double>();
    c.optimizer = enum_from<OptimizerKind>(j, "optimizer", {{"adam", OptimizerKind::Adam}, {"sgd", OptimizerKind::Sgd}});
    c.sgd_momentum = j.at("sgd_momentum").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.data_seed = j.at("data_seed").get<std::uint64_t>();
    c.validation_patches = j.at("validation_patches").get<int>();
    c.checkpoint_every = j.at("checkpoint_every").get<int>();
    c.log_every = j.at("log_every").get<int>();
    return c;
}

LocalizationConfig localization_config_from_json(const nlohmann::json& j) {
    LocalizationConfig c;
    c.stride = j.at("stride").get<int>();
    c.signature = enum_from<SignatureMode>(j, "signature",
                                           {{"mean+scale", SignatureMode::MeanAndScale}, {"mean", SignatureMode::MeanOnly}});
    c.em.covariance =
        enum_from<CovarianceKind>(j, "covariance", {{"full", CovarianceKind::Full}, {"diagonal", CovarianceKind::Diagonal}});
    c.upsampling = enum_from<Upsampling>(j, "upsampling", {{"average", Upsampling::Average}, {"nearest", Upsampling::Nearest}});
    c.em.restarts = j.at("em_restarts").get<int>();
    c.em.max_iterations = j.at("em_max_iterations").get<int>();
    c.em.tolerance = j.at("em_tolerance").get<double>();
    c.em.seed = j.at("em_seed").get<std::uint64_t>();
    return c;
}

void RunConfig::validate() const {
    synth.validate();
    model.validate();
    train.validate();
    if (model.num_classes != synth.num_models)
        throw ConfigError("model.num_classes (" + std::to_string(model.num_classes) + ") must equal synth.num_models (" +
                          std::to_string(synth.num_models) + ")");
    if (localize.stride < 0) throw ConfigError("localize.stride must be >= 0");
    if (localize.em.restarts < 1 || localize.em.max_iterations < 1)
        throw ConfigError("localize.em_restarts and localize.em_max_iterations must be >= 1");
    if (betas.empty()) throw ConfigError("sweep.betas must not be empty");
    for (double b : betas)
        if (!(b >= 0.0)) throw ConfigError("sweep.betas must be nonnegative");
}

nlohmann::json to_json(const RunConfig& c) {
    return {{"synth", to_json(c.synth)},
            {"model", to_json(c.model)},
            {"train", to_json(c.train)},
            {"localize", to_json(c.localize)},
            {"sweep", {{"betas", c.betas}}}};
}

RunConfig run_config_from_json(const nlohmann::json& overrides) {
    if (!overrides.is_object()) throw ConfigError("config must be a JSON object");
    const RunConfig defaults;
    nlohmann::json merged = to_json(defaults);
    reject_unknown(merged, overrides, "");
    merged.merge_patch(overrides);
    const bool classes_given = overrides.contains("model") && overrides["model"].contains("num_classes");
    if (!classes_given && merged["synth"]["num_models"].is_number_integer())
        merged["model"]["num_classes"] = merged["synth"]["num_models"];
    RunConfig c;
    try {
        c.synth = synth_config_from_json(merged.at("synth"));
        c.model = model_config_from_json(merged.at("model"));
        c.train = training_config_from_json(merged.at("train"));
        c.localize = localization_config_from_json(merged.at("localize"));
        c.betas = merged.at("sweep").at("betas").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(std::string("malformed config: ") + ex.what());
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is, nullptr, true, true);
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + ex.what());
    }
    return run_config_from_json(j);
}

}  // namespace ibf
