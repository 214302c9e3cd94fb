// Command-line entry point: synth, train, sweep, localize, evaluate.
//
// Exit codes: 0 success, 1 empty or missing input, 2 invalid configuration,
// 3 any other runtime failure.

#include <CLI11.hpp>
#include <json.hpp>
#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ibf/config_file.hpp"
#include "ibf/dataset.hpp"
#include "ibf/error.hpp"
#include "ibf/localization.hpp"
#include "ibf/log.hpp"
#include "ibf/metrics.hpp"
#include "ibf/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "ibf 1.0.0";

struct EmptyInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool single_thread = false;
    bool quiet = false;
};

fs::path default_root() {
    const char* env = std::getenv("IBF_OUT");
    return env && *env ? fs::path(env) : fs::path("ibf_out");
}

fs::path out_dir(const Globals& g, const std::string& command) {
    return g.out.empty() ? default_root() / command : fs::path(g.out);
}

ibf::RunConfig load_config(const Globals& g) {
    return g.config_path.empty() ? ibf::run_config_from_json(json::object()) : ibf::load_run_config(g.config_path);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc | std::ios::binary);
    if (!os) throw ibf::DataError("cannot write " + path.string());
    os << text;
}

std::string fmt(const char* pattern, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, v);
    return buf;
}

class Manifest {
public:
    Manifest(std::string command, const Globals& g) : command_(std::move(command)), globals_(g) {
        start_ = std::chrono::steady_clock::now();
    }
    json config = json::object();
    json seeds = json::object();
    std::vector<std::string> artifacts;

    void write(const fs::path& dir) const {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        json j = {{"command", command_},
                  {"tool_version", kToolVersion},
                  {"config_file", globals_.config_path},
                  {"single_thread", globals_.single_thread},
                  {"config", config},
                  {"seeds", seeds},
                  {"artifacts", artifacts},
                  {"wall_clock_seconds", secs}};
        write_text(dir / "run_manifest.json", j.dump(2) + "\n");
    }

private:
    std::string command_;
    Globals globals_;
    std::chrono::steady_clock::time_point start_;
};

ibf::Dataset require_dataset(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.json"))
        throw EmptyInput("no dataset at " + dir.string() + " (run `ibf synth` first)");
    return ibf::load_dataset(dir);
}

// ---- synth ----------------------------------------------------------------

int cmd_synth(const Globals& g) {
    auto cfg = load_config(g);
    if (g.seed) cfg.synth.seed = *g.seed;
    cfg.synth.validate();
    const fs::path out = out_dir(g, "synth");
    fs::create_directories(out);
    const auto manifest = ibf::plan_dataset(cfg.synth);
    ibf::write_dataset(out, manifest);

    Manifest m("synth", g);
    m.config = {{"synth", ibf::to_json(cfg.synth)}};
    m.seeds = {{"synth", cfg.synth.seed}};
    m.artifacts = {"manifest.json", "train", "val", "test", "splices"};
    m.write(out);
    ibf::log_info("wrote " + std::to_string(manifest.images.size()) + " images and " +
                  std::to_string(manifest.splices.size()) + " splice cases to " + out.string());
    return 0;
}

// ---- train / sweep --------------------------------------------------------

void write_rd_trace_csv(const fs::path& path, const std::vector<std::vector<ibf::RDPoint>>& traces) {
    std::ostringstream os;
    os << "beta,epoch,split,rate,distortion\n";
    for (const auto& trace : traces)
        for (const auto& p : trace)
            os << fmt("%.10g", p.beta) << ',' << p.epoch << ',' << p.split << ',' << fmt("%.10g", p.rate) << ','
               << fmt("%.10g", p.distortion) << '\n';
    write_text(path, os.str());
}

std::vector<ibf::RDPoint> read_trace_jsonl(const fs::path& path) {
    std::vector<ibf::RDPoint> out;
    std::ifstream is(path);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto j = json::parse(line);
        out.push_back({j.at("rate").get<double>(), j.at("distortion").get<double>(), j.at("beta").get<double>(),
                       j.at("epoch").get<int>(), j.at("split").get<std::string>()});
    }
    return out;
}

// Distortion against rate for the final validation point of each run.
std::string rd_svg(const std::vector<ibf::SweepRun>& runs) {
    std::vector<const ibf::SweepRun*> ok;
    for (const auto& r : runs)
        if (r.ok) ok.push_back(&r);
    const double W = 480, H = 360, M = 50;
    double rmin = 1e300, rmax = -1e300, dmin = 1e300, dmax = -1e300;
    for (const auto* r : ok) {
        rmin = std::min(rmin, r->final_point.rate);
        rmax = std::max(rmax, r->final_point.rate);
        dmin = std::min(dmin, r->final_point.distortion);
        dmax = std::max(dmax, r->final_point.distortion);
    }
    if (ok.empty()) rmin = rmax = dmin = dmax = 0.0;
    const double rs = rmax > rmin ? rmax - rmin : 1.0, ds = dmax > dmin ? dmax - dmin : 1.0;
    auto px = [&](double r) { return M + (r - rmin) / rs * (W - 2 * M); };
    auto py = [&](double d) { return H - M - (d - dmin) / ds * (H - 2 * M); };
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<line x1=\"" << M << "\" y1=\"" << H - M << "\" x2=\"" << W - M << "\" y2=\"" << H - M
       << "\" stroke=\"black\"/>\n"
       << "<line x1=\"" << M << "\" y1=\"" << M << "\" x2=\"" << M << "\" y2=\"" << H - M << "\" stroke=\"black\"/>\n"
       << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">rate R</text>\n"
       << "<text x=\"14\" y=\"" << H / 2 << "\" transform=\"rotate(-90 14 " << H / 2
       << ")\" text-anchor=\"middle\">distortion D</text>\n<polyline fill=\"none\" stroke=\"steelblue\" points=\"";
    auto sorted = ok;
    std::sort(sorted.begin(), sorted.end(),
              [](auto* a, auto* b) { return a->final_point.rate < b->final_point.rate; });
    for (const auto* r : sorted) os << fmt("%.2f", px(r->final_point.rate)) << ',' << fmt("%.2f", py(r->final_point.distortion)) << ' ';
    os << "\"/>\n";
    for (const auto* r : sorted) {
        const double x = px(r->final_point.rate), y = py(r->final_point.distortion);
        os << "<circle cx=\"" << fmt("%.2f", x) << "\" cy=\"" << fmt("%.2f", y) << "\" r=\"4\" fill=\"steelblue\"/>\n"
           << "<text x=\"" << fmt("%.2f", x + 6) << "\" y=\"" << fmt("%.2f", y - 6) << "\" font-size=\"11\">beta="
           << fmt("%g", r->beta) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

struct TrainArgs {
    std::string data;
    std::optional<double> beta;
    std::optional<int> epochs;
    std::vector<double> betas;
    bool plot = false;
    bool verbose = false;
};

fs::path data_dir(const TrainArgs& a) { return a.data.empty() ? default_root() / "synth" : fs::path(a.data); }

// Keeps the constant/linear/exponential proportions when the epoch count changes.
void set_epochs(ibf::TrainingConfig& t, int epochs) {
    if (epochs < 1) throw ibf::ConfigError("epochs must be >= 1");
    const double f = static_cast<double>(epochs) / t.epochs;
    t.constant_epochs = std::min(epochs, static_cast<int>(std::lround(t.constant_epochs * f)));
    t.linear_epochs = std::min(epochs - t.constant_epochs, static_cast<int>(std::lround(t.linear_epochs * f)));
    t.exponential_epochs = epochs - t.constant_epochs - t.linear_epochs;
    t.epochs = epochs;
}

int cmd_train(const Globals& g, const TrainArgs& a) {
    auto cfg = load_config(g);
    if (g.seed) cfg.train.seed = *g.seed;
    if (a.beta) cfg.train.loss.beta = *a.beta;
    if (a.epochs) set_epochs(cfg.train, *a.epochs);
    cfg.train.validate();
    const auto data = require_dataset(data_dir(a));
    cfg.model.num_classes = data.num_classes;
    cfg.model.validate();
    const fs::path out = out_dir(g, "train");
    fs::create_directories(out);

    const ibf::FingerprintModel model(cfg.model);
    const auto result = ibf::train(model, data, cfg.train, {out, a.verbose});
    write_rd_trace_csv(out / "rd_trace.csv", {result.rd_trace});

    Manifest m("train", g);
    m.config = {{"model", ibf::to_json(cfg.model)}, {"train", ibf::to_json(cfg.train)}, {"data", data_dir(a).string()}};
    m.seeds = {{"model", cfg.train.seed}, {"data", cfg.train.data_seed}};
    m.artifacts = {"final.ckpt", "loss.jsonl", "trace.jsonl", "rd_trace.csv"};
    m.write(out);
    ibf::log_info("final validation accuracy " + fmt("%.4f", result.val_accuracy.back()) + ", checkpoint " +
                  (out / "final.ckpt").string());
    return 0;
}

int cmd_sweep(const Globals& g, const TrainArgs& a) {
    auto cfg = load_config(g);
    if (g.seed) cfg.train.seed = *g.seed;
    if (a.epochs) set_epochs(cfg.train, *a.epochs);
    if (!a.betas.empty()) cfg.betas = a.betas;
    cfg.validate();
    const auto data = require_dataset(data_dir(a));
    cfg.model.num_classes = data.num_classes;
    cfg.model.validate();
    const fs::path out = out_dir(g, "sweep");
    fs::create_directories(out);

    const ibf::FingerprintModel model(cfg.model);
    const auto runs = ibf::beta_sweep(model, data, cfg.betas, cfg.train, {out, a.verbose});

    std::ostringstream curve;
    curve << "beta,rate,distortion,val_accuracy\n";
    std::vector<std::vector<ibf::RDPoint>> traces;
    Manifest m("sweep", g);
    json run_list = json::array();
    for (const auto& r : runs) {
        if (r.ok) {
            curve << fmt("%.10g", r.beta) << ',' << fmt("%.10g", r.final_point.rate) << ','
                  << fmt("%.10g", r.final_point.distortion) << ',' << fmt("%.10g", r.val_accuracy) << '\n';
            traces.push_back(read_trace_jsonl(r.checkpoint->parent_path() / "trace.jsonl"));
            m.artifacts.push_back(fs::relative(*r.checkpoint, out).generic_string());
        } else {
            curve << fmt("%.10g", r.beta) << ",nan,nan,nan\n";
        }
        run_list.push_back({{"beta", r.beta}, {"model_seed", r.model_seed}, {"ok", r.ok}, {"error", r.error}});
    }
    write_text(out / "rd_curve.csv", curve.str());
    write_rd_trace_csv(out / "rd_trace.csv", traces);
    m.artifacts.push_back("rd_curve.csv");
    m.artifacts.push_back("rd_trace.csv");
    if (a.plot) {
        write_text(out / "rd_curve.svg", rd_svg(runs));
        m.artifacts.push_back("rd_curve.svg");
    }
    m.config = {{"model", ibf::to_json(cfg.model)}, {"train", ibf::to_json(cfg.train)}, {"betas", cfg.betas},
                {"data", data_dir(a).string()}};
    m.seeds = {{"base", cfg.train.seed}, {"data", cfg.train.data_seed}, {"runs", run_list}};
    m.write(out);
    const bool any_ok = std::any_of(runs.begin(), runs.end(), [](const auto& r) { return r.ok; });
    return any_ok ? 0 : 3;
}

// ---- localize -------------------------------------------------------------

struct LocalizeArgs {
    std::string checkpoint;
    std::string input;
    std::optional<int> stride;
    bool mean_only = false;
};

struct InputImage {
    std::string id;
    fs::path path;
};

std::vector<InputImage> collect_inputs(const fs::path& input) {
    std::vector<InputImage> out;
    if (fs::is_regular_file(input)) {
        out.push_back({input.stem().string(), input});
        return out;
    }
    if (!fs::is_directory(input)) throw EmptyInput("no inputs: " + input.string() + " does not exist");
    // A splice directory holds <case>/image.png; otherwise take the PNG files directly.
    const fs::path root = fs::is_directory(input / "splices") ? input / "splices" : input;
    for (const auto& e : fs::directory_iterator(root)) {
        if (e.is_directory() && fs::exists(e.path() / "image.png"))
            out.push_back({e.path().filename().string(), e.path() / "image.png"});
        else if (e.is_regular_file() && e.path().extension() == ".png")
            out.push_back({e.path().stem().string(), e.path()});
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return out;
}

int cmd_localize(const Globals& g, const LocalizeArgs& a) {
    auto cfg = load_config(g);
    if (g.seed) cfg.localize.em.seed = *g.seed;
    if (a.stride) cfg.localize.stride = *a.stride;
    if (a.mean_only) cfg.localize.signature = ibf::SignatureMode::MeanOnly;
    if (cfg.localize.stride < 0) throw ibf::ConfigError("stride must be >= 0");
    if (!fs::exists(a.checkpoint)) throw EmptyInput("checkpoint " + a.checkpoint + " not found");
    const auto ck = ibf::load_checkpoint(a.checkpoint);
    const ibf::FingerprintModel model(ck.config);

    const auto inputs = collect_inputs(a.input);
    if (inputs.empty()) throw EmptyInput("no inputs in " + a.input);
    const fs::path out = out_dir(g, "localize");
    fs::create_directories(out);

    Manifest m("localize", g);
    std::vector<std::string> skipped;
    for (const auto& in : inputs) {
        try {
            const auto image = ibf::read_png(in.path);
            const auto loc = ibf::localize(image, model, ck.params, cfg.localize);
            ibf::write_heatmap(out / (in.id + ".png"), out / (in.id + ".json"), loc);
            m.artifacts.push_back(in.id + ".png");
            m.artifacts.push_back(in.id + ".json");
        } catch (const std::exception& ex) {
            ibf::log_warn("skipping " + in.path.string() + ": " + ex.what());
            skipped.push_back(in.path.string() + ": " + ex.what());
        }
    }
    std::ostringstream rep;
    for (const auto& s : skipped) rep << s << '\n';
    write_text(out / "skipped.txt", rep.str());
    m.artifacts.push_back("skipped.txt");
    m.config = {{"localize", ibf::to_json(cfg.localize)}, {"checkpoint", a.checkpoint}, {"input", a.input}};
    m.seeds = {{"em", cfg.localize.em.seed}};
    m.write(out);
    if (skipped.size() == inputs.size()) {
        ibf::log_warn("every input was skipped");
        return 1;
    }
    return 0;
}

// ---- evaluate -------------------------------------------------------------

struct EvaluateArgs {
    std::string heatmaps;
    std::string truth;
};

std::optional<fs::path> truth_mask(const fs::path& truth_root, const std::string& id) {
    for (const fs::path& p : {truth_root / id / "mask.png", truth_root / "splices" / id / "mask.png",
                              truth_root / (id + ".png")})
        if (fs::exists(p)) return p;
    return std::nullopt;
}

int cmd_evaluate(const Globals& g, const EvaluateArgs& a) {
    if (!fs::is_directory(a.heatmaps)) throw EmptyInput("no heatmap directory " + a.heatmaps);
    std::vector<fs::path> maps;
    for (const auto& e : fs::directory_iterator(a.heatmaps))
        if (e.is_regular_file() && e.path().extension() == ".png") maps.push_back(e.path());
    std::sort(maps.begin(), maps.end());
    if (maps.empty()) throw EmptyInput("no heatmaps in " + a.heatmaps);

    std::vector<ibf::ScoredCase> cases;
    std::vector<std::string> missing;
    for (const auto& p : maps) {
        const std::string id = p.stem().string();
        const auto mask = truth_mask(a.truth, id);
        if (!mask) {
            ibf::log_warn("no truth mask for " + id + ", skipping");
            missing.push_back(id);
            continue;
        }
        cases.push_back({id, ibf::read_heatmap(p), ibf::read_mask_png(*mask)});
    }
    if (cases.empty()) throw EmptyInput("no heatmap matched a truth mask");
    auto report = ibf::evaluate_dataset(cases);
    report.skipped.insert(report.skipped.end(), missing.begin(), missing.end());
    std::sort(report.skipped.begin(), report.skipped.end());

    const fs::path out = out_dir(g, "evaluate");
    fs::create_directories(out);
    write_text(out / "scores.json", ibf::to_json(report).dump(2) + "\n");
    const std::string table = ibf::format_table(report);
    write_text(out / "scores.txt", table);
    if (!g.quiet) std::cout << table;

    Manifest m("evaluate", g);
    m.config = {{"heatmaps", a.heatmaps}, {"truth", a.truth}};
    m.artifacts = {"scores.json", "scores.txt"};
    m.write(out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Information-bottleneck camera fingerprints for splice localization"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Override the seed of the command");
    app.add_option("--out", g.out, "Output directory (default $IBF_OUT/<command> or ./ibf_out/<command>)");
    app.add_flag("--single-thread", g.single_thread, "Run on one thread");
    app.add_flag("-q,--quiet", g.quiet, "Suppress progress output");

    auto* synth = app.add_subcommand("synth", "Render the synthetic camera dataset and splice cases");

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train one model");
    train->add_option("--data", ta.data, "Dataset directory (default $IBF_OUT/synth)");
    train->add_option("--beta", ta.beta, "Rate weight");
    train->add_option("--epochs", ta.epochs, "Override the epoch count");
    train->add_flag("-v,--verbose", ta.verbose, "Log every epoch");

    auto* sweep = app.add_subcommand("sweep", "Train one model per beta and export the RD curve");
    sweep->add_option("--data", ta.data, "Dataset directory (default $IBF_OUT/synth)");
    sweep->add_option("--betas", ta.betas, "Beta values")->delimiter(',');
    sweep->add_option("--epochs", ta.epochs, "Override the epoch count");
    sweep->add_flag("--plot", ta.plot, "Also write rd_curve.svg");
    sweep->add_flag("-v,--verbose", ta.verbose, "Log every epoch");

    LocalizeArgs la;
    auto* localize = app.add_subcommand("localize", "Produce splice heatmaps");
    localize->add_option("--checkpoint", la.checkpoint, "Model checkpoint")->required();
    localize->add_option("input", la.input, "PNG file, directory of PNGs, or splice directory")->required();
    localize->add_option("--stride", la.stride, "Patch stride (0 = half the patch)");
    localize->add_flag("--mean-only", la.mean_only, "Segment on the code mean alone");

    EvaluateArgs ea;
    auto* evaluate = app.add_subcommand("evaluate", "Score heatmaps against truth masks");
    evaluate->add_option("--heatmaps", ea.heatmaps, "Directory of heatmap PNGs")->required();
    evaluate->add_option("--truth", ea.truth, "Splice directory or directory of mask PNGs")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    ibf::log_quiet() = g.quiet;
    if (g.single_thread) omp_set_num_threads(1);

    try {
        if (*synth) return cmd_synth(g);
        if (*train) return cmd_train(g, ta);
        if (*sweep) return cmd_sweep(g, ta);
        if (*localize) return cmd_localize(g, la);
        if (*evaluate) return cmd_evaluate(g, ea);
    } catch (const ibf::ConfigError& ex) {
        std::cerr << "error: invalid configuration: " << ex.what() << '\n';
        return 2;
    } catch (const EmptyInput& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return 1;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return 3;
    }
    return 0;
}
