// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Criteria 6-8 drive the ibf binary.
//
// Usage: acceptance [--work DIR] [--reuse] [--only N,N,...]
//   --reuse skips the beta sweep when DIR already holds a finished one.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli_runner.hpp"
#include "ibf/config_file.hpp"
#include "ibf/error.hpp"
#include "ibf/localization.hpp"
#include "ibf/metrics.hpp"
#include "ibf/objective.hpp"
#include "ibf/synthetic.hpp"
#include "pixel_oracle.hpp"

using namespace ibf;
using ibf::testing::read_bytes;
using ibf::testing::run_cli;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

fs::path g_work;
bool g_reuse = false;

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

// ---- 1: gradients -----------------------------------------------------------

Outcome gradient_check() {
    const FingerprintModel model(ModelConfig::tiny());
    ModelParams p = model.init_params(17);
    std::mt19937_64 r(23);
    std::normal_distribution<double> nd(0, 0.1);
    for (auto& t : p.tensors)
        if (t.trainable())
            for (auto& v : t.values) v += nd(r);
    Batch b;
    b.patches = Tensor(5, 3, 9, 9);
    std::uniform_real_distribution<double> u;
    for (auto& v : b.patches.data) v = u(r);
    for (int i = 0; i < 5; ++i) b.labels.push_back(i % model.num_classes());
    const LossWeights w{1e-2, 1.0, 1e-4, 1e-4};

    auto g = ParamGrads::zeros_like(p);
    FingerprintModel::Cache c;
    std::mt19937_64 rng(31);
    total_loss_and_gradient(model, p, b, w, rng, g, c);
    double worst = 0.0;
    std::size_t checked = 0;
    for (std::size_t t = 0; t < p.tensors.size(); ++t) {
        if (!p.tensors[t].trainable()) continue;
        for (std::size_t i = 0; i < p.tensors[t].values.size(); ++i) {
            const double o = p.tensors[t].values[i], h = 1e-6;
            p.tensors[t].values[i] = o + h;
            std::mt19937_64 ra(31);
            const double a = total_loss(model, p, b, w, ra).total;
            p.tensors[t].values[i] = o - h;
            std::mt19937_64 rb(31);
            const double bb = total_loss(model, p, b, w, rb).total;
            p.tensors[t].values[i] = o;
            const double fd = (a - bb) / (2 * h), an = g.values[t][i];
            worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-7}));
            ++checked;
        }
    }
    return {worst < 1e-4, std::to_string(checked) + " parameters, worst relative error " + fmt("%.2e", worst)};
}

// ---- 2: KL ------------------------------------------------------------------

Outcome kl_oracle() {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> mu(-2.0, 2.0), sg(0.3, 2.0);
    std::normal_distribution<double> nd;
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
        StochasticCode code;
        for (int k = 0; k < 4; ++k) {
            code.mean.push_back(mu(rng));
            code.scale.push_back(sg(rng));
        }
        const int draws = 100000;
        double acc = 0.0;
        for (int s = 0; s < draws; ++s)
            for (std::size_t k = 0; k < code.mean.size(); ++k) {
                const double e = nd(rng);
                const double z = code.mean[k] + code.scale[k] * e;
                acc += -0.5 * e * e - std::log(code.scale[k]) + 0.5 * z * z;
            }
        const double exact = rate_kl(code);
        worst = std::max(worst, std::abs(acc / draws - exact) / exact);
    }
    const StochasticCode prior{std::vector<double>(8, 0.0), std::vector<double>(8, 1.0)};
    const double at_prior = rate_kl(prior);
    return {worst < 0.01 && at_prior == 0.0,
            "worst relative error " + fmt("%.4f", worst) + ", KL at prior " + fmt("%g", at_prior)};
}

// ---- 3: constraint ----------------------------------------------------------

Outcome constraint_semantics() {
    std::mt19937_64 rng(53);
    std::normal_distribution<double> nd(0.2, 1.0);
    std::uniform_int_distribution<int> filters(1, 6), kern(0, 2);
    int wrong = 0;
    double worst_response = 0.0;
    for (int t = 0; t < 100; ++t) {
        const ConstrainedConvSpec spec{filters(rng), 3 + 2 * kern(rng), 3};
        std::vector<double> w(spec.weight_count());
        for (auto& v : w) v = nd(rng);
        const bool projected = t % 2 == 0;
        if (projected) project_zero_sum(w, spec);
        bool zero_sum = true;
        const std::size_t per = w.size() / spec.num_filters;
        for (int k = 0; k < spec.num_filters; ++k) {
            double s = 0.0, mag = 0.0;
            for (std::size_t i = 0; i < per; ++i) {
                s += w[k * per + i];
                mag += std::abs(w[k * per + i]);
            }
            zero_sum = zero_sum && std::abs(s) <= 1e-12 * mag;
        }
        const double pen = constraint_penalty(w, spec);
        if ((pen < 1e-10) != zero_sum || zero_sum != projected) ++wrong;
        if (projected) {
            const Tensor flat(1, 3, spec.support + 4, spec.support + 4, 0.6180339);
            for (double v : constrained_conv_forward(flat, spec, w).data)
                worst_response = std::max(worst_response, std::abs(v));
        }
    }
    return {wrong == 0 && worst_response < 1e-12,
            std::to_string(wrong) + " misclassified banks, max response to constant input " +
                fmt("%.1e", worst_response)};
}

// ---- 4: EM ------------------------------------------------------------------

std::vector<double> draw_mixture(int n0, int n1, int dim, double offset, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> out;
    for (int i = 0; i < n0 + n1; ++i)
        for (int k = 0; k < dim; ++k) out.push_back(nd(rng) + (i >= n0 ? offset : 0.0));
    return out;
}

Outcome em_correctness() {
    int non_monotone = 0;
    for (int t = 0; t < 50; ++t) {
        const int dim = 2 + t % 4;
        const auto x = draw_mixture(80 + 3 * t, 30 + t, dim, 0.3 + 0.05 * t, 1000 + t);
        EmConfig cfg;
        cfg.seed = t;
        cfg.covariance = t % 3 == 2 ? CovarianceKind::Diagonal : CovarianceKind::Full;
        const Gmm2 g = fit_gmm2(x, dim, cfg);
        for (std::size_t i = 1; i < g.objective_trace.size(); ++i)
            if (g.objective_trace[i] < g.objective_trace[i - 1] - 1e-9 * std::abs(g.objective_trace[i - 1])) {
                ++non_monotone;
                break;
            }
    }
    // 6 sigma separation along every axis; recovered means within 0.5 sigma.
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
        const int dim = 3 + t % 3;
        const auto x = draw_mixture(400, 150, dim, 6.0, 7000 + t);
        const Gmm2 g = fit_gmm2(x, dim);
        const int zero = std::abs(g.means[0][0]) < std::abs(g.means[1][0]) ? 0 : 1;
        for (int k = 0; k < dim; ++k) {
            worst = std::max(worst, std::abs(g.means[zero][k]));
            worst = std::max(worst, std::abs(g.means[1 - zero][k] - 6.0));
            worst = std::max(worst, std::abs(std::sqrt(g.covariances[zero][k * dim + k]) - 1.0));
            worst = std::max(worst, std::abs(std::sqrt(g.covariances[1 - zero][k * dim + k]) - 1.0));
        }
    }
    return {non_monotone == 0 && worst < 0.5, std::to_string(non_monotone) +
                                                  " non-monotone fits of 50, worst parameter error " +
                                                  fmt("%.3f", worst) + " sigma"};
}

// ---- 5: metrics -------------------------------------------------------------

double pairwise_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& t) {
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (t[i] && !t[j]) {
                pairs += 1;
                wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
            }
    return wins / pairs;
}

Outcome metric_oracles() {
    int failures = 0;
    auto expect = [&](bool ok) { failures += !ok; };
    expect(f1({5, 0, 5, 0}) == 1.0 && mcc({5, 0, 5, 0}) == 1.0);
    expect(std::abs(f1({1, 1, 1, 1}) - 0.5) < 1e-15 && mcc({1, 1, 1, 1}) == 0.0);
    expect(f1({0, 0, 4, 0}) == 0.0 && mcc({0, 0, 4, 0}) == 0.0);
    expect(mcc({0, 3, 0, 3}) == -1.0);
    expect(roc_auc(std::vector<double>(6, 0.3), std::vector<std::uint8_t>{1, 0, 1, 0, 0, 0}) == 0.5);

    std::mt19937_64 rng(61);
    std::uniform_int_distribution<int> level(0, 6), side(3, 9);
    std::bernoulli_distribution coin(0.35);
    for (int t = 0; t < 100; ++t) {
        const int w = side(rng), h = side(rng);
        HeatMap map;
        map.width = w;
        map.height = h;
        Mask truth(w, h);
        for (int i = 0; i < w * h; ++i) {
            truth.data[i] = coin(rng);
            map.values.push_back(std::min(1.0, (level(rng) + 2.0 * truth.data[i]) / 8.0));
        }
        truth.data[0] = 1;
        truth.data[1] = 0;
        expect(std::abs(roc_auc(map, truth) - pairwise_auc(map.values, truth.data)) < 1e-12);
        double otsu = 0.5;
        try {
            otsu = otsu_threshold(map);
        } catch (const DomainError&) {
        }
        const auto oc = confusion_at(map.values, truth.data, otsu);
        expect(optimal_threshold(map, truth, ThresholdMetric::F1).score >= f1(oc));
        expect(optimal_threshold(map, truth, ThresholdMetric::Mcc).score >= mcc(oc));
    }
    return {failures == 0, std::to_string(failures) + " failed checks"};
}

// ---- 6-8: end to end through the CLI ------------------------------------------

std::string cli(const std::string& args) { return "-q --out " + args; }

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::ifstream is(p);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

double mean_f1_optimal(const fs::path& scores) {
    std::ifstream is(scores);
    return nlohmann::json::parse(is).at("mean").at("f1_optimal").get<double>();
}

struct SweepData {
    bool ok = false;
    std::string error;
    std::vector<double> betas, rates, accuracies;
    std::vector<fs::path> checkpoints;
};

SweepData run_sweep() {
    SweepData s;
    const fs::path synth = g_work / "synth", sweep = g_work / "sweep";
    if (!(g_reuse && fs::exists(synth / "run_manifest.json"))) {
        fs::remove_all(synth);
        if (run_cli(cli(synth.string()) + " synth") != 0) {
            s.error = "synth failed";
            return s;
        }
    }
    if (!(g_reuse && fs::exists(sweep / "rd_curve.csv"))) {
        fs::remove_all(sweep);
        if (run_cli("--out " + sweep.string() + " sweep --data " + synth.string() + " --plot -v") != 0) {
            s.error = "sweep failed";
            return s;
        }
    }
    for (const auto& row : read_csv(sweep / "rd_curve.csv")) {
        s.betas.push_back(std::stod(row.at(0)));
        s.rates.push_back(std::stod(row.at(1)));
        s.accuracies.push_back(std::stod(row.at(3)));
    }
    for (const auto& e : fs::directory_iterator(sweep))
        if (e.is_directory() && fs::exists(e.path() / "final.ckpt")) s.checkpoints.push_back(e.path() / "final.ckpt");
    std::sort(s.checkpoints.begin(), s.checkpoints.end());
    s.ok = s.betas.size() == 4 && s.checkpoints.size() == 4;
    if (!s.ok) s.error = "sweep produced incomplete results";
    return s;
}

Outcome toy_identification(const SweepData& s) {
    const SynthConfig sc;
    const auto bank = make_camera_bank(sc.num_models, sc.seed, sc.bank);
    const double oracle = ibf::testing::pixel_oracle_accuracy(bank, sc.image_size, 28, 50, 1);
    if (oracle < 0.90) return {false, "pixel statistics oracle only reaches " + fmt("%.3f", oracle)};
    if (!s.ok) return {false, s.error};
    const double acc = s.accuracies.front();
    return {s.betas.front() == 0.0 && acc >= 0.90,
            "oracle " + fmt("%.3f", oracle) + ", beta=0 validation accuracy after 40 epochs " + fmt("%.4f", acc)};
}

Outcome directional_ib(const SweepData& s) {
    if (!s.ok) return {false, s.error};
    int inversions = 0;
    bool large_inversion = false;
    for (std::size_t i = 1; i < s.rates.size(); ++i)
        if (s.rates[i] > s.rates[i - 1]) {
            ++inversions;
            large_inversion = large_inversion || s.rates[i] > 1.05 * s.rates[i - 1];
        }
    const bool rate_ok = inversions == 0 || (inversions == 1 && !large_inversion);

    const fs::path synth = g_work / "synth";
    std::vector<double> f1s;
    for (std::size_t i = 0; i < s.checkpoints.size(); ++i) {
        const fs::path maps = g_work / ("maps_" + std::to_string(i)), eval = g_work / ("eval_" + std::to_string(i));
        fs::remove_all(maps);
        fs::remove_all(eval);
        if (run_cli(cli(maps.string()) + " localize --checkpoint " + s.checkpoints[i].string() + " " + synth.string()) ||
            run_cli(cli(eval.string()) + " evaluate --heatmaps " + maps.string() + " --truth " + synth.string()))
            return {false, "localize/evaluate failed for beta=" + fmt("%g", s.betas[i])};
        f1s.push_back(mean_f1_optimal(eval / "scores.json"));
    }
    std::ostringstream d;
    d << "rates";
    for (double r : s.rates) d << ' ' << fmt("%.3f", r);
    d << "; mean optimal F1";
    for (std::size_t i = 0; i < f1s.size(); ++i) d << " beta=" << fmt("%g", s.betas[i]) << ":" << fmt("%.4f", f1s[i]);
    const double best_ib = *std::max_element(f1s.begin() + 1, f1s.end());
    d << "; margin " << fmt("%+.4f", best_ib - f1s[0]);
    return {rate_ok && best_ib >= f1s[0] + 0.03, d.str()};
}

// Every output file of two single-threaded runs must match byte for byte.
// run_manifest.json records wall-clock time and is excluded.
bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
    std::set<fs::path> files;
    for (const auto& root : {a, b})
        for (const auto& e : fs::recursive_directory_iterator(root))
            if (e.is_regular_file() && e.path().filename() != "run_manifest.json")
                files.insert(fs::relative(e.path(), root));
    for (const auto& f : files)
        if (!fs::exists(a / f) || !fs::exists(b / f) || read_bytes(a / f) != read_bytes(b / f)) {
            why = f.generic_string();
            return false;
        }
    return !files.empty();
}

Outcome reproducibility() {
    const fs::path root = g_work / "repro";
    fs::remove_all(root);
    fs::create_directories(root);
    {
        std::ofstream cfg(root / "small.json");
        cfg << R"({"synth": {"images_per_model": 12, "num_splices": 3},
                   "train": {"epochs": 2, "constant_epochs": 1, "linear_epochs": 1, "exponential_epochs": 0,
                             "patches_per_epoch": 256, "validation_patches": 128},
                   "sweep": {"betas": [0, 0.001]}})";
    }
    const std::string base = "--single-thread -q --config " + (root / "small.json").string() + " --seed 5 --out ";
    const std::vector<std::pair<std::string, std::function<std::string(const fs::path&)>>> commands = {
        {"synth", [&](const fs::path& r) { return base + (r / "synth").string() + " synth"; }},
        {"train", [&](const fs::path& r) { return base + (r / "train").string() + " train --data " + (r / "synth").string(); }},
        {"sweep", [&](const fs::path& r) { return base + (r / "sweep").string() + " sweep --plot --data " + (r / "synth").string(); }},
        {"localize",
         [&](const fs::path& r) {
             return base + (r / "maps").string() + " localize --checkpoint " + (r / "train" / "final.ckpt").string() + " " +
                    (r / "synth").string();
         }},
        {"evaluate",
         [&](const fs::path& r) {
             return base + (r / "eval").string() + " evaluate --heatmaps " + (r / "maps").string() + " --truth " +
                    (r / "synth").string();
         }},
    };
    for (const char* run : {"a", "b"})
        for (const auto& [name, make] : commands)
            if (run_cli(make(root / run)) != 0) return {false, std::string(name) + " failed in run " + run};
    std::string why;
    for (const auto& [name, make] : commands) {
        (void)make;
        const std::string sub = name == "localize" ? "maps" : name == "evaluate" ? "eval" : name;
        if (!same_tree(root / "a" / sub, root / "b" / sub, why))
            return {false, name + " output differs: " + why};
    }
    return {true, "synth, train, sweep, localize and evaluate outputs are byte-identical"};
}

}  // namespace

int main(int argc, char** argv) {
    g_work = fs::current_path() / "acceptance_work";
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--work" && i + 1 < argc) g_work = argv[++i];
        else if (a == "--reuse") g_reuse = true;
        else if (a == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            std::string n;
            while (std::getline(ss, n, ',')) only.insert(std::stoi(n));
        } else {
            std::cerr << "usage: acceptance [--work DIR] [--reuse] [--only N,N,...]\n";
            return 2;
        }
    }
    fs::create_directories(g_work);

    SweepData sweep;
    bool sweep_done = false;
    auto sweep_data = [&]() -> const SweepData& {
        if (!sweep_done) {
            try {
                sweep = run_sweep();
            } catch (const std::exception& ex) {
                sweep.error = ex.what();
            }
            sweep_done = true;
        }
        return sweep;
    };

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"gradient correctness", gradient_check},
        {"KL oracle", kl_oracle},
        {"constraint semantics", constraint_semantics},
        {"EM correctness", em_correctness},
        {"metric oracles", metric_oracles},
        {"toy camera identification", [&] { return toy_identification(sweep_data()); }},
        {"directional IB reproduction", [&] { return directional_ib(sweep_data()); }},
        {"reproducibility", reproducibility},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& ex) {
            o = {false, std::string("exception: ") + ex.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail
                  << " [" << fmt("%.1f", secs) << " s]" << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
