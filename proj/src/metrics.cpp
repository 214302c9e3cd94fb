#include "ibf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "ibf/error.hpp"
#include "ibf/log.hpp"

namespace ibf {

ConfusionCounts confusion(const Mask& pred, const Mask& truth) {
    if (pred.width != truth.width || pred.height != truth.height)
        throw ShapeError("confusion: prediction is " + std::to_string(pred.width) + "x" + std::to_string(pred.height) +
                         " but truth is " + std::to_string(truth.width) + "x" + std::to_string(truth.height));
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] != 0, t = truth.data[i] != 0;
        if (p && t) ++c.tp;
        else if (p) ++c.fp;
        else if (t) ++c.fn;
        else ++c.tn;
    }
    return c;
}

ConfusionCounts confusion_at(std::span<const double> scores, std::span<const std::uint8_t> truth, double threshold) {
    if (scores.size() != truth.size()) throw ShapeError("confusion_at: size mismatch");
    ConfusionCounts c;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool p = scores[i] > threshold, t = truth[i] != 0;
        if (p && t) ++c.tp;
        else if (p) ++c.fp;
        else if (t) ++c.fn;
        else ++c.tn;
    }
    return c;
}

double f1(const ConfusionCounts& c) {
    const double den = 2.0 * c.tp + c.fp + c.fn;
    return den > 0.0 ? 2.0 * c.tp / den : 0.0;
}

double mcc(const ConfusionCounts& c) {
    const double tp = c.tp, fp = c.fp, tn = c.tn, fn = c.fn;
    const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (!(den > 0.0)) return 0.0;
    return std::clamp((tp * tn - fp * fn) / std::sqrt(den), -1.0, 1.0);
}

namespace {

void check_two_classes(std::span<const double> scores, std::span<const std::uint8_t> truth, const char* who) {
    if (scores.size() != truth.size()) throw ShapeError(std::string(who) + ": score and mask sizes differ");
    const auto pos = std::count_if(truth.begin(), truth.end(), [](std::uint8_t v) { return v != 0; });
    if (pos == 0 || pos == static_cast<std::ptrdiff_t>(truth.size()))
        throw DomainError(std::string(who) + ": AUC undefined, mask holds a single class");
}

std::vector<std::size_t> sorted_order(std::span<const double> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    return order;
}

void check_map(const HeatMap& map, const Mask& truth) {
    if (map.width != truth.width || map.height != truth.height)
        throw ShapeError("heatmap is " + std::to_string(map.width) + "x" + std::to_string(map.height) +
                         " but mask is " + std::to_string(truth.width) + "x" + std::to_string(truth.height));
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> truth) {
    check_two_classes(scores, truth, "roc_auc");
    const auto order = sorted_order(scores);
    double rank_sum = 0.0, pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
        for (std::size_t k = i; k < j; ++k)
            if (truth[order[k]]) {
                rank_sum += midrank;
                pos += 1.0;
            }
        i = j;
    }
    const double neg = static_cast<double>(scores.size()) - pos;
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double roc_auc(const HeatMap& map, const Mask& truth) {
    check_map(map, truth);
    return roc_auc(map.values, truth.data);
}

ThresholdScore optimal_threshold(std::span<const double> scores, std::span<const std::uint8_t> truth,
                                 ThresholdMetric metric) {
    check_two_classes(scores, truth, "optimal_threshold");
    const auto order = sorted_order(scores);
    auto score_of = [&](const ConfusionCounts& c) { return metric == ThresholdMetric::F1 ? f1(c) : mcc(c); };

    ConfusionCounts c;
    for (auto t : truth) (t ? c.tp : c.fp) += 1;
    const double lo = scores[order.front()];
    ThresholdScore best{std::nextafter(lo, -std::numeric_limits<double>::infinity()), score_of(c)};

    std::size_t i = 0;
    while (i < order.size()) {
        const double v = scores[order[i]];
        std::size_t j = i;
        for (; j < order.size() && scores[order[j]] == v; ++j) {
            if (truth[order[j]]) {
                --c.tp;
                ++c.fn;
            } else {
                --c.fp;
                ++c.tn;
            }
        }
        double t = v;
        if (j < order.size()) {
            const double next = scores[order[j]];
            t = v + (next - v) / 2.0;
            if (!(t < next)) t = v;
        }
        const double s = score_of(c);
        if (s > best.score) best = {t, s};
        i = j;
    }
    return best;
}

ThresholdScore optimal_threshold(const HeatMap& map, const Mask& truth, ThresholdMetric metric) {
    check_map(map, truth);
    return optimal_threshold(map.values, truth.data, metric);
}

CaseScore score_case(const ScoredCase& sc) {
    check_map(sc.map, sc.truth);
    CaseScore s;
    s.case_id = sc.case_id;
    s.auc = roc_auc(sc.map, sc.truth);
    const auto bf = optimal_threshold(sc.map, sc.truth, ThresholdMetric::F1);
    const auto bm = optimal_threshold(sc.map, sc.truth, ThresholdMetric::Mcc);
    s.f1_optimal = bf.score;
    s.threshold_f1 = bf.threshold;
    s.mcc_optimal = bm.score;
    s.threshold_mcc = bm.threshold;
    try {
        s.threshold_otsu = otsu_threshold(sc.map);
    } catch (const DomainError&) {
        // Constant map: Otsu has no cut, so predict nothing.
        s.threshold_otsu = *std::max_element(sc.map.values.begin(), sc.map.values.end());
    }
    const auto c = confusion_at(sc.map.values, sc.truth.data, s.threshold_otsu);
    s.f1_otsu = f1(c);
    s.mcc_otsu = mcc(c);
    return s;
}

ScoreReport evaluate_dataset(const std::vector<ScoredCase>& cases) {
    if (cases.empty()) throw DataError("evaluate_dataset: no cases");
    std::vector<CaseScore> scores(cases.size());
    std::vector<std::string> errors(cases.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < cases.size(); ++i) {
        try {
            scores[i] = score_case(cases[i]);
        } catch (const std::exception& ex) {
            errors[i] = ex.what();
            if (errors[i].empty()) errors[i] = "unknown error";
        }
    }
    ScoreReport r;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        if (!errors[i].empty()) {
            log_warn("skipping " + cases[i].case_id + ": " + errors[i]);
            r.skipped.push_back(cases[i].case_id);
        } else {
            r.cases.push_back(scores[i]);
        }
    }
    if (r.cases.empty()) throw DataError("evaluate_dataset: every case was skipped");
    CaseScore& m = r.mean;
    m.case_id = "mean";
    for (const auto& s : r.cases) {
        m.f1_optimal += s.f1_optimal;
        m.f1_otsu += s.f1_otsu;
        m.mcc_optimal += s.mcc_optimal;
        m.mcc_otsu += s.mcc_otsu;
        m.auc += s.auc;
        m.threshold_f1 += s.threshold_f1;
        m.threshold_mcc += s.threshold_mcc;
        m.threshold_otsu += s.threshold_otsu;
    }
    const double n = static_cast<double>(r.cases.size());
    for (double* v : {&m.f1_optimal, &m.f1_otsu, &m.mcc_optimal, &m.mcc_otsu, &m.auc, &m.threshold_f1,
                      &m.threshold_mcc, &m.threshold_otsu})
        *v /= n;
    return r;
}

nlohmann::json to_json(const CaseScore& s) {
    return {{"case_id", s.case_id},         {"f1_optimal", s.f1_optimal},   {"f1_otsu", s.f1_otsu},
            {"mcc_optimal", s.mcc_optimal}, {"mcc_otsu", s.mcc_otsu},       {"auc", s.auc},
            {"threshold_f1", s.threshold_f1}, {"threshold_mcc", s.threshold_mcc},
            {"threshold_otsu", s.threshold_otsu}};
}

nlohmann::json to_json(const ScoreReport& r) {
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& s : r.cases) cases.push_back(to_json(s));
    return {{"cases", cases}, {"mean", to_json(r.mean)}, {"skipped", r.skipped}};
}

std::string format_table(const ScoreReport& r) {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof line, "%-12s %10s %10s %10s %10s %8s\n", "case", "F1 opt", "F1 otsu", "MCC opt",
                  "MCC otsu", "AUC");
    os << line;
    auto row = [&](const CaseScore& s) {
        std::snprintf(line, sizeof line, "%-12s %10.4f %10.4f %10.4f %10.4f %8.4f\n", s.case_id.c_str(), s.f1_optimal,
                      s.f1_otsu, s.mcc_optimal, s.mcc_otsu, s.auc);
        os << line;
    };
    for (const auto& s : r.cases) row(s);
    os << std::string(65, '-') << '\n';
    row(r.mean);
    if (!r.skipped.empty()) {
        os << "skipped:";
        for (const auto& id : r.skipped) os << ' ' << id;
        os << '\n';
    }
    return os.str();
}

}  // namespace ibf
