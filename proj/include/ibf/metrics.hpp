#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibf/image.hpp"
#include "ibf/localization.hpp"

namespace ibf {

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fn = 0;

    std::uint64_t total() const { return tp + fp + tn + fn; }
};

ConfusionCounts confusion(const Mask& pred, const Mask& truth);
/// Counts for the prediction value > threshold.
ConfusionCounts confusion_at(std::span<const double> scores, std::span<const std::uint8_t> truth, double threshold);

/// Both return 0 when the denominator vanishes.
double f1(const ConfusionCounts& c);
double mcc(const ConfusionCounts& c);

/// Mann-Whitney AUC with midranks for ties. Throws DomainError when the
/// mask holds a single class.
double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> truth);
double roc_auc(const HeatMap& map, const Mask& truth);

enum class ThresholdMetric { F1, Mcc };

struct ThresholdScore {
    double threshold = 0.0;
    double score = 0.0;
};

/// Scans every cut between distinct values, plus the all-negative and
/// all-positive predictions, for prediction = value > threshold. The lowest
/// threshold wins ties.
ThresholdScore optimal_threshold(std::span<const double> scores, std::span<const std::uint8_t> truth,
                                 ThresholdMetric metric);
ThresholdScore optimal_threshold(const HeatMap& map, const Mask& truth, ThresholdMetric metric);

struct CaseScore {
    std::string case_id;
    double f1_optimal = 0.0;
    double f1_otsu = 0.0;
    double mcc_optimal = 0.0;
    double mcc_otsu = 0.0;
    double auc = 0.0;
    double threshold_f1 = 0.0;
    double threshold_mcc = 0.0;
    double threshold_otsu = 0.0;
};

struct ScoreReport {
    std::vector<CaseScore> cases;
    CaseScore mean;  // case_id "mean"; thresholds are averaged too
    std::vector<std::string> skipped;
};

struct ScoredCase {
    std::string case_id;
    HeatMap map;
    Mask truth;
};

CaseScore score_case(const ScoredCase& c);

/// Unweighted mean over cases. Cases that violate a precondition are logged
/// and listed in `skipped`; DataError if none remain.
ScoreReport evaluate_dataset(const std::vector<ScoredCase>& cases);

nlohmann::json to_json(const CaseScore& s);
nlohmann::json to_json(const ScoreReport& r);
/// Rows per case plus the mean; columns for optimal and Otsu thresholds.
std::string format_table(const ScoreReport& r);

}  // namespace ibf
