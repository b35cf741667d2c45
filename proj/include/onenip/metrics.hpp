#pragma once

// Threshold-free detection metrics: ROC-AUC and average precision, with ties
// grouped so equal scores move the operating point in a single step.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "onenip/errors.hpp"
#include "onenip/image.hpp"

namespace onenip {

struct EvalRecord {
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;  // 1 = anomalous

    void add(double score, bool positive) {
        scores.push_back(score);
        labels.push_back(positive ? 1 : 0);
    }
    std::size_t positives() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }
};

struct CurvePoint {
    double x, y;
};

namespace detail {

struct SweepStep {
    std::size_t tp, fp;  // cumulative counts after admitting one tie group
};

// Descending-score sweep, one step per distinct score.
inline std::vector<SweepStep> sweep(const EvalRecord& r) {
    if (r.scores.size() != r.labels.size())
        throw DimensionError("metric record has " + std::to_string(r.scores.size()) + " scores but " +
                             std::to_string(r.labels.size()) + " labels");
    for (double s : r.scores)
        if (std::isnan(s)) throw NumericError("metric record contains a NaN score");
    std::vector<std::size_t> order(r.scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return r.scores[a] > r.scores[b]; });
    std::vector<SweepStep> steps;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        (r.labels[order[i]] ? tp : fp) += 1;
        if (i + 1 == order.size() || r.scores[order[i + 1]] != r.scores[order[i]]) steps.push_back({tp, fp});
    }
    return steps;
}

inline void require_both_classes(const EvalRecord& r, const char* metric) {
    const std::size_t p = r.positives();
    if (p == 0 || p == r.labels.size())
        throw UndefinedMetricError(std::string(metric) + " needs both positive and negative samples (got " +
                                   std::to_string(p) + " positives of " + std::to_string(r.labels.size()) + ")");
}

}  // namespace detail

inline double roc_auc(const EvalRecord& r) {
    detail::require_both_classes(r, "roc_auc");
    const auto steps = detail::sweep(r);
    const double pos = static_cast<double>(r.positives());
    const double neg = static_cast<double>(r.labels.size()) - pos;
    double area = 0;  // in units of (fp x tp) counts
    std::size_t prev_tp = 0, prev_fp = 0;
    for (const auto& s : steps) {
        area += static_cast<double>(s.fp - prev_fp) * static_cast<double>(s.tp + prev_tp) / 2.0;
        prev_tp = s.tp;
        prev_fp = s.fp;
    }
    return area / (pos * neg);
}

// Average precision: sum over recall steps of (R_k - R_{k-1}) * P_k.
inline double pr_auc(const EvalRecord& r) {
    const std::size_t pos = r.positives();
    if (pos == 0) throw UndefinedMetricError("pr_auc needs at least one positive sample");
    const auto steps = detail::sweep(r);
    double ap = 0;
    std::size_t prev_tp = 0;
    for (const auto& s : steps) {
        if (s.tp != prev_tp)
            ap += static_cast<double>(s.tp - prev_tp) / static_cast<double>(pos) * static_cast<double>(s.tp) /
                  static_cast<double>(s.tp + s.fp);
        prev_tp = s.tp;
    }
    return ap;
}

// (FPR, TPR) from (0,0) to (1,1).
inline std::vector<CurvePoint> roc_curve(const EvalRecord& r) {
    detail::require_both_classes(r, "roc_curve");
    const double pos = static_cast<double>(r.positives());
    const double neg = static_cast<double>(r.labels.size()) - pos;
    std::vector<CurvePoint> pts{{0, 0}};
    for (const auto& s : detail::sweep(r)) pts.push_back({static_cast<double>(s.fp) / neg, static_cast<double>(s.tp) / pos});
    return pts;
}

// (recall, precision), one point per distinct threshold.
inline std::vector<CurvePoint> pr_curve(const EvalRecord& r) {
    const double pos = static_cast<double>(r.positives());
    if (pos == 0) throw UndefinedMetricError("pr_curve needs at least one positive sample");
    std::vector<CurvePoint> pts;
    for (const auto& s : detail::sweep(r))
        pts.push_back({static_cast<double>(s.tp) / pos, static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp)});
    return pts;
}

// ---- split-level evaluation -------------------------------------------------

struct ScoredImage {
    std::string class_name;
    bool anomalous = false;
    double image_score = 0;
    std::vector<float> pixel_scores;  // H x W
    std::size_t height = 0, width = 0;
    std::optional<Mask> mask;  // required for anomalous images; normal images default to all-zero
};

struct MetricSet {
    double i_roc = 0, i_pr = 0, p_roc = 0, p_pr = 0;
};

struct EvaluationReport {
    std::map<std::string, MetricSet> per_class;
    MetricSet mean;    // unweighted mean over classes
    MetricSet pooled;  // all images of all classes in one record
};

// Image metrics over per-image scores, pixel metrics over every pixel of every image pooled together.
inline MetricSet evaluate_images(const std::vector<const ScoredImage*>& images) {
    EvalRecord img, pix;
    for (const ScoredImage* s : images) {
        if (s->pixel_scores.size() != s->height * s->width)
            throw DimensionError("pixel score map size does not match " + std::to_string(s->height) + "x" +
                                 std::to_string(s->width));
        if (s->anomalous && !s->mask) throw DatasetError("anomalous test image of class " + s->class_name + " has no mask");
        if (s->mask && (s->mask->height != s->height || s->mask->width != s->width))
            throw DimensionError("mask size differs from the score map");
        img.add(s->image_score, s->anomalous);
        for (std::size_t p = 0; p < s->pixel_scores.size(); ++p)
            pix.add(s->pixel_scores[p], s->mask ? s->mask->values[p] != 0 : false);
    }
    return {roc_auc(img), pr_auc(img), roc_auc(pix), pr_auc(pix)};
}

inline EvaluationReport evaluate(const std::vector<ScoredImage>& results) {
    if (results.empty()) throw DatasetError("no test images to evaluate");
    EvaluationReport report;
    std::map<std::string, std::vector<const ScoredImage*>> groups;
    std::vector<const ScoredImage*> all;
    for (const auto& r : results) {
        groups[r.class_name].push_back(&r);
        all.push_back(&r);
    }
    for (const auto& [name, members] : groups) {
        MetricSet m = evaluate_images(members);
        report.per_class[name] = m;
        report.mean.i_roc += m.i_roc;
        report.mean.i_pr += m.i_pr;
        report.mean.p_roc += m.p_roc;
        report.mean.p_pr += m.p_pr;
    }
    const double n = static_cast<double>(groups.size());
    report.mean = {report.mean.i_roc / n, report.mean.i_pr / n, report.mean.p_roc / n, report.mean.p_pr / n};
    report.pooled = evaluate_images(all);
    return report;
}

}  // namespace onenip
