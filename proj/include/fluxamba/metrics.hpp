#pragma once

#include <iomanip>
#include <sstream>

#include "fluxamba/tensor.hpp"

namespace flux {

struct ConfusionCounts {
  long long tp = 0, fp = 0, fn = 0, tn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  long long total() const { return tp + fp + fn + tn; }
};

inline ConfusionCounts confusion(const Tensor& p, const Tensor& y, double t) {
  if (p.shape != y.shape)
    throw ShapeError("confusion: " + shape_str(p.shape) + " vs " +
                     shape_str(y.shape));
  if (t <= 0.0 || t >= 1.0)
    throw ConfigError("confusion: threshold must be in (0,1)");
  ConfusionCounts c;
  for (size_t i = 0; i < p.size(); ++i) {
    bool pred = p.at(i) >= t;
    bool pos = y.at(i) >= 0.5;
    if (pred && pos) ++c.tp;
    else if (pred && !pos) ++c.fp;
    else if (!pred && pos) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// 0/0 -> 0 convention throughout.
inline double precision(const ConfusionCounts& c) {
  return c.tp + c.fp == 0 ? 0.0 : static_cast<double>(c.tp) / (c.tp + c.fp);
}
inline double recall(const ConfusionCounts& c) {
  return c.tp + c.fn == 0 ? 0.0 : static_cast<double>(c.tp) / (c.tp + c.fn);
}
inline double f1_from_counts(const ConfusionCounts& c) {
  double p = precision(c), r = recall(c);
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

// Macro IoU exactly as the evaluation protocol states it. The `standard`
// flag recomputes the background term from the canonical union counting;
// the two coincide algebraically and the flag exists for auditability.
inline double miou_from_counts(const ConfusionCounts& c, bool standard = false) {
  double fg_den = static_cast<double>(c.tp + c.fp + c.fn);
  double fg = fg_den == 0.0 ? 0.0 : c.tp / fg_den;
  double bg_den = standard
                      ? static_cast<double>((c.tn + c.fn) + (c.tn + c.fp) - c.tn)
                      : static_cast<double>(c.tn + c.fn + c.fp);
  double bg = bg_den == 0.0 ? 0.0 : c.tn / bg_den;
  return 0.5 * (fg + bg);
}

inline double miou(const Tensor& p, const Tensor& y, double t = 0.5,
                   bool standard = false) {
  return miou_from_counts(confusion(p, y, t), standard);
}

inline std::vector<double> default_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 99; ++i) t.push_back(i / 100.0);
  return t;
}

struct ThresholdSweep {
  std::vector<double> thresholds;
  std::vector<std::vector<ConfusionCounts>> counts;  // [image][threshold]
};

inline ThresholdSweep make_sweep(const std::vector<Tensor>& preds,
                                 const std::vector<Tensor>& masks,
                                 std::vector<double> thresholds = default_thresholds()) {
  if (preds.size() != masks.size())
    throw DataError("make_sweep: prediction/mask count mismatch");
  ThresholdSweep s;
  s.thresholds = std::move(thresholds);
  for (size_t i = 0; i < preds.size(); ++i) {
    std::vector<ConfusionCounts> row;
    for (double t : s.thresholds) row.push_back(confusion(preds[i], masks[i], t));
    s.counts.push_back(std::move(row));
  }
  return s;
}

// Best F1 with one dataset-wide threshold: pool counts per threshold first.
inline double ods(const ThresholdSweep& s) {
  if (s.counts.empty()) throw DataError("ods: empty sweep");
  double best = 0.0;
  for (size_t ti = 0; ti < s.thresholds.size(); ++ti) {
    ConfusionCounts pooled;
    for (const auto& img : s.counts) pooled += img[ti];
    best = std::max(best, f1_from_counts(pooled));
  }
  return best;
}

// Mean over images of each image's best-threshold F1.
inline double ois(const ThresholdSweep& s) {
  if (s.counts.empty()) throw DataError("ois: empty sweep");
  double acc = 0.0;
  for (const auto& img : s.counts) {
    double best = 0.0;
    for (const auto& c : img) best = std::max(best, f1_from_counts(c));
    acc += best;
  }
  return acc / s.counts.size();
}

struct EvalReport {
  double ods = 0, ois = 0;
  double precision = 0, recall = 0, f1 = 0, miou = 0;  // at t = 0.5
};

inline EvalReport evaluate(const std::vector<Tensor>& preds,
                           const std::vector<Tensor>& masks) {
  ThresholdSweep s = make_sweep(preds, masks);
  EvalReport r;
  r.ods = ods(s);
  r.ois = ois(s);
  ConfusionCounts pooled;
  for (size_t i = 0; i < preds.size(); ++i)
    pooled += confusion(preds[i], masks[i], 0.5);
  r.precision = precision(pooled);
  r.recall = recall(pooled);
  r.f1 = f1_from_counts(pooled);
  r.miou = miou_from_counts(pooled);
  return r;
}

struct RobustnessRow {
  double sigma = 0;
  double miou = 0;
  double drop = 0;  // (miou(0) - miou(sigma)) / miou(0)
};

inline std::vector<RobustnessRow> drop_rates(const std::vector<double>& sigmas,
                                             const std::vector<double>& mious) {
  if (sigmas.size() != mious.size() || sigmas.empty())
    throw ConfigError("drop_rates: sigma/miou length mismatch");
  double base = mious[0];
  std::vector<RobustnessRow> rows;
  for (size_t i = 0; i < sigmas.size(); ++i) {
    double drop = base == 0.0 ? 0.0 : (base - mious[i]) / base;
    rows.push_back({sigmas[i], mious[i], drop});
  }
  return rows;
}

inline std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "metric   value\n"
     << "ODS      " << r.ods << "\n"
     << "OIS      " << r.ois << "\n"
     << "P        " << r.precision << "\n"
     << "R        " << r.recall << "\n"
     << "F1       " << r.f1 << "\n"
     << "mIoU     " << r.miou << "\n";
  return os.str();
}

inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "metric,threshold,value\n"
     << "ods,best," << r.ods << "\n"
     << "ois,best," << r.ois << "\n"
     << "precision,0.5," << r.precision << "\n"
     << "recall,0.5," << r.recall << "\n"
     << "f1,0.5," << r.f1 << "\n"
     << "miou,0.5," << r.miou << "\n";
  return os.str();
}

inline std::string robustness_csv(const std::vector<RobustnessRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(10) << "sigma,miou,drop\n";
  for (const auto& r : rows)
    os << r.sigma << "," << r.miou << "," << r.drop << "\n";
  return os.str();
}

}  // namespace flux
