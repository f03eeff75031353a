#include "ibgc/ood.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ibgc/error.hpp"

namespace ibgc {

double quantile_type7(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw usage_error("quantile of an empty set");
  if (!(p >= 0.0 && p <= 1.0)) throw usage_error("quantile level must lie in [0, 1]");
  const double h = static_cast<double>(sorted.size() - 1) * p;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

ScoreSet::ScoreSet(std::vector<double> scores) : scores_(std::move(scores)) {
  if (scores_.size() < 2) throw data_error("a score set needs at least two reference scores");
  for (double s : scores_) {
    if (!std::isfinite(s)) throw numeric_error("non-finite reference score");
  }
  std::sort(scores_.begin(), scores_.end());
  mean_ = std::accumulate(scores_.begin(), scores_.end(), 0.0) / static_cast<double>(scores_.size());
}

double ScoreSet::quantile(double p) const { return quantile_type7(scores_, p); }

double ScoreSet::cdf(double s) const {
  const auto lo = std::lower_bound(scores_.begin(), scores_.end(), s);
  const auto hi = std::upper_bound(lo, scores_.end(), s);
  const double below = static_cast<double>(lo - scores_.begin());
  const double equal = static_cast<double>(hi - lo);
  return (below + 0.5 * equal) / static_cast<double>(scores_.size());
}

OodTestKind parse_ood_test(const std::string& name) {
  if (name == "single" || name == "single_threshold") return OodTestKind::single_threshold;
  if (name == "typicality") return OodTestKind::typicality;
  if (name == "two_tailed" || name == "two_tailed_quantile") return OodTestKind::two_tailed;
  throw usage_error("unknown OoD test '" + name + "' (single_threshold, typicality, two_tailed)");
}

std::string to_string(OodTestKind kind) {
  switch (kind) {
    case OodTestKind::single_threshold:
      return "single_threshold";
    case OodTestKind::typicality:
      return "typicality";
    case OodTestKind::two_tailed:
      return "two_tailed";
  }
  return "?";
}

OodTest fit_test(const ScoreSet& refs, OodTestKind kind, double p) {
  if (!(p > 0.0 && p < 1.0)) throw usage_error("OoD p-value must lie in (0, 1)");
  if (refs.size() < 2) throw data_error("OoD test needs a fitted reference set");
  OodTest t;
  t.kind = kind;
  t.p = p;
  t.center = refs.mean();
  switch (kind) {
    case OodTestKind::single_threshold:
      t.lower = refs.quantile(p);
      t.upper = std::numeric_limits<double>::infinity();
      break;
    case OodTestKind::two_tailed:
      t.lower = refs.quantile(p / 2.0);
      t.upper = refs.quantile(1.0 - p / 2.0);
      break;
    case OodTestKind::typicality: {
      std::vector<double> dev;
      dev.reserve(refs.size());
      for (double s : refs.scores()) dev.push_back(std::abs(s - t.center));
      std::sort(dev.begin(), dev.end());
      t.radius = quantile_type7(dev, 1.0 - p);
      t.lower = t.center - t.radius;
      t.upper = t.center + t.radius;
      break;
    }
  }
  t.degenerate = refs.scores().front() == refs.scores().back();
  return t;
}

bool is_ood(const OodTest& t, double score) {
  switch (t.kind) {
    case OodTestKind::single_threshold:
      return score < t.lower;
    case OodTestKind::two_tailed:
      return score < t.lower || score > t.upper;
    case OodTestKind::typicality:
      return std::abs(score - t.center) > t.radius;
  }
  return false;
}

double atypicality(const ScoreSet& refs, OodTestKind kind, double score) {
  switch (kind) {
    case OodTestKind::single_threshold:
      return -score;
    case OodTestKind::typicality:
      return std::abs(score - refs.mean());
    case OodTestKind::two_tailed: {
      const double f = refs.cdf(score);
      return std::max(f, 1.0 - f);
    }
  }
  return 0.0;
}

std::vector<double> atypicality(const ScoreSet& refs, OodTestKind kind, const std::vector<double>& scores) {
  std::vector<double> out;
  out.reserve(scores.size());
  for (double s : scores) out.push_back(atypicality(refs, kind, s));
  return out;
}

std::vector<RocPoint> roc_curve(const std::vector<double>& in, const std::vector<double>& ood) {
  if (in.empty() || ood.empty()) throw usage_error("roc: both score sets must be non-empty");
  struct Item {
    double s;
    bool positive;
  };
  std::vector<Item> items;
  items.reserve(in.size() + ood.size());
  for (double s : in) items.push_back({s, false});
  for (double s : ood) items.push_back({s, true});
  for (const auto& it : items) {
    if (std::isnan(it.s)) throw numeric_error("roc: NaN score");
  }
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.s > b.s; });
  const double np = static_cast<double>(ood.size()), nn = static_cast<double>(in.size());
  std::vector<RocPoint> curve{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < items.size();) {
    const double thr = items[i].s;
    for (; i < items.size() && items[i].s == thr; ++i) (items[i].positive ? tp : fp)++;
    curve.push_back({thr, static_cast<double>(fp) / nn, static_cast<double>(tp) / np});
  }
  return curve;
}

double roc_auc(const std::vector<double>& in, const std::vector<double>& ood) {
  const auto curve = roc_curve(in, ood);
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].fpr - curve[i - 1].fpr) * 0.5 * (curve[i].tpr + curve[i - 1].tpr);
  }
  return 100.0 * area;
}

}  // namespace ibgc
