#include "ibgc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ibgc/error.hpp"
#include "ibgc/report.hpp"
#include "ibgc/trainer.hpp"

namespace ibgc {

double predictive_entropy(const std::vector<double>& p) {
  if (p.empty()) throw usage_error("entropy of an empty distribution");
  double total = 0.0, h = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw usage_error("entropy: negative probability");
    total += v;
    if (v > 0.0) h -= v * std::log(v);
  }
  if (std::abs(total - 1.0) > 1e-6) throw usage_error("entropy: probabilities do not sum to one");
  return h;
}

CalibrationCurve calibration_curve(const std::vector<double>& confidence, const std::vector<bool>& correct,
                                   std::size_t bins) {
  if (confidence.empty()) throw usage_error("calibration curve of an empty set");
  if (confidence.size() != correct.size()) throw usage_error("confidence/correctness length mismatch");
  if (bins == 0) throw usage_error("calibration needs at least one bin");
  CalibrationCurve c;
  c.bins = bins;
  c.count.assign(bins, 0);
  std::vector<double> hits(bins, 0.0), conf(bins, 0.0);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const double v = confidence[i];
    if (!(v >= 0.0 && v <= 1.0)) throw usage_error("confidence outside [0, 1]");
    const std::size_t b = std::min(bins - 1, static_cast<std::size_t>(v * static_cast<double>(bins)));
    ++c.count[b];
    hits[b] += correct[i] ? 1.0 : 0.0;
    conf[b] += v;
  }
  c.total = confidence.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t b = 0; b < bins; ++b) {
    const double n = static_cast<double>(c.count[b]);
    c.accuracy.push_back(c.count[b] ? hits[b] / n : nan);
    c.mean_confidence.push_back(c.count[b] ? conf[b] / n : nan);
  }
  return c;
}

double ece(const CalibrationCurve& c) {
  double acc = 0.0;
  for (std::size_t b = 0; b < c.bins; ++b) {
    if (c.count[b]) acc += static_cast<double>(c.count[b]) * std::abs(c.midpoint(b) - c.accuracy[b]);
  }
  return acc / static_cast<double>(c.total);
}

double mce(const CalibrationCurve& c) {
  double worst = 0.0;
  for (std::size_t b = 0; b < c.bins; ++b) {
    if (c.count[b]) worst = std::max(worst, std::abs(c.midpoint(b) - c.accuracy[b]));
  }
  return worst;
}

std::optional<double> oce(const std::vector<double>& confidence, const std::vector<bool>& correct, double c_crit) {
  if (confidence.size() != correct.size()) throw usage_error("confidence/correctness length mismatch");
  if (!(c_crit > 0.0 && c_crit < 1.0)) throw usage_error("C_crit must lie in (0, 1)");
  std::size_t n = 0, wrong = 0;
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    if (confidence[i] >= c_crit) {
      ++n;
      wrong += correct[i] ? 0 : 1;
    }
  }
  if (n == 0) return std::nullopt;
  return (static_cast<double>(wrong) / static_cast<double>(n)) / (1.0 - c_crit);
}

void per_class_pairs(const std::vector<Prediction>& preds, const std::vector<std::size_t>& labels,
                     std::vector<double>& confidence, std::vector<bool>& correct) {
  if (preds.size() != labels.size()) throw usage_error("prediction/label count mismatch");
  confidence.clear();
  correct.clear();
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (std::size_t y = 0; y < preds[i].posterior.size(); ++y) {
      confidence.push_back(std::clamp(preds[i].posterior[y], 0.0, 1.0));
      correct.push_back(y == labels[i]);
    }
  }
}

// ---------------------------------------------------------------------------

ReceptiveField effective_receptive_field(const FlowModel& model, const Tensor& images, double tol) {
  if (images.rank() != 4 || images.dim(0) == 0) throw usage_error("receptive field needs a non-empty image batch");
  const auto f = model.feature_chw();
  if (f[1] < 1 || f[2] < 1) throw usage_error("model too small for a center feature column");
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t cy = f[1] / 2, cx = f[2] / 2;

  Tape tape;
  Tensor x = tape.variable(images);
  const Encoding enc = model.encode(x);
  const Tensor& feat = enc.features;
  ReceptiveField rf;
  rf.height = h;
  rf.width = w;
  rf.sensitivity.assign(h * w, 0.0);
  std::vector<double> seed(feat.size(), 0.0);
  for (std::size_t l = 0; l < f[0]; ++l) {
    std::fill(seed.begin(), seed.end(), 0.0);
    for (std::size_t b = 0; b < n; ++b) seed[((b * f[0] + l) * f[1] + cy) * f[2] + cx] = 1.0;
    tape.zero_grad();
    tape.backward(feat, seed);
    const auto g = x.grad();
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t p = 0; p < h * w; ++p) rf.sensitivity[p] += std::abs(g[(b * c + k) * h * w + p]);
      }
    }
  }
  for (double& v : rf.sensitivity) v /= static_cast<double>(n);

  const auto peak = std::max_element(rf.sensitivity.begin(), rf.sensitivity.end());
  const double mx = *peak;
  rf.peak_row = static_cast<std::size_t>(peak - rf.sensitivity.begin()) / w;
  const double* row = rf.sensitivity.data() + rf.peak_row * w;
  for (std::size_t j = 0; j < w; ++j) rf.support_width += row[j] > tol * mx ? 1 : 0;
  if (mx > 0.0) {
    const double half = 0.5 * *std::max_element(row, row + w);
    std::size_t first = w, last = 0;
    for (std::size_t j = 0; j < w; ++j) {
      if (row[j] >= half) {
        first = std::min(first, j);
        last = j;
      }
    }
    double left = static_cast<double>(first), right = static_cast<double>(last);
    if (first > 0) left -= (row[first] - half) / (row[first] - row[first - 1]);
    else left -= 0.5;
    if (last + 1 < w) right += (row[last] - half) / (row[last] - row[last + 1]);
    else right += 0.5;
    rf.fwhm = right - left;
  }
  return rf;
}

// ---------------------------------------------------------------------------

std::vector<CorruptionKind> all_corruptions() {
  return {CorruptionKind::gaussian_noise, CorruptionKind::shot_noise, CorruptionKind::defocus_blur,
          CorruptionKind::contrast, CorruptionKind::brightness};
}

std::string to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::gaussian_noise:
      return "gaussian_noise";
    case CorruptionKind::shot_noise:
      return "shot_noise";
    case CorruptionKind::defocus_blur:
      return "defocus_blur";
    case CorruptionKind::contrast:
      return "contrast";
    case CorruptionKind::brightness:
      return "brightness";
  }
  return "?";
}

double corruption_parameter(CorruptionKind kind, int severity) {
  if (severity < 1 || severity > 5) throw usage_error("corruption severity must lie in 1..5");
  static const double gaussian[] = {0.04, 0.08, 0.12, 0.16, 0.20};  // noise sigma
  static const double shot[] = {60, 25, 12, 5, 3};                  // photons at intensity 1
  static const double blur[] = {1.0, 1.5, 2.0, 2.5, 3.0};           // disk radius in pixels
  static const double contrast[] = {0.4, 0.3, 0.2, 0.1, 0.05};      // contrast factor
  static const double brightness[] = {0.1, 0.2, 0.3, 0.4, 0.5};     // additive offset
  const auto i = static_cast<std::size_t>(severity - 1);
  switch (kind) {
    case CorruptionKind::gaussian_noise:
      return gaussian[i];
    case CorruptionKind::shot_noise:
      return shot[i];
    case CorruptionKind::defocus_blur:
      return blur[i];
    case CorruptionKind::contrast:
      return contrast[i];
    case CorruptionKind::brightness:
      return brightness[i];
  }
  return 0.0;
}

Tensor corrupt(const Tensor& images, CorruptionKind kind, int severity, Rng& rng) {
  if (images.rank() != 4) throw usage_error("corrupt expects [N,C,H,W]");
  if (severity == 0) return images.detach();
  const double a = corruption_parameter(kind, severity);
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3), plane = h * w;
  Tensor out = images.detach();
  auto d = out.mutable_data();
  auto src = images.data();
  switch (kind) {
    case CorruptionKind::gaussian_noise: {
      std::normal_distribution<double> noise(0.0, a);
      for (double& v : d) v += noise(rng);
      break;
    }
    case CorruptionKind::shot_noise:
      for (double& v : d) {
        std::poisson_distribution<long> photons(std::max(v, 0.0) * a);
        v = static_cast<double>(photons(rng)) / a;
      }
      break;
    case CorruptionKind::defocus_blur: {
      const long r = static_cast<long>(std::floor(a));
      for (std::size_t p = 0; p < n * c; ++p) {
        for (long y = 0; y < static_cast<long>(h); ++y) {
          for (long x = 0; x < static_cast<long>(w); ++x) {
            double acc = 0.0, cnt = 0.0;
            for (long dy = -r; dy <= r; ++dy) {
              for (long dx = -r; dx <= r; ++dx) {
                if (static_cast<double>(dy * dy + dx * dx) > a * a) continue;
                const long yy = std::clamp(y + dy, 0L, static_cast<long>(h) - 1);
                const long xx = std::clamp(x + dx, 0L, static_cast<long>(w) - 1);
                acc += src[p * plane + static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
                cnt += 1.0;
              }
            }
            d[p * plane + static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = acc / cnt;
          }
        }
      }
      break;
    }
    case CorruptionKind::contrast:
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t sz = c * plane;
        double mean = 0.0;
        for (std::size_t k = 0; k < sz; ++k) mean += src[b * sz + k];
        mean /= static_cast<double>(sz);
        for (std::size_t k = 0; k < sz; ++k) d[b * sz + k] = (src[b * sz + k] - mean) * a + mean;
      }
      break;
    case CorruptionKind::brightness:
      for (double& v : d) v += a;
      break;
  }
  for (double& v : d) v = std::clamp(v, 0.0, 1.0);
  return out;
}

namespace {

struct CellEval {
  double error, entropy;
  std::vector<double> scores;
};

CellEval eval_images(const FlowModel& model, const Tensor& images, const std::vector<std::size_t>& labels) {
  const auto preds = predict(model, images);
  CellEval e{0.0, 0.0, {}};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    e.error += preds[i].argmax != labels[i] ? 1.0 : 0.0;
    e.entropy += predictive_entropy(preds[i].posterior);
    e.scores.push_back(preds[i].marginal);
  }
  e.error /= static_cast<double>(preds.size());
  e.entropy /= static_cast<double>(preds.size());
  return e;
}

}  // namespace

CorruptionReport corruption_suite(const FlowModel& model, const Dataset& clean, const ScoreSet& refs,
                                  const FlowModel* baseline, std::uint64_t seed) {
  clean.validate();
  if (clean.n == 0) throw data_error("empty evaluation set");
  const Tensor images = clean.all();
  const CellEval base = eval_images(model, images, clean.labels);
  const auto in_atyp = atypicality(refs, OodTestKind::two_tailed, base.scores);
  CorruptionReport report;
  report.clean_error = base.error;
  report.clean_entropy = base.entropy;
  double ratio_sum = 0.0;
  std::size_t ratio_count = 0;
  const auto kinds = all_corruptions();
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    double err_sum = 0.0, base_sum = 0.0;
    for (int sev = 1; sev <= 5; ++sev) {
      Rng rng = make_rng(seed, Stream::corruption, 1000 + 10 * k + static_cast<std::size_t>(sev));
      const Tensor corrupted = corrupt(images, kinds[k], sev, rng);
      const CellEval e = eval_images(model, corrupted, clean.labels);
      const double auc = roc_auc(in_atyp, atypicality(refs, OodTestKind::two_tailed, e.scores));
      report.cells.push_back({kinds[k], sev, corruption_parameter(kinds[k], sev), e.error, e.entropy - base.entropy, auc});
      err_sum += e.error;
      if (baseline) base_sum += eval_images(*baseline, corrupted, clean.labels).error;
    }
    if (baseline && base_sum > 0.0) {
      report.corruption_error.emplace_back(err_sum / base_sum);
      ratio_sum += err_sum / base_sum;
      ++ratio_count;
    } else {
      report.corruption_error.emplace_back(std::nullopt);
    }
  }
  if (ratio_count == kinds.size()) report.mce = ratio_sum / static_cast<double>(ratio_count);
  return report;
}

std::string corruption_csv(const CorruptionReport& r) {
  std::ostringstream os;
  os << "corruption,severity,parameter,error_top1,delta_entropy_nats,ood_auc_two_tailed_pct\n";
  os << "clean,0,0," << format_double(r.clean_error) << ",0,\n";
  for (const auto& c : r.cells) {
    os << to_string(c.kind) << ',' << c.severity << ',' << format_double(c.parameter) << ',' << format_double(c.error)
       << ',' << format_double(c.delta_entropy) << ',' << format_double(c.ood_auc) << '\n';
  }
  const auto kinds = all_corruptions();
  for (std::size_t k = 0; k < r.corruption_error.size(); ++k) {
    os << "ce:" << to_string(kinds[k]) << ",,," << (r.corruption_error[k] ? format_double(*r.corruption_error[k]) : "")
       << ",,\n";
  }
  os << "mce,,," << (r.mce ? format_double(*r.mce) : "") << ",,\n";
  return os.str();
}

}  // namespace ibgc
