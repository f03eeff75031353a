#include "ibgc/explain.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "ibgc/adam.hpp"
#include "ibgc/error.hpp"
#include "ibgc/loss.hpp"
#include "ibgc/report.hpp"
#include "ibgc/transforms.hpp"

namespace ibgc {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double log_sum_exp(const std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

}  // namespace

DecisionProjection project_decision_space(std::span<const double> z, const std::vector<std::vector<double>>& top_mus) {
  if (top_mus.size() < 2) throw usage_error("project_decision_space needs at least two means");
  const std::size_t d = z.size();
  for (const auto& mu : top_mus) {
    if (mu.size() != d) throw usage_error("project_decision_space: mean length does not match latent");
  }
  std::vector<double> axis(d);
  for (std::size_t i = 0; i < d; ++i) axis[i] = top_mus[1][i] - top_mus[0][i];
  const double delta = norm(axis);
  const double scale = std::max(1.0, norm(top_mus[0]));
  if (delta <= 1e-12 * scale) throw usage_error("project_decision_space: the top two means coincide");

  // Gram-Schmidt over mu_i - mu_1, starting with the mu_1 -> mu_2 axis.
  std::vector<std::vector<double>> basis;
  for (std::size_t k = 1; k < top_mus.size(); ++k) {
    std::vector<double> b(d);
    for (std::size_t i = 0; i < d; ++i) b[i] = top_mus[k][i] - top_mus[0][i];
    const double original = norm(b);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& q : basis) {
        const double c = dot(b, q);
        for (std::size_t i = 0; i < d; ++i) b[i] -= c * q[i];
      }
    }
    const double n = norm(b);
    if (n <= 1e-10 * std::max(original, scale)) continue;
    for (double& x : b) x /= n;
    basis.push_back(std::move(b));
  }

  std::vector<double> r(d);
  for (std::size_t i = 0; i < d; ++i) r[i] = z[i] - top_mus[0][i];
  DecisionProjection out;
  out.delta = delta;
  out.span_dim = basis.size();
  out.h = dot(r, basis[0]);
  double v2 = 0.0;
  for (std::size_t k = 1; k < basis.size(); ++k) {
    const double c = dot(r, basis[k]);
    v2 += c * c;
  }
  out.v = std::sqrt(v2);
  out.horizontal_half_width = boost::math::quantile(boost::math::normal(), 0.95);
  if (out.span_dim > 1) {
    const boost::math::chi_squared chi2(static_cast<double>(out.span_dim - 1));
    out.radial_mark = std::sqrt(boost::math::quantile(chi2, 0.9));
  }
  return out;
}

// ---------------------------------------------------------------------------

double confidence_density(double c, double delta) {
  if (!(c >= 0.5 && c < 1.0)) throw usage_error("confidence_density: c must lie in [1/2, 1)");
  if (!(delta > 0.0)) throw usage_error("confidence_density: delta must be positive");
  const double logit = std::log(1.0 / c - 1.0);
  return std::pow(c - c * c, -1.5) * std::exp(-logit * logit / (2.0 * delta * delta));
}

namespace {

// Integrates in scaled logit space t = log(c / (1 - c)) / delta where the
// density becomes exp(-(t - delta/2)^2 / 2) + exp(-(t + delta/2)^2 / 2),
// smooth, free of endpoint singularities and of unit width for every delta.
double integrate_logit(double delta, bool weighted) {
  const double half = 0.5 * delta;
  auto f = [&](double t) {
    const double a = t - half, b = t + half;
    const double g = std::exp(-0.5 * a * a) + std::exp(-0.5 * b * b);
    return weighted ? g / (1.0 + std::exp(-delta * t)) : g;
  };
  const double upper = half + 12.0;
  double err = 0.0;
  const double value = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, 0.0, upper, 20, 1e-13, &err);
  if (!std::isfinite(value) || err > 1e-9 * std::abs(value)) {
    throw numeric_error("expected_confidence: quadrature did not converge for delta " + format_double(delta));
  }
  return value;
}

}  // namespace

double expected_confidence(double delta) {
  if (!(delta > 0.0) || !std::isfinite(delta)) throw usage_error("expected_confidence: delta must be positive and finite");
  return integrate_logit(delta, true) / integrate_logit(delta, false);
}

double delta_for_confidence(double target) {
  if (!(target > 0.5 && target < 1.0)) throw usage_error("delta_for_confidence: target must lie in (1/2, 1)");
  double lo = 1e-8, hi = 1.0;
  while (expected_confidence(hi) < target) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e6) throw numeric_error("delta_for_confidence: no bracket");
  }
  for (int i = 0; i < 200 && hi - lo > 1e-14 * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    (expected_confidence(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<std::vector<SimilarityEntry>> similarity_matrix(const Tensor& means) {
  if (means.rank() != 2) throw usage_error("similarity_matrix expects [M, D] means");
  const std::size_t m = means.dim(0), d = means.dim(1);
  auto row = [&](std::size_t y) { return means.data().subspan(y * d, d); };
  std::vector<std::vector<SimilarityEntry>> out(m, std::vector<SimilarityEntry>(m));
  for (std::size_t a = 0; a < m; ++a) {
    out[a][a].diagonal = true;
    for (std::size_t b = a + 1; b < m; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double diff = row(a)[i] - row(b)[i];
        s += diff * diff;
      }
      SimilarityEntry e;
      e.delta = std::sqrt(s);
      e.expected_confidence = e.delta > 0.0 ? expected_confidence(e.delta) : 0.5;
      e.expected_uncertainty = 1.0 - e.expected_confidence;
      out[a][b] = e;
      out[b][a] = e;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

double Heatmap::sum() const {
  double s = 0.0;
  for (double v : grid) s += v;
  return s;
}

std::vector<std::vector<double>> pixel_log_likelihoods(std::span<const double> z, const Tensor& means,
                                                       std::array<std::size_t, 3> feature_chw) {
  const std::size_t c = feature_chw[0], pixels = feature_chw[1] * feature_chw[2];
  if (means.rank() != 2 || z.size() != means.dim(1) || z.size() != c * pixels) {
    throw usage_error("heatmap: latent length " + std::to_string(z.size()) + " does not match the feature layout " +
                      shape_str({c, feature_chw[1], feature_chw[2]}));
  }
  const std::size_t m = means.dim(0), d = z.size();
  Tensor diff({m, d});
  auto dd = diff.mutable_data();
  for (std::size_t y = 0; y < m; ++y) {
    for (std::size_t i = 0; i < d; ++i) dd[y * d + i] = z[i] - means[y * d + i];
  }
  const Tensor w = dct_pool(diff, Direction::inverse, feature_chw);
  std::vector<std::vector<double>> out(m, std::vector<double>(pixels, 0.0));
  for (std::size_t y = 0; y < m; ++y) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < pixels; ++p) {
        const double v = w[(y * c + ch) * pixels + p];
        out[y][p] -= 0.5 * v * v;
      }
    }
  }
  return out;
}

namespace {

// log p(w_kl) = logsumexp_y(log q(w_kl | y) + w_y).
std::vector<double> pixel_marginals(const std::vector<std::vector<double>>& logq, std::span<const double> log_priors) {
  const std::size_t pixels = logq.front().size();
  std::vector<double> out(pixels);
  std::vector<double> terms(logq.size());
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t y = 0; y < logq.size(); ++y) terms[y] = logq[y][p] + log_priors[y];
    out[p] = log_sum_exp(terms);
  }
  return out;
}

}  // namespace

Heatmap saliency_heatmap(std::span<const double> z, const GmmHead& head, std::array<std::size_t, 3> feature_chw) {
  const auto logq = pixel_log_likelihoods(z, head.means().detach(), feature_chw);
  Heatmap map;
  map.kind = HeatmapKind::saliency;
  map.height = feature_chw[1];
  map.width = feature_chw[2];
  map.grid = pixel_marginals(logq, head.log_priors().data());
  for (double& v : map.grid) v = -v;
  return map;
}

Heatmap class_heatmap(std::span<const double> z, const GmmHead& head, std::array<std::size_t, 3> feature_chw,
                      std::size_t y, double contrast) {
  if (y >= head.classes()) throw usage_error("class_heatmap: class " + std::to_string(y) + " out of range");
  if (!(contrast >= 0.0)) throw usage_error("class_heatmap: contrast must be non-negative");
  const auto logq = pixel_log_likelihoods(z, head.means().detach(), feature_chw);
  const auto w = head.log_priors().data();
  const std::size_t m = head.classes(), pixels = logq.front().size();
  const double log_m = std::log(static_cast<double>(m));

  // S = log sum_y' q(z|y') p(y') M, so that sum_kl Q = log p(y|x); for
  // uniform priors the p(y') M factor is one.
  std::vector<double> totals(m);
  for (std::size_t k = 0; k < m; ++k) {
    double s = 0.0;
    for (double v : logq[k]) s += v;
    totals[k] = s + w[k] + log_m;
  }
  const double big_s = log_sum_exp(totals);

  std::vector<double> r = pixel_marginals(logq, w);
  const auto [lo, hi] = std::minmax_element(r.begin(), r.end());
  const double lo_v = *lo, range = *hi - *lo;
  std::vector<double> share(pixels, 1.0 / static_cast<double>(pixels));
  if (range > 0.0 && std::isfinite(range)) {
    double total = 0.0;
    for (double& v : r) {
      v = (v - lo_v) / range + contrast;
      total += v;
    }
    if (total > 0.0) {
      for (std::size_t p = 0; p < pixels; ++p) share[p] = r[p] / total;
    }
  }

  Heatmap map;
  map.kind = HeatmapKind::class_posterior;
  map.label = y;
  map.height = feature_chw[1];
  map.width = feature_chw[2];
  map.grid.resize(pixels);
  const double prior_share = (w[y] + log_m) / static_cast<double>(pixels);
  for (std::size_t p = 0; p < pixels; ++p) map.grid[p] = logq[y][p] + prior_share - big_s * share[p];
  return map;
}

std::string heatmap_csv(const Heatmap& map) {
  std::ostringstream out;
  out << "row,col,value\n";
  for (std::size_t i = 0; i < map.height; ++i) {
    for (std::size_t j = 0; j < map.width; ++j) {
      out << i << ',' << j << ',' << format_double(map.grid[i * map.width + j]) << '\n';
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------------

std::size_t nearest_mean(std::span<const double> z, const Tensor& means) {
  if (means.rank() != 2 || means.dim(1) != z.size()) throw usage_error("nearest_mean: shape mismatch");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < means.dim(0); ++y) {
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double diff = z[i] - means[y * z.size() + i];
      s += diff * diff;
    }
    if (s < best_d) {
      best_d = s;
      best = y;
    }
  }
  return best;
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double subset_accuracy(const Tensor& z, const std::vector<std::size_t>& targets, const Tensor& means) {
  const std::size_t n = z.dim(0), d = z.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (nearest_mean(z.data().subspan(i * d, d), means) == targets[i]) ++hits;
  }
  return n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
}

Tensor to_tensor(const RowMat& m) {
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                std::vector<double>(m.data(), m.data() + m.size()));
}

}  // namespace

PlaneFitReport fit_2d_decision_space(const FlowModel& model, const Dataset& data, const std::vector<std::size_t>& classes,
                                     const PlaneFitConfig& cfg) {
  if (classes.size() < 3) throw usage_error("fit_2d_decision_space needs at least three classes");
  std::vector<std::size_t> slot(model.head().classes(), classes.size());
  for (std::size_t k = 0; k < classes.size(); ++k) {
    if (classes[k] >= model.head().classes()) throw usage_error("fit_2d_decision_space: class out of range");
    if (slot[classes[k]] != classes.size()) throw usage_error("fit_2d_decision_space: repeated class");
    slot[classes[k]] = k;
  }
  if (cfg.steps == 0 || !(cfg.lr > 0.0)) throw usage_error("fit_2d_decision_space: steps and lr must be positive");
  check_beta(cfg.beta);

  std::vector<std::size_t> picked, targets;
  for (std::size_t i = 0; i < data.n; ++i) {
    if (data.labels[i] < slot.size() && slot[data.labels[i]] < classes.size()) {
      picked.push_back(i);
      targets.push_back(slot[data.labels[i]]);
    }
  }
  if (picked.empty()) throw data_error("fit_2d_decision_space: no samples of the selected classes");

  const std::size_t s = classes.size(), d = model.latent_dim(), n = picked.size();
  std::vector<Tensor> zs, lds;
  for (std::size_t b = 0; b < n; b += 200) {
    const std::vector<std::size_t> idx(picked.begin() + b, picked.begin() + std::min(n, b + 200));
    const Encoding enc = model.encode(data.batch(idx));
    zs.push_back(enc.z.detach());
    lds.push_back(enc.logdet.detach());
  }
  const Tensor z = concat(zs, 0), logdet = concat(lds, 0);

  const Tensor all_means = model.head().means().detach();
  RowMat mu(s, d);
  for (std::size_t k = 0; k < s; ++k) {
    for (std::size_t i = 0; i < d; ++i) mu(k, i) = all_means[classes[k] * d + i];
  }
  PlaneFitReport report;
  report.classes = classes;
  report.accuracy_before = subset_accuracy(z, targets, to_tensor(mu));

  // Principal plane of the selected means.
  const Eigen::RowVectorXd c0 = mu.colwise().mean();
  const RowMat centered = mu.rowwise() - c0;
  Eigen::JacobiSVD<RowMat> svd(centered, Eigen::ComputeThinV);
  RowMat basis0 = svd.matrixV().leftCols(2).transpose();
  RowMat coords0 = centered * basis0.transpose();

  std::vector<double> params;
  params.insert(params.end(), c0.data(), c0.data() + d);
  params.insert(params.end(), coords0.data(), coords0.data() + 2 * s);
  params.insert(params.end(), basis0.data(), basis0.data() + 2 * d);
  AdamState adam = make_adam_state(params.size());

  const Tensor onehot = smoothed_targets(targets, s, 0.0);
  const Tensor priors({s}, -std::log(static_cast<double>(s)));
  const double seed_value = std::isinf(cfg.beta) ? 1.0 : 1.0 / static_cast<double>(model.input_dim());
  auto build = [&](Tape* tape, Tensor& center, Tensor& coords, Tensor& basis) {
    center = Tensor({d}, std::vector<double>(params.begin(), params.begin() + d));
    coords = Tensor({s, 2}, std::vector<double>(params.begin() + d, params.begin() + d + 2 * s));
    basis = Tensor({2, d}, std::vector<double>(params.begin() + d + 2 * s, params.end()));
    if (tape) {
      tape->watch(center);
      tape->watch(coords);
      tape->watch(basis);
    }
    return add(broadcast_rows(center, s), matmul(coords, basis));
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tape tape;
    Tensor center, coords, basis;
    const Tensor means = build(&tape, center, coords, basis);
    const LossTerms loss = ib_loss(z, logdet, onehot, means, priors, cfg.beta);
    report.final_loss = loss.total.item();
    if (!std::isfinite(report.final_loss)) throw numeric_error("fit_2d_decision_space: loss diverged");
    const double seed[] = {seed_value};
    tape.backward(loss.total, seed);
    std::vector<double> grad;
    for (const Tensor* t : {&center, &coords, &basis}) {
      const auto g = t->grad();
      grad.insert(grad.end(), g.begin(), g.end());
    }
    adam_step(params, grad, adam, cfg.lr);
  }

  Tensor center, coords, basis;
  report.means = build(nullptr, center, coords, basis).detach();
  report.accuracy_after = subset_accuracy(z, targets, report.means);

  // Re-express the plane with an orthonormal basis through the mean of the
  // constrained means.
  RowMat fitted = Eigen::Map<const RowMat>(report.means.data().data(), s, d);
  const Eigen::RowVectorXd c1 = fitted.colwise().mean();
  const RowMat centered1 = fitted.rowwise() - c1;
  Eigen::JacobiSVD<RowMat> svd1(centered1, Eigen::ComputeThinV);
  const auto sv = svd1.singularValues();
  report.third_singular_value = sv.size() > 2 ? sv(2) : 0.0;
  const RowMat basis1 = svd1.matrixV().leftCols(2).transpose();
  const RowMat coords1 = centered1 * basis1.transpose();
  report.center = Tensor({d}, std::vector<double>(c1.data(), c1.data() + d));
  report.basis = to_tensor(basis1);
  for (std::size_t k = 0; k < s; ++k) report.coords.push_back({coords1(k, 0), coords1(k, 1)});
  return report;
}

}  // namespace ibgc
