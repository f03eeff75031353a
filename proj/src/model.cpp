#include "ibgc/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "ibgc/error.hpp"

namespace ibgc {

std::vector<std::string> default_layout() {
  return {"down:7:8", "haar", "coupling:3", "coupling:3", "down:3", "coupling:3", "coupling:3"};
}

LayoutToken parse_layout_token(const std::string& token) {
  std::vector<std::string> parts;
  std::stringstream ss(token);
  for (std::string part; std::getline(ss, part, ':');) parts.push_back(part);
  if (parts.empty() || parts.size() > 3) throw usage_error("bad layout token '" + token + "'");
  LayoutToken out;
  out.kind = parts[0];
  if (out.kind != "coupling" && out.kind != "down" && out.kind != "haar") {
    throw usage_error("unknown block kind '" + out.kind + "' in layout");
  }
  if (out.kind == "haar" && parts.size() > 1) throw usage_error("haar takes no arguments");
  auto number = [&](const std::string& s) -> std::size_t {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != s.size() || s.empty()) throw usage_error("bad number '" + s + "' in layout token '" + token + "'");
    return v;
  };
  if (parts.size() > 1) out.kernel = number(parts[1]);
  if (parts.size() > 2) out.hidden = number(parts[2]);
  if (out.kernel != 1 && out.kernel != 3 && out.kernel != 7) throw usage_error("layout kernel must be 1, 3 or 7");
  return out;
}

// ---------------------------------------------------------------------------

GmmHead::GmmHead(std::size_t classes, std::size_t d_mean, std::size_t d_rest, std::size_t rank, double mu_init,
                 Rng& rng)
    : classes_(classes), d_mean_(d_mean), d_rest_(d_rest), rank_(rank) {
  if (classes == 0) throw usage_error("head needs at least one class");
  if (d_rest > 0 && rank == 0) throw usage_error("head rank must be positive");
  if (!(mu_init >= 0.0)) throw usage_error("mu_init must be non-negative");
  const double per_dim = mu_init / std::sqrt(static_cast<double>(d_mean + d_rest));
  std::normal_distribution<double> normal(0.0, 1.0);
  mu_mean_ = Tensor({classes, d_mean});
  for (double& v : mu_mean_.mutable_data()) v = per_dim * normal(rng);
  prototypes_ = Tensor({rank, d_rest});
  for (double& v : prototypes_.mutable_data()) v = per_dim * normal(rng);
  alpha_ = Tensor({classes, rank});
  for (double& v : alpha_.mutable_data()) v = normal(rng) / std::sqrt(static_cast<double>(std::max<std::size_t>(rank, 1)));
  log_priors_ = Tensor({classes}, -std::log(static_cast<double>(classes)));
}

Tensor GmmHead::means() const {
  if (d_rest_ == 0) return mu_mean_;
  const Tensor rest = matmul(alpha_, prototypes_);
  if (d_mean_ == 0) return rest;
  return concat({mu_mean_, rest}, 1);
}

void GmmHead::set_log_priors(const std::vector<double>& w) {
  if (w.size() != classes_) throw usage_error("log prior count does not match class count");
  double total = 0.0;
  for (double v : w) {
    if (!std::isfinite(v)) throw usage_error("log priors must be finite");
    total += std::exp(v);
  }
  if (std::abs(total - 1.0) > 1e-9) throw usage_error("class priors must sum to one");
  std::copy(w.begin(), w.end(), log_priors_.mutable_data().begin());
}

void GmmHead::collect(std::vector<Parameter>& out) const {
  out.push_back({"head.mu_mean", mu_mean_, true, false});
  out.push_back({"head.prototypes", prototypes_, true, false});
  out.push_back({"head.alpha", alpha_, true, false});
  out.push_back({"head.log_priors", log_priors_, false, false});
}

// ---------------------------------------------------------------------------

FlowModel::FlowModel(const ModelSpec& spec) : spec_(spec) {
  auto chw = spec.input_chw;
  if (chw[0] == 0 || chw[1] == 0 || chw[2] == 0) throw usage_error("input shape has a zero extent");
  for (std::size_t i = 0; i < spec.layout.size(); ++i) {
    const LayoutToken tok = parse_layout_token(spec.layout[i]);
    Rng rng = make_rng(spec.seed, Stream::init, i);
    const std::uint64_t mixing_seed = spec.seed * 1000003ULL + i;
    CouplingSpec cs{chw[0], tok.hidden ? tok.hidden : spec.hidden, tok.kernel, spec.clamp, spec.s0, spec.gamma_init};
    if (tok.kind != "coupling" && (chw[1] % 2 != 0 || chw[2] % 2 != 0)) {
      throw usage_error("layout token " + std::to_string(i) + " '" + spec.layout[i] + "' needs even spatial extent");
    }
    std::unique_ptr<InvertibleBlock> block;
    if (tok.kind == "coupling") {
      block = std::make_unique<CouplingBlock>(cs, rng, mixing_seed);
    } else if (tok.kind == "down") {
      block = std::make_unique<DownsamplingCouplingBlock>(cs, rng, mixing_seed);
    } else {
      block = std::make_unique<HaarBlock>();
    }
    chw = block->output_chw(chw);
    blocks_.push_back(std::move(block));
  }
  if (chw[1] != chw[2]) throw usage_error("final feature maps must be square for dct_pool");
  feature_chw_ = chw;
  const std::size_t d = chw[0] * chw[1] * chw[2];
  Rng rng = make_rng(spec.seed, Stream::init, spec.layout.size());
  head_ = std::make_unique<GmmHead>(spec.classes, chw[0], d - chw[0], spec.rank, spec.mu_init, rng);
}

Encoding FlowModel::encode(const Tensor& x) const {
  const auto& c = spec_.input_chw;
  if (x.rank() != 4 || x.dim(1) != c[0] || x.dim(2) != c[1] || x.dim(3) != c[2]) {
    throw usage_error("encode: expected [N," + std::to_string(c[0]) + "," + std::to_string(c[1]) + "," +
                      std::to_string(c[2]) + "], got " + shape_str(x.shape()));
  }
  Tensor h = x;
  Tensor logdet({x.dim(0)}, 0.0);
  for (const auto& block : blocks_) {
    FlowStep step = block->apply(h, Direction::forward);
    h = step.y;
    logdet = add(logdet, step.logdet);
  }
  return {dct_pool(h, Direction::forward), logdet, h};
}

Tensor FlowModel::decode(const Tensor& z) const {
  if (z.rank() != 2 || z.dim(1) != latent_dim()) {
    throw usage_error("decode: expected [N," + std::to_string(latent_dim()) + "], got " + shape_str(z.shape()));
  }
  Tensor h = dct_pool(z, Direction::inverse, feature_chw_);
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) h = (*it)->apply(h, Direction::inverse).y;
  return h;
}

std::vector<Parameter> FlowModel::parameters() const {
  std::vector<Parameter> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i]->collect("block" + std::to_string(i) + "." + blocks_[i]->kind() + ".", out);
  }
  head_->collect(out);
  return out;
}

// ---------------------------------------------------------------------------

Tensor broadcast_rows(const Tensor& v, std::size_t n) {
  if (v.rank() != 1) throw usage_error("broadcast_rows expects a vector");
  return gather(reshape(v, {1, v.size()}), 0, std::vector<std::size_t>(n, 0));
}

namespace {

void check_latent(const Tensor& z, const Tensor& means) {
  if (z.rank() != 2 || means.rank() != 2 || z.dim(1) != means.dim(1)) {
    throw usage_error("latent " + shape_str(z.shape()) + " does not match means " + shape_str(means.shape()));
  }
}

Tensor logdet_columns(const Tensor& logdet, std::size_t m) {
  const std::size_t n = logdet.size();
  return gather(reshape(logdet, {n, 1}), 1, std::vector<std::size_t>(m, 0));
}

}  // namespace

Tensor class_log_likelihoods(const Tensor& z, const Tensor& logdet, const Tensor& means) {
  check_latent(z, means);
  const std::size_t n = z.dim(0), m = means.dim(0);
  if (logdet.size() != n) throw usage_error("logdet length does not match batch");
  const double norm = 0.5 * static_cast<double>(z.dim(1)) * std::log(2.0 * std::numbers::pi);
  const Tensor quad = add_scalar(scale(pairwise_sq_dist(z, means), -0.5), -norm);
  return add(quad, logdet_columns(logdet, m));
}

Tensor marginal_log_likelihood(const Tensor& z, const Tensor& logdet, const Tensor& means, const Tensor& log_priors) {
  const Tensor ll = class_log_likelihoods(z, logdet, means);
  return reduce(add(ll, broadcast_rows(log_priors, z.dim(0))), Reduce::logsumexp, 1);
}

Tensor log_posterior(const Tensor& z, const Tensor& means, const Tensor& log_priors) {
  check_latent(z, means);
  const Tensor logits = add(scale(pairwise_sq_dist(z, means), -0.5), broadcast_rows(log_priors, z.dim(0)));
  return reduce(logits, Reduce::logsoftmax, 1);
}

std::vector<Prediction> predict_latent(const Tensor& z, const Tensor& logdet, const GmmHead& head) {
  const Tensor means = head.means().detach();
  const Tensor ll = class_log_likelihoods(z.detach(), logdet.detach(), means);
  const Tensor lp = log_posterior(z.detach(), means, head.log_priors());
  const auto w = head.log_priors().data();
  const std::size_t n = z.dim(0), m = head.classes();
  std::vector<Prediction> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Prediction& p = out[i];
    p.class_log_likelihoods.assign(ll.data().begin() + i * m, ll.data().begin() + (i + 1) * m);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < m; ++y) mx = std::max(mx, p.class_log_likelihoods[y] + w[y]);
    double acc = 0.0;
    for (std::size_t y = 0; y < m; ++y) acc += std::exp(p.class_log_likelihoods[y] + w[y] - mx);
    p.marginal = mx + std::log(acc);
    p.posterior.resize(m);
    for (std::size_t y = 0; y < m; ++y) p.posterior[y] = std::exp(lp[i * m + y]);
    p.argmax = static_cast<std::size_t>(std::max_element(p.posterior.begin(), p.posterior.end()) - p.posterior.begin());
    p.confidence = p.posterior[p.argmax];
  }
  return out;
}

std::vector<Prediction> predict(const FlowModel& model, const Tensor& x, std::size_t chunk) {
  if (chunk == 0) throw usage_error("predict chunk must be positive");
  std::vector<Prediction> out;
  out.reserve(x.dim(0));
  const Tensor frozen = x.detach();
  for (std::size_t b = 0; b < x.dim(0); b += chunk) {
    const std::size_t e = std::min(x.dim(0), b + chunk);
    const Encoding enc = model.encode(slice(frozen, 0, b, e));
    auto part = predict_latent(enc.z, enc.logdet, model.head());
    for (auto& p : part) out.push_back(std::move(p));
  }
  return out;
}

}  // namespace ibgc
