#include "ibgc/trainer.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "ibgc/error.hpp"
#include "ibgc/loss.hpp"
#include "ibgc/metrics.hpp"
#include "ibgc/report.hpp"

namespace ibgc {

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw usage_error("lr0 must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw usage_error("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw usage_error("weight_decay must be non-negative");
  if (!(cooling_factor >= 1.0)) throw usage_error("cooling_factor must be at least 1");
  if (batch_size == 0) throw usage_error("batch_size must be positive");
  check_beta(beta);
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw usage_error("label_smoothing must lie in [0, 1)");
  if (!(dequant_amplitude >= 0.0)) throw usage_error("dequant_amplitude must be non-negative");
}

std::vector<Parameter> trainable_parameters(const FlowModel& model) {
  std::vector<Parameter> out;
  for (auto& p : model.parameters()) {
    if (p.trainable) out.push_back(p);
  }
  return out;
}

OptState make_opt_state(const std::vector<Parameter>& trainable, const TrainConfig& cfg) {
  OptState s;
  s.lr = cfg.lr0;
  for (const auto& p : trainable) s.velocity.emplace_back(p.value.size(), 0.0);
  return s;
}

void sgd_momentum_step(std::vector<Parameter>& trainable, const std::vector<std::vector<double>>& grads,
                       OptState& state, const TrainConfig& cfg) {
  if (grads.size() != trainable.size() || state.velocity.size() != trainable.size()) {
    throw usage_error("sgd step: parameter/gradient/state count mismatch");
  }
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    auto p = trainable[i].value.mutable_data();
    const auto& g = grads[i];
    auto& v = state.velocity[i];
    if (g.size() != p.size() || v.size() != p.size()) throw usage_error("sgd step: shape mismatch for " + trainable[i].name);
    const double wd = trainable[i].decay ? cfg.weight_decay : 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (!std::isfinite(g[k])) throw numeric_error("non-finite gradient for " + trainable[i].name);
      v[k] = cfg.momentum * v[k] + (g[k] + wd * p[k]);
      p[k] -= state.lr * v[k];
    }
  }
}

double plateau_schedule(OptState& state, double epoch_loss, const TrainConfig& cfg) {
  if (!std::isfinite(epoch_loss)) throw numeric_error("non-finite epoch loss");
  if (epoch_loss < state.best_loss) {
    state.best_loss = epoch_loss;
    state.epochs_since_best = 0;
  } else {
    ++state.epochs_since_best;
  }
  if (state.epochs_since_best >= cfg.plateau_patience && state.coolings < cfg.max_coolings) {
    state.lr /= cfg.cooling_factor;
    ++state.coolings;
    state.epochs_since_best = 0;
  }
  return state.lr;
}

Tensor flip_horizontal(const Tensor& batch) {
  Tensor out = batch.detach();
  const std::size_t w = batch.dim(3), rows = batch.size() / w;
  auto d = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) std::reverse(d.begin() + static_cast<long>(r * w), d.begin() + static_cast<long>((r + 1) * w));
  return out;
}

Tensor augment(const Tensor& batch, const TrainConfig& cfg, Rng& rng) {
  if (batch.rank() != 4) throw usage_error("augment expects [N,C,H,W]");
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Tensor out = batch.detach();
  auto src = batch.data();
  auto dst = out.mutable_data();
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<int> shift(-1, 1);
  for (std::size_t b = 0; b < n; ++b) {
    const bool flip = cfg.flip && coin(rng);
    const int dy = cfg.crop ? shift(rng) : 0;
    const int dx = cfg.crop ? shift(rng) : 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * h * w;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const long sy = static_cast<long>(y) + dy;
          long sx = static_cast<long>(x) + dx;
          double v = 0.0;
          if (sy >= 0 && sy < static_cast<long>(h) && sx >= 0 && sx < static_cast<long>(w)) {
            if (flip) sx = static_cast<long>(w) - 1 - sx;
            v = src[base + static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)];
          }
          dst[base + y * w + x] = v;
        }
      }
    }
  }
  return dequantize(out, cfg.dequant_amplitude, rng);
}

std::string epoch_csv_header() { return "epoch,lr,l_x,l_y,total,acc,bpd"; }

std::string epoch_csv_row(const EpochStats& s) {
  auto opt = [](double v) { return std::isnan(v) ? std::string() : format_double(v); };
  std::ostringstream os;
  os << s.epoch << ',' << format_double(s.lr) << ',' << opt(s.l_x) << ',' << opt(s.l_y) << ',' << format_double(s.total)
     << ',' << format_double(s.acc) << ',' << format_double(s.bpd);
  return os.str();
}

std::vector<EpochStats> train(FlowModel& model, const Dataset& data, const TrainConfig& cfg,
                              const EpochCallback& on_epoch) {
  cfg.validate();
  data.validate();
  if (data.chw() != model.spec().input_chw) throw data_error("dataset image shape does not match the model");
  if (data.classes > model.head().classes()) throw data_error("dataset has more classes than the model");
  if (data.n == 0) throw data_error("empty training set");

  std::vector<Parameter> params = trainable_parameters(model);
  OptState state = make_opt_state(params, cfg);
  const std::size_t dims = model.input_dim();
  // Gradients of L_X scale with the number of dimensions; descending the
  // per-dimension objective keeps the learning rate size-independent.
  const double objective_scale = std::isinf(cfg.beta) ? 1.0 : 1.0 / static_cast<double>(dims);
  std::vector<EpochStats> history;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, Stream::augment, epoch);
    std::vector<std::size_t> order(data.n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = state.lr;
    double sum_lx = 0.0, sum_ly = 0.0, sum_total = 0.0, sum_marginal = 0.0;
    std::size_t correct = 0, seen = 0, batches = 0;
    for (std::size_t start = 0; start < data.n; start += cfg.batch_size) {
      const std::size_t end = std::min(data.n, start + cfg.batch_size);
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
      const Tensor x = augment(data.batch(idx), cfg, rng);
      const auto labels = data.batch_labels(idx);
      const Tensor targets = smoothed_targets(labels, model.head().classes(), cfg.label_smoothing);

      Tape tape;
      for (auto& p : params) tape.watch(p.value);
      const Encoding enc = model.encode(x);
      const Tensor means = model.head().means();
      const LossTerms loss = ib_loss(enc.z, enc.logdet, targets, means, model.head().log_priors(), cfg.beta);
      const double total = loss.total.item();
      if (!std::isfinite(total)) {
        throw numeric_error("training diverged: non-finite loss at epoch " + std::to_string(epoch));
      }
      const double seed[] = {objective_scale};
      tape.backward(loss.total, seed);
      std::vector<std::vector<double>> grads;
      grads.reserve(params.size());
      for (const auto& p : params) grads.push_back(p.value.grad());

      // Batch statistics from the values already computed.
      const auto preds = predict_latent(enc.z, enc.logdet, model.head());
      for (std::size_t i = 0; i < preds.size(); ++i) {
        correct += preds[i].argmax == labels[i] ? 1 : 0;
        sum_marginal += preds[i].marginal;
      }
      seen += preds.size();
      if (loss.l_x.size() == 1) sum_lx += loss.l_x.item();
      if (loss.l_y.size() == 1) sum_ly += loss.l_y.item();
      sum_total += total;
      ++batches;

      sgd_momentum_step(params, grads, state, cfg);
    }
    const double nb = static_cast<double>(batches);
    if (!std::isinf(cfg.beta)) stats.l_x = sum_lx / nb;
    if (cfg.beta != 0.0) stats.l_y = sum_ly / nb;
    stats.total = sum_total / nb;
    stats.acc = static_cast<double>(correct) / static_cast<double>(seen);
    stats.bpd = bits_per_dim(sum_marginal / static_cast<double>(seen), dims, cfg.quantized);
    plateau_schedule(state, stats.total, cfg);
    history.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return history;
}

EvalStats evaluate(const FlowModel& model, const Dataset& data, bool quantized) {
  data.validate();
  if (data.n == 0) throw data_error("empty evaluation set");
  EvalStats out;
  out.predictions = predict(model, data.all());
  double ll = 0.0, ent = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.n; ++i) {
    const auto& p = out.predictions[i];
    correct += p.argmax == data.labels[i] ? 1 : 0;
    ll += p.marginal;
    ent += predictive_entropy(p.posterior);
  }
  const double n = static_cast<double>(data.n);
  out.acc = static_cast<double>(correct) / n;
  out.mean_log_likelihood = ll / n;
  out.mean_entropy = ent / n;
  out.bpd = bits_per_dim(out.mean_log_likelihood, model.input_dim(), quantized);
  return out;
}

}  // namespace ibgc
