#include "ibgc/attack.hpp"

#include <algorithm>
#include <cmath>

#include "ibgc/adam.hpp"
#include "ibgc/blocks.hpp"
#include "ibgc/error.hpp"
#include "ibgc/metrics.hpp"
#include "ibgc/report.hpp"
#include "ibgc/rng.hpp"

namespace ibgc {

void AttackConfig::validate() const {
  if (!(c > 0.0) || !std::isfinite(c)) throw usage_error("attack: c must be positive");
  if (!(kappa >= 0.0)) throw usage_error("attack: kappa must be non-negative or inf");
  if (!(d >= 0.0) || !std::isfinite(d)) throw usage_error("attack: d must be non-negative");
  if (!(lr > 0.0)) throw usage_error("attack: lr must be positive");
  if (patience == 0 || max_steps == 0) throw usage_error("attack: patience and max_steps must be positive");
  if (!(tolerance >= 0.0)) throw usage_error("attack: tolerance must be non-negative");
}

double cw_class_loss(const std::vector<double>& logits, std::size_t target, double kappa) {
  if (logits.size() < 2) throw usage_error("cw_class_loss needs at least two classes");
  if (target >= logits.size()) throw usage_error("cw_class_loss: target out of range");
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < logits.size(); ++y) {
    if (y != target) best = std::max(best, logits[y]);
  }
  const double margin = best - logits[target];
  return std::isinf(kappa) ? margin : std::max(margin, -kappa);
}

Tensor cw_class_loss(const Tensor& logits, const std::vector<std::size_t>& targets, double kappa) {
  if (logits.rank() != 2 || logits.dim(1) < 2) throw usage_error("cw_class_loss expects [N, M>=2] logits");
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  if (targets.size() != n) throw usage_error("cw_class_loss: one target per row required");
  std::vector<std::size_t> own, others;
  own.reserve(n);
  others.reserve(n * (m - 1));
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= m) throw usage_error("cw_class_loss: target out of range");
    own.push_back(i * m + targets[i]);
    for (std::size_t y = 0; y < m; ++y) {
      if (y != targets[i]) others.push_back(i * m + y);
    }
  }
  const Tensor flat = reshape(logits, {n * m});
  const Tensor best = reduce(reshape(gather(flat, 0, others), {n, m - 1}), Reduce::max, 1);
  const Tensor margin = sub(best, gather(flat, 0, own));
  return std::isinf(kappa) ? margin : clamp_min(margin, -kappa);
}

Tensor box_transform(const Tensor& w) { return scale(add_scalar(tanh(w), 1.0), 0.5); }

Tensor inverse_box_transform(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = std::atanh(2.0 * std::clamp(x[i], 1e-6, 1.0 - 1e-6) - 1.0);
  return out;
}

ObjectiveTerms cw_objective(const Tensor& w, const Tensor& x, const FlowModel& model,
                            const std::vector<std::size_t>& targets, const AttackConfig& cfg) {
  if (w.shape() != x.shape()) throw usage_error("cw_objective: w " + shape_str(w.shape()) + " vs x " + shape_str(x.shape()));
  const Tensor x_adv = box_transform(w);
  const Encoding enc = model.encode(x_adv);
  const Tensor means = model.head().means().detach();
  ObjectiveTerms t;
  t.distortion = sum_per_sample(square(sub(x_adv, x)));
  t.logits = class_log_likelihoods(enc.z, enc.logdet, means);
  t.class_loss = cw_class_loss(t.logits, targets, cfg.kappa);
  t.log_likelihood = reduce(add(t.logits, broadcast_rows(model.head().log_priors(), x.dim(0))), Reduce::logsumexp, 1);
  t.total = add(t.distortion, scale(t.class_loss, cfg.c));
  return t;
}

ObjectiveTerms cwd_objective(const Tensor& w, const Tensor& x, const FlowModel& model,
                             const std::vector<std::size_t>& targets, const AttackConfig& cfg, double median_ref) {
  ObjectiveTerms t = cw_objective(w, x, model, targets, cfg);
  if (cfg.d == 0.0) return t;
  const Tensor gap = add_scalar(neg(t.log_likelihood), median_ref);
  t.total = add(t.total, scale(square(gap), cfg.d));
  return t;
}

namespace {

struct Tracker {
  std::vector<double> w;
  AdamState adam;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::size_t steps = 0;
  bool done = false;
  bool converged = false;
  double best_success = std::numeric_limits<double>::infinity();
  std::vector<double> success_w;
  std::vector<TrajectoryPoint> trajectory;
};

Tensor stack(const std::vector<const std::vector<double>*>& rows, const Shape& item_shape) {
  Shape shape{rows.size()};
  shape.insert(shape.end(), item_shape.begin(), item_shape.end());
  std::vector<double> data;
  for (const auto* r : rows) data.insert(data.end(), r->begin(), r->end());
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

std::vector<AttackResult> run_attacks(const FlowModel& model, const Tensor& images,
                                      const std::vector<std::size_t>& targets, const AttackConfig& cfg,
                                      const ScoreSet& refs) {
  cfg.validate();
  if (images.rank() != 4) throw usage_error("run_attacks expects [N, C, H, W] images");
  const std::size_t n = images.dim(0), per = images.size() / std::max<std::size_t>(n, 1);
  const std::size_t m = model.head().classes();
  if (targets.size() != n) throw usage_error("run_attacks: one target per image required");
  for (std::size_t t : targets) {
    if (t >= m) throw usage_error("run_attacks: target out of range");
  }
  for (double v : images.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw data_error("run_attacks: images must lie in [0, 1]");
  }
  const Shape item(images.shape().begin() + 1, images.shape().end());
  const double median_ref = refs.median();
  const auto log_priors = model.head().log_priors().data();

  std::vector<std::vector<double>> xs(n);
  std::vector<Tracker> track(n);
  const Tensor w0 = inverse_box_transform(images);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i].assign(images.data().begin() + i * per, images.data().begin() + (i + 1) * per);
    track[i].w.assign(w0.data().begin() + i * per, w0.data().begin() + (i + 1) * per);
    track[i].adam = make_adam_state(per);
  }

  while (true) {
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < n; ++i) {
      if (!track[i].done) active.push_back(i);
    }
    if (active.empty()) break;
    std::vector<const std::vector<double>*> wr, xr;
    std::vector<std::size_t> ts;
    for (std::size_t i : active) {
      wr.push_back(&track[i].w);
      xr.push_back(&xs[i]);
      ts.push_back(targets[i]);
    }
    Tape tape;
    const Tensor w = tape.variable(stack(wr, item));
    const ObjectiveTerms terms = cwd_objective(w, stack(xr, item), model, ts, cfg, median_ref);

    std::vector<std::size_t> update;
    for (std::size_t a = 0; a < active.size(); ++a) {
      Tracker& tr = track[active[a]];
      const double obj = terms.total[a];
      if (!std::isfinite(obj)) throw numeric_error("attack objective became non-finite");
      std::size_t arg = 0;
      for (std::size_t y = 1; y < m; ++y) {
        if (terms.logits[a * m + y] + log_priors[y] > terms.logits[a * m + arg] + log_priors[arg]) arg = y;
      }
      const bool success = arg == ts[a];
      if (cfg.record_trajectory) {
        tr.trajectory.push_back({tr.steps, obj, terms.distortion[a], terms.class_loss[a], success});
      }
      if (success && obj < tr.best_success) {
        tr.best_success = obj;
        tr.success_w = tr.w;
      }
      if (obj < tr.best - cfg.tolerance) {
        tr.best = obj;
        tr.since_best = 0;
      } else {
        ++tr.since_best;
      }
      ++tr.steps;
      if (!std::isinf(cfg.kappa) && tr.since_best >= cfg.patience) {
        tr.done = true;
        tr.converged = true;
      } else if (tr.steps >= cfg.max_steps) {
        tr.done = true;
      } else {
        update.push_back(a);
      }
    }
    if (update.empty()) continue;
    tape.backward(sum_all(terms.total));
    const auto g = w.grad();
    for (std::size_t a : update) {
      Tracker& tr = track[active[a]];
      adam_step(tr.w, std::span<const double>(g).subspan(a * per, per), tr.adam, cfg.lr);
    }
  }

  std::vector<const std::vector<double>*> final_w;
  for (const Tracker& tr : track) final_w.push_back(tr.success_w.empty() ? &tr.w : &tr.success_w);
  const Tensor x_adv = box_transform(stack(final_w, item));
  const auto preds = predict(model, x_adv);
  const std::size_t pixels = item.size() >= 3 ? item[1] * item[2] : per;
  const std::size_t channels = per / pixels;

  std::vector<AttackResult> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    AttackResult& r = out[i];
    const Prediction& p = preds[i];
    r.x_adv.assign(x_adv.data().begin() + i * per, x_adv.data().begin() + (i + 1) * per);
    for (double v : r.x_adv) {
      if (!(v >= 0.0 && v <= 1.0)) throw numeric_error("attack produced a pixel outside [0, 1]");
    }
    r.target = targets[i];
    r.predicted = p.argmax;
    r.success = p.argmax == targets[i];
    r.margin_success =
        r.success && (std::isinf(cfg.kappa) || -cw_class_loss(p.class_log_likelihoods, targets[i], kInfiniteKappa) >= cfg.kappa);
    r.steps = track[i].steps;
    r.converged = track[i].converged;
    double sq = 0.0, per_pixel = 0.0;
    for (std::size_t q = 0; q < pixels; ++q) {
      double s = 0.0;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const double diff = r.x_adv[ch * pixels + q] - xs[i][ch * pixels + q];
        s += diff * diff;
      }
      sq += s;
      per_pixel += std::sqrt(s);
    }
    r.l2 = std::sqrt(sq);
    r.l2_per_pixel = per_pixel / static_cast<double>(pixels);
    r.target_confidence = p.posterior[targets[i]];
    r.log_likelihood = p.marginal;
    r.entropy = predictive_entropy(p.posterior);
    r.detection_one_tailed = atypicality(refs, OodTestKind::single_threshold, p.marginal);
    r.detection_two_tailed = atypicality(refs, OodTestKind::two_tailed, p.marginal);
    r.trajectory = std::move(track[i].trajectory);
  }
  return out;
}

AttackResult run_attack(const FlowModel& model, const std::vector<double>& image, std::size_t target,
                        const AttackConfig& cfg, const ScoreSet& refs) {
  const auto& chw = model.spec().input_chw;
  if (image.size() != chw[0] * chw[1] * chw[2]) throw usage_error("run_attack: image size does not match the model");
  const Tensor x({1, chw[0], chw[1], chw[2]}, image);
  return run_attacks(model, x, {target}, cfg, refs).front();
}

AttackSummary summarize_attacks(const std::vector<AttackResult>& results, const AttackConfig& cfg,
                                const std::vector<double>& clean_log_likelihoods, const ScoreSet& refs) {
  if (results.empty()) throw usage_error("summarize_attacks: no results");
  AttackSummary s;
  s.kappa = cfg.kappa;
  s.d = cfg.d;
  s.c = cfg.c;
  s.count = results.size();
  std::vector<double> adv_one, adv_two;
  std::size_t hits = 0, margin_hits = 0;
  for (const AttackResult& r : results) {
    s.mean_target_confidence += r.target_confidence;
    s.mean_l2 += r.l2;
    s.mean_l2_per_pixel += r.l2_per_pixel;
    s.mean_entropy += r.entropy;
    hits += r.success;
    margin_hits += r.margin_success;
    adv_one.push_back(r.detection_one_tailed);
    adv_two.push_back(r.detection_two_tailed);
  }
  const double count = static_cast<double>(results.size());
  s.mean_target_confidence /= count;
  s.mean_l2 /= count;
  s.mean_l2_per_pixel /= count;
  s.mean_entropy /= count;
  s.success_pct = 100.0 * static_cast<double>(hits) / count;
  s.margin_success_pct = 100.0 * static_cast<double>(margin_hits) / count;
  s.auc_one_tailed = roc_auc(atypicality(refs, OodTestKind::single_threshold, clean_log_likelihoods), adv_one);
  s.auc_two_tailed = roc_auc(atypicality(refs, OodTestKind::two_tailed, clean_log_likelihoods), adv_two);
  return s;
}

std::vector<AttackRun> evaluate_attacks(const FlowModel& model, const Tensor& images,
                                        const std::vector<std::size_t>& targets,
                                        const std::vector<AttackConfig>& grid, const ScoreSet& refs) {
  std::vector<double> clean;
  for (const Prediction& p : predict(model, images)) clean.push_back(p.marginal);
  std::vector<AttackRun> runs;
  for (const AttackConfig& cfg : grid) {
    AttackRun run;
    run.config = cfg;
    run.results = run_attacks(model, images, targets, cfg, refs);
    run.summary = summarize_attacks(run.results, cfg, clean, refs);
    runs.push_back(std::move(run));
  }
  return runs;
}

std::string attack_csv(const std::vector<AttackRun>& runs) {
  std::string out =
      "row,kappa,c,d,index,target,predicted,success,margin_success,steps,converged,l2,l2_per_pixel,target_confidence,"
      "log_likelihood,entropy,atypicality_one_tailed,atypicality_two_tailed,success_pct,margin_success_pct,"
      "detection_auc_one_tailed_pct,detection_auc_two_tailed_pct\n";
  for (const AttackRun& run : runs) {
    const auto& c = run.config;
    for (std::size_t i = 0; i < run.results.size(); ++i) {
      const AttackResult& r = run.results[i];
      out += csv_row({"image", format_double(c.kappa), format_double(c.c), format_double(c.d), std::to_string(i),
                      std::to_string(r.target), std::to_string(r.predicted), r.success ? "1" : "0",
                      r.margin_success ? "1" : "0", std::to_string(r.steps), r.converged ? "1" : "0",
                      format_double(r.l2), format_double(r.l2_per_pixel), format_double(r.target_confidence),
                      format_double(r.log_likelihood), format_double(r.entropy), format_double(r.detection_one_tailed),
                      format_double(r.detection_two_tailed), "", "", "", ""}) +
             "\n";
    }
    const AttackSummary& s = run.summary;
    out += csv_row({"summary", format_double(c.kappa), format_double(c.c), format_double(c.d), "", "", "", "", "", "",
                    "", format_double(s.mean_l2), format_double(s.mean_l2_per_pixel),
                    format_double(s.mean_target_confidence), "", format_double(s.mean_entropy), "", "",
                    format_double(s.success_pct), format_double(s.margin_success_pct), format_double(s.auc_one_tailed),
                    format_double(s.auc_two_tailed)}) +
           "\n";
  }
  return out;
}

std::vector<std::size_t> random_targets(const std::vector<std::size_t>& labels, std::size_t classes,
                                        std::uint64_t seed) {
  if (classes < 2) throw usage_error("random_targets needs at least two classes");
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw usage_error("random_targets: label out of range");
    Rng rng = make_rng(seed, Stream::attack, i);
    std::uniform_int_distribution<std::size_t> pick(0, classes - 2);
    const std::size_t k = pick(rng);
    out.push_back(k >= labels[i] ? k + 1 : k);
  }
  return out;
}

}  // namespace ibgc
