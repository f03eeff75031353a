// ibgc: command-line front end for training and analysing the generative
// classifier. Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.

#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "CLI11.hpp"

#include "ibgc/attack.hpp"
#include "ibgc/checkpoint.hpp"
#include "ibgc/data.hpp"
#include "ibgc/error.hpp"
#include "ibgc/explain.hpp"
#include "ibgc/loss.hpp"
#include "ibgc/metrics.hpp"
#include "ibgc/ood.hpp"
#include "ibgc/report.hpp"
#include "ibgc/trainer.hpp"

namespace fs = std::filesystem;
using namespace ibgc;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

double parse_real(const std::string& s, const std::string& what) {
  if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty()) throw usage_error("bad value '" + s + "' for " + what);
  return v;
}

void check_classes(const Dataset& data, const FlowModel& model, const std::string& what) {
  if (data.chw() != model.spec().input_chw) throw data_error(what + ": image shape does not match the model");
  for (std::size_t y : data.labels) {
    if (y >= model.head().classes()) throw data_error(what + ": label " + std::to_string(y) + " exceeds the model classes");
  }
}

const ScoreSet& require_refs(const Checkpoint& ck) {
  if (!ck.refs) throw data_error("checkpoint carries no reference log-likelihoods");
  return *ck.refs;
}

std::vector<double> marginals(const std::vector<Prediction>& preds) {
  std::vector<double> out;
  out.reserve(preds.size());
  for (const auto& p : preds) out.push_back(p.marginal);
  return out;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string kind = "bars", base, out;
  std::size_t n = 1000, classes = 4, channels = 1, size = 16, first = 0;
};

int cmd_synth(const SynthArgs& a, const Globals& g) {
  const std::uint64_t seed = g.seed.value_or(0);
  Dataset d;
  if (a.kind == "bars") {
    d = synth_bars(a.n, a.classes, {a.channels, a.size, a.size}, seed, a.first);
  } else {
    const OodKind kind = parse_ood_kind(a.kind);
    if (a.base.empty()) throw usage_error("synth-data --kind " + a.kind + " needs --base");
    d = synth_ood(kind, load_dataset(a.base), seed);
  }
  save_dataset(d, a.out);
  std::cerr << "wrote " << d.n << " images to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, data, test, out, log = "-";
  std::optional<std::size_t> epochs;
  std::optional<std::string> beta;
};

int cmd_train(const TrainArgs& a, const Globals& g) {
  ExperimentConfig cfg = a.config.empty() ? ExperimentConfig{} : parse_config(a.config);
  if (g.seed) cfg.model.seed = cfg.train.seed = *g.seed;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.beta) cfg.train.beta = parse_real(*a.beta, "--beta");
  cfg.train.validate();
  const Dataset data = load_dataset(a.data);
  if (data.chw() != cfg.model.input_chw) throw data_error("dataset image shape does not match the configured input");
  if (data.classes != cfg.model.classes) {
    throw data_error("dataset has " + std::to_string(data.classes) + " classes, config has " +
                     std::to_string(cfg.model.classes));
  }
  FlowModel model(cfg.model);
  std::string log = epoch_csv_header() + "\n";
  train(model, data, cfg.train, [&](const EpochStats& s) {
    log += epoch_csv_row(s) + "\n";
    std::cerr << "epoch " << s.epoch << " total " << format_double(s.total) << " acc " << format_double(s.acc) << "\n";
  });
  const EvalStats train_eval = evaluate(model, data, cfg.train.quantized);
  save_checkpoint(model, cfg, ScoreSet(marginals(train_eval.predictions)), a.out);
  write_text(a.log, log);
  if (!a.test.empty()) {
    const Dataset test = load_dataset(a.test);
    check_classes(test, model, "test set");
    const EvalStats ev = evaluate(model, test, cfg.train.quantized);
    std::cerr << "test acc " << format_double(ev.acc) << " bpd " << format_double(ev.bpd) << "\n";
  }
  return 0;
}

struct EvalArgs {
  std::string model, data, out = "-";
  double c_crit = 0.997;
};

int cmd_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.model);
  const Dataset data = load_dataset(a.data);
  check_classes(data, *ck.model, "eval set");
  const EvalStats ev = evaluate(*ck.model, data, ck.config.train.quantized);
  std::vector<double> conf;
  std::vector<bool> correct;
  per_class_pairs(ev.predictions, data.labels, conf, correct);
  const CalibrationCurve curve = calibration_curve(conf, correct);
  const auto o = oce(conf, correct, a.c_crit);
  std::string out = "n,accuracy,bits_per_dim,mean_log_likelihood_nats,mean_entropy_nats,ece_per_class_pairs,"
                    "mce_per_class_pairs,oce_per_class_pairs\n";
  out += csv_row({std::to_string(data.n), format_double(ev.acc), format_double(ev.bpd),
                  format_double(ev.mean_log_likelihood), format_double(ev.mean_entropy), format_double(ece(curve)),
                  format_double(mce(curve)), o ? format_double(*o) : ""}) +
         "\n";
  write_text(a.out, out);
  return 0;
}

struct OodArgs {
  std::string model, in, ood, test = "two_tailed", out = "-";
  double p = 0.01;
};

int cmd_ood(const OodArgs& a) {
  if (!(a.p > 0.0 && a.p < 1.0)) throw usage_error("--p must lie in (0, 1)");
  const Checkpoint ck = load_checkpoint(a.model);
  const ScoreSet& refs = require_refs(ck);
  const OodTestKind kind = parse_ood_test(a.test);
  const OodTest test = fit_test(refs, kind, a.p);
  const Dataset in = load_dataset(a.in), ood = load_dataset(a.ood);
  const auto in_ll = marginals(predict(*ck.model, in.all()));
  const auto ood_ll = marginals(predict(*ck.model, ood.all()));
  auto flagged = [&](const std::vector<double>& s) {
    std::size_t k = 0;
    for (double v : s) k += is_ood(test, v);
    return static_cast<double>(k) / static_cast<double>(s.size());
  };
  std::string out = "test,p,fpr,tpr,auc_pct\n";
  out += csv_row({to_string(kind), format_double(a.p), format_double(flagged(in_ll)), format_double(flagged(ood_ll)),
                  format_double(roc_auc(atypicality(refs, kind, in_ll), atypicality(refs, kind, ood_ll)))}) +
         "\n";
  write_text(a.out, out);
  return 0;
}

struct AttackArgs {
  std::string model, data, out = "-";
  std::string kappa = "0.01";
  double c = 10.0, d = 0.0;
  std::size_t n = 50, max_steps = 1000;
};

int cmd_attack(const AttackArgs& a, const Globals& g) {
  const Checkpoint ck = load_checkpoint(a.model);
  const ScoreSet& refs = require_refs(ck);
  const Dataset data = load_dataset(a.data);
  check_classes(data, *ck.model, "attack set");
  const std::size_t n = std::min(a.n, data.n);
  if (n == 0) throw usage_error("--n must be positive");
  const Dataset subset = data.range(0, n);
  AttackConfig cfg;
  cfg.kappa = parse_real(a.kappa, "--kappa");
  cfg.c = a.c;
  cfg.d = a.d;
  cfg.max_steps = a.max_steps;
  cfg.validate();
  const auto targets = random_targets(subset.labels, ck.model->head().classes(), g.seed.value_or(0));
  const auto runs = evaluate_attacks(*ck.model, subset.all(), targets, {cfg}, refs);
  write_text(a.out, attack_csv(runs));
  return 0;
}

struct ExplainArgs {
  std::string model, input, out_dir = "explain";
  std::size_t index = 0, top = 5;
  double contrast = 0.03;
};

int cmd_explain(const ExplainArgs& a) {
  const Checkpoint ck = load_checkpoint(a.model);
  const FlowModel& model = *ck.model;
  const Dataset data = load_dataset(a.input);
  if (data.chw() != model.spec().input_chw) throw data_error("input image shape does not match the model");
  if (a.index >= data.n) throw usage_error("--index out of range");
  if (a.top < 2) throw usage_error("--top must be at least 2");
  fs::create_directories(a.out_dir);

  const Encoding enc = model.encode(data.batch({a.index}));
  const auto z = enc.z.data();
  const Prediction pred = predict_latent(enc.z, enc.logdet, model.head()).front();
  std::vector<std::size_t> order(pred.posterior.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t l, std::size_t r) { return pred.posterior[l] > pred.posterior[r]; });
  order.resize(std::min(a.top, order.size()));

  const Tensor means = model.head().means().detach();
  const std::size_t d = model.latent_dim();
  std::vector<std::vector<double>> top_mus;
  for (std::size_t y : order) top_mus.emplace_back(means.data().begin() + y * d, means.data().begin() + (y + 1) * d);
  const DecisionProjection proj = project_decision_space(z, top_mus);
  std::string p = "class_1,class_2,posterior_1,h,v,delta_mu,span_dim,horizontal_90pct_half_width,radial_90pct_mark\n";
  p += csv_row({std::to_string(order[0]), std::to_string(order[1]), format_double(pred.posterior[order[0]]),
                format_double(proj.h), format_double(proj.v), format_double(proj.delta), std::to_string(proj.span_dim),
                format_double(proj.horizontal_half_width), format_double(proj.radial_mark)}) +
       "\n";
  write_text((fs::path(a.out_dir) / "projection.csv").string(), p);

  const auto sim = similarity_matrix(means);
  std::string s = "class_a,class_b,delta_mu,expected_confidence,expected_uncertainty,diagonal\n";
  for (std::size_t ya : order) {
    for (std::size_t yb : order) {
      const SimilarityEntry& e = sim[ya][yb];
      s += csv_row({std::to_string(ya), std::to_string(yb), format_double(e.delta), format_double(e.expected_confidence),
                    format_double(e.expected_uncertainty), e.diagonal ? "1" : "0"}) +
           "\n";
    }
  }
  write_text((fs::path(a.out_dir) / "similarity.csv").string(), s);

  const auto chw = model.feature_chw();
  const Heatmap sal = saliency_heatmap(z, model.head(), chw);
  write_text((fs::path(a.out_dir) / "saliency.csv").string(), heatmap_csv(sal));
  write_pgm((fs::path(a.out_dir) / "saliency.pgm").string(), sal.grid, sal.height, sal.width);
  for (std::size_t y : order) {
    const Heatmap map = class_heatmap(z, model.head(), chw, y, a.contrast);
    const std::string stem = "class_" + std::to_string(y);
    write_text((fs::path(a.out_dir) / (stem + ".csv")).string(), heatmap_csv(map));
    write_pgm((fs::path(a.out_dir) / (stem + ".pgm")).string(), map.grid, map.height, map.width);
  }
  std::cout << p << s;
  return 0;
}

struct CalibrateArgs {
  std::string model, data, convention = "per_class", out = "-";
  std::size_t bins = 15;
  double c_crit = 0.997;
};

int cmd_calibrate(const CalibrateArgs& a) {
  const Checkpoint ck = load_checkpoint(a.model);
  const Dataset data = load_dataset(a.data);
  check_classes(data, *ck.model, "calibration set");
  const auto preds = predict(*ck.model, data.all());
  std::vector<double> conf;
  std::vector<bool> correct;
  if (a.convention == "per_class") {
    per_class_pairs(preds, data.labels, conf, correct);
  } else if (a.convention == "top1") {
    for (std::size_t i = 0; i < preds.size(); ++i) {
      conf.push_back(preds[i].confidence);
      correct.push_back(preds[i].argmax == data.labels[i]);
    }
  } else {
    throw usage_error("--convention must be per_class or top1");
  }
  const CalibrationCurve curve = calibration_curve(conf, correct, a.bins);
  const auto o = oce(conf, correct, a.c_crit);
  std::string out = "row,convention,bin_lower,bin_upper,count,accuracy,mean_confidence,ece,mce,oce,c_crit\n";
  for (std::size_t b = 0; b < curve.bins; ++b) {
    out += csv_row({"bin", a.convention, format_double(curve.lower(b)), format_double(curve.upper(b)),
                    std::to_string(curve.count[b]), curve.count[b] ? format_double(curve.accuracy[b]) : "",
                    curve.count[b] ? format_double(curve.mean_confidence[b]) : "", "", "", "", ""}) +
           "\n";
  }
  out += csv_row({"summary", a.convention, "", "", std::to_string(curve.total), "", "", format_double(ece(curve)),
                  format_double(mce(curve)), o ? format_double(*o) : "", format_double(a.c_crit)}) +
         "\n";
  write_text(a.out, out);
  return 0;
}

struct RfArgs {
  std::string model, data, out = "-";
  std::size_t n = 100;
  double tol = 0.0;
};

int cmd_rf(const RfArgs& a) {
  const Checkpoint ck = load_checkpoint(a.model);
  const Dataset data = load_dataset(a.data);
  if (data.chw() != ck.model->spec().input_chw) throw data_error("image shape does not match the model");
  const std::size_t n = std::min(a.n, data.n);
  if (n == 0) throw usage_error("--n must be positive");
  const ReceptiveField rf = effective_receptive_field(*ck.model, data.range(0, n).all(), a.tol);
  std::string out = "row,col,sensitivity,fwhm,support_width,peak_row\n";
  for (std::size_t i = 0; i < rf.height; ++i) {
    for (std::size_t j = 0; j < rf.width; ++j) {
      out += csv_row({std::to_string(i), std::to_string(j), format_double(rf.sensitivity[i * rf.width + j]),
                      format_double(rf.fwhm), std::to_string(rf.support_width), std::to_string(rf.peak_row)}) +
             "\n";
    }
  }
  write_text(a.out, out);
  return 0;
}

struct CorruptArgs {
  std::string model, data, baseline, out = "-";
};

int cmd_corrupt(const CorruptArgs& a, const Globals& g) {
  const Checkpoint ck = load_checkpoint(a.model);
  const Dataset data = load_dataset(a.data);
  check_classes(data, *ck.model, "corruption set");
  std::optional<Checkpoint> base;
  if (!a.baseline.empty()) base = load_checkpoint(a.baseline);
  const CorruptionReport report =
      corruption_suite(*ck.model, data, require_refs(ck), base ? base->model.get() : nullptr, g.seed.value_or(0));
  write_text(a.out, corruption_csv(report));
  return 0;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage:
      return 1;
    case ErrorKind::data:
      return 2;
    case ErrorKind::numeric:
      return 3;
  }
  return 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative classifier built on an invertible network"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Experiment seed for data, initialization, augmentation and attacks");
  app.add_option("--threads", g.threads, "Worker threads for linear algebra")->check(CLI::PositiveNumber);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth-data", "Generate a synthetic dataset (IBDS1)");
  s->add_option("--kind", synth.kind, "bars | uniform_noise | inverted | shuffled");
  s->add_option("--base", synth.base, "Base dataset for OoD kinds");
  s->add_option("--n", synth.n, "Number of images");
  s->add_option("--classes", synth.classes, "Number of classes");
  s->add_option("--channels", synth.channels, "Image channels");
  s->add_option("--size", synth.size, "Image height and width");
  s->add_option("--first", synth.first, "Index of the first image in the seed's stream");
  s->add_option("--out", synth.out, "Output file")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model and write a checkpoint");
  t->add_option("--config", tr.config, "JSON config (defaults when omitted)");
  t->add_option("--data", tr.data, "Training set")->required();
  t->add_option("--test", tr.test, "Held-out set reported after training");
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--log", tr.log, "Per-epoch CSV ('-' for stdout)");
  t->add_option("--epochs", tr.epochs, "Override the configured epochs");
  t->add_option("--beta", tr.beta, "Override beta (number or inf)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Accuracy, bits/dim, entropy and calibration on a dataset");
  e->add_option("--model", ev.model)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--c-crit", ev.c_crit);
  e->add_option("--out", ev.out);

  OodArgs od;
  auto* o = app.add_subcommand("ood", "Likelihood-based OoD test and ROC-AUC");
  o->add_option("--model", od.model)->required();
  o->add_option("--in", od.in, "In-distribution held-out set")->required();
  o->add_option("--ood", od.ood, "OoD set")->required();
  o->add_option("--test", od.test, "single_threshold | typicality | two_tailed");
  o->add_option("--p", od.p, "False-positive rate of the test");
  o->add_option("--out", od.out);

  AttackArgs at;
  auto* a = app.add_subcommand("attack", "Targeted attacks with random targets");
  a->add_option("--model", at.model)->required();
  a->add_option("--data", at.data, "Images to attack (first n)")->required();
  a->add_option("--kappa", at.kappa, "Margin (number or inf)");
  a->add_option("--c", at.c, "Class-loss weight");
  a->add_option("--d", at.d, "Detection-loss weight");
  a->add_option("--n", at.n, "Number of images");
  a->add_option("--max-steps", at.max_steps);
  a->add_option("--out", at.out);

  ExplainArgs ex;
  auto* x = app.add_subcommand("explain", "Decision-space projection, class similarity and heatmaps");
  x->add_option("--model", ex.model)->required();
  x->add_option("--input", ex.input, "Dataset holding the image")->required();
  x->add_option("--index", ex.index, "Image index in the dataset");
  x->add_option("--top", ex.top, "Number of top classes");
  x->add_option("--contrast", ex.contrast);
  x->add_option("--out-dir", ex.out_dir);

  CalibrateArgs ca;
  auto* c = app.add_subcommand("calibrate", "Calibration curve, ECE, MCE and OCE");
  c->add_option("--model", ca.model)->required();
  c->add_option("--data", ca.data)->required();
  c->add_option("--bins", ca.bins)->check(CLI::PositiveNumber);
  c->add_option("--convention", ca.convention, "per_class | top1");
  c->add_option("--c-crit", ca.c_crit);
  c->add_option("--out", ca.out);

  RfArgs rf;
  auto* r = app.add_subcommand("rf", "Effective receptive field of the central feature column");
  r->add_option("--model", rf.model)->required();
  r->add_option("--data", rf.data)->required();
  r->add_option("--n", rf.n);
  r->add_option("--tol", rf.tol, "Relative threshold for the support width");
  r->add_option("--out", rf.out);

  CorruptArgs co;
  auto* k = app.add_subcommand("corrupt", "Corruption robustness report");
  k->add_option("--model", co.model)->required();
  k->add_option("--data", co.data)->required();
  k->add_option("--baseline", co.baseline, "Checkpoint used as mCE normalizer");
  k->add_option("--out", co.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    if (code != 0) std::cerr << app.help();
    return code == 0 ? 0 : 1;
  }

  try {
    Eigen::setNbThreads(g.threads);
    if (*s) return cmd_synth(synth, g);
    if (*t) return cmd_train(tr, g);
    if (*e) return cmd_eval(ev);
    if (*o) return cmd_ood(od);
    if (*a) return cmd_attack(at, g);
    if (*x) return cmd_explain(ex);
    if (*c) return cmd_calibrate(ca);
    if (*r) return cmd_rf(rf);
    if (*k) return cmd_corrupt(co, g);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return exit_code(err.kind());
  } catch (const fs::filesystem_error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  }
  return 1;
}
