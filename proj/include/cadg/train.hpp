#pragma once

// Training-domain-validation protocol: pair-batch training with periodic
// validation on the pooled source-domain split, best-checkpoint selection with
// patience-based early stopping, and leave-one-domain-out aggregation.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cadg/data.hpp"
#include "cadg/model.hpp"
#include "cadg/optim.hpp"

namespace cadg {

struct RunConfig {
  std::size_t steps = 2000;
  std::size_t batch = 64;
  double lr = 3e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  LossWeights lambda;
  std::size_t eval_every = 50;
  std::size_t patience = 10;
  std::size_t layers = 4;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t patch_size = 8;
  std::size_t mlp_hidden = 128;
  std::uint64_t init_seed = 1;
  std::uint64_t data_seed = 2;
  std::uint64_t split_seed = 3;
  std::size_t held_out_domain = 0;
  double val_fraction = 0.2;
  // Images per ERM step; 0 means 2*batch, the number of images a pair batch carries.
  std::size_t erm_batch = 0;
  std::size_t eval_batch = 256;

  std::size_t erm_images_per_step() const { return erm_batch ? erm_batch : 2 * batch; }

  ModelConfig model_config(const DomainDataset& ds) const {
    ModelConfig m;
    m.patch = {ds.height(), ds.width(), ds.channels(), patch_size, model_dim, heads};
    m.layers = layers;
    m.mlp_hidden = mlp_hidden;
    m.classes = ds.classes();
    return m;
  }

  void validate(const DomainDataset& ds) const {
    if (steps == 0 || batch == 0 || eval_every == 0 || patience == 0 || eval_batch == 0) {
      throw ConfigError("run config: steps, batch, eval_every, patience and eval_batch must be positive");
    }
    if (lr < 0 || momentum < 0 || weight_decay < 0) {
      throw ConfigError("run config: lr, momentum and weight_decay must be non-negative");
    }
    if (held_out_domain >= ds.domains()) {
      throw ConfigError("run config: held_out_domain " + std::to_string(held_out_domain) +
                        " >= domain count " + std::to_string(ds.domains()));
    }
    if (ds.domains() < 3) throw ConfigError("run config: need at least 3 domains");
    lambda.validate();
    model_config(ds).validate();
  }
};

struct StepLoss {
  std::size_t step = 0;
  double total = 0, s1 = 0, s2 = 0, c1 = 0, c2 = 0;
};

struct ValPoint {
  std::size_t step = 0;
  double accuracy = 0;
};

struct RunRecord {
  std::string algorithm;
  RunConfig config;
  std::vector<StepLoss> losses;
  std::vector<ValPoint> val_trace;
  std::size_t best_step = 0;
  double best_val = -1.0;
  double target_accuracy = 0.0;
  std::size_t steps_run = 0;
  double wall_seconds = 0.0;
  std::uint64_t held_out_accesses = 0;  // reads of held-out samples before target evaluation
  std::string checkpoint;               // path of the saved best-val weights, if any
};

struct TrainResult {
  RunRecord record;
  CadgWeights weights;  // best-validation weights
};

struct TrainHooks {
  /// Replaces the validation accuracy computation when set.
  std::function<double(const CadgWeights&, std::size_t step)> validator;
  /// Receives one machine-parseable line per evaluation round.
  std::function<void(const std::string&)> progress;
};

/// Fraction of correct `self`-mode predictions over the given ids.
inline double accuracy_on(const CadgWeights& w, const DomainDataset& ds,
                          const std::vector<std::size_t>& ids, std::size_t eval_batch = 256) {
  if (ids.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < ids.size(); start += eval_batch) {
    const std::size_t n = std::min(eval_batch, ids.size() - start);
    const auto [images, labels] =
        ds.batch(std::span<const std::size_t>(ids.data() + start, n));
    const auto pred = infer(images, w, InferMode::self);
    for (std::size_t i = 0; i < n; ++i) correct += pred[i] == labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(ids.size());
}

/// Accuracy over every sample of one domain.
inline double evaluate(const CadgWeights& w, const DomainDataset& ds, std::size_t domain,
                       std::size_t eval_batch = 256) {
  if (domain >= ds.domains()) throw ConfigError("evaluate: domain index out of range");
  return accuracy_on(w, ds, ds.domain_ids(domain), eval_batch);
}

namespace detail {

inline std::string progress_line(const std::string& algo, const StepLoss& l, double val) {
  std::ostringstream os;
  os.precision(6);
  os << "algo=" << algo << " step=" << l.step << " loss_total=" << l.total << " loss_s1=" << l.s1
     << " loss_s2=" << l.s2 << " loss_c1=" << l.c1 << " loss_c2=" << l.c2 << " val_acc=" << val;
  return os.str();
}

/// Shared loop; `step_fn` performs forward+backward for one step and returns the losses.
template <typename StepFn>
TrainResult run_protocol(const RunConfig& cfg, const DomainDataset& ds, const TrainHooks& hooks,
                         const std::string& algorithm, const DatasetView& val_view, StepFn&& step_fn,
                         CadgWeights weights) {
  const auto started = std::chrono::steady_clock::now();
  const std::size_t held = cfg.held_out_domain;
  const std::uint64_t held_before = ds.access_counts()[held];

  auto params = weights.parameters();
  auto opt = make_optimizer(params, cfg.lr, cfg.momentum, cfg.weight_decay);
  const auto val_ids = val_view.ids();

  RunRecord rec;
  rec.algorithm = algorithm;
  rec.config = cfg;
  CadgWeights best = weights.clone();
  std::size_t stale_rounds = 0;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    StepLoss l;
    try {
      l = step_fn(weights);
    } catch (const NumericError& e) {
      throw NumericError(algorithm + ": step " + std::to_string(step) + ": " + e.what());
    }
    l.step = step;
    if (!std::isfinite(l.total)) {
      throw NumericError(algorithm + ": non-finite loss at step " + std::to_string(step));
    }
    sgd_step(params, opt);
    zero_grads(params);
    rec.losses.push_back(l);
    rec.steps_run = step;

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      const double acc = hooks.validator ? hooks.validator(weights, step)
                                         : accuracy_on(weights, ds, val_ids, cfg.eval_batch);
      rec.val_trace.push_back({step, acc});
      if (hooks.progress) hooks.progress(progress_line(algorithm, l, acc));
      if (acc > rec.best_val) {
        rec.best_val = acc;
        rec.best_step = step;
        best.assign(weights.named_parameters());
        stale_rounds = 0;
      } else if (++stale_rounds >= cfg.patience) {
        break;
      }
    }
  }

  rec.held_out_accesses = ds.access_counts()[held] - held_before;
  weights.assign(best.named_parameters());
  rec.target_accuracy = evaluate(weights, ds, held, cfg.eval_batch);
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return {std::move(rec), std::move(weights)};
}

inline std::vector<std::size_t> source_domains(const RunConfig& cfg, const DomainDataset& ds) {
  std::vector<std::size_t> out;
  for (std::size_t d = 0; d < ds.domains(); ++d) {
    if (d != cfg.held_out_domain) out.push_back(d);
  }
  return out;
}

}  // namespace detail

/// Pair-batch training of the four-branch model.
inline TrainResult train(const RunConfig& cfg, const DomainDataset& ds, const TrainHooks& hooks = {}) {
  cfg.validate(ds);
  const auto sources = detail::source_domains(cfg, ds);
  auto [train_view, val_view] = split(ds, {cfg.val_fraction, cfg.split_seed}, sources);
  CadgWeights weights = CadgWeights::init(cfg.model_config(ds), cfg.init_seed);
  weights.lambda = cfg.lambda;
  std::mt19937_64 rng(cfg.data_seed);

  auto step_fn = [&](CadgWeights& w) {
    const PairBatch batch = sample_pair_batch(train_view, cfg.batch, rng);
    const CadgOutput out = forward(batch.x_p, batch.x_q, batch.y, w);
    if (std::isfinite(out.loss_total.item())) backward(out.loss_total);
    return StepLoss{0, out.loss_total.item(), out.loss_s1.item(), out.loss_s2.item(),
                    out.loss_c1.item(), out.loss_c2.item()};
  };
  return detail::run_protocol(cfg, ds, hooks, "cadg", val_view, step_fn, std::move(weights));
}

/// Same protocol, single self stream on single images with plain cross-entropy.
inline TrainResult train_erm_baseline(const RunConfig& cfg, const DomainDataset& ds,
                                      const TrainHooks& hooks = {}) {
  cfg.validate(ds);
  const auto sources = detail::source_domains(cfg, ds);
  auto [train_view, val_view] = split(ds, {cfg.val_fraction, cfg.split_seed}, sources);
  CadgWeights weights = CadgWeights::init(cfg.model_config(ds), cfg.init_seed);
  weights.lambda = cfg.lambda;
  std::mt19937_64 rng(cfg.data_seed);
  const auto pool = train_view.ids();

  auto step_fn = [&](CadgWeights& w) {
    const auto ids = sample_ids(pool, cfg.erm_images_per_step(), rng);
    const auto [images, labels] = ds.batch(ids);
    const Tensor loss = cross_entropy(self_logits(images, w), labels);
    if (std::isfinite(loss.item())) backward(loss);
    return StepLoss{0, loss.item(), loss.item(), 0.0, 0.0, 0.0};
  };
  return detail::run_protocol(cfg, ds, hooks, "erm", val_view, step_fn, std::move(weights));
}

// ---------------------------------------------------------------------------
// Leave-one-domain-out suite

enum class Algorithm { cadg, erm };

inline const char* algorithm_name(Algorithm a) { return a == Algorithm::cadg ? "cadg" : "erm"; }

struct SuiteRun {
  std::size_t held_out = 0;
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  double best_val = 0;
  double target_accuracy = 0;
  std::size_t steps_run = 0;
};

struct DomainSummary {
  std::size_t domain = 0;
  double mean = 0;
  double stddev = 0;  // sample standard deviation; 0 for a single run
  std::size_t runs = 0;
};

struct SuiteSummary {
  std::string algorithm;
  std::vector<SuiteRun> runs;
  std::vector<DomainSummary> domains;
  double grand_average = 0;
};

/// Per-domain mean/std and the average of the per-domain means.
inline SuiteSummary summarize(std::string algorithm, std::vector<SuiteRun> runs, std::size_t domain_count) {
  if (runs.empty()) throw std::invalid_argument("summarize: no runs to aggregate");
  SuiteSummary s{std::move(algorithm), std::move(runs), {}, 0.0};
  std::size_t populated = 0;
  for (std::size_t d = 0; d < domain_count; ++d) {
    std::vector<double> acc;
    for (const auto& r : s.runs) {
      if (r.held_out == d) acc.push_back(r.target_accuracy);
    }
    if (acc.empty()) continue;
    DomainSummary ds{d, 0.0, 0.0, acc.size()};
    for (double a : acc) ds.mean += a;
    ds.mean /= static_cast<double>(acc.size());
    if (acc.size() > 1) {
      double ss = 0.0;
      for (double a : acc) ss += (a - ds.mean) * (a - ds.mean);
      ds.stddev = std::sqrt(ss / static_cast<double>(acc.size() - 1));
    }
    s.grand_average += ds.mean;
    ++populated;
    s.domains.push_back(ds);
  }
  s.grand_average /= static_cast<double>(populated);
  return s;
}

/// Seeds for repeat `r` of any held-out domain: every seed shifted by r.
inline RunConfig repeat_config(const RunConfig& base, std::size_t held_out, std::size_t repeat) {
  RunConfig cfg = base;
  cfg.held_out_domain = held_out;
  cfg.init_seed = base.init_seed + repeat;
  cfg.split_seed = base.split_seed + repeat;
  cfg.data_seed = base.data_seed + repeat;
  return cfg;
}

inline SuiteSummary leave_one_out_suite(
    const RunConfig& base, const DomainDataset& ds, std::size_t repeats, Algorithm algo = Algorithm::cadg,
    const TrainHooks& hooks = {}, const std::function<void(const RunRecord&)>& on_run = {}) {
  if (ds.domains() < 3) throw ConfigError("suite: need at least 3 domains");
  if (repeats == 0) throw ConfigError("suite: repeats must be at least 1");
  std::vector<SuiteRun> runs;
  for (std::size_t d = 0; d < ds.domains(); ++d) {
    for (std::size_t r = 0; r < repeats; ++r) {
      const RunConfig cfg = repeat_config(base, d, r);
      TrainResult res = algo == Algorithm::cadg ? train(cfg, ds, hooks) : train_erm_baseline(cfg, ds, hooks);
      if (on_run) on_run(res.record);
      runs.push_back({d, r, cfg.init_seed, res.record.best_val, res.record.target_accuracy,
                      res.record.steps_run});
    }
  }
  return summarize(algorithm_name(algo), std::move(runs), ds.domains());
}

/// kind,held_out,repeat,seed,best_val,target_acc,steps_run,mean,std
inline void write_suite_csv(std::ostream& os, const SuiteSummary& s) {
  const auto prev = os.precision(17);
  os << "kind,held_out,repeat,seed,best_val,target_acc,steps_run,mean,std\n";
  for (const auto& r : s.runs) {
    os << "run," << r.held_out << ',' << r.repeat << ',' << r.seed << ',' << r.best_val << ','
       << r.target_accuracy << ',' << r.steps_run << ",,\n";
  }
  for (const auto& d : s.domains) {
    os << "domain," << d.domain << ",,,,,," << d.mean << ',' << d.stddev << '\n';
  }
  os << "average,,,,,,," << s.grand_average << ",\n";
  os.precision(prev);
}

}  // namespace cadg
