// Acceptance checks: one PASS/FAIL line per criterion.
//
//   acceptance            run all nine
//   acceptance 3 5        run a subset
//
// Exit status is 0 iff every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cadg/cadg.hpp"
#include "oracle.hpp"

using namespace cadg;
using cadg::testing::bit_equal;
using cadg::testing::max_abs_diff;
using cadg::testing::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

Tensor pixels(std::size_t batch, const ModelConfig& cfg, std::mt19937_64& rng) {
  const auto& p = cfg.patch;
  return random_tensor({batch, p.image_height, p.image_width, p.channels}, rng, false, 0.0, 1.0);
}

std::vector<int> random_labels(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(k) - 1);
  std::vector<int> y(n);
  for (auto& v : y) v = pick(rng);
  return y;
}

// The architecture the desk-scale suite trains, with fresh weights.
ModelConfig desk_model() {
  ModelConfig cfg;
  cfg.patch = PatchConfig{32, 32, 1, 8, 32, 4};
  cfg.layers = 2;
  cfg.mlp_hidden = 64;
  cfg.classes = 4;
  return cfg;
}

RunConfig desk_run() {
  RunConfig cfg;
  cfg.steps = 500;
  cfg.batch = 32;
  cfg.lr = 0.05;
  cfg.model_dim = 32;
  cfg.layers = 2;
  cfg.heads = 4;
  cfg.patch_size = 8;
  cfg.mlp_hidden = 64;
  return cfg;
}

// ---------------------------------------------------------------------------

Verdict gradient_oracle() {
  const auto t0 = Clock::now();
  ModelConfig cfg;
  cfg.patch = PatchConfig{4, 4, 1, 2, 8, 1};  // 2x2 patch grid
  cfg.layers = 2;
  cfg.mlp_hidden = 16;
  cfg.classes = 3;
  double worst = 0;
  std::size_t entries = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto w = CadgWeights::init(cfg, seed);
    w.lambda = {0.4, 0.3, 0.2, 0.1};
    const auto x1 = pixels(2, cfg, rng), x2 = pixels(2, cfg, rng);
    const auto y = random_labels(2, 3, rng);
    auto params = w.parameters();
    backward(forward(x1, x2, y, w).loss_total);
    const auto r = check_gradients(params, [&] { return forward(x1, x2, y, w).loss_total.item(); }, 1e-4);
    worst = std::max(worst, r.max_rel_error);
    entries += r.entries_checked;
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0, "max_rel_err=" + fmt(worst) + " entries=" + std::to_string(entries) +
                                           " seeds=5 seconds=" + fmt(secs)};
}

Verdict self_pair_identity() {
  const auto cfg = desk_model();
  const auto w = CadgWeights::init(cfg, 2);
  std::mt19937_64 rng(2);
  NoGradGuard no_grad;
  std::size_t identical = 0, layers_checked = 0, agree = 0;
  for (int i = 0; i < 100; ++i) {
    const auto x = pixels(1, cfg, rng);
    std::vector<BranchStates> trace;
    run_streams(x, x, w, &trace);
    bool same = true;
    for (const auto& st : trace) {
      same = same && bit_equal(st.c1, st.s1) && bit_equal(st.c2, st.s2);
      ++layers_checked;
    }
    identical += same;
    agree += infer(x, w, InferMode::self) == infer(x, w, InferMode::self_pair);
  }
  return {identical == 100 && agree == 100,
          "bit_identical_inputs=" + std::to_string(identical) + "/100 layers_checked=" +
              std::to_string(layers_checked) + " argmax_agree=" + std::to_string(agree) + "/100"};
}

Verdict swap_symmetry() {
  const auto cfg = desk_model();
  auto w = CadgWeights::init(cfg, 3);
  w.lambda = {0.3, 0.3, 0.2, 0.2};
  std::mt19937_64 rng(3);
  NoGradGuard no_grad;
  double worst_state = 0, worst_loss = 0;
  for (int i = 0; i < 100; ++i) {
    const auto x1 = pixels(1, cfg, rng), x2 = pixels(1, cfg, rng);
    const auto y = random_labels(1, cfg.classes, rng);
    std::vector<BranchStates> a, b;
    const auto fa = forward(x1, x2, y, w, &a);
    const auto fb = forward(x2, x1, y, w, &b);
    for (std::size_t n = 0; n < a.size(); ++n) {
      worst_state = std::max({worst_state, max_abs_diff(a[n].s1, b[n].s2), max_abs_diff(a[n].s2, b[n].s1),
                              max_abs_diff(a[n].c1, b[n].c2), max_abs_diff(a[n].c2, b[n].c1)});
    }
    worst_state = std::max({worst_state, max_abs_diff(fa.logits_c1, fb.logits_c2),
                            max_abs_diff(fa.logits_s1, fb.logits_s2)});
    worst_loss = std::max(worst_loss, std::abs(fa.loss_total.item() - fb.loss_total.item()));
  }
  return {worst_state <= 1e-12 && worst_loss <= 1e-12,
          "pairs=100 max_state_diff=" + fmt(worst_state) + " max_loss_diff=" + fmt(worst_loss)};
}

Verdict weight_sharing() {
  const auto cfg = desk_model();
  auto w = CadgWeights::init(cfg, 4);
  // Independent count of a single-stream ViT plus linear head.
  const std::size_t d = cfg.patch.model_dim, h = cfg.mlp_hidden, k = cfg.classes;
  const std::size_t n = cfg.patch.token_count(), pd = cfg.patch.patch_dim();
  const std::size_t embed = pd * d + d + d + (n + 1) * d;
  // LN, attention (W_q, W_k, W_v, W_out + output bias), LN, two-layer MLP.
  const std::size_t block = 2 * d + (4 * d * d + d) + 2 * d + (d * h + h) + (h * d + d);
  const std::size_t vit = embed + cfg.layers * block + 2 * d + d * k + k;
  const bool count_ok = w.parameter_count() == vit;

  std::mt19937_64 rng(4);
  const auto x1 = pixels(8, cfg, rng), x2 = pixels(8, cfg, rng);
  const auto probe = pixels(8, cfg, rng);
  const auto y = random_labels(8, k, rng);
  w.lambda = {0.0, 0.0, 0.5, 0.5};
  const Tensor before = infer_logits(probe, w);
  auto params = w.parameters();
  auto opt = make_optimizer(params, 0.05, 0.0, 0.0);
  backward(forward(x1, x2, y, w).loss_total);
  sgd_step(params, opt);
  const double moved = max_abs_diff(before, infer_logits(probe, w));
  return {count_ok && moved > 0.0, "cadg_params=" + std::to_string(w.parameter_count()) +
                                       " vit_params=" + std::to_string(vit) +
                                       " self_logit_change_after_cross_step=" + fmt(moved)};
}

Verdict sampler_statistics() {
  // Tag each sample's first pixel with its id so every drawn row can be traced back.
  const auto base = generate_synthetic(GeneratorParams{});
  std::vector<Sample> samples = base.samples();
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i].pixels[0] = static_cast<double>(i);
  const DomainDataset ds(base.classes(), base.domains(), base.height(), base.width(), base.channels(),
                         base.seed(), std::move(samples));
  const std::vector<std::size_t> sources{0, 2, 3};
  const auto [train, val] = split(ds, {0.2, 5}, sources);
  std::mt19937_64 rng(5);
  const std::size_t rows = 10000, chunk = 500, px = ds.pixels_per_image();
  std::map<int, std::size_t> classes;
  std::map<std::pair<int, int>, std::size_t> pairs;
  std::size_t violations = 0;
  for (std::size_t done = 0; done < rows; done += chunk) {
    const auto b = sample_pair_batch(train, chunk, rng);
    for (std::size_t r = 0; r < chunk; ++r) {
      const auto& p = ds.peek(static_cast<std::size_t>(b.x_p[r * px]));
      const auto& q = ds.peek(static_cast<std::size_t>(b.x_q[r * px]));
      if (p.domain == q.domain || p.label != q.label || p.label != b.y[r] || p.domain == 1 || q.domain == 1) {
        ++violations;
      }
      ++classes[p.label];
      ++pairs[{std::min(p.domain, q.domain), std::max(p.domain, q.domain)}];
    }
  }
  double cmin = 1, cmax = 0, pdev = 0;
  for (const auto& [c, count] : classes) {
    cmin = std::min(cmin, count / double(rows));
    cmax = std::max(cmax, count / double(rows));
  }
  for (const auto& [pr, count] : pairs) pdev = std::max(pdev, std::abs(count / double(rows) - 1.0 / 3.0));
  const bool ok = violations == 0 && classes.size() == 4 && cmin >= 0.225 && cmax <= 0.275 &&
                  pairs.size() == 3 && pdev <= 0.025;
  return {ok, "draws=10000 violations=" + std::to_string(violations) + " class_freq=[" + fmt(cmin) + "," +
                  fmt(cmax) + "] domain_pair_max_dev=" + fmt(pdev)};
}

Verdict attention_invariants() {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> small(1, 9), heads_pick(1, 4);
  double worst_row = 0, worst_shift = 0;
  std::size_t rows = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t heads = heads_pick(rng), b = small(rng), nq = small(rng), nk = small(rng);
    const std::size_t d = heads * small(rng);
    const auto q = random_tensor({b, nq, d}, rng, false, -4.0, 4.0);
    const auto k = random_tensor({b, nk, d}, rng, false, -4.0, 4.0);
    const auto a = attention_weights(q, k, heads);
    for (std::size_t r = 0; r < a.size() / nk; ++r, ++rows) {
      double total = 0;
      for (std::size_t j = 0; j < nk; ++j) total += a[r * nk + j];
      worst_row = std::max(worst_row, std::abs(total - 1.0));
    }
    const auto logits = random_tensor({b, nq, nk}, rng, false, -10.0, 10.0);
    const double c = std::uniform_real_distribution<double>(-100.0, 100.0)(rng);
    const auto shifted = add(logits, Tensor(Shape{nk}, c));
    worst_shift = std::max(worst_shift, max_abs_diff(softmax(logits, -1), softmax(shifted, -1)));
  }
  return {worst_row <= 1e-6 && worst_shift <= 1e-9, "shapes=200 rows=" + std::to_string(rows) +
                                                        " max_row_err=" + fmt(worst_row) +
                                                        " max_shift_err=" + fmt(worst_shift)};
}

Verdict generalization() {
  const auto t0 = Clock::now();
  const auto ds = generate_synthetic(GeneratorParams{});
  const auto cfg = desk_run();
  auto report = [](const RunRecord& r) {
    std::cout << "  " << r.algorithm << " held_out=" << r.config.held_out_domain << " seed=" << r.config.init_seed
              << " best_step=" << r.best_step << " target_acc=" << fmt(r.target_accuracy)
              << " seconds=" << fmt(r.wall_seconds) << std::endl;
  };
  const auto cadg = leave_one_out_suite(cfg, ds, 3, Algorithm::cadg, {}, report);
  const auto erm = leave_one_out_suite(cfg, ds, 3, Algorithm::erm, {}, report);
  for (const auto* s : {&cadg, &erm}) {
    std::cout << "  " << s->algorithm << " per-domain:";
    for (const auto& d : s->domains) std::cout << " d" << d.domain << "=" << fmt(d.mean) << "+-" << fmt(d.stddev);
    std::cout << std::endl;
  }
  const double secs = seconds_since(t0);
  const double chance = 1.0 / static_cast<double>(ds.classes());
  const bool ok = cadg.grand_average > erm.grand_average && cadg.grand_average >= chance + 0.20 &&
                  erm.grand_average >= chance + 0.20 && secs <= 1800.0;
  return {ok, "cadg=" + fmt(cadg.grand_average) + " erm=" + fmt(erm.grand_average) +
                  " margin_pp=" + fmt(100.0 * (cadg.grand_average - erm.grand_average)) +
                  " seconds=" + fmt(secs)};
}

Verdict protocol() {
  GeneratorParams gp;
  gp.per_cell = 40;
  gp.height = 16;
  gp.width = 16;
  const auto ds = generate_synthetic(gp);
  RunConfig cfg;
  cfg.steps = 60;
  cfg.batch = 8;
  cfg.lr = 0.05;
  cfg.model_dim = 16;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.mlp_hidden = 16;
  cfg.eval_every = 10;
  cfg.held_out_domain = 2;

  bool untouched = true, best_ok = true, repro = true;
  std::uint64_t accesses = 0;
  for (auto* fn : {&train, &train_erm_baseline}) {
    ds.reset_access_counts();
    const auto a = (*fn)(cfg, ds, {});
    accesses += a.record.held_out_accesses;
    // Besides the recorded counter, the held-out domain is read exactly once: the final evaluation.
    untouched = untouched && a.record.held_out_accesses == 0 &&
                ds.access_counts()[cfg.held_out_domain] == ds.domain_ids(cfg.held_out_domain).size();

    const auto sources = detail::source_domains(cfg, ds);
    const auto [tr, val] = split(ds, {cfg.val_fraction, cfg.split_seed}, sources);
    double best_seen = -1;
    for (const auto& v : a.record.val_trace) best_seen = std::max(best_seen, v.accuracy);
    best_ok = best_ok && a.record.best_val == best_seen &&
              accuracy_on(a.weights, ds, val.ids()) == a.record.best_val &&
              evaluate(a.weights, ds, cfg.held_out_domain) == a.record.target_accuracy;

    const auto b = (*fn)(cfg, ds, {});
    repro = repro && a.record.losses.size() == b.record.losses.size();
    for (std::size_t i = 0; repro && i < a.record.losses.size(); ++i) {
      const auto &la = a.record.losses[i], &lb = b.record.losses[i];
      for (auto [u, v] : {std::pair{la.total, lb.total}, {la.s1, lb.s1}, {la.s2, lb.s2}, {la.c1, lb.c1},
                          {la.c2, lb.c2}}) {
        repro = repro && std::bit_cast<std::uint64_t>(u) == std::bit_cast<std::uint64_t>(v);
      }
    }
  }
  return {untouched && best_ok && repro, std::string("held_out_accesses=") + std::to_string(accesses) +
                                             " best_checkpoint=" + (best_ok ? "ok" : "mismatch") +
                                             " reproducible=" + (repro ? "yes" : "no")};
}

Verdict serialization() {
  auto w = CadgWeights::init(desk_model(), 9);
  std::ostringstream cos(std::ios::binary);
  write_checkpoint(cos, w.named_parameters());
  const std::string ckpt = cos.str();
  auto read_ckpt = [](const std::string& bytes) {
    std::istringstream is(bytes, std::ios::binary);
    return read_checkpoint(is);
  };
  auto restored = CadgWeights::init(desk_model(), 10);
  restored.assign(read_ckpt(ckpt));
  std::ostringstream again(std::ios::binary);
  write_checkpoint(again, restored.named_parameters());
  bool ckpt_ok = again.str() == ckpt;

  GeneratorParams gp;
  gp.per_cell = 20;
  const auto ds = generate_synthetic(gp);
  std::ostringstream dos(std::ios::binary);
  write_dataset(dos, ds);
  const std::string data = dos.str();
  auto read_data = [](const std::string& bytes) {
    std::istringstream is(bytes, std::ios::binary);
    return read_dataset(is);
  };
  bool data_ok = read_data(data) == ds;

  std::size_t rejected = 0, attempts = 0;
  auto expect_reject = [&](const std::function<void()>& fn) {
    ++attempts;
    try {
      fn();
    } catch (const FormatError&) {
      ++rejected;
    }
  };
  for (const std::string* bytes : {&ckpt, &data}) {
    const bool is_ckpt = bytes == &ckpt;
    auto load = [&](const std::string& b) { is_ckpt ? (void)read_ckpt(b) : (void)read_data(b); };
    auto bad_magic = *bytes;
    bad_magic[0] ^= 0x20;
    auto bad_version = *bytes;
    bad_version[is_ckpt ? 4 : 6] = '9';
    expect_reject([&] { load(bad_magic); });
    expect_reject([&] { load(bad_version); });
    expect_reject([&] { load(bytes->substr(0, bytes->size() - 1)); });
    expect_reject([&] { load(*bytes + "x"); });
  }
  return {ckpt_ok && data_ok && rejected == attempts,
          std::string("checkpoint_round_trip=") + (ckpt_ok ? "exact" : "differs") +
              " dataset_round_trip=" + (data_ok ? "exact" : "differs") + " corrupt_rejected=" +
              std::to_string(rejected) + "/" + std::to_string(attempts)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient oracle", gradient_oracle},
      {"self-pair identity", self_pair_identity},
      {"swap symmetry", swap_symmetry},
      {"weight sharing", weight_sharing},
      {"sampler statistics", sampler_statistics},
      {"attention invariants", attention_invariants},
      {"desk-scale generalization", generalization},
      {"protocol correctness", protocol},
      {"serialization", serialization},
  };
  std::vector<std::size_t> selected;
  for (int i = 1; i < argc; ++i) {
    const int n = std::atoi(argv[i]);
    if (n < 1 || n > static_cast<int>(criteria.size())) {
      std::cerr << "usage: acceptance [criterion 1-" << criteria.size() << "]...\n";
      return 2;
    }
    selected.push_back(static_cast<std::size_t>(n));
  }
  if (selected.empty()) {
    for (std::size_t n = 1; n <= criteria.size(); ++n) selected.push_back(n);
  }

  bool all = true;
  for (std::size_t n : selected) {
    const auto& [name, check] = criteria[n - 1];
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    all = all && v.pass;
    std::cout << "criterion " << n << " (" << name << "): " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail
              << std::endl;
  }
  return all ? 0 : 1;
}
