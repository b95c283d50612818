// cadg: dataset generation, training, evaluation, leave-one-domain-out suites,
// alignment-map export and gradient checking from one executable.
//
// Settings are layered: built-in defaults, then --config FILE, then individual
// flags (--lr 0.05, --per-cell 100, ...). Every run writes the merged settings
// to config.ini in its output directory; `--config that/config.ini` replays it.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>

#include "cadg/cadg.hpp"
#include "cadg/report.hpp"

namespace fs = std::filesystem;
using namespace cadg;

namespace {

struct Common {
  std::string config_path;
  std::string output_dir;
  std::string data_path;
  std::map<std::string, std::string> overrides;  // qualified key -> text
};

void add_common(CLI::App* cmd, Common& c, bool with_data = true) {
  cmd->add_option("--config", c.config_path, "INI file with [data], [model] and [train] sections")
      ->check(CLI::ExistingFile);
  cmd->add_option("-o,--output-dir", c.output_dir,
                  "Directory for artifacts (default: $CADG_OUTPUT_DIR, else ./cadg_out)");
  if (with_data) {
    cmd->add_option("--data", c.data_path, "Dataset file from gen-data (default: generate from [data])")
        ->check(CLI::ExistingFile);
  }
  for (const auto& k : setting_keys()) {
    const std::string q = k.qualified();
    cmd->add_option_function<std::string>(
           k.flag(), [&c, q](const std::string& v) { c.overrides[q] = v; }, "overrides " + q)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)
        ->group("Settings");
  }
}

Settings resolve_settings(const Common& c) {
  Settings s;
  if (!c.config_path.empty()) apply_config_file(s, c.config_path);
  for (const auto& [q, v] : c.overrides) {
    const auto dot = q.find('.');
    find_setting(q.substr(0, dot), q.substr(dot + 1))->set(s, v);
  }
  return s;
}

fs::path output_dir(const Common& c) {
  fs::path dir = c.output_dir;
  if (dir.empty()) {
    const char* env = std::getenv("CADG_OUTPUT_DIR");
    dir = env && *env ? env : "cadg_out";
  }
  fs::create_directories(dir);
  return dir;
}

/// The dataset named by --data, or a fresh one from the [data] settings. A
/// loaded file overrides the generator settings it records.
DomainDataset obtain_dataset(const Common& c, Settings& s) {
  if (c.data_path.empty()) return generate_synthetic(s.data);
  DomainDataset ds = load_dataset(c.data_path);
  s.data.classes = ds.classes();
  s.data.domains = ds.domains();
  s.data.height = ds.height();
  s.data.width = ds.width();
  s.data.channels = ds.channels();
  s.data.seed = ds.seed();
  s.data.per_cell = ds.cell(0, 0).size();
  return ds;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

TrainHooks stdout_progress() {
  TrainHooks hooks;
  hooks.progress = [](const std::string& line) { std::cout << line << std::endl; };
  return hooks;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c, const std::string& out_name) {
  Settings s = resolve_settings(c);
  const auto ds = generate_synthetic(s.data);
  const fs::path dir = output_dir(c);
  const fs::path path = dir / out_name;
  save_dataset(path, ds);
  write_text(dir / "config.ini", to_config_text(s));
  std::cout << "gen-data: samples=" << ds.size() << " classes=" << ds.classes()
            << " domains=" << ds.domains() << " file=" << path.string() << '\n';
  return 0;
}

int cmd_train(const Common& c, Algorithm algo) {
  Settings s = resolve_settings(c);
  const auto ds = obtain_dataset(c, s);
  const fs::path dir = output_dir(c);
  write_text(dir / "config.ini", to_config_text(s));

  TrainResult res = algo == Algorithm::cadg ? train(s.run, ds, stdout_progress())
                                            : train_erm_baseline(s.run, ds, stdout_progress());
  const fs::path ckpt = dir / "best.ckpt";
  save_checkpoint(ckpt, res.weights.named_parameters());
  res.record.checkpoint = ckpt.string();
  write_text(dir / "record.json", to_json(res.record, s.data).dump(2) + "\n");

  const auto& r = res.record;
  std::cout << (algo == Algorithm::cadg ? "train" : "train-erm") << ": held_out=" << s.run.held_out_domain
            << " best_step=" << r.best_step << " best_val=" << fmt(r.best_val)
            << " target_acc=" << fmt(r.target_accuracy) << " steps_run=" << r.steps_run
            << " seconds=" << fmt(r.wall_seconds) << " output=" << dir.string() << '\n';
  return 0;
}

CadgWeights load_weights(const Settings& s, const DomainDataset& ds, const std::string& checkpoint) {
  CadgWeights w = CadgWeights::init(s.run.model_config(ds), s.run.init_seed);
  w.lambda = s.run.lambda;
  if (!checkpoint.empty()) w.assign(load_checkpoint(checkpoint));
  return w;
}

int cmd_eval(const Common& c, const std::string& checkpoint, std::optional<std::size_t> domain,
             const std::string& mode) {
  Settings s = resolve_settings(c);
  const auto ds = obtain_dataset(c, s);
  const CadgWeights w = load_weights(s, ds, checkpoint);
  const std::size_t d = domain.value_or(s.run.held_out_domain);
  if (d >= ds.domains()) throw ConfigError("eval: domain " + std::to_string(d) + " out of range");
  const InferMode m = mode == "self-pair" ? InferMode::self_pair : InferMode::self;
  const auto ids = ds.domain_ids(d);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < ids.size(); start += s.run.eval_batch) {
    const std::size_t n = std::min(s.run.eval_batch, ids.size() - start);
    const auto [x, y] = ds.batch(std::span<const std::size_t>(ids.data() + start, n));
    const auto pred = infer(x, w, m);
    for (std::size_t i = 0; i < n; ++i) correct += pred[i] == y[i];
  }
  std::cout << "eval: domain=" << d << " mode=" << mode << " samples=" << ids.size()
            << " accuracy=" << fmt(static_cast<double>(correct) / static_cast<double>(ids.size()))
            << '\n';
  return 0;
}

int cmd_suite(const Common& c, std::size_t repeats, const std::string& algo_name) {
  Settings s = resolve_settings(c);
  const auto ds = obtain_dataset(c, s);
  const fs::path dir = output_dir(c);
  write_text(dir / "config.ini", to_config_text(s));
  const Algorithm algo = algo_name == "erm" ? Algorithm::erm : Algorithm::cadg;
  fs::create_directories(dir / "runs");

  const auto summary = leave_one_out_suite(
      s.run, ds, repeats, algo, stdout_progress(), [&](const RunRecord& r) {
        const std::string stem = algo_name + "_d" + std::to_string(r.config.held_out_domain) + "_s" +
                                 std::to_string(r.config.init_seed);
        write_text(dir / "runs" / (stem + ".json"), to_json(r, s.data).dump(2) + "\n");
        std::cout << "run: algo=" << algo_name << " held_out=" << r.config.held_out_domain
                  << " seed=" << r.config.init_seed << " best_val=" << fmt(r.best_val)
                  << " target_acc=" << fmt(r.target_accuracy) << std::endl;
      });
  std::ofstream csv(dir / "summary.csv");
  write_suite_csv(csv, summary);
  write_text(dir / "summary.json", to_json(summary).dump(2) + "\n");
  std::cout << "suite: algo=" << algo_name << " runs=" << summary.runs.size()
            << " grand_average=" << fmt(summary.grand_average) << " output=" << dir.string() << '\n';
  return 0;
}

int cmd_align(const Common& c, const std::string& checkpoint, std::size_t id_a, std::size_t id_b,
              std::size_t layer) {
  Settings s = resolve_settings(c);
  const auto ds = obtain_dataset(c, s);
  if (id_a >= ds.size() || id_b >= ds.size()) {
    throw ConfigError("align: sample ids must be below " + std::to_string(ds.size()));
  }
  const CadgWeights w = load_weights(s, ds, checkpoint);
  const std::vector<std::size_t> a{id_a}, b{id_b};
  const auto maps = alignment_map(ds.batch(a).first, ds.batch(b).first, w, layer);
  const fs::path dir = output_dir(c);
  std::ofstream f1(dir / "align_cross1.csv"), f2(dir / "align_cross2.csv");
  write_alignment_csv(f1, maps.cross1, layer);
  write_alignment_csv(f2, maps.cross2, layer);
  std::cout << "align: layer=" << layer << " pair=" << id_a << "," << id_b
            << " labels=" << ds.peek(id_a).label << "," << ds.peek(id_b).label
            << " output=" << dir.string() << '\n';
  return 0;
}

/// Finite-difference check of the full four-branch loss on a tiny model, plus
/// the attention block on its own with several heads.
int cmd_gradcheck(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto random = [&](Shape shape) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = unit(rng);
    return Tensor(std::move(shape), v);
  };

  ModelConfig cfg;
  cfg.patch = PatchConfig{4, 4, 1, 2, 8, 1};
  cfg.layers = 2;
  cfg.mlp_hidden = 16;
  cfg.classes = 3;
  double worst = 0.0;
  for (std::size_t heads : {1u, 2u}) {
    cfg.patch.head_count = heads;
    CadgWeights w = CadgWeights::init(cfg, seed + heads);
    w.lambda = {0.4, 0.3, 0.2, 0.1};
    const Tensor x1 = random({2, 4, 4, 1}), x2 = random({2, 4, 4, 1});
    const std::vector<int> y{0, 2};
    auto params = w.parameters();
    zero_grads(params);
    backward(forward(x1, x2, y, w).loss_total);
    const auto r = check_gradients(params, [&] { return forward(x1, x2, y, w).loss_total.item(); });
    std::cout << "gradcheck: model heads=" << heads << " entries=" << r.entries_checked
              << " max_rel_err=" << r.max_rel_error << " worst=" << w.named_parameters()[r.worst_param].name
              << "[" << r.worst_index << "] grad=" << params[r.worst_param].grad()[r.worst_index] << '\n';
    worst = std::max(worst, r.max_rel_error);
  }
  const bool ok = worst < 1e-4;
  std::cout << "gradcheck: max_rel_err=" << worst << (ok ? " PASS" : " FAIL") << '\n';
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-attention domain generalization: data, training and evaluation"};
  app.require_subcommand(1);

  Common common;
  std::string out_name = "dataset.bin", checkpoint, mode = "self", algo = "cadg";
  std::optional<std::size_t> domain;
  std::size_t repeats = 3, layer = 0, id_a = 0, id_b = 1;
  std::uint64_t seed = 1;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic multi-domain dataset");
  add_common(gen, common, false);
  gen->add_option("--file", out_name, "File name inside the output directory")->capture_default_str();

  auto* tr = app.add_subcommand("train", "Train the four-branch model on the source domains");
  add_common(tr, common);
  auto* erm = app.add_subcommand("train-erm", "Train the single-stream baseline with the same protocol");
  add_common(erm, common);

  auto* ev = app.add_subcommand("eval", "Accuracy of a checkpoint on one domain");
  add_common(ev, common);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--domain", domain, "Domain to score (default: train.held_out_domain)");
  ev->add_option("--mode", mode, "Inference path")
      ->check(CLI::IsMember({"self", "self-pair"}))
      ->capture_default_str();

  auto* su = app.add_subcommand("suite", "Leave-one-domain-out runs over every domain");
  add_common(su, common);
  su->add_option("--repeats", repeats, "Runs per held-out domain")->check(CLI::PositiveNumber)->capture_default_str();
  su->add_option("--algorithm", algo, "Model to train")->check(CLI::IsMember({"cadg", "erm"}))->capture_default_str();

  auto* al = app.add_subcommand("align", "Export cross-attention maps for one sample pair");
  add_common(al, common);
  al->add_option("--checkpoint", checkpoint, "Checkpoint file (default: freshly initialized weights)")
      ->check(CLI::ExistingFile);
  al->add_option("--sample-a", id_a, "Dataset id of the first image")->capture_default_str();
  al->add_option("--sample-b", id_b, "Dataset id of the second image")->capture_default_str();
  al->add_option("--layer", layer, "Layer index")->capture_default_str();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full model gradient");
  gc->add_option("--seed", seed, "Seed for weights and inputs")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(common, out_name);
    if (*tr) return cmd_train(common, Algorithm::cadg);
    if (*erm) return cmd_train(common, Algorithm::erm);
    if (*ev) return cmd_eval(common, checkpoint, domain, mode);
    if (*su) return cmd_suite(common, repeats, algo);
    if (*al) return cmd_align(common, checkpoint, id_a, id_b, layer);
    if (*gc) return cmd_gradcheck(seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
