// Trains a small model with the library API, then prints how the class token
// of one image attends over the patches of a same-class image from another
// domain.
//
//   ./pair_attention [held_out_domain]

#include <cstdlib>
#include <iomanip>
#include <iostream>

#include "cadg/cadg.hpp"

int main(int argc, char** argv) {
  using namespace cadg;

  GeneratorParams gp;
  gp.per_cell = 40;
  gp.height = 16;
  gp.width = 16;
  const DomainDataset ds = generate_synthetic(gp);

  RunConfig cfg;
  cfg.steps = 150;
  cfg.batch = 16;
  cfg.lr = 0.05;
  cfg.eval_every = 25;
  cfg.layers = 1;
  cfg.model_dim = 16;
  cfg.heads = 2;
  cfg.patch_size = 4;
  cfg.mlp_hidden = 32;
  cfg.held_out_domain = argc > 1 ? static_cast<std::size_t>(std::atoi(argv[1])) : 3;

  TrainHooks hooks;
  hooks.progress = [](const std::string& line) { std::cout << line << '\n'; };
  const TrainResult res = train(cfg, ds, hooks);
  std::cout << "held-out " << style_name(cfg.held_out_domain) << ": accuracy " << res.record.target_accuracy
            << " (best val " << res.record.best_val << " at step " << res.record.best_step << ")\n";

  // One class-0 image from each of the first two source domains.
  const std::size_t da = cfg.held_out_domain == 0 ? 1 : 0;
  const std::size_t db = cfg.held_out_domain <= 1 ? 2 : 1;
  const auto x1 = ds.batch(std::vector<std::size_t>{ds.cell(da, 0).front()}).first;
  const auto x2 = ds.batch(std::vector<std::size_t>{ds.cell(db, 0).front()}).first;
  const AlignmentMaps maps = alignment_map(x1, x2, res.weights, 0);

  // cross1 is [1, heads, N+1, N+1]; row 0 of head 0 is the class-token query,
  // column 0 its weight on the other image's class token.
  const std::size_t grid = gp.width / cfg.patch_size;
  std::cout << std::fixed << std::setprecision(3) << "class token of " << style_name(da) << " image over "
            << style_name(db) << " image, head 0 (cls " << maps.cross1[0] << "):\n";
  for (std::size_t r = 0; r < grid; ++r) {
    for (std::size_t c = 0; c < grid; ++c) std::cout << std::setw(7) << maps.cross1[1 + r * grid + c];
    std::cout << '\n';
  }
  return 0;
}
