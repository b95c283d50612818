#pragma once

// JSON rendering of run records and suite summaries.

#include <json.hpp>

#include <string>

#include "cadg/settings.hpp"
#include "cadg/train.hpp"

namespace cadg {

inline nlohmann::json config_json(const Settings& s) {
  nlohmann::json j;
  // Snapshot text is exact (%.17g / integers), so it parses back to the same numbers.
  for (const auto& k : setting_keys()) j[k.section][k.key] = nlohmann::json::parse(k.get(s));
  return j;
}

inline nlohmann::json to_json(const RunRecord& r, const GeneratorParams& data = {}) {
  nlohmann::json j;
  j["algorithm"] = r.algorithm;
  j["config"] = config_json(Settings{data, r.config});
  j["best_step"] = r.best_step;
  j["best_val"] = r.best_val;
  j["target_accuracy"] = r.target_accuracy;
  j["steps_run"] = r.steps_run;
  j["wall_seconds"] = r.wall_seconds;
  j["held_out_accesses"] = r.held_out_accesses;
  j["checkpoint"] = r.checkpoint;
  auto& losses = j["losses"] = nlohmann::json::array();
  for (const auto& l : r.losses) {
    losses.push_back({{"step", l.step}, {"loss_total", l.total}, {"loss_s1", l.s1},
                      {"loss_s2", l.s2}, {"loss_c1", l.c1}, {"loss_c2", l.c2}});
  }
  auto& val = j["val_trace"] = nlohmann::json::array();
  for (const auto& v : r.val_trace) val.push_back({{"step", v.step}, {"accuracy", v.accuracy}});
  return j;
}

inline nlohmann::json to_json(const SuiteSummary& s) {
  nlohmann::json j;
  j["algorithm"] = s.algorithm;
  j["grand_average"] = s.grand_average;
  for (const auto& r : s.runs) {
    j["runs"].push_back({{"held_out", r.held_out}, {"repeat", r.repeat}, {"seed", r.seed},
                         {"best_val", r.best_val}, {"target_accuracy", r.target_accuracy},
                         {"steps_run", r.steps_run}});
  }
  for (const auto& d : s.domains) {
    j["domains"].push_back({{"domain", d.domain}, {"mean", d.mean}, {"std", d.stddev}, {"runs", d.runs}});
  }
  return j;
}

}  // namespace cadg
