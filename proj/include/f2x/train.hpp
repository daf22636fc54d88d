#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "f2x/data.hpp"
#include "f2x/model.hpp"
#include "f2x/objectives.hpp"

namespace f2x::train {

struct TrainerConfig {
  int steps = 6000;
  int warmup_steps = 400;
  int anneal_steps = 2000;
  int tokens_per_batch = 360;
  double p1 = 0.5;
  double p2_alpha = 2.0, p2_beta = 6.0;
  double alignment_dropout = 0.2;
  obj::NoiseSpec noise;  // defaults to local shuffle, distance 3

  // loss-term toggles for the ablation rows
  bool use_f1 = true;
  bool use_f2 = true;
  bool use_prior_alignment = false;  // drop the f1 forward pass, prior A'
  bool parallel_only = false;        // parallel targets stand in for mono
  bool use_mixup = false;            // embedding interpolation replaces both
  bool blend_predictions = true;     // v anneal vs. pinned 0
  bool anneal_temperature = true;    // 1/tau anneal vs. pinned 0

  int checkpoint_every = 2000;
  int log_every = 10;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Schedules {
  int d_model = 64;
  int warmup_steps = 400;
  int anneal_steps = 2000;
};

struct ScheduleValues {
  double lr = 0.0;
  double inv_tau = 0.0;
  double v = 0.0;
};

// lr = d^-0.5 * min(step^-0.5, step * warmup^-1.5); 1/tau anneals linearly
// 0 -> 2 and v linearly 0 -> 1 over anneal_steps, constant afterwards.
ScheduleValues schedule_eval(const Schedules& s, int step);

// Per-purpose random streams derived from one root seed, so an ablation can
// change a single randomness source without shifting the others.
struct RngStreams {
  std::mt19937_64 mask, noise, p2, align, dropout, data;

  static RngStreams from_root(std::uint64_t root);
  void save(const std::string& path, int step) const;
  int load(const std::string& path);  // returns the stored step
};

struct Adam {
  double beta1 = 0.9, beta2 = 0.98, eps = 1e-9;
  int step_count = 0;
  std::vector<std::pair<std::string, ag::Tensor>> m, v;

  void init(const model::Parameters& params);
  // one update from the gradients on the bound tape
  void apply(model::Parameters& params, const model::Bound& bound, double lr);
  void save(const std::string& path) const;
  void load(const std::string& path, const model::Parameters& params);
};

struct StepResult {
  obj::LossBreakdown breakdown;
  ScheduleValues schedule;
};

// One optimizer step over a paired batch: supervised term, both crossover
// generations per the toggles, one backward pass, one Adam update.
StepResult train_step(model::Parameters& params, Adam& opt,
                      const std::vector<std::vector<int>>& src,
                      const std::vector<std::vector<int>>& tgt,
                      const std::vector<std::vector<int>>& mono, const TrainerConfig& cfg,
                      int step, RngStreams& rngs);

struct TrainDataset {
  std::vector<std::vector<int>> src, tgt, mono;
};

struct TrainOutcome {
  int steps_done = 0;
  double last_total = 0.0;
};

// Runs the loop to cfg.steps, writing params.ckpt, optim.ckpt,
// trainer_state.txt and metrics.jsonl into out_dir. If a state file is
// already present the run resumes from it and appends to the log.
TrainOutcome run_training(model::Parameters& params, const TrainerConfig& cfg,
                          const TrainDataset& dataset, const std::string& out_dir);

}  // namespace f2x::train
