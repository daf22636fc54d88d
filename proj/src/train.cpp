#include "f2x/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace f2x::train {

using ag::Tensor;
using ag::TensorError;

void TrainerConfig::validate() const {
  if (steps <= 0) throw TensorError("trainer: steps must be positive");
  if (warmup_steps <= 0) throw TensorError("trainer: warmup_steps must be positive");
  if (anneal_steps <= 0) throw TensorError("trainer: anneal_steps must be positive");
  if (tokens_per_batch <= 0) throw TensorError("trainer: tokens_per_batch must be positive");
  if (p1 < 0.0 || p1 > 1.0) throw TensorError("trainer: p1 must lie in [0, 1]");
  if (alignment_dropout < 0.0 || alignment_dropout >= 1.0) {
    throw TensorError("trainer: alignment_dropout must lie in [0, 1)");
  }
  if (use_f1 && use_prior_alignment) {
    throw TensorError("trainer: use_prior_alignment skips the pass the f1 term needs");
  }
  if (checkpoint_every <= 0 || log_every <= 0) {
    throw TensorError("trainer: checkpoint_every and log_every must be positive");
  }
}

ScheduleValues schedule_eval(const Schedules& s, int step) {
  if (step <= 0) throw TensorError("schedule_eval: step must be positive");
  ScheduleValues out;
  double t = static_cast<double>(step);
  out.lr = std::pow(static_cast<double>(s.d_model), -0.5) *
           std::min(std::pow(t, -0.5), t * std::pow(static_cast<double>(s.warmup_steps), -1.5));
  double frac = std::min(t / s.anneal_steps, 1.0);
  out.inv_tau = 2.0 * frac;
  out.v = frac;
  return out;
}

RngStreams RngStreams::from_root(std::uint64_t root) {
  RngStreams s;
  s.mask.seed(root ^ 0x9e3779b97f4a7c15ull);
  s.noise.seed(root ^ 0xc2b2ae3d27d4eb4full);
  s.p2.seed(root ^ 0x165667b19e3779f9ull);
  s.align.seed(root ^ 0xd6e8feb86659fd93ull);
  s.dropout.seed(root ^ 0xa5a5a5a55a5a5a5bull);
  s.data.seed(root ^ 0x27d4eb2f165667c5ull);
  return s;
}

void RngStreams::save(const std::string& path, int step) const {
  std::ofstream out(path);
  if (!out) throw TensorError("cannot write trainer state: " + path);
  out << step << "\n"
      << mask << "\n"
      << noise << "\n"
      << p2 << "\n"
      << align << "\n"
      << dropout << "\n"
      << data << "\n";
  if (!out) throw TensorError("failed writing trainer state: " + path);
}

int RngStreams::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw TensorError("cannot read trainer state: " + path);
  int step = 0;
  in >> step >> mask >> noise >> p2 >> align >> dropout >> data;
  if (!in) throw TensorError("malformed trainer state: " + path);
  return step;
}

void Adam::init(const model::Parameters& params) {
  step_count = 0;
  m.clear();
  v.clear();
  for (const auto& [name, t] : params.named) {
    m.emplace_back(name, Tensor::zeros(t.shape));
    v.emplace_back(name, Tensor::zeros(t.shape));
  }
}

void Adam::apply(model::Parameters& params, const model::Bound& bound, double lr) {
  if (m.size() != params.named.size()) {
    throw TensorError("optimizer state does not match the parameter set");
  }
  ++step_count;
  double bc1 = 1.0 - std::pow(beta1, step_count);
  double bc2 = 1.0 - std::pow(beta2, step_count);
  for (std::size_t p = 0; p < params.named.size(); ++p) {
    auto& [name, theta] = params.named[p];
    const std::vector<double>* g = bound.grad(name);
    double* mp = m[p].second.ptr();
    double* vp = v[p].second.ptr();
    double* tp = theta.ptr();
    std::int64_t n = theta.size();
    for (std::int64_t i = 0; i < n; ++i) {
      double gi = g ? (*g)[i] : 0.0;
      mp[i] = beta1 * mp[i] + (1.0 - beta1) * gi;
      vp[i] = beta2 * vp[i] + (1.0 - beta2) * gi * gi;
      tp[i] -= lr * (mp[i] / bc1) / (std::sqrt(vp[i] / bc2) + eps);
    }
  }
}

void Adam::save(const std::string& path) const {
  std::vector<std::pair<std::string, Tensor>> named;
  named.emplace_back("step", Tensor::scalar(static_cast<double>(step_count)));
  for (const auto& [name, t] : m) named.emplace_back("m." + name, t);
  for (const auto& [name, t] : v) named.emplace_back("v." + name, t);
  model::save_named_tensors(named, path);
}

void Adam::load(const std::string& path, const model::Parameters& params) {
  auto named = model::load_named_tensors(path);
  init(params);
  std::size_t used = 0;
  for (auto& [name, t] : named) {
    if (name == "step") {
      step_count = static_cast<int>(t.item());
      ++used;
      continue;
    }
    auto put = [&](std::vector<std::pair<std::string, Tensor>>& dst,
                     const std::string& key) -> bool {
      for (auto& [n, d] : dst) {
        if (n == key) {
          if (d.shape != t.shape) {
            throw TensorError("optimizer state shape mismatch for " + key);
          }
          d = t;
          return true;
        }
      }
      return false;
    };
    if (name.rfind("m.", 0) == 0 && put(m, name.substr(2))) ++used;
    else if (name.rfind("v.", 0) == 0 && put(v, name.substr(2))) ++used;
  }
  if (used != named.size() || m.size() != params.named.size()) {
    throw TensorError("optimizer state does not match the parameter set: " + path);
  }
}

namespace {

void require_finite(double value, const char* term, int step) {
  if (!std::isfinite(value)) {
    std::ostringstream msg;
    msg << "non-finite " << term << " loss at step " << step;
    throw TensorError(msg.str());
  }
}

obj::LossBreakdown mixup_total(const model::Bound& bound,
                               const std::vector<std::vector<int>>& src,
                               const std::vector<std::vector<int>>& tgt,
                               double inv_tau, std::mt19937_64& p2_rng,
                               std::mt19937_64* dropout_rng) {
  obj::LossBreakdown out;
  model::TranslationLoss sup =
      model::translation_loss(bound, model::TokenBatch::from_sentences(src),
                              model::TokenBatch::from_sentences(tgt), inv_tau, dropout_rng);
  out.supervised_tokens = sup.token_count;
  Tensor total = ag::scale(sup.loss, 1.0 / sup.token_count);
  out.supervised = total.item();

  std::size_t B = src.size();
  std::vector<std::vector<int>> src2(B), tgt2(B);
  std::vector<double> lambdas(B);
  for (std::size_t b = 0; b < B; ++b) {
    src2[b] = src[(b + 1) % B];
    tgt2[b] = tgt[(b + 1) % B];
    lambdas[b] = obj::beta_sample(2.0, 6.0, p2_rng);
  }
  obj::MixupBatch mix = obj::mixup_mix(bound, src, tgt, src2, tgt2, lambdas);
  xendec::XendecLoss xl = obj::mixup_loss(bound, mix, dropout_rng);
  Tensor mean = ag::scale(xl.loss, 1.0 / xl.token_count);
  out.f2 = mean.item();
  out.f2_tokens = xl.token_count;
  out.total = ag::add(total, mean);
  return out;
}

}  // namespace

StepResult train_step(model::Parameters& params, Adam& opt,
                      const std::vector<std::vector<int>>& src,
                      const std::vector<std::vector<int>>& tgt,
                      const std::vector<std::vector<int>>& mono, const TrainerConfig& cfg,
                      int step, RngStreams& rngs) {
  Schedules sched{params.config.d_model, cfg.warmup_steps, cfg.anneal_steps};
  StepResult out;
  out.schedule = schedule_eval(sched, step);
  double inv_tau = cfg.anneal_temperature ? out.schedule.inv_tau : 0.0;

  ag::Graph graph;
  model::Bound bound(params, &graph);
  if (cfg.use_mixup) {
    out.breakdown = mixup_total(bound, src, tgt, inv_tau, rngs.p2, &rngs.dropout);
  } else {
    obj::LossConfig loss_cfg;
    loss_cfg.p1 = cfg.p1;
    loss_cfg.noise = cfg.noise;
    loss_cfg.inv_tau = inv_tau;
    loss_cfg.v = cfg.blend_predictions ? out.schedule.v : 0.0;
    loss_cfg.alignment_dropout = cfg.alignment_dropout;
    loss_cfg.use_f1 = cfg.use_f1;
    loss_cfg.use_f2 = cfg.use_f2;
    loss_cfg.use_prior_alignment = cfg.use_prior_alignment;
    double a = cfg.p2_alpha, b = cfg.p2_beta;
    loss_cfg.p2_sampler = [a, b](std::mt19937_64& rng) { return obj::beta_sample(a, b, rng); };
    obj::LossRngs loss_rngs;
    loss_rngs.mask = &rngs.mask;
    loss_rngs.noise = &rngs.noise;
    loss_rngs.p2 = &rngs.p2;
    loss_rngs.align = &rngs.align;
    loss_rngs.dropout = &rngs.dropout;
    out.breakdown = obj::total_loss(bound, src, tgt, mono, loss_cfg, loss_rngs);
  }
  require_finite(out.breakdown.supervised, "supervised", step);
  require_finite(out.breakdown.f1, "reconstruction", step);
  require_finite(out.breakdown.f2, "crossover", step);
  require_finite(out.breakdown.total.item(), "total", step);

  graph.backward(out.breakdown.total);
  opt.apply(params, bound, out.schedule.lr);
  return out;
}

TrainOutcome run_training(model::Parameters& params, const TrainerConfig& cfg,
                          const TrainDataset& dataset, const std::string& out_dir) {
  cfg.validate();
  if (dataset.src.size() != dataset.tgt.size() || dataset.src.empty()) {
    throw TensorError("training needs a non-empty parallel corpus");
  }
  std::filesystem::create_directories(out_dir);
  std::string params_path = out_dir + "/params.ckpt";
  std::string optim_path = out_dir + "/optim.ckpt";
  std::string state_path = out_dir + "/trainer_state.txt";
  std::string metrics_path = out_dir + "/metrics.jsonl";

  const std::vector<std::vector<int>>& mono =
      cfg.parallel_only ? dataset.tgt : dataset.mono;
  std::vector<int> assignment;
  if (cfg.parallel_only) {
    assignment.resize(dataset.src.size());
    for (std::size_t i = 0; i < assignment.size(); ++i) assignment[i] = static_cast<int>(i);
  } else {
    if (mono.empty()) throw TensorError("training needs mono sentences or parallel_only");
    assignment = data::pair_mono_by_length(dataset.src, mono);
  }

  Adam opt;
  RngStreams rngs = RngStreams::from_root(cfg.seed);
  int start_step = 0;
  bool resuming = std::filesystem::exists(state_path);
  if (resuming) {
    start_step = rngs.load(state_path);
    model::load_checkpoint(params, params_path);
    opt.load(optim_path, params);
  } else {
    opt.init(params);
  }

  std::ofstream metrics(metrics_path, resuming ? std::ios::app : std::ios::out);
  if (!metrics) throw TensorError("cannot write metrics log: " + metrics_path);

  auto checkpoint = [&](int step) {
    model::save_checkpoint(params, params_path);
    opt.save(optim_path);
    rngs.save(state_path, step);
  };

  // Batch layout depends only on the data and the epoch index, so a resumed
  // run can rebuild the epoch it stopped in.
  auto epoch_batches = [&](int epoch) {
    return data::make_batches(dataset.src, dataset.tgt, mono, assignment, cfg.tokens_per_batch,
                              cfg.seed * 1000003ull + static_cast<std::uint64_t>(epoch));
  };
  std::vector<data::PairedBatch> batches = epoch_batches(0);
  int per_epoch = static_cast<int>(batches.size());
  int epoch = start_step / per_epoch;
  if (epoch != 0) batches = epoch_batches(epoch);

  TrainOutcome outcome;
  outcome.steps_done = start_step;
  for (int step = start_step + 1; step <= cfg.steps; ++step) {
    int e = (step - 1) / per_epoch;
    if (e != epoch) {
      epoch = e;
      batches = epoch_batches(epoch);
    }
    const data::PairedBatch& pb = batches[(step - 1) % per_epoch];
    std::vector<std::vector<int>> src, tgt, mono_batch;
    for (std::size_t k = 0; k < pb.parallel.size(); ++k) {
      src.push_back(dataset.src[pb.parallel[k]]);
      tgt.push_back(dataset.tgt[pb.parallel[k]]);
      mono_batch.push_back(mono[pb.mono[k]]);
    }
    StepResult r = train_step(params, opt, src, tgt, mono_batch, cfg, step, rngs);
    outcome.steps_done = step;
    outcome.last_total = r.breakdown.total.item();

    if (step % cfg.log_every == 0 || step == cfg.steps) {
      char line[512];
      std::snprintf(line, sizeof(line),
                    "{\"step\":%d,\"lr\":%.17g,\"inv_tau\":%.17g,\"v\":%.17g,"
                    "\"total\":%.17g,\"supervised\":%.17g,\"f1\":%.17g,\"f2\":%.17g,"
                    "\"tokens\":%lld}",
                    step, r.schedule.lr, r.schedule.inv_tau, r.schedule.v,
                    outcome.last_total, r.breakdown.supervised, r.breakdown.f1, r.breakdown.f2,
                    static_cast<long long>(r.breakdown.supervised_tokens));
      metrics << line << "\n";
      metrics.flush();
    }
    if (step % cfg.checkpoint_every == 0 || step == cfg.steps) checkpoint(step);
  }
  return outcome;
}

}  // namespace f2x::train
