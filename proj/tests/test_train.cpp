#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "f2x/train.hpp"

using namespace f2x;
using namespace f2x::train;
using ag::Tensor;

namespace {

model::ModelConfig micro_config(double dropout = 0.0) {
  model::ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 8;
  c.num_heads = 2;
  c.num_encoder_layers = 1;
  c.num_decoder_layers = 1;
  c.feedforward_dim = 16;
  c.dropout_rate = dropout;
  c.label_smoothing = 0.1;
  c.max_positions = 32;
  return c;
}

// Tiny copy task over the content ids 5..11: targets and mono carry the
// end-of-sentence token, sources do not.
TrainDataset copy_dataset(int n_parallel, int n_mono, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len(3, 6);
  std::uniform_int_distribution<int> tok(model::kNumSpecials, 11);
  TrainDataset d;
  auto sentence = [&]() {
    std::vector<int> s(len(rng));
    for (int& t : s) t = tok(rng);
    return s;
  };
  for (int i = 0; i < n_parallel; ++i) {
    d.src.push_back(sentence());
    d.tgt.push_back(d.src.back());
    d.tgt.back().push_back(model::kEos);
  }
  for (int i = 0; i < n_mono; ++i) {
    d.mono.push_back(sentence());
    d.mono.back().push_back(model::kEos);
  }
  return d;
}

std::string fresh_dir(const std::string& name) {
  std::string path = (std::filesystem::temp_directory_path() / name).string();
  std::filesystem::remove_all(path);
  return path;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("learning-rate schedule has the inverse-sqrt shape") {
  Schedules s{64, 400, 2000};
  double d_scale = std::pow(64.0, -0.5);
  // both branches meet at the warmup boundary
  CHECK(schedule_eval(s, 400).lr == doctest::Approx(d_scale / 20.0).epsilon(1e-12));
  // linear ramp before: lr(200) is half the peak
  CHECK(schedule_eval(s, 200).lr == doctest::Approx(d_scale / 40.0).epsilon(1e-12));
  // inverse sqrt after: lr(1600) is half the peak
  CHECK(schedule_eval(s, 1600).lr == doctest::Approx(d_scale / 40.0).epsilon(1e-12));
  CHECK(schedule_eval(s, 100).lr < schedule_eval(s, 400).lr);
  CHECK(schedule_eval(s, 6000).lr < schedule_eval(s, 400).lr);
  CHECK_THROWS(schedule_eval(s, 0));
}

TEST_CASE("temperature and blending anneal linearly and saturate") {
  Schedules s{64, 400, 2000};
  ScheduleValues mid = schedule_eval(s, 1000);
  CHECK(mid.inv_tau == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mid.v == doctest::Approx(0.5).epsilon(1e-12));
  ScheduleValues at = schedule_eval(s, 2000);
  CHECK(at.inv_tau == 2.0);
  CHECK(at.v == 1.0);
  ScheduleValues after = schedule_eval(s, 5000);
  CHECK(after.inv_tau == 2.0);
  CHECK(after.v == 1.0);
  CHECK(schedule_eval(s, 1).v == doctest::Approx(1.0 / 2000.0).epsilon(1e-12));
}

TEST_CASE("random streams are distinct, reproducible, and round-trip through disk") {
  RngStreams a = RngStreams::from_root(9);
  RngStreams b = RngStreams::from_root(9);
  CHECK(a.mask() == b.mask());
  CHECK(a.noise() != a.p2());
  std::string path = fresh_dir("f2x_rng_state") + ".txt";
  a.save(path, 17);
  std::vector<std::uint64_t> expect = {a.mask(), a.noise(), a.p2(),
                                       a.align(), a.dropout(), a.data()};
  RngStreams c = RngStreams::from_root(0);
  CHECK(c.load(path) == 17);
  CHECK(c.mask() == expect[0]);
  CHECK(c.noise() == expect[1]);
  CHECK(c.p2() == expect[2]);
  CHECK(c.align() == expect[3]);
  CHECK(c.dropout() == expect[4]);
  CHECK(c.data() == expect[5]);
  std::filesystem::remove(path);
}

TEST_CASE("supervised-only steps match a hand-written Adam loop exactly") {
  TrainDataset d = copy_dataset(6, 6, 3);
  model::Parameters trained = model::Parameters::init(micro_config(), 5);
  model::Parameters reference = model::Parameters::init(micro_config(), 5);

  TrainerConfig cfg;
  cfg.use_f1 = false;
  cfg.use_f2 = false;
  cfg.anneal_temperature = false;
  cfg.warmup_steps = 4;
  cfg.anneal_steps = 8;
  Adam opt;
  opt.init(trained);
  RngStreams rngs = RngStreams::from_root(1);

  // reference optimizer state
  std::vector<std::vector<double>> m, v;
  for (auto& [name, t] : reference.named) {
    m.emplace_back(t.size(), 0.0);
    v.emplace_back(t.size(), 0.0);
  }

  for (int step = 1; step <= 5; ++step) {
    train_step(trained, opt, d.src, d.tgt, d.mono, cfg, step, rngs);

    ag::Graph graph;
    model::Bound bound(reference, &graph);
    model::TranslationLoss tl = model::translation_loss(
        bound, model::TokenBatch::from_sentences(d.src),
        model::TokenBatch::from_sentences(d.tgt), 0.0, nullptr);
    Tensor mean = ag::scale(tl.loss, 1.0 / tl.token_count);
    graph.backward(mean);
    double lr = std::pow(8.0, -0.5) *
                std::min(std::pow(step, -0.5), step * std::pow(4.0, -1.5));
    double bc1 = 1.0 - std::pow(0.9, step);
    double bc2 = 1.0 - std::pow(0.98, step);
    for (std::size_t p = 0; p < reference.named.size(); ++p) {
      const std::vector<double>* g = bound.grad(reference.named[p].first);
      double* theta = reference.named[p].second.ptr();
      for (std::int64_t i = 0; i < reference.named[p].second.size(); ++i) {
        double gi = g ? (*g)[i] : 0.0;
        m[p][i] = 0.9 * m[p][i] + (1.0 - 0.9) * gi;
        v[p][i] = 0.98 * v[p][i] + (1.0 - 0.98) * gi * gi;
        theta[i] -= lr * (m[p][i] / bc1) / (std::sqrt(v[p][i] / bc2) + 1e-9);
      }
    }
  }
  for (std::size_t p = 0; p < trained.named.size(); ++p) {
    CHECK(*trained.named[p].second.data == *reference.named[p].second.data);
  }
}

TEST_CASE("the joint loss falls on a small copy task") {
  TrainDataset d = copy_dataset(24, 24, 11);
  model::Parameters params = model::Parameters::init(micro_config(), 2);
  TrainerConfig cfg;
  cfg.steps = 120;
  cfg.warmup_steps = 30;
  cfg.anneal_steps = 60;
  cfg.tokens_per_batch = 90;
  cfg.checkpoint_every = 120;
  cfg.log_every = 1;
  std::string out_dir = fresh_dir("f2x_train_fall");
  TrainOutcome outcome = run_training(params, cfg, d, out_dir);
  CHECK(outcome.steps_done == 120);

  std::ifstream in(out_dir + "/metrics.jsonl");
  double first = 0.0, last = 0.0;
  std::string line;
  bool have_first = false;
  int lines = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.at("step").get<int>() == lines + 1);
    CHECK(std::isfinite(j.at("total").get<double>()));
    if (!have_first) {
      first = j.at("total").get<double>();
      have_first = true;
    }
    last = j.at("total").get<double>();
    ++lines;
  }
  CHECK(lines == 120);
  CHECK(last < first);
  CHECK(std::filesystem::exists(out_dir + "/params.ckpt"));
  CHECK(std::filesystem::exists(out_dir + "/optim.ckpt"));
  std::filesystem::remove_all(out_dir);
}

TEST_CASE("identical seeds give byte-identical logs and checkpoints") {
  TrainDataset d = copy_dataset(12, 12, 4);
  TrainerConfig cfg;
  cfg.steps = 40;
  cfg.warmup_steps = 10;
  cfg.anneal_steps = 20;
  cfg.tokens_per_batch = 90;
  cfg.checkpoint_every = 40;
  cfg.log_every = 1;
  cfg.seed = 21;
  std::string dir_a = fresh_dir("f2x_train_rep_a");
  std::string dir_b = fresh_dir("f2x_train_rep_b");
  model::Parameters pa = model::Parameters::init(micro_config(0.1), 6);
  model::Parameters pb = model::Parameters::init(micro_config(0.1), 6);
  run_training(pa, cfg, d, dir_a);
  run_training(pb, cfg, d, dir_b);
  CHECK(slurp(dir_a + "/metrics.jsonl") == slurp(dir_b + "/metrics.jsonl"));
  CHECK(slurp(dir_a + "/params.ckpt") == slurp(dir_b + "/params.ckpt"));
  CHECK(slurp(dir_a + "/optim.ckpt") == slurp(dir_b + "/optim.ckpt"));
  std::filesystem::remove_all(dir_a);
  std::filesystem::remove_all(dir_b);
}

TEST_CASE("a resumed run reproduces the uninterrupted one bit for bit") {
  TrainDataset d = copy_dataset(12, 12, 4);
  TrainerConfig cfg;
  cfg.warmup_steps = 10;
  cfg.anneal_steps = 20;
  cfg.tokens_per_batch = 90;
  cfg.checkpoint_every = 10;
  cfg.log_every = 1;
  cfg.seed = 13;

  std::string dir_full = fresh_dir("f2x_train_full");
  cfg.steps = 30;
  model::Parameters p_full = model::Parameters::init(micro_config(0.1), 6);
  run_training(p_full, cfg, d, dir_full);

  std::string dir_cut = fresh_dir("f2x_train_cut");
  model::Parameters p_cut = model::Parameters::init(micro_config(0.1), 6);
  cfg.steps = 20;
  run_training(p_cut, cfg, d, dir_cut);
  cfg.steps = 30;
  model::Parameters p_resume = model::Parameters::init(micro_config(0.1), 999);
  TrainOutcome resumed = run_training(p_resume, cfg, d, dir_cut);
  CHECK(resumed.steps_done == 30);

  CHECK(slurp(dir_cut + "/params.ckpt") == slurp(dir_full + "/params.ckpt"));
  CHECK(slurp(dir_cut + "/optim.ckpt") == slurp(dir_full + "/optim.ckpt"));
  CHECK(slurp(dir_cut + "/metrics.jsonl") == slurp(dir_full + "/metrics.jsonl"));
  std::filesystem::remove_all(dir_full);
  std::filesystem::remove_all(dir_cut);
}

TEST_CASE("ablation switches all produce finite steps") {
  TrainDataset d = copy_dataset(8, 8, 7);
  auto run_variant = [&](auto&& tweak) {
    model::Parameters params = model::Parameters::init(micro_config(), 4);
    TrainerConfig cfg;
    cfg.warmup_steps = 4;
    cfg.anneal_steps = 8;
    tweak(cfg);
    Adam opt;
    opt.init(params);
    RngStreams rngs = RngStreams::from_root(3);
    StepResult r = train_step(params, opt, d.src, d.tgt, d.mono, cfg, 3, rngs);
    CHECK(std::isfinite(r.breakdown.total.item()));
    return r;
  };
  StepResult no_f2 = run_variant([](TrainerConfig& c) { c.use_f2 = false; });
  CHECK(no_f2.breakdown.f2 == 0.0);
  StepResult prior = run_variant([](TrainerConfig& c) {
    c.use_f1 = false;
    c.use_prior_alignment = true;
  });
  CHECK(prior.breakdown.f1 == 0.0);
  CHECK(prior.breakdown.f2 > 0.0);
  StepResult par_only = run_variant([&](TrainerConfig& c) { c.parallel_only = true; });
  CHECK(par_only.breakdown.f1 > 0.0);
  StepResult mixup = run_variant([](TrainerConfig& c) { c.use_mixup = true; });
  CHECK(mixup.breakdown.f1 == 0.0);
  CHECK(mixup.breakdown.f2 > 0.0);
  StepResult bare = run_variant([](TrainerConfig& c) {
    c.alignment_dropout = 0.0;
    c.blend_predictions = false;
    c.anneal_temperature = false;
  });
  CHECK(bare.breakdown.f2 > 0.0);
}

TEST_CASE("parallel-only training substitutes targets for mono sentences") {
  TrainDataset d = copy_dataset(8, 0, 5);
  model::Parameters params = model::Parameters::init(micro_config(), 4);
  TrainerConfig cfg;
  cfg.steps = 3;
  cfg.warmup_steps = 2;
  cfg.anneal_steps = 4;
  cfg.tokens_per_batch = 90;
  cfg.checkpoint_every = 3;
  cfg.log_every = 1;
  cfg.parallel_only = true;
  std::string out_dir = fresh_dir("f2x_train_par");
  TrainOutcome outcome = run_training(params, cfg, d, out_dir);
  CHECK(outcome.steps_done == 3);
  CHECK(std::isfinite(outcome.last_total));
  std::filesystem::remove_all(out_dir);
}

TEST_CASE("a corrupted parameter set aborts with the offending term named") {
  TrainDataset d = copy_dataset(4, 4, 8);
  model::Parameters params = model::Parameters::init(micro_config(), 4);
  (*params.at("out.w").data)[0] = std::nan("");
  Adam opt;
  opt.init(params);
  TrainerConfig cfg;
  RngStreams rngs = RngStreams::from_root(2);
  CHECK_THROWS_WITH_AS(train_step(params, opt, d.src, d.tgt, d.mono, cfg, 1, rngs),
                       doctest::Contains("non-finite"), ag::TensorError);
}

TEST_CASE("gradients of the joint loss match finite differences") {
  TrainDataset d = copy_dataset(3, 3, 6);
  model::Parameters params = model::Parameters::init(micro_config(), 9);
  // The attention-derived alignments and prediction blends are stop-gradient
  // quantities; finite differences only agree when they do not move with the
  // parameters, so the check pins them at uniform alignments and pure labels.
  obj::LossConfig cfg;
  cfg.inv_tau = 0.0;
  cfg.v = 0.0;

  std::vector<std::string> names = {"embed", "out.w", "enc.0.self.wq", "dec.0.cross.wv"};
  auto f = [&](std::vector<std::vector<double>*>* grads) {
    RngStreams rngs = RngStreams::from_root(42);
    obj::LossRngs lr;
    lr.mask = &rngs.mask;
    lr.noise = &rngs.noise;
    lr.p2 = &rngs.p2;
    lr.align = &rngs.align;
    ag::Graph graph;
    model::Bound bound(params, &graph);
    obj::LossBreakdown b = obj::total_loss(bound, d.src, d.tgt, d.mono, cfg, lr);
    double value = b.total.item();
    if (grads) {
      graph.backward(b.total);
      for (std::size_t i = 0; i < names.size(); ++i) {
        const std::vector<double>* g = bound.grad(names[i]);
        if (g) {
          *(*grads)[i] = *g;
        } else {
          (*grads)[i]->assign(params.at(names[i]).size(), 0.0);
        }
      }
    }
    return value;
  };
  std::vector<std::pair<std::string, Tensor*>> checked;
  for (const auto& n : names) checked.emplace_back(n, &params.at(n));
  ag::GradCheckReport report = ag::gradient_check(f, checked, 1e-6, 1e-5, 30, 77);
  INFO(report.worst.name, "[", report.worst.index, "] analytic ", report.worst.analytic,
       " numeric ", report.worst.numeric);
  CHECK(report.pass);
}

TEST_CASE("trainer configuration is validated up front") {
  TrainerConfig cfg;
  cfg.steps = 0;
  CHECK_THROWS(cfg.validate());
  cfg = TrainerConfig{};
  cfg.use_prior_alignment = true;  // together with the default use_f1
  CHECK_THROWS(cfg.validate());
  cfg.use_f1 = false;
  CHECK_NOTHROW(cfg.validate());
}
