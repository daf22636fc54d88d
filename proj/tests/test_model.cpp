#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "f2x/model.hpp"

using namespace f2x;
using namespace f2x::model;
using ag::Graph;
using ag::Tensor;

namespace {

ModelConfig micro_config(double dropout = 0.0, double eps = 0.1) {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 8;
  c.num_heads = 2;
  c.num_encoder_layers = 1;
  c.num_decoder_layers = 1;
  c.feedforward_dim = 16;
  c.dropout_rate = dropout;
  c.label_smoothing = eps;
  c.max_positions = 32;
  return c;
}

TokenBatch batch(std::vector<std::vector<int>> sents) {
  return TokenBatch::from_sentences(sents);
}

// Length-penalized model score of an output sequence (eos included).
double sequence_score(Parameters& params, const std::vector<int>& src, std::vector<int> out,
                      double alpha) {
  out.push_back(kEos);
  ModelConfig saved = params.config;
  params.config.label_smoothing = 0.0;
  Bound bound(params, nullptr);
  TranslationLoss tl =
      translation_loss(bound, batch({src}), batch({out}), 0.0, nullptr);
  params.config = saved;
  const double logp = -tl.loss.item();
  return logp / std::pow((5.0 + out.size()) / 6.0, alpha);
}

}  // namespace

TEST_CASE("parameter initialization is deterministic per seed") {
  Parameters a = Parameters::init(micro_config(), 7);
  Parameters b = Parameters::init(micro_config(), 7);
  Parameters c = Parameters::init(micro_config(), 8);
  REQUIRE(a.named.size() == b.named.size());
  for (std::size_t i = 0; i < a.named.size(); ++i) {
    CHECK(a.named[i].first == b.named[i].first);
    CHECK(*a.named[i].second.data == *b.named[i].second.data);
  }
  CHECK(*a.at("embed").data != *c.at("embed").data);
  CHECK(a.total_size() > 0);
}

TEST_CASE("zero output projection yields a uniform predictive distribution") {
  Parameters p = Parameters::init(micro_config(), 1);
  std::fill(p.at("out.w").ptr(), p.at("out.w").ptr() + p.at("out.w").size(), 0.0);
  Bound bound(p, nullptr);
  TranslationLoss tl = translation_loss(bound, batch({{5, 6, 7}}), batch({{8, 9, kEos}}), 0.0,
                                        nullptr);
  const double u = 1.0 / p.config.vocab_size;
  for (double pr : tl.predictions) CHECK(pr == doctest::Approx(u).epsilon(1e-12));
}

TEST_CASE("token and embedding inputs produce identical logits") {
  Parameters p = Parameters::init(micro_config(), 2);
  Bound bound(p, nullptr);
  TokenBatch x = batch({{5, 6, 7, 8}, {9, 10}});
  TokenBatch y = batch({{6, 5, kEos}, {7, kEos}});

  ForwardRecord by_tokens = forward_teacher_forced(bound, SourceInput::from_tokens(x),
                                                   DecoderInput::from_targets(y), nullptr);

  Tensor xe = ag::embedding_gather(bound.at("embed"), x.ids, {x.B, x.L});
  std::vector<int> z_ids(static_cast<std::size_t>(y.B) * y.L, kPad);
  for (int b = 0; b < y.B; ++b) {
    z_ids[static_cast<std::size_t>(b) * y.L] = kBos;
    for (int j = 1; j < y.lens[b]; ++j) z_ids[static_cast<std::size_t>(b) * y.L + j] = y.at(b, j - 1);
  }
  Tensor ze = ag::embedding_gather(bound.at("embed"), z_ids, {y.B, y.L});
  SourceInput se = SourceInput::from_embeddings(xe, x.lens);
  ForwardRecord by_embed = forward_teacher_forced(bound, se,
                                                  DecoderInput::from_embeddings(ze, y.lens),
                                                  nullptr);
  REQUIRE(by_tokens.logits.size() == by_embed.logits.size());
  for (std::int64_t i = 0; i < by_tokens.logits.size(); ++i) {
    CHECK(by_tokens.logits.ptr()[i] == doctest::Approx(by_embed.logits.ptr()[i]).epsilon(1e-12));
  }
}

TEST_CASE("cross-attention rows are stochastic over valid source positions") {
  Parameters p = Parameters::init(micro_config(), 3);
  Bound bound(p, nullptr);
  TokenBatch x = batch({{5, 6, 7}, {8, 9, 10, 11}});
  TokenBatch y = batch({{6, kEos}, {7, 8, kEos}});
  ForwardRecord rec = forward_teacher_forced(bound, SourceInput::from_tokens(x),
                                             DecoderInput::from_targets(y), nullptr);
  REQUIRE(rec.cross_probs.size() == 1);
  for (const auto& head : rec.cross_probs[0]) {
    for (int b = 0; b < rec.B; ++b) {
      for (int j = 0; j < rec.J; ++j) {
        double sum = 0.0, invalid_mass = 0.0;
        for (int i = 0; i < rec.I; ++i) {
          const double v = head[(static_cast<std::size_t>(b) * rec.J + j) * rec.I + i];
          sum += v;
          if (!rec.src_valid[static_cast<std::size_t>(b) * rec.I + i]) invalid_mass += v;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(invalid_mass == doctest::Approx(0.0).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("alignment at unit reciprocal temperature averages the attention heads") {
  Parameters p = Parameters::init(micro_config(), 4);
  Bound bound(p, nullptr);
  TokenBatch x = batch({{5, 6, 7, 8}});  // no padding: probs and alignment agree
  TokenBatch y = batch({{6, 7, kEos}});
  ForwardRecord rec = forward_teacher_forced(bound, SourceInput::from_tokens(x),
                                             DecoderInput::from_targets(y), nullptr);
  std::vector<AlignmentMatrix> a = extract_alignment(rec, 1.0);
  REQUIRE(a.size() == 1);
  const auto& heads = rec.cross_probs[0];
  for (int j = 0; j < rec.J; ++j) {
    for (int i = 0; i < rec.I; ++i) {
      double mean = 0.0;
      for (const auto& h : heads) mean += h[static_cast<std::size_t>(j) * rec.I + i];
      mean /= heads.size();
      CHECK(a[0].at(j, i) == doctest::Approx(mean).epsilon(1e-12));
    }
  }
}

TEST_CASE("alignment at zero reciprocal temperature is uniform over valid columns") {
  Parameters p = Parameters::init(micro_config(), 5);
  Bound bound(p, nullptr);
  TokenBatch x = batch({{5, 6, 7}, {8, 9, 10, 11, 5}});
  TokenBatch y = batch({{6, 7, kEos}, {8, kEos}});
  ForwardRecord rec = forward_teacher_forced(bound, SourceInput::from_tokens(x),
                                             DecoderInput::from_targets(y), nullptr);
  std::vector<AlignmentMatrix> a = extract_alignment(rec, 0.0);
  for (int b = 0; b < rec.B; ++b) {
    for (int j = 0; j < rec.J; ++j) {
      for (int i = 0; i < rec.I; ++i) {
        const double expect =
            (j < y.lens[b] && i < x.lens[b]) ? 1.0 / x.lens[b] : 0.0;
        CHECK(a[b].at(j, i) == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("smoothed label rows put 0.9 on the token and 0.025 elsewhere for five classes") {
  std::vector<double> rows = label_rows({2, 0}, 5, 0.1);
  REQUIRE(rows.size() == 10);
  for (int v = 0; v < 5; ++v) {
    CHECK(rows[v] == doctest::Approx(v == 2 ? 0.9 : 0.025));
    CHECK(rows[5 + v] == doctest::Approx(v == 0 ? 0.9 : 0.025));
  }
  CHECK_THROWS_AS(label_rows({5}, 5, 0.1), ag::TensorError);
  CHECK_THROWS_AS(label_rows({1}, 5, 1.0), ag::TensorError);
}

TEST_CASE("zero smoothing reduces the loss to summed negative log-likelihood") {
  Parameters p = Parameters::init(micro_config(0.0, 0.0), 6);
  Bound bound(p, nullptr);
  TokenBatch x = batch({{5, 6, 7}});
  TokenBatch y = batch({{8, 9, kEos}});
  TranslationLoss tl = translation_loss(bound, x, y, 0.0, nullptr);
  const int V = p.config.vocab_size;
  double nll = 0.0;
  const double* logits = tl.record.logits.ptr();
  for (int j = 0; j < y.lens[0]; ++j) {
    const double* row = logits + static_cast<std::size_t>(j) * V;
    double mx = row[0];
    for (int v = 1; v < V; ++v) mx = std::max(mx, row[v]);
    double sum = 0.0;
    for (int v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
    nll -= row[y.at(0, j)] - mx - std::log(sum);
  }
  CHECK(tl.loss.item() == doctest::Approx(nll).epsilon(1e-10));
  CHECK(tl.token_count == 3);
}

TEST_CASE("padded batch loss equals the sum of single-sentence losses") {
  Parameters p = Parameters::init(micro_config(), 7);
  Bound bound(p, nullptr);
  std::vector<int> x1{5, 6, 7, 8, 9}, y1{6, 5, 8, kEos};
  std::vector<int> x2{10, 11}, y2{11, kEos};
  const double joint =
      translation_loss(bound, batch({x1, x2}), batch({y1, y2}), 0.0, nullptr).loss.item();
  const double solo1 = translation_loss(bound, batch({x1}), batch({y1}), 0.0, nullptr).loss.item();
  const double solo2 = translation_loss(bound, batch({x2}), batch({y2}), 0.0, nullptr).loss.item();
  CHECK(joint == doctest::Approx(solo1 + solo2).epsilon(1e-12));
}

TEST_CASE("translation loss gradients match finite differences") {
  Parameters p = Parameters::init(micro_config(), 8);
  TokenBatch x = batch({{5, 6, 7}, {8, 9}});
  TokenBatch y = batch({{6, 7, kEos}, {9, kEos}});

  std::vector<std::pair<std::string, Tensor*>> checked;
  for (const char* name : {"embed", "enc.0.self.wq", "dec.0.cross.wv", "dec.0.ffn_ln.gain", "out.w"}) {
    checked.emplace_back(name, &p.at(name));
  }
  auto f = [&](std::vector<std::vector<double>*>* grads) {
    Graph g;
    Bound bound(p, &g);
    TranslationLoss tl = translation_loss(bound, x, y, 1.0, nullptr);
    const double value = tl.loss.item();
    if (grads) {
      g.backward(tl.loss);
      for (std::size_t i = 0; i < checked.size(); ++i) {
        const std::vector<double>* gr = bound.grad(checked[i].first);
        std::vector<double>& dst = *(*grads)[i];
        if (gr) {
          dst = *gr;
        } else {
          dst.assign(checked[i].second->size(), 0.0);
        }
      }
    }
    return value;
  };
  ag::GradCheckReport rep = ag::gradient_check(f, checked, 1e-5, 1e-5, 40, 99);
  INFO("max rel err ", rep.max_rel_err);
  CHECK(rep.pass);
}

TEST_CASE("greedy decode is deterministic and avoids reserved tokens") {
  Parameters p = Parameters::init(micro_config(), 9);
  DecodeConfig cfg;
  cfg.beam_size = 1;
  cfg.max_len = 10;
  std::vector<int> a = decode(p, {5, 6, 7}, cfg);
  std::vector<int> b = decode(p, {5, 6, 7}, cfg);
  CHECK(a == b);
  CHECK(static_cast<int>(a.size()) <= 10);
  for (int t : a) {
    CHECK(t != kPad);
    CHECK(t != kBos);
    CHECK(t != kEos);
  }
}

TEST_CASE("beam search scores at least as well as greedy") {
  Parameters p = Parameters::init(micro_config(), 10);
  std::vector<int> src{5, 6, 7, 8};
  DecodeConfig greedy;
  greedy.beam_size = 1;
  greedy.max_len = 8;
  DecodeConfig beam;
  beam.beam_size = 4;
  beam.max_len = 8;
  std::vector<int> g = decode(p, src, greedy);
  std::vector<int> b = decode(p, src, beam);
  const double gs = sequence_score(p, src, g, beam.length_penalty);
  const double bs = sequence_score(p, src, b, beam.length_penalty);
  CHECK(bs >= gs - 1e-9);
  CHECK_THROWS_AS(decode(p, src, DecodeConfig{0, 0.6, 8}), ag::TensorError);
  CHECK_THROWS_AS(decode(p, {}, beam), ag::TensorError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const std::string path = "test_model_ckpt.bin";
  Parameters p = Parameters::init(micro_config(), 11);
  save_checkpoint(p, path);
  Parameters q = Parameters::init(micro_config(), 12);
  load_checkpoint(q, path);
  for (std::size_t i = 0; i < p.named.size(); ++i) {
    CHECK(p.named[i].first == q.named[i].first);
    CHECK(*p.named[i].second.data == *q.named[i].second.data);
  }

  ModelConfig other = micro_config();
  other.d_model = 16;
  other.feedforward_dim = 32;
  Parameters r = Parameters::init(other, 13);
  CHECK_THROWS_AS(load_checkpoint(r, path), ag::TensorError);

  std::FILE* f = std::fopen(path.c_str(), "r+b");
  REQUIRE(f);
  std::fputc('X', f);
  std::fclose(f);
  CHECK_THROWS_AS(load_checkpoint(q, path), ag::TensorError);
  std::filesystem::remove(path);
}

TEST_CASE("dropout forward is reproducible for a fixed seed") {
  Parameters p = Parameters::init(micro_config(0.1), 14);
  Bound bound(p, nullptr);
  TokenBatch x = batch({{5, 6, 7, 8}});
  TokenBatch y = batch({{6, 7, kEos}});
  std::mt19937_64 r1(42), r2(42), r3(43);
  const double a = translation_loss(bound, x, y, 0.0, &r1).loss.item();
  const double b = translation_loss(bound, x, y, 0.0, &r2).loss.item();
  const double c = translation_loss(bound, x, y, 0.0, &r3).loss.item();
  CHECK(a == b);
  CHECK(a != c);
}
