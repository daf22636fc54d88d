#include "f2x/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace f2x::model {

using ag::Graph;
using ag::Shape;
using ag::Tensor;
using ag::TensorError;

void ModelConfig::validate() const {
  if (vocab_size <= kNumSpecials) throw TensorError("config: vocab_size too small");
  if (d_model <= 0 || num_heads <= 0 || d_model % num_heads != 0) {
    throw TensorError("config: d_model must be divisible by num_heads");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw TensorError("config: dropout_rate in [0,1)");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw TensorError("config: label_smoothing in [0,1)");
  }
  if (max_positions <= 1) throw TensorError("config: max_positions too small");
}

// ---- parameters ----

namespace {

Tensor xavier(int fan_in, int fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> d(-limit, limit);
  std::vector<double> v(static_cast<std::size_t>(fan_in) * fan_out);
  for (double& x : v) x = d(rng);
  return Tensor::from({fan_in, fan_out}, std::move(v));
}

Tensor gauss(Shape s, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  std::vector<double> v(ag::numel(s));
  for (double& x : v) x = d(rng);
  return Tensor::from(std::move(s), std::move(v));
}

void add_attention_params(Parameters& p, const std::string& prefix, int d,
                          std::mt19937_64& rng) {
  for (const char* w : {"wq", "wk", "wv", "wo"}) {
    p.named.emplace_back(prefix + "." + w, xavier(d, d, rng));
  }
  for (const char* b : {"bq", "bk", "bv", "bo"}) {
    p.named.emplace_back(prefix + "." + b, Tensor::zeros({d}));
  }
}

void add_ln_params(Parameters& p, const std::string& prefix, int d) {
  p.named.emplace_back(prefix + ".gain", Tensor::full({d}, 1.0));
  p.named.emplace_back(prefix + ".bias", Tensor::zeros({d}));
}

void add_ffn_params(Parameters& p, const std::string& prefix, int d, int ff,
                    std::mt19937_64& rng) {
  p.named.emplace_back(prefix + ".w1", xavier(d, ff, rng));
  p.named.emplace_back(prefix + ".b1", Tensor::zeros({ff}));
  p.named.emplace_back(prefix + ".w2", xavier(ff, d, rng));
  p.named.emplace_back(prefix + ".b2", Tensor::zeros({d}));
}

}  // namespace

Parameters Parameters::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Parameters p;
  p.config = cfg;
  p.named.emplace_back("embed", gauss({cfg.vocab_size, cfg.d_model},
                                      1.0 / std::sqrt(static_cast<double>(cfg.d_model)), rng));
  for (int l = 0; l < cfg.num_encoder_layers; ++l) {
    const std::string base = "enc." + std::to_string(l);
    add_attention_params(p, base + ".self", cfg.d_model, rng);
    add_ln_params(p, base + ".self_ln", cfg.d_model);
    add_ffn_params(p, base + ".ffn", cfg.d_model, cfg.feedforward_dim, rng);
    add_ln_params(p, base + ".ffn_ln", cfg.d_model);
  }
  for (int l = 0; l < cfg.num_decoder_layers; ++l) {
    const std::string base = "dec." + std::to_string(l);
    add_attention_params(p, base + ".self", cfg.d_model, rng);
    add_ln_params(p, base + ".self_ln", cfg.d_model);
    add_attention_params(p, base + ".cross", cfg.d_model, rng);
    add_ln_params(p, base + ".cross_ln", cfg.d_model);
    add_ffn_params(p, base + ".ffn", cfg.d_model, cfg.feedforward_dim, rng);
    add_ln_params(p, base + ".ffn_ln", cfg.d_model);
  }
  p.named.emplace_back("out.w", xavier(cfg.d_model, cfg.vocab_size, rng));
  p.named.emplace_back("out.b", Tensor::zeros({cfg.vocab_size}));
  return p;
}

ag::Tensor& Parameters::at(const std::string& name) {
  for (auto& [n, t] : named) {
    if (n == name) return t;
  }
  throw TensorError("unknown parameter: " + name);
}

const ag::Tensor& Parameters::at(const std::string& name) const {
  for (auto& [n, t] : named) {
    if (n == name) return t;
  }
  throw TensorError("unknown parameter: " + name);
}

bool Parameters::has(const std::string& name) const {
  for (auto& [n, t] : named) {
    if (n == name) return true;
  }
  return false;
}

std::int64_t Parameters::total_size() const {
  std::int64_t n = 0;
  for (auto& [name, t] : named) n += t.size();
  return n;
}

Bound::Bound(Parameters& p, Graph* g) : params(&p), graph(g) {
  leaves.reserve(p.named.size());
  for (auto& [name, t] : p.named) {
    leaves.push_back(g ? g->leaf(t) : t);
  }
}

const Tensor& Bound::at(const std::string& name) const {
  for (std::size_t i = 0; i < params->named.size(); ++i) {
    if (params->named[i].first == name) return leaves[i];
  }
  throw TensorError("unknown parameter: " + name);
}

const std::vector<double>* Bound::grad(const std::string& name) const {
  if (!graph) return nullptr;
  return graph->grad(at(name).node);
}

// ---- batches ----

TokenBatch TokenBatch::from_sentences(const std::vector<std::vector<int>>& sents) {
  TokenBatch b;
  b.B = static_cast<int>(sents.size());
  if (b.B == 0) throw TensorError("empty batch");
  b.L = 0;
  for (const auto& s : sents) {
    if (s.empty()) throw TensorError("empty sentence in batch");
    b.L = std::max(b.L, static_cast<int>(s.size()));
  }
  b.ids.assign(static_cast<std::size_t>(b.B) * b.L, kPad);
  for (int i = 0; i < b.B; ++i) {
    b.lens.push_back(static_cast<int>(sents[i].size()));
    std::copy(sents[i].begin(), sents[i].end(), b.ids.begin() + static_cast<std::size_t>(i) * b.L);
  }
  return b;
}

DecoderInput DecoderInput::from_targets(TokenBatch y) {
  DecoderInput d;
  d.lens = y.lens;
  d.targets = std::move(y);
  return d;
}

DecoderInput DecoderInput::from_embeddings(Tensor e, std::vector<int> lens) {
  DecoderInput d;
  d.embeddings = std::move(e);
  d.lens = std::move(lens);
  return d;
}

SourceInput SourceInput::from_tokens(TokenBatch x) {
  SourceInput s;
  s.lens = x.lens;
  s.valid.assign(static_cast<std::size_t>(x.B) * x.L, 0);
  for (int b = 0; b < x.B; ++b) {
    for (int i = 0; i < x.L; ++i) {
      s.valid[static_cast<std::size_t>(b) * x.L + i] = x.at(b, i) != kPad;
    }
  }
  s.tokens = std::move(x);
  return s;
}

SourceInput SourceInput::from_embeddings(Tensor e, std::vector<int> lens) {
  SourceInput s;
  const int B = e.shape[0], L = e.shape[1];
  s.valid.assign(static_cast<std::size_t>(B) * L, 0);
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < L; ++i) {
      s.valid[static_cast<std::size_t>(b) * L + i] = i < lens[b];
    }
  }
  s.embeddings = std::move(e);
  s.lens = std::move(lens);
  return s;
}

// ---- forward ----

namespace {

constexpr double kMaskValue = -1e9;

Tensor positional_table(int B, int L, int d) {
  std::vector<double> v(static_cast<std::size_t>(B) * L * d);
  for (int p = 0; p < L; ++p) {
    for (int i = 0; i < d; i += 2) {
      const double angle = p / std::pow(10000.0, static_cast<double>(i) / d);
      v[static_cast<std::size_t>(p) * d + i] = std::sin(angle);
      if (i + 1 < d) v[static_cast<std::size_t>(p) * d + i + 1] = std::cos(angle);
    }
  }
  for (int b = 1; b < B; ++b) {
    std::copy(v.begin(), v.begin() + static_cast<std::size_t>(L) * d,
              v.begin() + static_cast<std::size_t>(b) * L * d);
  }
  return Tensor::from({B, L, d}, std::move(v));
}

Tensor dropout_maybe(const Tensor& x, double rate, std::mt19937_64* rng) {
  if (!rng || rate <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<double> mask(x.size());
  const double inv = 1.0 / (1.0 - rate);
  for (double& m : mask) m = keep(*rng) ? inv : 0.0;
  return dropout_with_given_mask(x, Tensor::from(x.shape, std::move(mask)));
}

struct AttentionOut {
  Tensor value;
  // per head, raw scaled scores and softmax probabilities (B*Lq*Lk copies)
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<double>> probs;
};

AttentionOut multihead_attention(const Bound& bound, const std::string& prefix, const Tensor& q_in,
                                 const Tensor& kv_in, const Tensor& mask, bool record) {
  const ModelConfig& cfg = bound.params->config;
  const int d = cfg.d_model;
  const int H = cfg.num_heads;
  const int dk = d / H;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  Tensor q = add(matmul(q_in, bound.at(prefix + ".wq")), bound.at(prefix + ".bq"));
  Tensor k = add(matmul(kv_in, bound.at(prefix + ".wk")), bound.at(prefix + ".bk"));
  Tensor v = add(matmul(kv_in, bound.at(prefix + ".wv")), bound.at(prefix + ".bv"));

  AttentionOut out;
  std::vector<Tensor> heads;
  for (int h = 0; h < H; ++h) {
    Tensor qh = slice_last(q, h * dk, dk);
    Tensor kh = slice_last(k, h * dk, dk);
    Tensor vh = slice_last(v, h * dk, dk);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
    if (record) out.scores.push_back(*scores.data);
    Tensor probs = softmax_last(add(scores, mask));
    if (record) out.probs.push_back(*probs.data);
    heads.push_back(matmul(probs, vh));
  }
  out.value = add(matmul(concat_last(heads), bound.at(prefix + ".wo")), bound.at(prefix + ".bo"));
  return out;
}

Tensor sublayer_norm(const Bound& bound, const std::string& prefix, const Tensor& residual,
                     const Tensor& sub, double dropout, std::mt19937_64* rng) {
  Tensor y = add(residual, dropout_maybe(sub, dropout, rng));
  return layer_norm(y, bound.at(prefix + ".gain"), bound.at(prefix + ".bias"));
}

Tensor ffn_block(const Bound& bound, const std::string& prefix, const Tensor& x) {
  Tensor h = relu(add(matmul(x, bound.at(prefix + ".w1")), bound.at(prefix + ".b1")));
  return add(matmul(h, bound.at(prefix + ".w2")), bound.at(prefix + ".b2"));
}

Tensor embed_and_position(const Bound& bound, const Tensor& raw_embeddings, double dropout,
                          std::mt19937_64* rng) {
  const ModelConfig& cfg = bound.params->config;
  const int B = raw_embeddings.shape[0];
  const int L = raw_embeddings.shape[1];
  Tensor x = scale(raw_embeddings, std::sqrt(static_cast<double>(cfg.d_model)));
  x = add(x, positional_table(B, L, cfg.d_model));
  return dropout_maybe(x, dropout, rng);
}

}  // namespace

ForwardRecord forward_teacher_forced(const Bound& bound, const SourceInput& src,
                                     const DecoderInput& dec, std::mt19937_64* dropout_rng) {
  const ModelConfig& cfg = bound.params->config;
  const double drop = cfg.dropout_rate;

  // --- resolve source ---
  int B, I;
  Tensor src_raw;
  if (src.embeddings) {
    src_raw = *src.embeddings;
    B = src_raw.shape[0];
    I = src_raw.shape[1];
  } else if (src.tokens) {
    B = src.tokens->B;
    I = src.tokens->L;
    src_raw = embedding_gather(bound.at("embed"), src.tokens->ids, {B, I});
  } else {
    throw TensorError("forward: source input is empty");
  }
  if (I > cfg.max_positions) throw TensorError("forward: source length exceeds max_positions");
  for (int len : src.lens) {
    if (len <= 0) throw TensorError("forward: empty source sentence");
  }

  // --- resolve decoder input z ---
  int J;
  Tensor z_raw;
  std::vector<int> tgt_lens = dec.lens;
  if (dec.embeddings) {
    z_raw = *dec.embeddings;
    J = z_raw.shape[1];
  } else if (dec.targets) {
    const TokenBatch& y = *dec.targets;
    J = y.L;
    std::vector<int> z_ids(static_cast<std::size_t>(B) * J, kPad);
    for (int b = 0; b < B; ++b) {
      z_ids[static_cast<std::size_t>(b) * J] = kBos;
      for (int j = 1; j < y.lens[b]; ++j) {
        z_ids[static_cast<std::size_t>(b) * J + j] = y.at(b, j - 1);
      }
    }
    z_raw = embedding_gather(bound.at("embed"), z_ids, {B, J});
  } else {
    throw TensorError("forward: decoder input is empty");
  }
  if (J > cfg.max_positions) throw TensorError("forward: target length exceeds max_positions");
  for (int len : tgt_lens) {
    if (len <= 0) throw TensorError("forward: empty target sentence");
  }

  // --- masks ---
  std::vector<double> enc_mask_v(static_cast<std::size_t>(B) * I * I, 0.0);
  std::vector<double> cross_mask_v(static_cast<std::size_t>(B) * J * I, 0.0);
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < I; ++i) {
      if (src.valid[static_cast<std::size_t>(b) * I + i]) continue;
      for (int q = 0; q < I; ++q) enc_mask_v[(static_cast<std::size_t>(b) * I + q) * I + i] = kMaskValue;
      for (int q = 0; q < J; ++q) cross_mask_v[(static_cast<std::size_t>(b) * J + q) * I + i] = kMaskValue;
    }
  }
  std::vector<double> causal_v(static_cast<std::size_t>(B) * J * J, 0.0);
  for (int b = 0; b < B; ++b) {
    for (int q = 0; q < J; ++q) {
      for (int k = q + 1; k < J; ++k) {
        causal_v[(static_cast<std::size_t>(b) * J + q) * J + k] = kMaskValue;
      }
    }
  }
  Tensor enc_mask = Tensor::from({B, I, I}, std::move(enc_mask_v));
  Tensor cross_mask = Tensor::from({B, J, I}, std::move(cross_mask_v));
  Tensor causal_mask = Tensor::from({B, J, J}, std::move(causal_v));

  // --- encoder ---
  Tensor x = embed_and_position(bound, src_raw, drop, dropout_rng);
  for (int l = 0; l < cfg.num_encoder_layers; ++l) {
    const std::string base = "enc." + std::to_string(l);
    AttentionOut att = multihead_attention(bound, base + ".self", x, x, enc_mask, false);
    x = sublayer_norm(bound, base + ".self_ln", x, att.value, drop, dropout_rng);
    Tensor f = ffn_block(bound, base + ".ffn", x);
    x = sublayer_norm(bound, base + ".ffn_ln", x, f, drop, dropout_rng);
  }
  Tensor enc_out = x;

  // --- decoder ---
  ForwardRecord rec;
  rec.B = B;
  rec.J = J;
  rec.I = I;
  rec.src_lens = src.lens;
  rec.tgt_lens = tgt_lens;
  rec.src_valid = src.valid;

  Tensor z = embed_and_position(bound, z_raw, drop, dropout_rng);
  for (int l = 0; l < cfg.num_decoder_layers; ++l) {
    const std::string base = "dec." + std::to_string(l);
    AttentionOut self_att = multihead_attention(bound, base + ".self", z, z, causal_mask, false);
    z = sublayer_norm(bound, base + ".self_ln", z, self_att.value, drop, dropout_rng);
    AttentionOut cross = multihead_attention(bound, base + ".cross", z, enc_out, cross_mask, true);
    rec.cross_scores.push_back(std::move(cross.scores));
    rec.cross_probs.push_back(std::move(cross.probs));
    z = sublayer_norm(bound, base + ".cross_ln", z, cross.value, drop, dropout_rng);
    Tensor f = ffn_block(bound, base + ".ffn", z);
    z = sublayer_norm(bound, base + ".ffn_ln", z, f, drop, dropout_rng);
  }
  rec.logits = add(matmul(z, bound.at("out.w")), bound.at("out.b"));
  return rec;
}

std::vector<double> label_rows(const std::vector<int>& tokens, int vocab_size, double eps) {
  if (eps < 0.0 || eps >= 1.0) throw TensorError("label smoothing must be in [0,1)");
  std::vector<double> rows(tokens.size() * static_cast<std::size_t>(vocab_size),
                           eps / (vocab_size - 1));
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    const int t = tokens[j];
    if (t < 0 || t >= vocab_size) throw TensorError("label token out of range");
    rows[j * vocab_size + t] = 1.0 - eps;
  }
  return rows;
}

std::vector<AlignmentMatrix> extract_alignment(const ForwardRecord& record, double inv_tau) {
  if (record.cross_scores.empty()) throw TensorError("extract_alignment: no decoder layers recorded");
  if (inv_tau < 0.0) throw TensorError("extract_alignment: negative reciprocal temperature");
  const int B = record.B, J = record.J, I = record.I;
  const int n_mats = static_cast<int>(record.cross_scores.size() * record.cross_scores[0].size());
  std::vector<AlignmentMatrix> out(B);
  for (int b = 0; b < B; ++b) {
    out[b].rows = J;
    out[b].cols = I;
    out[b].a.assign(static_cast<std::size_t>(J) * I, 0.0);
  }
  std::vector<double> row(I);
  for (const auto& layer : record.cross_scores) {
    for (const auto& head : layer) {
      for (int b = 0; b < B; ++b) {
        const char* valid = record.src_valid.data() + static_cast<std::size_t>(b) * I;
        for (int j = 0; j < record.tgt_lens[b]; ++j) {
          const double* s = head.data() + (static_cast<std::size_t>(b) * J + j) * I;
          double mx = -1e300;
          for (int i = 0; i < I; ++i) {
            if (valid[i]) mx = std::max(mx, inv_tau * s[i]);
          }
          double sum = 0.0;
          for (int i = 0; i < I; ++i) {
            row[i] = valid[i] ? std::exp(inv_tau * s[i] - mx) : 0.0;
            sum += row[i];
          }
          double* dst = out[b].a.data() + static_cast<std::size_t>(j) * I;
          const double w = 1.0 / (sum * n_mats);
          for (int i = 0; i < I; ++i) dst[i] += row[i] * w;
        }
      }
    }
  }
  // Renormalize each active row: averaging preserves row sums up to roundoff,
  // but downstream mixing wants them stochastic to high precision.
  for (int b = 0; b < B; ++b) {
    for (int j = 0; j < record.tgt_lens[b]; ++j) {
      double* r = out[b].a.data() + static_cast<std::size_t>(j) * I;
      double s = 0.0;
      for (int i = 0; i < I; ++i) s += r[i];
      if (s > 0.0) {
        for (int i = 0; i < I; ++i) r[i] /= s;
      }
    }
  }
  return out;
}

TranslationLoss translation_loss(const Bound& bound, const TokenBatch& src, const TokenBatch& tgt,
                                 double inv_tau, std::mt19937_64* dropout_rng) {
  const ModelConfig& cfg = bound.params->config;
  if (src.B != tgt.B) throw TensorError("translation_loss: batch size mismatch");
  TranslationLoss out;
  out.record = forward_teacher_forced(bound, SourceInput::from_tokens(src),
                                      DecoderInput::from_targets(tgt), dropout_rng);
  const int B = tgt.B, J = tgt.L, V = cfg.vocab_size;

  std::vector<double> labels(static_cast<std::size_t>(B) * J * V, 0.0);
  std::vector<double> weights(static_cast<std::size_t>(B) * J, 0.0);
  for (int b = 0; b < B; ++b) {
    std::vector<int> toks(tgt.ids.begin() + static_cast<std::size_t>(b) * J,
                          tgt.ids.begin() + static_cast<std::size_t>(b) * J + tgt.lens[b]);
    std::vector<double> rows = label_rows(toks, V, cfg.label_smoothing);
    std::copy(rows.begin(), rows.end(), labels.begin() + static_cast<std::size_t>(b) * J * V);
    for (int j = 0; j < tgt.lens[b]; ++j) weights[static_cast<std::size_t>(b) * J + j] = 1.0;
    out.token_count += tgt.lens[b];
  }

  Tensor flat_logits = reshape(out.record.logits, {B * J, V});
  Tensor logp = log_softmax_last(flat_logits);
  out.loss = kl_divergence_rowwise(Tensor::from({B * J, V}, std::move(labels)), logp,
                                   Tensor::from({B * J}, std::move(weights)));
  out.alignments = extract_alignment(out.record, inv_tau);

  // Stop-gradient predictive distributions for label blending.
  out.predictions.resize(static_cast<std::size_t>(B) * J * V);
  {
    const double* lp = logp.ptr();
    for (std::size_t i = 0; i < out.predictions.size(); ++i) out.predictions[i] = std::exp(lp[i]);
  }
  return out;
}

// ---- decoding ----

namespace {

std::vector<double> next_token_logprobs(Parameters& params, const std::vector<int>& src,
                                        const std::vector<std::vector<int>>& prefixes) {
  // One forward over all live prefixes; returns the last-position log-softmax
  // rows concatenated.
  Bound bound(params, nullptr);
  const int V = params.config.vocab_size;
  const int B = static_cast<int>(prefixes.size());
  std::vector<std::vector<int>> dummy_targets;
  for (const auto& pref : prefixes) {
    std::vector<int> y = pref;
    y.push_back(kEos);  // placeholder; only logits are read
    dummy_targets.push_back(std::move(y));
  }
  std::vector<std::vector<int>> srcs(B, src);
  TokenBatch sb = TokenBatch::from_sentences(srcs);
  TokenBatch yb = TokenBatch::from_sentences(dummy_targets);
  ForwardRecord rec = forward_teacher_forced(bound, SourceInput::from_tokens(sb),
                                             DecoderInput::from_targets(yb), nullptr);
  const int J = rec.J;
  std::vector<double> out(static_cast<std::size_t>(B) * V);
  const double* logits = rec.logits.ptr();
  for (int b = 0; b < B; ++b) {
    const int last = static_cast<int>(prefixes[b].size());  // z = <s> + prefix
    const double* row = logits + (static_cast<std::size_t>(b) * J + last) * V;
    double mx = row[0];
    for (int v = 1; v < V; ++v) mx = std::max(mx, row[v]);
    double sum = 0.0;
    for (int v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
    const double lse = mx + std::log(sum);
    for (int v = 0; v < V; ++v) out[static_cast<std::size_t>(b) * V + v] = row[v] - lse;
  }
  return out;
}

double length_penalty(int len, double alpha) {
  return std::pow((5.0 + len) / 6.0, alpha);
}

}  // namespace

std::vector<int> decode(Parameters& params, const std::vector<int>& src, const DecodeConfig& cfg) {
  if (cfg.beam_size < 1) throw TensorError("decode: beam size must be >= 1");
  if (src.empty()) throw TensorError("decode: empty source");
  const int V = params.config.vocab_size;
  const int max_len =
      std::min(cfg.max_len > 0 ? cfg.max_len : params.config.max_positions - 1,
               params.config.max_positions - 1);

  if (cfg.beam_size == 1) {
    // greedy
    std::vector<int> out;
    for (int step = 0; step < max_len; ++step) {
      std::vector<double> lp = next_token_logprobs(params, src, {out});
      int best = kEos;
      for (int v = 0; v < V; ++v) {
        if (v == kPad || v == kBos) continue;
        if (lp[v] > lp[best]) best = v;
      }
      if (best == kEos) break;
      out.push_back(best);
    }
    return out;
  }

  struct Hyp {
    std::vector<int> toks;
    double logp = 0.0;
  };
  std::vector<Hyp> active{{{}, 0.0}};
  std::vector<std::pair<double, std::vector<int>>> finished;  // penalized score, tokens

  for (int step = 0; step < max_len && !active.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    for (const Hyp& h : active) prefixes.push_back(h.toks);
    std::vector<double> lp = next_token_logprobs(params, src, prefixes);

    std::vector<std::pair<double, std::pair<int, int>>> cands;  // logp, (hyp, token)
    for (int h = 0; h < static_cast<int>(active.size()); ++h) {
      const double* row = lp.data() + static_cast<std::size_t>(h) * V;
      for (int v = 0; v < V; ++v) {
        if (v == kPad || v == kBos) continue;
        cands.push_back({active[h].logp + row[v], {h, v}});
      }
    }
    const int keep = std::min<int>(cfg.beam_size, static_cast<int>(cands.size()));
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });

    std::vector<Hyp> next;
    for (int c = 0; c < keep; ++c) {
      const auto& [score, hv] = cands[c];
      const auto& [h, v] = hv;
      if (v == kEos) {
        const int len = static_cast<int>(active[h].toks.size()) + 1;
        finished.push_back({score / length_penalty(len, cfg.length_penalty), active[h].toks});
      } else {
        Hyp nh = active[h];
        nh.toks.push_back(v);
        nh.logp = score;
        next.push_back(std::move(nh));
      }
    }
    active = std::move(next);
    if (static_cast<int>(finished.size()) >= cfg.beam_size) break;
  }
  for (const Hyp& h : active) {
    const int len = static_cast<int>(h.toks.size());
    if (len > 0) finished.push_back({h.logp / length_penalty(len, cfg.length_penalty), h.toks});
  }
  if (finished.empty()) return {};
  auto best = std::max_element(finished.begin(), finished.end(),
                               [](const auto& a, const auto& b) { return a.first < b.first; });
  return best->second;
}

// ---- checkpoint io ----

namespace {

constexpr char kMagic[4] = {'F', '2', 'X', 'D'};
constexpr std::uint32_t kVersion = 1;

struct FileCloser {
  std::FILE* f;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

template <typename T>
void write_pod(std::FILE* f, const T& v) {
  if (std::fwrite(&v, sizeof(T), 1, f) != 1) throw TensorError("checkpoint: write failed");
}

template <typename T>
T read_pod(std::FILE* f) {
  T v;
  if (std::fread(&v, sizeof(T), 1, f) != 1) throw TensorError("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_named_tensors(const std::vector<std::pair<std::string, Tensor>>& named,
                        const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw TensorError("checkpoint: cannot open " + path + " for writing");
  FileCloser closer{f};
  if (std::fwrite(kMagic, 1, 4, f) != 4) throw TensorError("checkpoint: write failed");
  write_pod(f, kVersion);
  write_pod(f, static_cast<std::uint64_t>(named.size()));
  for (const auto& [name, t] : named) {
    write_pod(f, static_cast<std::uint32_t>(name.size()));
    if (std::fwrite(name.data(), 1, name.size(), f) != name.size()) {
      throw TensorError("checkpoint: write failed");
    }
    write_pod(f, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) write_pod(f, static_cast<std::int64_t>(d));
    const std::size_t n = static_cast<std::size_t>(t.size());
    if (std::fwrite(t.ptr(), sizeof(double), n, f) != n) {
      throw TensorError("checkpoint: write failed");
    }
  }
}

std::vector<std::pair<std::string, Tensor>> load_named_tensors(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw TensorError("checkpoint: cannot open " + path);
  FileCloser closer{f};
  char magic[4];
  if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    throw TensorError("checkpoint: bad magic in " + path);
  }
  const auto version = read_pod<std::uint32_t>(f);
  if (version != kVersion) {
    throw TensorError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = read_pod<std::uint64_t>(f);
  std::vector<std::pair<std::string, Tensor>> named;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(f);
    std::string name(name_len, '\0');
    if (std::fread(name.data(), 1, name_len, f) != name_len) {
      throw TensorError("checkpoint: truncated file");
    }
    const auto rank = read_pod<std::uint32_t>(f);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(static_cast<int>(read_pod<std::int64_t>(f)));
    }
    std::vector<double> data(ag::numel(shape));
    if (std::fread(data.data(), sizeof(double), data.size(), f) != data.size()) {
      throw TensorError("checkpoint: truncated file");
    }
    named.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  return named;
}

void save_checkpoint(const Parameters& params, const std::string& path) {
  save_named_tensors(params.named, path);
}

void load_checkpoint(Parameters& params, const std::string& path) {
  auto named = load_named_tensors(path);
  if (named.size() != params.named.size()) {
    throw TensorError("checkpoint: parameter count mismatch");
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (named[i].first != params.named[i].first ||
        named[i].second.shape != params.named[i].second.shape) {
      throw TensorError("checkpoint: parameter " + named[i].first + " does not match model");
    }
    params.named[i].second = named[i].second;
  }
}

}  // namespace f2x::model
