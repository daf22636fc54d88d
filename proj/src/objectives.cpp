#include "f2x/objectives.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace f2x::obj {

using ag::Tensor;
using ag::TensorError;
using model::kMask;
using model::kPad;
using xendec::ShuffleMask;
using xendec::VirtualExample;

std::vector<int> noise_local_shuffle(const std::vector<int>& y, int max_distance,
                                     std::mt19937_64& rng) {
  if (max_distance < 0) throw TensorError("local shuffle: negative distance bound");
  const int n = static_cast<int>(y.size());
  std::uniform_real_distribution<double> u(0.0, max_distance + 1.0);
  std::vector<std::pair<double, int>> keys(n);
  for (int i = 0; i < n; ++i) keys[i] = {i + u(rng), i};
  std::stable_sort(keys.begin(), keys.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<int> out(n);
  for (int i = 0; i < n; ++i) out[i] = y[keys[i].second];
  return out;
}

std::vector<int> apply_noise(const std::vector<int>& y, const NoiseSpec& spec,
                             std::mt19937_64& rng) {
  switch (spec.kind) {
    case NoiseSpec::Kind::None:
      return y;
    case NoiseSpec::Kind::LocalShuffle:
      return noise_local_shuffle(y, spec.max_distance, rng);
    case NoiseSpec::Kind::ExternalTable: {
      if (!spec.table) throw TensorError("noise: external table not loaded");
      auto it = spec.table->find(y);
      if (it == spec.table->end()) {
        throw TensorError("noise: sentence missing from the external noise table");
      }
      return it->second;
    }
  }
  throw TensorError("noise: unknown kind");
}

std::map<std::vector<int>, std::vector<int>> load_noise_table(
    const std::string& path, const std::function<int(const std::string&)>& lookup) {
  std::ifstream in(path);
  if (!in) throw TensorError("noise table: cannot open " + path);
  std::map<std::vector<int>, std::vector<int>> table;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw TensorError("noise table: line without a tab separator");
    }
    auto tokenize = [&](const std::string& s) {
      std::vector<int> ids;
      std::istringstream ss(s);
      std::string w;
      while (ss >> w) ids.push_back(lookup(w));
      return ids;
    };
    std::vector<int> key = tokenize(line.substr(0, tab));
    std::vector<int> val = tokenize(line.substr(tab + 1));
    if (key.empty() || val.empty()) throw TensorError("noise table: empty side in an entry");
    table[std::move(key)] = std::move(val);
  }
  return table;
}

double beta_sample(double alpha, double beta, std::mt19937_64& rng) {
  std::gamma_distribution<double> ga(alpha, 1.0), gb(beta, 1.0);
  const double a = ga(rng);
  const double b = gb(rng);
  if (a + b <= 0.0) return 0.5;
  return a / (a + b);
}

namespace {

// rows j < len of sentence b in a padded B x J x V prediction block
std::vector<double> prediction_rows(const std::vector<double>& preds, int padded_len, int V,
                                    int b, int len) {
  const std::size_t begin = static_cast<std::size_t>(b) * padded_len * V;
  return std::vector<double>(preds.begin() + begin, preds.begin() + begin + static_cast<std::size_t>(len) * V);
}

std::function<double(std::mt19937_64&)> default_p2() {
  return [](std::mt19937_64& rng) { return beta_sample(2.0, 6.0, rng); };
}

}  // namespace

F1Result f1_corrupt_only(const std::vector<std::vector<int>>& mono, double p1,
                         const NoiseSpec& noise, std::mt19937_64& mask_rng,
                         std::mt19937_64& noise_rng) {
  if (mono.empty()) throw TensorError("f1_construct: empty batch");
  F1Result out;
  for (const std::vector<int>& y : mono) {
    if (y.empty()) throw TensorError("f1_construct: empty sentence");
    std::vector<int> y_noise = apply_noise(y, noise, noise_rng);
    if (y_noise.size() != y.size()) {
      throw TensorError("f1_construct: noise changed the sentence length");
    }
    ShuffleMask m = xendec::sample_mask(static_cast<int>(y.size()), p1, mask_rng);
    std::vector<int> y_mask(y.size(), kMask);
    out.corrupted.push_back(xendec::cross_source(y_noise, y_mask, m));
    out.targets.push_back(y);
    out.masks.push_back(std::move(m));
  }
  return out;
}

F1Result f1_construct(const model::Bound& bound, const std::vector<std::vector<int>>& mono,
                      double p1, const NoiseSpec& noise, double inv_tau,
                      std::mt19937_64& mask_rng, std::mt19937_64& noise_rng,
                      std::mt19937_64* dropout_rng) {
  F1Result out = f1_corrupt_only(mono, p1, noise, mask_rng, noise_rng);
  // Both crossover parents share the target y, so the offspring's labels and
  // decoder input collapse to y's; the loss is the plain reconstruction loss
  // of the corrupted source.
  model::TranslationLoss tl =
      model::translation_loss(bound, model::TokenBatch::from_sentences(out.corrupted),
                              model::TokenBatch::from_sentences(mono), inv_tau, dropout_rng);
  out.alignments = std::move(tl.alignments);
  out.predictions = std::move(tl.predictions);
  out.padded_len = tl.record.J;
  out.loss = tl.loss;
  out.token_count = tl.token_count;
  return out;
}

F2Result f2_construct_and_loss(const model::Bound& bound,
                               const std::vector<std::vector<int>>& src,
                               const std::vector<std::vector<int>>& tgt,
                               const model::TranslationLoss& supervised, const F1Result& f1,
                               const F2Config& cfg, std::mt19937_64& mask_rng,
                               std::mt19937_64& p2_rng, std::mt19937_64& align_rng,
                               std::mt19937_64* dropout_rng) {
  const std::size_t B = src.size();
  if (B == 0) throw TensorError("f2_construct_and_loss: empty batch");
  if (tgt.size() != B || f1.corrupted.size() != B) {
    throw TensorError("f2_construct_and_loss: every parallel pair needs one paired mono sentence");
  }
  const int V = bound.params->config.vocab_size;
  const double eps = bound.params->config.label_smoothing;
  auto sampler = cfg.p2_sampler ? cfg.p2_sampler : default_p2();

  F2Result out;
  for (std::size_t b = 0; b < B; ++b) {
    const std::vector<int>& x = src[b];
    const std::vector<int>& y = tgt[b];
    const std::vector<int>& n_yu = f1.corrupted[b];
    const std::vector<int>& yu = f1.targets[b];
    const double p2 = sampler(p2_rng);
    out.p2_draws.push_back(p2);
    ShuffleMask m = xendec::sample_mask(
        static_cast<int>(std::max(x.size(), n_yu.size())), p2, mask_rng);

    model::AlignmentMatrix a1 = supervised.alignments[b];
    model::AlignmentMatrix a2;
    if (cfg.prior_alignment_for_parent2) {
      const bool all_ones =
          std::all_of(m.m.begin(), m.m.end(), [](int bit) { return bit == 1; });
      // with an all-ones mask parent 2 carries no mass, so any row-stochastic
      // matrix works where the prior is undefined
      a2 = all_ones ? xendec::uniform_alignment(static_cast<int>(m.m.size()),
                                                static_cast<int>(m.m.size()))
                    : xendec::prior_alignment(m);
    } else {
      if (f1.alignments.size() != B) {
        throw TensorError("f2_construct_and_loss: first generation carries no alignments; "
                          "enable the prior alignment");
      }
      a2 = f1.alignments[b];
    }
    if (cfg.alignment_dropout > 0.0) {
      a1 = xendec::alignment_dropout(std::move(a1), cfg.alignment_dropout, align_rng);
      a2 = xendec::alignment_dropout(std::move(a2), cfg.alignment_dropout, align_rng);
    }

    std::vector<double> labels1 = model::label_rows(y, V, eps);
    std::vector<double> labels2 = model::label_rows(yu, V, eps);
    if (cfg.v > 0.0) {
      labels1 = xendec::blend_labels_with_prediction(
          labels1,
          prediction_rows(supervised.predictions, supervised.record.J, V, static_cast<int>(b),
                          static_cast<int>(y.size())),
          cfg.v);
      if (!f1.predictions.empty()) {
        labels2 = xendec::blend_labels_with_prediction(
            labels2,
            prediction_rows(f1.predictions, f1.padded_len, V, static_cast<int>(b),
                            static_cast<int>(yu.size())),
            cfg.v);
      }
    }
    out.offspring.push_back(
        xendec::make_virtual_example(x, y, n_yu, yu, a1, a2, m, labels1, labels2, V));
  }
  xendec::XendecLoss xl = xendec::xendec_loss(bound, out.offspring, dropout_rng);
  out.loss = xl.loss;
  out.token_count = xl.token_count;
  return out;
}

LossBreakdown total_loss(const model::Bound& bound, const std::vector<std::vector<int>>& src,
                         const std::vector<std::vector<int>>& tgt,
                         const std::vector<std::vector<int>>& mono, const LossConfig& cfg,
                         const LossRngs& rngs) {
  LossBreakdown out;
  model::TranslationLoss sup =
      model::translation_loss(bound, model::TokenBatch::from_sentences(src),
                              model::TokenBatch::from_sentences(tgt), cfg.inv_tau, rngs.dropout);
  out.supervised_tokens = sup.token_count;
  Tensor total = ag::scale(sup.loss, 1.0 / sup.token_count);
  out.supervised = total.item();

  if (cfg.use_f1 && cfg.use_prior_alignment) {
    throw TensorError("total_loss: the f1 term needs its forward pass; disable one of use_f1 "
                      "and use_prior_alignment");
  }
  if (cfg.use_f1 || cfg.use_f2) {
    if (mono.size() != src.size()) {
      throw TensorError("total_loss: every parallel pair needs one paired mono sentence");
    }
    F1Result f1 = cfg.use_prior_alignment
                      ? f1_corrupt_only(mono, cfg.p1, cfg.noise, *rngs.mask, *rngs.noise)
                      : f1_construct(bound, mono, cfg.p1, cfg.noise, cfg.inv_tau, *rngs.mask,
                                     *rngs.noise, rngs.dropout);
    if (cfg.use_f1) {
      Tensor f1_mean = ag::scale(f1.loss, 1.0 / f1.token_count);
      out.f1 = f1_mean.item();
      out.f1_tokens = f1.token_count;
      total = ag::add(total, f1_mean);
    }
    if (cfg.use_f2) {
      F2Config f2cfg;
      f2cfg.v = cfg.v;
      f2cfg.alignment_dropout = cfg.alignment_dropout;
      f2cfg.prior_alignment_for_parent2 = cfg.use_prior_alignment;
      f2cfg.p2_sampler = cfg.p2_sampler;
      F2Result f2 = f2_construct_and_loss(bound, src, tgt, sup, f1, f2cfg, *rngs.mask,
                                          *rngs.p2, *rngs.align, rngs.dropout);
      Tensor f2_mean = ag::scale(f2.loss, 1.0 / f2.token_count);
      out.f2 = f2_mean.item();
      out.f2_tokens = f2.token_count;
      total = ag::add(total, f2_mean);
    }
  }
  out.total = total;
  return out;
}

RecoveredObjective recover_objective(const model::Bound& bound, ObjectiveRow row,
                                     const std::vector<std::vector<int>>& mono, double p,
                                     const NoiseSpec& noise, bool masked_only,
                                     std::mt19937_64& mask_rng, std::mt19937_64& noise_rng) {
  if (row == ObjectiveRow::Adv) {
    throw TensorError("recover_objective: the adversarial row is not supported");
  }
  if (mono.empty()) throw TensorError("recover_objective: empty batch");
  const int V = bound.params->config.vocab_size;
  const double eps = bound.params->config.label_smoothing;

  RecoveredObjective out;
  std::vector<VirtualExample> offspring;
  std::vector<std::vector<double>> row_weights;
  for (const std::vector<int>& y : mono) {
    if (y.empty()) throw TensorError("recover_objective: empty sentence");
    const int n = static_cast<int>(y.size());
    std::vector<int> parent1 =
        row == ObjectiveRow::Bart ? apply_noise(y, noise, noise_rng) : y;
    if (parent1.size() != y.size()) {
      throw TensorError("recover_objective: noise changed the sentence length");
    }
    std::vector<int> y_mask(y.size(), kMask);
    ShuffleMask m = xendec::sample_mask(n, p, mask_rng);
    std::vector<double> labels = model::label_rows(y, V, eps);
    offspring.push_back(xendec::make_virtual_example(parent1, y, y_mask, y,
                                                     xendec::uniform_alignment(n, n),
                                                     xendec::uniform_alignment(n, n), m,
                                                     labels, labels, V));
    out.corrupted.push_back(offspring.back().x_tilde);
    std::vector<double> w(n, 1.0);
    if (masked_only) {
      for (int i = 0; i < n; ++i) w[i] = m.m[i] == 0 ? 1.0 : 0.0;
    }
    row_weights.push_back(std::move(w));
    out.masks.push_back(std::move(m));
  }
  xendec::XendecLoss xl = xendec::xendec_loss(bound, offspring, nullptr, &row_weights);
  out.loss = xl.loss;
  out.token_count = xl.token_count;
  return out;
}

MixupBatch mixup_mix(const model::Bound& bound, const std::vector<std::vector<int>>& x1,
                     const std::vector<std::vector<int>>& y1,
                     const std::vector<std::vector<int>>& x2,
                     const std::vector<std::vector<int>>& y2,
                     const std::vector<double>& lambdas) {
  const std::size_t B = x1.size();
  if (B == 0 || y1.size() != B || x2.size() != B || y2.size() != B || lambdas.size() != B) {
    throw TensorError("mixup_mix: batch size mismatch");
  }
  const int V = bound.params->config.vocab_size;
  const double eps = bound.params->config.label_smoothing;
  int I = 0, J = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (lambdas[b] < 0.0 || lambdas[b] > 1.0) {
      throw TensorError("mixup_mix: lambda must be in [0,1]");
    }
    I = std::max<int>(I, static_cast<int>(std::max(x1[b].size(), x2[b].size())));
    J = std::max<int>(J, static_cast<int>(std::max(y1[b].size(), y2[b].size())));
  }

  MixupBatch out;
  const int Bi = static_cast<int>(B);
  std::vector<int> sx1(static_cast<std::size_t>(Bi) * I, kPad), sx2 = sx1, sxb = sx1;
  std::vector<int> z1(static_cast<std::size_t>(Bi) * J, kPad), z2 = z1, zb = z1;
  std::vector<double> src_coeff(static_cast<std::size_t>(Bi) * I, 0.0);
  std::vector<double> dec_coeff(static_cast<std::size_t>(Bi) * J, 0.0);
  out.labels.assign(static_cast<std::size_t>(Bi) * J * V, 0.0);

  for (int b = 0; b < Bi; ++b) {
    const double lam = lambdas[b];
    const bool base1 = lam >= 0.5;
    const double coeff = base1 ? lam - 1.0 : lam;
    const int sl1 = static_cast<int>(x1[b].size());
    const int sl2 = static_cast<int>(x2[b].size());
    out.src_lens.push_back(std::max(sl1, sl2));
    for (int i = 0; i < I; ++i) {
      const std::size_t idx = static_cast<std::size_t>(b) * I + i;
      if (i < sl1) sx1[idx] = x1[b][i];
      if (i < sl2) sx2[idx] = x2[b][i];
      sxb[idx] = base1 ? sx1[idx] : sx2[idx];
      if (i < out.src_lens.back()) src_coeff[idx] = coeff;
    }
    const int tl1 = static_cast<int>(y1[b].size());
    const int tl2 = static_cast<int>(y2[b].size());
    const int tl = std::max(tl1, tl2);
    out.tgt_lens.push_back(tl);
    std::vector<double> h1 = model::label_rows(y1[b], V, eps);
    std::vector<double> h2 = model::label_rows(y2[b], V, eps);
    for (int j = 0; j < J; ++j) {
      const std::size_t idx = static_cast<std::size_t>(b) * J + j;
      if (j == 0) {
        z1[idx] = model::kBos;
        z2[idx] = model::kBos;
      } else {
        if (j - 1 < tl1) z1[idx] = y1[b][j - 1];
        if (j - 1 < tl2) z2[idx] = y2[b][j - 1];
      }
      zb[idx] = base1 ? z1[idx] : z2[idx];
      if (j < tl) dec_coeff[idx] = coeff;
      double* lrow = out.labels.data() + idx * V;
      for (int v = 0; v < V; ++v) {
        const double p1 = j < tl1 ? h1[static_cast<std::size_t>(j) * V + v] : 0.0;
        const double p2 = j < tl2 ? h2[static_cast<std::size_t>(j) * V + v] : 0.0;
        lrow[v] = (base1 ? p1 : p2) + coeff * (p1 - p2);
      }
    }
  }

  const Tensor& table = bound.at("embed");
  auto blend = [&](const std::vector<int>& a, const std::vector<int>& b2,
                   const std::vector<int>& base, std::vector<double> coeffs, int L) {
    Tensor ea = ag::embedding_gather(table, a, {Bi, L});
    Tensor eb = ag::embedding_gather(table, b2, {Bi, L});
    Tensor ebase = ag::embedding_gather(table, base, {Bi, L});
    return ag::add(ebase, ag::row_scale(ag::sub(ea, eb),
                                        Tensor::from({Bi * L}, std::move(coeffs))));
  };
  out.source_embeddings = blend(sx1, sx2, sxb, std::move(src_coeff), I);
  out.decoder_embeddings = blend(z1, z2, zb, std::move(dec_coeff), J);
  return out;
}

xendec::XendecLoss mixup_loss(const model::Bound& bound, const MixupBatch& mix,
                              std::mt19937_64* dropout_rng) {
  const int B = static_cast<int>(mix.src_lens.size());
  const int J = mix.decoder_embeddings.shape[1];
  const int V = bound.params->config.vocab_size;
  model::ForwardRecord rec = model::forward_teacher_forced(
      bound, model::SourceInput::from_embeddings(mix.source_embeddings, mix.src_lens),
      model::DecoderInput::from_embeddings(mix.decoder_embeddings, mix.tgt_lens), dropout_rng);
  std::vector<double> weights(static_cast<std::size_t>(B) * J, 0.0);
  xendec::XendecLoss out;
  for (int b = 0; b < B; ++b) {
    for (int j = 0; j < mix.tgt_lens[b]; ++j) weights[static_cast<std::size_t>(b) * J + j] = 1.0;
    out.token_count += mix.tgt_lens[b];
  }
  Tensor logp = ag::log_softmax_last(ag::reshape(rec.logits, {B * J, V}));
  out.loss = ag::kl_divergence_rowwise(Tensor::from({B * J, V}, mix.labels), logp,
                                       Tensor::from({B * J}, std::move(weights)));
  return out;
}

}  // namespace f2x::obj
