#include "f2x/xendec.hpp"

#include <algorithm>
#include <cmath>

namespace f2x::xendec {

using ag::Tensor;
using ag::TensorError;
using model::AlignmentMatrix;
using model::kBos;
using model::kPad;

namespace {

constexpr double kZFloor = 1e-12;

std::vector<int> pad_to(const std::vector<int>& s, int len) {
  std::vector<int> out = s;
  out.resize(len, kPad);
  return out;
}

void check_nonnegative(const AlignmentMatrix& a, const char* which) {
  for (double v : a.a) {
    if (v < 0.0) throw TensorError(std::string(which) + ": negative alignment entry");
  }
}

// Mass that alignment row j assigns to mask positions with the wanted value.
double row_mass(const AlignmentMatrix& a, int j, const std::vector<int>& m, int wanted) {
  if (j >= a.rows) return 0.0;
  const int cols = std::min<int>(a.cols, static_cast<int>(m.size()));
  double s = 0.0;
  for (int i = 0; i < cols; ++i) {
    if (m[i] == wanted) s += a.at(j, i);
  }
  return s;
}

struct Coeff {
  double a;
  double z;
};

Coeff combine(double w1, double w2, bool has1, bool has2) {
  const double z = w1 + w2;
  if (z < kZFloor) {
    double a = 0.5;
    if (has1 && !has2) a = 1.0;
    if (!has1 && has2) a = 0.0;
    return {a, kZFloor};
  }
  return {w1 / z, z};
}

}  // namespace

ShuffleMask sample_mask(int length, double p, std::mt19937_64& rng) {
  if (length <= 0) throw TensorError("sample_mask: non-positive length");
  if (p < 0.0 || p > 1.0) throw TensorError("sample_mask: ratio must be in [0,1]");
  std::bernoulli_distribution d(p);
  ShuffleMask mask;
  mask.p = p;
  mask.m.resize(length);
  for (int& b : mask.m) b = d(rng) ? 1 : 0;
  return mask;
}

std::vector<int> cross_source(const std::vector<int>& x, const std::vector<int>& x_prime,
                              const ShuffleMask& mask) {
  if (x.size() != mask.m.size() || x_prime.size() != mask.m.size()) {
    throw TensorError("cross_source: sources must be padded to the mask length");
  }
  std::vector<int> out(mask.m.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = mask.m[i] ? x[i] : x_prime[i];
  }
  return out;
}

AlignmentMatrix uniform_alignment(int rows, int cols) {
  if (rows <= 0 || cols <= 0) throw TensorError("uniform_alignment: empty shape");
  AlignmentMatrix a;
  a.rows = rows;
  a.cols = cols;
  a.a.assign(static_cast<std::size_t>(rows) * cols, 1.0 / cols);
  return a;
}

AlignmentMatrix alignment_dropout(AlignmentMatrix a, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw TensorError("alignment_dropout: rate must be in [0,1)");
  std::bernoulli_distribution drop(rate);
  for (double& v : a.a) {
    if (drop(rng)) v = 0.0;
  }
  return a;
}

AlignmentMatrix prior_alignment(const ShuffleMask& mask, bool normalize_rows) {
  const int n = static_cast<int>(mask.m.size());
  if (n == 0) throw TensorError("prior_alignment: empty mask");
  const double p = mask.p;
  int ones = 0;
  for (int b : mask.m) ones += b;
  const int zeros = n - ones;

  AlignmentMatrix a;
  a.rows = n;
  a.cols = n;
  a.a.resize(static_cast<std::size_t>(n) * n);
  for (int j = 0; j < n; ++j) {
    // mass assigned to the two position classes: the row's own class always
    // gets the p share, the opposite class the (1-p) share, but the
    // denominators follow the source construction verbatim.
    double mass_on_zero = 0.0, mass_on_one = 0.0;
    if (mask.m[j] == 0) {
      // zeros >= 1 here because position j itself is a zero
      mass_on_zero = p / zeros;
      if (ones > 0) mass_on_one = (1.0 - p) / ones;
    } else {
      if (zeros > 0) mass_on_zero = p / ones;
      if (zeros == 0) {
        throw TensorError("prior_alignment: all-ones mask leaves the complement mass undefined");
      }
      mass_on_one = (1.0 - p) / zeros;
    }
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      const double v = mask.m[i] == 0 ? mass_on_zero : mass_on_one;
      a.at(j, i) = v;
      sum += v;
    }
    if (normalize_rows) {
      if (sum <= 0.0) throw TensorError("prior_alignment: row has no mass to normalize");
      for (int i = 0; i < n; ++i) a.at(j, i) /= sum;
    }
  }
  return a;
}

std::vector<double> blend_labels_with_prediction(const std::vector<double>& labels,
                                                 const std::vector<double>& prediction,
                                                 double v) {
  if (v < 0.0 || v > 1.0) throw TensorError("label blending: weight must be in [0,1]");
  if (labels.size() != prediction.size()) {
    throw TensorError("label blending: row count mismatch");
  }
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = labels[i] + v * (prediction[i] - labels[i]);
  }
  return out;
}

MixtureWeights mixture_weights(const AlignmentMatrix& a1, const AlignmentMatrix& a2,
                               const ShuffleMask& mask, int len1, int len2) {
  check_nonnegative(a1, "mixture_weights parent 1");
  check_nonnegative(a2, "mixture_weights parent 2");
  const int J = std::max(len1, len2);
  MixtureWeights w;
  w.input_a.resize(J);
  w.label_a.resize(J);
  w.input_z.resize(J);
  w.label_z.resize(J);
  for (int j = 0; j < J; ++j) {
    const double l1 = j < len1 ? row_mass(a1, j, mask.m, 1) : 0.0;
    const double l2 = j < len2 ? row_mass(a2, j, mask.m, 0) : 0.0;
    const Coeff lc = combine(l1, l2, j < len1, j < len2);
    w.label_a[j] = lc.a;
    w.label_z[j] = lc.z;
    if (j == 0) {
      // decoder position 1 is the start symbol for both parents
      w.input_a[j] = 1.0;
      w.input_z[j] = 1.0;
    } else {
      const double i1 = j - 1 < len1 ? row_mass(a1, j - 1, mask.m, 1) : 0.0;
      const double i2 = j - 1 < len2 ? row_mass(a2, j - 1, mask.m, 0) : 0.0;
      const Coeff ic = combine(i1, i2, j - 1 < len1, j - 1 < len2);
      w.input_a[j] = ic.a;
      w.input_z[j] = ic.z;
    }
  }
  return w;
}

VirtualExample make_virtual_example(const std::vector<int>& x, const std::vector<int>& y,
                                    const std::vector<int>& x_prime,
                                    const std::vector<int>& y_prime, const AlignmentMatrix& a1,
                                    const AlignmentMatrix& a2, const ShuffleMask& mask,
                                    const std::vector<double>& labels1,
                                    const std::vector<double>& labels2, int vocab_size) {
  if (x.empty() || y.empty() || x_prime.empty() || y_prime.empty()) {
    throw TensorError("make_virtual_example: empty parent sequence");
  }
  const int I = static_cast<int>(std::max(x.size(), x_prime.size()));
  if (static_cast<int>(mask.m.size()) != I) {
    throw TensorError("make_virtual_example: mask length must be max of the source lengths");
  }
  const int len1 = static_cast<int>(y.size());
  const int len2 = static_cast<int>(y_prime.size());
  const int J = std::max(len1, len2);
  const std::size_t V = static_cast<std::size_t>(vocab_size);
  if (labels1.size() != static_cast<std::size_t>(len1) * V ||
      labels2.size() != static_cast<std::size_t>(len2) * V) {
    throw TensorError("make_virtual_example: label row shape mismatch");
  }

  VirtualExample ve;
  ve.J = J;
  ve.source_len = I;
  ve.x_tilde = cross_source(pad_to(x, I), pad_to(x_prime, I), mask);
  ve.weights = mixture_weights(a1, a2, mask, len1, len2);

  ve.z1.assign(J, kPad);
  ve.z2.assign(J, kPad);
  ve.z1[0] = kBos;
  ve.z2[0] = kBos;
  for (int j = 1; j < J; ++j) {
    if (j - 1 < len1) ve.z1[j] = y[j - 1];
    if (j - 1 < len2) ve.z2[j] = y_prime[j - 1];
  }

  // Blend form anchored at the nearer parent: a*h1 + (1-a)*h2 written as
  // base + coeff*(h1 - h2). This recovers either parent exactly at a in
  // {0, 1} and collapses exactly when the parents share a target.
  ve.labels.assign(static_cast<std::size_t>(J) * V, 0.0);
  for (int j = 0; j < J; ++j) {
    const double a = ve.weights.label_a[j];
    const bool base1 = a >= 0.5;
    const double coeff = base1 ? a - 1.0 : a;
    double* out = ve.labels.data() + static_cast<std::size_t>(j) * V;
    const double* h1 = j < len1 ? labels1.data() + static_cast<std::size_t>(j) * V : nullptr;
    const double* h2 = j < len2 ? labels2.data() + static_cast<std::size_t>(j) * V : nullptr;
    for (std::size_t v = 0; v < V; ++v) {
      const double p1 = h1 ? h1[v] : 0.0;
      const double p2 = h2 ? h2[v] : 0.0;
      out[v] = (base1 ? p1 : p2) + coeff * (p1 - p2);
    }
  }
  return ve;
}

XendecLoss xendec_loss(const model::Bound& bound, const std::vector<VirtualExample>& batch,
                       std::mt19937_64* dropout_rng,
                       const std::vector<std::vector<double>>* row_weights) {
  if (batch.empty()) throw TensorError("xendec_loss: empty batch");
  if (row_weights && row_weights->size() != batch.size()) {
    throw TensorError("xendec_loss: row weight batch mismatch");
  }
  const int B = static_cast<int>(batch.size());
  const int V = bound.params->config.vocab_size;
  int J = 0;
  std::vector<std::vector<int>> sources;
  std::vector<int> tgt_lens;
  for (const VirtualExample& ve : batch) {
    sources.push_back(ve.x_tilde);
    tgt_lens.push_back(ve.J);
    J = std::max(J, ve.J);
  }

  std::vector<int> z1(static_cast<std::size_t>(B) * J, kPad);
  std::vector<int> z2(static_cast<std::size_t>(B) * J, kPad);
  std::vector<int> z_base(static_cast<std::size_t>(B) * J, kPad);
  std::vector<double> coeff_rows(static_cast<std::size_t>(B) * J, 0.0);
  std::vector<double> labels(static_cast<std::size_t>(B) * J * V, 0.0);
  std::vector<double> weights(static_cast<std::size_t>(B) * J, 0.0);
  XendecLoss out;
  for (int b = 0; b < B; ++b) {
    const VirtualExample& ve = batch[b];
    std::copy(ve.z1.begin(), ve.z1.end(), z1.begin() + static_cast<std::size_t>(b) * J);
    std::copy(ve.z2.begin(), ve.z2.end(), z2.begin() + static_cast<std::size_t>(b) * J);
    for (int j = 0; j < ve.J; ++j) {
      const double a = ve.weights.input_a[j];
      const std::size_t idx = static_cast<std::size_t>(b) * J + j;
      const bool base1 = a >= 0.5;
      z_base[idx] = base1 ? ve.z1[j] : ve.z2[j];
      coeff_rows[idx] = base1 ? a - 1.0 : a;
    }
    std::copy(ve.labels.begin(), ve.labels.end(),
              labels.begin() + static_cast<std::size_t>(b) * J * V);
    if (row_weights) {
      if ((*row_weights)[b].size() != static_cast<std::size_t>(ve.J)) {
        throw TensorError("xendec_loss: row weight length mismatch");
      }
      for (int j = 0; j < ve.J; ++j) {
        weights[static_cast<std::size_t>(b) * J + j] = (*row_weights)[b][j];
        if ((*row_weights)[b][j] != 0.0) ++out.token_count;
      }
    } else {
      for (int j = 0; j < ve.J; ++j) weights[static_cast<std::size_t>(b) * J + j] = 1.0;
      out.token_count += ve.J;
    }
  }

  const Tensor& table = bound.at("embed");
  Tensor e1 = ag::embedding_gather(table, z1, {B, J});
  Tensor e2 = ag::embedding_gather(table, z2, {B, J});
  Tensor base = ag::embedding_gather(table, z_base, {B, J});
  Tensor mixed = ag::add(
      base, ag::row_scale(ag::sub(e1, e2), Tensor::from({B * J}, std::move(coeff_rows))));

  model::TokenBatch sb = model::TokenBatch::from_sentences(sources);
  model::ForwardRecord rec =
      model::forward_teacher_forced(bound, model::SourceInput::from_tokens(sb),
                                    model::DecoderInput::from_embeddings(mixed, tgt_lens),
                                    dropout_rng);
  Tensor logp = ag::log_softmax_last(ag::reshape(rec.logits, {B * J, V}));
  out.loss = ag::kl_divergence_rowwise(Tensor::from({B * J, V}, std::move(labels)), logp,
                                       Tensor::from({B * J}, std::move(weights)));
  return out;
}

}  // namespace f2x::xendec
