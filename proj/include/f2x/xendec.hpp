#pragma once

#include <random>
#include <vector>

#include "f2x/model.hpp"
#include "f2x/tensor.hpp"

namespace f2x::xendec {

// Binary crossover mask over the padded common source length.
struct ShuffleMask {
  std::vector<int> m;
  double p = 0.0;
};

// i.i.d. Bernoulli(p) entries from a caller-owned stream.
ShuffleMask sample_mask(int length, double p, std::mt19937_64& rng);

// x_tilde[i] = x[i] if m[i] == 1 else x_prime[i]. Both inputs must already be
// padded to the mask length; padding tokens are ordinary selectable tokens.
std::vector<int> cross_source(const std::vector<int>& x, const std::vector<int>& x_prime,
                              const ShuffleMask& mask);

// Row-stochastic J x I matrix with every active row uniform.
model::AlignmentMatrix uniform_alignment(int rows, int cols);

// Zeroes entries with probability rate, without rescaling; the mixture
// normalizer absorbs the lost mass.
model::AlignmentMatrix alignment_dropout(model::AlignmentMatrix a, double rate,
                                         std::mt19937_64& rng);

// Target-side prior alignment over a square mask-length grid. Row j with
// m[j] == 0 puts p-mass (divided by the zero count) on positions with
// m[i] == 0 and (1-p)-mass (divided by the one count) on positions with
// m[i] == 1; row j with m[j] == 1 swaps the denominators. With
// normalize_rows the rows are rescaled to sum to 1; without it they are
// returned exactly as constructed.
model::AlignmentMatrix prior_alignment(const ShuffleMask& mask, bool normalize_rows = true);

// Convex combination v * prediction + (1 - v) * labels, rowwise over J rows
// of V probabilities. The prediction carries no gradient.
std::vector<double> blend_labels_with_prediction(const std::vector<double>& labels,
                                                 const std::vector<double>& prediction,
                                                 double v);

// Per-position mixture coefficients. a[j] is the weight on parent 1; the
// decoder-input coefficients use alignment row j-1 (shifted, with a start
// row pinned to parent 1) and the label coefficients use row j.
struct MixtureWeights {
  std::vector<double> input_a;
  std::vector<double> label_a;
  std::vector<double> input_z;  // normalizers before flooring, clamped at 1e-12
  std::vector<double> label_z;
};

MixtureWeights mixture_weights(const model::AlignmentMatrix& a1, const model::AlignmentMatrix& a2,
                               const ShuffleMask& mask, int len1, int len2);

// One offspring of two parent pairs, ready for batching.
struct VirtualExample {
  std::vector<int> x_tilde;
  std::vector<int> z1, z2;      // per-parent shifted decoder token ids, padded to J
  std::vector<double> labels;   // J rows of V mixed label probabilities
  MixtureWeights weights;
  int J = 0;
  int source_len = 0;
};

// labels1/labels2 are per-parent rows (len1 x V and len2 x V), already
// smoothed and optionally prediction-blended. Alignment matrices are
// len1 x I and len2 x I; rows past a parent's length carry no mass, so the
// offspring falls back to the longer parent there.
VirtualExample make_virtual_example(const std::vector<int>& x, const std::vector<int>& y,
                                    const std::vector<int>& x_prime,
                                    const std::vector<int>& y_prime,
                                    const model::AlignmentMatrix& a1,
                                    const model::AlignmentMatrix& a2, const ShuffleMask& mask,
                                    const std::vector<double>& labels1,
                                    const std::vector<double>& labels2, int vocab_size);

struct XendecLoss {
  ag::Tensor loss;  // scalar: sum of positionwise KL over real label rows
  std::int64_t token_count = 0;
};

// Scores a batch of offspring: teacher-forced forward on x_tilde with mixed
// decoder-input embeddings, then KL against the mixed labels. row_weights,
// when given, overrides the per-position loss weights (one vector of length
// J per example); by default every real label row counts with weight 1.
XendecLoss xendec_loss(const model::Bound& bound, const std::vector<VirtualExample>& batch,
                       std::mt19937_64* dropout_rng,
                       const std::vector<std::vector<double>>* row_weights = nullptr);

}  // namespace f2x::xendec
