#pragma once

#include <functional>
#include <map>
#include <random>
#include <vector>

#include "f2x/model.hpp"
#include "f2x/xendec.hpp"

namespace f2x::obj {

// Corruption applied to a monolingual sentence before crossover.
struct NoiseSpec {
  enum class Kind { None, LocalShuffle, ExternalTable };
  Kind kind = Kind::LocalShuffle;
  int max_distance = 3;
  // original token sequence -> noised sequence, e.g. from a back-translation
  // table; required for ExternalTable
  const std::map<std::vector<int>, std::vector<int>>* table = nullptr;
};

// Random local reordering: every token moves at most max_distance positions.
std::vector<int> noise_local_shuffle(const std::vector<int>& y, int max_distance,
                                     std::mt19937_64& rng);

std::vector<int> apply_noise(const std::vector<int>& y, const NoiseSpec& spec,
                             std::mt19937_64& rng);

// Reads "original<TAB>noised" lines of whitespace-separated surface tokens
// and maps both sides through the given word -> id lookup.
std::map<std::vector<int>, std::vector<int>> load_noise_table(
    const std::string& path, const std::function<int(const std::string&)>& lookup);

double beta_sample(double alpha, double beta, std::mt19937_64& rng);

// First-generation crossover over (y_noise, y) and (y_mask, y): the shared
// target collapses the offspring to (n(y), y), so the loss is the plain
// reconstruction loss on the corrupted source.
struct F1Result {
  std::vector<std::vector<int>> corrupted;  // n(y) per sentence
  std::vector<std::vector<int>> targets;    // the uncorrupted y per sentence
  std::vector<xendec::ShuffleMask> masks;
  std::vector<model::AlignmentMatrix> alignments;
  std::vector<double> predictions;  // B * padded_len rows of V probabilities
  int padded_len = 0;
  ag::Tensor loss;  // sum of positionwise KL over all real positions
  std::int64_t token_count = 0;
};

F1Result f1_construct(const model::Bound& bound, const std::vector<std::vector<int>>& mono,
                      double p1, const NoiseSpec& noise, double inv_tau,
                      std::mt19937_64& mask_rng, std::mt19937_64& noise_rng,
                      std::mt19937_64* dropout_rng);

// Builds only the corrupted sources, without the reconstruction forward
// pass; alignments and predictions stay empty and downstream consumers must
// substitute the prior alignment.
F1Result f1_corrupt_only(const std::vector<std::vector<int>>& mono, double p1,
                         const NoiseSpec& noise, std::mt19937_64& mask_rng,
                         std::mt19937_64& noise_rng);

// Second-generation crossover of each parallel pair with its paired
// first-generation offspring.
struct F2Config {
  double v = 0.0;                   // prediction-blending weight
  double alignment_dropout = 0.2;
  // replace the mono parent's attention-derived alignment with the
  // mask-derived prior; required when the first generation skipped its
  // forward pass
  bool prior_alignment_for_parent2 = false;
  std::function<double(std::mt19937_64&)> p2_sampler;  // default Beta(2, 6)
};

struct F2Result {
  std::vector<xendec::VirtualExample> offspring;
  std::vector<double> p2_draws;
  ag::Tensor loss;
  std::int64_t token_count = 0;
};

F2Result f2_construct_and_loss(const model::Bound& bound,
                               const std::vector<std::vector<int>>& src,
                               const std::vector<std::vector<int>>& tgt,
                               const model::TranslationLoss& supervised, const F1Result& f1,
                               const F2Config& cfg, std::mt19937_64& mask_rng,
                               std::mt19937_64& p2_rng, std::mt19937_64& align_rng,
                               std::mt19937_64* dropout_rng);

struct LossConfig {
  double p1 = 0.5;
  NoiseSpec noise;
  double inv_tau = 0.0;
  double v = 0.0;
  double alignment_dropout = 0.2;
  bool use_f1 = true;
  bool use_f2 = true;
  // skip the first-generation forward pass entirely and drive the second
  // generation with the prior alignment; implies the f1 term is excluded
  bool use_prior_alignment = false;
  std::function<double(std::mt19937_64&)> p2_sampler;  // empty: Beta(2, 6)
};

struct LossRngs {
  std::mt19937_64* mask = nullptr;
  std::mt19937_64* noise = nullptr;
  std::mt19937_64* p2 = nullptr;
  std::mt19937_64* align = nullptr;
  std::mt19937_64* dropout = nullptr;  // model dropout; null disables it
};

struct LossBreakdown {
  ag::Tensor total;  // scalar; sum of the enabled per-token mean terms
  double supervised = 0.0, f1 = 0.0, f2 = 0.0;
  std::int64_t supervised_tokens = 0, f1_tokens = 0, f2_tokens = 0;
};

// L = L_S + L_F1 + L_F2, each term a per-token mean over its own batch.
// Every parallel pair must be matched with one mono sentence when the
// auxiliary terms are enabled.
LossBreakdown total_loss(const model::Bound& bound, const std::vector<std::vector<int>>& src,
                         const std::vector<std::vector<int>>& tgt,
                         const std::vector<std::vector<int>>& mono, const LossConfig& cfg,
                         const LossRngs& rngs);

// Denoising objectives expressed as crossover configurations.
enum class ObjectiveRow { Mass, Bart, Adv };

struct RecoveredObjective {
  std::vector<std::vector<int>> corrupted;
  std::vector<xendec::ShuffleMask> masks;
  ag::Tensor loss;
  std::int64_t token_count = 0;
};

// Mass: parents (y, y) and (all-mask, y); Bart: parents (noised y, y) and
// (all-mask, y). masked_only restricts the loss to positions the crossover
// replaced with the mask token. Adv is declared but unsupported.
RecoveredObjective recover_objective(const model::Bound& bound, ObjectiveRow row,
                                     const std::vector<std::vector<int>>& mono, double p,
                                     const NoiseSpec& noise, bool masked_only,
                                     std::mt19937_64& mask_rng, std::mt19937_64& noise_rng);

// Continuous embedding interpolation of two parallel batches at per-example
// weights; the discrete crossover's ablation counterpart.
struct MixupBatch {
  ag::Tensor source_embeddings;   // [B, I, d] raw table-row mixtures
  ag::Tensor decoder_embeddings;  // [B, J, d]
  std::vector<double> labels;     // B*J rows of V
  std::vector<int> src_lens, tgt_lens;
};

MixupBatch mixup_mix(const model::Bound& bound, const std::vector<std::vector<int>>& x1,
                     const std::vector<std::vector<int>>& y1,
                     const std::vector<std::vector<int>>& x2,
                     const std::vector<std::vector<int>>& y2,
                     const std::vector<double>& lambdas);

xendec::XendecLoss mixup_loss(const model::Bound& bound, const MixupBatch& mix,
                              std::mt19937_64* dropout_rng);

}  // namespace f2x::obj
