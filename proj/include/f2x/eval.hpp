#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "f2x/data.hpp"
#include "f2x/model.hpp"

namespace f2x::eval {

// Corpus-level BLEU in [0, 100]: geometric mean of clipped n-gram precisions
// up to max_n times the brevity penalty. With smoothing, a zero precision at
// n >= 2 becomes (matches + 1) / (total + 1); without it the score is 0.
double corpus_bleu(const std::vector<std::vector<int>>& hypotheses,
                   const std::vector<std::vector<int>>& references, int max_n = 4,
                   bool smoothing = true);

// Source-token to target-token substitution map for code switching.
struct Lexicon {
  std::unordered_map<int, int> map;

  // Synthetic gold lexicon over the joint two-language vocabulary: source
  // content word i (offset past the reserved ids) translates to target
  // content word perm[i] in the target id block that follows the source one.
  static Lexicon from_content_permutation(const std::vector<int>& perm);
  // Per-sentence argmax of an exported alignment: source position i maps to
  // the target token whose row carries the most attention mass on i. Later
  // sentences win conflicting entries; a corpus-level fallback map.
  static Lexicon from_alignments(const std::vector<std::vector<int>>& src,
                                 const std::vector<std::vector<int>>& tgt,
                                 const std::vector<model::AlignmentMatrix>& alignments);
};

enum class NoiseKind { CodeSwitch, DropWord };

std::string noise_kind_name(NoiseKind kind);
NoiseKind noise_kind_from_name(const std::string& name);

struct PerturbResult {
  std::vector<std::vector<int>> sentences;
  std::int64_t positions = 0;  // source tokens seen
  std::int64_t changed = 0;    // replaced (code switch) or dropped (drop word)
  std::int64_t unmapped = 0;   // code-switch draws skipped for lack of an entry
};

// Each position is independently replaced with its lexicon image with
// probability fraction; positions without an entry stay put and are counted.
PerturbResult perturb_code_switch(const std::vector<std::vector<int>>& src,
                                  const Lexicon& lexicon, double fraction,
                                  std::mt19937_64& rng);

// Each position is independently dropped with probability fraction; every
// sentence keeps at least one token.
PerturbResult perturb_drop_word(const std::vector<std::vector<int>>& src, double fraction,
                                std::mt19937_64& rng);

PerturbResult perturb(const std::vector<std::vector<int>>& src, NoiseKind kind, double fraction,
                      const Lexicon* lexicon, std::mt19937_64& rng);

// Greedy or beam decode of every sentence; threads > 1 splits the corpus
// over workers with the same output order.
std::vector<std::vector<int>> decode_corpus(model::Parameters& params,
                                            const std::vector<std::vector<int>>& src,
                                            const model::DecodeConfig& cfg, int threads = 1);

struct GridEntry {
  NoiseKind kind = NoiseKind::CodeSwitch;
  double fraction = 0.0;
  double bleu = 0.0;
  std::int64_t changed = 0, positions = 0, unmapped = 0;
};

struct EvalReport {
  double clean_bleu = 0.0;
  std::vector<GridEntry> grid;  // |kinds| x |fractions| rows
  model::DecodeConfig decode;
  bool smoothing = true;
  std::string checkpoint_id;
  std::uint64_t seed = 0;
};

struct SweepConfig {
  std::vector<NoiseKind> kinds;
  std::vector<double> fractions;
  model::DecodeConfig decode;
  bool smoothing = true;
  std::string checkpoint_id;
  std::uint64_t seed = 0;
  int threads = 1;
};

// Decodes each perturbed variant of the test set and scores it against the
// references (end-of-sentence stripped). The fraction-0 cell reuses the
// clean decode, so it matches clean_bleu bit for bit.
EvalReport robustness_sweep(model::Parameters& params,
                            const std::vector<std::vector<int>>& src,
                            const std::vector<std::vector<int>>& refs, const Lexicon& lexicon,
                            const SweepConfig& cfg);

std::string report_to_json(const EvalReport& report);
std::string report_to_csv(const EvalReport& report);  // kind,fraction,bleu rows
void save_report(const EvalReport& report, const std::string& json_path,
                 const std::string& csv_path);

}  // namespace f2x::eval
