#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "f2x/model.hpp"

namespace f2x::data {

// Closed whitespace vocabulary; id = line index in the file, with the
// reserved tokens at ids 0..4.
struct Vocab {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;

  static Vocab with_content_words(int count, const std::string& prefix);
  // Joint two-language vocabulary: reserved ids, then `count` source words
  // ("s0".."s{n}"), then `count` target words ("t0".."t{n}"). The languages
  // occupy disjoint id blocks so a code-switched source is distinguishable
  // from a clean one.
  static Vocab with_language_pair(int count);
  static Vocab load(const std::string& path);
  void save(const std::string& path) const;

  int size() const { return static_cast<int>(tokens.size()); }
  // unknown words map to the <unk> id
  int id(const std::string& token) const;
  const std::string& token(int id) const;
};

struct Corpus {
  std::vector<std::vector<int>> sentences;
  std::string language;

  static Corpus load(const std::string& path, const Vocab& vocab, std::string language);
  void save(const std::string& path, const Vocab& vocab) const;
  void validate(int vocab_size) const;  // ids in range, no empty sentences
};

// Gold word alignments, one "target-source" pair list per parallel sentence.
using SentenceAlignment = std::vector<std::pair<int, int>>;
void save_alignments(const std::vector<SentenceAlignment>& alignments, const std::string& path);
std::vector<SentenceAlignment> load_alignments(const std::string& path);

struct SynthTaskSpec {
  int content_words = 97;        // per language; joint vocabulary is 5 + 2*97 = 199 ids
  int reorder_window = 2;        // bounded local reordering of the target
  int min_len = 6, max_len = 18; // source content length range
  std::vector<int> lexicon;      // permutation of 0..content_words-1; empty: random
  std::uint64_t seed = 1;
};

struct SynthData {
  Vocab vocab;        // joint two-language vocabulary (disjoint id blocks)
  int tgt_offset = 0; // first target-language id: kNumSpecials + content_words
  Corpus src, tgt;    // parallel pair, aligned by index
  Corpus mono;        // target-language, disjoint from the parallel targets
  std::vector<SentenceAlignment> gold;  // per parallel pair
  std::vector<int> lexicon;             // content-word bijection actually used
};

// Parallel pairs are lexicon substitutions of the source with bounded local
// reordering, so the gold alignment is known exactly. Target and mono
// sentences end with the end-of-sentence token; sources do not.
SynthData generate_synthetic(const SynthTaskSpec& spec, int n_parallel, int n_mono);

// Appendix-style length pairing: round r assigns every unassigned parallel
// example to an unused mono sentence within length gap r, preferring the
// smallest gap; mono sentences are reused only after all have been consumed.
// Gaps compare the parallel source length with the mono length.
std::vector<int> pair_mono_by_length(const std::vector<std::vector<int>>& src,
                                     const std::vector<std::vector<int>>& mono);

struct PairedBatch {
  std::vector<int> parallel;  // indices into the parallel corpus
  std::vector<int> mono;      // assigned mono sentence index, same order
};

// Length-bucketed batches: the token budget is split evenly across the
// source, target, and mono streams, and each stream's padded token count
// stays within its third. Batch order is shuffled deterministically.
std::vector<PairedBatch> make_batches(const std::vector<std::vector<int>>& src,
                                      const std::vector<std::vector<int>>& tgt,
                                      const std::vector<std::vector<int>>& mono,
                                      const std::vector<int>& assignment, int tokens_per_batch,
                                      std::uint64_t seed);

}  // namespace f2x::data
