#include "f2x/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace f2x::data {

using ag::TensorError;

namespace {

const char* kSpecialNames[model::kNumSpecials] = {"<pad>", "<s>", "</s>", "<mask>", "<unk>"};

}  // namespace

Vocab Vocab::with_content_words(int count, const std::string& prefix) {
  if (count <= 0) throw TensorError("vocab: need at least one content word");
  Vocab v;
  for (const char* s : kSpecialNames) v.tokens.push_back(s);
  for (int i = 0; i < count; ++i) v.tokens.push_back(prefix + std::to_string(i));
  for (int i = 0; i < v.size(); ++i) v.index[v.tokens[i]] = i;
  return v;
}

Vocab Vocab::with_language_pair(int count) {
  Vocab v = with_content_words(count, "s");
  for (int i = 0; i < count; ++i) v.tokens.push_back("t" + std::to_string(i));
  v.index.clear();
  for (int i = 0; i < v.size(); ++i) v.index[v.tokens[i]] = i;
  return v;
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw TensorError("vocab: cannot open " + path);
  Vocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) throw TensorError("vocab: empty line in " + path);
    if (v.index.count(line)) throw TensorError("vocab: duplicate token " + line);
    v.index[line] = v.size();
    v.tokens.push_back(line);
  }
  if (v.size() < model::kNumSpecials) throw TensorError("vocab: missing reserved tokens");
  return v;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw TensorError("vocab: cannot write " + path);
  for (const std::string& t : tokens) out << t << "\n";
}

int Vocab::id(const std::string& token) const {
  auto it = index.find(token);
  return it == index.end() ? model::kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw TensorError("vocab: id out of range");
  return tokens[id];
}

Corpus Corpus::load(const std::string& path, const Vocab& vocab, std::string language) {
  std::ifstream in(path);
  if (!in) throw TensorError("corpus: cannot open " + path);
  Corpus c;
  c.language = std::move(language);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::vector<int> sent;
    std::string w;
    while (ss >> w) sent.push_back(vocab.id(w));
    if (sent.empty()) throw TensorError("corpus: empty sentence in " + path);
    c.sentences.push_back(std::move(sent));
  }
  return c;
}

void Corpus::save(const std::string& path, const Vocab& vocab) const {
  std::ofstream out(path);
  if (!out) throw TensorError("corpus: cannot write " + path);
  for (const auto& sent : sentences) {
    for (std::size_t i = 0; i < sent.size(); ++i) {
      if (i) out << ' ';
      out << vocab.token(sent[i]);
    }
    out << "\n";
  }
}

void Corpus::validate(int vocab_size) const {
  for (const auto& sent : sentences) {
    if (sent.empty()) throw TensorError("corpus: empty sentence");
    for (int t : sent) {
      if (t < 0 || t >= vocab_size) throw TensorError("corpus: token id out of range");
    }
  }
}

void save_alignments(const std::vector<SentenceAlignment>& alignments, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw TensorError("alignments: cannot write " + path);
  for (const SentenceAlignment& sent : alignments) {
    for (std::size_t k = 0; k < sent.size(); ++k) {
      if (k) out << ' ';
      out << sent[k].first << '-' << sent[k].second;
    }
    out << "\n";
  }
}

std::vector<SentenceAlignment> load_alignments(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw TensorError("alignments: cannot open " + path);
  std::vector<SentenceAlignment> out;
  std::string line;
  while (std::getline(in, line)) {
    SentenceAlignment sent;
    std::istringstream ss(line);
    std::string pair;
    while (ss >> pair) {
      const std::size_t dash = pair.find('-');
      if (dash == std::string::npos) throw TensorError("alignments: malformed pair " + pair);
      sent.emplace_back(std::stoi(pair.substr(0, dash)), std::stoi(pair.substr(dash + 1)));
    }
    out.push_back(std::move(sent));
  }
  return out;
}

SynthData generate_synthetic(const SynthTaskSpec& spec, int n_parallel, int n_mono) {
  if (n_parallel < 0 || n_mono < 0) throw TensorError("generate_synthetic: negative corpus size");
  if (spec.content_words <= 0 || spec.min_len <= 0 || spec.max_len < spec.min_len) {
    throw TensorError("generate_synthetic: bad task shape");
  }
  if (spec.reorder_window < 0) throw TensorError("generate_synthetic: negative reorder window");

  std::mt19937_64 rng(spec.seed);
  SynthData d;
  d.vocab = Vocab::with_language_pair(spec.content_words);
  d.tgt_offset = model::kNumSpecials + spec.content_words;
  d.src.language = "src";
  d.tgt.language = "tgt";
  d.mono.language = "tgt";

  d.lexicon = spec.lexicon;
  if (d.lexicon.empty()) {
    d.lexicon.resize(spec.content_words);
    std::iota(d.lexicon.begin(), d.lexicon.end(), 0);
    std::shuffle(d.lexicon.begin(), d.lexicon.end(), rng);
  }
  {
    if (static_cast<int>(d.lexicon.size()) != spec.content_words) {
      throw TensorError("generate_synthetic: lexicon size does not match the vocabulary");
    }
    std::vector<char> seen(spec.content_words, 0);
    for (int t : d.lexicon) {
      if (t < 0 || t >= spec.content_words || seen[t]) {
        throw TensorError("generate_synthetic: lexicon is not a bijection on content words");
      }
      seen[t] = 1;
    }
  }

  std::uniform_int_distribution<int> len_dist(spec.min_len, spec.max_len);
  std::uniform_int_distribution<int> word_dist(0, spec.content_words - 1);
  std::uniform_real_distribution<double> key_jitter(0.0, spec.reorder_window + 1.0);

  for (int s = 0; s < n_parallel; ++s) {
    const int len = len_dist(rng);
    std::vector<int> src(len);
    for (int& t : src) t = model::kNumSpecials + word_dist(rng);

    // target order: bounded local reordering of source positions
    std::vector<std::pair<double, int>> keys(len);
    for (int i = 0; i < len; ++i) keys[i] = {i + key_jitter(rng), i};
    std::stable_sort(keys.begin(), keys.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });

    std::vector<int> tgt;
    SentenceAlignment gold;
    for (int j = 0; j < len; ++j) {
      const int i = keys[j].second;
      tgt.push_back(d.tgt_offset + d.lexicon[src[i] - model::kNumSpecials]);
      gold.emplace_back(j, i);
    }
    tgt.push_back(model::kEos);
    d.src.sentences.push_back(std::move(src));
    d.tgt.sentences.push_back(std::move(tgt));
    d.gold.push_back(std::move(gold));
  }

  std::set<std::vector<int>> parallel_targets(d.tgt.sentences.begin(), d.tgt.sentences.end());
  for (int s = 0; s < n_mono; ++s) {
    std::vector<int> sent;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const int len = len_dist(rng);
      sent.clear();
      for (int i = 0; i < len; ++i) sent.push_back(d.tgt_offset + word_dist(rng));
      sent.push_back(model::kEos);
      if (!parallel_targets.count(sent)) break;
      sent.clear();
    }
    if (sent.empty()) {
      throw TensorError("generate_synthetic: could not draw a mono sentence disjoint from "
                        "the parallel targets");
    }
    d.mono.sentences.push_back(std::move(sent));
  }
  return d;
}

std::vector<int> pair_mono_by_length(const std::vector<std::vector<int>>& src,
                                     const std::vector<std::vector<int>>& mono) {
  if (mono.empty()) throw TensorError("pair_mono_by_length: empty mono corpus");
  const int P = static_cast<int>(src.size());
  std::vector<int> assignment(P, -1);

  // unused mono indices bucketed by length, consumed front to back
  std::map<int, std::vector<int>> buckets;
  auto refill = [&] {
    buckets.clear();
    for (int j = static_cast<int>(mono.size()) - 1; j >= 0; --j) {
      buckets[static_cast<int>(mono[j].size())].push_back(j);
    }
  };
  refill();

  int max_gap = 0;
  for (const auto& [len, v] : buckets) max_gap = std::max(max_gap, len);
  for (const auto& s : src) max_gap = std::max(max_gap, static_cast<int>(s.size()));

  int assigned = 0;
  while (assigned < P) {
    const int before = assigned;
    for (int r = 0; r <= max_gap && assigned < P; ++r) {
      for (int p = 0; p < P; ++p) {
        if (assignment[p] >= 0) continue;
        const int want = static_cast<int>(src[p].size());
        for (int g = 0; g <= r; ++g) {
          bool done = false;
          for (const int len : {want + g, want - g}) {
            auto it = buckets.find(len);
            if (it == buckets.end()) continue;
            assignment[p] = it->second.back();
            it->second.pop_back();
            if (it->second.empty()) buckets.erase(it);
            ++assigned;
            done = true;
            break;
          }
          if (done) break;
        }
      }
    }
    if (assigned == before) {
      // every mono sentence is in use; allow reuse and relax again
      refill();
    }
  }
  return assignment;
}

std::vector<PairedBatch> make_batches(const std::vector<std::vector<int>>& src,
                                      const std::vector<std::vector<int>>& tgt,
                                      const std::vector<std::vector<int>>& mono,
                                      const std::vector<int>& assignment, int tokens_per_batch,
                                      std::uint64_t seed) {
  const int P = static_cast<int>(src.size());
  if (P == 0) throw TensorError("make_batches: empty corpus");
  if (tgt.size() != src.size() || assignment.size() != src.size()) {
    throw TensorError("make_batches: corpus and assignment sizes disagree");
  }
  const int budget = tokens_per_batch / 3;
  for (int p = 0; p < P; ++p) {
    const int need = static_cast<int>(std::max(
        {src[p].size(), tgt[p].size(), mono[assignment[p]].size()}));
    if (need > budget) {
      throw TensorError("make_batches: token budget smaller than the longest sentence");
    }
  }

  std::vector<int> order(P);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (src[a].size() != src[b].size()) return src[a].size() < src[b].size();
    return a < b;
  });

  std::vector<PairedBatch> batches;
  PairedBatch cur;
  int max_src = 0, max_tgt = 0, max_mono = 0;
  for (int idx : order) {
    const int n = static_cast<int>(cur.parallel.size());
    const int s = std::max(max_src, static_cast<int>(src[idx].size()));
    const int t = std::max(max_tgt, static_cast<int>(tgt[idx].size()));
    const int u = std::max(max_mono, static_cast<int>(mono[assignment[idx]].size()));
    if (n > 0 && ((n + 1) * s > budget || (n + 1) * t > budget || (n + 1) * u > budget)) {
      batches.push_back(std::move(cur));
      cur = PairedBatch{};
      max_src = max_tgt = max_mono = 0;
    }
    cur.parallel.push_back(idx);
    cur.mono.push_back(assignment[idx]);
    max_src = std::max(max_src, static_cast<int>(src[idx].size()));
    max_tgt = std::max(max_tgt, static_cast<int>(tgt[idx].size()));
    max_mono = std::max(max_mono, static_cast<int>(mono[assignment[idx]].size()));
  }
  if (!cur.parallel.empty()) batches.push_back(std::move(cur));

  std::mt19937_64 rng(seed);
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

}  // namespace f2x::data
