#include "f2x/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace f2x::eval {

using ag::TensorError;

namespace {

using NgramCounts = std::map<std::vector<int>, std::int64_t>;

NgramCounts count_ngrams(const std::vector<int>& sent, int n) {
  NgramCounts out;
  if (static_cast<int>(sent.size()) < n) return out;
  for (std::size_t i = 0; i + n <= sent.size(); ++i) {
    ++out[std::vector<int>(sent.begin() + i, sent.begin() + i + n)];
  }
  return out;
}

}  // namespace

double corpus_bleu(const std::vector<std::vector<int>>& hypotheses,
                   const std::vector<std::vector<int>>& references, int max_n, bool smoothing) {
  if (hypotheses.empty()) throw TensorError("corpus_bleu: empty corpus");
  if (hypotheses.size() != references.size()) {
    throw TensorError("corpus_bleu: hypothesis and reference counts differ");
  }
  if (max_n < 1) throw TensorError("corpus_bleu: max_n must be >= 1");

  std::int64_t hyp_len = 0, ref_len = 0;
  std::vector<std::int64_t> matches(max_n, 0), totals(max_n, 0);
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& hyp = hypotheses[s];
    const auto& ref = references[s];
    hyp_len += static_cast<std::int64_t>(hyp.size());
    ref_len += static_cast<std::int64_t>(ref.size());
    for (int n = 1; n <= max_n; ++n) {
      NgramCounts h = count_ngrams(hyp, n);
      NgramCounts r = count_ngrams(ref, n);
      for (const auto& [gram, count] : h) {
        totals[n - 1] += count;
        auto it = r.find(gram);
        if (it != r.end()) matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  if (hyp_len == 0) return 0.0;

  double log_prec = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    std::int64_t m = matches[n - 1], t = totals[n - 1];
    double p;
    if (m > 0) {
      p = static_cast<double>(m) / t;
    } else if (smoothing && n >= 2) {
      p = 1.0 / (t + 1);
    } else {
      return 0.0;
    }
    log_prec += std::log(p) / max_n;
  }
  double bp = hyp_len >= ref_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(ref_len) / hyp_len);
  return 100.0 * bp * std::exp(log_prec);
}

Lexicon Lexicon::from_content_permutation(const std::vector<int>& perm) {
  // Joint vocabulary layout: source content ids start right after the
  // reserved ids, the target block follows the source block.
  Lexicon lex;
  const int tgt_offset = model::kNumSpecials + static_cast<int>(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    lex.map[static_cast<int>(i) + model::kNumSpecials] = perm[i] + tgt_offset;
  }
  return lex;
}

Lexicon Lexicon::from_alignments(const std::vector<std::vector<int>>& src,
                                 const std::vector<std::vector<int>>& tgt,
                                 const std::vector<model::AlignmentMatrix>& alignments) {
  if (src.size() != tgt.size() || src.size() != alignments.size()) {
    throw TensorError("lexicon: corpus and alignment sizes differ");
  }
  Lexicon lex;
  for (std::size_t s = 0; s < src.size(); ++s) {
    const model::AlignmentMatrix& a = alignments[s];
    for (int i = 0; i < static_cast<int>(src[s].size()) && i < a.cols; ++i) {
      int best_j = -1;
      double best = 0.0;
      for (int j = 0; j < a.rows && j < static_cast<int>(tgt[s].size()); ++j) {
        if (a.at(j, i) > best) {
          best = a.at(j, i);
          best_j = j;
        }
      }
      if (best_j >= 0 && tgt[s][best_j] >= model::kNumSpecials) {
        lex.map[src[s][i]] = tgt[s][best_j];
      }
    }
  }
  return lex;
}

std::string noise_kind_name(NoiseKind kind) {
  return kind == NoiseKind::CodeSwitch ? "code_switch" : "drop_word";
}

NoiseKind noise_kind_from_name(const std::string& name) {
  if (name == "code_switch" || name == "cs") return NoiseKind::CodeSwitch;
  if (name == "drop_word" || name == "dw") return NoiseKind::DropWord;
  throw TensorError("unknown noise kind: " + name);
}

PerturbResult perturb_code_switch(const std::vector<std::vector<int>>& src,
                                  const Lexicon& lexicon, double fraction,
                                  std::mt19937_64& rng) {
  if (fraction < 0.0 || fraction > 1.0) throw TensorError("perturb: fraction in [0, 1]");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PerturbResult out;
  out.sentences = src;
  for (auto& sent : out.sentences) {
    for (int& tok : sent) {
      ++out.positions;
      if (fraction == 0.0 || unit(rng) >= fraction) continue;
      auto it = lexicon.map.find(tok);
      if (it == lexicon.map.end()) {
        ++out.unmapped;
      } else {
        tok = it->second;
        ++out.changed;
      }
    }
  }
  return out;
}

PerturbResult perturb_drop_word(const std::vector<std::vector<int>>& src, double fraction,
                                std::mt19937_64& rng) {
  if (fraction < 0.0 || fraction > 1.0) throw TensorError("perturb: fraction in [0, 1]");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PerturbResult out;
  for (const auto& sent : src) {
    std::vector<int> kept;
    for (int tok : sent) {
      ++out.positions;
      if (fraction > 0.0 && unit(rng) < fraction) {
        ++out.changed;
      } else {
        kept.push_back(tok);
      }
    }
    if (kept.empty() && !sent.empty()) {
      // every sentence keeps at least one token; retain the first and give
      // back one drop
      kept.push_back(sent.front());
      --out.changed;
    }
    out.sentences.push_back(std::move(kept));
  }
  return out;
}

PerturbResult perturb(const std::vector<std::vector<int>>& src, NoiseKind kind, double fraction,
                      const Lexicon* lexicon, std::mt19937_64& rng) {
  if (kind == NoiseKind::CodeSwitch) {
    if (!lexicon) throw TensorError("perturb: code switching needs a lexicon");
    return perturb_code_switch(src, *lexicon, fraction, rng);
  }
  return perturb_drop_word(src, fraction, rng);
}

std::vector<std::vector<int>> decode_corpus(model::Parameters& params,
                                            const std::vector<std::vector<int>>& src,
                                            const model::DecodeConfig& cfg, int threads) {
  std::vector<std::vector<int>> out(src.size());
  if (threads <= 1 || src.size() <= 1) {
    for (std::size_t s = 0; s < src.size(); ++s) out[s] = model::decode(params, src[s], cfg);
    return out;
  }
  int workers = std::min<int>(threads, static_cast<int>(src.size()));
  std::vector<model::Parameters> copies(workers, params);  // decode mutates config scratch
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (std::size_t s = w; s < src.size(); s += workers) {
          out[s] = model::decode(copies[w], src[s], cfg);
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return out;
}

namespace {

std::vector<std::vector<int>> strip_eos(const std::vector<std::vector<int>>& refs) {
  std::vector<std::vector<int>> out = refs;
  for (auto& r : out) {
    while (!r.empty() && r.back() == model::kEos) r.pop_back();
  }
  return out;
}

}  // namespace

EvalReport robustness_sweep(model::Parameters& params,
                            const std::vector<std::vector<int>>& src,
                            const std::vector<std::vector<int>>& refs, const Lexicon& lexicon,
                            const SweepConfig& cfg) {
  if (src.size() != refs.size() || src.empty()) {
    throw TensorError("robustness_sweep: source and reference corpora must pair up");
  }
  if (cfg.kinds.empty() || cfg.fractions.empty()) {
    throw TensorError("robustness_sweep: need at least one kind and one fraction");
  }
  EvalReport report;
  report.decode = cfg.decode;
  report.smoothing = cfg.smoothing;
  report.checkpoint_id = cfg.checkpoint_id;
  report.seed = cfg.seed;

  std::vector<std::vector<int>> stripped = strip_eos(refs);
  std::vector<std::vector<int>> clean_hyp = decode_corpus(params, src, cfg.decode, cfg.threads);
  report.clean_bleu = corpus_bleu(clean_hyp, stripped, 4, cfg.smoothing);

  std::mt19937_64 rng(cfg.seed);
  for (NoiseKind kind : cfg.kinds) {
    for (double fraction : cfg.fractions) {
      GridEntry entry;
      entry.kind = kind;
      entry.fraction = fraction;
      if (fraction == 0.0) {
        entry.bleu = report.clean_bleu;
        for (const auto& s : src) entry.positions += static_cast<std::int64_t>(s.size());
      } else {
        PerturbResult p = perturb(src, kind, fraction, &lexicon, rng);
        entry.positions = p.positions;
        entry.changed = p.changed;
        entry.unmapped = p.unmapped;
        std::vector<std::vector<int>> hyp =
            decode_corpus(params, p.sentences, cfg.decode, cfg.threads);
        entry.bleu = corpus_bleu(hyp, stripped, 4, cfg.smoothing);
      }
      report.grid.push_back(entry);
    }
  }
  return report;
}

std::string report_to_json(const EvalReport& report) {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "{\n  \"clean_bleu\": %.17g,\n  \"smoothing\": %s,\n  \"beam_size\": %d,\n"
                "  \"length_penalty\": %.17g,\n  \"checkpoint\": \"%s\",\n  \"seed\": %llu,\n"
                "  \"grid\": [",
                report.clean_bleu, report.smoothing ? "true" : "false", report.decode.beam_size,
                report.decode.length_penalty, report.checkpoint_id.c_str(),
                static_cast<unsigned long long>(report.seed));
  out << buf;
  for (std::size_t i = 0; i < report.grid.size(); ++i) {
    const GridEntry& e = report.grid[i];
    std::snprintf(buf, sizeof(buf),
                  "%s\n    {\"kind\": \"%s\", \"fraction\": %.17g, \"bleu\": %.17g, "
                  "\"changed\": %lld, \"positions\": %lld, \"unmapped\": %lld}",
                  i ? "," : "", noise_kind_name(e.kind).c_str(), e.fraction, e.bleu,
                  static_cast<long long>(e.changed), static_cast<long long>(e.positions),
                  static_cast<long long>(e.unmapped));
    out << buf;
  }
  out << "\n  ]\n}\n";
  return out.str();
}

std::string report_to_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "kind,fraction,bleu\n";
  char buf[128];
  for (const GridEntry& e : report.grid) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g\n", noise_kind_name(e.kind).c_str(),
                  e.fraction, e.bleu);
    out << buf;
  }
  return out.str();
}

void save_report(const EvalReport& report, const std::string& json_path,
                 const std::string& csv_path) {
  std::ofstream json(json_path);
  if (!json) throw TensorError("cannot write report: " + json_path);
  json << report_to_json(report);
  std::ofstream csv(csv_path);
  if (!csv) throw TensorError("cannot write report: " + csv_path);
  csv << report_to_csv(report);
}

}  // namespace f2x::eval
