#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "f2x/tensor.hpp"

namespace f2x::model {

// Reserved vocabulary ids; synthetic vocabularies start content tokens above.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kMask = 3;
inline constexpr int kUnk = 4;
inline constexpr int kNumSpecials = 5;

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int num_heads = 4;
  int num_encoder_layers = 2;
  int num_decoder_layers = 2;
  int feedforward_dim = 128;
  double dropout_rate = 0.1;
  double label_smoothing = 0.1;
  int max_positions = 256;

  void validate() const;
};

// Named parameter map with a fixed iteration order.
struct Parameters {
  ModelConfig config;
  std::vector<std::pair<std::string, ag::Tensor>> named;

  static Parameters init(const ModelConfig& cfg, std::uint64_t seed);

  ag::Tensor& at(const std::string& name);
  const ag::Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const;
  std::int64_t total_size() const;
};

// Parameters bound to a tape as differentiable leaves. All forward functions
// accept a Bound; pass graph == nullptr for inference (no tape, no gradient).
struct Bound {
  Parameters* params = nullptr;
  ag::Graph* graph = nullptr;
  std::vector<ag::Tensor> leaves;  // same order as params->named

  Bound(Parameters& p, ag::Graph* g);
  const ag::Tensor& at(const std::string& name) const;
  const std::vector<double>* grad(const std::string& name) const;
};

// Padded token matrix [B, L] in row-major order with per-sentence lengths.
struct TokenBatch {
  int B = 0;
  int L = 0;
  std::vector<int> ids;   // B*L, kPad-filled past each length
  std::vector<int> lens;  // B

  static TokenBatch from_sentences(const std::vector<std::vector<int>>& sents);
  int at(int b, int j) const { return ids[static_cast<std::size_t>(b) * L + j]; }
};

// Row-stochastic J x I matrix; rows beyond the target length are zero.
struct AlignmentMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  double at(int j, int i) const { return a[static_cast<std::size_t>(j) * cols + i]; }
  double& at(int j, int i) { return a[static_cast<std::size_t>(j) * cols + i]; }
};

// Decoder input: target tokens (shifted internally to <s>, y1..y_{J-1}) or
// precomputed input embeddings e(z) of shape [B, J, d_model].
struct DecoderInput {
  std::optional<TokenBatch> targets;
  std::optional<ag::Tensor> embeddings;  // raw embedding-table rows, unscaled
  std::vector<int> lens;                 // required with embeddings

  static DecoderInput from_targets(TokenBatch y);
  static DecoderInput from_embeddings(ag::Tensor e, std::vector<int> lens);
};

struct ForwardRecord {
  ag::Tensor logits;  // [B, J, V]
  int B = 0, J = 0, I = 0;
  std::vector<int> src_lens, tgt_lens;
  std::vector<char> src_valid;  // B*I, 0 where the source token is padding
  // Raw cross-attention logits (scaled by 1/sqrt(d_head), before masking),
  // per decoder layer and head; each is a B*J*I array.
  std::vector<std::vector<std::vector<double>>> cross_scores;
  // Cross-attention probabilities actually used in the forward pass.
  std::vector<std::vector<std::vector<double>>> cross_probs;
};

// Optional source-side embedding input (mixup path). When src_embeddings is
// set, src token ids are ignored except for lengths/padding.
struct SourceInput {
  std::optional<TokenBatch> tokens;
  std::optional<ag::Tensor> embeddings;  // [B, I, d_model], raw table rows
  std::vector<int> lens;
  std::vector<char> valid;  // optional explicit validity; defaults to non-pad

  static SourceInput from_tokens(TokenBatch x);
  static SourceInput from_embeddings(ag::Tensor e, std::vector<int> lens);
};

ForwardRecord forward_teacher_forced(const Bound& bound, const SourceInput& src,
                                     const DecoderInput& dec, std::mt19937_64* dropout_rng);

// Smoothed one-hot rows for a token sequence: (1-eps) on the token, eps/(V-1)
// elsewhere.
std::vector<double> label_rows(const std::vector<int>& tokens, int vocab_size, double eps);

// Temperature-adjusted average of cross-attention over all layers and heads.
// inv_tau == 0 gives uniform rows over valid source positions. Output is
// detached from the tape by construction.
std::vector<AlignmentMatrix> extract_alignment(const ForwardRecord& record, double inv_tau);

struct TranslationLoss {
  ag::Tensor loss;  // scalar: sum of positionwise KL over non-pad positions
  std::int64_t token_count = 0;
  std::vector<AlignmentMatrix> alignments;
  // Stop-gradient predictive distributions, B*J rows of V probabilities.
  std::vector<double> predictions;
  ForwardRecord record;
};

TranslationLoss translation_loss(const Bound& bound, const TokenBatch& src, const TokenBatch& tgt,
                                 double inv_tau, std::mt19937_64* dropout_rng);

struct DecodeConfig {
  int beam_size = 4;
  double length_penalty = 0.6;
  int max_len = 0;  // 0: use model max_positions
};

std::vector<int> decode(Parameters& params, const std::vector<int>& src, const DecodeConfig& cfg);

// Versioned binary container; round-trips bit-exactly.
void save_checkpoint(const Parameters& params, const std::string& path);
// Loads into an existing parameter set; shapes must match.
void load_checkpoint(Parameters& params, const std::string& path);
// Raw record access, used for optimizer state.
void save_named_tensors(const std::vector<std::pair<std::string, ag::Tensor>>& named,
                        const std::string& path);
std::vector<std::pair<std::string, ag::Tensor>> load_named_tensors(const std::string& path);

}  // namespace f2x::model
