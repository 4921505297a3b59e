#pragma once

// Depth-recurrent encoder-decoder: one shared attention+transition block
// applied T times to every position in parallel (or per-step copies when
// weight tying is off, which recovers a fixed-stack transformer).

#include <optional>
#include <string>
#include <vector>

#include "ut/tensor.hpp"

namespace ut {

enum class TransitionKind { kFullyConnected, kSeparableConv };

std::string to_string(TransitionKind k);
TransitionKind transition_from_string(const std::string& s);

struct ModelConfig {
  int d = 64;             // model width
  int heads = 4;          // attention heads
  int vocab_size = 14;
  int t_max = 6;          // recurrent steps
  TransitionKind transition = TransitionKind::kFullyConnected;
  int ff_hidden = 0;      // 0 -> 4*d
  int conv_kernel = 3;    // odd
  double dropout_rate = 0.0;
  bool act_enabled = false;
  double act_threshold = 0.99;
  int act_max_steps = 0;  // 0 -> t_max
  double act_ponder_tau = 0.0;
  bool tie_weights = true;
  int max_src_len = 64;
  int max_tgt_len = 64;
  double layer_norm_eps = 1e-6;

  int head_dim() const { return d / heads; }
  int ff_width() const { return ff_hidden > 0 ? ff_hidden : 4 * d; }
  int act_steps() const { return act_max_steps > 0 ? act_max_steps : t_max; }
  // Throws config_error listing every problem at once.
  void validate() const;
};

struct AttentionWeights {
  TensorPtr wq, wk, wv, wo;  // each [d x d]; head i owns column block i
};

struct FcTransitionWeights {
  TensorPtr w1, b1, w2, b2;
};

struct ConvTransitionWeights {
  TensorPtr depthwise;  // [d x kernel]
  TensorPtr pointwise;  // [d x d]
  TensorPtr bias;       // [d]
};

struct LayerNormWeights {
  TensorPtr gain, bias;
};

struct BlockWeights {
  AttentionWeights self_attn;
  std::optional<AttentionWeights> cross_attn;  // decoder blocks only
  std::optional<FcTransitionWeights> fc;
  std::optional<ConvTransitionWeights> conv;
  LayerNormWeights ln_self;
  std::optional<LayerNormWeights> ln_cross;
  LayerNormWeights ln_trans;
};

struct HaltingUnit {
  TensorPtr w;  // [d x 1]
  TensorPtr b;  // [1]
};

struct Parameters {
  ModelConfig cfg;
  TensorPtr token_embedding;          // [V x d]
  std::vector<BlockWeights> encoder;  // one entry when tied, else t_max
  std::vector<BlockWeights> decoder;
  TensorPtr output_proj;              // [d x V]
  std::optional<HaltingUnit> enc_halting, dec_halting;

  static Parameters init(const ModelConfig& cfg, Rng& rng);

  // t is the 1-based recurrent step.
  const BlockWeights& enc_block(int t) const;
  const BlockWeights& dec_block(int t) const;

  // Deterministic (name, tensor) enumeration; the checkpoint and optimizer
  // orderings both come from here.
  std::vector<std::pair<std::string, TensorPtr>> named() const;
  std::size_t scalar_count() const;
};

// Row ranges of a packed (batch*len x d) matrix belonging to each sample.
using Segments = std::vector<Segment>;

// Captured attention weights for export: one entry per (step, site).
struct AttnRecord {
  int step = 0;
  std::string site;  // "encoder_self" | "decoder_self" | "decoder_cross"
  // head -> row-major nq x nk matrix
  std::vector<std::vector<double>> heads;
  int nq = 0, nk = 0;
};

struct AttnTrace {
  std::vector<AttnRecord> records;
};

// ---- building blocks ----

// softmax(q k^T / sqrt(d_h) + mask) v for one head. mask (optional) is
// additive with entries in {0, -inf}; a fully masked row is an error.
TensorPtr scaled_dot_attention(const TensorPtr& q, const TensorPtr& k,
                               const TensorPtr& v,
                               const TensorPtr& mask = nullptr,
                               std::vector<double>* weights_out = nullptr);

// Multi-head attention over packed batches. Queries come from q_in rows of
// q_segs; keys/values from kv_in rows of kv_segs (per sample). kv segments
// cover only real tokens, which is how key-side padding is excluded.
// `causal` restricts sample-local query row i to keys 0..i.
TensorPtr multi_head_attention(const TensorPtr& q_in, const TensorPtr& kv_in,
                               const AttentionWeights& w, int heads,
                               const Segments& q_segs, const Segments& kv_segs,
                               bool causal, AttnRecord* record = nullptr);

// Single-sample wrappers matching the classic signatures.
TensorPtr multi_head_self_attention(const TensorPtr& h,
                                    const AttentionWeights& w, int heads,
                                    bool causal = false);
TensorPtr cross_attention(const TensorPtr& h_dec, const TensorPtr& h_enc,
                          const AttentionWeights& w, int heads);

// [n x n] additive mask: 0 on and below the diagonal, -inf above.
TensorPtr causal_mask(int n);

// Fixed coordinate signal for position+step: even slot 2j holds
// sin(i/10000^{2j/d}) + sin(t/10000^{2j/d}), odd slot the cosine pair.
// Positions are 1-based; row r encodes position offset+r+1.
TensorPtr coordinate_embeddings(int m, int t, int d, int offset = 0);
// Packed-batch variant: sample s contributes `len` rows at positions
// offsets[s]+1 .. offsets[s]+len.
TensorPtr coordinate_embeddings_batch(const Segments& segs,
                                      const std::vector<int>& offsets, int t,
                                      int d);
// The two addends of the coordinate signal, exposed for the separability
// property: coordinate_embeddings == position_table rows + step_vector.
std::vector<double> sinusoid_position_row(int position, int d);
std::vector<double> sinusoid_step_vector(int t, int d);

TensorPtr transition_fc(const TensorPtr& a, const FcTransitionWeights& w);
TensorPtr transition_sepconv(const TensorPtr& a,
                             const ConvTransitionWeights& w,
                             const Segments& segments, bool causal = false);

struct StepContext {
  const ModelConfig* cfg = nullptr;
  Rng* dropout_rng = nullptr;  // null or training=false disables dropout
  bool training = false;
  AttnTrace* trace = nullptr;
};

// One recurrent encoder update: X = H + P^t;
// A = LN(X + Drop(SelfAttn(X))); H' = LN(A + Drop(Transition(A))).
TensorPtr encoder_step(const TensorPtr& h_prev, int t, const BlockWeights& w,
                       const StepContext& ctx, const Segments& segs,
                       const Segments& kv_segs,
                       const std::vector<int>& offsets);

// Decoder update: adds P^t, then causal self-attention, cross-attention on
// the frozen encoder output, and the transition, each with residual + norm.
TensorPtr decoder_step(const TensorPtr& s_prev, const TensorPtr& h_enc,
                       int t, const BlockWeights& w, const StepContext& ctx,
                       const Segments& dec_segs, const Segments& enc_kv_segs,
                       const std::vector<int>& offsets);

// Padded token layout of a batch, shared by training and decoding.
struct PackedSeq {
  int batch = 0;
  int len = 0;                  // padded length
  std::vector<int> tokens;      // batch*len ids, PAD-filled
  std::vector<int> real_len;    // tokens per sample
  std::vector<int> offsets;     // position offset per sample

  Segments full_segs() const;   // every row of each sample
  Segments real_segs() const;   // only real-token rows
  std::vector<double> real_mask() const;  // 1 for real rows, 0 for padding
};

struct StackResult {
  TensorPtr h;                     // final representations (batch*len x d)
  std::vector<double> ponder;      // ACT update counts (empty when off)
  std::vector<double> remainders;  // ACT remainders (values)
  TensorPtr remainders_graph;      // differentiable remainders
  int steps = 0;
};

StackResult run_encoder(const PackedSeq& src, const Parameters& params,
                        const StepContext& ctx);
StackResult run_decoder(const PackedSeq& tgt, const StackResult& enc,
                        const PackedSeq& src, const Parameters& params,
                        const StepContext& ctx);

struct EncoderOutput {
  TensorPtr h;                            // final representations
  std::vector<TensorPtr> per_step_states; // optional trace of H^t
  std::vector<double> ponder;             // per-position updates (ACT only)
  std::vector<double> remainders;         // ACT only
  TensorPtr remainders_graph;             // differentiable, for ponder cost
};

// Fixed-depth encoding of one sample (ACT must be off in cfg).
EncoderOutput encode_fixed(const std::vector<int>& tokens, int offset,
                           const Parameters& params, const StepContext& ctx,
                           bool keep_steps = false);

// softmax(s * O) row-wise.
TensorPtr output_distribution(const TensorPtr& s, const TensorPtr& o);

struct GreedyResult {
  std::vector<int> tokens;  // without BOS/EOS
  bool terminated = false;  // true iff EOS was produced within max_len
};

GreedyResult generate_greedy(const std::vector<int>& src_tokens,
                             const Parameters& params, int max_len,
                             AttnTrace* enc_trace = nullptr,
                             AttnTrace* dec_trace = nullptr,
                             std::vector<double>* enc_ponder = nullptr,
                             std::vector<double>* enc_remainders = nullptr,
                             std::vector<double>* dec_ponder = nullptr,
                             std::vector<double>* dec_remainders = nullptr);

// Lockstep greedy decoding for a batch of sources (inference only).
std::vector<GreedyResult> generate_greedy_batch(
    const std::vector<std::vector<int>>& srcs, const Parameters& params,
    int max_len);

}  // namespace ut
