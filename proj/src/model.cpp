#include "ut/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ut/act.hpp"
#include "ut/kernels.hpp"

namespace ut {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

std::string to_string(TransitionKind k) {
  return k == TransitionKind::kFullyConnected ? "fully_connected"
                                              : "separable_conv";
}

TransitionKind transition_from_string(const std::string& s) {
  if (s == "fully_connected") return TransitionKind::kFullyConnected;
  if (s == "separable_conv") return TransitionKind::kSeparableConv;
  throw config_error("unknown transition kind '" + s +
                     "' (expected fully_connected or separable_conv)");
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  if (d < 2) problems.push_back("d must be >= 2");
  if (d % 2 != 0) problems.push_back("d must be even (coordinate embeddings)");
  if (heads < 1) problems.push_back("heads must be >= 1");
  if (heads >= 1 && d % heads != 0)
    problems.push_back("d must be divisible by heads");
  if (vocab_size < 4)
    problems.push_back("vocab_size must be >= 4 (PAD/BOS/EOS + symbols)");
  if (t_max < 1) problems.push_back("t_max must be >= 1");
  if (conv_kernel < 1 || conv_kernel % 2 == 0)
    problems.push_back("conv_kernel must be odd and >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    problems.push_back("dropout_rate must be in [0,1)");
  if (act_threshold <= 0.0 || act_threshold >= 1.0)
    problems.push_back("act_threshold must be in (0,1)");
  if (act_max_steps < 0) problems.push_back("act_max_steps must be >= 0");
  if (ff_hidden < 0) problems.push_back("ff_hidden must be >= 0");
  if (max_src_len < 1) problems.push_back("max_src_len must be >= 1");
  if (max_tgt_len < 1) problems.push_back("max_tgt_len must be >= 1");
  if (act_ponder_tau < 0.0) problems.push_back("act_ponder_tau must be >= 0");
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw config_error(msg);
  }
}

// ---- parameters ----

namespace {

AttentionWeights init_attention(int d, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionWeights w;
  w.wq = uniform_param({d, d}, s, rng);
  w.wk = uniform_param({d, d}, s, rng);
  w.wv = uniform_param({d, d}, s, rng);
  w.wo = uniform_param({d, d}, s, rng);
  return w;
}

LayerNormWeights init_norm(int d) {
  LayerNormWeights n;
  n.gain = full({d}, 1.0, true);
  n.bias = zeros({d}, true);
  return n;
}

BlockWeights init_block(const ModelConfig& cfg, bool with_cross, Rng& rng) {
  BlockWeights b;
  b.self_attn = init_attention(cfg.d, rng);
  if (with_cross) b.cross_attn = init_attention(cfg.d, rng);
  if (cfg.transition == TransitionKind::kFullyConnected) {
    const int ff = cfg.ff_width();
    FcTransitionWeights t;
    t.w1 = uniform_param({cfg.d, ff}, 1.0 / std::sqrt(double(cfg.d)), rng);
    t.b1 = zeros({ff}, true);
    t.w2 = uniform_param({ff, cfg.d}, 1.0 / std::sqrt(double(ff)), rng);
    t.b2 = zeros({cfg.d}, true);
    b.fc = std::move(t);
  } else {
    ConvTransitionWeights t;
    t.depthwise = uniform_param({cfg.d, cfg.conv_kernel},
                                1.0 / std::sqrt(double(cfg.conv_kernel)), rng);
    t.pointwise =
        uniform_param({cfg.d, cfg.d}, 1.0 / std::sqrt(double(cfg.d)), rng);
    t.bias = zeros({cfg.d}, true);
    b.conv = std::move(t);
  }
  b.ln_self = init_norm(cfg.d);
  if (with_cross) b.ln_cross = init_norm(cfg.d);
  b.ln_trans = init_norm(cfg.d);
  return b;
}

HaltingUnit init_halting(int d, Rng& rng) {
  HaltingUnit h;
  h.w = uniform_param({d, 1}, 1.0 / std::sqrt(double(d)), rng);
  h.b = zeros({1}, true);
  return h;
}

void push_attention(std::vector<std::pair<std::string, TensorPtr>>& out,
                    const std::string& prefix, const AttentionWeights& w) {
  out.emplace_back(prefix + ".wq", w.wq);
  out.emplace_back(prefix + ".wk", w.wk);
  out.emplace_back(prefix + ".wv", w.wv);
  out.emplace_back(prefix + ".wo", w.wo);
}

void push_block(std::vector<std::pair<std::string, TensorPtr>>& out,
                const std::string& prefix, const BlockWeights& b) {
  push_attention(out, prefix + ".self", b.self_attn);
  if (b.cross_attn) push_attention(out, prefix + ".cross", *b.cross_attn);
  if (b.fc) {
    out.emplace_back(prefix + ".fc.w1", b.fc->w1);
    out.emplace_back(prefix + ".fc.b1", b.fc->b1);
    out.emplace_back(prefix + ".fc.w2", b.fc->w2);
    out.emplace_back(prefix + ".fc.b2", b.fc->b2);
  }
  if (b.conv) {
    out.emplace_back(prefix + ".conv.depthwise", b.conv->depthwise);
    out.emplace_back(prefix + ".conv.pointwise", b.conv->pointwise);
    out.emplace_back(prefix + ".conv.bias", b.conv->bias);
  }
  out.emplace_back(prefix + ".ln_self.gain", b.ln_self.gain);
  out.emplace_back(prefix + ".ln_self.bias", b.ln_self.bias);
  if (b.ln_cross) {
    out.emplace_back(prefix + ".ln_cross.gain", b.ln_cross->gain);
    out.emplace_back(prefix + ".ln_cross.bias", b.ln_cross->bias);
  }
  out.emplace_back(prefix + ".ln_trans.gain", b.ln_trans.gain);
  out.emplace_back(prefix + ".ln_trans.bias", b.ln_trans.bias);
}

}  // namespace

Parameters Parameters::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Parameters p;
  p.cfg = cfg;
  p.token_embedding = uniform_param({cfg.vocab_size, cfg.d},
                                    1.0 / std::sqrt(double(cfg.d)), rng);
  const int copies = cfg.tie_weights ? 1 : cfg.t_max;
  for (int i = 0; i < copies; ++i)
    p.encoder.push_back(init_block(cfg, /*with_cross=*/false, rng));
  for (int i = 0; i < copies; ++i)
    p.decoder.push_back(init_block(cfg, /*with_cross=*/true, rng));
  p.output_proj =
      uniform_param({cfg.d, cfg.vocab_size}, 1.0 / std::sqrt(double(cfg.d)),
                    rng);
  if (cfg.act_enabled) {
    p.enc_halting = init_halting(cfg.d, rng);
    p.dec_halting = init_halting(cfg.d, rng);
  }
  return p;
}

const BlockWeights& Parameters::enc_block(int t) const {
  if (cfg.tie_weights) return encoder[0];
  const int idx = std::min(t, static_cast<int>(encoder.size())) - 1;
  return encoder[idx];
}

const BlockWeights& Parameters::dec_block(int t) const {
  if (cfg.tie_weights) return decoder[0];
  const int idx = std::min(t, static_cast<int>(decoder.size())) - 1;
  return decoder[idx];
}

std::vector<std::pair<std::string, TensorPtr>> Parameters::named() const {
  std::vector<std::pair<std::string, TensorPtr>> out;
  out.emplace_back("embedding", token_embedding);
  for (std::size_t i = 0; i < encoder.size(); ++i)
    push_block(out, "enc." + std::to_string(i), encoder[i]);
  for (std::size_t i = 0; i < decoder.size(); ++i)
    push_block(out, "dec." + std::to_string(i), decoder[i]);
  out.emplace_back("output", output_proj);
  if (enc_halting) {
    out.emplace_back("enc_halt.w", enc_halting->w);
    out.emplace_back("enc_halt.b", enc_halting->b);
  }
  if (dec_halting) {
    out.emplace_back("dec_halt.w", dec_halting->w);
    out.emplace_back("dec_halt.b", dec_halting->b);
  }
  return out;
}

std::size_t Parameters::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t->size();
  return n;
}

// ---- attention ----

TensorPtr scaled_dot_attention(const TensorPtr& q, const TensorPtr& k,
                               const TensorPtr& v, const TensorPtr& mask,
                               std::vector<double>* weights_out) {
  if (q->shape.size() != 2 || k->shape.size() != 2 || v->shape.size() != 2)
    throw config_error("scaled_dot_attention: q/k/v must be matrices");
  const int nq = q->rows(), nk = k->rows(), dh = q->cols();
  if (k->cols() != dh || v->cols() != dh || v->rows() != nk)
    throw config_error("scaled_dot_attention: shape mismatch q" +
                       shape_str(q->shape) + " k" + shape_str(k->shape) +
                       " v" + shape_str(v->shape));
  if (mask) {
    if (mask->rows() != nq || mask->cols() != nk)
      throw config_error("scaled_dot_attention: mask " +
                         shape_str(mask->shape) + " must be " +
                         std::to_string(nq) + "x" + std::to_string(nk));
    for (double e : mask->data)
      if (e != 0.0 && e != kNegInf)
        throw config_error(
            "scaled_dot_attention: mask entries must be 0 or -inf");
  }
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> logits(static_cast<std::size_t>(nq) * nk);
  kernels::matmul_nt(q->data.data(), k->data.data(), logits.data(), nq, dh,
                     nk, false);
  for (auto& e : logits) e *= inv_scale;
  if (mask)
    for (std::size_t i = 0; i < logits.size(); ++i)
      logits[i] += mask->data[i];
  auto probs = std::make_shared<std::vector<double>>(logits.size());
  const int bad =
      kernels::softmax_rows(logits.data(), probs->data(), nq, nk);
  if (bad >= 0)
    throw config_error("scaled_dot_attention: query row " +
                       std::to_string(bad) + " is fully masked");
  if (weights_out) *weights_out = *probs;
  std::vector<double> out(static_cast<std::size_t>(nq) * dh);
  kernels::matmul_nn(probs->data(), v->data.data(), out.data(), nq, nk, dh,
                     false);
  return make_op(
      {nq, dh}, std::move(out), {q, k, v},
      [q, k, v, probs, nq, nk, dh, inv_scale](const Tensor& out_t) {
        // out = P v with P = softmax(q k^T * inv_scale + mask)
        std::vector<double> dp(static_cast<std::size_t>(nq) * nk, 0.0);
        kernels::matmul_nt(out_t.grad.data(), v->data.data(), dp.data(), nq,
                           dh, nk, false);
        if (v->in_graph()) {
          v->ensure_grad();
          kernels::matmul_tn(probs->data(), out_t.grad.data(),
                             v->grad.data(), nk, nq, dh, true);
        }
        std::vector<double> ds(static_cast<std::size_t>(nq) * nk, 0.0);
        kernels::softmax_rows_backward(probs->data(), dp.data(), ds.data(),
                                       nq, nk);
        for (auto& e : ds) e *= inv_scale;
        if (q->in_graph()) {
          q->ensure_grad();
          kernels::matmul_nn(ds.data(), k->data.data(), q->grad.data(), nq,
                             nk, dh, true);
        }
        if (k->in_graph()) {
          k->ensure_grad();
          kernels::matmul_tn(ds.data(), q->data.data(), k->grad.data(), nk,
                             nq, dh, true);
        }
      });
}

namespace {

// Rectangular causal mask: query row i (sample-local) sees keys 0..i.
TensorPtr causal_mask_rect(int nq, int nk) {
  std::vector<double> m(static_cast<std::size_t>(nq) * nk, 0.0);
  for (int i = 0; i < nq; ++i)
    for (int j = i + 1; j < nk; ++j)
      m[static_cast<std::size_t>(i) * nk + j] = kNegInf;
  return tensor({nq, nk}, std::move(m));
}

// All samples and heads of one attention site fused into a single graph
// node. Work is parallel over (sample, head) pairs, whose output slices are
// disjoint, so results do not depend on the thread count.
TensorPtr packed_attention(const TensorPtr& q, const TensorPtr& k,
                           const TensorPtr& v, const Segments& q_segs,
                           const Segments& kv_segs, int heads, bool causal,
                           AttnRecord* record) {
  const int d = q->cols();
  const int dh = d / heads;
  const int n_samples = static_cast<int>(q_segs.size());
  const int n_pairs = n_samples * heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // attention probabilities are kept for the backward pass; per-pair slabs
  auto probs = std::make_shared<std::vector<double>>();
  std::vector<std::size_t> slab(n_pairs + 1, 0);
  for (int p = 0; p < n_pairs; ++p) {
    const int s = p / heads;
    slab[p + 1] = slab[p] + static_cast<std::size_t>(q_segs[s].len) *
                                kv_segs[s].len;
  }
  probs->assign(slab[n_pairs], 0.0);

  std::vector<double> out(q->size(), 0.0);
#pragma omp parallel for schedule(static)
  for (int p = 0; p < n_pairs; ++p) {
    const int s = p / heads;
    const int h = p % heads;
    const Segment& qs = q_segs[s];
    const Segment& ks = kv_segs[s];
    double* slab_p = probs->data() + slab[p];
    std::vector<double> row(ks.len);
    for (int i = 0; i < qs.len; ++i) {
      const double* q_row =
          q->data.data() + static_cast<std::size_t>(qs.begin + i) * d + h * dh;
      const int k_hi = causal ? std::min(i + 1, ks.len) : ks.len;
      double mx = kNegInf;
      for (int j = 0; j < k_hi; ++j) {
        const double* k_row = k->data.data() +
                              static_cast<std::size_t>(ks.begin + j) * d +
                              h * dh;
        double dot = 0.0;
        for (int c = 0; c < dh; ++c) dot += q_row[c] * k_row[c];
        row[j] = dot * inv_scale;
        mx = std::max(mx, row[j]);
      }
      double denom = 0.0;
      for (int j = 0; j < k_hi; ++j) {
        row[j] = std::exp(row[j] - mx);
        denom += row[j];
      }
      const double inv_denom = 1.0 / denom;
      double* p_row = slab_p + static_cast<std::size_t>(i) * ks.len;
      double* out_row = out.data() +
                        static_cast<std::size_t>(qs.begin + i) * d + h * dh;
      for (int j = 0; j < k_hi; ++j) {
        const double pij = row[j] * inv_denom;
        p_row[j] = pij;
        const double* v_row = v->data.data() +
                              static_cast<std::size_t>(ks.begin + j) * d +
                              h * dh;
        for (int c = 0; c < dh; ++c) out_row[c] += pij * v_row[c];
      }
    }
  }

  if (record != nullptr && n_samples == 1) {
    record->nq = q_segs[0].len;
    record->nk = kv_segs[0].len;
    for (int h = 0; h < heads; ++h)
      record->heads.emplace_back(probs->begin() + slab[h],
                                 probs->begin() + slab[h + 1]);
  }

  return make_op(
      q->shape, std::move(out), {q, k, v},
      [q, k, v, probs, slab, q_segs, kv_segs, heads, dh,
       inv_scale](const Tensor& out_t) {
        const int d = q->cols();
        const bool gq = q->in_graph(), gk = k->in_graph(),
                   gv = v->in_graph();
        if (gq) q->ensure_grad();
        if (gk) k->ensure_grad();
        if (gv) v->ensure_grad();
        const int n_pairs = static_cast<int>(q_segs.size()) * heads;
#pragma omp parallel for schedule(static)
        for (int p = 0; p < n_pairs; ++p) {
          const int s = p / heads;
          const int h = p % heads;
          const Segment& qs = q_segs[s];
          const Segment& ks = kv_segs[s];
          const double* slab_p = probs->data() + slab[p];
          std::vector<double> dp(ks.len), ds(ks.len);
          for (int i = 0; i < qs.len; ++i) {
            const double* g_row =
                out_t.grad.data() +
                static_cast<std::size_t>(qs.begin + i) * d + h * dh;
            const double* p_row =
                slab_p + static_cast<std::size_t>(i) * ks.len;
            // dv += P^T g ; dp = g v^T
            double dot = 0.0;
            for (int j = 0; j < ks.len; ++j) {
              if (p_row[j] == 0.0) {
                dp[j] = 0.0;
                continue;
              }
              const std::size_t v_off =
                  static_cast<std::size_t>(ks.begin + j) * d + h * dh;
              double acc = 0.0;
              for (int c = 0; c < dh; ++c) {
                acc += g_row[c] * v->data[v_off + c];
                if (gv) v->grad[v_off + c] += p_row[j] * g_row[c];
              }
              dp[j] = acc;
              dot += acc * p_row[j];
            }
            // softmax backward, then the shared scale
            const double* q_row =
                q->data.data() +
                static_cast<std::size_t>(qs.begin + i) * d + h * dh;
            double* q_grad =
                gq ? q->grad.data() +
                         static_cast<std::size_t>(qs.begin + i) * d + h * dh
                   : nullptr;
            for (int j = 0; j < ks.len; ++j) {
              if (p_row[j] == 0.0) continue;
              ds[j] = p_row[j] * (dp[j] - dot) * inv_scale;
              const std::size_t k_off =
                  static_cast<std::size_t>(ks.begin + j) * d + h * dh;
              for (int c = 0; c < dh; ++c) {
                if (gq) q_grad[c] += ds[j] * k->data[k_off + c];
                if (gk) k->grad[k_off + c] += ds[j] * q_row[c];
              }
            }
          }
        }
      });
}

}  // namespace

TensorPtr multi_head_attention(const TensorPtr& q_in, const TensorPtr& kv_in,
                               const AttentionWeights& w, int heads,
                               const Segments& q_segs, const Segments& kv_segs,
                               bool causal, AttnRecord* record) {
  if (q_segs.size() != kv_segs.size())
    throw config_error("multi_head_attention: segment count mismatch");
  const int d = q_in->cols();
  if (d % heads != 0)
    throw config_error("multi_head_attention: d=" + std::to_string(d) +
                       " not divisible by heads=" + std::to_string(heads));
  for (const auto& ks : kv_segs)
    if (ks.len < 1)
      throw config_error("multi_head_attention: empty key segment");
  auto qp = matmul(q_in, w.wq);
  auto kp = matmul(kv_in, w.wk);
  auto vp = matmul(kv_in, w.wv);
  auto mixed =
      packed_attention(qp, kp, vp, q_segs, kv_segs, heads, causal, record);
  return matmul(mixed, w.wo);
}

TensorPtr multi_head_self_attention(const TensorPtr& h,
                                    const AttentionWeights& w, int heads,
                                    bool causal) {
  const Segments segs{{0, h->rows()}};
  return multi_head_attention(h, h, w, heads, segs, segs, causal);
}

TensorPtr cross_attention(const TensorPtr& h_dec, const TensorPtr& h_enc,
                          const AttentionWeights& w, int heads) {
  const Segments q{{0, h_dec->rows()}};
  const Segments kv{{0, h_enc->rows()}};
  return multi_head_attention(h_dec, h_enc, w, heads, q, kv, false);
}

TensorPtr causal_mask(int n) {
  if (n < 1) throw config_error("causal_mask: n must be >= 1");
  return causal_mask_rect(n, n);
}

// ---- coordinate embeddings ----

std::vector<double> sinusoid_position_row(int position, int d) {
  std::vector<double> row(d);
  for (int j = 0; j < d / 2; ++j) {
    const double freq = std::pow(10000.0, 2.0 * j / d);
    row[2 * j] = std::sin(position / freq);
    row[2 * j + 1] = std::cos(position / freq);
  }
  return row;
}

std::vector<double> sinusoid_step_vector(int t, int d) {
  return sinusoid_position_row(t, d);
}

TensorPtr coordinate_embeddings(int m, int t, int d, int offset) {
  if (d % 2 != 0)
    throw config_error("coordinate_embeddings: d must be even, got " +
                       std::to_string(d));
  const auto step = sinusoid_step_vector(t, d);
  std::vector<double> out(static_cast<std::size_t>(m) * d);
  for (int i = 0; i < m; ++i) {
    const auto pos = sinusoid_position_row(offset + i + 1, d);
    for (int j = 0; j < d; ++j)
      out[static_cast<std::size_t>(i) * d + j] = pos[j] + step[j];
  }
  return tensor({m, d}, std::move(out));
}

TensorPtr coordinate_embeddings_batch(const Segments& segs,
                                      const std::vector<int>& offsets, int t,
                                      int d) {
  if (segs.size() != offsets.size())
    throw config_error("coordinate_embeddings_batch: offsets mismatch");
  int rows = 0;
  for (const auto& s : segs) rows = std::max(rows, s.begin + s.len);
  const auto step = sinusoid_step_vector(t, d);
  std::vector<double> out(static_cast<std::size_t>(rows) * d, 0.0);
  for (std::size_t s = 0; s < segs.size(); ++s) {
    for (int i = 0; i < segs[s].len; ++i) {
      const auto pos = sinusoid_position_row(offsets[s] + i + 1, d);
      double* dst =
          out.data() + static_cast<std::size_t>(segs[s].begin + i) * d;
      for (int j = 0; j < d; ++j) dst[j] = pos[j] + step[j];
    }
  }
  return tensor({rows, d}, std::move(out));
}

// ---- transitions ----

TensorPtr transition_fc(const TensorPtr& a, const FcTransitionWeights& w) {
  auto hidden = relu(add_rowvec(matmul(a, w.w1), w.b1));
  return add_rowvec(matmul(hidden, w.w2), w.b2);
}

TensorPtr transition_sepconv(const TensorPtr& a,
                             const ConvTransitionWeights& w,
                             const Segments& segments, bool causal) {
  auto conv = relu(depthwise_conv1d(a, w.depthwise, segments, causal));
  return add_rowvec(matmul(conv, w.pointwise), w.bias);
}

namespace {

TensorPtr apply_transition(const TensorPtr& a, const BlockWeights& w,
                           const Segments& segs, bool causal_conv) {
  if (w.fc) return transition_fc(a, *w.fc);
  return transition_sepconv(a, *w.conv, segs, causal_conv);
}

TensorPtr maybe_dropout(const TensorPtr& x, const StepContext& ctx) {
  if (!ctx.training || ctx.dropout_rng == nullptr ||
      ctx.cfg->dropout_rate == 0.0)
    return x;
  return dropout(x, ctx.cfg->dropout_rate, *ctx.dropout_rng, true);
}

}  // namespace

// ---- recurrent steps ----

TensorPtr encoder_step(const TensorPtr& h_prev, int t, const BlockWeights& w,
                       const StepContext& ctx, const Segments& segs,
                       const Segments& kv_segs,
                       const std::vector<int>& offsets) {
  const ModelConfig& cfg = *ctx.cfg;
  auto pt = coordinate_embeddings_batch(segs, offsets, t, cfg.d);
  auto x = add(h_prev, pt);
  AttnRecord rec;
  rec.step = t;
  rec.site = "encoder_self";
  auto attn = multi_head_attention(x, x, w.self_attn, cfg.heads, segs,
                                   kv_segs, /*causal=*/false,
                                   ctx.trace ? &rec : nullptr);
  if (ctx.trace && !rec.heads.empty()) ctx.trace->records.push_back(rec);
  auto a = layer_norm(add(x, maybe_dropout(attn, ctx)), w.ln_self.gain,
                      w.ln_self.bias, cfg.layer_norm_eps);
  auto tr = apply_transition(a, w, segs, /*causal_conv=*/false);
  return layer_norm(add(a, maybe_dropout(tr, ctx)), w.ln_trans.gain,
                    w.ln_trans.bias, cfg.layer_norm_eps);
}

TensorPtr decoder_step(const TensorPtr& s_prev, const TensorPtr& h_enc,
                       int t, const BlockWeights& w, const StepContext& ctx,
                       const Segments& dec_segs, const Segments& enc_kv_segs,
                       const std::vector<int>& offsets) {
  const ModelConfig& cfg = *ctx.cfg;
  auto pt = coordinate_embeddings_batch(dec_segs, offsets, t, cfg.d);
  auto x = add(s_prev, pt);
  AttnRecord self_rec;
  self_rec.step = t;
  self_rec.site = "decoder_self";
  auto self_attn = multi_head_attention(x, x, w.self_attn, cfg.heads,
                                        dec_segs, dec_segs, /*causal=*/true,
                                        ctx.trace ? &self_rec : nullptr);
  if (ctx.trace && !self_rec.heads.empty())
    ctx.trace->records.push_back(self_rec);
  auto a = layer_norm(add(x, maybe_dropout(self_attn, ctx)), w.ln_self.gain,
                      w.ln_self.bias, cfg.layer_norm_eps);
  AttnRecord cross_rec;
  cross_rec.step = t;
  cross_rec.site = "decoder_cross";
  auto cross = multi_head_attention(a, h_enc, *w.cross_attn, cfg.heads,
                                    dec_segs, enc_kv_segs, /*causal=*/false,
                                    ctx.trace ? &cross_rec : nullptr);
  if (ctx.trace && !cross_rec.heads.empty())
    ctx.trace->records.push_back(cross_rec);
  auto b = layer_norm(add(a, maybe_dropout(cross, ctx)), w.ln_cross->gain,
                      w.ln_cross->bias, cfg.layer_norm_eps);
  // Decoder convolutions look back only, so generation cannot peek ahead.
  auto tr = apply_transition(b, w, dec_segs, /*causal_conv=*/true);
  return layer_norm(add(b, maybe_dropout(tr, ctx)), w.ln_trans.gain,
                    w.ln_trans.bias, cfg.layer_norm_eps);
}

// ---- packed sequences & stacks ----

Segments PackedSeq::full_segs() const {
  Segments s(batch);
  for (int i = 0; i < batch; ++i) s[i] = {i * len, len};
  return s;
}

Segments PackedSeq::real_segs() const {
  Segments s(batch);
  for (int i = 0; i < batch; ++i) s[i] = {i * len, real_len[i]};
  return s;
}

std::vector<double> PackedSeq::real_mask() const {
  std::vector<double> m(static_cast<std::size_t>(batch) * len, 0.0);
  for (int s = 0; s < batch; ++s)
    for (int i = 0; i < real_len[s]; ++i)
      m[static_cast<std::size_t>(s) * len + i] = 1.0;
  return m;
}

namespace {

std::vector<bool> padding_flags(const PackedSeq& seq) {
  std::vector<bool> pad(static_cast<std::size_t>(seq.batch) * seq.len, true);
  for (int s = 0; s < seq.batch; ++s)
    for (int i = 0; i < seq.real_len[s]; ++i)
      pad[static_cast<std::size_t>(s) * seq.len + i] = false;
  return pad;
}

TensorPtr embed_tokens(const PackedSeq& seq, const Parameters& params) {
  auto h = gather_rows(params.token_embedding, seq.tokens);
  // keep embeddings on the same scale as the coordinate signal
  return affine(h, std::sqrt(static_cast<double>(params.cfg.d)), 0.0);
}

}  // namespace

StackResult run_encoder(const PackedSeq& src, const Parameters& params,
                        const StepContext& ctx) {
  const ModelConfig& cfg = params.cfg;
  const Segments segs = src.full_segs();
  const Segments kv = src.real_segs();
  TensorPtr h = embed_tokens(src, params);
  StackResult out;
  if (!cfg.act_enabled) {
    for (int t = 1; t <= cfg.t_max; ++t)
      h = encoder_step(h, t, params.enc_block(t), ctx, segs, kv,
                       src.offsets);
    out.h = h;
    out.steps = cfg.t_max;
    return out;
  }
  auto step_fn = [&](const TensorPtr& state, int t) {
    return encoder_step(state, t, params.enc_block(t), ctx, segs, kv,
                        src.offsets);
  };
  ActResult act =
      run_act(h, step_fn, params.enc_halting->w, params.enc_halting->b,
              cfg.act_threshold, cfg.act_steps(), padding_flags(src));
  out.h = act.state;
  out.ponder = std::move(act.n_updates);
  out.remainders = std::move(act.remainders);
  out.remainders_graph = act.remainders_graph;
  out.steps = act.steps;
  return out;
}

StackResult run_decoder(const PackedSeq& tgt, const StackResult& enc,
                        const PackedSeq& src, const Parameters& params,
                        const StepContext& ctx) {
  const ModelConfig& cfg = params.cfg;
  const Segments segs = tgt.full_segs();
  const Segments enc_kv = src.real_segs();
  TensorPtr h = embed_tokens(tgt, params);
  StackResult out;
  if (!cfg.act_enabled) {
    for (int t = 1; t <= cfg.t_max; ++t)
      h = decoder_step(h, enc.h, t, params.dec_block(t), ctx, segs, enc_kv,
                       tgt.offsets);
    out.h = h;
    out.steps = cfg.t_max;
    return out;
  }
  auto step_fn = [&](const TensorPtr& state, int t) {
    return decoder_step(state, enc.h, t, params.dec_block(t), ctx, segs,
                        enc_kv, tgt.offsets);
  };
  ActResult act =
      run_act(h, step_fn, params.dec_halting->w, params.dec_halting->b,
              cfg.act_threshold, cfg.act_steps(), padding_flags(tgt));
  out.h = act.state;
  out.ponder = std::move(act.n_updates);
  out.remainders = std::move(act.remainders);
  out.remainders_graph = act.remainders_graph;
  out.steps = act.steps;
  return out;
}

// ---- single-sample encoder API ----

EncoderOutput encode_fixed(const std::vector<int>& tokens, int offset,
                           const Parameters& params, const StepContext& ctx,
                           bool keep_steps) {
  const ModelConfig& cfg = params.cfg;
  if (cfg.act_enabled)
    throw config_error("encode_fixed: ACT is enabled; use run_encoder");
  if (tokens.empty()) throw config_error("encode_fixed: empty input");
  const int m = static_cast<int>(tokens.size());
  const Segments segs{{0, m}};
  const std::vector<int> offsets{offset};
  TensorPtr h = gather_rows(params.token_embedding, tokens);
  h = affine(h, std::sqrt(static_cast<double>(cfg.d)), 0.0);
  EncoderOutput out;
  for (int t = 1; t <= cfg.t_max; ++t) {
    h = encoder_step(h, t, params.enc_block(t), ctx, segs, segs, offsets);
    if (keep_steps) out.per_step_states.push_back(h);
  }
  out.h = h;
  return out;
}

TensorPtr output_distribution(const TensorPtr& s, const TensorPtr& o) {
  return softmax_rows(matmul(s, o));
}

// ---- greedy decoding ----

namespace {

int argmax_row(const TensorPtr& t, int row) {
  const int n = t->cols();
  const double* p = t->data.data() + static_cast<std::size_t>(row) * n;
  int best = 0;
  for (int j = 1; j < n; ++j)
    if (p[j] > p[best]) best = j;
  return best;
}

constexpr int kBosId = 1;
constexpr int kEosId = 2;

}  // namespace

std::vector<GreedyResult> generate_greedy_batch(
    const std::vector<std::vector<int>>& srcs, const Parameters& params,
    int max_len) {
  NoGradGuard no_grad;
  const ModelConfig& cfg = params.cfg;
  StepContext ctx;
  ctx.cfg = &cfg;
  const int batch = static_cast<int>(srcs.size());
  if (batch == 0) return {};
  int src_len = 0;
  for (const auto& s : srcs) {
    if (s.empty()) throw config_error("generate: empty source");
    src_len = std::max(src_len, static_cast<int>(s.size()) + 1);
  }
  PackedSeq src;
  src.batch = batch;
  src.len = src_len;
  src.tokens.assign(static_cast<std::size_t>(batch) * src_len, 0);
  src.real_len.resize(batch);
  src.offsets.assign(batch, 0);
  for (int s = 0; s < batch; ++s) {
    // same source framing as make_batch: trailing EOS marks the end
    src.real_len[s] = static_cast<int>(srcs[s].size()) + 1;
    std::copy(srcs[s].begin(), srcs[s].end(),
              src.tokens.begin() + static_cast<std::size_t>(s) * src_len);
    src.tokens[static_cast<std::size_t>(s) * src_len + srcs[s].size()] =
        kEosId;
  }
  StackResult enc = run_encoder(src, params, ctx);

  std::vector<GreedyResult> results(batch);
  std::vector<bool> done(batch, false);
  int n_done = 0;
  for (int produced = 0; produced < max_len && n_done < batch; ++produced) {
    const int n = produced + 1;  // BOS + generated so far
    PackedSeq tgt;
    tgt.batch = batch;
    tgt.len = n;
    tgt.tokens.assign(static_cast<std::size_t>(batch) * n, 0);
    tgt.real_len.assign(batch, n);
    tgt.offsets.assign(batch, 0);
    for (int s = 0; s < batch; ++s) {
      tgt.tokens[static_cast<std::size_t>(s) * n] = kBosId;
      for (int i = 0; i < produced; ++i) {
        const auto& toks = results[s].tokens;
        // finished samples keep replaying their prefix; outputs are ignored
        tgt.tokens[static_cast<std::size_t>(s) * n + i + 1] =
            i < static_cast<int>(toks.size()) ? toks[i] : kEosId;
      }
    }
    StackResult dec = run_decoder(tgt, enc, src, params, ctx);
    auto dist = output_distribution(dec.h, params.output_proj);
    for (int s = 0; s < batch; ++s) {
      if (done[s]) continue;
      const int tok = argmax_row(dist, s * n + n - 1);
      if (tok == kEosId) {
        results[s].terminated = true;
        done[s] = true;
        ++n_done;
      } else {
        results[s].tokens.push_back(tok);
      }
    }
  }
  return results;
}

GreedyResult generate_greedy(const std::vector<int>& src_tokens,
                             const Parameters& params, int max_len,
                             AttnTrace* enc_trace, AttnTrace* dec_trace,
                             std::vector<double>* enc_ponder,
                             std::vector<double>* enc_remainders,
                             std::vector<double>* dec_ponder,
                             std::vector<double>* dec_remainders) {
  NoGradGuard no_grad;
  const ModelConfig& cfg = params.cfg;
  StepContext ctx;
  ctx.cfg = &cfg;
  ctx.trace = enc_trace;
  PackedSeq src;
  src.batch = 1;
  src.len = static_cast<int>(src_tokens.size()) + 1;
  src.tokens = src_tokens;
  src.tokens.push_back(kEosId);  // source framing, as in make_batch
  src.real_len = {src.len};
  src.offsets = {0};
  StackResult enc = run_encoder(src, params, ctx);
  if (enc_ponder) *enc_ponder = enc.ponder;
  if (enc_remainders) *enc_remainders = enc.remainders;

  GreedyResult result;
  StackResult dec;
  for (int produced = 0; produced < max_len; ++produced) {
    const int n = produced + 1;
    PackedSeq tgt;
    tgt.batch = 1;
    tgt.len = n;
    tgt.tokens.assign(n, 0);
    tgt.tokens[0] = kBosId;
    std::copy(result.tokens.begin(), result.tokens.end(),
              tgt.tokens.begin() + 1);
    tgt.real_len = {n};
    tgt.offsets = {0};
    StepContext dctx = ctx;
    dctx.trace = nullptr;
    // the exported decoder trace covers the last (full) decoder run
    const bool last_possible = produced == max_len - 1;
    AttnTrace scratch;
    if (dec_trace) dctx.trace = &scratch;
    dec = run_decoder(tgt, enc, src, params, dctx);
    auto dist = output_distribution(dec.h, params.output_proj);
    const int tok = argmax_row(dist, n - 1);
    const bool stop = tok == kEosId;
    if (dec_trace && (stop || last_possible)) *dec_trace = scratch;
    if (dec_ponder && (stop || last_possible)) *dec_ponder = dec.ponder;
    if (dec_remainders && (stop || last_possible))
      *dec_remainders = dec.remainders;
    if (stop) {
      result.terminated = true;
      break;
    }
    result.tokens.push_back(tok);
  }
  return result;
}

}  // namespace ut
