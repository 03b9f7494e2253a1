#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "funkflow/errors.hpp"
#include "funkflow/gp.hpp"
#include "funkflow/nn.hpp"
#include "funkflow/op_attention.hpp"
#include "funkflow/pk_sim.hpp"
#include "funkflow/tensor.hpp"

namespace funkflow::flow {

struct ModelConfig {
  std::size_t hidden = 256;
  std::size_t encoder_depth = 4;
  std::size_t decoder_depth = 4;
  std::size_t heads = 4;
  std::size_t ffn_expansion = 4;
  double dropout = 0.1;
  double f_max = 256.0;
  double sigma_min = 1e-4;
  gp::RBFKernel kernel{1e-4, 1.7e-3};
  double jitter = gp::kDefaultJitter;

  void validate() const {
    if (hidden < 4 || hidden % 2 != 0) throw ValidationError("hidden dimension must be even and >= 4");
    if (heads == 0 || hidden % heads != 0) throw ValidationError("hidden dimension must be divisible by heads");
    if (encoder_depth < 1 || decoder_depth < 1) throw ValidationError("encoder/decoder depth must be >= 1");
    if (ffn_expansion < 1) throw ValidationError("ffn expansion must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("dropout must be in [0, 1)");
    if (sigma_min < 0.0) throw ValidationError("sigma_min must be >= 0");
    kernel.validate();
  }

  // Desk-scale model used by the toy pipeline.
  static ModelConfig miniature() {
    ModelConfig c;
    c.hidden = 32;
    c.encoder_depth = c.decoder_depth = 2;
    c.heads = 2;
    return c;
  }
  // Smallest configuration used for finite-difference gradient checks.
  static ModelConfig gradcheck() {
    ModelConfig c;
    c.hidden = 8;
    c.encoder_depth = c.decoder_depth = 1;
    c.heads = 2;
    c.dropout = 0.0;
    return c;
  }
};

inline double encode_route(pk::Route r) { return r == pk::Route::Oral ? 1.0 : 0.0; }

// Per-study scale factors estimated from the context set.
// Concentrations are rescaled to the study's largest dose before the max
// normalization, so subjects on different doses share one scale under
// linear kinetics. With equal doses this is plain max normalization.
struct StudyScales {
  double concentration = 1.0;  // max over context of c * dose / a
  double time = 1.0;
  double dose = 1.0;

  double norm_conc(double c, double a) const { return c * (dose / a) / concentration; }
  double denorm_conc(double c, double a) const { return c * concentration * (a / dose); }
  double norm_time(double t) const { return t / time; }
  double denorm_time(double t) const { return t * time; }
  double norm_dose(double a) const { return a / dose; }
};

// Encoder input: one row (tau, y, a, r) per context observation, subjects
// concatenated in study order.
struct StudyBatch {
  Mat tokens;
  std::vector<long> subject;
  std::vector<double> times;
  attn::QuadratureWeights weights;
  attn::AttentionMask mask;
  StudyScales scales;

  std::size_t size() const { return subject.size(); }
};

inline StudyScales study_scales(const pk::Study& context) {
  if (context.individuals.empty()) throw ValidationError("cannot normalize an empty study");
  StudyScales s{0.0, 0.0, 0.0};
  for (const auto& ind : context.individuals) {
    if (!(ind.dose.amount > 0.0)) throw ValidationError("subject " + ind.id + ": dose amount must be positive");
    if (!ind.times.empty()) s.time = std::max(s.time, ind.times.back());
    s.dose = std::max(s.dose, ind.dose.amount);
  }
  for (const auto& ind : context.individuals)
    for (double c : ind.concentrations) s.concentration = std::max(s.concentration, c * s.dose / ind.dose.amount);
  if (!(s.concentration > 0.0)) throw ValidationError("study has no positive concentration");
  if (!(s.time > 0.0)) throw ValidationError("study has no positive observation time");
  return s;
}

inline StudyBatch normalize_study(const pk::Study& context) {
  StudyBatch b;
  b.scales = study_scales(context);
  std::size_t n = 0;
  for (const auto& ind : context.individuals) n += ind.times.size();
  b.tokens.resize(Eigen::Index(n), 4);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < context.individuals.size(); ++i) {
    const auto& ind = context.individuals[i];
    for (std::size_t k = 0; k < ind.times.size(); ++k, ++row) {
      const double tau = b.scales.norm_time(ind.times[k]);
      b.tokens(row, 0) = tau;
      b.tokens(row, 1) = b.scales.norm_conc(ind.concentrations[k], ind.dose.amount);
      b.tokens(row, 2) = b.scales.norm_dose(ind.dose.amount);
      b.tokens(row, 3) = encode_route(ind.dose.route);
      b.subject.push_back(long(i));
      b.times.push_back(tau);
    }
  }
  b.weights = attn::grouped_trapezoid_weights(b.times, b.subject);
  b.mask = attn::block_diagonal_mask(b.subject);
  return b;
}

// The target individual on its merged (prefix + future) grid, in normalized
// units. Slots [0, prefix_len) are the observed past.
struct TargetState {
  std::vector<double> times;
  std::vector<double> z;
  std::size_t prefix_len = 0;
  double dose = 1.0;  // normalized
  pk::Route route = pk::Route::Intravenous;

  std::size_t size() const { return times.size(); }
  // M_p = 1[tau > tau_p]
  std::vector<double> prefix_mask() const {
    std::vector<double> m(times.size(), 1.0);
    if (prefix_len == 0) return m;
    const double tau_p = times[prefix_len - 1];
    for (std::size_t j = 0; j < times.size(); ++j) m[j] = times[j] > tau_p ? 1.0 : 0.0;
    return m;
  }
};

class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(ModelConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    init(rng);
  }
  // Adopt existing parameters (checkpoint load); layout must match.
  FlowModel(ModelConfig cfg, ParamStore params) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(0);
    init(rng);
    params_.check_layout(params);
    params_ = std::move(params);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  struct EncoderCache {
    nn::Mlp::Cache embed;
    nn::LayerNorm::Cache embed_ln;
    struct Block {
      nn::LayerNorm::Cache ln1, ln2;
      attn::MultiHeadOpAttn::Cache attn;
      nn::Dropout attn_drop;
      nn::Mlp::Cache ffn;
    };
    std::vector<Block> blocks;
    nn::LayerNorm::Cache final_ln;
  };

  struct DecoderCache {
    nn::Mlp::Cache embed;
    nn::LayerNorm::Cache embed_ln;
    struct Block {
      nn::LayerNorm::Cache ln1, ln2, ln3, ln4;
      attn::MultiHeadOpAttn::Cache self, cross;
      nn::Dropout self_drop, cross_drop;
      nn::Mlp::Cache ffn1, ffn2;
    };
    std::vector<Block> blocks;
    nn::LayerNorm::Cache final_ln;
    nn::Mlp::Cache head;
    attn::QuadratureWeights weights;
  };

  RowVec time_embedding(double t) const { return nn::fourier_time_embed(t, cfg_.hidden, cfg_.f_max); }

  // Context representation h^S at flow time t. Pass a non-null rng to enable
  // dropout (training mode).
  Mat encode(const StudyBatch& batch, double t, Rng* rng = nullptr, EncoderCache* cache = nullptr) const {
    EncoderCache local;
    EncoderCache& c = cache ? *cache : local;
    const RowVec temb = time_embedding(t);
    Mat h = enc_embed().forward(params_, batch.tokens, c.embed);
    h.rowwise() += temb;
    h = ln("enc.embed_ln").forward(params_, h, c.embed_ln);
    c.blocks.assign(cfg_.encoder_depth, {});
    for (std::size_t l = 0; l < cfg_.encoder_depth; ++l) {
      auto& b = c.blocks[l];
      const std::string p = "enc." + std::to_string(l);
      const Mat a_in = ln(p + ".ln1").forward(params_, h, b.ln1);
      const Mat a = enc_attn(l).forward(params_, a_in, a_in, batch.mask, batch.weights, b.attn);
      h += b.attn_drop.forward(a, cfg_.dropout, rng);
      const Mat f_in = ln(p + ".ln2").forward(params_, h, b.ln2);
      h += ffn(p + ".ffn").forward(params_, f_in, b.ffn, cfg_.dropout, rng);
      h.rowwise() += temb;
    }
    Mat out = ln("enc.final_ln").forward(params_, h, c.final_ln);
    nn::check_finite(out, "encoder");
    return out;
  }

  // Raw per-position decoder output (before the prefix mask).
  Eigen::VectorXd decode(const TargetState& target, double t, const Mat& context, const StudyBatch& batch,
                         Rng* rng = nullptr, DecoderCache* cache = nullptr) const {
    DecoderCache local;
    DecoderCache& c = cache ? *cache : local;
    const RowVec temb = time_embedding(t);
    const Eigen::Index T = Eigen::Index(target.size());
    if (target.z.size() != target.times.size()) throw ValidationError("target state: z/times length mismatch");
    if (T == 0) throw ValidationError("target state is empty");
    Mat tokens(T, 4);
    for (Eigen::Index j = 0; j < T; ++j) {
      tokens(j, 0) = target.times[std::size_t(j)];
      tokens(j, 1) = target.z[std::size_t(j)];
      tokens(j, 2) = target.dose;
      tokens(j, 3) = encode_route(target.route);
    }
    c.weights = attn::trapezoid_weights(target.times);
    const attn::AttentionMask none;
    Mat g = dec_embed().forward(params_, tokens, c.embed);
    g.rowwise() += temb;
    g = ln("dec.embed_ln").forward(params_, g, c.embed_ln);
    c.blocks.assign(cfg_.decoder_depth, {});
    for (std::size_t l = 0; l < cfg_.decoder_depth; ++l) {
      auto& b = c.blocks[l];
      const std::string p = "dec." + std::to_string(l);
      const Mat s_in = ln(p + ".ln1").forward(params_, g, b.ln1);
      g += b.self_drop.forward(dec_self(l).forward(params_, s_in, s_in, none, c.weights, b.self), cfg_.dropout, rng);
      g += ffn(p + ".ffn1").forward(params_, ln(p + ".ln2").forward(params_, g, b.ln2), b.ffn1, cfg_.dropout, rng);
      const Mat x_in = ln(p + ".ln3").forward(params_, g, b.ln3);
      g += b.cross_drop.forward(dec_cross(l).forward(params_, x_in, context, none, batch.weights, b.cross), cfg_.dropout,
                                rng);
      g += ffn(p + ".ffn2").forward(params_, ln(p + ".ln4").forward(params_, g, b.ln4), b.ffn2, cfg_.dropout, rng);
      g.rowwise() += temb;
    }
    const Mat gT = ln("dec.final_ln").forward(params_, g, c.final_ln);
    const Mat out = head().forward(params_, gT, c.head);
    nn::check_finite(out, "decoder head");
    return out.col(0);
  }

  // Masked velocity: exactly zero on the observed past.
  Eigen::VectorXd vector_field(const TargetState& target, double t, const StudyBatch& batch) const {
    const Mat h = encode(batch, t);
    return masked_field(target, t, h, batch);
  }

  // Same, reusing an already-encoded context for this t.
  Eigen::VectorXd masked_field(const TargetState& target, double t, const Mat& context, const StudyBatch& batch) const {
    Eigen::VectorXd v = decode(target, t, context, batch);
    const auto m = target.prefix_mask();
    for (Eigen::Index j = 0; j < v.size(); ++j) v(j) *= m[std::size_t(j)];
    return v;
  }

  // Reverse pass. `dout` is dL/d(raw decoder output); gradients accumulate
  // into `grads`.
  void backward(const StudyBatch& batch, const EncoderCache& ec, const DecoderCache& dc, const Eigen::VectorXd& dout,
                ParamStore& grads) const {
    // Decoder.
    Mat dg = head().backward(params_, grads, dc.head, Mat(dout));
    dg = ln("dec.final_ln").backward(params_, grads, dc.final_ln, dg);
    Mat dctx = Mat::Zero(Eigen::Index(batch.size()), Eigen::Index(cfg_.hidden));
    for (std::size_t l = cfg_.decoder_depth; l-- > 0;) {
      const auto& b = dc.blocks[l];
      const std::string p = "dec." + std::to_string(l);
      // g = g'' + ffn2(ln4(g''))
      dg += ln(p + ".ln4").backward(params_, grads, b.ln4, ffn(p + ".ffn2").backward(params_, grads, b.ffn2, dg));
      // g'' = g' + cross(ln3(g'), h)
      {
        auto [dq, dkv] = dec_cross(l).backward(params_, grads, batch.weights, b.cross, b.cross_drop.backward(dg));
        dctx += dkv;
        dg += ln(p + ".ln3").backward(params_, grads, b.ln3, dq);
      }
      // g' = g + ffn1(ln2(g))
      dg += ln(p + ".ln2").backward(params_, grads, b.ln2, ffn(p + ".ffn1").backward(params_, grads, b.ffn1, dg));
      // g = g0 + self(ln1(g0))
      {
        auto [dq, dkv] = dec_self(l).backward(params_, grads, dc.weights, b.self, b.self_drop.backward(dg));
        dg += ln(p + ".ln1").backward(params_, grads, b.ln1, Mat(dq + dkv));
      }
    }
    dg = ln("dec.embed_ln").backward(params_, grads, dc.embed_ln, dg);
    dec_embed().backward(params_, grads, dc.embed, dg);

    // Encoder.
    Mat dh = ln("enc.final_ln").backward(params_, grads, ec.final_ln, dctx);
    for (std::size_t l = cfg_.encoder_depth; l-- > 0;) {
      const auto& b = ec.blocks[l];
      const std::string p = "enc." + std::to_string(l);
      dh += ln(p + ".ln2").backward(params_, grads, b.ln2, ffn(p + ".ffn").backward(params_, grads, b.ffn, dh));
      auto [dq, dkv] = enc_attn(l).backward(params_, grads, batch.weights, b.attn, b.attn_drop.backward(dh));
      dh += ln(p + ".ln1").backward(params_, grads, b.ln1, Mat(dq + dkv));
    }
    dh = ln("enc.embed_ln").backward(params_, grads, ec.embed_ln, dh);
    enc_embed().backward(params_, grads, ec.embed, dh);
  }

  // Zero the last affine map of the output head: the field becomes 0.
  void zero_head() {
    const auto last = head().layer(head().layer_count() - 1);
    for (const auto& n : {last.w(), last.b()}) {
      auto& t = params_.at(n);
      std::fill(t.data.begin(), t.data.end(), 0.0);
    }
  }

  nn::Mlp head() const { return {"head", {cfg_.hidden, cfg_.hidden, cfg_.hidden, 1}}; }

 private:
  std::size_t d() const { return cfg_.hidden; }
  nn::Mlp enc_embed() const { return {"enc.embed", {4, d(), d(), d()}}; }
  nn::Mlp dec_embed() const { return {"dec.embed", {4, d(), d(), d()}}; }
  nn::Mlp ffn(const std::string& name) const { return {name, {d(), cfg_.ffn_expansion * d(), d()}}; }
  nn::LayerNorm ln(const std::string& name) const { return {name, d()}; }
  attn::MultiHeadOpAttn enc_attn(std::size_t l) const { return {"enc." + std::to_string(l) + ".attn", d(), cfg_.heads}; }
  attn::MultiHeadOpAttn dec_self(std::size_t l) const { return {"dec." + std::to_string(l) + ".self", d(), cfg_.heads}; }
  attn::MultiHeadOpAttn dec_cross(std::size_t l) const {
    return {"dec." + std::to_string(l) + ".cross", d(), cfg_.heads};
  }

  void init(Rng& rng) {
    params_ = ParamStore{};
    enc_embed().init(params_, rng);
    ln("enc.embed_ln").init(params_);
    for (std::size_t l = 0; l < cfg_.encoder_depth; ++l) {
      const std::string p = "enc." + std::to_string(l);
      ln(p + ".ln1").init(params_);
      enc_attn(l).init(params_, rng);
      ln(p + ".ln2").init(params_);
      ffn(p + ".ffn").init(params_, rng);
    }
    ln("enc.final_ln").init(params_);
    dec_embed().init(params_, rng);
    ln("dec.embed_ln").init(params_);
    for (std::size_t l = 0; l < cfg_.decoder_depth; ++l) {
      const std::string p = "dec." + std::to_string(l);
      ln(p + ".ln1").init(params_);
      dec_self(l).init(params_, rng);
      ln(p + ".ln2").init(params_);
      ffn(p + ".ffn1").init(params_, rng);
      ln(p + ".ln3").init(params_);
      dec_cross(l).init(params_, rng);
      ln(p + ".ln4").init(params_);
      ffn(p + ".ffn2").init(params_, rng);
    }
    ln("dec.final_ln").init(params_);
    head().init(params_, rng);
  }

  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace funkflow::flow
