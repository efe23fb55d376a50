#pragma once

// The shared diffusion-transformer backbone with per-scale patch heads.
//
// One set of blocks serves every patch scale; only the embed/unembed pair
// is scale-specific.  Blocks use sandwich normalization (norm, modulate,
// mix, norm, gated residual), grouped-query attention with 3D rotary
// positions on the (t, h, w) token grid, and a SwiGLU MLP.  All adaLN
// projections and the unembed heads start at zero, so a freshly
// initialized model is the identity on its residual stream and predicts
// exactly zero velocity.

#include <string>
#include <unordered_map>
#include <vector>

#include "msdit/patching.hpp"
#include "msdit/types.hpp"

namespace msdit {

// Named tensors in a stable insertion order (the order drives optimizer
// state layout and checkpoint files).
template <class Real>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<Real> t) {
    if (map_.count(name)) throw contract_error("ParamStore: duplicate parameter " + name);
    order_.push_back(name);
    map_.emplace(name, std::move(t));
  }
  const Tensor<Real>& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw contract_error("ParamStore: unknown parameter " + name);
    return it->second;
  }
  Tensor<Real>& at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw contract_error("ParamStore: unknown parameter " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return map_.count(name) != 0; }
  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }
  int64_t total_elems() const {
    int64_t n = 0;
    for (const auto& name : order_) n += at(name).numel();
    return n;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor<Real>> map_;
};

// One Var per parameter on a specific tape.  Produced by Model::bind, or
// assembled by hand when the caller wants to own the inputs (gradchecks).
template <class Real>
struct BoundParams {
  Tape<Real>* tape = nullptr;
  std::unordered_map<std::string, Var> vars;

  Var at(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw contract_error("BoundParams: parameter " + name + " not bound");
    return it->second;
  }
};

template <class Real>
class Model {
 public:
  ModelConfig cfg;
  ParamStore<Real> params;

  static Model init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(seed);
    const int64_t D = cfg.width;
    const int64_t q_dim = static_cast<int64_t>(cfg.n_heads) * cfg.head_dim;
    const int64_t kv_dim = static_cast<int64_t>(cfg.n_kv_heads) * cfg.head_dim;

    auto lin = [&rng](Shape s) {
      const double fan_in = static_cast<double>(s[0]);
      return randn<Real>(std::move(s), rng, 1.0 / std::sqrt(fan_in));
    };
    auto emb = [&rng](Shape s) { return randn<Real>(std::move(s), rng, 0.02); };
    auto& p = m.params;

    for (const char* head : {"cond.t", "cond.m"}) {
      const std::string h = head;
      p.add(h + ".w1", lin(Shape{cfg.sin_dim, D}));
      p.add(h + ".b1", zeros<Real>(Shape{D}));
      p.add(h + ".w2", lin(Shape{D, D}));
      p.add(h + ".b2", zeros<Real>(Shape{D}));
    }
    p.add("cond.m_null", emb(Shape{D}));
    p.add("cond.class_emb", emb(Shape{cfg.class_vocab, D}));
    p.add("cond.class_null", emb(Shape{D}));
    p.add("cond.tag_emb", emb(Shape{cfg.tag_vocab, D}));

    for (int i = 0; i < cfg.depth; ++i) {
      const std::string b = "blk" + std::to_string(i);
      p.add(b + ".attn.wq", lin(Shape{D, q_dim}));
      p.add(b + ".attn.wk", lin(Shape{D, kv_dim}));
      p.add(b + ".attn.wv", lin(Shape{D, kv_dim}));
      p.add(b + ".attn.wo", lin(Shape{q_dim, D}));
      for (int nrm = 1; nrm <= 4; ++nrm)
        p.add(b + ".norm" + std::to_string(nrm) + ".w", full<Real>(Shape{D}, Real(1)));
      p.add(b + ".ada.w", zeros<Real>(Shape{D, 6 * D}));
      p.add(b + ".ada.b", zeros<Real>(Shape{6 * D}));
      p.add(b + ".mlp.w1", lin(Shape{D, cfg.mlp_hidden}));
      p.add(b + ".mlp.w3", lin(Shape{D, cfg.mlp_hidden}));
      p.add(b + ".mlp.w2", lin(Shape{cfg.mlp_hidden, D}));
    }

    p.add("final.norm.w", full<Real>(Shape{D}, Real(1)));
    p.add("final.ada.w", zeros<Real>(Shape{D, 2 * D}));
    p.add("final.ada.b", zeros<Real>(Shape{2 * D}));

    for (size_t i = 0; i < cfg.patches.size(); ++i) {
      const std::string s = "patch" + std::to_string(i);
      const int64_t raw = cfg.patches[i].raw_dim(cfg.channels);
      p.add(s + ".embed.w", lin(Shape{raw, D}));
      p.add(s + ".embed.b", zeros<Real>(Shape{D}));
      p.add(s + ".unembed.w", zeros<Real>(Shape{D, raw}));
      p.add(s + ".unembed.b", zeros<Real>(Shape{raw}));
    }
    return m;
  }

  BoundParams<Real> bind(Tape<Real>& tape, bool trainable) const {
    BoundParams<Real> bp;
    bp.tape = &tape;
    for (const auto& name : params.names()) bp.vars[name] = tape.input(params.at(name), trainable);
    return bp;
  }

  // Sum of timestep, motion (or its null), class (or its null), and source
  // tag embeddings; every adaLN projection reads this one vector.
  Var embed_conditions(BoundParams<Real>& bp, const ConditionSet& cond) const {
    validate_conditions(cond);
    Tape<Real>& tape = *bp.tape;
    const int64_t D = cfg.width;

    auto scalar = [&tape](double v) {
      Tensor<Real> t(Shape{});
      t.v[0] = static_cast<Real>(v);
      return tape.input(std::move(t));
    };
    auto head = [&](const std::string& h, Var feat) {
      Var a = tape.silu(tape.linear(feat, bp.at(h + ".w1"), bp.at(h + ".b1")));
      return tape.linear(a, bp.at(h + ".w2"), bp.at(h + ".b2"));
    };

    // t in [0,1] is stretched to the [0,1000] domain the 10000-base embedding
    // resolves well.  The motion score feeds in raw: its sinusoidal features
    // must stay monotone past the training range so that guidance can request
    // more motion than any single training clip exhibits.
    Var tv = head("cond.t", tape.sinusoidal(scalar(cond.t * 1000.0), cfg.sin_dim));
    Var mv = cond.motion
                 ? head("cond.m", tape.sinusoidal(scalar(*cond.motion), cfg.sin_dim))
                 : bp.at("cond.m_null");
    Var cv = cond.class_id
                 ? tape.reshape(tape.embedding(bp.at("cond.class_emb"), {*cond.class_id}),
                                Shape{D})
                 : bp.at("cond.class_null");
    Var gv = tape.reshape(tape.embedding(bp.at("cond.tag_emb"), {cond.source_tag}), Shape{D});
    return tape.add(tape.add(tv, mv), tape.add(cv, gv));
  }

  // Tokens [N, raw] at scale patch_idx -> predicted velocity tokens of the
  // same shape.  `pi` supplies the (t,h,w) grid coordinates for RoPE.
  Var forward(BoundParams<Real>& bp, Var x_tokens, int patch_idx, const PatchIndex& pi,
              const ConditionSet& cond) const {
    Tape<Real>& tape = *bp.tape;
    check_forward_inputs(tape.val(x_tokens).shape, patch_idx, pi);
    const std::string sc = "patch" + std::to_string(patch_idx);
    const int64_t D = cfg.width;
    const std::vector<int64_t> six(6, D);

    Var cond_vec = embed_conditions(bp, cond);
    Var cond_act = tape.silu(cond_vec);
    Var x = tape.linear(x_tokens, bp.at(sc + ".embed.w"), bp.at(sc + ".embed.b"));

    for (int i = 0; i < cfg.depth; ++i) {
      const std::string b = "blk" + std::to_string(i);
      Var ada = tape.linear(cond_act, bp.at(b + ".ada.w"), bp.at(b + ".ada.b"));
      const auto mod = tape.split(ada, 0, six);

      Var h = tape.modulate(tape.rms_norm(x, bp.at(b + ".norm1.w")), mod[0], mod[1]);
      Var a = tape.rms_norm(attention(bp, b, h, pi), bp.at(b + ".norm2.w"));
      x = tape.add(x, tape.row_scale(a, mod[2]));

      Var m = tape.modulate(tape.rms_norm(x, bp.at(b + ".norm3.w")), mod[3], mod[4]);
      Var gate = tape.silu(tape.linear(m, bp.at(b + ".mlp.w1")));
      Var lane = tape.linear(m, bp.at(b + ".mlp.w3"));
      Var mo = tape.linear(tape.mul(gate, lane), bp.at(b + ".mlp.w2"));
      Var mm = tape.rms_norm(mo, bp.at(b + ".norm4.w"));
      x = tape.add(x, tape.row_scale(mm, mod[5]));
    }

    Var y = tape.rms_norm(x, bp.at("final.norm.w"));
    Var ada_f = tape.linear(cond_act, bp.at("final.ada.w"), bp.at("final.ada.b"));
    const auto fm = tape.split(ada_f, 0, {D, D});
    y = tape.modulate(y, fm[0], fm[1]);
    return tape.linear(y, bp.at(sc + ".unembed.w"), bp.at(sc + ".unembed.b"));
  }

  Var forward(BoundParams<Real>& bp, const Tensor<Real>& x_tokens, int patch_idx,
              const PatchIndex& pi, const ConditionSet& cond) const {
    return forward(bp, bp.tape->input(x_tokens), patch_idx, pi, cond);
  }

  // Inference-path convenience: velocity field of a whole latent video.
  Tensor<Real> velocity(const Tensor<Real>& x_video, int patch_idx, const PatchIndex& pi,
                        const ConditionSet& cond) const {
    Tape<Real> tape;
    BoundParams<Real> bp = bind(tape, false);
    Var out = forward(bp, patchify_raw(x_video, pi), patch_idx, pi, cond);
    return unpatchify_raw(tape.val(out), pi);
  }

  // Replaces all parameters; the stored set must match by name and shape.
  void load_state(const ParamStore<Real>& loaded) {
    for (const auto& name : params.names()) {
      if (!loaded.has(name))
        throw contract_error("load_state: checkpoint is missing parameter " + name);
      if (loaded.at(name).shape != params.at(name).shape)
        throw contract_error("load_state: parameter " + name + " has shape " +
                             shape_str(loaded.at(name).shape) + ", model wants " +
                             shape_str(params.at(name).shape));
    }
    for (const auto& name : loaded.names())
      if (!params.has(name))
        throw contract_error("load_state: checkpoint has unknown parameter " + name);
    for (const auto& name : params.names()) params.at(name) = loaded.at(name);
  }

  void validate_conditions(const ConditionSet& cond) const {
    if (!(cond.t >= 0.0 && cond.t <= 1.0))
      throw contract_error("conditions: t must lie in [0,1], got " + std::to_string(cond.t));
    if (cond.motion && !(*cond.motion >= 0.0))
      throw contract_error("conditions: motion score must be >= 0");
    if (cond.class_id && (*cond.class_id < 0 || *cond.class_id >= cfg.class_vocab))
      throw contract_error("conditions: unknown class id " + std::to_string(*cond.class_id));
    if (cond.source_tag < 0 || cond.source_tag >= cfg.tag_vocab)
      throw contract_error("conditions: unknown source tag " + std::to_string(cond.source_tag));
  }

 private:
  Var attention(BoundParams<Real>& bp, const std::string& b, Var h, const PatchIndex& pi) const {
    Tape<Real>& tape = *bp.tape;
    const int64_t N = pi.tokens;
    const int64_t H = cfg.n_heads, KV = cfg.n_kv_heads, hd = cfg.head_dim;
    const RopeSplit split{cfg.rope.t, cfg.rope.h, cfg.rope.w};

    Var q = tape.reshape(tape.linear(h, bp.at(b + ".attn.wq")), Shape{N, H, hd});
    Var k = tape.reshape(tape.linear(h, bp.at(b + ".attn.wk")), Shape{N, KV, hd});
    Var v = tape.reshape(tape.linear(h, bp.at(b + ".attn.wv")), Shape{N, KV, hd});
    q = tape.rope3d(q, pi.coords, split, cfg.rope_base);
    k = tape.rope3d(k, pi.coords, split, cfg.rope_base);

    q = tape.permute(q, {1, 0, 2});                       // [H, N, hd]
    Var kt = tape.permute(k, {1, 2, 0});                  // [KV, hd, N]
    Var vv = tape.permute(v, {1, 0, 2});                  // [KV, N, hd]
    Var scores =
        tape.scale(tape.matmul(q, kt), static_cast<Real>(1.0 / std::sqrt(static_cast<double>(hd))));
    Var ctx = tape.matmul(tape.softmax(scores, 2), vv);   // [H, N, hd]
    ctx = tape.reshape(tape.permute(ctx, {1, 0, 2}), Shape{N, H * hd});
    return tape.linear(ctx, bp.at(b + ".attn.wo"));
  }

  void check_forward_inputs(const Shape& x_shape, int patch_idx, const PatchIndex& pi) const {
    if (patch_idx < 0 || patch_idx >= static_cast<int>(cfg.patches.size()))
      throw contract_error("forward: patch index " + std::to_string(patch_idx) +
                           " out of range");
    const int64_t raw = cfg.patches[static_cast<size_t>(patch_idx)].raw_dim(cfg.channels);
    if (pi.raw != raw || pi.video_shape[3] != cfg.channels)
      throw shape_error("forward: patch index was built for a different scale (raw " +
                        std::to_string(pi.raw) + ", want " + std::to_string(raw) + ")");
    if (x_shape.size() != 2 || x_shape[0] != pi.tokens || x_shape[1] != raw)
      throw shape_error("forward: tokens " + shape_str(x_shape) + ", want [" +
                        std::to_string(pi.tokens) + "," + std::to_string(raw) + "]");
  }
};

}  // namespace msdit
