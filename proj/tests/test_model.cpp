#include <doctest.h>
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "msdit/checkpoint.hpp"
#include "msdit/model.hpp"

using namespace msdit;
namespace fs = std::filesystem;

namespace {

ModelConfig mini_cfg() {
  ModelConfig c;
  c.width = 16;
  c.depth = 1;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.head_dim = 8;
  c.mlp_hidden = 16;
  c.sin_dim = 8;
  c.class_vocab = 3;
  c.tag_vocab = 2;
  c.channels = 1;
  c.rope = {0, 4, 4};
  c.patches = {{1, 2, 2, 1.0}};
  return c;
}

// adaLN projections and unembed heads start at zero; give them small random
// values so every path carries signal.
template <class Real>
void randomize_heads(Model<Real>& m, uint64_t seed, double s = 0.05) {
  Rng rng(seed);
  for (const auto& name : m.params.names())
    if (name.find(".ada.") != std::string::npos || name.find(".unembed.") != std::string::npos)
      m.params.at(name) = randn<Real>(m.params.at(name).shape, rng, s);
}

template <class Real>
Tensor<Real> random_tokens(const PatchIndex& pi, uint64_t seed) {
  Rng rng(seed);
  return randn<Real>(Shape{pi.tokens, pi.raw}, rng, 0.5);
}

template <class Real>
Tensor<Real> run_forward(const Model<Real>& m, const Tensor<Real>& tokens, int patch_idx,
                         const PatchIndex& pi, const ConditionSet& cond) {
  Tape<Real> tape;
  auto bp = m.bind(tape, false);
  return tape.val(m.forward(bp, tokens, patch_idx, pi, cond));
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double d = 0;
  for (size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(double(a[i]) - double(b[i])));
  return d;
}

// Plain multi-head attention forward, written independently of the model's
// grouped/batched plumbing: per-head 2D matmuls over split projections.
// Serves as the structural oracle for the whole forward pass.
Tensor<float> reference_forward(const Model<float>& m, const Tensor<float>& tokens,
                                const PatchIndex& pi, const ConditionSet& cond) {
  const ModelConfig& cfg = m.cfg;
  REQUIRE(cfg.n_kv_heads == cfg.n_heads);  // reference is plain MHA
  const int64_t D = cfg.width, H = cfg.n_heads, hd = cfg.head_dim;
  Tape<float> tape;
  auto bp = m.bind(tape, false);
  auto P = [&](const std::string& n) { return bp.at(n); };

  auto scalar = [&](double v) {
    Tensor<float> t(Shape{});
    t.v[0] = static_cast<float>(v);
    return tape.input(std::move(t));
  };
  auto mlp2 = [&](const std::string& h, Var in) {
    return tape.linear(tape.silu(tape.linear(in, P(h + ".w1"), P(h + ".b1"))), P(h + ".w2"),
                       P(h + ".b2"));
  };
  Var tv = mlp2("cond.t", tape.sinusoidal(scalar(cond.t * 1000.0), cfg.sin_dim));
  Var mv = cond.motion ? mlp2("cond.m", tape.sinusoidal(scalar(*cond.motion), cfg.sin_dim))
                       : P("cond.m_null");
  Var cv = cond.class_id
               ? tape.reshape(tape.embedding(P("cond.class_emb"), {*cond.class_id}), Shape{D})
               : P("cond.class_null");
  Var gv = tape.reshape(tape.embedding(P("cond.tag_emb"), {cond.source_tag}), Shape{D});
  Var cvec = tape.add(tape.add(tv, mv), tape.add(cv, gv));
  Var cact = tape.silu(cvec);

  Var x = tape.linear(tape.input(tokens), P("patch0.embed.w"), P("patch0.embed.b"));
  const RopeSplit split{cfg.rope.t, cfg.rope.h, cfg.rope.w};

  for (int i = 0; i < cfg.depth; ++i) {
    const std::string b = "blk" + std::to_string(i);
    auto mod = tape.split(tape.linear(cact, P(b + ".ada.w"), P(b + ".ada.b")), 0,
                          std::vector<int64_t>(6, D));

    Var h = tape.modulate(tape.rms_norm(x, P(b + ".norm1.w")), mod[0], mod[1]);
    Var q = tape.rope3d(tape.reshape(tape.linear(h, P(b + ".attn.wq")), Shape{pi.tokens, H, hd}),
                        pi.coords, split, cfg.rope_base);
    Var k = tape.rope3d(tape.reshape(tape.linear(h, P(b + ".attn.wk")), Shape{pi.tokens, H, hd}),
                        pi.coords, split, cfg.rope_base);
    Var v = tape.reshape(tape.linear(h, P(b + ".attn.wv")), Shape{pi.tokens, H, hd});

    std::vector<Var> heads;
    for (int64_t hh = 0; hh < H; ++hh) {
      auto slice = [&](Var z) {
        Var col = tape.split(z, 1, std::vector<int64_t>(static_cast<size_t>(H), 1))
                      [static_cast<size_t>(hh)];
        return tape.reshape(col, Shape{pi.tokens, hd});
      };
      Var qh = slice(q), kh = slice(k), vh = slice(v);
      Var sc = tape.scale(tape.matmul(qh, tape.permute(kh, {1, 0})),
                          static_cast<float>(1.0 / std::sqrt(double(hd))));
      heads.push_back(tape.matmul(tape.softmax(sc, 1), vh));
    }
    Var ctx = tape.concat(heads, 1);
    Var a = tape.rms_norm(tape.linear(ctx, P(b + ".attn.wo")), P(b + ".norm2.w"));
    x = tape.add(x, tape.row_scale(a, mod[2]));

    Var mm = tape.modulate(tape.rms_norm(x, P(b + ".norm3.w")), mod[3], mod[4]);
    Var gate = tape.silu(tape.linear(mm, P(b + ".mlp.w1")));
    Var out = tape.linear(tape.mul(gate, tape.linear(mm, P(b + ".mlp.w3"))), P(b + ".mlp.w2"));
    x = tape.add(x, tape.row_scale(tape.rms_norm(out, P(b + ".norm4.w")), mod[5]));
  }

  Var y = tape.rms_norm(x, P("final.norm.w"));
  auto fm = tape.split(tape.linear(cact, P("final.ada.w"), P("final.ada.b")), 0, {D, D});
  y = tape.modulate(y, fm[0], fm[1]);
  return tape.val(tape.linear(y, P("patch0.unembed.w"), P("patch0.unembed.b")));
}

}  // namespace

TEST_CASE("a fresh model predicts exactly zero velocity") {
  const ModelConfig cfg = mini_cfg();
  const auto m = Model<float>::init(cfg, 5);
  const PatchIndex pi = build_patch_index(Shape{2, 4, 4, 1}, cfg.patches[0]);
  const ConditionSet cond{0.4, 2.0, 1, 0};
  const auto out = run_forward(m, random_tokens<float>(pi, 1), 0, pi, cond);
  for (float v : out.v) CHECK(v == 0.0f);

  const auto m2 = Model<float>::init(cfg, 5);
  for (const auto& name : m.params.names()) CHECK(m2.params.at(name).v == m.params.at(name).v);
  const auto m3 = Model<float>::init(cfg, 6);
  CHECK(m3.params.at("blk0.attn.wq").v != m.params.at("blk0.attn.wq").v);
}

TEST_CASE("randomized heads keep outputs finite and bounded") {
  const ModelConfig cfg = mini_cfg();
  auto m = Model<float>::init(cfg, 5);
  randomize_heads(m, 17);
  const PatchIndex pi = build_patch_index(Shape{2, 4, 4, 1}, cfg.patches[0]);
  const auto out = run_forward(m, random_tokens<float>(pi, 2), 0, pi,
                               ConditionSet{0.7, 1.5, 2, 1});
  double mx = 0;
  for (float v : out.v) mx = std::max(mx, std::abs(double(v)));
  CHECK(mx > 0.0);
  CHECK(mx < 100.0);
}

TEST_CASE("every condition channel reaches the output") {
  const ModelConfig cfg = mini_cfg();
  auto m = Model<float>::init(cfg, 5);
  randomize_heads(m, 17);
  const PatchIndex pi = build_patch_index(Shape{2, 4, 4, 1}, cfg.patches[0]);
  const auto tokens = random_tokens<float>(pi, 2);
  const ConditionSet base{0.4, 2.0, 1, 0};
  const auto ref = run_forward(m, tokens, 0, pi, base);

  auto differs = [&](const ConditionSet& c) {
    return max_abs_diff(run_forward(m, tokens, 0, pi, c).v, ref.v) > 1e-7;
  };
  CHECK(differs(ConditionSet{0.6, 2.0, 1, 0}));               // timestep
  CHECK(differs(ConditionSet{0.4, 5.0, 1, 0}));               // motion value
  CHECK(differs(ConditionSet{0.4, std::nullopt, 1, 0}));      // motion null
  CHECK(differs(ConditionSet{0.4, 2.0, 2, 0}));               // class
  CHECK(differs(ConditionSet{0.4, 2.0, std::nullopt, 0}));    // class null
  CHECK(differs(ConditionSet{0.4, 2.0, 1, 1}));               // source tag
}

TEST_CASE("forward rejects bad conditions and mismatched inputs") {
  const ModelConfig cfg = mini_cfg();
  const auto m = Model<float>::init(cfg, 5);
  const PatchIndex pi = build_patch_index(Shape{2, 4, 4, 1}, cfg.patches[0]);
  const auto tokens = random_tokens<float>(pi, 2);

  auto fwd = [&](const ConditionSet& c) { run_forward(m, tokens, 0, pi, c); };
  CHECK_THROWS_AS(fwd(ConditionSet{-0.1, 2.0, 1, 0}), contract_error);
  CHECK_THROWS_AS(fwd(ConditionSet{1.5, 2.0, 1, 0}), contract_error);
  CHECK_THROWS_AS(fwd(ConditionSet{0.4, -1.0, 1, 0}), contract_error);
  CHECK_THROWS_WITH_AS(fwd(ConditionSet{0.4, 2.0, 99, 0}), doctest::Contains("class id"),
                       contract_error);
  CHECK_THROWS_WITH_AS(fwd(ConditionSet{0.4, 2.0, 1, 7}), doctest::Contains("source tag"),
                       contract_error);

  CHECK_THROWS_AS(run_forward(m, tokens, 1, pi, ConditionSet{0.4, 2.0, 1, 0}), contract_error);
  CHECK_THROWS_AS(run_forward(m, tokens, 0, build_patch_index(Shape{2, 4, 4, 1}, {2, 2, 2, 1.0}),
                              ConditionSet{0.4, 2.0, 1, 0}),
                  shape_error);
}

TEST_CASE("grouped attention with as many kv heads as query heads is plain MHA bitwise") {
  ModelConfig cfg = mini_cfg();
  cfg.width = 32;
  cfg.n_heads = 4;
  cfg.n_kv_heads = 4;
  cfg.head_dim = 8;
  cfg.mlp_hidden = 32;
  auto m = Model<float>::init(cfg, 9);
  randomize_heads(m, 23);
  const PatchIndex pi = build_patch_index(Shape{2, 4, 4, 1}, cfg.patches[0]);
  const auto tokens = random_tokens<float>(pi, 3);
  const ConditionSet cond{0.35, 1.0, 2, 1};

  const auto grouped = run_forward(m, tokens, 0, pi, cond);
  const auto plain = reference_forward(m, tokens, pi, cond);
  REQUIRE(grouped.v.size() == plain.v.size());
  for (size_t i = 0; i < grouped.v.size(); ++i) CHECK(grouped.v[i] == plain.v[i]);
}

TEST_CASE("grouped attention equals the duplicated key/value expansion") {
  ModelConfig cfg = mini_cfg();
  cfg.width = 32;
  cfg.n_heads = 4;
  cfg.n_kv_heads = 2;
  cfg.head_dim = 8;
  cfg.mlp_hidden = 32;
  auto a = Model<float>::init(cfg, 9);
  randomize_heads(a, 23);

  ModelConfig cfg_b = cfg;
  cfg_b.n_kv_heads = 4;
  auto b = Model<float>::init(cfg_b, 1);
  const int64_t D = cfg.width, hd = cfg.head_dim;
  const int64_t grp = cfg.n_heads / cfg.n_kv_heads;
  for (const auto& name : a.params.names()) {
    if (name.find(".attn.wk") == std::string::npos &&
        name.find(".attn.wv") == std::string::npos) {
      b.params.at(name) = a.params.at(name);
      continue;
    }
    const Tensor<float>& src = a.params.at(name);  // [D, KV*hd]
    Tensor<float>& dst = b.params.at(name);        // [D, H*hd]
    for (int64_t r = 0; r < D; ++r)
      for (int64_t j = 0; j < cfg.n_heads; ++j)
        for (int64_t c = 0; c < hd; ++c)
          dst.v[static_cast<size_t>(r * cfg.n_heads * hd + j * hd + c)] =
              src.v[static_cast<size_t>(r * cfg.n_kv_heads * hd + (j / grp) * hd + c)];
  }

  const PatchIndex pi = build_patch_index(Shape{2, 4, 4, 1}, cfg.patches[0]);
  const auto tokens = random_tokens<float>(pi, 3);
  const ConditionSet cond{0.35, 1.0, 2, 1};
  CHECK(max_abs_diff(run_forward(a, tokens, 0, pi, cond).v,
                     run_forward(b, tokens, 0, pi, cond).v) < 1e-5);
}

TEST_CASE("rotary attention scores see only relative positions") {
  const int64_t N = 2 * 4 * 4, hd = 16;
  Rng rng(31);
  const auto q = randn<double>(Shape{N, 1, hd}, rng);
  const auto k = randn<double>(Shape{N, 1, hd}, rng);

  auto grid = [](int64_t dt, int64_t dh, int64_t dw) {
    auto c = std::make_shared<std::vector<std::array<int64_t, 3>>>();
    for (int64_t t = 0; t < 2; ++t)
      for (int64_t h = 0; h < 4; ++h)
        for (int64_t w = 0; w < 4; ++w) c->push_back({t + dt, h + dh, w + dw});
    return c;
  };
  auto scores = [&](std::shared_ptr<const std::vector<std::array<int64_t, 3>>> coords) {
    Tape<double> tape;
    Var qr = tape.rope3d(tape.input(q), coords, {8, 4, 4});
    Var kr = tape.rope3d(tape.input(k), coords, {8, 4, 4});
    return tape.val(tape.matmul(tape.permute(qr, {1, 0, 2}), tape.permute(kr, {1, 2, 0})));
  };

  const auto at_origin = scores(grid(0, 0, 0));
  const auto offset = scores(grid(7, 5, 3));
  double mx = 0;
  for (size_t i = 0; i < at_origin.v.size(); ++i)
    mx = std::max(mx, std::abs(at_origin.v[i] - offset.v[i]));
  CHECK(mx < 1e-5);

  // And rotation never changes vector norms.
  Tape<double> tape;
  Var qr = tape.rope3d(tape.input(q), grid(3, 1, 2), {8, 4, 4});
  for (int64_t n = 0; n < N; ++n) {
    double a = 0, b = 0;
    for (int64_t c = 0; c < hd; ++c) {
      a += q.v[static_cast<size_t>(n * hd + c)] * q.v[static_cast<size_t>(n * hd + c)];
      const double rv = tape.val(qr).v[static_cast<size_t>(n * hd + c)];
      b += rv * rv;
    }
    CHECK(a == doctest::Approx(b).epsilon(1e-9));
  }
}

TEST_CASE("the backbone is shared while patch heads stay per-scale") {
  ModelConfig cfg = mini_cfg();
  cfg.patches = {{1, 2, 2, 1.0}, {2, 2, 2, 2.0}, {2, 4, 4, 4.0}};
  auto m = Model<float>::init(cfg, 5);
  randomize_heads(m, 3);
  const Shape video{4, 8, 8, 1};
  const PatchIndex pi = build_patch_index(video, cfg.patches[1]);

  Tape<float> tape;
  auto bp = m.bind(tape, true);
  Var out = m.forward(bp, random_tokens<float>(pi, 4), 1, pi,
                      ConditionSet{0.5, std::nullopt, std::nullopt, 0});
  tape.backward(tape.mean_all(out));

  CHECK(tape.has_grad(bp.at("patch1.embed.w")));
  CHECK(tape.has_grad(bp.at("patch1.unembed.b")));
  CHECK(!tape.has_grad(bp.at("patch0.embed.w")));
  CHECK(!tape.has_grad(bp.at("patch2.unembed.w")));
  CHECK(tape.has_grad(bp.at("blk0.attn.wq")));
  CHECK(tape.has_grad(bp.at("blk0.mlp.w2")));
  CHECK(tape.has_grad(bp.at("cond.t.w1")));
  CHECK(tape.has_grad(bp.at("cond.m_null")));      // motion dropped -> null used
  CHECK(tape.has_grad(bp.at("cond.class_null")));  // class dropped -> null used
  CHECK(!tape.has_grad(bp.at("cond.m.w1")));
  CHECK(!tape.has_grad(bp.at("cond.class_emb")));
}

TEST_CASE("a full block passes the finite-difference gradient check") {
  ModelConfig cfg = mini_cfg();
  auto m = Model<double>::init(cfg, 7);
  randomize_heads(m, 11);
  const PatchIndex pi = build_patch_index(Shape{2, 4, 4, 1}, cfg.patches[0]);
  Rng rng(13);
  const auto tokens = randn<double>(Shape{pi.tokens, pi.raw}, rng, 0.5);
  const auto target = randn<double>(Shape{pi.tokens, pi.raw}, rng, 0.5);
  const ConditionSet cond{0.37, 1.4, 1, 1};

  std::vector<Tensor<double>> inputs;
  inputs.push_back(tokens);
  for (const auto& name : m.params.names()) inputs.push_back(m.params.at(name));

  msdit_test::gradcheck(
      inputs,
      [&](Tape<double>& tape, const std::vector<Var>& vars) {
        BoundParams<double> bp;
        bp.tape = &tape;
        const auto& names = m.params.names();
        for (size_t i = 0; i < names.size(); ++i) bp.vars[names[i]] = vars[i + 1];
        return tape.mse(m.forward(bp, vars[0], 0, pi, cond), target);
      },
      1e-4, 1e-4);
}

TEST_CASE("checkpoints round trip bitwise and reject corruption") {
  const ModelConfig cfg = mini_cfg();
  auto m = Model<float>::init(cfg, 5);
  randomize_heads(m, 17);
  const fs::path path =
      fs::temp_directory_path() / ("msdit_ckpt_" + std::to_string(::getpid()) + ".lvck");
  save_checkpoint(m.params, path.string());

  const ParamStore<float> loaded = load_checkpoint(path.string());
  REQUIRE(loaded.names() == m.params.names());
  for (const auto& name : m.params.names()) {
    CHECK(loaded.at(name).shape == m.params.at(name).shape);
    CHECK(loaded.at(name).v == m.params.at(name).v);
  }

  auto other = Model<float>::init(cfg, 999);
  other.load_state(loaded);
  const PatchIndex pi = build_patch_index(Shape{2, 4, 4, 1}, cfg.patches[0]);
  const auto tokens = random_tokens<float>(pi, 2);
  const ConditionSet cond{0.4, 2.0, 1, 0};
  CHECK(run_forward(other, tokens, 0, pi, cond).v == run_forward(m, tokens, 0, pi, cond).v);

  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(path.string()), doctest::Contains("magic"), io_error);
  }
  SUBCASE("unsupported version") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const uint32_t v = 2;
    f.write(reinterpret_cast<const char*>(&v), 4);
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(path.string()), doctest::Contains("version"), io_error);
  }
  SUBCASE("truncated payload") {
    fs::resize_file(path, fs::file_size(path) - 7);  // cuts the last tensor mid-float
    CHECK_THROWS_WITH_AS(load_checkpoint(path.string()), doctest::Contains("truncated"),
                         io_error);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint((path.string() + ".nope")), io_error);
  }
  fs::remove(path);
}

TEST_CASE("loading a mismatched parameter set is rejected") {
  const ModelConfig cfg = mini_cfg();
  auto m = Model<float>::init(cfg, 5);

  ParamStore<float> missing;
  for (const auto& name : m.params.names())
    if (name != "blk0.attn.wq") missing.add(name, m.params.at(name));
  CHECK_THROWS_WITH_AS(m.load_state(missing), doctest::Contains("blk0.attn.wq"), contract_error);

  ParamStore<float> extra;
  for (const auto& name : m.params.names()) extra.add(name, m.params.at(name));
  extra.add("stowaway", zeros<float>(Shape{2}));
  CHECK_THROWS_WITH_AS(m.load_state(extra), doctest::Contains("stowaway"), contract_error);

  ParamStore<float> wrong_shape;
  for (const auto& name : m.params.names())
    wrong_shape.add(name, name == "blk0.attn.wq" ? zeros<float>(Shape{2, 2})
                                                 : m.params.at(name));
  CHECK_THROWS_WITH_AS(m.load_state(wrong_shape), doctest::Contains("shape"), contract_error);
}

TEST_CASE("repeated forwards are bitwise identical") {
  const ModelConfig cfg = mini_cfg();
  auto m = Model<float>::init(cfg, 5);
  randomize_heads(m, 17);
  const PatchIndex pi = build_patch_index(Shape{2, 4, 4, 1}, cfg.patches[0]);
  const auto tokens = random_tokens<float>(pi, 2);
  const ConditionSet cond{0.4, 2.0, 1, 0};
  CHECK(run_forward(m, tokens, 0, pi, cond).v == run_forward(m, tokens, 0, pi, cond).v);
}
