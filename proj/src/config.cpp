#include "msdit/config.hpp"

#include <fstream>
#include <initializer_list>

namespace msdit {

namespace {

using nlohmann::json;

[[noreturn]] void bad(const std::string& msg) { throw config_error("config: " + msg); }

void check_object(const json& j, const std::string& where) {
  if (!j.is_object()) bad(where + " must be an object");
}

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known) bad("unknown key '" + it.key() + "' in " + where);
  }
}

template <class T>
void get_int(const json& obj, const char* key, const std::string& where, T& out) {
  if (!obj.contains(key)) return;
  if (!obj[key].is_number_integer())
    bad("key '" + std::string(key) + "' in " + where + " must be an integer");
  out = obj[key].get<T>();
}

void get_num(const json& obj, const char* key, const std::string& where, double& out) {
  if (!obj.contains(key)) return;
  if (!obj[key].is_number())
    bad("key '" + std::string(key) + "' in " + where + " must be a number");
  out = obj[key].get<double>();
}

template <class T>
T need_int(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) bad("'" + std::string(key) + "' is missing in " + where);
  if (!obj[key].is_number_integer())
    bad("key '" + std::string(key) + "' in " + where + " must be an integer");
  return obj[key].get<T>();
}

double need_num(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) bad("'" + std::string(key) + "' is missing in " + where);
  if (!obj[key].is_number())
    bad("key '" + std::string(key) + "' in " + where + " must be a number");
  return obj[key].get<double>();
}

// number -> value, null -> absent
template <class T>
void get_opt(const json& obj, const char* key, const std::string& where,
             std::optional<T>& out) {
  if (!obj.contains(key)) return;
  const json& v = obj[key];
  if (v.is_null()) {
    out.reset();
    return;
  }
  if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer())
      bad("key '" + std::string(key) + "' in " + where + " must be an integer or null");
  } else {
    if (!v.is_number())
      bad("key '" + std::string(key) + "' in " + where + " must be a number or null");
  }
  out = v.get<T>();
}

void parse_model(const json& j, ModelConfig& m) {
  check_object(j, "section 'model'");
  check_keys(j, "section 'model'",
             {"width", "depth", "n_heads", "n_kv_heads", "head_dim", "mlp_hidden", "sin_dim",
              "class_vocab", "tag_vocab", "channels", "rope_base", "rope"});
  get_int(j, "width", "section 'model'", m.width);
  get_int(j, "depth", "section 'model'", m.depth);
  get_int(j, "n_heads", "section 'model'", m.n_heads);
  get_int(j, "n_kv_heads", "section 'model'", m.n_kv_heads);
  get_int(j, "head_dim", "section 'model'", m.head_dim);
  get_int(j, "mlp_hidden", "section 'model'", m.mlp_hidden);
  get_int(j, "sin_dim", "section 'model'", m.sin_dim);
  get_int(j, "class_vocab", "section 'model'", m.class_vocab);
  get_int(j, "tag_vocab", "section 'model'", m.tag_vocab);
  get_int(j, "channels", "section 'model'", m.channels);
  get_num(j, "rope_base", "section 'model'", m.rope_base);
  if (j.contains("rope")) {
    const json& r = j["rope"];
    check_object(r, "model.rope");
    check_keys(r, "model.rope", {"t", "h", "w"});
    m.rope.t = need_int<int>(r, "t", "model.rope");
    m.rope.h = need_int<int>(r, "h", "model.rope");
    m.rope.w = need_int<int>(r, "w", "model.rope");
  } else {
    m.rope = default_rope_split(m.head_dim);
  }
}

std::vector<PatchSpec> parse_patches(const json& arr) {
  if (!arr.is_array() || arr.empty()) bad("section 'patches' must be a non-empty array");
  std::vector<PatchSpec> patches;
  for (size_t i = 0; i < arr.size(); ++i) {
    const std::string where = "patches[" + std::to_string(i) + "]";
    check_object(arr[i], where);
    check_keys(arr[i], where, {"p_t", "p_h", "p_w", "alpha"});
    PatchSpec p;
    p.p_t = need_int<int>(arr[i], "p_t", where);
    p.p_h = need_int<int>(arr[i], "p_h", where);
    p.p_w = need_int<int>(arr[i], "p_w", where);
    p.alpha = need_num(arr[i], "alpha", where);
    patches.push_back(p);
  }
  return patches;
}

std::vector<StagePlan::Stage> parse_stages(const json& arr, const std::string& name) {
  if (!arr.is_array() || arr.empty()) bad(name + " must be a non-empty array of stages");
  std::vector<StagePlan::Stage> stages;
  for (size_t i = 0; i < arr.size(); ++i) {
    const std::string where = name + "[" + std::to_string(i) + "]";
    check_object(arr[i], where);
    check_keys(arr[i], where, {"t_start", "t_end", "patch_index"});
    StagePlan::Stage s;
    s.t_start = need_num(arr[i], "t_start", where);
    s.t_end = need_num(arr[i], "t_end", where);
    s.patch_index = need_int<int>(arr[i], "patch_index", where);
    stages.push_back(s);
  }
  return stages;
}

void parse_train(const json& j, TrainConfig& t) {
  check_object(j, "section 'train'");
  check_keys(j, "section 'train'",
             {"batch", "steps", "lr", "lr_finetune", "p_motion", "p_cls", "bins", "seed",
              "checkpoint_every", "motion_block", "motion_radius"});
  get_int(j, "batch", "section 'train'", t.batch);
  get_int(j, "steps", "section 'train'", t.steps);
  get_num(j, "lr", "section 'train'", t.lr);
  get_num(j, "lr_finetune", "section 'train'", t.lr_finetune);
  get_num(j, "p_motion", "section 'train'", t.p_motion);
  get_num(j, "p_cls", "section 'train'", t.p_cls);
  get_int(j, "bins", "section 'train'", t.bins);
  get_int(j, "seed", "section 'train'", t.seed);
  get_int(j, "checkpoint_every", "section 'train'", t.checkpoint_every);
  get_int(j, "motion_block", "section 'train'", t.motion_block);
  get_int(j, "motion_radius", "section 'train'", t.motion_radius);
}

void parse_sample(const json& j, SampleConfig& s) {
  check_object(j, "section 'sample'");
  check_keys(j, "section 'sample'",
             {"steps", "alpha_inf", "cfg_scale", "m_pos", "m_neg_low", "m_switch", "class_id",
              "source_tag", "plan_single", "plan_multi"});
  int steps = s.single.steps;
  double alpha = s.single.alpha_inf;
  get_int(j, "steps", "section 'sample'", steps);
  get_num(j, "alpha_inf", "section 'sample'", alpha);
  s.single.steps = s.multi.steps = steps;
  s.single.alpha_inf = s.multi.alpha_inf = alpha;

  get_num(j, "cfg_scale", "section 'sample'", s.guidance.cfg_scale);
  get_opt(j, "m_pos", "section 'sample'", s.guidance.m_pos);
  get_num(j, "m_neg_low", "section 'sample'", s.guidance.m_neg_low);
  get_num(j, "m_switch", "section 'sample'", s.guidance.m_switch);
  get_opt(j, "class_id", "section 'sample'", s.guidance.class_id);
  get_int(j, "source_tag", "section 'sample'", s.guidance.source_tag);

  if (j.contains("plan_single")) s.single.stages = parse_stages(j["plan_single"], "plan_single");
  if (j.contains("plan_multi")) s.multi.stages = parse_stages(j["plan_multi"], "plan_multi");
}

void parse_data(const json& j, CorpusSpec& d) {
  check_object(j, "section 'data'");
  check_keys(j, "section 'data'", {"count", "T", "H", "W", "C", "fps", "max_steps", "seed"});
  get_int(j, "count", "section 'data'", d.count);
  get_int(j, "T", "section 'data'", d.T);
  get_int(j, "H", "section 'data'", d.H);
  get_int(j, "W", "section 'data'", d.W);
  get_int(j, "C", "section 'data'", d.C);
  get_num(j, "fps", "section 'data'", d.fps);
  get_int(j, "max_steps", "section 'data'", d.max_steps);
  get_int(j, "seed", "section 'data'", d.seed);
}

}  // namespace

void RunConfig::validate() const {
  // The component validators report value problems as contract violations;
  // at this layer every bad value arrived through the config document, so
  // surface them uniformly as configuration errors.
  try {
    model.validate();
    train.validate();
    data.validate();
    sample.guidance.validate();
    const int n = static_cast<int>(model.patches.size());
    sample.single.validate(n);
    sample.multi.validate(n);
  } catch (const config_error&) {
    throw;
  } catch (const contract_error& e) {
    throw config_error(e.what());
  }
}

RunConfig parse_run_config(const nlohmann::json& j) {
  check_object(j, "the config document");
  check_keys(j, "the config document", {"model", "patches", "train", "sample", "data"});

  RunConfig cfg;
  if (j.contains("model")) parse_model(j["model"], cfg.model);
  if (j.contains("patches")) cfg.model.patches = parse_patches(j["patches"]);
  if (j.contains("train")) parse_train(j["train"], cfg.train);
  if (j.contains("sample")) parse_sample(j["sample"], cfg.sample);
  if (j.contains("data")) parse_data(j["data"], cfg.data);
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open config file " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config: cannot parse " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace msdit
