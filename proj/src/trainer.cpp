#include "msdit/trainer.hpp"

#include "msdit/checkpoint.hpp"
#include "msdit/motion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <fstream>
#include <iomanip>

namespace msdit {

namespace {

bool divisible(const Shape& video, const PatchSpec& spec) {
  return video[0] % spec.p_t == 0 && video[1] % spec.p_h == 0 && video[2] % spec.p_w == 0;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("cannot open " + path + " for writing");
  return f;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch < 1) throw config_error("train: batch must be >= 1");
  if (steps < 1) throw config_error("train: steps must be >= 1");
  if (!(lr >= 0.0) || !(lr_finetune >= 0.0))
    throw config_error("train: learning rates must be >= 0");
  if (!(p_motion >= 0.0 && p_motion <= 1.0) || !(p_cls >= 0.0 && p_cls <= 1.0))
    throw config_error("train: dropout probabilities must lie in [0,1]");
  if (bins < 1) throw config_error("train: bins must be >= 1");
  if (checkpoint_every < 0) throw config_error("train: checkpoint_every must be >= 0");
  if (motion_block < 1 || motion_radius < 0)
    throw config_error("train: motion matcher needs block >= 1 and radius >= 0");
}

BinLedger::BinLedger(int n_scales, int bins) : n_scales_(n_scales), bins_(bins) {
  if (n_scales < 1 || bins < 1) throw contract_error("BinLedger: need scales >= 1, bins >= 1");
  cells_.resize(static_cast<size_t>(n_scales) * static_cast<size_t>(bins));
}

int BinLedger::bin_of(double t, int bins) {
  if (!(t >= 0.0 && t <= 1.0))
    throw contract_error("BinLedger: t must lie in [0,1], got " + std::to_string(t));
  return std::min(static_cast<int>(std::floor(t * bins)), bins - 1);
}

void BinLedger::record(int patch_idx, double t, double loss) {
  if (patch_idx < 0 || patch_idx >= n_scales_)
    throw contract_error("BinLedger: patch index " + std::to_string(patch_idx) + " out of range");
  Cell& c = cells_[static_cast<size_t>(patch_idx) * bins_ + bin_of(t, bins_)];
  c.sum += loss;
  c.count += 1;
}

const BinLedger::Cell& BinLedger::cell(int patch_idx, int bin) const {
  if (patch_idx < 0 || patch_idx >= n_scales_ || bin < 0 || bin >= bins_)
    throw contract_error("BinLedger: cell (" + std::to_string(patch_idx) + "," +
                         std::to_string(bin) + ") out of range");
  return cells_[static_cast<size_t>(patch_idx) * bins_ + bin];
}

int64_t BinLedger::total_count() const {
  int64_t n = 0;
  for (const Cell& c : cells_) n += c.count;
  return n;
}

void BinLedger::write_csv(const std::string& path) const {
  std::ofstream f = open_out(path);
  f << "scale,bin,mean_loss,count\n";
  f << std::setprecision(10);
  for (int s = 0; s < n_scales_; ++s)
    for (int b = 0; b < bins_; ++b) {
      const Cell& c = cell(s, b);
      if (c.count == 0) continue;
      f << s << ',' << b << ',' << c.sum / static_cast<double>(c.count) << ',' << c.count
        << '\n';
    }
  if (!f.flush()) throw io_error("write failed for " + path);
}

ConditionSet apply_condition_dropout(const ConditionSet& cond, double p_motion, double p_cls,
                                     Rng& rng) {
  ConditionSet out = cond;
  const bool drop_motion = rng.coin(p_motion);
  const bool drop_class = rng.coin(p_cls);
  if (drop_motion) out.motion.reset();
  if (drop_class) out.class_id.reset();
  return out;
}

std::vector<std::optional<double>> measure_motions(const Dataset& data, int block, int radius) {
  std::vector<std::optional<double>> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples)
    out.push_back(s.video.T() >= 2 ? std::optional<double>(motion_score(s.video, block, radius))
                                   : std::nullopt);
  return out;
}

Trainer::Trainer(Model<float>& model, const Dataset& data, TrainConfig cfg)
    : model_(model),
      data_(data),
      cfg_(std::move(cfg)),
      ledger_(static_cast<int>(model.cfg.patches.size()), cfg_.bins) {
  cfg_.validate();
  if (data_.samples.empty()) throw contract_error("train: dataset is empty");

  std::vector<size_t> pool;
  for (size_t i = 0; i < data_.samples.size(); ++i)
    if (!cfg_.tag_filter || data_.samples[i].meta.source_tag == *cfg_.tag_filter)
      pool.push_back(i);
  if (pool.empty())
    throw contract_error("train: no samples with source tag " +
                         std::to_string(*cfg_.tag_filter));

  for (size_t k = 0; k < model_.cfg.patches.size(); ++k) {
    const PatchSpec& spec = model_.cfg.patches[k];
    if (!divisible(data_.shape, spec))
      throw contract_error("train: no eligible samples for scale " + std::to_string(k) +
                           " (dataset shape " + shape_str(data_.shape) +
                           " is not divisible by its patch)");
    eligible_.push_back(pool);
    pindex_.push_back(build_patch_index(data_.shape, spec));
  }

  motion_ = measure_motions(data_, cfg_.motion_block, cfg_.motion_radius);
  const size_t n = static_cast<size_t>(model_.params.total_elems());
  grad_.assign(n, 0.0);
  adam_m_.assign(n, 0.0);
  adam_v_.assign(n, 0.0);
}

ScaleBatch Trainer::draw_scale_batch(int64_t step_idx, int scale) const {
  const auto& eligible = eligible_.at(static_cast<size_t>(scale));
  const double alpha = model_.cfg.patches[static_cast<size_t>(scale)].alpha;
  Rng rng = Rng::stream(cfg_.seed, static_cast<uint64_t>(step_idx),
                        static_cast<uint64_t>(scale));

  ScaleBatch sb;
  for (int64_t b = 0; b < cfg_.batch; ++b)
    sb.indices.push_back(eligible[rng.below(eligible.size())]);
  // Per sample, in order: timestep, dropout coins, then noise.
  for (size_t idx : sb.indices) {
    const SynthSample& s = data_.samples[idx];
    const double t = sample_training_t(rng, alpha);
    ConditionSet cond{t, motion_[idx], s.meta.class_id, s.meta.source_tag};
    sb.conds.push_back(apply_condition_dropout(cond, cfg_.p_motion, cfg_.p_cls, rng));
    FlowSample<float> fs = make_flow_sample(s.video.data, t, rng);
    sb.x_t.push_back(std::move(fs.x_t));
    sb.targets.push_back(std::move(fs.target));
  }
  return sb;
}

StepStats Trainer::step(int64_t step_idx) {
  const int M = static_cast<int>(model_.cfg.patches.size());
  const auto& names = model_.params.names();
  std::fill(grad_.begin(), grad_.end(), 0.0);

  StepStats st;
  st.scale_loss.assign(static_cast<size_t>(M), 0.0);
  st.sample_t.resize(static_cast<size_t>(M));
  st.sample_loss.resize(static_cast<size_t>(M));

  for (int k = 0; k < M; ++k) {
    const ScaleBatch sb = draw_scale_batch(step_idx, k);
    const PatchIndex& pi = pindex_[static_cast<size_t>(k)];
    for (int64_t i = 0; i < cfg_.batch; ++i) {
      try {
        Tape<float> tape;
        BoundParams<float> bp = model_.bind(tape, true);
        Var pred = model_.forward(bp, patchify_raw(sb.x_t[static_cast<size_t>(i)], pi), k, pi,
                                  sb.conds[static_cast<size_t>(i)]);
        Var loss = tape.mse(pred, patchify_raw(sb.targets[static_cast<size_t>(i)], pi));
        tape.backward(loss);

        size_t off = 0;
        for (const auto& name : names) {
          const Var v = bp.at(name);
          const int64_t numel = model_.params.at(name).numel();
          if (tape.has_grad(v)) {
            const Tensor<float>& g = tape.grad(v);
            for (int64_t e = 0; e < numel; ++e)
              grad_[off + static_cast<size_t>(e)] += static_cast<double>(g.v[static_cast<size_t>(e)]);
          }
          off += static_cast<size_t>(numel);
        }

        const double lv = static_cast<double>(tape.val(loss).v[0]);
        const double t = sb.conds[static_cast<size_t>(i)].t;
        ledger_.record(k, t, lv);
        st.sample_t[static_cast<size_t>(k)].push_back(t);
        st.sample_loss[static_cast<size_t>(k)].push_back(lv);
        st.scale_loss[static_cast<size_t>(k)] += lv / static_cast<double>(cfg_.batch);
      } catch (const numeric_error& e) {
        throw numeric_error("training aborted at step " + std::to_string(step_idx) + ", scale " +
                            std::to_string(k) + ": " + e.what());
      }
    }
  }

  const double inv = 1.0 / (static_cast<double>(M) * static_cast<double>(cfg_.batch));
  double sq = 0.0;
  for (double& g : grad_) {
    g *= inv;
    sq += g * g;
  }
  st.grad_norm = std::sqrt(sq);
  if (!std::isfinite(st.grad_norm))
    throw numeric_error("training aborted at step " + std::to_string(step_idx) +
                        ": non-finite gradient norm");

  adam_update();
  return st;
}

void Trainer::adam_update() {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.95, kEps = 1e-8;
  adam_t_ += 1;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(adam_t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(adam_t_));

  size_t off = 0;
  for (const auto& name : model_.params.names()) {
    Tensor<float>& p = model_.params.at(name);
    for (size_t e = 0; e < p.v.size(); ++e, ++off) {
      const double g = grad_[off];
      adam_m_[off] = kBeta1 * adam_m_[off] + (1.0 - kBeta1) * g;
      adam_v_[off] = kBeta2 * adam_v_[off] + (1.0 - kBeta2) * g * g;
      const double mhat = adam_m_[off] / c1;
      const double vhat = adam_v_[off] / c2;
      p.v[e] = static_cast<float>(static_cast<double>(p.v[e]) -
                                  cfg_.lr * mhat / (std::sqrt(vhat) + kEps));
    }
  }
}

void Trainer::run() {
  namespace fs = std::filesystem;
  const bool writing = !cfg_.out_dir.empty();
  std::ofstream metrics;
  if (writing) {
    fs::create_directories(cfg_.out_dir);
    metrics = open_out(cfg_.out_dir + "/metrics.csv");
    metrics << "step,scale,t,bin,loss,grad_norm,lr\n" << std::setprecision(10);
  }

  for (int64_t s = 0; s < cfg_.steps; ++s) {
    const StepStats st = step(s);
    if (writing) {
      for (size_t k = 0; k < st.sample_t.size(); ++k)
        for (size_t i = 0; i < st.sample_t[k].size(); ++i) {
          const double t = st.sample_t[k][i];
          metrics << s << ',' << k << ',' << t << ',' << BinLedger::bin_of(t, cfg_.bins) << ','
                  << st.sample_loss[k][i] << ',' << st.grad_norm << ',' << cfg_.lr << '\n';
        }
      if (cfg_.checkpoint_every > 0 && (s + 1) % cfg_.checkpoint_every == 0 &&
          s + 1 < cfg_.steps) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "model_step_%06lld.lvck",
                      static_cast<long long>(s + 1));
        save_checkpoint(model_.params, cfg_.out_dir + "/" + buf);
      }
    }
  }

  if (writing) {
    if (!metrics.flush()) throw io_error("write failed for " + cfg_.out_dir + "/metrics.csv");
    ledger_.write_csv(cfg_.out_dir + "/bins.csv");
    save_checkpoint(model_.params, cfg_.out_dir + "/model.lvck");
  }
}

double eval_fm_loss(const Model<float>& model, const Dataset& data,
                    const std::vector<std::optional<double>>& motions, int scale, int64_t n,
                    uint64_t seed, std::optional<int> tag) {
  if (scale < 0 || scale >= static_cast<int>(model.cfg.patches.size()))
    throw contract_error("eval: scale " + std::to_string(scale) + " out of range");
  if (n < 1) throw contract_error("eval: need n >= 1");
  if (motions.size() != data.samples.size())
    throw contract_error("eval: motions vector does not match the dataset");
  const PatchSpec& spec = model.cfg.patches[static_cast<size_t>(scale)];
  if (!divisible(data.shape, spec))
    throw contract_error("eval: dataset shape is not divisible by the patch at this scale");

  std::vector<size_t> eligible;
  for (size_t i = 0; i < data.samples.size(); ++i)
    if (!tag || data.samples[i].meta.source_tag == *tag) eligible.push_back(i);
  if (eligible.empty()) throw contract_error("eval: no eligible samples");

  const PatchIndex pi = build_patch_index(data.shape, spec);
  Rng rng(seed);
  double acc = 0.0;
  for (int64_t e = 0; e < n; ++e) {
    const size_t idx = eligible[rng.below(eligible.size())];
    const SynthSample& s = data.samples[idx];
    const double t = sample_training_t(rng, spec.alpha);
    const ConditionSet cond{t, motions[idx], s.meta.class_id, s.meta.source_tag};
    const FlowSample<float> fs = make_flow_sample(s.video.data, t, rng);
    acc += fm_loss(model.velocity(fs.x_t, scale, pi, cond), fs.target);
  }
  return acc / static_cast<double>(n);
}

void finetune_best_subset(Model<float>& model, const Dataset& data, int tag, TrainConfig cfg) {
  cfg.lr = cfg.lr_finetune;
  cfg.tag_filter = tag;
  Trainer(model, data, cfg).run();
}

void analyze_bins(const std::string& metrics_csv, const std::string& out_csv) {
  std::ifstream in(metrics_csv);
  if (!in) throw io_error("cannot open " + metrics_csv);

  std::string line;
  if (!std::getline(in, line)) throw io_error(metrics_csv + ": empty file");
  if (line == "step,scale,t,bin,loss,grad_norm,lr\r") line.pop_back();
  if (line != "step,scale,t,bin,loss,grad_norm,lr")
    throw io_error(metrics_csv + ": unexpected header '" + line + "'");

  // (scale, bin) -> (loss sum, row count), ordered for the output walk.
  std::map<std::pair<int, int>, std::pair<double, int64_t>> cells;
  int64_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> field;
    size_t start = 0;
    for (;;) {
      const size_t comma = line.find(',', start);
      field.push_back(line.substr(start, comma == std::string::npos ? comma : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (field.size() != 7)
      throw io_error(metrics_csv + ": line " + std::to_string(lineno) +
                     " does not have 7 fields");
    try {
      size_t used = 0;
      const int scale = std::stoi(field[1], &used);
      if (used != field[1].size()) throw std::invalid_argument(field[1]);
      const int bin = std::stoi(field[3], &used);
      if (used != field[3].size()) throw std::invalid_argument(field[3]);
      const double loss = std::stod(field[4], &used);
      if (used != field[4].size()) throw std::invalid_argument(field[4]);
      auto& c = cells[{scale, bin}];
      c.first += loss;
      c.second += 1;
    } catch (const std::exception&) {
      throw io_error(metrics_csv + ": cannot parse line " + std::to_string(lineno));
    }
  }

  std::ofstream out = open_out(out_csv);
  out << "scale,bin,mean_loss,count\n" << std::setprecision(10);
  for (const auto& [key, c] : cells)
    out << key.first << ',' << key.second << ',' << c.first / static_cast<double>(c.second)
        << ',' << c.second << '\n';
  if (!out.flush()) throw io_error("write failed for " + out_csv);
}

}  // namespace msdit
