// Command-line front end: corpus synthesis, training, guided sampling,
// metrics analysis, and schedule cost reporting, all driven by one JSON
// configuration file with flag overrides (flags win).
//
// Exit codes: 0 success; 1 usage or configuration problems; 2 numerical
// failure (training or sampling produced non-finite values); 3 file I/O.

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>

#include "msdit/checkpoint.hpp"
#include "msdit/config.hpp"
#include "msdit/patching.hpp"
#include "msdit/sampler.hpp"
#include "msdit/synth.hpp"
#include "msdit/trainer.hpp"

namespace {

using namespace msdit;

std::string shape_text(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

struct MakeDataArgs {
  std::string config, out;
  int64_t count = 0;
  uint64_t seed = 0;
};

struct TrainArgs {
  std::string config, data, out, resume;
  int finetune_tag = 0;
};

struct SampleArgs {
  std::string config, ckpt, out, plan = "multi";
  uint64_t seed = 0;
  double m_pos = 0.0, m_neg_low = 0.0, m_switch = 0.0, cfg_scale = 0.0;
};

struct AnalyzeArgs {
  std::string metrics, out;
};

int run_make_data(const CLI::App& cmd, const MakeDataArgs& a) {
  RunConfig cfg = load_run_config(a.config);
  if (cmd.count("--count")) cfg.data.count = a.count;
  if (cmd.count("--seed")) cfg.data.seed = a.seed;
  cfg.validate();

  Dataset ds = synthesize_corpus(cfg.data);
  write_dataset(ds.samples, a.out);
  std::cout << "wrote " << ds.samples.size() << " samples " << shape_text(ds.shape) << " to "
            << a.out << "\n";
  return 0;
}

int run_train(const CLI::App& cmd, const TrainArgs& a) {
  RunConfig cfg = load_run_config(a.config);
  Dataset data = read_dataset(a.data);

  auto model = Model<float>::init(cfg.model, cfg.train.seed);
  if (cmd.count("--resume")) {
    model.load_state(load_checkpoint(a.resume));
    std::cout << "resumed from " << a.resume << "\n";
  }

  TrainConfig tc = cfg.train;
  tc.out_dir = a.out;
  if (cmd.count("--finetune-tag")) {
    tc.lr = tc.lr_finetune;
    tc.tag_filter = a.finetune_tag;
    std::cout << "fine-tuning on source tag " << a.finetune_tag << " at lr " << tc.lr << "\n";
  }

  Trainer trainer(model, data, tc);
  trainer.run();
  std::cout << "trained " << tc.steps << " steps on " << data.samples.size()
            << " samples; outputs in " << a.out << "\n";
  return 0;
}

int run_sample(const CLI::App& cmd, const SampleArgs& a) {
  RunConfig cfg = load_run_config(a.config);

  GuidanceSpec g = cfg.sample.guidance;
  if (cmd.count("--m-pos")) g.m_pos = a.m_pos;
  if (cmd.count("--m-neg-low")) g.m_neg_low = a.m_neg_low;
  if (cmd.count("--m-switch")) g.m_switch = a.m_switch;
  if (cmd.count("--cfg")) g.cfg_scale = a.cfg_scale;
  g.validate();

  const StagePlan& plan = a.plan == "single" ? cfg.sample.single : cfg.sample.multi;
  const Shape shape{cfg.data.T, cfg.data.H, cfg.data.W, cfg.data.C};

  auto model = Model<float>::init(cfg.model, 0);
  model.load_state(load_checkpoint(a.ckpt));

  std::cout << std::fixed << std::setprecision(4) << "schedule cost "
            << schedule_cost(plan, shape[0], shape[1], shape[2], cfg.model)
            << " relative to finest-at-every-step\n";

  LatentVideo video = sample(model, plan, g, shape, a.seed, cfg.data.fps);
  write_sample_outputs(video, a.out, plan, g, a.seed, cfg.train.motion_block,
                       cfg.train.motion_radius);
  std::cout << "wrote " << shape[0] << " frames to " << a.out << "\n";
  return 0;
}

int run_analyze(const AnalyzeArgs& a) {
  analyze_bins(a.metrics, a.out);
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

int run_flops(const std::string& config) {
  RunConfig cfg = load_run_config(config);
  const Shape s{cfg.data.T, cfg.data.H, cfg.data.W, cfg.data.C};
  std::cout << std::fixed << std::setprecision(4)
            << "single " << schedule_cost(cfg.sample.single, s[0], s[1], s[2], cfg.model) << "\n"
            << "multi " << schedule_cost(cfg.sample.multi, s[0], s[1], s[2], cfg.model) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale flow-matching video model: data, training, sampling"};
  app.require_subcommand(1);

  MakeDataArgs mk;
  CLI::App* mk_cmd = app.add_subcommand("make-data", "Synthesize a labeled latent-video corpus");
  mk_cmd->add_option("--config", mk.config, "JSON run configuration")->required();
  mk_cmd->add_option("--out", mk.out, "Dataset output directory")->required();
  mk_cmd->add_option("--count", mk.count, "Override the sample count");
  mk_cmd->add_option("--seed", mk.seed, "Override the corpus seed");

  TrainArgs tr;
  CLI::App* tr_cmd = app.add_subcommand("train", "Train the velocity model on a dataset");
  tr_cmd->add_option("--config", tr.config, "JSON run configuration")->required();
  tr_cmd->add_option("--data", tr.data, "Dataset directory (from make-data)")->required();
  tr_cmd->add_option("--out", tr.out, "Run output directory")->required();
  tr_cmd->add_option("--resume", tr.resume, "Checkpoint to start the weights from");
  tr_cmd->add_option("--finetune-tag", tr.finetune_tag,
                     "Train only this source tag at the fine-tune rate");

  SampleArgs sm;
  CLI::App* sm_cmd = app.add_subcommand("sample", "Generate a video with a trained model");
  sm_cmd->add_option("--config", sm.config, "JSON run configuration")->required();
  sm_cmd->add_option("--ckpt", sm.ckpt, "Model checkpoint")->required();
  sm_cmd->add_option("--out", sm.out, "Sample output directory")->required();
  sm_cmd->add_option("--seed", sm.seed, "Noise seed");
  sm_cmd->add_option("--plan", sm.plan, "Denoising schedule")
      ->check(CLI::IsMember({"single", "multi"}));
  sm_cmd->add_option("--m-pos", sm.m_pos, "Target motion score");
  sm_cmd->add_option("--m-neg-low", sm.m_neg_low, "Early-phase negative motion score");
  sm_cmd->add_option("--m-switch", sm.m_switch, "Negative-branch switch time");
  sm_cmd->add_option("--cfg", sm.cfg_scale, "Guidance scale");

  AnalyzeArgs an;
  CLI::App* an_cmd =
      app.add_subcommand("analyze-bins", "Aggregate a metrics CSV into per-bin mean losses");
  an_cmd->add_option("--metrics", an.metrics, "metrics.csv from a training run")->required();
  an_cmd->add_option("--out", an.out, "Output CSV path")->required();

  std::string flops_config;
  CLI::App* fl_cmd =
      app.add_subcommand("flops", "Report schedule cost relative to the finest scale");
  fl_cmd->add_option("--config", flops_config, "JSON run configuration")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (mk_cmd->parsed()) return run_make_data(*mk_cmd, mk);
    if (tr_cmd->parsed()) return run_train(*tr_cmd, tr);
    if (sm_cmd->parsed()) return run_sample(*sm_cmd, sm);
    if (an_cmd->parsed()) return run_analyze(an);
    if (fl_cmd->parsed()) return run_flops(flops_config);
  } catch (const numeric_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const io_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const msdit::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
