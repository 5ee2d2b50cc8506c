// fundusam: command-line front end.
//
// Exit codes: 0 success, 1 user error (bad flags, config, data or checkpoint),
// 2 internal error.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "fundusam.hpp"
#include "fundusam/commands.hpp"

namespace {

using namespace fundusam;

struct CommonFlags {
  std::string config_path;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data_root;
  std::optional<std::string> output_dir;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("-c,--config", f.config_path, "Config file (key = value lines)");
  cmd->add_option("-p,--preset", f.preset, "Base preset: desk, published or tiny")->capture_default_str();
  cmd->add_option("-s,--seed", f.seed, "Override train.seed");
  cmd->add_option("-d,--data", f.data_root, "Override paths.data_root");
  cmd->add_option("-o,--out", f.output_dir, "Override paths.output_dir");
}

RunConfig resolve(const CommonFlags& f) {
  RunConfig cfg = RunConfig::preset(f.preset);
  if (!f.config_path.empty()) cfg = load_config(f.config_path, cfg);
  if (f.seed) cfg.seed = *f.seed;
  if (f.data_root) cfg.data_root = *f.data_root;
  if (f.output_dir) cfg.output_dir = *f.output_dir;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optic disc and cup segmentation: synthetic data, training, evaluation, ablation"};
  app.require_subcommand(1);

  CommonFlags synth_f, prep_f, train_f, eval_f, ablate_f, inspect_f;

  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset in the images/ + masks/ layout");
  add_common(synth, synth_f);
  std::optional<int> synth_count;
  std::optional<std::string> synth_contrast;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("-n,--count", synth_count, "Number of samples");
  synth->add_option("--contrast", synth_contrast, "high or low")->check(CLI::IsMember({"high", "low"}));
  synth->add_option("--synth-seed", synth_seed, "Generator seed");

  auto* prep = app.add_subcommand("preprocess", "Crop, polar-warp and normalise a dataset");
  add_common(prep, prep_f);

  auto* train = app.add_subcommand("train", "Train and write a checkpoint");
  add_common(train, train_f);
  std::optional<std::string> resume;
  int stop_after = -1;
  train->add_option("--resume", resume, "Continue from this checkpoint");
  train->add_option("--stop-after", stop_after, "Stop once this many epochs are complete");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on its test split");
  add_common(eval, eval_f);
  std::string eval_ckpt;
  bool overlays = false;
  eval->add_option("-k,--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_flag("--overlays", overlays, "Also write per-sample panels");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the five component combinations");
  add_common(ablate, ablate_f);

  auto* inspect = app.add_subcommand("inspect", "Print the parameter census of a config or checkpoint");
  add_common(inspect, inspect_f);
  std::string inspect_ckpt;
  inspect->add_option("-k,--checkpoint", inspect_ckpt, "Checkpoint file (overrides --config)");

  auto* vis = app.add_subcommand("visualize", "Write a four-panel figure for one sample");
  std::string vis_ckpt, vis_sample, vis_out = "panel.png";
  std::optional<std::string> vis_data;
  vis->add_option("-k,--checkpoint", vis_ckpt, "Checkpoint file")->required();
  vis->add_option("--sample", vis_sample, "Sample id")->required();
  vis->add_option("-o,--out", vis_out, "Output PNG")->capture_default_str();
  vis->add_option("-d,--data", vis_data, "Override paths.data_root");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      RunConfig cfg = resolve(synth_f);
      if (synth_count) cfg.synth.count = *synth_count;
      if (synth_contrast) cfg.synth.sample.contrast = *synth_contrast == "low" ? Contrast::Low : Contrast::High;
      if (synth_seed) cfg.synth.sample.seed = *synth_seed;
      cfg.validate();
      const auto samples = cmd_synth(cfg);
      std::cout << "wrote " << samples.size() << " samples to " << cfg.data_root << '\n';
    } else if (*prep) {
      cmd_preprocess(resolve(prep_f), std::cout);
    } else if (*train) {
      TrainOptions opt;
      opt.resume_from = resume;
      opt.stop_after_epochs = stop_after;
      cmd_train(resolve(train_f), opt, std::cout);
    } else if (*eval) {
      std::optional<RunConfig> expected;
      if (!eval_f.config_path.empty()) expected = resolve(eval_f);
      cmd_eval(eval_ckpt, expected, {eval_f.data_root, eval_f.output_dir, overlays}, std::cout);
    } else if (*ablate) {
      cmd_ablate(resolve(ablate_f), std::cout);
    } else if (*inspect) {
      if (!inspect_ckpt.empty()) {
        std::cout << cmd_inspect(load_checkpoint<Scalar>(inspect_ckpt).config);
      } else {
        std::cout << cmd_inspect(resolve(inspect_f));
      }
    } else if (*vis) {
      cmd_visualize(vis_ckpt, vis_sample, vis_out, {vis_data, std::nullopt, false});
      std::cout << "wrote " << vis_out << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const IngestionError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 1;
  } catch (const EmptyMaskError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 1;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
