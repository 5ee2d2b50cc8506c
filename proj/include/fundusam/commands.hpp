#ifndef FUNDUSAM_COMMANDS_HPP
#define FUNDUSAM_COMMANDS_HPP

// Implementations behind the command-line subcommands. Each takes a validated
// RunConfig and writes its artefacts below the configured directories.
//
//   synth       <data_root>/{images,masks}/synth_NNNN.png, manifest.json
//   preprocess  <output_dir>/preprocessed/{train,test}/<id>.{fsr,png}, *_disc.png, *_cup.png, norm.json
//   train       <output_dir>/checkpoint.fsam, train_log.tsv, epochs.tsv, census.tsv
//   eval        <output_dir>/eval/{metrics.tsv,per_sample.tsv,metrics.json}[, overlays/<id>.png]
//   ablate      <output_dir>/ablation.tsv, ablation.json
//   visualize   a four-panel PNG

#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fundusam/checkpoint.hpp"
#include "fundusam/config.hpp"
#include "fundusam/data.hpp"
#include "fundusam/image_io.hpp"
#include "fundusam/pipeline.hpp"
#include "fundusam/visualize.hpp"

namespace fundusam {

using Scalar = float;

namespace fs = std::filesystem;

inline fs::path checkpoint_path(const RunConfig& cfg) { return fs::path(cfg.output_dir) / "checkpoint.fsam"; }

/// Writes cfg.synth.count synthetic records and a manifest to cfg.data_root.
inline std::vector<SyntheticSample> cmd_synth(const RunConfig& cfg) {
  cfg.validate();
  auto samples = synthesize_dataset(cfg.synth.sample, cfg.synth.count);
  std::vector<SampleRecord> records;
  records.reserve(samples.size());
  for (const auto& s : samples) records.push_back(s.record);
  try {
    write_refuge_format(cfg.data_root, records);
  } catch (const fs::filesystem_error& e) {
    throw IngestionError(std::string("cannot write dataset: ") + e.what());
  }

  nlohmann::json m;
  m["generator_seed"] = cfg.synth.sample.seed;
  m["count"] = cfg.synth.count;
  m["contrast"] = cfg.synth.sample.contrast == Contrast::High ? "high" : "low";
  m["image_size"] = cfg.synth.sample.image_size;
  auto& rows = m["samples"] = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& t = samples[i].truth;
    rows.push_back({{"id", samples[i].record.id},
                    {"seed", derive_seed(cfg.synth.sample.seed, kSynthStream, i)},
                    {"center", {t.center_x, t.center_y}},
                    {"disc_axes", {t.disc_ax, t.disc_ay}},
                    {"cup_ratio", {t.cup_ratio_x, t.cup_ratio_y}}});
  }
  write_text(fs::path(cfg.data_root) / "manifest.json", m.dump(2) + "\n");
  return samples;
}

/// Materialises the model inputs so they can be inspected.
inline Dataset cmd_preprocess(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  std::vector<std::string> warnings;
  Dataset ds = load_dataset(cfg, &warnings);
  for (const auto& w : warnings) log << "warning: " << w << '\n';
  const fs::path root = fs::path(cfg.output_dir) / "preprocessed";
  auto dump = [&](const std::vector<PreparedSample>& set, const std::vector<SampleRecord>& raw, const char* name) {
    const fs::path dir = root / name;
    fs::create_directories(dir);
    const auto pp = cfg.preprocess_config();
    for (std::size_t i = 0; i < set.size(); ++i) {
      const auto& s = set[i];
      write_raster((dir / (s.id + ".fsr")).string(), s.image);
      write_png((dir / (s.id + ".png")).string(), preprocess(raw[i], pp).image, 8);
      write_mask_png((dir / (s.id + "_disc.png")).string(), s.masks.disc);
      write_mask_png((dir / (s.id + "_cup.png")).string(), s.masks.cup);
    }
  };
  dump(ds.train, ds.train_records, "train");
  dump(ds.test, ds.test_records, "test");
  write_text(root / "norm.json", nlohmann::json{{"mean", ds.norm.mean}, {"stddev", ds.norm.stddev}}.dump(2) + "\n");
  log << "preprocessed " << ds.train.size() << " train / " << ds.test.size() << " test samples into " << root.string()
      << '\n';
  return ds;
}

inline std::string format_step(const StepRecord& s) {
  return std::to_string(s.epoch) + "\t" + std::to_string(s.step) + "\t" + detail::fixed6(s.loss.l_disk) + "\t" +
         detail::fixed6(s.loss.l_cup) + "\t" + detail::fixed6(s.loss.l_contain) + "\t" + detail::fixed6(s.loss.total) +
         "\n";
}

struct TrainSummary {
  std::vector<EpochRecord> epochs;
  int epochs_completed = 0;
  fs::path checkpoint;
};

/// Seeded, resumable training. The checkpoint is written when the loop ends,
/// including an early stop requested through `opt.stop_after_epochs`.
inline TrainSummary cmd_train(const RunConfig& cfg, const TrainOptions& opt, std::ostream& log) {
  cfg.validate();
  std::optional<Checkpoint<Scalar>> resume;
  if (opt.resume_from) {
    resume = load_checkpoint<Scalar>(*opt.resume_from);
    require_compatible(cfg, resume->arch_hash);
  }
  std::vector<std::string> warnings;
  const Dataset ds = load_dataset(cfg, &warnings, resume ? std::optional<NormStats>(resume->norm) : std::nullopt);
  for (const auto& w : warnings) log << "warning: " << w << '\n';

  Trainer<Scalar> trainer(cfg);
  trainer.set_norm(ds.norm);
  if (resume) trainer.resume(*resume);

  fs::create_directories(cfg.output_dir);
  const fs::path out(cfg.output_dir);
  write_text(out / "census.tsv", trainer.partition().census());
  write_text(out / "config.txt", serialize_config(cfg));

  const auto mode = resume ? std::ios::app : std::ios::trunc;
  std::ofstream steps(out / "train_log.tsv", std::ios::binary | std::ios::out | mode);
  std::ofstream epochs(out / "epochs.tsv", std::ios::binary | std::ios::out | mode);
  if (!steps || !epochs) throw IngestionError("cannot write training logs in " + out.string());
  if (!resume) {
    steps << "epoch\tstep\tl_disk\tl_cup\tl_contain\ttotal\n";
    epochs << "epoch\tl_disk\tl_cup\tl_contain\ttotal\n";
  }
  log << "training " << mode_name(cfg.mode) << ": " << ds.train.size() << " train samples, "
      << trainer.partition().trainable_count() << " / " << trainer.partition().total() << " parameters trainable\n";

  TrainOptions run = opt;
  run.on_step = [&](const StepRecord& s) {
    steps << format_step(s);
    if (opt.on_step) opt.on_step(s);
  };
  run.on_epoch = [&](const EpochRecord& e) {
    epochs << e.epoch << '\t' << detail::fixed6(e.loss.l_disk) << '\t' << detail::fixed6(e.loss.l_cup) << '\t'
           << detail::fixed6(e.loss.l_contain) << '\t' << detail::fixed6(e.loss.total) << '\n';
    epochs.flush();
    steps.flush();
    char secs[32];
    std::snprintf(secs, sizeof(secs), "%.1f", e.seconds);
    log << "epoch " << e.epoch << "/" << cfg.epochs << "  l_disk " << detail::fixed6(e.loss.l_disk) << "  l_cup "
        << detail::fixed6(e.loss.l_cup) << "  l_contain " << detail::fixed6(e.loss.l_contain) << "  total "
        << detail::fixed6(e.loss.total) << "  (" << secs << " s)\n";
    if (opt.on_epoch) opt.on_epoch(e);
  };

  TrainSummary summary;
  summary.epochs = trainer.fit(ds.train, run);
  summary.epochs_completed = trainer.epochs_completed();
  summary.checkpoint = checkpoint_path(cfg);
  trainer.save(summary.checkpoint.string());
  log << "checkpoint written to " << summary.checkpoint.string() << '\n';
  return summary;
}

/// Rebuilds a model from a checkpoint. A supplied `expected` config must have
/// the same architecture; the error reports both hashes.
inline std::pair<FunduSam<Scalar>, Checkpoint<Scalar>> load_model(const std::string& path,
                                                                  const std::optional<RunConfig>& expected) {
  if (!fs::exists(path)) throw IngestionError("checkpoint not found: " + path);
  auto ck = load_checkpoint<Scalar>(path);
  if (expected) require_compatible(*expected, ck.arch_hash);
  FunduSam<Scalar> model(model_config(ck.config));
  load_weights(model, ck);
  return {std::move(model), std::move(ck)};
}

/// Runtime settings taken from the command line rather than the checkpoint.
struct EvalSettings {
  std::optional<std::string> data_root;
  std::optional<std::string> output_dir;
  bool overlays = false;
};

inline RunConfig runtime_config(RunConfig cfg, const EvalSettings& s) {
  if (s.data_root) cfg.data_root = *s.data_root;
  if (s.output_dir) cfg.output_dir = *s.output_dir;
  return cfg;
}

inline void write_overlays(const fs::path& dir, const FunduSam<Scalar>& model, const RunConfig& cfg, const Dataset& ds) {
  fs::create_directories(dir);
  const auto pp = cfg.preprocess_config();
  for (std::size_t i = 0; i < ds.test.size(); ++i) {
    const auto& s = ds.test[i];
    const auto polar = predict_polar(model, s, eval_prompt(s, cfg.seed, i));
    const MaskPair cart{to_source_frame(polar.disc, s), to_source_frame(polar.cup, s)};
    const auto raw = preprocess(ds.test_records[i], pp);
    write_png((dir / (s.id + ".png")).string(),
              compose_panel(ds.test_records[i].image, raw.image, polar, cart, cfg.model.encoder.image_size), 8);
  }
}

/// Scores the checkpoint on the test split of the dataset it was trained with.
inline MetricReport cmd_eval(const std::string& checkpoint, const std::optional<RunConfig>& expected,
                             const EvalSettings& settings, std::ostream& log) {
  auto [model, ck] = load_model(checkpoint, expected);
  const RunConfig cfg = runtime_config(ck.config, settings);
  std::vector<std::string> warnings;
  const Dataset ds = load_dataset(cfg, &warnings, ck.norm);
  for (const auto& w : warnings) log << "warning: " << w << '\n';
  const auto report = evaluate(model_predictor(model, cfg.seed), ds.test_records, ds.test);
  const fs::path dir = fs::path(cfg.output_dir) / "eval";
  write_report(dir, report);
  if (settings.overlays) write_overlays(dir / "overlays", model, cfg, ds);
  log << format_table(report);
  return report;
}

inline std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  std::vector<std::string> warnings;
  if (!fs::is_directory(cfg.data_root)) throw IngestionError("dataset root not found: " + cfg.data_root);
  const auto records = load_refuge_format(cfg.data_root, &warnings);
  for (const auto& w : warnings) log << "warning: " << w << '\n';
  auto rows = ablate<Scalar>(cfg, records, [&](const AblationRow& r) {
    log << "row cbam=" << r.cbam << " adapter=" << r.adapter << " pt=" << r.polar << "  disc dice "
        << detail::fixed6(r.report.disc_dice) << "  cup dice " << detail::fixed6(r.report.cup_dice) << '\n';
  });
  fs::create_directories(cfg.output_dir);
  write_text(fs::path(cfg.output_dir) / "ablation.tsv", format_ablation(rows));
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    j.push_back({{"cbam", r.cbam}, {"adapter", r.adapter}, {"polar", r.polar}, {"seed", r.seed}, {"report", report_json(r.report)}});
  }
  write_text(fs::path(cfg.output_dir) / "ablation.json", j.dump(2) + "\n");
  log << format_ablation(rows);
  return rows;
}

/// Parameter census for a configuration (shape only, nothing allocated).
inline std::string cmd_inspect(const RunConfig& cfg) {
  cfg.validate();
  FunduSam<Scalar> model(model_config(cfg), true);
  const auto p = partition_parameters(model.parameters(), cfg.mode);
  char frac[32];
  std::snprintf(frac, sizeof(frac), "%.6f", trainable_fraction(p));
  return "architecture_hash\t" + hex64(architecture_hash(cfg)) + "\nmode\t" + std::string(mode_name(cfg.mode)) +
         "\n" + p.census() + "trainable_fraction\t" + frac + "\n";
}

/// Four-panel figure for one sample of the checkpoint's dataset (train or test split).
inline void cmd_visualize(const std::string& checkpoint, const std::string& sample_id, const std::string& out_png,
                          const EvalSettings& settings) {
  auto [model, ck] = load_model(checkpoint, std::nullopt);
  const RunConfig cfg = runtime_config(ck.config, settings);
  const Dataset ds = load_dataset(cfg, nullptr, ck.norm);
  auto find = [&](const std::vector<PreparedSample>& set) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < set.size(); ++i) {
      if (set[i].id == sample_id) return i;
    }
    return std::nullopt;
  };
  const bool in_test = find(ds.test).has_value();
  const auto idx = in_test ? find(ds.test) : find(ds.train);
  if (!idx) throw InvalidArgument("no sample with id '" + sample_id + "' in " + cfg.data_root);
  const auto& s = in_test ? ds.test[*idx] : ds.train[*idx];
  const auto& rec = in_test ? ds.test_records[*idx] : ds.train_records[*idx];
  const auto polar = predict_polar(model, s, eval_prompt(s, cfg.seed, *idx));
  const MaskPair cart{to_source_frame(polar.disc, s), to_source_frame(polar.cup, s)};
  const auto raw = preprocess(rec, cfg.preprocess_config());
  const auto parent = fs::path(out_png).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  write_png(out_png, compose_panel(rec.image, raw.image, polar, cart, cfg.model.encoder.image_size), 8);
}

}  // namespace fundusam

#endif  // FUNDUSAM_COMMANDS_HPP
