#ifndef FUNDUSAM_PIPELINE_HPP
#define FUNDUSAM_PIPELINE_HPP

// Training, evaluation and ablation drivers.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fundusam/checkpoint.hpp"
#include "fundusam/config.hpp"
#include "fundusam/data.hpp"
#include "fundusam/losses.hpp"
#include "fundusam/metrics.hpp"
#include "fundusam/model.hpp"
#include "fundusam/optim.hpp"
#include "fundusam/peft.hpp"

namespace fundusam {

// ---------------------------------------------------------------------------
// Dataset assembly

struct Dataset {
  std::vector<SampleRecord> train_records;
  std::vector<SampleRecord> test_records;
  std::vector<PreparedSample> train;
  std::vector<PreparedSample> test;
  NormStats norm;
};

/// Split, preprocess, and normalise with statistics from the training split only.
/// A supplied `norm` (from a checkpoint) replaces the recomputed statistics.
inline Dataset prepare_dataset(const RunConfig& cfg, const std::vector<SampleRecord>& records,
                               const std::optional<NormStats>& norm = std::nullopt) {
  if (records.size() < 2) throw IngestionError("dataset needs at least two samples, found " + std::to_string(records.size()));
  Dataset ds;
  std::tie(ds.train_records, ds.test_records) = split(records, cfg.split_ratio, cfg.seed);
  if (ds.train_records.empty() || ds.test_records.empty()) throw IngestionError("split produced an empty partition");
  const auto pp = cfg.preprocess_config();
  ds.train = preprocess_all(ds.train_records, pp);
  ds.test = preprocess_all(ds.test_records, pp);
  ds.norm = norm ? *norm : NormStats::compute(ds.train);
  for (auto& s : ds.train) ds.norm.apply(s.image);
  for (auto& s : ds.test) ds.norm.apply(s.image);
  return ds;
}

inline Dataset load_dataset(const RunConfig& cfg, std::vector<std::string>* warnings = nullptr,
                            const std::optional<NormStats>& norm = std::nullopt) {
  if (!std::filesystem::is_directory(cfg.data_root)) throw IngestionError("dataset root not found: " + cfg.data_root);
  return prepare_dataset(cfg, load_refuge_format(cfg.data_root, warnings), norm);
}

// ---------------------------------------------------------------------------
// Training

struct StepRecord {
  int epoch = 0;
  std::uint64_t step = 0;
  LossBreakdown loss;  // mean over the batch
};

struct EpochRecord {
  int epoch = 0;
  LossBreakdown loss;  // mean over samples
  double seconds = 0.0;
};

struct TrainOptions {
  std::optional<std::string> resume_from;
  int stop_after_epochs = -1;  // stop once this many epochs are complete (for interruption tests)
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Owns the model, the partition and the optimizer for one run.
template <typename T>
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg)
      : cfg_(cfg),
        model_(model_config(cfg)),
        partition_(partition_parameters(model_.parameters(), cfg.mode)),
        adam_(model_.parameters(), partition_, cfg.adam) {
    cfg.validate();
  }

  void resume(const Checkpoint<T>& ck) {
    require_compatible(cfg_, ck.arch_hash);
    load_weights(model_, ck);
    if (!ck.first_moments.empty()) adam_.restore(ck.optimizer_steps, ck.first_moments, ck.second_moments);
    epochs_done_ = static_cast<int>(ck.epochs_completed);
    norm_ = ck.norm;
  }

  void set_norm(const NormStats& n) { norm_ = n; }

  /// One pass over `train`. Order and prompts depend only on (seed, epoch).
  EpochRecord run_epoch(const std::vector<PreparedSample>& train, const std::function<void(const StepRecord&)>& on_step) {
    if (train.empty()) throw InvalidArgument("run_epoch: empty training set");
    const auto start = std::chrono::steady_clock::now();
    const int epoch = epochs_done_ + 1;
    std::mt19937_64 order_rng(derive_seed(cfg_.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), order_rng);
    std::mt19937_64 prompt_rng(derive_seed(cfg_.seed, kTrainPromptStream, static_cast<std::uint64_t>(epoch)));

    EpochRecord rec;
    rec.epoch = epoch;
    const auto batch = static_cast<std::size_t>(cfg_.batch_size);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const std::size_t b1 = std::min(order.size(), b0 + batch);
      const T inv = T(1) / static_cast<T>(b1 - b0);
      model_.parameters().zero_grad();
      LossBreakdown batch_loss;
      for (std::size_t k = b0; k < b1; ++k) {
        const auto& s = train[order[k]];
        const auto prompt = sample_point_prompt(s.masks.disc, prompt_rng);
        const auto logits = model_.forward(s.image, prompt);
        auto [total, parts] = joint_loss(logits, s.masks.disc.bits(), s.masks.cup.bits(), cfg_.loss);
        ag::backward(ag::scale(total, inv));
        batch_loss += parts;
      }
      adam_.step();
      rec.loss += batch_loss;
      batch_loss /= static_cast<double>(b1 - b0);
      if (on_step) on_step({epoch, adam_.steps(), batch_loss});
    }
    rec.loss /= static_cast<double>(train.size());
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    epochs_done_ = epoch;
    return rec;
  }

  /// Runs epochs until cfg.epochs (or the stop point) and returns the per-epoch log.
  std::vector<EpochRecord> fit(const std::vector<PreparedSample>& train, const TrainOptions& opt = {}) {
    std::vector<EpochRecord> log;
    while (epochs_done_ < cfg_.epochs) {
      if (opt.stop_after_epochs >= 0 && epochs_done_ >= opt.stop_after_epochs) break;
      log.push_back(run_epoch(train, opt.on_step));
      if (opt.on_epoch) opt.on_epoch(log.back());
    }
    return log;
  }

  void save(const std::string& path) const {
    const auto tmp = path + ".tmp";
    save_checkpoint(tmp, cfg_, model_, partition_, &adam_, static_cast<std::uint64_t>(epochs_done_), norm_);
    std::filesystem::rename(tmp, path);
  }

  [[nodiscard]] const RunConfig& config() const { return cfg_; }
  FunduSam<T>& model() { return model_; }
  [[nodiscard]] const FunduSam<T>& model() const { return model_; }
  [[nodiscard]] const ParameterPartition& partition() const { return partition_; }
  [[nodiscard]] const Adam<T>& optimizer() const { return adam_; }
  [[nodiscard]] int epochs_completed() const { return epochs_done_; }
  [[nodiscard]] const NormStats& norm() const { return norm_; }

 private:
  RunConfig cfg_;
  FunduSam<T> model_;
  ParameterPartition partition_;
  Adam<T> adam_;
  int epochs_done_ = 0;
  NormStats norm_;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Maps a sample to a predicted Cartesian mask pair in the source frame.
/// `index` is the sample's position in the evaluated list.
using Predictor = std::function<MaskPair(const SampleRecord&, const PreparedSample&, std::size_t index)>;

/// Model-resolution prediction: logits > 0 (probability > 0.5) per channel.
template <typename T>
PolarMaskPair predict_polar(const FunduSam<T>& model, const PreparedSample& s, const PointPrompt& prompt) {
  ag::NoGradGuard guard;
  const auto logits = model.forward(s.image, prompt);
  const int h = s.image.height();
  const int w = s.image.width();
  PolarMaskPair out{PolarMask(h, w), PolarMask(h, w)};
  for (int i = 0; i < h * w; ++i) {
    out.disc.bits()[static_cast<std::size_t>(i)] = logits.value()(i, 0) > T(0) ? 1 : 0;
    out.cup.bits()[static_cast<std::size_t>(i)] = logits.value()(i, 1) > T(0) ? 1 : 0;
  }
  return out;
}

inline PointPrompt eval_prompt(const PreparedSample& s, std::uint64_t seed, std::size_t index) {
  std::mt19937_64 rng(derive_seed(seed, kEvalPromptStream, index));
  return sample_point_prompt(s.masks.disc, rng);
}

template <typename T>
Predictor model_predictor(const FunduSam<T>& model, std::uint64_t seed) {
  return [&model, seed](const SampleRecord&, const PreparedSample& s, std::size_t index) {
    const auto polar = predict_polar(model, s, eval_prompt(s, seed, index));
    return MaskPair{to_source_frame(polar.disc, s), to_source_frame(polar.cup, s)};
  };
}

inline SampleMetrics score_sample(const std::string& id, const MaskPair& pred, const MaskPair& truth) {
  SampleMetrics m;
  m.id = id;
  m.disc_dice = dice(pred.disc, truth.disc);
  m.disc_iou = iou(pred.disc, truth.disc);
  m.cup_dice = dice(pred.cup, truth.cup);
  m.cup_iou = iou(pred.cup, truth.cup);
  if (pred.disc.any() && truth.disc.any()) m.cdr_error = std::abs(cdr(pred.disc, pred.cup) - cdr(truth.disc, truth.cup));
  return m;
}

/// Scores `predict` on every (record, prepared) pair in the source frame.
inline MetricReport evaluate(const Predictor& predict, const std::vector<SampleRecord>& records,
                             const std::vector<PreparedSample>& prepared, int workers = worker_count()) {
  if (records.empty()) throw InvalidArgument("evaluate: empty dataset");
  if (records.size() != prepared.size()) throw InvalidArgument("evaluate: records and prepared samples differ in count");
  MetricReport report;
  report.samples.resize(records.size());
  parallel_for(records.size(), workers, [&](std::size_t i) {
    const auto pred = predict(records[i], prepared[i], i);
    report.samples[i] = score_sample(records[i].id, pred, {records[i].disc, records[i].cup});
  });
  report.aggregate();
  return report;
}

namespace detail {

inline std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace detail

/// Summary table: one row, Dice/IoU for disc and cup.
inline std::string format_table(const MetricReport& r, const std::string& method = "FunduSAM") {
  std::string s = "method\tdisc_dice\tdisc_iou\tcup_dice\tcup_iou\tn\n";
  s += method + "\t" + detail::fixed6(r.disc_dice) + "\t" + detail::fixed6(r.disc_iou) + "\t" +
       detail::fixed6(r.cup_dice) + "\t" + detail::fixed6(r.cup_iou) + "\t" + std::to_string(r.count()) + "\n";
  return s;
}

inline std::string format_per_sample(const MetricReport& r) {
  std::string s = "id\tdisc_dice\tdisc_iou\tcup_dice\tcup_iou\tcdr_error\n";
  for (const auto& m : r.samples) {
    s += m.id + "\t" + detail::fixed6(m.disc_dice) + "\t" + detail::fixed6(m.disc_iou) + "\t" +
         detail::fixed6(m.cup_dice) + "\t" + detail::fixed6(m.cup_iou) + "\t" +
         (m.cdr_error ? detail::fixed6(*m.cdr_error) : std::string("NA")) + "\n";
  }
  return s;
}

inline nlohmann::json report_json(const MetricReport& r) {
  nlohmann::json j;
  j["count"] = r.count();
  j["mean"] = {{"disc", {{"dice", r.disc_dice}, {"iou", r.disc_iou}}}, {"cup", {{"dice", r.cup_dice}, {"iou", r.cup_iou}}}};
  j["cdr_error"] = r.mean_cdr_error ? nlohmann::json(*r.mean_cdr_error) : nlohmann::json(nullptr);
  j["cdr_count"] = r.cdr_count;
  auto& rows = j["samples"] = nlohmann::json::array();
  for (const auto& m : r.samples) {
    rows.push_back({{"id", m.id},
                    {"disc_dice", m.disc_dice},
                    {"disc_iou", m.disc_iou},
                    {"cup_dice", m.cup_dice},
                    {"cup_iou", m.cup_iou},
                    {"cdr_error", m.cdr_error ? nlohmann::json(*m.cdr_error) : nlohmann::json(nullptr)}});
  }
  return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IngestionError("cannot open for writing: " + path.string());
  os << text;
  if (!os) throw IngestionError("write failed: " + path.string());
}

inline void write_report(const std::filesystem::path& dir, const MetricReport& r) {
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.tsv", format_table(r));
  write_text(dir / "per_sample.tsv", format_per_sample(r));
  write_text(dir / "metrics.json", report_json(r).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// End-to-end run and ablation

struct RunResult {
  std::vector<EpochRecord> epochs;
  MetricReport report;
};

/// Trains a fresh model on `ds.train` and scores it on the test split.
template <typename T>
RunResult train_and_evaluate(const RunConfig& cfg, const Dataset& ds, const TrainOptions& opt = {}) {
  Trainer<T> trainer(cfg);
  trainer.set_norm(ds.norm);
  RunResult r;
  r.epochs = trainer.fit(ds.train, opt);
  r.report = evaluate(model_predictor(trainer.model(), cfg.seed), ds.test_records, ds.test);
  return r;
}

struct AblationRow {
  bool cbam;
  bool adapter;
  bool polar;
  std::uint64_t seed;
  MetricReport report;
};

/// Component toggles (CBAM, adapter, polar transform) of the ablation table, in order.
inline constexpr std::array<std::array<bool, 3>, 5> kAblationRows = {{
    {false, false, false},
    {true, true, false},
    {true, false, true},
    {false, true, true},
    {true, true, true},
}};

/// Trains and evaluates every row on the same records, split, seed and schedule.
template <typename T>
std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<SampleRecord>& records,
                                const std::function<void(const AblationRow&)>& on_row = {}) {
  std::vector<AblationRow> rows;
  for (const auto& t : kAblationRows) {
    RunConfig cfg = base;
    cfg.model.use_cbam = t[0];
    cfg.model.use_adapter = t[1];
    cfg.use_polar = t[2];
    const Dataset ds = prepare_dataset(cfg, records);
    AblationRow row{t[0], t[1], t[2], cfg.seed, train_and_evaluate<T>(cfg, ds).report};
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::string s = "sam\tcbam\tadapter\tpt\tseed\tdisc_dice\tdisc_iou\tcup_dice\tcup_iou\n";
  auto mark = [](bool b) { return std::string(b ? "yes" : "no"); };
  for (const auto& r : rows) {
    s += "yes\t" + mark(r.cbam) + "\t" + mark(r.adapter) + "\t" + mark(r.polar) + "\t" + std::to_string(r.seed) + "\t" +
         detail::fixed6(r.report.disc_dice) + "\t" + detail::fixed6(r.report.disc_iou) + "\t" +
         detail::fixed6(r.report.cup_dice) + "\t" + detail::fixed6(r.report.cup_iou) + "\n";
  }
  return s;
}

}  // namespace fundusam

#endif  // FUNDUSAM_PIPELINE_HPP
