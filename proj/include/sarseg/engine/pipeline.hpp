#pragma once

// Multi-stage runs built on train(): encoder pretraining on the unlabeled
// split, and the five-row refinement ablation.

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "sarseg/engine/train.hpp"
#include "sarseg/pretrain.hpp"

namespace sarseg::engine {

struct PretrainSummary {
  std::vector<double> losses;
  io::fs::path encoder_dir;
};

// Pretrains an encoder with layout `enc` on `patches` (raw amplitudes,
// normalized with `norm` here) and saves it to out_dir. Writes
// pretrain_history.jsonl next to the checkpoint.
template <class T>
PretrainSummary pretrain_encoder(const std::vector<data::PatchPair>& patches, const data::NormStats& norm,
                                 const model::EncoderConfig& enc, const pretrain::PretrainConfig& pcfg,
                                 std::uint64_t seed, const io::fs::path& out_dir) {
  pcfg.validate();
  if (patches.empty()) throw EmptyInputError("pretrain: no unlabeled patches");
  std::vector<data::PatchPair> normed;
  normed.reserve(patches.size());
  for (const auto& p : patches) normed.push_back(data::normalize(p, norm));
  pretrain::Pretrainer<T> trainer(enc, pcfg, norm, seed);
  io::ensure_dir(out_dir);
  std::ofstream hist(out_dir / "pretrain_history.jsonl");
  if (!hist) throw IoError("cannot write " + (out_dir / "pretrain_history.jsonl").string());
  PretrainSummary s;
  s.losses = pretrain::run_pretraining(trainer, normed, pcfg, seed, &hist);
  s.encoder_dir = out_dir / "encoder";
  trainer.save(s.encoder_dir);
  return s;
}

struct AblationRow {
  bool pretrained = true;
  model::AblationFlags flags;
};

// Baseline head, then each refinement switched on in turn, then the full
// set without pretraining, then the full set with it.
inline std::vector<AblationRow> ablation_rows() {
  return {{true, {false, false, false}},
          {true, {true, false, false}},
          {true, {true, true, false}},
          {false, {true, true, true}},
          {true, {true, true, true}}};
}

struct AblationConfig {
  TrainConfig train;
  pretrain::PretrainConfig pretrain;
  std::vector<std::uint64_t> seeds{0};

  void validate() const {
    if (train.task != Task::Lulc) throw ConfigError("ablation: only the lulc task is supported");
    if (seeds.empty()) throw ConfigError("ablation: need at least one seed");
    train.validate();
    pretrain.validate();
  }
};

struct AblationRun {
  std::size_t row = 0;
  std::uint64_t seed = 0;
  double miou = 0, macc = 0;
  int best_epoch = 0;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::vector<AblationRun> runs;

  // Median over seeds of a row's metric.
  double median(std::size_t row, double AblationRun::*field) const {
    std::vector<double> v;
    for (const auto& r : runs)
      if (r.row == row) v.push_back(r.*field);
    if (v.empty()) throw ArgumentError("ablation: no runs for row " + std::to_string(row));
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }

  std::string csv() const {
    std::ostringstream os;
    os << std::setprecision(6) << std::fixed;
    os << "row,pretrained,high_res_injection,refine_up,alpha_scale,miou,macc\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      os << i + 1 << ',' << r.pretrained << ',' << r.flags.high_res_injection << ',' << r.flags.refine_up << ','
         << r.flags.alpha_scale_enabled << ',' << 100 * median(i, &AblationRun::miou) << ','
         << 100 * median(i, &AblationRun::macc) << '\n';
    }
    return os.str();
  }

  std::string runs_csv() const {
    std::ostringstream os;
    os << std::setprecision(6) << std::fixed;
    os << "row,seed,miou,macc,best_epoch\n";
    for (const auto& r : runs)
      os << r.row + 1 << ',' << r.seed << ',' << 100 * r.miou << ',' << 100 * r.macc << ',' << r.best_epoch << '\n';
    return os.str();
  }
};

// Runs every row for every seed under out_dir/seed_<s>/. Pretrained rows
// share one encoder per seed, pretrained on the dataset's pretrain split.
// Reported metrics are re-measured on the validation split from each run's
// best checkpoint. Writes ablation.csv and ablation_runs.csv.
template <class T>
AblationTable ablation_matrix(const data::Dataset& ds, const AblationConfig& cfg, const io::fs::path& out_dir,
                              std::ostream* log = nullptr) {
  cfg.validate();
  const auto data = TrainData::from_dataset(ds);
  const auto& val = data.val.empty() ? data.train : data.val;
  const auto rows = ablation_rows();
  const bool need_pretrain = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.pretrained; });
  const auto unlabeled = ds.split().pretrain;
  if (need_pretrain && unlabeled.empty()) throw EmptyInputError("ablation: dataset has no pretrain split");

  AblationTable table;
  table.rows = rows;
  for (auto seed : cfg.seeds) {
    const auto seed_dir = out_dir / ("seed_" + std::to_string(seed));
    io::fs::path encoder;
    if (need_pretrain) {
      const auto enc = model_config_for(cfg.train, data.num_classes, data.patch_size).encoder;
      encoder = pretrain_encoder<T>(unlabeled, data.norm, enc, cfg.pretrain, seed, seed_dir / "pretrain").encoder_dir;
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto tc = cfg.train;
      tc.flags = rows[i].flags;
      tc.seed = seed;
      tc.pretrained = rows[i].pretrained ? encoder.string() : std::string{};
      TrainOptions opts;
      opts.out_dir = seed_dir / ("row_" + std::to_string(i + 1));
      const auto res = train<T>(data, tc, opts);

      model::Segmenter<T> best(model_config_for(tc, data.num_classes, data.patch_size), seed);
      model::load_model(*opts.out_dir / "best", best);
      const auto ev = evaluate(best, val, data.norm, Task::Lulc, data.num_classes, 0, 0.5, tc.batch);
      AblationRun run{i, seed, metrics::mean_iou(ev.cm).value_or(0.0), metrics::mean_acc(ev.cm).value_or(0.0),
                      res.best_epoch};
      table.runs.push_back(run);
      if (log)
        *log << "ablation seed " << seed << " row " << i + 1 << ": miou " << run.miou << " macc " << run.macc
             << " (epoch " << run.best_epoch << ")\n";
    }
  }
  io::ensure_dir(out_dir);
  io::write_text(out_dir / "ablation.csv", table.csv());
  io::write_text(out_dir / "ablation_runs.csv", table.runs_csv());
  return table;
}

}  // namespace sarseg::engine
