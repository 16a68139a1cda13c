// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// when a hard criterion fails; the two statistical ablation criteria are
// soft and only reported.

#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>

#include "sarseg/engine/builder.hpp"
#include "sarseg/engine/gradsuite.hpp"
#include "sarseg/engine/pipeline.hpp"
#include "sarseg/runtime.hpp"

using namespace sarseg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int hard_failures = 0;

void report(bool pass, const std::string& name, const std::string& detail, bool soft = false) {
  std::cout << (pass ? "PASS " : "FAIL ") << name << (soft ? " [soft]" : "") << ": " << detail << std::endl;
  if (!pass && !soft) ++hard_failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <class... Args>
std::string fmt(Args&&... args) {
  std::ostringstream os;
  os.precision(6);
  (os << ... << args);
  return os.str();
}

// Runs a criterion body, turning an escaped exception into a failure line.
template <class F>
void criterion(const std::string& name, F&& body, bool soft = false) {
  try {
    body();
  } catch (const std::exception& e) {
    report(false, name, std::string("threw: ") + e.what(), soft);
  }
}

struct ScratchDir {
  fs::path path;
  explicit ScratchDir(const std::string& tag) : path(fs::temp_directory_path() / ("sarseg_accept_" + tag)) {
    fs::remove_all(path);
  }
  ~ScratchDir() { fs::remove_all(path); }
};

void loss_oracles() {
  const auto t0 = Clock::now();
  using TD = num::Tensor<double>;
  const std::vector<std::uint8_t> y{1};
  const auto mask = loss::ValidMask::from_labels(y);
  // One pixel, two classes, equal logits: p_t = 0.5 and alpha = 0.5.
  const auto even = loss::class_weights(data::stats_from_counts({1, 1}));
  const double focal = loss::focal_loss(TD::from({1, 2, 1, 1}, {0.0, 0.0}), y, mask, even, {}).item();
  // Probabilities (0.3, 0.7) for a pixel of class 1.
  const double dice = loss::dice_loss(TD::from({1, 2, 1, 1}, {0.0, std::log(7.0 / 3.0)}), y, mask, {}).item();
  const auto w = loss::class_weights(data::stats_from_counts({5, 3, 2}));
  const std::vector<double> want{0.25, 0.35, 0.40};
  double weight_err = 0;
  for (std::size_t k = 0; k < 3; ++k) weight_err = std::max(weight_err, std::abs(w.alpha[k] - want[k]));
  const double secs = seconds_since(t0);
  const bool ok = std::abs(focal - 0.3638) <= 1e-4 && std::abs(dice - 0.5882) <= 1e-4 && weight_err == 0 && secs < 1;
  report(ok, "loss oracles",
         fmt("focal ", focal, " (want 0.3638 +- 1e-4), dice ", dice, " (want 0.5882 +- 1e-4), class weights (",
             w.alpha[0], ", ", w.alpha[1], ", ", w.alpha[2], ") max err ", weight_err, ", ", secs, " s"));
}

void gradient_suite() {
  const auto t0 = Clock::now();
  const auto entries = engine::gradient_suite(5);
  const double secs = seconds_since(t0);
  std::size_t passed = 0;
  std::string failed;
  for (const auto& e : entries) {
    if (e.passed && e.seeds == 5) ++passed;
    else failed += " " + e.name;
  }
  report(passed == entries.size() && secs < 300, "gradient suite",
         fmt(passed, "/", entries.size(), " ops and losses pass over 5 seeds, ", secs, " s",
             failed.empty() ? "" : "; failing:" + failed));
}

void metric_oracle() {
  std::mt19937_64 rng(2024);
  int exact = 0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    const int k = 1 + static_cast<int>(rng() % 5);
    const int h = 1 + static_cast<int>(rng() % 16), w = 1 + static_cast<int>(rng() % 16);
    std::vector<std::uint8_t> pred(h * w), gt(h * w);
    for (auto& p : pred) p = static_cast<std::uint8_t>(rng() % k);
    for (auto& g : gt) g = rng() % 10 == 0 ? data::kIgnoreLabel : static_cast<std::uint8_t>(rng() % k);
    metrics::ConfusionMatrix cm(k);
    cm.accumulate(pred, gt);
    const auto iou = metrics::iou_per_class(cm), acc = metrics::acc_per_class(cm);
    bool same = true;
    for (int c = 0; c < k; ++c) {
      // Set counts over valid pixels.
      std::uint64_t inter = 0, uni = 0, support = 0;
      for (std::size_t i = 0; i < gt.size(); ++i) {
        if (gt[i] == data::kIgnoreLabel) continue;
        const bool in_p = pred[i] == c, in_g = gt[i] == c;
        inter += in_p && in_g;
        uni += in_p || in_g;
        support += in_g;
      }
      const std::optional<double> oi = uni ? std::optional(static_cast<double>(inter) / static_cast<double>(uni)) : std::nullopt;
      const std::optional<double> oa =
          support ? std::optional(static_cast<double>(inter) / static_cast<double>(support)) : std::nullopt;
      same = same && iou[c] == oi && acc[c] == oa;
    }
    exact += same;
  }
  report(exact == trials, "metric oracle", fmt(exact, "/", trials, " random cases match the set-count oracle exactly"));
}

void sampling_distribution() {
  data::Raster r;
  r.height = 10;
  r.width = 100;
  r.labels.assign(1000, 0);
  std::fill(r.labels.begin(), r.labels.begin() + 100, 1);
  r.amplitude.assign(1000, 1.0f);
  r.tag = "t";
  const std::vector<data::Raster> rs{r};
  const auto stats = data::compute_class_stats(rs, 2);
  const std::size_t n = 100000;
  const auto draws = data::draw_anchor_pixels(rs, stats, n, 17);
  double rare = 0;
  for (const auto& a : draws) rare += r.labels[a.row * r.width + a.col] == 1;
  const double e = n / 2.0, common = static_cast<double>(n) - rare;
  const double chi2 = (common - e) * (common - e) / e + (rare - e) * (rare - e) / e;
  report(chi2 < 6.635, "sampling distribution",
         fmt("shares ", common / n, "/", rare / n, ", chi-square ", chi2, " (critical 6.635 at alpha 0.01, 1 dof)"));
}

void shapes_and_traces() {
  int shape_ok = 0, combos = 0;
  bool baseline_ok = true, refine_ok = true;
  for (int s : {64, 128, 256}) {
    for (int f = 0; f < 8; ++f) {
      const model::AblationFlags flags{bool(f & 1), bool(f & 2), bool(f & 4)};
      model::Segmenter<float> m(model::ModelConfig::desk(9, flags, s), 3);
      num::NoGradGuard ng;
      num::TraceRecorder rec;
      const auto y = m.forward(num::Tensor<float>::full({1, 1, s, s}, 0.25f));
      ++combos;
      shape_ok += y.shape() == num::Shape{1, 9, s, s};
      const auto& ev = rec.events();
      const auto x4 = std::count_if(ev.begin(), ev.end(), [](const auto& e) {
        return e.op == "bilinear_upsample" && e.detail == "x4";
      });
      const auto x2_head = std::count_if(ev.begin(), ev.end(), [](const auto& e) {
        return e.op == "bilinear_upsample" && e.detail == "x2" && e.scope == "decoder.head";
      });
      if (!flags.high_res_injection && !flags.refine_up && !flags.alpha_scale_enabled) baseline_ok &= x4 == 1;
      if (flags.refine_up) refine_ok &= x2_head == 2 && x4 == 0;
    }
  }
  report(shape_ok == combos && baseline_ok && refine_ok, "shape and trace invariants",
         fmt(shape_ok, "/", combos, " size/flag combinations keep the input size; baseline single 4x: ",
             baseline_ok ? "yes" : "no", "; refine-up two 2x stages: ", refine_ok ? "yes" : "no"));
}

// Four 64 px patches from one 128 px scene.
engine::TrainData overfit_data() {
  engine::SynthConfig sc;
  sc.scenes = 1;
  sc.size = 128;
  sc.tags = {"sep"};
  sc.seed = 3;
  engine::BuildConfig bc;
  bc.anchors = 5000;
  const auto ds = engine::build_dataset({engine::kSceneSourceClasses, engine::synthesize_scenes(sc)}, bc);
  auto data = engine::TrainData::from_dataset(ds);
  data.val = data.train;  // score on the training patches themselves
  return data;
}

void tiny_overfit(engine::Task task) {
  const auto data = overfit_data();
  engine::TrainConfig cfg;
  cfg.task = task;
  cfg.flags = model::AblationFlags::all();
  cfg.optim.total_epochs = 300;
  const auto t0 = Clock::now();
  const auto res = engine::train<float>(data, cfg);
  const double secs = seconds_since(t0);
  const auto& last = res.history.back();
  const double metric = task == engine::Task::Water ? last.val.at("iou_water").get<double>()
                                                    : last.val.at("miou").get<double>();
  const std::string what = task == engine::Task::Water ? "IoU_water" : "mIoU";
  report(metric >= 0.95 && secs < 600, "tiny overfit " + engine::task_name(task),
         fmt(data.train.size(), " patches, 300 epochs: final train ", what, " ", metric, " (need >= 0.95), ", secs,
             " s"));
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Table rows 1 (pretrained, baseline head), 4 (scratch, all refinements)
// and 5 (pretrained, all refinements) on the default synthetic dataset.
void ablation_directions() {
  const auto t0 = Clock::now();
  ScratchDir scratch("ablation");
  const auto ds = engine::build_dataset({engine::kSceneSourceClasses, engine::synthesize_scenes({})}, {});
  const auto data = engine::TrainData::from_dataset(ds);
  const auto unlabeled = ds.split().pretrain;
  const auto rows = engine::ablation_rows();
  const std::size_t picked[3] = {0, 3, 4};
  std::vector<double> miou[3];
  std::ostringstream runs;
  for (std::uint64_t seed : {0, 1, 2}) {
    engine::TrainConfig base;
    base.seed = seed;
    const auto enc = engine::model_config_for(base, data.num_classes, data.patch_size).encoder;
    const auto seed_dir = scratch.path / ("seed_" + std::to_string(seed));
    pretrain::PretrainConfig pcfg;  // 200 steps, batch 8
    const auto pre = engine::pretrain_encoder<float>(unlabeled, data.norm, enc, pcfg, seed, seed_dir / "pretrain");
    for (int i = 0; i < 3; ++i) {
      auto cfg = base;
      cfg.flags = rows[picked[i]].flags;
      cfg.pretrained = rows[picked[i]].pretrained ? pre.encoder_dir.string() : "";
      const auto res = engine::train<float>(data, cfg);
      miou[i].push_back(res.best_metric);
      runs << " s" << seed << "/r" << picked[i] + 1 << "=" << res.best_metric;
    }
  }
  const double baseline = median(miou[0]), scratch_full = median(miou[1]), full = median(miou[2]);
  const double secs = seconds_since(t0);
  std::cout << "  ablation runs (best val mIoU):" << runs.str() << " (" << secs << " s, " << data.train.size()
            << " train / " << data.val.size() << " val patches)" << std::endl;
  report(full >= baseline, "directional ablation",
         fmt("median val mIoU full refinements ", full, " vs baseline head ", baseline, " over seeds 0,1,2"), true);
  report(full >= scratch_full, "pretraining effect",
         fmt("median val mIoU pretrained ", full, " vs scratch ", scratch_full, " over seeds 0,1,2"), true);
}

void dataset_round_trip() {
  ScratchDir dir("roundtrip");
  std::mt19937_64 rng(99);
  std::normal_distribution<float> amp(0, 10);
  data::Dataset ds;
  ds.patch_size = 16;
  ds.num_classes = 9;
  ds.class_names = data::lulc9_class_names();
  ds.splits = engine::default_split_spec();
  const char* tags[] = {"aug", "sep", "oct", "nov"};
  for (int i = 0; i < 1000; ++i) {
    data::PatchPair p;
    p.size = 16;
    p.tag = tags[rng() % 4];
    p.origin = {static_cast<int>(rng() % 10), static_cast<int>(rng() % 512), static_cast<int>(rng() % 512)};
    for (int j = 0; j < 256; ++j) {
      p.image.push_back(amp(rng));
      p.labels.push_back(rng() % 11 == 0 ? data::kIgnoreLabel : static_cast<std::uint8_t>(rng() % 9));
    }
    ds.patches.push_back(std::move(p));
  }
  ds.norm = data::compute_norm_stats(ds.patches);
  data::write_dataset(dir.path, ds);
  const auto back = data::read_dataset(dir.path);
  std::size_t exact = 0;
  for (std::size_t i = 0; i < std::min(back.patches.size(), ds.patches.size()); ++i) {
    const auto& a = ds.patches[i];
    const auto& b = back.patches[i];
    exact += a.size == b.size && a.tag == b.tag && a.labels == b.labels && a.image.size() == b.image.size() &&
             std::memcmp(a.image.data(), b.image.data(), a.image.size() * sizeof(float)) == 0 &&
             a.origin.raster == b.origin.raster && a.origin.row == b.origin.row && a.origin.col == b.origin.col;
  }
  const bool norm_ok = back.norm && back.norm->mean == ds.norm->mean && back.norm->std == ds.norm->std;
  report(exact == 1000 && back.patches.size() == 1000 && norm_ok, "dataset round trip",
         fmt(exact, "/1000 patches bit-exact after write and read"));
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  // --quick skips the training criteria.
  const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
  std::cout << "SKIP paper-scale headline numbers: need 328k-patch pretraining and multi-GPU schedules" << std::endl;
  criterion("loss oracles", loss_oracles);
  criterion("gradient suite", gradient_suite);
  criterion("metric oracle", metric_oracle);
  criterion("sampling distribution", sampling_distribution);
  criterion("shape and trace invariants", shapes_and_traces);
  if (!quick) {
    criterion("tiny overfit lulc", [] { tiny_overfit(engine::Task::Lulc); });
    criterion("tiny overfit water", [] { tiny_overfit(engine::Task::Water); });
    criterion("directional ablation", ablation_directions, true);
  }
  criterion("dataset round trip", dataset_round_trip);
  std::cout << (hard_failures ? "FAILED " : "OK ") << hard_failures << " hard criteria failing" << std::endl;
  return hard_failures ? 1 : 0;
}
