// sarseg: synthesize scenes, build datasets, pretrain, finetune, evaluate,
// predict, run gradient checks and the refinement ablation.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid input.
// Failures print one line to stderr: "error: <category>: <message>".

#include <CLI11.hpp>

#include <functional>
#include <iostream>
#include <optional>

#include "sarseg/engine/builder.hpp"
#include "sarseg/engine/gradsuite.hpp"
#include "sarseg/engine/pipeline.hpp"
#include "sarseg/runtime.hpp"

using namespace sarseg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Binds flags to config fields. Each flag has a config-file key (a JSON
// pointer path such as "optim/base_lr"); values from --config fill every
// field whose flag was not given on the command line.
class Bindings {
 public:
  explicit Bindings(CLI::App* app) : app_(app) {}

  template <class T>
  CLI::Option* add(const std::string& flags, const std::string& key, T& var, const std::string& help) {
    auto* opt = app_->add_option(flags, var, help + " [config: " + key + "]")->capture_default_str();
    entries_.push_back({key, opt, [&var](const json& v) { var = v.get<T>(); }});
    return opt;
  }

  void apply_config(const std::string& path) const {
    if (path.empty()) return;
    const auto cfg = io::read_json<ConfigError>(path);
    if (!cfg.is_object()) throw ConfigError(path + ": config must be a JSON object");
    check_keys(cfg, "", path);
    for (const auto& e : entries_) {
      const json::json_pointer ptr("/" + e.key);
      if (e.opt->count() > 0 || !cfg.contains(ptr)) continue;
      try {
        e.set(cfg.at(ptr));
      } catch (const json::exception& ex) {
        throw ConfigError(path + ": key '" + e.key + "': " + ex.what());
      }
    }
  }

 private:
  // Objects nest keys; any other value (arrays included) must sit on a bound key.
  void check_keys(const json& obj, const std::string& prefix, const std::string& path) const {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      const auto key = prefix + it.key();
      const bool known = std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.key == key; });
      if (known) continue;
      if (!it->is_object()) throw ConfigError(path + ": unknown key '" + key + "'");
      check_keys(*it, key + "/", path);
    }
  }

  struct Entry {
    std::string key;
    CLI::Option* opt;
    std::function<void(const json&)> set;
  };
  CLI::App* app_;
  std::vector<Entry> entries_;
};

void require(const std::string& value, const std::string& what) {
  if (value.empty()) throw ArgumentError("missing " + what);
}

// Output directories must be new or empty so runs never mix.
void require_fresh_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw ArgumentError(dir.string() + " exists and is not a directory");
  if (!force && fs::exists(dir) && !fs::is_empty(dir))
    throw ArgumentError(dir.string() + " is not empty (pass --force to write into it)");
}

void require_distinct(const fs::path& input, const fs::path& output) {
  if (fs::exists(input) && fs::exists(output) && fs::equivalent(input, output))
    throw ArgumentError("output directory must differ from the input directory");
  const auto in = fs::weakly_canonical(input), out = fs::weakly_canonical(output);
  const auto rel = out.lexically_relative(in);
  if (!rel.empty() && *rel.begin() != "..") throw ArgumentError("output directory must not lie inside the input directory");
}

void bind_optim(Bindings& b, engine::OptimConfig& o, const std::string& prefix) {
  b.add("--lr,--base-lr", prefix + "base_lr", o.base_lr, "Peak learning rate");
  b.add("--weight-decay", prefix + "weight_decay", o.weight_decay, "Decoupled weight decay");
  b.add("--beta1", prefix + "beta1", o.beta1, "First-moment decay");
  b.add("--beta2", prefix + "beta2", o.beta2, "Second-moment decay");
  b.add("--eps", prefix + "eps", o.eps, "Adam epsilon");
  b.add("--layer-decay", prefix + "layer_decay", o.layer_decay, "Per-depth learning-rate factor");
  b.add("--min-lr", prefix + "min_lr", o.min_lr, "Learning-rate floor of the cosine");
  b.add("--global-batch-scaling", prefix + "global_batch_scaling", o.global_batch_scaling,
        "Scale the peak by global_batch/256");
  b.add("--global-batch", prefix + "global_batch", o.global_batch, "Global batch for scaling");
}

void bind_train(Bindings& b, engine::TrainConfig& c, std::string& task) {
  b.add("--task", "task", task, "lulc or water")->check(CLI::IsMember({"lulc", "water"}));
  b.add("--high-res-injection", "flags/high_res_injection", c.flags.high_res_injection,
        "Feed stride-4 embedding features to the decoder");
  b.add("--refine-up", "flags/refine_up", c.flags.refine_up, "Two refined 2x stages instead of one 4x resize");
  b.add("--alpha-scale", "flags/alpha_scale_enabled", c.flags.alpha_scale_enabled,
        "Tempered class weights inside the focal term");
  bind_optim(b, c.optim, "optim/");
  b.add("--epochs", "optim/total_epochs", c.optim.total_epochs, "Epochs in the schedule");
  b.add("--warmup-epochs", "optim/warmup_epochs", c.optim.warmup_epochs, "Linear warmup epochs");
  b.add("--batch", "batch", c.batch, "Patches per step");
  b.add("--water-class", "water_class", c.water_class, "Class id treated as water for the water task");
  b.add("--threshold", "water_threshold", c.water_threshold, "Water probability threshold (>=)");
  b.add("--pretrained", "pretrained", c.pretrained, "Encoder checkpoint directory; empty trains from scratch");
  b.add("--alpha-scale-value", "loss/alpha_scale", c.loss.alpha_scale, "Class-weight temper factor");
  b.add("--gamma", "loss/gamma", c.loss.gamma, "Focal exponent");
  b.add("--lambda-focal", "loss/lambda_focal", c.loss.lambda_focal, "Focal term weight");
  b.add("--lambda-dice", "loss/lambda_dice", c.loss.lambda_dice, "Dice term weight");
  b.add("--water-lambda-dice", "water_lambda_dice", c.water_loss.lambda_dice, "Dice weight in the water loss");
  b.add("--fpn-width", "fpn_width", c.fpn_width, "Decoder channel width");
  b.add("--window", "window", c.window, "Attention window side");
}

void bind_pretrain(Bindings& b, pretrain::PretrainConfig& c, const std::string& prefix) {
  b.add("--mask-ratio", prefix + "mask_ratio", c.mask_ratio, "Share of cells taken from the second image");
  b.add("--granularity", prefix + "granularity", c.granularity, "Mixing cell side in pixels");
  b.add("--decoder-dim", prefix + "decoder_dim", c.decoder_dim, "Reconstruction head width");
  b.add("--decoder-heads", prefix + "decoder_heads", c.decoder_heads, "Reconstruction head attention heads");
  b.add("--decoder-blocks", prefix + "decoder_blocks", c.decoder_blocks, "Reconstruction head blocks");
  b.add("--w-min", prefix + "w_min", c.bounds.w_min, "Lower clamp of the power weights");
  b.add("--w-max", prefix + "w_max", c.bounds.w_max, "Upper clamp of the power weights");
  b.add("--pretrain-steps", prefix + "steps", c.steps, "Optimizer steps");
  b.add("--pretrain-batch", prefix + "batch", c.batch, "Images per step (even)");
  b.add("--pretrain-warmup", prefix + "warmup_steps", c.warmup_steps, "Linear warmup steps");
}

// Patches of one split with their indices in the dataset.
struct Selection {
  std::vector<data::PatchPair> patches;
  std::vector<std::size_t> index;
};

Selection select_split(const data::Dataset& ds, const std::string& split) {
  Selection s;
  const bool all = split == "all";
  const auto want = all ? data::Split::Train : data::parse_split(split);
  for (std::size_t i = 0; i < ds.patches.size(); ++i) {
    const auto it = ds.splits.find(ds.patches[i].tag);
    if (all || (it != ds.splits.end() && it->second == want)) {
      s.patches.push_back(ds.patches[i]);
      s.index.push_back(i);
    }
  }
  if (s.patches.empty()) throw EmptyInputError("split '" + split + "' has no patches");
  return s;
}

struct LoadedModel {
  model::Segmenter<float> model;
  model::CheckpointMeta meta;
  engine::Task task;
  data::NormStats norm;
};

LoadedModel load_checkpoint(const std::string& dir, const std::string& task_flag, const data::Dataset& ds) {
  auto meta = model::read_checkpoint_meta(dir);
  auto m = model::model_from_checkpoint<float>(dir);
  const auto task = engine::parse_task(task_flag.empty() ? meta.task : task_flag);
  if (task == engine::Task::Pretrain) throw ConfigError("cannot evaluate a pretraining checkpoint");
  const int outputs = m.config().num_classes;
  if (task == engine::Task::Water && outputs != 1)
    throw ConfigError("checkpoint has " + std::to_string(outputs) + " outputs; the water task needs 1");
  if (task == engine::Task::Lulc && outputs != ds.num_classes)
    throw ConfigError("checkpoint predicts " + std::to_string(outputs) + " classes, dataset has " +
                      std::to_string(ds.num_classes));
  if (m.config().encoder.input_size != ds.patch_size)
    throw ConfigError("checkpoint expects " + std::to_string(m.config().encoder.input_size) + " px patches, dataset has " +
                      std::to_string(ds.patch_size));
  const auto norm = meta.norm ? *meta.norm : ds.norm.value_or(data::NormStats{});
  return {std::move(m), std::move(meta), task, norm};
}

int run_gradcheck(bool all, const std::vector<std::string>& ops, int seeds) {
  if (seeds < 1) throw ArgumentError("--seeds must be >= 1");
  std::vector<engine::SuiteEntry> results;
  if (all) {
    results = engine::gradient_suite(seeds);
  } else {
    for (const auto& name : ops) {
      engine::SuiteEntry e{name};
      const auto& op = num::find_op(name);
      for (int s = 0; s < seeds; ++s) {
        const auto r = num::grad_check(op, {}, static_cast<std::uint64_t>(s));
        e.tolerance = r.tolerance;
        e.worst_error = std::max(e.worst_error, r.max_rel_error);
        e.passed = e.passed && r.passed;
        ++e.seeds;
      }
      results.push_back(e);
    }
  }
  bool ok = true;
  for (const auto& e : results) {
    std::cout << (e.passed ? "PASS " : "FAIL ") << e.name << " max_rel_err=" << e.worst_error
              << " tol=" << e.tolerance << " seeds=" << e.seeds << '\n';
    ok = ok && e.passed;
  }
  return ok ? 0 : 1;
}

int run(int argc, char** argv) {
  CLI::App app{"sarseg: SAR land-cover and water segmentation pipeline"};
  app.set_help_flag();
  app.set_help_all_flag("-h,--help", "Print every command with its flags and exit");
  app.require_subcommand(1);
  auto sub = [&](const std::string& name, const std::string& desc) {
    auto* s = app.add_subcommand(name, desc);
    s->set_help_all_flag();
    s->set_help_flag("-h,--help", "Print this command's flags and exit");
    return s;
  };

  // synth
  auto* synth = sub("synth", "Generate synthetic long-tailed SAR scenes");
  engine::SynthConfig synth_cfg;
  std::string synth_out, synth_config;
  bool synth_force = false;
  Bindings synth_b(synth);
  synth_b.add("--out", "out", synth_out, "Output scene directory");
  synth_b.add("--scenes", "scenes", synth_cfg.scenes, "Number of scenes");
  synth_b.add("--size", "size", synth_cfg.size, "Scene side in pixels");
  synth_b.add("--tags", "tags", synth_cfg.tags, "Acquisition tags, cycled over scenes")->delimiter(',');
  synth_b.add("--seed", "seed", synth_cfg.seed, "Random seed");
  synth->add_option("--config", synth_config, "JSON file with any of the keys above");
  synth->add_flag("--force", synth_force, "Write into a non-empty directory");

  // build-dataset
  auto* build = sub("build-dataset", "Cut anchored patches from scenes and write a dataset");
  engine::BuildConfig build_cfg;
  std::string build_scenes, build_out, build_remap, build_config;
  bool build_force = false;
  Bindings build_b(build);
  build_b.add("--scenes", "scenes", build_scenes, "Scene directory written by synth");
  build_b.add("--out", "out", build_out, "Output dataset directory");
  build_b.add("--patch-size", "patch_size", build_cfg.patch_size, "Patch side in pixels");
  build_b.add("--anchors", "anchors", build_cfg.anchors, "Anchor pixels drawn");
  build_b.add("--seed", "seed", build_cfg.seed, "Random seed");
  build_b.add("--remap", "remap", build_remap, "Remap table JSON (default: built-in 14 -> 9)");
  build->add_option("--config", build_config, "JSON file with any of the keys above");
  build->add_flag("--force", build_force, "Write into a non-empty directory");

  // pretrain
  auto* pre = sub("pretrain", "Pretrain the encoder by dual reconstruction of mixed images");
  pretrain::PretrainConfig pre_cfg;
  std::string pre_dataset, pre_out, pre_config;
  std::uint64_t pre_seed = 0;
  int pre_window = engine::TrainConfig{}.window;
  bool pre_force = false;
  Bindings pre_b(pre);
  pre_b.add("--dataset", "dataset", pre_dataset, "Dataset directory (uses its pretrain split)");
  pre_b.add("--out", "out", pre_out, "Output directory");
  pre_b.add("--seed", "seed", pre_seed, "Random seed");
  pre_b.add("--window", "window", pre_window, "Attention window side (must match finetuning)");
  bind_pretrain(pre_b, pre_cfg, "");
  bind_optim(pre_b, pre_cfg.optim, "optim/");
  pre->add_option("--config", pre_config, "JSON file with any of the keys above");
  pre->add_flag("--force", pre_force, "Write into a non-empty directory");

  // finetune
  auto* fine = sub("finetune", "Train a segmenter on the train split, selecting on val");
  engine::TrainConfig fine_cfg;
  std::string fine_task = "lulc", fine_dataset, fine_out, fine_config;
  bool fine_resume = false, fine_force = false;
  int fine_max_epochs = 0;
  Bindings fine_b(fine);
  fine_b.add("--dataset", "dataset", fine_dataset, "Dataset directory");
  fine_b.add("--out", "out", fine_out, "Run directory");
  fine_b.add("--seed", "seed", fine_cfg.seed, "Random seed");
  bind_train(fine_b, fine_cfg, fine_task);
  fine->add_option("--config", fine_config, "JSON file with any of the keys above (run_config.json works)");
  fine->add_flag("--resume", fine_resume, "Continue from <out>/last");
  fine->add_option("--max-epochs", fine_max_epochs, "Stop after this many epochs in this call (0: run to the end)");
  fine->add_flag("--force", fine_force, "Write into a non-empty directory");

  // eval
  auto* eval = sub("eval", "Evaluate a checkpoint on a dataset split");
  std::string eval_dataset, eval_ckpt, eval_task, eval_split = "test", eval_out;
  std::optional<double> eval_thr;
  eval->add_option("--dataset", eval_dataset, "Dataset directory")->required();
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
  eval->add_option("--task", eval_task, "lulc or water (default: the checkpoint's task)")
      ->check(CLI::IsMember({"lulc", "water"}));
  eval->add_option("--split", eval_split, "pretrain, train, val, test or all")->capture_default_str();
  eval->add_option("--threshold", eval_thr, "Water threshold (default: the checkpoint's)");
  eval->add_option("--out", eval_out, "Also write metrics.json and metrics.csv here");

  // predict
  auto* pred = sub("predict", "Write predicted label rasters (and water probabilities)");
  std::string pred_dataset, pred_ckpt, pred_task, pred_split = "test", pred_out;
  std::optional<double> pred_thr;
  bool pred_force = false;
  pred->add_option("--dataset", pred_dataset, "Dataset directory")->required();
  pred->add_option("--checkpoint", pred_ckpt, "Checkpoint directory")->required();
  pred->add_option("--out", pred_out, "Output directory")->required();
  pred->add_option("--task", pred_task, "lulc or water (default: the checkpoint's task)")
      ->check(CLI::IsMember({"lulc", "water"}));
  pred->add_option("--split", pred_split, "pretrain, train, val, test or all")->capture_default_str();
  pred->add_option("--threshold", pred_thr, "Water threshold (default: the checkpoint's)");
  pred->add_flag("--force", pred_force, "Write into a non-empty directory");

  // gradcheck
  auto* grad = sub("gradcheck", "Finite-difference checks of op and loss gradients");
  bool grad_all = false;
  std::vector<std::string> grad_ops;
  int grad_seeds = 5;
  grad->add_flag("--all", grad_all, "Every op and every loss");
  grad->add_option("--op", grad_ops, "Check the named op (repeatable)");
  grad->add_option("--seeds", grad_seeds, "Seeds 0..n-1 per op")->capture_default_str();

  // ablation
  auto* abl = sub("ablation", "Run the five-row refinement ablation and write ablation.csv");
  engine::AblationConfig abl_cfg;
  abl_cfg.seeds = {0, 1, 2};
  std::string abl_dataset, abl_out, abl_config, abl_task = "lulc";
  bool abl_force = false;
  Bindings abl_b(abl);
  abl_b.add("--dataset", "dataset", abl_dataset, "Dataset directory with pretrain, train and val splits");
  abl_b.add("--out", "out", abl_out, "Output directory");
  abl_b.add("--seeds,--seed", "seeds", abl_cfg.seeds, "Seeds; every row runs once per seed")->delimiter(',');
  bind_train(abl_b, abl_cfg.train, abl_task);
  bind_pretrain(abl_b, abl_cfg.pretrain, "pretrain/");
  abl->add_option("--config", abl_config, "JSON file with any of the keys above");
  abl->add_flag("--force", abl_force, "Write into a non-empty directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  }

  if (synth->parsed()) {
    synth_b.apply_config(synth_config);
    require(synth_out, "--out");
    synth_cfg.validate();
    require_fresh_dir(synth_out, synth_force);
    const auto scenes = engine::synthesize_scenes(synth_cfg);
    engine::write_scenes(synth_out, scenes, engine::kSceneSourceClasses);
    std::cerr << "wrote " << scenes.size() << " scenes to " << synth_out << '\n';
    return 0;
  }

  if (build->parsed()) {
    build_b.apply_config(build_config);
    require(build_scenes, "--scenes");
    require(build_out, "--out");
    require_distinct(build_scenes, build_out);
    if (!build_remap.empty()) {
      const auto j = io::read_json<ConfigError>(build_remap);
      build_cfg.remap = data::RemapTable::from_json(j);
      if (j.contains("target_names")) build_cfg.class_names = j.at("target_names").get<std::vector<std::string>>();
      else build_cfg.class_names.resize(static_cast<std::size_t>(build_cfg.remap.num_target));
    }
    const auto set = engine::read_scenes(build_scenes);
    const auto ds = engine::build_dataset(set, build_cfg);
    require_fresh_dir(build_out, build_force);
    data::write_dataset(build_out, ds);
    const auto sp = ds.split();
    std::cerr << "wrote " << ds.patches.size() << " patches (pretrain " << sp.pretrain.size() << ", train "
              << sp.train.size() << ", val " << sp.val.size() << ", test " << sp.test.size() << ") to " << build_out
              << '\n';
    return 0;
  }

  if (pre->parsed()) {
    pre_b.apply_config(pre_config);
    require(pre_dataset, "--dataset");
    require(pre_out, "--out");
    require_distinct(pre_dataset, pre_out);
    pre_cfg.validate();
    const auto ds = data::read_dataset(pre_dataset);
    const auto unlabeled = ds.split().pretrain;
    if (unlabeled.empty()) throw EmptyInputError("dataset has no pretrain split");
    if (!ds.norm) throw DataError("dataset has no normalization statistics");
    engine::TrainConfig tc;
    tc.window = pre_window;
    const auto enc = engine::model_config_for(tc, ds.num_classes, ds.patch_size).encoder;
    enc.validate();
    require_fresh_dir(pre_out, pre_force);
    const auto s = engine::pretrain_encoder<float>(unlabeled, *ds.norm, enc, pre_cfg, pre_seed, pre_out);
    std::cerr << "pretrained " << pre_cfg.steps << " steps, loss " << s.losses.front() << " -> " << s.losses.back()
              << "; encoder at " << s.encoder_dir.string() << '\n';
    return 0;
  }

  if (fine->parsed()) {
    fine_b.apply_config(fine_config);
    require(fine_dataset, "--dataset");
    require(fine_out, "--out");
    require_distinct(fine_dataset, fine_out);
    fine_cfg.task = engine::parse_task(fine_task);
    fine_cfg.validate();
    if (fine_max_epochs < 0) throw ArgumentError("--max-epochs must be >= 0");
    const auto ds = data::read_dataset(fine_dataset);
    const auto data = engine::TrainData::from_dataset(ds);
    engine::model_config_for(fine_cfg, data.num_classes, data.patch_size).encoder.validate();
    if (!fine_cfg.pretrained.empty()) model::read_checkpoint_meta(fine_cfg.pretrained);
    if (!fine_resume) require_fresh_dir(fine_out, fine_force);
    engine::TrainOptions opts;
    opts.out_dir = fs::path(fine_out);
    opts.resume = fine_resume;
    opts.max_epochs_this_call = fine_max_epochs;
    opts.log = &std::cerr;
    const auto res = engine::train<float>(data, fine_cfg, opts);
    json summary{{"best_epoch", res.best_epoch}, {"best_metric", res.best_metric}, {"best", res.best_eval.summary()}};
    std::cout << summary.dump(2) << '\n';
    return 0;
  }

  if (eval->parsed()) {
    const auto ds = data::read_dataset(eval_dataset);
    auto lm = load_checkpoint(eval_ckpt, eval_task, ds);
    const auto sel = select_split(ds, eval_split);
    const double thr = eval_thr.value_or(lm.meta.extra.value("water_threshold", 0.5));
    const int water_class = lm.meta.extra.value("water_class", 0);
    if (!(thr > 0 && thr < 1)) throw ArgumentError("--threshold must lie in (0, 1)");
    const auto ev = engine::evaluate(lm.model, sel.patches, lm.norm, lm.task, ds.num_classes, water_class, thr);
    json report;
    std::string csv;
    if (lm.task == engine::Task::Water) {
      report = metrics::water_report(ev.water, thr);
      csv = metrics::water_csv(ev.water);
    } else {
      report = metrics::lulc_report(ev.cm, ds.class_names);
      json ious = json::array();
      for (const auto& v : metrics::iou_per_class(ev.cm)) ious.push_back(metrics::to_json(v));
      report["iou_per_class"] = ious;
      csv = metrics::lulc_csv(ev.cm, ds.class_names);
    }
    report["split"] = eval_split;
    report["patches"] = sel.patches.size();
    if (!eval_out.empty()) {
      require_distinct(eval_dataset, eval_out);
      io::ensure_dir(eval_out);
      io::write_json(fs::path(eval_out) / "metrics.json", report);
      io::write_text(fs::path(eval_out) / "metrics.csv", csv);
    }
    std::cout << report.dump(2) << '\n';
    return 0;
  }

  if (pred->parsed()) {
    require_distinct(pred_dataset, pred_out);
    const auto ds = data::read_dataset(pred_dataset);
    auto lm = load_checkpoint(pred_ckpt, pred_task, ds);
    const auto sel = select_split(ds, pred_split);
    const double thr = pred_thr.value_or(lm.meta.extra.value("water_threshold", 0.5));
    if (!(thr > 0 && thr < 1)) throw ArgumentError("--threshold must lie in (0, 1)");
    require_fresh_dir(pred_out, pred_force);
    const auto preds = engine::predict(lm.model, sel.patches, lm.norm, lm.task, thr);
    const fs::path out(pred_out);
    io::ensure_dir(out);
    json items = json::array();
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const auto stem = data::detail::patch_stem(sel.index[i]);
      auto lbl = data::detail::patch_header(ds.patch_size, ds.patch_size);
      lbl.insert(lbl.end(), preds[i].labels.begin(), preds[i].labels.end());
      io::write_file(out / (stem + ".lbl"), lbl);
      if (lm.task == engine::Task::Water) {
        auto prob = data::detail::patch_header(ds.patch_size, ds.patch_size);
        io::put_f32(prob, preds[i].probability);
        io::write_file(out / (stem + ".prob"), prob);
      }
      items.push_back(stem);
    }
    io::write_json(out / "predictions.json", {{"format", "sarseg-predictions"},
                                              {"version", data::kDatasetVersion},
                                              {"task", engine::task_name(lm.task)},
                                              {"split", pred_split},
                                              {"patch_size", ds.patch_size},
                                              {"threshold", thr},
                                              {"count", preds.size()},
                                              {"patches", items}});
    std::cerr << "wrote " << preds.size() << " predictions to " << pred_out << '\n';
    return 0;
  }

  if (grad->parsed()) {
    if (!grad_all && grad_ops.empty()) {
      std::cerr << "error: usage: gradcheck needs --all or --op NAME\n";
      return 2;
    }
    return run_gradcheck(grad_all, grad_ops, grad_seeds);
  }

  if (abl->parsed()) {
    abl_b.apply_config(abl_config);
    require(abl_dataset, "--dataset");
    require(abl_out, "--out");
    require_distinct(abl_dataset, abl_out);
    abl_cfg.train.task = engine::parse_task(abl_task);
    abl_cfg.validate();
    const auto ds = data::read_dataset(abl_dataset);
    require_fresh_dir(abl_out, abl_force);
    const auto table = engine::ablation_matrix<float>(ds, abl_cfg, abl_out, &std::cerr);
    std::cout << table.csv();
    return 0;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << '\n';
    return e.is_validation() ? 3 : 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: io: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
}
