// nlran: synth, preprocess, train, eval, explain, gradcheck and inspect.
//
// Exit codes: 0 ok, 1 usage or configuration, 2 data or I/O, 3 numeric failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "nlran/explain.hpp"
#include "nlran/gradcheck.hpp"
#include "nlran/phantom.hpp"
#include "nlran/run_config.hpp"
#include "nlran/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nlran;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool deterministic = false;
  bool dry_run = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Seed override");
  cmd->add_option("--out", o.out, "Output directory override");
  cmd->add_flag("--deterministic", o.deterministic, "Ignore wall-clock limits so reruns are byte-identical");
  cmd->add_flag("--dry-run", o.dry_run, "Print the resolved configuration and exit");
}

RunConfig resolve(const CommonOptions& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (o.seed) {
    cfg.train.seed = *o.seed;
    cfg.phantom.seed = *o.seed;
  }
  if (o.deterministic) cfg.train.time_budget = 0.0;
  cfg.validate();
  return cfg;
}

bool dry_run(const CommonOptions& o, const RunConfig& cfg, const json& extra = json::object()) {
  if (!o.dry_run) return false;
  json j = cfg.to_json();
  if (!extra.empty()) j["command"] = extra;
  std::cout << j.dump(2) << "\n";
  return true;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

struct RunLayout {
  fs::path root;
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path logs() const { return root / "logs"; }
  fs::path reports() const { return root / "reports"; }
  fs::path heatmaps() const { return root / "heatmaps"; }
  fs::path best_checkpoint() const { return checkpoints() / "best.nlck"; }
  void create() const {
    for (const auto& d : {checkpoints(), logs(), reports(), heatmaps()}) fs::create_directories(d);
  }
};

// ---------------------------------------------------------------------------

int cmd_synth(const CommonOptions& o, std::optional<std::size_t> count) {
  RunConfig cfg = resolve(o);
  if (count) cfg.phantom.count = *count;
  if (!o.out.empty()) cfg.paths.data_dir = o.out;
  cfg.phantom.validate();
  if (dry_run(o, cfg)) return kOk;

  const fs::path dir = cfg.paths.data_dir;
  fs::create_directories(dir / "volumes");
  fs::create_directories(dir / "masks");
  fs::create_directories(dir / "lesions");
  std::vector<ManifestRecord> records;
  std::array<std::size_t, 3> per_class{};
  for (std::size_t i = 0; i < cfg.phantom.count; ++i) {
    const auto p = generate_phantom(cfg.phantom, i);
    const auto& id = p.volume.id;
    ManifestRecord r{id, "volumes/" + id + ".nlt", p.volume.label, "masks/" + id + "_lung.nlt", std::nullopt,
                     "lesions/" + id + "_lesion.nlt"};
    save_volume((dir / r.path).string(), p.volume.voxels);
    save_tensor((dir / *r.mask_path).string(), *p.volume.mask);
    save_tensor((dir / *r.lesion_path).string(), p.lesion_mask);
    ++per_class[static_cast<std::size_t>(p.volume.label)];
    records.push_back(std::move(r));
  }
  Manifest(std::move(records), dir.string()).save((dir / "manifest.jsonl").string());
  write_text(dir / "phantom.json", phantom_to_json(cfg.phantom).dump(2) + "\n");
  std::cout << "wrote " << cfg.phantom.count << " phantoms to " << dir.string() << " (CP " << per_class[0] << ", NCP "
            << per_class[1] << ", Normal " << per_class[2] << ")\n";
  return kOk;
}

int cmd_preprocess(const CommonOptions& o, std::string manifest_path) {
  RunConfig cfg = resolve(o);
  if (!o.out.empty()) cfg.paths.processed_dir = o.out;
  if (manifest_path.empty()) manifest_path = (fs::path(cfg.paths.data_dir) / "manifest.jsonl").string();
  if (dry_run(o, cfg, {{"manifest", manifest_path}})) return kOk;

  const auto manifest = Manifest::load(manifest_path);
  const fs::path dir = cfg.paths.processed_dir;
  fs::create_directories(dir / "volumes");
  fs::create_directories(dir / "lesions");
  std::vector<ManifestRecord> done;
  std::string failures;
  for (const auto& r : manifest.records()) {
    try {
      const auto processed = preprocess(load_volume(manifest, r), cfg.data.preprocess);
      ManifestRecord out{r.id, "volumes/" + r.id + ".nlt", r.label, std::nullopt, std::nullopt, std::nullopt};
      save_volume((dir / out.path).string(), processed.voxels);
      if (r.lesion_path) {
        const auto lesion = load_tensor<float>(manifest.resolve(*r.lesion_path));
        out.lesion_path = "lesions/" + r.id + "_lesion.nlt";
        save_tensor((dir / *out.lesion_path).string(), preprocess_geometry(lesion, cfg.data.preprocess));
      }
      done.push_back(std::move(out));
    } catch (const Error& e) {
      std::cerr << "preprocess: " << r.id << ": " << e.what() << "\n";
      failures += json{{"id", r.id}, {"error", e.what()}}.dump() + "\n";
    }
  }
  if (!failures.empty()) write_text(dir / "failures.jsonl", failures);
  const std::size_t usable = done.size();
  if (usable >= 3) {
    const auto assigned = split(Manifest(std::move(done), dir.string()), cfg.data.split_ratios, cfg.data.split_seed,
                                cfg.data.stratified);
    assigned.save((dir / "manifest.jsonl").string());
    std::cout << "preprocessed " << assigned.size() << " scans into " << dir.string() << " (train "
              << assigned.select(Split::Train).size() << ", val " << assigned.select(Split::Val).size() << ", test "
              << assigned.select(Split::Test).size() << ")\n";
  } else {
    std::cerr << "preprocess: too few usable scans to split\n";
  }
  return failures.empty() && usable > 0 ? kOk : kData;
}

std::string default_manifest(const RunConfig& cfg) {
  return (fs::path(cfg.paths.processed_dir) / "manifest.jsonl").string();
}

int cmd_train(const CommonOptions& o, std::string manifest_path) {
  RunConfig cfg = resolve(o);
  if (!o.out.empty()) cfg.paths.run_dir = o.out;
  if (manifest_path.empty()) manifest_path = default_manifest(cfg);
  if (dry_run(o, cfg, {{"manifest", manifest_path}})) return kOk;

  const auto manifest = Manifest::load(manifest_path);
  const auto train_set = load_samples(manifest, Split::Train);
  const auto val_set = load_samples(manifest, Split::Val);
  RunLayout run{cfg.paths.run_dir};
  run.create();
  write_text(run.root / "config.json", cfg.to_json().dump(2) + "\n");

  Model<float> model(cfg.network, cfg.train.seed);
  TrainOptions options;
  options.checkpoint_path = run.best_checkpoint().string();
  options.log_path = (run.logs() / "train.jsonl").string();
  options.on_epoch = [](const EpochRecord& r) {
    std::printf("epoch %4zu  loss %.4f  val_loss %.4f  val_acc %.4f  val_f1 %.4f  %.1fs%s\n", r.epoch, r.train_loss,
                r.val_loss, r.val_accuracy, r.val_f1, r.seconds, r.improved ? "  *" : "");
    std::fflush(stdout);
  };
  const auto log = train(model, train_set, val_set, cfg.train, options);
  const auto ev = evaluate(model, val_set, cfg.train.batch_size);
  write_text(run.reports() / "val.json", ev.report.to_json().dump(2) + "\n");
  std::printf("best epoch %zu  val_f1 %.4f  stop %s  checkpoint %s\n", log.best_epoch, log.best_metric,
              log.stop_reason.c_str(), log.best_checkpoint.c_str());
  return kOk;
}

std::string class_name(std::size_t k) {
  return k < 3 ? to_string(static_cast<ClassLabel>(k)) : "class" + std::to_string(k);
}

int cmd_eval(const CommonOptions& o, std::string checkpoint, std::string manifest_path, const std::string& split_name) {
  RunConfig cfg = resolve(o);
  if (!o.out.empty()) cfg.paths.run_dir = o.out;
  RunLayout run{cfg.paths.run_dir};
  if (checkpoint.empty()) checkpoint = run.best_checkpoint().string();
  if (manifest_path.empty()) manifest_path = default_manifest(cfg);
  const Split part = parse_split(split_name);
  if (dry_run(o, cfg, {{"checkpoint", checkpoint}, {"manifest", manifest_path}, {"split", split_name}})) return kOk;

  auto model = load_checkpoint<float>(checkpoint);
  const auto samples = load_samples(Manifest::load(manifest_path), part);
  const auto ev = evaluate(model, samples, cfg.train.batch_size);
  run.create();
  const std::string stem = to_string(part);
  write_text(run.reports() / (stem + "_metrics.json"), ev.report.to_json().dump(2) + "\n");

  std::string scores = "id,label,predicted";
  const std::size_t k = model.config().num_classes;
  for (std::size_t c = 0; c < k; ++c) scores += ",p_" + class_name(c);
  scores += "\n";
  for (std::size_t i = 0; i < ev.ids.size(); ++i) {
    scores += ev.ids[i] + "," + std::to_string(ev.labels[i]) + "," + std::to_string(ev.predicted[i]);
    for (double p : ev.scores[i]) {
      char buf[32];
      std::snprintf(buf, sizeof buf, ",%.9g", p);
      scores += buf;
    }
    scores += "\n";
  }
  write_text(run.reports() / (stem + "_scores.csv"), scores);

  const auto truth = one_vs_rest(ev.labels, k);
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> s(ev.scores.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = ev.scores[i][c];
    const bool has_pos = std::find(truth[c].begin(), truth[c].end(), 1) != truth[c].end();
    const bool has_neg = std::find(truth[c].begin(), truth[c].end(), 0) != truth[c].end();
    if (has_pos && has_neg) {
      write_text(run.reports() / (stem + "_roc_" + class_name(c) + ".csv"), roc_curve(s, truth[c]).to_csv());
    }
    if (has_pos) write_text(run.reports() / (stem + "_pr_" + class_name(c) + ".csv"), pr_curve(s, truth[c]).to_csv());
  }
  const auto& r = ev.report;
  std::printf("%s: n=%zu  ACC %.4f  P %.4f  R %.4f  F1 %.4f  AUC %.4f\n", stem.c_str(), samples.size(), r.accuracy,
              r.precision, r.recall, r.f1, r.auc);
  return kOk;
}

int cmd_explain(const CommonOptions& o, std::string checkpoint, std::string manifest_path, const std::string& scan,
                const std::string& method, const std::string& format_name, std::optional<int> target) {
  RunConfig cfg = resolve(o);
  if (!o.out.empty()) cfg.paths.run_dir = o.out;
  RunLayout run{cfg.paths.run_dir};
  if (checkpoint.empty()) checkpoint = run.best_checkpoint().string();
  if (manifest_path.empty()) manifest_path = default_manifest(cfg);
  const HeatFormat format = parse_heat_format(format_name);
  if (dry_run(o, cfg, {{"checkpoint", checkpoint}, {"scan", scan}, {"method", method}, {"format", format_name}})) return kOk;

  const auto model = load_checkpoint<float>(checkpoint);
  const auto manifest = Manifest::load(manifest_path);
  const auto* record = manifest.find(scan);
  if (!record) throw DataError("scan '" + scan + "' is not in " + manifest_path);
  const auto sample = to_sample(load_volume(manifest, *record));
  const bool want_attention = method != "cam";
  const bool want_cam = method != "attention";

  // CAM defaults to the predicted class.
  int cam_target = target.value_or(-1);
  if (want_cam && cam_target < 0) {
    const auto logits = model.predict_logits(sample.input.reshaped({1, 1, sample.input.dim(1), sample.input.dim(2),
                                                                    sample.input.dim(3)}));
    cam_target = static_cast<int>(std::max_element(logits.values().begin(), logits.values().end()) -
                                  logits.values().begin());
  }
  const auto ex = explain(model, sample.input, want_attention, want_cam, cam_target, scan);

  std::optional<Tensor<double>> lesion;
  if (record->lesion_path) {
    const auto mask = load_tensor<float>(manifest.resolve(*record->lesion_path)).cast<double>();
    const bool any = std::any_of(mask.values().begin(), mask.values().end(), [](double v) { return v > 0; });
    if (any) lesion = mask;
  }
  const fs::path dir = run.heatmaps() / scan;
  json summary{{"scan", scan}, {"label", to_string(record->label)}};
  for (const auto* h : {ex.attention ? &*ex.attention : nullptr, ex.cam ? &*ex.cam : nullptr}) {
    if (!h) continue;
    const std::string name = to_string(h->source);
    const auto path = format == HeatFormat::CSV ? dir / (name + ".csv") : dir / name;
    export_heatmap(*h, path.string(), format, name);
    json entry{{"path", path.string()}};
    if (h->source == HeatSource::CAM) entry["target_class"] = h->target_class;
    if (lesion) {
      const auto s = overlap_score(*h, *lesion);
      entry["overlap_difference"] = s.difference;
      entry["voxel_auc"] = s.voxel_auc;
      std::printf("%s: overlap difference %.4f  voxel AUC %.4f\n", name.c_str(), s.difference, s.voxel_auc);
    }
    summary[name] = entry;
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  std::printf("heat maps for %s written to %s\n", scan.c_str(), dir.string().c_str());
  return kOk;
}

int cmd_gradcheck(const CommonOptions& o, double tolerance) {
  const RunConfig cfg = resolve(o);
  if (dry_run(o, cfg, {{"tolerance", tolerance}})) return kOk;
  const std::uint64_t seed = o.seed.value_or(2024);
  std::printf("%-42s %12s %8s %s\n", "check", "max error", "seconds", "result");
  const auto results = run_gradcheck_suite(tolerance, seed, [](const GradcheckResult& r) {
    std::printf("%-42s %12.3e %8.2f %s\n", r.name.c_str(), r.max_error, r.seconds, r.passed ? "PASS" : "FAIL");
    std::fflush(stdout);
  });
  const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.passed; });
  std::printf("%zu checks, %ld failed (tolerance %.0e)\n", results.size(), static_cast<long>(failed), tolerance);
  return failed == 0 ? kOk : kNumeric;
}

int cmd_inspect(const CommonOptions& o, const std::string& checkpoint, bool full_scale, bool as_json) {
  const RunConfig cfg = resolve(o);
  NetworkConfig net = cfg.network;
  json header;
  if (!checkpoint.empty()) {
    const auto info = read_checkpoint_info(checkpoint);
    net = info.config;
    header = {{"checkpoint", checkpoint}, {"epoch", info.epoch}, {"best_metric", info.best_metric}};
  } else if (full_scale) {
    net = NetworkConfig::full_scale(net.attention_stacks != std::array<std::size_t, 3>{1, 1, 1});
  }
  if (dry_run(o, cfg, {{"network", net.to_json()}})) return kOk;
  const auto layers = describe(net);
  const auto params = count_params(net);
  const auto macs = count_flops(net);
  if (as_json) {
    json rows = json::array();
    for (const auto& l : layers) {
      rows.push_back({{"name", l.name}, {"kind", l.kind}, {"channels", l.channels}, {"extents", l.extents},
                      {"params", l.params}, {"macs", l.macs}, {"stage_row", l.stage_row}});
    }
    std::cout << json{{"network", net.to_json()}, {"source", header}, {"params", params}, {"macs", macs}, {"layers", rows}}
                     .dump(2)
              << "\n";
    return kOk;
  }
  if (!header.empty()) std::cout << "checkpoint " << checkpoint << " (epoch " << header["epoch"] << ")\n";
  std::printf("%-28s %-14s %6s %14s %12s %14s\n", "layer", "kind", "ch", "D x H x W", "params", "MACs");
  for (const auto& l : layers) {
    if (!l.stage_row) continue;
    char ext[48];
    std::snprintf(ext, sizeof ext, "%zux%zux%zu", l.extents[0], l.extents[1], l.extents[2]);
    std::printf("%-28s %-14s %6zu %14s %12zu %14llu\n", l.name.c_str(), l.kind.c_str(), l.channels, ext, l.params,
                static_cast<unsigned long long>(l.macs));
  }
  std::printf("total parameters %zu (%.2f M)\n", params, double(params) / 1e6);
  std::printf("total multiply-adds %llu (%.3f G)\n", static_cast<unsigned long long>(macs), double(macs) / 1e9);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NL-RAN volumetric classification toolkit"};
  app.require_subcommand(1);
  CommonOptions common;

  auto* synth = app.add_subcommand("synth", "Generate synthetic phantom volumes and a manifest");
  add_common(synth, common);
  std::optional<std::size_t> count;
  synth->add_option("--count", count, "Number of phantoms (classes rotate CP, NCP, Normal)");

  std::string manifest;
  auto* pre = app.add_subcommand("preprocess", "Mask, crop, resample and split a manifest");
  add_common(pre, common);
  pre->add_option("--manifest", manifest, "Input manifest (default <data_dir>/manifest.jsonl)");

  auto* tr = app.add_subcommand("train", "Train a model on a processed manifest");
  add_common(tr, common);
  tr->add_option("--manifest", manifest, "Processed manifest (default <processed_dir>/manifest.jsonl)");

  std::string checkpoint, split_name = "test";
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  add_common(ev, common);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint (default <run_dir>/checkpoints/best.nlck)");
  ev->add_option("--manifest", manifest, "Processed manifest");
  ev->add_option("--split", split_name, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  std::string scan, method = "both", format = "pgm-stack";
  std::optional<int> target;
  auto* ex = app.add_subcommand("explain", "Write attention and/or CAM heat maps for one scan");
  add_common(ex, common);
  ex->add_option("--checkpoint", checkpoint, "Checkpoint (default <run_dir>/checkpoints/best.nlck)");
  ex->add_option("--manifest", manifest, "Processed manifest");
  ex->add_option("--scan", scan, "Scan id")->required();
  ex->add_option("--method", method, "attention, cam or both")->check(CLI::IsMember({"attention", "cam", "both"}));
  ex->add_option("--format", format, "pgm-stack or csv")->check(CLI::IsMember({"pgm-stack", "csv"}));
  ex->add_option("--target", target, "CAM class (default: predicted class)");

  double tolerance = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks over every operation");
  add_common(gc, common);
  gc->add_option("--tolerance", tolerance, "Maximum relative error");

  bool full_scale = false, as_json = false;
  auto* in = app.add_subcommand("inspect", "Layer shapes, parameter and multiply-add counts");
  add_common(in, common);
  in->add_option("--checkpoint", checkpoint, "Read the network from a checkpoint");
  in->add_flag("--full-scale", full_scale, "Describe the full-size network (C=64, 64x160x160)");
  in->add_flag("--json", as_json, "Machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(common, count);
    if (*pre) return cmd_preprocess(common, manifest);
    if (*tr) return cmd_train(common, manifest);
    if (*ev) return cmd_eval(common, checkpoint, manifest, split_name);
    if (*ex) return cmd_explain(common, checkpoint, manifest, scan, method, format, target);
    if (*gc) return cmd_gradcheck(common, tolerance);
    if (*in) return cmd_inspect(common, checkpoint, full_scale, as_json);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const CapabilityError& e) {
    std::cerr << "unsupported: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
