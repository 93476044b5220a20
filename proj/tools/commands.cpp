// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>

#include "cli.hpp"
#include "maskgru/checkpoint.hpp"
#include "maskgru/errors.hpp"
#include "maskgru/eval.hpp"
#include "maskgru/image.hpp"
#include "maskgru/json_io.hpp"
#include "maskgru/parallel.hpp"
#include "maskgru/plot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace maskgru::cli {
namespace {

constexpr char kManifestName[] = "run_manifest.json";
constexpr std::uint32_t kSplitSeedTag = 0x5911;

std::string timestamp() {
  std::time_t t = 0;
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH"); sde && *sde) {
    char* end = nullptr;
    const long long v = std::strtoll(sde, &end, 10);
    if (*end != '\0' || v < 0) throw UsageError(std::string("SOURCE_DATE_EPOCH is not a timestamp: ") + sde);
    t = static_cast<std::time_t>(v);
  } else {
    t = std::time(nullptr);
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp);
    if (!f) throw DataError("cannot write " + tmp.string());
    f << j.dump(2) << '\n';
    if (!f) throw DataError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// Creates `dir`, refusing to touch an existing non-empty directory unless
// --force is given and the directory holds an earlier run.
void prepare_output(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw UsageError("output " + dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) throw UsageError("output directory " + dir.string() + " already exists (pass --force to replace it)");
      if (!fs::exists(dir / kManifestName)) {
        throw UsageError("refusing to replace " + dir.string() + ": it has no " + kManifestName);
      }
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

/// Written before the command does any work and rewritten when it ends.
class RunManifest {
 public:
  RunManifest(fs::path dir, const std::string& command, std::uint64_t seed, json config)
      : path_(std::move(dir) / kManifestName) {
    j_ = {{"command", command},  {"version", MASKGRU_VERSION}, {"seed", seed},
          {"config", std::move(config)}, {"started", timestamp()}, {"finished", nullptr},
          {"status", "running"},   {"outputs", json::array()}};
    write_json(path_, j_);
  }

  RunManifest(const RunManifest&) = delete;
  RunManifest& operator=(const RunManifest&) = delete;

  // A command that throws leaves its manifest marked as failed.
  ~RunManifest() {
    if (finished_) return;
    try {
      finish("failed");
    } catch (...) {
    }
  }

  json& operator[](const char* key) { return j_[key]; }
  void add_output(const std::string& relative) { j_["outputs"].push_back(relative); }

  void finish(const std::string& status) {
    finished_ = true;
    j_["status"] = status;
    j_["finished"] = timestamp();
    write_json(path_, j_);
  }

 private:
  fs::path path_;
  json j_;
  bool finished_ = false;
};

std::string image_ext(const std::string& format) {
  if (format == "png" && !png_supported()) throw UsageError("built without PNG support; use --format ppm");
  return "." + format;
}

std::string numbered(const char* stem, std::size_t t, const std::string& ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu", stem, t);
  return buf + ext;
}

bool has_split(const DatasetInfo& info) { return !info.train_files.empty() || !info.val_files.empty(); }

}  // namespace

std::string default_image_format() { return png_supported() ? "png" : "ppm"; }

fs::path output_path(const fs::path& p) {
  const char* root = std::getenv("MASKGRU_OUTPUT_ROOT");
  if (p.is_relative() && root && *root) return fs::path(root) / p;
  return p;
}

fs::path input_path(const fs::path& p) {
  if (fs::exists(p)) return p;
  return output_path(p);
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const GenDataOptions& opt, std::ostream& out) {
  SceneConfig scene = opt.scene;
  scene.seed = opt.common.seed;
  scene.validate();
  if (opt.count == 0) throw UsageError("--count must be positive");
  if (!(opt.train_frac > 0.0 && opt.train_frac <= 1.0)) throw UsageError("--train-frac must lie in (0, 1]");

  const std::uint64_t split_seed = derive_seed(opt.common.seed, 0, kSplitSeedTag);
  const fs::path dir = output_path(opt.common.out);
  prepare_output(dir, opt.common.force);
  RunManifest manifest(dir, "gen-data", opt.common.seed,
                       {{"scene", to_json(scene)},
                        {"count", opt.count},
                        {"train_frac", opt.train_frac},
                        {"split_by", opt.split_by == SplitBy::kSequence ? "sequence" : "scene-seed"},
                        {"split_seed", split_seed}});

  const auto samples = generate(scene, opt.count, opt.common.threads);
  // --train-frac 1 writes an unsplit dataset.
  const std::optional<Split> sp =
      opt.train_frac < 1.0 ? std::optional(split(samples, opt.train_frac, opt.split_by, split_seed)) : std::nullopt;
  write_dataset(dir, scene, samples, sp ? &*sp : nullptr);

  manifest.add_output("manifest.json");
  for (std::size_t i = 0; i < samples.size(); ++i) manifest.add_output(sequence_file_name(i));
  manifest["dataset_id"] = dataset_fingerprint(samples);
  manifest.finish("ok");

  out << "wrote " << samples.size() << " sequences of " << scene.seq_len << " frames at " << scene.width << "x"
      << scene.height << " to " << dir.string() << "\n"
      << "split: " << (sp ? sp->train.size() : samples.size()) << " train / " << (sp ? sp->val.size() : 0)
      << " val\n"
      << "dataset id: " << dataset_fingerprint(samples) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

namespace {

// Settings that may change between an interrupted run and its resumption.
json comparable(json config) {
  config["train"].erase("max_epochs");
  config["train"].erase("threads");
  config.erase("data");
  return config;
}

void rewrite_metrics_prefix(const fs::path& path, std::size_t next_epoch) {
  std::vector<std::string> kept;
  if (std::ifstream in(path); in) {
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        if (json::parse(line).at("epoch").get<std::size_t>() < next_epoch) kept.push_back(line);
      } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
      }
    }
  }
  std::ofstream f(path, std::ios::trunc);
  for (const auto& line : kept) f << line << '\n';
}

}  // namespace

int cmd_train(const TrainOptions& opt, std::ostream& out) {
  const fs::path data = input_path(opt.data);
  const DatasetInfo info = read_dataset_info(data);
  const bool split_data = has_split(info);
  const auto train_set = load_dataset(data, split_data ? "train" : "all");
  const auto val_set = split_data ? load_dataset(data, "val") : std::vector<SequenceSample>{};
  if (train_set.empty()) throw DataError(data.string() + ": no training sequences");

  ModelConfig model = opt.model;
  model.height = info.config.height;
  model.width = info.config.width;
  model.validate();
  TrainConfig tc = opt.train;
  tc.seed = opt.common.seed;
  tc.threads = opt.common.threads;
  tc.validate();
  for (const auto* set : {&train_set, &val_set})
    for (const SequenceSample& sq : *set)
      if (sq.length() < tc.seq_len)
        throw UsageError("--seq-len " + std::to_string(tc.seq_len) + " exceeds the " + std::to_string(sq.length()) +
                         "-frame sequences in " + data.string() + " (0 uses every frame)");

  const json config = {{"model", to_json(model)},
                       {"train", to_json(tc)},
                       {"data", fs::absolute(data).string()},
                       {"train_set", dataset_fingerprint(train_set)},
                       {"val_set", val_set.empty() ? json(nullptr) : json(dataset_fingerprint(val_set))}};

  const fs::path dir = output_path(opt.common.out);
  const fs::path state_path = dir / "state.ckpt";
  const fs::path metrics_path = dir / "metrics.jsonl";
  TrainState state;
  if (opt.resume) {
    if (!fs::exists(state_path)) throw UsageError("--resume: no state.ckpt in " + dir.string());
    const json previous = read_json(dir / kManifestName);
    const json patch = json::diff(comparable(previous.at("config")), comparable(config));
    if (!patch.empty()) {
      std::string diff;
      for (const auto& op : patch) diff += " " + op.at("path").get<std::string>();
      throw UsageError("--resume: settings differ from the interrupted run:" + diff);
    }
    state = TrainState::load(state_path);
    rewrite_metrics_prefix(metrics_path, state.next_epoch);
  } else {
    prepare_output(dir, opt.common.force);
    state = TrainState::fresh(model, tc.seed);
    std::ofstream(metrics_path, std::ios::trunc);
  }

  RunManifest manifest(dir, "train", opt.common.seed, config);
  manifest["resumed_from_epoch"] = opt.resume ? json(state.next_epoch) : json(nullptr);
  const std::uint64_t calls_before = render_mask_calls();

  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw DataError("cannot write " + metrics_path.string());
  auto on_epoch = [&](const EpochMetrics& m, const TrainState& s) {
    metrics << m.to_json().dump() << '\n';
    metrics.flush();
    const fs::path tmp = dir / "state.ckpt.tmp";
    s.save(tmp);
    fs::rename(tmp, state_path);
    out << "epoch " << m.epoch << "  eps " << std::fixed << std::setprecision(3) << m.eps << "  loss "
        << std::setprecision(4) << m.train_loss << "  iou " << m.train_iou;
    if (m.val_loss) out << "  val_loss " << *m.val_loss << "  val_iou " << *m.val_iou;
    out << std::defaultfloat << "\n";
    return true;
  };
  const auto history = train(state, tc, train_set, val_set, on_epoch);

  state.save(state_path);
  const ModelParams& final_params = state.has_best ? state.best_params : state.params;
  save_checkpoint(dir / "model.ckpt", final_params);

  manifest["render_mask_calls"] = render_mask_calls() - calls_before;
  manifest["epochs_run"] = history.size();
  manifest["next_epoch"] = state.next_epoch;
  manifest["stopped_early"] = state.stopped;
  manifest["best_val_loss"] = state.has_best ? json(state.best_val_loss) : json(nullptr);
  for (const char* f : {"state.ckpt", "model.ckpt", "metrics.jsonl"}) manifest.add_output(f);
  manifest.finish("ok");
  out << "saved " << (dir / "model.ckpt").string() << (state.has_best ? " (best validation loss)" : "") << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

int cmd_eval(const EvalOptions& opt, std::ostream& out) {
  if (opt.checkpoints.empty()) throw UsageError("eval: at least one --checkpoint is required");
  const bool comparing = opt.checkpoints.size() > 1;
  if (comparing && opt.split == "val") throw UsageError("comparing models needs the training split; use --split both");

  const fs::path data = input_path(opt.data);
  const DatasetInfo info = read_dataset_info(data);
  const bool split_data = has_split(info);
  if (opt.split == "val" && !split_data) throw UsageError("--split val: " + data.string() + " has no split");
  std::vector<SequenceSample> primary, val;
  if (opt.split == "val") {
    primary = load_dataset(data, "val");
  } else {
    primary = load_dataset(data, split_data ? "train" : "all");
    if (opt.split == "both" && split_data) val = load_dataset(data, "val");
  }

  std::vector<Checkpoint> loaded;
  for (const auto& [label, path] : opt.checkpoints) {
    const fs::path p = input_path(path);
    loaded.push_back(opt.expected_kind ? load_checkpoint(p, *opt.expected_kind) : load_checkpoint(p));
  }

  const fs::path dir = output_path(opt.common.out);
  prepare_output(dir, opt.common.force);
  json ck_list = json::array();
  for (const auto& [label, path] : opt.checkpoints) ck_list.push_back({{"name", label}, {"path", path.string()}});
  RunManifest manifest(dir, "eval", opt.common.seed,
                       {{"data", fs::absolute(data).string()},
                        {"split", opt.split},
                        {"checkpoints", ck_list},
                        {"expected_model", opt.expected_kind ? json(model_kind_name(*opt.expected_kind)) : json()},
                        {"threads", opt.common.threads}});

  std::vector<ModelReports> reports;
  json models = json::array();
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    const std::string& label = opt.checkpoints[i].first;
    const ModelParams& params = loaded[i].params;
    const ModelKind kind = params.config.kind;
    ModelReports r{label, evaluate(kind, params, primary, opt.common.threads), std::nullopt};
    if (!val.empty()) r.val = evaluate(kind, params, val, opt.common.threads);
    models.push_back({{"name", label},
                      {"model", model_kind_name(kind)},
                      {"split", opt.split == "val" ? "val" : (split_data ? "train" : "all")},
                      {"report", r.train.to_json()},
                      {"val", r.val ? r.val->to_json() : json()}});
    reports.push_back(std::move(r));
  }
  write_json(dir / "eval.json", {{"models", models}});
  manifest.add_output("eval.json");

  if (comparing) {
    const Comparison cmp = compare(reports, opt.reference);
    std::ofstream(dir / "comparison.txt") << cmp.text;
    std::ofstream jl(dir / "comparison.jsonl");
    for (const auto& rec : cmp.records) jl << rec.dump() << '\n';
    manifest.add_output("comparison.txt");
    manifest.add_output("comparison.jsonl");
    out << cmp.text;
  } else {
    const ModelReports& r = reports.front();
    out << r.name << ": mean IoU " << r.train.mean_iou << " over " << r.train.sequence_iou.size() << " sequences";
    if (r.val) out << ", validation " << r.val->mean_iou << " over " << r.val->sequence_iou.size();
    out << "\n";
  }
  manifest.finish("ok");
  return kOk;
}

// ---------------------------------------------------------------------------

int cmd_render(const RenderOptions& opt, std::ostream& out) {
  const std::string ext = image_ext(opt.format);
  if (opt.scale == 0) throw UsageError("--scale must be positive");
  if (opt.thickness == 0) throw UsageError("--thickness must be positive");
  const Checkpoint ck = load_checkpoint(input_path(opt.checkpoint));
  const SequenceSample sample = read_sequence(input_path(opt.sequence));
  const ModelConfig& cfg = ck.params.config;
  if (sample.height != cfg.height || sample.width != cfg.width) {
    throw UsageError("sequence is " + std::to_string(sample.width) + "x" + std::to_string(sample.height) +
                     " but the model expects " + std::to_string(cfg.width) + "x" + std::to_string(cfg.height));
  }

  const fs::path dir = output_path(opt.common.out);
  prepare_output(dir, opt.common.force);
  RunManifest manifest(dir, "render", opt.common.seed,
                       {{"checkpoint", opt.checkpoint.string()},
                        {"sequence", opt.sequence.string()},
                        {"format", opt.format},
                        {"scale", opt.scale},
                        {"thickness", opt.thickness},
                        {"hidden", opt.hidden}});

  struct Step {
    Tensor hidden;
    std::optional<Tensor> mask, blended;
  };
  std::vector<Step> steps;
  const auto frames = sample.frames(cfg.input_scale);
  const auto predictions = run_sequence(ck.params, frames, sample.boxes, {}, [&](const StepRecord& s) {
    if (!opt.hidden) return;
    steps.push_back({s.hidden, s.mask ? std::optional(*s.mask) : std::nullopt,
                     s.blended ? std::optional(*s.blended) : std::nullopt});
  });

  std::size_t written = 0;
  auto emit = [&](const std::string& name, const Image& img) {
    write_image(dir / name, upscale(img, opt.scale));
    manifest.add_output(name);
    ++written;
  };
  for (std::size_t t = 0; t < sample.length(); ++t) {
    Image img = frame_image(sample, t);
    draw_box(img, sample.boxes[t], kTruthColor, opt.thickness);
    draw_box(img, predictions[t], kPredictionColor, opt.thickness);
    emit(numbered("overlay", t, ext), img);
  }
  for (std::size_t t = 0; t < steps.size(); ++t) {
    emit(numbered("hidden", t, ext), tensor_image(steps[t].hidden));
    if (steps[t].mask) emit(numbered("mask", t, ext), tensor_image(*steps[t].mask));
    if (steps[t].blended) emit(numbered("blended", t, ext), tensor_image(*steps[t].blended));
  }
  manifest.finish("ok");
  out << "wrote " << written << " images to " << dir.string() << "\n";
  if (opt.hidden && cfg.kind == ModelKind::kConvGru) out << "convgru has no mask path: only h_t images written\n";
  return kOk;
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out) {
  const fs::path dir = output_path(opt.common.out);
  prepare_output(dir, opt.common.force);
  json kinds = json::array();
  for (ModelKind k : opt.kinds) kinds.push_back(model_kind_name(k));
  const ModelGradCheck& s = opt.setup;
  RunManifest manifest(dir, "gradcheck", opt.common.seed,
                       {{"models", kinds},
                        {"size", s.size},
                        {"steps", s.steps},
                        {"kernel", s.kernel},
                        {"hidden1", s.hidden1},
                        {"hidden2", s.hidden2},
                        {"beta", s.beta},
                        {"weight_scale", s.weight_scale},
                        {"eps", s.eps},
                        {"tol", s.tol}});

  bool all_passed = true;
  json results = json::array();
  for (ModelKind kind : opt.kinds) {
    ModelGradCheck setup = s;
    setup.kind = kind;
    setup.seed = opt.common.seed;
    const GradCheckReport report = check_model_gradients(setup);
    out << model_kind_name(kind) << " (tol " << report.tol << ")\n";
    json params = json::array();
    for (const ParamCheck& p : report.params) {
      char line[160];
      std::snprintf(line, sizeof line, "  %-24s %6zu entries %4zu kinks  max rel %.3e  %s\n", p.name.c_str(),
                    p.entries, p.excluded_kinks, p.max_rel_error, p.passed ? "ok" : "FAIL");
      out << line;
      params.push_back({{"name", p.name},
                        {"entries", p.entries},
                        {"excluded_kinks", p.excluded_kinks},
                        {"max_rel_error", p.max_rel_error},
                        {"worst_index", p.worst_index},
                        {"worst_analytic", p.worst_analytic},
                        {"worst_numeric", p.worst_numeric},
                        {"passed", p.passed}});
    }
    out << model_kind_name(kind) << ": " << (report.passed() ? "PASS" : "FAIL") << "\n";
    all_passed = all_passed && report.passed();
    results.push_back({{"model", model_kind_name(kind)}, {"passed", report.passed()}, {"params", params}});
  }
  write_json(dir / "gradcheck.json", {{"results", results}});
  manifest.add_output("gradcheck.json");
  manifest["passed"] = all_passed;
  manifest.finish(all_passed ? "ok" : "failed");
  return all_passed ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<json> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  if (rows.empty()) throw DataError(path.string() + ": no records");
  return rows;
}

double number_or_nan(const json& v) { return v.is_number() ? v.get<double>() : std::numeric_limits<double>::quiet_NaN(); }

}  // namespace

int cmd_plot(const PlotOptions& opt, std::ostream& out) {
  const std::string ext = image_ext(opt.format);
  std::vector<std::pair<std::string, std::vector<json>>> runs;
  for (const auto& [label, path] : opt.metrics) runs.emplace_back(label, read_metrics(input_path(path)));

  const fs::path dir = output_path(opt.common.out);
  prepare_output(dir, opt.common.force);
  json inputs = json::array();
  for (const auto& [label, path] : opt.metrics) inputs.push_back({{"label", label}, {"path", path.string()}});
  RunManifest manifest(dir, "plot", opt.common.seed,
                       {{"metrics", inputs},
                        {"fields", opt.fields},
                        {"format", opt.format},
                        {"width", opt.width},
                        {"height", opt.height},
                        {"epoch", opt.epoch ? json(*opt.epoch) : json()}});

  for (const std::string& field : opt.fields) {
    PlotSpec spec;
    spec.title = field;
    spec.y_label = field;
    spec.width = opt.width;
    spec.height = opt.height;
    bool per_timestep = false;
    for (const auto& [label, rows] : runs) {
      const bool found = std::any_of(rows.begin(), rows.end(), [&](const json& r) { return r.contains(field); });
      if (!found) throw UsageError("field '" + field + "' is not in the metrics of '" + label + "'");
      Series s;
      s.label = label;
      const json* array_row = nullptr;
      for (const json& r : rows) {
        if (!r.contains(field)) continue;
        if (r[field].is_array()) {
          if (!opt.epoch || r.value("epoch", std::size_t{0}) == *opt.epoch) array_row = &r;
          continue;
        }
        s.x.push_back(number_or_nan(r.value("epoch", json())));
        s.y.push_back(number_or_nan(r[field]));
      }
      if (array_row) {
        per_timestep = true;
        s.x.clear();
        s.y.clear();
        const json& values = (*array_row)[field];
        for (std::size_t t = 0; t < values.size(); ++t) {
          s.x.push_back(static_cast<double>(t));
          s.y.push_back(number_or_nan(values[t]));
        }
        if (runs.size() == 1) spec.title = field + " at epoch " + std::to_string(array_row->value("epoch", 0));
      }
      spec.series.push_back(std::move(s));
    }
    spec.x_label = per_timestep ? "timestep" : "epoch";
    const std::string name = field + ext;
    write_image(dir / name, render_plot(spec));
    manifest.add_output(name);
    out << "wrote " << (dir / name).string() << "\n";
  }
  manifest.finish("ok");
  return kOk;
}

}  // namespace maskgru::cli
