// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <ostream>

#include "commands.hpp"
#include "maskgru/errors.hpp"
#include "maskgru/parallel.hpp"

namespace maskgru::cli {
namespace {

namespace fs = std::filesystem;

void add_common(CLI::App& sub, Common& c, bool out_required = true) {
  auto* out = sub.add_option("--out,-o", c.out, "Output directory");
  if (out_required) out->required();
  sub.add_option("--seed", c.seed, "Seed for every random draw")->capture_default_str();
  sub.add_option("--threads", c.threads, "Worker threads (default: $MASKGRU_THREADS or 1)");
  sub.add_flag("--force", c.force, "Replace an existing output directory from an earlier run");
}

// "label=path" or a bare path. A bare model.ckpt is named after its directory.
std::pair<std::string, fs::path> labelled(const std::string& arg) {
  if (const auto eq = arg.find('='); eq != std::string::npos && eq > 0) {
    return {arg.substr(0, eq), fs::path(arg.substr(eq + 1))};
  }
  const fs::path p(arg);
  const fs::path parent = p.parent_path().filename();
  const bool generic = p.filename() == "model.ckpt" || p.filename() == "metrics.jsonl";
  return {generic && !parent.empty() ? parent.string() : p.stem().string(), p};
}

const std::map<std::string, ModelKind> kKinds{{"maskgru", ModelKind::kMaskGru}, {"convgru", ModelKind::kConvGru}};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"maskgru: single-object tracking with a mask-blended convolutional GRU"};
  app.name("maskgru");
  app.require_subcommand(1);
  app.set_version_flag("--version", MASKGRU_VERSION);

  const std::size_t env_threads = default_thread_count(1);

  // gen-data ----------------------------------------------------------------
  GenDataOptions gen;
  gen.common.threads = env_threads;
  std::string split_by = "sequence";
  std::string background = "textured";
  std::size_t frame_size = gen.scene.width;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic bouncing-ball dataset");
  add_common(*g, gen.common);
  g->add_option("--count", gen.count, "Number of sequences")->capture_default_str();
  g->add_option("--train-frac", gen.train_frac, "Share of sequences in the training split")->capture_default_str();
  g->add_option("--split-by", split_by, "Split unit")->check(CLI::IsMember({"sequence", "scene-seed"}))->capture_default_str();
  g->add_option("--frame-size", frame_size, "Frame height and width in pixels")->capture_default_str();
  g->add_option("--seq-len", gen.scene.seq_len, "Frames per sequence")->capture_default_str();
  g->add_option("--ball-radius", gen.scene.ball_radius, "Ball radius in pixels")->capture_default_str();
  g->add_option("--gravity", gen.scene.gravity, "Downward acceleration, px per frame squared")->capture_default_str();
  g->add_option("--hit-prob", gen.scene.hit_prob, "Per-frame chance of a random impulse")->capture_default_str();
  g->add_option("--distractors", gen.scene.num_distractors, "Moving distractor shapes")->capture_default_str();
  g->add_option("--distractor-speed", gen.scene.distractor_speed, "Distractor speed, px per frame")->capture_default_str();
  g->add_option("--occlusion-prob", gen.scene.occlusion_prob, "Chance a distractor is drawn over the ball")
      ->capture_default_str();
  g->add_option("--motion-blur", gen.scene.motion_blur_len, "Sub-frame samples for blur (0 disables)")
      ->capture_default_str();
  g->add_option("--background", background, "Background kind")
      ->check(CLI::IsMember({"flat", "gradient", "textured"}))
      ->capture_default_str();
  g->add_option("--sequences-per-scene", gen.scene.sequences_per_scene, "Sequences sharing one scene seed")
      ->capture_default_str();

  // train -------------------------------------------------------------------
  TrainOptions tr;
  tr.common.threads = env_threads;
  tr.model.input_scale = 1.0 / 255.0;
  std::string model_name;
  std::string initial_state = "zeros";
  bool no_instance_norm = false, prelu = false, per_timestep = false;
  auto* t = app.add_subcommand("train", "Train a tracker on a generated dataset");
  add_common(*t, tr.common);
  t->add_option("--model", model_name, "Model kind")->required()->check(CLI::IsMember({"maskgru", "convgru"}));
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--lr", tr.train.learning_rate, "Adam learning rate")->capture_default_str();
  t->add_option("--batch", tr.train.batch_size, "Sequences per update")->capture_default_str();
  t->add_option("--epochs", tr.train.max_epochs, "Maximum epochs")->capture_default_str();
  t->add_option("--gamma", tr.train.gamma, "Teacher-forcing decay per epoch")->capture_default_str();
  t->add_option("--seq-len", tr.train.seq_len, "Frames used per sequence (0: all)")->capture_default_str();
  t->add_option("--patience", tr.train.early_stop.patience, "Early-stop patience in epochs (0 disables)")
      ->capture_default_str();
  t->add_option("--min-delta", tr.train.early_stop.min_delta, "Smallest validation-loss gain that counts")
      ->capture_default_str();
  t->add_option("--clip", tr.train.clip_norm, "Global gradient-norm clip (0 disables)")->capture_default_str();
  t->add_flag("--tf-per-timestep", per_timestep, "Draw teacher forcing per timestep instead of per sequence");
  auto* beta = t->add_option("--beta", tr.model.beta, "Blend weight of the hidden state")->capture_default_str();
  t->add_option("--kernel", tr.model.kernel, "Gate convolution size")->capture_default_str();
  t->add_option("--pool-kernel", tr.model.pool_kernel, "Head pooling kernel")->capture_default_str();
  t->add_option("--pool-stride", tr.model.pool_stride, "Head pooling stride")->capture_default_str();
  t->add_option("--hidden1", tr.model.hidden1, "Width of the first head layer")->capture_default_str();
  t->add_option("--hidden2", tr.model.hidden2, "Width of the second head layer")->capture_default_str();
  auto* no_in = t->add_flag("--no-instance-norm", no_instance_norm, "Drop instance norm from the gates");
  t->add_flag("--prelu", prelu, "PReLU instead of ReLU in the head");
  auto* init = t->add_option("--initial-state", initial_state, "h_0")
                   ->check(CLI::IsMember({"zeros", "first-box"}))
                   ->capture_default_str();
  auto* mask_value = t->add_option("--mask-value", tr.model.mask_value, "Outline value in the rendered mask")
                         ->capture_default_str();
  t->add_option("--input-scale", tr.model.input_scale, "Multiplier applied to 8-bit frames")->capture_default_str();
  t->add_flag("--resume", tr.resume, "Continue the run in --out from its last epoch");

  // eval --------------------------------------------------------------------
  EvalOptions ev;
  ev.common.threads = env_threads;
  std::vector<std::string> ev_checkpoints;
  std::string ev_model;
  bool no_reference = false;
  auto* e = app.add_subcommand("eval", "Score checkpoints; two or more are ranked in a comparison table");
  add_common(*e, ev.common);
  e->add_option("--checkpoint,-c", ev_checkpoints, "Checkpoint as [label=]path; repeatable")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--split", ev.split, "Which side of the split to score")
      ->check(CLI::IsMember({"both", "train", "val"}))
      ->capture_default_str();
  e->add_option("--model", ev_model, "Reject checkpoints of another kind")->check(CLI::IsMember({"maskgru", "convgru"}));
  e->add_flag("--no-reference", no_reference, "Leave the published reference rows out of the table");

  // render ------------------------------------------------------------------
  RenderOptions rd;
  rd.common.threads = env_threads;
  rd.format = default_image_format();
  auto* r = app.add_subcommand("render", "Draw truth (green) and prediction (red) over every frame");
  add_common(*r, rd.common);
  r->add_option("--checkpoint,-c", rd.checkpoint, "Model checkpoint")->required();
  r->add_option("--sequence", rd.sequence, "Sequence file (.mgs)")->required();
  r->add_option("--format", rd.format, "Image format")->check(CLI::IsMember({"png", "ppm"}))->capture_default_str();
  r->add_option("--scale", rd.scale, "Integer upscale factor")->capture_default_str();
  r->add_option("--thickness", rd.thickness, "Box outline thickness in frame pixels")->capture_default_str();
  r->add_flag("--hidden", rd.hidden, "Also write h_t, the mask and the blended state per frame");

  // gradcheck ---------------------------------------------------------------
  GradcheckOptions gc;
  gc.common.threads = env_threads;
  std::string gc_model = "both";
  auto* c = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
  add_common(*c, gc.common);
  c->add_option("--model", gc_model, "Model kind")
      ->check(CLI::IsMember({"maskgru", "convgru", "both"}))
      ->capture_default_str();
  c->add_option("--size", gc.setup.size, "Frame height and width")->capture_default_str();
  c->add_option("--steps", gc.setup.steps, "Sequence length")->capture_default_str();
  c->add_option("--kernel", gc.setup.kernel, "Gate convolution size")->capture_default_str();
  c->add_option("--hidden1", gc.setup.hidden1, "Width of the first head layer")->capture_default_str();
  c->add_option("--hidden2", gc.setup.hidden2, "Width of the second head layer")->capture_default_str();
  c->add_option("--beta", gc.setup.beta, "Blend weight")->capture_default_str();
  c->add_option("--eps", gc.setup.eps, "Central-difference step")->capture_default_str();
  c->add_option("--tol", gc.setup.tol, "Relative-error tolerance")->capture_default_str();

  // plot --------------------------------------------------------------------
  PlotOptions pl;
  pl.common.threads = env_threads;
  pl.format = default_image_format();
  std::vector<std::string> pl_metrics;
  std::size_t pl_epoch = 0;
  auto* p = app.add_subcommand("plot", "Plot fields of metrics.jsonl files, one image per field");
  add_common(*p, pl.common);
  p->add_option("--metrics,-m", pl_metrics, "metrics.jsonl as [label=]path; repeatable")->required();
  p->add_option("--field,-f", pl.fields, "Field to plot; repeatable")->required();
  p->add_option("--format", pl.format, "Image format")->check(CLI::IsMember({"png", "ppm"}))->capture_default_str();
  p->add_option("--width", pl.width, "Image width")->capture_default_str();
  p->add_option("--height", pl.height, "Image height")->capture_default_str();
  auto* epoch = p->add_option("--epoch", pl_epoch, "Epoch shown for per-timestep fields (default: last)");

  try {
    app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (g->parsed()) {
      gen.scene.height = gen.scene.width = frame_size;
      gen.split_by = split_by == "sequence" ? SplitBy::kSequence : SplitBy::kSceneSeed;
      gen.scene.background = parse_background(background);
      return cmd_gen_data(gen, out);
    }
    if (t->parsed()) {
      const ModelKind kind = kKinds.at(model_name);
      if (kind == ModelKind::kConvGru) {
        std::vector<std::string> conflicts;
        if (beta->count()) conflicts.push_back("--beta");
        if (no_in->count()) conflicts.push_back("--no-instance-norm");
        if (mask_value->count()) conflicts.push_back("--mask-value");
        if (init->count() && initial_state == "first-box") conflicts.push_back("--initial-state first-box");
        if (!conflicts.empty()) {
          std::string list;
          for (const auto& s : conflicts) list += (list.empty() ? "" : ", ") + s;
          throw UsageError(list + " cannot be used with --model convgru (it has no mask path or instance norm)");
        }
      }
      ModelConfig m = ModelConfig::for_kind(kind, tr.model.height, tr.model.width);
      m.kernel = tr.model.kernel;
      m.pool_kernel = tr.model.pool_kernel;
      m.pool_stride = tr.model.pool_stride;
      m.hidden1 = tr.model.hidden1;
      m.hidden2 = tr.model.hidden2;
      m.beta = tr.model.beta;
      m.mask_value = tr.model.mask_value;
      m.input_scale = tr.model.input_scale;
      m.instance_norm = kind == ModelKind::kMaskGru && !no_instance_norm;
      m.activation = prelu ? HeadActivation::kPrelu : HeadActivation::kRelu;
      m.initial_state = initial_state == "first-box" ? InitialState::kFirstBoxMask : InitialState::kZeros;
      tr.model = m;
      tr.train.tf_mode = per_timestep ? TeacherForcingMode::kPerTimestep : TeacherForcingMode::kPerSequence;
      return cmd_train(tr, out);
    }
    if (e->parsed()) {
      for (const auto& s : ev_checkpoints) ev.checkpoints.push_back(labelled(s));
      if (!ev_model.empty()) ev.expected_kind = kKinds.at(ev_model);
      ev.reference = !no_reference;
      return cmd_eval(ev, out);
    }
    if (r->parsed()) return cmd_render(rd, out);
    if (c->parsed()) {
      if (gc_model == "both") {
        gc.kinds = {ModelKind::kMaskGru, ModelKind::kConvGru};
      } else {
        gc.kinds = {kKinds.at(gc_model)};
      }
      return cmd_gradcheck(gc, out);
    }
    if (p->parsed()) {
      for (const auto& s : pl_metrics) pl.metrics.push_back(labelled(s));
      if (epoch->count()) pl.epoch = pl_epoch;
      return cmd_plot(pl, out);
    }
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& ex) {  // ShapeError, ParameterError
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const std::runtime_error& ex) {  // DataError, NumericError, filesystem and JSON failures
    err << "error: " << ex.what() << "\n";
    return kData;
  } catch (const nlohmann::json::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace maskgru::cli
