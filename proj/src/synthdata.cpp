// SPDX-License-Identifier: Apache-2.0
#include "maskgru/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>

#include "binary_io.hpp"
#include "maskgru/json_io.hpp"
#include "maskgru/parallel.hpp"

namespace maskgru {

namespace fs = std::filesystem;

const char* background_name(BackgroundKind kind) {
  switch (kind) {
    case BackgroundKind::kFlat: return "flat";
    case BackgroundKind::kGradient: return "gradient";
    case BackgroundKind::kTextured: return "textured";
  }
  return "unknown";
}

BackgroundKind parse_background(const std::string& name) {
  if (name == "flat") return BackgroundKind::kFlat;
  if (name == "gradient") return BackgroundKind::kGradient;
  if (name == "textured") return BackgroundKind::kTextured;
  throw ParameterError("unknown background '" + name + "' (expected flat, gradient or textured)");
}

void SceneConfig::validate() const {
  if (height < 8 || width < 8) throw ParameterError("frame size must be at least 8x8");
  if (seq_len == 0) throw ParameterError("seq_len must be positive");
  if (!(ball_radius > 0.0) || !(ball_radius < static_cast<double>(std::min(height, width)) / 8.0)) {
    throw ParameterError("ball radius must lie in (0, min(H,W)/8)");
  }
  if (!(ball_speed.lo >= 0.0 && ball_speed.lo <= ball_speed.hi)) throw ParameterError("invalid ball speed range");
  if (!(gravity >= 0.0)) throw ParameterError("gravity must be non-negative");
  if (!(hit_prob >= 0.0 && hit_prob <= 1.0)) throw ParameterError("hit probability must lie in [0, 1]");
  if (!(occlusion_prob >= 0.0 && occlusion_prob <= 1.0)) {
    throw ParameterError("occlusion probability must lie in [0, 1]");
  }
  if (!(distractor_size.lo > 0.0 && distractor_size.lo <= distractor_size.hi)) {
    throw ParameterError("invalid distractor size range");
  }
  if (!(distractor_speed >= 0.0)) throw ParameterError("distractor speed must be non-negative");
  if (sequences_per_scene == 0) throw ParameterError("sequences_per_scene must be positive");
}

std::span<const std::uint8_t> SequenceSample::frame_bytes(std::size_t t) const {
  const std::size_t n = 3 * height * width;
  if (t >= length()) throw UsageError("frame index out of range");
  return std::span<const std::uint8_t>(pixels).subspan(t * n, n);
}

Tensor SequenceSample::frame(std::size_t t, double scale) const {
  auto bytes = frame_bytes(t);
  Tensor out(Shape{3, height, width});
  auto dst = out.data();
  for (std::size_t i = 0; i < bytes.size(); ++i) dst[i] = static_cast<double>(bytes[i]) * scale;
  return out;
}

std::vector<Tensor> SequenceSample::frames(double scale, std::size_t limit) const {
  const std::size_t n = limit == 0 ? length() : std::min(limit, length());
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t t = 0; t < n; ++t) out.push_back(frame(t, scale));
  return out;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

constexpr double kBallColor[3] = {255.0, 245.0, 225.0};
constexpr int kSupersample = 4;

struct Ellipse {
  double x, y, vx, vy, a, b;
  double color[3];
  bool in_front;

  bool contains(double px, double py, double shrink = 0.0) const {
    const double ea = a - shrink, eb = b - shrink;
    if (ea <= 0.0 || eb <= 0.0) return false;
    const double dx = (px - x) / ea, dy = (py - y) / eb;
    return dx * dx + dy * dy <= 1.0;
  }
};

class Canvas {
 public:
  Canvas(std::size_t h, std::size_t w) : h_(h), w_(w), rgb_(3 * h * w) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) { return rgb_[(c * h_ + y) * w_ + x]; }

  void blend(std::size_t y, std::size_t x, const double* color, double alpha) {
    for (std::size_t c = 0; c < 3; ++c) at(c, y, x) = at(c, y, x) * (1.0 - alpha) + color[c] * alpha;
  }

  /// Ellipse with 2×2 supersampled edges.
  void draw(const Ellipse& e) {
    const long y0 = std::max(0L, static_cast<long>(std::floor(e.y - e.b - 1)));
    const long y1 = std::min(static_cast<long>(h_) - 1, static_cast<long>(std::ceil(e.y + e.b + 1)));
    const long x0 = std::max(0L, static_cast<long>(std::floor(e.x - e.a - 1)));
    const long x1 = std::min(static_cast<long>(w_) - 1, static_cast<long>(std::ceil(e.x + e.a + 1)));
    for (long y = y0; y <= y1; ++y)
      for (long x = x0; x <= x1; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 2; ++sy)
          for (int sx = 0; sx < 2; ++sx) hits += e.contains(x - 0.25 + 0.5 * sx, y - 0.25 + 0.5 * sy);
        if (hits) blend(static_cast<std::size_t>(y), static_cast<std::size_t>(x), e.color, hits / 4.0);
      }
  }

  /// Disc coverage averaged over the blur positions.
  void draw_ball(const std::vector<std::pair<double, double>>& positions, double r) {
    double lo_x = 1e300, hi_x = -1e300, lo_y = 1e300, hi_y = -1e300;
    for (auto [px, py] : positions) {
      lo_x = std::min(lo_x, px), hi_x = std::max(hi_x, px);
      lo_y = std::min(lo_y, py), hi_y = std::max(hi_y, py);
    }
    const long y0 = std::max(0L, static_cast<long>(std::floor(lo_y - r - 1)));
    const long y1 = std::min(static_cast<long>(h_) - 1, static_cast<long>(std::ceil(hi_y + r + 1)));
    const long x0 = std::max(0L, static_cast<long>(std::floor(lo_x - r - 1)));
    const long x1 = std::min(static_cast<long>(w_) - 1, static_cast<long>(std::ceil(hi_x + r + 1)));
    const double r2 = r * r;
    for (long y = y0; y <= y1; ++y)
      for (long x = x0; x <= x1; ++x) {
        int hits = 0;
        for (auto [px, py] : positions)
          for (int sy = 0; sy < kSupersample; ++sy)
            for (int sx = 0; sx < kSupersample; ++sx) {
              const double dx = x - 0.5 + (sx + 0.5) / kSupersample - px;
              const double dy = y - 0.5 + (sy + 0.5) / kSupersample - py;
              hits += dx * dx + dy * dy <= r2;
            }
        if (hits) {
          const double cover = hits / static_cast<double>(positions.size() * kSupersample * kSupersample);
          blend(static_cast<std::size_t>(y), static_cast<std::size_t>(x), kBallColor, cover);
        }
      }
  }

  void quantize_into(std::uint8_t* dst) const {
    for (std::size_t i = 0; i < rgb_.size(); ++i) {
      dst[i] = static_cast<std::uint8_t>(std::clamp(std::lround(rgb_[i]), 0L, 255L));
    }
  }

  std::vector<double>& raw() { return rgb_; }

 private:
  std::size_t h_, w_;
  std::vector<double> rgb_;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Per-scene backdrop: shared by every sequence generated from one scene seed.
std::vector<double> make_background(const SceneConfig& cfg, std::mt19937_64& rng) {
  const std::size_t h = cfg.height, w = cfg.width;
  std::vector<double> bg(3 * h * w);
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = uniform(rng, 25.0, 110.0);
    c1[c] = uniform(rng, 25.0, 110.0);
  }
  const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double fx = uniform(rng, 0.15, 0.5), fy = uniform(rng, 0.15, 0.5), phase = uniform(rng, 0.0, 6.28);
  const double diag = std::hypot(static_cast<double>(h), static_cast<double>(w));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double mix = 0.0;
      if (cfg.background != BackgroundKind::kFlat) {
        const double dx = static_cast<double>(x) - 0.5 * static_cast<double>(w);
        const double dy = static_cast<double>(y) - 0.5 * static_cast<double>(h);
        mix = std::clamp((dx * std::cos(angle) + dy * std::sin(angle)) / diag + 0.5, 0.0, 1.0);
      }
      double texture = 0.0;
      if (cfg.background == BackgroundKind::kTextured) {
        texture = 12.0 * std::sin(fx * static_cast<double>(x) + phase) * std::sin(fy * static_cast<double>(y)) +
                  uniform(rng, -8.0, 8.0);
      }
      for (std::size_t c = 0; c < 3; ++c) bg[(c * h + y) * w + x] = c0[c] * (1.0 - mix) + c1[c] * mix + texture;
    }
  return bg;
}

void bounce(double& pos, double& vel, double lo, double hi) {
  if (hi <= lo) {
    pos = 0.5 * (lo + hi);
    return;
  }
  for (int i = 0; i < 4 && (pos < lo || pos > hi); ++i) {
    if (pos < lo) {
      pos = 2.0 * lo - pos;
      vel = std::abs(vel);
    } else {
      pos = 2.0 * hi - pos;
      vel = -std::abs(vel);
    }
  }
  pos = std::clamp(pos, lo, hi);
}

}  // namespace

SequenceSample generate_one(const SceneConfig& cfg, std::size_t index) {
  cfg.validate();
  const std::size_t h = cfg.height, w = cfg.width, steps = cfg.seq_len;
  const double r = cfg.ball_radius;
  const double max_x = static_cast<double>(w) - 1.0, max_y = static_cast<double>(h) - 1.0;

  SequenceSample s;
  s.height = h;
  s.width = w;
  s.meta.index = index;
  s.meta.seed = derive_seed(cfg.seed, index, 1);
  s.meta.scene_seed = derive_seed(cfg.seed, index / cfg.sequences_per_scene, 2);

  std::mt19937_64 scene_rng(s.meta.scene_seed);
  const std::vector<double> background = make_background(cfg, scene_rng);
  std::vector<Ellipse> distractors(cfg.num_distractors);
  for (Ellipse& e : distractors) {
    e.a = uniform(scene_rng, cfg.distractor_size.lo, cfg.distractor_size.hi);
    e.b = uniform(scene_rng, cfg.distractor_size.lo, cfg.distractor_size.hi);
    for (double& c : e.color) c = uniform(scene_rng, 40.0, 190.0);
  }

  std::mt19937_64 rng(s.meta.seed);
  for (Ellipse& e : distractors) {
    e.x = uniform(rng, 0.0, max_x);
    e.y = uniform(rng, 0.0, max_y);
    const double ang = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    e.vx = cfg.distractor_speed * std::cos(ang);
    e.vy = cfg.distractor_speed * std::sin(ang);
    e.in_front = uniform(rng, 0.0, 1.0) < cfg.occlusion_prob;
  }

  const bool moving = cfg.ball_speed.hi > 0.0;
  double bx = uniform(rng, r, max_x - r), by = uniform(rng, r, max_y - r);
  double vx = 0.0, vy = 0.0;
  auto redirect = [&] {
    const double speed = uniform(rng, cfg.ball_speed.lo, cfg.ball_speed.hi);
    const double ang = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    vx = speed * std::cos(ang);
    vy = speed * std::sin(ang);
  };
  if (moving) redirect();

  std::normal_distribution<double> jitter(0.0, 0.25);
  const std::size_t blur = std::max<std::size_t>(cfg.motion_blur_len, 1);
  const std::size_t frame_size = 3 * h * w;
  s.pixels.resize(steps * frame_size);
  s.boxes.reserve(steps);

  for (std::size_t t = 0; t < steps; ++t) {
    if (t > 0) {
      if (moving) {
        vy += cfg.gravity;
        if (uniform(rng, 0.0, 1.0) < cfg.hit_prob) redirect();
        const double speed = std::hypot(vx, vy);
        if (speed > cfg.ball_speed.hi) {
          vx *= cfg.ball_speed.hi / speed;
          vy *= cfg.ball_speed.hi / speed;
        }
        bx += vx;
        by += vy;
        bounce(bx, vx, r, max_x - r);
        bounce(by, vy, r, max_y - r);
      }
      for (Ellipse& e : distractors) {
        e.vx += jitter(rng);
        e.vy += jitter(rng);
        const double speed = std::hypot(e.vx, e.vy);
        if (speed > cfg.distractor_speed && speed > 0.0) {
          e.vx *= cfg.distractor_speed / speed;
          e.vy *= cfg.distractor_speed / speed;
        }
        e.x += e.vx;
        e.y += e.vy;
        bounce(e.x, e.vx, 0.0, max_x);
        bounce(e.y, e.vy, 0.0, max_y);
      }
    }

    Canvas canvas(h, w);
    canvas.raw() = background;
    for (const Ellipse& e : distractors)
      if (!e.in_front) canvas.draw(e);
    std::vector<std::pair<double, double>> positions;
    for (std::size_t k = 0; k < blur; ++k) {
      const double f = blur == 1 ? 0.0 : (static_cast<double>(k) + 0.5) / static_cast<double>(blur) - 0.5;
      positions.emplace_back(bx + vx * f, by + vy * f);
    }
    canvas.draw_ball(positions, r);
    bool occluded = false;
    for (const Ellipse& e : distractors) {
      if (!e.in_front) continue;
      canvas.draw(e);
      occluded = occluded || e.contains(bx, by, r);
    }
    canvas.quantize_into(s.pixels.data() + t * frame_size);

    s.boxes.push_back({std::clamp(bx - r, 0.0, max_x), std::clamp(by - r, 0.0, max_y), std::clamp(bx + r, 0.0, max_x),
                       std::clamp(by + r, 0.0, max_y)});
    s.meta.center_x.push_back(bx);
    s.meta.center_y.push_back(by);
    s.meta.occluded.push_back(occluded);
  }
  return s;
}

std::vector<SequenceSample> generate(const SceneConfig& config, std::size_t count, std::size_t threads) {
  if (count == 0) throw UsageError("generate: count must be positive");
  config.validate();
  std::vector<SequenceSample> out(count);
  parallel_for(count, threads, [&](std::size_t i) { out[i] = generate_one(config, i); });
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

Split split(std::span<const SequenceSample> dataset, double train_frac, SplitBy by, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ParameterError("train fraction must lie in (0, 1)");
  std::vector<std::vector<std::size_t>> units;
  if (by == SplitBy::kSequence) {
    for (std::size_t i = 0; i < dataset.size(); ++i) units.push_back({i});
  } else {
    std::map<std::uint64_t, std::size_t> slot;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      auto [it, fresh] = slot.try_emplace(dataset[i].meta.scene_seed, units.size());
      if (fresh) units.emplace_back();
      units[it->second].push_back(i);
    }
  }
  std::mt19937_64 rng(seed);
  std::shuffle(units.begin(), units.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::lround(train_frac * static_cast<double>(units.size())));
  if (n_train == 0 || n_train >= units.size()) {
    throw UsageError("split leaves one side empty (" + std::to_string(units.size()) + " units, fraction " +
                     std::to_string(train_frac) + ")");
  }
  Split out;
  for (std::size_t u = 0; u < units.size(); ++u) {
    auto& side = u < n_train ? out.train : out.val;
    side.insert(side.end(), units[u].begin(), units[u].end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

std::vector<SequenceSample> select(std::span<const SequenceSample> dataset, std::span<const std::size_t> indices) {
  std::vector<SequenceSample> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(dataset[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Files

namespace {
constexpr char kSeqMagic[9] = "MGRUSEQ";
constexpr std::uint32_t kSeqVersion = 1;
}  // namespace

void write_sequence(const fs::path& path, const SequenceSample& s) {
  if (s.pixels.size() != s.length() * 3 * s.height * s.width) throw UsageError("sequence pixel buffer size mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(kSeqMagic, 8);
  io::put_u32(out, kSeqVersion);
  io::put_u32(out, static_cast<std::uint32_t>(s.height));
  io::put_u32(out, static_cast<std::uint32_t>(s.width));
  io::put_u32(out, static_cast<std::uint32_t>(s.length()));
  out.write(reinterpret_cast<const char*>(s.pixels.data()), static_cast<std::streamsize>(s.pixels.size()));
  for (const BBox& b : s.boxes) {
    for (double v : {b.x1, b.y1, b.x2, b.y2}) io::put_f64(out, v);
  }
  if (!out) throw DataError("write failed: " + path.string());
}

SequenceSample read_sequence(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open sequence file " + path.string());
  const std::string name = path.string();
  io::expect_magic(in, kSeqMagic, name);
  const std::uint32_t version = io::get_u32(in, "version");
  if (version != kSeqVersion) throw DataError(name + ": unsupported sequence version " + std::to_string(version));
  SequenceSample s;
  s.height = io::get_u32(in, "height");
  s.width = io::get_u32(in, "width");
  const std::size_t steps = io::get_u32(in, "length");
  if (s.height == 0 || s.width == 0 || steps == 0 || s.height > 8192 || s.width > 8192) {
    throw DataError(name + ": implausible header");
  }
  s.pixels.resize(steps * 3 * s.height * s.width);
  if (!in.read(reinterpret_cast<char*>(s.pixels.data()), static_cast<std::streamsize>(s.pixels.size()))) {
    throw DataError(name + ": truncated frame data");
  }
  s.boxes.resize(steps);
  for (BBox& b : s.boxes) {
    b.x1 = io::get_f64(in, "box");
    b.y1 = io::get_f64(in, "box");
    b.x2 = io::get_f64(in, "box");
    b.y2 = io::get_f64(in, "box");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(name + ": trailing bytes");
  return s;
}

std::string sequence_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%05zu.mgs", index);
  return buf;
}

void write_dataset(const fs::path& dir, const SceneConfig& config, std::span<const SequenceSample> samples,
                   const Split* split_sides) {
  fs::create_directories(dir);
  nlohmann::json files = nlohmann::json::array();
  std::vector<std::string> names;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const SequenceSample& s = samples[i];
    names.push_back(sequence_file_name(s.meta.index));
    write_sequence(dir / names.back(), s);
    files.push_back({{"file", names.back()}, {"index", s.meta.index}, {"seed", s.meta.seed},
                     {"scene_seed", s.meta.scene_seed}, {"frames", s.length()}});
  }
  nlohmann::json manifest = {{"format", "maskgru-sequences"},
                             {"version", kSeqVersion},
                             {"count", samples.size()},
                             {"scene", to_json(config)},
                             {"sequences", files}};
  if (split_sides) {
    auto side = [&](const std::vector<std::size_t>& idx) {
      nlohmann::json arr = nlohmann::json::array();
      for (std::size_t i : idx) arr.push_back(names.at(i));
      return arr;
    };
    manifest["split"] = {{"train", side(split_sides->train)}, {"val", side(split_sides->val)}};
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw DataError("cannot write manifest in " + dir.string());
}

DatasetInfo read_dataset_info(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("no manifest.json in " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    DatasetInfo info;
    info.config = scene_config_from_json(j.at("scene"));
    for (const auto& f : j.at("sequences")) {
      info.files.push_back(f.at("file").get<std::string>());
      SequenceMeta m;
      m.index = f.at("index").get<std::size_t>();
      m.seed = f.at("seed").get<std::uint64_t>();
      m.scene_seed = f.at("scene_seed").get<std::uint64_t>();
      info.meta.push_back(m);
    }
    if (j.contains("split")) {
      info.train_files = j["split"].at("train").get<std::vector<std::string>>();
      info.val_files = j["split"].at("val").get<std::vector<std::string>>();
    }
    return info;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir.string() + "/manifest.json: " + e.what());
  }
}

std::vector<SequenceSample> load_dataset(const fs::path& dir, const std::string& which) {
  const DatasetInfo info = read_dataset_info(dir);
  std::vector<std::string> wanted;
  if (which == "all") {
    wanted = info.files;
  } else if (which == "train" || which == "val") {
    wanted = which == "train" ? info.train_files : info.val_files;
    if (wanted.empty()) throw DataError(dir.string() + ": manifest has no '" + which + "' split");
  } else {
    throw UsageError("unknown dataset side '" + which + "' (expected train, val or all)");
  }
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < info.files.size(); ++i) position[info.files[i]] = i;
  std::vector<SequenceSample> out;
  out.reserve(wanted.size());
  for (const std::string& name : wanted) {
    auto it = position.find(name);
    if (it == position.end()) throw DataError("split lists unknown file " + name);
    out.push_back(read_sequence(dir / name));
    out.back().meta = info.meta[it->second];
  }
  return out;
}

}  // namespace maskgru
