// SPDX-License-Identifier: Apache-2.0
#include "maskgru/eval.hpp"

#include <algorithm>
#include <array>
#include <cstdio>

#include "maskgru/parallel.hpp"

namespace maskgru {

double iou(const BBox& a_in, const BBox& b_in) {
  const BBox a = a_in.canonical(), b = b_in.canonical();
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (!(uni > 0.0)) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json rates = nlohmann::json::object();
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    char key[32];
    std::snprintf(key, sizeof key, "iou_at_%g", thresholds[i]);
    rates[key] = rate_at[i];
  }
  return {{"dataset_id", dataset_id}, {"sequences", sequence_iou.size()}, {"frames", frames},
          {"mean_iou", mean_iou},     {"rates", rates},                   {"sequence_iou", sequence_iou},
          {"timestep_iou", timestep_iou}};
}

std::string dataset_fingerprint(std::span<const SequenceSample> dataset) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const SequenceSample& s : dataset) {
    const std::uint64_t dims[3] = {s.height, s.width, s.length()};
    mix(dims, sizeof dims);
    mix(s.pixels.data(), s.pixels.size());
    for (const BBox& b : s.boxes) {
      const double v[4] = {b.x1, b.y1, b.x2, b.y2};
      mix(v, sizeof v);
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

EvalReport evaluate(const Predictor& predict, std::span<const SequenceSample> dataset, std::size_t threads) {
  if (dataset.empty()) throw UsageError("evaluate: empty dataset");
  std::vector<std::vector<double>> per_frame(dataset.size());
  parallel_for(dataset.size(), threads, [&](std::size_t i) {
    const SequenceSample& s = dataset[i];
    const std::vector<BBox> pred = predict(s);
    if (pred.size() != s.length()) throw UsageError("predictor returned the wrong number of boxes");
    per_frame[i].resize(s.length());
    for (std::size_t t = 0; t < s.length(); ++t) per_frame[i][t] = iou(pred[t], s.boxes[t]);
  });

  EvalReport r;
  r.dataset_id = dataset_fingerprint(dataset);
  r.rate_at.assign(r.thresholds.size(), 0.0);
  std::vector<double> step_sum;
  std::vector<std::size_t> step_count;
  for (const auto& ious : per_frame) {
    r.frames += ious.size();
    double acc = 0.0;
    std::vector<std::size_t> hits(r.thresholds.size(), 0);
    for (std::size_t t = 0; t < ious.size(); ++t) {
      acc += ious[t];
      for (std::size_t k = 0; k < r.thresholds.size(); ++k) hits[k] += ious[t] >= r.thresholds[k];
      if (step_sum.size() <= t) {
        step_sum.push_back(0.0);
        step_count.push_back(0);
      }
      step_sum[t] += ious[t];
      ++step_count[t];
    }
    const double n = static_cast<double>(ious.size());
    r.sequence_iou.push_back(acc / n);
    for (std::size_t k = 0; k < hits.size(); ++k) r.rate_at[k] += static_cast<double>(hits[k]) / n;
  }
  const double n_seq = static_cast<double>(per_frame.size());
  double total = 0.0;
  for (double v : r.sequence_iou) total += v;
  r.mean_iou = total / n_seq;
  for (double& v : r.rate_at) v /= n_seq;
  for (std::size_t t = 0; t < step_sum.size(); ++t) {
    r.timestep_iou.push_back(step_sum[t] / static_cast<double>(step_count[t]));
  }
  return r;
}

Predictor model_predictor(const ModelParams& params) {
  return [&params](const SequenceSample& s) {
    const std::vector<Tensor> frames = s.frames(params.config.input_scale);
    return run_sequence(params, frames);
  };
}

EvalReport evaluate(ModelKind kind, const ModelParams& params, std::span<const SequenceSample> dataset,
                    std::size_t threads) {
  if (params.config.kind != kind) {
    throw UsageError(std::string("evaluate: parameters belong to ") + model_kind_name(params.config.kind) +
                     ", not " + model_kind_name(kind));
  }
  for (const SequenceSample& s : dataset) {
    if (s.height != params.config.height || s.width != params.config.width) {
      throw UsageError("evaluate: dataset frames are " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                       " but the model expects " + std::to_string(params.config.height) + "x" +
                       std::to_string(params.config.width));
    }
  }
  return evaluate(model_predictor(params), dataset, threads);
}

std::span<const ReferenceRow> reference_rows() {
  static const std::array<ReferenceRow, 3> rows{{
      {"maskGRU", 0.3009, 0.002531},
      {"convGRU", 0.03092, 0.002008},
      {"convSTAR", 0.007945, 0.001509},
  }};
  return rows;
}

Comparison compare(std::vector<ModelReports> reports, bool with_reference) {
  if (reports.size() < 2) throw UsageError("compare: need at least two reports");
  const std::string train_id = reports.front().train.dataset_id;
  const std::optional<std::string> val_id =
      reports.front().val ? std::optional(reports.front().val->dataset_id) : std::nullopt;
  for (const ModelReports& r : reports) {
    if (r.train.dataset_id != train_id) throw UsageError("compare: '" + r.name + "' was scored on different data");
    if (r.val.has_value() != val_id.has_value() || (r.val && r.val->dataset_id != *val_id)) {
      throw UsageError("compare: '" + r.name + "' has a mismatched validation set");
    }
  }
  std::stable_sort(reports.begin(), reports.end(),
                   [](const ModelReports& a, const ModelReports& b) { return a.train.mean_iou > b.train.mean_iou; });

  Comparison out;
  std::string text;
  char line[256];
  std::snprintf(line, sizeof line, "%-22s %18s %20s %9s %9s %9s\n", "Model", "Avg. Training IOU", "Avg. Validation IOU",
                "IoU>=0.1", "IoU>=0.25", "IoU>=0.5");
  text += line;
  text += std::string(92, '-') + "\n";
  out.records = nlohmann::json::array();
  for (const ModelReports& r : reports) {
    char val[32] = "-";
    if (r.val) std::snprintf(val, sizeof val, "%.6g", r.val->mean_iou);
    std::snprintf(line, sizeof line, "%-22s %18.6g %20s %9.4f %9.4f %9.4f\n", r.name.c_str(), r.train.mean_iou, val,
                  r.train.rate_at[0], r.train.rate_at[1], r.train.rate_at[2]);
    text += line;
    nlohmann::json rec = r.train.to_json();
    rec["model"] = r.name;
    rec["split"] = "train";
    out.records.push_back(rec);
    if (r.val) {
      nlohmann::json v = r.val->to_json();
      v["model"] = r.name;
      v["split"] = "val";
      out.records.push_back(v);
    }
  }
  if (with_reference) {
    text += "\nReference (original volleyball footage, not comparable to synthetic data):\n";
    for (const ReferenceRow& row : reference_rows()) {
      std::snprintf(line, sizeof line, "%-22s %18.6g %20.6g\n", row.name.c_str(), row.train_iou, row.val_iou);
      text += line;
    }
  }
  out.text = std::move(text);
  out.ranked = std::move(reports);
  return out;
}

}  // namespace maskgru
