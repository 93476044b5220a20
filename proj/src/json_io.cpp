// SPDX-License-Identifier: Apache-2.0
#include "maskgru/json_io.hpp"

namespace maskgru {

nlohmann::json to_json(const SceneConfig& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"seq_len", c.seq_len},
          {"ball_radius", c.ball_radius},
          {"ball_speed", {c.ball_speed.lo, c.ball_speed.hi}},
          {"gravity", c.gravity},
          {"hit_prob", c.hit_prob},
          {"num_distractors", c.num_distractors},
          {"distractor_size", {c.distractor_size.lo, c.distractor_size.hi}},
          {"distractor_speed", c.distractor_speed},
          {"motion_blur_len", c.motion_blur_len},
          {"occlusion_prob", c.occlusion_prob},
          {"background", background_name(c.background)},
          {"sequences_per_scene", c.sequences_per_scene},
          {"seed", c.seed}};
}

SceneConfig scene_config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.seq_len = j.at("seq_len").get<std::size_t>();
  c.ball_radius = j.at("ball_radius").get<double>();
  c.ball_speed = {j.at("ball_speed").at(0).get<double>(), j.at("ball_speed").at(1).get<double>()};
  c.gravity = j.at("gravity").get<double>();
  c.hit_prob = j.at("hit_prob").get<double>();
  c.num_distractors = j.at("num_distractors").get<std::size_t>();
  c.distractor_size = {j.at("distractor_size").at(0).get<double>(), j.at("distractor_size").at(1).get<double>()};
  c.distractor_speed = j.at("distractor_speed").get<double>();
  c.motion_blur_len = j.at("motion_blur_len").get<std::size_t>();
  c.occlusion_prob = j.at("occlusion_prob").get<double>();
  c.background = parse_background(j.at("background").get<std::string>());
  c.sequences_per_scene = j.at("sequences_per_scene").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"model", model_kind_name(c.kind)},
          {"height", c.height},
          {"width", c.width},
          {"kernel", c.kernel},
          {"pool_kernel", c.pool_kernel},
          {"pool_stride", c.pool_stride},
          {"hidden1", c.hidden1},
          {"hidden2", c.hidden2},
          {"beta", c.beta},
          {"instance_norm", c.uses_instance_norm()},
          {"activation", c.activation == HeadActivation::kPrelu ? "prelu" : "relu"},
          {"initial_state", c.initial_state == InitialState::kFirstBoxMask ? "first-box" : "zeros"},
          {"mask_value", c.mask_value},
          {"input_scale", c.input_scale}};
}

nlohmann::json to_json(const BBox& b) { return nlohmann::json::array({b.x1, b.y1, b.x2, b.y2}); }

}  // namespace maskgru
