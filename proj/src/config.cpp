#include "dsem/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <string>

namespace dsem {

namespace {

using Setter = std::function<void(const nlohmann::json&)>;

template <typename V>
Setter set(V& field) {
  return [&field](const nlohmann::json& v) { field = v.get<V>(); };
}

void apply_section(const std::string& section, const nlohmann::json& j,
                   const std::map<std::string, Setter>& setters) {
  if (!j.is_object()) throw ConfigError("config section \"" + section + "\" must be an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key \"" + section + "." + key + "\"");
    try {
      it->second(value);
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError("config key \"" + section + "." + key + "\": " + ex.what());
    }
  }
}

}  // namespace

void RunConfig::validate() const {
  detector.validate();
  dsem.validate();
  adapt.validate(false);
  if (!(eval.score_thresh >= 0.0) || !(eval.nms_iou > 0.0 && eval.nms_iou <= 1.0) || eval.max_dets < 1) {
    throw ConfigError("invalid eval section");
  }
}

nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["detector"] = {{"num_classes", c.detector.num_classes},
                   {"input_size", c.detector.input_size},
                   {"backbone_channels", c.detector.backbone_channels},
                   {"head_strides", c.detector.head_strides},
                   {"anchors_per_cell", c.detector.anchors_per_cell},
                   {"anchor_scales", c.detector.anchor_scales}};
  j["dsem"] = {{"dense_depth", c.dsem.dense_depth},
               {"inner_channels", c.dsem.inner_channels},
               {"pool_bins", c.dsem.pool_bins},
               {"grl_coeff", c.dsem.grl_coeff},
               {"foreground_enhance", c.dsem.foreground_enhance},
               {"seg_domain_adapt", c.dsem.seg_domain_adapt}};
  j["adapt"] = {{"lambda", c.adapt.lambda},
                {"dsem_strides", c.adapt.dsem_strides},
                {"pretrain_iters", c.adapt.pretrain_iters},
                {"adapt_iters", c.adapt.adapt_iters},
                {"batch_size", c.adapt.batch_size},
                {"pretrain_lr", c.adapt.pretrain_lr},
                {"base_lr", c.adapt.base_lr},
                {"dsem_lr_multiplier", c.adapt.dsem_lr_multiplier},
                {"momentum", c.adapt.momentum},
                {"weight_decay", c.adapt.weight_decay},
                {"grl_warmup_fraction", c.adapt.grl_warmup_fraction},
                {"seed", c.adapt.seed},
                {"few_shot_target_per_class", nullptr},
                {"probe_iters", c.adapt.probe_iters},
                {"probe_lr", c.adapt.probe_lr}};
  if (c.adapt.few_shot_target_per_class) j["adapt"]["few_shot_target_per_class"] = *c.adapt.few_shot_target_per_class;
  j["eval"] = {{"score_thresh", c.eval.score_thresh}, {"nms_iou", c.eval.nms_iou}, {"max_dets", c.eval.max_dets}};
  return j;
}

void merge_config(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [section, body] : j.items()) {
    if (section == "detector") {
      apply_section(section, body,
                    {{"num_classes", set(c.detector.num_classes)},
                     {"input_size", set(c.detector.input_size)},
                     {"backbone_channels", set(c.detector.backbone_channels)},
                     {"head_strides", set(c.detector.head_strides)},
                     {"anchors_per_cell", set(c.detector.anchors_per_cell)},
                     {"anchor_scales", set(c.detector.anchor_scales)}});
    } else if (section == "dsem") {
      apply_section(section, body,
                    {{"dense_depth", set(c.dsem.dense_depth)},
                     {"inner_channels", set(c.dsem.inner_channels)},
                     {"pool_bins", set(c.dsem.pool_bins)},
                     {"grl_coeff", set(c.dsem.grl_coeff)},
                     {"foreground_enhance", set(c.dsem.foreground_enhance)},
                     {"seg_domain_adapt", set(c.dsem.seg_domain_adapt)}});
    } else if (section == "adapt") {
      apply_section(
          section, body,
          {{"lambda", set(c.adapt.lambda)},
           {"dsem_strides", set(c.adapt.dsem_strides)},
           {"pretrain_iters", set(c.adapt.pretrain_iters)},
           {"adapt_iters", set(c.adapt.adapt_iters)},
           {"batch_size", set(c.adapt.batch_size)},
           {"pretrain_lr", set(c.adapt.pretrain_lr)},
           {"base_lr", set(c.adapt.base_lr)},
           {"dsem_lr_multiplier", set(c.adapt.dsem_lr_multiplier)},
           {"momentum", set(c.adapt.momentum)},
           {"weight_decay", set(c.adapt.weight_decay)},
           {"grl_warmup_fraction", set(c.adapt.grl_warmup_fraction)},
           {"seed", set(c.adapt.seed)},
           {"few_shot_target_per_class",
            [&c](const nlohmann::json& v) {
              if (v.is_null()) c.adapt.few_shot_target_per_class.reset();
              else c.adapt.few_shot_target_per_class = v.get<int>();
            }},
           {"probe_iters", set(c.adapt.probe_iters)},
           {"probe_lr", set(c.adapt.probe_lr)}});
    } else if (section == "eval") {
      apply_section(section, body,
                    {{"score_thresh", set(c.eval.score_thresh)},
                     {"nms_iou", set(c.eval.nms_iou)},
                     {"max_dets", set(c.eval.max_dets)}});
    } else {
      throw ConfigError("unknown config section \"" + section + "\"");
    }
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(path.string() + ": " + ex.what());
  }
  RunConfig c;
  merge_config(c, j);
  return c;
}

}  // namespace dsem
