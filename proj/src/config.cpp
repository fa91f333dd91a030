#include "cdiffdet/config.hpp"

#include "cdiffdet/errors.hpp"

namespace cdiffdet {

namespace {

template <class T>
void read(const nlohmann::json& j, const char* key, T& field) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config field '") + key + "': " + e.what());
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (num_classes == 0) throw ConfigError("num_classes must be >= 1");
  if (backbone_channels.size() != 4) throw ConfigError("backbone_channels needs 4 entries (C2..C5)");
  if (gce_channels.size() != 2) throw ConfigError("gce_channels needs 2 entries");
  if (fpn_dim == 0 || gce_dim == 0 || stem_channels == 0) throw ConfigError("model dims must be positive");
  if (ace_reduction == 0 || backbone_channels[3] % ace_reduction != 0) {
    throw ConfigError("C5 channels (" + std::to_string(backbone_channels[3]) + ") not divisible by ace_reduction " +
                      std::to_string(ace_reduction));
  }
  if (attention_heads == 0 || fpn_dim % attention_heads != 0) {
    throw ConfigError("fpn_dim must be divisible by attention_heads");
  }
  if (fpn_dim % 2 != 0) throw ConfigError("fpn_dim must be even for sinusoidal embeddings");
  if (gce_variant != "residual" && gce_variant != "simple") throw ConfigError("gce_variant must be residual|simple");
  if (mmf != "attention" && mmf != "additive") throw ConfigError("mmf must be attention|additive");
  if (roi_resolution == 0) throw ConfigError("roi_resolution must be >= 1");
  if (!(fpn_base_size > 0.0)) throw ConfigError("fpn_base_size must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
}

void DetectorConfig::validate() const {
  model.validate();
  if (num_proposals == 0) throw ConfigError("num_proposals must be >= 1");
  if (timesteps == 0) throw ConfigError("timesteps must be >= 1");
  if (ddim_steps == 0 || ddim_steps > timesteps) throw ConfigError("ddim_steps must lie in [1, T]");
  if (!(signal_scale > 0.0)) throw ConfigError("signal_scale must be positive");
  auto unit = [](double v, const char* name) {
    if (!(v > 0.0 && v < 1.0)) throw ConfigError(std::string(name) + " must lie in (0,1)");
  };
  unit(renewal_threshold, "renewal_threshold");
  unit(score_threshold, "score_threshold");
  unit(nms_iou, "nms_iou");
  if (renewal_stride == 0) throw ConfigError("renewal_stride must be >= 1");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (lambda_cls < 0 || lambda_l1 < 0 || lambda_giou < 0 || lambda_noise < 0) {
    throw ConfigError("loss weights must be nonnegative");
  }
  if (lambda_cls == 0 && lambda_l1 == 0 && lambda_giou == 0) throw ConfigError("at least one match weight must be > 0");
  if (gt_fill_fraction < 0.0 || gt_fill_fraction > 1.0) throw ConfigError("gt_fill_fraction must lie in [0,1]");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"num_classes", c.num_classes},
       {"stem_channels", c.stem_channels},
       {"backbone_channels", c.backbone_channels},
       {"fpn_dim", c.fpn_dim},
       {"use_p1", c.use_p1},
       {"ace_reduction", c.ace_reduction},
       {"gce_channels", c.gce_channels},
       {"gce_dim", c.gce_dim},
       {"gce_variant", c.gce_variant},
       {"attention_heads", c.attention_heads},
       {"roi_resolution", c.roi_resolution},
       {"fpn_base_size", c.fpn_base_size},
       {"mmf", c.mmf},
       {"instance_interaction", c.instance_interaction},
       {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  read(j, "num_classes", c.num_classes);
  read(j, "stem_channels", c.stem_channels);
  read(j, "backbone_channels", c.backbone_channels);
  read(j, "fpn_dim", c.fpn_dim);
  read(j, "use_p1", c.use_p1);
  read(j, "ace_reduction", c.ace_reduction);
  read(j, "gce_channels", c.gce_channels);
  read(j, "gce_dim", c.gce_dim);
  read(j, "gce_variant", c.gce_variant);
  read(j, "attention_heads", c.attention_heads);
  read(j, "roi_resolution", c.roi_resolution);
  read(j, "fpn_base_size", c.fpn_base_size);
  read(j, "mmf", c.mmf);
  read(j, "instance_interaction", c.instance_interaction);
  read(j, "dropout", c.dropout);
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
  j = {{"model", c.model},
       {"num_proposals", c.num_proposals},
       {"timesteps", c.timesteps},
       {"ddim_steps", c.ddim_steps},
       {"signal_scale", c.signal_scale},
       {"clamp_signal", c.clamp_signal},
       {"renewal_threshold", c.renewal_threshold},
       {"renewal_stride", c.renewal_stride},
       {"score_threshold", c.score_threshold},
       {"nms_iou", c.nms_iou},
       {"max_detections", c.max_detections},
       {"use_noise_head", c.use_noise_head},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
  read(j, "model", c.model);
  read(j, "num_proposals", c.num_proposals);
  read(j, "timesteps", c.timesteps);
  read(j, "ddim_steps", c.ddim_steps);
  read(j, "signal_scale", c.signal_scale);
  read(j, "clamp_signal", c.clamp_signal);
  read(j, "renewal_threshold", c.renewal_threshold);
  read(j, "renewal_stride", c.renewal_stride);
  read(j, "score_threshold", c.score_threshold);
  read(j, "nms_iou", c.nms_iou);
  read(j, "max_detections", c.max_detections);
  read(j, "use_noise_head", c.use_noise_head);
  read(j, "seed", c.seed);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"warmup_steps", c.warmup_steps},
       {"decay_steps", c.decay_steps},
       {"decay_factor", c.decay_factor},
       {"steps", c.steps},
       {"batch_size", c.batch_size},
       {"clip_norm", c.clip_norm},
       {"lambda_cls", c.lambda_cls},
       {"lambda_l1", c.lambda_l1},
       {"lambda_giou", c.lambda_giou},
       {"lambda_noise", c.lambda_noise},
       {"focal_alpha", c.focal_alpha},
       {"focal_gamma", c.focal_gamma},
       {"gt_fill_fraction", c.gt_fill_fraction},
       {"augment", c.augment},
       {"hflip_prob", c.hflip_prob},
       {"scale_jitter", c.scale_jitter},
       {"log_every", c.log_every},
       {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  read(j, "lr", c.lr);
  read(j, "weight_decay", c.weight_decay);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "adam_eps", c.adam_eps);
  read(j, "warmup_steps", c.warmup_steps);
  read(j, "decay_steps", c.decay_steps);
  read(j, "decay_factor", c.decay_factor);
  read(j, "steps", c.steps);
  read(j, "batch_size", c.batch_size);
  read(j, "clip_norm", c.clip_norm);
  read(j, "lambda_cls", c.lambda_cls);
  read(j, "lambda_l1", c.lambda_l1);
  read(j, "lambda_giou", c.lambda_giou);
  read(j, "lambda_noise", c.lambda_noise);
  read(j, "focal_alpha", c.focal_alpha);
  read(j, "focal_gamma", c.focal_gamma);
  read(j, "gt_fill_fraction", c.gt_fill_fraction);
  read(j, "augment", c.augment);
  read(j, "hflip_prob", c.hflip_prob);
  read(j, "scale_jitter", c.scale_jitter);
  read(j, "log_every", c.log_every);
  read(j, "checkpoint_every", c.checkpoint_every);
}

}  // namespace cdiffdet
