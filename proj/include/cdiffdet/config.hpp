#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace cdiffdet {

// Architecture hyper-parameters. Defaults are sized for CPU training on small
// images.
struct ModelConfig {
  std::size_t num_classes = 3;
  std::size_t stem_channels = 16;
  // Output channels of C2..C5.
  std::vector<std::size_t> backbone_channels{16, 32, 64, 128};
  std::size_t fpn_dim = 64;
  bool use_p1 = false;       // adds a stride-2 level fed by the stem
  std::size_t ace_reduction = 16;
  std::vector<std::size_t> gce_channels{64, 128};
  std::size_t gce_dim = 64;  // global context width
  std::string gce_variant = "residual";  // "residual" | "simple"
  std::size_t attention_heads = 4;
  std::size_t roi_resolution = 7;
  double fpn_base_size = 224.0;
  std::string mmf = "attention";  // "attention" | "additive"
  bool instance_interaction = false;
  double dropout = 0.0;

  std::size_t model_dim() const { return fpn_dim; }
  void validate() const;
};

struct DetectorConfig {
  ModelConfig model;
  std::size_t num_proposals = 500;
  std::size_t timesteps = 1000;
  std::size_t ddim_steps = 1;
  double signal_scale = 2.0;
  bool clamp_signal = true;
  double renewal_threshold = 0.5;
  // Renew between consecutive DDIM steps whose index is a multiple of this.
  std::size_t renewal_stride = 1;
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  std::size_t max_detections = 100;
  // Use the explicit noise head for eps at inference instead of deriving it
  // from the predicted clean boxes.
  bool use_noise_head = false;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainConfig {
  double lr = 2.5e-5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t warmup_steps = 1000;
  // Learning rate is multiplied by decay_factor at each listed step.
  std::vector<std::size_t> decay_steps{15000, 18000};
  double decay_factor = 0.1;
  std::size_t steps = 20000;
  std::size_t batch_size = 2;
  double clip_norm = 1.0;
  double lambda_cls = 2.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  double lambda_noise = 0.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  // Fraction of the N training proposals filled with repeated ground truth;
  // the rest are unit-Gaussian signal boxes.
  double gt_fill_fraction = 0.5;
  bool augment = true;
  double hflip_prob = 0.5;
  double scale_jitter = 0.125;
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace cdiffdet
