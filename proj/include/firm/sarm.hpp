#pragma once

// Prompt-conditioned reflection segmentation.
//
// One parameter store holds two decoding paths that share the image
// encoder, prompt encoder and two-way decoder:
//  * baseline ("teacher"): output token 0 -> hypernetwork MLP, identity gate.
//    Pretrained on clear images, then frozen.
//  * adapted ("student"): an extra degradation-invariant token, a dynamic
//    weight MLP on that token and a sigmoid feature-selection gate. Only
//    these parameters train during adaptation to blended images.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "firm/guidance.hpp"
#include "firm/imaging.hpp"
#include "firm/nn/params.hpp"
#include "firm/nn/tensor.hpp"
#include "firm/prompts.hpp"

namespace firm::sarm {

using nn::Tensor;

struct SarmConfig {
  int token_dim = 64;
  int channels = 32;
  int reduction = 4;
  int n_output_tokens = 4;
  int image_size = 64;
  double focal_gamma = 2.0;
  double lambda0 = 1.0;   // focal weight
  double lambda1 = 0.1;   // feature consistency weight

  void validate() const;
};

std::string config_to_json(const SarmConfig& cfg);
SarmConfig config_from_json(const std::string& text);

enum class DecodeMode { teacher, student };

struct DecodeOutput {
  Tensor logits;          // [1,H,W]
  Tensor mask_features;   // F~ [c,H,W] (gated for the student, raw for the teacher)
};

class SarmModel {
 public:
  SarmModel(const SarmConfig& cfg, std::uint64_t seed);

  const SarmConfig& config() const noexcept { return cfg_; }
  nn::ParamStore& params() noexcept { return store_; }
  const nn::ParamStore& params() const noexcept { return store_; }

  // [c, H/8, W/8]; H and W must be divisible by 8.
  Tensor encode_image(const ImagePlane& image) const;
  // [N_prompt, d]; coordinates are normalised by the image size.
  Tensor encode_prompts(const PromptSet& prompts, int height, int width) const;
  DecodeOutput decode_mask(const Tensor& features, const Tensor& prompt_tokens, DecodeMode mode) const;
  DecodeOutput forward(const ImagePlane& image, const PromptSet& prompts, DecodeMode mode) const;

  // Logits thresholded at 0. Images not at the model size are resampled.
  BinaryMask segment(const ImagePlane& image, const PromptSet& prompts,
                     DecodeMode mode = DecodeMode::student) const;

  // Freeze everything but the adaptation parameters (or unfreeze the
  // baseline for pretraining).
  void freeze_baseline();
  void unfreeze_baseline();
  // Starts the adapted path as a copy of the baseline path.
  void init_adaptation_from_baseline();

  void save(const std::string& path) const;
  static std::shared_ptr<SarmModel> load(const std::string& path);

 private:
  SarmConfig cfg_;
  nn::ParamStore store_;
};

// Squeeze, excite-style gate: sigmoid(W1 GELU(W0 mean(F))) * F.
Tensor feature_selection(const Tensor& features, const Tensor& w0, const Tensor& w1);

// Eq-style losses on [1,H,W] (or any-shape) maps against a binary target.
inline constexpr double kDiceSmooth = 1.0;
inline constexpr double kFocalClamp = 1e-7;
Tensor dice_loss(const Tensor& prob, const BinaryMask& gt);
Tensor focal_loss(const Tensor& logits, const BinaryMask& gt, double gamma);
Tensor feature_consistency_loss(const Tensor& student, const Tensor& teacher, const BinaryMask& gt);

// Sinusoidal encoding of a normalised (row, col) position, `dim` % 4 == 0.
std::vector<double> positional_encoding(double row, double col, int dim);

// ---- training -------------------------------------------------------------

struct SarmSample {
  ImagePlane clear;     // T
  ImagePlane blended;   // I
  BinaryMask target;    // M_gt
  PromptSet prompts;
};

struct LossBreakdown {
  double dice = 0.0;
  double focal = 0.0;
  double consistency = 0.0;
  double total = 0.0;
};

struct TrainStepOptions {
  double lr = 5e-4;
  bool verify_frozen = true;
  // Test hook: runs after the parameter update and before the freeze check.
  std::function<void(nn::ParamStore&)> after_update;
};

// Teacher on the clear image gives the consistency target; student on the
// blended image is supervised by Dice + l0 Focal + l1 consistency. Plain SGD
// on trainable parameters. Throws InvariantViolation if a frozen value moves.
LossBreakdown sarm_train_step(SarmModel& model, const std::vector<SarmSample>& batch, const TrainStepOptions& opts);
LossBreakdown evaluate_losses(const SarmModel& model, const SarmSample& sample);

struct PretrainSample {
  ImagePlane image;
  BinaryMask target;
  PromptSet prompts;
};

// Baseline pretraining on clear images (Dice + Focal, Adam).
double pretrain_step(SarmModel& model, const std::vector<PretrainSample>& batch, nn::Adam& opt);

// VisualSegmenter adapter over an immutable trained model.
class SarmSegmenter : public VisualSegmenter {
 public:
  explicit SarmSegmenter(std::shared_ptr<const SarmModel> model, DecodeMode mode = DecodeMode::student)
      : model_(std::move(model)), mode_(mode) {}
  BinaryMask segment(const ImagePlane& image, const PromptSet& prompts) const override;

 private:
  std::shared_ptr<const SarmModel> model_;
  DecodeMode mode_;
};

}  // namespace firm::sarm
