#pragma once

// Mask-guided layer separation: a U-shaped network of simplified NAF blocks
// with contrastive guidance interaction blocks (CGIB) at the bottleneck.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "firm/imaging.hpp"
#include "firm/nn/params.hpp"
#include "firm/nn/tensor.hpp"

namespace firm::removal {

using nn::Tensor;

// What goes into the fourth input channel.
enum class MaskInput { none, raw_points, contrastive };

struct RemovalConfig {
  int channels = 32;
  int scales = 3;
  int blocks = 2;
  int n_cgib = 2;
  int query_h = 16;
  int query_w = 16;
  double alpha_init = 1.0;
  double w_pix = 1.0;
  double w_grad = 0.5;
  double w_perc = 0.01;
  double w_excl = 0.1;
  double lr_max = 1e-3;
  double lr_min = 1e-6;
  int iterations = 2000;

  MaskInput mask_input = MaskInput::contrastive;
  bool use_cgib = true;
  bool cgib_reflection_only = false;

  void validate() const;
  int divisor() const { return 1 << (scales - 1); }
};

std::string config_to_json(const RemovalConfig& cfg);
RemovalConfig config_from_json(const std::string& text);

// Named ablation presets: "blended_only", "raw_point", "raw_mask",
// "reflection_mask", "full".
const std::vector<std::string>& ablation_names();
std::string ablation_label(const std::string& name);
RemovalConfig ablation_config(RemovalConfig base, const std::string& name);

// ---- building blocks (exposed for tests) --------------------------------

void add_naf_params(nn::ParamStore& store, const std::string& prefix, int c, std::mt19937_64& rng);
Tensor naf_block(const Tensor& x, const nn::ParamStore& store, const std::string& prefix);

void add_cgib_params(nn::ParamStore& store, const std::string& prefix, int c, double alpha_init, std::mt19937_64& rng);
// mask: single-channel plane at any resolution; returns [c, qh*qw].
Tensor cgib_query(const Tensor& features, const ImagePlane& mask, int qh, int qw);
// q, k: [c, n]; v: [hw, c]; returns [hw, c].
Tensor cca(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& log_alpha);
Tensor cgib_forward(const Tensor& features, const ImagePlane& mask, const nn::ParamStore& store,
                    const std::string& prefix, int qh, int qw);

inline constexpr double kExclusionEps = 1e-6;
Tensor exclusion_loss(const Tensor& t_hat, const Tensor& r_hat, int scales = 3);

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<Tensor> features(const Tensor& image) const = 0;
};

// Fixed (never trained) random 3-layer conv stack.
class RandomConvExtractor : public FeatureExtractor {
 public:
  explicit RandomConvExtractor(std::uint64_t seed = 7);
  std::vector<Tensor> features(const Tensor& image) const override;

 private:
  nn::ParamStore store_;
};

struct LossBreakdown {
  double pixel = 0.0;
  double gradient = 0.0;
  double perceptual = 0.0;
  double exclusion = 0.0;
  double total = 0.0;
};

struct LossTerms {
  Tensor pixel, gradient, perceptual, exclusion, total;
  LossBreakdown values() const;
};

LossTerms reconstruction_losses(const Tensor& t_hat, const Tensor& r_hat, const Tensor& t, const Tensor& r,
                                const FeatureExtractor& extractor, const RemovalConfig& cfg);

// ---- model --------------------------------------------------------------

struct ForwardResult {
  Tensor t_hat;  // [3,H,W]
  Tensor r_hat;
};

struct RemovalOutput {
  ImagePlane T;
  ImagePlane R;
};

Tensor image_tensor(const ImagePlane& img, bool requires_grad = false);
ImagePlane tensor_image(const Tensor& t);

// Small discs at the clicked pixels: reflection 1, transmission 0.5.
ImagePlane raw_point_mask(int height, int width, const PixelCoord& reflection, const PixelCoord& transmission,
                          int radius = 2);

class RemovalModel {
 public:
  RemovalModel(const RemovalConfig& cfg, std::uint64_t seed);

  const RemovalConfig& config() const noexcept { return cfg_; }
  nn::ParamStore& params() noexcept { return store_; }
  const nn::ParamStore& params() const noexcept { return store_; }

  // guide: the single-channel mask chosen for this configuration (contrastive
  // or raw points). Sides must be divisible by 2^(scales-1).
  ForwardResult forward(const ImagePlane& image, const ImagePlane& guide) const;
  // Pads to a valid size, runs without a graph, crops and clamps.
  RemovalOutput remove(const ImagePlane& image, const ImagePlane& guide) const;

  void save(const std::string& path) const;
  static std::shared_ptr<RemovalModel> load(const std::string& path);

 private:
  RemovalConfig cfg_;
  nn::ParamStore store_;
};

double cosine_lr(const RemovalConfig& cfg, int iter, int total);

struct TrainPair {
  std::string id;
  ImagePlane I, T, R;
  ImagePlane guide;
};

class RemovalTrainer {
 public:
  RemovalTrainer(RemovalModel& model, std::shared_ptr<const FeatureExtractor> extractor);
  // One Adam step over the batch at lr = cosine_lr(iter, total). Throws on a
  // non-finite loss, naming the batch ids.
  LossBreakdown step(const std::vector<TrainPair>& batch, int iter, int total);

 private:
  RemovalModel& model_;
  std::shared_ptr<const FeatureExtractor> extractor_;
  nn::Adam adam_;
};

}  // namespace firm::removal
