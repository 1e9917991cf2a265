#pragma once

// Dataset-level drivers shared by the command-line tool, the service and the
// acceptance harness: training loops with CSV logs, batch inference and
// evaluation reports.

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "firm/guidance.hpp"
#include "firm/removal.hpp"
#include "firm/sarm.hpp"
#include "firm/synthesis.hpp"

namespace firm::pipeline {

namespace fs = std::filesystem;

// Ground-truth contrastive mask for removal training: the reflection
// instance at 1 and the ring around it (dilation radius 10) at 0.5.
ContrastiveMask training_contrastive_mask(const BinaryMask& M_r);

// Chooses the fourth-channel mask for a removal configuration.
ImagePlane removal_guide(const removal::RemovalConfig& cfg, const ContrastiveMask& mask, const PixelCoord& p_pos,
                         const PixelCoord& p_neg);
// Same, from interactive guidance (the first point of each polarity feeds
// raw-point configurations).
ImagePlane removal_guide(const removal::RemovalConfig& cfg, const ContrastiveMask& mask,
                         const std::vector<Guidance>& guidance);

// Reflection layer target: the blended residual clamp(I - T, 0, 1).
ImagePlane reflection_layer(const ImagePlane& I, const ImagePlane& T);

struct RemovalExample {
  std::string id;
  ImagePlane I, T, R;  // R: reflection layer
  ContrastiveMask mask;
  PixelCoord p_pos, p_neg;
};

RemovalExample make_example(const std::string& id, const ImagePlane& I, const ImagePlane& T, const BinaryMask& M_r,
                            const PixelCoord& p_pos, const PixelCoord& p_neg);
std::vector<RemovalExample> load_removal_examples(const fs::path& manifest, int limit = 0);
std::vector<removal::TrainPair> to_train_pairs(const std::vector<RemovalExample>& examples,
                                               const removal::RemovalConfig& cfg);

struct RemovalTrainOptions {
  int iterations = 2000;
  int batch = 1;
  std::uint64_t seed = 1;
  int log_every = 50;
  fs::path log_csv;  // empty: no log
  std::shared_ptr<const removal::FeatureExtractor> extractor;
};

struct RemovalTrainResult {
  std::shared_ptr<removal::RemovalModel> model;
  std::vector<removal::LossBreakdown> curve;  // one entry per iteration
};

RemovalTrainResult train_removal(const removal::RemovalConfig& cfg, const std::vector<removal::TrainPair>& pairs,
                                 const RemovalTrainOptions& opts);

struct LayerScores {
  double psnr_t = 0, ssim_t = 0, psnr_r = 0, ssim_r = 0;
};
// Mean PSNR/SSIM of the separated layers over the pairs.
LayerScores score_removal(const removal::RemovalModel& model, const std::vector<removal::TrainPair>& pairs);

// SARM samples from a synthesis manifest: the reflection source image is the
// clear view, prompts are the contrastive points. Resampled to image_size.
std::vector<sarm::SarmSample> load_sarm_samples(const fs::path& manifest, int image_size, int limit = 0);
sarm::SarmSample resize_sample(const sarm::SarmSample& s, int size);

// Baseline pretraining samples from a clear-image source manifest: every
// instance of every entry, with seeded contrastive points.
std::vector<sarm::PretrainSample> load_pretrain_samples(const fs::path& source_manifest, int image_size,
                                                        std::uint64_t seed, int limit = 0);

struct SarmTrainOptions {
  int pretrain_steps = 400;
  double pretrain_lr = 1e-3;
  int steps = 200;
  double lr = 5e-4;
  int batch = 4;
  std::uint64_t seed = 1;
  fs::path log_csv;
  // Added to the clear views of the samples during pretraining.
  std::vector<sarm::PretrainSample> extra_pretrain;
};

// Pretrains the baseline on clear views, freezes it, then adapts the
// student on blended views.
std::shared_ptr<sarm::SarmModel> train_sarm(const sarm::SarmConfig& cfg, const std::vector<sarm::SarmSample>& samples,
                                            const SarmTrainOptions& opts);
double mean_iou(const sarm::SarmModel& model, const std::vector<sarm::SarmSample>& samples, sarm::DecodeMode mode,
                bool on_clear = false);

// ---- inference --------------------------------------------------------------

struct InferResult {
  ContrastiveMask mask;
  removal::RemovalOutput layers;
  double segment_ms = 0;
  double remove_ms = 0;
};

InferResult infer(const ImagePlane& image, const std::vector<Guidance>& guidance, const SegmenterRegistry& segmenters,
                  const removal::RemovalModel& removal_model, const ConvertOptions& opts = {});

// Runs every record of a synthesis manifest with its contrastive points as
// guidance and writes <out>/predictions.jsonl ({id, T, R, mask}).
fs::path infer_manifest(const fs::path& manifest, const SegmenterRegistry& segmenters,
                        const removal::RemovalModel& removal_model, const fs::path& out_dir, int limit = 0);

// ---- evaluation -------------------------------------------------------------

// Predictions and ground truth are JSON-lines manifests matched by id. A
// record may carry T, R (layer images) and mask (three-level PNG) or M_r
// (binary PNG). For synthesis manifests the ground-truth reflection layer is
// derived from I and T.
nlohmann::json evaluate(const fs::path& predictions, const fs::path& ground_truth);

// Trains every named configuration on the same examples and reports train
// PSNR/SSIM of both layers.
nlohmann::json ablate(const removal::RemovalConfig& base, const std::vector<std::string>& names,
                      const std::vector<RemovalExample>& examples, const RemovalTrainOptions& opts);
std::string ablation_table(const nlohmann::json& report);

}  // namespace firm::pipeline
