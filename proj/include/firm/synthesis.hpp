#pragma once

// Training-data synthesis: clamped additive blends with a blurred,
// attenuated reflection, pseudo reflection-instance masks recovered from the
// residual map, and contrastive prompt points.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "firm/imaging.hpp"

namespace firm {

using InstanceMaskSet = std::vector<BinaryMask>;

struct SynthesisParams {
  double sigma = 1.0;   // reflection blur, [0.2, 4.0]
  double beta = 0.7;    // reflection attenuation, [0.4, 1.0]
  std::uint64_t seed = 0;
};

struct SynthesisRanges {
  double sigma_min = 0.2, sigma_max = 4.0;
  double beta_min = 0.4, beta_max = 1.0;
};

struct SynthesisSample {
  ImagePlane T, R, I;
  BinaryMask M_r;
  PixelCoord p_pos, p_neg;
  SynthesisParams params;
};

struct InstanceSelection {
  BinaryMask mask;        // selected instance gated by residual support
  double score = 0.0;     // mean residual over the instance support
  std::size_t index = 0;
  bool found = false;     // false: every instance scored zero ("no reflection")
};

inline constexpr int kNeighbourRadius = 10;

ImagePlane synthesize_blend(const ImagePlane& T, const ImagePlane& R, const SynthesisParams& params);
// Single-channel channel-mean of (I - T), negatives clamped to zero.
ImagePlane residual_map(const ImagePlane& I, const ImagePlane& T);
InstanceSelection select_reflection_instance(const ImagePlane& residual, const InstanceMaskSet& masks);
// Positive point uniform over M_r, negative point uniform over the
// dilation ring around it (any negative pixel when the ring is empty).
std::pair<PixelCoord, PixelCoord> sample_contrastive_points(const BinaryMask& M_r, std::uint64_t seed);

SynthesisParams sample_params(const SynthesisRanges& ranges, std::mt19937_64& rng);
std::optional<SynthesisSample> synthesize_sample(const ImagePlane& T, const ImagePlane& R, const InstanceMaskSet& masks,
                                                 const SynthesisParams& params);

// ---- datasets -------------------------------------------------------------

struct SourceEntry {
  std::filesystem::path image;
  std::vector<std::filesystem::path> instances;
};

struct SampleRecord {
  std::string id;
  std::filesystem::path T, R, I, M_r;   // absolute after reading
  PixelCoord p_pos, p_neg;
  SynthesisParams params;
};

struct DatasetOptions {
  SynthesisRanges ranges;
  int max_attempts = 32;  // resamples per record on "no reflection"
  int threads = 1;
};

struct DatasetManifest {
  std::filesystem::path path;
  std::vector<SampleRecord> records;
};

std::vector<SourceEntry> read_source_manifest(const std::filesystem::path& path);
DatasetManifest build_dataset(const std::filesystem::path& source_manifest, int n, std::uint64_t seed,
                              const std::filesystem::path& out_dir, const DatasetOptions& opts = {});
DatasetManifest read_dataset_manifest(const std::filesystem::path& path);

}  // namespace firm
