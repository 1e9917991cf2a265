#pragma once

// Procedural clear-image corpus: smooth backgrounds with a few flat-shaded
// discs and rectangles, each with its own instance mask. Stands in for a
// photographic corpus with instance annotations.

#include <filesystem>
#include <random>
#include <vector>

#include "firm/imaging.hpp"

namespace firm::toy {

struct SceneOptions {
  int height = 64;
  int width = 64;
  int min_shapes = 1;
  int max_shapes = 3;
  bool background = true;        // false -> black background
  double background_lo = 0.05;
  double background_hi = 0.35;
  double foreground_lo = 0.2;
  double foreground_hi = 0.6;
  double min_radius = 0.12;      // fraction of the shorter side
  double max_radius = 0.25;
  bool discs_only = false;
};

struct Scene {
  ImagePlane image;
  std::vector<BinaryMask> instances;
};

Scene make_scene(const SceneOptions& opts, std::mt19937_64& rng);

// Writes `n` scenes plus a source manifest (JSON lines, one
// {"image": ..., "instances": [...]} record per scene). Returns the manifest path.
std::filesystem::path write_corpus(const std::filesystem::path& out_dir, int n, std::uint64_t seed,
                                   const SceneOptions& opts);

}  // namespace firm::toy
