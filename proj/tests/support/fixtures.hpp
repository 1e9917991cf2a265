#pragma once

#include <random>
#include <vector>

#include "firm/guidance.hpp"
#include "firm/pipeline.hpp"
#include "firm/removal.hpp"
#include "firm/sarm.hpp"
#include "firm/synthesis.hpp"
#include "firm/toy_scenes.hpp"

namespace firm::testing {

inline ImagePlane random_image(int h, int w, int c, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  ImagePlane img(h, w, c);
  for (auto& v : img.data()) v = u(rng);
  return img;
}

inline BinaryMask random_mask(int h, int w, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution b(p);
  BinaryMask m(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) m.set(r, c, b(rng));
  return m;
}

inline BinaryMask disc(int h, int w, int cr, int cc, int radius) {
  BinaryMask m(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) m.set(r, c, (r - cr) * (r - cr) + (c - cc) * (c - cc) <= radius * radius);
  return m;
}

// Paints a disc of radius 3 around every positive point and box interior;
// negative prompts carve their pixel back out. Deterministic stand-in for a
// trained segmenter.
class DiscSegmenter : public VisualSegmenter {
 public:
  BinaryMask segment(const ImagePlane& image, const PromptSet& prompts) const override {
    BinaryMask m(image.height(), image.width());
    for (const auto& p : prompts.points) {
      if (!p.positive) continue;
      const auto d = disc(image.height(), image.width(), p.at.row, p.at.col, 3);
      for (int r = 0; r < m.height(); ++r)
        for (int c = 0; c < m.width(); ++c)
          if (d.at(r, c)) m.set(r, c, true);
    }
    for (const auto& b : prompts.boxes)
      if (b.positive)
        for (int r = b.box.r0; r <= b.box.r1; ++r)
          for (int c = b.box.c0; c <= b.box.c1; ++c) m.set(r, c, true);
    for (const auto& p : prompts.points)
      if (!p.positive) m.set(p.at.row, p.at.col, false);
    return m;
  }
};

class FixedTextSegmenter : public TextSegmenter {
 public:
  std::string name() const override { return "fixed"; }
  BinaryMask segment(const ImagePlane& image, const std::string&) const override {
    BinaryMask m(image.height(), image.width());
    m.set(0, 0, true);
    return m;
  }
};

inline sarm::SarmConfig tiny_sarm_config() {
  sarm::SarmConfig c;
  c.token_dim = 8;
  c.channels = 8;
  c.reduction = 4;
  c.n_output_tokens = 2;
  c.image_size = 16;
  return c;
}

inline removal::RemovalConfig tiny_removal_config() {
  removal::RemovalConfig c;
  c.channels = 4;
  c.scales = 2;
  c.blocks = 1;
  c.n_cgib = 1;
  c.query_h = 2;
  c.query_w = 2;
  return c;
}

// Synthetic disc-reflection set: procedural clear scenes as T, disc-only
// scenes as reflection sources. Each sample's clear view is its reflection
// source. Also returns clear-scene instances usable for baseline pretraining.
struct DiscReflectionSet {
  std::vector<sarm::SarmSample> samples;
  std::vector<sarm::PretrainSample> clear_instances;
};

inline DiscReflectionSet disc_reflection_set(int n, int size, std::uint64_t seed, SynthesisRanges ranges = {}) {
  DiscReflectionSet out;
  std::mt19937_64 rng(seed);
  toy::SceneOptions to;
  to.height = to.width = size;
  toy::SceneOptions ro = to;
  ro.discs_only = true;
  while (static_cast<int>(out.samples.size()) < n) {
    const auto T = toy::make_scene(to, rng);
    const auto R = toy::make_scene(ro, rng);
    const auto params = sample_params(ranges, rng);
    const auto s = synthesize_sample(T.image, R.image, R.instances, params);
    if (!s) continue;
    sarm::SarmSample x{R.image, s->I, s->M_r, {}};
    x.prompts.points = {{s->p_pos, true}, {s->p_neg, false}};
    out.samples.push_back(std::move(x));
    const auto& inst = T.instances[rng() % T.instances.size()];
    if (inst.count() > 0 && inst.count() < inst.size()) {
      const auto [pos, neg] = sample_contrastive_points(inst, rng());
      sarm::PretrainSample p{T.image, inst, {}};
      p.prompts.points = {{pos, true}, {neg, false}};
      out.clear_instances.push_back(std::move(p));
    }
  }
  return out;
}

// Four 64x64 removal pairs: textured clear scenes blended with one or two
// shapes on black, mild blur.
inline std::vector<pipeline::RemovalExample> removal_toy_examples(int count = 4, std::uint64_t seed = 42) {
  std::vector<pipeline::RemovalExample> ex;
  std::mt19937_64 rng(seed);
  toy::SceneOptions to;
  toy::SceneOptions ro;
  ro.background = false;
  ro.min_shapes = 1;
  ro.max_shapes = 2;
  SynthesisRanges rg;
  rg.sigma_min = 0.2;
  rg.sigma_max = 1.0;
  rg.beta_min = 0.5;
  rg.beta_max = 0.7;
  while (static_cast<int>(ex.size()) < count) {
    const auto T = toy::make_scene(to, rng);
    const auto R = toy::make_scene(ro, rng);
    const auto p = sample_params(rg, rng);
    const auto s = synthesize_sample(T.image, R.image, R.instances, p);
    if (!s) continue;
    ex.push_back(pipeline::make_example("p" + std::to_string(ex.size()), s->I, s->T, s->M_r, s->p_pos, s->p_neg));
  }
  return ex;
}

}  // namespace firm::testing
