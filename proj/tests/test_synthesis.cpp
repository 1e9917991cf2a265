#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "firm/errors.hpp"
#include "firm/png_io.hpp"
#include "firm/synthesis.hpp"
#include "firm/toy_scenes.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace firm;
using firm::testing::disc;
using firm::testing::oracle_select;
using firm::testing::random_image;
using firm::testing::random_mask;

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("firm_test_synth_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Blend, ZeroBetaIsTransmission) {
  std::mt19937_64 rng(1);
  const auto T = random_image(8, 8, 3, rng), R = random_image(8, 8, 3, rng);
  EXPECT_EQ(synthesize_blend(T, R, {1.0, 0.0, 0}), T);
}

TEST(Blend, MatchesComposedReference) {
  std::mt19937_64 rng(2);
  const auto T = random_image(12, 10, 3, rng), R = random_image(12, 10, 3, rng);
  const SynthesisParams p{1.7, 0.6, 0};
  const auto blurred = gaussian_blur(R, 1.7);
  const auto I = synthesize_blend(T, R, p);
  for (std::size_t i = 0; i < I.data().size(); ++i)
    EXPECT_DOUBLE_EQ(I.data()[i], std::clamp(T.data()[i] + 0.6 * blurred.data()[i], 0.0, 1.0));
}

TEST(Blend, SaturatesAtOne) {
  const ImagePlane T(4, 4, 3, 0.8), R(4, 4, 3, 0.5);
  const auto I = synthesize_blend(T, R, {0.5, 1.0, 0});
  for (double v : I.data()) EXPECT_EQ(v, 1.0);
}

TEST(Blend, MonotoneInBeta) {
  std::mt19937_64 rng(3);
  const auto T = random_image(10, 10, 3, rng), R = random_image(10, 10, 3, rng);
  ImagePlane prev = T;
  for (double beta : {0.4, 0.55, 0.7, 0.85, 1.0}) {
    const auto I = synthesize_blend(T, R, {1.0, beta, 0});
    for (std::size_t i = 0; i < I.data().size(); ++i) EXPECT_GE(I.data()[i], prev.data()[i]);
    prev = I;
  }
}

TEST(Blend, ShapeChecks) {
  EXPECT_THROW(synthesize_blend(ImagePlane(4, 4, 3), ImagePlane(4, 5, 3), {}), ArgumentError);
  EXPECT_THROW(synthesize_blend(ImagePlane(4, 4, 1), ImagePlane(4, 4, 1), {}), ArgumentError);
}

TEST(Residual, ChannelMeanClampedAtZero) {
  ImagePlane I(1, 2, 3), T(1, 2, 3);
  // pixel 0: +0.3, +0.0, +0.6 -> 0.3; pixel 1: -0.5, +0.2, +0.0 -> clamp 0.
  const double di[2][3] = {{0.3, 0.0, 0.6}, {-0.5, 0.2, 0.0}};
  for (int c = 0; c < 2; ++c)
    for (int ch = 0; ch < 3; ++ch) {
      T.at(0, c, ch) = 0.5;
      I.at(0, c, ch) = 0.5 + di[c][ch];
    }
  const auto res = residual_map(I, T);
  EXPECT_EQ(res.channels(), 1);
  EXPECT_NEAR(res.at(0, 0, 0), 0.3, 1e-15);
  EXPECT_EQ(res.at(0, 1, 0), 0.0);
}

TEST(SelectInstance, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> count(1, 6), zero(0, 3);
  for (int t = 0; t < 100; ++t) {
    auto res = random_image(9, 9, 1, rng);
    for (auto& v : res.data())
      if (zero(rng) == 0) v = 0.0;
    InstanceMaskSet masks;
    const int n = count(rng);
    for (int k = 0; k < n; ++k) masks.push_back(random_mask(9, 9, 0.2, rng));
    const auto got = select_reflection_instance(res, masks);
    const auto want = oracle_select(res, masks);
    ASSERT_EQ(got.found, want.found);
    if (!want.found) continue;
    EXPECT_EQ(got.index, want.index);
    EXPECT_EQ(got.score, want.score);
    EXPECT_EQ(got.mask, want.mask);
  }
}

TEST(SelectInstance, TieGoesToLowestIndex) {
  const ImagePlane res(4, 4, 1, 0.5);
  InstanceMaskSet masks = {disc(4, 4, 0, 0, 1), disc(4, 4, 3, 3, 1)};
  const auto s = select_reflection_instance(res, masks);
  EXPECT_TRUE(s.found);
  EXPECT_EQ(s.index, 0u);
}

TEST(SelectInstance, NoReflection) {
  const ImagePlane res(4, 4, 1, 0.0);
  const auto s = select_reflection_instance(res, {disc(4, 4, 1, 1, 1)});
  EXPECT_FALSE(s.found);
}

TEST(SelectInstance, GatesByResidualSupport) {
  ImagePlane res(1, 3, 1);
  res.at(0, 0, 0) = 0.4;
  BinaryMask m(1, 3, true);
  const auto s = select_reflection_instance(res, {m});
  ASSERT_TRUE(s.found);
  EXPECT_TRUE(s.mask.at(0, 0));
  EXPECT_FALSE(s.mask.at(0, 1));
  EXPECT_FALSE(s.mask.at(0, 2));
  EXPECT_NEAR(s.score, 0.4 / 3, 1e-15);
}

TEST(SelectInstance, Errors) {
  EXPECT_THROW(select_reflection_instance(ImagePlane(3, 3, 1), {}), ArgumentError);
  EXPECT_THROW(select_reflection_instance(ImagePlane(3, 3, 3), {BinaryMask(3, 3)}), ArgumentError);
  EXPECT_THROW(select_reflection_instance(ImagePlane(3, 3, 1), {BinaryMask(3, 4)}), ArgumentError);
}

TEST(ContrastivePoints, InvariantsAndUniformity) {
  const auto M = disc(32, 32, 16, 16, 4);
  const auto ring = dilate(M, kNeighbourRadius);
  std::map<std::pair<int, int>, int> pos_hits;
  std::size_t ring_size = 0;
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) ring_size += ring.at(r, c) && !M.at(r, c);
  std::map<std::pair<int, int>, int> neg_hits;
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) {
    const auto [p, n] = sample_contrastive_points(M, 1000 + k);
    ASSERT_TRUE(M.at(p.row, p.col));
    ASSERT_FALSE(M.at(n.row, n.col));
    ASSERT_TRUE(ring.at(n.row, n.col));
    ++pos_hits[{p.row, p.col}];
    ++neg_hits[{n.row, n.col}];
  }
  // Chi-square against uniform over the support.
  auto chi2 = [&](const std::map<std::pair<int, int>, int>& hits, std::size_t cells) {
    const double e = static_cast<double>(draws) / cells;
    double x = 0;
    for (const auto& [_, h] : hits) x += (h - e) * (h - e) / e;
    x += (cells - hits.size()) * e;
    return x;
  };
  const std::size_t npos = M.count();
  EXPECT_EQ(pos_hits.size(), npos);
  // df = cells - 1; 5 sigma above the mean of chi2(df) is a loose bound.
  EXPECT_LT(chi2(pos_hits, npos), (npos - 1) + 5 * std::sqrt(2.0 * (npos - 1)));
  EXPECT_LT(chi2(neg_hits, ring_size), (ring_size - 1) + 5 * std::sqrt(2.0 * (ring_size - 1)));
}

TEST(ContrastivePoints, Deterministic) {
  const auto M = disc(16, 16, 8, 8, 3);
  EXPECT_EQ(sample_contrastive_points(M, 9), sample_contrastive_points(M, 9));
}

TEST(ContrastivePoints, FarNegativesExcluded) {
  BinaryMask M(1, 40);
  for (int c = 0; c < 3; ++c) M.set(0, c, true);
  for (std::uint64_t k = 0; k < 500; ++k) {
    const auto [p, n] = sample_contrastive_points(M, k);
    EXPECT_LT(p.col, 3);
    EXPECT_GE(n.col, 3);
    EXPECT_LE(n.col, 2 + kNeighbourRadius);
  }
  BinaryMask single(2, 2, true);
  single.set(1, 1, false);
  EXPECT_EQ(sample_contrastive_points(single, 3).second, (PixelCoord{1, 1}));
}

TEST(ContrastivePoints, Errors) {
  EXPECT_THROW(sample_contrastive_points(BinaryMask(4, 4, false), 1), ArgumentError);
  EXPECT_THROW(sample_contrastive_points(BinaryMask(4, 4, true), 1), ArgumentError);
}

TEST(SampleParams, WithinRanges) {
  std::mt19937_64 rng(5);
  SynthesisRanges r;
  for (int i = 0; i < 1000; ++i) {
    const auto p = sample_params(r, rng);
    EXPECT_GE(p.sigma, 0.2);
    EXPECT_LE(p.sigma, 4.0);
    EXPECT_GE(p.beta, 0.4);
    EXPECT_LE(p.beta, 1.0);
  }
}

TEST(Dataset, ZeroSamplesWritesHeaderOnly) {
  const auto d = scratch("zero");
  const auto m = build_dataset(d / "does_not_exist.jsonl", 0, 7, d / "out");
  EXPECT_TRUE(m.records.empty());
  const auto text = slurp(m.path);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
  EXPECT_NE(text.find("\"n\":0"), std::string::npos);
  EXPECT_TRUE(read_dataset_manifest(m.path).records.empty());
}

TEST(Dataset, DeterministicAndInvariant) {
  const auto d = scratch("det");
  toy::SceneOptions so;
  so.height = so.width = 32;
  const auto src = toy::write_corpus(d / "corpus", 5, 11, so);
  const auto a = build_dataset(src, 6, 99, d / "a");
  const auto b = build_dataset(src, 6, 99, d / "b");
  EXPECT_EQ(slurp(a.path), slurp(b.path));
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t k = 0; k < a.records.size(); ++k) {
    EXPECT_EQ(slurp(a.records[k].I), slurp(b.records[k].I));
    EXPECT_EQ(slurp(a.records[k].M_r), slurp(b.records[k].M_r));
  }
  const auto back = read_dataset_manifest(a.path);
  ASSERT_EQ(back.records.size(), a.records.size());
  for (const auto& r : back.records) {
    const auto M = read_mask_png(r.M_r);
    EXPECT_TRUE(M.at(r.p_pos.row, r.p_pos.col)) << r.id;
    EXPECT_FALSE(M.at(r.p_neg.row, r.p_neg.col)) << r.id;
    // I is the clamped blend of the stored T and R within quantisation.
    const auto T = read_png(r.T), R = read_png(r.R), I = read_png(r.I);
    const auto ref = synthesize_blend(T, R, r.params);
    double worst = 0;
    for (std::size_t i = 0; i < I.data().size(); ++i) worst = std::max(worst, std::abs(ref.data()[i] - I.data()[i]));
    EXPECT_LE(worst, 1.0 / 255 + 1e-12) << r.id;
  }
  const auto c = build_dataset(src, 6, 100, d / "c");
  EXPECT_NE(slurp(a.path), slurp(c.path));
}

TEST(Dataset, SmallSourceAndParallel) {
  const auto d = scratch("par");
  toy::SceneOptions so;
  so.height = so.width = 24;
  const auto src = toy::write_corpus(d / "corpus", 5, 12, so);
  const auto two = build_dataset(src, 2, 1, d / "two");
  EXPECT_EQ(two.records.size(), 2u);
  DatasetOptions par;
  par.threads = 3;
  const auto s = build_dataset(src, 7, 5, d / "serial");
  const auto p = build_dataset(src, 7, 5, d / "parallel", par);
  EXPECT_EQ(slurp(s.path), slurp(p.path));
}

TEST(Dataset, Errors) {
  const auto d = scratch("err");
  EXPECT_THROW(build_dataset(d / "x.jsonl", -1, 0, d / "o"), ArgumentError);
  EXPECT_THROW(build_dataset(d / "x.jsonl", 1, 0, d / "o"), DataError);
  std::ofstream(d / "bad.jsonl") << "{\"image\": \"a.png\"}\n";
  EXPECT_THROW(read_source_manifest(d / "bad.jsonl"), DataError);
}
