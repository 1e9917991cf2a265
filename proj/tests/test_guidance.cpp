#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "firm/errors.hpp"
#include "firm/guidance.hpp"
#include "firm/sarm.hpp"
#include "fixtures.hpp"

using namespace firm;
using firm::testing::DiscSegmenter;
using firm::testing::FixedTextSegmenter;
using firm::testing::random_image;
using firm::testing::random_mask;

namespace fs = std::filesystem;

namespace {

Guidance point(int r, int c, Polarity p) { return {p, PixelCoord{r, c}, nlohmann::json::object()}; }

SegmenterRegistry disc_registry(bool with_text = false) {
  SegmenterRegistry reg;
  reg.visual = std::make_shared<DiscSegmenter>();
  if (with_text) reg.text = std::make_shared<FixedTextSegmenter>();
  return reg;
}

// Arc-length walk: position at distance s along the polyline.
std::pair<double, double> along(const std::vector<PixelCoord>& pl, double s) {
  for (std::size_t i = 1; i < pl.size(); ++i) {
    const double dr = pl[i].row - pl[i - 1].row, dc = pl[i].col - pl[i - 1].col;
    const double len = std::sqrt(dr * dr + dc * dc);
    if (s <= len || i + 1 == pl.size()) {
      const double t = len > 0 ? std::min(1.0, s / len) : 0.0;
      return {pl[i - 1].row + t * dr, pl[i - 1].col + t * dc};
    }
    s -= len;
  }
  return {pl.back().row, pl.back().col};
}

double polyline_length(const std::vector<PixelCoord>& pl) {
  double L = 0;
  for (std::size_t i = 1; i < pl.size(); ++i) L += std::hypot(pl[i].row - pl[i - 1].row, pl[i].col - pl[i - 1].col);
  return L;
}

bool value_set_ok(const ContrastiveMask& m) {
  const auto p = m.to_plane();
  for (double v : p.data())
    if (v != 0.0 && v != 0.5 && v != 1.0) return false;
  return true;
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("firm_test_guidance_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Stroke, TwoSamplesAreEndpoints) {
  const std::vector<PixelCoord> pl = {{1, 2}, {7, 3}, {4, 9}};
  const auto pts = stroke_to_points(pl, 2);
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(pts[0], (PixelCoord{1, 2}));
  EXPECT_EQ(pts[1], (PixelCoord{4, 9}));
}

TEST(Stroke, StraightSegmentThirds) {
  const auto pts = stroke_to_points({{0, 0}, {0, 10}}, 3);
  ASSERT_EQ(pts.size(), 3u);
  EXPECT_EQ(pts[0], (PixelCoord{0, 0}));
  EXPECT_EQ(pts[1], (PixelCoord{0, 5}));
  EXPECT_EQ(pts[2], (PixelCoord{0, 10}));
}

TEST(Stroke, LShapeUnitSpacing) {
  const std::vector<PixelCoord> pl = {{0, 0}, {0, 4}, {3, 4}};
  const auto pts = stroke_to_points(pl, 8);
  ASSERT_EQ(pts.size(), 8u);
  const double L = polyline_length(pl);
  EXPECT_DOUBLE_EQ(L, 7.0);
  for (int k = 0; k < 8; ++k) {
    const auto [r, c] = along(pl, L * k / 7);
    EXPECT_EQ(pts[k], (PixelCoord{static_cast<int>(std::lround(r)), static_cast<int>(std::lround(c))})) << k;
  }
  for (int k = 1; k < 8; ++k)
    EXPECT_NEAR(std::hypot(pts[k].row - pts[k - 1].row, pts[k].col - pts[k - 1].col), L / 7, 1e-12);
}

TEST(Stroke, RandomPolylinesMatchArcLengthReference) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> coord(0, 40), nv(2, 6), ns(2, 16);
  for (int t = 0; t < 200; ++t) {
    std::vector<PixelCoord> pl(static_cast<std::size_t>(nv(rng)));
    for (auto& p : pl) p = {coord(rng), coord(rng)};
    const int n = ns(rng);
    const auto pts = stroke_to_points(pl, n);
    ASSERT_EQ(static_cast<int>(pts.size()), n);
    EXPECT_EQ(pts.front(), pl.front());
    EXPECT_EQ(pts.back(), pl.back());
    const double L = polyline_length(pl);
    for (int k = 0; k < n; ++k) {
      const auto [r, c] = along(pl, L * k / (n - 1));
      // Rounding moves each sample by at most half a pixel per axis.
      EXPECT_LE(std::abs(pts[k].row - r), 0.5 + 1e-9);
      EXPECT_LE(std::abs(pts[k].col - c), 0.5 + 1e-9);
    }
  }
}

TEST(Stroke, Errors) {
  EXPECT_THROW(stroke_to_points({{0, 0}, {1, 1}}, 1), ArgumentError);
  EXPECT_THROW(stroke_to_points({{0, 0}}, 4), ArgumentError);
}

TEST(Assemble, Precedence) {
  BinaryMask refl(2, 3), trans(2, 3);
  refl.set(0, 0, true);
  refl.set(0, 1, true);
  trans.set(0, 1, true);
  trans.set(1, 2, true);
  const auto m = assemble_contrastive_mask(refl, trans);
  EXPECT_EQ(m.value(0, 0), 1.0);
  EXPECT_EQ(m.value(0, 1), 1.0);
  EXPECT_EQ(m.value(1, 2), 0.5);
  EXPECT_EQ(m.value(1, 0), 0.0);
  const auto one_sided = assemble_contrastive_mask(refl, BinaryMask(2, 3));
  EXPECT_EQ(one_sided.area(ContrastiveMask::transmission), 0u);
  EXPECT_EQ(one_sided.area(ContrastiveMask::reflection), 2u);
  EXPECT_THROW(assemble_contrastive_mask(refl, BinaryMask(3, 2)), ArgumentError);
}

TEST(Assemble, IdempotentOnOwnDecomposition) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    const auto m = assemble_contrastive_mask(random_mask(7, 9, 0.3, rng), random_mask(7, 9, 0.4, rng));
    EXPECT_EQ(assemble_contrastive_mask(m.reflection_mask(), m.transmission_mask()), m);
  }
}

TEST(ContrastiveMaskCodec, GrayLevelsAndPlane) {
  ContrastiveMask m(1, 3);
  m.set(0, 1, ContrastiveMask::transmission);
  m.set(0, 2, ContrastiveMask::reflection);
  EXPECT_EQ(m.gray_levels(), (std::vector<std::uint8_t>{0, 128, 255}));
  EXPECT_EQ(ContrastiveMask::from_gray_levels(1, 3, m.gray_levels()), m);
  EXPECT_EQ(ContrastiveMask::from_plane(m.to_plane()), m);
  EXPECT_THROW(ContrastiveMask::from_gray_levels(1, 3, {0, 64, 255}), DataError);
  EXPECT_THROW(ContrastiveMask::from_plane(ImagePlane(1, 1, 1, 0.25)), ArgumentError);
}

TEST(Convert, EmptyGuidanceIsAllZero) {
  const auto m = convert(ImagePlane(8, 6, 3), {}, disc_registry());
  EXPECT_EQ(m.area(ContrastiveMask::none), 48u);
}

TEST(Convert, TextNeedsAdapter) {
  const std::vector<Guidance> g = {{Polarity::reflection, TextQuery{"the window glare"}, nlohmann::json::object()}};
  try {
    convert(ImagePlane(8, 8, 3), g, disc_registry());
    FAIL() << "expected UnsupportedGuidance";
  } catch (const UnsupportedGuidance& e) {
    EXPECT_EQ(e.kind(), "text");
  }
  const auto m = convert(ImagePlane(8, 8, 3), g, disc_registry(true));
  EXPECT_EQ(m.level(0, 0), ContrastiveMask::reflection);
  EXPECT_EQ(m.area(ContrastiveMask::reflection), 1u);
}

TEST(Convert, OutOfBoundsAndMalformed) {
  const ImagePlane img(8, 8, 3);
  EXPECT_THROW(convert(img, {point(8, 0, Polarity::reflection)}, disc_registry()), ArgumentError);
  EXPECT_THROW(convert(img, {{Polarity::reflection, Box{3, 3, 2, 5}, nlohmann::json::object()}}, disc_registry()), ArgumentError);
  EXPECT_THROW(convert(img, {{Polarity::reflection, Stroke{{{0, 0}}}, nlohmann::json::object()}}, disc_registry()), ArgumentError);
  EXPECT_THROW(convert(img, {{Polarity::reflection, TextQuery{""}, nlohmann::json::object()}}, disc_registry(true)), ArgumentError);
}

TEST(Convert, PromptPixelsLandInTheirOwnRegion) {
  const ImagePlane img(16, 16, 3, 0.5);
  const auto m = convert(img, {point(4, 4, Polarity::reflection), point(11, 11, Polarity::transmission)}, disc_registry());
  EXPECT_EQ(m.level(4, 4), ContrastiveMask::reflection);
  EXPECT_EQ(m.level(11, 11), ContrastiveMask::transmission);
  // Disc segmenter radius 3 around each point.
  EXPECT_EQ(m.area(ContrastiveMask::reflection), 29u);
  EXPECT_EQ(m.area(ContrastiveMask::transmission), 29u);
  EXPECT_TRUE(value_set_ok(m));
}

TEST(Convert, ToySarmValueSetAndPins) {
  auto model = std::make_shared<sarm::SarmModel>(firm::testing::tiny_sarm_config(), 3);
  SegmenterRegistry reg;
  reg.visual = std::make_shared<sarm::SarmSegmenter>(model);
  std::mt19937_64 rng(3);
  const auto img = random_image(16, 16, 3, rng);
  const auto m = convert(img, {point(3, 5, Polarity::reflection), point(12, 9, Polarity::transmission)}, reg);
  EXPECT_TRUE(value_set_ok(m));
  EXPECT_EQ(m.level(3, 5), ContrastiveMask::reflection);
  EXPECT_EQ(m.level(12, 9), ContrastiveMask::transmission);
}

TEST(Convert, RandomisedValueSet) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> coord(0, 19), count(0, 5), kind(0, 2), pol(0, 1);
  const auto reg = disc_registry();
  const ImagePlane img(20, 20, 3, 0.3);
  for (int t = 0; t < 200; ++t) {
    std::vector<Guidance> g;
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
      const Polarity p = pol(rng) ? Polarity::reflection : Polarity::transmission;
      switch (kind(rng)) {
        case 0: g.push_back(point(coord(rng), coord(rng), p)); break;
        case 1: {
          int r0 = coord(rng), r1 = coord(rng), c0 = coord(rng), c1 = coord(rng);
          g.push_back({p, Box{std::min(r0, r1), std::min(c0, c1), std::max(r0, r1), std::max(c0, c1)}, nlohmann::json::object()});
          break;
        }
        default: g.push_back({p, Stroke{{{coord(rng), coord(rng)}, {coord(rng), coord(rng)}, {coord(rng), coord(rng)}}}, nlohmann::json::object()});
      }
    }
    ConvertOptions opts;
    opts.parallel = t % 2 == 1;
    const auto m = convert(img, g, reg, opts);
    ASSERT_TRUE(value_set_ok(m));
    opts.parallel = !opts.parallel;
    EXPECT_EQ(convert(img, g, reg, opts), m);
  }
}

TEST(Annotations, RoundTripAllKinds) {
  const auto d = scratch("rt");
  std::vector<AnnotationRecord> recs(3);
  recs[0].image_id = "img_a";
  recs[0].guidance = {point(1, 2, Polarity::reflection),
                      {Polarity::transmission, Box{0, 1, 4, 5}, nlohmann::json::object()},
                      {Polarity::reflection, Stroke{{{0, 0}, {3, 4}, {6, 0}}}, {{"width", 3}}},
                      {Polarity::transmission, TextQuery{"the lamp"}, nlohmann::json::object()}};
  recs[0].gt_mask = "gt/a.png";
  recs[0].extra = {{"annotator", "kb"}, {"tags", {1, 2}}};
  recs[1].image_id = "img_b";
  recs[2].image_id = "img_c";
  recs[2].guidance = {point(0, 0, Polarity::transmission)};
  write_annotations(recs, d / "ann.json");
  EXPECT_EQ(read_annotations(d / "ann.json"), recs);

  write_annotations({}, d / "empty.json");
  EXPECT_TRUE(read_annotations(d / "empty.json").empty());
  std::ifstream is(d / "empty.json");
  std::string text((std::istreambuf_iterator<char>(is)), {});
  EXPECT_EQ(nlohmann::json::parse(text), nlohmann::json::array());
}

TEST(Annotations, MalformedReportsLine) {
  const auto d = scratch("bad");
  std::ofstream(d / "bad.json") << "[\n  {\"image\": \"a\",\n   \"guidance\": [}\n]\n";
  try {
    read_annotations(d / "bad.json");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.json:3:"), std::string::npos) << e.what();
  }
  std::ofstream(d / "kind.json") << R"([{"image": "a", "guidance": [{"kind": "lasso", "polarity": "reflection"}]}])";
  EXPECT_THROW(read_annotations(d / "kind.json"), DataError);
}

TEST(GuidanceJson, UnknownFieldsPreserved) {
  const auto j = nlohmann::json::parse(R"({"kind":"point","polarity":"reflection","point":[3,4],"ui":{"color":"red"}})");
  const auto g = guidance_from_json(j);
  EXPECT_EQ(g.kind(), GuidanceKind::point);
  EXPECT_EQ(std::get<PixelCoord>(g.payload), (PixelCoord{3, 4}));
  EXPECT_EQ(guidance_to_json(g), j);
}
