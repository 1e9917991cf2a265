#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "firm/errors.hpp"
#include "firm/nn/ops.hpp"
#include "firm/removal.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace firm;
using namespace firm::removal;
using firm::testing::gradcheck;
using firm::testing::naive_cca;
using firm::testing::random_image;
using firm::testing::random_tensor;
using firm::testing::tiny_removal_config;

namespace ops = firm::nn;

namespace {

double max_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Exclusion reference on plain arrays [C][H][W].
struct Field {
  int C, H, W;
  std::vector<double> v;
  double at(int c, int r, int q) const { return v[(static_cast<std::size_t>(c) * H + r) * W + q]; }
};

Field field_of(const nn::Tensor& t) { return {t.dim(0), t.dim(1), t.dim(2), {t.value().begin(), t.value().end()}}; }

Field pool(const Field& f) {
  Field o{f.C, f.H / 2, f.W / 2, {}};
  o.v.resize(static_cast<std::size_t>(o.C) * o.H * o.W);
  for (int c = 0; c < o.C; ++c)
    for (int r = 0; r < o.H; ++r)
      for (int q = 0; q < o.W; ++q)
        o.v[(static_cast<std::size_t>(c) * o.H + r) * o.W + q] =
            0.25 * (f.at(c, 2 * r, 2 * q) + f.at(c, 2 * r + 1, 2 * q) + f.at(c, 2 * r, 2 * q + 1) + f.at(c, 2 * r + 1, 2 * q + 1));
  return o;
}

std::vector<double> grad_field(const Field& f, bool x) {
  std::vector<double> g(f.v.size(), 0.0);
  for (int c = 0; c < f.C; ++c)
    for (int r = 0; r < f.H; ++r)
      for (int q = 0; q < f.W; ++q) {
        double d = 0;
        if (x && q + 1 < f.W) d = f.at(c, r, q + 1) - f.at(c, r, q);
        if (!x && r + 1 < f.H) d = f.at(c, r + 1, q) - f.at(c, r, q);
        g[(static_cast<std::size_t>(c) * f.H + r) * f.W + q] = d;
      }
  return g;
}

std::vector<double> ntanh(const std::vector<double>& g) {
  double m = 0;
  for (double v : g) m += std::abs(v);
  m /= g.size();
  std::vector<double> o(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) o[i] = std::tanh(std::abs(g[i]) / (m + 1e-6));
  return o;
}

double exclusion_ref(Field t, Field r, int scales) {
  double total = 0;
  for (int s = 0; s < scales; ++s) {
    if (s > 0) {
      t = pool(t);
      r = pool(r);
    }
    double term = 0;
    for (bool x : {true, false}) {
      const auto a = ntanh(grad_field(t, x)), b = ntanh(grad_field(r, x));
      double m = 0;
      for (std::size_t i = 0; i < a.size(); ++i) m += a[i] * b[i];
      term += 0.5 * m / a.size();
    }
    total += term;
  }
  return total;
}

nn::Tensor checkerboard(int c, int h, int w) {
  std::vector<double> v(static_cast<std::size_t>(c) * h * w);
  for (int ch = 0; ch < c; ++ch)
    for (int r = 0; r < h; ++r)
      for (int q = 0; q < w; ++q) v[(static_cast<std::size_t>(ch) * h + r) * w + q] = (r + q) % 2 ? 0.8 : 0.2;
  return nn::Tensor({c, h, w}, v);
}

std::vector<TrainPair> toy_pairs(int n, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TrainPair> out;
  for (int k = 0; k < n; ++k) {
    TrainPair p;
    p.id = "pair" + std::to_string(k);
    p.T = random_image(size, size, 3, rng, 0.1, 0.5);
    p.R = random_image(size, size, 3, rng, 0.0, 0.3);
    p.I = p.T;
    for (std::size_t i = 0; i < p.I.data().size(); ++i) p.I.data()[i] = std::min(1.0, p.T.data()[i] + p.R.data()[i]);
    p.guide = ImagePlane(size, size, 1);
    for (int r = 0; r < size / 2; ++r)
      for (int c = 0; c < size; ++c) p.guide.at(r, c, 0) = 1.0;
    p.guide.at(size - 1, size - 1, 0) = 0.5;
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

TEST(RemovalConfig, ValidationAndJson) {
  auto c = tiny_removal_config();
  c.validate();
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));
  c.channels = 3;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = tiny_removal_config();
  c.lr_min = 1.0;
  EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(NafBlock, IdentityWhenBranchesZeroed) {
  std::mt19937_64 rng(1);
  nn::ParamStore s;
  add_naf_params(s, "n", 4, rng);
  for (const char* name : {"n.conv3.w", "n.conv3.b", "n.conv5.w", "n.conv5.b"})
  {
    nn::Tensor t = s.get(name);
    for (double& v : t.mutable_value()) v = 0.0;
  }
  const auto x = random_tensor({4, 5, 5}, rng);
  const auto y = naf_block(x, s, "n");
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(max_diff(x.value(), y.value()), 0.0);
}

TEST(NafBlock, ShapeAndGradcheck) {
  std::mt19937_64 rng(2);
  nn::ParamStore big;
  add_naf_params(big, "b", 32, rng);
  EXPECT_EQ(naf_block(random_tensor({32, 16, 16}, rng), big, "b").shape(), (nn::Shape{32, 16, 16}));

  nn::ParamStore s;
  add_naf_params(s, "n", 4, rng);
  auto x = random_tensor({4, 3, 3}, rng);
  const auto w = random_tensor({4, 3, 3}, rng);
  std::vector<std::pair<std::string, nn::Tensor>> leaves = {{"x", x}};
  for (const auto& p : s.params()) leaves.push_back({p.name, p.tensor});
  const auto r = gradcheck(leaves, [&] { return ops::sum(ops::mul(naf_block(x, s, "n"), w)); });
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
  EXPECT_FALSE(r.all_zero);
}

TEST(CgibQuery, Fixtures) {
  std::mt19937_64 rng(3);
  const auto f = random_tensor({2, 4, 4}, rng);
  const auto ones = cgib_query(f, ImagePlane(4, 4, 1, 1.0), 2, 2);
  const auto resized = ops::resize_bilinear(f, 2, 2);
  EXPECT_LT(max_diff(ones.value(), resized.value()), 1e-15);
  const auto zero = cgib_query(f, ImagePlane(8, 8, 1, 0.0), 2, 2);
  for (double v : zero.value()) EXPECT_EQ(v, 0.0);

  // Half mask, composed from the image-domain primitives.
  ImagePlane half(4, 4, 1);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 4; ++c) half.at(r, c, 0) = 1.0;
  const auto q = cgib_query(f, half, 2, 2);
  EXPECT_EQ(q.shape(), (nn::Shape{2, 4}));
  for (int ch = 0; ch < 2; ++ch) {
    ImagePlane masked(4, 4, 1);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) masked.at(r, c, 0) = f.value()[(ch * 4 + r) * 4 + c] * half.at(r, c, 0);
    const auto ref = resize_bilinear(masked, 2, 2);
    EXPECT_LT(max_diff(q.value().subspan(ch * 4, 4), ref.data()), 1e-15);
  }
  // Mask given at a different resolution is resampled first.
  const auto up = resize_bilinear(half, 8, 8);
  EXPECT_LT(max_diff(cgib_query(f, up, 2, 2).value(), cgib_query(f, resize_bilinear(up, 4, 4), 2, 2).value()), 1e-15);
}

TEST(Cca, MatchesNaiveOracle) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> dc(1, 5), dn(1, 6), dhw(1, 9);
  std::uniform_real_distribution<double> la(-2, 2);
  for (int t = 0; t < 50; ++t) {
    const int c = t == 0 ? 3 : dc(rng), n = t == 0 ? 2 : dn(rng), hw = t == 0 ? 4 : dhw(rng);
    const auto q = random_tensor({c, n}, rng, -2, 2), k = random_tensor({c, n}, rng, -2, 2), v = random_tensor({hw, c}, rng);
    const double a = la(rng);
    const auto out = cca(q, k, v, nn::Tensor({1}, {a}));
    EXPECT_LT(max_diff(out.value(), naive_cca(q, k, v, std::exp(a))), 1e-9);
  }
}

TEST(Cca, Limits) {
  std::mt19937_64 rng(5);
  const auto v1 = random_tensor({6, 1}, rng);
  const auto single = cca(random_tensor({1, 3}, rng), random_tensor({1, 3}, rng), v1, nn::Tensor({1}, {0.3}));
  EXPECT_EQ(max_diff(single.value(), v1.value()), 0.0);

  const int c = 4, hw = 5;
  const auto v = random_tensor({hw, c}, rng);
  const auto u = cca(random_tensor({c, 3}, rng), random_tensor({c, 3}, rng), v, nn::Tensor({1}, {std::log(1e9)}));
  for (int p = 0; p < hw; ++p) {
    double m = 0;
    for (int j = 0; j < c; ++j) m += v.value()[p * c + j];
    m /= c;
    for (int i = 0; i < c; ++i) EXPECT_NEAR(u.value()[p * c + i], m, 1e-6);
  }
  EXPECT_THROW(cca(random_tensor({2, 3}, rng), random_tensor({2, 4}, rng), v, nn::Tensor({1}, {0.0})), ArgumentError);
}

TEST(Cca, AttentionRowsSumToOne) {
  // With V = identity rows the output is A^T itself.
  std::mt19937_64 rng(6);
  const int c = 5;
  std::vector<double> eye(c * c, 0.0);
  for (int i = 0; i < c; ++i) eye[i * c + i] = 1.0;
  for (double log_alpha : {-3.0, 0.0, 2.0, 10.0}) {
    const auto out = cca(random_tensor({c, 4}, rng, -5, 5), random_tensor({c, 4}, rng, -5, 5), nn::Tensor({c, c}, eye),
                         nn::Tensor({1}, {log_alpha}));
    for (int i = 0; i < c; ++i) {
      double s = 0;
      for (int p = 0; p < c; ++p) s += out.value()[p * c + i];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Cgib, ShapeMaskSensitivityGradcheck) {
  std::mt19937_64 rng(7);
  nn::ParamStore big;
  add_cgib_params(big, "g", 32, 1.0, rng);
  const auto f32 = random_tensor({32, 8, 8}, rng);
  ImagePlane m1(8, 8, 1), m2(8, 8, 1);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 8; ++c) m1.at(r, c, 0) = 1.0;
  m2.at(7, 7, 0) = 0.5;
  const auto a = cgib_forward(f32, m1, big, "g", 4, 4);
  EXPECT_EQ(a.shape(), f32.shape());
  EXPECT_GT(max_diff(a.value(), cgib_forward(f32, m2, big, "g", 4, 4).value()), 1e-9);
  EXPECT_EQ(big.get("g.log_alpha").value()[0], 0.0);

  nn::ParamStore s;
  add_cgib_params(s, "g", 4, 1.0, rng);
  auto f = random_tensor({4, 4, 4}, rng);
  auto log_alpha = s.get("g.log_alpha");
  const auto w = random_tensor({4, 4, 4}, rng);
  ImagePlane m(4, 4, 1);
  m.at(0, 0, 0) = 1.0;
  m.at(1, 2, 0) = 1.0;
  m.at(3, 3, 0) = 0.5;
  const auto r = gradcheck({{"features", f}, {"log_alpha", log_alpha}},
                           [&] { return ops::sum(ops::mul(cgib_forward(f, m, s, "g", 2, 2), w)); });
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
  EXPECT_FALSE(r.all_zero);
}

TEST(Exclusion, Fixtures) {
  std::mt19937_64 rng(8);
  const auto t = random_tensor({3, 8, 8}, rng, 0, 1);
  EXPECT_EQ(exclusion_loss(t, nn::Tensor::full({3, 8, 8}, 0.3)).item(), 0.0);
  const auto cb = checkerboard(3, 8, 8);
  const double same = exclusion_loss(cb, cb).item();
  EXPECT_GT(same, 0.0);
  // Same total absolute gradient as the checkerboard, spread randomly.
  EXPECT_GT(same, exclusion_loss(cb, t).item());
  EXPECT_GT(same, exclusion_loss(t, cb).item());
  EXPECT_THROW(exclusion_loss(cb, checkerboard(3, 8, 4)), ArgumentError);
}

TEST(Exclusion, StepwiseOracle) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 5; ++t) {
    const auto a = random_tensor({3, 8, 8}, rng, 0, 1), b = random_tensor({3, 8, 8}, rng, 0, 1);
    EXPECT_NEAR(exclusion_loss(a, b, 2).item(), exclusion_ref(field_of(a), field_of(b), 2), 1e-12);
    EXPECT_NEAR(exclusion_loss(a, b, 3).item(), exclusion_ref(field_of(a), field_of(b), 3), 1e-12);
  }
}

TEST(Exclusion, Gradcheck) {
  std::mt19937_64 rng(10);
  auto a = random_tensor({3, 8, 8}, rng, 0, 1), b = random_tensor({3, 8, 8}, rng, 0, 1);
  const auto r = gradcheck({{"t_hat", a}, {"r_hat", b}}, [&] { return exclusion_loss(a, b, 3); });
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
  EXPECT_FALSE(r.all_zero);
}

TEST(ReconstructionLosses, Fixtures) {
  std::mt19937_64 rng(11);
  RandomConvExtractor ex;
  const auto cfg = tiny_removal_config();
  const auto T = random_tensor({3, 8, 8}, rng, 0.1, 0.8);
  const auto R = nn::Tensor::full({3, 8, 8}, 0.2);
  const auto perfect = reconstruction_losses(T, R, T, R, ex, cfg).values();
  EXPECT_EQ(perfect.pixel, 0.0);
  EXPECT_EQ(perfect.gradient, 0.0);
  EXPECT_EQ(perfect.perceptual, 0.0);
  EXPECT_EQ(perfect.exclusion, 0.0);
  EXPECT_EQ(perfect.total, 0.0);

  const auto shifted = ops::add_scalar(T, 0.1);
  const auto l = reconstruction_losses(shifted, R, T, R, ex, cfg).values();
  EXPECT_NEAR(l.pixel, 0.1, 1e-12);
  EXPECT_NEAR(l.gradient, 0.0, 1e-12);
  EXPECT_GT(l.perceptual, 0.0);
  EXPECT_NEAR(l.total, cfg.w_pix * l.pixel + cfg.w_grad * l.gradient + cfg.w_perc * l.perceptual + cfg.w_excl * l.exclusion,
              1e-12);
}

TEST(ReconstructionLosses, Gradcheck) {
  std::mt19937_64 rng(12);
  RandomConvExtractor ex;
  const auto cfg = tiny_removal_config();
  auto th = random_tensor({3, 8, 8}, rng, 0, 1), rh = random_tensor({3, 8, 8}, rng, 0, 1);
  const auto T = random_tensor({3, 8, 8}, rng, 0, 1), R = random_tensor({3, 8, 8}, rng, 0, 1);
  const auto terms = {&LossTerms::pixel, &LossTerms::gradient, &LossTerms::perceptual, &LossTerms::exclusion,
                      &LossTerms::total};
  for (auto member : terms) {
    const auto r = gradcheck({{"t_hat", th}, {"r_hat", rh}},
                             [&] { return reconstruction_losses(th, rh, T, R, ex, cfg).*member; });
    EXPECT_LT(r.max_rel, 1e-4) << r.worst;
    EXPECT_FALSE(r.all_zero);
  }
}

TEST(CosineLr, Endpoints) {
  RemovalConfig cfg;
  EXPECT_EQ(cosine_lr(cfg, 0, 2000), 1e-3);
  EXPECT_EQ(cosine_lr(cfg, 2000, 2000), 1e-6);
  EXPECT_NEAR(cosine_lr(cfg, 1000, 2000), 1e-6 + 0.5 * (1e-3 - 1e-6), 1e-18);
  EXPECT_NEAR(cosine_lr(cfg, 500, 2000), 1e-6 + 0.5 * (1e-3 - 1e-6) * (1 + std::cos(std::acos(-1.0) / 4)), 1e-18);
  double prev = 1.0;
  for (int i = 0; i <= 2000; i += 50) {
    const double lr = cosine_lr(cfg, i, 2000);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(RemovalModel, ShapesAndBlendedOnly) {
  const auto cfg = tiny_removal_config();
  RemovalModel m(cfg, 1);
  std::mt19937_64 rng(13);
  const auto img = random_image(64, 64, 3, rng);
  ImagePlane guide(64, 64, 1, 0.5);
  nn::NoGradGuard g;
  const auto out = m.forward(img, guide);
  EXPECT_EQ(out.t_hat.shape(), (nn::Shape{3, 64, 64}));
  EXPECT_EQ(out.r_hat.shape(), (nn::Shape{3, 64, 64}));
  RemovalModel bo(ablation_config(cfg, "blended_only"), 1);
  EXPECT_FALSE(bo.config().use_cgib);
  EXPECT_EQ(bo.config().mask_input, MaskInput::none);
  const auto a = bo.forward(img, guide), b = bo.forward(img, ImagePlane(64, 64, 1));
  EXPECT_EQ(max_diff(a.t_hat.value(), b.t_hat.value()), 0.0);
  // Remove pads odd sizes and crops back.
  const auto r = m.remove(random_image(13, 9, 3, rng), ImagePlane(13, 9, 1));
  EXPECT_EQ(r.T.height(), 13);
  EXPECT_EQ(r.R.width(), 9);
  EXPECT_THROW(m.forward(random_image(13, 9, 3, rng), ImagePlane(13, 9, 1)), ArgumentError);
  EXPECT_THROW(m.forward(img, ImagePlane(32, 32, 1)), ArgumentError);
}

TEST(RemovalModel, MaskReachesOutput) {
  RemovalModel m(tiny_removal_config(), 2);
  std::mt19937_64 rng(14);
  const auto img = random_image(16, 16, 3, rng);
  nn::NoGradGuard g;
  const auto a = m.forward(img, ImagePlane(16, 16, 1, 0.0));
  const auto b = m.forward(img, ImagePlane(16, 16, 1, 1.0));
  EXPECT_GT(max_diff(a.t_hat.value(), b.t_hat.value()), 0.0);
}

TEST(RemovalModel, GradientReachesEveryParameter) {
  RemovalModel m(tiny_removal_config(), 3);
  RandomConvExtractor ex;
  const auto pair = toy_pairs(1, 16, 15).front();
  m.params().zero_grad();
  const auto out = m.forward(pair.I, pair.guide);
  reconstruction_losses(out.t_hat, out.r_hat, image_tensor(pair.T), image_tensor(pair.R), ex, m.config()).total.backward();
  for (const auto& p : m.params().params()) {
    ASSERT_FALSE(p.frozen);
    double n = 0;
    for (double g : p.tensor.grad()) n += g * g;
    EXPECT_GT(n, 0.0) << p.name;
  }
}

TEST(RemovalTraining, DeterministicLossCurve) {
  const auto pairs = toy_pairs(2, 16, 16);
  auto curve = [&] {
    RemovalModel m(tiny_removal_config(), 4);
    RemovalTrainer tr(m, nullptr);
    std::vector<double> out;
    for (int i = 0; i < 5; ++i) out.push_back(tr.step(pairs, i, 5).total);
    return out;
  };
  const auto a = curve(), b = curve();
  EXPECT_EQ(a, b);
}

TEST(RemovalTraining, AllAblationsTrain50Steps) {
  const auto pairs = toy_pairs(2, 16, 17);
  for (const auto& name : ablation_names()) {
    const auto cfg = ablation_config(tiny_removal_config(), name);
    RemovalModel m(cfg, 5);
    RemovalTrainer tr(m, nullptr);
    double first = 0, last = 0;
    for (int i = 0; i < 50; ++i) {
      const double l = tr.step(pairs, i, 50).total;
      ASSERT_TRUE(std::isfinite(l)) << name;
      if (i == 0) first = l;
      last = l;
    }
    EXPECT_LT(last, first) << name;
  }
  EXPECT_EQ(ablation_label("blended_only"), "Blended Only");
  EXPECT_THROW(ablation_config(tiny_removal_config(), "nope"), ArgumentError);
  const auto rm = ablation_config(tiny_removal_config(), "reflection_mask");
  EXPECT_TRUE(rm.cgib_reflection_only);
}

TEST(RemovalTraining, NonFiniteLossNamesBatch) {
  auto pairs = toy_pairs(2, 16, 18);
  pairs[1].I.at(3, 3, 0) = std::nan("");
  RemovalModel m(tiny_removal_config(), 6);
  RemovalTrainer tr(m, nullptr);
  try {
    tr.step(pairs, 7, 10);
    FAIL() << "expected InvariantViolation";
  } catch (const InvariantViolation& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("pair0"), std::string::npos) << what;
    EXPECT_NE(what.find("pair1"), std::string::npos) << what;
  }
  EXPECT_THROW(tr.step({}, 0, 1), ArgumentError);
}

TEST(RawPointMask, Discs) {
  const auto m = raw_point_mask(9, 9, {2, 2}, {6, 6}, 2);
  EXPECT_EQ(m.at(2, 2, 0), 1.0);
  EXPECT_EQ(m.at(6, 6, 0), 0.5);
  EXPECT_EQ(m.at(0, 8, 0), 0.0);
  int ones = 0;
  for (double v : m.data()) ones += v == 1.0;
  EXPECT_EQ(ones, 13);
}

TEST(RemovalModel, CheckpointRoundTrip) {
  RemovalModel m(tiny_removal_config(), 7);
  const auto path = (std::filesystem::temp_directory_path() / "firm_test_removal.ckpt").string();
  m.save(path);
  const auto back = RemovalModel::load(path);
  EXPECT_EQ(config_to_json(back->config()), config_to_json(m.config()));
  EXPECT_EQ(back->params().flatten(false), m.params().flatten(false));
  std::mt19937_64 rng(19);
  const auto img = random_image(8, 8, 3, rng);
  EXPECT_EQ(back->remove(img, ImagePlane(8, 8, 1)).T, m.remove(img, ImagePlane(8, 8, 1)).T);
}
