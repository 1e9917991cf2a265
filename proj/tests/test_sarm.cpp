#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "firm/errors.hpp"
#include "firm/nn/ops.hpp"
#include "firm/sarm.hpp"
#include "firm/toy_scenes.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace firm;
using namespace firm::sarm;
using firm::testing::disc;
using firm::testing::gradcheck;
using firm::testing::random_image;
using firm::testing::random_tensor;
using firm::testing::tiny_sarm_config;

namespace ops = firm::nn;

namespace {

PromptSet two_points(PixelCoord pos, PixelCoord neg) {
  PromptSet p;
  p.points = {{pos, true}, {neg, false}};
  return p;
}

std::vector<SarmSample> toy_samples(int n, std::uint64_t seed) {
  auto set = firm::testing::disc_reflection_set(n, 16, seed);
  return set.samples;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double norm_diff(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST(SarmConfig, Validation) {
  auto c = tiny_sarm_config();
  c.reduction = 3;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = tiny_sarm_config();
  c.token_dim = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
  const auto j = config_to_json(tiny_sarm_config());
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
}

TEST(SarmEncoder, ShapeDeterminismSensitivity) {
  SarmModel m(tiny_sarm_config(), 1);
  std::mt19937_64 rng(1);
  auto img = random_image(16, 16, 3, rng);
  ops::NoGradGuard g;
  const auto f = m.encode_image(img);
  EXPECT_EQ(f.shape(), (nn::Shape{8, 2, 2}));
  const auto f2 = m.encode_image(img);
  EXPECT_TRUE(std::equal(f.value().begin(), f.value().end(), f2.value().begin()));
  img.at(5, 7, 1) += 1e-3;
  EXPECT_GT(norm_diff(f.value(), m.encode_image(img).value()), 0.0);
  EXPECT_THROW(m.encode_image(ImagePlane(12, 16, 3)), ArgumentError);
  EXPECT_THROW(m.encode_image(ImagePlane(16, 16, 1)), ArgumentError);
  SarmModel big(SarmConfig{}, 1);
  EXPECT_EQ(big.encode_image(ImagePlane(64, 64, 3, 0.3)).shape(), (nn::Shape{32, 8, 8}));
}

TEST(SarmPrompts, Encoding) {
  SarmModel m(tiny_sarm_config(), 2);
  PromptSet pos, neg, box;
  pos.points = {{{3, 4}, true}};
  neg.points = {{{3, 4}, false}};
  box.boxes = {{{1, 1, 6, 9}, true}};
  const auto tp = m.encode_prompts(pos, 16, 16);
  EXPECT_EQ(tp.shape(), (nn::Shape{1, 8}));
  EXPECT_GT(norm_diff(tp.value(), m.encode_prompts(neg, 16, 16).value()), 0.0);
  EXPECT_EQ(m.encode_prompts(box, 16, 16).shape(), (nn::Shape{2, 8}));
  EXPECT_THROW(m.encode_prompts(PromptSet{}, 16, 16), ArgumentError);
}

TEST(SarmPositional, Values) {
  const auto pe = positional_encoding(0.25, 0.5, 8);
  const double pi = std::acos(-1.0);
  EXPECT_NEAR(pe[0], std::sin(pi * 0.25), 1e-15);
  EXPECT_NEAR(pe[1], std::cos(pi * 0.25), 1e-15);
  EXPECT_NEAR(pe[2], std::sin(pi * 0.5), 1e-15);
  EXPECT_NEAR(pe[7], std::cos(2 * pi * 0.5), 1e-15);
}

TEST(FeatureSelection, ZeroWeightsHalve) {
  std::mt19937_64 rng(3);
  const auto F = random_tensor({4, 3, 3}, rng);
  const auto out = feature_selection(F, nn::Tensor::zeros({2, 4}), nn::Tensor::zeros({4, 2}));
  for (std::size_t i = 0; i < F.size(); ++i) EXPECT_DOUBLE_EQ(out.value()[i], 0.5 * F.value()[i]);
}

TEST(FeatureSelection, StepwiseReferenceUnderScaling) {
  std::mt19937_64 rng(4);
  const int c = 4, r = 2, H = 3, W = 5;
  const auto F = random_tensor({c, H, W}, rng), w0 = random_tensor({r, c}, rng), w1 = random_tensor({c, r}, rng);
  const auto F2 = ops::scale(F, 2.0);
  const auto out = feature_selection(F2, w0, w1);
  // avg -> W0 -> GELU (erf form) -> W1 -> sigmoid -> broadcast multiply.
  std::vector<double> avg(c, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < H * W; ++i) avg[ch] += F2.value()[ch * H * W + i];
    avg[ch] /= H * W;
  }
  std::vector<double> hid(r, 0.0);
  for (int j = 0; j < r; ++j) {
    for (int ch = 0; ch < c; ++ch) hid[j] += w0.value()[j * c + ch] * avg[ch];
    hid[j] = 0.5 * hid[j] * (1.0 + std::erf(hid[j] / std::sqrt(2.0)));
  }
  for (int ch = 0; ch < c; ++ch) {
    double z = 0;
    for (int j = 0; j < r; ++j) z += w1.value()[ch * r + j] * hid[j];
    const double gate = 1.0 / (1.0 + std::exp(-z));
    for (int i = 0; i < H * W; ++i)
      EXPECT_NEAR(out.value()[ch * H * W + i], gate * 2.0 * F.value()[ch * H * W + i], 1e-12);
  }
}

TEST(FeatureSelection, Gradcheck) {
  std::mt19937_64 rng(5);
  auto F = random_tensor({4, 4, 4}, rng), w0 = random_tensor({2, 4}, rng), w1 = random_tensor({4, 2}, rng);
  const auto r = gradcheck({{"F", F}, {"w0", w0}, {"w1", w1}}, [&] { return ops::sum(feature_selection(F, w0, w1)); }, 1e-4);
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
  EXPECT_FALSE(r.all_zero);
  EXPECT_THROW(feature_selection(F, w1, w0), ArgumentError);
}

TEST(DecodeMask, ShapesAndTokenParticipation) {
  SarmModel m(tiny_sarm_config(), 6);
  m.freeze_baseline();
  std::mt19937_64 rng(6);
  const auto img = random_image(16, 16, 3, rng);
  const auto prompts = two_points({4, 4}, {12, 12});
  ops::NoGradGuard g;
  const auto a = m.forward(img, prompts, DecodeMode::student);
  EXPECT_EQ(a.logits.shape(), (nn::Shape{1, 16, 16}));
  EXPECT_EQ(a.mask_features.shape(), (nn::Shape{8, 16, 16}));
  const auto teacher_before = m.forward(img, prompts, DecodeMode::teacher);
  {
    nn::Tensor tok = m.params().get("adapt.token");
    for (double& v : tok.mutable_value()) v += 0.5;
  }
  const auto b = m.forward(img, prompts, DecodeMode::student);
  EXPECT_GT(norm_diff(a.logits.value(), b.logits.value()), 1e-9);
  const auto teacher_after = m.forward(img, prompts, DecodeMode::teacher);
  EXPECT_EQ(norm_diff(teacher_before.logits.value(), teacher_after.logits.value()), 0.0);
}

TEST(DecodeMask, GradcheckDegradationToken) {
  SarmModel m(tiny_sarm_config(), 7);
  m.freeze_baseline();
  std::mt19937_64 rng(7);
  const auto img = random_image(16, 16, 3, rng);
  const auto prompts = two_points({5, 5}, {11, 10});
  const auto gt = disc(16, 16, 5, 5, 3);
  nn::Tensor feats, toks;
  {
    ops::NoGradGuard g;
    feats = m.encode_image(img);
    toks = m.encode_prompts(prompts, 16, 16);
  }
  auto token = m.params().get("adapt.token");
  const auto r = gradcheck({{"adapt.token", token}}, [&] {
    const auto out = m.decode_mask(feats, toks, DecodeMode::student);
    return ops::add(dice_loss(ops::sigmoid(out.logits), gt), focal_loss(out.logits, gt, 2.0));
  });
  EXPECT_LT(r.max_rel, 1e-4);
  EXPECT_FALSE(r.all_zero);
}

TEST(DiceLoss, ClosedForms) {
  const int N = 64 * 64;
  BinaryMask ones(64, 64, true);
  EXPECT_LE(dice_loss(nn::Tensor::full({1, 64, 64}, 1.0), ones).item(), 1e-3);
  BinaryMask half(64, 64);
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 64; ++c) half.set(r, c, true);
  std::vector<double> miss(N);
  for (int i = 0; i < N; ++i) miss[i] = half.data()[i] ? 0.0 : 1.0;
  EXPECT_NEAR(dice_loss(nn::Tensor({1, 64, 64}, miss), half).item(), 1.0, 1e-3);
  // Uniform 0.5 against G positives of N: 1 - (G + 1) / (N/2 + G + 1).
  const double G = N / 2.0;
  EXPECT_NEAR(dice_loss(nn::Tensor::full({1, 64, 64}, 0.5), half).item(), 1.0 - (G + 1) / (N / 2.0 + G + 1), 1e-12);
  // All-positive target: 1 - (S + 1) / (1.5 S + 1).
  const double S = N;
  EXPECT_NEAR(dice_loss(nn::Tensor::full({1, 64, 64}, 0.5), ones).item(), 1.0 - (S + 1) / (1.5 * S + 1), 1e-12);
  EXPECT_THROW(dice_loss(nn::Tensor::full({1, 4, 4}, 0.5), half), ArgumentError);
}

TEST(FocalLoss, ClosedForms) {
  BinaryMask one(1, 1, true);
  EXPECT_NEAR(focal_loss(nn::Tensor({1, 1, 1}, {0.0}), one, 2.0).item(), 0.25 * std::log(2.0), 1e-15);
  const auto gt = disc(8, 8, 3, 3, 2);
  std::vector<double> z(64);
  for (int i = 0; i < 64; ++i) z[i] = gt.data()[i] ? 20.0 : -20.0;
  EXPECT_LT(focal_loss(nn::Tensor({1, 8, 8}, z), gt, 2.0).item(), 1e-6);

  std::mt19937_64 rng(8);
  const auto logits = random_tensor({1, 8, 8}, rng, -4, 4);
  double bce = 0;
  for (int i = 0; i < 64; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits.value()[i]));
    bce += gt.data()[i] ? -std::log(p) : -std::log(1.0 - p);
  }
  EXPECT_NEAR(focal_loss(logits, gt, 0.0).item(), bce / 64, 1e-9);
  // Clamp: a hopeless logit contributes -log(1e-7), not infinity.
  EXPECT_NEAR(focal_loss(nn::Tensor({1, 1, 1}, {-100.0}), one, 0.0).item(), -std::log(kFocalClamp), 1e-6);
}

TEST(ConsistencyLoss, ClosedForms) {
  std::mt19937_64 rng(9);
  const auto a = random_tensor({2, 2, 2}, rng);
  EXPECT_EQ(feature_consistency_loss(a, a, BinaryMask(2, 2, true)).item(), 0.0);
  EXPECT_EQ(feature_consistency_loss(a, random_tensor({2, 2, 2}, rng), BinaryMask(2, 2)).item(), 0.0);
  BinaryMask top(2, 2);
  top.set(0, 0, true);
  top.set(0, 1, true);
  const nn::Tensor s({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  // Masked squared differences 1, 4, 25, 36 over 8 elements.
  EXPECT_DOUBLE_EQ(feature_consistency_loss(s, nn::Tensor::zeros({2, 2, 2}), top).item(), 66.0 / 8.0);
  EXPECT_THROW(feature_consistency_loss(s, nn::Tensor::zeros({2, 2, 1}), top), ArgumentError);
}

TEST(Losses, Gradchecks) {
  std::mt19937_64 rng(10);
  const auto gt = disc(4, 4, 1, 2, 1);
  auto prob = random_tensor({1, 4, 4}, rng, 0.05, 0.95);
  auto logits = random_tensor({1, 4, 4}, rng, -3, 3);
  auto st = random_tensor({4, 2, 2}, rng), te = random_tensor({4, 2, 2}, rng);
  const BinaryMask m4 = disc(4, 4, 0, 0, 2);
  for (auto [name, r] : {std::pair{"dice", gradcheck({{"p", prob}}, [&] { return dice_loss(prob, gt); })},
                         std::pair{"focal2", gradcheck({{"z", logits}}, [&] { return focal_loss(logits, gt, 2.0); })},
                         std::pair{"focal0", gradcheck({{"z", logits}}, [&] { return focal_loss(logits, gt, 0.0); })},
                         std::pair{"consistency", gradcheck({{"s", st}, {"t", te}},
                                                            [&] { return feature_consistency_loss(st, te, m4); })}}) {
    EXPECT_LT(r.max_rel, 1e-4) << name;
    EXPECT_FALSE(r.all_zero) << name;
  }
}

TEST(SarmTraining, TotalIsWeightedSumOfParts) {
  SarmModel m(tiny_sarm_config(), 11);
  for (const auto& s : toy_samples(4, 11)) {
    const auto l = evaluate_losses(m, s);
    EXPECT_GE(l.dice, 0.0);
    EXPECT_GE(l.focal, 0.0);
    EXPECT_GE(l.consistency, 0.0);
    EXPECT_NEAR(l.total, l.dice + 1.0 * l.focal + 0.1 * l.consistency, 1e-9);
  }
}

TEST(SarmTraining, FrozenParametersUnchangedOver50Steps) {
  SarmModel m(tiny_sarm_config(), 12);
  m.init_adaptation_from_baseline();
  m.freeze_baseline();
  const auto frozen = m.params().flatten(true);
  const auto trainable = m.params().flatten(false);
  const auto data = toy_samples(8, 12);
  TrainStepOptions opts;
  opts.lr = 0.05;
  for (int step = 0; step < 50; ++step) {
    sarm_train_step(m, {data[step % 8], data[(step + 3) % 8]}, opts);
    for (const auto& p : m.params().params())
      if (p.frozen && !p.tensor.grad().empty())
        for (double g : p.tensor.grad()) ASSERT_EQ(g, 0.0) << p.name;
  }
  EXPECT_TRUE(bitwise_equal(m.params().flatten(true), frozen));
  EXPECT_FALSE(bitwise_equal(m.params().flatten(false), trainable));
  for (const auto& p : m.params().params()) EXPECT_EQ(p.frozen, p.name.rfind("adapt.", 0) != 0) << p.name;
}

TEST(SarmTraining, HookViolationIsCaught) {
  SarmModel m(tiny_sarm_config(), 13);
  m.freeze_baseline();
  const auto data = toy_samples(1, 13);
  TrainStepOptions opts;
  opts.after_update = [](nn::ParamStore& s) {
    nn::Tensor w = s.get("enc.conv1.w");
    w.mutable_value()[0] += 1e-12;
  };
  EXPECT_THROW(sarm_train_step(m, data, opts), InvariantViolation);
  EXPECT_THROW(sarm_train_step(m, {}, TrainStepOptions{}), ArgumentError);
}

TEST(SarmTraining, DeterministicAndLossDecreases) {
  const auto data = toy_samples(16, 14);
  auto run = [&](int steps, double& first, double& last) {
    SarmModel m(tiny_sarm_config(), 14);
    m.init_adaptation_from_baseline();
    m.freeze_baseline();
    auto total = [&] {
      double t = 0;
      for (const auto& s : data) t += evaluate_losses(m, s).total;
      return t / data.size();
    };
    first = total();
    TrainStepOptions opts;
    opts.lr = 0.05;
    for (int step = 0; step < steps; ++step) {
      std::vector<SarmSample> batch;
      for (int k = 0; k < 4; ++k) batch.push_back(data[(step * 4 + k) % 16]);
      sarm_train_step(m, batch, opts);
    }
    last = total();
    return m.params().flatten(false);
  };
  double f1, l1, f2, l2;
  const auto p1 = run(200, f1, l1);
  EXPECT_LT(l1, f1);
  const auto p2 = run(200, f2, l2);
  EXPECT_TRUE(bitwise_equal(p1, p2));
  EXPECT_EQ(l1, l2);
}

TEST(SarmModel, SegmentSemanticsAndCheckpoint) {
  SarmModel m(tiny_sarm_config(), 15);
  m.freeze_baseline();
  std::mt19937_64 rng(15);
  const auto img = random_image(16, 16, 3, rng);
  const auto prompts = two_points({2, 3}, {9, 9});
  EXPECT_EQ(m.segment(img, PromptSet{}).count(), 0u);
  const auto a = m.segment(img, prompts);
  EXPECT_EQ(a, m.segment(img, prompts));
  const auto resized = m.segment(random_image(20, 28, 3, rng), prompts);
  EXPECT_EQ(resized.height(), 20);
  EXPECT_EQ(resized.width(), 28);

  const auto path = (std::filesystem::temp_directory_path() / "firm_test_sarm.ckpt").string();
  m.save(path);
  const auto back = SarmModel::load(path);
  EXPECT_EQ(config_to_json(back->config()), config_to_json(m.config()));
  EXPECT_TRUE(bitwise_equal(back->params().flatten(false), m.params().flatten(false)));
  EXPECT_TRUE(bitwise_equal(back->params().flatten(true), m.params().flatten(true)));
  EXPECT_EQ(back->segment(img, prompts), a);
}

TEST(SarmModel, AdaptationInitCopiesBaselineHeads) {
  SarmModel m(tiny_sarm_config(), 16);
  m.init_adaptation_from_baseline();
  const auto& s = m.params();
  const auto tok = s.get("adapt.token").value(), out0 = s.get("dec.output_tokens").value();
  for (std::size_t i = 0; i < tok.size(); ++i) EXPECT_EQ(tok[i], out0[i]);
  for (const char* l : {".l1.w", ".l1.b", ".l2.w", ".l2.b", ".l3.w", ".l3.b"}) {
    const auto a = s.get(std::string("adapt.dyn") + l).value(), b = s.get(std::string("dec.hyper") + l).value();
    const double k = std::string(l).starts_with(".l3") ? 2.0 : 1.0;
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], k * b[i]) << l;
  }
  for (double v : s.get("adapt.fs.w1").value()) EXPECT_EQ(v, 0.0);
}

TEST(SarmModel, PretrainedSegmenterCoversHeldOutDiscs) {
  // Clear 16x16 scenes with one disc, prompted by a point inside it.
  toy::SceneOptions so;
  so.height = so.width = 16;
  so.min_shapes = so.max_shapes = 1;
  so.discs_only = true;
  so.min_radius = 0.2;
  so.max_radius = 0.3;
  std::mt19937_64 rng(17);
  auto make = [&](int n) {
    std::vector<PretrainSample> out;
    while (static_cast<int>(out.size()) < n) {
      const auto sc = toy::make_scene(so, rng);
      const auto& inst = sc.instances.front();
      if (inst.count() == 0 || inst.count() == inst.size()) continue;
      const auto [pos, neg] = sample_contrastive_points(inst, rng());
      out.push_back({sc.image, inst, two_points(pos, neg)});
    }
    return out;
  };
  const auto train = make(64), held = make(16);
  SarmModel m(tiny_sarm_config(), 17);
  nn::Adam opt(3e-3);
  for (int step = 0; step < 400; ++step) {
    std::vector<PretrainSample> batch;
    for (int k = 0; k < 4; ++k) batch.push_back(train[(step * 4 + k) % train.size()]);
    pretrain_step(m, batch, opt);
  }
  m.init_adaptation_from_baseline();
  double iou = 0;
  for (const auto& s : held) iou += mask_iou(m.segment(s.image, s.prompts), s.target);
  EXPECT_GE(iou / held.size(), 0.5);
}
