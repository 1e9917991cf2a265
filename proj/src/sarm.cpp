#include "firm/sarm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include "json.hpp"

#include "firm/errors.hpp"
#include "firm/nn/ops.hpp"

namespace firm::sarm {

namespace ops = firm::nn;

void SarmConfig::validate() const {
  if (token_dim < 4 || token_dim % 4 != 0) throw ArgumentError("sarm: token_dim must be a positive multiple of 4");
  if (channels < 4 || channels % 4 != 0) throw ArgumentError("sarm: channels must be a positive multiple of 4");
  if (reduction < 1 || channels % reduction != 0) throw ArgumentError("sarm: channels must be divisible by reduction");
  if (n_output_tokens < 1) throw ArgumentError("sarm: need at least one output token");
  if (image_size < 8 || image_size % 8 != 0) throw ArgumentError("sarm: image_size must be a multiple of 8");
  if (focal_gamma < 0 || lambda0 < 0 || lambda1 < 0) throw ArgumentError("sarm: loss weights must be non-negative");
}

std::string config_to_json(const SarmConfig& c) {
  return nlohmann::json{{"token_dim", c.token_dim},     {"channels", c.channels},
                        {"reduction", c.reduction},     {"n_output_tokens", c.n_output_tokens},
                        {"image_size", c.image_size},   {"focal_gamma", c.focal_gamma},
                        {"lambda0", c.lambda0},         {"lambda1", c.lambda1}}
      .dump();
}

SarmConfig config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  SarmConfig c;
  c.token_dim = j.at("token_dim");
  c.channels = j.at("channels");
  c.reduction = j.at("reduction");
  c.n_output_tokens = j.at("n_output_tokens");
  c.image_size = j.at("image_size");
  c.focal_gamma = j.at("focal_gamma");
  c.lambda0 = j.at("lambda0");
  c.lambda1 = j.at("lambda1");
  c.validate();
  return c;
}

std::vector<double> positional_encoding(double row, double col, int dim) {
  const int nf = dim / 4;
  std::vector<double> pe(static_cast<std::size_t>(dim));
  for (int k = 0; k < nf; ++k) {
    const double f = std::numbers::pi * (k + 1);
    pe[4 * k + 0] = std::sin(f * row);
    pe[4 * k + 1] = std::cos(f * row);
    pe[4 * k + 2] = std::sin(f * col);
    pe[4 * k + 3] = std::cos(f * col);
  }
  return pe;
}

namespace {

Tensor grid_encoding(int h, int w, int dim) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(h) * w * dim);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const auto pe = positional_encoding((r + 0.5) / h, (c + 0.5) / w, dim);
      v.insert(v.end(), pe.begin(), pe.end());
    }
  return Tensor({h * w, dim}, std::move(v));
}

// [C,H,W] <-> [HW,C]
Tensor to_tokens(const Tensor& x) {
  return ops::transpose(ops::reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}

Tensor from_tokens(const Tensor& t, int h, int w) {
  return ops::reshape(ops::transpose(t), {t.dim(1), h, w});
}

struct Builder {
  nn::ParamStore& store;
  std::mt19937_64& rng;

  void linear(const std::string& name, int in, int out, double gain = 1.0) {
    store.add_normal(name + ".w", {in, out}, gain / std::sqrt(static_cast<double>(in)), rng);
    store.add_constant(name + ".b", {out}, 0.0);
  }
  void matrix(const std::string& name, int in, int out, double gain = 1.0) {
    store.add_normal(name, {in, out}, gain / std::sqrt(static_cast<double>(in)), rng);
  }
  void norm(const std::string& name, int dim) {
    store.add_constant(name + ".g", {dim}, 1.0);
    store.add_constant(name + ".b", {dim}, 0.0);
  }
  void attention(const std::string& name, int dim) {
    for (const char* p : {".wq", ".wk", ".wv"}) matrix(name + p, dim, dim);
    matrix(name + ".wo", dim, dim, 0.5);
    norm(name + ".ln", dim);
  }
  void conv(const std::string& name, int co, int ci, int k) {
    store.add_normal(name + ".w", {co, ci, k, k}, std::sqrt(2.0 / (ci * k * k)), rng);
    store.add_constant(name + ".b", {co}, 0.0);
  }
  void mlp3(const std::string& name, int in, int hidden, int out) {
    linear(name + ".l1", in, hidden);
    linear(name + ".l2", hidden, hidden);
    linear(name + ".l3", hidden, out, 0.5);
  }
};

}  // namespace

SarmModel::SarmModel(const SarmConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  Builder b{store_, rng};
  const int c = cfg_.channels, d = cfg_.token_dim;
  b.conv("enc.conv1", c / 2, 3, 3);
  b.conv("enc.conv2", c, c / 2, 3);
  b.conv("enc.conv3", c, c, 3);
  b.attention("enc.attn", c);
  b.norm("enc.mlp.ln", c);
  b.linear("enc.mlp.l1", c, 2 * c);
  b.linear("enc.mlp.l2", 2 * c, c, 0.5);

  store_.add_normal("prompt.label", {2, d}, 1.0, rng);
  store_.add_normal("prompt.corner", {2, d}, 1.0, rng);

  b.linear("dec.in", c, d);
  store_.add_normal("dec.output_tokens", {cfg_.n_output_tokens, d}, 1.0, rng);
  for (int l = 0; l < 2; ++l) {
    const std::string p = "dec.L" + std::to_string(l);
    b.attention(p + ".self", d);
    b.attention(p + ".t2i", d);
    b.norm(p + ".mlp.ln", d);
    b.linear(p + ".mlp.l1", d, 2 * d);
    b.linear(p + ".mlp.l2", 2 * d, d, 0.5);
    b.attention(p + ".i2t", d);
  }
  store_.add_normal("dec.up1.w", {d, c, 4, 4}, std::sqrt(1.0 / d), rng);
  store_.add_constant("dec.up1.b", {c}, 0.0);
  b.norm("dec.up_ln", c);
  store_.add_normal("dec.up2.w", {c, c, 2, 2}, std::sqrt(2.0 / c), rng);
  store_.add_constant("dec.up2.b", {c}, 0.0);
  b.mlp3("dec.hyper", d, d, c);

  store_.add_normal("adapt.token", {1, d}, 1.0, rng);
  b.mlp3("adapt.dyn", d, d, c);
  store_.add_normal("adapt.fs.w0", {c / cfg_.reduction, c}, 1.0 / std::sqrt(static_cast<double>(c)), rng);
  store_.add_normal("adapt.fs.w1", {c, c / cfg_.reduction}, 1.0 / std::sqrt(static_cast<double>(c / cfg_.reduction)),
                    rng);
}

namespace {

struct View {
  const nn::ParamStore& s;
  const Tensor& operator()(const std::string& n) const { return s.get(n); }

  Tensor attention(const std::string& p, const Tensor& q_in, const Tensor& k_in, const Tensor& v_in) const {
    const Tensor q = ops::matmul(q_in, s.get(p + ".wq"));
    const Tensor k = ops::matmul(k_in, s.get(p + ".wk"));
    const Tensor v = ops::matmul(v_in, s.get(p + ".wv"));
    const double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    const Tensor a = ops::softmax_rows(ops::scale(ops::matmul(q, ops::transpose(k)), inv));
    return ops::matmul(ops::matmul(a, v), s.get(p + ".wo"));
  }
  Tensor norm_rows(const std::string& p, const Tensor& x) const {
    return ops::layernorm_rows(x, s.get(p + ".g"), s.get(p + ".b"));
  }
  Tensor linear(const std::string& p, const Tensor& x) const {
    return ops::linear(x, s.get(p + ".w"), s.get(p + ".b"));
  }
  Tensor mlp3(const std::string& p, const Tensor& x) const {
    Tensor h = ops::gelu(linear(p + ".l1", x));
    h = ops::gelu(linear(p + ".l2", h));
    return linear(p + ".l3", h);
  }
  Tensor conv(const std::string& p, const Tensor& x, int stride, int pad) const {
    return ops::conv2d(x, s.get(p + ".w"), s.get(p + ".b"), stride, pad);
  }
};

}  // namespace

Tensor SarmModel::encode_image(const ImagePlane& image) const {
  if (image.channels() != 3) throw ArgumentError("encode_image: expected an RGB image");
  if (image.height() % 8 != 0 || image.width() % 8 != 0)
    throw ArgumentError("encode_image: image sides must be divisible by 8");
  const View p{store_};
  std::vector<double> v(image.data().begin(), image.data().end());
  for (double& x : v) x = 2.0 * x - 1.0;
  Tensor x({3, image.height(), image.width()}, std::move(v));
  x = ops::gelu(p.conv("enc.conv1", x, 2, 1));
  x = ops::gelu(p.conv("enc.conv2", x, 2, 1));
  x = p.conv("enc.conv3", x, 2, 1);
  const int h = x.dim(1), w = x.dim(2), c = x.dim(0);
  Tensor t = to_tokens(x);
  const Tensor pe = grid_encoding(h, w, c);
  const Tensor n = p.norm_rows("enc.attn.ln", t);
  const Tensor qk = ops::add(n, pe);
  t = ops::add(t, p.attention("enc.attn", qk, qk, n));
  const Tensor m = p.norm_rows("enc.mlp.ln", t);
  t = ops::add(t, p.linear("enc.mlp.l2", ops::gelu(p.linear("enc.mlp.l1", m))));
  return from_tokens(t, h, w);
}

Tensor SarmModel::encode_prompts(const PromptSet& prompts, int height, int width) const {
  if (prompts.empty()) throw ArgumentError("encode_prompts: empty prompt set");
  const int d = cfg_.token_dim;
  const auto& label = store_.get("prompt.label");
  const auto& corner = store_.get("prompt.corner");
  std::vector<Tensor> rows;
  auto token = [&](double r, double c, int lbl, int corner_idx) {
    Tensor t({1, d}, positional_encoding((r + 0.5) / height, (c + 0.5) / width, d));
    t = ops::add(t, ops::slice0(label, lbl, 1));
    if (corner_idx >= 0) t = ops::add(t, ops::slice0(corner, corner_idx, 1));
    rows.push_back(t);
  };
  for (const auto& p : prompts.points) token(p.at.row, p.at.col, p.positive ? 0 : 1, -1);
  for (const auto& b : prompts.boxes) {
    token(b.box.r0, b.box.c0, b.positive ? 0 : 1, 0);
    token(b.box.r1, b.box.c1, b.positive ? 0 : 1, 1);
  }
  return ops::concat0(rows);
}

Tensor feature_selection(const Tensor& features, const Tensor& w0, const Tensor& w1) {
  if (features.ndim() != 3) throw ArgumentError("feature_selection: features must be [C,H,W]");
  const int c = features.dim(0);
  if (w0.ndim() != 2 || w0.dim(1) != c || w1.ndim() != 2 || w1.dim(0) != c || w1.dim(1) != w0.dim(0))
    throw ArgumentError("feature_selection: weights must be W0 [c/r,c], W1 [c,c/r]");
  const Tensor avg = ops::reshape(ops::mean_spatial(features), {c, 1});
  const Tensor hidden = ops::gelu(ops::matmul(w0, avg));
  const Tensor gate = ops::sigmoid(ops::matmul(w1, hidden));
  return ops::mul_channel(features, ops::reshape(gate, {c}));
}

DecodeOutput SarmModel::decode_mask(const Tensor& features, const Tensor& prompt_tokens, DecodeMode mode) const {
  const int c = cfg_.channels, d = cfg_.token_dim;
  if (features.ndim() != 3 || features.dim(0) != c) throw ArgumentError("decode_mask: features must be [c,h,w]");
  if (prompt_tokens.ndim() != 2 || prompt_tokens.dim(1) != d) throw ArgumentError("decode_mask: prompt tokens must be [N,d]");
  const View p{store_};
  const int h = features.dim(1), w = features.dim(2);
  const bool student = mode == DecodeMode::student;

  std::vector<Tensor> parts;
  if (student) parts.push_back(p("adapt.token"));
  parts.push_back(p("dec.output_tokens"));
  parts.push_back(prompt_tokens);
  const Tensor query_pe = ops::concat0(parts);
  Tensor tokens = query_pe;

  Tensor src = p.linear("dec.in", to_tokens(features));
  const Tensor img_pe = grid_encoding(h, w, d);
  for (int l = 0; l < 2; ++l) {
    const std::string L = "dec.L" + std::to_string(l);
    Tensor q = ops::add(tokens, query_pe);
    tokens = p.norm_rows(L + ".self.ln", ops::add(tokens, p.attention(L + ".self", q, q, tokens)));
    q = ops::add(tokens, query_pe);
    Tensor k = ops::add(src, img_pe);
    tokens = p.norm_rows(L + ".t2i.ln", ops::add(tokens, p.attention(L + ".t2i", q, k, src)));
    const Tensor m = p.linear(L + ".mlp.l2", ops::gelu(p.linear(L + ".mlp.l1", tokens)));
    tokens = p.norm_rows(L + ".mlp.ln", ops::add(tokens, m));
    q = ops::add(src, img_pe);
    k = ops::add(tokens, query_pe);
    src = p.norm_rows(L + ".i2t.ln", ops::add(src, p.attention(L + ".i2t", q, k, tokens)));
  }

  Tensor mf = from_tokens(src, h, w);
  mf = ops::conv_transpose2d(mf, p("dec.up1.w"), p("dec.up1.b"), 4);
  mf = ops::gelu(ops::layernorm_channels(mf, p("dec.up_ln.g"), p("dec.up_ln.b")));
  mf = ops::gelu(ops::conv_transpose2d(mf, p("dec.up2.w"), p("dec.up2.b"), 2));

  Tensor weights;
  if (student) {
    mf = feature_selection(mf, p("adapt.fs.w0"), p("adapt.fs.w1"));
    weights = p.mlp3("adapt.dyn", ops::slice0(tokens, 0, 1));
  } else {
    weights = p.mlp3("dec.hyper", ops::slice0(tokens, 0, 1));
  }
  const int H = mf.dim(1), W = mf.dim(2);
  Tensor logits = ops::matmul(weights, ops::reshape(mf, {c, H * W}));
  return {ops::reshape(logits, {1, H, W}), mf};
}

DecodeOutput SarmModel::forward(const ImagePlane& image, const PromptSet& prompts, DecodeMode mode) const {
  return decode_mask(encode_image(image), encode_prompts(prompts, image.height(), image.width()), mode);
}

BinaryMask SarmModel::segment(const ImagePlane& image, const PromptSet& prompts, DecodeMode mode) const {
  const int H = image.height(), W = image.width();
  if (prompts.empty()) return BinaryMask(H, W);
  nn::NoGradGuard no_grad;
  const int S = cfg_.image_size;
  const bool native = H % 8 == 0 && W % 8 == 0 && H == S && W == S;
  const ImagePlane input = native ? image : resize_bilinear(image, S, S);
  // Prompt coordinates are normalised by the original size, so no rescaling.
  const auto out = decode_mask(encode_image(input), encode_prompts(prompts, H, W), mode);
  Tensor logits = out.logits;
  if (!native) logits = ops::resize_bilinear(logits, H, W);
  BinaryMask mask(H, W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) mask.set(r, c, logits.value()[static_cast<std::size_t>(r) * W + c] > 0.0);
  return mask;
}

void SarmModel::freeze_baseline() {
  store_.set_frozen("", true);
  store_.set_frozen("adapt.", false);
}

void SarmModel::unfreeze_baseline() { store_.set_frozen("", false); }

void SarmModel::init_adaptation_from_baseline() {
  auto copy = [&](const std::string& from, const std::string& to, double k) {
    const auto src = store_.get(from).value();
    Tensor dst = store_.get(to);
    auto v = dst.mutable_value();
    if (v.size() > src.size()) throw InvariantViolation("adaptation init size");
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = k * src[i];
  };
  copy("dec.output_tokens", "adapt.token", 1.0);
  for (const char* l : {".l1.w", ".l1.b", ".l2.w", ".l2.b"}) copy(std::string("dec.hyper") + l, std::string("adapt.dyn") + l, 1.0);
  // The zero-initialised gate halves the features; double the last layer to compensate.
  copy("dec.hyper.l3.w", "adapt.dyn.l3.w", 2.0);
  copy("dec.hyper.l3.b", "adapt.dyn.l3.b", 2.0);
  Tensor w1 = store_.get("adapt.fs.w1");
  for (double& v : w1.mutable_value()) v = 0.0;
}

void SarmModel::save(const std::string& path) const {
  nn::save_checkpoint(path, "sarm", config_to_json(cfg_), store_);
}

std::shared_ptr<SarmModel> SarmModel::load(const std::string& path) {
  const auto ck = nn::load_checkpoint(path);
  if (ck.kind != "sarm") throw DataError("checkpoint " + path + " holds a '" + ck.kind + "' model, expected 'sarm'");
  auto model = std::make_shared<SarmModel>(config_from_json(ck.config_json), 0);
  nn::restore_params(model->store_, ck);
  return model;
}

// ---- losses ---------------------------------------------------------------

Tensor dice_loss(const Tensor& prob, const BinaryMask& gt) {
  if (prob.size() != gt.size()) throw ArgumentError("dice_loss: prediction and target sizes differ");
  const auto p = prob.value();
  const auto g = gt.data();
  double spg = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    spg += p[i] * g[i];
    sp += p[i];
    sg += g[i];
  }
  const double num = 2.0 * spg + kDiceSmooth;
  const double den = sp + sg + kDiceSmooth;
  nn::Node* pn = prob.node();
  std::vector<std::uint8_t> gv(g.begin(), g.end());
  return nn::make_result({1}, {1.0 - num / den}, {prob}, [pn, gv, num, den](nn::Node& self) {
    double* gp = nn::grad_of(pn);
    if (!gp) return;
    for (std::size_t i = 0; i < gv.size(); ++i) gp[i] -= self.grad[0] * (2.0 * gv[i] * den - num) / (den * den);
  });
}

Tensor focal_loss(const Tensor& logits, const BinaryMask& gt, double gamma) {
  if (logits.size() != gt.size()) throw ArgumentError("focal_loss: prediction and target sizes differ");
  const auto z = logits.value();
  const auto g = gt.data();
  const std::size_t n = z.size();
  std::vector<double> dz(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z[i]));
    const double raw = g[i] ? p : 1.0 - p;
    const double pt = std::clamp(raw, kFocalClamp, 1.0 - kFocalClamp);
    const double om = 1.0 - pt;
    total += -std::pow(om, gamma) * std::log(pt);
    if (raw != pt) continue;  // clamped: flat
    const double dl_dpt = (gamma == 0.0 ? 0.0 : gamma * std::pow(om, gamma - 1.0) * std::log(pt)) - std::pow(om, gamma) / pt;
    const double dpt_dz = (g[i] ? 1.0 : -1.0) * p * (1.0 - p);
    dz[i] = dl_dpt * dpt_dz / static_cast<double>(n);
  }
  nn::Node* zn = logits.node();
  return nn::make_result({1}, {total / static_cast<double>(n)}, {logits}, [zn, dz = std::move(dz)](nn::Node& self) {
    if (double* gz = nn::grad_of(zn))
      for (std::size_t i = 0; i < dz.size(); ++i) gz[i] += self.grad[0] * dz[i];
  });
}

Tensor feature_consistency_loss(const Tensor& student, const Tensor& teacher, const BinaryMask& gt) {
  if (student.ndim() != 3 || student.shape() != teacher.shape())
    throw ArgumentError("feature_consistency_loss: feature shapes differ");
  const int h = student.dim(1), w = student.dim(2);
  const ImagePlane m = resize_bilinear(to_plane(gt), h, w);
  std::vector<double> mv(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) mv[static_cast<std::size_t>(r) * w + c] = m.at(r, c, 0) >= 0.5 ? 1.0 : 0.0;
  const Tensor plane({1, h, w}, std::move(mv));
  return ops::mse_loss(ops::mul_plane(student, plane), ops::mul_plane(teacher, plane));
}

// ---- training -------------------------------------------------------------

namespace {

struct SampleLoss {
  Tensor total;
  LossBreakdown parts;
};

SampleLoss sample_loss(const SarmModel& model, const SarmSample& s) {
  Tensor teacher_features;
  {
    nn::NoGradGuard no_grad;
    teacher_features = model.forward(s.clear, s.prompts, DecodeMode::teacher).mask_features;
  }
  const auto out = model.forward(s.blended, s.prompts, DecodeMode::student);
  const auto& cfg = model.config();
  const Tensor dice = dice_loss(ops::sigmoid(out.logits), s.target);
  const Tensor focal = focal_loss(out.logits, s.target, cfg.focal_gamma);
  const Tensor cons = feature_consistency_loss(out.mask_features, teacher_features, s.target);
  SampleLoss r{ops::weighted_sum({dice, focal, cons}, {1.0, cfg.lambda0, cfg.lambda1}), {}};
  r.parts = {dice.item(), focal.item(), cons.item(), r.total.item()};
  return r;
}

}  // namespace

LossBreakdown evaluate_losses(const SarmModel& model, const SarmSample& sample) {
  nn::NoGradGuard no_grad;
  return sample_loss(model, sample).parts;
}

LossBreakdown sarm_train_step(SarmModel& model, const std::vector<SarmSample>& batch, const TrainStepOptions& opts) {
  if (batch.empty()) throw ArgumentError("sarm_train_step: empty batch");
  auto& store = model.params();
  const std::vector<double> frozen_before = opts.verify_frozen ? store.flatten(true) : std::vector<double>{};
  store.zero_grad();
  LossBreakdown acc;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    const auto l = sample_loss(model, s);
    ops::scale(l.total, inv).backward();
    acc.dice += l.parts.dice * inv;
    acc.focal += l.parts.focal * inv;
    acc.consistency += l.parts.consistency * inv;
    acc.total += l.parts.total * inv;
  }
  for (const auto& p : store.params())
    if (p.frozen && !p.tensor.grad().empty())
      for (double g : p.tensor.grad())
        if (g != 0.0) throw InvariantViolation("gradient reached frozen parameter " + p.name);
  nn::Sgd(opts.lr).step(store);
  if (opts.after_update) opts.after_update(store);
  if (opts.verify_frozen) {
    const auto after = store.flatten(true);
    if (after.size() != frozen_before.size() ||
        !std::equal(after.begin(), after.end(), frozen_before.begin(),
                    [](double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }))
      throw InvariantViolation("frozen parameters changed during a training step");
  }
  return acc;
}

double pretrain_step(SarmModel& model, const std::vector<PretrainSample>& batch, nn::Adam& opt) {
  if (batch.empty()) throw ArgumentError("pretrain_step: empty batch");
  auto& store = model.params();
  store.zero_grad();
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    const auto out = model.forward(s.image, s.prompts, DecodeMode::teacher);
    const Tensor loss = ops::add(dice_loss(ops::sigmoid(out.logits), s.target),
                                 ops::scale(focal_loss(out.logits, s.target, model.config().focal_gamma),
                                            model.config().lambda0));
    ops::scale(loss, inv).backward();
    total += loss.item() * inv;
  }
  opt.step(store);
  return total;
}

BinaryMask SarmSegmenter::segment(const ImagePlane& image, const PromptSet& prompts) const {
  return model_->segment(image, prompts, mode_);
}

}  // namespace firm::sarm
