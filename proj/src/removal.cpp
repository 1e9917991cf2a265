#include "firm/removal.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "firm/errors.hpp"
#include "firm/nn/ops.hpp"

namespace firm::removal {

namespace ops = firm::nn;

namespace {

const char* mask_input_name(MaskInput m) {
  switch (m) {
    case MaskInput::none: return "none";
    case MaskInput::raw_points: return "raw_points";
    case MaskInput::contrastive: return "contrastive";
  }
  return "none";
}

MaskInput mask_input_from(const std::string& s) {
  if (s == "none") return MaskInput::none;
  if (s == "raw_points") return MaskInput::raw_points;
  if (s == "contrastive") return MaskInput::contrastive;
  throw ArgumentError("unknown mask_input '" + s + "'");
}

}  // namespace

void RemovalConfig::validate() const {
  if (channels < 2 || channels % 2 != 0) throw ArgumentError("removal: channels must be a positive even number");
  if (scales < 1 || scales > 6) throw ArgumentError("removal: scales must be in [1,6]");
  if (blocks < 0 || n_cgib < 0) throw ArgumentError("removal: block counts must be non-negative");
  if (query_h < 1 || query_w < 1) throw ArgumentError("removal: query size must be at least 1x1");
  if (!(alpha_init > 0)) throw ArgumentError("removal: alpha_init must be positive");
  for (double w : {w_pix, w_grad, w_perc, w_excl})
    if (!(w >= 0)) throw ArgumentError("removal: loss weights must be non-negative");
  if (!(lr_max > 0) || !(lr_min >= 0) || lr_min > lr_max) throw ArgumentError("removal: bad learning-rate range");
  if (iterations < 0) throw ArgumentError("removal: iterations must be non-negative");
}

std::string config_to_json(const RemovalConfig& c) {
  return nlohmann::json{{"channels", c.channels},
                        {"scales", c.scales},
                        {"blocks", c.blocks},
                        {"n_cgib", c.n_cgib},
                        {"query_h", c.query_h},
                        {"query_w", c.query_w},
                        {"alpha_init", c.alpha_init},
                        {"w_pix", c.w_pix},
                        {"w_grad", c.w_grad},
                        {"w_perc", c.w_perc},
                        {"w_excl", c.w_excl},
                        {"lr_max", c.lr_max},
                        {"lr_min", c.lr_min},
                        {"iterations", c.iterations},
                        {"mask_input", mask_input_name(c.mask_input)},
                        {"use_cgib", c.use_cgib},
                        {"cgib_reflection_only", c.cgib_reflection_only}}
      .dump();
}

RemovalConfig config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  RemovalConfig c;
  c.channels = j.at("channels");
  c.scales = j.at("scales");
  c.blocks = j.at("blocks");
  c.n_cgib = j.at("n_cgib");
  c.query_h = j.at("query_h");
  c.query_w = j.at("query_w");
  c.alpha_init = j.at("alpha_init");
  c.w_pix = j.at("w_pix");
  c.w_grad = j.at("w_grad");
  c.w_perc = j.at("w_perc");
  c.w_excl = j.at("w_excl");
  c.lr_max = j.at("lr_max");
  c.lr_min = j.at("lr_min");
  c.iterations = j.at("iterations");
  c.mask_input = mask_input_from(j.at("mask_input"));
  c.use_cgib = j.at("use_cgib");
  c.cgib_reflection_only = j.at("cgib_reflection_only");
  c.validate();
  return c;
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"blended_only", "raw_point", "raw_mask", "reflection_mask", "full"};
  return names;
}

std::string ablation_label(const std::string& name) {
  if (name == "blended_only") return "Blended Only";
  if (name == "raw_point") return "Raw Point";
  if (name == "raw_mask") return "Raw Mask";
  if (name == "reflection_mask") return "Reflection Mask";
  if (name == "full") return "Full";
  throw ArgumentError("unknown ablation '" + name + "'");
}

RemovalConfig ablation_config(RemovalConfig c, const std::string& name) {
  ablation_label(name);
  c.cgib_reflection_only = false;
  if (name == "blended_only") {
    c.mask_input = MaskInput::none;
    c.use_cgib = false;
  } else if (name == "raw_point") {
    c.mask_input = MaskInput::raw_points;
    c.use_cgib = false;
  } else if (name == "raw_mask") {
    c.mask_input = MaskInput::contrastive;
    c.use_cgib = false;
  } else if (name == "reflection_mask") {
    c.mask_input = MaskInput::contrastive;
    c.use_cgib = true;
    c.cgib_reflection_only = true;
  } else {
    c.mask_input = MaskInput::contrastive;
    c.use_cgib = true;
  }
  return c;
}

// ---- blocks -----------------------------------------------------------------

namespace {

void add_conv(nn::ParamStore& s, const std::string& name, int co, int ci, int k, std::mt19937_64& rng,
              double gain = 1.0, int groups = 1) {
  const int fan_in = ci / groups * k * k;
  s.add_normal(name + ".w", {co, ci / groups, k, k}, gain / std::sqrt(static_cast<double>(fan_in)), rng);
  s.add_constant(name + ".b", {co}, 0.0);
}

void add_norm(nn::ParamStore& s, const std::string& name, int c) {
  s.add_constant(name + ".g", {c}, 1.0);
  s.add_constant(name + ".b", {c}, 0.0);
}

Tensor conv(const nn::ParamStore& s, const std::string& name, const Tensor& x, int stride = 1, int pad = 0,
            int groups = 1) {
  return ops::conv2d(x, s.get(name + ".w"), s.get(name + ".b"), stride, pad, groups);
}

Tensor norm(const nn::ParamStore& s, const std::string& name, const Tensor& x) {
  return ops::layernorm_channels(x, s.get(name + ".g"), s.get(name + ".b"));
}

Tensor simple_gate(const Tensor& x) {
  const int half = x.dim(0) / 2;
  return ops::mul(ops::slice0(x, 0, half), ops::slice0(x, half, half));
}

constexpr double kBranchGain = 0.2;

}  // namespace

void add_naf_params(nn::ParamStore& s, const std::string& p, int c, std::mt19937_64& rng) {
  add_norm(s, p + ".ln1", c);
  add_conv(s, p + ".conv1", 2 * c, c, 1, rng);
  add_conv(s, p + ".dw", 2 * c, 2 * c, 3, rng, 1.0, 2 * c);
  s.add_normal(p + ".sca.w", {c, c, 1, 1}, 1.0 / std::sqrt(static_cast<double>(c)), rng);
  s.add_constant(p + ".sca.b", {c}, 0.0);
  add_conv(s, p + ".conv3", c, c, 1, rng, kBranchGain);
  add_norm(s, p + ".ln2", c);
  add_conv(s, p + ".conv4", 2 * c, c, 1, rng);
  add_conv(s, p + ".conv5", c, c, 1, rng, kBranchGain);
}

Tensor naf_block(const Tensor& x, const nn::ParamStore& s, const std::string& p) {
  const int c = x.dim(0);
  Tensor y = conv(s, p + ".conv1", norm(s, p + ".ln1", x));
  y = conv(s, p + ".dw", y, 1, 1, 2 * c);
  y = simple_gate(y);
  const Tensor pooled = ops::reshape(ops::mean_spatial(y), {c, 1, 1});
  const Tensor att = ops::reshape(conv(s, p + ".sca", pooled), {c});
  y = ops::mul_channel(y, att);
  const Tensor mid = ops::add(x, conv(s, p + ".conv3", y));
  Tensor z = conv(s, p + ".conv4", norm(s, p + ".ln2", mid));
  z = conv(s, p + ".conv5", simple_gate(z));
  return ops::add(mid, z);
}

void add_cgib_params(nn::ParamStore& s, const std::string& p, int c, double alpha_init, std::mt19937_64& rng) {
  add_conv(s, p + ".q", c, c, 1, rng);
  add_conv(s, p + ".k", c, c, 1, rng);
  add_conv(s, p + ".v", c, c, 1, rng, kBranchGain);
  s.add(p + ".log_alpha", {1}, {std::log(alpha_init)});
  add_norm(s, p + ".ffn.ln", c);
  add_conv(s, p + ".ffn.in", 4 * c, c, 1, rng);
  add_conv(s, p + ".ffn.dw", 4 * c, 4 * c, 3, rng, 1.0, 4 * c);
  add_conv(s, p + ".ffn.out", c, 2 * c, 1, rng, kBranchGain);
}

Tensor cgib_query(const Tensor& features, const ImagePlane& mask, int qh, int qw) {
  if (features.ndim() != 3) throw ArgumentError("cgib_query: features must be [c,h,w]");
  if (mask.channels() != 1) throw ArgumentError("cgib_query: mask must be single-channel");
  const int c = features.dim(0), h = features.dim(1), w = features.dim(2);
  const ImagePlane m = resize_bilinear(mask, h, w);
  const Tensor plane({1, h, w}, std::vector<double>(m.data().begin(), m.data().end()));
  const Tensor q = ops::resize_bilinear(ops::mul_plane(features, plane), qh, qw);
  return ops::reshape(q, {c, qh * qw});
}

Tensor cca(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& log_alpha) {
  if (q.ndim() != 2 || q.shape() != k.shape()) throw ArgumentError("cca: Q and K must both be [c,n]");
  if (v.ndim() != 2 || v.dim(1) != q.dim(0)) throw ArgumentError("cca: V must be [hw,c]");
  const Tensor inv_alpha = ops::exp(ops::scale(log_alpha, -1.0));
  const Tensor a = ops::softmax_rows(ops::mul_scalar(ops::matmul(q, ops::transpose(k)), inv_alpha));
  return ops::matmul(v, ops::transpose(a));
}

Tensor cgib_forward(const Tensor& f, const ImagePlane& mask, const nn::ParamStore& s, const std::string& p, int qh,
                    int qw) {
  const int c = f.dim(0), h = f.dim(1), w = f.dim(2);
  const Tensor q = cgib_query(conv(s, p + ".q", f), mask, qh, qw);
  const Tensor k = ops::reshape(ops::resize_bilinear(conv(s, p + ".k", f), qh, qw), {c, qh * qw});
  const Tensor v = ops::transpose(ops::reshape(conv(s, p + ".v", f), {c, h * w}));
  const Tensor att = cca(q, k, v, s.get(p + ".log_alpha"));
  const Tensor y = ops::add(f, ops::reshape(ops::transpose(att), {c, h, w}));
  Tensor z = conv(s, p + ".ffn.in", norm(s, p + ".ffn.ln", y));
  z = conv(s, p + ".ffn.dw", z, 1, 1, 4 * c);
  z = ops::mul(ops::gelu(ops::slice0(z, 0, 2 * c)), ops::slice0(z, 2 * c, 2 * c));
  return ops::add(y, conv(s, p + ".ffn.out", z));
}

// ---- losses -----------------------------------------------------------------

namespace {

Tensor normalized_tanh(const Tensor& g) {
  const Tensor a = ops::abs(g);
  const Tensor lambda = ops::reciprocal(ops::add_scalar(ops::mean(a), kExclusionEps));
  return ops::tanh(ops::mul_scalar(a, lambda));
}

}  // namespace

Tensor exclusion_loss(const Tensor& t_hat, const Tensor& r_hat, int scales) {
  if (t_hat.shape() != r_hat.shape()) throw ArgumentError("exclusion_loss: shape mismatch");
  if (scales < 1) throw ArgumentError("exclusion_loss: scales must be at least 1");
  Tensor t = t_hat, r = r_hat;
  std::vector<Tensor> terms;
  for (int s = 0; s < scales; ++s) {
    if (s > 0) {
      if (t.dim(1) < 2 || t.dim(2) < 2) break;
      t = ops::avgpool2(t);
      r = ops::avgpool2(r);
    }
    const Tensor ex = ops::mean(ops::mul(normalized_tanh(ops::grad_x(t)), normalized_tanh(ops::grad_x(r))));
    const Tensor ey = ops::mean(ops::mul(normalized_tanh(ops::grad_y(t)), normalized_tanh(ops::grad_y(r))));
    terms.push_back(ops::scale(ops::add(ex, ey), 0.5));
  }
  return ops::weighted_sum(terms, std::vector<double>(terms.size(), 1.0));
}

RandomConvExtractor::RandomConvExtractor(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  add_conv(store_, "p1", 8, 3, 3, rng, std::sqrt(2.0));
  add_conv(store_, "p2", 16, 8, 3, rng, std::sqrt(2.0));
  add_conv(store_, "p3", 16, 16, 3, rng, std::sqrt(2.0));
  store_.set_frozen("", true);
}

std::vector<Tensor> RandomConvExtractor::features(const Tensor& image) const {
  std::vector<Tensor> out;
  Tensor x = ops::gelu(conv(store_, "p1", image, 1, 1));
  out.push_back(x);
  x = ops::gelu(conv(store_, "p2", x, 2, 1));
  out.push_back(x);
  x = ops::gelu(conv(store_, "p3", x, 2, 1));
  out.push_back(x);
  return out;
}

LossBreakdown LossTerms::values() const {
  return {pixel.item(), gradient.item(), perceptual.item(), exclusion.item(), total.item()};
}

LossTerms reconstruction_losses(const Tensor& t_hat, const Tensor& r_hat, const Tensor& t, const Tensor& r,
                                const FeatureExtractor& extractor, const RemovalConfig& cfg) {
  if (t_hat.shape() != t.shape() || r_hat.shape() != r.shape() || t.shape() != r.shape())
    throw ArgumentError("reconstruction_losses: shape mismatch");
  LossTerms L;
  L.pixel = ops::add(ops::l1_loss(t_hat, t), ops::l1_loss(r_hat, r));
  L.gradient = ops::add(ops::l1_loss(ops::grad_x(t_hat), ops::grad_x(t)), ops::l1_loss(ops::grad_y(t_hat), ops::grad_y(t)));
  std::vector<Tensor> target;
  {
    nn::NoGradGuard no_grad;
    target = extractor.features(t);
  }
  const auto pred = extractor.features(t_hat);
  if (pred.size() != target.size() || pred.empty()) throw InvariantViolation("feature extractor returned mismatched layers");
  std::vector<Tensor> per_layer;
  for (std::size_t i = 0; i < pred.size(); ++i) per_layer.push_back(ops::l1_loss(pred[i], target[i]));
  L.perceptual = ops::weighted_sum(per_layer, std::vector<double>(per_layer.size(), 1.0 / per_layer.size()));
  L.exclusion = exclusion_loss(t_hat, r_hat, 3);
  L.total = ops::weighted_sum({L.pixel, L.gradient, L.perceptual, L.exclusion},
                              {cfg.w_pix, cfg.w_grad, cfg.w_perc, cfg.w_excl});
  return L;
}

// ---- model --------------------------------------------------------------------

Tensor image_tensor(const ImagePlane& img, bool requires_grad) {
  return Tensor({img.channels(), img.height(), img.width()}, std::vector<double>(img.data().begin(), img.data().end()),
                requires_grad);
}

ImagePlane tensor_image(const Tensor& t) {
  if (t.ndim() != 3) throw ArgumentError("tensor_image: expected [C,H,W]");
  return ImagePlane(t.dim(1), t.dim(2), t.dim(0), std::vector<double>(t.value().begin(), t.value().end()));
}

ImagePlane raw_point_mask(int height, int width, const PixelCoord& refl, const PixelCoord& trans, int radius) {
  ImagePlane m(height, width, 1);
  auto stamp = [&](const PixelCoord& p, double v) {
    for (int r = std::max(0, p.row - radius); r <= std::min(height - 1, p.row + radius); ++r)
      for (int c = std::max(0, p.col - radius); c <= std::min(width - 1, p.col + radius); ++c)
        if ((r - p.row) * (r - p.row) + (c - p.col) * (c - p.col) <= radius * radius) m.at(r, c, 0) = v;
  };
  stamp(trans, 0.5);
  stamp(refl, 1.0);
  return m;
}

namespace {

int level_channels(const RemovalConfig& cfg, int level) { return cfg.channels << level; }

std::string blk(const std::string& p, int i) { return p + ".b" + std::to_string(i); }

}  // namespace

RemovalModel::RemovalModel(const RemovalConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  auto& s = store_;
  const int S = cfg_.scales;
  add_conv(s, "intro", cfg_.channels, 4, 3, rng);
  for (int l = 0; l + 1 < S; ++l) {
    for (int b = 0; b < cfg_.blocks; ++b) add_naf_params(s, blk("enc" + std::to_string(l), b), level_channels(cfg_, l), rng);
    add_conv(s, "down" + std::to_string(l), level_channels(cfg_, l + 1), level_channels(cfg_, l), 2, rng);
  }
  const int cm = level_channels(cfg_, S - 1);
  for (int b = 0; b < cfg_.blocks; ++b) add_naf_params(s, blk("mid", b), cm, rng);
  if (cfg_.use_cgib)
    for (int k = 0; k < cfg_.n_cgib; ++k) add_cgib_params(s, "cgib" + std::to_string(k), cm, cfg_.alpha_init, rng);
  for (int l = S - 2; l >= 0; --l) {
    const int ci = level_channels(cfg_, l + 1), co = level_channels(cfg_, l);
    s.add_normal("up" + std::to_string(l) + ".w", {ci, co, 2, 2}, 1.0 / std::sqrt(static_cast<double>(ci)), rng);
    s.add_constant("up" + std::to_string(l) + ".b", {co}, 0.0);
    for (int b = 0; b < cfg_.blocks; ++b) add_naf_params(s, blk("dec" + std::to_string(l), b), co, rng);
  }
  add_conv(s, "head", 6, cfg_.channels, 3, rng, 0.1);
}

ForwardResult RemovalModel::forward(const ImagePlane& image, const ImagePlane& guide) const {
  if (image.channels() != 3) throw ArgumentError("removal: image must be RGB");
  if (guide.channels() != 1 || guide.height() != image.height() || guide.width() != image.width())
    throw ArgumentError("removal: guide must be a single-channel plane of the image size");
  const int d = cfg_.divisor();
  if (image.height() % d != 0 || image.width() % d != 0)
    throw ArgumentError("removal: image sides must be divisible by " + std::to_string(d));
  const auto& s = store_;
  const int S = cfg_.scales;

  const Tensor img = image_tensor(image);
  const Tensor in_mask = cfg_.mask_input == MaskInput::none ? Tensor::zeros({1, image.height(), image.width()})
                                                             : image_tensor(guide);
  Tensor x = conv(s, "intro", ops::concat0({img, in_mask}), 1, 1);
  std::vector<Tensor> skips;
  for (int l = 0; l + 1 < S; ++l) {
    for (int b = 0; b < cfg_.blocks; ++b) x = naf_block(x, s, blk("enc" + std::to_string(l), b));
    skips.push_back(x);
    x = conv(s, "down" + std::to_string(l), x, 2, 0);
  }
  for (int b = 0; b < cfg_.blocks; ++b) x = naf_block(x, s, blk("mid", b));
  if (cfg_.use_cgib) {
    ImagePlane cg = guide;
    if (cfg_.cgib_reflection_only)
      for (double& v : cg.data()) v = v > 0.75 ? 1.0 : 0.0;
    for (int k = 0; k < cfg_.n_cgib; ++k) x = cgib_forward(x, cg, s, "cgib" + std::to_string(k), cfg_.query_h, cfg_.query_w);
  }
  for (int l = S - 2; l >= 0; --l) {
    const std::string u = "up" + std::to_string(l);
    x = ops::add(ops::conv_transpose2d(x, s.get(u + ".w"), s.get(u + ".b"), 2), skips[static_cast<std::size_t>(l)]);
    for (int b = 0; b < cfg_.blocks; ++b) x = naf_block(x, s, blk("dec" + std::to_string(l), b));
  }
  const Tensor head = conv(s, "head", x, 1, 1);
  return {ops::add(img, ops::slice0(head, 0, 3)), ops::slice0(head, 3, 3)};
}

namespace {

ImagePlane pad_edge(const ImagePlane& img, int h, int w) {
  ImagePlane out(h, w, img.channels());
  for (int ch = 0; ch < img.channels(); ++ch)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        out.at(r, c, ch) = img.at(std::min(r, img.height() - 1), std::min(c, img.width() - 1), ch);
  return out;
}

ImagePlane crop(const ImagePlane& img, int h, int w) {
  ImagePlane out(h, w, img.channels());
  for (int ch = 0; ch < img.channels(); ++ch)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) out.at(r, c, ch) = img.at(r, c, ch);
  return out;
}

}  // namespace

RemovalOutput RemovalModel::remove(const ImagePlane& image, const ImagePlane& guide) const {
  nn::NoGradGuard no_grad;
  const int d = cfg_.divisor();
  const int H = image.height(), W = image.width();
  const int ph = (H + d - 1) / d * d, pw = (W + d - 1) / d * d;
  const bool padded = ph != H || pw != W;
  const auto out = padded ? forward(pad_edge(image, ph, pw), pad_edge(guide, ph, pw)) : forward(image, guide);
  ImagePlane T = tensor_image(out.t_hat), R = tensor_image(out.r_hat);
  if (padded) {
    T = crop(T, H, W);
    R = crop(R, H, W);
  }
  return {T.clamped(), R.clamped()};
}

void RemovalModel::save(const std::string& path) const {
  nn::save_checkpoint(path, "removal", config_to_json(cfg_), store_);
}

std::shared_ptr<RemovalModel> RemovalModel::load(const std::string& path) {
  const auto ck = nn::load_checkpoint(path);
  if (ck.kind != "removal")
    throw DataError("checkpoint " + path + " holds a '" + ck.kind + "' model, expected 'removal'");
  auto model = std::make_shared<RemovalModel>(config_from_json(ck.config_json), 0);
  nn::restore_params(model->store_, ck);
  return model;
}

double cosine_lr(const RemovalConfig& cfg, int iter, int total) {
  if (total <= 0) return cfg.lr_max;
  const double t = std::clamp(static_cast<double>(iter) / total, 0.0, 1.0);
  if (t == 0.0) return cfg.lr_max;
  if (t == 1.0) return cfg.lr_min;
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

RemovalTrainer::RemovalTrainer(RemovalModel& model, std::shared_ptr<const FeatureExtractor> extractor)
    : model_(model), extractor_(std::move(extractor)), adam_(model.config().lr_max) {
  if (!extractor_) extractor_ = std::make_shared<RandomConvExtractor>();
}

LossBreakdown RemovalTrainer::step(const std::vector<TrainPair>& batch, int iter, int total) {
  if (batch.empty()) throw ArgumentError("removal training step: empty batch");
  auto& store = model_.params();
  store.zero_grad();
  const double inv = 1.0 / static_cast<double>(batch.size());
  LossBreakdown acc;
  std::vector<LossBreakdown> parts;
  for (const auto& p : batch) {
    const auto out = model_.forward(p.I, p.guide);
    const auto L = reconstruction_losses(out.t_hat, out.r_hat, image_tensor(p.T), image_tensor(p.R), *extractor_,
                                         model_.config());
    const auto v = L.values();
    if (!std::isfinite(v.total)) {
      std::ostringstream os;
      os << "non-finite removal loss at iteration " << iter << "; batch ids:";
      for (const auto& q : batch) os << ' ' << q.id;
      throw InvariantViolation(os.str());
    }
    ops::scale(L.total, inv).backward();
    acc.pixel += v.pixel * inv;
    acc.gradient += v.gradient * inv;
    acc.perceptual += v.perceptual * inv;
    acc.exclusion += v.exclusion * inv;
    acc.total += v.total * inv;
  }
  adam_.set_lr(cosine_lr(model_.config(), iter, total));
  adam_.step(store);
  return acc;
}

}  // namespace firm::removal
