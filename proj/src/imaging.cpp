#include "firm/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "firm/errors.hpp"

namespace firm {

ImagePlane::ImagePlane(int height, int width, int channels, double fill)
    : h_(height), w_(width), c_(channels) {
  if (height < 1 || width < 1) throw ArgumentError("image dimensions must be positive");
  if (channels != 1 && channels != 3) throw ArgumentError("image channels must be 1 or 3");
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

ImagePlane::ImagePlane(int height, int width, int channels, std::vector<double> planar)
    : ImagePlane(height, width, channels) {
  if (planar.size() != data_.size()) throw ArgumentError("planar buffer size does not match shape");
  data_ = std::move(planar);
}

ImagePlane ImagePlane::clamped() const {
  ImagePlane out = *this;
  for (double& v : out.data_) v = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
  return out;
}

BinaryMask::BinaryMask(int height, int width, bool fill) : h_(height), w_(width) {
  if (height < 1 || width < 1) throw ArgumentError("mask dimensions must be positive");
  data_.assign(static_cast<std::size_t>(height) * width, fill ? 1 : 0);
}

std::size_t BinaryMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

namespace detail {

int reflect101(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

std::vector<ResizeTap> bilinear_taps(int in_size, int out_size) {
  std::vector<ResizeTap> taps(out_size);
  const double scale = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in_size - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace detail

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  const double sum = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= sum;
  return k;
}

ImagePlane gaussian_blur(const ImagePlane& img, double sigma) {
  if (!(sigma >= 0.0)) throw ArgumentError("gaussian_blur: sigma must be non-negative");
  if (sigma == 0.0) return img;
  const auto k = gaussian_kernel(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  const int h = img.height(), w = img.width();
  ImagePlane tmp(h, w, img.channels());
  ImagePlane out(h, w, img.channels());
  for (int ch = 0; ch < img.channels(); ++ch) {
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) acc += k[t + radius] * img.at(r, detail::reflect101(c + t, w), ch);
        tmp.at(r, c, ch) = acc;
      }
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) acc += k[t + radius] * tmp.at(detail::reflect101(r + t, h), c, ch);
        out.at(r, c, ch) = acc;
      }
  }
  return out;
}

ImagePlane resize_bilinear(const ImagePlane& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ArgumentError("resize_bilinear: target size must be positive");
  if (out_h == img.height() && out_w == img.width()) return img;
  const auto ty = detail::bilinear_taps(img.height(), out_h);
  const auto tx = detail::bilinear_taps(img.width(), out_w);
  ImagePlane out(out_h, out_w, img.channels());
  for (int ch = 0; ch < img.channels(); ++ch)
    for (int r = 0; r < out_h; ++r)
      for (int c = 0; c < out_w; ++c) {
        const auto& y = ty[r];
        const auto& x = tx[c];
        const double top = (1 - x.t) * img.at(y.i0, x.i0, ch) + x.t * img.at(y.i0, x.i1, ch);
        const double bot = (1 - x.t) * img.at(y.i1, x.i0, ch) + x.t * img.at(y.i1, x.i1, ch);
        out.at(r, c, ch) = (1 - y.t) * top + y.t * bot;
      }
  return out;
}

GradientField spatial_gradient(const ImagePlane& img) {
  const int h = img.height(), w = img.width();
  GradientField g{ImagePlane(h, w, img.channels()), ImagePlane(h, w, img.channels())};
  for (int ch = 0; ch < img.channels(); ++ch)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        if (c + 1 < w) g.gx.at(r, c, ch) = img.at(r, c + 1, ch) - img.at(r, c, ch);
        if (r + 1 < h) g.gy.at(r, c, ch) = img.at(r + 1, c, ch) - img.at(r, c, ch);
      }
  return g;
}

BinaryMask dilate(const BinaryMask& mask, int radius) {
  BinaryMask out(mask.height(), mask.width());
  const int r2 = radius * radius;
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c) {
      if (!mask.at(r, c)) continue;
      for (int dr = -radius; dr <= radius; ++dr)
        for (int dc = -radius; dc <= radius; ++dc) {
          if (dr * dr + dc * dc > r2) continue;
          const int rr = r + dr, cc = c + dc;
          if (rr >= 0 && rr < mask.height() && cc >= 0 && cc < mask.width()) out.set(rr, cc, true);
        }
    }
  return out;
}

BinaryMask threshold(const ImagePlane& single_channel, double above) {
  BinaryMask out(single_channel.height(), single_channel.width());
  for (int r = 0; r < out.height(); ++r)
    for (int c = 0; c < out.width(); ++c) out.set(r, c, single_channel.at(r, c, 0) > above);
  return out;
}

ImagePlane to_plane(const BinaryMask& mask) {
  ImagePlane out(mask.height(), mask.width(), 1);
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c) out.at(r, c, 0) = mask.at(r, c) ? 1.0 : 0.0;
  return out;
}

double mse(const ImagePlane& a, const ImagePlane& b) {
  if (!a.same_shape(b)) throw ArgumentError("mse: shape mismatch");
  double acc = 0.0;
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) acc += (da[i] - db[i]) * (da[i] - db[i]);
  return acc / static_cast<double>(da.size());
}

double psnr(const ImagePlane& a, const ImagePlane& b) {
  if (!a.same_shape(b)) throw ArgumentError("psnr: shape mismatch");
  const double m = mse(a, b);
  if (m < 1e-12) return kPsnrCap;
  return 10.0 * std::log10(1.0 / m);
}

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

// "Valid" separable Gaussian filtering of one plane.
std::vector<double> filter_valid(std::span<const double> src, int h, int w, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (int t = 0; t < n; ++t) acc += k[t] * src[static_cast<std::size_t>(r) * w + c + t];
      rows[static_cast<std::size_t>(r) * ow + c] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (int t = 0; t < n; ++t) acc += k[t] * rows[static_cast<std::size_t>(r + t) * ow + c];
      out[static_cast<std::size_t>(r) * ow + c] = acc;
    }
  return out;
}

}  // namespace

double ssim(const ImagePlane& a, const ImagePlane& b) {
  if (!a.same_shape(b)) throw ArgumentError("ssim: shape mismatch");
  if (std::min(a.height(), a.width()) < kSsimWindow) throw ArgumentError("ssim: image smaller than 11x11 window");
  constexpr double c1 = (0.01 * 1.0) * (0.01 * 1.0);
  constexpr double c2 = (0.03 * 1.0) * (0.03 * 1.0);
  std::vector<double> k(kSsimWindow);
  for (int i = 0; i < kSsimWindow; ++i) {
    const double x = i - kSsimWindow / 2;
    k[i] = std::exp(-x * x / (2 * kSsimSigma * kSsimSigma));
  }
  const double ks = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= ks;

  const int h = a.height(), w = a.width();
  double total = 0.0;
  std::vector<double> xx(a.plane_size()), yy(a.plane_size()), xy(a.plane_size());
  for (int ch = 0; ch < a.channels(); ++ch) {
    const auto x = a.plane(ch), y = b.plane(ch);
    for (std::size_t i = 0; i < x.size(); ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, k), my = filter_valid(y, h, w, k);
    const auto sxx = filter_valid(xx, h, w, k), syy = filter_valid(yy, h, w, k), sxy = filter_valid(xy, h, w, k);
    double acc = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cov = sxy[i] - mx[i] * my[i];
      acc += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += acc / static_cast<double>(mx.size());
  }
  return total / a.channels();
}

namespace {

std::pair<std::size_t, std::size_t> overlap_counts(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_shape(b)) throw ArgumentError("mask metric: shape mismatch");
  std::size_t inter = 0, uni = 0;
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    inter += (da[i] && db[i]);
    uni += (da[i] || db[i]);
  }
  return {inter, uni};
}

}  // namespace

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  const auto [inter, uni] = overlap_counts(a, b);
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double mask_dice(const BinaryMask& a, const BinaryMask& b) {
  const auto [inter, uni] = overlap_counts(a, b);
  const std::size_t total = a.count() + b.count();
  if (total == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

}  // namespace firm
