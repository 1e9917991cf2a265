#pragma once

// Image and mask containers plus the resampling, filtering and metric
// primitives shared by every other module. Pixel data is stored planar
// (channel-major) so planes map directly onto network tensors.

#include <cstdint>
#include <span>
#include <vector>

namespace firm {

struct PixelCoord {
  int row = 0;
  int col = 0;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

class ImagePlane {
 public:
  ImagePlane() = default;
  ImagePlane(int height, int width, int channels, double fill = 0.0);
  ImagePlane(int height, int width, int channels, std::vector<double> planar);

  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  int channels() const noexcept { return c_; }
  std::size_t plane_size() const noexcept { return static_cast<std::size_t>(h_) * w_; }
  bool empty() const noexcept { return data_.empty(); }

  double& at(int row, int col, int ch) { return data_[index(row, col, ch)]; }
  double at(int row, int col, int ch) const { return data_[index(row, col, ch)]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<const double> plane(int ch) const {
    return std::span<const double>(data_).subspan(ch * plane_size(), plane_size());
  }

  // Copy with every value clamped to [0,1]; non-finite values map to 0.
  ImagePlane clamped() const;
  bool same_shape(const ImagePlane& o) const noexcept {
    return h_ == o.h_ && w_ == o.w_ && c_ == o.c_;
  }
  friend bool operator==(const ImagePlane&, const ImagePlane&) = default;

 private:
  std::size_t index(int row, int col, int ch) const noexcept {
    return (static_cast<std::size_t>(ch) * h_ + row) * w_ + col;
  }
  int h_ = 0, w_ = 0, c_ = 0;
  std::vector<double> data_;
};

class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width, bool fill = false);

  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  std::size_t size() const noexcept { return data_.size(); }

  bool at(int row, int col) const { return data_[static_cast<std::size_t>(row) * w_ + col] != 0; }
  void set(int row, int col, bool v) { data_[static_cast<std::size_t>(row) * w_ + col] = v ? 1 : 0; }
  std::span<const std::uint8_t> data() const noexcept { return data_; }
  std::span<std::uint8_t> data() noexcept { return data_; }

  std::size_t count() const noexcept;
  bool same_shape(const BinaryMask& o) const noexcept { return h_ == o.h_ && w_ == o.w_; }
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  int h_ = 0, w_ = 0;
  std::vector<std::uint8_t> data_;
};

struct GradientField {
  ImagePlane gx;
  ImagePlane gy;
};

// Separable sampled Gaussian, radius ceil(3 sigma), reflect-101 borders.
ImagePlane gaussian_blur(const ImagePlane& img, double sigma);
std::vector<double> gaussian_kernel(double sigma);

// Half-pixel-centre bilinear resampling (sample centres at (i+0.5)/N).
ImagePlane resize_bilinear(const ImagePlane& img, int out_h, int out_w);

// Forward differences, zero in the last column (gx) / last row (gy).
GradientField spatial_gradient(const ImagePlane& img);

BinaryMask dilate(const BinaryMask& mask, int radius);
BinaryMask threshold(const ImagePlane& single_channel, double above);
ImagePlane to_plane(const BinaryMask& mask);

inline constexpr double kPsnrCap = 100.0;

double mse(const ImagePlane& a, const ImagePlane& b);
double psnr(const ImagePlane& a, const ImagePlane& b);
// Mean SSIM over fully-covered 11x11 windows (Gaussian sigma 1.5), averaged over channels.
double ssim(const ImagePlane& a, const ImagePlane& b);

double mask_iou(const BinaryMask& a, const BinaryMask& b);
double mask_dice(const BinaryMask& a, const BinaryMask& b);

namespace detail {

// Two source taps and the weight of the second one for one output index.
struct ResizeTap {
  int i0;
  int i1;
  double t;
};
std::vector<ResizeTap> bilinear_taps(int in_size, int out_size);
int reflect101(int i, int n);

}  // namespace detail

}  // namespace firm
