#include "firm/png_io.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>

#include "firm/errors.hpp"

namespace firm {

std::uint8_t to_byte(double v) {
  if (!std::isfinite(v)) return 0;
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace {

cv::Mat to_mat(const ImagePlane& img) {
  const int h = img.height(), w = img.width();
  if (img.channels() == 1) {
    cv::Mat m(h, w, CV_8UC1);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) m.at<std::uint8_t>(r, c) = to_byte(img.at(r, c, 0));
    return m;
  }
  cv::Mat m(h, w, CV_8UC3);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      auto& px = m.at<cv::Vec3b>(r, c);
      px[0] = to_byte(img.at(r, c, 2));  // OpenCV keeps BGR order
      px[1] = to_byte(img.at(r, c, 1));
      px[2] = to_byte(img.at(r, c, 0));
    }
  return m;
}

ImagePlane from_mat(const cv::Mat& m) {
  if (m.empty()) throw DataError("PNG decode failed");
  if (m.depth() != CV_8U) throw DataError("only 8-bit PNG is supported");
  const int h = m.rows, w = m.cols;
  if (m.channels() == 1) {
    ImagePlane img(h, w, 1);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) img.at(r, c, 0) = m.at<std::uint8_t>(r, c) / 255.0;
    return img;
  }
  ImagePlane img(h, w, 3);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::uint8_t* px = m.ptr<std::uint8_t>(r) + static_cast<std::size_t>(c) * m.channels();
      img.at(r, c, 0) = px[2] / 255.0;
      img.at(r, c, 1) = px[1] / 255.0;
      img.at(r, c, 2) = px[0] / 255.0;
    }
  return img;
}

}  // namespace

ImagePlane read_png(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DataError("cannot read image: " + path.string());
  return from_mat(m);
}

void write_png(const std::filesystem::path& path, const ImagePlane& img) {
  if (!cv::imwrite(path.string(), to_mat(img))) throw DataError("cannot write image: " + path.string());
}

std::vector<std::uint8_t> encode_png(const ImagePlane& img) {
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", to_mat(img), out)) throw DataError("PNG encode failed");
  return out;
}

ImagePlane decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.empty()) throw DataError("empty image payload");
  return from_mat(cv::imdecode(bytes, cv::IMREAD_UNCHANGED));
}

BinaryMask read_mask_png(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw DataError("cannot read mask: " + path.string());
  BinaryMask mask(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) mask.set(r, c, m.at<std::uint8_t>(r, c) > 127);
  return mask;
}

void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask) {
  std::vector<std::uint8_t> levels(mask.data().begin(), mask.data().end());
  for (auto& v : levels) v = v ? 255 : 0;
  write_gray_png(path, mask.height(), mask.width(), levels);
}

std::vector<std::uint8_t> encode_gray_png(int height, int width, const std::vector<std::uint8_t>& levels) {
  cv::Mat m(height, width, CV_8UC1, const_cast<std::uint8_t*>(levels.data()));
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", m, out)) throw DataError("PNG encode failed");
  return out;
}

void write_gray_png(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& levels) {
  cv::Mat m(height, width, CV_8UC1, const_cast<std::uint8_t*>(levels.data()));
  if (!cv::imwrite(path.string(), m)) throw DataError("cannot write image: " + path.string());
}

std::vector<std::uint8_t> read_gray_png(const std::filesystem::path& path, int& height, int& width) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw DataError("cannot read image: " + path.string());
  height = m.rows;
  width = m.cols;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(m.rows) * m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) out[static_cast<std::size_t>(r) * m.cols + c] = m.at<std::uint8_t>(r, c);
  return out;
}

}  // namespace firm
