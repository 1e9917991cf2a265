#pragma once

// User guidance conversion: any mix of points, boxes, strokes and text with
// reflection/transmission polarity becomes one three-level contrastive mask.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "firm/imaging.hpp"
#include "firm/prompts.hpp"

namespace firm {

enum class Polarity { reflection, transmission };
enum class GuidanceKind { point, box, stroke, text };

struct Stroke {
  std::vector<PixelCoord> points;
  friend bool operator==(const Stroke&, const Stroke&) = default;
};

struct TextQuery {
  std::string text;
  friend bool operator==(const TextQuery&, const TextQuery&) = default;
};

struct Guidance {
  Polarity polarity = Polarity::reflection;
  std::variant<PixelCoord, Box, Stroke, TextQuery> payload;
  nlohmann::json extra = nlohmann::json::object();  // unknown fields, preserved verbatim

  GuidanceKind kind() const noexcept { return static_cast<GuidanceKind>(payload.index()); }
  friend bool operator==(const Guidance&, const Guidance&) = default;
};

const char* to_string(Polarity p);
const char* to_string(GuidanceKind k);

// Three-level map: 0 non-annotated, 0.5 transmission, 1 reflection.
class ContrastiveMask {
 public:
  enum Level : std::uint8_t { none = 0, transmission = 1, reflection = 2 };

  ContrastiveMask() = default;
  ContrastiveMask(int height, int width);

  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  Level level(int row, int col) const { return static_cast<Level>(levels_[idx(row, col)]); }
  void set(int row, int col, Level l) { levels_[idx(row, col)] = l; }
  double value(int row, int col) const;

  ImagePlane to_plane() const;                  // values {0, 0.5, 1}
  std::vector<std::uint8_t> gray_levels() const;  // {0, 128, 255}
  static ContrastiveMask from_gray_levels(int height, int width, const std::vector<std::uint8_t>& gray);
  static ContrastiveMask from_plane(const ImagePlane& plane);

  BinaryMask reflection_mask() const;
  BinaryMask transmission_mask() const;
  std::size_t area(Level l) const;
  friend bool operator==(const ContrastiveMask&, const ContrastiveMask&) = default;

 private:
  std::size_t idx(int row, int col) const { return static_cast<std::size_t>(row) * w_ + col; }
  int h_ = 0, w_ = 0;
  std::vector<std::uint8_t> levels_;
};

// Reflection precedence where both masks are set.
ContrastiveMask assemble_contrastive_mask(const BinaryMask& refl, const BinaryMask& trans);

// n points at equal arc-length spacing along the polyline, endpoints included.
std::vector<PixelCoord> stroke_to_points(const std::vector<PixelCoord>& polyline, int n);

class VisualSegmenter {
 public:
  virtual ~VisualSegmenter() = default;
  virtual BinaryMask segment(const ImagePlane& image, const PromptSet& prompts) const = 0;
};

// Pluggable text-to-mask model.
class TextSegmenter {
 public:
  virtual ~TextSegmenter() = default;
  virtual std::string name() const = 0;
  virtual BinaryMask segment(const ImagePlane& image, const std::string& text) const = 0;
};

struct SegmenterRegistry {
  std::shared_ptr<const VisualSegmenter> visual;
  std::shared_ptr<const TextSegmenter> text;
};

inline constexpr int kDefaultStrokeSamples = 8;

struct ConvertOptions {
  int stroke_samples = kDefaultStrokeSamples;
  bool parallel = false;  // issue the two polarity groups concurrently
};

// Throws ArgumentError for guidance outside the image and
// UnsupportedGuidance for text without a configured text segmenter.
void validate_guidance(const std::vector<Guidance>& guidance, int height, int width);
ContrastiveMask convert(const ImagePlane& image, const std::vector<Guidance>& guidance,
                        const SegmenterRegistry& segmenters, const ConvertOptions& opts = {});

// ---- annotation files -----------------------------------------------------

struct AnnotationRecord {
  std::string image_id;
  std::vector<Guidance> guidance;
  std::optional<std::string> gt_mask;
  nlohmann::json extra = nlohmann::json::object();
  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

inline constexpr int kAnnotationSchema = 1;

nlohmann::json guidance_to_json(const Guidance& g);
Guidance guidance_from_json(const nlohmann::json& j);
nlohmann::json guidance_list_to_json(const std::vector<Guidance>& list);
std::vector<Guidance> guidance_list_from_json(const nlohmann::json& j);

std::vector<AnnotationRecord> read_annotations(const std::filesystem::path& path);
void write_annotations(const std::vector<AnnotationRecord>& records, const std::filesystem::path& path);
// Parses text, reporting malformed JSON with its line number.
nlohmann::json parse_json_with_lines(const std::string& text, const std::string& source);

}  // namespace firm
