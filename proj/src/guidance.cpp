#include "firm/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <sstream>

#include "firm/errors.hpp"

namespace firm {

using nlohmann::json;

const char* to_string(Polarity p) { return p == Polarity::reflection ? "reflection" : "transmission"; }

const char* to_string(GuidanceKind k) {
  switch (k) {
    case GuidanceKind::point: return "point";
    case GuidanceKind::box: return "box";
    case GuidanceKind::stroke: return "stroke";
    case GuidanceKind::text: return "text";
  }
  return "unknown";
}

ContrastiveMask::ContrastiveMask(int height, int width) : h_(height), w_(width) {
  if (height < 1 || width < 1) throw ArgumentError("contrastive mask dimensions must be positive");
  levels_.assign(static_cast<std::size_t>(height) * width, none);
}

double ContrastiveMask::value(int row, int col) const {
  switch (level(row, col)) {
    case reflection: return 1.0;
    case transmission: return 0.5;
    default: return 0.0;
  }
}

ImagePlane ContrastiveMask::to_plane() const {
  ImagePlane p(h_, w_, 1);
  for (int r = 0; r < h_; ++r)
    for (int c = 0; c < w_; ++c) p.at(r, c, 0) = value(r, c);
  return p;
}

std::vector<std::uint8_t> ContrastiveMask::gray_levels() const {
  std::vector<std::uint8_t> g(levels_.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = levels_[i] == reflection ? 255 : (levels_[i] == transmission ? 128 : 0);
  return g;
}

ContrastiveMask ContrastiveMask::from_gray_levels(int height, int width, const std::vector<std::uint8_t>& gray) {
  ContrastiveMask m(height, width);
  if (gray.size() != m.levels_.size()) throw ArgumentError("contrastive mask: buffer size mismatch");
  for (std::size_t i = 0; i < gray.size(); ++i) {
    switch (gray[i]) {
      case 0: m.levels_[i] = none; break;
      case 128: m.levels_[i] = transmission; break;
      case 255: m.levels_[i] = reflection; break;
      default: throw DataError("contrastive mask contains gray level " + std::to_string(gray[i]));
    }
  }
  return m;
}

ContrastiveMask ContrastiveMask::from_plane(const ImagePlane& plane) {
  if (plane.channels() != 1) throw ArgumentError("contrastive mask plane must be single-channel");
  ContrastiveMask m(plane.height(), plane.width());
  for (int r = 0; r < plane.height(); ++r)
    for (int c = 0; c < plane.width(); ++c) {
      const double v = plane.at(r, c, 0);
      if (v == 1.0) m.set(r, c, reflection);
      else if (v == 0.5) m.set(r, c, transmission);
      else if (v != 0.0) throw ArgumentError("contrastive mask value outside {0, 0.5, 1}");
    }
  return m;
}

BinaryMask ContrastiveMask::reflection_mask() const {
  BinaryMask b(h_, w_);
  for (int r = 0; r < h_; ++r)
    for (int c = 0; c < w_; ++c) b.set(r, c, level(r, c) == reflection);
  return b;
}

BinaryMask ContrastiveMask::transmission_mask() const {
  BinaryMask b(h_, w_);
  for (int r = 0; r < h_; ++r)
    for (int c = 0; c < w_; ++c) b.set(r, c, level(r, c) == transmission);
  return b;
}

std::size_t ContrastiveMask::area(Level l) const {
  return static_cast<std::size_t>(std::count(levels_.begin(), levels_.end(), static_cast<std::uint8_t>(l)));
}

ContrastiveMask assemble_contrastive_mask(const BinaryMask& refl, const BinaryMask& trans) {
  if (!refl.same_shape(trans)) throw ArgumentError("assemble_contrastive_mask: shape mismatch");
  ContrastiveMask m(refl.height(), refl.width());
  for (int r = 0; r < refl.height(); ++r)
    for (int c = 0; c < refl.width(); ++c) {
      if (refl.at(r, c)) m.set(r, c, ContrastiveMask::reflection);
      else if (trans.at(r, c)) m.set(r, c, ContrastiveMask::transmission);
    }
  return m;
}

std::vector<PixelCoord> stroke_to_points(const std::vector<PixelCoord>& polyline, int n) {
  if (n < 2) throw ArgumentError("stroke_to_points: need at least 2 samples");
  if (polyline.size() < 2) throw ArgumentError("stroke_to_points: polyline needs at least 2 vertices");
  std::vector<double> cum(polyline.size(), 0.0);
  for (std::size_t i = 1; i < polyline.size(); ++i)
    cum[i] = cum[i - 1] + std::hypot(polyline[i].row - polyline[i - 1].row, polyline[i].col - polyline[i - 1].col);
  const double total = cum.back();
  std::vector<PixelCoord> out;
  out.reserve(static_cast<std::size_t>(n));
  std::size_t seg = 1;
  for (int k = 0; k < n; ++k) {
    const double target = total * k / (n - 1);
    while (seg + 1 < polyline.size() && cum[seg] < target) ++seg;
    const double len = cum[seg] - cum[seg - 1];
    const double t = len > 0 ? std::clamp((target - cum[seg - 1]) / len, 0.0, 1.0) : 0.0;
    const auto& a = polyline[seg - 1];
    const auto& b = polyline[seg];
    out.push_back({static_cast<int>(std::lround(a.row + t * (b.row - a.row))),
                   static_cast<int>(std::lround(a.col + t * (b.col - a.col)))});
  }
  out.front() = polyline.front();
  out.back() = polyline.back();
  return out;
}

namespace {

bool inside(const PixelCoord& p, int h, int w) { return p.row >= 0 && p.row < h && p.col >= 0 && p.col < w; }

std::string describe(const Guidance& g, std::size_t i) {
  return "guidance[" + std::to_string(i) + "] (" + to_string(g.kind()) + ")";
}

struct PolarityGroup {
  PromptSet visual;              // positives of this polarity only
  std::vector<PixelCoord> pins;  // pixels the user marked with this polarity
  std::vector<std::string> texts;
};

}  // namespace

void validate_guidance(const std::vector<Guidance>& guidance, int h, int w) {
  for (std::size_t i = 0; i < guidance.size(); ++i) {
    const auto& g = guidance[i];
    const auto fail = [&](const std::string& why) { throw ArgumentError(describe(g, i) + ": " + why); };
    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, PixelCoord>) {
            if (!inside(p, h, w)) fail("point outside image bounds");
          } else if constexpr (std::is_same_v<T, Box>) {
            if (p.r0 > p.r1 || p.c0 > p.c1) fail("box corners must satisfy r0<=r1, c0<=c1");
            if (!inside({p.r0, p.c0}, h, w) || !inside({p.r1, p.c1}, h, w)) fail("box outside image bounds");
          } else if constexpr (std::is_same_v<T, Stroke>) {
            if (p.points.size() < 2) fail("stroke needs at least 2 points");
            for (const auto& q : p.points)
              if (!inside(q, h, w)) fail("stroke point outside image bounds");
          } else {
            if (p.text.empty()) fail("text guidance must be non-empty");
          }
        },
        g.payload);
  }
}

ContrastiveMask convert(const ImagePlane& image, const std::vector<Guidance>& guidance,
                        const SegmenterRegistry& segmenters, const ConvertOptions& opts) {
  const int h = image.height(), w = image.width();
  validate_guidance(guidance, h, w);
  if (guidance.empty()) return ContrastiveMask(h, w);

  PolarityGroup groups[2];
  for (const auto& g : guidance) {
    auto& grp = groups[g.polarity == Polarity::reflection ? 0 : 1];
    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, PixelCoord>) {
            grp.visual.points.push_back({p, true});
            grp.pins.push_back(p);
          } else if constexpr (std::is_same_v<T, Box>) {
            grp.visual.boxes.push_back({p, true});
          } else if constexpr (std::is_same_v<T, Stroke>) {
            for (const auto& q : stroke_to_points(p.points, opts.stroke_samples)) {
              grp.visual.points.push_back({q, true});
              grp.pins.push_back(q);
            }
          } else {
            grp.texts.push_back(p.text);
          }
        },
        g.payload);
  }
  const bool needs_text = !groups[0].texts.empty() || !groups[1].texts.empty();
  if (needs_text && !segmenters.text)
    throw UnsupportedGuidance("text", "text guidance requires a text segmentation adapter; none is configured");
  const bool needs_visual = !groups[0].visual.empty() || !groups[1].visual.empty();
  if (needs_visual && !segmenters.visual)
    throw UnsupportedGuidance("visual", "visual guidance requires a visual segmenter; none is configured");

  // Each group is segmented with its own prompts as positives and the
  // other group's point prompts as negatives.
  auto segment_group = [&](int self) {
    const auto& grp = groups[self];
    const auto& other = groups[1 - self];
    BinaryMask mask(h, w);
    if (!grp.visual.empty()) {
      PromptSet prompts = grp.visual;
      for (const auto& p : other.pins) prompts.points.push_back({p, false});
      mask = segmenters.visual->segment(image, prompts);
      if (mask.height() != h || mask.width() != w) throw InvariantViolation("segmenter returned wrong mask size");
    }
    for (const auto& t : grp.texts) {
      const BinaryMask m = segmenters.text->segment(image, t);
      if (!m.same_shape(mask)) throw InvariantViolation("text segmenter returned wrong mask size");
      for (std::size_t i = 0; i < mask.size(); ++i) mask.data()[i] |= m.data()[i];
    }
    for (const auto& p : grp.pins) mask.set(p.row, p.col, true);
    for (const auto& p : other.pins) mask.set(p.row, p.col, false);
    return mask;
  };

  BinaryMask refl, trans;
  if (opts.parallel) {
    auto fut = std::async(std::launch::async, segment_group, 1);
    refl = segment_group(0);
    trans = fut.get();
  } else {
    refl = segment_group(0);
    trans = segment_group(1);
  }
  return assemble_contrastive_mask(refl, trans);
}

// ---- annotation files -----------------------------------------------------

namespace {

json point_json(const PixelCoord& p) { return json::array({p.row, p.col}); }

PixelCoord point_from(const json& j) {
  if (!j.is_array() || j.size() != 2) throw DataError("point must be [row, col]");
  return {j.at(0).get<int>(), j.at(1).get<int>()};
}

Polarity polarity_from(const json& j) {
  const auto s = j.get<std::string>();
  if (s == "reflection") return Polarity::reflection;
  if (s == "transmission") return Polarity::transmission;
  throw DataError("unknown polarity '" + s + "'");
}

}  // namespace

json guidance_to_json(const Guidance& g) {
  json j = g.extra;
  j["kind"] = to_string(g.kind());
  j["polarity"] = to_string(g.polarity);
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, PixelCoord>) {
          j["point"] = point_json(p);
        } else if constexpr (std::is_same_v<T, Box>) {
          j["box"] = json::array({p.r0, p.c0, p.r1, p.c1});
        } else if constexpr (std::is_same_v<T, Stroke>) {
          j["points"] = json::array();
          for (const auto& q : p.points) j["points"].push_back(point_json(q));
        } else {
          j["text"] = p.text;
        }
      },
      g.payload);
  return j;
}

Guidance guidance_from_json(const json& j) {
  try {
    if (!j.is_object()) throw DataError("guidance must be an object");
    Guidance g;
    g.polarity = polarity_from(j.at("polarity"));
    const auto kind = j.at("kind").get<std::string>();
    json extra = j;
    extra.erase("kind");
    extra.erase("polarity");
    if (kind == "point") {
      g.payload = point_from(j.at("point"));
      extra.erase("point");
    } else if (kind == "box") {
      const auto& b = j.at("box");
      if (!b.is_array() || b.size() != 4) throw DataError("box must be [r0, c0, r1, c1]");
      g.payload = Box{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
      extra.erase("box");
    } else if (kind == "stroke") {
      Stroke s;
      for (const auto& q : j.at("points")) s.points.push_back(point_from(q));
      g.payload = std::move(s);
      extra.erase("points");
    } else if (kind == "text") {
      g.payload = TextQuery{j.at("text").get<std::string>()};
      extra.erase("text");
    } else {
      throw DataError("unknown guidance kind '" + kind + "'");
    }
    g.extra = std::move(extra);
    return g;
  } catch (const json::exception& ex) {
    throw DataError(std::string("malformed guidance: ") + ex.what());
  }
}

json guidance_list_to_json(const std::vector<Guidance>& list) {
  json arr = json::array();
  for (const auto& g : list) arr.push_back(guidance_to_json(g));
  return arr;
}

std::vector<Guidance> guidance_list_from_json(const json& j) {
  if (!j.is_array()) throw DataError("guidance list must be a JSON array");
  std::vector<Guidance> out;
  for (const auto& g : j) out.push_back(guidance_from_json(g));
  return out;
}

json parse_json_with_lines(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& ex) {
    const std::size_t upto = std::min<std::size_t>(ex.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto > 0 ? upto - 1 : 0), '\n');
    throw DataError(source + ":" + std::to_string(line) + ": parse error: " + ex.what());
  }
}

std::vector<AnnotationRecord> read_annotations(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read annotations: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  const json root = parse_json_with_lines(ss.str(), path.string());
  if (!root.is_array()) throw DataError(path.string() + ": annotation file must hold a JSON array");
  std::vector<AnnotationRecord> out;
  for (const auto& r : root) {
    try {
      if (r.value("schema", kAnnotationSchema) != kAnnotationSchema)
        throw DataError("unsupported annotation schema " + r.at("schema").dump());
      AnnotationRecord rec;
      rec.image_id = r.at("image").get<std::string>();
      rec.guidance = guidance_list_from_json(r.at("guidance"));
      if (r.contains("gt_mask") && !r.at("gt_mask").is_null()) rec.gt_mask = r.at("gt_mask").get<std::string>();
      rec.extra = r;
      for (const char* k : {"schema", "image", "guidance", "gt_mask"}) rec.extra.erase(k);
      out.push_back(std::move(rec));
    } catch (const json::exception& ex) {
      throw DataError(path.string() + ": malformed annotation record: " + ex.what());
    }
  }
  return out;
}

void write_annotations(const std::vector<AnnotationRecord>& records, const std::filesystem::path& path) {
  json root = json::array();
  for (const auto& rec : records) {
    json r = rec.extra;
    r["schema"] = kAnnotationSchema;
    r["image"] = rec.image_id;
    r["guidance"] = guidance_list_to_json(rec.guidance);
    if (rec.gt_mask) r["gt_mask"] = *rec.gt_mask;
    root.push_back(std::move(r));
  }
  std::ofstream os(path);
  if (!os) throw DataError("cannot write annotations: " + path.string());
  os << root.dump(2) << '\n';
}

}  // namespace firm
