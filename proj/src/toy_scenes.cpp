#include "firm/toy_scenes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "firm/errors.hpp"
#include "firm/png_io.hpp"
#include "firm/seeding.hpp"

namespace firm::toy {

Scene make_scene(const SceneOptions& o, std::mt19937_64& rng) {
  if (o.min_shapes < 1 || o.max_shapes < o.min_shapes) throw ArgumentError("toy scene: bad shape count range");
  std::uniform_real_distribution<double> bg(o.background_lo, o.background_hi);
  std::uniform_real_distribution<double> fg(o.foreground_lo, o.foreground_hi);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> count(o.min_shapes, o.max_shapes);

  Scene scene{ImagePlane(o.height, o.width, 3), {}};
  double c0[3], c1[3];
  for (int ch = 0; ch < 3; ++ch) {
    c0[ch] = o.background ? bg(rng) : 0.0;
    c1[ch] = o.background ? bg(rng) : 0.0;
  }
  const double angle = unit(rng) * 2.0 * 3.14159265358979323846;
  const double ux = std::cos(angle), uy = std::sin(angle);
  for (int r = 0; r < o.height; ++r)
    for (int c = 0; c < o.width; ++c) {
      const double t = 0.5 + 0.5 * (ux * (c / double(o.width) - 0.5) + uy * (r / double(o.height) - 0.5)) * 1.4;
      for (int ch = 0; ch < 3; ++ch) scene.image.at(r, c, ch) = c0[ch] + (c1[ch] - c0[ch]) * std::clamp(t, 0.0, 1.0);
    }

  const int side = std::min(o.height, o.width);
  const int n = count(rng);
  std::vector<BinaryMask> masks;
  for (int s = 0; s < n; ++s) {
    const double radius = side * (o.min_radius + (o.max_radius - o.min_radius) * unit(rng));
    const double cy = radius * 0.6 + unit(rng) * (o.height - 1.2 * radius);
    const double cx = radius * 0.6 + unit(rng) * (o.width - 1.2 * radius);
    const bool disc = o.discs_only || unit(rng) < 0.5;
    const double aspect = 0.6 + 0.8 * unit(rng);
    double color[3];
    for (double& v : color) v = fg(rng);
    BinaryMask m(o.height, o.width);
    for (int r = 0; r < o.height; ++r)
      for (int c = 0; c < o.width; ++c) {
        const double dy = r + 0.5 - cy, dx = c + 0.5 - cx;
        const bool inside = disc ? dx * dx + dy * dy <= radius * radius
                                 : std::abs(dx) <= radius * aspect && std::abs(dy) <= radius / aspect;
        if (!inside) continue;
        m.set(r, c, true);
        for (int ch = 0; ch < 3; ++ch) scene.image.at(r, c, ch) = color[ch];
        for (auto& prev : masks) prev.set(r, c, false);  // later shapes occlude earlier ones
      }
    masks.push_back(std::move(m));
  }
  for (auto& m : masks)
    if (m.count() > 0) scene.instances.push_back(std::move(m));
  return scene;
}

std::filesystem::path write_corpus(const std::filesystem::path& out_dir, int n, std::uint64_t seed,
                                   const SceneOptions& opts) {
  if (n < 0) throw ArgumentError("corpus size must be non-negative");
  std::filesystem::create_directories(out_dir);
  const auto manifest = out_dir / "source.jsonl";
  std::ofstream os(manifest);
  if (!os) throw DataError("cannot write " + manifest.string());
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const Scene scene = make_scene(opts, rng);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "img_%05d", i);
    nlohmann::json rec;
    rec["image"] = std::string(stem) + ".png";
    write_png(out_dir / rec["image"].get<std::string>(), scene.image);
    rec["instances"] = nlohmann::json::array();
    for (std::size_t k = 0; k < scene.instances.size(); ++k) {
      const std::string name = std::string(stem) + "_inst" + std::to_string(k) + ".png";
      write_mask_png(out_dir / name, scene.instances[k]);
      rec["instances"].push_back(name);
    }
    os << rec.dump() << '\n';
  }
  return manifest;
}

}  // namespace firm::toy
