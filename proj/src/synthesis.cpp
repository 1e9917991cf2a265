#include "firm/synthesis.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

#include "json.hpp"

#include "firm/errors.hpp"
#include "firm/png_io.hpp"
#include "firm/seeding.hpp"

namespace firm {

using nlohmann::json;

ImagePlane synthesize_blend(const ImagePlane& T, const ImagePlane& R, const SynthesisParams& params) {
  if (!T.same_shape(R)) throw ArgumentError("synthesize_blend: T and R shapes differ");
  if (T.channels() != 3) throw ArgumentError("synthesize_blend: inputs must be 3-channel");
  const ImagePlane blurred = gaussian_blur(R, params.sigma);
  ImagePlane I = T;
  auto out = I.data();
  const auto rb = blurred.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i] + params.beta * rb[i], 0.0, 1.0);
  return I;
}

ImagePlane residual_map(const ImagePlane& I, const ImagePlane& T) {
  if (!I.same_shape(T)) throw ArgumentError("residual_map: shape mismatch");
  ImagePlane out(I.height(), I.width(), 1);
  for (int r = 0; r < I.height(); ++r)
    for (int c = 0; c < I.width(); ++c) {
      double acc = 0.0;
      for (int ch = 0; ch < I.channels(); ++ch) acc += I.at(r, c, ch) - T.at(r, c, ch);
      out.at(r, c, 0) = std::max(0.0, acc / I.channels());
    }
  return out;
}

InstanceSelection select_reflection_instance(const ImagePlane& residual, const InstanceMaskSet& masks) {
  if (masks.empty()) throw ArgumentError("select_reflection_instance: empty instance set");
  if (residual.channels() != 1) throw ArgumentError("select_reflection_instance: residual must be single-channel");
  InstanceSelection best;
  for (std::size_t k = 0; k < masks.size(); ++k) {
    const auto& m = masks[k];
    if (m.height() != residual.height() || m.width() != residual.width())
      throw ArgumentError("select_reflection_instance: mask and residual shapes differ");
    double acc = 0.0;
    std::size_t support = 0;
    for (int r = 0; r < m.height(); ++r)
      for (int c = 0; c < m.width(); ++c)
        if (m.at(r, c)) {
          acc += residual.at(r, c, 0);
          ++support;
        }
    if (support == 0) continue;
    const double score = acc / static_cast<double>(support);
    if (score > best.score) {  // strict: lowest index wins ties
      best.score = score;
      best.index = k;
      best.found = true;
    }
  }
  if (!best.found) return best;
  const auto& m = masks[best.index];
  best.mask = BinaryMask(m.height(), m.width());
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c) best.mask.set(r, c, m.at(r, c) && residual.at(r, c, 0) > 0.0);
  return best;
}

std::pair<PixelCoord, PixelCoord> sample_contrastive_points(const BinaryMask& M_r, std::uint64_t seed) {
  std::vector<PixelCoord> pos, ring, neg;
  const BinaryMask grown = dilate(M_r, kNeighbourRadius);
  for (int r = 0; r < M_r.height(); ++r)
    for (int c = 0; c < M_r.width(); ++c) {
      if (M_r.at(r, c)) {
        pos.push_back({r, c});
      } else {
        neg.push_back({r, c});
        if (grown.at(r, c)) ring.push_back({r, c});
      }
    }
  if (pos.empty()) throw ArgumentError("sample_contrastive_points: mask has no positive pixel");
  if (neg.empty()) throw ArgumentError("sample_contrastive_points: mask has no negative pixel");
  const auto& pool = ring.empty() ? neg : ring;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_pos(0, pos.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_neg(0, pool.size() - 1);
  const PixelCoord p = pos[pick_pos(rng)];
  const PixelCoord n = pool[pick_neg(rng)];
  return {p, n};
}

SynthesisParams sample_params(const SynthesisRanges& ranges, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> s(ranges.sigma_min, ranges.sigma_max);
  std::uniform_real_distribution<double> b(ranges.beta_min, ranges.beta_max);
  SynthesisParams p;
  p.sigma = s(rng);
  p.beta = b(rng);
  p.seed = rng();
  return p;
}

std::optional<SynthesisSample> synthesize_sample(const ImagePlane& T, const ImagePlane& R, const InstanceMaskSet& masks,
                                                 const SynthesisParams& params) {
  SynthesisSample s{T, R, synthesize_blend(T, R, params), {}, {}, {}, params};
  const auto sel = select_reflection_instance(residual_map(s.I, T), masks);
  if (!sel.found) return std::nullopt;
  if (sel.mask.count() == sel.mask.size()) return std::nullopt;  // no room for a transmission point
  s.M_r = sel.mask;
  std::tie(s.p_pos, s.p_neg) = sample_contrastive_points(s.M_r, params.seed);
  return s;
}

// ---- datasets -------------------------------------------------------------

namespace {

json point_json(const PixelCoord& p) { return json::array({p.row, p.col}); }

PixelCoord point_from(const json& j) {
  if (!j.is_array() || j.size() != 2) throw DataError("point must be [row, col]");
  return {j[0].get<int>(), j[1].get<int>()};
}

struct LoadedSource {
  ImagePlane image;
  InstanceMaskSet masks;
};

BinaryMask resize_mask(const BinaryMask& m, int h, int w) {
  if (m.height() == h && m.width() == w) return m;
  return threshold(resize_bilinear(to_plane(m), h, w), 0.5);
}

}  // namespace

std::vector<SourceEntry> read_source_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read source manifest: " + path.string());
  const auto base = path.parent_path();
  std::vector<SourceEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      SourceEntry e;
      e.image = base / j.at("image").get<std::string>();
      for (const auto& m : j.at("instances")) e.instances.push_back(base / m.get<std::string>());
      out.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

DatasetManifest build_dataset(const std::filesystem::path& source_manifest, int n, std::uint64_t seed,
                              const std::filesystem::path& out_dir, const DatasetOptions& opts) {
  if (n < 0) throw ArgumentError("build_dataset: n must be non-negative");
  std::filesystem::create_directories(out_dir);
  DatasetManifest manifest;
  manifest.path = out_dir / "manifest.jsonl";

  std::vector<LoadedSource> sources;
  if (n > 0) {
    for (const auto& e : read_source_manifest(source_manifest)) {
      try {
        LoadedSource s{read_png(e.image), {}};
        if (s.image.channels() != 3) throw DataError("source image is not RGB: " + e.image.string());
        for (const auto& m : e.instances) {
          BinaryMask mask = resize_mask(read_mask_png(m), s.image.height(), s.image.width());
          if (mask.count() > 0) s.masks.push_back(std::move(mask));
        }
        sources.push_back(std::move(s));
      } catch (const DataError& ex) {
        std::cerr << "warning: skipping source entry: " << ex.what() << '\n';
      }
    }
    if (sources.size() < 2) throw DataError("build_dataset: need at least two readable source entries");
  }

  std::vector<std::optional<SynthesisSample>> samples(static_cast<std::size_t>(n));
  auto work = [&](int k) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    std::uniform_int_distribution<std::size_t> pick(0, sources.size() - 1);
    for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
      const std::size_t ti = pick(rng);
      std::size_t ri = pick(rng);
      if (ri == ti) ri = (ri + 1) % sources.size();
      const auto& T = sources[ti].image;
      const auto& src = sources[ri];
      if (src.masks.empty()) continue;
      ImagePlane R = resize_bilinear(src.image, T.height(), T.width());
      InstanceMaskSet masks;
      for (const auto& m : src.masks) masks.push_back(resize_mask(m, T.height(), T.width()));
      const auto params = sample_params(opts.ranges, rng);
      if (auto s = synthesize_sample(T, R, masks, params)) {
        samples[static_cast<std::size_t>(k)] = std::move(s);
        return;
      }
    }
  };
  const int threads = std::max(1, std::min(opts.threads, n));
  if (threads == 1) {
    for (int k = 0; k < n; ++k) work(k);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (int k = t; k < n; k += threads) work(k);
      });
    for (auto& th : pool) th.join();
  }

  std::ofstream os(manifest.path, std::ios::binary);
  if (!os) throw DataError("cannot write " + manifest.path.string());
  os << json{{"schema", 1}, {"kind", "firm-synthesis-manifest"}, {"seed", seed}, {"n", n}}.dump() << '\n';
  for (int k = 0; k < n; ++k) {
    auto& s = samples[static_cast<std::size_t>(k)];
    if (!s) {
      std::cerr << "warning: record " << k << " found no reflection instance after " << opts.max_attempts
                << " attempts; skipped\n";
      continue;
    }
    char id[32];
    std::snprintf(id, sizeof(id), "s%05d", k);
    SampleRecord rec{id, out_dir / (std::string(id) + "_T.png"), out_dir / (std::string(id) + "_R.png"),
                     out_dir / (std::string(id) + "_I.png"), out_dir / (std::string(id) + "_Mr.png"),
                     s->p_pos, s->p_neg, s->params};
    write_png(rec.T, s->T);
    write_png(rec.R, s->R);
    write_png(rec.I, s->I);
    write_mask_png(rec.M_r, s->M_r);
    json j;
    j["id"] = rec.id;
    j["T"] = rec.T.filename().string();
    j["R"] = rec.R.filename().string();
    j["I"] = rec.I.filename().string();
    j["M_r"] = rec.M_r.filename().string();
    j["p_pos"] = point_json(rec.p_pos);
    j["p_neg"] = point_json(rec.p_neg);
    j["params"] = {{"sigma", rec.params.sigma}, {"beta", rec.params.beta}, {"seed", rec.params.seed}};
    os << j.dump() << '\n';
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

DatasetManifest read_dataset_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read manifest: " + path.string());
  DatasetManifest m;
  m.path = path;
  const auto base = path.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      if (j.contains("schema")) continue;  // header
      SampleRecord r;
      r.id = j.at("id").get<std::string>();
      r.T = base / j.at("T").get<std::string>();
      r.R = base / j.at("R").get<std::string>();
      r.I = base / j.at("I").get<std::string>();
      r.M_r = base / j.at("M_r").get<std::string>();
      r.p_pos = point_from(j.at("p_pos"));
      r.p_neg = point_from(j.at("p_neg"));
      const auto& p = j.at("params");
      r.params = {p.at("sigma").get<double>(), p.at("beta").get<double>(), p.at("seed").get<std::uint64_t>()};
      m.records.push_back(std::move(r));
    } catch (const json::exception& ex) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return m;
}

}  // namespace firm
