#include "firm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "firm/errors.hpp"
#include "firm/png_io.hpp"
#include "firm/seeding.hpp"

namespace firm::pipeline {

using nlohmann::json;

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// Deterministic sample order: a fresh permutation per epoch.
class BatchOrder {
 public:
  BatchOrder(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) { reshuffle(); }
  std::size_t next() {
    if (pos_ == order_.size()) reshuffle();
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

BinaryMask resize_mask(const BinaryMask& m, int h, int w) {
  if (m.height() == h && m.width() == w) return m;
  return threshold(resize_bilinear(to_plane(m), h, w), 0.5);
}

PixelCoord scale_point(const PixelCoord& p, int h, int w, int nh, int nw) {
  auto map = [](int v, int from, int to) {
    return std::clamp(static_cast<int>(std::floor((v + 0.5) * to / from)), 0, to - 1);
  };
  return {map(p.row, h, nh), map(p.col, w, nw)};
}

}  // namespace

ContrastiveMask training_contrastive_mask(const BinaryMask& M_r) {
  const BinaryMask grown = dilate(M_r, kNeighbourRadius);
  return assemble_contrastive_mask(M_r, grown);
}

ImagePlane removal_guide(const removal::RemovalConfig& cfg, const ContrastiveMask& mask, const PixelCoord& p_pos,
                         const PixelCoord& p_neg) {
  if (cfg.mask_input == removal::MaskInput::raw_points)
    return removal::raw_point_mask(mask.height(), mask.width(), p_pos, p_neg);
  return mask.to_plane();
}

ImagePlane removal_guide(const removal::RemovalConfig& cfg, const ContrastiveMask& mask,
                         const std::vector<Guidance>& guidance) {
  if (cfg.mask_input != removal::MaskInput::raw_points) return mask.to_plane();
  ImagePlane m(mask.height(), mask.width(), 1);
  std::optional<PixelCoord> pos, neg;
  for (const auto& g : guidance) {
    const PixelCoord* p = std::get_if<PixelCoord>(&g.payload);
    if (!p) continue;
    auto& slot = g.polarity == Polarity::reflection ? pos : neg;
    if (!slot) slot = *p;
  }
  if (!pos && !neg) return m;
  // A missing polarity is stamped off-image so it leaves no trace.
  const PixelCoord off{-100, -100};
  return removal::raw_point_mask(mask.height(), mask.width(), pos.value_or(off), neg.value_or(off));
}

ImagePlane reflection_layer(const ImagePlane& I, const ImagePlane& T) {
  if (!I.same_shape(T)) throw ArgumentError("reflection_layer: shape mismatch");
  ImagePlane R = I;
  auto r = R.data();
  const auto t = T.data();
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::clamp(r[i] - t[i], 0.0, 1.0);
  return R;
}

RemovalExample make_example(const std::string& id, const ImagePlane& I, const ImagePlane& T, const BinaryMask& M_r,
                            const PixelCoord& p_pos, const PixelCoord& p_neg) {
  return {id, I, T, reflection_layer(I, T), training_contrastive_mask(M_r), p_pos, p_neg};
}

std::vector<RemovalExample> load_removal_examples(const fs::path& manifest, int limit) {
  const auto m = read_dataset_manifest(manifest);
  std::vector<RemovalExample> out;
  for (const auto& r : m.records) {
    if (limit > 0 && static_cast<int>(out.size()) >= limit) break;
    out.push_back(make_example(r.id, read_png(r.I), read_png(r.T), read_mask_png(r.M_r), r.p_pos, r.p_neg));
  }
  if (out.empty()) throw DataError("no records in " + manifest.string());
  return out;
}

std::vector<removal::TrainPair> to_train_pairs(const std::vector<RemovalExample>& examples,
                                               const removal::RemovalConfig& cfg) {
  std::vector<removal::TrainPair> pairs;
  for (const auto& e : examples) pairs.push_back({e.id, e.I, e.T, e.R, removal_guide(cfg, e.mask, e.p_pos, e.p_neg)});
  return pairs;
}

RemovalTrainResult train_removal(const removal::RemovalConfig& cfg, const std::vector<removal::TrainPair>& pairs,
                                 const RemovalTrainOptions& opts) {
  if (pairs.empty()) throw ArgumentError("train_removal: no training pairs");
  if (opts.iterations < 0 || opts.batch < 1) throw ArgumentError("train_removal: bad iteration or batch count");
  RemovalTrainResult res;
  res.model = std::make_shared<removal::RemovalModel>(cfg, derive_seed(opts.seed, 0));
  removal::RemovalTrainer trainer(*res.model, opts.extractor);
  BatchOrder order(pairs.size(), derive_seed(opts.seed, 1));

  std::ofstream log;
  if (!opts.log_csv.empty()) {
    log.open(opts.log_csv);
    if (!log) throw DataError("cannot write " + opts.log_csv.string());
    log << "iter,lr,pixel,gradient,perceptual,exclusion,total,probe_psnr\n";
  }
  const int total = opts.iterations;
  for (int it = 0; it < total; ++it) {
    std::vector<removal::TrainPair> batch;
    for (int b = 0; b < opts.batch; ++b) batch.push_back(pairs[order.next()]);
    const auto l = trainer.step(batch, it, total);
    res.curve.push_back(l);
    const bool last = it + 1 == total;
    if (log.is_open() && (last || (opts.log_every > 0 && it % opts.log_every == 0))) {
      const auto out = res.model->remove(pairs[0].I, pairs[0].guide);
      log << it << ',' << fmt(removal::cosine_lr(cfg, it, total)) << ',' << fmt(l.pixel) << ',' << fmt(l.gradient)
          << ',' << fmt(l.perceptual) << ',' << fmt(l.exclusion) << ',' << fmt(l.total) << ','
          << fmt(psnr(out.T, pairs[0].T)) << '\n';
    }
  }
  return res;
}

LayerScores score_removal(const removal::RemovalModel& model, const std::vector<removal::TrainPair>& pairs) {
  LayerScores s;
  if (pairs.empty()) return s;
  for (const auto& p : pairs) {
    const auto out = model.remove(p.I, p.guide);
    s.psnr_t += psnr(out.T, p.T);
    s.psnr_r += psnr(out.R, p.R);
    s.ssim_t += ssim(out.T, p.T);
    s.ssim_r += ssim(out.R, p.R);
  }
  const double n = static_cast<double>(pairs.size());
  s.psnr_t /= n;
  s.psnr_r /= n;
  s.ssim_t /= n;
  s.ssim_r /= n;
  return s;
}

// ---- SARM ---------------------------------------------------------------------

sarm::SarmSample resize_sample(const sarm::SarmSample& s, int size) {
  const int h = s.blended.height(), w = s.blended.width();
  if (h == size && w == size) return s;
  sarm::SarmSample r;
  r.clear = resize_bilinear(s.clear, size, size);
  r.blended = resize_bilinear(s.blended, size, size);
  r.target = resize_mask(s.target, size, size);
  for (auto p : s.prompts.points) {
    p.at = scale_point(p.at, h, w, size, size);
    r.prompts.points.push_back(p);
  }
  for (auto b : s.prompts.boxes) {
    const auto lo = scale_point({b.box.r0, b.box.c0}, h, w, size, size);
    const auto hi = scale_point({b.box.r1, b.box.c1}, h, w, size, size);
    b.box = {lo.row, lo.col, hi.row, hi.col};
    r.prompts.boxes.push_back(b);
  }
  return r;
}

std::vector<sarm::SarmSample> load_sarm_samples(const fs::path& manifest, int image_size, int limit) {
  const auto m = read_dataset_manifest(manifest);
  std::vector<sarm::SarmSample> out;
  for (const auto& r : m.records) {
    if (limit > 0 && static_cast<int>(out.size()) >= limit) break;
    sarm::SarmSample s{read_png(r.R), read_png(r.I), read_mask_png(r.M_r), {}};
    s.prompts.points = {{r.p_pos, true}, {r.p_neg, false}};
    out.push_back(resize_sample(s, image_size));
  }
  if (out.empty()) throw DataError("no records in " + manifest.string());
  return out;
}

std::vector<sarm::PretrainSample> load_pretrain_samples(const fs::path& source_manifest, int image_size,
                                                        std::uint64_t seed, int limit) {
  std::vector<sarm::PretrainSample> out;
  std::uint64_t k = 0;
  for (const auto& e : read_source_manifest(source_manifest)) {
    const ImagePlane img = resize_bilinear(read_png(e.image), image_size, image_size);
    for (const auto& path : e.instances) {
      if (limit > 0 && static_cast<int>(out.size()) >= limit) return out;
      const BinaryMask m = resize_mask(read_mask_png(path), image_size, image_size);
      const std::size_t n = m.count();
      ++k;
      if (n == 0 || n == m.size()) continue;
      const auto [pos, neg] = sample_contrastive_points(m, derive_seed(seed, k));
      out.push_back({img, m, {}});
      out.back().prompts.points = {{pos, true}, {neg, false}};
    }
  }
  return out;
}

std::shared_ptr<sarm::SarmModel> train_sarm(const sarm::SarmConfig& cfg, const std::vector<sarm::SarmSample>& samples,
                                            const SarmTrainOptions& opts) {
  if (samples.empty()) throw ArgumentError("train_sarm: no samples");
  if (opts.batch < 1 || opts.steps < 0 || opts.pretrain_steps < 0) throw ArgumentError("train_sarm: bad schedule");
  auto model = std::make_shared<sarm::SarmModel>(cfg, derive_seed(opts.seed, 0));
  std::ofstream log;
  if (!opts.log_csv.empty()) {
    log.open(opts.log_csv);
    if (!log) throw DataError("cannot write " + opts.log_csv.string());
    log << "phase,step,dice,focal,consistency,total\n";
  }

  std::vector<sarm::PretrainSample> pool;
  pool.reserve(samples.size() + opts.extra_pretrain.size());
  for (const auto& s : samples) pool.push_back({s.clear, s.target, s.prompts});
  pool.insert(pool.end(), opts.extra_pretrain.begin(), opts.extra_pretrain.end());

  model->unfreeze_baseline();
  nn::Adam adam(opts.pretrain_lr);
  BatchOrder pre_order(pool.size(), derive_seed(opts.seed, 1));
  for (int step = 0; step < opts.pretrain_steps; ++step) {
    std::vector<sarm::PretrainSample> batch;
    for (int b = 0; b < opts.batch; ++b) batch.push_back(pool[pre_order.next()]);
    const double loss = sarm::pretrain_step(*model, batch, adam);
    if (log.is_open()) log << "pretrain," << step << ",,,," << fmt(loss) << '\n';
  }

  model->freeze_baseline();
  model->init_adaptation_from_baseline();
  BatchOrder order(samples.size(), derive_seed(opts.seed, 2));
  sarm::TrainStepOptions so;
  so.lr = opts.lr;
  for (int step = 0; step < opts.steps; ++step) {
    std::vector<sarm::SarmSample> batch;
    for (int b = 0; b < opts.batch; ++b) batch.push_back(samples[order.next()]);
    const auto l = sarm::sarm_train_step(*model, batch, so);
    if (log.is_open())
      log << "adapt," << step << ',' << fmt(l.dice) << ',' << fmt(l.focal) << ',' << fmt(l.consistency) << ','
          << fmt(l.total) << '\n';
  }
  return model;
}

double mean_iou(const sarm::SarmModel& model, const std::vector<sarm::SarmSample>& samples, sarm::DecodeMode mode,
                bool on_clear) {
  if (samples.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& s : samples) acc += mask_iou(model.segment(on_clear ? s.clear : s.blended, s.prompts, mode), s.target);
  return acc / static_cast<double>(samples.size());
}

// ---- inference ------------------------------------------------------------------

InferResult infer(const ImagePlane& image, const std::vector<Guidance>& guidance, const SegmenterRegistry& segmenters,
                  const removal::RemovalModel& removal_model, const ConvertOptions& opts) {
  InferResult r;
  auto t0 = std::chrono::steady_clock::now();
  r.mask = convert(image, guidance, segmenters, opts);
  r.segment_ms = ms_since(t0);
  t0 = std::chrono::steady_clock::now();
  r.layers = removal_model.remove(image, removal_guide(removal_model.config(), r.mask, guidance));
  r.remove_ms = ms_since(t0);
  return r;
}

fs::path infer_manifest(const fs::path& manifest, const SegmenterRegistry& segmenters,
                        const removal::RemovalModel& removal_model, const fs::path& out_dir, int limit) {
  const auto m = read_dataset_manifest(manifest);
  fs::create_directories(out_dir);
  const auto path = out_dir / "predictions.jsonl";
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << json{{"schema", 1}, {"kind", "firm-predictions"}}.dump() << '\n';
  int done = 0;
  for (const auto& rec : m.records) {
    if (limit > 0 && done >= limit) break;
    const ImagePlane I = read_png(rec.I);
    std::vector<Guidance> g{{Polarity::reflection, rec.p_pos, json::object()},
                            {Polarity::transmission, rec.p_neg, json::object()}};
    const auto r = infer(I, g, segmenters, removal_model);
    const std::string t_name = rec.id + "_That.png", r_name = rec.id + "_Rhat.png", m_name = rec.id + "_mask.png";
    write_png(out_dir / t_name, r.layers.T);
    write_png(out_dir / r_name, r.layers.R);
    write_gray_png(out_dir / m_name, r.mask.height(), r.mask.width(), r.mask.gray_levels());
    os << json{{"id", rec.id}, {"T", t_name}, {"R", r_name}, {"mask", m_name}}.dump() << '\n';
    ++done;
  }
  return path;
}

// ---- evaluation -----------------------------------------------------------------

namespace {

struct EvalRecord {
  std::optional<ImagePlane> T, R;
  std::optional<BinaryMask> mask;
};

std::vector<std::pair<std::string, EvalRecord>> read_eval_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<std::pair<std::string, EvalRecord>> out;
  bool synthesis = false;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (j.contains("schema")) {
      synthesis = j.value("kind", "") == "firm-synthesis-manifest";
      continue;
    }
    if (!j.contains("id")) throw DataError(path.string() + ":" + std::to_string(lineno) + ": record without id");
    EvalRecord r;
    auto file = [&](const char* key) { return base / j.at(key).get<std::string>(); };
    if (j.contains("T")) r.T = read_png(file("T"));
    if (synthesis) {
      if (j.contains("I") && r.T) r.R = reflection_layer(read_png(file("I")), *r.T);
    } else if (j.contains("R")) {
      r.R = read_png(file("R"));
    }
    if (j.contains("mask")) {
      int h = 0, w = 0;
      const auto g = read_gray_png(file("mask"), h, w);
      r.mask = ContrastiveMask::from_gray_levels(h, w, g).reflection_mask();
    } else if (j.contains("M_r")) {
      r.mask = read_mask_png(file("M_r"));
    }
    out.emplace_back(j.at("id").get<std::string>(), std::move(r));
  }
  return out;
}

}  // namespace

json evaluate(const fs::path& predictions, const fs::path& ground_truth) {
  const auto pred = read_eval_manifest(predictions);
  const auto gt_list = read_eval_manifest(ground_truth);
  std::map<std::string, const EvalRecord*> gt;
  for (const auto& [id, r] : gt_list) gt[id] = &r;

  const char* metrics[] = {"psnr_t", "ssim_t", "psnr_r", "ssim_r", "iou", "dice"};
  std::map<std::string, std::pair<double, int>> sums;
  json rows = json::array();
  for (const auto& [id, p] : pred) {
    const auto it = gt.find(id);
    if (it == gt.end()) throw DataError("prediction '" + id + "' has no ground-truth record");
    const EvalRecord& g = *it->second;
    json row{{"id", id}};
    if (p.T && g.T) {
      row["psnr_t"] = psnr(*p.T, *g.T);
      row["ssim_t"] = ssim(*p.T, *g.T);
    }
    if (p.R && g.R) {
      row["psnr_r"] = psnr(*p.R, *g.R);
      row["ssim_r"] = ssim(*p.R, *g.R);
    }
    if (p.mask && g.mask) {
      row["iou"] = mask_iou(*p.mask, *g.mask);
      row["dice"] = mask_dice(*p.mask, *g.mask);
    }
    for (const char* m : metrics)
      if (row.contains(m)) {
        sums[m].first += row[m].get<double>();
        sums[m].second += 1;
      }
    rows.push_back(std::move(row));
  }
  json mean = json::object();
  for (const char* m : metrics)
    if (sums.count(m)) mean[m] = sums[m].first / sums[m].second;
  return json{{"schema", 1},
              {"kind", "firm-eval-report"},
              {"predictions", predictions.string()},
              {"ground_truth", ground_truth.string()},
              {"count", rows.size()},
              {"rows", rows},
              {"mean", mean}};
}

json ablate(const removal::RemovalConfig& base, const std::vector<std::string>& names,
            const std::vector<RemovalExample>& examples, const RemovalTrainOptions& opts) {
  json rows = json::array();
  for (const auto& name : names) {
    const auto cfg = removal::ablation_config(base, name);
    const auto pairs = to_train_pairs(examples, cfg);
    RemovalTrainOptions o = opts;
    if (!opts.log_csv.empty()) o.log_csv = opts.log_csv.parent_path() / ("train_" + name + ".csv");
    const auto res = train_removal(cfg, pairs, o);
    const auto s = score_removal(*res.model, pairs);
    rows.push_back({{"name", name},
                    {"label", removal::ablation_label(name)},
                    {"psnr_t", s.psnr_t},
                    {"ssim_t", s.ssim_t},
                    {"psnr_r", s.psnr_r},
                    {"ssim_r", s.ssim_r},
                    {"final_loss", res.curve.empty() ? 0.0 : res.curve.back().total}});
  }
  return json{{"schema", 1},
              {"kind", "firm-ablation"},
              {"iterations", opts.iterations},
              {"pairs", examples.size()},
              {"rows", rows}};
}

std::string ablation_table(const json& report) {
  std::ostringstream os;
  os << "| configuration | PSNR T | SSIM T | PSNR R | SSIM R |\n|---|---|---|---|---|\n";
  char buf[160];
  for (const auto& r : report.at("rows")) {
    std::snprintf(buf, sizeof(buf), "| %s | %.2f | %.3f | %.2f | %.3f |\n", r.at("label").get<std::string>().c_str(),
                  r.at("psnr_t").get<double>(), r.at("ssim_t").get<double>(), r.at("psnr_r").get<double>(),
                  r.at("ssim_r").get<double>());
    os << buf;
  }
  return os.str();
}

}  // namespace firm::pipeline
