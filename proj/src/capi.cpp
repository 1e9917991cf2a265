#include "firm/firm.h"

#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "firm/config.hpp"
#include "firm/errors.hpp"
#include "firm/pipeline.hpp"
#include "firm/png_io.hpp"
#include "firm/seeding.hpp"
#include "firm/service.hpp"
#include "firm/toy_scenes.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

struct firm_config {
  firm::RunConfig cfg;
  std::string scratch;
};
struct firm_sarm {
  std::shared_ptr<const firm::sarm::SarmModel> model;
};
struct firm_removal {
  std::shared_ptr<const firm::removal::RemovalModel> model;
};

namespace {

thread_local std::string g_error;

firm_status fail(firm_status s, const std::string& msg) {
  g_error = msg;
  return s;
}

template <class F>
firm_status guarded(F&& f) {
  g_error.clear();
  try {
    f();
    return FIRM_OK;
  } catch (const firm::ArgumentError& e) {
    return fail(FIRM_ERR_ARGUMENT, e.what());
  } catch (const firm::DataError& e) {
    return fail(FIRM_ERR_DATA, e.what());
  } catch (const firm::UnsupportedGuidance& e) {
    return fail(FIRM_ERR_UNSUPPORTED, e.what());
  } catch (const firm::InvariantViolation& e) {
    return fail(FIRM_ERR_INVARIANT, e.what());
  } catch (const json::exception& e) {
    return fail(FIRM_ERR_DATA, std::string("json: ") + e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(FIRM_ERR_DATA, e.what());
  } catch (const std::exception& e) {
    return fail(FIRM_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(FIRM_ERR_INTERNAL, "unknown exception");
  }
}

void need(const void* p, const char* what) {
  if (!p) throw firm::ArgumentError(std::string(what) + " is null");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw firm::DataError("cannot write " + path.string());
  os << text;
}

firm::ImagePlane plane_from(const double* rgb, int h, int w, int channels) {
  if (h <= 0 || w <= 0) throw firm::ArgumentError("image size must be positive");
  firm::ImagePlane img(h, w, channels);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < channels; ++ch) img.at(r, c, ch) = rgb[(static_cast<std::size_t>(r) * w + c) * channels + ch];
  return img;
}

void plane_to(const firm::ImagePlane& img, double* out) {
  std::size_t k = 0;
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c)
      for (int ch = 0; ch < img.channels(); ++ch) out[k++] = img.at(r, c, ch);
}

std::vector<firm::Guidance> parse_guidance(const char* text) {
  if (!text || !*text) return {};
  json j = firm::parse_json_with_lines(text, "guidance");
  if (j.is_object() && j.contains("guidance")) j = j["guidance"];
  return firm::guidance_list_from_json(j);
}

firm::SegmenterRegistry registry(const firm_sarm* sarm) {
  firm::SegmenterRegistry reg;
  reg.visual = std::make_shared<firm::sarm::SarmSegmenter>(sarm->model);
  return reg;
}

firm::ConvertOptions convert_options(const firm::RunConfig* cfg) {
  firm::ConvertOptions o;
  if (cfg) o.stroke_samples = cfg->get_int("eval.stroke_samples");
  return o;
}

}  // namespace

extern "C" {

const char* firm_version(void) { return "0.1.0"; }
const char* firm_last_error(void) { return g_error.c_str(); }

const char* firm_status_name(firm_status s) {
  switch (s) {
    case FIRM_OK: return "ok";
    case FIRM_ERR_ARGUMENT: return "argument error";
    case FIRM_ERR_DATA: return "data error";
    case FIRM_ERR_UNSUPPORTED: return "unsupported guidance";
    case FIRM_ERR_INVARIANT: return "invariant violation";
    case FIRM_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

firm_status firm_config_create(firm_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new firm_config();
  });
}

firm_status firm_config_load(const char* path, firm_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    auto c = std::make_unique<firm_config>();
    c->cfg = firm::RunConfig::from_file(path);
    *out = c.release();
  });
}

firm_status firm_config_set(firm_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    need(cfg, "config");
    need(key, "key");
    need(value, "value");
    cfg->cfg.set(key, value);
  });
}

firm_status firm_config_get(const firm_config* cfg, const char* key, const char** value) {
  return guarded([&] {
    need(cfg, "config");
    need(key, "key");
    need(value, "value");
    *value = cfg->cfg.get(key).c_str();
  });
}

firm_status firm_config_dump(const firm_config* cfg, const char** text) {
  return guarded([&] {
    need(cfg, "config");
    need(text, "text");
    auto* c = const_cast<firm_config*>(cfg);
    c->scratch = cfg->cfg.dump();
    *text = c->scratch.c_str();
  });
}

void firm_config_destroy(firm_config* cfg) { delete cfg; }

firm_status firm_make_corpus(const firm_config* cfg, const char* out_dir) {
  return guarded([&] {
    need(cfg, "config");
    need(out_dir, "out_dir");
    firm::toy::SceneOptions so;
    so.height = so.width = cfg->cfg.get_int("synthesis.corpus_size");
    if (so.height < 8) throw firm::ArgumentError("synthesis.corpus_size must be at least 8");
    firm::toy::write_corpus(out_dir, cfg->cfg.get_int("synthesis.corpus_n"), cfg->cfg.seed(), so);
  });
}

firm_status firm_synthesize(const firm_config* cfg, const char* out_dir) {
  return guarded([&] {
    need(cfg, "config");
    need(out_dir, "out_dir");
    const auto& c = cfg->cfg;
    const auto opts = firm::synthesis_options(c);
    const int n = c.get_int("synthesis.n");
    if (n < 0) throw firm::ArgumentError("synthesis.n must be non-negative");
    fs::path source = c.get("synthesis.source");
    if (source.empty() && n > 0) {
      firm::toy::SceneOptions so;
      so.height = so.width = c.get_int("synthesis.corpus_size");
      source = firm::toy::write_corpus(fs::path(out_dir) / "corpus", c.get_int("synthesis.corpus_n"),
                                       firm::derive_seed(c.seed(), 1000), so);
    }
    firm::build_dataset(source, n, c.seed(), out_dir, opts);
  });
}

firm_status firm_train_sarm(const firm_config* cfg, const char* manifest, const char* out_dir) {
  return guarded([&] {
    need(cfg, "config");
    need(manifest, "manifest");
    need(out_dir, "out_dir");
    const auto& c = cfg->cfg;
    const auto scfg = firm::sarm_config(c);
    const auto samples = firm::pipeline::load_sarm_samples(manifest, scfg.image_size, c.get_int("eval.limit"));
    firm::pipeline::SarmTrainOptions o;
    o.pretrain_steps = c.get_int("sarm.pretrain_steps");
    o.pretrain_lr = c.get_double("sarm.pretrain_lr");
    o.steps = c.get_int("sarm.steps");
    o.lr = c.get_double("sarm.lr");
    o.batch = c.get_int("sarm.batch");
    o.seed = c.seed();
    const std::string corpus = c.get("sarm.pretrain_corpus");
    if (!corpus.empty())
      o.extra_pretrain = firm::pipeline::load_pretrain_samples(corpus, scfg.image_size, firm::derive_seed(c.seed(), 7));
    fs::create_directories(out_dir);
    o.log_csv = fs::path(out_dir) / "train_sarm.csv";
    const auto model = firm::pipeline::train_sarm(scfg, samples, o);
    model->save((fs::path(out_dir) / "sarm.ckpt").string());
  });
}

firm_status firm_train_removal(const firm_config* cfg, const char* manifest, const char* out_dir) {
  return guarded([&] {
    need(cfg, "config");
    need(manifest, "manifest");
    need(out_dir, "out_dir");
    const auto& c = cfg->cfg;
    const auto rcfg = firm::removal_config(c);
    const auto examples = firm::pipeline::load_removal_examples(manifest, c.get_int("eval.limit"));
    firm::pipeline::RemovalTrainOptions o;
    o.iterations = rcfg.iterations;
    o.batch = c.get_int("removal.batch");
    o.seed = c.seed();
    o.log_every = c.get_int("removal.log_every");
    fs::create_directories(out_dir);
    o.log_csv = fs::path(out_dir) / "train_removal.csv";
    const auto res = firm::pipeline::train_removal(rcfg, firm::pipeline::to_train_pairs(examples, rcfg), o);
    res.model->save((fs::path(out_dir) / "removal.ckpt").string());
  });
}

firm_status firm_sarm_load(const char* path, firm_sarm** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    auto h = std::make_unique<firm_sarm>();
    h->model = firm::sarm::SarmModel::load(path);
    *out = h.release();
  });
}

void firm_sarm_destroy(firm_sarm* m) { delete m; }

firm_status firm_removal_load(const char* path, firm_removal** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    auto h = std::make_unique<firm_removal>();
    h->model = firm::removal::RemovalModel::load(path);
    *out = h.release();
  });
}

void firm_removal_destroy(firm_removal* m) { delete m; }

firm_status firm_segment(const firm_sarm* sarm, const double* rgb, int height, int width, const char* guidance_json,
                         double* mask_out) {
  return guarded([&] {
    need(sarm, "sarm");
    need(rgb, "rgb");
    need(mask_out, "mask_out");
    const auto img = plane_from(rgb, height, width, 3);
    const auto mask = firm::convert(img, parse_guidance(guidance_json), registry(sarm));
    plane_to(mask.to_plane(), mask_out);
  });
}

firm_status firm_remove(const firm_removal* model, const double* rgb, int height, int width, const double* mask,
                        double* t_out, double* r_out) {
  return guarded([&] {
    need(model, "model");
    need(rgb, "rgb");
    need(t_out, "t_out");
    need(r_out, "r_out");
    const auto img = plane_from(rgb, height, width, 3);
    firm::ImagePlane guide = mask ? plane_from(mask, height, width, 1) : firm::ImagePlane(height, width, 1);
    const auto out = model->model->remove(img, guide);
    plane_to(out.T, t_out);
    plane_to(out.R, r_out);
  });
}

firm_status firm_infer_image(const firm_sarm* sarm, const firm_removal* model, const char* image_png,
                             const char* guidance_json, const char* out_dir) {
  return guarded([&] {
    need(sarm, "sarm");
    need(model, "model");
    need(image_png, "image_png");
    need(out_dir, "out_dir");
    auto img = firm::read_png(image_png);
    if (img.channels() != 3) throw firm::DataError(std::string(image_png) + ": expected an RGB image");
    const auto guidance = parse_guidance(guidance_json);
    const auto r = firm::pipeline::infer(img, guidance, registry(sarm), *model->model);
    const fs::path out(out_dir);
    fs::create_directories(out);
    firm::write_png(out / "T.png", r.layers.T);
    firm::write_png(out / "R.png", r.layers.R);
    firm::write_gray_png(out / "mask.png", r.mask.height(), r.mask.width(), r.mask.gray_levels());
    const json sidecar{{"schema", 1},
                       {"kind", "firm-inference"},
                       {"image", image_png},
                       {"height", img.height()},
                       {"width", img.width()},
                       {"guidance", firm::guidance_list_to_json(guidance)},
                       {"outputs", {{"T", "T.png"}, {"R", "R.png"}, {"mask", "mask.png"}}},
                       {"areas",
                        {{"0", r.mask.area(firm::ContrastiveMask::none)},
                         {"0.5", r.mask.area(firm::ContrastiveMask::transmission)},
                         {"1", r.mask.area(firm::ContrastiveMask::reflection)}}},
                       {"timing_ms", {{"segment", r.segment_ms}, {"remove", r.remove_ms}}}};
    write_text(out / "inference.json", sidecar.dump(2) + "\n");
  });
}

firm_status firm_infer_manifest(const firm_config* cfg, const firm_sarm* sarm, const firm_removal* model,
                                const char* manifest, const char* out_dir) {
  return guarded([&] {
    need(cfg, "config");
    need(sarm, "sarm");
    need(model, "model");
    need(manifest, "manifest");
    need(out_dir, "out_dir");
    firm::pipeline::infer_manifest(manifest, registry(sarm), *model->model, out_dir, cfg->cfg.get_int("eval.limit"));
  });
}

firm_status firm_evaluate(const char* predictions, const char* ground_truth, const char* out_dir, char* summary,
                          size_t summary_len) {
  return guarded([&] {
    need(predictions, "predictions");
    need(ground_truth, "ground_truth");
    need(out_dir, "out_dir");
    const auto report = firm::pipeline::evaluate(predictions, ground_truth);
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "report.json", report.dump(2) + "\n");
    if (summary && summary_len > 0) {
      const auto s = report["mean"].dump();
      const std::size_t n = std::min(s.size(), summary_len - 1);
      std::memcpy(summary, s.data(), n);
      summary[n] = '\0';
    }
  });
}

firm_status firm_ablate(const firm_config* cfg, const char* manifest, const char* out_dir) {
  return guarded([&] {
    need(cfg, "config");
    need(manifest, "manifest");
    need(out_dir, "out_dir");
    const auto& c = cfg->cfg;
    const auto base = firm::removal_config(c);
    std::vector<std::string> names;
    std::stringstream ss(c.get("eval.ablations"));
    for (std::string item; std::getline(ss, item, ',');) {
      const auto b = item.find_first_not_of(' ');
      if (b == std::string::npos) continue;
      names.push_back(item.substr(b, item.find_last_not_of(' ') - b + 1));
    }
    if (names.empty()) throw firm::ArgumentError("eval.ablations is empty");
    for (const auto& n : names) firm::removal::ablation_config(base, n);
    const auto examples = firm::pipeline::load_removal_examples(manifest, c.get_int("eval.limit"));
    firm::pipeline::RemovalTrainOptions o;
    o.iterations = base.iterations;
    o.batch = c.get_int("removal.batch");
    o.seed = c.seed();
    o.log_every = c.get_int("removal.log_every");
    fs::create_directories(out_dir);
    o.log_csv = fs::path(out_dir) / "train.csv";
    const auto report = firm::pipeline::ablate(base, names, examples, o);
    write_text(fs::path(out_dir) / "ablation.json", report.dump(2) + "\n");
    write_text(fs::path(out_dir) / "ablation.md", firm::pipeline::ablation_table(report));
  });
}

firm_status firm_serve(const firm_config* cfg, const firm_sarm* sarm, const firm_removal* model) {
  return guarded([&] {
    need(cfg, "config");
    need(sarm, "sarm");
    need(model, "model");
    const auto& c = cfg->cfg;
    firm::service::ServiceOptions o;
    o.host = c.get("serve.host");
    o.port = c.get_int("serve.port");
    o.ttl_seconds = c.get_int("serve.ttl_seconds");
    const int mb = c.get_int("serve.max_upload_mb");
    if (mb < 1) throw firm::ArgumentError("serve.max_upload_mb must be at least 1");
    o.max_upload_bytes = static_cast<std::size_t>(mb) << 20;
    o.auto_segment = c.get_bool("serve.auto_segment");
    o.cors_origin = c.get("serve.cors_origin");
    o.convert = convert_options(&c);
    firm::service::Service svc(o, registry(sarm), model->model);
    const int port = svc.bind();
    std::cerr << "serving on http://" << o.host << ":" << port << "\n";
    svc.listen();
  });
}

}  // extern "C"
