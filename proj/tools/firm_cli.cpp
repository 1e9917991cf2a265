// firm: command-line driver over the C API.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "firm/firm.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitArgument = 2;
constexpr int kExitData = 3;

struct Failure {
  int code;
  std::string message;
};

int exit_code(firm_status s) {
  switch (s) {
    case FIRM_OK: return kExitOk;
    case FIRM_ERR_ARGUMENT:
    case FIRM_ERR_UNSUPPORTED: return kExitArgument;
    case FIRM_ERR_DATA: return kExitData;
    default: return kExitInternal;
  }
}

void check(firm_status s) {
  if (s != FIRM_OK) throw Failure{exit_code(s), std::string(firm_status_name(s)) + ": " + firm_last_error()};
}

template <class T, void (*Destroy)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  ~Handle() { Destroy(p); }
};

using Config = Handle<firm_config, firm_config_destroy>;
using Sarm = Handle<firm_sarm, firm_sarm_destroy>;
using Removal = Handle<firm_removal, firm_removal_destroy>;

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Failure{kExitData, "cannot read " + path};
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string seed;
  std::string out;
};

// Flag values land here; empty means "keep the config value".
struct Overrides {
  std::vector<std::pair<std::string, std::string>> kv;
  void add(const std::string& key, const std::string& v) {
    if (!v.empty()) kv.emplace_back(key, v);
  }
};

void build_config(Config& cfg, const Common& c, const Overrides& extra) {
  if (c.config.empty()) check(firm_config_create(&cfg.p));
  else check(firm_config_load(c.config.c_str(), &cfg.p));
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw Failure{kExitArgument, "--set expects key=value, got '" + s + "'"};
    check(firm_config_set(cfg.p, s.substr(0, eq).c_str(), s.substr(eq + 1).c_str()));
  }
  if (!c.seed.empty()) check(firm_config_set(cfg.p, "seed", c.seed.c_str()));
  if (!c.out.empty()) check(firm_config_set(cfg.p, "out", c.out.c_str()));
  for (const auto& [k, v] : extra.kv) check(firm_config_set(cfg.p, k.c_str(), v.c_str()));
}

std::string get(const Config& cfg, const char* key) {
  const char* v = nullptr;
  check(firm_config_get(cfg.p, key, &v));
  return v;
}

void load_models(const std::string& sarm_path, const std::string& removal_path, Sarm& s, Removal& r) {
  check(firm_sarm_load(sarm_path.c_str(), &s.p));
  check(firm_removal_load(removal_path.c_str(), &r.p));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"firm: guided reflection segmentation and removal"};
  app.require_subcommand(1);
  app.set_version_flag("--version", firm_version());

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "INI config file")->check(CLI::ExistingFile);
    sub->add_option("--set", common.sets, "override a config key (key=value), repeatable");
    sub->add_option("--seed", common.seed, "random seed");
    sub->add_option("--out", common.out, "output directory");
  };

  Overrides ov;
  std::string n, source, manifest, sarm_path, removal_path, image, guidance, pred, gt, iterations, port, limit;

  auto* corpus = app.add_subcommand("corpus", "write a toy clear-image corpus with instance masks");
  add_common(corpus);
  std::string corpus_n;
  corpus->add_option("--n", corpus_n, "number of scenes");

  auto* synth = app.add_subcommand("synth", "synthesise reflection triplets");
  add_common(synth);
  synth->add_option("--n", n, "number of samples");
  synth->add_option("--source", source, "source manifest (JSON lines); default: a fresh toy corpus");

  auto* train_sarm = app.add_subcommand("train-sarm", "train the reflection segmenter");
  add_common(train_sarm);
  train_sarm->add_option("--manifest", manifest, "synthesis manifest")->required();
  std::string corpus_path;
  train_sarm->add_option("--corpus", corpus_path, "clear-image source manifest added to baseline pretraining");

  auto* train_removal = app.add_subcommand("train-removal", "train the removal network");
  add_common(train_removal);
  train_removal->add_option("--manifest", manifest, "synthesis manifest")->required();
  train_removal->add_option("--iterations", iterations, "training iterations");

  auto* infer = app.add_subcommand("infer", "segment and separate one image or a whole manifest");
  add_common(infer);
  infer->add_option("--sarm", sarm_path, "segmenter checkpoint")->required();
  infer->add_option("--removal", removal_path, "removal checkpoint")->required();
  auto* img_opt = infer->add_option("--image", image, "input PNG");
  infer->add_option("--guidance", guidance, "guidance JSON file (array or {\"guidance\": [...]})")->needs(img_opt);
  infer->add_option("--manifest", manifest, "synthesis manifest; records use their contrastive points")
      ->excludes(img_opt);
  infer->add_option("--limit", limit, "first N records only");

  auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
  add_common(eval);
  eval->add_option("--pred", pred, "prediction manifest")->required();
  eval->add_option("--gt", gt, "ground-truth manifest")->required();

  auto* ablate = app.add_subcommand("ablate", "train and compare the ablation configurations");
  add_common(ablate);
  ablate->add_option("--manifest", manifest, "synthesis manifest")->required();
  ablate->add_option("--iterations", iterations, "training iterations per configuration");
  ablate->add_option("--limit", limit, "first N records only");

  auto* serve = app.add_subcommand("serve", "run the HTTP session service");
  add_common(serve);
  serve->add_option("--sarm", sarm_path, "segmenter checkpoint")->required();
  serve->add_option("--removal", removal_path, "removal checkpoint")->required();
  serve->add_option("--port", port, "listen port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitArgument;
  }

  try {
    ov.add("synthesis.corpus_n", corpus_n);
    ov.add("synthesis.n", n);
    ov.add("synthesis.source", source);
    ov.add("removal.iterations", iterations);
    ov.add("serve.port", port);
    ov.add("eval.limit", limit);
    ov.add("sarm.pretrain_corpus", corpus_path);
    Config cfg;
    build_config(cfg, common, ov);
    const std::string out = get(cfg, "out");

    if (*corpus) {
      check(firm_make_corpus(cfg.p, out.c_str()));
      std::cout << out << "/source.jsonl\n";
    } else if (*synth) {
      check(firm_synthesize(cfg.p, out.c_str()));
      std::cout << out << "/manifest.jsonl\n";
    } else if (*train_sarm) {
      check(firm_train_sarm(cfg.p, manifest.c_str(), out.c_str()));
      std::cout << out << "/sarm.ckpt\n";
    } else if (*train_removal) {
      check(firm_train_removal(cfg.p, manifest.c_str(), out.c_str()));
      std::cout << out << "/removal.ckpt\n";
    } else if (*infer) {
      if (image.empty() == manifest.empty()) throw Failure{kExitArgument, "infer needs exactly one of --image or --manifest"};
      Sarm s;
      Removal r;
      load_models(sarm_path, removal_path, s, r);
      if (!image.empty()) {
        const std::string g = guidance.empty() ? std::string() : read_file(guidance);
        check(firm_infer_image(s.p, r.p, image.c_str(), g.c_str(), out.c_str()));
        std::cout << out << "/inference.json\n";
      } else {
        check(firm_infer_manifest(cfg.p, s.p, r.p, manifest.c_str(), out.c_str()));
        std::cout << out << "/predictions.jsonl\n";
      }
    } else if (*eval) {
      char summary[1024];
      check(firm_evaluate(pred.c_str(), gt.c_str(), out.c_str(), summary, sizeof(summary)));
      std::cout << summary << "\n";
    } else if (*ablate) {
      check(firm_ablate(cfg.p, manifest.c_str(), out.c_str()));
      std::cout << read_file(out + "/ablation.md");
    } else if (*serve) {
      Sarm s;
      Removal r;
      load_models(sarm_path, removal_path, s, r);
      check(firm_serve(cfg.p, s.p, r.p));
    }
  } catch (const Failure& f) {
    std::cerr << "firm: " << f.message << "\n";
    return f.code;
  }
  return kExitOk;
}
