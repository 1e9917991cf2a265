#include "firm/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <optional>
#include <sstream>

#include "firm/errors.hpp"

namespace firm {

namespace {

enum class Kind { integer, unsigned_int, real, boolean, text };

struct KeySpec {
  const char* key;
  Kind kind;
  const char* fallback;
};

const std::vector<KeySpec>& specs() {
  static const std::vector<KeySpec> s{
      {"seed", Kind::unsigned_int, "1"},
      {"out", Kind::text, "out"},

      {"synthesis.source", Kind::text, ""},
      {"synthesis.n", Kind::integer, "16"},
      {"synthesis.sigma_min", Kind::real, "0.2"},
      {"synthesis.sigma_max", Kind::real, "4.0"},
      {"synthesis.beta_min", Kind::real, "0.4"},
      {"synthesis.beta_max", Kind::real, "1.0"},
      {"synthesis.max_attempts", Kind::integer, "32"},
      {"synthesis.threads", Kind::integer, "1"},
      {"synthesis.corpus_n", Kind::integer, "32"},
      {"synthesis.corpus_size", Kind::integer, "64"},

      {"sarm.token_dim", Kind::integer, "64"},
      {"sarm.channels", Kind::integer, "32"},
      {"sarm.reduction", Kind::integer, "4"},
      {"sarm.n_output_tokens", Kind::integer, "4"},
      {"sarm.image_size", Kind::integer, "64"},
      {"sarm.focal_gamma", Kind::real, "2.0"},
      {"sarm.lambda0", Kind::real, "1.0"},
      {"sarm.lambda1", Kind::real, "0.1"},
      {"sarm.lr", Kind::real, "0.0005"},
      {"sarm.pretrain_lr", Kind::real, "0.001"},
      {"sarm.pretrain_steps", Kind::integer, "400"},
      {"sarm.steps", Kind::integer, "200"},
      {"sarm.batch", Kind::integer, "4"},
      {"sarm.pretrain_corpus", Kind::text, ""},

      {"removal.channels", Kind::integer, "32"},
      {"removal.scales", Kind::integer, "3"},
      {"removal.blocks", Kind::integer, "2"},
      {"removal.n_cgib", Kind::integer, "2"},
      {"removal.query_h", Kind::integer, "16"},
      {"removal.query_w", Kind::integer, "16"},
      {"removal.alpha_init", Kind::real, "1.0"},
      {"removal.w_pix", Kind::real, "1.0"},
      {"removal.w_grad", Kind::real, "0.5"},
      {"removal.w_perc", Kind::real, "0.01"},
      {"removal.w_excl", Kind::real, "0.1"},
      {"removal.lr_max", Kind::real, "0.001"},
      {"removal.lr_min", Kind::real, "0.000001"},
      {"removal.iterations", Kind::integer, "2000"},
      {"removal.batch", Kind::integer, "1"},
      {"removal.mask_input", Kind::text, "contrastive"},
      {"removal.use_cgib", Kind::boolean, "true"},
      {"removal.cgib_reflection_only", Kind::boolean, "false"},
      {"removal.log_every", Kind::integer, "50"},

      {"eval.limit", Kind::integer, "0"},
      {"eval.ablations", Kind::text, "blended_only,raw_point,raw_mask,reflection_mask,full"},
      {"eval.stroke_samples", Kind::integer, "8"},

      {"serve.host", Kind::text, "127.0.0.1"},
      {"serve.port", Kind::integer, "8080"},
      {"serve.ttl_seconds", Kind::integer, "3600"},
      {"serve.max_upload_mb", Kind::integer, "16"},
      {"serve.auto_segment", Kind::boolean, "true"},
      {"serve.cors_origin", Kind::text, "*"},
  };
  return s;
}

const KeySpec& spec_for(const std::string& key) {
  for (const auto& s : specs())
    if (key == s.key) return s;
  throw ArgumentError("unknown config key '" + key + "'");
}

template <class T>
bool parse_number(const std::string& v, T& out) {
  const char* b = v.data();
  const char* e = b + v.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && p == e;
}

std::optional<bool> parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  return std::nullopt;
}

void check_value(const KeySpec& s, const std::string& v) {
  bool ok = true;
  switch (s.kind) {
    case Kind::integer: {
      long long x;
      ok = parse_number(v, x);
      break;
    }
    case Kind::unsigned_int: {
      std::uint64_t x;
      ok = parse_number(v, x);
      break;
    }
    case Kind::real: {
      double x;
      ok = parse_number(v, x);
      break;
    }
    case Kind::boolean: ok = parse_bool(v).has_value(); break;
    case Kind::text: break;
  }
  if (!ok) throw ArgumentError("config key '" + std::string(s.key) + "': cannot parse '" + v + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& s : specs()) values_[s.key] = s.fallback;
}

RunConfig RunConfig::from_string(const std::string& ini, const std::string& source) {
  boost::property_tree::ptree tree;
  std::istringstream is(ini);
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ArgumentError(source + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig cfg;
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      cfg.set(name, trim(node.data()));
      continue;
    }
    for (const auto& [key, leaf] : node) {
      if (!leaf.empty()) throw ArgumentError(source + ": nested key '" + name + "." + key + "'");
      cfg.set(name + "." + key, trim(leaf.data()));
    }
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ArgumentError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return from_string(ss.str(), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& s = spec_for(key);
  check_value(s, value);
  values_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  spec_for(key);
  return values_.at(key);
}

int RunConfig::get_int(const std::string& key) const {
  long long v = 0;
  parse_number(get(key), v);
  return static_cast<int>(v);
}

double RunConfig::get_double(const std::string& key) const {
  double v = 0;
  parse_number(get(key), v);
  return v;
}

bool RunConfig::get_bool(const std::string& key) const { return parse_bool(get(key)).value_or(false); }

std::uint64_t RunConfig::seed() const {
  std::uint64_t v = 0;
  parse_number(get("seed"), v);
  return v;
}

const std::vector<std::string>& RunConfig::known_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& s : specs()) k.emplace_back(s.key);
    return k;
  }();
  return keys;
}

std::string RunConfig::dump() const {
  std::ostringstream os;
  os << "seed = " << get("seed") << "\nout = " << get("out") << "\n";
  std::string section;
  for (const auto& s : specs()) {
    const std::string key = s.key;
    const auto dot = key.find('.');
    if (dot == std::string::npos) continue;
    if (key.substr(0, dot) != section) {
      section = key.substr(0, dot);
      os << "\n[" << section << "]\n";
    }
    os << key.substr(dot + 1) << " = " << values_.at(key) << "\n";
  }
  return os.str();
}

DatasetOptions synthesis_options(const RunConfig& c) {
  DatasetOptions o;
  o.ranges.sigma_min = c.get_double("synthesis.sigma_min");
  o.ranges.sigma_max = c.get_double("synthesis.sigma_max");
  o.ranges.beta_min = c.get_double("synthesis.beta_min");
  o.ranges.beta_max = c.get_double("synthesis.beta_max");
  if (!(o.ranges.sigma_min >= 0) || o.ranges.sigma_max < o.ranges.sigma_min)
    throw ArgumentError("synthesis: bad sigma range");
  if (!(o.ranges.beta_min >= 0) || o.ranges.beta_max < o.ranges.beta_min)
    throw ArgumentError("synthesis: bad beta range");
  o.max_attempts = c.get_int("synthesis.max_attempts");
  o.threads = c.get_int("synthesis.threads");
  if (o.max_attempts < 1) throw ArgumentError("synthesis.max_attempts must be at least 1");
  return o;
}

sarm::SarmConfig sarm_config(const RunConfig& c) {
  sarm::SarmConfig s;
  s.token_dim = c.get_int("sarm.token_dim");
  s.channels = c.get_int("sarm.channels");
  s.reduction = c.get_int("sarm.reduction");
  s.n_output_tokens = c.get_int("sarm.n_output_tokens");
  s.image_size = c.get_int("sarm.image_size");
  s.focal_gamma = c.get_double("sarm.focal_gamma");
  s.lambda0 = c.get_double("sarm.lambda0");
  s.lambda1 = c.get_double("sarm.lambda1");
  s.validate();
  return s;
}

removal::RemovalConfig removal_config(const RunConfig& c) {
  removal::RemovalConfig r;
  r.channels = c.get_int("removal.channels");
  r.scales = c.get_int("removal.scales");
  r.blocks = c.get_int("removal.blocks");
  r.n_cgib = c.get_int("removal.n_cgib");
  r.query_h = c.get_int("removal.query_h");
  r.query_w = c.get_int("removal.query_w");
  r.alpha_init = c.get_double("removal.alpha_init");
  r.w_pix = c.get_double("removal.w_pix");
  r.w_grad = c.get_double("removal.w_grad");
  r.w_perc = c.get_double("removal.w_perc");
  r.w_excl = c.get_double("removal.w_excl");
  r.lr_max = c.get_double("removal.lr_max");
  r.lr_min = c.get_double("removal.lr_min");
  r.iterations = c.get_int("removal.iterations");
  const auto& mi = c.get("removal.mask_input");
  if (mi == "none") r.mask_input = removal::MaskInput::none;
  else if (mi == "raw_points") r.mask_input = removal::MaskInput::raw_points;
  else if (mi == "contrastive") r.mask_input = removal::MaskInput::contrastive;
  else throw ArgumentError("config key 'removal.mask_input': expected none, raw_points or contrastive");
  r.use_cgib = c.get_bool("removal.use_cgib");
  r.cgib_reflection_only = c.get_bool("removal.cgib_reflection_only");
  r.validate();
  return r;
}

}  // namespace firm
