#pragma once

// Run configuration: an INI file with [synthesis], [sarm], [removal], [eval]
// and [serve] sections plus top-level seed/out. Keys are addressed as
// "section.key" ("seed" and "out" have no section). Unknown keys are errors.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "firm/removal.hpp"
#include "firm/sarm.hpp"
#include "firm/synthesis.hpp"

namespace firm {

class RunConfig {
 public:
  RunConfig();

  static RunConfig from_file(const std::filesystem::path& path);
  static RunConfig from_string(const std::string& ini, const std::string& source = "<string>");

  // Throws ArgumentError naming the key when it is not recognised or the
  // value does not parse as the key's type.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::uint64_t seed() const;

  static const std::vector<std::string>& known_keys();
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
};

DatasetOptions synthesis_options(const RunConfig& cfg);
sarm::SarmConfig sarm_config(const RunConfig& cfg);
removal::RemovalConfig removal_config(const RunConfig& cfg);

}  // namespace firm
