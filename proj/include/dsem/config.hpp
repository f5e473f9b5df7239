#pragma once

#include <filesystem>
#include <stdexcept>

#include "dsem/detector.hpp"
#include "dsem/dsem.hpp"
#include "dsem/training.hpp"
#include "json.hpp"

namespace dsem {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything a run needs besides data paths. On disk it is a JSON object
// with optional "detector", "dsem", "adapt" and "eval" sections; every field
// is optional and unknown keys are rejected.
struct RunConfig {
  DetectorConfig detector;
  DsemConfig dsem;
  AdaptConfig adapt;
  NmsConfig eval;

  void validate() const;
};

nlohmann::json config_to_json(const RunConfig& config);
// Overlays the fields present in `j` onto `config`.
void merge_config(RunConfig& config, const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace dsem
