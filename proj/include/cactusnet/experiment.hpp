#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cactusnet/cactus.hpp"
#include "cactusnet/error.hpp"
#include "cactusnet/nn.hpp"

namespace cnl::cli {

// A routing depth has no predictor and the stream gives no mock App for it.
class UntrainedPredictorError : public Error {
 public:
  using Error::Error;
};

struct ExperimentConfig {
  std::filesystem::path manifest;
  std::filesystem::path out;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  nlohmann::json base_architecture;
  TrainConfig base_train{0.05, 10, 32, 0};
  double base_lr_decay = 1.0;  // per-epoch learning-rate factor
  std::vector<std::size_t> taps;

  std::vector<int> measure_classes;  // empty: every manifest class
  TrainConfig pair_train{0.03, 10, 32, 0};
  bool skip_self_pairs = true;

  TrainConfig predictor_train{0.03, 30, 32, 0};
  std::vector<int> held_out;                       // empty: last measured class of each subset
  std::optional<std::vector<int>> train_classes;  // unset: every other measured class
  bool permutation_control = true;

  std::size_t decision_depth = 0;  // 0: taps.size() / 2
  std::size_t window = 25;
  std::size_t max_branches_per_node = 8;
  std::optional<cactus::Baselines> thresholds;
  std::filesystem::path stream;

  nlohmann::json resolved;  // merged configuration without out and workers
};

nlohmann::json default_config();

struct Overrides {
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::filesystem::path> stream;
};

// Defaults, then the file, then CNL_<FIELD> variables from env, then flags.
// FIELD is the upper-cased key path joined by '_', e.g. CNL_BASE_TRAIN_EPOCHS.
ExperimentConfig resolve_config(const nlohmann::json& file, const std::filesystem::path& base_dir,
                                const std::map<std::string, std::string>& env, const Overrides& overrides);
ExperimentConfig load_config(const std::filesystem::path& path, const Overrides& overrides);
std::map<std::string, std::string> cnl_environment();

void cmd_train_base(const ExperimentConfig& cfg);
void cmd_measure(const ExperimentConfig& cfg);
void cmd_train_predictors(const ExperimentConfig& cfg);
void cmd_cactus_run(const ExperimentConfig& cfg);
void cmd_report(const ExperimentConfig& cfg);

// 2 for configuration and validation errors, 3 for numeric failures.
int exit_code_for(const std::exception& e);

// Full command line entry point; returns the process exit code.
int run(int argc, const char* const* argv);

}  // namespace cnl::cli
