#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "defgrade/gateway.hpp"
#include "defgrade/lora.hpp"
#include "defgrade/promptkit.hpp"
#include "json.hpp"

namespace defgrade::project {

struct TaskConfig {
  std::string id;
  std::string name;  // empty: the tree's name
  std::string manifest;
  std::string tree;
  std::string templates;
  std::vector<Grade> grades;
};

struct PipelineParams {
  std::size_t per_grade = 30;
  std::size_t refs_per_grade = 1;
  int eval_case = 4;
  promptkit::Placement placement = promptkit::Placement::corresponding;
  int select_case = 4;
  int concurrency = 4;
  gateway::FixtureMode fixture_mode = gateway::FixtureMode::replay;
};

struct LoraParams {
  lora::ToyConfig model{32, 2, 2, 16, 64, 16, 16, 7};
  int rank = 4;
  double alpha = 16.0;
  double init_std = 0.1;
  double lr = 0.002;
  int epochs = 500;
  int batch_size = 1;
  std::string modules = "LLM";
  std::size_t corpus_size = 20;
  std::uint64_t corpus_seed = 11;
};

struct Paths {
  std::string work = "work";
  std::string fixtures = "fixtures";
  std::string runs = "runs";
  std::string qa = "qa";
  std::string exports = "exports";
  std::string reports = "reports";
};

// One file per project. Relative paths resolve against the file's directory.
struct ProjectConfig {
  std::filesystem::path root;
  std::uint64_t seed = 2024;
  std::vector<TaskConfig> tasks;
  std::vector<gateway::ModelEndpoint> endpoints;
  PipelineParams pipeline;
  LoraParams lora;
  Paths paths;
  std::string simulator_profile;  // used by sim:// endpoints

  [[nodiscard]] std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
  [[nodiscard]] const TaskConfig& task(const std::string& id) const;
  [[nodiscard]] const gateway::ModelEndpoint& endpoint(const std::string& id) const;
};

nlohmann::json config_to_json(const ProjectConfig& c);
// Throws ConfigError on malformed input.
ProjectConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& root);
// Loads, applies `overrides` as a JSON merge patch, then checks that
// referenced files exist and that tree and manifest grades match the config.
ProjectConfig load_config(const std::filesystem::path& path, const nlohmann::json& overrides = nlohmann::json::object());
void save_config(const ProjectConfig& c, const std::filesystem::path& path);
void check_config(const ProjectConfig& c);

}  // namespace defgrade::project
