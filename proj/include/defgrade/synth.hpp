#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"

namespace defgrade::synth {

struct SynthOptions {
  std::filesystem::path out_dir;
  std::filesystem::path assets_dir;  // empty: default_assets_dir()
  std::uint64_t seed = 2024;
  // Records per grade for each task; empty keeps the defaults
  // (task1: 53, task2: 40, task3: 40).
  std::map<std::string, std::size_t> per_grade_total;
  bool large_images = true;  // one 1600x1200 PNG per task
};

// Directory holding trees/, templates/ and sim/ shipped with the library.
std::filesystem::path default_assets_dir();

// Writes a self-contained project: images, manifests, trees, templates, the
// simulator profile and defgrade.json wired to sim:// endpoints. Refuses to
// write into a non-empty directory.
nlohmann::json synth_project(const SynthOptions& opts);

}  // namespace defgrade::synth
