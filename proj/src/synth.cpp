#include "defgrade/synth.hpp"

#include <cstdlib>

#include "defgrade/cot.hpp"
#include "defgrade/dtree.hpp"
#include "defgrade/image.hpp"
#include "defgrade/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

#ifndef DEFGRADE_ASSETS_DIR
#define DEFGRADE_ASSETS_DIR "assets"
#endif

namespace defgrade::synth {

namespace {

const std::map<std::string, std::size_t> kDefaultTotals{{"task1", 53}, {"task2", 40}, {"task3", 40}};

const std::vector<std::string> kModels{
    "GPT-4.1-2025-04-14", "GPT-4o-2024-11-20", "GPT-5-chat",     "Qwen-VL-plus",  "Qwen3-VL-235B-a22b",
    "Qwen3-VL-plus",      "Gemini-2.5-pro",    "Hunyuan-t1-vision", "Claude-opus-4.5-thinking", "Qwen3-VL-8B"};

image::Image small_image(util::Rng& rng, std::uint32_t w, std::uint32_t h) {
  image::Image img(w, h, 3);
  const auto base = static_cast<int>(rng.below(160)) + 40;
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(base + static_cast<int>(rng.below(56)));
  return img;
}

// Smooth gradient so the PNG stays small; the seed shifts it per record.
image::Image large_image(util::Rng& rng, std::uint32_t w, std::uint32_t h) {
  image::Image img(w, h, 3);
  const auto shift = rng.below(64);
  for (std::uint32_t y = 0; y < h; ++y)
    for (std::uint32_t x = 0; x < w; ++x) {
      auto* px = img.at(x, y);
      px[0] = static_cast<std::uint8_t>((x / 8 + shift) & 0xff);
      px[1] = static_cast<std::uint8_t>((y / 8) & 0xff);
      px[2] = static_cast<std::uint8_t>(((x + y) / 16 + 3 * shift) & 0xff);
    }
  return img;
}

void copy_tree(const fs::path& from, const fs::path& to) {
  if (!fs::is_directory(from)) throw ConfigError("asset directory " + from.string() + " is missing");
  fs::create_directories(to);
  fs::copy(from, to, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
}

}  // namespace

fs::path default_assets_dir() {
  if (const char* env = std::getenv("DEFGRADE_ASSETS")) return env;
  return DEFGRADE_ASSETS_DIR;
}

json synth_project(const SynthOptions& opts) {
  if (opts.out_dir.empty()) throw InvalidArgument("synth needs an output directory");
  if (fs::exists(opts.out_dir) && !fs::is_empty(opts.out_dir))
    throw ConfigError("output directory " + opts.out_dir.string() + " is not empty");
  const auto assets = opts.assets_dir.empty() ? default_assets_dir() : opts.assets_dir;
  const auto& root = opts.out_dir;
  fs::create_directories(root);
  copy_tree(assets / "trees", root / "trees");
  copy_tree(assets / "templates", root / "templates");
  copy_tree(assets / "sim", root / "sim");

  json tasks = json::array();
  json summary{{"root", root.string()}, {"tasks", json::object()}};
  for (const auto& [task_id, default_total] : kDefaultTotals) {
    const auto it = opts.per_grade_total.find(task_id);
    const auto total = it == opts.per_grade_total.end() ? default_total : it->second;
    if (total == 0) throw InvalidArgument("per-grade total for " + task_id + " must be positive");
    const auto tree = dtree::load_tree((root / "trees" / (task_id + ".tree")).string());
    const auto paths = dtree::enumerate_paths(tree);
    const auto data = root / "data" / task_id;

    json records = json::array();
    bool large_done = !opts.large_images;
    for (const auto& g : tree.grades()) {
      const dtree::PathOutcome* path = nullptr;
      for (const auto& p : paths)
        if (p.grade == g && !path) path = &p;
      for (std::size_t i = 0; i < total; ++i) {
        auto num = std::to_string(i + 1);
        if (num.size() < 3) num.insert(0, 3 - num.size(), '0');
        const auto id = task_id + "_" + util::to_lower(g) + "_" + num;
        util::Rng rng(opts.seed ^ util::stable_hash64("synth:" + id));
        const bool large = !large_done && i + 1 == total;
        const std::uint32_t w = large ? 1600 : 48 + static_cast<std::uint32_t>(rng.below(3)) * 8;
        const std::uint32_t h = large ? 1200 : 36 + static_cast<std::uint32_t>(rng.below(3)) * 6;
        const auto file = "images/" + id + (large ? ".png" : ".ppm");
        image::write(data / file, large ? large_image(rng, w, h) : small_image(rng, w, h));
        if (large) large_done = true;

        const auto bw = w / 3 + static_cast<std::uint32_t>(rng.below(w / 4));
        const auto bh = h / 3 + static_cast<std::uint32_t>(rng.below(h / 4));
        const auto bx = static_cast<std::uint32_t>(rng.below(w - bw));
        const auto by = static_cast<std::uint32_t>(rng.below(h - bh));
        json r{{"id", id}, {"path", file}, {"grade", g}, {"boxes", json::array({{bx, by, bw, bh}})}};
        if (i == 0) {
          CoTResult cot;
          cot.grade = g;
          for (std::size_t k = 0; k < path->nodes.size(); ++k) {
            const auto* node = tree.find(path->nodes[k]);
            cot.steps.push_back({node->id, path->answers[k],
                                 "Reference: " + util::to_lower(node->title) + " " +
                                     util::to_lower(std::string(to_string(path->answers[k]))) + "."});
          }
          r["reference"] = true;
          r["reference_cot"] = cot_to_json(cot);
        }
        records.push_back(std::move(r));
      }
    }
    util::write_file_atomic(data / "manifest.json", json{{"task", task_id}, {"records", records}}.dump(1) + "\n");
    tasks.push_back({{"id", task_id},
                     {"name", tree.name()},
                     {"manifest", "data/" + task_id + "/manifest.json"},
                     {"tree", "trees/" + task_id + ".tree"},
                     {"templates", "templates/" + task_id},
                     {"grades", tree.grades()}});
    summary["tasks"][task_id] = {{"records", records.size()}, {"per_grade", total}};
  }

  json endpoints = json::array();
  for (const auto& m : kModels)
    endpoints.push_back({{"id", m}, {"base_url", "sim://local"}, {"api_key_env", ""}, {"temperature", 0.0},
                         {"max_tokens", 2048}, {"max_in_flight", 4}});
  json cfg{{"seed", opts.seed},
           {"tasks", tasks},
           {"endpoints", endpoints},
           {"pipeline", {{"per_grade", 30}, {"refs_per_grade", 1}, {"case", 4}, {"placement", "corresponding"},
                         {"select_case", 4}, {"concurrency", 4}, {"fixture_mode", "replay"}}},
           {"simulator", {{"profile", "sim/accuracy_profile.json"}}}};
  util::write_file_atomic(root / "defgrade.json", cfg.dump(2) + "\n");
  summary["config"] = (root / "defgrade.json").string();
  return summary;
}

}  // namespace defgrade::synth
