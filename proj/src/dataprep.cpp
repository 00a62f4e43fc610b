#include "defgrade/dataprep.hpp"

#include <algorithm>
#include <set>

#include "defgrade/error.hpp"
#include "defgrade/image.hpp"
#include "defgrade/util.hpp"

namespace fs = std::filesystem;

namespace defgrade::dataprep {

ImageDims resize_dims(ImageDims d) {
  if (d.width == 0 || d.height == 0) throw InvalidArgument("image dimensions must be positive");
  const std::uint32_t longer = std::max(d.width, d.height);
  if (longer < kMaxSide) return d;
  auto scaled = [](std::uint32_t side, std::uint32_t longer_side) {
    auto v = util::div_round_half_up(std::uint64_t{side} * kMaxSide, longer_side);
    return static_cast<std::uint32_t>(std::max<std::uint64_t>(v, 1));
  };
  if (d.width >= d.height) return {kMaxSide, scaled(d.height, d.width)};
  return {scaled(d.width, d.height), kMaxSide};
}

std::vector<BoundingBox> rescale_boxes(const std::vector<BoundingBox>& boxes, ImageDims from, ImageDims to,
                                       std::vector<std::string>* warnings) {
  std::vector<BoundingBox> out;
  auto clamp = [](std::int64_t v, std::int64_t hi) { return std::clamp<std::int64_t>(v, 0, hi); };
  auto scale = [](std::int64_t v, std::uint32_t num, std::uint32_t den) {
    return static_cast<std::int64_t>(util::div_round_half_up(static_cast<std::uint64_t>(v) * num, den));
  };
  for (const auto& b : boxes) {
    std::int64_t x1 = clamp(b.x, from.width), y1 = clamp(b.y, from.height);
    std::int64_t x2 = clamp(b.x + b.w, from.width), y2 = clamp(b.y + b.h, from.height);
    x1 = clamp(scale(x1, to.width, from.width), to.width);
    x2 = clamp(scale(x2, to.width, from.width), to.width);
    y1 = clamp(scale(y1, to.height, from.height), to.height);
    y2 = clamp(scale(y2, to.height, from.height), to.height);
    if (x2 <= x1 || y2 <= y1) {
      if (warnings) {
        warnings->push_back("dropped zero-area box [" + std::to_string(b.x) + ", " + std::to_string(b.y) + ", " +
                            std::to_string(b.w) + ", " + std::to_string(b.h) + "]");
      }
      continue;
    }
    out.push_back({x1, y1, x2 - x1, y2 - y1});
  }
  return out;
}

ResizeOutcome resize_image(const ImageRecord& record, const fs::path& out_dir) {
  auto img = image::read(record.path);
  ImageDims src{img.width, img.height};
  auto dst = resize_dims(src);
  ResizeOutcome out;
  out.record = record;
  out.record.dims = dst;
  out.record.path = out_dir / record.path.filename();
  out.record.boxes = rescale_boxes(record.boxes, src, dst, &out.warnings);
  for (auto& w : out.warnings) w = record.id + ": " + w;
  image::write(out.record.path, image::resize_bilinear(img, dst.width, dst.height));
  return out;
}

fs::path overlay_boxes(const ImageRecord& record, const OverlayStyle& style, const fs::path& out_dir) {
  auto img = image::read(record.path);
  const std::uint8_t gray = static_cast<std::uint8_t>(
      (299 * style.color[0] + 587 * style.color[1] + 114 * style.color[2] + 500) / 1000);
  const auto W = static_cast<std::int64_t>(img.width), H = static_cast<std::int64_t>(img.height);
  const auto s = static_cast<std::int64_t>(std::max<std::uint32_t>(style.stroke, 1));
  for (const auto& b : record.boxes) {
    const std::int64_t x0 = b.x, y0 = b.y, x1 = b.x + b.w, y1 = b.y + b.h;
    for (std::int64_t y = std::max<std::int64_t>(y0, 0); y < std::min(y1, H); ++y) {
      for (std::int64_t x = std::max<std::int64_t>(x0, 0); x < std::min(x1, W); ++x) {
        bool edge = x < x0 + s || x >= x1 - s || y < y0 + s || y >= y1 - s;
        if (!edge) continue;
        auto* px = img.at(static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y));
        if (img.channels == 3) {
          px[0] = style.color[0];
          px[1] = style.color[1];
          px[2] = style.color[2];
        } else {
          px[0] = gray;
        }
      }
    }
  }
  auto out = out_dir / record.path.filename();
  image::write(out, img);
  return out;
}

DatasetSplit stratified_split(const std::vector<ImageRecord>& records, const std::vector<Grade>& grades,
                              std::size_t per_grade, std::size_t refs_per_grade, std::uint64_t seed) {
  if (grades.empty()) throw InvalidArgument("split needs a non-empty grade set");
  if (per_grade == 0) throw InvalidArgument("per_grade must be positive");
  if (refs_per_grade > per_grade) throw InvalidArgument("refs_per_grade cannot exceed per_grade");

  DatasetSplit split;
  split.seed = seed;
  split.per_grade = per_grade;
  split.grades = grades;
  if (!records.empty()) split.task_id = records.front().task_id;

  std::map<Grade, std::vector<const ImageRecord*>> by_grade;
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (std::find(grades.begin(), grades.end(), r.grade) == grades.end())
      throw InvalidArgument("record " + r.id + " has grade '" + r.grade + "' outside the task's grade set");
    if (!ids.insert(r.id).second) throw InvalidArgument("duplicate record id " + r.id);
    by_grade[r.grade].push_back(&r);
  }

  util::Rng rng(seed);
  for (const auto& g : grades) {
    auto& pool = by_grade[g];
    if (pool.empty()) throw InvalidArgument("grade '" + g + "' has no records; cannot build a stratified split");
    // Input order must not matter: sort first, then shuffle.
    std::sort(pool.begin(), pool.end(), [](auto* a, auto* b) { return a->id < b->id; });
    rng.shuffle(pool);
    const std::size_t take = std::min(per_grade, pool.size());
    if (pool.size() < per_grade) {
      split.short_grades.push_back(g);
      split.warnings.push_back("grade '" + g + "' has only " + std::to_string(pool.size()) + " record(s); train takes all");
    }
    // Records flagged as references are pulled into the train slice.
    std::size_t next_slot = 0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (pool[i]->reference && next_slot < std::min(refs_per_grade, take)) {
        std::rotate(pool.begin() + static_cast<std::ptrdiff_t>(next_slot), pool.begin() + static_cast<std::ptrdiff_t>(i),
                    pool.begin() + static_cast<std::ptrdiff_t>(i) + 1);
        ++next_slot;
      }
    }
    auto& refs = split.references[g];
    for (std::size_t i = 0; i < take; ++i) {
      split.train.push_back(pool[i]->id);
      if (refs.size() < refs_per_grade) refs.push_back(pool[i]->id);
    }
    for (std::size_t i = take; i < pool.size(); ++i) split.test.push_back(pool[i]->id);
  }
  if (split.test.empty()) split.warnings.push_back("test subset is empty");
  return split;
}

nlohmann::json record_to_json(const ImageRecord& r, const fs::path& base) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : r.boxes) boxes.push_back({b.x, b.y, b.w, b.h});
  nlohmann::json j{{"id", r.id},
                   {"path", util::portable_relative(r.path, base)},
                   {"grade", r.grade},
                   {"width", r.dims.width},
                   {"height", r.dims.height},
                   {"boxes", std::move(boxes)}};
  if (r.reference) j["reference"] = true;
  if (r.reference_cot) j["reference_cot"] = cot_to_json(*r.reference_cot);
  return j;
}

ImageRecord record_from_json(const nlohmann::json& j, const std::string& task_id, const fs::path& base) {
  ImageRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.task_id = task_id;
    fs::path p = j.at("path").get<std::string>();
    r.path = p.is_absolute() ? p : base / p;
    r.grade = j.at("grade").get<std::string>();
    if (j.contains("width")) r.dims = {j.at("width").get<std::uint32_t>(), j.at("height").get<std::uint32_t>()};
    for (const auto& b : j.value("boxes", nlohmann::json::array())) {
      if (!b.is_array() || b.size() != 4) throw InvalidArgument("record " + r.id + ": boxes must be [x, y, w, h]");
      r.boxes.push_back({b[0].get<std::int64_t>(), b[1].get<std::int64_t>(), b[2].get<std::int64_t>(),
                         b[3].get<std::int64_t>()});
    }
    r.reference = j.value("reference", false);
    if (j.contains("reference_cot")) r.reference_cot = cot_from_json(j.at("reference_cot"));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed record: ") + e.what());
  }
  return r;
}

Manifest load_manifest(const fs::path& path, bool read_dims) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(util::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const RuntimeFailure& e) {
    throw ConfigError(e.what());
  }
  Manifest m;
  try {
    m.task_id = j.at("task").get<std::string>();
    for (const auto& jr : j.at("records")) {
      auto r = record_from_json(jr, m.task_id, path.parent_path());
      if (read_dims) {
        auto d = image::read_dims(r.path);
        r.dims = {d[0], d[1]};
        for (const auto& b : r.boxes) {
          if (b.x < 0 || b.y < 0 || b.w <= 0 || b.h <= 0 || b.x + b.w > d[0] || b.y + b.h > d[1])
            throw InvalidArgument("record " + r.id + ": box lies outside the image");
        }
      }
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const RuntimeFailure& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace defgrade::dataprep
