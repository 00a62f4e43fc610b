#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "defgrade/cot.hpp"
#include "json.hpp"

namespace defgrade::dataprep {

inline constexpr std::uint32_t kMaxSide = 1280;

struct ImageDims {
  std::uint32_t width = 1;
  std::uint32_t height = 1;
  bool operator==(const ImageDims&) const = default;
};

// Detector output in integer pixels: top-left corner plus extent.
struct BoundingBox {
  std::int64_t x = 0;
  std::int64_t y = 0;
  std::int64_t w = 0;
  std::int64_t h = 0;
  bool operator==(const BoundingBox&) const = default;
};

struct ImageRecord {
  std::string id;
  std::string task_id;
  std::filesystem::path path;
  ImageDims dims;
  Grade grade;
  std::vector<BoundingBox> boxes;
  bool reference = false;
  // Expert-authored step-by-step annotation used when this record serves as
  // an in-context reference.
  std::optional<CoTResult> reference_cot;
};

// Longer side capped at 1280 px, other side scaled by the same ratio
// (round half up, at least 1). Ties go to the width branch.
ImageDims resize_dims(ImageDims dims);

// Rescales boxes by the given ratio and clamps them to `to`. Boxes that end
// up with zero area are dropped and reported in `warnings`.
std::vector<BoundingBox> rescale_boxes(const std::vector<BoundingBox>& boxes, ImageDims from,
                                       ImageDims to, std::vector<std::string>* warnings);

struct ResizeOutcome {
  ImageRecord record;  // path points at the resized copy
  std::vector<std::string> warnings;
};

// Writes the resized copy to out_dir/<basename>; the source file is not touched.
ResizeOutcome resize_image(const ImageRecord& record, const std::filesystem::path& out_dir);

struct OverlayStyle {
  std::array<std::uint8_t, 3> color{255, 0, 0};
  std::uint32_t stroke = 3;
};

// Draws box outlines (clipped to the image) on a copy written to out_dir.
std::filesystem::path overlay_boxes(const ImageRecord& record, const OverlayStyle& style,
                                    const std::filesystem::path& out_dir);

struct DatasetSplit {
  std::string task_id;
  std::uint64_t seed = 0;
  std::size_t per_grade = 30;
  std::vector<Grade> grades;
  std::vector<std::string> train;                // record ids, grade-major
  std::map<Grade, std::vector<std::string>> references;
  std::vector<std::string> test;
  std::vector<Grade> short_grades;               // grades with fewer than per_grade records
  std::vector<std::string> warnings;
};

DatasetSplit stratified_split(const std::vector<ImageRecord>& records, const std::vector<Grade>& grades,
                              std::size_t per_grade, std::size_t refs_per_grade, std::uint64_t seed);

struct Manifest {
  std::string task_id;
  std::vector<ImageRecord> records;
};

// Manifest JSON: {"task": "...", "records": [{"id", "path", "grade",
// "boxes": [[x, y, w, h], ...], "reference": bool, "reference_cot": {...}}]}.
// Relative image paths are resolved against the manifest's directory.
Manifest load_manifest(const std::filesystem::path& path, bool read_dims = true);
nlohmann::json record_to_json(const ImageRecord& r, const std::filesystem::path& base);
ImageRecord record_from_json(const nlohmann::json& j, const std::string& task_id,
                             const std::filesystem::path& base);

}  // namespace defgrade::dataprep
