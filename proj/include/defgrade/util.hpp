#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace defgrade::util {

std::string sha256_hex(std::string_view bytes);
std::string sha256_file_hex(const std::filesystem::path& path);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it into place, so readers
// never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// Creates `path` with the given content only if it does not exist yet.
// Returns false when another writer got there first.
bool write_file_exclusive(const std::filesystem::path& path, std::string_view bytes);

void append_line(const std::filesystem::path& path, std::string_view line);

// Relative path from `base` using forward slashes; used for every path that
// ends up in a persisted artifact so outputs do not depend on the checkout
// location.
std::string portable_relative(const std::filesystem::path& target,
                              const std::filesystem::path& base);

std::string trim(std::string_view s);
std::string to_lower(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

// Round-half-up of num/den for non-negative operands.
std::uint64_t div_round_half_up(std::uint64_t num, std::uint64_t den);

// Seeded generator whose output sequence is identical on every platform.
// std::uniform_int_distribution and std::shuffle are implementation defined,
// so the bounded draws and the shuffle are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // Uniform in [0, bound).
  std::uint64_t below(std::uint64_t bound);
  // Uniform in [0, 1) with 53 bits.
  double uniform();
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stable 64-bit hash of a string (first 8 bytes of SHA-256).
std::uint64_t stable_hash64(std::string_view s);

}  // namespace defgrade::util
