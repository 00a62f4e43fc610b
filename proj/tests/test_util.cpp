#include <set>

#include "doctest.h"
#include "support.hpp"

using namespace defgrade;

TEST_CASE("sha256 of known vectors") {
  CHECK(util::sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(util::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("base64 round trip") {
  CHECK(util::base64_encode("hello") == "aGVsbG8=");
  CHECK(util::base64_decode("aGVsbG8=") == "hello");
  util::Rng rng(3);
  for (int n = 0; n < 64; ++n) {
    std::string s;
    for (int i = 0; i < n; ++i) s.push_back(static_cast<char>(rng.below(256)));
    CHECK(util::base64_decode(util::base64_encode(s)) == s);
  }
}

TEST_CASE("round half up division") {
  CHECK(util::div_round_half_up(5, 2) == 3);
  CHECK(util::div_round_half_up(7, 2) == 4);
  CHECK(util::div_round_half_up(4, 3) == 1);
  CHECK(util::div_round_half_up(0, 9) == 0);
  CHECK(util::div_round_half_up(8985 * 46, 10000) == 41);
}

TEST_CASE("rng is reproducible and bounded") {
  util::Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs = differs || x != c.next_u64();
  }
  CHECK(differs);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto v = a.below(7);
    CHECK(v < 7);
    seen.insert(v);
    const auto u = a.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  CHECK(seen.size() == 7);
}

TEST_CASE("shuffle is a permutation") {
  util::Rng rng(9);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  auto w = v;
  rng.shuffle(w);
  CHECK(w != v);
  std::sort(w.begin(), w.end());
  CHECK(w == v);
}

TEST_CASE("file helpers") {
  testing::TempDir dir;
  const auto p = dir / "a/b/c.txt";
  util::write_file_atomic(p, "one");
  CHECK(util::read_file(p) == "one");
  util::write_file_atomic(p, "two");
  CHECK(util::read_file(p) == "two");
  CHECK(util::write_file_exclusive(dir / "x.txt", "1"));
  CHECK_FALSE(util::write_file_exclusive(dir / "x.txt", "2"));
  CHECK(util::read_file(dir / "x.txt") == "1");
  util::append_line(dir / "log", "l1");
  util::append_line(dir / "log", "l2");
  CHECK(util::read_file(dir / "log") == "l1\nl2\n");
  CHECK(util::portable_relative(dir / "a/b/c.txt", dir.path()) == "a/b/c.txt");
  CHECK_THROWS_AS(util::read_file(dir / "missing"), RuntimeFailure);
}

TEST_CASE("string helpers") {
  CHECK(util::trim("  x y \n") == "x y");
  CHECK(util::to_lower("AbC") == "abc");
  CHECK(util::split("a,b,,c", ',') == std::vector<std::string>{"a", "b", "", "c"});
}
