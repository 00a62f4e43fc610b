#include <cstdio>
#include <cstdlib>
#include <string>
#include <sys/wait.h>

#include "defgrade/util.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

using nlohmann::json;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome run(const std::string& args) {
  const std::string cmd = std::string(DEFGRADE_CLI) + " " + args + " 2>/dev/null";
  Outcome o;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) o.out.append(buf, n);
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(run("--help").code == 0);
  CHECK(run("").code == 1);
  CHECK(run("frobnicate").code == 1);
  CHECK(run("eval --case 9").code == 1);
  CHECK(run("prep --replay --live").code == 1);
}

TEST_CASE("stage failures map to exit codes") {
  testing::TempDir dir;
  const auto root = (dir / "p").string();
  CHECK(run("prep --config " + (dir / "nope.json").string()).code == 2);
  auto s = run("synth -o " + root + " --per-grade 4 --no-large --assets " + testing::assets_dir().string() + " --json");
  REQUIRE(s.code == 0);
  CHECK(json::parse(s.out)["tasks"]["task3"]["records"] == 16);
  CHECK(run("synth -o " + root + " --no-large").code == 2);

  const auto cfg = " --config " + root + "/defgrade.json";
  CHECK(run("select -t task3" + cfg).code == 3);
  auto dry = run("prep -t task3 --dry-run --json" + cfg);
  REQUIRE(dry.code == 0);
  CHECK(json::parse(dry.out)["dry_run"] == true);
  CHECK_FALSE(std::filesystem::exists(dir / "p/work/task3/split.json"));
  // 4 records per grade cannot fill 30 training slots; prep reports the shortfall.
  auto prep = run("--json prep -t task3" + cfg);
  REQUIRE(prep.code == 0);
  CHECK(std::filesystem::exists(dir / "p/work/task3/split.json"));
  CHECK(json::parse(prep.out)["tasks"]["task3"]["test"] == 0);
  CHECK(run("eval -t task3 -m GPT-5-chat --record" + cfg).code == 3);
}

TEST_CASE("end-to-end through the command line") {
  testing::TempDir dir;
  const auto root = (dir / "p").string();
  REQUIRE(run("synth -o " + root + " --per-grade 32 --no-large --assets " + testing::assets_dir().string()).code == 0);
  const auto cfg = " --config " + root + "/defgrade.json";
  REQUIRE(run("prep -t task3" + cfg).code == 0);
  CHECK(run("eval -t task3 -m nobody" + cfg).code == 2);
  CHECK(run("eval -t task3 -m GPT-5-chat --replay" + cfg).code == 3);
  auto ev = run("eval -t task3 -m GPT-5-chat --record --json -j 2" + cfg);
  REQUIRE(ev.code == 0);
  CHECK(json::parse(ev.out)["runs"].size() == 1);
  CHECK(run("select -t task3" + cfg).code == 0);
  auto g = run("gradcheck --eps 1e-5 --json" + cfg);
  REQUIRE(g.code == 0);
  CHECK(json::parse(g.out)["max_rel_error"].get<double>() < 1e-4);
}
