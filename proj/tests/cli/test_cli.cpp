#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "../support/models.hpp"
#include "nnspec/model_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "nnspec_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(NNSPEC_CLI_PATH) + " " + args + " >" +
                          (work_dir() / "stdout.txt").string() + " 2>" +
                          (work_dir() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Small fixture run: few samples so every subcommand finishes in seconds.
json small_config() {
  const fs::path fx = testmodels::fixture_dir();
  return {{"model", (fx / "tiny_vgg" / "manifest.json").string()},
          {"train", (fx / "data" / "train.spd").string()},
          {"id", (fx / "data" / "id_test.spd").string()},
          {"ood", {{"far_ood", (fx / "data" / "far_ood.spd").string()}}},
          {"taps", "conv2,fc1"},
          {"seed", 3},
          {"samples", {{"eval", 60}, {"train", 300}, {"gram", 40}, {"sensitivity", 30}}}};
}

fs::path write_config(const std::string& name, const json& j) {
  const fs::path p = work_dir() / (name + ".json");
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run("") == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("detect") == 2);
  CHECK(run("detect --config " + (work_dir() / "absent.json").string()) == 2);
  const fs::path cfg = write_config("ok", small_config());
  CHECK(run("detect --config " + cfg.string() + " --method bogus") == 2);
  CHECK(run("stable-rank --config " + cfg.string() + " --seed notanumber") == 2);
}

TEST_CASE("invalid configurations exit with 2") {
  std::ofstream(work_dir() / "broken.json") << "{ not json";
  CHECK(run("bias --config " + (work_dir() / "broken.json").string()) == 2);

  json j = small_config();
  j["id"] = "/nonexistent/id.spd";
  CHECK(run("bias --config " + write_config("missing_data", j).string()) == 2);
  CHECK(slurp(work_dir() / "stderr.txt").find("/nonexistent/id.spd") != std::string::npos);

  j = small_config();
  const fs::path cfg = write_config("taps", j);
  CHECK(run("stable-rank --config " + cfg.string() + " --taps relu1") == 2);
  CHECK(run("stable-rank --config " + cfg.string() + " --taps nowhere") == 2);
  CHECK(run("detect --method projection --config " + cfg.string() + " --epsilon 1.5") == 2);

  j = small_config();
  j["samples"]["eval"] = -4;
  CHECK(run("bias --config " + write_config("negative", j).string()) == 2);
}

TEST_CASE("a degenerate covariance is a numeric failure") {
  // Every training image identical: the tied covariance is zero.
  auto train = testmodels::random_images(1, 40, 16, 16, 3, 10);
  std::fill(train.pixels.begin(), train.pixels.end(), std::uint8_t{128});
  const fs::path data = work_dir() / "flat_train.spd";
  nnspec::save_dataset(data, train);
  json j = small_config();
  j["train"] = data.string();
  j["samples"]["train"] = 0;
  j["out"] = (work_dir() / "flat_out").string();
  CHECK(run("detect --method feature --config " + write_config("flat", j).string()) == 3);
  CHECK(slurp(work_dir() / "stderr.txt").find("degenerate") != std::string::npos);
}

TEST_CASE("outputs carry provenance and are reproducible") {
  json j = small_config();
  j["out"] = (work_dir() / "run_a").string();
  const fs::path a = write_config("run_a", j);
  j["out"] = (work_dir() / "run_b").string();
  const fs::path b = write_config("run_b", j);

  for (const char* cmd : {"stable-rank", "detect", "cka", "sensitivity", "compress", "bias"}) {
    CAPTURE(cmd);
    REQUIRE(run(std::string(cmd) + " --config " + a.string()) == 0);
    REQUIRE(run(std::string(cmd) + " --config " + b.string()) == 0);
  }
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(work_dir() / "run_a")) {
    CAPTURE(e.path());
    const std::string text = slurp(e.path());
    CHECK(text.rfind("# config_hash=", 0) == 0);
    CHECK(text.find("seed=3") != std::string::npos);
    CHECK(text.find("tap_position=post_activation") != std::string::npos);
    // Output directories differ, so only the hash line may differ.
    const auto strip = [](const std::string& s) { return s.substr(s.find('\n') + 1); };
    CHECK(strip(text) == strip(slurp(work_dir() / "run_b" / e.path().filename())));
    ++files;
  }
  CHECK(files >= 10);

  // Rerunning into the same directory is byte identical.
  const std::string before = slurp(work_dir() / "run_a" / "detect.csv");
  REQUIRE(run("detect --config " + a.string()) == 0);
  CHECK(slurp(work_dir() / "run_a" / "detect.csv") == before);

  // A different seed changes the recorded provenance.
  REQUIRE(run("bias --config " + a.string() + " --seed 4 --out " + (work_dir() / "run_c").string()) == 0);
  const std::string c = slurp(work_dir() / "run_c" / "bias.csv");
  CHECK(c.find("seed=4") != std::string::npos);
  CHECK(c.substr(0, c.find('\n')) != slurp(work_dir() / "run_a" / "bias.csv").substr(0, c.find('\n')));
}

TEST_CASE("detect output rows") {
  json j = small_config();
  j["out"] = (work_dir() / "rows").string();
  REQUIRE(run("detect --method feature --config " + write_config("rows", j).string()) == 0);
  std::istringstream csv(slurp(work_dir() / "rows" / "detect.csv"));
  std::string line;
  std::getline(csv, line);
  std::getline(csv, line);
  CHECK(line.rfind("method,score,layer,tap,ood,auroc", 0) == 0);
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    CHECK(line.rfind("feature,feature,", 0) == 0);
    ++rows;
  }
  CHECK(rows == 2);  // conv2 and fc1 against far_ood
}
