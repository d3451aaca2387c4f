#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "esknet/checkpoint.hpp"
#include "esknet/image_io.hpp"

using namespace esknet;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "esknet_cli_test";

const std::string kSmall =
    " --profile desk --seed 3 -q --set net.input_size=16 --set net.base_channels=2 --set data.synthetic_count=8"
    " --set data.synthetic_size=24 --set train.epochs=2 --set augment.multiplier=1 --set train.batch_size=4";

int run(const std::string& args, const std::string& log = "") {
  std::string cmd = std::string(ESKNET_CLI_PATH) + " " + args;
  cmd += log.empty() ? " > /dev/null 2>&1" : " > " + (kRoot / log).string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream oss;
  oss << in.rdbuf();
  return oss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Drops the trailing wall-time column of each row.
std::string loss_columns(const fs::path& p) {
  std::string out;
  for (const auto& l : lines(p)) out += l.substr(0, l.rfind('\t')) + '\n';
  return out;
}

std::string out(const std::string& name) { return " --out " + (kRoot / name).string(); }

struct Fixture {
  Fixture() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
  }
};

}  // namespace

TEST_CASE("command-line workflow") {
  Fixture fx;

  SECTION("train, rerun and eval") {
    REQUIRE(run(kSmall + out("a") + " train --synthetic") == 0);
    for (const char* f : {"checkpoint.eskn", "train_log.tsv", "effective_config.txt", "manifest.tsv", "test_metrics.tsv"})
      CHECK(fs::exists(kRoot / "a" / f));
    const auto ck = load_checkpoint(kRoot / "a" / "checkpoint.eskn");
    CHECK(ck.spec.input_h == 16);
    CHECK(ck.spec.base_channels == 2);

    REQUIRE(run(kSmall + out("b") + " train --synthetic") == 0);
    CHECK(loss_columns(kRoot / "a" / "train_log.tsv") == loss_columns(kRoot / "b" / "train_log.tsv"));
    CHECK(slurp(kRoot / "a" / "checkpoint.eskn") == slurp(kRoot / "b" / "checkpoint.eskn"));

    // The echoed configuration alone reproduces the run.
    REQUIRE(run("-q --config " + (kRoot / "a" / "effective_config.txt").string() + out("c") + " train --synthetic") == 0);
    CHECK(slurp(kRoot / "a" / "checkpoint.eskn") == slurp(kRoot / "c" / "checkpoint.eskn"));

    const std::string ckpt = " --checkpoint " + (kRoot / "a" / "checkpoint.eskn").string();
    REQUIRE(run(kSmall + out("e") + " eval --synthetic --thresholds 11" + ckpt, "eval.txt") == 0);
    CHECK(lines(kRoot / "e" / "curves.tsv").size() == 12);
    CHECK(lines(kRoot / "e" / "metrics.tsv").size() == 1 + 8 + 2);
    CHECK(slurp(kRoot / "eval.txt").find("auc ") != std::string::npos);
    CHECK(slurp(kRoot / "eval.txt").find("All:  jaccard") != std::string::npos);

    REQUIRE(run(kSmall + out("d") + " eval --synthetic --degrade --split test" + ckpt) == 0);
    CHECK(lines(kRoot / "d" / "curves.tsv").size() == 102);
    CHECK(lines(kRoot / "d" / "metrics.tsv").size() == 1 + 2 + 2);

    CHECK(run(kSmall + out("x") + " eval --synthetic --checkpoint " + (kRoot / "none.eskn").string()) == 1);
  }

  SECTION("predict writes maps at the source resolution") {
    REQUIRE(run(kSmall + " --set data.folds=2" + out("s") + " synth --count 2 --size 40") == 0);
    CHECK(lines(kRoot / "s" / "folds.tsv").size() == 3);
    REQUIRE(run(kSmall + " --set net.deep_supervision=true" + out("m") + " train --synthetic --all") == 0);
    const std::string ckpt = " --checkpoint " + (kRoot / "m" / "checkpoint.eskn").string();
    const std::string imgs = " " + (kRoot / "s" / "images" / "synth_0000.png").string() + " " +
                             (kRoot / "s" / "images" / "synth_0001.png").string();
    REQUIRE(run(kSmall + out("p") + " predict --all-stages" + ckpt + imgs) == 0);
    for (const char* stem : {"synth_0000", "synth_0001"}) {
      const auto prob = read_png(kRoot / "p" / (std::string(stem) + "_prob.png"));
      const auto mask = read_png(kRoot / "p" / (std::string(stem) + "_mask.png"));
      CHECK(prob.height == 40);
      CHECK(prob.width == 40);
      CHECK(mask.height == 40);
      for (auto v : mask.pixels) CHECK((v == 0 || v == 255));
      std::size_t n = 0;
      for (const auto& e : fs::directory_iterator(kRoot / "p" / (std::string(stem) + "_stages"))) {
        CHECK(read_png(e.path()).width == 40);
        ++n;
      }
      CHECK(n == 5);
    }

    REQUIRE(run(kSmall + " --set net.deep_supervision=false" + out("n") + " train --synthetic --all") == 0);
    CHECK(run(kSmall + out("q") + " predict --all-stages --checkpoint " + (kRoot / "n" / "checkpoint.eskn").string() + imgs) == 1);
    std::ofstream(kRoot / "junk.png") << "junk";
    CHECK(run(kSmall + out("q") + " predict" + ckpt + " " + (kRoot / "junk.png").string()) == 2);
  }

  SECTION("ablate") {
    REQUIRE(run(kSmall + " --set train.epochs=1" + out("ab") + " ablate --synthetic --folds 0 1", "ablate.txt") == 0);
    const auto table = lines(kRoot / "ab" / "ablation.tsv");
    REQUIRE(table.size() == 5);
    CHECK(table[1].rfind("baseline_unet\t", 0) == 0);
    CHECK(table[4].rfind("+esk+deep_supervision\t", 0) == 0);
    CHECK(fs::exists(kRoot / "ab" / "ablation_manifests.tsv"));
    CHECK(slurp(kRoot / "ablate.txt").find("+sk\t") != std::string::npos);
  }

  SECTION("error exit codes") {
    CHECK(run(kSmall + out("f") + " train --dataset " + (kRoot / "missing").string()) == 2);
    CHECK(run(kSmall + " --set bogus.key=1" + out("f") + " train --synthetic") == 1);
    CHECK(run(kSmall + " --set train.batch_size=0" + out("f") + " train --synthetic") == 1);
    CHECK(run("--profile huge verify") == 1);
    CHECK(run("frobnicate") == 1);
  }

  SECTION("verify") {
    CHECK(run("--out " + (kRoot / "v").string() + " verify --seeds 2", "verify.txt") == 0);
    CHECK(slurp(kRoot / "verify.txt").find("FAIL") == std::string::npos);
    CHECK(run("verify --seeds 2 --corrupt-gradient esk_block", "corrupt.txt") == 4);
    const auto text = slurp(kRoot / "corrupt.txt");
    CHECK(text.find("verify failed:") != std::string::npos);
    CHECK(text.find("esk_block") != std::string::npos);
  }
}
