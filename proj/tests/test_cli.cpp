#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "respike_cli_tests";

struct Outcome {
  int code;
  std::string out;
};

Outcome cli(const std::string& args) {
  fs::create_directories(kWork);
  const fs::path log = kWork / "stdout.txt";
  const std::string cmd = std::string(RESPIKE_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// relative path -> contents for every file under root
std::vector<std::pair<std::string, std::string>> tree(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.emplace_back(fs::relative(e.path(), root).string(), slurp(e.path()));
  }
  std::sort(files.begin(), files.end());
  return files;
}

const std::string kTinyData = "--classes 3 --train-per-class 2 --test-per-class 1 --frames 4 --size 16";

fs::path tiny_data() {
  static const fs::path dir = [] {
    fs::path d = kWork / "tiny";
    fs::remove_all(d);
    if (cli("gen-data " + kTinyData + " --out " + d.string()).code != 0) std::abort();
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, HelpForEverySubcommand) {
  EXPECT_EQ(cli("--help").code, 0);
  for (const char* sub : {"gen-data", "decompose", "train", "eval", "profile", "sweep-stride", "attn-dump"}) {
    Outcome r = cli(std::string(sub) + " --help");
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("--"), std::string::npos) << sub;
  }
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli("").code, 1);
  EXPECT_EQ(cli("frobnicate").code, 1);
  EXPECT_EQ(cli("gen-data --out x --bogus-flag 3").code, 1);
  EXPECT_EQ(cli("train --out x").code, 1);  // --data missing
  EXPECT_EQ(cli("profile --table4 vgg16").code, 1);
  EXPECT_EQ(cli("train --data " + tiny_data().string() + " --out " + (kWork / "t").string() + " --stride 1").code, 1);
}

TEST(Cli, RuntimeFailuresExitTwo) {
  fs::create_directories(kWork);
  std::ofstream(kWork / "junk.rspk") << "not a tensor";
  Outcome r = cli("decompose --clip " + (kWork / "junk.rspk").string() + " --out " + (kWork / "dec").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("byte offset"), std::string::npos) << r.out;
}

TEST(Cli, GenDataIsReproducible) {
  const fs::path a = kWork / "gen_a", b = kWork / "gen_b", c = kWork / "gen_c";
  for (const auto& d : {a, b, c}) fs::remove_all(d);
  ASSERT_EQ(cli("gen-data --seed 7 " + kTinyData + " --out " + a.string()).code, 0);
  ASSERT_EQ(cli("gen-data --seed 7 " + kTinyData + " --out " + b.string()).code, 0);
  ASSERT_EQ(cli("gen-data --seed 8 " + kTinyData + " --out " + c.string()).code, 0);
  const auto ta = tree(a);
  EXPECT_EQ(ta.size(), 10u);  // manifest + 9 clips
  EXPECT_EQ(ta, tree(b));
  EXPECT_NE(ta, tree(c));
}

TEST(Cli, PublishedRowEnergy) {
  Outcome r = cli("profile --table4 hmdb-ms18");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("E=4.48mJ"), std::string::npos) << r.out;
  Outcome list = cli("profile --list-table4");
  EXPECT_EQ(list.code, 0);
  EXPECT_NE(list.out.find("ucf-respike50"), std::string::npos);
}

TEST(Cli, TrainEvalAndDecompose) {
  const fs::path out = kWork / "train";
  fs::remove_all(out);
  Outcome r = cli("train --data " + tiny_data().string() + " --out " + out.string() +
              " --epochs 1 --batch-size 3 --stride 2");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("\"train\""), std::string::npos) << "resolved config not logged";
  EXPECT_TRUE(fs::exists(out / "metrics.csv"));
  EXPECT_TRUE(fs::exists(out / "checkpoint"));

  Outcome e = cli("eval --checkpoint " + (out / "checkpoint").string() + " --data " + tiny_data().string() +
              " --out " + out.string());
  ASSERT_EQ(e.code, 0) << e.out;
  EXPECT_TRUE(fs::exists(out / "eval.json"));

  Outcome d = cli("decompose --clip " + (tiny_data() / "clips" / "test_00006.rspk").string() + " --stride 2 --out " +
              (out / "dec").string());
  ASSERT_EQ(d.code, 0) << d.out;
  EXPECT_TRUE(fs::exists(out / "dec" / "sparsity.csv"));
}

TEST(Cli, SweepStrideEnergyFallsWithStride) {
  const fs::path out = kWork / "sweep";
  fs::remove_all(out);
  Outcome r = cli("sweep-stride --data " + tiny_data().string() + " --out " + out.string() +
              " --strides 2,4 --epochs 1 --batch-size 3 --clips 0");
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream in(out / "sweep.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "stride,acc,energy_mj");
  std::vector<double> energy;
  while (std::getline(in, line)) energy.push_back(std::stod(line.substr(line.rfind(',') + 1)));
  ASSERT_EQ(energy.size(), 2u);
  EXPECT_GT(energy[0], energy[1]);
}
