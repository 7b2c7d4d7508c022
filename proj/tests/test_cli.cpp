// End-to-end checks of the installed command-line binary. The binary path
// arrives via the RFC_CLI_PATH compile definition.
#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rfcnet/data.hpp"
#include "rfcnet/model.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = RFC_CLI_PATH;

struct CmdResult {
  int status = -1;
  std::string out;
};

// Runs the binary through the shell with RFCNET_SEED scrubbed unless the
// caller sets it explicitly; captures stdout.
CmdResult run_cli(const std::string& args, const std::string& env = "",
                  const std::string& stderr_redirect = "2>/dev/null") {
  const std::string command =
      "env -u RFCNET_SEED " + env + (env.empty() ? "" : " ") + kCli + " " + args + " " + stderr_redirect;
  CmdResult result;
  FILE* pipe = popen(command.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buffer[4096];
  std::size_t got = 0;
  while ((got = fread(buffer, 1, sizeof buffer, pipe)) > 0) result.out.append(buffer, got);
  const int raw = pclose(pipe);
  result.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return result;
}

struct TempDir {
  fs::path path;

  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path = fs::temp_directory_path() /
           ("rfcnet_cli_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }

  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("help exits cleanly and no subcommand is a usage error") {
  auto help = run_cli("--help");
  CHECK(help.status == 0);
  CHECK(help.out.find("analyze") != std::string::npos);
  CHECK(help.out.find("train") != std::string::npos);
  CHECK(help.out.find("predict") != std::string::npos);

  CHECK(run_cli("").status == 2);
  CHECK(run_cli("frobnicate").status == 2);
}

TEST_CASE("analyze rejects inconsistent shape flags with a usage error") {
  CHECK(run_cli("analyze --m 3 --kernels 3,5").status == 2);
  CHECK(run_cli("analyze --preset a --m 3").status == 2);         // mutually exclusive
  CHECK(run_cli("analyze --preset z").status == 2);               // not a preset
  CHECK(run_cli("analyze --preset a --input-size 30 30").status == 2);  // not divisible by 4
}

TEST_CASE("analyze prints the cost table, reconciliation and reference figures") {
  auto res = run_cli("analyze --preset a --depth 2 --width 4 --input-size 32 32");
  REQUIRE(res.status == 0);
  CHECK(res.out.find("model: m=3 kernels=3,5,7 depth=2 width=4") != std::string::npos);
  CHECK(res.out.find("stem1.conv3x3") != std::string::npos);
  CHECK(res.out.find("tree1.ldcs") != std::string::npos);
  CHECK(res.out.find("tree reconciliation: closed-form") != std::string::npos);
  CHECK(res.out.find("concat merge doubles each fuse kernel input") != std::string::npos);
  CHECK(res.out.find("1 MAC = 2 FLOPs") != std::string::npos);
  // Published reference block, clearly labelled.
  CHECK(res.out.find("81.31") != std::string::npos);
  CHECK(res.out.find("5.76") != std::string::npos);
  CHECK(res.out.find("NOT reproduction targets") != std::string::npos);

  auto add = run_cli("analyze --preset a --depth 2 --width 4 --merge add --input-size 32 32");
  REQUIRE(add.status == 0);
  CHECK(add.out.find("(exact match)") != std::string::npos);
}

TEST_CASE("analyze --csv emits only the table") {
  auto res = run_cli("analyze --preset d --depth 1 --width 4 --csv --input-size 16 16");
  REQUIRE(res.status == 0);
  CHECK(res.out.rfind("layer,analytic_params,enumerated_params,bias_params,macs,flops\n", 0) == 0);
  CHECK(res.out.find("model:") == std::string::npos);
  CHECK(res.out.find("total,") != std::string::npos);
}

TEST_CASE("chains lists every leaf of preset a with receptive fields 34 through 82") {
  auto res = run_cli("chains --preset a");
  REQUIRE(res.status == 0);
  auto lines = lines_of(res.out);
  REQUIRE(lines.size() == 28);
  CHECK(lines[0] == "leaf kernels rf");
  CHECK(lines[1] == "0 3,3,3 34");
  CHECK(lines[6] == "5 3,5,7 58");
  CHECK(lines[27] == "26 7,7,7 82");
  int min_rf = 1000, max_rf = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t space = lines[i].rfind(' ');
    const int rf = std::stoi(lines[i].substr(space + 1));
    min_rf = std::min(min_rf, rf);
    max_rf = std::max(max_rf, rf);
  }
  CHECK(min_rf == 34);
  CHECK(max_rf == 82);

  auto shallow = run_cli("chains --preset c --depth 2");
  auto shallow_lines = lines_of(shallow.out);
  REQUIRE(shallow_lines.size() == 5);
  CHECK(shallow_lines[1] == "0 3,3 26");
  CHECK(shallow_lines[4] == "3 5,5 42");
}

TEST_CASE("gradcheck on the tiny model passes its tolerance") {
  auto res = run_cli("gradcheck --preset d --tiny");
  REQUIRE(res.status == 0);
  CHECK(res.out.find("gradcheck: max relative error") != std::string::npos);
  CHECK(res.out.find("gradcheck PASS") != std::string::npos);

  CHECK(run_cli("gradcheck --preset d --input-size 10").status == 2);
}

TEST_CASE("training with a zero learning rate reproduces the initialisation checkpoint") {
  TempDir dir;
  const std::string ckpt = dir.file("zero.ckpt");
  const std::string log = dir.file("hist.csv");
  const std::string err = dir.file("stderr.txt");
  auto res = run_cli("train --preset d --depth 1 --width 4 --synthetic 6 --size 16 16 "
                     "--epochs 1 --lr 0 --out " + ckpt + " --log " + log,
                     "", "2>" + err);
  REQUIRE(res.status == 0);
  CHECK(res.out.find("best val_miou") != std::string::npos);
  CHECK(res.out.find("checkpoint written to " + ckpt) != std::string::npos);
  CHECK(res.out.find("epoch   1") != std::string::npos);
  // Diagnostics go to stderr, not stdout.
  CHECK(res.out.find("training on") == std::string::npos);
  CHECK(slurp(err).find("training on 5 samples, validating on 1") != std::string::npos);

  const std::string history = slurp(log);
  auto history_lines = lines_of(history);
  REQUIRE(history_lines.size() == 2);
  CHECK(history_lines[0] == "epoch,lr,mean_loss,val_miou");
  CHECK(history_lines[1].rfind("1,0,", 0) == 0);

  // lr 0 means the checkpoint must hold exactly the seed-1 initial weights.
  rfc::RfcModel<float> loaded = rfc::load_checkpoint(ckpt);
  rfc::RfcConfig cfg = rfc::RfcConfig::preset('d');
  cfg.depth = 1;
  cfg.width = 4;
  cfg.stem1 = 4;
  cfg.stem2 = 4;
  rfc::RfcModel<float> fresh = rfc::build_rfc_net<float>(cfg);
  auto a = loaded.named_parameters();
  auto b = fresh.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    const auto av = a[i].second.data();
    const auto bv = b[i].second.data();
    REQUIRE(av.size() == bv.size());
    for (std::size_t j = 0; j < av.size(); ++j) CHECK(av[j] == bv[j]);
  }
}

TEST_CASE("train requires exactly one data source") {
  TempDir dir;
  CHECK(run_cli("train --preset d --epochs 1").status == 2);
  CHECK(run_cli("train --preset d --epochs 1 --synthetic 4 --data " + dir.path.string()).status == 2);
}

TEST_CASE("eval and predict consume a saved checkpoint") {
  TempDir dir;
  const std::string ckpt = dir.file("model.ckpt");
  auto train = run_cli("train --preset d --depth 1 --width 4 --synthetic 6 --size 16 16 "
                       "--epochs 1 --lr 0.01 --out " + ckpt);
  REQUIRE(train.status == 0);

  auto eval = run_cli("eval --checkpoint " + ckpt + " --synthetic 4 --size 16 16 --seed 3");
  REQUIRE(eval.status == 0);
  CHECK(eval.out.rfind("miou ", 0) == 0);
  CHECK(eval.out.find(" over 4 samples") != std::string::npos);

  auto per_image = run_cli("eval --checkpoint " + ckpt + " --synthetic 4 --size 16 16 --seed 3 --per-image");
  REQUIRE(per_image.status == 0);
  CHECK(per_image.out.rfind("miou ", 0) == 0);

  CHECK(run_cli("eval --synthetic 4").status == 2);  // --checkpoint is required
  CHECK(run_cli("eval --checkpoint " + dir.file("nope.ckpt") + " --synthetic 4").status == 1);

  const std::string preds = dir.file("preds");
  auto predict = run_cli("predict --checkpoint " + ckpt + " --synthetic 2 --size 16 16 --out " + preds);
  REQUIRE(predict.status == 0);
  CHECK(predict.out.find("wrote 2 masks to " + preds) != std::string::npos);
  for (const std::string stem : {"synthetic_000", "synthetic_001"}) {
    const std::string path = preds + "/" + stem + "_pred.pgm";
    REQUIRE(fs::exists(path));
    const rfc::Raster mask = rfc::read_pnm(path);
    CHECK(mask.width == 16);
    CHECK(mask.height == 16);
    CHECK(mask.channels == 1);
    for (const auto byte : mask.data) CHECK((byte == 0 || byte == 255));
  }
}

TEST_CASE("predict runs on a directory of images without masks") {
  TempDir dir;
  const std::string ckpt = dir.file("model.ckpt");
  REQUIRE(run_cli("train --preset d --depth 1 --width 4 --synthetic 6 --size 16 16 "
                  "--epochs 1 --lr 0 --out " + ckpt).status == 0);

  fs::create_directories(dir.path / "data" / "images");
  rfc::Raster raster;
  raster.width = 12;
  raster.height = 12;
  raster.channels = 3;
  raster.data.assign(12 * 12 * 3, 90);
  rfc::write_pnm((dir.path / "data" / "images" / "scan.ppm").string(), raster);

  const std::string preds = dir.file("out");
  auto res = run_cli("predict --checkpoint " + ckpt + " --data " + (dir.path / "data").string() +
                     " --size 16 16 --out " + preds);
  REQUIRE(res.status == 0);
  CHECK(res.out.find("wrote 1 masks") != std::string::npos);
  const rfc::Raster mask = rfc::read_pnm(preds + "/scan_pred.pgm");
  CHECK(mask.width == 16);
  CHECK(mask.height == 16);
}

TEST_CASE("the seed environment variable feeds defaults and flags override it") {
  auto env_seed = run_cli("analyze --preset d --depth 1 --width 4 --input-size 16 16", "RFCNET_SEED=7");
  REQUIRE(env_seed.status == 0);
  CHECK(env_seed.out.find("seed=7") != std::string::npos);

  auto flag_wins = run_cli("analyze --preset d --depth 1 --width 4 --seed 9 --input-size 16 16",
                           "RFCNET_SEED=7");
  REQUIRE(flag_wins.status == 0);
  CHECK(flag_wins.out.find("seed=9") != std::string::npos);

  CHECK(run_cli("analyze --preset d --input-size 16 16", "RFCNET_SEED=banana").status == 2);
}
