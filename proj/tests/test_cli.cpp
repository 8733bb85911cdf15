#include "doctest.h"

#include <fstream>
#include <sstream>

#include "eccdet/cli.hpp"
#include "eccdet/data.hpp"
#include "eccdet/decode.hpp"
#include "json.hpp"
#include "support.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = eccdet::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// FNV-1a over relative paths and contents in sorted order.
std::uint64_t digest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ull;
  const auto mix = [&](const std::string& s) {
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  };
  for (const auto& f : files) {
    mix(fs::relative(f, dir).string());
    std::ifstream in(f, std::ios::binary);
    mix(std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()));
  }
  return h;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(std::ifstream(p)); }

}  // namespace

TEST_CASE("gen-data is reproducible") {
  testing::TempDir dir("cli_gen");
  const std::vector<std::string> args{"gen-data", "--n-train", "6", "--n-test", "3", "--image-size", "64",
                                      "--seed", "7"};
  auto a = args, b = args;
  a.insert(a.end(), {"--out", (dir / "a").string()});
  b.insert(b.end(), {"--out", (dir / "b").string()});
  const Result ra = run(a);
  REQUIRE(ra.code == 0);
  REQUIRE(run(b).code == 0);
  CHECK(digest(dir / "a") == digest(dir / "b"));
  CHECK(fs::exists(dir / "a" / "train.json"));
  CHECK(fs::exists(dir / "a" / "test.json"));
  CHECK(eccdet::load_coco(dir / "a" / "train.json", dir / "a").size() == 6);

  auto c = args;
  c[8] = "8";
  c.insert(c.end(), {"--out", (dir / "c").string()});
  REQUIRE(run(c).code == 0);
  CHECK(digest(dir / "a") != digest(dir / "c"));
}

TEST_CASE("eval on perfect predictions prints F1 1.000") {
  testing::TempDir dir("cli_eval");
  REQUIRE(run({"gen-data", "--n-train", "2", "--n-test", "6", "--image-size", "64", "--out", dir.path().string()}).code == 0);
  const auto test = eccdet::load_coco(dir / "test.json", dir.path(), false);
  std::vector<eccdet::ImageDetections> preds;
  for (const auto& s : test) {
    eccdet::ImageDetections d{s.id, {}};
    for (const auto& b : s.boxes) d.detections.push_back({b, 0.9});
    preds.push_back(d);
  }
  eccdet::save_predictions(dir / "preds.json", preds);
  const Result r = run({"eval", "--pred", (dir / "preds.json").string(), "--gt", (dir / "test.json").string(),
                        "--out", (dir / "eval.json").string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("F1 1.000") != std::string::npos);
  CHECK(read_json(dir / "eval.json")["f1"] == 1.0);

  const Result pr = run({"plot-pr", "--pred", (dir / "preds.json").string(), "--gt", (dir / "test.json").string(),
                         "--out", (dir / "pr.png").string()});
  CHECK(pr.code == 0);
  CHECK(fs::file_size(dir / "pr.png") > 0);
  CHECK(fs::exists(dir / "pr.csv"));
}

TEST_CASE("usage and runtime errors") {
  const Result unknown = run({"eval", "--bogus"});
  CHECK(unknown.code == 2);
  CHECK(unknown.err.rfind("ERROR usage", 0) == 0);
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"eval"}).code == 2);
  CHECK(run({"train", "--out", "x"}).code == 2);  // --data is required
  CHECK(run({"gen-data", "--out", "x", "--negative-rate", "2"}).code == 2);
  CHECK(run({"--help"}).code == 0);

  testing::TempDir dir("cli_err");
  const Result missing = run({"eval", "--pred", (dir / "none.json").string(), "--gt", (dir / "none.json").string()});
  CHECK(missing.code == 1);
  CHECK(missing.err.rfind("ERROR ", 0) == 0);
  CHECK(std::count(missing.err.begin(), missing.err.end(), '\n') == 1);
  const Result no_run = run({"mine", "--data", dir.path().string(), "--out", (dir / "run").string()});
  CHECK(no_run.code == 1);
  CHECK(no_run.err.rfind("ERROR ", 0) == 0);
}

TEST_CASE("full recipe through the command line") {
  testing::TempDir dir("cli_recipe");
  const std::string data = (dir / "data").string();
  const std::string run_dir = (dir / "run").string();
  REQUIRE(run({"gen-data", "--n-train", "8", "--n-test", "4", "--image-size", "64", "--out", data}).code == 0);

  // Precedence: command-line flag > config file > preset default.
  {
    std::ofstream cfg(dir / "train.toml");
    cfg << "epochs=3\nbatch-size=4\nlr=0.002\n";
  }
  const Result t = run({"train", "--data", data, "--out", run_dir, "--config", (dir / "train.toml").string(),
                        "--epochs", "1", "--input-size", "64", "--fpn-channels", "8", "--head-channels", "8",
                        "--n-stages", "3", "--seed", "4"});
  REQUIRE_MESSAGE(t.code == 0, t.err);
  const auto cfg = read_json(fs::path(run_dir) / "config.json");
  CHECK(cfg["epochs"] == 1);       // flag beats file
  CHECK(cfg["batch_size"] == 4);   // file beats preset
  CHECK(cfg["lr"] == 0.002);
  CHECK(cfg["seed"] == 4);
  CHECK(cfg["grad_clip"] == 35.0);  // preset default
  CHECK(cfg["model"]["n_stages"] == 3);

  const Result m = run({"mine", "--data", data, "--out", run_dir});
  REQUIRE_MESSAGE(m.code == 0, m.err);
  CHECK(m.out.find("mined 8 images") != std::string::npos);
  const Result f = run({"finetune", "--data", data, "--out", run_dir});
  REQUIRE_MESSAGE(f.code == 0, f.err);
  const Result e = run({"eval", "--run", run_dir, "--data", data});
  REQUIRE_MESSAGE(e.code == 0, e.err);
  CHECK(e.out.rfind("IoU 0.50 | TP", 0) == 0);
  CHECK(fs::exists(fs::path(run_dir) / "eval.json"));
  CHECK(read_json(fs::path(run_dir) / "eval.json")["checkpoint"] == "stage2.ckpt");

  const Result inf = run({"infer", "--run", run_dir, "--gt", (fs::path(data) / "test.json").string(),
                          "--score-threshold", "0", "--out", (dir / "preds.json").string()});
  REQUIRE_MESSAGE(inf.code == 0, inf.err);
  CHECK(eccdet::load_predictions(dir / "preds.json").size() == 4);
  const Result e2 = run({"eval", "--pred", (dir / "preds.json").string(), "--gt", (fs::path(data) / "test.json").string()});
  CHECK(e2.code == 0);

  const Result p = run({"plot-iou-loss", "--run", run_dir});
  REQUIRE_MESSAGE(p.code == 0, p.err);
  CHECK(p.out.find("stage 1: spearman") != std::string::npos);
  CHECK(p.out.find("stage 2: spearman") != std::string::npos);
  CHECK(fs::exists(fs::path(run_dir) / "iou_loss.png"));
  CHECK(fs::exists(fs::path(run_dir) / "iou_loss.csv"));

  // Stage-2 config mismatch against a different run is reported, not crashed on.
  const Result ck = run({"infer", "--ckpt", (dir / "missing.ckpt").string(), "--gt",
                         (fs::path(data) / "test.json").string(), "--out", (dir / "p2.json").string()});
  CHECK(ck.code == 1);
}
