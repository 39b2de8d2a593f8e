#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "doctest.h"
#include "mixssm/checkpoint.hpp"
#include "mixssm/cli.hpp"
#include "mixssm/config.hpp"

using namespace mixssm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "mixssm_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mixssm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.image_height = m.image_width = 16;
  m.depths = {1, 1};
  m.channels = {8, 16};
  m.num_classes = 3;
  m.seed = 5;
  return m;
}

fs::path write_config(const fs::path& dir, const ModelConfig& m, double lr = 1e-3, std::size_t max_steps = 4) {
  RunConfig rc;
  rc.model = m;
  rc.train.epochs = 2;
  rc.train.batch_size = 4;
  rc.train.lr = lr;
  rc.train.max_steps = max_steps;
  const auto path = dir / "run.json";
  write_file(path, run_config_to_json(rc));
  return path;
}

fs::path synth(const fs::path& dir, std::size_t classes = 3, std::size_t per_class = 4) {
  const auto data = dir / "data";
  const auto r = cli({"synth", "--out", data.string(), "--classes", std::to_string(classes), "--per-class",
                      std::to_string(per_class), "--size", "16", "--seed", "3"});
  REQUIRE(r.code == 0);
  return data;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  }
  return out;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("usage errors exit 1") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({"train", "--config"}).code == kExitUsage);
  CHECK(cli({"analyze", "--config", "x", "--out", "y", "--sweep", "heads"}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("synth is deterministic per seed") {
  const auto dir = scratch("synth");
  const auto a = synth(dir / "a");
  const auto b = synth(dir / "b");
  CHECK(tree(a) == tree(b));
  CHECK(tree(a).size() == 12);
  CHECK(cli({"synth", "--out", (dir / "c").string(), "--classes", "3", "--per-class", "4", "--size", "16", "--seed",
             "4"})
            .code == 0);
  CHECK(tree(a) != tree(dir / "c"));
  CHECK(cli({"synth", "--out", (dir / "d").string(), "--classes", "1"}).code == kExitUsage);
}

TEST_CASE("train reports a missing data directory") {
  const auto dir = scratch("missing");
  const auto cfg = write_config(dir, tiny_model());
  const auto missing = (dir / "nope").string();
  const auto r = cli({"train", "--config", cfg.string(), "--data", missing, "--out", (dir / "m.ckpt").string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find(missing) != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "m.ckpt"));
}

TEST_CASE("train rejects bad configs and class-count mismatches") {
  const auto dir = scratch("badcfg");
  const auto data = synth(dir);
  write_file(dir / "bad.json", R"({"model":{"preset":"desk","depth":[1]}})");
  auto r = cli({"train", "--config", (dir / "bad.json").string(), "--data", data.string(), "--out",
                (dir / "m.ckpt").string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("depth") != std::string::npos);

  auto m = tiny_model();
  m.num_classes = 5;
  r = cli({"train", "--config", write_config(dir, m).string(), "--data", data.string(), "--out",
           (dir / "m.ckpt").string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("5 classes") != std::string::npos);
}

TEST_CASE("train with lr 0 writes the initial parameters") {
  const auto dir = scratch("lr0");
  const auto data = synth(dir);
  const auto cfg = write_config(dir, tiny_model());
  const auto ckpt = dir / "m.ckpt";
  const auto r = cli({"train", "--config", cfg.string(), "--data", data.string(), "--out", ckpt.string(), "--lr", "0"});
  REQUIRE(r.code == 0);
  save_checkpoint(init_model<float>(tiny_model()), (dir / "init.ckpt").string());
  CHECK(read_file(ckpt) == read_file(dir / "init.ckpt"));
  const auto log = read_file(dir / "m.ckpt.log.csv");
  CHECK(log.rfind("epoch,mean_loss,train_acc\n", 0) == 0);
  CHECK(count_lines(log) == 3);
}

TEST_CASE("train --seed overrides both seeds") {
  const auto dir = scratch("seed");
  const auto data = synth(dir);
  const auto cfg = write_config(dir, tiny_model());
  REQUIRE(cli({"train", "--config", cfg.string(), "--data", data.string(), "--out", (dir / "a").string(), "--lr", "0",
               "--seed", "9"})
              .code == 0);
  auto m = tiny_model();
  m.seed = 9;
  save_checkpoint(init_model<float>(m), (dir / "init").string());
  CHECK(read_file(dir / "a") == read_file(dir / "init"));
}

TEST_CASE("non-finite training exits 2") {
  const auto dir = scratch("nan");
  const auto data = synth(dir);
  const auto cfg = write_config(dir, tiny_model(), 1e30, 6);
  const auto r = cli({"train", "--config", cfg.string(), "--data", data.string(), "--out", (dir / "m").string()});
  CHECK(r.code == kExitNumeric);
  CHECK(r.err.find("training aborted at batch") != std::string::npos);
}

TEST_CASE("eval writes the metric keys and rejects corrupted checkpoints") {
  const auto dir = scratch("eval");
  const auto data = synth(dir);
  const auto cfg = write_config(dir, tiny_model());
  const auto ckpt = dir / "m.ckpt";
  REQUIRE(cli({"train", "--config", cfg.string(), "--data", data.string(), "--out", ckpt.string()}).code == 0);

  auto r = cli({"eval", "--ckpt", ckpt.string(), "--data", data.string(), "--metrics-out", (dir / "m.txt").string()});
  REQUIRE(r.code == 0);
  for (const char* key : {"acc ", "prec ", "rec ", "f1 "}) CHECK(r.out.find(key) != std::string::npos);
  const auto metrics = read_file(dir / "m.txt");
  for (const char* key : {"acc=", "prec=", "rec=", "f1=", "matrix="}) CHECK(metrics.find(key) != std::string::npos);

  auto bytes = read_file(ckpt);
  bytes.resize(bytes.size() - 7);
  write_file(dir / "cut.ckpt", bytes);
  r = cli({"eval", "--ckpt", (dir / "cut.ckpt").string(), "--data", data.string(), "--metrics-out",
           (dir / "x.txt").string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("cut.ckpt") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "x.txt"));
}

TEST_CASE("inspect shows zero conv parameters without the conv branch") {
  const auto dir = scratch("inspect");
  const auto data = synth(dir);
  auto m = tiny_model();
  m.branches = {Branch::ssm, Branch::mlp, Branch::msa};
  const auto cfg = write_config(dir, m, 1e-3, 1);
  const auto ckpt = dir / "m.ckpt";
  REQUIRE(cli({"train", "--config", cfg.string(), "--data", data.string(), "--out", ckpt.string()}).code == 0);
  const auto r = cli({"inspect", "--ckpt", ckpt.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("params.conv 0\n") != std::string::npos);
  CHECK(r.out.find("params.ssm 0\n") == std::string::npos);
  CHECK(r.out.find("params.total " + std::to_string(parameter_count(load_checkpoint<float>(ckpt.string())))) !=
        std::string::npos);
}

TEST_CASE("analyze sweeps write one row per setting") {
  const auto dir = scratch("analyze");
  const auto data = synth(dir);
  const auto cfg = write_config(dir, tiny_model(), 1e-3, 2);
  for (const auto& [sweep, rows] : std::map<std::string, std::size_t>{{"kernel", 4}, {"pooling", 4}, {"aggregation", 3}}) {
    const auto csv = dir / (sweep + ".csv");
    const auto r = cli({"analyze", "--config", cfg.string(), "--data", data.string(), "--out", csv.string(), "--sweep",
                        sweep, "--jobs", "2"});
    REQUIRE(r.code == 0);
    const auto text = read_file(csv);
    CHECK(text.rfind("setting,acc,f1\n", 0) == 0);
    CHECK(count_lines(text) == rows + 1);
  }
  CHECK(read_file(dir / "kernel.csv").find("\nk1,") != std::string::npos);
  CHECK(read_file(dir / "pooling.csv").find("\nstochastic,") != std::string::npos);
}

TEST_CASE("sweep results do not depend on --jobs") {
  const auto dir = scratch("jobs");
  const auto data = synth(dir);
  const auto cfg = write_config(dir, tiny_model(), 1e-3, 2);
  for (const char* jobs : {"1", "3"}) {
    REQUIRE(cli({"analyze", "--config", cfg.string(), "--data", data.string(), "--out",
                 (dir / (std::string(jobs) + ".csv")).string(), "--sweep", "aggregation", "--jobs", jobs})
                .code == 0);
  }
  CHECK(read_file(dir / "1.csv") == read_file(dir / "3.csv"));
}

TEST_CASE("gradcheck exit codes") {
  auto r = cli({"gradcheck", "--seed", "2", "--tolerance", "0"});
  CHECK(r.code == kExitGradcheck);
  CHECK(r.err.find("selective_scan_core") != std::string::npos);
  r = cli({"gradcheck", "--inject-fault"});
  CHECK(r.code == kExitGradcheck);
  CHECK(r.err.find("injected_fault") != std::string::npos);
  CHECK(r.err.find("mlp_branch") == std::string::npos);
}
