#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

const fs::path& work() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "cranio_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Result run(const std::string& args) {
  const fs::path out = work() / "stdout.txt", err = work() / "stderr.txt";
  const std::string cmd = "cd '" + work().string() + "' && '" CRANIO_CLI "' " + args + " >'" + out.string() + "' 2>'" +
                          err.string() + "'";
  const int status = std::system(cmd.c_str());
  return {WEXITSTATUS(status), slurp(out), slurp(err)};
}

nlohmann::json manifest(const std::string& dir) { return nlohmann::json::parse(slurp(work() / dir / "run.json")); }

bool single_line_error(const Result& r, const std::string& kind) {
  return r.code != 0 && r.err.rfind("error:" + kind + ":", 0) == 0 && r.err.find('\n') == r.err.size() - 1;
}

const char* kTinyConfig =
    "image_size = 32\ngenerator_channels = 4\nres_blocks = 1\ndiscriminator_channels = 4\nhead_width = 16\n"
    "n_locations = 8\nbatch_size = 2\nepochs = 1\n";

// A small dataset, a trained tiny model and an embedder shared by the cases.
void ensure_pipeline() {
  static bool done = false;
  if (done) return;
  std::ofstream(work() / "tiny.cfg") << kTinyConfig;
  REQUIRE(run("synth-data --identities 4 --size 32 --seed 3 --out data").code == 0);
  REQUIRE(run("train --variant fastcut --data data --config tiny.cfg --out fastcut").code == 0);
  REQUIRE(run("generate --checkpoint fastcut/checkpoint.bin --in data/test/skull --out gen").code == 0);
  REQUIRE(run("train-embedder --faces data/gallery --epochs 2 --out emb").code == 0);
  done = true;
}

}  // namespace

TEST_CASE("synth-data counts, validation and reruns") {
  const Result r = run("synth-data --identities 51 --out full");
  CHECK(r.code == 0);
  CHECK(r.out.find("102 pairs") != std::string::npos);
  CHECK(r.out.find("410 training pairs") != std::string::npos);
  CHECK(manifest("full")["artifacts"].size() == 410 * 2 + 20 * 2 + 102 + 1);

  const Result again = run("synth-data --identities 51 --out full");
  CHECK(single_line_error(again, "usage"));
  CHECK(again.err.find("--force") != std::string::npos);
  CHECK(run("synth-data --identities 51 --out full --force").code == 0);
  CHECK(run("synth-data --identities 51 --out full2").code == 0);
  CHECK(manifest("full")["artifacts"] == manifest("full2")["artifacts"]);

  const Result one = run("synth-data --identities 1 --out bad");
  CHECK(one.code == 2);
  CHECK(single_line_error(one, "usage"));
  CHECK(one.err.find(">= 2") != std::string::npos);

  // --force never clears a directory that is not a previous run.
  fs::create_directories(work() / "precious");
  std::ofstream(work() / "precious" / "keep.txt") << "x";
  CHECK(single_line_error(run("synth-data --identities 2 --out precious --force"), "usage"));
  CHECK(fs::exists(work() / "precious" / "keep.txt"));
}

TEST_CASE("train records the variant weights") {
  ensure_pipeline();
  const auto fast = manifest("fastcut")["config"]["loss"];
  CHECK(fast["lambda_x"] == 10.0);
  CHECK(fast["lambda_y"] == 0.0);
  CHECK(run("train --variant cut --data data --config tiny.cfg --out cut").code == 0);
  const auto cut = manifest("cut")["config"]["loss"];
  CHECK(cut["lambda_x"] == 1.0);
  CHECK(cut["lambda_y"] == 1.0);

  const Result bad = run("train --variant pix2pix --data data --config tiny.cfg --out bad");
  CHECK(bad.code == 2);
  CHECK(single_line_error(bad, "usage"));
  for (const char* v : {"cyclegan", "cgan", "cut", "fastcut"}) CHECK(bad.err.find(v) != std::string::npos);

  CHECK(single_line_error(run("train --variant cut --data nowhere --out bad"), "not_found"));
  CHECK(run("verify fastcut").code == 0);
}

TEST_CASE("generate is reproducible") {
  ensure_pipeline();
  CHECK(run("generate --checkpoint fastcut/checkpoint.bin --in data/test/skull --out gen2").code == 0);
  CHECK(manifest("gen")["artifacts"] == manifest("gen2")["artifacts"]);
  CHECK(manifest("gen")["artifacts"].size() == 2);
  CHECK(single_line_error(run("generate --checkpoint emb/embedder.bin --in data/test/skull --out bad"), "format"));
}

TEST_CASE("evaluate reports exactly three metrics") {
  ensure_pipeline();
  const Result self = run("evaluate --generated data/test/face --real data/test/face --embedder emb/embedder.bin --out eval_self");
  REQUIRE(self.code == 0);
  const auto m = nlohmann::json::parse(slurp(work() / "eval_self/metrics.json"));
  CHECK(m.size() == 3);
  CHECK(m.contains("FID"));
  CHECK(m.contains("IS"));
  CHECK(m.contains("SSIM"));
  CHECK(m["FID"].get<double>() <= 1e-6);
  CHECK(m["SSIM"].get<double>() == 1.0);
  std::istringstream pairs(slurp(work() / "eval_self/ssim_pairs.tsv"));
  std::string line;
  std::getline(pairs, line);
  while (std::getline(pairs, line)) CHECK(line.substr(line.find('\t') + 1) == "1.000000");

  CHECK(run("evaluate --generated gen --real data/test/face --embedder emb/embedder.bin --out eval_gen").code == 0);
  const Result missing = run("evaluate --generated gen --real data/test/face --out eval_bad");
  CHECK(single_line_error(missing, "usage"));
  CHECK(missing.err.find("embedder") != std::string::npos);
}

TEST_CASE("retrieve labels cut-offs and self-retrieves") {
  ensure_pipeline();
  const Result r =
      run("retrieve --query-dir data/gallery --gallery data/gallery --embedder emb/embedder.bin --k 1 --k 10 --k 20 "
          "--out ret_self");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("Top-10\t") != std::string::npos);
  CHECK(r.out.find("Top-20\t") != std::string::npos);
  // Two views per identity: the self match fills the only rank-1 slot.
  CHECK(r.out.find("Top-1\t0.5000\t1.0000") != std::string::npos);
  CHECK(fs::exists(work() / "ret_self/contact_sheet.png"));
  CHECK(fs::exists(work() / "ret_self/gallery.bin"));

  CHECK(run("retrieve --query-dir gen --gallery data/gallery --embedder emb/embedder.bin --out ret_gen").code == 0);
  CHECK(run("retrieve --query-dir gen --gallery data/gallery --embedder emb/embedder.bin --out ret_gen2").code == 0);
  CHECK(manifest("ret_gen")["artifacts"] == manifest("ret_gen2")["artifacts"]);
  CHECK(single_line_error(run("retrieve --query-dir gen --gallery data/gallery --embedder emb/embedder.bin --k 0 --out x"),
                          "usage"));

  const Result rep = run("report --run eval_gen --run ret_gen --out summary");
  CHECK(rep.code == 0);
  const std::string md = slurp(work() / "summary/report.md");
  CHECK(md.find("| eval_gen |") != std::string::npos);
  CHECK(md.find("| ret_gen | Top-20 |") != std::string::npos);
}

TEST_CASE("verify detects tampering and usage errors are single lines") {
  ensure_pipeline();
  CHECK(run("generate --checkpoint fastcut/checkpoint.bin --in data/test/skull --out gen_t").code == 0);
  CHECK(run("verify gen_t").code == 0);
  for (const auto& e : fs::directory_iterator(work() / "gen_t"))
    if (e.path().extension() == ".png") {
      std::ofstream(e.path(), std::ios::app) << "x";
      break;
    }
  CHECK(single_line_error(run("verify gen_t"), "format"));
  CHECK(single_line_error(run(""), "usage"));
  CHECK(single_line_error(run("train --data data"), "usage"));
}
