#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "ccnext/dataset.hpp"
#include "ccnext/image_io.hpp"
#include "ccnext/metrics.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(CCNEXT_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return {-1, ""};
  std::string out;
  std::array<char, 512> buf;
  while (std::fgets(buf.data(), buf.size(), p)) out += buf.data();
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("ccnext_cli_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string l; std::getline(ss, l);) out.push_back(l);
  return out;
}

ccnext::MetricReport report(double scale, int n = 10) {
  ccnext::MetricReport rep;
  for (int i = 0; i < n; ++i) {
    ccnext::MetricRow r;
    r.image = "img" + std::to_string(i);
    const double a = 0.1 + 0.01 * i;
    r.depth = {a * scale, 0.5 * a * scale, 3 * a, 0.2 * a, 0.9, 0.95, 0.99};
    r.disparity = ccnext::DisparityMetrics{a * 10, 0.01 * i};
    rep.add(r);
  }
  return rep;
}

}  // namespace

TEST(Cli, GenIsDeterministicPerSeed) {
  const auto d = scratch("gen");
  ASSERT_EQ(run("gen --n 2 --seed 3 --out " + (d / "a").string()).code, 0);
  ASSERT_EQ(run("--seed 3 gen --n 2 --out " + (d / "b").string()).code, 0);
  ASSERT_EQ(run("gen --n 2 --seed 4 --out " + (d / "c").string()).code, 0);
  for (const char* f : {"pair000000_left.png", "pair000001_right.png", "pair000001_gt.png", "manifest.txt"})
    EXPECT_EQ(slurp(d / "a" / f), slurp(d / "b" / f)) << f;
  EXPECT_NE(slurp(d / "a" / "pair000000_left.png"), slurp(d / "c" / "pair000000_left.png"));
  // Pair i uses seed + i.
  EXPECT_EQ(slurp(d / "a" / "pair000001_left.png"), slurp(d / "c" / "pair000000_left.png"));

  const auto m = ccnext::load_manifest((d / "a" / "manifest.txt").string());
  ASSERT_EQ(m.size(), 2u);
  const auto s = ccnext::load_sample<float>(m[0]);
  EXPECT_EQ(s.left.dim(2), 64);
  EXPECT_EQ(s.left.dim(3), 128);
  ASSERT_TRUE(s.gt_disparity.has_value());
}

TEST(Cli, GenRejectsDisparityAtQuarterWidth) {
  const auto d = scratch("genbad");
  const auto r = run("gen --n 1 --width 64 --max-disparity 16 --out " + d.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("max_disparity"), std::string::npos) << r.out;
}

TEST(Cli, MissingRequiredValuesAreNamed) {
  auto r = run("train");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("--manifest is required"), std::string::npos) << r.out;
  r = run("eval --manifest x");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("--pred is required"), std::string::npos) << r.out;
  EXPECT_NE(run("nosuchcommand").code, 0);
}

TEST(Cli, ConfigFillsUnsetOptionsAndFlagsWin) {
  const auto d = scratch("cfg");
  {
    std::ofstream c(d / "gen.cfg");
    c << "# generator\nn=2\nwidth=96\nout=" << (d / "a").string() << "\n";
  }
  ASSERT_EQ(run("--config " + (d / "gen.cfg").string() + " gen").code, 0);
  EXPECT_EQ(ccnext::load_manifest((d / "a" / "manifest.txt").string()).size(), 2u);
  EXPECT_EQ(ccnext::load_sample<float>(ccnext::load_manifest((d / "a" / "manifest.txt").string())[0]).left.dim(3), 96);

  ASSERT_EQ(run("--config " + (d / "gen.cfg").string() + " gen --n 3 --out " + (d / "b").string()).code, 0);
  EXPECT_EQ(ccnext::load_manifest((d / "b" / "manifest.txt").string()).size(), 3u);
  EXPECT_FALSE(fs::exists(d / "a" / "pair000002_left.png"));

  {
    std::ofstream c(d / "bad.cfg");
    c << "n=1\nbogus=4\n";
  }
  const auto r = run("--config " + (d / "bad.cfg").string() + " gen --out " + (d / "c").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("'bogus'"), std::string::npos) << r.out;
}

TEST(Cli, FlopsWindowIsCheaperThanFullRow) {
  const auto full = run("flops --shape 1,64,144,320 --window full");
  const auto win = run("flops --shape 1,64,144,320 --window 41");
  ASSERT_EQ(full.code, 0) << full.out;
  ASSERT_EQ(win.code, 0) << win.out;
  const auto fl = lines_of(full.out), wl = lines_of(win.out);
  ASSERT_EQ(fl.size(), 3u);
  ASSERT_EQ(wl.size(), 3u);
  EXPECT_EQ(fl[0], "module,shape,window,convention,projections,qk,av,flops,ratio_to_full");
  EXPECT_EQ(fl[1].rfind("full_row,1x64x144x320,320,mac=one,", 0), 0u) << fl[1];
  auto total = [](const std::string& line) {
    std::vector<std::string> c;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) c.push_back(x);
    return std::make_pair(std::stod(c[7]), std::stod(c[8]));
  };
  EXPECT_EQ(total(fl[2]).second, 1.0);
  const auto [t41, ratio] = total(wl[2]);
  EXPECT_LT(t41, total(wl[1]).first);
  EXPECT_GT(ratio, 0.0);
  EXPECT_LT(ratio, 1.0);

  // Window ratios shrink monotonically with the candidate count.
  double prev = 0;
  for (int w : {3, 11, 41, 121, 319}) {
    const auto r = run("flops --shape 1,32,8,320 --window " + std::to_string(w));
    ASSERT_EQ(r.code, 0) << r.out;
    const double q = total(lines_of(r.out)[2]).second;
    EXPECT_GT(q, prev) << w;
    prev = q;
  }
  // Under the mixed convention the attention terms weigh twice as much, so a
  // window saves a larger share.
  const auto mixed = run("flops --shape 1,64,144,320 --window 41 --mac mixed");
  ASSERT_EQ(mixed.code, 0) << mixed.out;
  EXPECT_LT(total(lines_of(mixed.out)[2]).second, ratio);
  EXPECT_EQ(run("flops --mac three").code, 1);
  EXPECT_EQ(run("flops --shape 1,32,8,320 --window 400").code, 1);
  EXPECT_EQ(run("flops --shape 1,32,8 --window full").code, 1);
}

TEST(Cli, EvalOfGroundTruthAgainstItselfIsExact) {
  const auto d = scratch("evalgt");
  ASSERT_EQ(run("gen --n 3 --out " + (d / "data").string()).code, 0);
  const auto m = (d / "data" / "manifest.txt").string();
  const auto r = run("eval --manifest " + m + " --pred " + m + " --out " + (d / "r.csv").string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rep = ccnext::MetricReport::read_csv((d / "r.csv").string());
  ASSERT_EQ(rep.n_images(), 3u);
  ASSERT_TRUE(rep.has_disparity());
  for (const auto& row : rep.rows()) {
    EXPECT_EQ(row.depth.abs_rel, 0.0);
    EXPECT_EQ(row.depth.rmse, 0.0);
    EXPECT_EQ(row.depth.d1_25, 1.0);
    EXPECT_EQ(row.disparity->epe, 0.0);
    EXPECT_EQ(row.disparity->d1_error, 0.0);
  }
}

TEST(Cli, CompareFlagsIdenticalAndSignificantReports) {
  const auto d = scratch("compare");
  report(1.0).write_csv((d / "a.csv").string());
  report(1.1).write_csv((d / "b.csv").string());

  auto r = run("compare " + (d / "a.csv").string() + " " + (d / "a.csv").string() + " --names x,y");
  ASSERT_EQ(r.code, 0) << r.out;
  auto ls = lines_of(r.out);
  ASSERT_EQ(ls.size(), 1u + 18u);
  for (std::size_t i = 2; i < ls.size(); i += 2) EXPECT_NE(ls[i].find(",identical"), std::string::npos) << ls[i];

  r = run("compare " + (d / "a.csv").string() + " " + (d / "b.csv").string() + " --names a,b --out " +
          (d / "cmp.csv").string());
  ASSERT_EQ(r.code, 0) << r.out;
  ls = lines_of(slurp(d / "cmp.csv"));
  ASSERT_GE(ls.size(), 3u);
  EXPECT_EQ(ls[1], "abs_rel,a,0.145,,,reference");
  EXPECT_EQ(ls[2].rfind("abs_rel,b,", 0), 0u);
  EXPECT_NE(ls[2].find(",yes"), std::string::npos) << ls[2];

  r = run("compare " + (d / "a.csv").string() + " " + (d / "b.csv").string() + " --names only");
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, TrainInferEvalPipeline) {
  const auto d = scratch("pipe");
  const auto data = d / "data";
  ASSERT_EQ(run("gen --n 2 --seed 11 --out " + data.string()).code, 0);
  const auto m = (data / "manifest.txt").string();
  const auto ckpt = (d / "m.ckpt").string();
  auto r = run("train --manifest " + m + " --batch 2 --epochs 1 --lr 1e-3 --automask false --trace " +
               (d / "trace.csv").string() + " --out " + ckpt);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(ckpt));
  EXPECT_EQ(lines_of(slurp(d / "trace.csv")).size(), 2u);

  r = run("infer --manifest " + m + " --checkpoint " + ckpt + " --out " + (d / "pred").string());
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* id : {"pair000000", "pair000001"}) {
    ASSERT_TRUE(fs::exists(d / "pred" / (std::string(id) + "_disp.png")));
    const auto depth = ccnext::read_pfm<float>((d / "pred" / (std::string(id) + "_depth.pfm")).string());
    ASSERT_GT(depth.size(), 0u);
    for (float v : depth.vec()) {
      ASSERT_TRUE(std::isfinite(v));
      ASSERT_GT(v, 0.0f);
    }
  }

  r = run("eval --manifest " + m + " --pred " + (d / "pred").string() + " --out " + (d / "r.csv").string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rep = ccnext::MetricReport::read_csv((d / "r.csv").string());
  ASSERT_EQ(rep.n_images(), 2u);
  ASSERT_TRUE(rep.has_disparity());
  for (const auto& row : rep.rows()) EXPECT_TRUE(std::isfinite(row.disparity->epe));

  // Inference is deterministic given the checkpoint.
  ASSERT_EQ(run("infer --manifest " + m + " --checkpoint " + ckpt + " --out " + (d / "pred2").string()).code, 0);
  EXPECT_EQ(slurp(d / "pred" / "pair000000_depth.pfm"), slurp(d / "pred2" / "pair000000_depth.pfm"));

  r = run("infer --manifest " + m + " --checkpoint " + (d / "missing.ckpt").string() + " --out " +
          (d / "p3").string());
  EXPECT_EQ(r.code, 1);
}
