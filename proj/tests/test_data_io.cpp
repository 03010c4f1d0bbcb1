#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "ccnext/dataset.hpp"
#include "ccnext/geometry.hpp"
#include "ccnext/metrics.hpp"
#include "support.hpp"

using namespace ccnext;
using TD = Tensor<double>;
namespace fs = std::filesystem;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("ccnext_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  void write_text(const std::string& name, const std::string& text) const { std::ofstream(path(name)) << text; }

  fs::path dir_;
};

SyntheticSceneConfig scene(std::uint64_t seed, int layers = 4, int maxd = 16) {
  SyntheticSceneConfig c;
  c.seed = seed;
  c.num_layers = layers;
  c.max_disparity = maxd;
  return c;
}

}  // namespace

// ---------------------------------------------------------------- generator

TEST(Synthetic, WarpingRightByGroundTruthReconstructsLeft) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = generate_synthetic_pair<double>(scene(seed));
    const TD warped = reproject_view(s.right, *s.gt_disparity, WarpDirection::right_to_left);
    const int H = s.left.dim(2), W = s.left.dim(3);
    double worst = 0;
    int visible = 0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (s.occlusion_mask->at(0, 0, y, x) != 0) continue;
        ++visible;
        for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(warped.at(0, c, y, x) - s.left.at(0, c, y, x)));
      }
    EXPECT_LT(worst, 1e-6) << "seed " << seed;
    EXPECT_GT(visible, H * W / 2) << "seed " << seed;
  }
}

TEST(Synthetic, SinglePlaneIsAPureShift) {
  const auto s = generate_synthetic_pair<double>(scene(7, 1));
  const int d = static_cast<int>(s.gt_disparity->at(0, 0, 0, 0));
  ASSERT_GE(d, 1);
  for (double g : s.gt_disparity->vec()) ASSERT_EQ(g, d);
  const int H = s.left.dim(2), W = s.left.dim(3);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x + d < W; ++x) ASSERT_EQ(s.right.at(0, c, y, x), s.left.at(0, c, y, x + d));
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) EXPECT_EQ(s.occlusion_mask->at(0, 0, y, x), x < d ? 1.0 : 0.0);
}

TEST(Synthetic, SameSeedIsBitwiseIdentical) {
  const auto a = generate_synthetic_pair<float>(scene(42));
  const auto b = generate_synthetic_pair<float>(scene(42));
  EXPECT_TRUE(ccnext::testing::bitwise_equal(a.left, b.left));
  EXPECT_TRUE(ccnext::testing::bitwise_equal(a.right, b.right));
  EXPECT_TRUE(ccnext::testing::bitwise_equal(*a.gt_disparity, *b.gt_disparity));
  const auto c = generate_synthetic_pair<float>(scene(43));
  EXPECT_FALSE(ccnext::testing::bitwise_equal(a.left, c.left));
}

TEST(Synthetic, FieldInvariants) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = generate_synthetic_pair<double>(scene(seed, 5, 20));
    for (double g : s.gt_disparity->vec()) {
      EXPECT_GE(g, 1.0);
      EXPECT_LE(g, 20.0);
      EXPECT_EQ(g, std::round(g));
    }
    for (double v : s.occlusion_mask->vec()) EXPECT_TRUE(v == 0.0 || v == 1.0);
    for (const TD* img : {&s.left, &s.right})
      for (double v : img->vec()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    EXPECT_EQ(s.camera.width, 128);
    EXPECT_EQ(s.camera.height, 64);
  }
}

TEST(Synthetic, OcclusionGrowsWithMaxDisparity) {
  for (std::uint64_t seed = 0; seed < 8; ++seed)
    for (int layers : {1, 3, 5}) {
      double prev = -1;
      for (int maxd : {2, 4, 8, 12, 16, 24, 31}) {
        const double f = occlusion_fraction(generate_synthetic_pair<double>(scene(seed, layers, maxd)));
        EXPECT_GE(f, prev) << "seed " << seed << " layers " << layers << " maxd " << maxd;
        prev = f;
      }
    }
}

TEST(Synthetic, ConfigValidation) {
  auto c = scene(0);
  c.max_disparity = 32;  // width/4
  EXPECT_THROW(generate_synthetic_pair<double>(c), DomainError);
  c = scene(0);
  c.num_layers = 0;
  EXPECT_THROW(generate_synthetic_pair<double>(c), DomainError);
  c = scene(0);
  c.width = 4;
  EXPECT_THROW(generate_synthetic_pair<double>(c), DomainError);
  c = scene(0);
  c.texture_octaves = 0;
  EXPECT_THROW(generate_synthetic_pair<double>(c), DomainError);
}

TEST(Synthetic, CameraMapsDepthRangeOntoDisparityRange) {
  const auto cam = synthetic_camera(128, 64, 16);
  EXPECT_NEAR(cam.focal_baseline() / 0.1, 16.0, 1e-12);
  EXPECT_NEAR(cam.focal_baseline() / 100.0, 0.016, 1e-15);
}

// ---------------------------------------------------------------- image io

TEST_F(TempDir, PngRgbRoundTripIsExactOnEightBitValues) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> u(0, 255);
  TD img({1, 3, 5, 7});
  for (auto& v : img.mutable_values()) v = u(rng) / 255.0;
  write_png_rgb(path("a.png"), img);
  const TD back = read_png_rgb<double>(path("a.png"));
  ASSERT_EQ(back.shape(), img.shape());
  EXPECT_EQ(ccnext::testing::max_abs_diff(back, img), 0.0);
}

TEST_F(TempDir, PngGray16RoundTripAndKittiScaling) {
  Gray16Image g{3, 2, {0, 2560, 65535, 1, 256, 12345}};
  write_png_gray16(path("d.png"), g);
  const auto back = read_png_gray16(path("d.png"));
  EXPECT_EQ(back.width, 3);
  EXPECT_EQ(back.height, 2);
  EXPECT_EQ(back.pixels, g.pixels);
  const TD d = load_disparity<double>(path("d.png"));
  EXPECT_EQ(d.at(0, 0, 0, 0), 0.0);
  EXPECT_EQ(d.at(0, 0, 0, 1), 10.0);
  EXPECT_EQ(d.at(0, 0, 1, 1), 1.0);
  EXPECT_EQ(gt_valid_mask(d).vec()[0], 0.0);
}

TEST(DisparityCodec, EncodeRoundsAndSaturates) {
  const TD d({1, 1, 1, 4}, std::vector<double>{10.0, 0.0, 300.0, 1.0 / 512});
  const auto g = encode_disparity16(d);
  EXPECT_EQ(g.pixels, (std::vector<std::uint16_t>{2560, 0, 65535, 1}));
  EXPECT_EQ(decode_disparity16<double>(encode_disparity16(TD({1, 1, 1, 1}, 12.25))).item(), 12.25);
}

TEST_F(TempDir, PfmRoundTripIsBitwiseInFloat) {
  std::mt19937_64 rng(2);
  const Tensor<float> m = ccnext::testing::random_tensor<float>({1, 1, 6, 9}, rng, -5, 50);
  write_pfm(path("m.pfm"), m);
  EXPECT_TRUE(ccnext::testing::bitwise_equal(read_pfm<float>(path("m.pfm")), m));
}

TEST_F(TempDir, PfmRejectsBadFiles) {
  write_text("big.pfm", "Pf\n2 1\n1.0\nxxxxxxxx");
  EXPECT_THROW(read_pfm<float>(path("big.pfm")), IoError);
  write_text("color.pfm", "PF\n2 1\n-1.0\n");
  EXPECT_THROW(read_pfm<float>(path("color.pfm")), IoError);
  write_text("short.pfm", "Pf\n4 4\n-1.0\nabc");
  EXPECT_THROW(read_pfm<float>(path("short.pfm")), IoError);
  EXPECT_THROW(read_pfm<float>(path("missing.pfm")), IoError);
}

TEST_F(TempDir, PfmGroundTruthMarksNonPositiveInvalid) {
  write_pfm(path("gt.pfm"), Tensor<float>({1, 1, 1, 3}, std::vector<float>{-1.f, 0.f, 4.5f}));
  EXPECT_EQ(load_disparity<double>(path("gt.pfm")).vec(), (std::vector<double>{0, 0, 4.5}));
}

TEST_F(TempDir, PngReadErrors) {
  EXPECT_THROW(read_png_rgb<double>(path("none.png")), IoError);
  write_text("junk.png", "not a png at all");
  EXPECT_THROW(read_png_rgb<double>(path("junk.png")), IoError);
}

// ---------------------------------------------------------------- manifest

TEST_F(TempDir, EmptyManifestGivesNoSamples) {
  write_text("empty.txt", "");
  EXPECT_TRUE(load_manifest(path("empty.txt")).empty());
}

TEST_F(TempDir, ManifestPreservesOrderAndResolvesRelativePaths) {
  for (const char* n : {"l0.png", "r0.png", "l1.png", "r1.png", "l2.png", "r2.png"}) write_text(n, "");
  write_text("m.txt",
             "left=l2.png\tright=r2.png\tfx=720\tcx=620\tcy=187\tbaseline_m=0.54\n"
             "\n"
             "id=first\tleft=l0.png\tright=r0.png\tfx=700\tcx=600\tcy=180\tbaseline_m=0.5\n"
             "left=l1.png\tright=r1.png\tfx=1\tcx=0\tcy=0\tbaseline_m=0.1\n");
  const auto ds = load_manifest(path("m.txt"));
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds[0].id, "l2");
  EXPECT_EQ(ds[1].id, "first");
  EXPECT_EQ(ds[2].id, "l1");
  EXPECT_EQ(ds[0].left, dir_ / "l2.png");
  EXPECT_EQ(ds[1].fx, 700.0);
  EXPECT_EQ(ds[1].baseline_m, 0.5);
  EXPECT_FALSE(ds[0].gt_disparity.has_value());
}

TEST_F(TempDir, ManifestLineRoundTrips) {
  write_text("l.png", "");
  write_text("r.png", "");
  write_text("g.png", "");
  SampleDescriptor d;
  d.id = "x";
  d.left = dir_ / "l.png";
  d.right = dir_ / "r.png";
  d.gt_disparity = dir_ / "g.png";
  d.fx = 721.5377;
  d.cx = 609.5593;
  d.cy = 172.854;
  d.baseline_m = 0.5327119;
  write_text("m.txt", manifest_line(d) + "\n");
  const auto back = load_manifest(path("m.txt"));
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].id, d.id);
  EXPECT_EQ(back[0].left, d.left);
  EXPECT_EQ(*back[0].gt_disparity, *d.gt_disparity);
  EXPECT_EQ(back[0].fx, d.fx);
  EXPECT_EQ(back[0].baseline_m, d.baseline_m);
}

TEST_F(TempDir, ManifestErrorsCiteLineAndField) {
  write_text("l.png", "");
  write_text("r.png", "");
  auto expect_error = [&](const std::string& text, const std::vector<std::string>& needles) {
    write_text("bad.txt", text);
    try {
      load_manifest(path("bad.txt"));
      ADD_FAILURE() << "no error for: " << text;
    } catch (const IoError& e) {
      for (const auto& n : needles) EXPECT_NE(std::string(e.what()).find(n), std::string::npos) << e.what();
    }
  };
  expect_error("left=l.png\tright=r.png\tcx=1\tcy=1\tbaseline_m=0.1\n", {":1", "'fx'"});
  expect_error("left=l.png\tright=r.png\tfx=1\tcx=1\tcy=1\tbaseline_m=0.1\nleft=l.png\tright=nope.png\tfx=1\tcx=1\tcy=1\tbaseline_m=0.1\n",
               {":2", "nope.png"});
  expect_error("left=l.png\tright=r.png\tfx=abc\tcx=1\tcy=1\tbaseline_m=0.1\n", {":1", "fx"});
  expect_error("left=l.png\tright=r.png\tfx=-2\tcx=1\tcy=1\tbaseline_m=0.1\n", {"fx must be > 0"});
  expect_error("left=l.png\tright=r.png\tfx=1\tcx=1\tcy=1\tbaseline_m=0.1\tcolor=red\n", {"unknown field 'color'"});
  expect_error("garbage\tleft=l.png\n", {":1", "malformed field 'garbage'"});
  EXPECT_THROW(load_manifest(path("absent.txt")), IoError);
}

TEST_F(TempDir, LoadSampleReadsImagesAndGroundTruth) {
  const auto s = generate_synthetic_pair<double>(scene(3));
  write_png_rgb(path("l.png"), s.left);
  write_png_rgb(path("r.png"), s.right);
  write_png_gray16(path("g.png"), encode_disparity16(*s.gt_disparity));
  write_text("m.txt", "left=l.png\tright=r.png\tgt_disparity=g.png\tfx=128\tcx=64\tcy=32\tbaseline_m=0.0125\n");
  const auto loaded = load_sample<double>(load_manifest(path("m.txt"))[0]);
  EXPECT_LE(ccnext::testing::max_abs_diff(loaded.left, s.left), 0.5 / 255 + 1e-12);
  EXPECT_EQ(loaded.gt_disparity->vec(), s.gt_disparity->vec());
  EXPECT_EQ(loaded.camera.width, 128);
  EXPECT_EQ(loaded.camera.height, 64);
  EXPECT_EQ(loaded.camera.baseline_m, 0.0125);
  EXPECT_FALSE(loaded.occlusion_mask.has_value());
}

TEST_F(TempDir, LoadSampleRejectsSizeMismatch) {
  write_png_rgb(path("l.png"), TD({1, 3, 4, 6}, 0.5));
  write_png_rgb(path("r.png"), TD({1, 3, 4, 5}, 0.5));
  write_png_gray16(path("g.png"), Gray16Image{5, 4, std::vector<std::uint16_t>(20, 256)});
  write_text("m.txt", "left=l.png\tright=r.png\tfx=1\tcx=1\tcy=1\tbaseline_m=0.1\n");
  EXPECT_THROW(load_sample<double>(load_manifest(path("m.txt"))[0]), ShapeError);
  write_text("m2.txt", "left=l.png\tright=l.png\tgt_disparity=g.png\tfx=1\tcx=1\tcy=1\tbaseline_m=0.1\n");
  EXPECT_THROW(load_sample<double>(load_manifest(path("m2.txt"))[0]), ShapeError);
}

// ------------------------------------------------------------------ config

TEST(KeyValueFile, ParsesCommentsWhitespaceAndTypes) {
  std::istringstream is("# run\n lr = 1e-4  # trailing\n\nbatch=8\nname = toy run\nflip=on\n");
  const auto kv = KeyValueFile::parse(is, "cfg");
  EXPECT_EQ(kv.get_double("lr"), 1e-4);
  EXPECT_EQ(kv.get_int("batch"), 8);
  EXPECT_EQ(kv.get_string("name"), "toy run");
  EXPECT_TRUE(kv.get_bool("flip", false));
  EXPECT_EQ(kv.get_int("epochs", 30), 30);
  EXPECT_EQ(kv.entries().size(), 4u);
}

TEST(KeyValueFile, ErrorsNameTheLine) {
  auto message = [](const std::string& text, auto&& fn) {
    std::istringstream is(text);
    try {
      fn(KeyValueFile::parse(is, "cfg"));
    } catch (const IoError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  auto nothing = [](const KeyValueFile&) {};
  EXPECT_NE(message("a=1\nnonsense\n", nothing).find("cfg:2"), std::string::npos);
  EXPECT_NE(message("a=1\na=2\n", nothing).find("duplicate key 'a'"), std::string::npos);
  EXPECT_NE(message("=3\n", nothing).find("empty key"), std::string::npos);
  EXPECT_NE(message("x\n\nlr=fast\n", nothing).find("cfg:1"), std::string::npos);
  EXPECT_NE(message("\nlr=fast\n", [](const KeyValueFile& k) { k.get_double("lr"); }).find("cfg:2"), std::string::npos);
  EXPECT_NE(message("b=maybe\n", [](const KeyValueFile& k) { k.get_bool("b", false); }).find("boolean"),
            std::string::npos);
  EXPECT_NE(message("lrr=1\n", [](const KeyValueFile& k) { k.reject_unknown({"lr"}); }).find("unknown key 'lrr'"),
            std::string::npos);
  EXPECT_NE(message("", [](const KeyValueFile& k) { k.get_string("lr"); }).find("missing key 'lr'"),
            std::string::npos);
}
