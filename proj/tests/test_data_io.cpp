#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "moc/checkpoint.hpp"
#include "moc/dataset.hpp"

using namespace moc;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("moc_test_data_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<PointAnnotation> parse(const std::string& text, int k = 4) {
  std::istringstream in(text);
  return parse_annotations(in, k);
}

std::string error_of(const std::string& text, int k = 4) {
  try {
    parse(text, k);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

ModelConfig tiny(int k = 2) {
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.state_size = 2;
  cfg.num_categories = k;
  cfg.depths = {1, 0, 1};
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST(Annotations, Examples) {
  EXPECT_TRUE(parse("").empty());
  const auto one = parse("10.5,20.0,3\n");
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], (PointAnnotation{10.5, 20.0, 3}));
  const auto with_header = parse("x,y,category\n\n1,2,0\n  \n3,4,1\n");
  EXPECT_EQ(with_header.size(), 2u);
}

TEST(Annotations, ErrorsNameLine) {
  EXPECT_NE(error_of("a,b,c\n").find(":1:"), std::string::npos) << error_of("a,b,c\n");
  EXPECT_NE(error_of("1,2,0\n\n1,2\n").find(":3:"), std::string::npos);
  EXPECT_NE(error_of("1,2,4\n").find("category 4"), std::string::npos);
  EXPECT_FALSE(error_of("1,2,1.5\n").empty());
  EXPECT_FALSE(error_of("1,2,-1\n").empty());
  EXPECT_FALSE(error_of("1,nan,0\n").empty());
  EXPECT_FALSE(error_of("1,2,0,5\n").empty());
  EXPECT_FALSE(error_of("1x,2,0\n").empty());
  EXPECT_THROW(load_annotations("/nonexistent/file.csv", 2), IoError);
}

TEST(Annotations, FuzzRoundTripAndCorruption) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    std::vector<PointAnnotation> pts(rng.below(20));
    for (auto& p : pts) p = {rng.uniform(0, 500), rng.uniform(0, 500), static_cast<int>(rng.below(4))};
    std::ostringstream out;
    write_annotations(out, pts);
    EXPECT_EQ(parse(out.str()), pts);
    if (pts.empty()) continue;
    // Corrupt one data line; the error must name it.
    std::string text = out.str();
    const int target = static_cast<int>(rng.below(pts.size()));
    std::size_t pos = 0;
    for (int line = 0; line <= target; ++line) pos = text.find('\n', pos) + 1;
    text.insert(pos, "q");
    const auto msg = error_of(text);
    EXPECT_NE(msg.find(":" + std::to_string(target + 2) + ":"), std::string::npos) << msg;
  }
}

TEST(Image, WhitePixelAndRowOrder) {
  std::istringstream white(std::string("P6\n1 1\n255\n") + std::string(3, '\xff'));
  auto t = image_to_tensor(read_netpbm(white));
  EXPECT_EQ(t.shape(), (Shape{1, 1, 3}));
  for (float v : t.values()) EXPECT_EQ(v, 1.0f);
  std::istringstream two(std::string("P6\n1 2\n255\n") + std::string("\xff\0\0\0\0\xff", 6));
  auto rb = image_to_tensor(read_netpbm(two));
  EXPECT_EQ(rb.shape(), (Shape{2, 1, 3}));
  EXPECT_EQ(rb.values()[0], 1.0f);
  EXPECT_EQ(rb.values()[2], 0.0f);
  EXPECT_EQ(rb.values()[3], 0.0f);
  EXPECT_EQ(rb.values()[5], 1.0f);
}

TEST(Image, RoundTripAndErrors) {
  RawImage img{3, 2, 3, {0, 1, 2, 3, 4, 5, 250, 251, 252, 253, 254, 255, 9, 8, 7, 6, 5, 4}};
  std::ostringstream out;
  write_netpbm(out, img);
  std::istringstream in(out.str());
  const auto back = read_netpbm(in);
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_EQ(back.width, 3);
  EXPECT_EQ(back.height, 2);
  std::istringstream truncated(out.str().substr(0, out.str().size() - 1));
  EXPECT_THROW(read_netpbm(truncated), FormatError);
  std::istringstream magic("P3\n1 1\n255\n1 2 3\n");
  EXPECT_THROW(read_netpbm(magic), FormatError);
  std::istringstream depth(std::string("P6\n1 1\n65535\n") + std::string(6, '\0'));
  EXPECT_THROW(read_netpbm(depth), FormatError);
}

TEST(Synth, DeterministicBytes) {
  SynthOptions opt;
  opt.seed = 42;
  opt.n_images = 3;
  opt.height = 32;
  opt.width = 48;
  const auto a = scratch_dir("synth_a"), b = scratch_dir("synth_b");
  const auto ia = synth_generate(opt, a);
  synth_generate(opt, b);
  ASSERT_EQ(ia.entries.size(), 3u);
  for (const auto& e : ia.entries) {
    EXPECT_EQ(slurp(a / e.image), slurp(b / e.image));
    EXPECT_EQ(slurp(a / e.annotations), slurp(b / e.annotations));
  }
  EXPECT_EQ(slurp(a / "index.json"), slurp(b / "index.json"));
  opt.seed = 43;
  const auto c = scratch_dir("synth_c");
  synth_generate(opt, c);
  EXPECT_NE(slurp(a / ia.entries[0].image), slurp(c / ia.entries[0].image));
}

TEST(Synth, ZeroLambdaGivesEmptyAnnotations) {
  SynthOptions opt;
  opt.n_images = 2;
  opt.height = opt.width = 16;
  opt.lambda = {0.0};
  const auto dir = scratch_dir("synth_empty");
  const auto idx = synth_generate(opt, dir);
  for (const auto& e : idx.entries) EXPECT_TRUE(load_annotations(dir / e.annotations, 3).empty());
}

TEST(Synth, AnnotationsRoundTripThroughManifest) {
  SynthOptions opt;
  opt.seed = 5;
  opt.n_images = 4;
  opt.categories = 3;
  opt.lambda = {2.0, 4.0, 1.0};
  const auto dir = scratch_dir("synth_rt");
  const auto idx = synth_generate(opt, dir);
  const auto loaded = DatasetIndex::load(dir);
  EXPECT_EQ(loaded.num_categories, 3);
  ASSERT_EQ(loaded.entries.size(), 4u);
  const auto samples = load_samples(loaded);
  for (const auto& s : samples) {
    EXPECT_EQ(s.image.shape(), (Shape{64, 64, 3}));
    const auto pts = count_points(s.points, 3);
    const auto mass = count_from_density(gt_density(s.points, 64, 64, 3));
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(mass[k], pts[k], 1e-3);
  }
}

TEST(Synth, Errors) {
  SynthOptions opt;
  opt.height = 40;
  EXPECT_THROW(synth_generate(opt, scratch_dir("synth_bad")), ArgumentError);
  opt.height = 32;
  opt.lambda = {1.0, 2.0};
  EXPECT_THROW(synth_generate(opt, scratch_dir("synth_bad")), ArgumentError);
  opt.lambda = {1.0};
  const auto blocker = scratch_dir("synth_block") / "file";
  std::ofstream(blocker) << "x";
  EXPECT_THROW(synth_generate(opt, blocker / "sub"), IoError);
}

TEST(Manifest, MissingFilesAndBadJson) {
  SynthOptions opt;
  opt.n_images = 2;
  opt.height = opt.width = 16;
  const auto dir = scratch_dir("manifest");
  const auto idx = synth_generate(opt, dir);
  fs::remove(dir / idx.entries[1].image);
  EXPECT_THROW(DatasetIndex::load(dir), IoError);
  std::ofstream(dir / "index.json") << "{\"K\": 3, \"entries\": [";
  EXPECT_THROW(DatasetIndex::load(dir), FormatError);
  EXPECT_THROW(DatasetIndex::load(dir / "nope"), IoError);
}

TEST(Checkpoint, BitwiseRoundTripWithOptimizer) {
  MambaMoc<float> model(tiny());
  AdamW<float> opt(model.named_parameters());
  for (auto& m : opt.first_moments()) for (auto& v : m) v = 0.25f;
  opt.set_step_count(17);
  const auto path = scratch_dir("ckpt") / "a.mmoc";
  save_checkpoint(path, model, &opt);

  auto cfg = tiny();
  cfg.seed = 8;  // different init
  MambaMoc<float> other(cfg);
  AdamW<float> opt2(other.named_parameters());
  load_checkpoint(path, other, &opt2);
  const auto pa = model.named_parameters(), pb = other.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_EQ(std::memcmp(pa[i].second.value().data(), pb[i].second.value().data(),
                          pa[i].second.size() * sizeof(float)), 0) << pa[i].first;
  }
  EXPECT_EQ(opt2.step_count(), 17);
  EXPECT_EQ(opt2.first_moments(), opt.first_moments());
  EXPECT_EQ(checkpoint_config(read_checkpoint_file(path)).to_json(), tiny().to_json());
}

TEST(Checkpoint, LayoutHeaderAndEmptyModel) {
  CheckpointData empty;
  empty.config = nlohmann::json::object();
  std::ostringstream out;
  write_checkpoint(out, empty);
  const std::string bytes = out.str();
  ASSERT_EQ(bytes.size(), 12u + 4u + 2u);  // header, blob length, "{}"
  EXPECT_EQ(bytes.substr(0, 4), "MMOC");
  EXPECT_EQ(bytes.substr(4, 8), std::string("\x01\0\0\0\0\0\0\0", 8));
  EXPECT_EQ(bytes.substr(12, 4), std::string("\x02\0\0\0", 4));
  std::istringstream in(bytes);
  EXPECT_TRUE(read_checkpoint(in).tensors.empty());

  CheckpointData one;
  one.tensors.push_back({"w", Tensor(Shape{2, 3}, 1.5f)});
  std::ostringstream o2;
  write_checkpoint(o2, one);
  // name len, name, rank, 2 dims, 6 floats, blob length, "{}"
  EXPECT_EQ(o2.str().size(), 12u + 2 + 1 + 1 + 8 + 24 + 4 + 2);
}

TEST(Checkpoint, FormatErrors) {
  std::ostringstream out;
  write_checkpoint(out, CheckpointData{{{"t", Tensor(Shape{3}, 2.0f)}}, nlohmann::json::object()});
  const std::string good = out.str();
  auto read = [](std::string b) {
    std::istringstream in(b);
    return read_checkpoint(in);
  };
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(read(bad_magic), FormatError);
  std::string bad_version = good;
  bad_version[4] = 2;
  EXPECT_THROW(read(bad_version), FormatError);
  EXPECT_THROW(read(good.substr(0, good.size() - 3)), FormatError);
  EXPECT_THROW(read(good.substr(0, 20)), FormatError);
  EXPECT_THROW(read_checkpoint_file("/nonexistent/x.mmoc"), IoError);
}

TEST(Checkpoint, MismatchNamesTensor) {
  MambaMoc<float> model(tiny(2));
  const auto path = scratch_dir("ckpt_mismatch") / "a.mmoc";
  save_checkpoint(path, model);
  MambaMoc<float> wider(tiny(3));
  try {
    load_checkpoint(path, wider);
    FAIL() << "expected CompatibilityError";
  } catch (const CompatibilityError& e) {
    EXPECT_NE(std::string(e.what()).find("predictor.out"), std::string::npos) << e.what();
  }
  auto cim_cfg = tiny(2);
  cim_cfg.ablation = Ablation::kBaseline;
  MambaMoc<float> smaller(cim_cfg);
  EXPECT_THROW(load_checkpoint(path, smaller), CompatibilityError);
}
