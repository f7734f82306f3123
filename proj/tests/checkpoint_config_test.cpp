#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ksanc/checkpoint.hpp"
#include "ksanc/config.hpp"

using namespace ksanc;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "ksanc_ckpt_test";
  fs::create_directories(dir);
  return dir / name;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Checkpoint, RoundTripMixedDtypes) {
  const std::vector<Parameter> entries{
      {"a.weight", Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6.5})},
      {"b.bias", Tensor::from_values({2}, {0.1, -1e-300}, DType::f64)},
      {"c.scalar", Tensor::scalar(7.0)}};
  const auto path = temp_path("rt.ckpt");
  write_checkpoint(path, R"({"kind":"test"})", entries);
  const auto data = read_checkpoint(path);
  EXPECT_EQ(data.header, R"({"kind":"test"})");
  ASSERT_EQ(data.entries.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(data.entries[i].name, entries[i].name);
    EXPECT_EQ(data.entries[i].tensor.dtype(), entries[i].tensor.dtype());
    EXPECT_EQ(data.entries[i].tensor.shape(), entries[i].tensor.shape());
    EXPECT_EQ(data.entries[i].tensor.to_vector(), entries[i].tensor.to_vector());
  }
  EXPECT_NE(data.find("b.bias"), nullptr);
  EXPECT_EQ(data.find("nope"), nullptr);
  EXPECT_FALSE(fs::exists(path.string() + ".tmp"));
}

TEST(Checkpoint, FileLayoutStartsWithMagic) {
  const auto path = temp_path("layout.ckpt");
  write_checkpoint(path, "{}", std::vector<Parameter>{});
  std::ifstream in(path, std::ios::binary);
  std::string magic(8, '\0');
  in.read(magic.data(), 8);
  EXPECT_EQ(magic, "KSANCKPT");
  // 8 magic + 4 version + 8 header length + 2 header + 8 entry count.
  EXPECT_EQ(fs::file_size(path), 30u);
}

TEST(Checkpoint, RejectsDuplicateNames) {
  const std::vector<Parameter> entries{{"x", Tensor::zeros({1})}, {"x", Tensor::zeros({1})}};
  EXPECT_THROW(write_checkpoint(temp_path("dup.ckpt"), "{}", entries), Error);
}

TEST(Checkpoint, TruncatedFileReportsOffset) {
  const auto path = temp_path("trunc.ckpt");
  write_checkpoint(path, "{}", std::vector<Parameter>{{"w", Tensor::zeros({4}, DType::f64)}});
  fs::resize_file(path, fs::file_size(path) - 5);
  const auto msg = message_of([&] { read_checkpoint(path); });
  EXPECT_NE(msg.find("offset"), std::string::npos) << msg;
  EXPECT_THROW(read_checkpoint(path), DataError);
}

TEST(Checkpoint, BadMagicIsDataError) {
  const auto path = temp_path("magic.ckpt");
  std::ofstream(path, std::ios::binary) << "NOTACKPT and some more bytes here";
  EXPECT_THROW(read_checkpoint(path), DataError);
}

TEST(Checkpoint, RestoreByNameChecksShapes) {
  const auto path = temp_path("restore.ckpt");
  write_checkpoint(path, "{}",
                   std::vector<Parameter>{{"p", Tensor::from_values({2}, {3, 4}, DType::f64)}});
  const auto data = read_checkpoint(path);
  Tensor target = Tensor::zeros({2});
  restore_entries(data, std::vector<Parameter>{{"p", target}});
  EXPECT_EQ(target.to_vector(), (std::vector<double>{3, 4}));
  EXPECT_THROW(restore_entries(data, std::vector<Parameter>{{"p", Tensor::zeros({3})}}), Error);
  EXPECT_THROW(restore_entries(data, std::vector<Parameter>{{"q", Tensor::zeros({2})}}), Error);
}

TEST(Checkpoint, PrefixedAndFnv) {
  const auto p = prefixed("student", {{"w", Tensor::zeros({1})}});
  EXPECT_EQ(p[0].name, "student.w");
  // Published FNV-1a 64-bit test vectors.
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

TEST(Config, DefaultsAndComments) {
  const auto c = RunConfig::parse("# comment\n\ndataset = synthetic\n  output=/tmp/o  \n");
  EXPECT_EQ(c.dataset, "synthetic");
  EXPECT_EQ(c.output, "/tmp/o");
  EXPECT_EQ(c.batch_size, 64u);
  EXPECT_DOUBLE_EQ(c.lr_student, 0.1);
  EXPECT_DOUBLE_EQ(c.lr_discriminator, 1e-3);
  EXPECT_EQ(c.loss_mask, LossMask{});
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ParsesEveryKind) {
  const auto c = RunConfig::parse(
      "dataset=synthetic\noutput=o\nteacher_channels=4,8\nteacher_units=2,2\n"
      "student_channels=4,8\nstudent_units=1,1\nsteps_ratio=2:3\nloss_mask=b+is\n"
      "augment=false\ndtype=f64\nlr_milestones=3,6\nepochs=8\n");
  EXPECT_EQ(c.teacher_channels, (std::vector<std::size_t>{4, 8}));
  EXPECT_EQ(c.student_steps, 2u);
  EXPECT_EQ(c.discriminator_steps, 3u);
  EXPECT_EQ(c.loss_mask.to_string(), "b+is");
  EXPECT_FALSE(c.augment);
  EXPECT_EQ(c.dtype, DType::f64);
  EXPECT_EQ(c.student_milestones(), (std::vector<std::size_t>{3, 6}));
  EXPECT_EQ(c.teacher_milestones(), (std::vector<std::size_t>{12, 24}));
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ErrorsNameSourceAndLine) {
  auto msg = message_of([] { RunConfig::parse("dataset=synthetic\nbogus=1\n", "run.cfg"); });
  EXPECT_NE(msg.find("run.cfg:2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("bogus"), std::string::npos) << msg;
  msg = message_of([] { RunConfig::parse("epochs=3\nepochs=4\n", "x"); });
  EXPECT_NE(msg.find("x:2"), std::string::npos) << msg;
  msg = message_of([] { RunConfig::parse("epochs=three\n", "x"); });
  EXPECT_NE(msg.find("x:1: epochs"), std::string::npos) << msg;
  EXPECT_THROW(RunConfig::parse("no equals sign\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("steps_ratio=2\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("loss_mask=b+zz\n"), ConfigError);
  EXPECT_THROW(RunConfig::load(temp_path("missing.cfg")), ConfigError);
}

TEST(Config, ValidateNamesField) {
  auto c = RunConfig::parse("output=o\n");
  auto msg = message_of([&] { c.validate(); });
  EXPECT_EQ(msg.rfind("dataset:", 0), 0u) << msg;
  c = RunConfig::parse("dataset=synthetic\noutput=o\nbatch_size=1\n");
  msg = message_of([&] { c.validate(); });
  EXPECT_EQ(msg.rfind("batch_size:", 0), 0u) << msg;
  c = RunConfig::parse("dataset=synthetic\noutput=o\nstudent_channels=8,16\n");
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig::parse("dataset=/no/such/file\noutput=o\ntest_dataset=/no/such/file\n");
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig::parse("dataset=synthetic\noutput=o\nepochs=5\nlr_milestones=5\n");
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, TextRoundTripAndHashes) {
  const auto c = RunConfig::parse(
      "dataset=synthetic\noutput=o\nlambda2=0.5\nsteps_ratio=1:2\nlr_student=0.02\nseed=9\n");
  const auto back = RunConfig::parse(c.to_text());
  EXPECT_EQ(back.to_text(), c.to_text());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(back.teacher_hash(), c.teacher_hash());

  auto d = c;
  d.output = "elsewhere";
  d.runs = 2;
  EXPECT_EQ(d.hash(), c.hash());
  d.lr_student = 0.03;
  EXPECT_NE(d.hash(), c.hash());
  EXPECT_EQ(d.teacher_hash(), c.teacher_hash());
  d.teacher_units = {2, 2, 2};
  EXPECT_NE(d.teacher_hash(), c.teacher_hash());
  EXPECT_EQ(c.hash().size(), 16u);
}

TEST(Config, LoadDataChecksDims) {
  auto c = RunConfig::parse(
      "dataset=synthetic\noutput=o\nsynth_train_samples=8\nsynth_test_samples=4\nimage_height=8\n"
      "image_width=8\naugment_pad=2\n");
  const auto data = load_data(c);
  EXPECT_EQ(data.train.images.shape(), (Shape{8, 3, 8, 8}));
  EXPECT_EQ(data.test.size(), 4u);
  EXPECT_EQ(data.test.stats.mean, data.train.stats.mean);

  // A cifar-like file whose records do not fit the configured image size.
  const auto path = temp_path("tiny.bin");
  {
    std::ofstream out(path, std::ios::binary);
    for (int i = 0; i < 2 * (1 + 3 * 8 * 8); ++i) out.put(0);
  }
  c.dataset = path.string();
  c.test_dataset = path.string();
  c.image_height = 4;
  c.image_width = 4;
  c.augment_pad = 1;
  EXPECT_THROW(load_data(c), Error);
}
