#include <fstream>

#include <gtest/gtest.h>

#include "memscore/checkpoint.hpp"
#include "test_util.hpp"

using namespace memscore;

namespace {

Tensor<float> probe_batch(std::size_t size) {
  Rng rng(99);
  Tensor<float> x(4, 3, size, size);
  for (auto& v : x.values()) v = static_cast<float>(rng.normal());
  return x;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::string& b) {
  std::ofstream(p, std::ios::binary).write(b.data(), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitIdentical) {
  testutil::TempDir dir;
  for (auto v : {Variant::memnet, Variant::resmem, Variant::m3m}) {
    Model<float> m(preset("tiny", v), 21);
    if (v != Variant::memnet) m.set_frozen(true);
    const TrainMeta meta{3, 120, 0.61, 21};
    save_checkpoint(dir / "m.ckpt", m, SimplePipelineConfig{}, meta);
    const auto ck = load_checkpoint(dir / "m.ckpt");
    const auto x = probe_batch(32);
    EXPECT_EQ(ck.model.forward(x), m.forward(x)) << to_string(v);
    EXPECT_EQ(ck.model.tag(), m.tag());
    EXPECT_EQ(ck.model.frozen(), m.frozen());
    EXPECT_EQ(ck.train_meta.step, 120u);
    EXPECT_EQ(ck.train_meta.val_spearman, 0.61);
  }
}

TEST(Checkpoint, LegacyPipelineKeepsMeanImage) {
  testutil::TempDir dir;
  Model<float> m(preset("tiny", Variant::memnet), 2);
  auto legacy = legacy_demo_preset(32);
  Rng rng(3);
  legacy.mean_image = testutil::random_image(rng, 3, 64, 64);
  save_checkpoint(dir / "l.ckpt", m, legacy);
  const auto ck = load_checkpoint(dir / "l.ckpt");
  const auto& back = std::get<LegacyPipelineConfig>(ck.pipeline);
  EXPECT_EQ(back.mean_image, legacy.mean_image);
  EXPECT_EQ(back.crop_size, 32u);
}

TEST(Checkpoint, FileLayoutStartsWithMagicAndVersion) {
  Model<float> m(preset("tiny", Variant::memnet), 2);
  const auto bytes = serialize_checkpoint(m, SimplePipelineConfig{}, {});
  ASSERT_GT(bytes.size(), 13u);
  EXPECT_EQ(bytes.substr(0, 9), "MEMSCORE1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 1u);  // little-endian version 1
  EXPECT_EQ(bytes[10] | bytes[11] | bytes[12], 0);
  // Weights dominate the file: 4 bytes per parameter.
  EXPECT_GT(bytes.size(), 4 * m.parameter_count());
}

TEST(Checkpoint, EditedHeaderIsShapeMismatch) {
  testutil::TempDir dir;
  Model<float> m(preset("tiny", Variant::memnet), 2);
  auto bytes = serialize_checkpoint(m, SimplePipelineConfig{}, {});
  // Same-length edit of the first conv width: 8 -> 9.
  const auto at = bytes.find("\"channels\":[8,16,16]");
  ASSERT_NE(at, std::string::npos);
  bytes.replace(at, 20, "\"channels\":[9,16,16]");
  write_bytes(dir / "e.ckpt", bytes);
  EXPECT_THROW(load_checkpoint(dir / "e.ckpt"), ShapeError);
}

TEST(Checkpoint, WrongMagicOrVersionIsFormatError) {
  testutil::TempDir dir;
  Model<float> m(preset("tiny", Variant::memnet), 2);
  auto bytes = serialize_checkpoint(m, SimplePipelineConfig{}, {});
  auto bad = bytes;
  bad[0] = 'X';
  write_bytes(dir / "b.ckpt", bad);
  EXPECT_THROW(load_checkpoint(dir / "b.ckpt"), FormatError);
  bad = bytes;
  bad[9] = 2;
  try {
    parse_checkpoint(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
}

TEST(Checkpoint, TruncationDetected) {
  Model<float> m(preset("tiny", Variant::resmem), 2);
  const auto bytes = serialize_checkpoint(m, SimplePipelineConfig{}, {});
  for (std::size_t cut : {std::size_t{5}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(parse_checkpoint(bytes.substr(0, cut)), FormatError) << "cut at " << cut;
  EXPECT_THROW(parse_checkpoint(bytes + "x"), FormatError);
}

TEST(Checkpoint, MissingFile) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/m.ckpt"), Error);
}
