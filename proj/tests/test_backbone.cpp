// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "ssmb/backbone.hpp"
#include "test_util.hpp"

namespace ssmb {
namespace {

using testing::random_tensor;
using testing::temp_dir;
using TF = Tensor<float>;

// Independent shape walk: conv (cout·cin·k² + cout) per stage, spatial side
// halved by every pool, then the FC layer.
std::size_t parameter_count_oracle(std::size_t in_channels, std::size_t side, std::vector<std::size_t> stages,
                                   std::size_t k, std::size_t embed) {
  std::size_t total = 0, cin = in_channels;
  for (auto cout : stages) {
    total += cout * cin * k * k + cout;
    cin = cout;
    side /= 2;
  }
  return total + cin * side * side * embed + embed;
}

TF random_images(std::size_t n, Rng& rng) { return random_tensor({n, 3, 32, 32}, rng, 0.0, 1.0).cast<float>(); }

bool bitwise_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

void expect_same_parameters(const Model<float>& a, const Model<float>& b) {
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].name, b.parameters()[i].name);
    EXPECT_EQ(a.parameters()[i].value.shape(), b.parameters()[i].value.shape());
    EXPECT_TRUE(bitwise_equal(a.parameters()[i].value.data(), b.parameters()[i].value.data()))
        << a.parameters()[i].name;
  }
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

CheckpointErrorKind load_error(const std::filesystem::path& p) {
  try {
    load_checkpoint(p);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "load succeeded";
  return CheckpointErrorKind::kIo;
}

Model<float> with_value_preserving_slots(const Model<float>& base, std::uint64_t seed) {
  auto model = base.clone();
  Rng rng(seed);
  for (std::size_t s = 0; s < kNumStages; ++s) {
    SSMBConfig c;
    c.channels = base.config().stage_channels[s];
    c.num_experts = 4;
    c.gate_mode = GateMode::kValuePreserving;
    model.install_ssmb(s, SSMBBlock<float>(c, rng));
  }
  return model;
}

// ---- construction --------------------------------------------------------------------------

TEST(Backbone, ParameterCountMatchesShapeOracle) {
  const auto model = build_backbone<float>(BackboneConfig{}, 1);
  const std::size_t oracle = parameter_count_oracle(3, 32, {8, 16, 32}, 3, 64);
  EXPECT_EQ(model.parameter_count(), oracle);
  // Pinned regression constant for the default configuration.
  EXPECT_EQ(model.parameter_count(), 38864u);
}

TEST(Backbone, HeadAddsClassifierParameters) {
  BackboneConfig cfg;
  cfg.num_pretrain_classes = 14;
  auto model = build_backbone<float>(cfg, 1);
  EXPECT_TRUE(model.has_head());
  EXPECT_EQ(model.parameter_count(), 38864u + 64 * 14 + 14);
  model.remove_head();
  EXPECT_FALSE(model.has_head());
  EXPECT_EQ(model.parameter_count(), 38864u);
}

TEST(Backbone, SameSeedIsBitwiseIdentical) {
  const auto a = build_backbone<float>(BackboneConfig{}, 42);
  const auto b = build_backbone<float>(BackboneConfig{}, 42);
  expect_same_parameters(a, b);
  const auto c = build_backbone<float>(BackboneConfig{}, 43);
  EXPECT_FALSE(bitwise_equal(a.parameter("conv.0.weight").value.data(), c.parameter("conv.0.weight").value.data()));
}

TEST(Backbone, HeUniformBoundsAndZeroBiases) {
  const auto model = build_backbone<double>(BackboneConfig{}, 5);
  const std::vector<std::pair<std::string, double>> fan_in{
      {"conv.0.weight", 27.0}, {"conv.1.weight", 72.0}, {"conv.2.weight", 144.0}, {"fc.weight", 512.0}};
  for (const auto& [name, fan] : fan_in) {
    const double bound = std::sqrt(6.0 / fan);
    for (double w : model.parameter(name).value.data()) EXPECT_LE(std::abs(w), bound);
  }
  for (const auto* name : {"conv.0.bias", "conv.1.bias", "conv.2.bias", "fc.bias"}) {
    for (double b : model.parameter(name).value.data()) EXPECT_EQ(b, 0.0);
  }
}

TEST(Backbone, ConfigValidation) {
  BackboneConfig cfg;
  cfg.image_size = 30;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.embedding_dim = 0;
  EXPECT_THROW(cfg.validate(), Error);
}

// ---- forward -------------------------------------------------------------------------------

TEST(Forward, EmbeddingShape) {
  const auto model = build_backbone<float>(BackboneConfig{}, 1);
  Rng rng(1);
  EXPECT_EQ(forward_embed(model, random_images(5, rng)).shape(), (Shape{5, 64}));
}

TEST(Forward, RejectsWrongInputShape) {
  const auto model = build_backbone<float>(BackboneConfig{}, 1);
  EXPECT_THROW(forward_embed(model, TF::zeros({2, 1, 32, 32})), ShapeError);
  EXPECT_THROW(forward_embed(model, TF::zeros({2, 3, 16, 16})), ShapeError);
  EXPECT_THROW(forward_embed(model, TF::zeros({3, 32, 32})), ShapeError);
}

TEST(Forward, ZeroImagesAreFinite) {
  const auto model = build_backbone<float>(BackboneConfig{}, 1);
  const auto plain = forward_embed(model, TF::zeros({2, 3, 32, 32}));
  for (float v : plain.data()) EXPECT_TRUE(std::isfinite(v));
  const auto student = forward_embed(with_value_preserving_slots(model, 3), TF::zeros({2, 3, 32, 32}));
  for (float v : student.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, DuplicatedSampleGivesIdenticalRows) {
  const auto model = build_backbone<float>(BackboneConfig{}, 2);
  Rng rng(2);
  const auto one = random_images(1, rng);
  const auto other = random_images(1, rng);
  const auto emb = forward_embed(model, concat<float>({one, other, one}, 0));
  for (std::size_t d = 0; d < 64; ++d) EXPECT_EQ(emb.at({0, d}), emb.at({2, d}));
}

TEST(Forward, EmptySlotsMatchPlainBackbone) {
  const auto model = build_backbone<float>(BackboneConfig{}, 3);
  Rng rng(3);
  const auto images = random_images(3, rng);
  // Reference: conv -> relu -> pool per stage, then the FC layer.
  TF x = images;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::string stage = "conv." + std::to_string(s);
    x = max_pool2d(relu(conv2d(x, model.parameter(stage + ".weight").value, model.parameter(stage + ".bias").value,
                               {1, 1})),
                   2);
  }
  const auto ref = matmul(reshape(x, {3, 512}), model.parameter("fc.weight").value) + model.parameter("fc.bias").value;
  const auto got = forward_embed(model, images);
  EXPECT_TRUE(bitwise_equal(got.data(), ref.data()));
}

TEST(Forward, ValuePreservingStudentMatchesTeacherAtInit) {
  const auto teacher = build_backbone<float>(BackboneConfig{}, 4);
  Rng rng(4);
  for (int i = 0; i < 5; ++i) {
    const auto student = with_value_preserving_slots(teacher, 100 + i);
    const auto images = random_images(4, rng);
    const auto t = forward_embed(teacher, images);
    const auto s = forward_embed(student, images);
    for (std::size_t k = 0; k < t.numel(); ++k) EXPECT_NEAR(s.data()[k], t.data()[k], 1e-5);
  }
}

TEST(Forward, LayerPlanIsInputIndependent) {
  const auto student = with_value_preserving_slots(build_backbone<float>(BackboneConfig{}, 5), 5);
  Rng rng(5);
  ExecutionTrace bright, dark;
  ForwardContext<float> ctx_a, ctx_b;
  ctx_a.trace = &bright;
  ctx_b.trace = &dark;
  forward_embed(student, random_images(2, rng), &ctx_a);
  forward_embed(student, random_images(2, rng) * 0.1f, &ctx_b);
  const std::vector<std::string> plan{"conv.0", "relu.0", "ssmb.0", "pool.0", "conv.1", "relu.1", "ssmb.1",
                                      "pool.1", "conv.2", "relu.2", "ssmb.2", "pool.2", "fc"};
  EXPECT_EQ(bright.layers, plan);
  EXPECT_EQ(dark.layers, plan);
  EXPECT_EQ(bright.routed_experts.size(), 3u);
  EXPECT_EQ(ctx_a.routing.size(), 3u);
  EXPECT_EQ(ctx_a.winners.size(), 3u);
}

TEST(Forward, LogitsNeedHead) {
  BackboneConfig cfg;
  cfg.num_pretrain_classes = 7;
  auto model = build_backbone<float>(cfg, 6);
  EXPECT_EQ(forward_logits(model, TF::zeros({2, 3, 32, 32})).shape(), (Shape{2, 7}));
  model.remove_head();
  EXPECT_THROW(forward_logits(model, TF::zeros({2, 3, 32, 32})), Error);
}

TEST(Forward, DoubleMatchesFloat) {
  const auto model = build_backbone<float>(BackboneConfig{}, 7);
  const auto wide = model.cast<double>();
  Rng rng(7);
  const auto images = random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
  const auto a = forward_embed(model, images.cast<float>());
  const auto b = forward_embed(wide, images);
  for (std::size_t k = 0; k < a.numel(); ++k) EXPECT_NEAR(a.data()[k], b.data()[k], 1e-4);
}

// ---- channel replication -------------------------------------------------------------------

TEST(ReplicateChannels, CopiesTheSingleChannel) {
  Rng rng(8);
  const auto x = random_tensor({1, 32, 32}, rng, 0.0, 1.0).cast<float>();
  const auto y = replicate_channels(x);
  ASSERT_EQ(y.shape(), (Shape{3, 32, 32}));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_TRUE(bitwise_equal(y.data().subspan(c * 1024, 1024), x.data()));
  }
  const auto half = replicate_channels(TF::full({1, 4, 4}, 0.5f));
  for (float v : half.data()) EXPECT_EQ(v, 0.5f);
  EXPECT_EQ(replicate_channels(TF::zeros({2, 1, 4, 4})).shape(), (Shape{2, 3, 4, 4}));
  EXPECT_THROW(replicate_channels(TF::zeros({3, 4, 4})), ShapeError);
}

// ---- freezing ------------------------------------------------------------------------------

TEST(Freezing, StudentTrainsOnlySsmbParameters) {
  auto student = with_value_preserving_slots(build_backbone<float>(BackboneConfig{}, 9), 9);
  student.freeze_all_but_ssmb();
  std::size_t trainable = 0;
  for (const auto& p : student.parameters()) {
    EXPECT_EQ(p.frozen, !is_ssmb_param(p.name)) << p.name;
    trainable += p.frozen ? 0 : 1;
  }
  // router weight + bias + 4 × (weight, bias) per slot, three slots
  EXPECT_EQ(trainable, 30u);
  student.unfreeze_all();
  for (const auto& p : student.parameters()) EXPECT_FALSE(p.frozen);
  student.freeze_all();
  for (const auto& p : student.parameters()) EXPECT_TRUE(p.frozen);
}

TEST(Freezing, CloneSharesNoStorage) {
  const auto a = build_backbone<float>(BackboneConfig{}, 10);
  auto b = a.clone();
  b.parameters()[0].value.mutable_data()[0] += 1.0f;
  EXPECT_NE(a.parameters()[0].value.data()[0], b.parameters()[0].value.data()[0]);
}

TEST(Ssmb, ParameterNamesAndInstallRules) {
  const auto student = with_value_preserving_slots(build_backbone<float>(BackboneConfig{}, 11), 11);
  EXPECT_TRUE(student.has_ssmb());
  EXPECT_TRUE(student.has_parameter("ssmb.0.router.weight"));
  EXPECT_TRUE(student.has_parameter("ssmb.2.expert.3.bias"));
  EXPECT_EQ(student.parameter("ssmb.1.router.weight").value.shape(), (Shape{32, 4}));
  EXPECT_EQ(student.parameter("ssmb.2.expert.0.weight").value.shape(), (Shape{64, 64}));
  auto model = build_backbone<float>(BackboneConfig{}, 11);
  Rng rng(1);
  SSMBConfig wrong;
  wrong.channels = 5;
  EXPECT_THROW(model.install_ssmb(0, SSMBBlock<float>(wrong, rng)), Error);
}

// ---- checkpoint format ---------------------------------------------------------------------

TEST(Checkpoint, Crc32KnownVector) {
  const char* text = "123456789";
  EXPECT_EQ(crc32(reinterpret_cast<const std::uint8_t*>(text), 9), 0xCBF43926u);
}

TEST(Checkpoint, ByteLayoutMatchesHandEncoding) {
  const std::vector<NamedTensor> tensors{{"ab", {2}, {1.0f, -2.5f}}};
  std::vector<std::uint8_t> expect{'S', 'S', 'M', 'B', 'C', 'K', 'P', 'T', 0x01, 1, 0, 0, 0, 2, 0, 'a', 'b', 1, 2, 0, 0, 0};
  for (float v : {1.0f, -2.5f}) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int b = 0; b < 4; ++b) expect.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
  }
  const std::uint32_t crc = crc32(expect.data(), expect.size());
  for (int b = 0; b < 4; ++b) expect.push_back(static_cast<std::uint8_t>(crc >> (8 * b)));
  EXPECT_EQ(encode_checkpoint(tensors), expect);
  EXPECT_EQ(decode_checkpoint(expect), tensors);
}

TEST(Checkpoint, RoundTripIsBitwiseExact) {
  const auto dir = temp_dir("ckpt_roundtrip");
  const auto teacher = build_backbone<float>(BackboneConfig{}, 12);
  save_checkpoint(teacher, dir / "t.ckpt");
  expect_same_parameters(teacher, load_checkpoint(dir / "t.ckpt"));

  auto student = with_value_preserving_slots(teacher, 12);
  student.parameter("ssmb.1.router.bias").value.mutable_data()[2] = 0.75f;
  save_checkpoint(student, dir / "s.ckpt");
  const auto loaded = load_checkpoint(dir / "s.ckpt");
  expect_same_parameters(student, loaded);
  for (std::size_t s = 0; s < kNumStages; ++s) {
    ASSERT_TRUE(loaded.slot(s).has_value());
    EXPECT_EQ(loaded.slot(s)->config().gate_mode, GateMode::kValuePreserving);
    EXPECT_EQ(loaded.slot(s)->config().num_experts, 4u);
  }
  Rng rng(12);
  const auto images = random_images(2, rng);
  EXPECT_TRUE(bitwise_equal(forward_embed(student, images).data(), forward_embed(loaded, images).data()));
  // Saving the loaded model reproduces the file byte for byte.
  save_checkpoint(loaded, dir / "s2.ckpt");
  EXPECT_EQ(read_bytes(dir / "s.ckpt"), read_bytes(dir / "s2.ckpt"));
}

TEST(Checkpoint, HeadSurvivesRoundTrip) {
  const auto dir = temp_dir("ckpt_head");
  BackboneConfig cfg;
  cfg.num_pretrain_classes = 9;
  const auto model = build_backbone<float>(cfg, 13);
  save_checkpoint(model, dir / "h.ckpt");
  const auto loaded = load_checkpoint(dir / "h.ckpt");
  EXPECT_TRUE(loaded.has_head());
  EXPECT_EQ(loaded.config().num_pretrain_classes, 9u);
}

TEST(Checkpoint, DistinctErrors) {
  const auto dir = temp_dir("ckpt_errors");
  save_checkpoint(build_backbone<float>(BackboneConfig{}, 14), dir / "good.ckpt");
  const auto good = read_bytes(dir / "good.ckpt");

  auto bad_magic = good;
  bad_magic[0] = 'X';
  write_bytes(dir / "magic.ckpt", bad_magic);
  EXPECT_EQ(load_error(dir / "magic.ckpt"), CheckpointErrorKind::kCorruptMagic);

  auto bad_version = good;
  bad_version[8] = 0x02;
  write_bytes(dir / "version.ckpt", bad_version);
  EXPECT_EQ(load_error(dir / "version.ckpt"), CheckpointErrorKind::kUnsupportedVersion);

  write_bytes(dir / "trunc.ckpt", std::vector<std::uint8_t>(good.begin(), good.begin() + good.size() / 2));
  EXPECT_EQ(load_error(dir / "trunc.ckpt"), CheckpointErrorKind::kTruncated);

  auto flipped = good;
  flipped[good.size() / 2] ^= 0x10;
  write_bytes(dir / "crc.ckpt", flipped);
  EXPECT_EQ(load_error(dir / "crc.ckpt"), CheckpointErrorKind::kCrcMismatch);

  auto trailing = good;
  trailing.push_back(0);
  write_bytes(dir / "trailing.ckpt", trailing);
  EXPECT_EQ(load_error(dir / "trailing.ckpt"), CheckpointErrorKind::kTrailingBytes);

  EXPECT_EQ(load_error(dir / "missing.ckpt"), CheckpointErrorKind::kIo);

  auto tensors = to_named_tensors(build_backbone<float>(BackboneConfig{}, 14));
  tensors[1].shape = {4, 2};
  write_checkpoint_file(dir / "shape.ckpt", tensors);
  EXPECT_EQ(load_error(dir / "shape.ckpt"), CheckpointErrorKind::kShapeMismatch);

  tensors = to_named_tensors(build_backbone<float>(BackboneConfig{}, 14));
  tensors.erase(tensors.begin() + 3);
  write_checkpoint_file(dir / "missing_tensor.ckpt", tensors);
  EXPECT_EQ(load_error(dir / "missing_tensor.ckpt"), CheckpointErrorKind::kMissingTensor);
}

TEST(Checkpoint, ErrorMessagesNameTheKind) {
  EXPECT_EQ(checkpoint_error_name(CheckpointErrorKind::kCorruptMagic), "corrupt-magic");
  EXPECT_EQ(checkpoint_error_name(CheckpointErrorKind::kTruncated), "truncated");
  EXPECT_EQ(checkpoint_error_name(CheckpointErrorKind::kShapeMismatch), "shape-mismatch");
}

}  // namespace
}  // namespace ssmb
