// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "ssmb/synthdata.hpp"
#include "test_util.hpp"

namespace ssmb {
namespace {

using testing::temp_dir;

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Image random_image(Rng& rng) {
  Image img = Image::filled(0.0f);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform(0.0, 1.0));
  return img;
}

double mean_abs_diff(const Image& a, const Image& b) {
  double total = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) total += std::abs(a.pixels[i] - b.pixels[i]);
  return total / static_cast<double>(a.pixels.size());
}

class Dataset : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new std::filesystem::path(temp_dir("synth_default"));
    manifest_ = new DatasetManifest(generate_dataset(GenerateOptions{}, *dir_));
  }
  static void TearDownTestSuite() {
    delete manifest_;
    delete dir_;
  }
  static std::filesystem::path* dir_;
  static DatasetManifest* manifest_;
};

std::filesystem::path* Dataset::dir_ = nullptr;
DatasetManifest* Dataset::manifest_ = nullptr;

// ---- names ---------------------------------------------------------------------------------

TEST(Names, ModalityAndSplitRoundTrip) {
  for (auto m : kAllModalities) EXPECT_EQ(parse_modality(modality_name(m)), m);
  for (auto s : {Split::kTrain, Split::kDevEnroll, Split::kDevProbe}) EXPECT_EQ(parse_split(split_name(s)), s);
  EXPECT_THROW(parse_modality("infrared"), DataError);
  EXPECT_THROW(parse_split("test"), DataError);
  EXPECT_EQ(parse_modality_list("vis,thermal"), (std::vector<Modality>{Modality::kVis, Modality::kThermal}));
  EXPECT_THROW(parse_modality_list("vis,vis"), DataError);
  EXPECT_THROW(parse_modality_list(""), DataError);
}

// ---- identities and rendering --------------------------------------------------------------

TEST(Identity, ParamsDeterministicAndInRange) {
  for (int id = 0; id < 50; ++id) {
    const auto a = IdentityParams::derive(7, id);
    const auto b = IdentityParams::derive(7, id);
    EXPECT_EQ(a.values, b.values);
    EXPECT_EQ(a.id, id);
    for (double v : a.values) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_NE(IdentityParams::derive(7, 1).values, IdentityParams::derive(8, 1).values);
}

TEST(Render, DeterministicAndInUnitRange) {
  const auto params = IdentityParams::derive(3, 4);
  const auto a = render_identity(params, 99);
  const auto b = render_identity(params, 99);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.pixels.size(), 32u * 32u);
  for (auto m : kAllModalities) {
    for (float v : apply_modality(a, m).pixels) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Render, DistinctIdentitiesDiffer) {
  Rng rng(11);
  int distinct = 0;
  for (int k = 0; k < 100; ++k) {
    const int a = static_cast<int>(rng.below(1000));
    int b = static_cast<int>(rng.below(999));
    if (b >= a) ++b;
    const auto img_a = render_identity(IdentityParams::derive(7, a), rng.next_u64());
    const auto img_b = render_identity(IdentityParams::derive(7, b), rng.next_u64());
    distinct += mean_abs_diff(img_a, img_b) > 0.01 ? 1 : 0;
  }
  EXPECT_GE(distinct, 95);
}

TEST(Render, VariationJitterIsSmall) {
  // Different variation seeds of one identity stay closer than different identities on average.
  Rng rng(12);
  double same = 0, other = 0;
  for (int k = 0; k < 50; ++k) {
    const auto p = IdentityParams::derive(7, k);
    const auto q = IdentityParams::derive(7, k + 100);
    const auto base = render_identity(p, rng.next_u64());
    same += mean_abs_diff(base, render_identity(p, rng.next_u64()));
    other += mean_abs_diff(base, render_identity(q, rng.next_u64()));
  }
  EXPECT_LT(same, other);
}

// ---- modality transforms -------------------------------------------------------------------

TEST(Modality, VisIsIdentity) {
  Rng rng(1);
  const auto x = random_image(rng);
  EXPECT_EQ(apply_modality(x, Modality::kVis), x);
}

TEST(Modality, ThermalOfConstantIsInverted) {
  for (float c : {0.0f, 0.25f, 0.5f, 0.8f, 1.0f}) {
    for (float v : apply_modality(Image::filled(c), Modality::kThermal).pixels) EXPECT_NEAR(v, 1.0f - c, 1e-6f);
  }
}

TEST(Modality, NirIsStretchedSquareRoot) {
  Rng rng(2);
  for (int i = 0; i < 10; ++i) {
    const auto x = random_image(rng);
    std::vector<double> r(x.pixels.size());
    for (std::size_t k = 0; k < r.size(); ++k) r[k] = std::sqrt(static_cast<double>(x.pixels[k]));
    const auto [lo, hi] = std::minmax_element(r.begin(), r.end());
    const double min = *lo, range = *hi - *lo;
    const auto y = apply_modality(x, Modality::kNir);
    for (std::size_t k = 0; k < r.size(); ++k) EXPECT_NEAR(y.pixels[k], (r[k] - min) / range, 1e-5);
  }
}

TEST(Modality, LowresHasBlockStructure) {
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    const auto x = random_image(rng);
    const auto y = apply_modality(x, Modality::kLowres);
    std::set<float> distinct(y.pixels.begin(), y.pixels.end());
    EXPECT_LE(distinct.size(), 64u);
    // Every pixel equals its 4×4 block mean.
    for (std::size_t py = 0; py < 32; ++py) {
      for (std::size_t px = 0; px < 32; ++px) {
        double mean = 0;
        for (std::size_t dy = 0; dy < 4; ++dy) {
          for (std::size_t dx = 0; dx < 4; ++dx) mean += x.at(py / 4 * 4 + dy, px / 4 * 4 + dx);
        }
        EXPECT_NEAR(y.at(py, px), mean / 16.0, 1e-6);
      }
    }
  }
}

TEST(Modality, SketchIsNormalizedEdgeMagnitude) {
  EXPECT_EQ(apply_modality(Image::filled(0.4f), Modality::kSketch), Image::filled(0.0f));
  // Vertical step edge: interior columns away from the step have zero gradient.
  Image step = Image::filled(0.0f);
  for (std::size_t y = 0; y < 32; ++y) {
    for (std::size_t x = 16; x < 32; ++x) step.pixels[y * 32 + x] = 1.0f;
  }
  const auto s = apply_modality(step, Modality::kSketch);
  EXPECT_EQ(*std::max_element(s.pixels.begin(), s.pixels.end()), 1.0f);
  for (std::size_t y = 0; y < 32; ++y) {
    EXPECT_EQ(s.at(y, 4), 0.0f);
    EXPECT_EQ(s.at(y, 28), 0.0f);
    EXPECT_EQ(s.at(y, 15), 1.0f);
    EXPECT_EQ(s.at(y, 16), 1.0f);
  }
}

// ---- PGM -----------------------------------------------------------------------------------

TEST(Pgm, QuantizesToRoundedBytes) {
  Image img = Image::filled(0.0f, 2, 3);
  img.pixels = {0.0f, 1.0f, 0.5f, 0.2f, 0.999f, 0.001f};
  const auto bytes = encode_pgm(img);
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header.size())), header);
  const std::vector<std::uint8_t> px(bytes.begin() + static_cast<std::ptrdiff_t>(header.size()), bytes.end());
  EXPECT_EQ(px, (std::vector<std::uint8_t>{0, 255, 128, 51, 255, 0}));
  const auto back = decode_pgm(bytes);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.width, 3u);
  EXPECT_EQ(encode_pgm(back), bytes);
}

TEST(Pgm, RejectsMalformedInput) {
  EXPECT_THROW(decode_pgm({'P', '2', '\n'}), DataError);
  const std::string short_px = "P5\n2 2\n255\nabc";
  EXPECT_THROW(decode_pgm({short_px.begin(), short_px.end()}), DataError);
  const std::string maxval = "P5\n1 1\n65535\nab";
  EXPECT_THROW(decode_pgm({maxval.begin(), maxval.end()}), DataError);
}

// ---- generation ----------------------------------------------------------------------------

TEST_F(Dataset, SplitArithmeticAndContract) {
  const auto& m = *manifest_;
  EXPECT_EQ(m.identities(Split::kTrain).size(), 14u);
  const auto dev = m.identities(Split::kDevProbe);
  EXPECT_EQ(dev.size(), 6u);
  EXPECT_EQ(m.identities(Split::kDevEnroll), dev);
  for (int id : m.identities(Split::kTrain)) EXPECT_FALSE(std::binary_search(dev.begin(), dev.end(), id));
  EXPECT_EQ(m.records.size(), 14u * 5 * 5 + 6u * 5 + 6u * 5 * 5);

  std::map<std::tuple<int, Modality, Split>, int> counts;
  for (const auto& r : m.records) {
    ++counts[{r.identity, r.modality, r.split}];
    if (r.split == Split::kDevEnroll) EXPECT_EQ(r.modality, Modality::kVis);
    EXPECT_TRUE(std::filesystem::exists(*dir_ / r.path)) << r.path;
  }
  for (int id : m.identities(Split::kTrain)) {
    for (auto mod : kAllModalities) EXPECT_GE((counts[{id, mod, Split::kTrain}]), 1);
  }
  for (int id : dev) {
    EXPECT_GE((counts[{id, Modality::kVis, Split::kDevEnroll}]), 1);
    for (auto mod : kAllModalities) EXPECT_GE((counts[{id, mod, Split::kDevProbe}]), 1);
  }
}

TEST_F(Dataset, StoredImagesMatchRendering) {
  const auto& m = *manifest_;
  for (std::size_t i = 0; i < m.records.size(); i += 37) {
    const auto& r = m.records[i];
    const auto expect = apply_modality(render_identity(IdentityParams::derive(m.seed, r.identity), r.variation_seed),
                                       r.modality);
    EXPECT_EQ(file_bytes(*dir_ / r.path), encode_pgm(expect)) << r.path;
  }
}

TEST_F(Dataset, ManifestRoundTrip) {
  const auto& m = *manifest_;
  EXPECT_EQ(DatasetManifest::parse(m.serialize()), m);
  EXPECT_EQ(DatasetManifest::load(*dir_ / kManifestFile), m);
  const auto text = m.serialize();
  EXPECT_EQ(text.rfind("#ssmb-manifest-v1 seed=7\n", 0), 0u);
  EXPECT_EQ(m.modalities(), (std::vector<Modality>(kAllModalities.begin(), kAllModalities.end())));
}

TEST(Manifest, RejectsMalformedLines) {
  EXPECT_THROW(DatasetManifest::parse(""), DataError);
  EXPECT_THROW(DatasetManifest::parse("seed=1\n"), DataError);
  EXPECT_THROW(DatasetManifest::parse("#ssmb-manifest-v1 seed=1\na.pgm,1,vis,train\n"), DataError);
  EXPECT_THROW(DatasetManifest::parse("#ssmb-manifest-v1 seed=1\na.pgm,x,vis,train,3\n"), DataError);
  EXPECT_THROW(DatasetManifest::parse("#ssmb-manifest-v1 seed=1\na.pgm,1,uv,train,3\n"), DataError);
  const auto ok = DatasetManifest::parse("#ssmb-manifest-v1 seed=1\na.pgm,1,vis,train,3\n");
  ASSERT_EQ(ok.records.size(), 1u);
  EXPECT_EQ(ok.records[0].variation_seed, 3u);
}

TEST(Generate, ByteDeterministic) {
  GenerateOptions opt;
  opt.num_identities = 6;
  opt.samples_per_id = 2;
  opt.seed = 21;
  const auto a = temp_dir("synth_det_a"), b = temp_dir("synth_det_b");
  const auto ma = generate_dataset(opt, a);
  const auto mb = generate_dataset(opt, b);
  EXPECT_EQ(file_bytes(a / kManifestFile), file_bytes(b / kManifestFile));
  for (const auto& r : ma.records) EXPECT_EQ(file_bytes(a / r.path), file_bytes(b / r.path)) << r.path;
  opt.seed = 22;
  const auto c = temp_dir("synth_det_c");
  generate_dataset(opt, c);
  EXPECT_NE(file_bytes(a / ma.records[0].path), file_bytes(c / ma.records[0].path));
}

TEST(Generate, RejectsBadOptions) {
  const auto dir = temp_dir("synth_bad");
  GenerateOptions opt;
  opt.num_identities = 3;
  EXPECT_THROW(generate_dataset(opt, dir), DataError);
  opt = {};
  opt.samples_per_id = 0;
  EXPECT_THROW(generate_dataset(opt, dir), DataError);
  opt = {};
  opt.modalities = {Modality::kThermal};
  EXPECT_THROW(generate_dataset(opt, dir), DataError);
}

TEST(Generate, ModalitySubset) {
  GenerateOptions opt;
  opt.num_identities = 4;
  opt.samples_per_id = 1;
  opt.modalities = {Modality::kThermal, Modality::kVis};
  const auto m = generate_dataset(opt, temp_dir("synth_subset"));
  EXPECT_EQ(m.modalities(), (std::vector<Modality>{Modality::kVis, Modality::kThermal}));
  EXPECT_EQ(m.identities(Split::kTrain).size(), 2u);
}

// ---- pair sampling -------------------------------------------------------------------------

TEST_F(Dataset, PairBatchContract) {
  const ImageStore store(*manifest_, *dir_);
  const PairSampler sampler(store);
  EXPECT_EQ(sampler.num_identities(), 14u);
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const auto batch = sampler.sample(48, 0.5, rng);
    ASSERT_EQ(batch.size(), 48u);
    EXPECT_EQ(batch.source.shape(), (Shape{48, 3, 32, 32}));
    EXPECT_EQ(batch.target.shape(), (Shape{48, 3, 32, 32}));
    EXPECT_EQ(std::count(batch.labels.begin(), batch.labels.end(), 1), 24);
    for (std::size_t k = 0; k < 48; ++k) {
      const auto& s = manifest_->records[batch.source_records[k]];
      const auto& t = manifest_->records[batch.target_records[k]];
      EXPECT_EQ(s.split, Split::kTrain);
      EXPECT_EQ(t.split, Split::kTrain);
      EXPECT_EQ(s.modality, Modality::kVis);
      EXPECT_NE(t.modality, Modality::kVis);
      EXPECT_EQ(batch.labels[k] == 1, s.identity == t.identity);
    }
  }
  const auto odd = sampler.sample(7, 0.5, rng);
  EXPECT_EQ(std::count(odd.labels.begin(), odd.labels.end(), 1), 4);
  EXPECT_THROW(sampler.sample(8, 0.0, rng), DataError);
  EXPECT_THROW(sampler.sample(8, 1.0, rng), DataError);
  EXPECT_THROW(sampler.sample(0, 0.5, rng), DataError);
}

TEST_F(Dataset, BatchReplicatesChannels) {
  const ImageStore store(*manifest_, *dir_);
  const std::vector<std::size_t> rows{3, 100};
  const auto t = store.batch(rows);
  for (std::size_t n = 0; n < 2; ++n) {
    const auto& px = store.image(rows[n]).pixels;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t k = 0; k < 1024; ++k) ASSERT_EQ(t.data()[(n * 3 + c) * 1024 + k], px[k]);
    }
  }
}

TEST_F(Dataset, TargetModalitiesAreUniform) {
  const ImageStore store(*manifest_, *dir_);
  const PairSampler sampler(store);
  Rng rng(6);
  std::map<Modality, std::size_t> freq;
  std::size_t total = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto batch = sampler.sample(48, 0.5, rng);
    for (auto r : batch.target_records) ++freq[manifest_->records[r].modality];
    total += batch.size();
  }
  ASSERT_EQ(freq.size(), 4u);
  for (const auto& [m, n] : freq) {
    EXPECT_NEAR(static_cast<double>(n) / static_cast<double>(total), 0.25, 0.05) << modality_name(m);
  }
}

TEST_F(Dataset, SamplerDeterministicForSeed) {
  const ImageStore store(*manifest_, *dir_);
  const PairSampler sampler(store);
  Rng a(9), b(9);
  for (int i = 0; i < 5; ++i) {
    const auto x = sampler.sample(16, 0.5, a);
    const auto y = sampler.sample(16, 0.5, b);
    EXPECT_EQ(x.labels, y.labels);
    EXPECT_EQ(x.source_records, y.source_records);
    EXPECT_EQ(x.target_records, y.target_records);
  }
}

TEST_F(Dataset, SingleIdentityCannotFormImpostors) {
  DatasetManifest only;
  only.seed = manifest_->seed;
  for (const auto& r : manifest_->records) {
    if (r.split == Split::kTrain && r.identity == 0) only.records.push_back(r);
  }
  const ImageStore store(only, *dir_);
  const PairSampler sampler(store);
  Rng rng(1);
  EXPECT_THROW(sampler.sample(8, 0.5, rng), DataError);
}

TEST_F(Dataset, MissingTrainSplitIsRejected) {
  DatasetManifest dev_only;
  for (const auto& r : manifest_->records) {
    if (r.split != Split::kTrain) dev_only.records.push_back(r);
  }
  const ImageStore store(dev_only, *dir_);
  EXPECT_THROW(PairSampler{store}, DataError);
}

}  // namespace
}  // namespace ssmb
