// SPDX-License-Identifier: Apache-2.0
//
// Procedural multi-modality identity benchmark.
//
// Each identity is a 12-parameter face-like drawing rendered at 32×32 in the
// visible (source) modality; four deterministic transforms derive the target
// modalities. Images are written as binary PGM and listed in a CSV manifest.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssmb/rng.hpp"
#include "ssmb/tensor.hpp"

namespace ssmb {

enum class Modality { kVis, kNir, kThermal, kSketch, kLowres };

inline constexpr std::array<Modality, 5> kAllModalities{Modality::kVis, Modality::kNir, Modality::kThermal,
                                                        Modality::kSketch, Modality::kLowres};

std::string_view modality_name(Modality modality);
Modality parse_modality(std::string_view text);
std::vector<Modality> parse_modality_list(std::string_view csv);

enum class Split { kTrain, kDevEnroll, kDevProbe };

std::string_view split_name(Split split);
Split parse_split(std::string_view text);

class DataError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::size_t kImageSize = 32;

struct Image {
  std::size_t height = kImageSize;
  std::size_t width = kImageSize;
  std::vector<float> pixels;  // row-major, values in [0, 1]

  static Image filled(float value, std::size_t height = kImageSize, std::size_t width = kImageSize);
  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  bool operator==(const Image&) const = default;
};

struct IdentityParams {
  static constexpr std::size_t kCount = 12;

  int id = 0;
  std::array<double, kCount> values{};  // each in [0, 1]

  static IdentityParams derive(std::uint64_t seed, int id);
};

// Anti-aliased raster; the variation seed jitters translation (≤ 2 px) and
// intensity (± 0.1).
Image render_identity(const IdentityParams& params, std::uint64_t variation_seed);

Image apply_modality(const Image& image, Modality modality);

std::vector<std::uint8_t> encode_pgm(const Image& image);
Image decode_pgm(const std::vector<std::uint8_t>& bytes);
void write_pgm(const std::filesystem::path& path, const Image& image);
Image read_pgm(const std::filesystem::path& path);

struct SampleRecord {
  std::string path;  // relative to the dataset directory
  int identity = 0;
  Modality modality = Modality::kVis;
  Split split = Split::kTrain;
  std::uint64_t variation_seed = 0;

  bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::vector<SampleRecord> records;

  std::vector<Modality> modalities() const;
  std::vector<int> identities(Split split) const;
  std::size_t count(Split split) const;
  std::size_t count(Split split, Modality modality) const;

  std::string serialize() const;
  static DatasetManifest parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);

  bool operator==(const DatasetManifest&) const = default;
};

inline constexpr const char* kManifestFile = "manifest.csv";

struct GenerateOptions {
  std::uint64_t seed = 7;
  std::size_t num_identities = 20;
  std::size_t samples_per_id = 5;  // per identity per modality
  std::vector<Modality> modalities{kAllModalities.begin(), kAllModalities.end()};
};

// Train identities: floor(0.7·K). Dev identities get VIS enroll samples and
// probe samples in every modality.
DatasetManifest generate_dataset(const GenerateOptions& options, const std::filesystem::path& out_dir);

// Manifest plus every referenced image decoded once.
class ImageStore {
 public:
  ImageStore(DatasetManifest manifest, const std::filesystem::path& root);
  static ImageStore open(const std::filesystem::path& root);

  const DatasetManifest& manifest() const { return manifest_; }
  const Image& image(std::size_t record) const { return images_.at(record); }
  // N×3×H×W batch from the listed records, channels replicated.
  Tensor<float> batch(std::span<const std::size_t> records) const;

 private:
  DatasetManifest manifest_;
  std::vector<Image> images_;
};

struct PairBatch {
  Tensor<float> source;  // N×3×H×W, source modality
  Tensor<float> target;  // N×3×H×W, any non-source modality
  std::vector<int> labels;  // 1 = same identity
  // Manifest indices behind each pair, for auditing only; training never reads them.
  std::vector<std::size_t> source_records;
  std::vector<std::size_t> target_records;

  std::size_t size() const { return labels.size(); }
};

class PairSampler {
 public:
  explicit PairSampler(const ImageStore& store);

  std::size_t num_identities() const { return identities_.size(); }
  // round(batch_size · genuine_fraction) genuine pairs, the rest impostors, in shuffled order.
  PairBatch sample(std::size_t batch_size, double genuine_fraction, Rng& rng) const;

 private:
  const ImageStore& store_;
  std::vector<int> identities_;
  std::vector<Modality> targets_;
  std::vector<std::vector<std::size_t>> source_pool_;                // per identity
  std::vector<std::vector<std::vector<std::size_t>>> target_pool_;   // per identity, per target modality
};

}  // namespace ssmb
