// SPDX-License-Identifier: Apache-2.0

#include "ssmb/synthdata.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace ssmb {

std::string_view modality_name(Modality modality) {
  switch (modality) {
    case Modality::kVis: return "vis";
    case Modality::kNir: return "nir";
    case Modality::kThermal: return "thermal";
    case Modality::kSketch: return "sketch";
    case Modality::kLowres: return "lowres";
  }
  return "?";
}

Modality parse_modality(std::string_view text) {
  for (auto m : kAllModalities) {
    if (modality_name(m) == text) return m;
  }
  throw DataError("unknown modality '" + std::string(text) + "'");
}

std::vector<Modality> parse_modality_list(std::string_view csv) {
  std::vector<Modality> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const auto end = std::min(csv.find(',', start), csv.size());
    const auto item = csv.substr(start, end - start);
    if (!item.empty()) {
      const auto m = parse_modality(item);
      if (std::find(out.begin(), out.end(), m) != out.end()) throw DataError("duplicate modality " + std::string(item));
      out.push_back(m);
    }
    start = end + 1;
  }
  if (out.empty()) throw DataError("empty modality list");
  return out;
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kDevEnroll: return "dev-enroll";
    case Split::kDevProbe: return "dev-probe";
  }
  return "?";
}

Split parse_split(std::string_view text) {
  for (auto s : {Split::kTrain, Split::kDevEnroll, Split::kDevProbe}) {
    if (split_name(s) == text) return s;
  }
  throw DataError("unknown split '" + std::string(text) + "'");
}

Image Image::filled(float value, std::size_t height, std::size_t width) {
  return {height, width, std::vector<float>(height * width, value)};
}

IdentityParams IdentityParams::derive(std::uint64_t seed, int id) {
  Rng rng(mix_seed({seed, static_cast<std::uint64_t>(id), 0x1D3417ULL}));
  IdentityParams p;
  p.id = id;
  for (auto& v : p.values) v = rng.uniform();
  return p;
}

// ---- rendering ---------------------------------------------------------------

namespace {

struct FaceGeometry {
  double cx, cy, a, b;
  double eye_dx, eye_dy, eye_r_left, eye_r_right;
  double mouth_sag, mouth_half_width;
  double skin, nose_length;
};

FaceGeometry geometry(const IdentityParams& p, double shift_x, double shift_y, double intensity_shift) {
  const auto& v = p.values;
  FaceGeometry g;
  g.a = 8.5 + 4.0 * v[0];
  g.b = 10.5 + 4.0 * v[1];
  g.cx = 16.0 + 3.0 * (v[2] - 0.5) + shift_x;
  g.cy = 16.0 + 3.0 * (v[3] - 0.5) + shift_y;
  g.eye_dx = 3.0 + 3.0 * v[4];
  g.eye_dy = 2.0 + 3.0 * v[5];
  g.eye_r_left = 0.9 + 1.6 * v[6];
  g.eye_r_right = 0.9 + 1.6 * v[7];
  g.mouth_sag = 2.0 * (2.0 * v[8] - 1.0);
  g.mouth_half_width = 2.5 + 3.5 * v[9];
  g.skin = 0.45 + 0.4 * v[10] + intensity_shift;
  g.nose_length = 1.5 + 3.5 * v[11];
  return g;
}

constexpr double kBackground = 0.12;

double shade(const FaceGeometry& g, double x, double y) {
  const double ux = (x - g.cx) / g.a, uy = (y - g.cy) / g.b;
  if (ux * ux + uy * uy > 1.0) return kBackground;
  auto in_disk = [&](double ex, double r) {
    const double dx = x - ex, dy = y - (g.cy - g.eye_dy);
    return dx * dx + dy * dy <= r * r;
  };
  if (in_disk(g.cx - g.eye_dx, g.eye_r_left) || in_disk(g.cx + g.eye_dx, g.eye_r_right)) return 0.2 * g.skin;
  const double mx = x - g.cx;
  if (std::abs(mx) <= g.mouth_half_width) {
    const double t = mx / g.mouth_half_width;
    const double curve = g.cy + 5.5 + g.mouth_sag * (1.0 - t * t);
    if (std::abs(y - curve) <= 0.8) return 0.3 * g.skin;
  }
  if (std::abs(mx) <= 0.6 && y >= g.cy - 0.5 && y <= g.cy + g.nose_length) return 0.7 * g.skin;
  return g.skin;
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

float clamped(const Image& img, std::ptrdiff_t y, std::ptrdiff_t x) {
  y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(img.height) - 1);
  x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(img.width) - 1);
  return img.pixels[static_cast<std::size_t>(y) * img.width + static_cast<std::size_t>(x)];
}

Image box_blur3(const Image& img) {
  Image out = img;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      float acc = 0.0f;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          acc += clamped(img, static_cast<std::ptrdiff_t>(y) + dy, static_cast<std::ptrdiff_t>(x) + dx);
        }
      }
      out.pixels[y * img.width + x] = acc / 9.0f;
    }
  }
  return out;
}

Image normalize_by_range(Image img) {
  const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  const float min = *lo, range = *hi - *lo;
  for (auto& v : img.pixels) v = range > 0.0f ? (v - min) / range : 0.0f;
  return img;
}

}  // namespace

Image render_identity(const IdentityParams& params, std::uint64_t variation_seed) {
  Rng rng(mix_seed({variation_seed, 0x5EED5ULL}));
  const double shift_x = rng.uniform(-2.0, 2.0);
  const double shift_y = rng.uniform(-2.0, 2.0);
  const double intensity = rng.uniform(-0.1, 0.1);
  const auto g = geometry(params, shift_x, shift_y, intensity);

  constexpr int kSuper = 4;
  Image img = Image::filled(0.0f);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          acc += shade(g, static_cast<double>(x) + (sx + 0.5) / kSuper, static_cast<double>(y) + (sy + 0.5) / kSuper);
        }
      }
      img.pixels[y * img.width + x] = clamp01(acc / (kSuper * kSuper));
    }
  }
  return img;
}

Image apply_modality(const Image& image, Modality modality) {
  switch (modality) {
    case Modality::kVis:
      return image;
    case Modality::kNir: {
      Image out = image;
      for (auto& v : out.pixels) v = std::sqrt(std::max(v, 0.0f));
      return normalize_by_range(std::move(out));
    }
    case Modality::kThermal: {
      Image out = box_blur3(box_blur3(image));
      for (auto& v : out.pixels) v = std::clamp(1.0f - v, 0.0f, 1.0f);
      return out;
    }
    case Modality::kSketch: {
      Image out = image;
      for (std::size_t y = 0; y < image.height; ++y) {
        for (std::size_t x = 0; x < image.width; ++x) {
          const auto py = static_cast<std::ptrdiff_t>(y), px = static_cast<std::ptrdiff_t>(x);
          auto p = [&](int dy, int dx) { return clamped(image, py + dy, px + dx); };
          const float gx = (p(-1, 1) + 2 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2 * p(0, -1) + p(1, -1));
          const float gy = (p(1, -1) + 2 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1));
          out.pixels[y * image.width + x] = std::sqrt(gx * gx + gy * gy);
        }
      }
      const float peak = *std::max_element(out.pixels.begin(), out.pixels.end());
      for (auto& v : out.pixels) v = peak > 0.0f ? v / peak : 0.0f;
      return out;
    }
    case Modality::kLowres: {
      constexpr std::size_t kFactor = 4;
      if (image.height % kFactor || image.width % kFactor) throw DataError("lowres needs extents divisible by 4");
      Image out = image;
      for (std::size_t by = 0; by < image.height; by += kFactor) {
        for (std::size_t bx = 0; bx < image.width; bx += kFactor) {
          float acc = 0.0f;
          for (std::size_t y = by; y < by + kFactor; ++y) {
            for (std::size_t x = bx; x < bx + kFactor; ++x) acc += image.pixels[y * image.width + x];
          }
          const float avg = acc / static_cast<float>(kFactor * kFactor);
          for (std::size_t y = by; y < by + kFactor; ++y) {
            for (std::size_t x = bx; x < bx + kFactor; ++x) out.pixels[y * image.width + x] = avg;
          }
        }
      }
      return out;
    }
  }
  throw DataError("unknown modality");
}

// ---- PGM ---------------------------------------------------------------------

std::vector<std::uint8_t> encode_pgm(const Image& image) {
  const std::string header = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (float v : image.pixels) {
    bytes.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  return bytes;
}

Image decode_pgm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    return tok;
  };
  auto number = [&](const char* what) {
    const auto tok = token();
    std::size_t value = 0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) throw DataError(std::string("bad PGM ") + what);
    return value;
  };
  if (token() != "P5") throw DataError("not a binary PGM (P5) file");
  Image img;
  img.width = number("width");
  img.height = number("height");
  if (number("maxval") != 255) throw DataError("PGM maxval must be 255");
  ++pos;  // single whitespace after maxval
  if (bytes.size() < pos || bytes.size() - pos != img.width * img.height) throw DataError("PGM pixel data size mismatch");
  img.pixels.resize(img.width * img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
  return img;
}

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("cannot write " + path.string());
}

}  // namespace

void write_pgm(const std::filesystem::path& path, const Image& image) {
  const auto bytes = encode_pgm(image);
  write_bytes(path, {reinterpret_cast<const char*>(bytes.data()), bytes.size()});
}

Image read_pgm(const std::filesystem::path& path) { return decode_pgm(read_bytes(path)); }

// ---- manifest ----------------------------------------------------------------

std::vector<Modality> DatasetManifest::modalities() const {
  std::vector<Modality> out;
  for (auto m : kAllModalities) {
    if (std::any_of(records.begin(), records.end(), [m](const auto& r) { return r.modality == m; })) out.push_back(m);
  }
  return out;
}

std::vector<int> DatasetManifest::identities(Split split) const {
  std::vector<int> ids;
  for (const auto& r : records) {
    if (r.split == split) ids.push_back(r.identity);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::size_t DatasetManifest::count(Split split) const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [&](const auto& r) { return r.split == split; }));
}

std::size_t DatasetManifest::count(Split split, Modality modality) const {
  return static_cast<std::size_t>(std::count_if(
      records.begin(), records.end(), [&](const auto& r) { return r.split == split && r.modality == modality; }));
}

std::string DatasetManifest::serialize() const {
  std::ostringstream os;
  os << "#ssmb-manifest-v1 seed=" << seed << '\n';
  for (const auto& r : records) {
    os << r.path << ',' << r.identity << ',' << modality_name(r.modality) << ',' << split_name(r.split) << ','
       << r.variation_seed << '\n';
  }
  return os.str();
}

DatasetManifest DatasetManifest::parse(std::string_view text) {
  DatasetManifest manifest;
  std::size_t line_no = 0;
  std::size_t start = 0;
  constexpr std::string_view kHeader = "#ssmb-manifest-v1 seed=";
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    auto fail = [&](const std::string& why) {
      throw DataError("manifest line " + std::to_string(line_no) + ": " + why);
    };
    if (line_no == 1) {
      if (line.substr(0, kHeader.size()) != kHeader) fail("missing #ssmb-manifest-v1 header");
      const auto digits = line.substr(kHeader.size());
      const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), manifest.seed);
      if (ec != std::errc() || ptr != digits.data() + digits.size()) fail("bad seed");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string_view> fields;
    std::size_t f = 0;
    while (true) {
      const auto comma = line.find(',', f);
      fields.push_back(line.substr(f, comma == std::string_view::npos ? std::string_view::npos : comma - f));
      if (comma == std::string_view::npos) break;
      f = comma + 1;
    }
    if (fields.size() != 5) fail("expected 5 fields");
    SampleRecord r;
    r.path = std::string(fields[0]);
    if (r.path.empty()) fail("empty path");
    const auto [p1, e1] = std::from_chars(fields[1].data(), fields[1].data() + fields[1].size(), r.identity);
    if (e1 != std::errc() || p1 != fields[1].data() + fields[1].size()) fail("bad identity");
    try {
      r.modality = parse_modality(fields[2]);
      r.split = parse_split(fields[3]);
    } catch (const DataError& e) {
      fail(e.what());
    }
    const auto [p4, e4] = std::from_chars(fields[4].data(), fields[4].data() + fields[4].size(), r.variation_seed);
    if (e4 != std::errc() || p4 != fields[4].data() + fields[4].size()) fail("bad variation seed");
    manifest.records.push_back(std::move(r));
  }
  if (line_no == 0) throw DataError("empty manifest");
  return manifest;
}

void DatasetManifest::save(const std::filesystem::path& path) const { write_bytes(path, serialize()); }

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return parse({reinterpret_cast<const char*>(bytes.data()), bytes.size()});
}

// ---- generation ----------------------------------------------------------------

DatasetManifest generate_dataset(const GenerateOptions& options, const std::filesystem::path& out_dir) {
  if (options.num_identities < 4) throw DataError("need at least 4 identities, got " + std::to_string(options.num_identities));
  if (options.samples_per_id == 0) throw DataError("samples per identity must be positive");
  if (std::find(options.modalities.begin(), options.modalities.end(), Modality::kVis) == options.modalities.end()) {
    throw DataError("the vis source modality is required");
  }
  std::vector<Modality> modalities;
  for (auto m : kAllModalities) {
    if (std::find(options.modalities.begin(), options.modalities.end(), m) != options.modalities.end()) modalities.push_back(m);
  }

  const std::size_t num_train = options.num_identities * 7 / 10;
  DatasetManifest manifest;
  manifest.seed = options.seed;

  auto add = [&](int id, Modality m, Split split, std::size_t k) {
    SampleRecord r;
    r.identity = id;
    r.modality = m;
    r.split = split;
    r.variation_seed = mix_seed({options.seed, static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(m),
                                 static_cast<std::uint64_t>(split), k});
    char name[96];
    std::snprintf(name, sizeof(name), "images/%s/id%04d_%s_%02zu.pgm", std::string(split_name(split)).c_str(), id,
                  std::string(modality_name(m)).c_str(), k);
    r.path = name;
    manifest.records.push_back(std::move(r));
  };

  for (std::size_t i = 0; i < options.num_identities; ++i) {
    const int id = static_cast<int>(i);
    if (i < num_train) {
      for (auto m : modalities) {
        for (std::size_t k = 0; k < options.samples_per_id; ++k) add(id, m, Split::kTrain, k);
      }
    } else {
      for (std::size_t k = 0; k < options.samples_per_id; ++k) add(id, Modality::kVis, Split::kDevEnroll, k);
      for (auto m : modalities) {
        for (std::size_t k = 0; k < options.samples_per_id; ++k) add(id, m, Split::kDevProbe, k);
      }
    }
  }

  std::filesystem::create_directories(out_dir);
  for (const auto& r : manifest.records) {
    const auto params = IdentityParams::derive(options.seed, r.identity);
    write_pgm(out_dir / r.path, apply_modality(render_identity(params, r.variation_seed), r.modality));
  }
  manifest.save(out_dir / kManifestFile);
  return manifest;
}

// ---- image store and pair sampling ------------------------------------------------

ImageStore::ImageStore(DatasetManifest manifest, const std::filesystem::path& root) : manifest_(std::move(manifest)) {
  images_.reserve(manifest_.records.size());
  for (const auto& r : manifest_.records) {
    auto img = read_pgm(root / r.path);
    if (img.height != kImageSize || img.width != kImageSize) throw DataError(r.path + " is not 32×32");
    images_.push_back(std::move(img));
  }
}

ImageStore ImageStore::open(const std::filesystem::path& root) {
  return ImageStore(DatasetManifest::load(root / kManifestFile), root);
}

Tensor<float> ImageStore::batch(std::span<const std::size_t> records) const {
  const std::size_t plane = kImageSize * kImageSize;
  std::vector<float> values(records.size() * 3 * plane);
  for (std::size_t n = 0; n < records.size(); ++n) {
    const auto& px = image(records[n]).pixels;
    for (std::size_t c = 0; c < 3; ++c) std::copy(px.begin(), px.end(), values.begin() + (n * 3 + c) * plane);
  }
  return Tensor<float>::from({records.size(), 3, kImageSize, kImageSize}, std::move(values));
}

PairSampler::PairSampler(const ImageStore& store) : store_(store) {
  const auto& manifest = store.manifest();
  identities_ = manifest.identities(Split::kTrain);
  if (identities_.empty()) throw DataError("manifest has no train split");
  for (auto m : manifest.modalities()) {
    if (m != Modality::kVis) targets_.push_back(m);
  }
  if (targets_.empty()) throw DataError("train split has no target modality");
  source_pool_.resize(identities_.size());
  target_pool_.assign(identities_.size(), std::vector<std::vector<std::size_t>>(targets_.size()));
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (r.split != Split::kTrain) continue;
    const auto slot = static_cast<std::size_t>(std::lower_bound(identities_.begin(), identities_.end(), r.identity) -
                                               identities_.begin());
    if (r.modality == Modality::kVis) {
      source_pool_[slot].push_back(i);
    } else {
      const auto t = static_cast<std::size_t>(std::find(targets_.begin(), targets_.end(), r.modality) - targets_.begin());
      target_pool_[slot][t].push_back(i);
    }
  }
  for (std::size_t s = 0; s < identities_.size(); ++s) {
    if (source_pool_[s].empty()) throw DataError("train identity " + std::to_string(identities_[s]) + " has no vis sample");
    for (std::size_t t = 0; t < targets_.size(); ++t) {
      if (target_pool_[s][t].empty()) {
        throw DataError("train identity " + std::to_string(identities_[s]) + " lacks " +
                        std::string(modality_name(targets_[t])) + " samples");
      }
    }
  }
}

PairBatch PairSampler::sample(std::size_t batch_size, double genuine_fraction, Rng& rng) const {
  if (batch_size == 0) throw DataError("batch size must be positive");
  if (!(genuine_fraction > 0.0 && genuine_fraction < 1.0)) throw DataError("genuine fraction must lie in (0, 1)");
  const auto genuine = static_cast<std::size_t>(std::llround(static_cast<double>(batch_size) * genuine_fraction));
  if (genuine < batch_size && identities_.size() < 2) {
    throw DataError("impostor pairs need at least two train identities");
  }
  PairBatch batch;
  batch.labels.assign(batch_size, 0);
  std::fill_n(batch.labels.begin(), genuine, 1);
  rng.shuffle(batch.labels);

  const std::size_t n = identities_.size();
  for (std::size_t k = 0; k < batch_size; ++k) {
    const auto src_id = static_cast<std::size_t>(rng.below(n));
    const auto& sources = source_pool_[src_id];
    batch.source_records.push_back(sources[rng.below(sources.size())]);
    const auto modality = static_cast<std::size_t>(rng.below(targets_.size()));
    std::size_t tgt_id = src_id;
    if (batch.labels[k] == 0) {
      tgt_id = static_cast<std::size_t>(rng.below(n - 1));
      if (tgt_id >= src_id) ++tgt_id;
    }
    const auto& targets = target_pool_[tgt_id][modality];
    batch.target_records.push_back(targets[rng.below(targets.size())]);
  }
  batch.source = store_.batch(batch.source_records);
  batch.target = store_.batch(batch.target_records);
  return batch;
}

}  // namespace ssmb
