#include "awm/cifar.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace awm {

const char* to_string(CifarVariant v) { return v == CifarVariant::c10 ? "cifar10" : "cifar100"; }

CifarVariant parse_cifar_variant(const std::string& text) {
  if (text == "cifar10" || text == "c10") return CifarVariant::c10;
  if (text == "cifar100" || text == "c100") return CifarVariant::c100;
  throw std::invalid_argument("unknown dataset '" + text + "' (expected cifar10 or cifar100)");
}

std::vector<Index> Dataset::class_counts() const {
  std::vector<Index> counts(static_cast<std::size_t>(num_classes()), 0);
  for (int l : labels) ++counts[static_cast<std::size_t>(l)];
  return counts;
}

std::string fnv1a64_hex(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

Dataset parse_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant, const std::string& source) {
  const auto rec = static_cast<std::size_t>(record_bytes(variant));
  if (bytes.empty()) throw FormatError(source + ": empty file");
  if (bytes.size() % rec != 0) {
    throw FormatError(source + ": truncated record at byte offset " + std::to_string(bytes.size() - bytes.size() % rec) +
                      " (size " + std::to_string(bytes.size()) + " is not a multiple of " + std::to_string(rec) + ")");
  }
  Dataset d;
  d.variant = variant;
  const std::size_t n = bytes.size() / rec;
  d.images.resize(n);
  d.labels.resize(n);
  d.ids.resize(n);
  if (variant == CifarVariant::c100) d.coarse_labels.resize(n);
  const int classes = d.num_classes();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* r = bytes.data() + i * rec;
    std::size_t pos = 0;
    if (variant == CifarVariant::c100) d.coarse_labels[i] = r[pos++];
    const int label = r[pos++];
    if (label >= classes) {
      throw FormatError(source + ": label " + std::to_string(label) + " out of range at byte offset " +
                        std::to_string(i * rec + pos - 1));
    }
    d.labels[i] = label;
    std::copy_n(r + pos, kImageBytes, d.images[i].begin());
    d.ids[i] = static_cast<std::int64_t>(i);
  }
  d.sources.push_back(source);
  d.checksums.push_back(fnv1a64_hex(bytes));
  return d;
}

Dataset parse_cifar(const std::filesystem::path& path, CifarVariant variant) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_cifar(bytes, variant, path.string());
}

std::vector<std::uint8_t> serialize_cifar(const Dataset& data) {
  const auto rec = static_cast<std::size_t>(record_bytes(data.variant));
  std::vector<std::uint8_t> out(rec * data.images.size());
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    std::uint8_t* r = out.data() + i * rec;
    std::size_t pos = 0;
    if (data.variant == CifarVariant::c100) r[pos++] = data.coarse_labels[i];
    r[pos++] = static_cast<std::uint8_t>(data.labels[i]);
    std::copy(data.images[i].begin(), data.images[i].end(), r + pos);
  }
  return out;
}

Dataset load_cifar_split(const std::filesystem::path& dir, CifarVariant variant, const std::string& split) {
  if (split != "train" && split != "test") throw std::invalid_argument("split must be 'train' or 'test'");
  std::vector<std::string> names;
  if (variant == CifarVariant::c10) {
    if (split == "train") {
      for (int i = 1; i <= 5; ++i) names.push_back("data_batch_" + std::to_string(i) + ".bin");
    } else {
      names.push_back("test_batch.bin");
    }
  } else {
    names.push_back(split + ".bin");
  }
  std::filesystem::path base = dir;
  const char* nested = variant == CifarVariant::c10 ? "cifar-10-batches-bin" : "cifar-100-binary";
  if (!std::filesystem::exists(base / names.front()) && std::filesystem::exists(base / nested / names.front())) {
    base /= nested;
  }
  Dataset all;
  all.variant = variant;
  all.split = split;
  for (const auto& name : names) {
    Dataset part = parse_cifar(base / name, variant);
    const auto offset = static_cast<std::int64_t>(all.images.size());
    all.images.insert(all.images.end(), part.images.begin(), part.images.end());
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
    all.coarse_labels.insert(all.coarse_labels.end(), part.coarse_labels.begin(), part.coarse_labels.end());
    for (auto id : part.ids) all.ids.push_back(offset + id);
    all.sources.push_back(part.sources.front());
    all.checksums.push_back(part.checksums.front());
  }
  return all;
}

Normalization compute_normalization(const Dataset& data) {
  if (data.images.empty()) throw std::invalid_argument("compute_normalization: empty dataset");
  Normalization norm;
  constexpr Index plane = kImageSide * kImageSide;
  const double count = static_cast<double>(data.images.size()) * plane;
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0;
    for (const Image& img : data.images)
      for (Index j = 0; j < plane; ++j) sum += img[static_cast<std::size_t>(c * plane + j)] / 255.0;
    const double mean = sum / count;
    double sq = 0.0;
    for (const Image& img : data.images)
      for (Index j = 0; j < plane; ++j) {
        const double v = img[static_cast<std::size_t>(c * plane + j)] / 255.0 - mean;
        sq += v * v;
      }
    const double sd = std::sqrt(sq / count);
    norm.mean[static_cast<std::size_t>(c)] = mean;
    // Round-off leaves a tiny residual on constant channels; treat it as no spread.
    norm.stddev[static_cast<std::size_t>(c)] = sd > 1e-8 ? sd : 1.0;
  }
  return norm;
}

void normalize_into(const Image& image, const Normalization& norm, double* dst) {
  constexpr Index plane = kImageSide * kImageSide;
  for (Index c = 0; c < 3; ++c) {
    const double m = norm.mean[static_cast<std::size_t>(c)], s = norm.stddev[static_cast<std::size_t>(c)];
    for (Index j = 0; j < plane; ++j) dst[c * plane + j] = (image[static_cast<std::size_t>(c * plane + j)] / 255.0 - m) / s;
  }
}

Tensor make_batch(const Dataset& data, std::span<const Index> rows, const Normalization& norm) {
  Tensor batch({static_cast<Index>(rows.size()), 3, kImageSide, kImageSide});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    normalize_into(data.images.at(static_cast<std::size_t>(rows[i])), norm, batch.data() + static_cast<Index>(i) * kImageBytes);
  }
  return batch;
}

Image crop_and_flip(const Image& image, int offset_y, int offset_x, bool flip) {
  constexpr int side = static_cast<int>(kImageSide), pad = 4;
  if (offset_y < 0 || offset_y > 2 * pad || offset_x < 0 || offset_x > 2 * pad) {
    throw std::out_of_range("crop offset outside [0, 8]");
  }
  Image out{};
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < side; ++y) {
      const int sy = y + offset_y - pad;
      for (int x = 0; x < side; ++x) {
        const int sx = (flip ? side - 1 - x : x) + offset_x - pad;
        const bool inside = sy >= 0 && sy < side && sx >= 0 && sx < side;
        out[static_cast<std::size_t>((c * side + y) * side + x)] =
            inside ? image[static_cast<std::size_t>((c * side + sy) * side + sx)] : std::uint8_t{0};
      }
    }
  }
  return out;
}

Image augment(const Image& image, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> offset(0, 8);
  const int oy = offset(rng);
  const int ox = offset(rng);
  const bool flip = std::bernoulli_distribution(0.5)(rng);
  return crop_and_flip(image, oy, ox, flip);
}

Dataset subset(const Dataset& data, int n_per_class, std::uint64_t seed) {
  if (n_per_class < 1) throw std::invalid_argument("subset: n_per_class must be positive");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < data.labels.size(); ++i) by_class[data.labels[i]].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  for (auto& [label, rows] : by_class) {
    if (static_cast<int>(rows.size()) < n_per_class) {
      throw std::invalid_argument("subset: class " + std::to_string(label) + " has " + std::to_string(rows.size()) +
                                  " images, fewer than " + std::to_string(n_per_class));
    }
    std::shuffle(rows.begin(), rows.end(), rng);
    chosen.insert(chosen.end(), rows.begin(), rows.begin() + n_per_class);
  }
  std::sort(chosen.begin(), chosen.end());
  Dataset out;
  out.variant = data.variant;
  out.split = data.split;
  out.sources = data.sources;
  out.checksums = data.checksums;
  for (std::size_t i : chosen) {
    out.images.push_back(data.images[i]);
    out.labels.push_back(data.labels[i]);
    if (!data.coarse_labels.empty()) out.coarse_labels.push_back(data.coarse_labels[i]);
    out.ids.push_back(data.ids[i]);
  }
  return out;
}

}  // namespace awm
