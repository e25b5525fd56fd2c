#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "awm/tensor.hpp"

namespace awm {

enum class CifarVariant { c10, c100 };

const char* to_string(CifarVariant v);
CifarVariant parse_cifar_variant(const std::string& text);  // "cifar10" / "cifar100" (or "c10" / "c100")

/// Malformed or unreadable dataset / checkpoint / trace files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr Index kImageSide = 32;
inline constexpr Index kImageBytes = 3 * kImageSide * kImageSide;  // channel-planar R, G, B

using Image = std::array<std::uint8_t, kImageBytes>;

/// Per-channel statistics of pixels scaled to [0, 1].
struct Normalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  friend bool operator==(const Normalization&, const Normalization&) = default;
};

struct Dataset {
  CifarVariant variant = CifarVariant::c10;
  std::string split;
  std::vector<Image> images;
  std::vector<int> labels;                  // fine labels for CIFAR-100
  std::vector<std::uint8_t> coarse_labels;  // CIFAR-100 only
  std::vector<std::int64_t> ids;            // index in the source file order
  std::vector<std::string> sources;
  std::vector<std::string> checksums;       // FNV-1a 64 of each source file, hex

  Index size() const { return static_cast<Index>(images.size()); }
  int num_classes() const { return variant == CifarVariant::c10 ? 10 : 100; }
  std::vector<Index> class_counts() const;
};

inline constexpr Index record_bytes(CifarVariant v) { return v == CifarVariant::c10 ? 3073 : 3074; }

/// Parses CIFAR binary records. Throws FormatError naming the offending byte offset.
Dataset parse_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant, const std::string& source = "<memory>");
Dataset parse_cifar(const std::filesystem::path& path, CifarVariant variant);
/// Re-encodes records in the original binary layout.
std::vector<std::uint8_t> serialize_cifar(const Dataset& data);

/// Loads the standard file set of a split from a directory: data_batch_{1..5}.bin / test_batch.bin
/// for CIFAR-10, train.bin / test.bin for CIFAR-100. Files may sit in a cifar-*-batches-bin subfolder.
Dataset load_cifar_split(const std::filesystem::path& dir, CifarVariant variant, const std::string& split);

std::string fnv1a64_hex(std::span<const std::uint8_t> bytes);

/// Per-channel mean / standard deviation over a dataset.
Normalization compute_normalization(const Dataset& data);

/// Writes one normalized image into a 3 x 32 x 32 slot of dst.
void normalize_into(const Image& image, const Normalization& norm, double* dst);

/// B x 3 x 32 x 32 batch of the given dataset rows.
Tensor make_batch(const Dataset& data, std::span<const Index> rows, const Normalization& norm);

/// Zero-pads by 4, crops the 32 x 32 window at (offset_y, offset_x) in [0, 8], then optionally mirrors.
Image crop_and_flip(const Image& image, int offset_y, int offset_x, bool flip);
/// Random crop offsets and a fair-coin horizontal flip drawn from rng.
Image augment(const Image& image, std::mt19937_64& rng);

/// Class-balanced sample of n_per_class rows per class, kept in source order.
Dataset subset(const Dataset& data, int n_per_class, std::uint64_t seed);

}  // namespace awm
