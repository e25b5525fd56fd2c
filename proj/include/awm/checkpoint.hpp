#pragma once

// Single-file binary container for a network and its training state.
//
// Layout (all integers little-endian, doubles as little-endian IEEE-754 bit patterns,
// strings as u32 length + bytes):
//   "AWMCKPT\0"  u32 version
//   network config: u8 kind, i32 depth, i32 classes, i64 base_channels, i64 growth,
//                   i64 reduction, u8 shortcut
//   u64 epoch   6 x f64 normalization (means then stddevs)
//   string shuffle_rng   string augment_rng
//   u32 n, n x (string key, string value)        metadata
//   u32 n, n x tensor                            network state
//   u32 n, n x tensor                            momentum buffers
// tensor: string name, u32 rank, rank x u64 dims, prod(dims) x f64

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "awm/cifar.hpp"
#include "awm/networks.hpp"
#include "awm/trainer.hpp"

namespace awm {

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  NetworkConfig network;
  std::uint64_t epoch = 0;
  Normalization normalization;
  std::string shuffle_rng;
  std::string augment_rng;
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, Tensor>> tensors;
  SgdState optimizer;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);
/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of a network (and, when given, the trainer's optimizer / RNG / epoch state).
Checkpoint capture_checkpoint(Network& net, const Normalization& norm, const Trainer* trainer = nullptr);
/// Rebuilds the network and copies every stored tensor; names and shapes must match exactly.
Network restore_network(const Checkpoint& ckpt);
void restore_trainer(Trainer& trainer, const Checkpoint& ckpt);

}  // namespace awm
