#include "awm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace awm {

namespace {

constexpr char kMagic[8] = {'A', 'W', 'M', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  void u8(std::uint8_t v) { os_.put(static_cast<char>(v)); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensor(const std::string& name, const Tensor& t) {
    str(name);
    u32(static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) u64(static_cast<std::uint64_t>(d));
    for (double v : t.values()) f64(v);
  }

 private:
  void le(std::uint64_t v, int bytes) {
    char buf[8];
    for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os_.write(buf, bytes);
  }
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > (1u << 28)) fail("string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  std::pair<std::string, Tensor> tensor() {
    std::string name = str();
    const std::uint32_t rank = u32();
    if (rank == 0 || rank > 8) fail("tensor rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint64_t d = u64();
      if (d == 0 || d > (1ull << 32)) fail("tensor dimension");
      shape.push_back(static_cast<Index>(d));
    }
    if (element_count(shape) > (Index{1} << 31)) fail("tensor size");
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = f64();
    return {std::move(name), std::move(t)};
  }
  void read(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) fail("unexpected end of file");
    offset_ += n;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("checkpoint: invalid " + what + " near byte offset " + std::to_string(offset_));
  }

 private:
  std::uint64_t le(int bytes) {
    unsigned char buf[8];
    read(reinterpret_cast<char*>(buf), static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
  }
  std::istream& is_;
  std::size_t offset_ = 0;
};

}  // namespace

void write_checkpoint(std::ostream& os, const Checkpoint& c) {
  Writer w(os);
  os.write(kMagic, sizeof kMagic);
  w.u32(c.version);
  w.u8(static_cast<std::uint8_t>(c.network.kind));
  w.i32(c.network.depth);
  w.i32(c.network.num_classes);
  w.i64(c.network.base_channels);
  w.i64(c.network.growth_rate);
  w.i64(c.network.reduction);
  w.u8(static_cast<std::uint8_t>(c.network.shortcut));
  w.u64(c.epoch);
  for (double m : c.normalization.mean) w.f64(m);
  for (double s : c.normalization.stddev) w.f64(s);
  w.str(c.shuffle_rng);
  w.str(c.augment_rng);
  w.u32(static_cast<std::uint32_t>(c.metadata.size()));
  for (const auto& [k, v] : c.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) w.tensor(name, t);
  w.u32(static_cast<std::uint32_t>(c.optimizer.size()));
  for (const auto& [name, t] : c.optimizer) w.tensor(name, t);
  if (!os) throw FormatError("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& is) {
  Reader r(is);
  char magic[8];
  r.read(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) r.fail("magic header");
  Checkpoint c;
  c.version = r.u32();
  if (c.version != Checkpoint::kVersion) r.fail("format version " + std::to_string(c.version));
  const std::uint8_t kind = r.u8();
  if (kind > static_cast<std::uint8_t>(NetworkKind::densenet_plain)) r.fail("network kind");
  c.network.kind = static_cast<NetworkKind>(kind);
  c.network.depth = r.i32();
  c.network.num_classes = r.i32();
  c.network.base_channels = r.i64();
  c.network.growth_rate = r.i64();
  c.network.reduction = r.i64();
  const std::uint8_t shortcut = r.u8();
  if (shortcut > 1) r.fail("shortcut kind");
  c.network.shortcut = static_cast<ShortcutKind>(shortcut);
  c.epoch = r.u64();
  for (double& m : c.normalization.mean) m = r.f64();
  for (double& s : c.normalization.stddev) s = r.f64();
  c.shuffle_rng = r.str();
  c.augment_rng = r.str();
  for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) {
    std::string k = r.str();
    c.metadata[k] = r.str();
  }
  for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) c.tensors.push_back(r.tensor());
  for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) c.optimizer.insert(r.tensor());
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write " + tmp.string());
    write_checkpoint(os, ckpt);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

Checkpoint capture_checkpoint(Network& net, const Normalization& norm, const Trainer* trainer) {
  Checkpoint c;
  c.network = net.config();
  c.normalization = norm;
  for (const auto& e : net.state()) c.tensors.emplace_back(e.name, *e.tensor);
  if (trainer) {
    c.epoch = static_cast<std::uint64_t>(trainer->epoch());
    c.optimizer = trainer->optimizer_state();
    c.shuffle_rng = trainer->shuffle_rng_state();
    c.augment_rng = trainer->augment_rng_state();
  }
  return c;
}

Network restore_network(const Checkpoint& ckpt) {
  Network net = Network::build(ckpt.network, 0);
  auto state = net.state();
  if (state.size() != ckpt.tensors.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, network expects " +
                      std::to_string(state.size()));
  }
  for (std::size_t i = 0; i < state.size(); ++i) {
    const auto& [name, t] = ckpt.tensors[i];
    if (name != state[i].name || t.shape() != state[i].tensor->shape()) {
      throw FormatError("checkpoint tensor '" + name + "' " + to_string(t.shape()) + " does not match '" +
                        state[i].name + "' " + to_string(state[i].tensor->shape()));
    }
    *state[i].tensor = t;
  }
  return net;
}

void restore_trainer(Trainer& trainer, const Checkpoint& ckpt) {
  trainer.restore(static_cast<int>(ckpt.epoch), ckpt.optimizer, ckpt.shuffle_rng, ckpt.augment_rng);
}

}  // namespace awm
