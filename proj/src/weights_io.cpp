#include "tinyrlhf/weights_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "tinyrlhf/errors.hpp"

namespace tinyrlhf {

namespace {

constexpr char kMagic[8] = {'T', 'R', 'L', 'H', 'F', 'W', 'T', '1'};

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) out = (out << 8) | ((v >> (8 * i)) & 0xFF);
    return out;
  } else {
    return v;
  }
}

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw Error("cannot open '" + path + "' for writing");
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  template <typename U>
  void uint(U v) {
    v = to_little(v);
    bytes(&v, sizeof v);
  }
  void f64(double x) { uint(std::bit_cast<std::uint64_t>(x)); }
  void finish(const std::string& path) {
    out_.flush();
    if (!out_) throw Error("write to '" + path + "' failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw LoadError("cannot open weights file '" + path + "'");
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw LoadError("weights file '" + path_ + "' is truncated");
  }
  template <typename U>
  U uint() {
    U v = 0;
    bytes(&v, sizeof v);
    return to_little(v);
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace

void save_weights(const lm::ModelParams& params, const std::string& path) {
  Writer w(path);
  w.bytes(kMagic, sizeof kMagic);
  w.uint<std::uint64_t>(lm::shape_hash(params.config));
  w.uint<std::uint64_t>(params.version);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(params.tensors.size()));
  for (const lm::Tensor& t : params.tensors) {
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.uint<std::uint64_t>(d);
    for (double x : t.data) w.f64(x);
  }
  w.finish(path);
}

lm::ModelParams load_weights(const std::string& path, const lm::ModelConfig& config) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw LoadError("'" + path + "' is not a weights file");
  const auto hash = r.uint<std::uint64_t>();
  if (hash != lm::shape_hash(config)) {
    throw LoadError("weights in '" + path + "' were saved for a different model shape");
  }
  lm::ModelParams p;
  static_cast<lm::TensorSet&>(p) = lm::make_zero_tensors(config);
  p.config = config;
  p.version = r.uint<std::uint64_t>();
  const auto n = r.uint<std::uint32_t>();
  if (n != p.tensors.size()) throw LoadError("tensor count mismatch in '" + path + "'");
  for (lm::Tensor& t : p.tensors) {
    const auto len = r.uint<std::uint32_t>();
    if (len > 4096) throw LoadError("corrupt tensor name in '" + path + "'");
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    if (name != t.name) throw LoadError("expected tensor '" + t.name + "', found '" + name + "'");
    const auto rank = r.uint<std::uint32_t>();
    if (rank != t.shape.size()) throw LoadError("rank mismatch for tensor '" + name + "'");
    for (std::size_t d : t.shape) {
      if (r.uint<std::uint64_t>() != d) throw LoadError("shape mismatch for tensor '" + name + "'");
    }
    for (double& x : t.data) x = r.f64();
  }
  if (!r.at_end()) throw LoadError("trailing bytes in '" + path + "'");
  return p;
}

}  // namespace tinyrlhf
