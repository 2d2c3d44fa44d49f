#include "dsatrack/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace dsa {

namespace {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get_le() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ValidationError("weights: truncated file");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_weights(const std::vector<NamedTensor>& tensors) {
  std::string out = "DSAW";
  put_le<std::uint32_t>(out, kWeightsVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, value] : tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw ValidationError("weights: name too long");
    if (value.rank() > std::numeric_limits<std::uint8_t>::max()) throw ValidationError("weights: rank too large");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(value.rank()));
    for (auto d : value.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : value.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

std::vector<NamedTensor> decode_weights(const std::string& bytes) {
  Reader r(bytes);
  if (r.get_bytes(4) != "DSAW") throw ValidationError("weights: bad magic");
  const auto version = r.get_le<std::uint32_t>();
  if (version != kWeightsVersion) throw ValidationError("weights: unsupported version " + std::to_string(version));
  const auto count = r.get_le<std::uint32_t>();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get_le<std::uint16_t>();
    std::string name = r.get_bytes(name_len);
    const auto ndim = r.get_le<std::uint8_t>();
    Shape shape(ndim);
    for (auto& d : shape) d = r.get_le<std::uint32_t>();
    Tensor t(shape);
    for (double& v : t.data()) v = static_cast<double>(std::bit_cast<float>(r.get_le<std::uint32_t>()));
    out.push_back({std::move(name), std::move(t)});
  }
  if (!r.done()) throw ValidationError("weights: trailing bytes");
  return out;
}

void write_weights(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_weights(tensors);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<NamedTensor> read_weights(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open weights file " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_weights(ss.str());
}

}  // namespace dsa
