#include "iir/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "iir/error.hpp"

namespace iir {

namespace {

constexpr char kMagic[4] = {'I', 'I', 'R', 'K'};

template <typename T>
void put(std::vector<char>& out, T value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<char>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("archive: truncated record");
  }
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<char> encode_archive(const NamedTensors& records) {
  std::vector<char> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kArchiveVersion);
  for (const auto& [name, t] : records) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    for (Real v : t.data()) put<float>(out, static_cast<float>(v));
  }
  return out;
}

NamedTensors decode_archive(const std::vector<char>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError("archive: missing IIRK magic");
  }
  Reader in(bytes);
  in.str(4);
  const auto version = in.get<std::uint32_t>();
  if (version != kArchiveVersion) {
    throw IoError("archive: unsupported version " + std::to_string(version));
  }
  NamedTensors records;
  while (!in.done()) {
    const auto name = in.str(in.get<std::uint32_t>());
    const auto rank = in.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(in.get<std::uint64_t>()));
    std::vector<Real> values(static_cast<std::size_t>(numel(shape)));
    for (auto& v : values) v = static_cast<Real>(in.get<float>());
    records.emplace_back(name, Tensor::from(shape, std::move(values)));
  }
  return records;
}

void save_archive(const std::filesystem::path& path, const NamedTensors& records) {
  const auto bytes = encode_archive(records);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("archive: cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("archive: write failed for " + path.string());
}

NamedTensors load_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("archive: cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

}  // namespace iir
