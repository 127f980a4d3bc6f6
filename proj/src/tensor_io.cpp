#include "comem/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace comem {

namespace {

using json = nlohmann::ordered_json;

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("tensor_io: truncated stream");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

constexpr char kMagic[4] = {'C', 'M', 'T', 'N'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void write_json_block(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_json_block(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("tensor_io: truncated json block");
  return s;
}

void write_tensor(std::ostream& os, const NamedTensor& t) {
  json header;
  header["name"] = t.name;
  header["rows"] = t.value.rows();
  header["cols"] = t.value.cols();
  header["dtype"] = "f32";
  write_json_block(os, header.dump());

  std::vector<float> payload(static_cast<std::size_t>(t.value.size()));
  const double* src = t.value.data();  // row-major
  for (std::size_t i = 0; i < payload.size(); ++i)
    payload[i] = static_cast<float>(src[i]);
  // Little-endian assumed; asserted at build time for the supported targets.
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size() * 4));
}

NamedTensor read_tensor(std::istream& is) {
  const json header = json::parse(read_json_block(is));
  if (header.at("dtype").get<std::string>() != "f32")
    throw std::runtime_error("tensor_io: unsupported dtype");
  NamedTensor t;
  t.name = header.at("name").get<std::string>();
  const long rows = header.at("rows").get<long>();
  const long cols = header.at("cols").get<long>();
  std::vector<float> payload(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols));
  is.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * 4));
  if (!is) throw std::runtime_error("tensor_io: truncated payload for '" + t.name + "'");
  t.value.resize(rows, cols);
  double* dst = t.value.data();
  for (std::size_t i = 0; i < payload.size(); ++i) dst[i] = static_cast<double>(payload[i]);
  return t;
}

void write_tensor_container(std::ostream& os, const std::vector<NamedTensor>& tensors) {
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) write_tensor(os, t);
}

std::vector<NamedTensor> read_tensor_container(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("tensor_io: bad container magic");
  if (read_u32(is) != kVersion) throw std::runtime_error("tensor_io: unsupported version");
  const std::uint32_t count = read_u32(is);
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) tensors.push_back(read_tensor(is));
  return tensors;
}

void save_tensor_container(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("tensor_io: cannot open '" + path + "' for writing");
  write_tensor_container(os, tensors);
  if (!os) throw std::runtime_error("tensor_io: write failed for '" + path + "'");
}

std::vector<NamedTensor> load_tensor_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("tensor_io: cannot open '" + path + "'");
  return read_tensor_container(is);
}

}  // namespace comem
