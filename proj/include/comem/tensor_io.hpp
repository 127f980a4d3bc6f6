#ifndef COMEM_TENSOR_IO_HPP
#define COMEM_TENSOR_IO_HPP

#include "comem/types.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace comem {

struct NamedTensor {
  std::string name;
  Matrix value;
};

// On-disk tensor record: u32 little-endian header length, JSON header
// {"name","rows","cols","dtype":"f32"}, then rows*cols little-endian
// float32 values in row-major order. Values are double in memory, so a
// round trip is exact to ~1e-6 relative error.
void write_tensor(std::ostream& os, const NamedTensor& t);
NamedTensor read_tensor(std::istream& is);

// Container: magic "CMTN", u32 version, u32 count, then records.
void write_tensor_container(std::ostream& os, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensor_container(std::istream& is);

void save_tensor_container(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensor_container(const std::string& path);

// Length-prefixed JSON blob, used by file formats that pair a manifest
// with a tensor container.
void write_json_block(std::ostream& os, const std::string& json);
std::string read_json_block(std::istream& is);

}  // namespace comem

#endif  // COMEM_TENSOR_IO_HPP
