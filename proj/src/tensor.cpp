#include "taintradar/tensor.hpp"

#include <fstream>
#include <iterator>
#include <sstream>

#include "binary_io.hpp"

namespace taintradar {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace detail

std::vector<char> encode_rt1(const Tensor<float>& tensor) {
  detail::ByteWriter w;
  w.str("RT1\n");
  w.u32(static_cast<std::uint32_t>(tensor.rank()));
  for (Index d : tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.bytes(tensor.data(), static_cast<std::size_t>(tensor.size()) * sizeof(float));
  return std::move(w.buffer());
}

Tensor<float> decode_rt1(const std::vector<char>& bytes) {
  detail::ByteReader r(bytes.data(), bytes.size());
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "RT1\n") throw FormatError("bad RT1 magic");
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) throw FormatError("unsupported RT1 rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = r.u32();
    if (d == 0) throw FormatError("RT1 dimension of size zero");
  }
  const Index n = shape_size(shape);
  if (r.remaining() != static_cast<std::size_t>(n) * sizeof(float)) {
    throw FormatError("RT1 payload size mismatch for shape " + shape_string(shape));
  }
  Tensor<float> t(shape);
  r.bytes(t.data(), static_cast<std::size_t>(n) * sizeof(float));
  return t;
}

void write_rt1(const std::filesystem::path& path, const Tensor<float>& tensor) {
  detail::write_file(path, encode_rt1(tensor));
}

Tensor<float> read_rt1(const std::filesystem::path& path) {
  return decode_rt1(detail::read_file(path));
}

}  // namespace taintradar
