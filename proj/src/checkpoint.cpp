#include "sala/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "sala/errors.hpp"

namespace sala {
namespace {

template <class U>
void put_le(std::ostream& out, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(std::istream& in, const char* what) {
  unsigned char buf[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) {
    throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, std::span<const NamedTensor> tensors) {
  out.write(kCheckpointMagic, 6);
  put_le<std::uint64_t>(out, tensors.size());
  for (const auto& nt : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(nt.name.size()));
    out.write(nt.name.data(), std::streamsize(nt.name.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(nt.tensor.rank()));
    for (auto e : nt.tensor.shape()) put_le<std::uint64_t>(out, e);
    for (float v : nt.tensor.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw FormatError("checkpoint write failed");
}

void write_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, tensors);
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  char magic[6];
  if (!in.read(magic, 6) || std::memcmp(magic, kCheckpointMagic, 6) != 0) {
    throw FormatError("not a SALAW1 checkpoint");
  }
  const auto count = get_le<std::uint64_t>(in, "tensor count");
  std::vector<NamedTensor> out;
  for (std::uint64_t t = 0; t < count; ++t) {
    NamedTensor nt;
    const auto name_len = get_le<std::uint32_t>(in, "name length");
    nt.name.resize(name_len);
    if (!in.read(nt.name.data(), name_len)) throw FormatError("checkpoint truncated in tensor name");
    const auto rank = get_le<std::uint32_t>(in, "rank");
    if (rank > 16) throw FormatError("implausible rank " + std::to_string(rank) + " for " + nt.name);
    Shape shape(rank);
    for (auto& e : shape) e = get_le<std::uint64_t>(in, "extent");
    std::vector<float> data(shape_size(shape));
    for (auto& v : data) v = std::bit_cast<float>(get_le<std::uint32_t>(in, "tensor data"));
    nt.tensor = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(nt));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint");
  return out;
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

std::uint64_t checkpoint_bytes(std::span<const NamedTensor> tensors) {
  std::uint64_t bytes = kCheckpointHeaderBytes;
  for (const auto& nt : tensors) bytes += 4 + nt.name.size() + 4 + 8 * nt.tensor.rank() + 4 * nt.tensor.size();
  return bytes;
}

}  // namespace sala
