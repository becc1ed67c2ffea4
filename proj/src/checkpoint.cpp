#include "cranio/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace cranio {

namespace {

constexpr char kMagic[8] = {'C', 'R', 'A', 'N', 'I', 'O', 'C', 'K'};
constexpr std::uint64_t kMaxHeader = 64ull << 20;

template <typename U>
void put(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get(std::istream& in, const std::string& where) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U)))
    throw Error(ErrorKind::Format, "read_checkpoint", "truncated file while reading " + where);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

std::string get_bytes(std::istream& in, std::uint64_t n, const std::string& where) {
  std::string s(n, '\0');
  if (n && !in.read(s.data(), static_cast<std::streamsize>(n)))
    throw Error(ErrorKind::Format, "read_checkpoint", "truncated file while reading " + where);
  return s;
}

}  // namespace

template <typename S>
void store_parameters(Checkpoint& ck, const ParameterList<S>& params, const std::string& prefix) {
  for (const auto& [name, t] : params) {
    StoredTensor st;
    st.shape = t.shape();
    st.dtype = std::is_same_v<S, float> ? DType::F32 : DType::F64;
    st.values.assign(t.values().data(), t.values().data() + t.size());
    ck.tensors[prefix + name] = std::move(st);
  }
}

template <typename S>
void restore_parameters(const Checkpoint& ck, const ParameterList<S>& params, const std::string& prefix) {
  const DType want = std::is_same_v<S, float> ? DType::F32 : DType::F64;
  for (const auto& [name, t] : params) {
    const auto it = ck.tensors.find(prefix + name);
    if (it == ck.tensors.end())
      throw Error(ErrorKind::Format, "load_checkpoint", "architecture mismatch: no tensor '" + prefix + name + "'");
    const StoredTensor& st = it->second;
    if (st.shape != t.shape())
      throw Error(ErrorKind::Format, "load_checkpoint",
                  "architecture mismatch: '" + prefix + name + "' stored as " + to_string(st.shape) + ", network has " +
                      to_string(t.shape()));
    if (st.dtype != want)
      throw Error(ErrorKind::Format, "load_checkpoint", "dtype mismatch for '" + prefix + name + "'");
    Array<S> v(static_cast<Index>(st.values.size()));
    for (std::size_t i = 0; i < st.values.size(); ++i) v[static_cast<Index>(i)] = static_cast<S>(st.values[i]);
    Tensor<S> target = t;
    target.assign(std::move(v));
  }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "write_checkpoint", "cannot open " + tmp.string());
    const std::string header = ck.header.dump();
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, Checkpoint::kVersion);
    put<std::uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, st] : ck.tensors) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint8_t>(out, static_cast<std::uint8_t>(st.dtype));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(st.shape.size()));
      for (Index d : st.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
      for (double v : st.values) {
        if (st.dtype == DType::F32) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        else put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
      }
    }
    if (!out.flush()) throw Error(ErrorKind::Io, "write_checkpoint", "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::Io, "write_checkpoint", "cannot move checkpoint into place: " + ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw Error(ErrorKind::NotFound, "read_checkpoint", "no such file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "read_checkpoint", "cannot open " + path.string());
  if (get_bytes(in, sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic)))
    throw Error(ErrorKind::Format, "read_checkpoint", path.string() + " is not a checkpoint");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != Checkpoint::kVersion)
    throw Error(ErrorKind::Format, "read_checkpoint", "unsupported checkpoint version " + std::to_string(version));
  const auto header_size = get<std::uint64_t>(in, "header size");
  if (header_size > kMaxHeader) throw Error(ErrorKind::Format, "read_checkpoint", "implausible header size");
  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(get_bytes(in, header_size, "header"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, "read_checkpoint", std::string("bad header: ") + e.what());
  }
  const auto count = get<std::uint32_t>(in, "tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_size = get<std::uint32_t>(in, "name size");
    std::string name = get_bytes(in, name_size, "name");
    StoredTensor st;
    const auto dtype = get<std::uint8_t>(in, name);
    if (dtype != 1 && dtype != 2) throw Error(ErrorKind::Format, "read_checkpoint", "bad dtype for " + name);
    st.dtype = static_cast<DType>(dtype);
    const auto rank = get<std::uint32_t>(in, name);
    if (rank == 0 || rank > 8) throw Error(ErrorKind::Format, "read_checkpoint", "bad rank for " + name);
    std::uint64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = get<std::uint64_t>(in, name);
      if (d == 0 || d > (1ull << 31)) throw Error(ErrorKind::Format, "read_checkpoint", "bad dimension for " + name);
      st.shape.push_back(static_cast<Index>(d));
      n *= d;
      if (n > (1ull << 32)) throw Error(ErrorKind::Format, "read_checkpoint", "tensor too large: " + name);
    }
    st.values.resize(n);
    for (auto& v : st.values) {
      if (st.dtype == DType::F32) v = std::bit_cast<float>(get<std::uint32_t>(in, name));
      else v = std::bit_cast<double>(get<std::uint64_t>(in, name));
    }
    ck.tensors[name] = std::move(st);
  }
  return ck;
}

template void store_parameters<float>(Checkpoint&, const ParameterList<float>&, const std::string&);
template void store_parameters<double>(Checkpoint&, const ParameterList<double>&, const std::string&);
template void restore_parameters<float>(const Checkpoint&, const ParameterList<float>&, const std::string&);
template void restore_parameters<double>(const Checkpoint&, const ParameterList<double>&, const std::string&);

}  // namespace cranio
