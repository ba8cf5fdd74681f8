#pragma once

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "qpinqi/tensor.hpp"

namespace qpinqi {

static_assert(std::endian::native == std::endian::little,
              "QTEN1 payloads are little-endian; big-endian hosts are unsupported");

enum class IoErrorKind { Io, BadMagic, BadHeader, DtypeMismatch, Truncated };

class TensorIoError : public std::runtime_error {
 public:
  IoErrorKind kind;
  TensorIoError(IoErrorKind k, const std::string& msg)
      : std::runtime_error(msg), kind(k) {}
};

namespace detail {

inline constexpr char kMagic[] = "QTEN1\n";
inline constexpr std::size_t kMagicLen = 6;

template <typename T>
const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "real32";
  if constexpr (std::is_same_v<T, double>) return "real64";
  if constexpr (std::is_same_v<T, cplx>) return "complex128";
}

}  // namespace detail

/// File layout: magic "QTEN1\n", one JSON header line
/// {"dtype","shape","order":"row-major"}, newline, then the raw little-endian
/// payload. Complex values are interleaved re,im. Writes go through a
/// temporary file and rename so a failed write never leaves a partial file
/// behind under the target name.
template <typename T>
void write_tensor(const std::filesystem::path& path, const Array<T>& t) {
  nlohmann::json header;
  header["dtype"] = detail::dtype_name<T>();
  header["shape"] = t.shape;
  header["order"] = "row-major";

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw TensorIoError(IoErrorKind::Io, "cannot open for write: " + tmp.string());
    out.write(detail::kMagic, detail::kMagicLen);
    const std::string hline = header.dump();
    out.write(hline.data(), static_cast<std::streamsize>(hline.size()));
    out.put('\n');
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(T)));
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw TensorIoError(IoErrorKind::Io, "write failed: " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw TensorIoError(IoErrorKind::Io,
                        "rename failed: " + path.string() + ": " + ec.message());
  }
}

using AnyTensor = std::variant<FloatArray, RealArray, ComplexArray>;

namespace detail {

template <typename T>
Array<T> read_payload(std::ifstream& in, std::vector<std::size_t> shape,
                      const std::string& path) {
  Array<T> t(std::move(shape));
  in.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(T)));
  if (static_cast<std::size_t>(in.gcount()) != t.data.size() * sizeof(T))
    throw TensorIoError(IoErrorKind::Truncated,
                        "payload shorter than shape implies: " + path);
  return t;
}

}  // namespace detail

inline AnyTensor read_tensor_any(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw TensorIoError(IoErrorKind::Io, "cannot open for read: " + path.string());

  char magic[detail::kMagicLen];
  in.read(magic, detail::kMagicLen);
  if (in.gcount() != static_cast<std::streamsize>(detail::kMagicLen) ||
      std::string(magic, detail::kMagicLen) != std::string(detail::kMagic, detail::kMagicLen))
    throw TensorIoError(IoErrorKind::BadMagic, "bad magic: " + path.string());

  std::string hline;
  if (!std::getline(in, hline))
    throw TensorIoError(IoErrorKind::BadHeader, "missing header line: " + path.string());

  nlohmann::json header = nlohmann::json::parse(hline, nullptr, false);
  if (header.is_discarded() || !header.contains("dtype") || !header.contains("shape"))
    throw TensorIoError(IoErrorKind::BadHeader, "unparsable header: " + path.string());
  if (header.value("order", "") != std::string("row-major"))
    throw TensorIoError(IoErrorKind::BadHeader, "unsupported order: " + path.string());

  std::vector<std::size_t> shape = header["shape"].get<std::vector<std::size_t>>();
  const std::string dtype = header["dtype"].get<std::string>();
  if (dtype == "real32")
    return detail::read_payload<float>(in, std::move(shape), path.string());
  if (dtype == "real64")
    return detail::read_payload<double>(in, std::move(shape), path.string());
  if (dtype == "complex128")
    return detail::read_payload<cplx>(in, std::move(shape), path.string());
  throw TensorIoError(IoErrorKind::BadHeader, "unknown dtype '" + dtype + "': " + path.string());
}

/// Typed read; a file holding a different dtype is a DtypeMismatch error.
template <typename T>
Array<T> read_tensor(const std::filesystem::path& path) {
  AnyTensor any = read_tensor_any(path);
  if (auto* t = std::get_if<Array<T>>(&any)) return std::move(*t);
  throw TensorIoError(IoErrorKind::DtypeMismatch,
                      std::string("expected dtype ") + detail::dtype_name<T>() +
                          ": " + path.string());
}

}  // namespace qpinqi
