#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "qpinqi/rng.hpp"
#include "qpinqi/tensor.hpp"
#include "qpinqi/tensor_io.hpp"

using namespace qpinqi;
namespace fs = std::filesystem;

namespace {
fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "qpinqi_test";
  fs::create_directories(dir);
  return dir / name;
}
}  // namespace

TEST_CASE("tensor io roundtrip is bitwise for complex", "[core]") {
  Rng rng(7);
  ComplexArray t({3, 4});
  for (auto& v : t.data) v = cplx{rng.normal(), rng.normal()};
  const auto path = temp_file("roundtrip.qten");
  write_tensor(path, t);
  auto back = read_tensor<cplx>(path);
  REQUIRE(back.shape == t.shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    REQUIRE(back.data[i].real() == t.data[i].real());
    REQUIRE(back.data[i].imag() == t.data[i].imag());
  }
}

TEST_CASE("tensor io payload sizes", "[core]") {
  RealArray t({2, 2}, {1.0, 2.0, 3.0, 4.0});
  const auto path = temp_file("payload.qten");
  write_tensor(path, t);

  std::ifstream in(path, std::ios::binary);
  std::string contents((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
  REQUIRE(contents.substr(0, 6) == "QTEN1\n");
  const auto header_end = contents.find('\n', 6);
  REQUIRE(header_end != std::string::npos);
  REQUIRE(contents.size() - header_end - 1 == 32);  // 4 x 8 bytes

  // Scalar: empty shape, one 8-byte element.
  RealArray s({}, {5.0});
  const auto spath = temp_file("scalar.qten");
  write_tensor(spath, s);
  std::ifstream sin(spath, std::ios::binary);
  std::string scontents((std::istreambuf_iterator<char>(sin)),
                        std::istreambuf_iterator<char>());
  const auto send = scontents.find('\n', 6);
  REQUIRE(scontents.substr(6, send - 6).find("\"shape\":[]") != std::string::npos);
  REQUIRE(scontents.size() - send - 1 == 8);
  auto sback = read_tensor<double>(spath);
  REQUIRE(sback.shape.empty());
  REQUIRE(sback.data[0] == 5.0);
}

TEST_CASE("tensor io error kinds", "[core]") {
  const auto bad = temp_file("bad.qten");
  std::ofstream(bad, std::ios::binary) << "XXXX1\n{\"dtype\":\"real64\"}\n";
  try {
    read_tensor_any(bad);
    FAIL("expected bad magic");
  } catch (const TensorIoError& e) {
    REQUIRE(e.kind == IoErrorKind::BadMagic);
  }

  RealArray t({4}, {1, 2, 3, 4});
  const auto trunc = temp_file("trunc.qten");
  write_tensor(trunc, t);
  // Chop the payload short.
  std::string contents;
  {
    std::ifstream in(trunc, std::ios::binary);
    contents.assign((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  }
  std::ofstream(trunc, std::ios::binary | std::ios::trunc)
      << contents.substr(0, contents.size() - 9);
  try {
    read_tensor_any(trunc);
    FAIL("expected truncation");
  } catch (const TensorIoError& e) {
    REQUIRE(e.kind == IoErrorKind::Truncated);
  }

  const auto mismatch = temp_file("mismatch.qten");
  write_tensor(mismatch, t);
  try {
    read_tensor<cplx>(mismatch);
    FAIL("expected dtype mismatch");
  } catch (const TensorIoError& e) {
    REQUIRE(e.kind == IoErrorKind::DtypeMismatch);
  }
}

TEST_CASE("tensor io roundtrip property over random tensors", "[core]") {
  Rng rng(123);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> shape;
    const int rank = static_cast<int>(rng.below(4));  // 0..3
    for (int d = 0; d < rank; ++d) shape.push_back(1 + rng.below(5));
    const int which = static_cast<int>(rng.below(3));
    const auto path = temp_file("prop.qten");
    if (which == 0) {
      FloatArray t(shape);
      for (auto& v : t.data) v = static_cast<float>(rng.normal());
      write_tensor(path, t);
      auto back = read_tensor<float>(path);
      REQUIRE(back.shape == shape);
      REQUIRE(back.data == t.data);
    } else if (which == 1) {
      RealArray t(shape);
      for (auto& v : t.data) v = rng.normal();
      write_tensor(path, t);
      auto back = read_tensor<double>(path);
      REQUIRE(back.data == t.data);
    } else {
      ComplexArray t(shape);
      for (auto& v : t.data) v = cplx{rng.normal(), rng.normal()};
      write_tensor(path, t);
      auto back = read_tensor<cplx>(path);
      REQUIRE(back.data == t.data);
    }
  }
}

TEST_CASE("inner product conventions", "[core]") {
  ComplexArray a({1}, {cplx{1.0, 0.0}});
  REQUIRE(inner_product(a, a) == cplx{1.0, 0.0});

  ComplexArray ai({1}, {cplx{0.0, 1.0}});
  ComplexArray one({1}, {cplx{1.0, 0.0}});
  REQUIRE(inner_product(ai, one) == cplx{0.0, -1.0});  // conj(i) * 1

  Rng rng(5);
  ComplexArray x({8}), y({8}), z({8});
  for (std::size_t i = 0; i < 8; ++i) {
    x.data[i] = cplx{rng.normal(), rng.normal()};
    y.data[i] = cplx{rng.normal(), rng.normal()};
    z.data[i] = cplx{rng.normal(), rng.normal()};
  }
  const cplx xy = inner_product(x, y);
  const cplx yx = inner_product(y, x);
  REQUIRE(std::abs(xy - std::conj(yx)) <= 1e-14 * std::abs(xy));

  // Linearity in the second argument.
  const cplx alpha{0.3, -1.2};
  ComplexArray yz = y;
  for (std::size_t i = 0; i < 8; ++i) yz.data[i] = y.data[i] + alpha * z.data[i];
  const cplx lhs = inner_product(x, yz);
  const cplx rhs = inner_product(x, y) + alpha * inner_product(x, z);
  REQUIRE(std::abs(lhs - rhs) <= 1e-14 * std::abs(lhs));

  ComplexArray wrong({4});
  REQUIRE_THROWS_AS(inner_product(x, wrong), ShapeError);
}

TEST_CASE("rng streams are reproducible and counter-addressable", "[core]") {
  Rng a(42), b(42);
  for (int i = 0; i < 10000; ++i) REQUIRE(a.next_u64() == b.next_u64());

  // Draw k is a pure function of (seed, k): restarting at a counter matches.
  Rng c(42);
  for (int i = 0; i < 57; ++i) c.next_u64();
  Rng d(42);
  d.counter = 57;
  REQUIRE(c.next_u64() == d.next_u64());

  Rng e(43);
  e.counter = 0;
  Rng f(42);
  REQUIRE(e.next_u64() != f.next_u64());

  // Split streams differ from the parent and from each other.
  Rng g(42);
  REQUIRE(g.split(0).next_u64() != g.split(1).next_u64());

  Rng h(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = h.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  Rng n(8);
  double mean = 0.0;
  for (int i = 0; i < 10000; ++i) mean += n.normal();
  mean /= 10000.0;
  REQUIRE(std::abs(mean) < 0.05);
}
