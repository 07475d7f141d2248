#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <vector>

#include "sshield/data.hpp"

using namespace sshield;

namespace {

struct TempPath {
  std::string p;
  explicit TempPath(const std::string& name) : p("/tmp/sshield_test_" + name) {}
  ~TempPath() { std::remove(p.c_str()); }
};

void write_bytes(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

void push_be32(std::vector<unsigned char>& v, uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

}  // namespace

TEST_CASE("idx loader parses a hand-built file and scales bytes") {
  TempPath img("idx_img"), lab("idx_lab");
  std::vector<unsigned char> ib;
  push_be32(ib, 2051);
  push_be32(ib, 3);  // count
  push_be32(ib, 4);  // rows
  push_be32(ib, 5);  // cols
  for (int i = 0; i < 3 * 4 * 5; ++i) ib.push_back(static_cast<unsigned char>(i % 256));
  ib[16] = 0;
  ib[17] = 255;
  ib[18] = 128;
  write_bytes(img.p, ib);
  std::vector<unsigned char> lb;
  push_be32(lb, 2049);
  push_be32(lb, 3);
  lb.push_back(7);
  lb.push_back(0);
  lb.push_back(9);
  write_bytes(lab.p, lb);

  Dataset ds = load_mnist_idx(img.p, lab.p);
  CHECK(ds.x.shape() == std::vector<int>{3, 4, 5, 1});
  CHECK(ds.n() == 3);
  CHECK(ds.x[0] == 0.f);
  CHECK(ds.x[1] == 1.f);
  CHECK(ds.x[2] == doctest::Approx(128.0 / 255.0));
  CHECK(ds.y == std::vector<int>{7, 0, 9});

  SUBCASE("label magic rejected for images and vice versa") {
    CHECK_THROWS(load_mnist_idx(lab.p, img.p));
  }
  SUBCASE("truncated payload rejected") {
    std::vector<unsigned char> cut(ib.begin(), ib.begin() + 30);
    write_bytes(img.p, cut);
    CHECK_THROWS(load_mnist_idx(img.p, lab.p));
  }
  SUBCASE("count mismatch rejected") {
    std::vector<unsigned char> lb2;
    push_be32(lb2, 2049);
    push_be32(lb2, 2);
    lb2.push_back(1);
    lb2.push_back(2);
    write_bytes(lab.p, lb2);
    CHECK_THROWS(load_mnist_idx(img.p, lab.p));
  }
  SUBCASE("labels above 9 rejected") {
    std::vector<unsigned char> lb2;
    push_be32(lb2, 2049);
    push_be32(lb2, 3);
    lb2.push_back(1);
    lb2.push_back(12);
    lb2.push_back(2);
    write_bytes(lab.p, lb2);
    CHECK_THROWS(load_mnist_idx(img.p, lab.p));
  }
  SUBCASE("missing file names the path") {
    CHECK_THROWS_WITH_AS(load_mnist_idx("/tmp/sshield_no_such_file", lab.p),
                         doctest::Contains("/tmp/sshield_no_such_file"), std::runtime_error);
  }
}

TEST_CASE("idx write-read round trip is lossless on grid data") {
  Dataset ds = synthetic_digits(24, 99);
  TempPath img("rt_img"), lab("rt_lab");
  write_idx(ds, img.p, lab.p);
  Dataset back = load_mnist_idx(img.p, lab.p);
  REQUIRE(back.x.shape() == ds.x.shape());
  CHECK(max_abs_diff(back.x, ds.x) == 0.f);
  CHECK(back.y == ds.y);
}

TEST_CASE("cifar loader parses planar records") {
  TempPath f("cifar_bin");
  std::vector<unsigned char> b;
  for (int rec = 0; rec < 2; ++rec) {
    b.push_back(rec == 0 ? 7 : 3);
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < 1024; ++p)
        b.push_back(static_cast<unsigned char>((rec * 50 + (c + 1) * 10 + p) % 256));
  }
  write_bytes(f.p, b);
  Dataset ds = load_cifar10_binary({f.p});
  CHECK(ds.x.shape() == std::vector<int>{2, 32, 32, 3});
  CHECK(ds.y == std::vector<int>{7, 3});
  // pixel 0 of record 0: planes give bytes 10, 20, 30
  CHECK(ds.x[0] == doctest::Approx(10.0 / 255.0));
  CHECK(ds.x[1] == doctest::Approx(20.0 / 255.0));
  CHECK(ds.x[2] == doctest::Approx(30.0 / 255.0));
  // pixel (0,1) interleaves the next plane entries
  CHECK(ds.x[3] == doctest::Approx(11.0 / 255.0));

  SUBCASE("round trip from a known tensor") {
    Dataset ds2 = load_cifar10_binary({f.p});
    CHECK(max_abs_diff(ds.x, ds2.x) == 0.f);
  }
  SUBCASE("ragged file size rejected") {
    b.pop_back();
    write_bytes(f.p, b);
    CHECK_THROWS(load_cifar10_binary({f.p}));
  }
  SUBCASE("label byte above 9 rejected") {
    b[0] = 11;
    write_bytes(f.p, b);
    CHECK_THROWS(load_cifar10_binary({f.p}));
  }
}

TEST_CASE("synthetic digits are deterministic, balanced and 8-bit gridded") {
  Dataset a = synthetic_digits(30, 7);
  Dataset b = synthetic_digits(30, 7);
  CHECK(max_abs_diff(a.x, b.x) == 0.f);
  CHECK(a.y == b.y);

  Dataset c = synthetic_digits(30, 8);
  CHECK(max_abs_diff(a.x, c.x) > 0.f);

  // prefix stability: sample i depends on (seed, i) only
  Dataset shorter = synthetic_digits(10, 7);
  CHECK(max_abs_diff(shorter.x, batch_slice(a.x, 0, 10)) == 0.f);

  std::vector<int> counts(10, 0);
  for (int v : a.y) {
    CHECK(v >= 0);
    CHECK(v <= 9);
    counts[size_t(v)]++;
  }
  for (int k = 0; k < 10; ++k) CHECK(counts[size_t(k)] == 3);

  for (int64_t i = 0; i < a.x.numel(); ++i) {
    CHECK(a.x[i] >= 0.f);
    CHECK(a.x[i] <= 1.f);
    float grid = a.x[i] * 255.f;
    CHECK(std::abs(grid - float(int(grid + 0.5f))) <= 1e-3f);
  }
  // images are not blank and not saturated
  double mean = 0;
  for (int64_t i = 0; i < a.x.numel(); ++i) mean += a.x[i];
  mean /= double(a.x.numel());
  CHECK(mean > 0.02);
  CHECK(mean < 0.5);
}

TEST_CASE("subset and shuffle keep image-label pairs together") {
  Dataset ds = synthetic_digits(40, 11);
  Dataset sub = subset(ds, 10, 5);
  CHECK(sub.n() == 5);
  CHECK(max_abs_diff(sub.x, batch_slice(ds.x, 10, 5)) == 0.f);
  CHECK(sub.y == std::vector<int>(ds.y.begin() + 10, ds.y.begin() + 15));
  CHECK_THROWS(subset(ds, 38, 5));
  CHECK_THROWS(subset(ds, -1, 2));

  Dataset sh = shuffled(ds, 3);
  CHECK(sh.n() == ds.n());
  std::vector<int> c1(10, 0), c2(10, 0);
  for (int v : ds.y) c1[size_t(v)]++;
  for (int v : sh.y) c2[size_t(v)]++;
  CHECK(c1 == c2);
  // find where sample 0 landed and confirm its label traveled with it
  int64_t per = ds.x.numel() / ds.n();
  int found = -1;
  for (int i = 0; i < sh.n(); ++i) {
    bool same = true;
    for (int64_t j = 0; j < per && same; ++j) same = sh.x[i * per + j] == ds.x[j];
    if (same) {
      found = i;
      break;
    }
  }
  REQUIRE(found >= 0);
  CHECK(sh.y[size_t(found)] == ds.y[0]);
  Dataset sh2 = shuffled(ds, 3);
  CHECK(max_abs_diff(sh.x, sh2.x) == 0.f);
}
