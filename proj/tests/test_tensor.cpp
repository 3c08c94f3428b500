#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "evseg/tensor.hpp"
#include "evseg/tensor_io.hpp"

using namespace evseg;
using Td = Tensor<double>;
using Tf = Tensor<float>;

namespace {

Td rand_t(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  return Td::rand_uniform(rng, std::move(shape), lo, hi);
}

}  // namespace

TEST_CASE("add identity and broadcasting") {
  Td x = Td::from_vector({2, 2}, {1, 2, 3, 4});
  Td z = Td::zeros({2, 2});
  Td r = add(x, z);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.data()[i] == x.data()[i]);

  // trailing-singleton broadcast: (2x2) + (2x1)
  Td b = Td::from_vector({2, 1}, {10, 20});
  Td s = add(x, b);
  CHECK(s.data()[0] == 11);
  CHECK(s.data()[1] == 12);
  CHECK(s.data()[2] == 23);
  CHECK(s.data()[3] == 24);

  // scalar broadcast in either order
  Td c = Td::scalar(5);
  CHECK(add(c, x).data()[3] == 9);

  CHECK_THROWS_AS(add(x, Td::zeros({3, 2})), ValidationError);
}

TEST_CASE("sum over all axes of 2x2 ones is 4") {
  CHECK(sum(Td::ones({2, 2})).value() == 4.0);
}

TEST_CASE("gradient of mean matches central differences") {
  Rng rng(7);
  Td x = rand_t(rng, {5});
  Tape<double> tape;
  Td xw = tape.watch(x);
  tape.backward(mean(xw));
  auto g = tape.grad(xw);
  for (double v : g) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));

  double err = grad_check<double>([](Tape<double>& t, const Td& v) { return mean(v); }, x, 1e-6);
  CHECK(err < 1e-9);
}

TEST_CASE("matmul fixtures") {
  Td eye = Td::from_vector({2, 2}, {1, 0, 0, 1});
  Td x = Td::from_vector({2, 2}, {3, 1, 4, 1});
  Td r = matmul(eye, x);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.data()[i] == x.data()[i]);

  Td a = Td::from_vector({2, 2}, {1, 2, 3, 4});
  Td b = Td::from_vector({2, 1}, {1, 1});
  Td c = matmul(a, b);
  CHECK(c.data()[0] == 3);
  CHECK(c.data()[1] == 7);

  CHECK_THROWS_AS(matmul(a, Td::zeros({3, 1})), ValidationError);
}

TEST_CASE("matmul gradcheck on random 3x4 * 4x2") {
  Rng rng(11);
  Td a = rand_t(rng, {3, 4});
  Td b = rand_t(rng, {4, 2});
  double err = grad_check_multi<double>(
      [](Tape<double>& t, const std::vector<Td>& xs) { return sum(matmul(xs[0], xs[1])); }, {a, b}, 1e-6);
  CHECK(err < 1e-8);
}

TEST_CASE("softmax fixtures and simplex property") {
  Td flat = softmax(Td::zeros({4}), 0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(flat.data()[i] == doctest::Approx(0.25));

  Td two = softmax(Td::zeros({2}), 0);
  CHECK(two.data()[0] == doctest::Approx(0.5));

  Td logits = Td::from_vector({2}, {std::log(1.0), std::log(3.0)});
  Td p = softmax(logits, 0);
  CHECK(p.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p.data()[1] == doctest::Approx(0.75).epsilon(1e-12));

  Rng rng(3);
  Td x = rand_t(rng, {5, 7}, -30, 30);
  for (std::size_t axis = 0; axis < 2; ++axis) {
    Td y = softmax(x, axis);
    std::size_t outer = y.dim(axis == 0 ? 1 : 0);
    (void)outer;
    // every slice along `axis` sums to 1 and stays in [0,1]
    for (std::size_t i = 0; i < y.size(); ++i) {
      CHECK(y.data()[i] >= 0.0);
      CHECK(y.data()[i] <= 1.0);
    }
    Td s = sum(y, axis);
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(s.data()[i] == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("conv2d identity kernel is the identity map") {
  Rng rng(5);
  Td x = rand_t(rng, {2, 5, 5});
  std::vector<double> w(2 * 2 * 9, 0.0);
  w[0 * 2 * 9 + 0 * 9 + 4] = 1.0;  // out0 <- in0 center
  w[1 * 2 * 9 + 1 * 9 + 4] = 1.0;  // out1 <- in1 center
  Td k = Td::from_vector({2, 2, 3, 3}, w);
  Td y = conv2d(x, k, 1);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("conv2d all-ones 3x3 on all-ones 3x3 input gives 9 at center") {
  Td x = Td::ones({1, 3, 3});
  Td k = Td::ones({1, 1, 3, 3});
  Td y = conv2d(x, k, 1);
  CHECK(y.dim(1) == 3);
  CHECK(y.data()[4] == doctest::Approx(9.0));
  CHECK(y.data()[0] == doctest::Approx(4.0));  // corner sees a 2x2 patch
}

TEST_CASE("conv2d gradcheck wrt input and weights, stride 1 and 2") {
  Rng rng(9);
  for (std::size_t stride : {1u, 2u}) {
    Td x = rand_t(rng, {2, 5, 4});
    Td w = rand_t(rng, {3, 2, 3, 3});
    double err = grad_check_multi<double>(
        [stride](Tape<double>& t, const std::vector<Td>& xs) {
          return sum(mul(conv2d(xs[0], xs[1], stride), conv2d(xs[0], xs[1], stride)));
        },
        {x, w}, 1e-6);
    CHECK(err < 1e-7);
  }
}

TEST_CASE("bilinear_sample identity grid returns the image") {
  Rng rng(13);
  Td img = rand_t(rng, {2, 4, 5});
  std::vector<double> coords(2 * 4 * 5);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 5; ++x) {
      coords[y * 5 + x] = static_cast<double>(x);
      coords[20 + y * 5 + x] = static_cast<double>(y);
    }
  Td grid = Td::from_vector({2, 4, 5}, coords);
  Td out = bilinear_sample(img, grid);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(out.data()[i] == doctest::Approx(img.data()[i]));
}

TEST_CASE("bilinear_sample integer shift of a ramp clamps the border") {
  // img(x) = x on a 1x1x4 row
  Td img = Td::from_vector({1, 1, 4}, {0, 1, 2, 3});
  std::vector<double> coords(2 * 1 * 4);
  for (std::size_t x = 0; x < 4; ++x) {
    coords[x] = static_cast<double>(x) + 1.0;  // sample one to the right
    coords[4 + x] = 0.0;
  }
  Td out = bilinear_sample(img, Td::from_vector({2, 1, 4}, coords));
  CHECK(out.data()[0] == doctest::Approx(1.0));
  CHECK(out.data()[1] == doctest::Approx(2.0));
  CHECK(out.data()[2] == doctest::Approx(3.0));
  CHECK(out.data()[3] == doctest::Approx(3.0));  // clamped border column
}

TEST_CASE("bilinear_sample midpoint between 0 and 1 is 0.5") {
  Td img = Td::from_vector({1, 1, 2}, {0, 1});
  Td coords = Td::from_vector({2, 1, 1}, {0.5, 0.0});
  CHECK(bilinear_sample(img, coords).data()[0] == doctest::Approx(0.5));
}

TEST_CASE("bilinear_sample gradcheck wrt image and coords") {
  Rng rng(17);
  Td img = rand_t(rng, {2, 4, 4});
  std::vector<double> cd(2 * 3 * 3);
  for (auto& v : cd) v = rng.uniform(0.2, 2.7);  // interior, away from integer kinks
  Td coords = Td::from_vector({2, 3, 3}, cd);
  double err = grad_check_multi<double>(
      [](Tape<double>& t, const std::vector<Td>& xs) {
        return sum(mul(bilinear_sample(xs[0], xs[1]), bilinear_sample(xs[0], xs[1])));
      },
      {img, coords}, 1e-6);
  CHECK(err < 1e-7);
}

TEST_CASE("upsample_bilinear identity and constant preservation") {
  Rng rng(19);
  Td x = rand_t(rng, {3, 4, 6});
  Td same = upsample_bilinear(x, 4, 6);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(same.data()[i] == doctest::Approx(x.data()[i]));

  Td c = Td::full({1, 2, 2}, 0.7);
  Td up = upsample_bilinear(c, 9, 5);
  for (std::size_t i = 0; i < up.size(); ++i) CHECK(up.data()[i] == doctest::Approx(0.7));
}

TEST_CASE("upsample_bilinear align-corners-false fixture (0,1) -> (0,0.25,0.75,1)") {
  Td x = Td::from_vector({1, 1, 2}, {0, 1});
  Td y = upsample_bilinear(x, 1, 4);
  CHECK(y.data()[0] == doctest::Approx(0.0));
  CHECK(y.data()[1] == doctest::Approx(0.25));
  CHECK(y.data()[2] == doctest::Approx(0.75));
  CHECK(y.data()[3] == doctest::Approx(1.0));
}

TEST_CASE("upsample_bilinear gradcheck") {
  Rng rng(23);
  Td x = rand_t(rng, {2, 3, 3});
  double err = grad_check<double>(
      [](Tape<double>& t, const Td& v) { return sum(mul(upsample_bilinear(v, 7, 5), upsample_bilinear(v, 7, 5))); },
      x, 1e-6);
  CHECK(err < 1e-8);
}

TEST_CASE("backward: loss sum(x) gives ones, sum(x^2) gives 2x") {
  Td x = Td::from_vector({2}, {1, 2});
  {
    Tape<double> t;
    Td xw = t.watch(x);
    t.backward(sum(xw));
    auto g = t.grad(xw);
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 1.0);
  }
  {
    Tape<double> t;
    Td xw = t.watch(x);
    t.backward(sum(mul(xw, xw)));
    auto g = t.grad(xw);
    CHECK(g[0] == doctest::Approx(2.0));
    CHECK(g[1] == doctest::Approx(4.0));
  }
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape<double> t;
  Td xw = t.watch(Td::ones({3}));
  CHECK_THROWS_AS(t.backward(xw), ValidationError);
}

TEST_CASE("gradcheck of composed softmax(matmul) stays below 1e-6") {
  Rng rng(29);
  Td a = rand_t(rng, {3, 4});
  Td b = rand_t(rng, {4, 2});
  double err = grad_check_multi<double>(
      [](Tape<double>& t, const std::vector<Td>& xs) {
        Td p = softmax(matmul(xs[0], xs[1]), 1);
        return sum(mul(p, p));
      },
      {a, b}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("gradient linearity: backward of a sum equals sum of backwards") {
  Rng rng(31);
  Td x = rand_t(rng, {4});
  auto run = [&](int which) {
    Tape<double> t;
    Td xw = t.watch(x);
    Td l1 = sum(mul(xw, xw));
    Td l2 = mean(exp(xw));
    Td loss = which == 0 ? l1 : (which == 1 ? l2 : add(l1, l2));
    t.backward(loss);
    return t.grad(xw);
  };
  auto g1 = run(0), g2 = run(1), g12 = run(2);
  for (std::size_t i = 0; i < 4; ++i) CHECK(g12[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-12));
}

TEST_CASE("elementwise unary ops gradcheck sweep") {
  Rng rng(37);
  Td x = rand_t(rng, {6}, 0.2, 1.8);  // positive domain for log/power
  auto check = [&](const std::function<Td(Tape<double>&, const Td&)>& f, double tol) {
    CHECK(grad_check<double>(f, x, 1e-6) < tol);
  };
  check([](Tape<double>&, const Td& v) { return sum(exp(v)); }, 1e-8);
  check([](Tape<double>&, const Td& v) { return sum(log(v)); }, 1e-8);
  check([](Tape<double>&, const Td& v) { return sum(power(v, 0.4)); }, 1e-8);
  check([](Tape<double>&, const Td& v) { return sum(relu(add_scalar(v, -1.0))); }, 1e-8);
  check([](Tape<double>&, const Td& v) { return sum(sigmoid(v)); }, 1e-8);
  check([](Tape<double>&, const Td& v) { return sum(div(Td::ones({6}), v)); }, 1e-8);
  check([](Tape<double>&, const Td& v) { return sum(absval(v)); }, 1e-8);
  check([](Tape<double>&, const Td& v) { return max(v); }, 1e-8);
  check([](Tape<double>&, const Td& v) { return sum(max(reshape(v, {2, 3}), 1)); }, 1e-8);
  check([](Tape<double>&, const Td& v) { return sum(select(reshape(v, {2, 3}), 1, 2)); }, 1e-8);
  check([](Tape<double>&, const Td& v) { return sum(mul(transpose(reshape(v, {2, 3})), transpose(reshape(v, {2, 3})))); }, 1e-8);
}

TEST_CASE("domain errors") {
  CHECK_THROWS_AS(log(Td::from_vector({2}, {1.0, -1.0})), ValidationError);
  CHECK_THROWS_AS(power(Td::from_vector({1}, {-2.0}), 0.5), ValidationError);
}

TEST_CASE("finite checks surface NaN at op boundaries") {
  Td x = Td::from_vector({2}, {1.0, 0.0});
  CHECK_THROWS_AS(div(Td::ones({2}), x), ValidationError);  // 1/0 -> inf
}

TEST_CASE("tensors on different tapes are rejected") {
  Tape<double> t1, t2;
  Td a = t1.watch(Td::ones({2}));
  Td b = t2.watch(Td::ones({2}));
  CHECK_THROWS_AS(add(a, b), ValidationError);
}

TEST_CASE("TNS0 round trip in both dtypes plus cross-read") {
  Rng rng(41);
  Td x = rand_t(rng, {2, 3, 4});
  const auto dir = std::filesystem::temp_directory_path() / "evseg_tns_test";
  std::filesystem::create_directories(dir);
  const std::string p64 = (dir / "a.tns").string();
  write_tns(p64, x);
  Td back = read_tns<double>(p64);
  REQUIRE(back.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(back.data()[i] == x.data()[i]);

  Tf xf = x.cast<float>();
  const std::string p32 = (dir / "b.tns").string();
  write_tns(p32, xf);
  Td up = read_tns<double>(p32);  // f32 payload read as f64
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(up.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-6));

  std::ofstream bad((dir / "bad.tns").string(), std::ios::binary);
  bad.write("XXXX", 4);
  bad.close();
  CHECK_THROWS_AS(read_tns<double>((dir / "bad.tns").string()), IoError);
}
