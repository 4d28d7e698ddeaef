#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mindloop/checkpoint.hpp"
#include "mindloop/errors.hpp"
#include "mindloop/gradcheck.hpp"
#include "mindloop/ops.hpp"
#include "mindloop/optim.hpp"
#include "mindloop/random.hpp"
#include "mindloop/tensor_io.hpp"
#include "support.hpp"

using namespace mindloop;
using mindloop::testing::rand_pm1;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mindloop_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("tensor shape invariants") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == numel(t.shape()));
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  t.set_requires_grad();
  CHECK(t.grad().size() == t.size());
}

TEST_CASE("matmul examples") {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor m({2, 2}, {1, 2, 3, 4});
  CHECK(vec(matmul(eye, m)) == vec(m));
  CHECK(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})).item() == 11.0);
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
}

TEST_CASE("elementwise ops reject mismatched shapes") {
  CHECK_THROWS_AS(add(Tensor({2, 3}), Tensor({3, 2})), ShapeError);
  CHECK_THROWS_AS(mul(Tensor({6}), Tensor({2, 3})), ShapeError);
}

TEST_CASE("softmax examples") {
  const Tensor u = softmax(Tensor({3}, {0, 0, 0}), 0);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor big = softmax(Tensor({2}, {1000, 0}), 0);
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] >= 0.0);
  CHECK(big[1] < 1e-300);

  const Tensor s = softmax(Tensor({3}, {1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(s[i] - std::exp(i + 1.0) / z) < 1e-15);
}

TEST_CASE("softmax rows sum to one and ignore row shifts") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = Tensor::randn({4, 7}, rng, 5.0);
    const Tensor s = softmax(x, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        CHECK(s[r * 7 + c] >= 0.0);
        total += s[r * 7 + c];
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
    std::vector<double> shifted = vec(x);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 7; ++c) shifted[r * 7 + c] += 3.0 * static_cast<double>(r) - 40.0;
    const Tensor s2 = softmax(Tensor({4, 7}, shifted), 1);
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(std::abs(s[i] - s2[i]) < 1e-12);
  }
}

TEST_CASE("backward examples") {
  Tape::active().clear();
  Rng rng(3);
  Tensor x = rand_pm1({3, 2}, rng).set_requires_grad();
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);
  Tape::active().clear();

  backward(scale(sum(mul(x, x)), 0.5));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(x[i]).epsilon(1e-14));
  Tape::active().clear();

  CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
  Tape::active().clear();
}

TEST_CASE("clearing the tape zeroes every grad") {
  Tape::active().clear();
  Rng rng(4);
  Tensor x = rand_pm1({5}, rng).set_requires_grad();
  const Tensor y = exp(x);
  backward(sum(y));
  CHECK(std::abs(x.grad()[0]) > 0.0);
  Tape::active().clear();
  for (double g : x.grad()) CHECK(g == 0.0);
  CHECK(Tape::active().size() == 0);
}

TEST_CASE("a tensor used twice accumulates both contributions") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tape::active().clear();
    Tensor x = rand_pm1({4}, rng).set_requires_grad();
    const Tensor w = rand_pm1({4}, rng);
    backward(sum(mul(mul(x, x), w)));
    const std::vector<double> twice(x.grad().begin(), x.grad().end());
    Tape::active().clear();
    // Single-use rewrite: d/dx sum(w x²) = 2 w x.
    for (std::size_t i = 0; i < 4; ++i) CHECK(twice[i] == doctest::Approx(2.0 * w[i] * x[i]).epsilon(1e-14));

    backward(sum(add(x, x)));
    for (double g : x.grad()) CHECK(g == 2.0);
    Tape::active().clear();
  }
}

TEST_CASE("every primitive matches central differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    for (auto& c : testing::primitive_cases(rng)) {
      CAPTURE(c.name);
      CAPTURE(seed);
      const auto r = gradcheck(c.f, c.inputs, 1e-5);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("gradient check flags a wrong backward rule") {
  // Identity op whose backward rule doubles the gradient.
  auto bad_identity = [](const Tensor& x) {
    auto out = std::make_shared<detail::Node>();
    out->shape = x.shape();
    out->value.assign(x.data().begin(), x.data().end());
    Tape& tape = Tape::active();
    if (tape.recording() && x.requires_grad()) {
      out->requires_grad = true;
      out->grad.assign(out->value.size(), 0.0);
      detail::Node* xn = x.node().get();
      detail::Node* on = out.get();
      tape.record("bad_identity", out, {x.node()}, [xn, on] {
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += 2.0 * on->grad[i];
      });
    }
    return Tensor(out);
  };
  Rng rng(6);
  Tensor x = rand_pm1({3}, rng);
  const Tensor w = rand_pm1({3}, rng);
  CHECK(gradcheck([&] { return sum(mul(x, w)); }, {x}).max_rel_error < 1e-8);
  CHECK(gradcheck([&] { return sum(mul(bad_identity(x), w)); }, {x}).max_rel_error > 0.5);
}

TEST_CASE("non-finite results name the op") {
  try {
    (void)exp(Tensor({1}, {1000.0}));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("exp") != std::string::npos);
  }
  CHECK_THROWS_AS(scale(Tensor({1}, {1e308}), 10.0), NumericError);
}

TEST_CASE("outputs of recorded ops cannot be mutated") {
  Tape::active().clear();
  Tensor x = Tensor({2}, {1, 2}).set_requires_grad();
  Tensor y = exp(x);
  CHECK_THROWS_AS(y.values(), ContractError);
  Tape::active().clear();
}

TEST_CASE("no-grad guard records nothing") {
  Tape::active().clear();
  Tensor x = Tensor({2}, {1, 2}).set_requires_grad();
  {
    NoGradGuard guard;
    (void)exp(x);
  }
  CHECK(Tape::active().size() == 0);
}

TEST_CASE("MDT1 layout and round trip") {
  Rng rng(8);
  const Tensor t = Tensor::randn({2, 3, 4}, rng);
  std::ostringstream os;
  write_tensor(os, t);
  const std::string bytes = os.str();
  CHECK(bytes.size() == 4 + 1 + 3 * 8 + 24 * 8);
  CHECK(bytes.substr(0, 4) == "MDT1");
  CHECK(static_cast<unsigned char>(bytes[4]) == 3);
  CHECK(static_cast<unsigned char>(bytes[5]) == 2);  // little-endian extent 2
  for (int i = 6; i < 13; ++i) CHECK(bytes[i] == 0);

  std::istringstream is(bytes);
  const Tensor back = read_tensor(is);
  CHECK(back.shape() == t.shape());
  CHECK(vec(back) == vec(t));

  std::istringstream bad("MDT2xxxxxxxx");
  CHECK_THROWS_AS(read_tensor(bad), FormatError);
  std::istringstream truncated(bytes.substr(0, 40));
  CHECK_THROWS_AS(read_tensor(truncated), FormatError);

  const auto path = scratch("t.mdt");
  save_tensor(path, t);
  CHECK(vec(load_tensor(path)) == vec(t));
}

TEST_CASE("checkpoint round trip") {
  Rng rng(9);
  const Tensor a = Tensor::randn({3, 2}, rng), b = Tensor::randn({4}, rng);
  const auto path = scratch("ckpt.json");
  save_checkpoint(path, {{"kind", "test"}}, {{"a", a}, {"b", b}});
  const Checkpoint c = load_checkpoint(path);
  CHECK(c.header.at("kind") == "test");
  CHECK(vec(c.at("a")) == vec(a));
  CHECK(vec(c.at("b")) == vec(b));

  Tensor a2({3, 2}), b2({4});
  assign_parameters(c, {{"a", a2}, {"b", b2}});
  CHECK(vec(a2) == vec(a));
  Tensor wrong({2, 3});
  CHECK_THROWS(assign_parameters(c, {{"a", wrong}}));
}

TEST_CASE("seed derivation") {
  CHECK(derive_seed(7, "dataset") == derive_seed(7, "dataset"));
  CHECK(derive_seed(7, "dataset") != derive_seed(7, "denoiser"));
  CHECK(derive_seed(7, "dataset") != derive_seed(8, "dataset"));
  CHECK(derive_seed(7, "dataset") == splitmix64(7 ^ fnv1a64("dataset")));
  // FNV-1a reference values.
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("adam minimises a quadratic") {
  Tape::active().clear();
  Tensor x = Tensor({3}, {2.0, -1.0, 0.5}).set_requires_grad();
  const Tensor target({3}, {0.3, 0.1, -0.2});
  Adam opt({{"x", x}}, 0.05);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 300; ++i) {
    const Tensor loss = mse(x, target);
    if (i == 0) first = loss.item();
    last = loss.item();
    backward(loss);
    opt.step();
    Tape::active().clear();
  }
  CHECK(last < 1e-3 * first);
}

}  // TEST_SUITE
