#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>

#include "doctest.h"
#include "oracles.hpp"
#include "skelmamba/tensor.hpp"
#include "skelmamba/tensor_io.hpp"

using namespace skelmamba;

namespace {

// finite-difference gradient of a scalar-valued tensor expression w.r.t.
// one input, with the graph disabled inside the probe
double grad_check(const std::function<Tensor(const Tensor&)>& expr,
                  const Tensor& x, double eps = 1e-4) {
  Tensor x_rg = Tensor::from_data(x.shape(), x.values(), true);
  Tensor loss = expr(x_rg);
  backward(loss);
  auto fd = oracle::finite_diff(
      [&](const std::vector<double>& xs) {
        NoGradGuard ng;
        Tensor xt = Tensor::from_data(x.shape(), xs);
        return expr(xt).item();
      },
      x.values(), eps);
  return oracle::max_rel_err(x_rg.grad().values(), fd);
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {3, 4, 5, 6});
  Tensor out = matmul(eye, m);
  for (int64_t i = 0; i < 4; ++i) CHECK(out.data()[i] == m.data()[i]);

  Tensor a = Tensor::from_data({1, 2}, {1, 2});
  Tensor b = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == doctest::Approx(11.0));
}

TEST_CASE("matmul gradient of sum equals ones * b^T and finite differences") {
  Rng rng(11);
  Tensor a = Tensor::rand_uniform({4, 5}, rng, -2, 2, true);
  Tensor b = Tensor::rand_uniform({5, 3}, rng, -2, 2);

  Tensor loss = sum(matmul(a, b));
  backward(loss);
  Tensor ga = a.grad();
  // d(sum(AB))/dA = ones(4,3) * B^T
  for (int64_t i = 0; i < 4; ++i) {
    for (int64_t k = 0; k < 5; ++k) {
      double expect = 0.0;
      for (int64_t j = 0; j < 3; ++j) expect += b.at({k, j});
      CHECK(ga.at({i, k}) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  CHECK(grad_check([&](const Tensor& x) { return sum(matmul(x, b)); }, a) <
        1e-5);
}

TEST_CASE("matmul shape error names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,2)") != std::string::npos);
  }
}

TEST_CASE("elementwise hand cases") {
  CHECK(silu(Tensor::scalar(0.0)).item() == doctest::Approx(0.0));
  Tensor p = mul(Tensor::from_data({3}, {1, 2, 3}),
                 Tensor::from_data({3}, {4, 5, 6}));
  CHECK(p.at({0}) == 4);
  CHECK(p.at({1}) == 10);
  CHECK(p.at({2}) == 18);
}

TEST_CASE("reciprocal at zero raises") {
  Tensor z = Tensor::from_data({2}, {1.0, 0.0});
  CHECK_THROWS_AS(reciprocal(z), NumericError);
}

TEST_CASE("exp gradient matches finite differences") {
  Tensor x = Tensor::scalar(1.0);
  CHECK(grad_check([](const Tensor& t) { return sum(exp(t)); }, x, 1e-5) <
        1e-6);
}

TEST_CASE("every differentiable op passes finite differences on [-2,2]") {
  Rng rng(23);
  Tensor x = Tensor::rand_uniform({2, 3, 4}, rng, -2.0, 2.0);
  Tensor pos = Tensor::rand_uniform({2, 3, 4}, rng, 0.5, 2.0);
  Tensor other = Tensor::rand_uniform({2, 3, 4}, rng, -2.0, 2.0);
  Tensor vec = Tensor::rand_uniform({4}, rng, -2.0, 2.0);

  using Fn = std::function<Tensor(const Tensor&)>;
  struct Case {
    const char* name;
    Tensor input;
    Fn fn;
  };
  const std::vector<Case> cases = {
      {"add", x, [&](const Tensor& t) { return sum(add(t, other)); }},
      {"sub", x, [&](const Tensor& t) { return sum(sub(t, other)); }},
      {"mul", x, [&](const Tensor& t) { return sum(mul(t, other)); }},
      {"mul_bcast", x, [&](const Tensor& t) { return sum(mul(t, vec)); }},
      {"neg", x, [&](const Tensor& t) { return sum(mul(neg(t), other)); }},
      {"silu", x, [&](const Tensor& t) { return sum(mul(silu(t), other)); }},
      {"exp", x, [&](const Tensor& t) { return sum(mul(exp(t), other)); }},
      {"log", pos, [&](const Tensor& t) { return sum(mul(log(t), other)); }},
      {"sqrt", pos, [&](const Tensor& t) { return sum(mul(sqrt(t), other)); }},
      {"reciprocal", pos,
       [&](const Tensor& t) { return sum(mul(reciprocal(t), other)); }},
      {"sigmoid", x,
       [&](const Tensor& t) { return sum(mul(sigmoid(t), other)); }},
      {"softplus", x,
       [&](const Tensor& t) { return sum(mul(softplus(t), other)); }},
      {"softmax", x,
       [&](const Tensor& t) { return sum(mul(softmax(t, -1), other)); }},
      {"log_softmax", x,
       [&](const Tensor& t) { return sum(mul(log_softmax(t, 1), other)); }},
      {"mean_axis", x,
       [&](const Tensor& t) { return sum(mul(mean(t, 1, true), vec)); }},
      {"permute", x,
       [&](const Tensor& t) {
         return sum(mul(permute(t, {2, 0, 1}), Tensor::scalar(1.5)));
       }},
      {"slice", x,
       [&](const Tensor& t) { return sum(mul(slice(t, 2, 1, 2),
                                              Tensor::scalar(2.0))); }},
      {"flip", x,
       [&](const Tensor& t) { return sum(mul(flip(t, 1), other)); }},
      {"concat", x,
       [&](const Tensor& t) {
         return sum(mul(concat({t, t}, 0), Tensor::scalar(0.5)));
       }},
      {"broadcast_to", vec,
       [&](const Tensor& t) {
         return sum(mul(broadcast_to(t, {2, 3, 4}), other));
       }},
  };
  for (const auto& c : cases) {
    INFO(c.name);
    CHECK(grad_check(c.fn, c.input) < 1e-5);
  }
}

TEST_CASE("relu gradient away from the kink") {
  Rng rng(31);
  // offset inputs so no coordinate sits within eps of zero
  std::vector<double> vals(24);
  for (auto& v : vals) {
    v = rng.uniform(0.1, 2.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  }
  Tensor x = Tensor::from_data({2, 3, 4}, vals);
  CHECK(grad_check([](const Tensor& t) { return sum(mul(relu(t), t)); }, x) <
        1e-5);
}

TEST_CASE("softmax hand cases") {
  Tensor u = softmax(Tensor::from_data({3}, {0, 0, 0}), 0);
  for (int i = 0; i < 3; ++i) {
    CHECK(u.data()[i] == doctest::Approx(1.0 / 3));
  }
  Tensor big = softmax(Tensor::from_data({2}, {1000, 0}), 0);
  CHECK(big.at({0}) == doctest::Approx(1.0));
  CHECK(big.at({1}) == doctest::Approx(0.0));
  check_finite(big, "softmax overflow case");

  Rng rng(5);
  Tensor r = softmax(Tensor::rand_uniform({7}, rng, -3, 3), 0);
  double s = 0;
  for (int i = 0; i < 7; ++i) s += r.data()[i];
  CHECK(std::fabs(s - 1.0) < 1e-12);
}

TEST_CASE("layer_norm hand cases and gradient") {
  Tensor gamma = Tensor::full({4}, 1.0);
  Tensor beta = Tensor::zeros({4});
  Tensor c = layer_norm(Tensor::full({2, 4}, 3.0), 1, gamma, beta, 1e-5);
  for (int64_t i = 0; i < c.numel(); ++i) {
    CHECK(c.data()[i] == doctest::Approx(0.0));
  }

  Tensor g2 = Tensor::full({2}, 1.0);
  Tensor b2 = Tensor::zeros({2});
  Tensor h = layer_norm(Tensor::from_data({1, 2}, {1, 3}), 1, g2, b2, 0.0);
  CHECK(h.at({0, 0}) == doctest::Approx(-1.0));
  CHECK(h.at({0, 1}) == doctest::Approx(1.0));

  Rng rng(17);
  Tensor x = Tensor::rand_uniform({2, 4}, rng, -2, 2);
  Tensor w = Tensor::rand_uniform({2, 4}, rng, -1, 1);
  CHECK(grad_check(
            [&](const Tensor& t) {
              return sum(mul(layer_norm(t, 1, gamma, beta, 1e-5), w));
            },
            x) < 1e-5);
  // gamma/beta gradients as well
  Tensor xg = Tensor::rand_uniform({2, 4}, rng, -2, 2);
  CHECK(grad_check(
            [&](const Tensor& g) {
              return sum(mul(layer_norm(xg, 1, g, beta, 1e-5), w));
            },
            gamma) < 1e-5);
}

TEST_CASE("backward basics") {
  Rng rng(3);
  Tensor x = Tensor::rand_uniform({5}, rng, -2, 2, true);
  backward(sum(x));
  for (int i = 0; i < 5; ++i) {
    CHECK(x.grad().data()[i] == doctest::Approx(1.0));
  }
  x.clear_grad();
  backward(sum(mul(x, x)));
  for (int i = 0; i < 5; ++i) {
    CHECK(x.grad().data()[i] == doctest::Approx(2.0 * x.data()[i]));
  }
}

TEST_CASE("backward requires scalar root") {
  Tensor x = Tensor::zeros({3}, true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), ConfigError);
}

TEST_CASE("backward twice after grad reset is bit-identical") {
  Rng rng(41);
  Tensor x = Tensor::rand_uniform({3, 3}, rng, -1, 1, true);
  Tensor w = Tensor::rand_uniform({3, 3}, rng, -1, 1);
  Tensor loss = sum(mul(softmax(matmul(x, w), 1), w));
  backward(loss);
  std::vector<double> g1 = x.grad().values();
  x.clear_grad();
  backward(loss);
  std::vector<double> g2 = x.grad().values();
  for (size_t i = 0; i < g1.size(); ++i) {
    CHECK(g1[i] == g2[i]);  // exact bit equality
  }
}

TEST_CASE("tape order invariant: parents precede nodes") {
  Rng rng(2);
  Tensor x = Tensor::rand_uniform({2, 2}, rng, -1, 1, true);
  Tensor y = mul(add(x, x), matmul(x, x));
  // walk the graph: every parent id must be smaller
  std::vector<Tensor> stack{y};
  while (!stack.empty()) {
    Tensor t = stack.back();
    stack.pop_back();
    for (uint64_t pid : t.parent_ids()) {
      CHECK(pid < t.node_id());
    }
    auto node = t.node();
    for (auto& p : node->parents) stack.push_back(wrap_node(p));
  }
}

TEST_CASE("broadcasting follows trailing-axis alignment (rank<=3 sweep)") {
  // all shape pairs with ranks <= 3 and extents from {1,2,3},
  // checked against a scalar loop oracle
  Rng rng(7);
  std::vector<Shape> shapes = {{},    {1},    {2},    {3},    {1, 2}, {2, 1},
                               {2, 3}, {3, 1}, {1, 1}, {2, 2}, {2, 1, 3},
                               {1, 3, 1}, {2, 3, 1}, {3, 1, 2}, {1, 1, 1}};
  int checked = 0;
  for (const auto& sa : shapes) {
    for (const auto& sb : shapes) {
      Shape out;
      bool compatible = true;
      try {
        out = broadcast_shape(sa, sb);
      } catch (const ShapeError&) {
        compatible = false;
      }
      if (!compatible) continue;
      Tensor a = Tensor::rand_uniform(sa, rng, -2, 2);
      Tensor b = Tensor::rand_uniform(sb, rng, -2, 2);
      Tensor c = add(a, b);
      REQUIRE(c.shape() == out);
      // scalar loop: index arithmetic done from scratch
      const int64_t n = c.numel();
      const size_t r = out.size();
      std::vector<int64_t> idx(r, 0);
      for (int64_t lin = 0; lin < n; ++lin) {
        auto offset_of = [&](const Shape& s) {
          int64_t off = 0;
          for (size_t d = 0; d < s.size(); ++d) {
            const int64_t ix = idx[r - s.size() + d];
            const int64_t e = s[d] == 1 ? 0 : ix;
            off = off * s[d] + e;
          }
          return off;
        };
        const double expect = a.data()[offset_of(sa)] + b.data()[offset_of(sb)];
        CHECK(c.data()[lin] == doctest::Approx(expect).epsilon(1e-14));
        for (int64_t d = int64_t(r) - 1; d >= 0; --d) {
          if (++idx[d] < out[d]) break;
          idx[d] = 0;
        }
      }
      ++checked;
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("tensor dump format round trip and exact header") {
  Rng rng(13);
  Tensor t = Tensor::rand_uniform({2, 3}, rng, -1, 1);
  auto bytes = tdmt_bytes(t, DumpDtype::f64);
  // magic, version, dtype
  CHECK(bytes[0] == 'T');
  CHECK(bytes[1] == 'D');
  CHECK(bytes[2] == 'M');
  CHECK(bytes[3] == 'T');
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 1);
  // rank as little-endian u32
  CHECK(bytes[6] == 2);
  CHECK(bytes[7] == 0);
  // extents as little-endian u64
  CHECK(bytes[10] == 2);
  CHECK(bytes[18] == 3);
  CHECK(bytes.size() == 10 + 16 + 6 * 8);

  Tensor back = tdmt_from_bytes(bytes);
  REQUIRE(back.shape() == t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) {
    CHECK(back.data()[i] == t.data()[i]);
  }

  // f32 payload rounds through float
  auto bytes32 = tdmt_bytes(t, DumpDtype::f32);
  CHECK(bytes32.size() == 10 + 16 + 6 * 4);
  Tensor back32 = tdmt_from_bytes(bytes32);
  for (int64_t i = 0; i < t.numel(); ++i) {
    CHECK(back32.data()[i] == double(float(t.data()[i])));
  }
}

TEST_CASE("f32 mode rounds op results through single precision") {
  set_default_precision(Precision::f32);
  Tensor a = Tensor::scalar(1.0 / 3.0);
  Tensor b = mul(a, a);
  CHECK(b.item() == double(float(double(float(1.0 / 3.0)) *
                                 double(float(1.0 / 3.0)))));
  set_default_precision(Precision::f64);
  Tensor c = mul(Tensor::scalar(1.0 / 3.0), Tensor::scalar(1.0 / 3.0));
  CHECK(c.item() == (1.0 / 3.0) * (1.0 / 3.0));
}

TEST_CASE("non-finite op output raises when strict checks on") {
  set_strict_finite_checks(true);
  Tensor big = Tensor::full({2}, 1e308);
  CHECK_THROWS_AS(mul(big, big), NumericError);
  set_strict_finite_checks(false);
}
