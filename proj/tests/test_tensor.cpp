#include <catch2/catch_amalgamated.hpp>

#include "relight/nn.hpp"
#include "relight/tensor.hpp"
#include "support.hpp"

using namespace relight;
using testsup::check_gradient;
using testsup::random_tensor;

TEST_CASE("matmul identity and shape checks", "[tensor]") {
  Tensor I = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  RngStream rng(CounterRng(11), 0);
  Tensor X = random_tensor({3, 3}, rng, 1.0f, false);
  Tensor Y = matmul(I, X);
  for (int i = 0; i < 9; ++i) REQUIRE(Y.data()[i] == Catch::Approx(X.data()[i]));

  Tensor bad = Tensor::zeros({4, 2});
  REQUIRE_THROWS_AS(matmul(I, bad), ShapeError);
  REQUIRE_THROWS_WITH(matmul(I, bad), Catch::Matchers::ContainsSubstring("matmul"));
}

TEST_CASE("relu and sigmoid basics", "[tensor]") {
  Tensor x = Tensor::from_data({3}, {-1, 0, 2});
  Tensor y = relu(x);
  REQUIRE(y.data()[0] == 0.0f);
  REQUIRE(y.data()[1] == 0.0f);
  REQUIRE(y.data()[2] == 2.0f);

  // d sigmoid(0) = 0.25
  Tensor z = Tensor::from_data({1}, {0.0f}, true);
  Graph g;
  Tensor s = sigmoid(z);
  g.backward(s);
  REQUIRE(z.grad_view()[0] == Catch::Approx(0.25f));
}

TEST_CASE("backward of sum(x*x) is 2x", "[tensor]") {
  Tensor x = Tensor::from_data({1}, {3.0f}, true);
  Graph g;
  Tensor loss = sum(mul(x, x));
  g.backward(loss);
  REQUIRE(x.grad_view()[0] == Catch::Approx(6.0f));
}

TEST_CASE("fan-out accumulates gradients: y = x + x", "[tensor]") {
  Tensor x = Tensor::from_data({4}, {1, 2, 3, 4}, true);
  Graph g;
  Tensor loss = sum(add(x, x));
  g.backward(loss);
  for (int i = 0; i < 4; ++i) REQUIRE(x.grad_view()[i] == Catch::Approx(2.0f));
}

TEST_CASE("backward rejects non-scalar loss", "[tensor]") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  Graph g;
  Tensor y = mul(x, x);
  REQUIRE_THROWS_AS(g.backward(y), ShapeError);
}

TEST_CASE("random 3-layer MLP gradient matches finite differences", "[tensor]") {
  RngStream rng(CounterRng(42), 1);
  Mlp net(5, {8, 8}, 1, rng);
  // Redraw inputs until every ReLU preactivation is clear of its kink; inside
  // the probe step the finite-difference oracle itself is invalid there.
  Tensor input;
  for (int attempt = 0; attempt < 200; ++attempt) {
    input = random_tensor({4, 5}, rng, 1.0f, false);
    Tensor h = input;
    float margin = 1e9f;
    for (size_t i = 0; i + 1 < net.layers.size(); ++i) {
      h = net.layers[i].forward(h);
      for (int64_t j = 0; j < h.numel(); ++j) margin = std::min(margin, std::abs(h.data()[j]));
      h = relu(h);
    }
    if (margin > 0.05f) break;
  }
  auto forward = [&]() { return net.forward(input); };
  for (auto& p : net.parameters()) {
    REQUIRE(check_gradient(p, forward) < 1e-3);
  }
}

TEST_CASE("elementwise op gradients match finite differences", "[tensor]") {
  RngStream rng(CounterRng(7), 2);
  auto check_unary = [&](const char* name, std::function<Tensor(const Tensor&)> op, float scale,
                         float shift) {
    Tensor x = random_tensor({17}, rng, scale, true);
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] += shift;
    auto fwd = [&]() { return (mul(op(x), op(x))); };
    INFO(name);
    REQUIRE(check_gradient(x, fwd) < 1e-3);
  };
  check_unary("sigmoid", [](const Tensor& t) { return sigmoid(t); }, 1.0f, 0.0f);
  check_unary("exp", [](const Tensor& t) { return exp(t); }, 0.5f, 0.0f);
  check_unary("log", [](const Tensor& t) { return log(t); }, 0.1f, 2.0f);
  check_unary("tanh", [](const Tensor& t) { return tanh_t(t); }, 1.0f, 0.0f);
  check_unary("affine", [](const Tensor& t) { return affine(t, 2.5f, -1.0f); }, 1.0f, 0.0f);

  Tensor a = random_tensor({9}, rng, 1.0f, true);
  Tensor b = random_tensor({9}, rng, 1.0f, true);
  for (int64_t i = 0; i < b.numel(); ++i) b.data()[i] += 3.0f;  // keep div well-conditioned
  auto fwd2 = [&]() { return (mul(div(a, b), sub(a, b))); };
  REQUIRE(check_gradient(a, fwd2) < 1e-3);
  REQUIRE(check_gradient(b, fwd2) < 1e-3);
}

TEST_CASE("positional encoding gradient and layout", "[tensor]") {
  RngStream rng(CounterRng(3), 0);
  Tensor x = random_tensor({3, 2}, rng, 0.3f, true);
  Tensor y = positional_encoding(x, 4);
  REQUIRE(y.shape() == std::vector<int>{3, 2 * (1 + 8)});
  REQUIRE(y.data()[0] == Catch::Approx(x.data()[0]));
  REQUIRE(y.data()[1] == Catch::Approx(std::sin(kPi * x.data()[0])));
  auto fwd = [&]() { return (mul(positional_encoding(x, 4), positional_encoding(x, 4))); };
  REQUIRE(check_gradient(x, fwd, 1e-3f) < 2e-3);
}

TEST_CASE("conv2d gradients match finite differences", "[tensor]") {
  RngStream rng(CounterRng(9), 0);
  for (int stride : {1, 2}) {
    Tensor x = random_tensor({2, 6, 5}, rng, 1.0f, true);
    Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.5f, true);
    Tensor b = random_tensor({3}, rng, 0.5f, true);
    auto fwd = [&]() {
      Tensor y = conv2d(x, w, b, stride);
      return (mul(y, y));
    };
    INFO("stride " << stride);
    // the loss is quadratic in every argument, so a larger step only
    // reduces float32 rounding noise (truncation is exactly zero)
    REQUIRE(check_gradient(x, fwd, 1e-2f) < 1e-3);
    REQUIRE(check_gradient(w, fwd, 1e-2f) < 1e-3);
    REQUIRE(check_gradient(b, fwd, 1e-2f) < 1e-3);
  }
}

TEST_CASE("partial conv with full mask equals plain conv", "[tensor]") {
  RngStream rng(CounterRng(21), 0);
  Tensor x = random_tensor({3, 8, 7}, rng, 1.0f, false);
  Tensor w = random_tensor({4, 3, 3, 3}, rng, 0.5f, false);
  Tensor b = random_tensor({4}, rng, 0.5f, false);
  Tensor mask = Tensor::full({1, 8, 7}, 1.0f);
  Tensor plain = conv2d(x, w, b);
  auto part = partial_conv2d(x, mask, w, b);
  REQUIRE(plain.numel() == part.value.numel());
  for (int64_t i = 0; i < plain.numel(); ++i)
    REQUIRE(std::abs(plain.data()[i] - part.value.data()[i]) < 1e-6f);
  for (int64_t i = 0; i < part.mask.numel(); ++i) REQUIRE(part.mask.data()[i] == 1.0f);
}

TEST_CASE("partial conv renormalizes by coverage and updates mask", "[tensor]") {
  // One valid texel in a 3x3 window: ratio is 9, so output = 9 * w * x + b.
  Tensor x = Tensor::zeros({1, 5, 5});
  x.data()[2 * 5 + 2] = 2.0f;
  Tensor mask = Tensor::zeros({1, 5, 5});
  mask.data()[2 * 5 + 2] = 1.0f;
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor b = Tensor::zeros({1});
  auto out = partial_conv2d(x, mask, w, b);
  REQUIRE(out.value.data()[2 * 5 + 2] == Catch::Approx(9.0f * 2.0f));
  // Mask dilates by the kernel footprint.
  REQUIRE(out.mask.data()[1 * 5 + 1] == 1.0f);
  REQUIRE(out.mask.data()[0 * 5 + 0] == 0.0f);
  // Far corner has no valid taps: output zero, mask invalid.
  REQUIRE(out.value.data()[4 * 5 + 4] == 0.0f);
  REQUIRE(out.mask.data()[4 * 5 + 4] == 0.0f);
}

TEST_CASE("partial conv gradients match finite differences", "[tensor]") {
  RngStream rng(CounterRng(23), 0);
  Tensor x = random_tensor({2, 6, 6}, rng, 1.0f, true);
  Tensor w = random_tensor({2, 2, 3, 3}, rng, 0.5f, true);
  Tensor b = random_tensor({2}, rng, 0.5f, true);
  Tensor mask = Tensor::zeros({1, 6, 6});
  for (int i = 0; i < 36; ++i) mask.data()[i] = (i * 7) % 3 == 0 ? 1.0f : 0.0f;
  auto fwd = [&]() {
    auto out = partial_conv2d(x, mask, w, b, 1);
    return (mul(out.value, out.value));
  };
  REQUIRE(check_gradient(x, fwd) < 1e-3);
  REQUIRE(check_gradient(w, fwd) < 1e-3);
  REQUIRE(check_gradient(b, fwd) < 1e-3);
}

TEST_CASE("depth_to_space layout and gradient", "[tensor]") {
  Tensor x = Tensor::from_data({4, 1, 1}, {1, 2, 3, 4}, true);
  Tensor y = depth_to_space(x);
  REQUIRE(y.shape() == std::vector<int>{1, 2, 2});
  REQUIRE(y.data()[0] == 1.0f);  // (0,0) <- channel 0
  REQUIRE(y.data()[1] == 2.0f);  // (0,1) <- channel 1
  REQUIRE(y.data()[2] == 3.0f);  // (1,0) <- channel 2
  REQUIRE(y.data()[3] == 4.0f);
  auto fwd = [&]() { return (mul(depth_to_space(x), depth_to_space(x))); };
  REQUIRE(check_gradient(x, fwd) < 1e-3);
}

TEST_CASE("concat_channels splits gradients", "[tensor]") {
  RngStream rng(CounterRng(5), 0);
  Tensor a = random_tensor({1, 2, 2}, rng, 1.0f, true);
  Tensor b = random_tensor({2, 2, 2}, rng, 1.0f, true);
  auto fwd = [&]() {
    Tensor y = concat_channels({a, b});
    return (mul(y, y));
  };
  REQUIRE(check_gradient(a, fwd) < 1e-3);
  REQUIRE(check_gradient(b, fwd) < 1e-3);
}

TEST_CASE("grid_sample_2d map and coordinate gradients", "[tensor]") {
  RngStream rng(CounterRng(31), 0);
  Tensor map = random_tensor({2, 6, 6}, rng, 1.0f, true);
  std::vector<float> cdata;
  for (int i = 0; i < 5; ++i) {
    cdata.push_back(0.15f + 0.13f * i);
    cdata.push_back(0.7f - 0.09f * i);
  }
  Tensor coords = Tensor::from_data({5, 2}, cdata, true);
  auto fwd = [&]() {
    Tensor y = grid_sample_2d(map, coords);
    return (mul(y, y));
  };
  REQUIRE(check_gradient(map, fwd) < 1e-3);
  REQUIRE(check_gradient(coords, fwd, 1e-4f) < 2e-3);
}

TEST_CASE("grid_sample_3d interpolates and backpropagates to grid", "[tensor]") {
  Tensor grid = Tensor::zeros({1, 2, 2, 2}, true);
  for (int i = 0; i < 8; ++i) grid.data()[i] = float(i);
  Tensor coords = Tensor::from_data({1, 3}, {0.5f, 0.5f, 0.5f});
  Tensor y = grid_sample_3d(grid, coords);
  REQUIRE(y.data()[0] == Catch::Approx(3.5f));  // mean of 0..7

  RngStream rng(CounterRng(33), 0);
  Tensor g2 = random_tensor({2, 3, 3, 3}, rng, 1.0f, true);
  Tensor c2 = Tensor::from_data({4, 3}, {0.2f, 0.3f, 0.4f, 0.7f, 0.6f, 0.5f,
                                         0.1f, 0.9f, 0.3f, 0.5f, 0.5f, 0.5f});
  auto fwd = [&]() {
    Tensor y2 = grid_sample_3d(g2, c2);
    return (mul(y2, y2));
  };
  REQUIRE(check_gradient(g2, fwd) < 1e-3);
}

TEST_CASE("volume_weights forward matches closed form and gradient checks", "[tensor]") {
  RngStream rng(CounterRng(41), 0);
  Tensor sigma = random_tensor({3, 6}, rng, 0.0f, true);
  for (int64_t i = 0; i < sigma.numel(); ++i) sigma.data()[i] = 0.2f + 0.8f * rng.uniform();
  Tensor dbar = Tensor::full({3, 6}, 0.31f);
  Tensor w = volume_weights(sigma, dbar);
  // closed form for row 0
  double tau = 0;
  for (int n = 0; n < 6; ++n) {
    double sdb = double(sigma.data()[n]) * 0.31;
    double expect = std::exp(-tau) * (1.0 - std::exp(-sdb));
    REQUIRE(w.data()[n] == Catch::Approx(expect).margin(1e-6));
    tau += sdb;
  }
  auto fwd = [&]() {
    Tensor ww = volume_weights(sigma, dbar);
    return (mul(ww, ww));
  };
  REQUIRE(check_gradient(sigma, fwd) < 1e-3);
}

TEST_CASE("weighted_reduce and scatter_rows gradients", "[tensor]") {
  RngStream rng(CounterRng(43), 0);
  Tensor w = random_tensor({3, 4}, rng, 1.0f, true);
  Tensor v = random_tensor({3, 4, 2}, rng, 1.0f, true);
  auto fwd = [&]() {
    Tensor y = weighted_reduce(w, v);
    return (mul(y, y));
  };
  REQUIRE(check_gradient(w, fwd) < 1e-3);
  REQUIRE(check_gradient(v, fwd) < 1e-3);

  Tensor vals = random_tensor({3}, rng, 1.0f, true);
  std::vector<int> idx = {5, 1, 3};
  auto fwd2 = [&]() {
    Tensor y = scatter_rows(vals, idx, 7, -2.0f);
    return (mul(y, y));
  };
  REQUIRE(check_gradient(vals, fwd2) < 1e-3);
  Tensor s = scatter_rows(vals, idx, 7, -2.0f);
  REQUIRE(s.data()[0] == -2.0f);
  REQUIRE(s.data()[5] == vals.data()[0]);
}

TEST_CASE("forward passes are deterministic", "[tensor]") {
  RngStream rng(CounterRng(77), 0);
  Tensor x = random_tensor({3, 32, 32}, rng, 1.0f, false);
  Tensor w = random_tensor({8, 3, 3, 3}, rng, 0.3f, false);
  Tensor b = random_tensor({8}, rng, 0.1f, false);
  Tensor y1 = conv2d(x, w, b);
  Tensor y2 = conv2d(x, w, b);
  REQUIRE(std::memcmp(y1.data(), y2.data(), sizeof(float) * y1.numel()) == 0);
  Tensor s1 = sum(y1), s2 = sum(y2);
  REQUIRE(s1.data()[0] == s2.data()[0]);
}

TEST_CASE("adam first step magnitude equals lr and zero grad is a no-op", "[tensor]") {
  Tensor p = Tensor::from_data({4}, {1, 2, 3, 4}, true);
  Adam opt({p}, {.lr = 0.1f});
  std::fill(p.grad().begin(), p.grad().end(), 1.0f);
  opt.step();
  for (int i = 0; i < 4; ++i)
    REQUIRE(p.data()[i] == Catch::Approx(float(i + 1) - 0.1f).epsilon(1e-4));

  Tensor q = Tensor::from_data({2}, {5, 6}, true);
  Adam opt2({q}, {.lr = 0.1f});
  q.grad();  // allocate, stays zero
  opt2.step();
  REQUIRE(q.data()[0] == 5.0f);
  REQUIRE(q.data()[1] == 6.0f);
}

TEST_CASE("adam rejects missing gradients", "[tensor]") {
  Tensor p = Tensor::from_data({2}, {1, 2}, true);
  Adam opt({p});
  REQUIRE_THROWS_AS(opt.step(), Error);
}

TEST_CASE("adam converges on the quadratic bowl", "[tensor]") {
  Tensor x = Tensor::from_data({1}, {5.0f}, true);
  Adam opt({x}, {.lr = 0.1f});
  for (int i = 0; i < 200; ++i) {
    Graph g;
    Tensor loss = mul(x, x);
    g.backward(loss);
    opt.step();
  }
  REQUIRE(std::abs(x.data()[0]) < 0.05f);
}

TEST_CASE("checkpoint container round-trips tensors", "[tensor]") {
  RngStream rng(CounterRng(55), 0);
  Tensor a = random_tensor({3, 4}, rng, 1.0f, false);
  Tensor b = random_tensor({7}, rng, 1.0f, false);
  std::string path = testsup::temp_dir("ckpt") + "/weights.rlna";
  save_checkpoint(path, {{"layer.weight", a}, {"layer.bias", b}});
  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == 2);
  REQUIRE(loaded.at("layer.weight").shape() == a.shape());
  for (int64_t i = 0; i < a.numel(); ++i)
    REQUIRE(loaded.at("layer.weight").data()[i] == a.data()[i]);
  REQUIRE(loaded.at("layer.bias").data()[3] == b.data()[3]);

  REQUIRE_THROWS_AS(load_checkpoint(testsup::temp_dir("ckpt") + "/missing.rlna"), IoError);
}
