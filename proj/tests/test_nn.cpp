#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cactusnet/error.hpp"
#include "cactusnet/nn.hpp"
#include "cactusnet/ops.hpp"
#include "cactusnet/rng.hpp"
#include "gradcheck.hpp"
#include "reference_ops.hpp"

using namespace cnl;
using namespace gradcheck;

TEST_SUITE("conv2d") {
  TEST_CASE("identity 1x1 kernel returns the input") {
    Tensor in({3, 3, 1}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor k({1, 1, 1, 1}, 1.0f);
    CHECK(ops::conv2d(in, k, 1) == in);
  }

  TEST_CASE("zero kernel annihilates") {
    Rng rng(3);
    const auto in = random_tensor({5, 6, 2}, rng);
    const auto out = ops::conv2d(in, Tensor({2, 3, 2, 4}), 1);
    CHECK(out.shape() == Shape{4, 4, 4});
    CHECK(std::all_of(out.values().begin(), out.values().end(), [](float v) { return v == 0.0f; }));
  }

  TEST_CASE("4x4 input with 2x2 kernel matches the direct loop oracle") {
    Rng rng(11);
    const auto in = random_tensor({4, 4, 1}, rng);
    const auto k = random_tensor({2, 2, 1, 1}, rng);
    const auto out = ops::conv2d(in, k, 1);
    REQUIRE(out.shape() == Shape{3, 3, 1});
    std::size_t oh, ow;
    const auto expect = ref::conv2d(ref::to_fvec(in), 4, 4, 1, ref::to_fvec(k), 2, 2, 1, 1, {}, oh, ow);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::abs(out[i] - expect[i]) <= 1e-6);
  }

  TEST_CASE("oracle equivalence over random shapes with sides <= 8") {
    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8), ci = 1 + rng.below(4), co = 1 + rng.below(4);
      const std::size_t kh = 1 + rng.below(h), kw = 1 + rng.below(w), stride = 1 + rng.below(3);
      const auto in = random_tensor({h, w, ci}, rng);
      const auto k = random_tensor({kh, kw, ci, co}, rng);
      const auto b = random_tensor({co}, rng);
      const auto out = ops::conv2d(in, k, stride, b);
      std::size_t oh, ow;
      const auto expect =
          ref::conv2d(ref::to_fvec(in), h, w, ci, ref::to_fvec(k), kh, kw, co, stride, ref::to_fvec(b), oh, ow);
      REQUIRE(out.shape() == Shape{oh, ow, co});
      // the double-precision loop bounds the float32 rounding as well
      const auto exact =
          ref::conv2d(ref::to_vec(in), h, w, ci, ref::to_vec(k), kh, kw, co, stride, ref::to_vec(b), oh, ow);
      double worst = 0, worst_exact = 0;
      for (std::size_t i = 0; i < out.size(); ++i) {
        worst = std::max(worst, static_cast<double>(std::abs(out[i] - expect[i])));
        worst_exact = std::max(worst_exact, std::abs(out[i] - exact[i]));
      }
      CHECK(worst <= 1e-6);
      CHECK(worst_exact <= 1e-5);
    }
  }

  TEST_CASE("shape mismatch names both shapes") {
    Tensor in({4, 4, 2});
    Tensor k({2, 2, 3, 1});
    try {
      ops::conv2d(in, k, 1);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[4,4,2]") != std::string::npos);
      CHECK(msg.find("[2,2,3,1]") != std::string::npos);
    }
    CHECK_THROWS_AS(ops::conv2d(Tensor({2, 2, 1}), Tensor({3, 3, 1, 1}), 1), ShapeError);
  }
}

TEST_SUITE("forward") {
  TEST_CASE("single ReLU") {
    Network net({2}, {LayerSpec::relu()});
    const auto trace = forward(net, Tensor({1, 2}, std::vector<float>{-1, 2}));
    REQUIRE(trace.outputs.size() == 1);
    CHECK(trace.final_output() == Tensor({1, 2}, std::vector<float>{0, 2}));
  }

  TEST_CASE("single Softmax on zeros is uniform") {
    Network net({2}, {LayerSpec::softmax()});
    const auto out = forward(net, Tensor({1, 2})).final_output();
    CHECK(out[0] == doctest::Approx(0.5));
    CHECK(out[1] == doctest::Approx(0.5));
  }

  TEST_CASE("identity Dense then ReLU") {
    Network net({2}, {LayerSpec::dense(2), LayerSpec::relu()});
    net.params(0).weights = Tensor({2, 2}, std::vector<float>{1, 0, 0, 1});
    const auto trace = forward(net, Tensor({1, 2}, std::vector<float>{3, -3}));
    REQUIRE(trace.outputs.size() == 2);
    CHECK(trace.final_output() == Tensor({1, 2}, std::vector<float>{3, 0}));
  }

  TEST_CASE("softmax rows are normalized") {
    Rng rng(5);
    auto net = Network::create({6, 6, 1},
                               {LayerSpec::conv2d(3, 3), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::dense(7),
                                LayerSpec::softmax()},
                               9);
    const auto out = forward(net, random_tensor({16, 6, 6, 1}, rng, -5, 5)).final_output();
    for (std::size_t r = 0; r < 16; ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        const float p = out[r * 7 + c];
        CHECK(p >= 0.0f);
        CHECK(p <= 1.0f);
        sum += p;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-5);
    }
  }

  TEST_CASE("nonconforming batch is rejected") {
    Network net({4, 4, 1}, {LayerSpec::conv2d(2, 3)});
    CHECK_THROWS_AS(forward(net, Tensor({2, 5, 4, 1})), ShapeError);
    CHECK_THROWS_AS(forward(net, Tensor({4, 4, 1})), ShapeError);
  }

  TEST_CASE("incompatible layer stack is rejected at construction") {
    CHECK_THROWS_AS(Network({4, 4, 1}, {LayerSpec::dense(3)}), ShapeError);
    CHECK_THROWS_AS(Network({4, 4, 1}, {LayerSpec::conv2d(2, 5)}), ShapeError);
    CHECK_THROWS_AS(Network({4, 4, 1}, {LayerSpec::max_pool(2, 0)}), ShapeError);
  }

  TEST_CASE("forward_range composes with itself") {
    Rng rng(8);
    auto net = Network::create({8, 8, 1},
                               {LayerSpec::conv2d(4, 3), LayerSpec::relu(), LayerSpec::max_pool(2, 2),
                                LayerSpec::flatten(), LayerSpec::dense(3), LayerSpec::softmax()},
                               4);
    const auto x = random_tensor({5, 8, 8, 1}, rng);
    const auto mid = forward_range(net, x, 0, 3);
    const auto tail = forward_range(net, mid, 3, net.layer_count());
    CHECK(bitwise_equal(tail, predict(net, x)));
    CHECK(bitwise_equal(predict(net, x, 2), predict(net, x, 100)));
  }
}

TEST_SUITE("backward") {
  TEST_CASE("MSE at the target is zero with zero gradients") {
    Rng rng(1);
    auto net = Network::create({3}, {LayerSpec::dense(2)}, 1);
    const auto x = random_tensor({4, 3}, rng);
    const auto y = predict(net, x);
    const auto g = backward(net, x, y, LossKind::MSE);
    CHECK(g.loss == 0.0);
    for (float v : g.layers[0].weights.values()) CHECK(v == 0.0f);
    for (float v : g.layers[0].bias.values()) CHECK(v == 0.0f);
  }

  TEST_CASE("MSE of (0.5,0.5) against (1,0) is 0.25") {
    Network net({1}, {LayerSpec::dense(2)});
    net.params(0).bias = Tensor({2}, 0.5f);
    const auto g = backward(net, Tensor({1, 1}), Tensor({1, 2}, std::vector<float>{1, 0}), LossKind::MSE);
    CHECK(g.loss == doctest::Approx(0.25).epsilon(1e-12));
  }

  TEST_CASE("target shape mismatch is an error") {
    auto net = Network::create({3}, {LayerSpec::dense(2), LayerSpec::softmax()}, 1);
    CHECK_THROWS_AS(backward(net, Tensor({2, 3}), Tensor({2, 3}), LossKind::MSE), ShapeError);
    CHECK_THROWS_AS(backward(net, Tensor({2, 3}), Tensor({1, 2}), LossKind::CrossEntropy), ShapeError);
  }

  TEST_CASE("cross-entropy requires a softmax output") {
    auto net = Network::create({3}, {LayerSpec::dense(2)}, 1);
    CHECK_THROWS_AS(backward(net, Tensor({1, 3}), Tensor({1, 2}), LossKind::CrossEntropy),
                    UnsupportedArchitecture);
  }

  TEST_CASE("overflow during backprop reports the layer") {
    Network net({1}, {LayerSpec::dense(1), LayerSpec::dense(1)});
    net.params(0).weights[0] = 1e20f;
    net.params(1).weights[0] = 1e20f;
    try {
      backward(net, Tensor({1, 1}, 1e-20f), Tensor({1, 1}), LossKind::MSE);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(e.layer() == 1);
    }
  }

  TEST_CASE("frozen layers get no gradient") {
    auto net = Network::create({4}, {LayerSpec::dense(3), LayerSpec::relu(), LayerSpec::dense(2)}, 3);
    net.freeze_through(1);
    Rng rng(2);
    const auto g = backward(net, random_tensor({2, 4}, rng), random_tensor({2, 2}, rng), LossKind::MSE);
    CHECK(g.layers[0].empty());
    CHECK_FALSE(g.layers[2].empty());
  }
}

TEST_SUITE("gradient check") {
  // Each layer kind on its own, 20+ seeds, sides <= 8, MSE against random targets.
  TEST_CASE("Conv2D") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const std::size_t h = 3 + rng.below(6), w = 3 + rng.below(6), ci = 1 + rng.below(3);
      const std::size_t k = 1 + rng.below(3), stride = 1 + rng.below(2);
      auto net = Network::create({h, w, ci}, {LayerSpec::conv2d(1 + rng.below(3), k, stride)}, seed);
      for (auto& b : net.params(0).bias.values()) b = static_cast<float>(rng.uniform(-0.5, 0.5));
      const auto x = random_tensor({2, h, w, ci}, rng);
      Shape out{2};
      for (auto d : net.output_shape()) out.push_back(d);
      const auto r = finite_difference_check(net, x, random_tensor(out, rng), LossKind::MSE, true);
      CAPTURE(seed);
      CHECK(r.worst < 1e-3);
    }
  }

  TEST_CASE("Dense") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(100 + seed);
      const std::size_t ni = 1 + rng.below(8), no = 1 + rng.below(8);
      auto net = Network::create({ni}, {LayerSpec::dense(no)}, seed);
      for (auto& b : net.params(0).bias.values()) b = static_cast<float>(rng.uniform(-0.5, 0.5));
      const auto r = finite_difference_check(net, random_tensor({3, ni}, rng), random_tensor({3, no}, rng),
                                             LossKind::MSE, true);
      CAPTURE(seed);
      CHECK(r.worst < 1e-3);
    }
  }

  TEST_CASE("MaxPool2D") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(200 + seed);
      const std::size_t h = 2 + rng.below(7), w = 2 + rng.below(7), c = 1 + rng.below(3);
      const std::size_t k = 1 + rng.below(std::min<std::size_t>(3, std::min(h, w))), stride = 1 + rng.below(2);
      Network net({h, w, c}, {LayerSpec::max_pool(k, stride)});
      Shape out{2};
      for (auto d : net.output_shape()) out.push_back(d);
      const auto r =
          finite_difference_check(net, distinct_values({2, h, w, c}, rng), random_tensor(out, rng), LossKind::MSE,
                                  true);
      CAPTURE(seed);
      CHECK(r.worst < 1e-3);
    }
  }

  TEST_CASE("ReLU") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(300 + seed);
      const std::size_t n = 1 + rng.below(8);
      Network net({n}, {LayerSpec::relu()});
      const auto r = finite_difference_check(net, away_from_zero({2, n}, rng), random_tensor({2, n}, rng),
                                             LossKind::MSE, true);
      CAPTURE(seed);
      CHECK(r.worst < 1e-3);
    }
  }

  TEST_CASE("Softmax") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(400 + seed);
      const std::size_t n = 2 + rng.below(7);
      Network net({n}, {LayerSpec::softmax()});
      const auto r = finite_difference_check(net, random_tensor({2, n}, rng, -2, 2), random_tensor({2, n}, rng, 0, 1),
                                             LossKind::MSE, true);
      CAPTURE(seed);
      CHECK(r.worst < 1e-3);
    }
  }

  TEST_CASE("Flatten") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(500 + seed);
      const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8), c = 1 + rng.below(3);
      Network net({h, w, c}, {LayerSpec::flatten()});
      const auto r = finite_difference_check(net, random_tensor({2, h, w, c}, rng),
                                             random_tensor({2, h * w * c}, rng), LossKind::MSE, true);
      CAPTURE(seed);
      CHECK(r.worst < 1e-3);
    }
  }

  TEST_CASE("small Dense network with cross-entropy") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(600 + seed);
      auto net = Network::create({5}, {LayerSpec::dense(6), LayerSpec::relu(), LayerSpec::dense(3),
                                       LayerSpec::softmax()},
                                 seed);
      // keep hidden pre-activations clear of the ReLU kink
      Tensor x;
      for (;;) {
        x = random_tensor({4, 5}, rng);
        const auto pre = forward(net, x).outputs[0];
        if (std::all_of(pre.values().begin(), pre.values().end(), [](float v) { return std::abs(v) > 0.02f; })) break;
      }
      std::vector<int> labels(4);
      for (auto& l : labels) l = static_cast<int>(rng.below(3));
      const auto r = finite_difference_check(net, x, one_hot(labels, 3), LossKind::CrossEntropy, false);
      CAPTURE(seed);
      CHECK(r.worst < 1e-3);
      CHECK(r.checked == net.parameter_count());
    }
  }
}

TEST_SUITE("sgd and freezing") {
  TEST_CASE("learning rate zero leaves the network unchanged") {
    Rng rng(4);
    auto net = Network::create({3}, {LayerSpec::dense(2)}, 1);
    const auto before = net.params(0);
    const auto g = backward(net, random_tensor({2, 3}, rng), random_tensor({2, 2}, rng), LossKind::MSE);
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    sgd_step(net, g, cfg);
    CHECK(bitwise_equal(net.params(0).weights, before.weights));
    CHECK(bitwise_equal(net.params(0).bias, before.bias));
  }

  TEST_CASE("direct arithmetic and the freeze contract") {
    Network net({1}, {LayerSpec::dense(1)});
    net.params(0).weights[0] = 1.0f;
    Gradients g;
    g.layers.resize(1);
    g.layers[0].weights = Tensor({1, 1}, 0.5f);
    g.layers[0].bias = Tensor({1}, 0.0f);
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    Network frozen = net;
    frozen.set_frozen(0, true);
    sgd_step(net, g, cfg);
    sgd_step(frozen, g, cfg);
    CHECK(net.params(0).weights[0] == doctest::Approx(0.95));
    CHECK(frozen.params(0).weights[0] == 1.0f);
  }

  TEST_CASE("gradient shape mismatch") {
    Network net({2}, {LayerSpec::dense(1)});
    Gradients g;
    g.layers.resize(1);
    g.layers[0].weights = Tensor({3, 1});
    g.layers[0].bias = Tensor({1});
    CHECK_THROWS_AS(sgd_step(net, g, TrainConfig{}), ShapeError);
  }

  TEST_CASE("frozen prefix is bitwise stable through training") {
    Rng rng(12);
    auto net = Network::create({6, 6, 1},
                               {LayerSpec::conv2d(3, 3), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::dense(4),
                                LayerSpec::relu(), LayerSpec::dense(2), LayerSpec::softmax()},
                               12);
    net.freeze_through(3);
    const auto conv = net.params(0), hidden = net.params(3), head = net.params(5);
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    for (int step = 0; step < 10; ++step) {
      std::vector<int> labels(8);
      for (auto& l : labels) l = static_cast<int>(rng.below(2));
      sgd_step(net, backward(net, random_tensor({8, 6, 6, 1}, rng), one_hot(labels, 2), LossKind::CrossEntropy),
               cfg);
    }
    CHECK(bitwise_equal(net.params(0).weights, conv.weights));
    CHECK(bitwise_equal(net.params(0).bias, conv.bias));
    CHECK(bitwise_equal(net.params(3).weights, hidden.weights));
    CHECK_FALSE(bitwise_equal(net.params(5).weights, head.weights));
  }

  TEST_CASE("training is deterministic") {
    Rng rng(21);
    const auto x = random_tensor({40, 5}, rng);
    std::vector<int> labels(40);
    for (std::size_t i = 0; i < 40; ++i) labels[i] = x[i * 5] > 0 ? 1 : 0;
    const auto y = one_hot(labels, 2);
    TrainConfig cfg{0.1, 3, 8, 77};
    auto run = [&] {
      auto net = Network::create({5}, {LayerSpec::dense(8), LayerSpec::relu(), LayerSpec::dense(2),
                                       LayerSpec::softmax()},
                                 5);
      fit(net, x, y, LossKind::CrossEntropy, cfg);
      return net;
    };
    const auto a = run(), b = run();
    for (std::size_t i = 0; i < a.layer_count(); ++i) {
      CHECK(bitwise_equal(a.params(i).weights, b.params(i).weights));
      CHECK(bitwise_equal(a.params(i).bias, b.params(i).bias));
    }
  }

  TEST_CASE("fit learns a separable problem") {
    Rng rng(22);
    const auto x = random_tensor({200, 2}, rng);
    std::vector<int> labels(200);
    for (std::size_t i = 0; i < 200; ++i) labels[i] = x[i * 2] + x[i * 2 + 1] > 0 ? 1 : 0;
    auto net = Network::create({2}, {LayerSpec::dense(2), LayerSpec::softmax()}, 1);
    const auto rep = fit(net, x, one_hot(labels, 2), LossKind::CrossEntropy, TrainConfig{0.5, 20, 16, 3});
    CHECK(rep.epoch_loss.back() < rep.epoch_loss.front());
    CHECK(accuracy(net, x, labels) >= 0.95);
  }
}

TEST_SUITE("replace_head") {
  Network conv_net() {
    return Network::create({8, 8, 1},
                           {LayerSpec::conv2d(4, 3), LayerSpec::relu(), LayerSpec::max_pool(2, 2),
                            LayerSpec::flatten(), LayerSpec::dense(5), LayerSpec::softmax()},
                           31);
  }

  TEST_CASE("5-way head becomes 2-way") {
    auto net = conv_net();
    replace_head(net, 2, 9);
    CHECK(net.output_shape() == Shape{2});
    Rng rng(1);
    CHECK(predict(net, random_tensor({3, 8, 8, 1}, rng)).shape() == Shape{3, 2});
  }

  TEST_CASE("same seed gives the same head") {
    auto a = conv_net(), b = conv_net();
    replace_head(a, 2, 9);
    replace_head(b, 2, 9);
    CHECK(bitwise_equal(a.params(4).weights, b.params(4).weights));
    auto c = conv_net();
    replace_head(c, 2, 10);
    CHECK_FALSE(bitwise_equal(a.params(4).weights, c.params(4).weights));
  }

  TEST_CASE("earlier parameters are preserved bitwise") {
    auto net = conv_net();
    const auto conv = net.params(0);
    replace_head(net, 2, 9);
    CHECK(bitwise_equal(net.params(0).weights, conv.weights));
    CHECK(bitwise_equal(net.params(0).bias, conv.bias));
  }

  TEST_CASE("no Dense output block") {
    Network net({4, 4, 1}, {LayerSpec::conv2d(2, 3)});
    CHECK_THROWS_AS(replace_head(net, 2, 1), UnsupportedArchitecture);
    auto tail = Network::create({3}, {LayerSpec::dense(2), LayerSpec::relu(), LayerSpec::flatten()}, 1);
    CHECK_THROWS_AS(replace_head(tail, 2, 1), UnsupportedArchitecture);
  }
}
