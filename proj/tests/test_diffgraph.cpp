#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>

#include "mvgnn/binary_io.hpp"
#include "mvgnn/diagnostics.hpp"
#include "mvgnn/error.hpp"
#include "mvgnn/gradcheck.hpp"
#include "mvgnn/ops.hpp"
#include "mvgnn/parameters.hpp"
#include "test_util.hpp"

using namespace mvgnn;
using namespace mvgnn::diff;
using mvgnn::testing::random_tensor;

TEST_CASE("forward examples") {
  const Tensor values({3}, {1, 2, 3});
  const Tensor s = scatter_sum(values, {0, 0, 1}, 2);
  CHECK(s.shape() == Shape{2});
  CHECK(s.data()[0] == 3.0);
  CHECK(s.data()[1] == 3.0);
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(concat({Tensor::zeros({2, 3}), Tensor::zeros({2, 5})}, 1).shape() == Shape{2, 8});
  const Tensor g = gather(Tensor({3, 2}, {1, 2, 3, 4, 5, 6}), {2, 0});
  CHECK(std::vector<double>(g.data().begin(), g.data().end()) == std::vector<double>{5, 6, 1, 2});
  CHECK(mse(Tensor({2}, {1, 2}), Tensor({2}, {1, 4})).item() == 2.0);
  CHECK(silu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(sum(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}), 0).data()[2] == 9.0);
}

TEST_CASE("shape and index errors name the op") {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("add") != std::string::npos);
    CHECK(std::string(e.what()).find("(2, 3)") != std::string::npos);
  }
  CHECK_THROWS_AS(concat({Tensor::zeros({2, 3}), Tensor::zeros({3, 5})}, 1), ShapeError);
  CHECK_THROWS_AS(linear(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}), Tensor()), ShapeError);
  CHECK_THROWS_AS(scatter_sum(Tensor({3}, {1, 2, 3}), {0, 0, 2}, 2), IndexError);
  CHECK_THROWS_AS(gather(Tensor({2}, {1, 2}), {5}), IndexError);
  CHECK_THROWS_AS(mv_linear(Tensor::zeros({2, 3, 7}), Tensor::zeros({4, 3, 3})), ShapeError);
  CHECK_THROWS_AS(slice(Tensor::zeros({2, 3}), 1, 2, 2), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("backward basics") {
  Tensor x({1}, {3.0}, true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum_all(mul(x, x));
  }
  tape.backward(loss);
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == 6.0);

  Tensor w({1}, {2.0}, true);
  Tensor c({1}, {5.0}, false);
  Tape tape2;
  {
    TapeScope scope(tape2);
    loss = sum_all(mul(w, c));
  }
  tape2.backward(loss);
  CHECK(!c.has_grad());
  CHECK(w.grad()[0] == 5.0);
}

TEST_CASE("non-scalar loss is a contract error") {
  Tensor x({2}, {1.0, 2.0}, true);
  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = mul(x, x);
  }
  CHECK_THROWS_AS(tape.backward(y), ContractError);
  Tape other;
  Tensor z;
  {
    TapeScope scope(tape);
    z = sum_all(y);
  }
  CHECK_THROWS_AS(other.backward(z), ContractError);
}

TEST_CASE("mse of a linear map matches finite differences") {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor(rng, {6, 4});
  const Tensor y = random_tensor(rng, {6, 3});
  Tensor W = random_tensor(rng, {4, 3}, true);
  Tensor b = random_tensor(rng, {3}, true);
  const auto res = gradcheck([&] { return mse(linear(x, W, b), y); }, {W, b});
  CHECK(res.max_relative_error <= 1e-6);
}

TEST_CASE("every op passes randomized finite-difference checks") {
  const auto checks = diagnostics::op_gradchecks(100, 100);
  CHECK(checks.size() >= 28);
  for (const auto& c : checks) {
    CAPTURE(c.name);
    CHECK(c.probes == 100);
    CHECK(c.max_relative_error <= 1e-6);
  }
}

TEST_CASE("tape-free forward equals taped forward bitwise") {
  std::mt19937_64 rng(2);
  const Tensor v = random_tensor(rng, {4, 3, 8}, true);
  const Tensor w = random_tensor(rng, {4, 3, 3}, true);
  auto f = [&] { return mv_rejection(mv_linear(v, w), mv_geometric_product(v, v), 1e-8); };
  const Tensor plain = f();
  Tape tape;
  Tensor taped;
  {
    TapeScope scope(tape);
    taped = f();
  }
  CHECK(tape.size() > 0);
  REQUIRE(plain.numel() == taped.numel());
  for (std::size_t i = 0; i < plain.numel(); ++i) CHECK(plain.data()[i] == taped.data()[i]);
}

TEST_CASE("scatter_sum gradient is gather of the upstream gradient") {
  std::mt19937_64 rng(3);
  const Index index = {1, 0, 1, 2, 2, 2};
  const Tensor values = random_tensor(rng, {6, 5}, true);
  const Tensor upstream = random_tensor(rng, {3, 5});
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum_all(mul(scatter_sum(values, index, 3), upstream));
  }
  tape.backward(loss);
  const Tensor expected = gather(upstream, index);
  for (std::size_t i = 0; i < expected.numel(); ++i) CHECK(values.grad()[i] == doctest::Approx(expected.data()[i]));
}

TEST_CASE("adam with decoupled weight decay") {
  ParameterStore store;
  store.add("p", Tensor({1}, {1.0}));
  Adam adam(AdamConfig{0.1, 0.0});
  adam.step(store, Gradients{{"p", {1.0}}});
  // m_hat = v_hat = 1 at t = 1, so the step is lr / (1 + eps).
  CHECK(store.at("p").data()[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));

  ParameterStore decay;
  decay.add("p", Tensor({1}, {2.0}));
  Adam adam_wd(AdamConfig{0.1, 0.01});
  adam_wd.step(decay, Gradients{{"p", {0.0}}});
  CHECK(decay.at("p").data()[0] == doctest::Approx(2.0 - 0.1 * 0.01 * 2.0).epsilon(1e-15));

  CHECK_THROWS_AS(adam.step(store, Gradients{}), ContractError);
}

TEST_CASE("adam is deterministic") {
  auto run = [] {
    std::mt19937_64 rng(77);
    ParameterStore store;
    Tensor w = store.add_uniform("w", {3, 2}, 1.0, rng);
    const Tensor x = random_tensor(rng, {5, 3});
    const Tensor y = random_tensor(rng, {5, 2});
    Adam adam(AdamConfig{0.05, 1e-4});
    for (int it = 0; it < 20; ++it) {
      store.zero_grad();
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = mse(linear(x, w, Tensor()), y);
      }
      adam.step(store, backward(tape, loss, store));
    }
    return std::vector<double>(w.data().begin(), w.data().end());
  };
  CHECK(run() == run());
}

TEST_CASE("unreached trainable parameters get zero gradients") {
  ParameterStore store;
  Tensor a = store.add("a", Tensor({1}, {2.0}));
  store.add("unused", Tensor({2}, {1.0, 1.0}));
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum_all(mul(a, a));
  }
  const auto grads = backward(tape, loss, store);
  CHECK(grads.at("a")[0] == 4.0);
  CHECK(grads.at("unused") == std::vector<double>{0.0, 0.0});
}

TEST_CASE("repeated backward passes do not accumulate parameter gradients") {
  ParameterStore store;
  Tensor a = store.add("a", Tensor({2}, {2.0, -1.0}));
  for (int step = 0; step < 3; ++step) {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = sum_all(mul(a, a));
    }
    const auto grads = backward(tape, loss, store);
    CHECK(grads.at("a") == std::vector<double>{4.0, -2.0});
  }
}

TEST_CASE("gradient norm clipping") {
  diff::Gradients grads{{"a", {3.0, 0.0}}, {"b", {4.0}}};
  CHECK(diff::gradient_norm(grads) == doctest::Approx(5.0));

  auto untouched = grads;
  CHECK(diff::clip_gradient_norm(untouched, 10.0) == doctest::Approx(5.0));
  CHECK(untouched == grads);
  CHECK(diff::clip_gradient_norm(untouched, 0.0) == doctest::Approx(5.0));
  CHECK(untouched == grads);

  CHECK(diff::clip_gradient_norm(grads, 1.0) == doctest::Approx(5.0));
  CHECK(grads["a"][0] == doctest::Approx(0.6));
  CHECK(grads["b"][0] == doctest::Approx(0.8));
  CHECK(diff::gradient_norm(grads) == doctest::Approx(1.0));
}

TEST_CASE("checkpoint round trip and format errors") {
  std::mt19937_64 rng(4);
  ParameterStore store;
  store.add_uniform("layer.0.weight", {3, 2}, 1.0, rng);
  store.add_uniform("layer.0.bias", {2}, 1.0, rng);
  store.add("scalar", Tensor::scalar(-0.0));
  const auto bytes = encode_checkpoint(store);

  // Header layout: magic, version, count, then the first (sorted) name.
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MVGN");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 3);
  CHECK(bytes[12] == std::string("layer.0.bias").size());

  ParameterStore other;
  other.add("layer.0.weight", Tensor::zeros({3, 2}));
  other.add("layer.0.bias", Tensor::zeros({2}));
  other.add("scalar", Tensor::scalar(1.0));
  decode_checkpoint(bytes, other);
  CHECK(encode_checkpoint(other) == bytes);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  ParameterStore untouched = other.clone();
  try {
    decode_checkpoint(truncated, untouched);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }
  CHECK(encode_checkpoint(untouched) == bytes);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad, other), FormatError);

  ParameterStore mismatched;
  mismatched.add("layer.0.weight", Tensor::zeros({2, 3}));
  mismatched.add("layer.0.bias", Tensor::zeros({2}));
  mismatched.add("scalar", Tensor::scalar(1.0));
  CHECK_THROWS_AS(decode_checkpoint(bytes, mismatched), ContractError);

  const auto path = std::filesystem::temp_directory_path() / "mvgnn_test_ckpt.mvgn";
  save_checkpoint(path, store);
  CHECK(io::read_file(path, "test", "read") == bytes);
  std::filesystem::remove(path);
}

TEST_CASE("single-precision mode rounds op outputs") {
  const Tensor x({1}, {1.0 / 3.0});
  PrecisionScope scope(Precision::f32);
  const Tensor y = scale(x, 1.0);
  CHECK(y.data()[0] == static_cast<double>(static_cast<float>(1.0 / 3.0)));
}
