#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vqim/gradcheck.hpp"
#include "vqim/ops.hpp"

using namespace vqim;

namespace {

Tensor64 randn64(Shape shape, Rng& rng, bool rg = true) {
  return Tensor64::randn(std::move(shape), rng, 1.0, rg);
}

}  // namespace

TEST_CASE("matmul forward: identity and hand-computed products") {
  auto i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from({2, 2}, {3, 4, 5, 6});
  auto out = matmul<float>(nullptr, i2, m);
  CHECK(out.values() == std::vector<float>{3, 4, 5, 6});

  auto a = Tensor::from({1, 2}, {1, 2});
  auto b = Tensor::from({2, 1}, {3, 4});
  CHECK(matmul<float>(nullptr, a, b).item() == doctest::Approx(11).epsilon(1e-7));
}

TEST_CASE("matmul rejects shape mismatch naming both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  CHECK_THROWS_WITH_AS(matmul<float>(nullptr, a, b),
                       doctest::Contains("(2,3)"), ShapeError);
}

TEST_CASE("matmul gradient of sum(output) wrt a equals ones * b^T") {
  Rng rng(7);
  auto a = randn64({5, 4}, rng);
  auto b = randn64({4, 3}, rng);
  Tape64 tape;
  auto loss = sum_all(&tape, matmul(&tape, a, b));
  tape.backward(loss);
  // d(sum)/da = ones(5,3) . b^T
  auto ones = Tensor64::full({5, 3}, 1.0);
  auto bt = transpose<double>(nullptr, b);
  auto expect = matmul<double>(nullptr, ones, bt);
  for (int64_t i = 0; i < a.size(); ++i)
    CHECK(a.grad()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));

  auto rep = grad_check([&](Tape64* t) { return sum_all(t, matmul(t, a, b)); },
                        {{"a", a}, {"b", b}});
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("softmax examples") {
  auto s = softmax<float>(nullptr, Tensor::from({2}, {0, 0}), -1);
  CHECK(s.data()[0] == doctest::Approx(0.5));
  CHECK(s.data()[1] == doctest::Approx(0.5));

  // stability under large shift
  auto big = softmax<float>(nullptr, Tensor::from({2}, {1000, 1000}), -1);
  CHECK(big.data()[0] == doctest::Approx(0.5));

  auto v = softmax<float>(nullptr, Tensor::from({3}, {1, 2, 3}), -1);
  CHECK(v.data()[0] == doctest::Approx(0.0900).epsilon(1e-2));
  CHECK(v.data()[1] == doctest::Approx(0.2447).epsilon(1e-2));
  CHECK(v.data()[2] == doctest::Approx(0.6652).epsilon(1e-2));

  CHECK_THROWS_AS(
      softmax<float>(nullptr, Tensor::from({2}, {std::nanf(""), 0.f}), -1),
      NumericError);
}

TEST_CASE("softmax rows sum to one up to 1e4 magnitude inputs") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = Tensor::randn({4, 7}, rng, 1e4f);
    auto p = softmax<float>(nullptr, x, -1);
    for (int i = 0; i < 4; ++i) {
      double s = 0;
      for (int j = 0; j < 7; ++j) s += p.data()[i * 7 + j];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("softmax over a middle axis") {
  Rng rng(11);
  auto x = randn64({2, 3, 4}, rng);
  auto p = softmax<double>(nullptr, x, 1);
  for (int b = 0; b < 2; ++b)
    for (int k = 0; k < 4; ++k) {
      double s = 0;
      for (int c = 0; c < 3; ++c) s += p.data()[(b * 3 + c) * 4 + k];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("layernorm closed forms") {
  auto gamma = Tensor::full({3}, 1.f);
  auto beta = Tensor::zeros({3});
  auto constant = Tensor::full({2, 3}, 5.f);
  auto out = layernorm<float>(nullptr, constant, gamma, beta, 1e-5f);
  for (int64_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == doctest::Approx(0.0));

  auto g2 = Tensor::full({2}, 1.f);
  auto b2 = Tensor::zeros({2});
  auto two = layernorm<float>(nullptr, Tensor::from({1, 2}, {1, 3}), g2, b2, 1e-12f);
  CHECK(two.data()[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(two.data()[1] == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("elementwise examples") {
  CHECK(tanh_op<float>(nullptr, Tensor::scalar(0.f)).item() == 0.f);
  CHECK(gelu<float>(nullptr, Tensor::scalar(1.f)).item() ==
        doctest::Approx(0.8413).epsilon(1e-3));

  // abs backward: sign rule with subgradient 0 at exactly 0
  for (auto [x, want] : std::vector<std::pair<double, double>>{{2, 1}, {-2, -1}, {0, 0}}) {
    auto t = Tensor64::scalar(x, true);
    Tape64 tape;
    auto loss = sum_all(&tape, abs_op(&tape, t));
    tape.backward(loss);
    CHECK(t.grad()[0] == want);
  }

  CHECK_THROWS_AS(log_op<float>(nullptr, Tensor::scalar(-1.f)), NumericError);
  CHECK_THROWS_AS(log_op<float>(nullptr, Tensor::scalar(0.f)), NumericError);
}

TEST_CASE("broadcast add keeps gradient shapes") {
  Rng rng(5);
  auto a = randn64({2, 3, 4}, rng);
  auto b = randn64({3, 4}, rng);
  auto c = randn64({4}, rng);
  Tape64 tape;
  auto out = add(&tape, add(&tape, a, b), c);
  auto loss = sum_all(&tape, mul(&tape, out, out));
  tape.backward(loss);
  CHECK(a.grads().size() == static_cast<size_t>(a.size()));
  CHECK(b.grads().size() == static_cast<size_t>(b.size()));
  CHECK(c.grads().size() == static_cast<size_t>(c.size()));

  auto rep = grad_check(
      [&](Tape64* t) {
        auto o = add(t, add(t, a, b), c);
        return sum_all(t, mul(t, o, o));
      },
      {{"a", a}, {"b", b}, {"c", c}});
  CHECK(rep.pass);

  auto bad = randn64({2, 3}, rng);
  CHECK_THROWS_AS(add(&tape, a, bad), ShapeError);
}

TEST_CASE("embedding lookup examples and repeated-id gradient") {
  auto table = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto out = embedding_lookup<float>(nullptr, table, {1, 1});
  CHECK(out.values() == std::vector<float>{3, 4, 3, 4});
  auto first = embedding_lookup<float>(nullptr, table, {0});
  CHECK(first.values() == std::vector<float>{1, 2});

  auto t64 = Tensor64::from({2, 2}, {1, 2, 3, 4}, true);
  Tape64 tape;
  auto loss = sum_all(&tape, embedding_lookup(&tape, t64, {1, 1}));
  tape.backward(loss);
  CHECK(t64.grad()[2] == 2.0);
  CHECK(t64.grad()[3] == 2.0);
  CHECK(t64.grad()[0] == 0.0);

  CHECK_THROWS_WITH_AS(embedding_lookup<float>(nullptr, table, {2}),
                       doctest::Contains("2"), IndexError);
}

TEST_CASE("cross entropy examples") {
  // zero logits over 8192 classes -> ln 8192
  auto z = Tensor::zeros({1, 8192});
  CHECK(cross_entropy_from_logits<float>(nullptr, z, {5}).item() ==
        doctest::Approx(std::log(8192.0)).epsilon(1e-5));

  std::vector<float> conf(10, 0.f);
  conf[3] = 1e4f;
  CHECK(cross_entropy_from_logits<float>(nullptr, Tensor::from({1, 10}, conf), {3}).item() ==
        doctest::Approx(0.0));

  CHECK(cross_entropy_from_logits<float>(nullptr, Tensor::from({1, 3}, {1, 2, 3}), {2}).item() ==
        doctest::Approx(0.4076).epsilon(1e-3));

  CHECK_THROWS_AS(cross_entropy_from_logits<float>(nullptr, z, {8192}), IndexError);
}

TEST_CASE("tape accumulates additively when a tensor is consumed twice") {
  auto x = Tensor64::scalar(3.0, true);
  Tape64 tape;
  auto y = mul(&tape, x, x);  // x consumed twice -> dy/dx = 2x
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("tape replay determinism") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    auto a = Tensor::randn({4, 4}, rng, 1.f, true);
    auto b = Tensor::randn({4, 4}, rng, 1.f, true);
    Tape tape;
    auto loss = mean_all(&tape, gelu(&tape, matmul(&tape, a, b)));
    tape.backward(loss);
    std::vector<float> out = {loss.item()};
    out.insert(out.end(), a.grads().begin(), a.grads().end());
    return out;
  };
  CHECK(run(42) == run(42));
}

TEST_CASE("per-op float64 gradchecks on random small shapes") {
  Rng rng(2024);
  auto a = randn64({3, 5}, rng);
  auto b = randn64({5, 4}, rng);
  auto x = randn64({4, 6}, rng);
  auto g = randn64({6}, rng);
  auto be = randn64({6}, rng);

  struct Case {
    const char* name;
    std::function<Tensor64(Tape64*)> f;
    std::vector<std::pair<std::string, Tensor64>> params;
  };
  // keep probe points away from abs/relu kinks
  auto shifted = x.detach();
  for (int64_t i = 0; i < shifted.size(); ++i)
    shifted.data()[i] += (shifted.data()[i] >= 0 ? 0.5 : -0.5);
  shifted.set_requires_grad(true);

  std::vector<Case> cases = {
      {"matmul", [&](Tape64* t) { return sum_all(t, mul(t, matmul(t, a, b), matmul(t, a, b))); },
       {{"a", a}, {"b", b}}},
      {"transpose", [&](Tape64* t) { return sum_all(t, mul(t, transpose(t, x), transpose(t, x))); },
       {{"x", x}}},
      {"tanh", [&](Tape64* t) { return sum_all(t, tanh_op(t, x)); }, {{"x", x}}},
      {"gelu", [&](Tape64* t) { return sum_all(t, gelu(t, x)); }, {{"x", x}}},
      {"exp", [&](Tape64* t) { return sum_all(t, exp_op(t, x)); }, {{"x", x}}},
      {"sigmoid", [&](Tape64* t) { return sum_all(t, sigmoid(t, x)); }, {{"x", x}}},
      {"abs", [&](Tape64* t) { return sum_all(t, abs_op(t, shifted)); }, {{"x", shifted}}},
      {"softmax",
       [&](Tape64* t) { return sum_all(t, mul(t, softmax(t, x, -1), softmax(t, x, -1))); },
       {{"x", x}}},
      {"layernorm",
       [&](Tape64* t) {
         auto o = layernorm(t, x, g, be, 1e-5);
         return sum_all(t, mul(t, o, o));
       },
       {{"x", x}, {"gamma", g}, {"beta", be}}},
      {"l2_normalize",
       [&](Tape64* t) {
         auto o = l2_normalize_rows(t, x);
         return sum_all(t, mul(t, o, o));
       },
       {{"x", x}}},
      {"slice_concat",
       [&](Tape64* t) {
         auto top = slice_rows(t, x, 0, 2);
         auto bot = slice_rows(t, x, 2, 4);
         auto o = concat_rows(t, bot, top);
         return sum_all(t, mul(t, o, o));
       },
       {{"x", x}}},
  };
  for (auto& c : cases) {
    auto rep = grad_check(c.f, c.params);
    INFO(c.name, " rel err ", rep.max_rel_err, " at ", rep.worst_param, "[", rep.worst_coord,
         "]");
    CHECK(rep.pass);
  }
}

TEST_CASE("log gradcheck on positive inputs") {
  Rng rng(9);
  auto x = Tensor64::zeros({3, 3}, true);
  for (int64_t i = 0; i < x.size(); ++i) x.data()[i] = 0.5 + rng.uniform();
  auto rep = grad_check([&](Tape64* t) { return sum_all(t, log_op(t, x)); }, {{"x", x}});
  CHECK(rep.pass);
}

TEST_CASE("gradcheck catches a corrupted backward rule") {
  Rng rng(13);
  auto x = randn64({3, 3}, rng);
  // tanh with a deliberately wrong derivative
  auto broken_tanh = [](Tape64* tape, const Tensor64& in) {
    auto out = Tensor64::zeros(in.shape());
    for (int64_t i = 0; i < in.size(); ++i) out.data()[i] = std::tanh(in.data()[i]);
    if (track(tape, {&in})) {
      out.set_requires_grad(true);
      Tensor64 ic = in, oc = out;
      tape->record([ic, oc]() mutable {
        for (int64_t i = 0; i < ic.size(); ++i)
          ic.grad()[i] += oc.grad()[i] * 0.5;  // wrong on purpose
      });
    }
    return out;
  };
  auto rep =
      grad_check([&](Tape64* t) { return sum_all(t, broken_tanh(t, x)); }, {{"x", x}});
  CHECK_FALSE(rep.pass);
  CHECK(rep.max_rel_err > 1e-2);
}

TEST_CASE("sum of squares analytic gradient") {
  Rng rng(17);
  auto x = randn64({4, 4}, rng);
  Tape64 tape;
  auto loss = sum_all(&tape, mul(&tape, x, x));
  tape.backward(loss);
  for (int64_t i = 0; i < x.size(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i]).epsilon(1e-12));
  auto rep = grad_check([&](Tape64* t) { return sum_all(t, mul(t, x, x)); }, {{"x", x}});
  CHECK(rep.max_rel_err < 1e-8);
}

TEST_CASE("multihead attention: causal mask and gradcheck") {
  Rng rng(21);
  const int B = 2, S = 5, d = 6, heads = 2;
  auto qkv = randn64({B * S, 3 * d}, rng);

  // causality: perturbing position j changes outputs only at positions >= j
  auto base = multihead_attention<double>(nullptr, qkv, B, S, heads, true);
  for (int j = 0; j < S; ++j) {
    auto pert = qkv.clone();
    for (int c = 0; c < 3 * d; ++c) pert.data()[j * 3 * d + c] += 0.37;
    auto out = multihead_attention<double>(nullptr, pert, B, S, heads, true);
    for (int i = 0; i < j; ++i)
      for (int c = 0; c < d; ++c)
        CHECK(out.data()[i * d + c] == base.data()[i * d + c]);
  }

  for (bool causal : {true, false}) {
    auto rep = grad_check(
        [&](Tape64* t) {
          auto o = multihead_attention(t, qkv, B, S, heads, causal);
          return sum_all(t, mul(t, o, o));
        },
        {{"qkv", qkv}});
    INFO("causal=", causal, " rel err ", rep.max_rel_err);
    CHECK(rep.pass);
  }
}

TEST_CASE("patchify/unpatchify inverse pair") {
  Rng rng(31);
  auto img = Tensor64::randn({2, 8, 8, 3}, rng, 1.0, true);
  auto p = patchify<double>(nullptr, img, 4);
  CHECK(p.shape() == Shape{2, 4, 48});
  auto back = unpatchify<double>(nullptr, p, 8, 8, 3, 4);
  CHECK(back.values() == img.values());

  CHECK_THROWS_AS(patchify<double>(nullptr, img, 3), ShapeError);

  auto rep = grad_check(
      [&](Tape64* t) {
        auto o = unpatchify(t, patchify(t, img, 2), 8, 8, 3, 2);
        return sum_all(t, mul(t, o, o));
      },
      {{"img", img}});
  CHECK(rep.pass);
}

TEST_CASE("dropout: train stochastic, eval identity, inverted scaling") {
  Rng rng(5);
  auto x = Tensor::full({1000}, 1.f);
  auto eval_out = dropout<float>(nullptr, x, 0.3f, rng, false);
  CHECK(eval_out.values() == x.values());

  auto train_out = dropout<float>(nullptr, x, 0.3f, rng, true);
  double mean = 0;
  int zeros = 0;
  for (float v : train_out.values()) {
    mean += v;
    if (v == 0.f) ++zeros;
  }
  mean /= 1000;
  CHECK(zeros > 200);
  CHECK(zeros < 400);
  CHECK(mean == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("l2_normalize_rows flags zero rows and maps them to e0") {
  auto x = Tensor::from({2, 3}, {0, 0, 0, 3, 4, 0});
  std::vector<int64_t> flagged;
  auto out = l2_normalize_rows<float>(nullptr, x, &flagged);
  CHECK(flagged == std::vector<int64_t>{0});
  CHECK(out.data()[0] == 1.f);
  CHECK(out.data()[1] == 0.f);
  CHECK(out.data()[3] == doctest::Approx(0.6));
  CHECK(out.data()[4] == doctest::Approx(0.8));
}
