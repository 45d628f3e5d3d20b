#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "computer/autodiff.hpp"
#include "computer/ctf.hpp"
#include "computer/grad_check.hpp"
#include "computer/rng.hpp"
#include "test_util.hpp"

using namespace computer;
using computer::testing::leaf_gradient_error;
using computer::testing::random_tensor;
using computer::testing::weighted_sum;
using V = Var<double>;
using Leaves = std::vector<V>;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape<double> tape;
  auto i2 = tape.constant(Tensor<double>::identity(2));
  auto m = tape.constant(Tensor<double>::matrix({{1, 2}, {3, 4}}));
  EXPECT_EQ(matmul(i2, m).value(), Tensor<double>::matrix({{1, 2}, {3, 4}}));
}

TEST(Matmul, HandArithmetic) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>::matrix({{1, 2}}));
  auto b = tape.constant(Tensor<double>::matrix({{3}, {4}}));
  auto c = matmul(a, b);
  ASSERT_EQ(c.value().shape(), (Shape{1, 1}));
  EXPECT_EQ(c.item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({2, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(1);
  auto err = leaf_gradient_error(
      [](Tape<double>&, Leaves& l) { return sum_all(matmul(l[0], l[1])); },
      {random_tensor(rng, 3, 4), random_tensor(rng, 4, 2)});
  EXPECT_LT(err, 1e-6);
}

TEST(Matmul, AssociativeOnRandomTriples) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.index(5), k = 1 + rng.index(5),
                      m = 1 + rng.index(5), p = 1 + rng.index(5);
    auto a = random_tensor(rng, n, k), b = random_tensor(rng, k, m),
         c = random_tensor(rng, m, p);
    auto left = kernel::matmul(kernel::matmul(a, b), c);
    auto right = kernel::matmul(a, kernel::matmul(b, c));
    EXPECT_LT(max_abs_diff(left, right), 1e-9);
  }
}

TEST(RowSoftmax, UniformRow) {
  Tape<double> tape;
  auto y = row_softmax(tape.constant(Tensor<double>::row({0, 0, 0})));
  for (double v : y.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(RowSoftmax, LargeLogitsDoNotOverflow) {
  Tape<double> tape;
  auto y = row_softmax(tape.constant(Tensor<double>::row({1000, 0})));
  EXPECT_EQ(y.value()[0], 1.0);
  EXPECT_GE(y.value()[1], 0.0);
  EXPECT_LT(y.value()[1], 1e-300);
}

TEST(RowSoftmax, TwoElementClosedForm) {
  Tape<double> tape;
  auto y = row_softmax(tape.constant(Tensor<double>::row({1, 2})));
  const double e = std::numbers::e;
  EXPECT_NEAR(y.value()[0], e / (e + e * e), 1e-15);
  EXPECT_NEAR(y.value()[1], e * e / (e + e * e), 1e-15);
  EXPECT_NEAR(y.value()[0], 0.2689, 1e-4);
  EXPECT_NEAR(y.value()[1], 0.7311, 1e-4);
}

TEST(RowSoftmax, RowsSumToOneForAnyFiniteInput) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const double spread = std::pow(10.0, rng.uniform(-3, 3));
    auto x = random_tensor(rng, 1 + rng.index(6), 1 + rng.index(9), -spread, spread);
    Tape<double> tape;
    auto y = row_softmax(tape.constant(x));
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double s = 0;
      for (double v : y.value().row_span(i)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Cosine, ClosedForms) {
  using S = std::span<const double>;
  const std::vector<double> e0{1, 0}, e1{0, 1}, diag{1, 1};
  EXPECT_DOUBLE_EQ(cosine_sim(S(e0), S(e0)).value, 1.0);
  EXPECT_DOUBLE_EQ(cosine_sim(S(e0), S(e1)).value, 0.0);
  EXPECT_NEAR(cosine_sim(S(diag), S(e0)).value, 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(cosine_sim(S(diag), S(e0)).value, 0.7071, 1e-4);
}

TEST(Cosine, SymmetricAndBounded) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    auto u = random_tensor(rng, 1, 5), v = random_tensor(rng, 1, 5);
    auto a = cosine_sim<double>(u.data(), v.data()).value;
    auto b = cosine_sim<double>(v.data(), u.data()).value;
    EXPECT_EQ(a, b);
    EXPECT_LE(std::abs(a), 1.0);
  }
}

TEST(Cosine, ZeroNormFallsBackToZeroWithWarning) {
  const std::vector<double> zero{0, 0}, e0{1, 0};
  auto c = cosine_sim<double>(zero, e0);
  EXPECT_EQ(c.value, 0.0);
  EXPECT_TRUE(c.degenerate);

  Tape<double> tape;
  auto a = tape.leaf(Tensor<double>::matrix({{0, 0}, {1, 2}}));
  auto b = tape.leaf(Tensor<double>::matrix({{1, 0}}));
  auto s = cosine_matrix(a, b);
  EXPECT_EQ(s.value()(0, 0), 0.0);
  EXPECT_EQ(tape.warnings().size(), 1u);
  tape.backward(sum_all(s));
  auto ga = tape.grad(a);
  EXPECT_EQ(ga(0, 0), 0.0);
  EXPECT_EQ(ga(0, 1), 0.0);
}

// Every primitive's backward against central differences on inputs in [-1, 1].
TEST(Primitives, BackwardMatchesFiniteDifferences) {
  Rng rng(5);
  struct Case {
    const char* name;
    computer::testing::LeafFn f;
    std::vector<Shape> shapes;
    double lo = -1, hi = 1;
  };
  const std::vector<Case> cases = {
      {"matmul", [](auto&, Leaves& l) { return weighted_sum(matmul(l[0], l[1])); },
       {{3, 4}, {4, 2}}},
      {"matmul_bt", [](auto&, Leaves& l) { return weighted_sum(matmul_bt(l[0], l[1])); },
       {{3, 4}, {5, 4}}},
      {"add", [](auto&, Leaves& l) { return weighted_sum(add(l[0], l[1])); },
       {{2, 3}, {2, 3}}},
      {"sub", [](auto&, Leaves& l) { return weighted_sum(sub(l[0], l[1])); },
       {{2, 3}, {2, 3}}},
      {"add_row", [](auto&, Leaves& l) { return weighted_sum(add_row(l[0], l[1])); },
       {{3, 4}, {1, 4}}},
      {"mul", [](auto&, Leaves& l) { return weighted_sum(mul(l[0], l[1])); },
       {{2, 3}, {2, 3}}},
      {"scale", [](auto&, Leaves& l) { return weighted_sum(scale(l[0], -1.7)); },
       {{2, 3}}},
      {"add_scalar", [](auto&, Leaves& l) { return weighted_sum(add_scalar(l[0], 0.3)); },
       {{2, 3}}},
      {"concat_cols",
       [](auto&, Leaves& l) { return weighted_sum(concat_cols({l[0], l[1], l[0]})); },
       {{2, 3}, {2, 1}}},
      {"concat_rows",
       [](auto&, Leaves& l) { return weighted_sum(concat_rows({l[0], l[1]})); },
       {{2, 3}, {1, 3}}},
      {"slice_cols", [](auto&, Leaves& l) { return weighted_sum(slice_cols(l[0], 1, 2)); },
       {{3, 4}}},
      {"slice_rows", [](auto&, Leaves& l) { return weighted_sum(slice_rows(l[0], 1, 2)); },
       {{3, 4}}},
      {"row_softmax", [](auto&, Leaves& l) { return weighted_sum(row_softmax(l[0])); },
       {{3, 5}}},
      {"layer_norm",
       [](auto&, Leaves& l) { return weighted_sum(layer_norm(l[0], l[1], l[2])); },
       {{3, 5}, {1, 5}, {1, 5}}},
      {"mean_rows", [](auto&, Leaves& l) { return weighted_sum(mean_rows(l[0])); },
       {{4, 3}}},
      {"row_sum", [](auto&, Leaves& l) { return weighted_sum(row_sum(l[0])); }, {{4, 3}}},
      {"mean_all", [](auto&, Leaves& l) { return mean_all(l[0]); }, {{4, 3}}},
      {"cosine", [](auto&, Leaves& l) { return weighted_sum(cosine_matrix(l[0], l[1])); },
       {{3, 4}, {2, 4}}},
      {"log", [](auto&, Leaves& l) { return weighted_sum(log(l[0])); }, {{2, 3}}, 0.2, 1.5},
      {"exp", [](auto&, Leaves& l) { return weighted_sum(exp(l[0])); }, {{2, 3}}},
      {"sigmoid", [](auto&, Leaves& l) { return weighted_sum(sigmoid(l[0])); }, {{2, 3}}},
      {"relu", [](auto&, Leaves& l) { return weighted_sum(relu(l[0])); }, {{2, 3}}},
      {"bce",
       [](Tape<double>&, Leaves& l) {
         return bce_mean(l[0], Tensor<double>::matrix({{1, 0, 1}, {0, 0, 1}}));
       },
       {{2, 3}}, 0.05, 0.95},
      {"nll",
       [](Tape<double>&, Leaves& l) {
         const std::vector<std::size_t> tg{2, 0};
         return nll_mean(l[0], tg);
       },
       {{2, 3}}, 0.05, 0.95},
  };
  for (const auto& c : cases) {
    std::vector<Tensor<double>> inputs;
    for (const auto& s : c.shapes) inputs.push_back(random_tensor(rng, s[0], s[1], c.lo, c.hi));
    EXPECT_LT(leaf_gradient_error(c.f, inputs), 1e-6) << c.name;
  }
}

TEST(Tape, BackwardVisitsEachNodeOnceInReverseOrder) {
  Tape<double> tape;
  Rng rng(6);
  auto a = tape.leaf(random_tensor(rng, 2, 2));
  auto b = tape.leaf(random_tensor(rng, 2, 2));
  auto c = matmul(a, b);
  auto d = add(c, a);  // a reused: a diamond in the graph
  auto e = sum_all(mul(d, c));
  const std::size_t visited = tape.backward(e);
  // matmul, add, mul, sum ran once each; leaves have no backward.
  EXPECT_EQ(visited, 4u);
  const auto ops = tape.ops();
  ASSERT_EQ(ops.size(), 6u);
  EXPECT_EQ(ops[2], "matmul");
  EXPECT_EQ(ops[5], "sum");
}

TEST(Tape, NonFiniteValuesAreAnError) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::row({800.0}));
  EXPECT_THROW(exp(x), NumericError);
  EXPECT_THROW(log(tape.leaf(Tensor<double>::row({-1.0}))), NumericError);
}

TEST(Tape, ParametersBindOnceAndAccumulateGradients) {
  Parameter<double> p{"w", "g", Tensor<double>::matrix({{2.0, -1.0}})};
  Tape<double> tape;
  auto a = tape.parameter(p);
  auto b = tape.parameter(p);
  EXPECT_EQ(a.id(), b.id());
  tape.backward(sum_all(add(a, b)));
  EXPECT_EQ(p.grad, Tensor<double>::matrix({{2.0, 2.0}}));
}

TEST(GradCheck, SumHasAllOnesGradient) {
  Parameter<double> p{"p", "g", Tensor<double>::matrix({{0.3, -0.2, 0.9}})};
  Objective<double> f = [&](Tape<double>& t) { return sum_all(t.parameter(p)); };
  std::vector<Parameter<double>*> ps{&p};
  auto r = grad_check<double>(f, ps, 1e-5);
  EXPECT_LT(r.max_rel_err(), 1e-9);
  for (double g : p.grad.data()) EXPECT_EQ(g, 1.0);
}

TEST(GradCheck, ConstantObjectiveHasZeroError) {
  Parameter<double> p{"p", "g", Tensor<double>::matrix({{0.3, -0.2}})};
  Objective<double> f = [&](Tape<double>& t) {
    t.parameter(p);
    return t.constant(Tensor<double>::matrix({{4.0}}));
  };
  std::vector<Parameter<double>*> ps{&p};
  auto r = grad_check<double>(f, ps, 1e-5);
  EXPECT_EQ(r.max_rel_err(), 0.0);
}

TEST(GradCheck, DetectsCorruptedBackward) {
  Rng rng(7);
  Parameter<double> p{"p", "g", random_tensor(rng, 3, 3)};
  Objective<double> f = [&](Tape<double>& t) {
    auto w = t.parameter(p);
    return weighted_sum(row_softmax(matmul(w, w)));
  };
  std::vector<Parameter<double>*> ps{&p};
  TapeOptions bad;
  bad.corrupt_op = "matmul";
  bad.corrupt_factor = 1.01;
  EXPECT_GT(grad_check<double>(f, ps, 1e-5, bad).max_rel_err(), 1e-3);
  EXPECT_LT(grad_check<double>(f, ps, 1e-5).max_rel_err(), 1e-6);
}

TEST(GradCheck, NonFiniteObjectiveIsAnError) {
  Parameter<double> p{"p", "g", Tensor<double>::matrix({{1.0}})};
  Objective<double> f = [&](Tape<double>& t) {
    return scale(t.parameter(p), std::numeric_limits<double>::infinity());
  };
  std::vector<Parameter<double>*> ps{&p};
  EXPECT_THROW(grad_check<double>(f, ps, 1e-5), NumericError);
}

TEST(Rng, EngineMatchesStandardSequence) {
  // The standard fixes the 10000th output of a default-seeded mt19937_64.
  Rng rng(5489u);
  std::uint64_t x = 0;
  for (int i = 0; i < 10000; ++i) x = rng.next_u64();
  EXPECT_EQ(x, 9981545732273789042ULL);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    EXPECT_EQ(a.uniform(), b.uniform());
    EXPECT_EQ(a.normal(), b.normal());
  }
  Rng c(43);
  EXPECT_NE(Rng(42).uniform(), c.uniform());
}

TEST(Rng, UniformConversionIsTopFiftyThreeBits) {
  Rng a(11), b(11);
  for (int i = 0; i < 100; ++i) {
    const double u = a.uniform();
    EXPECT_EQ(u, static_cast<double>(b.next_u64() >> 11) * 0x1.0p-53);
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(Ctf, RoundTripIsBitExactForFloatValues) {
  Rng rng(8);
  Tensor<double> t({2, 3, 4});
  for (auto& v : t.data()) v = static_cast<float>(rng.normal());
  auto back = ctf::decode<double>(ctf::encode(t));
  EXPECT_EQ(back, t);
}

TEST(Ctf, HeaderLayout) {
  auto bytes = ctf::encode(Tensor<double>({1, 2}, std::vector<double>{1.0, -2.0}));
  ASSERT_EQ(bytes.size(), 4u + 1u + 8u + 8u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CTF1");
  EXPECT_EQ(bytes[4], 2);
  EXPECT_EQ(bytes[5], 1);  // dim 0, little-endian
  EXPECT_EQ(bytes[9], 2);
  // 1.0f = 0x3F800000
  EXPECT_EQ(bytes[13], 0x00);
  EXPECT_EQ(bytes[16], 0x3F);
}

TEST(Ctf, FileErrorsNameThePath) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "computer_ctf_test";
  fs::create_directories(dir);
  const fs::path good = dir / "t.ctf";
  ctf::write(good, Tensor<double>({3, 3}, 0.5));

  EXPECT_THROW(ctf::read<double>(dir / "absent.ctf"), MissingFileError);

  auto bytes = ctf::encode(Tensor<double>({3, 3}, 0.5));
  const fs::path truncated = dir / "truncated.ctf";
  {
    std::ofstream f(truncated, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), 20);
  }
  try {
    ctf::read<double>(truncated);
    FAIL();
  } catch (const ShortReadError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated.ctf"), std::string::npos);
  }

  const fs::path bad = dir / "bad.ctf";
  {
    std::ofstream f(bad, std::ios::binary);
    f << "NOPE and then some";
  }
  try {
    ctf::read<double>(bad);
    FAIL();
  } catch (const BadMagicError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.ctf"), std::string::npos);
  }
  EXPECT_EQ(ctf::read<double>(good), Tensor<double>({3, 3}, 0.5));
  fs::remove_all(dir);
}

TEST(Tensor, InvariantsAreEnforced) {
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor<double>(Shape{1, 1, 1, 1}), DimensionError);
  Tensor<double> t({2, 2});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::nan("");
  EXPECT_FALSE(t.all_finite());
}
