#include "vlkd/checkpoint.hpp"
#include "vlkd/optim.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

using namespace vlkd;
using vlkd::testing::random_matrix;
using vlkd::testing::TempDir;

namespace {

double scalar_step(double p, double g, double lr, double wd) {
  Matrix value = Matrix::Constant(1, 1, p);
  const Matrix grad = Matrix::Constant(1, 1, g);
  OptimState st;
  st.options.lr = lr;
  st.options.weight_decay = wd;
  adamw_step({{"p", &value, &grad}}, st);
  return value(0, 0);
}

std::string bytes_of(const Checkpoint& c) {
  std::ostringstream out;
  c.write(out);
  return out.str();
}

}  // namespace

TEST(AdamW, HandSteppedScalar) { EXPECT_NEAR(scalar_step(1.0, 1.0, 0.1, 0.0), 1.0 - 0.1 / (1.0 + 1e-8), 1e-12); }

TEST(AdamW, DecayOnly) { EXPECT_NEAR(scalar_step(1.0, 0.0, 0.1, 0.01), 0.999, 1e-12); }

TEST(AdamW, ZeroGradNoDecayIsNoOp) {
  Rng rng = make_rng(1);
  Matrix p = random_matrix(rng, 3, 4);
  const Matrix before = p;
  const Matrix g = Matrix::Zero(3, 4);
  OptimState st;
  st.options.weight_decay = 0.0;
  for (int i = 0; i < 5; ++i) adamw_step({{"p", &p, &g}}, st);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 5);
}

TEST(AdamW, TwoStepsMatchReference) {
  // Reference Adam written out for two steps on a scalar.
  double p = 0.5, m = 0, v = 0;
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.1;
  const double grads[] = {0.3, -0.7};
  Matrix value = Matrix::Constant(1, 1, 0.5);
  OptimState st;
  st.options = {lr, wd, b1, b2, eps};
  for (int t = 1; t <= 2; ++t) {
    const double g = grads[t - 1];
    p -= lr * wd * p;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    p -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    const Matrix gm = Matrix::Constant(1, 1, g);
    adamw_step({{"p", &value, &gm}}, st);
  }
  EXPECT_NEAR(value(0, 0), p, 1e-14);
}

TEST(AdamW, NonFiniteGradNamesParameterAndLeavesValues) {
  Matrix a = Matrix::Ones(2, 2), b = Matrix::Ones(2, 2);
  const Matrix ga = Matrix::Ones(2, 2);
  Matrix gb = Matrix::Ones(2, 2);
  gb(1, 0) = std::numeric_limits<double>::quiet_NaN();
  OptimState st;
  try {
    adamw_step({{"alpha", &a, &ga}, {"blocks.1.wq", &b, &gb}}, st);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("blocks.1.wq"), std::string::npos);
  }
  EXPECT_EQ(a, Matrix::Ones(2, 2));
  EXPECT_EQ(st.step, 0);
}

TEST(AdamW, ZeroDecayEqualsAdam) {
  Rng rng = make_rng(2);
  Matrix p1 = random_matrix(rng, 2, 3), p2 = p1;
  OptimState s1, s2;
  s1.options.weight_decay = 0.0;
  s2.options.weight_decay = 0.0;
  for (int i = 0; i < 4; ++i) {
    const Matrix g = random_matrix(rng, 2, 3);
    adamw_step({{"p", &p1, &g}}, s1);
    adamw_step({{"p", &p2, &g}}, s2);
  }
  EXPECT_EQ(p1, p2);
}

TEST(Clip, ScalesToMaxNorm) {
  Matrix a = Matrix::Constant(1, 1, 3.0), b = Matrix::Constant(1, 1, 4.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm({{"a", &a}, {"b", &b}}, 1.0), 5.0);
  EXPECT_NEAR(a(0, 0), 0.6, 1e-12);
  EXPECT_NEAR(b(0, 0), 0.8, 1e-12);
  EXPECT_DOUBLE_EQ(clip_grad_norm({{"a", &a}, {"b", &b}}, 10.0), 1.0);
  EXPECT_NEAR(a(0, 0), 0.6, 1e-12);
}

TEST(Vlkc, SaveLoadSaveIdentical) {
  Rng rng = make_rng(3);
  Checkpoint c;
  c.config = {{"kind", "text"}, {"step", 7}};
  c.put("text.token_embedding", random_matrix(rng, 5, 3));
  c.put("half", random_matrix(rng, 2, 2), DType::kF32);
  TempDir dir("vlkc");
  c.save(dir / "a.vlkc");
  const Checkpoint back = Checkpoint::load(dir / "a.vlkc");
  back.save(dir / "b.vlkc");
  std::ifstream fa(dir / "a.vlkc", std::ios::binary), fb(dir / "b.vlkc", std::ios::binary);
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(back.get("text.token_embedding"), c.get("text.token_embedding"));
  EXPECT_EQ(back.config, c.config);
  EXPECT_EQ(back.dtype("half"), DType::kF32);
  EXPECT_THROW(c.put("bytes", Matrix::Ones(1, 3), DType::kU8), Error);
  EXPECT_THROW(back.get("missing"), Error);
}

TEST(Vlkc, NamedErrors) {
  Checkpoint c;
  c.put("w", Matrix::Ones(2, 2));
  const std::string good = bytes_of(c);
  auto error_of = [](std::string bytes) {
    std::istringstream in(bytes);
    try {
      Checkpoint::read(in);
    } catch (const Error& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_NE(error_of(bad).find("bad magic"), std::string::npos);
  bad = good;
  bad[4] = 9;
  EXPECT_NE(error_of(bad).find("version"), std::string::npos);
  EXPECT_NE(error_of(good.substr(0, good.size() - 3)).find("truncated"), std::string::npos);
  EXPECT_NE(error_of(good.substr(0, 2)).find("truncated"), std::string::npos);
}
