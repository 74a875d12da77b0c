#include <gtest/gtest.h>

#include <cmath>

#include "slotnav/archive.hpp"
#include "slotnav/gradcheck.hpp"
#include "slotnav/nn.hpp"
#include "slotnav/tensor.hpp"

using namespace slotnav;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor::constant({n}, std::move(v));
}

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor::constant({r, c}, std::move(v));
}

}  // namespace

TEST(Affine, IdentityWeight) {
  Tensor x = vec({1, 2});
  Tensor w = mat(2, 2, {1, 0, 0, 1});
  Tensor y = affine(x, w);
  EXPECT_DOUBLE_EQ(y.at(0), 1.0);
  EXPECT_DOUBLE_EQ(y.at(1), 2.0);
}

TEST(Affine, HandArithmetic) {
  // [1,0] @ [[2,3],[5,7]] + [1,1] = [3,4]
  Tensor x = vec({1, 0});
  Tensor w = mat(2, 2, {2, 3, 5, 7});
  Tensor b = vec({1, 1});
  Tensor y = affine(x, w, b);
  EXPECT_DOUBLE_EQ(y.at(0), 3.0);
  EXPECT_DOUBLE_EQ(y.at(1), 4.0);
}

TEST(Affine, ShapeErrorNamesBothShapes) {
  Tensor x = vec({1, 2, 3});
  Tensor w = mat(2, 2, {1, 0, 0, 1});
  try {
    affine(x, w);
    FAIL() << "expected shape error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,2]"), std::string::npos) << msg;
  }
}

TEST(Affine, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  ParamStore ps;
  Tensor& w = ps.create_gaussian("w", {3, 2}, 3, rng);
  Tensor& b = ps.create_gaussian("b", {2}, 1, rng);
  std::vector<double> xv(2 * 3);
  for (auto& t : xv) t = rng.gaussian();
  auto loss = [&]() { return sum(affine(mat(2, 3, xv), w, b)); };
  auto report = finite_diff_check(loss, ps, 1e-5, 1e-6);
  EXPECT_TRUE(report.passed) << report.worst_path << " " << report.max_rel_err;
}

TEST(LayerNorm, ConstantInputIsZero) {
  Tensor x = vec({3, 3, 3});
  Tensor g = vec({1, 1, 1});
  Tensor b = vec({0, 0, 0});
  Tensor y = layer_norm(x, g, b, 1e-6);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y.at(i), 0.0, 1e-12);
}

TEST(LayerNorm, AlreadyNormalized) {
  Tensor y = layer_norm(vec({1, -1}), vec({1, 1}), vec({0, 0}), 0.0);
  EXPECT_NEAR(y.at(0), 1.0, 1e-12);
  EXPECT_NEAR(y.at(1), -1.0, 1e-12);
}

TEST(LayerNorm, GainAndBias) {
  // x=[0,2]: mean 1, std 1 -> xhat=[-1,1]; *2 + 1 = [-1,3]
  Tensor y = layer_norm(vec({0, 2}), vec({2, 2}), vec({1, 1}), 0.0);
  EXPECT_NEAR(y.at(0), -1.0, 1e-12);
  EXPECT_NEAR(y.at(1), 3.0, 1e-12);
}

TEST(LayerNorm, RandomRowsHaveZeroMeanUnitVariance) {
  Rng rng(5);
  const std::size_t rows = 20, d = 16;
  std::vector<double> xv(rows * d);
  for (auto& t : xv) t = rng.gaussian() * 3.0 + 1.5;
  Tensor y = layer_norm(mat(rows, d, xv), Tensor::full({d}, 1.0), Tensor::zeros({d}), 1e-6);
  for (std::size_t i = 0; i < rows; ++i) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += y.at(i, j);
    mu /= d;
    for (std::size_t j = 0; j < d; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
    var /= d;
    EXPECT_LT(std::abs(mu), 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(LayerNorm, GradientCheck) {
  Rng rng(7);
  ParamStore ps;
  auto ln = make_layer_norm(ps, "ln", 4);
  Tensor& x = ps.create_gaussian("x", {3, 4}, 1, rng);
  std::vector<double> wv(12);
  for (auto& t : wv) t = rng.gaussian();
  auto loss = [&]() { return sum(mul(tanh_op(layer_norm(x, ln)), mat(3, 4, wv))); };
  auto report = finite_diff_check(loss, ps, 1e-5, 1e-6);
  EXPECT_TRUE(report.passed) << report.worst_path << " " << report.max_rel_err;
}

TEST(Softmax, Symmetry) {
  Tensor y = softmax_over_axis(vec({0, 0}), 0);
  EXPECT_DOUBLE_EQ(y.at(0), 0.5);
  EXPECT_DOUBLE_EQ(y.at(1), 0.5);
}

TEST(Softmax, ExactExponentials) {
  Tensor y = softmax_over_axis(vec({std::log(2.0), 0.0}), 0);
  EXPECT_NEAR(y.at(0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(y.at(1), 1.0 / 3.0, 1e-15);
}

TEST(Softmax, SingleSurvivorUnderMask) {
  std::vector<std::uint8_t> mask = {1, 0};
  Tensor y = softmax_over_axis(vec({5, 9}), 0, &mask);
  EXPECT_DOUBLE_EQ(y.at(0), 1.0);
  EXPECT_DOUBLE_EQ(y.at(1), 0.0);
}

TEST(Softmax, FullyMaskedSliceIsZero) {
  std::vector<std::uint8_t> mask = {0, 0, 1, 1};  // col 0 fully masked (axis 0 of 2x2)
  mask = {0, 1, 0, 1};
  Tensor y = softmax_over_axis(mat(2, 2, {1, 2, 3, 4}), 0, &mask);
  EXPECT_DOUBLE_EQ(y.at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(y.at(1, 0), 0.0);
  EXPECT_NEAR(y.at(0, 1) + y.at(1, 1), 1.0, 1e-12);
}

TEST(Softmax, AxisOutOfRange) {
  EXPECT_THROW(softmax_over_axis(vec({1, 2}), 1), std::invalid_argument);
  EXPECT_THROW(softmax_over_axis(mat(2, 2, {1, 2, 3, 4}), 2), std::invalid_argument);
}

TEST(Softmax, UnmaskedSumsToOneOverRandomInputs) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 3, c = 5;
    std::vector<double> xv(r * c);
    for (auto& t : xv) t = rng.gaussian() * 4.0;
    std::vector<std::uint8_t> mask(r * c);
    for (auto& m : mask) m = rng.uniform() < 0.6 ? 1 : 0;
    const std::size_t axis = trial % 2;
    Tensor y = softmax_over_axis(mat(r, c, xv), axis, &mask);
    const std::size_t n_slices = axis == 0 ? c : r;
    const std::size_t len = axis == 0 ? r : c;
    for (std::size_t s = 0; s < n_slices; ++s) {
      double acc = 0.0;
      bool any = false;
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t ri = axis == 0 ? i : s;
        const std::size_t ci = axis == 0 ? s : i;
        acc += y.at(ri, ci);
        if (mask[ri * c + ci]) any = true;
        if (!mask[ri * c + ci]) EXPECT_DOUBLE_EQ(y.at(ri, ci), 0.0);
      }
      EXPECT_NEAR(acc, any ? 1.0 : 0.0, 1e-9);
    }
  }
}

TEST(Softmax, MaskedGradientCheck) {
  Rng rng(9);
  ParamStore ps;
  Tensor& x = ps.create_gaussian("x", {3, 4}, 1, rng);
  std::vector<std::uint8_t> mask(12, 1);
  mask[1] = mask[5] = mask[10] = 0;
  std::vector<double> weight(12);
  for (auto& w : weight) w = rng.gaussian();
  auto loss = [&]() {
    return sum(mul(softmax_over_axis(x, 0, &mask), mat(3, 4, weight)));
  };
  auto report = finite_diff_check(loss, ps, 1e-5, 1e-6);
  EXPECT_TRUE(report.passed) << report.max_rel_err;
}

TEST(GruCell, AllZeroEverything) {
  Rng rng(1);
  ParamStore ps;
  auto gru = make_gru(ps, "gru", 3, 2, rng);
  for (auto& [path, t] : ps) std::fill(t.value().begin(), t.value().end(), 0.0);
  Tensor out = gru_cell(Tensor::zeros({2, 2}), Tensor::zeros({2, 3}), gru);
  for (double v : out.value()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(GruCell, SaturatedUpdateGateKeepsState) {
  Rng rng(2);
  ParamStore ps;
  auto gru = make_gru(ps, "gru", 3, 2, rng);
  std::fill(gru.b_update.value().begin(), gru.b_update.value().end(), -1000.0);
  std::vector<double> st = {0.3, -0.7, 1.2, 0.05};
  Tensor state = mat(2, 2, st);
  Tensor out = gru_cell(state, mat(2, 3, {1, 2, 3, 4, 5, 6}), gru);
  for (std::size_t i = 0; i < st.size(); ++i) EXPECT_DOUBLE_EQ(out.value()[i], st[i]);
}

TEST(GruCell, GradientCheck) {
  Rng rng(4);
  ParamStore ps;
  auto gru = make_gru(ps, "gru", 3, 2, rng);
  Tensor& state = ps.create_gaussian("state", {2, 2}, 1, rng);
  Tensor& input = ps.create_gaussian("input", {2, 3}, 1, rng);
  auto loss = [&]() { return sum(mul(gru_cell(state, input, gru), gru_cell(state, input, gru))); };
  auto report = finite_diff_check(loss, ps, 1e-5, 1e-4);
  EXPECT_TRUE(report.passed) << report.worst_path << " " << report.max_rel_err;
}

TEST(ResidualMlp, ZeroSecondLayerGivesZero) {
  Rng rng(6);
  ParamStore ps;
  auto mlp = make_mlp(ps, "mlp", 4, 4, 4, rng);
  std::fill(mlp.w2.value().begin(), mlp.w2.value().end(), 0.0);
  std::fill(mlp.b2.value().begin(), mlp.b2.value().end(), 0.0);
  Tensor out = residual_mlp(mat(2, 4, {1, 2, 3, 4, 5, 6, 7, 8}), mlp);
  for (double v : out.value()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(ResidualMlp, ZeroMlpLeavesResidualPathIdentity) {
  Rng rng(8);
  ParamStore ps;
  auto mlp = make_mlp(ps, "mlp", 4, 4, 4, rng);
  std::fill(mlp.w2.value().begin(), mlp.w2.value().end(), 0.0);
  std::fill(mlp.b2.value().begin(), mlp.b2.value().end(), 0.0);
  std::vector<double> sv = {1, -2, 3, -4, 5, -6, 7, -8};
  Tensor slots = mat(2, 4, sv);
  Tensor updated = add(slots, residual_mlp(slots, mlp));
  for (std::size_t i = 0; i < sv.size(); ++i) EXPECT_DOUBLE_EQ(updated.value()[i], sv[i]);
}

TEST(ResidualMlp, GradientCheck) {
  Rng rng(12);
  ParamStore ps;
  auto mlp = make_mlp(ps, "mlp", 3, 5, 3, rng);
  Tensor& x = ps.create_gaussian("x", {2, 3}, 1, rng);
  auto loss = [&]() { return sum(mul(residual_mlp(x, mlp), residual_mlp(x, mlp))); };
  auto report = finite_diff_check(loss, ps, 1e-5, 1e-4);
  EXPECT_TRUE(report.passed) << report.worst_path << " " << report.max_rel_err;
}

TEST(Dropout, RateZeroIsIdentity) {
  Rng rng(1);
  Tensor x = vec({1, 2, 3});
  Tensor y = dropout(x, 0.0, true, rng);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(y.at(i), x.at(i));
}

TEST(Dropout, EvalModeIsIdentity) {
  Rng rng(1);
  Tensor x = vec({1, 2, 3});
  Tensor y = dropout(x, 0.9, false, rng);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(y.at(i), x.at(i));
}

TEST(Dropout, SurvivorFraction) {
  Rng rng(2024);
  Tensor x = Tensor::full({10000}, 1.0);
  Tensor y = dropout(x, 0.5, true, rng);
  std::size_t survivors = 0;
  for (double v : y.value())
    if (v != 0.0) ++survivors;
  const double frac = static_cast<double>(survivors) / 10000.0;
  EXPECT_NEAR(frac, 0.5, 0.02);
  // survivors are scaled by 1/(1-rate)
  for (double v : y.value()) EXPECT_TRUE(v == 0.0 || std::abs(v - 2.0) < 1e-12);
}

TEST(Dropout, RateOneRejected) {
  Rng rng(1);
  EXPECT_THROW(dropout(vec({1}), 1.0, true, rng), std::invalid_argument);
}

TEST(FiniteDiff, SumOfSquares) {
  ParamStore ps;
  Tensor& p = ps.create("p", {4}, {0.5, -1.25, 2.0, 3.5});
  auto loss = [&]() { return sum(mul(p, p)); };
  auto report = finite_diff_check(loss, ps, 1e-5, 1e-8);
  EXPECT_TRUE(report.passed) << report.max_rel_err;
}

TEST(FiniteDiff, SignFlipNegativeControl) {
  ParamStore ps;
  ps.create("p", {2}, {1.0, 2.0});
  auto loss = [&]() { return sum(mul(ps.at("p"), ps.at("p"))); };
  auto report = finite_diff_check(loss, ps, 1e-5, 1e-4, "p");
  EXPECT_FALSE(report.passed);
}

TEST(FiniteDiff, ReportListsEveryParameterOnce) {
  Rng rng(3);
  ParamStore ps;
  ps.create_gaussian("a", {2}, 1, rng);
  ps.create_gaussian("b", {2, 2}, 2, rng);
  ps.create_gaussian("c", {1}, 1, rng);
  auto loss = [&]() {
    return add(sum(mul(ps.at("a"), ps.at("a"))),
               add(sum(mul(ps.at("b"), ps.at("b"))), sum(mul(ps.at("c"), ps.at("c")))));
  };
  auto report = finite_diff_check(loss, ps, 1e-5, 1e-6);
  ASSERT_EQ(report.entries.size(), 3u);
  EXPECT_EQ(report.entries[0].path, "a");
  EXPECT_EQ(report.entries[1].path, "b");
  EXPECT_EQ(report.entries[2].path, "c");
}

TEST(ParamStore, DuplicatePathRejected) {
  ParamStore ps;
  ps.create_zeros("a.b", {2});
  EXPECT_THROW(ps.create_zeros("a.b", {2}), std::invalid_argument);
}

TEST(ParamStore, LexicographicIteration) {
  ParamStore ps;
  ps.create_zeros("z", {1});
  ps.create_zeros("a", {1});
  ps.create_zeros("m.q", {1});
  std::vector<std::string> order;
  for (auto& [path, _] : ps) order.push_back(path);
  EXPECT_EQ(order, (std::vector<std::string>{"a", "m.q", "z"}));
}

TEST(Tensor, DetachBlocksGradient) {
  ParamStore ps;
  Tensor& p = ps.create("p", {2}, {1.0, 2.0});
  Tensor loss = sum(mul(p.detach(), p));
  ps.zero_grads();
  backward(loss);
  // d/dp of detach(p)*p is detach(p) only
  EXPECT_DOUBLE_EQ(p.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(p.grad()[1], 2.0);
}

TEST(Tensor, EvalModeDeterminism) {
  Rng rng(99);
  ParamStore ps;
  auto mlp = make_mlp(ps, "m", 4, 6, 4, rng);
  std::vector<double> xv(8);
  for (auto& t : xv) t = rng.gaussian();
  NoGradGuard ng;
  Tensor a = residual_mlp(mat(2, 4, xv), mlp);
  Tensor b = residual_mlp(mat(2, 4, xv), mlp);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.value()[i], b.value()[i]);
}

TEST(Archive, BitExactRoundTrip) {
  Rng rng(42);
  Archive a;
  std::vector<double> payload(12);
  for (auto& v : payload) v = rng.gaussian() * 1e3;
  payload[0] = 0.1 + 0.2;  // not exactly representable
  a.add("model.w", {3, 4}, payload);
  a.add("model.b", {4}, {1e-300, -0.0, 3.14159, 2.71828});
  a.add("opt.step", {}, {17.0});
  const std::string file = ::testing::TempDir() + "roundtrip.ckpt";
  a.save(file);
  Archive b = Archive::load(file);
  ASSERT_EQ(b.size(), 3u);
  for (const auto& e : a.entries()) {
    const auto& r = b.at(e.path);
    ASSERT_EQ(r.shape, e.shape);
    ASSERT_EQ(r.data.size(), e.data.size());
    for (std::size_t i = 0; i < e.data.size(); ++i) {
      EXPECT_EQ(std::memcmp(&r.data[i], &e.data[i], sizeof(double)), 0);
    }
  }
}

TEST(Archive, ManifestOrderPreserved) {
  Archive a;
  a.add("zz", {1}, {1.0});
  a.add("aa", {1}, {2.0});
  const std::string file = ::testing::TempDir() + "order.ckpt";
  a.save(file);
  Archive b = Archive::load(file);
  EXPECT_EQ(b.entries()[0].path, "zz");
  EXPECT_EQ(b.entries()[1].path, "aa");
}
