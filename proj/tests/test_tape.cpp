#include <functional>

#include "doctest.h"
#include "grad_check.hpp"
#include "mmt/tape.hpp"

using namespace mmt;
using T = Tape<double>;
using Var = T::Var;
using Mat = Matrix<double>;

namespace {

constexpr double kTol = 1e-6;

/// Scalar sum(m (.) weights), so every output entry gets a distinct upstream gradient.
Var weighted_sum(T& t, Var m, std::uint64_t seed = 11) {
  const auto rows = t.value(m).rows();
  const auto cols = t.value(m).cols();
  Rng rng(seed);
  std::normal_distribution<double> n;
  Mat w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
  Var prod = t.hadamard(m, t.constant(w));
  Var left = t.matmul(t.constant(Mat::Ones(1, rows)), prod);
  return t.matmul(left, t.constant(Mat::Ones(cols, 1)));
}

struct Fixture {
  ParamStore<double> ps;

  std::size_t add(const std::string& name, Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
    const auto i = ps.add(name, r, c);
    Rng rng(seed);
    std::normal_distribution<double> n;
    for (Eigen::Index k = 0; k < r * c; ++k) ps[i].value.data()[k] = n(rng);
    return i;
  }

  /// Worst relative error of the tape gradient of build(tape) against finite differences.
  double check(const std::function<Var(T&)>& build) {
    auto backward = [&] {
      T t(true);
      t.backward(build(t));
    };
    auto value = [&] {
      T t(false);
      return t.value(build(t))(0, 0);
    };
    const auto r = testing::check_gradients(ps, backward, value, 1000);
    INFO("worst at " << r.where);
    return r.worst;
  }
};

}  // namespace

TEST_CASE("elementwise and linear ops match finite differences") {
  Fixture f;
  const auto a = f.add("a", 3, 4, 1);
  const auto b = f.add("b", 4, 5, 2);
  const auto c = f.add("c", 3, 4, 3);
  const auto row = f.add("row", 1, 4, 4);
  const auto d = f.add("d", 6, 4, 5);
  auto& ps = f.ps;
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.matmul(t.param(ps[a]), t.param(ps[b]))); }) < kTol);
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.matmul_nt(t.param(ps[a]), t.param(ps[d]))); }) < kTol);
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.add(t.param(ps[a]), t.param(ps[c]))); }) < kTol);
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.add_row(t.param(ps[a]), t.param(ps[row]))); }) < kTol);
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.hadamard(t.param(ps[a]), t.param(ps[c]))); }) < kTol);
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.scale(t.param(ps[a]), -2.5)); }) < kTol);
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.relu(t.param(ps[a]))); }) < kTol);
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.sigmoid(t.param(ps[a]))); }) < kTol);
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.broadcast_row(t.param(ps[row]), 5)); }) < kTol);
}

TEST_CASE("normalization and softmax ops match finite differences") {
  Fixture f;
  const auto x = f.add("x", 4, 6, 7);
  const auto gain = f.add("gain", 1, 6, 8);
  const auto bias = f.add("bias", 1, 6, 9);
  auto& ps = f.ps;
  CHECK(f.check([&](T& t) {
    return weighted_sum(t, t.layer_norm(t.param(ps[x]), t.param(ps[gain]), t.param(ps[bias])));
  }) < kTol);
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.log_softmax(t.param(ps[x]))); }) < kTol);

  AttentionMask allowed = AttentionMask::Constant(4, 6, true);
  allowed(0, 2) = allowed(1, 0) = allowed(1, 5) = allowed(3, 1) = false;
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.masked_softmax(t.param(ps[x]), allowed)); }) < kTol);

  const std::vector<int> targets{2, 0, 5, 1};
  CHECK(f.check([&](T& t) {
    return t.label_smoothed_nll(t.log_softmax(t.param(ps[x])), targets, 0.1, 0);
  }) < kTol);
}

TEST_CASE("structural ops match finite differences") {
  Fixture f;
  const auto a = f.add("a", 3, 4, 21);
  const auto b = f.add("b", 2, 4, 22);
  const auto c = f.add("c", 3, 2, 23);
  const auto table = f.add("table", 5, 3, 24);
  auto& ps = f.ps;
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.concat_rows(t.param(ps[a]), t.param(ps[b]))); }) < kTol);
  CHECK(f.check([&](T& t) {
    return weighted_sum(t, t.concat_cols({t.param(ps[a]), t.param(ps[c]), t.param(ps[a])}));
  }) < kTol);
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.slice_cols(t.param(ps[a]), 1, 2)); }) < kTol);
  const std::vector<int> ids{4, 0, 4, 2};
  CHECK(f.check([&](T& t) { return weighted_sum(t, t.gather_rows(t.param(ps[table]), ids)); }) < kTol);
  CHECK(f.check([&](T& t) {
    Rng rng(5);
    return weighted_sum(t, t.dropout(t.param(ps[a]), 0.4, rng));
  }) < kTol);
}

TEST_CASE("masked softmax gives exact zeros and normalized rows") {
  T t(false);
  Mat s(2, 4);
  s << 1e3, -2, 0.5, 7, 3, 3, 3, 3;
  AttentionMask allowed(2, 4);
  allowed << true, false, true, false, false, true, true, false;
  const Mat p = t.value(t.masked_softmax(t.constant(s), allowed));
  CHECK(p(0, 1) == 0.0);
  CHECK(p(0, 3) == 0.0);
  CHECK(p(1, 0) == 0.0);
  CHECK(p(1, 3) == 0.0);
  CHECK(p(0, 0) == doctest::Approx(1.0));
  CHECK(p(1, 1) == doctest::Approx(0.5));
  CHECK(p.row(1).sum() == doctest::Approx(1.0));

  AttentionMask none = AttentionMask::Constant(2, 4, false);
  none(0, 0) = true;
  CHECK_THROWS_AS(t.masked_softmax(t.constant(s), none), Error);
}

TEST_CASE("label smoothed nll") {
  T t(false);
  Mat logits(2, 3);
  logits << 0.2, -1.0, 0.7, 1.5, 0.0, -0.3;
  Var lp = t.log_softmax(t.constant(logits));
  const Mat l = t.value(lp);
  const std::vector<int> targets{2, 0};
  CHECK(t.value(t.label_smoothed_nll(lp, targets, 0.0, -1))(0, 0) == doctest::Approx(-l(0, 2) - l(1, 0)));
  const double smoothed = 0.9 * (-l(0, 2) - l(1, 0)) - 0.1 * (l.row(0).sum() + l.row(1).sum()) / 3;
  CHECK(t.value(t.label_smoothed_nll(lp, targets, 0.1, -1))(0, 0) == doctest::Approx(smoothed));
  // Rows whose target is the pad id contribute nothing.
  const std::vector<int> padded{2, 7};
  CHECK(t.value(t.label_smoothed_nll(lp, padded, 0.1, 7))(0, 0) ==
        doctest::Approx(0.9 * -l(0, 2) - 0.1 * l.row(0).sum() / 3));
}

TEST_CASE("shape errors and non-recording tapes") {
  T t(false);
  Var a = t.constant(Mat::Ones(2, 3));
  Var b = t.constant(Mat::Ones(2, 2));
  CHECK_THROWS_AS(t.matmul(a, b), ShapeError);
  CHECK_THROWS_AS(t.add(a, b), ShapeError);
  CHECK_THROWS_AS(t.backward(t.constant(Mat::Ones(1, 1))), Error);
  T r(true);
  CHECK_THROWS_AS(r.backward(r.constant(Mat::Ones(2, 1))), ShapeError);

  ParamStore<double> ps;
  ps.add("w", 2, 2);
  CHECK_THROWS_AS(ps.add("w", 1, 1), Error);
  CHECK_THROWS_AS(ps.at("nope"), NotFoundError);
}
