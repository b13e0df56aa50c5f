#include "kest/losses.hpp"

#include <cmath>
#include <gtest/gtest.h>

#include "kest/diagnostics.hpp"
#include "kest/error.hpp"
#include "kest/rng.hpp"

namespace kest {
namespace {

Matrix<double> random_matrix(Rng& rng, Index rows, Index cols) {
  Matrix<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal01(rng);
  return m;
}

// -log softmax(row)[t], computed directly.
double nll(const Matrix<double>& logits, Index row, int t) {
  double z = 0;
  for (Index c = 0; c < logits.cols(); ++c) z += std::exp(logits(row, c));
  return std::log(z) - logits(row, t);
}

TEST(LossAg, SumsNextTokenNll) {
  Rng rng = make_rng(1, "loss-ag");
  const auto s = TokenSequence::from_content({6, 7, 8}, 8);  // BOS 6 7 8 EOS
  const Matrix<double> logits = random_matrix(rng, s.length, 10);
  double expected = 0;
  for (int j = 0; j + 1 < s.length; ++j) expected += nll(logits, j, s.ids[static_cast<std::size_t>(j + 1)]);
  EXPECT_NEAR(loss_ag_value(logits, s), expected, 1e-12);
}

TEST(LossAg, SkipsMaskTargets) {
  Rng rng = make_rng(2, "loss-ag");
  auto s = TokenSequence::from_content({6, 7, 8}, 8);
  s.ids[2] = special::kMask;
  const Matrix<double> logits = random_matrix(rng, s.length, 10);
  double expected = nll(logits, 0, 6) + nll(logits, 2, 8) + nll(logits, 3, special::kEos);
  EXPECT_NEAR(loss_ag_value(logits, s), expected, 1e-12);
}

TEST(LossNag, ScoresMaskedPositionsOnly) {
  Rng rng = make_rng(3, "loss-nag");
  const auto s = TokenSequence::from_content({6, 7, 8, 9}, 8);
  const auto mask = MaskVector::from_string("0101");
  const Matrix<double> logits = random_matrix(rng, s.length, 12);
  EXPECT_NEAR(loss_nag_value(logits, s, mask), nll(logits, 2, 7) + nll(logits, 4, 9), 1e-12);
  EXPECT_NEAR(loss_nag_value(logits, s, MaskVector::from_string("0000")), 0.0, 0.0);
  EXPECT_THROW(loss_nag_value(logits, s, MaskVector::from_string("01")), PreconditionError);
}

TEST(LossCls, NegativeLogAndClamp) {
  EXPECT_NEAR(loss_cls_value(std::vector<double>{0.25, 0.75}, 1), -std::log(0.75), 1e-15);
  diag::reset_warnings();
  EXPECT_NEAR(loss_cls_value(std::vector<double>{1.0, 0.0}, 1), -std::log(kLogClamp), 1e-9);
  EXPECT_EQ(diag::warning_count("loss_cls.clamped"), 1u);
}

TEST(LossJoint, WeightedSum) {
  EXPECT_DOUBLE_EQ(loss_joint(1.0, 2.0, 3.0, kBaseWeights), 5.0 + 2.0 + 3.0);
  EXPECT_DOUBLE_EQ(loss_joint(1.0, 2.0, 3.0, kSelfTrainWeights), 6.0);
  ag::Tape<double> tape(false);
  auto v = loss_joint(tape.constant(Matrix<double>::Constant(1, 1, 1.0)),
                      tape.constant(Matrix<double>::Constant(1, 1, 2.0)),
                      tape.constant(Matrix<double>::Constant(1, 1, 3.0)), LossWeights{0.5, 0.0, 2.0});
  EXPECT_DOUBLE_EQ(v.scalar(), 6.5);
}

TEST(Kernel, RbfBankSum) {
  Matrix<double> a(1, 2), b(1, 2);
  a << 0, 0;
  b << 3, 4;  // squared distance 25
  const std::vector<double> bank{1.0, 5.0};
  EXPECT_DOUBLE_EQ(squared_distance(a, b), 25.0);
  EXPECT_NEAR(rbf_kernel(a, b, bank), std::exp(-12.5) + std::exp(-0.5), 1e-15);
  EXPECT_DOUBLE_EQ(rbf_kernel(a, a, bank), 2.0);
  EXPECT_THROW(rbf_kernel(a, b, std::vector<double>{0.0}), ConfigError);
  EXPECT_THROW(rbf_kernel(a, Matrix<double>(2, 2), bank), IntegrityError);
}

TEST(Kernel, BandwidthBank) {
  Matrix<double> z = Matrix<double>::Zero(1, 1), one = Matrix<double>::Ones(1, 1), two = Matrix<double>::Constant(1, 1, 2);
  // Cross distances: |0-1|^2, |0-2|^2, |1-1|^2, |1-2|^2 -> mean (1 + 4 + 0 + 1) / 4 = 1.5
  const auto bank = median_bandwidths<double>({z, one}, {one, two}, 2);
  ASSERT_EQ(bank.size(), 5u);
  EXPECT_DOUBLE_EQ(bank[0], 1.5 / 4);
  EXPECT_DOUBLE_EQ(bank[2], 1.5);
  EXPECT_DOUBLE_EQ(bank[4], 6.0);
  diag::reset_warnings();
  const auto flat = median_bandwidths<double>({z, z}, {z, z}, 0);
  EXPECT_DOUBLE_EQ(flat[0], kBandwidthFloor);
  EXPECT_EQ(diag::warning_count("bandwidth.degenerate"), 1u);
}

TEST(KernelConfig, Validation) {
  KernelConfig k;
  EXPECT_NO_THROW(k.validate());
  k.bandwidths = {1.0, 2.0};
  EXPECT_THROW(k.validate(), ConfigError);
  k.bandwidths = {1, 1, -1, 1, 1};
  EXPECT_THROW(k.validate(), ConfigError);
}

TEST(Mmd, TwoPointClosedForm) {
  // N = 2 scalars, single bandwidth 1: within = 2 k(o1,o2)/2, cross = sum of
  // four kernels times 2/4.
  Matrix<double> o1 = Matrix<double>::Constant(1, 1, 0.0), o2 = Matrix<double>::Constant(1, 1, 1.0);
  Matrix<double> t1 = Matrix<double>::Constant(1, 1, 0.5), t2 = Matrix<double>::Constant(1, 1, 2.0);
  auto k = [](double x, double y) { return std::exp(-(x - y) * (x - y) / 2); };
  const double expected = k(0, 1) - 0.5 * (k(0, 0.5) + k(0, 2) + k(1, 0.5) + k(1, 2));
  EXPECT_NEAR(loss_mmd({o1, o2}, {t1, t2}, std::vector<double>{1.0}), expected, 1e-15);
}

TEST(Mmd, RejectsBadSizes) {
  const Matrix<double> a = Matrix<double>::Zero(1, 1);
  const std::vector<double> bank{1.0};
  EXPECT_THROW(loss_mmd({a}, {a}, bank), PreconditionError);
  EXPECT_THROW(loss_mmd({a, a}, {a}, bank), PreconditionError);
  EXPECT_THROW(loss_mmd({a, a}, {a, a}, std::vector<double>{}), ConfigError);
}

TEST(Mmd, MatchingTargetsMinimizeOverShift) {
  // Moving D_o away from a fixed D_pt increases the loss.
  Rng rng = make_rng(4, "mmd-shift");
  std::vector<Matrix<double>> t;
  for (int i = 0; i < 6; ++i) t.push_back(random_matrix(rng, 2, 2));
  const std::vector<double> bank{0.5, 1.0, 2.0};
  double previous = loss_mmd(t, t, bank);
  for (double shift : {0.5, 1.0, 2.0, 4.0}) {
    std::vector<Matrix<double>> o;
    for (const auto& m : t) o.push_back(m.array() + shift);
    const double v = loss_mmd(o, t, bank);
    EXPECT_GT(v, previous);
    previous = v;
  }
}

TEST(Mmd, GradientMatchesFiniteDifferences) {
  Rng rng = make_rng(5, "mmd-grad");
  const int n = 4;
  std::vector<Matrix<double>> o, t;
  for (int i = 0; i < n; ++i) {
    o.push_back(random_matrix(rng, 2, 3));
    t.push_back(random_matrix(rng, 2, 3));
  }
  const std::vector<double> bank{0.7, 1.4, 2.8};
  ag::Tape<double> tape;
  std::vector<ag::Var<double>> vars;
  for (const auto& m : o) vars.push_back(tape.leaf(m));
  auto loss = loss_mmd(vars, t, bank);
  EXPECT_NEAR(loss.scalar(), loss_mmd(o, t, bank), 1e-15);
  tape.backward(loss);
  const double h = 1e-5;
  for (int i = 0; i < n; ++i) {
    for (Index k = 0; k < o[static_cast<std::size_t>(i)].size(); ++k) {
      auto plus = o, minus = o;
      plus[static_cast<std::size_t>(i)].data()[k] += h;
      minus[static_cast<std::size_t>(i)].data()[k] -= h;
      const double fd = (loss_mmd(plus, t, bank) - loss_mmd(minus, t, bank)) / (2 * h);
      EXPECT_NEAR(vars[static_cast<std::size_t>(i)].grad().data()[k], fd, 1e-8);
    }
  }
}

TEST(Mmd, SignFlipMutation) {
  const Matrix<double> a = Matrix<double>::Zero(1, 1), b = Matrix<double>::Ones(1, 1);
  const std::vector<double> bank{1.0};
  const double clean = loss_mmd({a, b}, {a, b}, bank);
  mutation::set_mmd_cross_sign_flip(true);
  const double flipped = loss_mmd({a, b}, {a, b}, bank);
  mutation::set_mmd_cross_sign_flip(false);
  EXPECT_FALSE(mutation::mmd_cross_sign_flip());
  // within = k(0,1); cross total = 2 + 2 k(0,1), scaled by 2/4.
  const double k01 = std::exp(-0.5);
  EXPECT_NEAR(clean, k01 - (1 + k01), 1e-15);
  EXPECT_NEAR(flipped, k01 + (1 + k01), 1e-15);
}

TEST(Groups, ReleasedAtMinimumSize) {
  PseudoTextGroups g(2, 3);
  g.add(0, 10);
  g.add(1, 11);
  g.add(0, 12);
  EXPECT_TRUE(g.take_ready().empty());
  g.add(0, 13);
  const auto ready = g.take_ready();
  ASSERT_EQ(ready.size(), 1u);
  EXPECT_EQ(ready[0], (std::vector<std::size_t>{10, 12, 13}));
  EXPECT_EQ(g.pending(), 1u);
  EXPECT_THROW(g.add(2, 1), IntegrityError);
}

TEST(Groups, FlushDropsSingletons) {
  PseudoTextGroups g(3, 4);
  g.add(0, 1);
  g.add(0, 2);
  g.add(1, 3);
  diag::reset_warnings();
  std::size_t dropped = 0;
  const auto out = g.flush(&dropped);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(dropped, 1u);
  EXPECT_EQ(g.pending(), 0u);
  EXPECT_EQ(diag::warning_count("pseudo_text.dropped_singleton"), 1u);
  EXPECT_THROW(PseudoTextGroups(2, 1), ConfigError);
}

}  // namespace
}  // namespace kest
