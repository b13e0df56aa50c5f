#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kest {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool passed() const;
  void add(std::string name, bool passed, std::string detail);
  void append(const VerifyReport& other);
  /// One "PASS name: detail" / "FAIL name: detail" line per check.
  std::string to_text() const;
};

/// Mixed cross-entropy of a real/pseudo mixture against the weighted KL form
/// plus its constant, on random distributions over a small enumerable space.
VerifyReport verify_lemma1(std::uint64_t seed = 1, int trials = 100, double tolerance = 1e-10);

/// Kernel two-sample identities on random small sets, each computed along two
/// independent routes: (i) pairwise sums vs Gram-matrix form, (ii) loss_mmd
/// plus the target-only term vs the unbiased estimator, (iii) the expansion of
/// a contaminated target's discrepancy.
VerifyReport verify_mmd_identity(std::uint64_t seed = 1, int trials = 100, double tolerance = 1e-10);

enum class Precision { kFloat32, kFloat64 };

struct GradientCheckConfig {
  Precision precision = Precision::kFloat64;
  double step = 1e-3;  // fourth-order stencil
  double rel_tolerance = 1e-4;
  double abs_tolerance = 1e-8;
  std::uint64_t seed = 1;
};

/// Central finite differences (fourth-order stencil) for every entry of every parameter of a small
/// double-precision model, for each loss term (ag, cls, nag, kernel).
/// Throws ConfigError unless precision is float64.
VerifyReport verify_gradients(const GradientCheckConfig& config = {});

/// Changing tokens after position j never changes causal logits up to j
/// (exact comparison).
VerifyReport verify_causality(std::uint64_t seed = 1, int trials = 200);

/// Everything cmd_verify runs.
VerifyReport verify_all(std::uint64_t seed = 1);

}  // namespace kest
