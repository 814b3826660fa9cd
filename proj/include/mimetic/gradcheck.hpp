#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mimetic::gradcheck {

// Central finite differences with step h on 64-bit floats. Error metric is
// rel = |analytic - fd| / max(|analytic|, |fd|, 1e-3): the 1e-3 floor turns
// the test absolute (diff <= tol * 1e-3) for near-zero gradients, far above
// the ~1e-10 FD noise floor of these losses.
struct Options {
  double step = 1e-6;
  double primitive_tol = 1e-5;
  double model_tol = 1e-4;      // end-to-end 2-block model cases
  int points = 100;             // random input draws per primitive case
  std::uint64_t seed = 20240501;
};

struct CaseResult {
  std::string name;
  double worst_rel_err = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// All case names, primitives first, then model_convnext / model_vit.
std::vector<std::string> case_names();

CaseResult run_case(std::string_view name, const Options& opts);

// Runs every case whose name is in `filter` (all cases when empty).
// Unknown names in the filter raise UsageError.
std::vector<CaseResult> run_suite(const Options& opts,
                                  std::span<const std::string> filter = {});

// Test hook: corrupts the analytic gradients of the gelu case so the checker
// itself can be shown to catch a broken derivative. Never set outside tests.
void set_fault_injection(bool enabled);
bool fault_injection();

}  // namespace mimetic::gradcheck
