#pragma once

// Finite-difference verification sweep: every layer kind plus the composite
// loss through the full network at a toy configuration, repeated over many
// seeds at 64-bit. Shared by the CLI `gradcheck` subcommand and the
// acceptance harness.

#include <ostream>

#include "ffce/gradcheck.hpp"

namespace ffce {

struct SuiteCheck {
  std::string name;
  std::size_t seeds = 0;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t coords_checked = 0;
  std::size_t coords_failed = 0;
  double seconds = 0.0;

  bool pass() const { return coords_failed == 0; }
};

struct SuiteOptions {
  std::size_t seeds = 20;
  std::uint64_t seed_base = 100;
  std::size_t layer_coords = 6;  // sampled coordinates per parameter
  std::size_t net_coords = 2;
  std::ostream* log = nullptr;  // one line per check when set
};

struct SuiteSummary {
  std::vector<SuiteCheck> checks;
  double seconds = 0.0;

  bool ok() const {
    for (const auto& c : checks)
      if (!c.pass()) return false;
    return !checks.empty();
  }
  double max_rel_err() const {
    double m = 0.0;
    for (const auto& c : checks) m = std::max(m, c.max_rel_err);
    return m;
  }
};

SuiteSummary run_gradient_suite(const SuiteOptions& opt = {});

}  // namespace ffce
