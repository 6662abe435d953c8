#pragma once

// Finite-difference suites per module, shared by the command line and tests.

#include "triad/tensor.hpp"

#include <string>
#include <vector>

namespace triad {

struct GradCheckRow {
  std::string module;
  std::string op;
  int seeds = 0;
  Index cells = 0;
  Index kinks = 0;
  double max_rel_error = 0;
  double tolerance = 0;
  bool pass = false;
};

/// tensor-core, attention-head, coord-attention, neck, postproc-loss, model.
std::vector<std::string> gradcheck_modules();

/// Runs every check of `module` (or of all modules for "all") over seeds
/// 0 .. seeds - 1. A row passes when the worst relative error over smooth
/// cells is below its tolerance and at most 10% of probed cells sit on kinks.
/// `corrupt` perturbs every analytic gradient (harness self-test).
std::vector<GradCheckRow> run_gradcheck(const std::string& module, int seeds, bool corrupt = false);

std::string format_gradcheck_table(const std::vector<GradCheckRow>& rows);

}  // namespace triad
