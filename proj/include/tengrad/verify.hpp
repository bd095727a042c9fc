// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

// ---------------------------------------------------------------------------
// Self-checking property suites behind the `verify` subcommand.
//
// Each suite rebuilds its reference values from first principles on fixed
// seeds (explicit per-sample Jacobian rows, dense primal solves, finite
// differences, closed-form cost models) and measures the production paths
// against them, so a corrupted build fails with the name of the check that
// caught it. Suites are independent and their check order is fixed, which
// makes `all` exactly the concatenation of the individual suites.
// ---------------------------------------------------------------------------

namespace tengrad {

enum class CheckKind {
    AtMost,   // pass iff measured <= bound
    AtLeast,  // pass iff measured >= bound
};

struct VerifyCheck {
    std::string name;
    double measured = 0.0;
    double bound = 0.0;
    CheckKind kind = CheckKind::AtMost;
    bool pass = false;
};

struct VerifyReport {
    std::string suite;
    std::vector<VerifyCheck> checks;

    bool all_pass() const;
    std::size_t pass_count() const;
};

// suite is one of factorization, woodbury, jvpvjp, general, gradients,
// flops, convergence, all. ConfigError on anything else.
VerifyReport run_suite(const std::string& suite);

// One line per check (pass/FAIL, name, measured value, bound), then a
// PASS/FAIL summary line with the check tally.
void print_report(std::ostream& os, const VerifyReport& report);

}  // namespace tengrad
