#include <doctest.h>

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "deltaprune/verify.hpp"

using namespace dp;

namespace {

// Reduced trial budget: same properties, quick enough for a unit run.
VerifyBudget small_budget() {
  VerifyBudget b;
  b.snr_trials = 200;
  b.snr_dims = {4, 8};
  b.corollary_states = 6;
  b.corollary_draws = 2000;
  b.sandwich_trials = 80;
  b.rank_bound_trials = 40;
  b.invariance_transforms = 10;
  b.conv_commute_trials = 30;
  b.pca_trials = 40;
  b.er_trials = 40;
  b.stability_trials = 30;
  b.seed = 7;
  return b;
}

void expect_clean(const CheckResult& c, const char* name) {
  INFO("check ", name, " note=", c.note);
  CHECK(c.name == name);
  CHECK(c.trials > 0);
  CHECK(c.violations == 0);
  CHECK(c.passed);
  CHECK(c.worst_slack >= 0.0);
  CHECK(c.seconds >= 0.0);
}

}  // namespace

TEST_SUITE("verify") {

TEST_CASE("every property check passes on a reduced budget") {
  const VerifyBudget b = small_budget();
  expect_clean(verify_theorem_snr(b), "theorem-snr");
  expect_clean(verify_kappa_bounds(b), "kappa-bounds");
  expect_clean(verify_corollary_expected(b), "expected-noise-bracket");
  expect_clean(verify_sandwich(b), "rank-sandwich");
  expect_clean(verify_rank_bound(b), "state-rank-bound");
  expect_clean(verify_er_properties(b), "er-properties");
  expect_clean(verify_stability(b), "stability-eigenvalues");
  expect_clean(verify_mixer_invariance(b), "mixer-orthogonal-invariance");
  expect_clean(verify_conv_commutation(b), "conv-slice-commutation");
  expect_clean(verify_pca_monotonicity(b), "pca-monotonicity");
}

TEST_CASE("the full run reports ten checks in a stable order") {
  VerifyReport r = run_all_checks(small_budget());
  REQUIRE(r.checks.size() == 10);
  const std::vector<std::string> expected{
      "theorem-snr",        "kappa-bounds",          "expected-noise-bracket",
      "rank-sandwich",      "state-rank-bound",      "er-properties",
      "stability-eigenvalues", "mixer-orthogonal-invariance", "conv-slice-commutation",
      "pca-monotonicity"};
  for (size_t i = 0; i < expected.size(); ++i) CHECK(r.checks[i].name == expected[i]);
  CHECK(r.all_passed());
}

TEST_CASE("a sabotaged bound is caught, proving the harness can fail") {
  VerifyBudget b = small_budget();
  b.sabotage = "theorem-snr";
  VerifyReport r = run_all_checks(b);
  CHECK_FALSE(r.all_passed());
  const CheckResult& snr = r.checks[0];
  CHECK(snr.name == "theorem-snr");
  CHECK(snr.violations > 0);
  CHECK_FALSE(snr.passed);
  CHECK(snr.worst_slack < 0.0);
  // The corruption is scoped to the named check.
  for (size_t i = 1; i < r.checks.size(); ++i) CHECK(r.checks[i].passed);
}

TEST_CASE("reports are deterministic for a fixed seed") {
  const VerifyBudget b = small_budget();
  CheckResult a1 = verify_theorem_snr(b);
  CheckResult a2 = verify_theorem_snr(b);
  CHECK(a1.trials == a2.trials);
  CHECK(a1.violations == a2.violations);
  CHECK(a1.worst_slack == a2.worst_slack);  // bitwise

  VerifyBudget other = b;
  other.seed = 8;
  CheckResult a3 = verify_theorem_snr(other);
  CHECK(a3.worst_slack != a1.worst_slack);  // different draws, different margin
}

TEST_CASE("json report round-trips through a parser with the expected keys") {
  VerifyReport r = run_all_checks(small_budget());
  const nlohmann::json root = nlohmann::json::parse(report_to_json(r));
  CHECK(root.at("allPassed").get<bool>());
  const auto& checks = root.at("checks");
  REQUIRE(checks.size() == 10);
  for (const auto& jc : checks) {
    CHECK(jc.contains("name"));
    CHECK(jc.at("trials").get<long long>() > 0);
    CHECK(jc.at("violations").get<long long>() == 0);
    CHECK(jc.contains("worstSlack"));
    CHECK(jc.at("passed").get<bool>());
    CHECK(jc.at("seconds").get<double>() >= 0.0);
  }
}

TEST_CASE("text table lists one row per check with its verdict") {
  VerifyReport r = run_all_checks(small_budget());
  const std::string table = report_table(r);
  for (const CheckResult& c : r.checks) CHECK(table.find(c.name) != std::string::npos);
  CHECK(table.find("PASS") != std::string::npos);
  CHECK(table.find("FAIL") == std::string::npos);
}

}  // TEST_SUITE
