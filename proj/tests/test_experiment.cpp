#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "mbe/experiment.hpp"

using namespace mbe;

namespace {

std::string small_iid() {
    return R"({
  "schema_version": 1,
  "generator": {"type": "iid_gaussian", "sigma": {"kind": "ar1", "d": 3, "rho": 0.5}},
  "n_grid": [10, 100, 1000],
  "replications": 500,
  "family": {"grid_points": 7, "random_count": 20},
  "qmc_budget": 2048,
  "master_seed": 11
})";
}

const char* kTwoStateChain = R"({
  "schema_version": 1,
  "generator": {
    "type": "markov",
    "transition": [[0.5, 0.5], [0.5, 0.5]],
    "g": [[[1.0], [-1.0]], [[1.0], [-1.0]]],
    "center": false
  },
  "n_grid": [100, 1000],
  "replications": 200,
  "family": {"grid_points": 5, "random_count": 0},
  "qmc_budget": 2048
})";

int error_line(const std::string& text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        const auto at = msg.find("line ");
        return std::stoi(msg.substr(at + 5));
    }
    return -1;
}

std::vector<std::string> lines(const std::string& csv) {
    std::vector<std::string> out;
    std::istringstream in(csv);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

}  // namespace

TEST(Config, ParsesValidDocument) {
    const auto cfg = parse_config(small_iid());
    EXPECT_EQ(cfg.d, 3);
    EXPECT_EQ(cfg.n_grid, (std::vector<std::int64_t>{10, 100, 1000}));
    EXPECT_EQ(cfg.replications, 500);
    EXPECT_EQ(cfg.grid_points, 7);
    EXPECT_EQ(cfg.master_seed, 11u);
    const auto& sigma = std::get<IidGaussian>(cfg.generator).sigma;
    EXPECT_DOUBLE_EQ(sigma(0, 2), 0.25);
    EXPECT_EQ(cfg.raw["generator"]["type"], "iid_gaussian");
}

TEST(Config, UnknownKeysReportTheirLine) {
    EXPECT_EQ(error_line("{\n\"schema_version\": 1,\n\"generator\": {\"type\": \"bolthausen\", \"d\": 1},\n"
                         "\"n_grid\": [2048],\n\"replications\": 100,\n\"famly\": {}\n}"),
              6);
    EXPECT_EQ(error_line("{\n\"schema_version\": 1,\n\"generator\": {\"type\": \"bolthausen\",\n \"dim\": 1},\n"
                         "\"n_grid\": [2048],\n\"replications\": 100\n}"),
              4);
    EXPECT_EQ(error_line("{\n\"schema_version\": 1,\n\n\"n_grid\": [2048],\n\"replications\": 100,\n"
                         "\"generator\": {\"type\": \"bolthausen\", \"d\": 1},\n\"family\": {\"grid\": 3}\n}"),
              7);
}

TEST(Config, RejectsInvalidValues) {
    const std::string head = R"({"schema_version": 1, "generator": {"type": "bolthausen", "d": 2}, )";
    EXPECT_THROW(parse_config(head + R"("n_grid": [4096, 2048], "replications": 100})"), ConfigError);
    EXPECT_THROW(parse_config(head + R"("n_grid": [512], "replications": 100})"), ConfigError);
    EXPECT_THROW(parse_config(head + R"("n_grid": [2048], "replications": 99})"), ConfigError);
    EXPECT_THROW(parse_config(head + R"("n_grid": [2048], "replications": 100, "d": 3})"), ConfigError);
    EXPECT_THROW(parse_config(head + R"("n_grid": [2048]})"), ConfigError);
    EXPECT_THROW(parse_config(head + R"("n_grid": [2048], "replications": 100, "qmc_budget": 10})"), ConfigError);
    EXPECT_THROW(parse_config(head + R"("n_grid": [2048], "replications": 100, "path_mode": "fast"})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"schema_version": 2, "generator": {"type": "bolthausen", "d": 1},
                                  "n_grid": [2048], "replications": 100})"),
                 ConfigError);
    EXPECT_THROW(parse_config(R"({"schema_version": 1, "generator": {"type": "levy"},
                                  "n_grid": [2048], "replications": 100})"),
                 ConfigError);
    EXPECT_EQ(error_line("{\n\"schema_version\": 1,\n\"n_grid\": [1,\n2,,3]}"), 4);
}

TEST(Config, MarkovChainValidation) {
    std::string uncentered = kTwoStateChain;
    uncentered.replace(uncentered.find("[[1.0], [-1.0]], [[1.0]"), 23, "[[1.0], [-0.5]], [[1.0]");
    EXPECT_THROW(parse_config(uncentered), ConfigError);
    std::string centered = uncentered;
    centered.replace(centered.find("\"center\": false"), 15, "\"center\": true");
    const auto cfg = parse_config(centered);
    const auto& chain = std::get<MarkovInduced>(cfg.generator).chain;
    EXPECT_NEAR(chain.f(0, 0)[0] * 0.5 + chain.f(0, 1)[0] * 0.5, 0.0, 1e-15);
    std::string reducible = kTwoStateChain;
    reducible.replace(reducible.find("[[0.5, 0.5], [0.5, 0.5]]"), 24, "[[1.0, 0.0], [0.0, 1.0]]");
    EXPECT_THROW(parse_config(reducible), ConfigError);
}

TEST(Ratefit, CsvHeaderAndFloatFormat) {
    const auto res = cmd_ratefit(parse_config(small_iid()), 1);
    const auto rows = lines(res.csv);
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[0], "n,d,R,dk_value,mc_error,mvn_error,bound_t1,bound_t2,bound_t3a,bound_t3b,bound_t4,seed");
    // 17 significant digits round-trip every double exactly
    std::vector<std::string> cells;
    std::istringstream in(rows[1]);
    for (std::string c; std::getline(in, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 12u);
    EXPECT_EQ(cells[0], "10");
    EXPECT_EQ(cells[10], "nan");
    EXPECT_EQ(cells[11], "11");
    const double dk = std::stod(cells[3]);
    EXPECT_EQ(detail::fmt(dk), cells[3]);
    EXPECT_TRUE(res.report.contains("rate_fits"));
    EXPECT_EQ(res.report["software"]["version"], kVersion);
    EXPECT_NEAR(res.report["rate_fits"]["bound_t3b"]["slope"].get<double>(), -0.25, 1e-12);
    EXPECT_NEAR(res.report["rate_fits"]["bound_t1"]["slope"].get<double>(), -0.125, 1e-12);
}

TEST(Ratefit, BitIdenticalAcrossThreadCounts) {
    const auto cfg = parse_config(small_iid());
    const std::string a = cmd_ratefit(cfg, 1).csv;
    EXPECT_EQ(a, cmd_ratefit(cfg, 3).csv);
    EXPECT_EQ(a, cmd_ratefit(cfg, 8).csv);
    auto other = cfg;
    other.master_seed = 12;
    EXPECT_NE(a, cmd_ratefit(other, 1).csv);
}

TEST(Ratefit, BolthausenFullAndCollapsedAgreeStatistically) {
    auto cfg = parse_config(R"({"schema_version": 1, "generator": {"type": "bolthausen", "d": 1},
        "n_grid": [1024], "replications": 2000, "family": {"grid_points": 11, "random_count": 0}})");
    const auto fast = cmd_distance(cfg, 1);
    cfg.path_mode = PathMode::Full;
    const auto full = cmd_distance(cfg, 1);
    const double a = fast.report["rows"][0]["dk"]["value"].get<double>();
    const double b = full.report["rows"][0]["dk"]["value"].get<double>();
    EXPECT_NEAR(a, b, 0.05);
}

TEST(Ratefit, MarkovLeavesAssumptionOneBoundsEmpty) {
    const auto res = cmd_ratefit(parse_config(kTwoStateChain), 1);
    const auto row = lines(res.csv)[1];
    EXPECT_NE(row.find(",nan,nan,nan,nan,"), std::string::npos);
    EXPECT_TRUE(res.report["rows"][0]["bound_t4"].is_number() || res.report["rows"][0]["bound_t4"].is_null());
}

TEST(Budget, RefusesProjectedOverrun) {
    auto cfg = parse_config(small_iid());
    cfg.budget_minutes = 1e-12;
    EXPECT_THROW(cmd_ratefit(cfg, 1), ConfigError);
    EXPECT_THROW(cmd_simulate(cfg, 1), ConfigError);
}

TEST(Simulate, WritesOneRowPerReplication) {
    const auto res = cmd_simulate(parse_config(small_iid()), 2);
    const auto rows = lines(res.csv);
    EXPECT_EQ(rows[0], "n,replication,x1,x2,x3");
    EXPECT_EQ(rows.size(), 1u + 3 * 500);
    EXPECT_EQ(res.csv, cmd_simulate(parse_config(small_iid()), 1).csv);
}

TEST(Probe, ThirdMomentQuadratureMatchesClosedForms) {
    const double abs3 = 2.0 * std::sqrt(2.0 / std::numbers::pi);
    EXPECT_NEAR(detail::max_cube_moment(0.0, 1), abs3, 1e-10);
    EXPECT_DOUBLE_EQ(detail::max_cube_moment(2.0, 0), 8.0);
    // large atom dominates: E max(x, W)^3 -> x^3
    EXPECT_NEAR(detail::max_cube_moment(12.0, 3), 1728.0, 1e-9);
    const RowMatrix z = sample_mvn(SymMatrix::identity(4), 400000, 5);
    double mc = 0.0;
    for (Eigen::Index r = 0; r < z.rows(); ++r) mc += std::pow(z.row(r).cwiseAbs().maxCoeff(), 3.0);
    EXPECT_NEAR(detail::max_cube_moment(0.0, 4), mc / 400000.0, 0.03);
}

TEST(Probe, IidAndBolthausenConstants) {
    const auto iid = probe_moments(IidGaussian{SymMatrix::identity(1)}, 100, 1);
    EXPECT_NEAR(iid.stats.M, 2.0 * std::sqrt(2.0 / std::numbers::pi), 0.05);
    EXPECT_TRUE(iid.deterministic_qv);

    const std::int64_t n = 4096;
    const auto bol = probe_moments(Bolthausen{1}, n, 2);
    const auto w = bolthausen_window(n);
    const auto last = std::get<TwoAtom>(bolthausen_step_law(w.end, n, 0.0));
    const double abs3 = 2.0 * std::sqrt(2.0 / std::numbers::pi);
    EXPECT_NEAR(bol.stats.M, std::max(abs3, law_moments(last).abs_third), 1e-9);
    // at large n the last window step has p ~ 16 / sqrt(n) and dominates
    const std::int64_t big = 1 << 20;
    const auto far = std::get<TwoAtom>(bolthausen_step_law(bolthausen_window(big).end, big, 0.0));
    EXPECT_GT(law_moments(far).abs_third, abs3);
    EXPECT_NEAR(probe_moments(Bolthausen{1}, big, 2).stats.M, law_moments(far).abs_third, 1e-9);
    EXPECT_EQ(bol.stats.alpha, 1.0);
    EXPECT_GT(bol.stats.third_moment_mean, 2.0 * std::sqrt(2.0 / std::numbers::pi) * 0.9);
    EXPECT_LT(bol.stats.third_moment_mean, bol.stats.M);

    const auto markov = probe_moments(parse_config(kTwoStateChain).generator, 100, 3);
    EXPECT_FALSE(markov.deterministic_qv);
    EXPECT_DOUBLE_EQ(markov.stats.M, 1.0);
}

TEST(Markov, DegenerateChainHasExactAverageCovariance) {
    const auto res = cmd_markov(parse_config(kTwoStateChain), 2);
    for (const auto& row : res.report["rows"]) {
        EXPECT_LE(row["sigma_deviation"]["max"].get<double>(), 1e-15);
        EXPECT_EQ(row["kappa_exceedance"].get<double>(), 0.0);
        EXPECT_LE(row["qv_residual_max"].get<double>(), 1e-8);
    }
    EXPECT_EQ(res.csv, cmd_markov(parse_config(kTwoStateChain), 1).csv);
}

TEST(Markov, RequiresMarkovGenerator) {
    EXPECT_THROW(cmd_markov(parse_config(small_iid()), 1), ConfigError);
}

TEST(Check, DefaultHoldsAndNegativeControlFails) {
    ExperimentConfig cfg;
    const auto ok = cmd_check(cfg, 1);
    EXPECT_EQ(ok.exit_code, 0) << ok.text;
    EXPECT_NE(ok.text.find("lhs 0.111184 rhs 0.280646"), std::string::npos);
    cfg.check.rhs_scale = 0.1;
    const auto bad = cmd_check(cfg, 1);
    EXPECT_EQ(bad.exit_code, 1);
    EXPECT_NE(bad.text.find("first failure: stein t=0.5 eps1=1 epsk=1"), std::string::npos);
}

// Coordinates 2..d of the lower-bound array are exactly Gaussian at any n.
TEST(Bolthausen, HigherCoordinatesPassNormality) {
    const RowMatrix x = sample_terminal(Bolthausen{3}, 4096, 100000, 8, 1);
    for (Eigen::Index j = 1; j < 3; ++j) {
        const RowMatrix cj = x.col(j);
        std::vector<double> v(cj.data(), cj.data() + cj.size());
        EXPECT_LE(dk_one_dim_oracle(EmpiricalLaw(v), NormalLaw{0, 1}, 2000), 0.01) << "coordinate " << j + 1;
    }
}
