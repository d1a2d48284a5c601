// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "moppa/commands.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace moppa;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"({
  "model": {"width": 4, "height": 4, "channels": 16, "heads": 2, "depth": 2, "seed": 3},
  "adapter": {"kind": "both", "w": 0.1},
  "train": {"iterations": 30, "lr": 0.002, "metric_every": 10, "seeds": [1, 2]},
  "output": {"directory": "unused"}
})";

fs::path scratch(const std::string& name) {
    const fs::path p = fs::current_path() / "cli_scratch" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(MOPPA_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string config_error(const std::string& text) {
    try {
        parse_experiment_config(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("config defaults describe the toy experiment") {
    const ExperimentConfig c = parse_experiment_config("{}");
    CHECK(c.model.width == 8);
    CHECK(c.model.height == 8);
    CHECK(c.model.channels == 96);
    CHECK(c.model.heads == 4);
    CHECK(c.model.depth == 4);
    CHECK(c.w == 0.1);
    CHECK(c.iterations == 5000);
    CHECK(c.lr == 0.002);
    CHECK(c.metric_every == 100);
    CHECK(c.seeds == std::vector<std::uint64_t>{1, 2, 3, 4, 5});
    CHECK(c.model.eta == 0.001);
    CHECK(c.weight_decay == 0.0);
    CHECK(c.warmup == 0);
    CHECK(c.adapter_kinds().size() == 2);
}

TEST_CASE("shipped configs parse") {
    for (const char* name : {"toy.json", "paper_scale.json", "smoke.json"}) {
        INFO(name);
        CHECK_NOTHROW(load_experiment_config(std::string(MOPPA_CONFIG_DIR) + "/" + name));
    }
    const auto toy = load_experiment_config(std::string(MOPPA_CONFIG_DIR) + "/toy.json");
    CHECK(toy.model.channels == 96);
    const auto big = load_experiment_config(std::string(MOPPA_CONFIG_DIR) + "/paper_scale.json");
    CHECK(big.model.width == 14);
    CHECK(big.model.channels == 768);
    CHECK(big.model.heads == 12);
}

TEST_CASE("config validation names the offending field") {
    CHECK_THAT(config_error(R"({"model": {"channels": 96, "heads": 5}})"),
               Catch::Matchers::ContainsSubstring("must divide model.channels"));
    CHECK_THAT(config_error(R"({"model": {"width": 0}})"), Catch::Matchers::ContainsSubstring("model.width"));
    CHECK_THAT(config_error(R"({"train": {"seeds": []}})"), Catch::Matchers::ContainsSubstring("train.seeds"));
    CHECK_THAT(config_error(R"({"adapter": {"w": -0.5}})"), Catch::Matchers::ContainsSubstring("adapter.w"));
    CHECK_THAT(config_error(R"({"adapter": {"eta": 0}})"), Catch::Matchers::ContainsSubstring("adapter.eta"));
    CHECK_THAT(config_error(R"({"adapter": {"kind": "adapterformer"}})"),
               Catch::Matchers::ContainsSubstring("adapter.kind"));
    CHECK_THAT(config_error(R"({"adapter": {"rank": 96}})"), Catch::Matchers::ContainsSubstring("adapter.rank"));
    CHECK_THAT(config_error(R"({"train": {"iterations": 0}})"),
               Catch::Matchers::ContainsSubstring("train.iterations"));
    CHECK_THAT(config_error(R"({"output": {"formats": ["parquet"]}})"),
               Catch::Matchers::ContainsSubstring("parquet"));
}

TEST_CASE("config rejects unknown keys and wrong types") {
    CHECK_THAT(config_error(R"({"model": {"widht": 8}})"), Catch::Matchers::ContainsSubstring("unknown key 'model.widht'"));
    CHECK_THAT(config_error(R"({"trian": {}})"), Catch::Matchers::ContainsSubstring("unknown key"));
    CHECK_THAT(config_error(R"({"model": {"width": "8"}})"), Catch::Matchers::ContainsSubstring("model.width"));
    CHECK_THAT(config_error(R"({"model": {"width": 8.5}})"), Catch::Matchers::ContainsSubstring("model.width"));
    CHECK_THAT(config_error(R"({"train": {"seeds": [1, -2]}})"), Catch::Matchers::ContainsSubstring("train.seeds"));
    CHECK_THAT(config_error(R"({"model": 3})"), Catch::Matchers::ContainsSubstring("model"));
}

TEST_CASE("config syntax errors report the line") {
    const std::string text = "{\n  \"model\": {\n    \"width\": 8,\n    \"height\": ,\n  }\n}\n";
    CHECK_THAT(config_error(text), Catch::Matchers::ContainsSubstring("line 4"));
}

TEST_CASE("config comments are accepted") {
    const auto c = parse_experiment_config("{\n  // host\n  \"model\": {\"depth\": 2}\n}");
    CHECK(c.model.depth == 2);
}

TEST_CASE("numbers format as shortest round-trip decimals") {
    for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.125, -2.5e-7, 0.0}) {
        const std::string s = format_double(v);
        CHECK(std::strtod(s.c_str(), nullptr) == v);
        CHECK(s.find(',') == std::string::npos);
    }
    CHECK(format_double(0.5) == "0.5");
    CHECK(format_scientific(3.2e-14) == "3.2e-14");
    CHECK(format_scientific(1e-12) == "1.0e-12");
}

TEST_CASE("parallel_for visits every index once and rethrows") {
    std::vector<int> hits(37, 0);
    parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
    for (int h : hits) CHECK(h == 1);
    CHECK_THROWS_AS(parallel_for(10, 3,
                                 [](std::size_t i) {
                                     if (i == 7) throw ConfigError("boom");
                                 }),
                    ConfigError);
}

TEST_CASE("properties report passes on a healthy build") {
    const fs::path dir = scratch("properties");
    CHECK(cmd_properties(dir) == kExitOk);
    const auto rows = read_csv(dir / "properties.csv");
    REQUIRE(rows.size() > 10);
    CHECK(rows[0] == std::vector<std::string>{"name", "max_error", "tolerance", "pass"});
    std::set<std::string> names;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        REQUIRE(rows[i].size() == 4);
        INFO(rows[i][0]);
        CHECK(rows[i][3] == "pass");
        names.insert(rows[i][0]);
    }
    for (const char* n : {"dct_roundtrip", "fusion_identity", "heat_semigroup", "identity_at_t0", "mean_preservation",
                          "pde_heat", "pde_wave", "pde_poisson_ratio", "route_reg_simplex_bounds"}) {
        CHECK(names.count(n) == 1);
    }
}

TEST_CASE("properties with eta = 0 fail the Poisson checks") {
    const fs::path dir = scratch("properties_fault");
    CHECK(cmd_properties(dir, 0.0) == kExitCheckFailed);
    for (const auto& row : read_csv(dir / "properties.csv")) {
        if (row[0] == "name") continue;
        const bool poisson = row[0].find("poisson") != std::string::npos || row[0] == "fusion_identity";
        INFO(row[0]);
        CHECK((row[3] == "fail") == poisson);
    }
}

TEST_CASE("gradcheck covers trainable groups only") {
    const auto cfg = parse_experiment_config(kSmall);
    const fs::path dir = scratch("gradcheck");
    CHECK(cmd_gradcheck(cfg, dir) == kExitOk);
    const auto rows = read_csv(dir / "gradcheck.csv");
    REQUIRE(rows.size() > 1);
    CHECK(rows[0][0] == "param");
    CHECK(rows[0][1] == "max_rel_err");
    std::set<std::string> names;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        names.insert(rows[i][0]);
        CHECK(rows[i].back() == "pass");
        CHECK(std::strtod(rows[i][1].c_str(), nullptr) < kGradCheckTolerance);
    }
    CHECK(names.count("block0.moppa.router.lambda") == 1);
    CHECK(names.count("block1.lora.v.a") == 1);
    // 7 MoPPA groups + 4 LoRA groups per block
    CHECK(names.size() == 2 * (7 + 4));
    for (const auto& n : names) {
        CHECK(n.find("attn") == std::string::npos);
        CHECK(n.find("mlp") == std::string::npos);
        CHECK(n.find("ln") == std::string::npos);
    }
}

TEST_CASE("regress writes per-seed rows, summaries and checkpoints") {
    const auto cfg = parse_experiment_config(kSmall);
    const fs::path dir = scratch("regress");
    CHECK(cmd_regress(cfg, dir, 1) == kExitOk);
    const auto rows = read_csv(dir / "regress.csv");
    REQUIRE(rows.size() == 1 + 4 + 2);
    CHECK(rows[0] == std::vector<std::string>{"seed", "adapter", "iterations", "final_mse", "final_mse_std",
                                              "param_count", "status"});
    const HeadLayout layout = HeadLayout::make(16, 16, 2);
    const Index moppa_count = moppa_param_count(layout).unit * 2;
    const Index lora_count = match_budget(layout, 2, LoraPlacement{}).lora_total;
    CHECK(rows[1][1] == "moppa");
    CHECK(rows[3][1] == "lora");
    for (int i = 1; i <= 4; ++i) {
        CHECK(rows[static_cast<std::size_t>(i)][6] == "ok");
        CHECK(rows[static_cast<std::size_t>(i)][2] == "30");
    }
    CHECK(rows[1][5] == std::to_string(moppa_count));
    CHECK(rows[3][5] == std::to_string(lora_count));
    CHECK(rows[5][0] == "summary");
    CHECK(rows[5][1] == "moppa");
    CHECK(rows[6][1] == "lora");
    const double a = std::strtod(rows[1][3].c_str(), nullptr);
    const double b = std::strtod(rows[2][3].c_str(), nullptr);
    CHECK(std::strtod(rows[5][3].c_str(), nullptr) == Catch::Approx((a + b) / 2).epsilon(1e-15));
    CHECK(std::strtod(rows[5][4].c_str(), nullptr) == Catch::Approx(std::abs(a - b) / std::sqrt(2.0)).epsilon(1e-12));

    // final row of each run's history is the reported final MSE
    const auto hist = read_csv(dir / "regress_history.csv");
    CHECK(hist[0] == std::vector<std::string>{"seed", "adapter", "iteration", "mse", "loss", "reg_term"});
    CHECK(hist.size() == 1 + 4 * 4);

    for (const char* f : {"moppa_seed1.ckpt", "moppa_seed2.ckpt", "lora_seed1.ckpt", "lora_seed2.ckpt"}) {
        CHECK(fs::exists(dir / "checkpoints" / f));
    }
    // checkpoint restores the trained adapter: its forward reproduces final_mse
    const Checkpoint ck = load_checkpoint((dir / "checkpoints" / "moppa_seed1.ckpt").string());
    const TrainConfig tc = cfg.train_config(AdapterKind::moppa, 1);
    Model m(run_model_config(tc));
    m.load_adapters(ck);
    const auto task = RegressionTask::make(4, 4, 16, 1);
    const double mse = (m.forward(task.input).tokens() - task.target.tokens()).squaredNorm() / (16.0 * 16.0);
    CHECK(mse == a);
}

TEST_CASE("regress output is byte-stable and thread-count independent") {
    const auto cfg = parse_experiment_config(kSmall);
    const fs::path a = scratch("regress_a");
    const fs::path b = scratch("regress_b");
    const fs::path c = scratch("regress_c");
    cmd_regress(cfg, a, 1);
    cmd_regress(cfg, b, 1);
    cmd_regress(cfg, c, 3);
    CHECK(slurp(a / "regress.csv") == slurp(b / "regress.csv"));
    CHECK(slurp(a / "regress_history.csv") == slurp(b / "regress_history.csv"));
    CHECK(slurp(a / "regress.csv") == slurp(c / "regress.csv"));
    CHECK(slurp(a / "regress.csv").find('\r') == std::string::npos);
}

TEST_CASE("regress records divergence as a failed row") {
    auto cfg = parse_experiment_config(kSmall);
    cfg.lr = 1e6;
    cfg.iterations = 50;
    const fs::path dir = scratch("regress_diverge");
    CHECK(cmd_regress(cfg, dir, 1) == kExitOk);
    const auto rows = read_csv(dir / "regress.csv");
    REQUIRE(rows.size() == 7);
    bool any = false;
    for (int i = 1; i <= 4; ++i) any = any || rows[static_cast<std::size_t>(i)][6] == "diverged";
    CHECK(any);
}

TEST_CASE("ablate emits the complete grid") {
    auto cfg = parse_experiment_config(kSmall);
    cfg.iterations = 10;
    const fs::path dir = scratch("ablate");
    CHECK(cmd_ablate(cfg, dir, 2) == kExitOk);
    const auto rows = read_csv(dir / "ablate.csv");
    REQUIRE(rows.size() == 1 + 2 * 5 * 2);
    CHECK(rows[0] == std::vector<std::string>{"w", "variant", "seed", "iterations", "final_mse", "param_count", "status"});
    std::map<std::pair<std::string, std::string>, std::string> no_adapter;
    std::set<std::tuple<std::string, std::string, std::string>> cells;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        cells.insert({rows[i][0], rows[i][1], rows[i][2]});
        if (rows[i][1] == "no_adapter") {
            CHECK(rows[i][5] == "0");
            no_adapter[{rows[i][0], rows[i][2]}] = rows[i][4];
        }
    }
    CHECK(cells.size() == 20);
    // no router, so the regularization setting cannot matter
    CHECK(no_adapter.at({"0.1", "1"}) == no_adapter.at({"0", "1"}));
    CHECK(no_adapter.at({"0.1", "2"}) == no_adapter.at({"0", "2"}));

    const auto summary = read_csv(dir / "ablate_summary.csv");
    REQUIRE(summary.size() == 1 + 2 * 5);
    CHECK(summary[1][1] == "full");
    CHECK(summary[1][5] == "2");  // full is never worse than itself
}

TEST_CASE("dump-filters emits every coordinate and round-trips exactly") {
    const auto cfg = parse_experiment_config(kSmall);
    const Checkpoint ck = initial_checkpoint(cfg);
    const fs::path dir = scratch("filters");
    CHECK(cmd_dump_filters(ck, dir) == kExitOk);
    const auto rows = read_csv(dir / "filters.csv");
    // depth * N * L
    REQUIRE(rows.size() == 1 + 2 * 2 * 16);
    CHECK(rows[0] == std::vector<std::string>{"block", "head", "omega_x_index", "omega_y_index", "k", "c", "h1"});
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const Index b = std::stol(rows[i][0]);
        const Index n = std::stol(rows[i][1]);
        const Index f = std::stol(rows[i][3]) * 4 + std::stol(rows[i][2]);
        const std::string p = "block" + std::to_string(b) + ".moppa.";
        const double k = std::strtod(rows[i][4].c_str(), nullptr);
        const double c = std::strtod(rows[i][5].c_str(), nullptr);
        CHECK(k == ck.tensor(p + "heat.k")(f, n));
        CHECK(c == ck.tensor(p + "wave.c")(f, n));
        CHECK(std::strtod(rows[i][6].c_str(), nullptr) == ck.tensor(p + "poisson.h1")(f, n));
        CHECK(k >= 0.0);
        CHECK(k <= 0.05);
        CHECK(c >= 0.0);
        CHECK(c <= 0.05);
    }
}

TEST_CASE("dump-filters rejects checkpoints without MoPPA filters") {
    auto cfg = parse_experiment_config(kSmall);
    Model lora(run_model_config(cfg.train_config(AdapterKind::lora, 1)));
    CHECK_THROWS_AS(filter_rows(lora.to_checkpoint()), CheckpointError);
    Checkpoint ck = initial_checkpoint(cfg);
    ck.tensors.erase("block1.moppa.wave.c");
    CHECK_THROWS_AS(filter_rows(ck), CheckpointError);
}

TEST_CASE("command line exit codes") {
    const fs::path dir = scratch("exit_codes");
    const std::string cfg_path = (dir / "small.json").string();
    std::ofstream(cfg_path) << kSmall;
    const std::string bad_path = (dir / "bad.json").string();
    std::ofstream(bad_path) << R"({"model": {"channels": 96, "heads": 5}})";
    const std::string out = " --out " + (dir / "out").string();

    CHECK(run_cli("properties" + out) == 0);
    CHECK(run_cli("properties --eta-override 0" + out) == 1);
    CHECK(run_cli("gradcheck --config " + cfg_path + out) == 0);
    CHECK(run_cli("regress --config " + cfg_path + " --seed-override 7 --threads 1" + out) == 0);
    CHECK(fs::exists(dir / "out" / "checkpoints" / "moppa_seed7.ckpt"));
    CHECK(read_csv(dir / "out" / "regress.csv").size() == 1 + 2 + 2);
    CHECK(run_cli("dump-filters --config " + cfg_path + " --checkpoint " +
                  (dir / "out" / "checkpoints" / "moppa_seed7.ckpt").string() + out) == 0);
    CHECK(read_csv(dir / "out" / "filters.csv").size() == 1 + 2 * 2 * 16);

    CHECK(run_cli("regress --config " + bad_path + out) == 2);
    CHECK(run_cli("regress --config " + (dir / "missing.json").string() + out) == 2);
    CHECK(run_cli("regress --config " + cfg_path + " --threads 0" + out) == 2);
    CHECK(run_cli("dump-filters --config " + cfg_path + " --checkpoint " + (dir / "nope.ckpt").string() + out) == 2);
    CHECK(run_cli("frobnicate" + out) == 2);
    CHECK(run_cli("") == 2);
}
