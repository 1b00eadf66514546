#include <catch_amalgamated.hpp>

#include <unistd.h>

#include "cli_runner.hpp"
#include "cscr/cscr.hpp"

using namespace cscr;
using testing::run_cli;

namespace {

struct Fixture {
  testing::TempDir root{"cli"};
  std::filesystem::path synth_dir;

  Fixture() {
    const auto r = run_cli("synth --seed 5 --n-train 300 --n-test 200 --run-dir " + root.path().string());
    REQUIRE(r.code == 0);
    synth_dir = r.run_dir();
  }
  std::string data_flags() const {
    return "--pool " + (synth_dir / "pool.jsonl").string() + " --queries " + (synth_dir / "queries.jsonl").string();
  }
  std::string run_flag() const { return " --run-dir " + root.path().string(); }
};

}  // namespace

TEST_CASE("usage errors exit 2", "[cli]") {
  CHECK(run_cli("").code == 2);
  const auto r = run_cli("synth --no-such-flag 1");
  CHECK(r.code == 2);
  CHECK(r.err.find("--seed") != std::string::npos);
  CHECK(run_cli("bogus").code == 2);
  CHECK(run_cli("synth --seed abc").code == 2);
  CHECK(run_cli("--help").code == 0);
  CHECK(run_cli("train --help").code == 0);
}

TEST_CASE("data errors exit 1", "[cli]") {
  testing::TempDir root("cli_err");
  const auto missing = run_cli("eval --policy oracle --pool /nonexistent/pool.jsonl --queries /nonexistent/q.jsonl"
                               " --run-dir " + root.path().string());
  CHECK(missing.code == 1);
  CHECK(missing.err.find("error") != std::string::npos);
  testing::write_text(root / "bad.json", "{\"seed\": \"seven\"}");
  CHECK(run_cli("synth --config " + (root / "bad.json").string() + " --run-dir " + root.path().string()).code == 1);
  CHECK(run_cli("synth --n-experts 2 --cost-tiers 1,2,3 --run-dir " + root.path().string()).code == 1);
}

TEST_CASE("config precedence: file < env < flag", "[cli]") {
  testing::TempDir root("cli_prec");
  testing::write_text(root / "cfg.json", "{\"seed\": 1, \"n_train\": 20, \"n_test\": 10}");
  const std::string base = "synth --config " + (root / "cfg.json").string() + " --run-dir " + root.path().string();
  auto seed_of = [](const testing::CliResult& r) {
    REQUIRE(r.code == 0);
    return json::parse(testing::read_text(r.run_dir() / "config.json"))["seed"].get<int>();
  };
  CHECK(seed_of(run_cli(base)) == 1);
  CHECK(seed_of(run_cli(base, "CSCR_SEED=2")) == 2);
  CHECK(seed_of(run_cli(base + " --seed 3", "CSCR_SEED=2")) == 3);
  CHECK(run_cli(base, "CSCR_SEED=xyz").code == 1);

  // The echoed config resolves to the same run.
  const auto first = run_cli(base);
  const auto again = run_cli("synth --config " + (first.run_dir() / "config.json").string());
  REQUIRE(again.code == 0);
  CHECK(again.run_dir() == first.run_dir());
}

TEST_CASE("CSCR_RUN_DIR sets the output root", "[cli]") {
  testing::TempDir root("cli_env");
  const auto r = run_cli("synth --n-train 20 --n-test 10", "CSCR_RUN_DIR=" + root.path().string());
  REQUIRE(r.code == 0);
  CHECK(r.run_dir().parent_path() == root.path());
  CHECK(std::filesystem::exists(r.run_dir() / "pool.jsonl"));
  CHECK(std::filesystem::exists(r.run_dir() / "probes_logit.bin"));
  CHECK(std::filesystem::exists(r.run_dir() / "truth.json"));
}

TEST_CASE("oracle evaluation reaches the planted accuracy", "[cli]") {
  Fixture f;
  const auto r = run_cli("eval --policy oracle " + f.data_flags() + f.run_flag());
  REQUIRE(r.code == 0);
  const auto report = json::parse(testing::read_text(r.run_dir() / "report.json"));
  CHECK(!report.contains("qnc_flag"));
  CHECK(report["policy"] == "oracle");

  const auto pool = load_expert_pool(f.synth_dir / "pool.jsonl");
  const auto test = select_split(load_query_dataset(f.synth_dir / "queries.jsonl", pool), Split::test);
  double solvable = 0.0;
  for (const auto& q : test) solvable += *std::max_element(q.quality.begin(), q.quality.end()) >= 0.5 ? 1.0 : 0.0;
  CHECK(report["peak"].get<double>() == Catch::Approx(solvable / double(test.size())).epsilon(1e-12));
  CHECK(std::filesystem::exists(r.run_dir() / "curve.csv"));
  CHECK(std::filesystem::exists(r.run_dir() / "decisions.csv"));
}

TEST_CASE("auto threshold is relative on continuous quality", "[cli]") {
  testing::TempDir root("cli_auto");
  testing::write_text(root / "pool.jsonl", "{\"id\":\"a\",\"cost\":1,\"kind\":\"logit\"}\n"
                                           "{\"id\":\"b\",\"cost\":2,\"kind\":\"logit\"}\n"
                                           "{\"id\":\"c\",\"cost\":3,\"kind\":\"logit\"}\n");
  testing::write_text(root / "q.jsonl",
                      "{\"id\":\"t0\",\"split\":\"train\",\"embedding\":[1,0],\"quality\":{\"a\":0.5,\"b\":0.6,\"c\":0.62}}\n"
                      "{\"id\":\"e0\",\"split\":\"test\",\"embedding\":[0,1],\"quality\":{\"a\":0.5,\"b\":0.6,\"c\":0.62}}\n");
  const std::string base = "eval --policy oracle --pool " + (root / "pool.jsonl").string() + " --queries " +
                           (root / "q.jsonl").string() + " --run-dir " + root.path().string();
  auto peak_of = [](const testing::CliResult& r) {
    REQUIRE(r.code == 0);
    return json::parse(testing::read_text(r.run_dir() / "report.json"))["peak"].get<double>();
  };
  // Threshold 0.9 * 0.62 admits b but not a.
  CHECK(peak_of(run_cli(base)) == Catch::Approx(0.6));
  CHECK(peak_of(run_cli(base + " --threshold-mode absolute")) == Catch::Approx(0.5));
}

TEST_CASE("pipeline subcommands", "[cli]") {
  Fixture f;
  const auto desc = run_cli("descriptors --pool " + (f.synth_dir / "pool.jsonl").string() + " --logit-probes " +
                            (f.synth_dir / "probes_logit.bin").string() + f.run_flag());
  REQUIRE(desc.code == 0);
  const auto descs = (desc.run_dir() / "descriptors.jsonl").string();

  const auto idx = run_cli("index --pool " + (f.synth_dir / "pool.jsonl").string() + " --descriptors " + descs + f.run_flag());
  REQUIRE(idx.code == 0);
  CHECK(json::parse(testing::read_text(idx.run_dir() / "index.json"))["size"] == 12);

  const std::string train_flags = f.data_flags() + " --descriptors " + descs + " --epochs 3 --batch-size 64";
  const auto tr = run_cli("train " + train_flags + f.run_flag());
  REQUIRE(tr.code == 0);
  const auto loss = testing::read_text(tr.run_dir() / "loss.csv");
  CHECK(loss.rfind("epoch,loss,excluded_queries\n", 0) == 0);
  CHECK(std::count(loss.begin(), loss.end(), '\n') == 4);
  const auto manifest = json::parse(testing::read_text(tr.run_dir() / "manifest.json"));
  CHECK(manifest["epoch_loss"].size() == 3);
  const auto head = (tr.run_dir() / "head.ckpt").string();

  const std::string route_flags = f.data_flags() + " --descriptors " + descs + " --head " + head;
  const auto route = run_cli("route " + route_flags + " --lambda 0.3" + f.run_flag());
  REQUIRE(route.code == 0);
  const auto decisions = testing::read_text(route.run_dir() / "decisions.csv");
  CHECK(std::count(decisions.begin(), decisions.end(), '\n') == 201);

  const auto sweep = run_cli("sweep " + route_flags + " --lambda-points 10" + f.run_flag());
  REQUIRE(sweep.code == 0);
  CHECK(json::parse(testing::read_text(sweep.run_dir() / "sweep.json"))["reports"].size() == 5);

  const auto sig = run_cli("significance " + route_flags + " --lambda-points 10 --n-resamples 200" + f.run_flag());
  REQUIRE(sig.code == 0);
  const auto sj = json::parse(testing::read_text(sig.run_dir() / "significance.json"));
  CHECK(sj.contains("p_bootstrap"));
  CHECK(sj.contains("p_mcnemar"));
  CHECK(run_cli("significance " + route_flags + " --n-resamples 50" + f.run_flag()).code == 1);

  // k beyond the pool size.
  CHECK(run_cli("eval " + f.data_flags() + " --descriptors " + descs + " --head " + head + " --k 13" + f.run_flag()).code == 1);

  SECTION("singleton ablation matches train + eval") {
    const auto ab = run_cli("ablate " + train_flags + " --grid-gamma 0.2 --lambda-points 10" + f.run_flag());
    REQUIRE(ab.code == 0);
    const auto ev = run_cli("eval " + route_flags + " --lambda-points 10" + f.run_flag());
    REQUIRE(ev.code == 0);
    const auto cell = json::parse(testing::read_text(ab.run_dir() / "cell_0" / "report.json"));
    const auto single = json::parse(testing::read_text(ev.run_dir() / "report.json"));
    CHECK(cell["audc"] == single["audc"]);
    CHECK(testing::read_text(ab.run_dir() / "cell_0" / "decisions.csv") ==
          testing::read_text(ev.run_dir() / "decisions.csv"));
    const auto csv = testing::read_text(ab.run_dir() / "ablation.csv");
    CHECK(csv.rfind("cell,num_bands,gamma,alpha,tau_min,k,audc,max_acc,cost_at_max_acc\n", 0) == 0);
  }
  SECTION("gamma grid changes decisions") {
    const auto ab = run_cli("ablate " + train_flags + " --grid-gamma 0,0.5 --lambda-points 10" + f.run_flag());
    REQUIRE(ab.code == 0);
    CHECK(testing::read_text(ab.run_dir() / "cell_0" / "decisions.csv") !=
          testing::read_text(ab.run_dir() / "cell_1" / "decisions.csv"));
  }
  SECTION("empty grid") { CHECK(run_cli("ablate " + train_flags + f.run_flag()).code == 1); }
}
