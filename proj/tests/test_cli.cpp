// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end coverage of the command-line binary: every subcommand runs as a
// child process against fixtures on disk, and outputs are checked for exit
// codes, byte reproducibility, and agreement with the library.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sglora/adapters.hpp"
#include "sglora/cvae.hpp"
#include "sglora/repository.hpp"
#include "sglora/router.hpp"
#include "sglora/rng.hpp"
#include "sglora/semantics.hpp"
#include "sglora/synthbench.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "sglora_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path out_file =
      temp_dir() / ("stdout_" + std::to_string(counter) + ".txt");
  const fs::path err_file =
      temp_dir() / ("stderr_" + std::to_string(counter) + ".txt");
  ++counter;
  const std::string cmd = std::string(SGLORA_CLI_PATH) + " " + args + " > " +
                          out_file.string() + " 2> " + err_file.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  REQUIRE(WIFEXITED(status));
  r.code = WEXITSTATUS(status);
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  return r;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  REQUIRE(out.good());
}

std::string embedding_jsonl(const std::vector<std::string>& ids,
                            std::size_t dim) {
  std::string text;
  for (const auto& id : ids) {
    const auto emb = sglora::stub_embed(id, dim);
    json line;
    line["task_id"] = id;
    line["description"] = "fixture task " + id;
    line["embedding"] = emb.vec;
    text += line.dump() + "\n";
  }
  return text;
}

void write_checkpoints(const fs::path& dir, const std::string& id,
                       std::size_t d, sglora::Rng& rng) {
  std::vector<float> center(d);
  for (auto& v : center) v = static_cast<float>(rng.normal());
  sglora::NamedTensor t;
  t.name = "checkpoints";
  t.dims = {3, d};
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < d; ++i) {
      t.values.push_back(center[i] + 0.05f * static_cast<float>(rng.normal()));
    }
  }
  sglora::save_tensors(std::span<const sglora::NamedTensor>(&t, 1),
                       dir / (id + ".bin"));
}

// Fixture tree: layouts, checkpoint blobs, embedding files, configs, and a
// repository built once through the CLI itself.
struct Fixture {
  fs::path root;
  fs::path layout_file;       // D = 4
  fs::path layout2_file;      // D = 6
  fs::path ckpts_dir;         // t0..t5 at D = 4
  fs::path ckpts2_dir;        // u0..u2 at D = 6
  fs::path embeddings_file;   // 6 tasks, dim 8
  fs::path embeddings2_file;  // 3 tasks, dim 8
  fs::path query_file;        // single embedding, dim 8
  fs::path cvae_config;
  fs::path bench_config;
  fs::path repo_dir;
  fs::path repo2_dir;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture fx;
    fx.root = temp_dir();
    const sglora::Layout layout(
        {sglora::LayoutModule{"blk0.wq", 2, 2, 1, 1.0f}});
    const sglora::Layout layout2(
        {sglora::LayoutModule{"blk0.wq", 3, 3, 1, 1.0f}});
    fx.layout_file = fx.root / "layout.json";
    fx.layout2_file = fx.root / "layout2.json";
    write_file(fx.layout_file, sglora::layout_to_json(layout));
    write_file(fx.layout2_file, sglora::layout_to_json(layout2));

    fx.ckpts_dir = fx.root / "ckpts";
    fx.ckpts2_dir = fx.root / "ckpts2";
    fs::create_directories(fx.ckpts_dir);
    fs::create_directories(fx.ckpts2_dir);
    sglora::Rng rng(1234);
    std::vector<std::string> ids, ids2;
    for (int i = 0; i < 6; ++i) {
      ids.push_back("t" + std::to_string(i));
      write_checkpoints(fx.ckpts_dir, ids.back(), layout.flat_dim(), rng);
    }
    for (int i = 0; i < 3; ++i) {
      ids2.push_back("u" + std::to_string(i));
      write_checkpoints(fx.ckpts2_dir, ids2.back(), layout2.flat_dim(), rng);
    }
    fx.embeddings_file = fx.root / "embeddings.jsonl";
    fx.embeddings2_file = fx.root / "embeddings2.jsonl";
    write_file(fx.embeddings_file, embedding_jsonl(ids, 8));
    write_file(fx.embeddings2_file, embedding_jsonl(ids2, 8));
    fx.query_file = fx.root / "query.jsonl";
    write_file(fx.query_file, embedding_jsonl({"query"}, 8));

    sglora::CvaeConfig cc;
    cc.latent_dim = 3;
    cc.cond_dim = 6;
    cc.hidden = 16;
    cc.epochs = 8;
    cc.batch_size = 4;
    cc.learning_rate = 3e-3;
    cc.seed = 5;
    cc.router_k = 2;
    fx.cvae_config = fx.root / "cvae.json";
    write_file(fx.cvae_config, sglora::cvae_config_to_json(cc));

    sglora::BenchConfig bc;
    bc.n_tasks = 6;
    bc.n_experts = 3;
    bc.embedding_dim = 8;
    bc.samples_per_task = 8;
    bc.oracle_epochs = 80;
    bc.checkpoints = 5;
    bc.k = 2;
    bc.stochastic_n = 2;
    bc.train_fraction = 0.67;
    bc.layout_blocks = 1;
    bc.layout_dim = 4;
    bc.layout_rank = 1;
    bc.cvae.latent_dim = 4;
    bc.cvae.cond_dim = 8;
    bc.cvae.hidden = 24;
    bc.cvae.epochs = 25;
    bc.cvae.batch_size = 8;
    bc.cvae.learning_rate = 3e-3;
    bc.cvae.cond_noise = 0.3;
    fx.bench_config = fx.root / "bench.json";
    write_file(fx.bench_config, sglora::bench_config_to_json(bc));

    fx.repo_dir = fx.root / "repo";
    fx.repo2_dir = fx.root / "repo2";
    const RunResult r1 = run_cli(
        "build-repo --checkpoints " + fx.ckpts_dir.string() +
        " --embeddings " + fx.embeddings_file.string() +
        " --experts t0,t1,t2 --layout " + fx.layout_file.string() +
        " --train-fraction 0.67 --out " + fx.repo_dir.string());
    REQUIRE(r1.code == 0);
    const RunResult r2 = run_cli(
        "build-repo --checkpoints " + fx.ckpts2_dir.string() +
        " --embeddings " + fx.embeddings2_file.string() +
        " --experts u0,u1 --layout " + fx.layout2_file.string() +
        " --train-fraction 1.0 --out " + fx.repo2_dir.string());
    REQUIRE(r2.code == 0);
    return fx;
  }();
  return f;
}

}  // namespace

TEST_CASE("build-repo writes a loadable repository and reports shape") {
  const Fixture& fx = fixture();
  const sglora::Repository repo = sglora::load_repository(fx.repo_dir);
  CHECK(repo.experts.size() == 3);
  CHECK(repo.layout.flat_dim() == 4);
  CHECK(repo.embedding_dim == 8);
  CHECK(repo.train_ids.size() == 2);
  CHECK(repo.eval_ids.size() == 1);

  // Rebuilding into a fresh directory reproduces the manifest bytes.
  const fs::path again = fx.root / "repo_again";
  const RunResult r = run_cli(
      "build-repo --checkpoints " + fx.ckpts_dir.string() + " --embeddings " +
      fx.embeddings_file.string() + " --experts t0,t1,t2 --layout " +
      fx.layout_file.string() + " --train-fraction 0.67 --out " +
      again.string());
  CHECK(r.code == 0);
  CHECK(slurp(again / "manifest.json") == slurp(fx.repo_dir / "manifest.json"));
  const json summary = json::parse(r.out);
  CHECK(summary["experts"] == 3);
  CHECK(summary["flat_dim"] == 4);

  // Domain failures: absent inputs and unknown expert ids.
  CHECK(run_cli("build-repo --checkpoints " + fx.ckpts_dir.string() +
                " --embeddings /nonexistent.jsonl --experts t0 --out " +
                (fx.root / "bad1").string())
            .code == 1);
  CHECK(run_cli("build-repo --checkpoints " + fx.ckpts_dir.string() +
                " --embeddings " + fx.embeddings_file.string() +
                " --experts ghost --layout " + fx.layout_file.string() +
                " --out " + (fx.root / "bad2").string())
            .code == 1);
}

TEST_CASE("route prints normalized weights in every format") {
  const Fixture& fx = fixture();
  const RunResult r = run_cli("route --repo " + fx.repo_dir.string() +
                              " --describe \"query one\" --k 2");
  REQUIRE(r.code == 0);
  const json out = json::parse(r.out);
  CHECK(out["k"] == 2);
  CHECK(out["clamped"] == false);
  REQUIRE(out["selected"].size() == 2);
  double sum = 0.0;
  double prev = 1e9;
  for (const auto& entry : out["selected"]) {
    sum += entry["weight"].get<double>();
    CHECK(entry["similarity"].get<double>() <= prev);
    prev = entry["similarity"].get<double>();
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));

  const RunResult single = run_cli("route --repo " + fx.repo_dir.string() +
                                   " --embedding " + fx.query_file.string() +
                                   " --k 1");
  REQUIRE(single.code == 0);
  const json sj = json::parse(single.out);
  REQUIRE(sj["selected"].size() == 1);
  CHECK(sj["selected"][0]["weight"].get<double>() == doctest::Approx(1.0));

  const RunResult csv = run_cli("--format csv route --repo " +
                                fx.repo_dir.string() + " --describe q --k 2");
  REQUIRE(csv.code == 0);
  CHECK(csv.out.rfind("task_id,similarity,weight\n", 0) == 0);

  CHECK(run_cli("route --repo " + fx.repo_dir.string() +
                " --describe q --tau 0")
            .code == 1);
  CHECK(run_cli("route --repo /nonexistent --describe q").code == 1);
}

TEST_CASE("merge agrees with the library baselines") {
  const Fixture& fx = fixture();
  const sglora::Repository repo = sglora::load_repository(fx.repo_dir);

  const fs::path soup_file = fx.root / "soup.bin";
  REQUIRE(run_cli("merge --repo " + fx.repo_dir.string() +
                  " --method soup --out " + soup_file.string())
              .code == 0);
  const auto soup_set = sglora::load_adapter(soup_file, repo.layout);
  CHECK(sglora::flatten(soup_set) == sglora::baseline_model_soup(repo));

  const fs::path topk_file = fx.root / "topk.bin";
  const fs::path weighted_file = fx.root / "weighted.bin";
  REQUIRE(run_cli("merge --repo " + fx.repo_dir.string() +
                  " --method topk --k 2 --embedding " +
                  fx.query_file.string() + " --out " + topk_file.string())
              .code == 0);
  REQUIRE(run_cli("merge --repo " + fx.repo_dir.string() +
                  " --method weighted --k 2 --tau 1e6 --embedding " +
                  fx.query_file.string() + " --out " + weighted_file.string())
              .code == 0);
  const auto topk = sglora::flatten(sglora::load_adapter(topk_file, repo.layout));
  const auto weighted =
      sglora::flatten(sglora::load_adapter(weighted_file, repo.layout));
  for (std::size_t i = 0; i < topk.size(); ++i) {
    CHECK(std::abs(topk[i] - weighted[i]) < 1e-3);
  }

  // k = 1 merge is the nearest expert's stored mean.
  const fs::path near_file = fx.root / "near.bin";
  REQUIRE(run_cli("merge --repo " + fx.repo_dir.string() +
                  " --method topk --k 1 --embedding " +
                  fx.query_file.string() + " --out " + near_file.string())
              .code == 0);
  const auto near = sglora::flatten(sglora::load_adapter(near_file, repo.layout));
  const auto query = sglora::stub_embed("query", 8).vec;
  const auto sims = sglora::similarities(query, repo);
  const auto top = sglora::select_topk(sims, 1);
  CHECK(near == repo.experts[top.indices[0]].mean);

  CHECK(run_cli("merge --repo " + fx.repo_dir.string() +
                " --method blend --out " + (fx.root / "x.bin").string())
            .code == 2);
  // topk and weighted need a query.
  CHECK(run_cli("merge --repo " + fx.repo_dir.string() +
                " --method topk --out " + (fx.root / "y.bin").string())
            .code == 1);
}

TEST_CASE("train is reproducible and guards resume inputs") {
  const Fixture& fx = fixture();
  const fs::path model1 = fx.root / "model1.bin";
  const fs::path model2 = fx.root / "model2.bin";
  const fs::path trace1 = fx.root / "trace1.csv";
  const fs::path trace2 = fx.root / "trace2.csv";

  const RunResult r1 =
      run_cli("train --repo " + fx.repo_dir.string() + " --config " +
              fx.cvae_config.string() + " --out " + model1.string() +
              " --trace " + trace1.string());
  REQUIRE(r1.code == 0);
  const RunResult r2 =
      run_cli("train --repo " + fx.repo_dir.string() + " --config " +
              fx.cvae_config.string() + " --out " + model2.string() +
              " --trace " + trace2.string());
  REQUIRE(r2.code == 0);
  CHECK(slurp(model1) == slurp(model2));
  CHECK(slurp(trace1) == slurp(trace2));

  const std::string trace = slurp(trace1);
  CHECK(trace.rfind("epoch,total,recon,kl\n", 0) == 0);
  CHECK(std::count(trace.begin(), trace.end(), '\n') == 1 + 8);

  // A global --seed overrides the config seed and changes the model.
  const fs::path model3 = fx.root / "model3.bin";
  REQUIRE(run_cli("--seed 9 train --repo " + fx.repo_dir.string() +
                  " --config " + fx.cvae_config.string() + " --out " +
                  model3.string())
              .code == 0);
  CHECK(slurp(model3) != slurp(model1));

  // Resuming against a repository with a different layout fails cleanly.
  const RunResult bad =
      run_cli("train --repo " + fx.repo2_dir.string() + " --config " +
              fx.cvae_config.string() + " --out " +
              (fx.root / "model_bad.bin").string() + " --resume-from " +
              model1.string());
  CHECK(bad.code == 1);
  CHECK(bad.err.find("layout") != std::string::npos);

  CHECK(run_cli("train --repo " + fx.repo_dir.string() +
                " --config /nonexistent.json --out " +
                (fx.root / "m.bin").string())
            .code == 1);
}

TEST_CASE("generate writes deterministic adapter blobs") {
  const Fixture& fx = fixture();
  const fs::path model = fx.root / "model1.bin";
  REQUIRE(fs::exists(model));  // produced by the train test

  const fs::path gen_a = fx.root / "gen_a";
  const fs::path gen_b = fx.root / "gen_b";
  REQUIRE(run_cli("generate --model " + model.string() + " --repo " +
                  fx.repo_dir.string() + " --describe \"new task\" --out " +
                  gen_a.string())
              .code == 0);
  REQUIRE(run_cli("generate --model " + model.string() + " --repo " +
                  fx.repo_dir.string() + " --describe \"new task\" --out " +
                  gen_b.string())
              .code == 0);
  CHECK(slurp(gen_a / "adapter_000.bin") == slurp(gen_b / "adapter_000.bin"));

  const fs::path gen_s3 = fx.root / "gen_s3";
  const fs::path gen_s4 = fx.root / "gen_s4";
  REQUIRE(run_cli("--seed 3 generate --model " + model.string() + " --repo " +
                  fx.repo_dir.string() +
                  " --describe q --mode stochastic --n 5 --out " +
                  gen_s3.string())
              .code == 0);
  REQUIRE(run_cli("--seed 4 generate --model " + model.string() + " --repo " +
                  fx.repo_dir.string() +
                  " --describe q --mode stochastic --n 5 --out " +
                  gen_s4.string())
              .code == 0);
  for (int i = 0; i < 5; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "adapter_%03d.bin", i);
    CHECK(fs::exists(gen_s3 / name));
  }
  CHECK(slurp(gen_s3 / "adapter_000.bin") != slurp(gen_s3 / "adapter_001.bin"));
  CHECK(slurp(gen_s3 / "adapter_000.bin") != slurp(gen_s4 / "adapter_000.bin"));

  // Generated blobs unflatten against the repository layout.
  const sglora::Repository repo = sglora::load_repository(fx.repo_dir);
  const auto set = sglora::load_adapter(gen_a / "adapter_000.bin", repo.layout);
  CHECK(sglora::flatten(set).size() == repo.layout.flat_dim());

  CHECK(run_cli("generate --model " + model.string() + " --repo " +
                fx.repo_dir.string() +
                " --describe q --mode mean --n 5 --out " +
                (fx.root / "gen_bad").string())
            .code == 1);
  CHECK(run_cli("generate --model " + model.string() + " --repo " +
                fx.repo2_dir.string() + " --describe q --out " +
                (fx.root / "gen_bad2").string())
            .code == 1);
  CHECK(run_cli("generate --model " + model.string() + " --repo " +
                fx.repo_dir.string() + " --out " +
                (fx.root / "gen_bad3").string())
            .code == 1);
}

TEST_CASE("bench emits byte-reproducible reports and aggregates") {
  const Fixture& fx = fixture();
  const fs::path out1 = fx.root / "bench1";
  const fs::path out2 = fx.root / "bench2";
  REQUIRE(run_cli("bench --config " + fx.bench_config.string() +
                  " --seeds 1 --out " + out1.string())
              .code == 0);
  REQUIRE(run_cli("bench --config " + fx.bench_config.string() +
                  " --seeds 1 --out " + out2.string())
              .code == 0);
  CHECK(slurp(out1 / "report_seed0.json") == slurp(out2 / "report_seed0.json"));
  CHECK(slurp(out1 / "report_seed0.csv") == slurp(out2 / "report_seed0.csv"));
  CHECK(slurp(out1 / "aggregate.json") == slurp(out2 / "aggregate.json"));

  CHECK_NOTHROW(sglora::validate_report_json(slurp(out1 / "report_seed0.json"),
                                             "report_seed0.json"));
  const json agg = json::parse(slurp(out1 / "aggregate.json"));
  REQUIRE(agg.contains("mean_loss"));
  for (const char* method : sglora::kBenchMethods) {
    CHECK(agg["mean_loss"].contains(method));
  }

  const fs::path sweep_dir = fx.root / "bench_sweep";
  REQUIRE(run_cli("bench --config " + fx.bench_config.string() +
                  " --seeds 1 --k-sweep 1 2 --out " + sweep_dir.string())
              .code == 0);
  CHECK(fs::exists(sweep_dir / "report_seed0_k1.json"));
  CHECK(fs::exists(sweep_dir / "report_seed0_k2.json"));
  const json sweep_agg = json::parse(slurp(sweep_dir / "aggregate.json"));
  REQUIRE(sweep_agg.contains("k_sweep"));
  CHECK(sweep_agg["k_sweep"].size() == 2);

  CHECK(run_cli("bench --config " + fx.bench_config.string() +
                " --seeds 0 --out " + (fx.root / "bench_bad").string())
            .code == 1);
  CHECK(run_cli("bench --config /nonexistent.json --out " +
                (fx.root / "bench_bad2").string())
            .code == 1);
}

TEST_CASE("usage errors exit with code 2") {
  const Fixture& fx = fixture();
  CHECK(run_cli("").code == 2);                      // missing subcommand
  CHECK(run_cli("route --nope x").code == 2);        // unknown flag
  CHECK(run_cli("route").code == 2);                 // missing required
  CHECK(run_cli("--format yaml route --repo " + fx.repo_dir.string() +
                " --describe q")
            .code == 2);
  CHECK(run_cli("generate --model m --repo r --describe q --mode typical "
                "--out o")
            .code == 2);
}
