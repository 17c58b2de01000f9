// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface. Exit codes: 0 success, 1 domain/validation error,
// 2 usage error. Every command echoes its resolved configuration to stderr
// and keeps stdout/payload files free of timestamps so identical inputs and
// seeds reproduce byte-identical output.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sglora/cvae.hpp"
#include "sglora/errors.hpp"
#include "sglora/repository.hpp"
#include "sglora/router.hpp"
#include "sglora/semantics.hpp"
#include "sglora/synthbench.hpp"

namespace {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

struct GlobalOpts {
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool verbose = false;
  std::string format = "json";
};

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    sglora::raise(sglora::ErrorCode::kIo,
                  "cannot open \"" + path.string() + "\"");
  }
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    sglora::raise(sglora::ErrorCode::kIo,
                  "cannot write \"" + path.string() + "\"");
  }
  out << text;
  if (!out) {
    sglora::raise(sglora::ErrorCode::kIo,
                  "short write to \"" + path.string() + "\"");
  }
}

void echo_config(const std::string& command, const ordered_json& fields) {
  ordered_json echo;
  echo["command"] = command;
  for (auto it = fields.begin(); it != fields.end(); ++it) {
    echo[it.key()] = it.value();
  }
  std::cerr << "config: " << echo.dump() << "\n";
}

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// Key/value summary in the selected output format.
void print_summary(const GlobalOpts& global, const ordered_json& payload) {
  if (global.format == "json") {
    std::cout << payload.dump(2) << "\n";
    return;
  }
  if (global.format == "csv") {
    std::string header, row;
    for (auto it = payload.begin(); it != payload.end(); ++it) {
      if (!header.empty()) {
        header += ',';
        row += ',';
      }
      header += it.key();
      row += it.value().is_string() ? it.value().get<std::string>()
                                    : it.value().dump();
    }
    std::cout << header << "\n" << row << "\n";
    return;
  }
  for (auto it = payload.begin(); it != payload.end(); ++it) {
    std::cout << it.key() << ": "
              << (it.value().is_string() ? it.value().get<std::string>()
                                         : it.value().dump())
              << "\n";
  }
}

// Query resolution shared by route / merge / generate: a single-line
// embedding file or a description run through the stub embedder.
sglora::TaskEmbedding resolve_query(const std::string& embedding_file,
                                    const std::string& describe,
                                    std::size_t dim) {
  if (!embedding_file.empty()) {
    auto loaded = sglora::load_embeddings(embedding_file);
    if (loaded.size() != 1) {
      sglora::raise(sglora::ErrorCode::kValidation,
                    "query file \"" + embedding_file + "\" must hold exactly "
                    "one embedding, found " + std::to_string(loaded.size()));
    }
    if (loaded[0].vec.size() != dim) {
      sglora::raise(sglora::ErrorCode::kShape,
                    "query embedding dimension " +
                        std::to_string(loaded[0].vec.size()) +
                        " does not match the repository dimension " +
                        std::to_string(dim));
    }
    return loaded[0];
  }
  if (describe.empty()) {
    sglora::raise(sglora::ErrorCode::kParameter,
                  "a query needs --embedding or --describe");
  }
  return sglora::stub_embed(describe, dim);
}

std::vector<std::string> split_ids(const std::string& text) {
  std::vector<std::string> out;
  std::string current;
  for (char c : text) {
    if (c == ',') {
      if (!current.empty()) out.push_back(current);
      current.clear();
    } else {
      current += c;
    }
  }
  if (!current.empty()) out.push_back(current);
  return out;
}

// ---------------------------------------------------------------------------

struct BuildRepoArgs {
  std::string checkpoints_dir;
  std::string embeddings_file;
  std::string experts;
  std::string out_dir;
  std::string layout_file;
  double train_fraction = 0.625;
};

int cmd_build_repo(const GlobalOpts& global, const BuildRepoArgs& args) {
  echo_config("build-repo",
              {{"checkpoints", args.checkpoints_dir},
               {"embeddings", args.embeddings_file},
               {"experts", args.experts},
               {"out", args.out_dir},
               {"layout", args.layout_file},
               {"train_fraction", args.train_fraction},
               {"seed", global.seed}});

  const sglora::Layout layout =
      args.layout_file.empty()
          ? sglora::Layout::default_desk()
          : sglora::layout_from_json(read_text_file(args.layout_file),
                                     args.layout_file);

  const auto embeddings = sglora::load_embeddings(args.embeddings_file);
  std::vector<sglora::TaskRecord> records;
  for (const auto& emb : embeddings) {
    const fs::path blob =
        fs::path(args.checkpoints_dir) / (emb.task_id + ".bin");
    if (!fs::exists(blob)) {
      sglora::raise(sglora::ErrorCode::kIo,
                    "missing checkpoint blob \"" + blob.string() + "\"");
    }
    const auto tensors = sglora::load_tensors(blob);
    if (tensors.size() != 1 || tensors[0].name != "checkpoints" ||
        tensors[0].dims.size() != 2) {
      sglora::raise(sglora::ErrorCode::kValidation,
                    "\"" + blob.string() +
                        "\": expected one 2-D tensor named \"checkpoints\"");
    }
    const auto m = static_cast<std::size_t>(tensors[0].dims[0]);
    const auto d = static_cast<std::size_t>(tensors[0].dims[1]);
    sglora::TaskRecord record;
    record.task_id = emb.task_id;
    record.description = emb.description;
    record.embedding = emb.vec;
    for (std::size_t i = 0; i < m; ++i) {
      record.checkpoints.emplace_back(tensors[0].values.begin() + i * d,
                                      tensors[0].values.begin() + (i + 1) * d);
    }
    records.push_back(std::move(record));
  }

  std::vector<std::string> warnings;
  const sglora::Repository repo =
      sglora::build_repository(records, split_ids(args.experts), layout,
                               args.train_fraction, global.seed, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  sglora::save_repository(repo, args.out_dir);

  print_summary(global, {{"experts", repo.experts.size()},
                         {"flat_dim", repo.layout.flat_dim()},
                         {"train", repo.train_ids.size()},
                         {"eval", repo.eval_ids.size()},
                         {"out", args.out_dir}});
  return 0;
}

// ---------------------------------------------------------------------------

struct RouteArgs {
  std::string repo_dir;
  std::string embedding_file;
  std::string describe;
  std::size_t k = sglora::kDefaultTopK;
  double tau = sglora::kDefaultTau;
};

int cmd_route(const GlobalOpts& global, const RouteArgs& args) {
  echo_config("route", {{"repo", args.repo_dir},
                        {"embedding", args.embedding_file},
                        {"describe", args.describe},
                        {"k", args.k},
                        {"tau", args.tau},
                        {"seed", global.seed}});

  const sglora::Repository repo = sglora::load_repository(args.repo_dir);
  const sglora::TaskEmbedding query =
      resolve_query(args.embedding_file, args.describe, repo.embedding_dim);

  sglora::RouteOptions opts;
  opts.k = args.k;
  opts.tau = args.tau;
  const sglora::SemanticPrior prior = sglora::build_prior(query.vec, repo, opts);

  if (global.format == "csv") {
    std::cout << "task_id,similarity,weight\n";
    for (std::size_t i = 0; i < prior.selected_ids.size(); ++i) {
      std::cout << prior.selected_ids[i] << ','
                << fmt_double(prior.similarities[i]) << ','
                << fmt_double(prior.weights[i]) << "\n";
    }
    return 0;
  }
  if (global.format == "text") {
    std::cout << "query: " << query.task_id << " (k=" << prior.selected.size()
              << ", tau=" << fmt_double(prior.tau) << ")\n";
    for (std::size_t i = 0; i < prior.selected_ids.size(); ++i) {
      std::cout << "  " << prior.selected_ids[i]
                << " similarity=" << fmt_double(prior.similarities[i])
                << " weight=" << fmt_double(prior.weights[i]) << "\n";
    }
    return 0;
  }
  ordered_json out;
  out["query_id"] = query.task_id;
  out["tau"] = prior.tau;
  out["k"] = prior.selected.size();
  out["clamped"] = prior.clamped;
  ordered_json selected = ordered_json::array();
  for (std::size_t i = 0; i < prior.selected_ids.size(); ++i) {
    selected.push_back(ordered_json{{"task_id", prior.selected_ids[i]},
                                    {"similarity", prior.similarities[i]},
                                    {"weight", prior.weights[i]}});
  }
  out["selected"] = std::move(selected);
  std::cout << out.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct MergeArgs {
  std::string repo_dir;
  std::string method;
  std::string embedding_file;
  std::string describe;
  std::size_t k = sglora::kDefaultTopK;
  double tau = sglora::kDefaultTau;
  std::string out_file;
};

int cmd_merge(const GlobalOpts& global, const MergeArgs& args) {
  echo_config("merge", {{"repo", args.repo_dir},
                        {"method", args.method},
                        {"embedding", args.embedding_file},
                        {"describe", args.describe},
                        {"k", args.k},
                        {"tau", args.tau},
                        {"out", args.out_file},
                        {"seed", global.seed}});

  const sglora::Repository repo = sglora::load_repository(args.repo_dir);
  std::vector<float> merged;
  if (args.method == "soup") {
    merged = sglora::baseline_model_soup(repo);
  } else {
    const sglora::TaskEmbedding query =
        resolve_query(args.embedding_file, args.describe, repo.embedding_dim);
    merged = args.method == "topk"
                 ? sglora::baseline_topk_merge(query.vec, repo, args.k)
                 : sglora::baseline_topk_weighted(query.vec, repo, args.k,
                                                  args.tau);
  }
  const sglora::AdapterSet set = sglora::unflatten(merged, repo.layout);
  sglora::save_adapter(set, args.out_file);

  print_summary(global, {{"method", args.method},
                         {"flat_dim", merged.size()},
                         {"out", args.out_file}});
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string repo_dir;
  std::string config_file;
  std::string out_file;
  std::string trace_file;
  std::string resume_from;
};

int cmd_train(const GlobalOpts& global, const TrainArgs& args) {
  const std::string trace_path =
      args.trace_file.empty() ? args.out_file + ".trace.csv" : args.trace_file;
  echo_config("train", {{"repo", args.repo_dir},
                        {"config", args.config_file},
                        {"out", args.out_file},
                        {"trace", trace_path},
                        {"resume_from", args.resume_from},
                        {"seed", global.seed}});

  sglora::CvaeConfig config = sglora::cvae_config_from_json(
      read_text_file(args.config_file), args.config_file);
  if (global.seed_given) config.seed = global.seed;

  const sglora::Repository repo = sglora::load_repository(args.repo_dir);
  const auto dataset = sglora::training_samples(repo);

  sglora::CvaeModel resumed;
  const sglora::CvaeModel* resume_ptr = nullptr;
  if (!args.resume_from.empty()) {
    resumed = sglora::load_model(args.resume_from);
    resume_ptr = &resumed;
  }

  const sglora::TrainResult result =
      sglora::train_cvae(dataset, repo, config, resume_ptr);
  sglora::save_model(result.model, args.out_file);

  std::string trace = "epoch,total,recon,kl\n";
  for (std::size_t e = 0; e < result.trace.size(); ++e) {
    trace += std::to_string(e) + ',' + fmt_double(result.trace[e].total) +
             ',' + fmt_double(result.trace[e].recon) + ',' +
             fmt_double(result.trace[e].kl) + "\n";
    if (global.verbose) {
      std::cerr << "epoch " << e << " total=" << result.trace[e].total
                << " recon=" << result.trace[e].recon
                << " kl=" << result.trace[e].kl << "\n";
    }
  }
  write_text_file(trace_path, trace);

  const auto& last = result.trace.back();
  print_summary(global, {{"out", args.out_file},
                         {"trace", trace_path},
                         {"samples", dataset.size()},
                         {"epochs", result.trace.size()},
                         {"final_total", last.total},
                         {"final_recon", last.recon},
                         {"final_kl", last.kl}});
  return 0;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string model_file;
  std::string repo_dir;
  std::string embedding_file;
  std::string describe;
  std::string mode = "mean";
  std::size_t n = 1;
  std::size_t k = 0;      // 0: use the model's routing config
  double tau = 0.0;       // 0: use the model's routing config
  std::string out_dir;
};

int cmd_generate(const GlobalOpts& global, const GenerateArgs& args) {
  echo_config("generate", {{"model", args.model_file},
                           {"repo", args.repo_dir},
                           {"embedding", args.embedding_file},
                           {"describe", args.describe},
                           {"mode", args.mode},
                           {"n", args.n},
                           {"out", args.out_dir},
                           {"seed", global.seed}});

  const sglora::CvaeModel model = sglora::load_model(args.model_file);
  const sglora::Repository repo = sglora::load_repository(args.repo_dir);
  if (!(model.layout == repo.layout)) {
    sglora::raise(sglora::ErrorCode::kLayout,
                  "model layout does not match the repository layout");
  }
  if (model.repo_hash != sglora::repository_hash(repo)) {
    std::cerr << "warning: repository differs from the one the model was "
                 "trained against\n";
  }

  const sglora::TaskEmbedding query =
      resolve_query(args.embedding_file, args.describe, repo.embedding_dim);
  sglora::RouteOptions opts;
  opts.k = args.k > 0 ? args.k : model.config.router_k;
  opts.tau = args.tau > 0.0 ? args.tau : model.config.router_tau;
  const sglora::SemanticPrior prior = sglora::build_prior(query.vec, repo, opts);

  const auto mode = args.mode == "mean" ? sglora::GenerateMode::kMean
                                        : sglora::GenerateMode::kStochastic;
  const auto sets = sglora::generate(model, prior, args.n, mode, global.seed);

  fs::create_directories(args.out_dir);
  ordered_json files = ordered_json::array();
  for (std::size_t i = 0; i < sets.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "adapter_%03zu.bin", i);
    const fs::path path = fs::path(args.out_dir) / name;
    sglora::save_adapter(sets[i], path);
    files.push_back(path.string());
  }

  print_summary(global, {{"mode", args.mode},
                         {"count", sets.size()},
                         {"out", args.out_dir},
                         {"files", files}});
  return 0;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string config_file;
  std::size_t seeds = 1;
  std::string out_dir;
  std::vector<std::size_t> k_sweep;
};

int cmd_bench(const GlobalOpts& global, const BenchArgs& args) {
  ordered_json sweep = ordered_json::array();
  for (std::size_t k : args.k_sweep) sweep.push_back(k);
  echo_config("bench", {{"config", args.config_file},
                        {"seeds", args.seeds},
                        {"out", args.out_dir},
                        {"k_sweep", sweep},
                        {"seed", global.seed}});

  const sglora::BenchConfig config =
      args.config_file.empty()
          ? sglora::BenchConfig{}
          : sglora::bench_config_from_json(read_text_file(args.config_file),
                                           args.config_file);
  if (args.seeds == 0) {
    sglora::raise(sglora::ErrorCode::kParameter, "--seeds must be >= 1");
  }
  fs::create_directories(args.out_dir);

  auto emit = [&](const sglora::BenchReport& report, const std::string& stem) {
    const std::string json = sglora::bench_report_to_json(report);
    sglora::validate_report_json(json, stem + ".json");
    write_text_file(fs::path(args.out_dir) / (stem + ".json"), json);
    write_text_file(fs::path(args.out_dir) / (stem + ".csv"),
                    sglora::bench_report_to_csv(report));
  };

  ordered_json summary;
  if (args.k_sweep.empty()) {
    std::vector<sglora::BenchReport> reports;
    for (std::size_t i = 0; i < args.seeds; ++i) {
      const std::uint64_t seed = global.seed + i;
      if (global.verbose) std::cerr << "bench: seed " << seed << "\n";
      reports.push_back(sglora::run_benchmark(config, seed));
      emit(reports.back(), "report_seed" + std::to_string(seed));
    }
    const auto mean_loss = sglora::mean_aggregate_loss(reports);
    ordered_json agg;
    for (const char* method : sglora::kBenchMethods) {
      agg[method] = mean_loss.at(method);
    }
    summary["seeds"] = args.seeds;
    summary["mean_loss"] = agg;
    write_text_file(fs::path(args.out_dir) / "aggregate.json",
                    summary.dump(2) + "\n");
  } else {
    std::map<std::size_t, std::vector<sglora::BenchReport>> by_k;
    for (std::size_t i = 0; i < args.seeds; ++i) {
      const std::uint64_t seed = global.seed + i;
      if (global.verbose) std::cerr << "bench: seed " << seed << " (sweep)\n";
      const auto reports = sglora::run_k_sweep(config, seed, args.k_sweep);
      for (const auto& [k, report] : reports) {
        emit(report, "report_seed" + std::to_string(seed) + "_k" +
                         std::to_string(k));
        by_k[k].push_back(report);
      }
    }
    ordered_json per_k = ordered_json::array();
    for (std::size_t k : args.k_sweep) {
      const auto mean_loss = sglora::mean_aggregate_loss(by_k.at(k));
      ordered_json agg;
      for (const char* method : sglora::kBenchMethods) {
        agg[method] = mean_loss.at(method);
      }
      per_k.push_back(ordered_json{{"k", k}, {"mean_loss", agg}});
    }
    summary["seeds"] = args.seeds;
    summary["k_sweep"] = std::move(per_k);
    write_text_file(fs::path(args.out_dir) / "aggregate.json",
                    summary.dump(2) + "\n");
  }

  if (global.format == "json") {
    std::cout << summary.dump(2) << "\n";
  } else if (global.format == "csv") {
    if (args.k_sweep.empty()) {
      std::cout << "method,mean_loss\n";
      for (auto it = summary["mean_loss"].begin();
           it != summary["mean_loss"].end(); ++it) {
        std::cout << it.key() << ',' << fmt_double(it.value().get<double>())
                  << "\n";
      }
    } else {
      std::cout << "k,method,mean_loss\n";
      for (const auto& entry : summary["k_sweep"]) {
        for (auto it = entry["mean_loss"].begin();
             it != entry["mean_loss"].end(); ++it) {
          std::cout << entry["k"].get<std::size_t>() << ',' << it.key() << ','
                    << fmt_double(it.value().get<double>()) << "\n";
        }
      }
    }
  } else {
    std::cout << "mean aggregate loss over " << args.seeds << " seed(s):\n";
    if (args.k_sweep.empty()) {
      for (auto it = summary["mean_loss"].begin();
           it != summary["mean_loss"].end(); ++it) {
        std::cout << "  " << it.key() << ": "
                  << fmt_double(it.value().get<double>()) << "\n";
      }
    } else {
      for (const auto& entry : summary["k_sweep"]) {
        std::cout << "  k=" << entry["k"].get<std::size_t>() << "\n";
        for (auto it = entry["mean_loss"].begin();
             it != entry["mean_loss"].end(); ++it) {
          std::cout << "    " << it.key() << ": "
                    << fmt_double(it.value().get<double>()) << "\n";
        }
      }
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  GlobalOpts global;
  CLI::App app{"Semantic-guided low-rank adapter generation toolkit"};
  app.require_subcommand(1);
  auto* seed_opt =
      app.add_option("--seed", global.seed, "Master seed for every substream");
  app.add_flag("--verbose", global.verbose, "Extra progress output on stderr");
  app.add_option("--format", global.format, "Output format")
      ->check(CLI::IsMember({"json", "csv", "text"}));

  BuildRepoArgs build_args;
  auto* build = app.add_subcommand(
      "build-repo", "Build an expert repository from checkpoints");
  build->add_option("--checkpoints", build_args.checkpoints_dir,
                    "Directory with <task_id>.bin checkpoint blobs")
      ->required();
  build->add_option("--embeddings", build_args.embeddings_file,
                    "JSON Lines file with task embeddings")
      ->required();
  build->add_option("--experts", build_args.experts,
                    "Comma-separated task ids to keep as experts")
      ->required();
  build->add_option("--out", build_args.out_dir, "Repository directory")
      ->required();
  build->add_option("--layout", build_args.layout_file,
                    "Layout JSON (defaults to the desk-scale layout)");
  build->add_option("--train-fraction", build_args.train_fraction,
                    "Fraction of non-expert tasks placed in the train split");

  RouteArgs route_args;
  auto* route = app.add_subcommand("route", "Route a query against experts");
  route->add_option("--repo", route_args.repo_dir, "Repository directory")
      ->required();
  auto* route_emb = route->add_option("--embedding", route_args.embedding_file,
                                      "Single-line embedding JSONL query");
  route->add_option("--describe", route_args.describe,
                    "Textual description (stub-embedded)")
      ->excludes(route_emb);
  route->add_option("--k", route_args.k, "Experts to select");
  route->add_option("--tau", route_args.tau, "Softmax temperature");

  MergeArgs merge_args;
  auto* merge = app.add_subcommand("merge", "Merge expert adapters");
  merge->add_option("--repo", merge_args.repo_dir, "Repository directory")
      ->required();
  merge->add_option("--method", merge_args.method, "soup | topk | weighted")
      ->required()
      ->check(CLI::IsMember({"soup", "topk", "weighted"}));
  auto* merge_emb = merge->add_option("--embedding", merge_args.embedding_file,
                                      "Single-line embedding JSONL query");
  merge->add_option("--describe", merge_args.describe,
                    "Textual description (stub-embedded)")
      ->excludes(merge_emb);
  merge->add_option("--k", merge_args.k, "Experts to merge");
  merge->add_option("--tau", merge_args.tau, "Softmax temperature");
  merge->add_option("--out", merge_args.out_file, "Adapter blob path")
      ->required();

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train the adapter generator");
  train->add_option("--repo", train_args.repo_dir, "Repository directory")
      ->required();
  train->add_option("--config", train_args.config_file, "Generator config JSON")
      ->required();
  train->add_option("--out", train_args.out_file, "Model file path")
      ->required();
  train->add_option("--trace", train_args.trace_file,
                    "Loss trace CSV path (default: <out>.trace.csv)");
  train->add_option("--resume-from", train_args.resume_from,
                    "Existing model file to continue training from");

  GenerateArgs gen_args;
  auto* gen = app.add_subcommand("generate", "Generate adapters for a query");
  gen->add_option("--model", gen_args.model_file, "Model file")->required();
  gen->add_option("--repo", gen_args.repo_dir, "Repository directory")
      ->required();
  auto* gen_emb = gen->add_option("--embedding", gen_args.embedding_file,
                                  "Single-line embedding JSONL query");
  gen->add_option("--describe", gen_args.describe,
                  "Textual description (stub-embedded)")
      ->excludes(gen_emb);
  gen->add_option("--mode", gen_args.mode, "mean | stochastic")
      ->check(CLI::IsMember({"mean", "stochastic"}));
  gen->add_option("--n", gen_args.n, "Number of adapters to draw");
  gen->add_option("--k", gen_args.k, "Routing k override");
  gen->add_option("--tau", gen_args.tau, "Routing temperature override");
  gen->add_option("--out", gen_args.out_dir, "Output directory")->required();

  BenchArgs bench_args;
  auto* bench = app.add_subcommand("bench", "Run the synthetic benchmark");
  bench->add_option("--config", bench_args.config_file,
                    "Benchmark config JSON (defaults apply when omitted)");
  bench->add_option("--seeds", bench_args.seeds, "Number of consecutive seeds");
  bench->add_option("--out", bench_args.out_dir, "Report directory")
      ->required();
  bench->add_option("--k-sweep", bench_args.k_sweep,
                    "Comma-separated k values for the routing ablation")
      ->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  global.seed_given = seed_opt->count() > 0;

  try {
    if (build->parsed()) return cmd_build_repo(global, build_args);
    if (route->parsed()) return cmd_route(global, route_args);
    if (merge->parsed()) return cmd_merge(global, merge_args);
    if (train->parsed()) return cmd_train(global, train_args);
    if (gen->parsed()) return cmd_generate(global, gen_args);
    if (bench->parsed()) return cmd_bench(global, bench_args);
  } catch (const sglora::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
