// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0

#include "sglora/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>
#include <unordered_map>

#include "json.hpp"
#include "sglora/errors.hpp"
#include "sglora/router.hpp"
#include "sglora/rng.hpp"
#include "sglora/semantics.hpp"

namespace sglora {
namespace {

using numkit::Matrix;

constexpr int kFourierOrders = 3;     // harmonics 0..2
constexpr double kFactorAmp = 0.4;    // coefficient range [-amp, amp]

double order_decay(int o) { return 1.0 / (1.0 + o); }

// Hard bounds on a factor entry and its theta-derivative given that every
// coefficient lies in [-kFactorAmp, kFactorAmp].
double entry_value_bound() {
  double s = 0.0;
  for (int o = 0; o < kFourierOrders; ++o) s += order_decay(o);
  return kFactorAmp * 2.0 * s;
}

double entry_deriv_bound() {
  double s = 0.0;
  for (int o = 0; o < kFourierOrders; ++o) s += o * order_decay(o);
  return kFactorAmp * 2.0 * s;
}

struct FourierFactor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> cos_coeff;  // (row * cols + col) * orders + o
  std::vector<double> sin_coeff;
};

FourierFactor draw_factor(std::size_t rows, std::size_t cols, Rng& rng) {
  FourierFactor f;
  f.rows = rows;
  f.cols = cols;
  f.cos_coeff.resize(rows * cols * kFourierOrders);
  f.sin_coeff.resize(rows * cols * kFourierOrders);
  for (std::size_t i = 0; i < f.cos_coeff.size(); ++i) {
    f.cos_coeff[i] = kFactorAmp * (2.0 * rng.uniform() - 1.0);
    f.sin_coeff[i] = kFactorAmp * (2.0 * rng.uniform() - 1.0);
  }
  return f;
}

Matrix eval_factor(const FourierFactor& f, double theta) {
  Matrix out(f.rows, f.cols);
  std::size_t base = 0;
  for (std::size_t i = 0; i < f.rows; ++i) {
    for (std::size_t j = 0; j < f.cols; ++j) {
      double v = 0.0;
      for (int o = 0; o < kFourierOrders; ++o) {
        const double w = order_decay(o);
        v += w * (f.cos_coeff[base + o] * std::cos(o * theta) +
                  f.sin_coeff[base + o] * std::sin(o * theta));
      }
      out(i, j) = static_cast<float>(v);
      base += kFourierOrders;
    }
  }
  return out;
}

struct PlacementTruth {
  FourierFactor a;  // r x n
  FourierFactor b;  // m x r
};

// Truth coefficients are regenerated deterministically from the seed, so the
// family struct itself only needs to carry evaluated matrices.
std::vector<PlacementTruth> draw_truth(const Layout& layout, std::uint64_t seed) {
  Rng rng = Rng::substream(seed, "bench.truth");
  std::vector<PlacementTruth> truth;
  for (const auto& mod : layout.modules()) {
    PlacementTruth t;
    t.a = draw_factor(mod.r, mod.n, rng);
    t.b = draw_factor(mod.m, mod.r, rng);
    truth.push_back(std::move(t));
  }
  return truth;
}

std::vector<Matrix> truth_at(const std::vector<PlacementTruth>& truth,
                             double theta) {
  std::vector<Matrix> out;
  out.reserve(truth.size());
  for (const auto& t : truth) {
    out.push_back(numkit::matmul(eval_factor(t.b, theta), eval_factor(t.a, theta)));
  }
  return out;
}

double frobenius_gap(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.vec()[i]) - static_cast<double>(b.vec()[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

std::string task_id_for(std::size_t index, std::size_t n_tasks) {
  int width = 2;
  for (std::size_t v = n_tasks > 0 ? n_tasks - 1 : 0; v >= 100; v /= 10) ++width;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "task_%0*zu", width, index);
  return buf;
}

nlohmann::ordered_json bench_config_to_ordered(const BenchConfig& c) {
  nlohmann::ordered_json j;
  j["n_tasks"] = c.n_tasks;
  j["n_experts"] = c.n_experts;
  j["embedding_dim"] = c.embedding_dim;
  j["samples_per_task"] = c.samples_per_task;
  j["label_noise"] = c.label_noise;
  j["oracle_epochs"] = c.oracle_epochs;
  j["checkpoints"] = c.checkpoints;
  j["checkpoint_jitter"] = c.checkpoint_jitter;
  j["oracle_lr"] = c.oracle_lr;
  j["k"] = c.k;
  j["tau"] = c.tau;
  j["stochastic_n"] = c.stochastic_n;
  j["train_fraction"] = c.train_fraction;
  j["layout"] = nlohmann::ordered_json{{"blocks", c.layout_blocks},
                                       {"dim", c.layout_dim},
                                       {"rank", c.layout_rank},
                                       {"alpha", c.layout_alpha}};
  j["cvae"] = nlohmann::ordered_json::parse(cvae_config_to_json(c.cvae));
  return j;
}

double cosine_rows(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::max(std::sqrt(na), 1e-30) * std::max(std::sqrt(nb), 1e-30));
}

struct Pipeline {
  SyntheticFamily family;
  Repository repo;
  TrainResult trained;
};

Pipeline build_pipeline(const BenchConfig& config, std::uint64_t seed) {
  Pipeline p;
  p.family = make_family(config, seed);

  std::vector<TaskRecord> records;
  records.reserve(p.family.tasks.size());
  for (std::size_t i = 0; i < p.family.tasks.size(); ++i) {
    records.push_back(train_oracle(
        p.family, i, config,
        derive_seed(seed, "bench.oracle." + p.family.tasks[i].task_id)));
  }

  // Experts spread evenly around the circle; the router's premise.
  std::vector<std::string> expert_ids;
  for (std::size_t i = 0; i < config.n_experts; ++i) {
    expert_ids.push_back(
        records[i * config.n_tasks / config.n_experts].task_id);
  }
  p.repo = build_repository(records, expert_ids, p.family.layout,
                            config.train_fraction, seed);

  CvaeConfig cc = config.cvae;
  cc.router_k = config.k;
  cc.router_tau = config.tau;
  cc.seed = derive_seed(seed, "bench.cvae");
  // Expert checkpoints train the generator too; routed leave-self-out
  // conditions keep their targets from leaking into their own priors.
  const auto dataset = training_samples(p.repo);
  p.trained = train_cvae(dataset, p.repo, cc);
  return p;
}

std::vector<BenchRow> evaluate_methods(const Pipeline& p,
                                       const BenchConfig& config,
                                       std::size_t k, double tau,
                                       std::uint64_t seed) {
  std::unordered_map<std::string, std::size_t> index_of;
  for (std::size_t i = 0; i < p.family.tasks.size(); ++i) {
    index_of[p.family.tasks[i].task_id] = i;
  }

  std::vector<BenchRow> rows;
  for (const char* method : kBenchMethods) {
    for (const auto& eval_id : p.repo.eval_ids) {
      const std::size_t task_index = index_of.at(eval_id);
      const auto& task = p.family.tasks[task_index];
      const TaskRecord* record = p.repo.find_record(eval_id);
      if (record == nullptr) {
        raise(ErrorCode::kContract,
              "bench: eval task \"" + eval_id + "\" lost its record");
      }
      const std::vector<float> oracle_mean = build_expert(*record).mean;

      std::vector<float> vec;
      const std::string name = method;
      if (name == "zero_shot") {
        vec.assign(p.family.layout.flat_dim(), 0.0f);
      } else if (name == "model_soup") {
        vec = baseline_model_soup(p.repo);
      } else if (name == "topk_merge") {
        vec = baseline_topk_merge(task.embedding, p.repo, k);
      } else if (name == "topk_weighted") {
        vec = baseline_topk_weighted(task.embedding, p.repo, k, tau);
      } else if (name == "sg_lora_mean") {
        RouteOptions opts;
        opts.k = k;
        opts.tau = tau;
        const SemanticPrior prior = build_prior(task.embedding, p.repo, opts);
        vec = flatten(generate(p.trained.model, prior, 1, GenerateMode::kMean,
                               0)[0]);
      } else if (name == "sg_lora_stochastic") {
        RouteOptions opts;
        opts.k = k;
        opts.tau = tau;
        const SemanticPrior prior = build_prior(task.embedding, p.repo, opts);
        const auto sets = generate(
            p.trained.model, prior, config.stochastic_n,
            GenerateMode::kStochastic,
            derive_seed(seed, "bench.stochastic." + eval_id));
        double best_loss = 0.0;
        for (std::size_t s = 0; s < sets.size(); ++s) {
          const double loss = eval_task(p.family, task_index, sets[s]).loss;
          if (s == 0 || loss < best_loss) {
            best_loss = loss;
            vec = flatten(sets[s]);
          }
        }
      } else if (name == "oracle") {
        vec = oracle_mean;
      } else {
        raise(ErrorCode::kContract, "bench: unknown method " + name);
      }

      const EvalMetrics metrics =
          eval_task(p.family, task_index, unflatten(vec, p.family.layout));
      BenchRow row;
      row.method = name;
      row.task_id = eval_id;
      row.loss = metrics.loss;
      double l2 = 0.0;
      for (std::size_t i = 0; i < vec.size(); ++i) {
        const double d = static_cast<double>(vec[i]) -
                         static_cast<double>(oracle_mean[i]);
        l2 += d * d;
      }
      row.param_l2 = std::sqrt(l2);
      row.r1 = metrics.r1;
      row.r5 = metrics.r5;
      row.r10 = metrics.r10;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::vector<MethodAggregate> aggregate_rows(const std::vector<BenchRow>& rows) {
  std::vector<MethodAggregate> out;
  for (const char* method : kBenchMethods) {
    MethodAggregate agg;
    agg.method = method;
    std::size_t count = 0;
    for (const auto& row : rows) {
      if (row.method != method) continue;
      agg.loss += row.loss;
      agg.param_l2 += row.param_l2;
      agg.r1 += row.r1;
      agg.r5 += row.r5;
      agg.r10 += row.r10;
      ++count;
    }
    if (count == 0) continue;
    const auto n = static_cast<double>(count);
    agg.loss /= n;
    agg.param_l2 /= n;
    agg.r1 /= n;
    agg.r5 /= n;
    agg.r10 /= n;
    out.push_back(std::move(agg));
  }
  return out;
}

void check_row_fields(const nlohmann::json& row, const std::string& where) {
  for (const char* key : {"method", "task_id"}) {
    if (!row.contains(key) || !row[key].is_string()) {
      raise(ErrorCode::kValidation,
            where + ": missing string field \"" + key + "\"");
    }
  }
  for (const char* key : {"loss", "param_l2", "r1", "r5", "r10"}) {
    if (!row.contains(key) || !row[key].is_number()) {
      raise(ErrorCode::kValidation,
            where + ": missing numeric field \"" + key + "\"");
    }
  }
}

}  // namespace

BenchConfig::BenchConfig() {
  // Bench-scale generator settings; the structural defaults of CvaeConfig
  // target larger runs.
  cvae.hidden = 160;
  cvae.epochs = 150;
  cvae.batch_size = 32;
  cvae.learning_rate = 3e-3;
  cvae.cond_noise = 0.5;
}

Layout bench_layout(const BenchConfig& config) {
  return Layout::default_desk(config.layout_blocks, config.layout_dim,
                              config.layout_rank, config.layout_alpha);
}

void validate_bench_config(const BenchConfig& config) {
  auto fail = [](const std::string& msg) {
    raise(ErrorCode::kValidation, "bench config: " + msg);
  };
  if (config.n_tasks < 3) fail("n_tasks must be >= 3");
  if (config.n_experts == 0 || config.n_experts >= config.n_tasks) {
    fail("n_experts must be in [1, n_tasks - 1]");
  }
  if (config.embedding_dim < 2) fail("embedding_dim must be >= 2");
  if (config.samples_per_task == 0) fail("samples_per_task must be >= 1");
  if (config.label_noise < 0.0) fail("label_noise must be >= 0");
  if (config.oracle_epochs == 0) fail("oracle_epochs must be >= 1");
  if (config.checkpoints == 0 || config.checkpoints > config.oracle_epochs) {
    fail("checkpoints must be in [1, oracle_epochs]");
  }
  if (config.checkpoint_jitter < 0.0) fail("checkpoint_jitter must be >= 0");
  if (!(config.oracle_lr > 0.0)) fail("oracle_lr must be > 0");
  if (config.k == 0) fail("k must be >= 1");
  if (!(config.tau > 0.0)) fail("tau must be > 0");
  if (config.stochastic_n == 0) fail("stochastic_n must be >= 1");
  if (!(config.train_fraction >= 0.0 && config.train_fraction <= 1.0)) {
    fail("train_fraction must lie in [0, 1]");
  }
  if (config.layout_blocks == 0 || config.layout_dim == 0 ||
      config.layout_rank == 0 || config.layout_rank > config.layout_dim) {
    fail("layout must satisfy blocks >= 1, 1 <= rank <= dim");
  }
  validate_config(config.cvae);
}

std::string bench_config_to_json(const BenchConfig& config) {
  return bench_config_to_ordered(config).dump(2) + "\n";
}

BenchConfig bench_config_from_json(const std::string& text,
                                   const std::string& origin) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    raise(ErrorCode::kParse, origin + ": invalid JSON");
  }
  BenchConfig c;
  auto number = [&](const char* key, auto& slot, auto caster) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) {
      raise(ErrorCode::kValidation,
            origin + ": \"" + key + "\" must be a number");
    }
    slot = caster(j[key]);
  };
  auto as_size = [](const nlohmann::json& v) { return v.get<std::size_t>(); };
  auto as_double = [](const nlohmann::json& v) { return v.get<double>(); };
  number("n_tasks", c.n_tasks, as_size);
  number("n_experts", c.n_experts, as_size);
  number("embedding_dim", c.embedding_dim, as_size);
  number("samples_per_task", c.samples_per_task, as_size);
  number("label_noise", c.label_noise, as_double);
  number("oracle_epochs", c.oracle_epochs, as_size);
  number("checkpoints", c.checkpoints, as_size);
  number("checkpoint_jitter", c.checkpoint_jitter, as_double);
  number("oracle_lr", c.oracle_lr, as_double);
  number("k", c.k, as_size);
  number("tau", c.tau, as_double);
  number("stochastic_n", c.stochastic_n, as_size);
  number("train_fraction", c.train_fraction, as_double);
  if (j.contains("layout")) {
    const auto& jl = j["layout"];
    if (!jl.is_object()) {
      raise(ErrorCode::kValidation, origin + ": \"layout\" must be an object");
    }
    for (auto it = jl.begin(); it != jl.end(); ++it) {
      if (it.key() == "blocks") {
        c.layout_blocks = it.value().get<std::size_t>();
      } else if (it.key() == "dim") {
        c.layout_dim = it.value().get<std::size_t>();
      } else if (it.key() == "rank") {
        c.layout_rank = it.value().get<std::size_t>();
      } else if (it.key() == "alpha") {
        c.layout_alpha = it.value().get<float>();
      } else {
        raise(ErrorCode::kValidation,
              origin + ": unknown layout field \"" + it.key() + "\"");
      }
    }
  }
  if (j.contains("cvae")) {
    c.cvae = cvae_config_from_json(j["cvae"].dump(), origin + ": cvae");
  }
  static const char* kKnown[] = {
      "n_tasks",     "n_experts",         "embedding_dim", "samples_per_task",
      "label_noise", "oracle_epochs",     "checkpoints",   "checkpoint_jitter",
      "oracle_lr",   "k",                 "tau",           "stochastic_n",
      "train_fraction", "layout",         "cvae"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(std::begin(kKnown), std::end(kKnown), [&](const char* k) {
          return it.key() == k;
        }) == std::end(kKnown)) {
      raise(ErrorCode::kValidation,
            origin + ": unknown config field \"" + it.key() + "\"");
    }
  }
  validate_bench_config(c);
  return c;
}

SyntheticFamily make_family(const BenchConfig& config, std::uint64_t seed) {
  validate_bench_config(config);

  SyntheticFamily family;
  family.layout = bench_layout(config);
  family.embedding_dim = config.embedding_dim;
  family.seed = seed;
  const auto& mods = family.layout.modules();

  // Two orthonormal embedding directions; the rest of the rotation never
  // touches the (cos, sin, 0, ...) input.
  Rng rot = Rng::substream(seed, "bench.rotation");
  const std::size_t e = config.embedding_dim;
  std::vector<double> u(e), v(e);
  for (auto& x : u) x = rot.normal();
  for (auto& x : v) x = rot.normal();
  auto norm_of = [](const std::vector<double>& a) {
    double s = 0.0;
    for (double x : a) s += x * x;
    return std::sqrt(s);
  };
  double nu = norm_of(u);
  if (nu < 1e-8) raise(ErrorCode::kContract, "make_family: degenerate basis draw");
  for (auto& x : u) x /= nu;
  double uv = 0.0;
  for (std::size_t i = 0; i < e; ++i) uv += u[i] * v[i];
  for (std::size_t i = 0; i < e; ++i) v[i] -= uv * u[i];
  double nv = norm_of(v);
  if (nv < 1e-8) raise(ErrorCode::kContract, "make_family: degenerate basis draw");
  for (auto& x : v) x /= nv;

  Rng w0_rng = Rng::substream(seed, "bench.w0");
  for (const auto& mod : mods) {
    family.w0.push_back(numkit::random_normal<float>(
        mod.m, mod.n, w0_rng, 1.0 / std::sqrt(static_cast<double>(mod.n))));
  }

  const auto truth = draw_truth(family.layout, seed);
  const double val_b = entry_value_bound();
  const double der_b = entry_deriv_bound();
  for (const auto& mod : mods) {
    const double norm_a_val = std::sqrt(static_cast<double>(mod.r * mod.n)) * val_b;
    const double norm_a_der = std::sqrt(static_cast<double>(mod.r * mod.n)) * der_b;
    const double norm_b_val = std::sqrt(static_cast<double>(mod.m * mod.r)) * val_b;
    const double norm_b_der = std::sqrt(static_cast<double>(mod.m * mod.r)) * der_b;
    family.lipschitz_bound.push_back(norm_b_der * norm_a_val +
                                     norm_b_val * norm_a_der);
  }

  for (std::size_t i = 0; i < config.n_tasks; ++i) {
    SyntheticTask task;
    task.theta = 2.0 * std::numbers::pi * static_cast<double>(i) /
                 static_cast<double>(config.n_tasks);
    task.task_id = task_id_for(i, config.n_tasks);
    char desc[96];
    std::snprintf(desc, sizeof(desc),
                  "linear response task at %.1f degrees on the family circle",
                  task.theta * 180.0 / std::numbers::pi);
    task.description = desc;

    task.embedding.resize(e);
    const double ct = std::cos(task.theta);
    const double st = std::sin(task.theta);
    for (std::size_t d = 0; d < e; ++d) {
      task.embedding[d] = static_cast<float>(ct * u[d] + st * v[d]);
    }
    l2_normalize_or_raise(task.embedding, "make_family(" + task.task_id + ")");

    task.delta_true = truth_at(truth, task.theta);

    Rng data = Rng::substream(seed, "bench.data." + task.task_id);
    Rng noise = Rng::substream(seed, "bench.noise." + task.task_id);
    for (std::size_t p = 0; p < mods.size(); ++p) {
      Matrix x = numkit::random_normal<float>(mods[p].n,
                                              config.samples_per_task, data);
      Matrix y = numkit::matmul(numkit::add(family.w0[p], task.delta_true[p]), x);
      if (config.label_noise > 0.0) {
        for (auto& val : y.vec()) {
          val += static_cast<float>(noise.normal() * config.label_noise);
        }
      }
      task.x.push_back(std::move(x));
      task.y.push_back(std::move(y));
    }
    family.tasks.push_back(std::move(task));
  }

  // Smoothness assertion over adjacent angles, wrap included.
  for (std::size_t i = 0; i < family.tasks.size(); ++i) {
    const std::size_t j = (i + 1) % family.tasks.size();
    const double gap = 2.0 * std::numbers::pi / static_cast<double>(config.n_tasks);
    for (std::size_t p = 0; p < mods.size(); ++p) {
      const double dist = frobenius_gap(family.tasks[i].delta_true[p],
                                        family.tasks[j].delta_true[p]);
      if (dist > family.lipschitz_bound[p] * gap * (1.0 + 1e-9)) {
        raise(ErrorCode::kContract,
              "make_family: smoothness bound violated at placement " +
                  mods[p].placement_id);
      }
    }
  }
  return family;
}

TaskRecord train_oracle(const SyntheticFamily& family, std::size_t task_index,
                        const BenchConfig& config, std::uint64_t seed) {
  if (task_index >= family.tasks.size()) {
    raise(ErrorCode::kParameter, "train_oracle: task index out of range");
  }
  const SyntheticTask& task = family.tasks[task_index];
  const auto& mods = family.layout.modules();
  const std::size_t n_place = mods.size();

  // Residual targets: R = Y - W0 X, so the loss only sees the update.
  std::vector<Matrix> residual(n_place);
  for (std::size_t p = 0; p < n_place; ++p) {
    residual[p] = numkit::sub(task.y[p], numkit::matmul(family.w0[p], task.x[p]));
  }

  // Every task fine-tunes from the same frozen base and the same adapter
  // initialization, so converged factors land in mutually consistent
  // factorizations and parameter-space task geometry mirrors update
  // geometry. Only the init stream is family-wide; stochastic details of
  // each run stay task-seeded.
  Rng init = Rng::substream(family.seed, "oracle.init");
  std::vector<Matrix> a(n_place), b(n_place);
  for (std::size_t p = 0; p < n_place; ++p) {
    a[p] = numkit::random_normal<float>(
        mods[p].r, mods[p].n, init,
        1.0 / std::sqrt(static_cast<double>(mods[p].n)));
    b[p] = Matrix(mods[p].m, mods[p].r);
  }

  std::vector<numkit::AdamState<float>> opt;
  for (std::size_t p = 0; p < n_place; ++p) {
    opt.emplace_back(a[p].size(), config.oracle_lr);
    opt.emplace_back(b[p].size(), config.oracle_lr);
  }

  double entries = 0.0;
  for (std::size_t p = 0; p < n_place; ++p) entries += residual[p].size();

  Rng jitter = Rng::substream(seed, "oracle.jitter");
  TaskRecord record;
  record.task_id = task.task_id;
  record.description = task.description;
  record.embedding = task.embedding;

  for (std::size_t epoch = 0; epoch < config.oracle_epochs; ++epoch) {
    numkit::Tape<float> tape;
    std::vector<numkit::Tape<float>::NodeId> a_ids(n_place), b_ids(n_place);
    numkit::Tape<float>::NodeId total{};
    bool first = true;
    for (std::size_t p = 0; p < n_place; ++p) {
      a_ids[p] = tape.leaf(a[p]);
      b_ids[p] = tape.leaf(b[p]);
      const auto x = tape.leaf(task.x[p]);
      const auto r = tape.leaf(residual[p]);
      auto pred = tape.matmul(b_ids[p], tape.matmul(a_ids[p], x));
      if (mods[p].alpha != 1.0f) pred = tape.scale(pred, mods[p].alpha);
      const auto term = tape.sum(tape.square(tape.sub(pred, r)));
      total = first ? term : tape.add(total, term);
      first = false;
    }
    const auto loss = tape.scale(total, static_cast<float>(1.0 / entries));
    const double loss_value = tape.value(loss)(0, 0);
    if (!std::isfinite(loss_value) || loss_value > 1e6) {
      raise(ErrorCode::kValidation,
            "train_oracle(" + task.task_id + "): diverged at epoch " +
                std::to_string(epoch) + " with loss " +
                std::to_string(loss_value) + "; lower oracle_lr");
    }
    auto grads = tape.backward(loss);
    for (std::size_t p = 0; p < n_place; ++p) {
      adam_step<float>(a[p].vec(), grads.at(a_ids[p]).vec(), opt[2 * p]);
      adam_step<float>(b[p].vec(), grads.at(b_ids[p]).vec(), opt[2 * p + 1]);
    }

    if (epoch + config.checkpoints >= config.oracle_epochs) {
      AdapterSet set;
      for (std::size_t p = 0; p < n_place; ++p) {
        set.modules.push_back(LoraModule{mods[p].placement_id, a[p], b[p],
                                         mods[p].alpha, mods[p].r});
      }
      std::vector<float> flat = flatten(set);
      for (auto& v : flat) {
        v += static_cast<float>(jitter.normal() * config.checkpoint_jitter);
      }
      record.checkpoints.push_back(std::move(flat));
    }
  }
  return record;
}

EvalMetrics eval_task(const SyntheticFamily& family, std::size_t task_index,
                      const AdapterSet& adapter) {
  if (task_index >= family.tasks.size()) {
    raise(ErrorCode::kParameter, "eval_task: task index out of range");
  }
  if (!(adapter.layout() == family.layout)) {
    raise(ErrorCode::kLayout,
          "eval_task: adapter layout does not match the family layout");
  }
  const SyntheticTask& task = family.tasks[task_index];
  const auto& mods = family.layout.modules();

  std::vector<std::vector<double>> pred_rows;
  std::vector<std::vector<double>> true_rows;
  double se = 0.0;
  std::size_t entries = 0;
  for (std::size_t p = 0; p < mods.size(); ++p) {
    const Matrix h = apply_lora(family.w0[p], adapter.modules[p], task.x[p]);
    const Matrix& y = task.y[p];
    for (std::size_t i = 0; i < h.rows(); ++i) {
      std::vector<double> hr(h.cols()), yr(h.cols());
      for (std::size_t s = 0; s < h.cols(); ++s) {
        hr[s] = h(i, s);
        yr[s] = y(i, s);
        const double d = hr[s] - yr[s];
        se += d * d;
      }
      entries += h.cols();
      pred_rows.push_back(std::move(hr));
      true_rows.push_back(std::move(yr));
    }
  }

  EvalMetrics metrics;
  metrics.loss = se / static_cast<double>(entries);

  const std::size_t gallery = true_rows.size();
  std::array<std::size_t, 3> ks = {1, 5, 10};
  std::array<double, 3> hits = {0.0, 0.0, 0.0};
  for (std::size_t q = 0; q < gallery; ++q) {
    // Rank of the true row under descending cosine, ties to lower index.
    std::size_t rank = 1;
    const double self = cosine_rows(pred_rows[q], true_rows[q]);
    for (std::size_t g = 0; g < gallery; ++g) {
      if (g == q) continue;
      const double score = cosine_rows(pred_rows[q], true_rows[g]);
      if (score > self || (score == self && g < q)) ++rank;
    }
    for (std::size_t t = 0; t < ks.size(); ++t) {
      const std::size_t kk = std::min(ks[t], gallery);
      if (kk < ks[t]) metrics.k_clamped = true;
      if (rank <= kk) hits[t] += 1.0;
    }
  }
  metrics.r1 = hits[0] / static_cast<double>(gallery);
  metrics.r5 = hits[1] / static_cast<double>(gallery);
  metrics.r10 = hits[2] / static_cast<double>(gallery);
  return metrics;
}

BenchReport run_benchmark(const BenchConfig& config, std::uint64_t seed) {
  Pipeline p = build_pipeline(config, seed);
  BenchReport report;
  report.seed = seed;
  report.config = config;
  report.train_trace = p.trained.trace;
  report.rows = evaluate_methods(p, config, config.k, config.tau, seed);
  report.aggregates = aggregate_rows(report.rows);
  validate_report(report);
  return report;
}

std::vector<std::pair<std::size_t, BenchReport>> run_k_sweep(
    const BenchConfig& config, std::uint64_t seed,
    std::span<const std::size_t> ks) {
  if (ks.empty()) {
    raise(ErrorCode::kParameter, "run_k_sweep: no k values given");
  }
  for (std::size_t k : ks) {
    if (k == 0) raise(ErrorCode::kParameter, "run_k_sweep: k must be >= 1");
  }
  Pipeline p = build_pipeline(config, seed);
  std::vector<std::pair<std::size_t, BenchReport>> out;
  for (std::size_t k : ks) {
    BenchReport report;
    report.seed = seed;
    report.config = config;
    report.config.k = k;
    report.train_trace = p.trained.trace;
    report.rows = evaluate_methods(p, config, k, config.tau, seed);
    report.aggregates = aggregate_rows(report.rows);
    validate_report(report);
    out.emplace_back(k, std::move(report));
  }
  return out;
}

void validate_report(const BenchReport& report) {
  if (report.rows.empty()) {
    raise(ErrorCode::kValidation, "bench report: no rows");
  }
  std::set<std::string> task_set;
  for (const auto& row : report.rows) {
    if (row.method == kBenchMethods.front()) task_set.insert(row.task_id);
  }
  for (const char* method : kBenchMethods) {
    std::set<std::string> seen;
    for (const auto& row : report.rows) {
      if (row.method == method) seen.insert(row.task_id);
    }
    if (seen != task_set) {
      raise(ErrorCode::kValidation,
            std::string("bench report: method ") + method +
                " does not cover every eval task");
    }
  }
  for (const auto& row : report.rows) {
    if (!(row.r1 <= row.r5 + 1e-12 && row.r5 <= row.r10 + 1e-12)) {
      raise(ErrorCode::kValidation,
            "bench report: Recall@K not monotone for task " + row.task_id);
    }
  }
  const auto recomputed = aggregate_rows(report.rows);
  if (recomputed.size() != report.aggregates.size()) {
    raise(ErrorCode::kValidation, "bench report: aggregate row count mismatch");
  }
  for (std::size_t i = 0; i < recomputed.size(); ++i) {
    const auto& a = report.aggregates[i];
    const auto& b = recomputed[i];
    const bool same = a.method == b.method &&
                      std::abs(a.loss - b.loss) <= 1e-9 &&
                      std::abs(a.param_l2 - b.param_l2) <= 1e-9 &&
                      std::abs(a.r1 - b.r1) <= 1e-9 &&
                      std::abs(a.r5 - b.r5) <= 1e-9 &&
                      std::abs(a.r10 - b.r10) <= 1e-9;
    if (!same) {
      raise(ErrorCode::kValidation,
            "bench report: aggregate for " + a.method +
                " does not equal the recomputed mean");
    }
  }
}

std::string bench_report_to_json(const BenchReport& report) {
  nlohmann::ordered_json j;
  j["seed"] = report.seed;
  j["config"] = bench_config_to_ordered(report.config);
  nlohmann::ordered_json trace = nlohmann::ordered_json::array();
  for (std::size_t e = 0; e < report.train_trace.size(); ++e) {
    trace.push_back(nlohmann::ordered_json{{"epoch", e},
                                           {"total", report.train_trace[e].total},
                                           {"recon", report.train_trace[e].recon},
                                           {"kl", report.train_trace[e].kl}});
  }
  j["train_trace"] = std::move(trace);
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& row : report.rows) {
    rows.push_back(nlohmann::ordered_json{
        {"method", row.method}, {"task_id", row.task_id}, {"loss", row.loss},
        {"param_l2", row.param_l2}, {"r1", row.r1}, {"r5", row.r5},
        {"r10", row.r10}});
  }
  j["rows"] = std::move(rows);
  nlohmann::ordered_json aggs = nlohmann::ordered_json::array();
  for (const auto& agg : report.aggregates) {
    aggs.push_back(nlohmann::ordered_json{
        {"method", agg.method}, {"loss", agg.loss}, {"param_l2", agg.param_l2},
        {"r1", agg.r1}, {"r5", agg.r5}, {"r10", agg.r10}});
  }
  j["aggregates"] = std::move(aggs);
  return j.dump(2) + "\n";
}

std::string bench_report_to_csv(const BenchReport& report) {
  std::string out = "method,task_id,loss,r1,r5,r10\n";
  char buf[192];
  for (const auto& row : report.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%.9g,%.9g,%.9g,%.9g\n",
                  row.method.c_str(), row.task_id.c_str(), row.loss, row.r1,
                  row.r5, row.r10);
    out += buf;
  }
  return out;
}

void validate_report_json(const std::string& text, const std::string& origin) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    raise(ErrorCode::kParse, origin + ": invalid JSON");
  }
  if (!j.contains("seed") || !j["seed"].is_number_unsigned()) {
    raise(ErrorCode::kValidation, origin + ": missing unsigned field \"seed\"");
  }
  if (!j.contains("config") || !j["config"].is_object()) {
    raise(ErrorCode::kValidation, origin + ": missing object field \"config\"");
  }
  for (const char* key : {"train_trace", "rows", "aggregates"}) {
    if (!j.contains(key) || !j[key].is_array()) {
      raise(ErrorCode::kValidation,
            origin + ": missing array field \"" + key + "\"");
    }
  }
  std::map<std::string, std::set<std::string>> coverage;
  for (std::size_t i = 0; i < j["rows"].size(); ++i) {
    const std::string where = origin + ": rows[" + std::to_string(i) + "]";
    check_row_fields(j["rows"][i], where);
    coverage[j["rows"][i]["method"].get<std::string>()].insert(
        j["rows"][i]["task_id"].get<std::string>());
  }
  if (coverage.size() != kBenchMethods.size()) {
    raise(ErrorCode::kValidation,
          origin + ": expected " + std::to_string(kBenchMethods.size()) +
              " methods, found " + std::to_string(coverage.size()));
  }
  const auto& reference = coverage.begin()->second;
  for (const auto& [method, tasks] : coverage) {
    if (tasks != reference) {
      raise(ErrorCode::kValidation,
            origin + ": method " + method + " does not cover every eval task");
    }
  }
  for (std::size_t i = 0; i < j["aggregates"].size(); ++i) {
    const auto& agg = j["aggregates"][i];
    const std::string where = origin + ": aggregates[" + std::to_string(i) + "]";
    if (!agg.contains("method") || !agg["method"].is_string()) {
      raise(ErrorCode::kValidation, where + ": missing string field \"method\"");
    }
    for (const char* key : {"loss", "param_l2", "r1", "r5", "r10"}) {
      if (!agg.contains(key) || !agg[key].is_number()) {
        raise(ErrorCode::kValidation,
              where + ": missing numeric field \"" + key + "\"");
      }
    }
  }
}

std::map<std::string, double> mean_aggregate_loss(
    std::span<const BenchReport> reports) {
  if (reports.empty()) {
    raise(ErrorCode::kValidation, "mean_aggregate_loss: no reports");
  }
  std::map<std::string, double> sums;
  for (const auto& report : reports) {
    for (const auto& agg : report.aggregates) {
      sums[agg.method] += agg.loss;
    }
  }
  for (auto& [method, value] : sums) {
    value /= static_cast<double>(reports.size());
  }
  return sums;
}

}  // namespace sglora
