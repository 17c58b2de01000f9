// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0

#include "sglora/cvae.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <unordered_map>

#include "json.hpp"
#include "sglora/errors.hpp"

namespace sglora {
namespace {

constexpr char kModelMagic[4] = {'S', 'G', 'L', 'M'};
constexpr std::uint32_t kModelVersion = 1;

using numkit::Matrix;

Matrix column(std::span<const float> v) {
  Matrix m(v.size(), 1);
  std::copy(v.begin(), v.end(), m.vec().begin());
  return m;
}

std::vector<float> to_vector(const Matrix& col) {
  return {col.vec().begin(), col.vec().end()};
}

GaussianDiag split_gaussian(const Matrix& out, std::size_t latent) {
  GaussianDiag g;
  g.mean.assign(out.vec().begin(), out.vec().begin() + latent);
  g.logvar.resize(latent);
  for (std::size_t i = 0; i < latent; ++i) {
    g.logvar[i] = std::clamp(out.vec()[latent + i], kLogvarMin, kLogvarMax);
  }
  return g;
}

std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t from_hex(const std::string& s, const std::string& origin) {
  if (s.size() != 16 ||
      s.find_first_not_of("0123456789abcdef") != std::string::npos) {
    raise(ErrorCode::kParse, origin + ": malformed hash \"" + s + "\"");
  }
  return std::stoull(s, nullptr, 16);
}

void append_le32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_le64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_le(std::string_view bytes, std::size_t offset,
                      std::size_t width, const std::string& origin,
                      const char* what) {
  if (offset + width > bytes.size()) {
    raise(ErrorCode::kTruncated,
          origin + ": truncated while reading " + what);
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < width; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i]))
         << (8 * i);
  }
  return v;
}

double lr_at_epoch(const CvaeConfig& cfg, std::size_t epoch) {
  if (!cfg.cosine_lr_decay || cfg.epochs <= 1) return cfg.learning_rate;
  const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
  constexpr double kFloorFraction = 0.05;
  return cfg.learning_rate *
         (kFloorFraction +
          (1.0 - kFloorFraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

nlohmann::ordered_json config_to_ordered_json(const CvaeConfig& c) {
  nlohmann::ordered_json j;
  j["latent_dim"] = c.latent_dim;
  j["cond_dim"] = c.cond_dim;
  j["hidden"] = c.hidden;
  j["lambda"] = c.lambda_kl;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["lr_decay"] = c.cosine_lr_decay ? "cosine" : "none";
  j["cond_noise"] = c.cond_noise;
  j["weight_decay"] = c.weight_decay;
  j["seed"] = c.seed;
  j["router_k"] = c.router_k;
  j["router_tau"] = c.router_tau;
  return j;
}

CvaeConfig config_from_json_object(const nlohmann::json& j,
                                   const std::string& origin) {
  if (!j.is_object()) {
    raise(ErrorCode::kParse, origin + ": config is not a JSON object");
  }
  CvaeConfig c;
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
  auto as_u64 = [](const nlohmann::json& v) { return v.get<std::uint64_t>(); };
  number("latent_dim", c.latent_dim, as_size);
  number("cond_dim", c.cond_dim, as_size);
  number("hidden", c.hidden, as_size);
  number("lambda", c.lambda_kl, as_double);
  number("epochs", c.epochs, as_size);
  number("batch_size", c.batch_size, as_size);
  number("learning_rate", c.learning_rate, as_double);
  number("cond_noise", c.cond_noise, as_double);
  number("weight_decay", c.weight_decay, as_double);
  number("seed", c.seed, as_u64);
  number("router_k", c.router_k, as_size);
  number("router_tau", c.router_tau, as_double);
  if (j.contains("lr_decay")) {
    const std::string v = j["lr_decay"].is_string() ? j["lr_decay"].get<std::string>() : "";
    if (v == "cosine") {
      c.cosine_lr_decay = true;
    } else if (v == "none") {
      c.cosine_lr_decay = false;
    } else {
      raise(ErrorCode::kValidation,
            origin + ": \"lr_decay\" must be \"cosine\" or \"none\"");
    }
  }
  static const char* kKnown[] = {"latent_dim",    "cond_dim",   "hidden",
                                 "lambda",        "epochs",     "batch_size",
                                 "learning_rate", "lr_decay",   "cond_noise",
                                 "weight_decay",  "seed",       "router_k",
                                 "router_tau"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(std::begin(kKnown), std::end(kKnown), [&](const char* k) {
          return it.key() == k;
        }) == std::end(kKnown)) {
      raise(ErrorCode::kValidation,
            origin + ": unknown config field \"" + it.key() + "\"");
    }
  }
  validate_config(c);
  return c;
}

numkit::DenseLayer<float> shaped_layer(std::size_t out, std::size_t in,
                                       numkit::Activation act) {
  numkit::DenseLayer<float> layer;
  layer.weights = Matrix(out, in);
  layer.bias = Matrix(out, 1);
  layer.activation = act;
  return layer;
}

CvaeNet<float> shaped_net(const CvaeConfig& cfg, std::size_t flat_dim) {
  using numkit::Activation;
  const std::size_t d = flat_dim;
  const std::size_t l = cfg.latent_dim;
  const std::size_t c = cfg.cond_dim;
  const std::size_t h = cfg.hidden;
  CvaeNet<float> net;
  net.cond.push_back(shaped_layer(c, 2 * d, Activation::kRelu));
  net.encoder.push_back(shaped_layer(h, d + c, Activation::kRelu));
  net.encoder.push_back(shaped_layer(h, h, Activation::kRelu));
  net.encoder.push_back(shaped_layer(2 * l, h, Activation::kIdentity));
  net.prior.push_back(shaped_layer(h, c, Activation::kRelu));
  net.prior.push_back(shaped_layer(h, h, Activation::kRelu));
  net.prior.push_back(shaped_layer(2 * l, h, Activation::kIdentity));
  net.decoder.push_back(shaped_layer(h, l + c, Activation::kRelu));
  net.decoder.push_back(shaped_layer(h, h, Activation::kRelu));
  net.decoder.push_back(shaped_layer(h, h, Activation::kRelu));
  net.decoder.push_back(shaped_layer(d, h, Activation::kIdentity));
  return net;
}

}  // namespace

void validate_config(const CvaeConfig& config) {
  if (config.latent_dim == 0 || config.cond_dim == 0 || config.hidden == 0) {
    raise(ErrorCode::kValidation, "cvae config: dimensions must be >= 1");
  }
  if (config.lambda_kl < 0.0) {
    raise(ErrorCode::kValidation, "cvae config: lambda must be >= 0");
  }
  if (config.epochs == 0 || config.batch_size == 0) {
    raise(ErrorCode::kValidation,
          "cvae config: epochs and batch_size must be >= 1");
  }
  if (!(config.learning_rate > 0.0)) {
    raise(ErrorCode::kValidation, "cvae config: learning_rate must be > 0");
  }
  if (config.cond_noise < 0.0) {
    raise(ErrorCode::kValidation, "cvae config: cond_noise must be >= 0");
  }
  if (config.weight_decay < 0.0) {
    raise(ErrorCode::kValidation, "cvae config: weight_decay must be >= 0");
  }
  if (config.router_k == 0) {
    raise(ErrorCode::kValidation, "cvae config: router_k must be >= 1");
  }
  if (!(config.router_tau > 0.0)) {
    raise(ErrorCode::kValidation, "cvae config: router_tau must be > 0");
  }
}

std::string cvae_config_to_json(const CvaeConfig& config) {
  return config_to_ordered_json(config).dump(2) + "\n";
}

CvaeConfig cvae_config_from_json(const std::string& text,
                                 const std::string& origin) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) {
    raise(ErrorCode::kParse, origin + ": invalid JSON");
  }
  return config_from_json_object(j, origin);
}

std::vector<std::string> net_tensor_names() {
  std::vector<std::string> names;
  auto stack = [&](const char* prefix, std::size_t layers) {
    for (std::size_t i = 0; i < layers; ++i) {
      names.push_back(std::string(prefix) + "." + std::to_string(i) + ".weight");
      names.push_back(std::string(prefix) + "." + std::to_string(i) + ".bias");
    }
  };
  stack("cond", 1);
  stack("encoder", 3);
  stack("prior", 3);
  stack("decoder", 4);
  return names;
}

std::vector<float> normalize_x(const CvaeModel& model,
                               std::span<const float> x) {
  if (x.size() != model.norm_mean.size()) {
    raise(ErrorCode::kShape, "normalize_x: vector length " +
                                 std::to_string(x.size()) + ", expected " +
                                 std::to_string(model.norm_mean.size()));
  }
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (x[i] - model.norm_mean[i]) / model.norm_std[i];
  }
  return out;
}

std::vector<float> denormalize_x(const CvaeModel& model,
                                 std::span<const float> x_norm) {
  if (x_norm.size() != model.norm_mean.size()) {
    raise(ErrorCode::kShape, "denormalize_x: vector length " +
                                 std::to_string(x_norm.size()) + ", expected " +
                                 std::to_string(model.norm_mean.size()));
  }
  std::vector<float> out(x_norm.size());
  for (std::size_t i = 0; i < x_norm.size(); ++i) {
    out[i] = x_norm[i] * model.norm_std[i] + model.norm_mean[i];
  }
  return out;
}

std::vector<float> normalize_condition(const CvaeModel& model,
                                       std::span<const float> condition) {
  if (condition.size() != model.cond_mean.size()) {
    raise(ErrorCode::kShape, "normalize_condition: vector length " +
                                 std::to_string(condition.size()) +
                                 ", expected " +
                                 std::to_string(model.cond_mean.size()));
  }
  std::vector<float> out(condition.size());
  for (std::size_t i = 0; i < condition.size(); ++i) {
    out[i] = (condition[i] - model.cond_mean[i]) / model.cond_std[i];
  }
  return out;
}

std::vector<float> project_condition(const CvaeModel& model,
                                     std::span<const float> condition) {
  if (condition.size() != model.net.cond.front().weights.cols()) {
    raise(ErrorCode::kShape,
          "project_condition: condition length " +
              std::to_string(condition.size()) + ", expected " +
              std::to_string(model.net.cond.front().weights.cols()));
  }
  return to_vector(numkit::mlp_forward(
      model.net.cond, column(normalize_condition(model, condition))));
}

GaussianDiag encode(const CvaeModel& model, std::span<const float> x_norm,
                    std::span<const float> c_proj) {
  const auto& first = model.net.encoder.front().weights;
  if (x_norm.size() + c_proj.size() != first.cols()) {
    raise(ErrorCode::kShape, "encode: input lengths " +
                                 std::to_string(x_norm.size()) + " + " +
                                 std::to_string(c_proj.size()) +
                                 " do not sum to " + std::to_string(first.cols()));
  }
  Matrix in(first.cols(), 1);
  std::copy(x_norm.begin(), x_norm.end(), in.vec().begin());
  std::copy(c_proj.begin(), c_proj.end(), in.vec().begin() + x_norm.size());
  return split_gaussian(numkit::mlp_forward(model.net.encoder, in),
                        model.config.latent_dim);
}

GaussianDiag prior_map(const CvaeModel& model, std::span<const float> c_proj) {
  if (c_proj.size() != model.net.prior.front().weights.cols()) {
    raise(ErrorCode::kShape,
          "prior_map: input length " + std::to_string(c_proj.size()) +
              ", expected " +
              std::to_string(model.net.prior.front().weights.cols()));
  }
  return split_gaussian(numkit::mlp_forward(model.net.prior, column(c_proj)),
                        model.config.latent_dim);
}

std::vector<float> reparameterize(const GaussianDiag& g,
                                  std::span<const float> noise) {
  if (g.mean.size() != g.logvar.size() || noise.size() != g.mean.size()) {
    raise(ErrorCode::kShape, "reparameterize: mean/logvar/noise lengths differ");
  }
  std::vector<float> z(noise.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = g.mean[i] + std::exp(g.logvar[i] * 0.5f) * noise[i];
  }
  return z;
}

std::vector<float> decode(const CvaeModel& model, std::span<const float> z,
                          std::span<const float> c_proj) {
  const auto& first = model.net.decoder.front().weights;
  if (z.size() + c_proj.size() != first.cols()) {
    raise(ErrorCode::kShape, "decode: input lengths " + std::to_string(z.size()) +
                                 " + " + std::to_string(c_proj.size()) +
                                 " do not sum to " + std::to_string(first.cols()));
  }
  Matrix in(first.cols(), 1);
  std::copy(z.begin(), z.end(), in.vec().begin());
  std::copy(c_proj.begin(), c_proj.end(), in.vec().begin() + z.size());
  return to_vector(numkit::mlp_forward(model.net.decoder, in));
}

ElboTerms elbo_loss(std::span<const float> x_norm,
                    std::span<const float> xhat_norm, const GaussianDiag& q,
                    const GaussianDiag& p, double lambda) {
  if (lambda < 0.0) {
    raise(ErrorCode::kParameter, "elbo_loss: lambda must be >= 0");
  }
  if (x_norm.size() != xhat_norm.size() || x_norm.empty()) {
    raise(ErrorCode::kShape, "elbo_loss: x and xhat lengths differ");
  }
  ElboTerms terms;
  double se = 0.0;
  for (std::size_t i = 0; i < x_norm.size(); ++i) {
    const double d = static_cast<double>(x_norm[i]) - static_cast<double>(xhat_norm[i]);
    se += d * d;
  }
  terms.recon = se / static_cast<double>(x_norm.size());
  terms.kl = numkit::gaussian_kl<float>(q.mean, q.logvar, p.mean, p.logvar);
  terms.total = terms.recon + lambda * terms.kl;
  return terms;
}

std::vector<TrainSample> training_samples(const Repository& repo,
                                          bool include_experts) {
  std::vector<TrainSample> out;
  auto add_task = [&](const std::string& id) {
    const TaskRecord* r = repo.find_record(id);
    if (r == nullptr) return;
    for (const auto& ckpt : r->checkpoints) {
      out.push_back(TrainSample{id, ckpt});
    }
  };
  if (include_experts) {
    for (const auto& e : repo.experts) add_task(e.task_id);
  }
  for (const auto& id : repo.train_ids) add_task(id);
  return out;
}

TrainResult train_cvae(std::span<const TrainSample> dataset,
                       const Repository& repo, const CvaeConfig& config,
                       const CvaeModel* resume_from) {
  validate_config(config);
  if (dataset.empty()) {
    raise(ErrorCode::kValidation, "train_cvae: empty training dataset");
  }
  if (resume_from != nullptr) {
    if (!(resume_from->layout == repo.layout)) {
      raise(ErrorCode::kLayout,
            "train_cvae: resume model layout hash does not match the "
            "repository layout");
    }
    if (resume_from->config.latent_dim != config.latent_dim ||
        resume_from->config.cond_dim != config.cond_dim ||
        resume_from->config.hidden != config.hidden) {
      raise(ErrorCode::kValidation,
            "train_cvae: resume model architecture does not match the config");
    }
  }
  const std::size_t d = repo.layout.flat_dim();
  for (const auto& s : dataset) {
    if (s.x.size() != d) {
      raise(ErrorCode::kShape, "train_cvae: sample for task \"" + s.task_id +
                                   "\" has length " + std::to_string(s.x.size()) +
                                   ", expected " + std::to_string(d));
    }
  }

  // Route each distinct task once; experts never see their own entry.
  std::unordered_map<std::string, std::vector<float>> conditions;
  for (const auto& s : dataset) {
    if (conditions.count(s.task_id)) continue;
    std::span<const float> embedding;
    bool is_expert = false;
    if (const ExpertEntry* e = repo.find_expert(s.task_id)) {
      embedding = e->embedding;
      is_expert = true;
    } else if (const TaskRecord* r = repo.find_record(s.task_id)) {
      embedding = r->embedding;
    } else {
      raise(ErrorCode::kValidation,
            "train_cvae: task \"" + s.task_id +
                "\" has no embedding in the repository; cannot route");
    }
    RouteOptions opts;
    opts.k = config.router_k;
    opts.tau = config.router_tau;
    if (is_expert) opts.exclude_task = s.task_id;
    conditions.emplace(s.task_id, build_prior(embedding, repo, opts).condition);
  }

  // The network models the deviation of each sample from its routed prior
  // mean (the first half of its raw condition); generation adds the prior
  // mean back, so an uninformed decoder degrades to the weighted merge
  // instead of the dataset mean.
  std::vector<std::vector<float>> targets(dataset.size());
  for (std::size_t s = 0; s < dataset.size(); ++s) {
    const auto& cv = conditions.at(dataset[s].task_id);
    auto& t = targets[s];
    t.resize(d);
    for (std::size_t i = 0; i < d; ++i) t[i] = dataset[s].x[i] - cv[i];
  }

  TrainResult result;
  CvaeModel& model = result.model;
  model.config = config;
  model.layout = repo.layout;
  model.repo_hash = repository_hash(repo);

  const auto n = dataset.size();
  if (resume_from != nullptr) {
    // Keep the original calibration so resumed decoders stay comparable.
    model.norm_mean = resume_from->norm_mean;
    model.norm_std = resume_from->norm_std;
  } else {
    // Per-coordinate z-score stats over the residual targets.
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    for (const auto& t : targets) {
      for (std::size_t i = 0; i < d; ++i) mean[i] += t[i];
    }
    for (double& v : mean) v /= static_cast<double>(n);
    for (const auto& t : targets) {
      for (std::size_t i = 0; i < d; ++i) {
        const double diff = t[i] - mean[i];
        var[i] += diff * diff;
      }
    }
    model.norm_mean.resize(d);
    model.norm_std.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
      model.norm_mean[i] = static_cast<float>(mean[i]);
      model.norm_std[i] = static_cast<float>(
          std::max(std::sqrt(var[i] / static_cast<double>(n)), kNormStdFloor));
    }
  }

  if (resume_from != nullptr) {
    model.cond_mean = resume_from->cond_mean;
    model.cond_std = resume_from->cond_std;
  } else {
    // Z-score stats for the condition vector, sample-weighted like the x
    // stats; the mean and log-variance halves differ in scale by orders of
    // magnitude, so the raw condition never reaches the network.
    std::vector<double> cmean(2 * d, 0.0), cvar(2 * d, 0.0);
    for (const auto& s : dataset) {
      const auto& cv = conditions.at(s.task_id);
      for (std::size_t i = 0; i < 2 * d; ++i) cmean[i] += cv[i];
    }
    for (double& v : cmean) v /= static_cast<double>(n);
    for (const auto& s : dataset) {
      const auto& cv = conditions.at(s.task_id);
      for (std::size_t i = 0; i < 2 * d; ++i) {
        const double diff = cv[i] - cmean[i];
        cvar[i] += diff * diff;
      }
    }
    model.cond_mean.resize(2 * d);
    model.cond_std.resize(2 * d);
    for (std::size_t i = 0; i < 2 * d; ++i) {
      model.cond_mean[i] = static_cast<float>(cmean[i]);
      model.cond_std[i] = static_cast<float>(
          std::max(std::sqrt(cvar[i] / static_cast<double>(n)), kNormStdFloor));
    }
  }
  for (auto& [task_id, cv] : conditions) {
    cv = normalize_condition(model, cv);
  }

  std::vector<std::vector<float>> x_norm(n);
  for (std::size_t s = 0; s < n; ++s) {
    x_norm[s] = normalize_x(model, targets[s]);
  }

  if (resume_from != nullptr) {
    model.net = resume_from->net;
  } else {
    Rng init_rng = Rng::substream(config.seed, "cvae.init");
    model.net = init_cvae_net<float>(config, d, init_rng);
  }
  auto params = net_parameters(model.net);
  std::vector<numkit::AdamState<float>> opt;
  opt.reserve(params.size());
  for (auto* p : params) {
    opt.emplace_back(p->size(), config.learning_rate);
  }

  Rng shuffle_rng = Rng::substream(config.seed, "cvae.shuffle");
  Rng noise_rng = Rng::substream(config.seed, "cvae.noise");
  Rng cond_rng = Rng::substream(config.seed, "cvae.cond_noise");
  const auto cnoise = static_cast<float>(config.cond_noise);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  const std::size_t latent = config.latent_dim;

  // Full-dataset views with clean conditions and zero latent noise; each
  // epoch ends with a deterministic evaluation pass over these, so the
  // reported trace tracks the model rather than the augmentation draws.
  Matrix x_all(d, n), c_all(2 * d, n), eps_zero(latent, n);
  for (std::size_t s = 0; s < n; ++s) {
    const auto& cv = conditions.at(dataset[s].task_id);
    for (std::size_t i = 0; i < d; ++i) x_all(i, s) = x_norm[s][i];
    for (std::size_t i = 0; i < 2 * d; ++i) c_all(i, s) = cv[i];
  }

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at_epoch(config, epoch);
    for (auto& state : opt) state.lr = lr;
    shuffle_rng.shuffle(order);

    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t b = std::min(config.batch_size, n - start);
      Matrix xb(d, b);
      Matrix cb(2 * d, b);
      Matrix eps(latent, b);
      for (std::size_t j = 0; j < b; ++j) {
        const std::size_t idx = order[start + j];
        const auto& xv = x_norm[idx];
        const auto& cv = conditions.at(dataset[idx].task_id);
        for (std::size_t i = 0; i < d; ++i) xb(i, j) = xv[i];
        for (std::size_t i = 0; i < 2 * d; ++i) cb(i, j) = cv[i];
        if (cnoise > 0.0f) {
          // Jitter blurs the condition clusters so the decoder learns a map
          // that holds up between them, not a lookup table keyed on them.
          for (std::size_t i = 0; i < 2 * d; ++i) {
            cb(i, j) += cnoise * static_cast<float>(cond_rng.normal());
          }
        }
        for (std::size_t i = 0; i < latent; ++i) {
          eps(i, j) = static_cast<float>(noise_rng.normal());
        }
      }

      numkit::Tape<float> tape;
      ElboGraph<float> graph = build_elbo_graph(
          tape, model.net, xb, cb, eps, static_cast<float>(config.lambda_kl));
      const double total = tape.value(graph.total)(0, 0);
      if (!std::isfinite(total)) {
        raise(ErrorCode::kNonFinite,
              "train_cvae: loss diverged at epoch " + std::to_string(epoch));
      }
      auto grads = tape.backward(graph.total);
      const auto shrink = static_cast<float>(1.0 - lr * config.weight_decay);
      for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& grad = grads.at(graph.param_leaves[pi]);
        adam_step<float>(params[pi]->vec(), grad.vec(), opt[pi]);
        if (config.weight_decay > 0.0) {
          for (float& w : params[pi]->vec()) w *= shrink;
        }
      }

    }

    numkit::Tape<float> eval_tape;
    ElboGraph<float> eval_graph =
        build_elbo_graph(eval_tape, model.net, x_all, c_all, eps_zero,
                         static_cast<float>(config.lambda_kl));
    EpochStats stats;
    stats.total = eval_tape.value(eval_graph.total)(0, 0);
    stats.recon = static_cast<double>(eval_graph.recon_value);
    stats.kl = static_cast<double>(eval_graph.kl_value);
    result.trace.push_back(stats);
  }
  return result;
}

std::vector<AdapterSet> generate(const CvaeModel& model,
                                 const SemanticPrior& prior, std::size_t n,
                                 GenerateMode mode, std::uint64_t seed) {
  const std::size_t d = model.layout.flat_dim();
  if (prior.condition.size() != 2 * d) {
    raise(ErrorCode::kLayout,
          "generate: prior condition length " +
              std::to_string(prior.condition.size()) +
              " does not match the model layout (expected " +
              std::to_string(2 * d) + ")");
  }
  if (n == 0) {
    raise(ErrorCode::kParameter, "generate: n must be >= 1");
  }
  if (mode == GenerateMode::kMean && n != 1) {
    raise(ErrorCode::kParameter,
          "generate: mean mode is deterministic; n must be 1");
  }

  const std::vector<float> c_proj = project_condition(model, prior.condition);
  const GaussianDiag p = prior_map(model, c_proj);

  std::vector<AdapterSet> out;
  Rng noise_rng = Rng::substream(seed, "generate.noise");
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> z;
    if (mode == GenerateMode::kMean) {
      z = p.mean;
    } else {
      std::vector<float> noise(model.config.latent_dim);
      for (auto& v : noise) v = static_cast<float>(noise_rng.normal());
      z = reparameterize(p, noise);
    }
    // The decoder emits a normalized deviation from the routed prior mean;
    // recombine before unflattening.
    std::vector<float> raw = denormalize_x(model, decode(model, z, c_proj));
    for (std::size_t j = 0; j < d; ++j) raw[j] += prior.mean[j];
    out.push_back(unflatten(raw, model.layout));
  }
  return out;
}

void save_model(const CvaeModel& model, const std::filesystem::path& path) {
  nlohmann::ordered_json header;
  header["config"] = config_to_ordered_json(model.config);
  header["layout"] = nlohmann::ordered_json::parse(layout_to_json(model.layout));
  header["layout_hash"] = to_hex(model.layout.hash());
  header["repository_hash"] = to_hex(model.repo_hash);
  header["flat_dim"] = model.layout.flat_dim();
  const std::string header_text = header.dump();

  std::vector<NamedTensor> tensors;
  auto names = net_tensor_names();
  auto params = net_parameters(model.net);
  if (names.size() != params.size()) {
    raise(ErrorCode::kContract, "save_model: tensor name/parameter count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    NamedTensor t;
    t.name = names[i];
    t.dims = {params[i]->rows(), params[i]->cols()};
    t.values.assign(params[i]->vec().begin(), params[i]->vec().end());
    tensors.push_back(std::move(t));
  }
  tensors.push_back(NamedTensor{
      "norm.mean", {model.norm_mean.size()}, model.norm_mean});
  tensors.push_back(NamedTensor{
      "norm.std", {model.norm_std.size()}, model.norm_std});
  tensors.push_back(NamedTensor{
      "cond.mean", {model.cond_mean.size()}, model.cond_mean});
  tensors.push_back(NamedTensor{
      "cond.std", {model.cond_std.size()}, model.cond_std});

  std::string bytes;
  bytes.append(kModelMagic, sizeof(kModelMagic));
  append_le32(bytes, kModelVersion);
  append_le64(bytes, header_text.size());
  bytes += header_text;
  append_tensors(tensors, bytes);

  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) raise(ErrorCode::kIo, "short write to " + path.string());
}

CvaeModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::kIo, "cannot open model file " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  const std::string origin = path.string();

  if (bytes.size() < 4 || bytes.compare(0, 4, kModelMagic, 4) != 0) {
    raise(ErrorCode::kBadMagic, origin + ": not a model file (bad magic)");
  }
  const auto version =
      static_cast<std::uint32_t>(read_le(bytes, 4, 4, origin, "version"));
  if (version != kModelVersion) {
    raise(ErrorCode::kVersion, origin + ": unsupported model version " +
                                   std::to_string(version));
  }
  const std::uint64_t header_len = read_le(bytes, 8, 8, origin, "header length");
  if (16 + header_len > bytes.size()) {
    raise(ErrorCode::kTruncated, origin + ": truncated header");
  }
  nlohmann::json header =
      nlohmann::json::parse(bytes.substr(16, header_len), nullptr, false);
  if (header.is_discarded() || !header.is_object()) {
    raise(ErrorCode::kParse, origin + ": invalid header JSON");
  }
  for (const char* key : {"config", "layout", "layout_hash", "repository_hash"}) {
    if (!header.contains(key)) {
      raise(ErrorCode::kValidation,
            origin + ": header missing field \"" + key + "\"");
    }
  }

  CvaeModel model;
  model.config = config_from_json_object(header["config"], origin);
  model.layout = layout_from_json(header["layout"].dump(), origin);
  const std::uint64_t stored_layout_hash =
      from_hex(header["layout_hash"].get<std::string>(), origin);
  if (stored_layout_hash != model.layout.hash()) {
    raise(ErrorCode::kValidation,
          origin + ": layout hash does not match the stored layout");
  }
  model.repo_hash = from_hex(header["repository_hash"].get<std::string>(), origin);

  const std::size_t d = model.layout.flat_dim();
  auto tensors = parse_tensors(
      std::string_view(bytes).substr(16 + header_len), origin);
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;

  model.net = shaped_net(model.config, d);
  auto params = net_parameters(model.net);
  auto names = net_tensor_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = by_name.find(names[i]);
    if (it == by_name.end()) {
      raise(ErrorCode::kValidation,
            origin + ": missing weight tensor \"" + names[i] + "\"");
    }
    const NamedTensor& t = *it->second;
    if (t.dims.size() != 2 || t.dims[0] != params[i]->rows() ||
        t.dims[1] != params[i]->cols()) {
      raise(ErrorCode::kShape, origin + ": tensor \"" + names[i] +
                                   "\" has unexpected dims");
    }
    std::copy(t.values.begin(), t.values.end(), params[i]->vec().begin());
  }

  auto stat = [&](const char* name, std::size_t len) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      raise(ErrorCode::kValidation,
            origin + ": missing tensor \"" + std::string(name) + "\"");
    }
    const NamedTensor& t = *it->second;
    if (t.dims.size() != 1 || t.dims[0] != len) {
      raise(ErrorCode::kShape, origin + ": tensor \"" + std::string(name) +
                                   "\" must have dims [" + std::to_string(len) +
                                   "]");
    }
    return t.values;
  };
  model.norm_mean = stat("norm.mean", d);
  model.norm_std = stat("norm.std", d);
  model.cond_mean = stat("cond.mean", 2 * d);
  model.cond_std = stat("cond.std", 2 * d);
  for (const auto* stds : {&model.norm_std, &model.cond_std}) {
    for (float v : *stds) {
      if (v < static_cast<float>(kNormStdFloor)) {
        raise(ErrorCode::kValidation,
              origin + ": normalization std below the permitted floor");
      }
    }
  }
  return model;
}

}  // namespace sglora
