#include "pasta/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <fmt/format.h>

namespace pasta {

namespace fs = std::filesystem;

void AdamWConfig::validate() const {
  if (!(lr > 0) || !(eps > 0) || weight_decay < 0 || beta1 < 0 || beta1 >= 1 || beta2 < 0 ||
      beta2 >= 1) {
    throw ConfigError(fmt::format("invalid AdamW settings lr={} b1={} b2={} eps={} wd={}", lr,
                                  beta1, beta2, eps, weight_decay));
  }
}

AdamW::AdamW(Eigen::Index size, AdamWConfig config)
    : config_(config), m_(Vec<double>::Zero(size)), v_(Vec<double>::Zero(size)) {
  config_.validate();
}

void AdamW::step(Vec<float>& x, const Vec<float>& grad, double lr_scale) {
  if (grad.size() != m_.size() || x.size() != m_.size()) {
    throw DimensionError("AdamW: gradient size does not match the optimizer state");
  }
  ++t_;
  const double lr = config_.lr * lr_scale;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double g = grad(k);
    m_(k) = config_.beta1 * m_(k) + (1.0 - config_.beta1) * g;
    v_(k) = config_.beta2 * v_(k) + (1.0 - config_.beta2) * g * g;
    const double update = (m_(k) / c1) / (std::sqrt(v_(k) / c2) + config_.eps);
    x(k) = static_cast<float>(x(k) - lr * (update + config_.weight_decay * x(k)));
  }
}

void AttackConfig::validate(int num_classes) const {
  if (epochs < 1 || model_epochs < 1 || trigger_epochs < 0) {
    throw ConfigError(fmt::format("epoch counts must satisfy T >= 1, T_m >= 1, T_t >= 0 (got {}, {}, {})",
                                  epochs, model_epochs, trigger_epochs));
  }
  if (!(poison_ratio > 0.0 && poison_ratio <= 1.0)) {
    throw ConfigError(fmt::format("poison ratio {} outside (0, 1]", poison_ratio));
  }
  if (!(trigger_init >= 0.0 && trigger_init <= 0.5)) {
    throw ConfigError(fmt::format("trigger init fraction {} outside [0, 0.5]", trigger_init));
  }
  if (!(trigger_fraction > 0.0 && trigger_fraction <= 1.0)) {
    throw ConfigError(fmt::format("trigger fraction {} outside (0, 1]", trigger_fraction));
  }
  if (target_label < 0 || target_label >= num_classes) {
    throw ConfigError(fmt::format("target label {} outside [0, {})", target_label, num_classes));
  }
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (!(trigger_lr >= 0)) throw ConfigError("trigger learning rate must be non-negative");
  model_opt.validate();
  trigger_weights.validate();
  model_weights.validate();
}

PoisonSplit poison_partition(int n, double poison_ratio, double trigger_fraction,
                             std::uint64_t seed) {
  if (n < 1) throw ConfigError("cannot partition an empty dataset");
  if (!(poison_ratio > 0.0 && poison_ratio <= 1.0)) {
    throw ConfigError(fmt::format("poison ratio {} outside (0, 1]", poison_ratio));
  }
  if (!(trigger_fraction > 0.0 && trigger_fraction <= 1.0)) {
    throw ConfigError(fmt::format("trigger fraction {} outside (0, 1]", trigger_fraction));
  }
  auto count = [n](double f) {
    return static_cast<int>(std::clamp<long long>(std::llround(f * n), 1, n));
  };
  PoisonSplit split;
  split.poison = subset_indices(n, count(poison_ratio), seed, "poison-subset");
  split.trigger = subset_indices(n, count(trigger_fraction), seed, "trigger-subset");
  std::vector<char> member(n, 0);
  for (int i : split.poison) member[i] = 1;
  for (int i = 0; i < n; ++i) {
    if (!member[i]) split.clean.push_back(i);
  }
  return split;
}

const char* phase_name(Phase p) { return p == Phase::kTrigger ? "trigger" : "model"; }

void write_loss_log(const std::vector<LogRow>& log, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IngestionError(fmt::format("{}: cannot write loss log", path.string()));
  out << "epoch,phase,L_c,L_bd,L_vis,L_attn,aggregate,seed\n";
  for (const auto& r : log) {
    out << fmt::format("{},{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{}\n", r.epoch,
                       phase_name(r.phase), r.report.clean, r.report.backdoor, r.report.visual,
                       r.report.attention, r.report.aggregate, r.seed);
  }
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::uint64_t digest(const Vec<float>& v) {
  return checksum(v.data(), static_cast<std::size_t>(v.size()) * sizeof(float));
}

void add_report(LossReport<double>& acc, const LossReport<float>& r) {
  acc.clean += r.clean;
  acc.backdoor += r.backdoor;
  acc.visual += r.visual;
  acc.attention += r.attention;
  acc.aggregate += r.aggregate;
}

LossReport<double> mean_report(LossReport<double> acc, int steps) {
  if (steps == 0) return acc;
  const double s = steps;
  acc.clean /= s;
  acc.backdoor /= s;
  acc.visual /= s;
  acc.attention /= s;
  acc.aggregate /= s;
  return acc;
}

void check_finite(const LossReport<float>& r, const std::string& where, const fs::path& last) {
  if (!std::isfinite(r.aggregate) || !std::isfinite(r.clean) || !std::isfinite(r.backdoor) ||
      !std::isfinite(r.visual) || !std::isfinite(r.attention)) {
    throw DivergenceError(fmt::format("non-finite loss during {}; last checkpoint: {}", where,
                                      last.empty() ? "none" : last.string()));
  }
}

std::vector<std::vector<int>> batches(std::vector<int> ids, int size, Rng& rng) {
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<std::vector<int>> out;
  for (std::size_t k = 0; k < ids.size(); k += static_cast<std::size_t>(size)) {
    out.emplace_back(ids.begin() + static_cast<long>(k),
                     ids.begin() + static_cast<long>(std::min(ids.size(), k + size)));
  }
  return out;
}

}  // namespace

std::vector<int> predict(const ViTParams<float>& params, const Mat<float>& images, int chunk) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(images.rows()));
  for (Eigen::Index r = 0; r < images.rows(); r += chunk) {
    const Eigen::Index n = std::min<Eigen::Index>(chunk, images.rows() - r);
    const auto fwd = forward(params, Mat<float>(images.middleRows(r, n)), {.keep_attention = false});
    const auto labels = argmax_rows(fwd.logits);
    out.insert(out.end(), labels.begin(), labels.end());
  }
  return out;
}

TrainResult run_attack(const ViTParams<float>& params0, const Dataset& data,
                       const AttackConfig& attack, const AttackPlan& plan,
                       const Trigger<float>& trigger0, const TrainOptions& options) {
  const ModelConfig& cfg = params0.config;
  attack.validate(cfg.num_classes);
  if (data.size() == 0) throw ConfigError("attack needs training data");
  if (data.images.cols() != cfg.image_dim()) {
    throw DimensionError("training images do not match the model input size");
  }
  if (!plan.policy.valid()) throw ConfigError("attack plan has no location policy");
  if (!within_bounds(trigger0)) throw ConfigError("initial trigger violates its bounds");

  TrainResult res;
  res.name = plan.name;
  res.params = params0;
  res.trigger = trigger0;
  res.split = poison_partition(data.size(), attack.poison_ratio, attack.trigger_fraction,
                               derive_seed(attack.seed, "partition"));
  std::vector<char> poisoned(data.size(), 0);
  for (int i : res.split.poison) poisoned[i] = 1;

  std::vector<int> everything(data.size());
  std::iota(everything.begin(), everything.end(), 0);
  AdamW opt(params0.data.size(), attack.model_opt);
  fs::path last_checkpoint;
  if (!options.checkpoint_dir.empty()) fs::create_directories(options.checkpoint_dir);

  auto record = [&](LogRow row) {
    if (options.on_row) options.on_row(row);
    res.log.push_back(std::move(row));
  };

  for (int epoch = 1; epoch <= attack.epochs; ++epoch) {
    // lower level: trigger only
    PhaseDigest td{epoch, Phase::kTrigger, digest(res.params.data), 0, digest(res.trigger.values),
                   0};
    auto start = Clock::now();
    for (int pass = 1; pass <= attack.trigger_epochs; ++pass) {
      const std::uint64_t seed = derive_seed(attack.seed, "trigger-phase", epoch * 1000 + pass);
      Rng rng(seed);
      LossReport<double> acc;
      int steps = 0;
      for (const auto& ids : batches(res.split.trigger, attack.batch_size, rng)) {
        const auto batch = data.gather(ids);
        auto out = trigger_objective(res.params, batch, res.trigger, attack.trigger_weights,
                                     plan.policy, attack.target_label, attack.attention, rng);
        check_finite(out.report, fmt::format("trigger phase, epoch {}", epoch), last_checkpoint);
        for (const auto& p : out.locations) ++res.location_counts[p];
        res.trigger.values -= static_cast<float>(attack.trigger_lr) * out.grad_trigger;
        res.trigger = clamp_trigger(res.trigger);
        if (!within_bounds(res.trigger)) throw std::logic_error("trigger left its bounds");
        add_report(acc, out.report);
        ++steps;
      }
      record({epoch, Phase::kTrigger, pass, mean_report(acc, steps), seed});
    }
    res.trigger_seconds += seconds_since(start);
    td.params_after = digest(res.params.data);
    td.trigger_after = digest(res.trigger.values);
    res.digests.push_back(td);

    // upper level: parameters only
    PhaseDigest md{epoch, Phase::kModel, digest(res.params.data), 0, digest(res.trigger.values), 0};
    start = Clock::now();
    for (int pass = 1; pass <= attack.model_epochs; ++pass) {
      const std::uint64_t seed = derive_seed(attack.seed, "model-phase", epoch * 1000 + pass);
      Rng rng(seed);
      LossReport<double> acc;
      int steps = 0;
      for (const auto& ids : batches(everything, attack.batch_size, rng)) {
        std::vector<int> clean_ids, poison_ids;
        for (int i : ids) (poisoned[i] ? poison_ids : clean_ids).push_back(i);
        const auto clean = data.gather(clean_ids);
        const auto poison = data.gather(poison_ids);
        ObjectiveTerms terms;
        terms.clean = 1;
        terms.backdoor = 1;
        terms.attention = attack.model_weights.alpha2;
        terms.grad_params = true;
        auto out = evaluate_objective(res.params, &clean, &poison, res.trigger, plan.policy,
                                      attack.target_label, terms, attack.attention, rng,
                                      plan.insertion);
        check_finite(out.report, fmt::format("model phase, epoch {}", epoch), last_checkpoint);
        for (const auto& p : out.locations) ++res.location_counts[p];
        opt.step(res.params.data, out.grad_params);
        if (!res.params.data.allFinite()) {
          throw DivergenceError(fmt::format("non-finite parameters after epoch {} step; last checkpoint: {}",
                                            epoch, last_checkpoint.empty() ? "none" : last_checkpoint.string()));
        }
        add_report(acc, out.report);
        ++steps;
      }
      record({epoch, Phase::kModel, pass, mean_report(acc, steps), seed});
    }
    res.model_seconds += seconds_since(start);
    md.params_after = digest(res.params.data);
    md.trigger_after = digest(res.trigger.values);
    res.digests.push_back(md);

    if (!options.checkpoint_dir.empty()) {
      last_checkpoint = options.checkpoint_dir / fmt::format("{}_epoch{:02d}.ckpt", plan.name, epoch);
      save_checkpoint(res.params, last_checkpoint);
      save_trigger({res.trigger, attack.seed, plan.policy.mis_config()},
                   options.checkpoint_dir / fmt::format("{}_epoch{:02d}.trig", plan.name, epoch));
    }
  }
  return res;
}

Trigger<float> initial_trigger(const ModelConfig& model, const Dataset& data, std::uint64_t seed,
                               double range_fraction) {
  const auto [low, upp] = data.norm.bounds();
  return init_trigger(geometry_of(model), low, upp, derive_seed(seed, "trigger-init"), range_fraction);
}

TrainResult run_pasta(const ViTParams<float>& params0, const Dataset& data,
                      const AttackConfig& attack, const TrainOptions& options) {
  AttackPlan plan;
  plan.name = "pasta";
  plan.policy = LocationPolicy::mis(default_mis(params0.config.grid_size()));
  return run_attack(params0, data, attack, plan, initial_trigger(params0.config, data, attack.seed, attack.trigger_init),
                    options);
}

TrainResult run_single_location_baseline(const ViTParams<float>& params0, const Dataset& data,
                                         const AttackConfig& attack, PatchIndex location,
                                         const TrainOptions& options) {
  AttackPlan plan;
  plan.name = "single";
  plan.policy = LocationPolicy::fixed(location);
  return run_attack(params0, data, attack, plan, initial_trigger(params0.config, data, attack.seed, attack.trigger_init),
                    options);
}

Vec<float> badnets_pattern(const ModelConfig& model, const Normalization& norm) {
  norm.validate(model.channels);
  const int p = model.patch_size;
  Vec<float> out(model.patch_dim());
  for (int ch = 0; ch < model.channels; ++ch)
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < p; ++x) {
        const float pixel = (x + y) % 2 == 0 ? 1.0f : 0.0f;
        out((ch * p + y) * p + x) = (pixel - norm.mean[ch]) / norm.std[ch];
      }
  return out;
}

TrainResult run_badnets_rep_baseline(const ViTParams<float>& params0, const Dataset& data,
                                     const AttackConfig& attack, const Vec<float>& pattern,
                                     PatchIndex location, const TrainOptions& options) {
  if (pattern.size() != params0.config.patch_dim()) {
    throw DimensionError("replacement pattern does not match the patch size");
  }
  AttackConfig a = attack;
  a.trigger_epochs = 0;
  a.model_weights.alpha2 = 0.0;
  AttackPlan plan;
  plan.name = "badnets";
  plan.policy = LocationPolicy::fixed(location);
  plan.insertion = Insertion::kReplace;
  Trigger<float> t;
  t.channels = params0.config.channels;
  t.patch_size = params0.config.patch_size;
  t.values = pattern;
  t.low = pattern.minCoeff();
  t.upp = pattern.maxCoeff();
  return run_attack(params0, data, a, plan, t, options);
}

TrainResult run_no_attn_ablation(const ViTParams<float>& params0, const Dataset& data,
                                 const AttackConfig& attack, const TrainOptions& options) {
  AttackConfig a = attack;
  a.trigger_weights.alpha2 = 0.0;
  a.model_weights.alpha2 = 0.0;
  AttackPlan plan;
  plan.name = "no_attn";
  plan.policy = LocationPolicy::mis(default_mis(params0.config.grid_size()));
  return run_attack(params0, data, a, plan, initial_trigger(params0.config, data, attack.seed, attack.trigger_init),
                    options);
}

namespace {

// Random horizontal flip and shift of up to `shift` pixels, filling with black.
void augment(Mat<float>& images, const Dataset& data, int shift, Rng& rng) {
  const int s = data.image_size;
  const int c = data.channels;
  const auto black = data.norm.floor();
  std::uniform_int_distribution<int> offset(-shift, shift);
  std::bernoulli_distribution flip(0.5);
  Vec<float> src;
  for (Eigen::Index r = 0; r < images.rows(); ++r) {
    const int dy = offset(rng), dx = offset(rng);
    const bool f = flip(rng);
    src = images.row(r).transpose();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const int sy = y + dy;
          int sx = x + dx;
          if (f) sx = s - 1 - sx;
          const bool inside = sy >= 0 && sy < s && sx >= 0 && sx < s;
          images(r, (ch * s + y) * s + x) = inside ? src((ch * s + sy) * s + sx) : black[ch];
        }
  }
}

}  // namespace

PretrainResult pretrain_clean(const ModelConfig& model, const Dataset& train, const Dataset* val,
                              const PretrainConfig& config, std::uint64_t seed,
                              const TrainOptions& options) {
  model.validate();
  if (train.images.cols() != model.image_dim()) {
    throw DimensionError("training images do not match the model input size");
  }
  if (config.epochs < 0 || config.batch_size < 1) throw ConfigError("invalid pretraining schedule");
  PretrainResult res;
  res.params = init_model(model, derive_seed(seed, "model-init"));
  if (config.epochs == 0) return res;

  AdamW opt(res.params.data.size(), config.opt);
  std::vector<int> ids(train.size());
  std::iota(ids.begin(), ids.end(), 0);
  const long per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const long total = per_epoch * config.epochs;
  const long warmup = std::min(total, per_epoch * config.warmup_epochs);
  long step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng(derive_seed(seed, "pretrain", epoch));
    double loss_sum = 0;
    int steps = 0;
    for (const auto& b : batches(ids, config.batch_size, rng)) {
      auto batch = train.gather(b);
      if (config.augment) augment(batch.images, train, 4, rng);
      auto fwd = forward(res.params, batch.images, {.keep_attention = true, .keep_cache = true});
      Mat<float> dlogits;
      const float loss = cross_entropy(fwd.logits, batch.labels, &dlogits);
      if (!std::isfinite(loss)) {
        throw DivergenceError(fmt::format("non-finite pretraining loss at epoch {}", epoch));
      }
      const auto g = backward(res.params, fwd, dlogits);
      double scale;
      if (step < warmup) {
        scale = static_cast<double>(step + 1) / static_cast<double>(warmup);
      } else {
        const double progress =
            static_cast<double>(step - warmup) / static_cast<double>(std::max(1L, total - warmup));
        scale = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      }
      opt.step(res.params.data, g.params, scale);
      ++step;
      loss_sum += loss;
      ++steps;
    }
    res.train_loss.push_back(loss_sum / steps);
    if (val != nullptr && val->size() > 0) {
      const auto pred = predict(res.params, val->images);
      long hits = 0;
      for (std::size_t k = 0; k < pred.size(); ++k) hits += pred[k] == val->labels[k];
      res.val_accuracy.push_back(static_cast<double>(hits) / static_cast<double>(pred.size()));
    }
    if (options.on_row) {
      LogRow row;
      row.epoch = epoch;
      row.phase = Phase::kModel;
      row.pass = 1;
      row.report.clean = res.train_loss.back();
      row.report.aggregate = res.train_loss.back();
      row.seed = seed;
      options.on_row(row);
    }
  }
  if (!options.checkpoint_dir.empty()) {
    fs::create_directories(options.checkpoint_dir);
    save_checkpoint(res.params, options.checkpoint_dir / "clean.ckpt");
  }
  return res;
}

}  // namespace pasta
