// Acceptance checks. Prints one PASS/FAIL line per criterion, preceded by the
// measured values of each clause.
//
//   acceptance [--suite fast|proxy|all] [--work DIR] [--expect-fail N]...
//
// fast runs criteria 1-3, proxy runs 4-7. The proxy suite uses the desk preset
// on real CIFAR-10 when PASTA_CIFAR10_ROOT is set and the synthetic proxy
// preset otherwise.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <boost/math/distributions/chi_squared.hpp>
#include <fmt/format.h>

#include "pasta/harness.hpp"
#include "support.hpp"

using namespace pasta;
using pasta::testing::central_difference;
using pasta::testing::random_images;
using pasta::testing::random_params;
using pasta::testing::relative_error;
using pasta::testing::spread_indices;
using pasta::testing::tiny_config;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

class Criterion {
 public:
  Criterion(int id, std::string title) : id_(id), title_(std::move(title)), start_(Clock::now()) {}

  void clause(const std::string& what, bool ok) {
    fmt::print("  [{}] {}\n", ok ? "ok" : "x", what);
    ok_ = ok_ && ok;
  }
  // Finishes the criterion; returns false on FAIL.
  bool report(double budget_seconds) {
    const double s = seconds_since(start_);
    if (budget_seconds > 0) clause(fmt::format("wall clock {:.1f}s <= {:.0f}s", s, budget_seconds), s <= budget_seconds);
    fmt::print("{} criterion {}: {}\n", ok_ ? "PASS" : "FAIL", id_, title_);
    std::fflush(stdout);
    return ok_;
  }

 private:
  int id_;
  std::string title_;
  Clock::time_point start_;
  bool ok_ = true;
};

// ---------------------------------------------------------------- criterion 1

ViTParams<float> small_float_model(const ModelConfig& c, std::uint64_t seed) {
  return random_params(c, seed).cast<float>();
}

ImageBatch<float> small_batch(const ModelConfig& c, int n, std::uint64_t seed) {
  ImageBatch<float> b;
  b.images = random_images(c, n, seed).cast<float>();
  for (int k = 0; k < n; ++k) b.labels.push_back(k % c.num_classes);
  return b;
}

bool exactness_suite() {
  Criterion cr(1, "exactness suite");

  bool masks_ok = true;
  for (const ImageGeometry geom : {ImageGeometry{3, 32, 4}, ImageGeometry{3, 8, 2}, ImageGeometry{1, 12, 3}}) {
    const int g = geom.grid();
    Eigen::ArrayXXi cover = Eigen::ArrayXXi::Zero(geom.image_size, geom.image_size);
    for (int i = 0; i < g * g; ++i) {
      const PatchMask m = make_mask(PatchIndex::from_flat(i, g), geom);
      masks_ok = masks_ok && m.cast<int>().sum() == geom.patch_size * geom.patch_size;
      cover += m.cast<int>();
    }
    masks_ok = masks_ok && (cover == 1).all();
  }
  cr.clause("patch masks partition the image (sum of masks = 1, each of area p^2)", masks_ok);

  const MISConfig mis = default_mis(8);
  Rng rng(derive_seed(2024, "acceptance-mis"));
  std::map<PatchIndex, int> counts;
  const int draws = 100000;
  for (int k = 0; k < draws; ++k) ++counts[mis_sample(mis, rng)];
  double chi2 = 0;
  for (const auto& p : mis.center) chi2 += std::pow(counts[p] - draws / 6.0, 2) / (draws / 6.0);
  for (const auto& p : mis.corner) chi2 += std::pow(counts[p] - draws / 24.0, 2) / (draws / 24.0);
  const int cells = static_cast<int>(mis.center.size() + mis.corner.size());
  const double crit = boost::math::quantile(boost::math::chi_squared(cells - 1), 0.99);
  cr.clause(fmt::format("MIS 1/6 and 1/24 law: chi2 {:.2f} < {:.2f} (df {}, alpha 0.01), {} cells drawn",
                        chi2, crit, cells - 1, counts.size()),
            chi2 < crit && static_cast<int>(counts.size()) == cells);

  const ModelConfig c = tiny_config();
  const auto model = small_float_model(c, 3);
  const auto data = small_batch(c, 12, 4);
  Trigger<float> t = init_trigger(geometry_of(c), -2.f, 2.f, 5, 0.4);
  const TREHeatmap h = tre_heatmap(model, t, data, 1);
  double mean = 0, worst = 0;
  for (int i = 0; i < c.num_patches(); ++i) {
    const PatchIndex p = PatchIndex::from_flat(i, c.grid_size());
    const double a = asr(model, t, data, PayloadSpec::fixed({p}), 1);
    worst = std::max(worst, std::abs(a - h.values(p.row, p.col)));
    mean += a / c.num_patches();
  }
  cr.clause(fmt::format("TRE equals the mean per-location ASR: |diff| {:.2e}, cells {:.2e}",
                        std::abs(mean - h.tre), worst),
            std::abs(mean - h.tre) < 1e-12 && worst == 0);

  ForwardOptions fo;
  fo.keep_attention = true;
  const auto fwd = forward(model, data.images, fo);
  double row_err = 0, min_p = 1;
  for (const auto& stack : fwd.attention) {
    for (const auto& layer : stack.layers) {
      row_err = std::max(row_err, static_cast<double>((layer.rowwise().sum().array() - 1.f).abs().maxCoeff()));
      min_p = std::min(min_p, static_cast<double>(layer.minCoeff()));
    }
  }
  cr.clause(fmt::format("attention rows are stochastic: max |row sum - 1| {:.2e}, min entry {:.2e}", row_err, min_p),
            row_err <= 1e-6 && min_p >= 0);

  Trigger<float> wild = t;
  std::mt19937_64 r2(9);
  std::normal_distribution<float> n(0.f, 3.f);
  for (Eigen::Index k = 0; k < wild.values.size(); ++k) wild.values(k) = n(r2);
  const auto once = clamp_trigger(wild), twice = clamp_trigger(once);
  const auto inside = clamp_trigger(t);
  cr.clause("clamp projection: idempotent, lands in bounds, fixes in-bound triggers",
            once.values == twice.values && within_bounds(once) && inside.values == t.values &&
                !within_bounds(wild));

  Vec<double> x = (random_images(c, 1, 11).row(0).transpose().array() * 0.2 + 0.5).cwiseMax(0.0).cwiseMin(1.0);
  const double s = ssim(x, x, 3, 8, 1.0), ps = psnr(x, x, 1.0);
  cr.clause(fmt::format("SSIM(x, x) = {}, PSNR at l2 = 0 is {}", s, ps), s == 1.0 && std::isinf(ps) && ps > 0);
  return cr.report(60);
}

// ---------------------------------------------------------------- criterion 2

Trigger<double> dense_trigger(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.8);
  Trigger<double> t{c.channels, c.patch_size, Vec<double>(c.patch_dim()), -10.0, 10.0};
  for (Eigen::Index k = 0; k < t.values.size(); ++k) t.values(k) = normal(rng);
  return t;
}

ImageBatch<double> double_batch(const ModelConfig& c, int n, std::uint64_t seed) {
  ImageBatch<double> b{random_images(c, n, seed), {}};
  for (int k = 0; k < n; ++k) b.labels.push_back(static_cast<int>((seed + 3 * k) % c.num_classes));
  return b;
}

bool gradient_suite() {
  Criterion cr(2, "gradient suite");
  const ModelConfig c = tiny_config(2);
  auto params = random_params(c, 101);
  const auto clean = double_batch(c, 3, 7), poison = double_batch(c, 3, 8);
  auto trig = dense_trigger(c, 9);
  const LocationPolicy policy = LocationPolicy::mis(default_mis(c.grid_size()));
  const int target = 1;

  struct Term {
    const char* name;
    double ObjectiveTerms::*member;
  };
  for (const Term term : {Term{"L_c", &ObjectiveTerms::clean}, Term{"L_bd", &ObjectiveTerms::backdoor},
                          Term{"L_vis", &ObjectiveTerms::visual}, Term{"L_attn", &ObjectiveTerms::attention}}) {
    ObjectiveTerms terms;
    terms.backdoor = 0;
    terms.*term.member = 1;
    terms.grad_params = terms.grad_trigger = true;
    auto run = [&] {
      Rng rng(55);
      return evaluate_objective(params, &clean, &poison, trig, policy, target, terms, {}, rng);
    };
    const auto res = run();
    auto value = [&] { return run().report.aggregate; };
    double worst_p = 0, worst_t = 0;
    for (auto k : spread_indices(params.data.size(), 80, 13)) {
      worst_p = std::max(worst_p, relative_error(res.grad_params(k), central_difference(value, params.data.data() + k)));
    }
    for (Eigen::Index k = 0; k < trig.values.size(); ++k) {
      worst_t = std::max(worst_t, relative_error(res.grad_trigger(k), central_difference(value, trig.values.data() + k)));
    }
    cr.clause(fmt::format("{}: max relative error theta {:.2e}, t {:.2e} (<= 1e-4)", term.name, worst_p, worst_t),
              worst_p <= 1e-4 && worst_t <= 1e-4);
  }

  const LossWeights w{0.5, 0.2};
  Rng a(1), b(1);
  const auto tr = trigger_objective(params, poison, trig, w, policy, target, {}, a);
  const auto mo = model_objective(params, clean, poison, trig, w, policy, target, {}, b);
  cr.clause(fmt::format("trigger phase: no theta gradient ({} entries), |grad t| {:.3f}",
                        tr.grad_params.size(), tr.grad_trigger.norm()),
            tr.grad_params.size() == 0 && tr.grad_trigger.norm() > 0);
  cr.clause(fmt::format("model phase: no trigger gradient ({} entries), |grad theta| {:.3f}",
                        mo.grad_trigger.size(), mo.grad_params.norm()),
            mo.grad_trigger.size() == 0 && mo.grad_params.norm() > 0);
  // The frozen variable is untouched by one optimization step of each phase.
  AttackConfig ac;
  ac.epochs = 1;
  ac.trigger_epochs = 1;
  ac.model_epochs = 1;
  ac.trigger_fraction = 0.5;
  ac.poison_ratio = 0.5;
  ac.batch_size = 4;
  ac.target_label = target;
  Dataset ds;
  ds.channels = c.channels;
  ds.image_size = c.image_size;
  ds.num_classes = c.num_classes;
  ds.norm = Normalization::identity(3);
  const auto d8 = double_batch(c, 8, 21);
  ds.images = d8.images.cast<float>();
  ds.labels = d8.labels;
  AttackPlan plan;
  plan.policy = policy;
  const auto fparams = params.cast<float>();
  const auto ftrig = clamp_trigger(init_trigger(geometry_of(c), -1.f, 1.f, 4, 0.2));
  const auto result = run_attack(fparams, ds, ac, plan, ftrig);
  bool scoped = result.digests.size() == 2;
  for (const auto& d : result.digests) {
    if (d.phase == Phase::kTrigger) scoped = scoped && d.params_before == d.params_after && d.trigger_before != d.trigger_after;
    if (d.phase == Phase::kModel) scoped = scoped && d.trigger_before == d.trigger_after && d.params_before != d.params_after;
  }
  cr.clause("one alternating epoch: trigger phase leaves theta bitwise fixed, model phase leaves t fixed", scoped);
  return cr.report(300);
}

// ---------------------------------------------------------------- criterion 3

double numpy_percentile(std::vector<int> counts, double q) {
  std::sort(counts.begin(), counts.end());
  const double pos = q / 100.0 * static_cast<double>(counts.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, counts.size() - 1);
  return counts[lo] + (pos - static_cast<double>(lo)) * (counts[hi] - counts[lo]);
}

double ssim_direct_8x8(const Mat<double>& x, const Mat<double>& y) {
  const int w = 7, r = 3, n = 8;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  Mat<double> g(w, w);
  for (int i = 0; i < w; ++i)
    for (int j = 0; j < w; ++j) g(i, j) = std::exp(-((i - r) * (i - r) + (j - r) * (j - r)) / (2 * sigma * sigma));
  g /= g.sum();
  double total = 0;
  int cnt = 0;
  for (int cy = r; cy < n - r; ++cy) {
    for (int cx = r; cx < n - r; ++cx) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (int i = 0; i < w; ++i)
        for (int j = 0; j < w; ++j) {
          const double a = x(cy - r + i, cx - r + j), b = y(cy - r + i, cx - r + j), k = g(i, j);
          mx += k * a;
          my += k * b;
          xx += k * a * a;
          yy += k * b * b;
          xy += k * a * b;
        }
      const double vx = xx - mx * mx, vy = yy - my * my, cov = xy - mx * my;
      total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++cnt;
    }
  }
  return total / cnt;
}

bool oracle_suite(const fs::path& work) {
  Criterion cr(3, "oracle-equivalence suite");
  const ModelConfig c = tiny_config(3);
  const auto model = random_params(c, 31);
  ForwardOptions fo;
  fo.keep_attention = true;
  const auto fwd = forward(model, random_images(c, 2, 32), fo);
  double worst = 0;
  for (const auto& stack : fwd.attention) {
    const int t = stack.tokens;
    Mat<double> acc = Mat<double>::Identity(t, t);
    for (int l = 0; l < stack.depth(); ++l) {
      Mat<double> mean = Mat<double>::Zero(t, t);
      for (int h = 0; h < stack.heads; ++h)
        for (int i = 0; i < t; ++i)
          for (int j = 0; j < t; ++j) mean(i, j) += stack.layers[l](h * t + i, j) / stack.heads;
      Mat<double> next = Mat<double>::Zero(t, t);
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < t; ++j)
          for (int k = 0; k < t; ++k) next(i, j) += mean(i, k) * acc(k, j);
      acc = next;
      worst = std::max(worst, (attention_map(stack, l + 1) - acc).cwiseAbs().maxCoeff());
    }
  }
  cr.clause(fmt::format("attention_map vs explicit loop product: max |diff| {:.2e} (<= 1e-12)", worst), worst <= 1e-12);

  const ModelConfig fc = tiny_config(1);
  const auto fm = small_float_model(fc, 41);
  const ImageGeometry geom = geometry_of(fc);
  const auto calib = small_batch(fc, 40, 42), clean = small_batch(fc, 20, 43), pois = small_batch(fc, 20, 44);
  const std::vector<float> fill(3, 0.f);
  const auto rep = dbavt_detect(fm, calib.images, clean.images, pois.images, geom, fill, 25, 7);
  const double td = numpy_percentile(rep.calib_drop, 90), ts = numpy_percentile(rep.calib_shuffle, 10);
  int flagged = 0;
  for (std::size_t i = 0; i < rep.clean_drop.size(); ++i) flagged += rep.clean_drop[i] > td || rep.clean_shuffle[i] < ts;
  const double fnr = static_cast<double>(flagged) / static_cast<double>(rep.clean_drop.size());
  cr.clause(fmt::format("DBAVT thresholds vs sort-based recomputation: drop {} / {}, shuffle {} / {}, FNR {} / {}",
                        rep.drop_threshold, td, rep.shuffle_threshold, ts, rep.fnr, fnr),
            rep.drop_threshold == td && rep.shuffle_threshold == ts && rep.fnr == fnr);

  double sep = 0;
  for (int w : {3, 5, 7, 9}) {
    const Vec<double> k1 = gaussian_kernel_1d(w);
    sep = std::max(sep, (gaussian_kernel(w) - k1 * k1.transpose()).cwiseAbs().maxCoeff());
    const double sigma = gaussian_sigma(w);
    Vec<double> direct(w);
    for (int i = 0; i < w; ++i) direct(i) = std::exp(-std::pow(i - (w - 1) / 2.0, 2) / (2 * sigma * sigma));
    direct /= direct.sum();
    sep = std::max(sep, (direct - k1).cwiseAbs().maxCoeff());
  }
  cr.clause(fmt::format("Gaussian kernel separable and equal to the direct formula: max |diff| {:.2e} (<= 1e-7)", sep),
            sep <= 1e-7);

  Mat<double> x(8, 8), y(8, 8);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      x(i, j) = ((i * 8 + j) * 37 % 64) / 63.0;
      y(i, j) = std::clamp(x(i, j) + 0.1 * std::sin(1.7 * i + 0.9 * j), 0.0, 1.0);
    }
  const Vec<double> xv = Eigen::Map<const Vec<double>>(Mat<double>(x).data(), 64);
  const Vec<double> yv = Eigen::Map<const Vec<double>>(Mat<double>(y).data(), 64);
  const double mse = (x - y).array().square().mean();
  const double psnr_direct = 10 * std::log10(1.0 / mse);
  const double ssim_ref = ssim_direct_8x8(x, y);
  const double dp = std::abs(psnr(xv, yv, 1.0) - psnr_direct), ds = std::abs(ssim(xv, yv, 1, 8, 1.0) - ssim_ref);
  cr.clause(fmt::format("PSNR / SSIM vs direct formulas on 8x8: |diff| {:.2e} / {:.2e} (SSIM {:.6f})", dp, ds, ssim_ref),
            dp <= 1e-10 && ds <= 1e-10);

  Mat<double> vals(4, 4);
  for (int i = 0; i < 16; ++i) vals.data()[i] = std::round(1e6 * std::fmod(i * 0.137, 1.0)) / 1e6;
  const TREHeatmap h = TREHeatmap::from_grid(vals);
  fs::create_directories(work);
  emit_heatmap(h, work / "roundtrip");
  const TREHeatmap back = read_heatmap_csv(work / "roundtrip.csv");
  const double hd = (back.values - h.values).cwiseAbs().maxCoeff();
  cr.clause(fmt::format("heatmap CSV round trip: max |diff| {:.1e}, TRE {} / {}", hd, back.tre, h.tre),
            back.grid == 4 && hd <= 5e-7 && std::abs(back.tre - h.tre) <= 5e-7);
  return cr.report(300);
}

// ---------------------------------------------------------- criteria 4 to 7

struct ProxyRun {
  ExperimentConfig config;
  DatasetPair data;
  ViTParams<float> clean;
  double clean_acc = 0;
};

bool pretrain_cached(const fs::path& dir, const ExperimentConfig& c) {
  if (!fs::exists(dir / "manifest.json")) return false;
  const auto m = RunManifest::read(dir / "manifest.json");
  return m.config == to_ini(c) && m.verify(dir).empty() && fs::exists(dir / "clean.ckpt");
}

std::map<std::string, std::string> file_digests(const RunManifest& m) {
  std::map<std::string, std::string> out;
  for (const auto& f : m.files) {
    if (f.path != "config.ini") out[f.path] = f.sha256;
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

double denormalized_norm(const Trigger<float>& t, const Normalization& norm) {
  const int per = t.patch_size * t.patch_size;
  double s = 0;
  for (Eigen::Index k = 0; k < t.values.size(); ++k) {
    const double v = t.values(k) * norm.std[static_cast<std::size_t>(k / per)];
    s += v * v;
  }
  return std::sqrt(s);
}

// Label written to the defense tables for the configured payload `text`.
std::string payload_label(const ExperimentConfig& c, const std::string& text) {
  const auto specs = c.payload_specs();
  for (std::size_t i = 0; i < c.payloads.size(); ++i) {
    if (c.payloads[i] == text) return specs[i].describe();
  }
  throw std::runtime_error("payload " + text + " is not configured");
}

// Row of `defense` whose parameters carry payload=<payload> and, if given, `extra`.
const DefenseOutcome& find_outcome(const std::vector<DefenseOutcome>& rows, const std::string& defense,
                                   const std::string& payload, const std::string& extra = "") {
  for (const auto& r : rows) {
    const std::string params = ";" + r.parameters + ";";
    if (r.defense == defense && params.find(";payload=" + payload + ";") != std::string::npos &&
        params.find(";" + extra) != std::string::npos) {
      return r;
    }
  }
  throw std::runtime_error("missing defense row " + defense + " " + payload + " " + extra);
}

// Runs `stage` in its own run directory and returns its manifest.
template <typename F>
RunManifest in_run(const ExperimentConfig& c, const fs::path& dir, const std::string& name, const DatasetPair& data,
                   F&& stage) {
  RunRecorder rec(c, "acceptance " + name, dir);
  rec.set_dataset_digest(dataset_digest(data));
  stage(rec);
  return rec.finish();
}

bool proxy_suite(const fs::path& work, const std::set<int>& expect_fail, int& unexpected) {
  const char* cifar = std::getenv("PASTA_CIFAR10_ROOT");
  ExperimentConfig c = ExperimentConfig::preset_named(cifar ? "desk" : "proxy");
  if (!cifar) c.dataset.root = work / "synthetic";
  c.out_dir = work;
  c.payloads = {"random:k=1", "random:k=20", "fixed:k=10"};
  c.defenses.windows = {3, 5};
  c.validate();
  fmt::print("proxy suite: preset {}, data {} ({})\n", c.preset, c.dataset.root.string(), c.dataset.kind);
  const auto t0 = Clock::now();
  const DatasetPair data = load_dataset(c.dataset, c.seed);
  const int target = c.attack.target_label;
  const ImageBatch<float> test = data.test.all();
  fmt::print("  data: {} train / {} test, digest {}\n", data.train.size(), data.test.size(), dataset_digest(data).substr(0, 16));

  ViTParams<float> clean;
  const fs::path pre_dir = work / "pretrain";
  if (pretrain_cached(pre_dir, c)) {
    clean = load_checkpoint(pre_dir / "clean.ckpt");
    fmt::print("  clean model reused from {} (manifest verified)\n", pre_dir.string());
  } else {
    in_run(c, pre_dir, "pretrain", data, [&](RunRecorder& rec) { clean = pretrain_stage(c, data, rec).params; });
  }
  const double clean_acc = accuracy(clean, test);
  fmt::print("  clean ACC {:.4f} ({:.0f}s)\n", clean_acc, seconds_since(t0));

  TrainResult pasta_a, pasta_b, single, no_attn;
  const auto m_a = in_run(c, work / "pasta_a", "pasta", data, [&](RunRecorder& rec) { pasta_a = attack_stage(c, data, clean, "pasta", rec); });
  const auto t_attack = seconds_since(t0);
  in_run(c, work / "single", "single", data, [&](RunRecorder& rec) { single = attack_stage(c, data, clean, "single", rec); });
  in_run(c, work / "no_attn", "no_attn", data, [&](RunRecorder& rec) { no_attn = attack_stage(c, data, clean, "no_attn", rec); });
  const AttackArtifact pasta = artifact_of(pasta_a), single_art = artifact_of(single), no_attn_art = artifact_of(no_attn);

  TREHeatmap tre_pasta, tre_single;
  std::vector<StealthRow> stealth;
  in_run(c, work / "eval", "eval", data, [&](RunRecorder& rec) {
    tre_pasta = eval_tre_stage(pasta, data, target, rec, "tre_pasta");
    tre_single = eval_tre_stage(single_art, data, target, rec, "tre_single");
    stealth = eval_stealth_stage({pasta, no_attn_art}, data, c.seed, rec);
  });
  const double pasta_acc = accuracy(pasta.params, test);

  // Replacement baseline: the checkerboard pasted at one patch of every test image.
  Trigger<float> rep;
  rep.channels = c.model.channels;
  rep.patch_size = c.model.patch_size;
  rep.values = badnets_pattern(c.model, data.test.norm);
  PayloadSpec rep_payload = PayloadSpec::fixed({c.badnets_location});
  rep_payload.insertion = Insertion::kReplace;
  const double rep_l2 = visual_stealth(data.test, test, rep, rep_payload, geometry_of(c.model)).visual.l2;
  const double t_l2 = denormalized_norm(pasta.trigger, data.test.norm);

  bool all = true;
  auto close = [&](Criterion& cr, int id) {
    const bool ok = cr.report(0);
    if (!ok && !expect_fail.count(id)) ++unexpected;
    if (!ok && expect_fail.count(id)) fmt::print("  (criterion {} is a recorded expected failure)\n", id);
    all = all && ok;
  };

  {
    Criterion cr(4, fmt::format("{} attack run", c.preset));
    cr.clause(fmt::format("clean pretrain ACC {:.4f} >= 0.60", clean_acc), clean_acc >= 0.60);
    cr.clause(fmt::format("TRE over all {} locations {:.4f} >= 0.85", c.model.num_patches(), tre_pasta.tre), tre_pasta.tre >= 0.85);
    cr.clause(fmt::format("clean ACC drop {:.2f} points <= 5 (ACC {:.4f} after PASTA)", 100 * (clean_acc - pasta_acc), pasta_acc),
              clean_acc - pasta_acc <= 0.05);
    cr.clause(fmt::format("denormalized trigger l2 {:.4f} <= 25% of replacement patch l2 {:.4f} (ratio {:.3f})", t_l2,
                          rep_l2, t_l2 / rep_l2),
              t_l2 <= 0.25 * rep_l2);
    cr.clause(fmt::format("pretrain + PASTA wall clock {:.0f}s <= 2700s", t_attack), t_attack <= 2700);
    close(cr, 4);
  }

  ObserveReport obs;
  in_run(c, work / "observe", "observe", data, [&](RunRecorder& rec) { obs = observe_section4(c, data, clean, rec, {"l2_sweep"}); });
  {
    Criterion cr(5, "comparative properties on matched seeds");
    cr.clause(fmt::format("TRE PASTA {:.4f} - single-location {:.4f} = {:.2f} points >= 10", tre_pasta.tre, tre_single.tre,
                          100 * (tre_pasta.tre - tre_single.tre)),
              tre_pasta.tre - tre_single.tre >= 0.10);
    const double att_pasta = stealth[0].report.attention.l2, att_none = stealth[1].report.attention.l2;
    cr.clause(fmt::format("attention l2 PASTA {:.5f} < without attention term {:.5f}", att_pasta, att_none), att_pasta < att_none);
    std::vector<double> sweep;
    std::string trace;
    for (const auto& r : obs.rows) {
      sweep.push_back(r.tre);
      trace += fmt::format(" l2 {} -> {:.4f};", r.l2, r.tre);
    }
    cr.clause(fmt::format("l2 sweep TRE non-decreasing, at most one inversion <= 2 points:{}", trace),
              sweep.size() == c.observe.l2_sweep.size() && soft_non_decreasing(sweep, 0.02));
    close(cr, 5);
  }

  DefenseSummary def;
  in_run(c, work / "defend", "defend", data, [&](RunRecorder& rec) { def = defend_stage(c, pasta, data, rec); });
  {
    Criterion cr(6, "defense protocol directions");
    const auto& ds1 = find_outcome(def.patch_ops, "patch_drop_shuffle", "random:k=1");
    const auto& ds20 = find_outcome(def.patch_ops, "patch_drop_shuffle", "random:k=20");
    cr.clause(fmt::format("drop & shuffle ASR: 20 random locations {:.4f} >= 1 random location {:.4f} + 20 points",
                          ds20.asr_after, ds1.asr_after),
              ds20.asr_after >= ds1.asr_after + 0.20);
    cr.clause(fmt::format("DBAVT clean FNR {:.4f} in [0.05, 0.20] (TPR {:.4f}, thresholds {} / {})", def.dbavt.fnr,
                          def.dbavt.tpr, def.dbavt.drop_threshold, def.dbavt.shuffle_threshold),
              def.dbavt.fnr >= 0.05 && def.dbavt.fnr <= 0.20);
    const auto& b1 = find_outcome(def.bavt, "bavt", "random:k=1");
    const auto& b10 = find_outcome(def.bavt, "bavt", payload_label(c, "fixed:k=10"));
    cr.clause(fmt::format("BAVT ASR: 10 fixed locations {:.4f} >= 1 random location {:.4f}", b10.asr_after, b1.asr_after),
              b10.asr_after >= b1.asr_after);
    const auto& g3 = find_outcome(def.gaussian, "gaussian", "random:k=1", "window=3;");
    const auto& g5 = find_outcome(def.gaussian, "gaussian", "random:k=1", "window=5;");
    const double red3 = g3.asr_before - g3.asr_after, red5 = g5.asr_before - g5.asr_after;
    cr.clause(fmt::format("Gaussian single-location ASR reduction: 5x5 {:.2f} points vs 3x3 {:.2f} points, gap >= 30",
                          100 * red5, 100 * red3),
              red5 - red3 >= 0.30);
    close(cr, 6);
  }

  {
    Criterion cr(7, "determinism");
    const auto m_b = in_run(c, work / "pasta_b", "pasta", data, [&](RunRecorder& rec) { pasta_b = attack_stage(c, data, clean, "pasta", rec); });
    const bool logs = slurp(work / "pasta_a" / "pasta_loss.csv") == slurp(work / "pasta_b" / "pasta_loss.csv");
    const auto da = file_digests(m_a), db = file_digests(m_b);
    cr.clause(fmt::format("repeated attack: loss logs bitwise identical ({} bytes)", fs::file_size(work / "pasta_a" / "pasta_loss.csv")), logs);
    cr.clause(fmt::format("repeated attack: {} output digests identical", da.size()), da == db && !da.empty());
    cr.clause("repeated attack: parameters and trigger bitwise identical",
              pasta_a.params.data == pasta_b.params.data && pasta_a.trigger.values == pasta_b.trigger.values);
    close(cr, 7);
  }
  fmt::print("proxy suite wall clock {:.0f}s\n", seconds_since(t0));
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string suite = "all";
  std::string work = "acceptance_work";
  std::vector<int> expect;
  app.add_option("--suite", suite)->check(CLI::IsMember({"fast", "proxy", "all"}));
  app.add_option("--work", work, "scratch directory for runs");
  app.add_option("--expect-fail", expect, "criteria recorded as unattainable at this scale");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> expect_fail(expect.begin(), expect.end());

  int unexpected = 0;
  try {
    if (suite != "proxy") {
      for (auto [id, ok] : {std::pair{1, exactness_suite()}, std::pair{2, gradient_suite()},
                            std::pair{3, oracle_suite(fs::path(work) / "fast")}}) {
        if (!ok && !expect_fail.count(id)) ++unexpected;
      }
    }
    if (suite != "fast") proxy_suite(fs::path(work) / "proxy", expect_fail, unexpected);
  } catch (const std::exception& e) {
    fmt::print("FAIL acceptance aborted: {}\n", e.what());
    return 2;
  }
  return unexpected == 0 ? 0 : 1;
}
