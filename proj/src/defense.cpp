#include "pasta/defense.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "pasta/trainer.hpp"

namespace pasta {

namespace fs = std::filesystem;

int RandomPicker::patch(int n) {
  std::uniform_int_distribution<int> d(0, n - 1);
  return d(rng_);
}

std::pair<int, int> RandomPicker::pair(int n) {
  const int a = std::uniform_int_distribution<int>(0, n - 1)(rng_);
  int b = std::uniform_int_distribution<int>(0, n - 2)(rng_);
  if (b >= a) ++b;
  return std::minmax(a, b);
}

namespace {

void check_fill(const std::vector<float>& fill, const ImageGeometry& geom) {
  if (static_cast<int>(fill.size()) != geom.channels) {
    throw DimensionError(fmt::format("fill has {} values for {} channels", fill.size(), geom.channels));
  }
}

}  // namespace

void drop_patch(float* image, const ImageGeometry& geom, int patch, const std::vector<float>& fill) {
  check_fill(fill, geom);
  const PatchIndex p = PatchIndex::from_flat(patch, geom.grid());
  const int s = geom.patch_size;
  for (int c = 0; c < geom.channels; ++c)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) image[geom.pixel(c, p.row * s + y, p.col * s + x)] = fill[c];
}

void swap_patches(float* image, const ImageGeometry& geom, int a, int b) {
  const PatchIndex pa = PatchIndex::from_flat(a, geom.grid());
  const PatchIndex pb = PatchIndex::from_flat(b, geom.grid());
  const int s = geom.patch_size;
  for (int c = 0; c < geom.channels; ++c)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        std::swap(image[geom.pixel(c, pa.row * s + y, pa.col * s + x)],
                  image[geom.pixel(c, pb.row * s + y, pb.col * s + x)]);
      }
}

std::string patch_op_name(PatchOp op) {
  switch (op) {
    case PatchOp::kIdentity: return "identity";
    case PatchOp::kDrop: return "drop";
    case PatchOp::kShuffle: return "shuffle";
    case PatchOp::kDropShuffle: return "drop_shuffle";
  }
  return "?";
}

PatchOp parse_patch_op(const std::string& name) {
  for (PatchOp op : {PatchOp::kIdentity, PatchOp::kDrop, PatchOp::kShuffle, PatchOp::kDropShuffle}) {
    if (patch_op_name(op) == name) return op;
  }
  throw ConfigError(fmt::format("unknown patch operation '{}'", name));
}

void apply_patch_op(PatchOp op, float* image, const ImageGeometry& geom,
                    const std::vector<float>& fill, PatchPicker& picker) {
  const int n = geom.num_patches();
  if ((op == PatchOp::kShuffle || op == PatchOp::kDropShuffle) && n < 2) {
    throw ConfigError("patch shuffle needs at least two patches");
  }
  switch (op) {
    case PatchOp::kIdentity:
      return;
    case PatchOp::kDrop:
      drop_patch(image, geom, picker.patch(n), fill);
      return;
    case PatchOp::kShuffle: {
      const auto [a, b] = picker.pair(n);
      swap_patches(image, geom, a, b);
      return;
    }
    case PatchOp::kDropShuffle: {
      const auto [a, b] = picker.pair(n);
      swap_patches(image, geom, a, b);
      drop_patch(image, geom, picker.patch(n), fill);
      return;
    }
  }
}

namespace {

Vec<float> apply_copy(PatchOp op, const Vec<float>& x, const ImageGeometry& geom,
                      const std::vector<float>& fill, PatchPicker& picker) {
  if (x.size() != geom.image_dim()) throw DimensionError("image does not match the geometry");
  Vec<float> out = x;
  apply_patch_op(op, out.data(), geom, fill, picker);
  return out;
}

}  // namespace

Vec<float> patch_drop(const Vec<float>& x, const ImageGeometry& geom,
                      const std::vector<float>& fill, PatchPicker& picker) {
  return apply_copy(PatchOp::kDrop, x, geom, fill, picker);
}

Vec<float> patch_shuffle(const Vec<float>& x, const ImageGeometry& geom, PatchPicker& picker) {
  return apply_copy(PatchOp::kShuffle, x, geom, std::vector<float>(geom.channels, 0.0f), picker);
}

Vec<float> drop_and_shuffle(const Vec<float>& x, const ImageGeometry& geom,
                            const std::vector<float>& fill, PatchPicker& picker) {
  return apply_copy(PatchOp::kDropShuffle, x, geom, fill, picker);
}

std::uint64_t patch_op_seed(std::uint64_t seed, PatchOp op, int index, int rep) {
  const std::uint64_t key = (static_cast<std::uint64_t>(index) << 32) | static_cast<std::uint32_t>(rep);
  return derive_seed(seed, "patch-op-" + patch_op_name(op), key);
}

Mat<float> perturb_rows(const Mat<float>& images, PatchOp op, const ImageGeometry& geom,
                        const std::vector<float>& fill, std::uint64_t seed, int rep,
                        int first_index) {
  if (images.cols() != geom.image_dim()) throw DimensionError("images do not match the geometry");
  Mat<float> out = images;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    RandomPicker picker(patch_op_seed(seed, op, first_index + static_cast<int>(r), rep));
    apply_patch_op(op, out.row(r).data(), geom, fill, picker);
  }
  return out;
}

void write_defense_table(const std::vector<DefenseOutcome>& rows, const fs::path& path) {
  CsvTable t{{"defense", "parameters", "acc_before", "asr_before", "acc_after", "asr_after"}, {}};
  for (const auto& r : rows) {
    t.add({r.defense, r.parameters, format_metric(r.acc_before), format_metric(r.asr_before),
           format_metric(r.acc_after), format_metric(r.asr_after)});
  }
  t.write(path);
}

namespace {

double hit_rate(const std::vector<int>& pred, const std::vector<int>& want) {
  long hits = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) hits += pred[k] == want[k];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

Mat<float> gather_rows(const Mat<float>& m, const std::vector<int>& rows) {
  Mat<float> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(rows[k]);
  return out;
}

}  // namespace

std::vector<DefenseOutcome> patch_op_evaluation(const ViTParams<float>& params,
                                                const Trigger<float>& trigger,
                                                const ImageBatch<float>& data,
                                                const std::vector<PayloadSpec>& payloads,
                                                int target_label, const PatchOpSetup& setup) {
  if (setup.repetitions < 1) throw ConfigError("patch-op evaluation needs at least one repetition");
  const ImageGeometry geom = geometry_of(params.config);
  check_fill(setup.fill, geom);
  const double acc_before = accuracy(params, data);
  const auto eligible = asr_eligible(data.labels, target_label);
  if (eligible.empty()) throw ConfigError("no samples outside the target class");
  const std::vector<int> target(eligible.size(), target_label);

  std::vector<Mat<float>> poisoned;
  std::vector<double> asr_before;
  for (const auto& p : payloads) {
    poisoned.push_back(apply_payload(data.images, trigger, p, geom));
    asr_before.push_back(asr(params, trigger, data, p, target_label));
  }

  std::vector<DefenseOutcome> out;
  for (PatchOp op : setup.ops) {
    std::vector<double> acc_runs;
    std::vector<std::vector<double>> asr_runs(payloads.size());
    for (int rep = 0; rep < setup.repetitions; ++rep) {
      const Mat<float> clean = perturb_rows(data.images, op, geom, setup.fill, setup.seed, rep);
      acc_runs.push_back(hit_rate(predict(params, clean), data.labels));
      for (std::size_t p = 0; p < payloads.size(); ++p) {
        const Mat<float> rows = gather_rows(
            perturb_rows(poisoned[p], op, geom, setup.fill, setup.seed, rep), eligible);
        asr_runs[p].push_back(hit_rate(predict(params, rows), target));
      }
    }
    auto mean = [](const std::vector<double>& v) {
      return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    for (std::size_t p = 0; p < payloads.size(); ++p) {
      DefenseOutcome o;
      o.defense = "patch_" + patch_op_name(op);
      o.parameters = fmt::format("payload={};repetitions={}", payloads[p].describe(), setup.repetitions);
      o.acc_before = acc_before;
      o.asr_before = asr_before[p];
      o.acc_after = mean(acc_runs);
      o.asr_after = mean(asr_runs[p]);
      o.acc_runs = acc_runs;
      o.asr_runs = asr_runs[p];
      out.push_back(std::move(o));
    }
  }
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("percentile of an empty set");
  if (q < 0 || q > 100) throw ConfigError(fmt::format("percentile {} outside [0, 100]", q));
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<int> flip_counts(const ViTParams<float>& params, const Mat<float>& images,
                             PatchOp op, const ImageGeometry& geom,
                             const std::vector<float>& fill, int repetitions, std::uint64_t seed) {
  std::vector<int> counts(static_cast<std::size_t>(images.rows()), 0);
  if (images.rows() == 0) return counts;
  const auto base = predict(params, images);
  for (int rep = 0; rep < repetitions; ++rep) {
    const auto pred = predict(params, perturb_rows(images, op, geom, fill, seed, rep));
    for (std::size_t k = 0; k < pred.size(); ++k) counts[k] += pred[k] != base[k];
  }
  return counts;
}

bool dbavt_flag(int drop, int shuffle, double drop_threshold, double shuffle_threshold) {
  return drop > drop_threshold || shuffle < shuffle_threshold;
}

DetectionReport dbavt_detect(const ViTParams<float>& params, const Mat<float>& calib_clean,
                             const Mat<float>& test_clean, const Mat<float>& test_poisoned,
                             const ImageGeometry& geom, const std::vector<float>& fill,
                             int repetitions, std::uint64_t seed) {
  if (calib_clean.rows() == 0) throw ConfigError("DBAVT needs a non-empty calibration set");
  if (repetitions < 1) throw ConfigError("DBAVT needs at least one repetition");
  DetectionReport r;
  const std::uint64_t calib_seed = derive_seed(seed, "dbavt-calib");
  const std::uint64_t test_seed = derive_seed(seed, "dbavt-test");
  r.calib_drop = flip_counts(params, calib_clean, PatchOp::kDrop, geom, fill, repetitions, calib_seed);
  r.calib_shuffle = flip_counts(params, calib_clean, PatchOp::kShuffle, geom, fill, repetitions, calib_seed);
  r.clean_drop = flip_counts(params, test_clean, PatchOp::kDrop, geom, fill, repetitions, test_seed);
  r.clean_shuffle = flip_counts(params, test_clean, PatchOp::kShuffle, geom, fill, repetitions, test_seed);
  r.poison_drop = flip_counts(params, test_poisoned, PatchOp::kDrop, geom, fill, repetitions, test_seed);
  r.poison_shuffle = flip_counts(params, test_poisoned, PatchOp::kShuffle, geom, fill, repetitions, test_seed);

  auto as_double = [](const std::vector<int>& v) { return std::vector<double>(v.begin(), v.end()); };
  r.drop_threshold = percentile(as_double(r.calib_drop), 90);
  r.shuffle_threshold = percentile(as_double(r.calib_shuffle), 10);
  auto rate = [&](const std::vector<int>& drop, const std::vector<int>& shuffle) {
    if (drop.empty()) return 0.0;
    long flagged = 0;
    for (std::size_t k = 0; k < drop.size(); ++k) {
      flagged += dbavt_flag(drop[k], shuffle[k], r.drop_threshold, r.shuffle_threshold);
    }
    return static_cast<double>(flagged) / static_cast<double>(drop.size());
  };
  r.fnr = rate(r.clean_drop, r.clean_shuffle);
  r.tpr = rate(r.poison_drop, r.poison_shuffle);
  return r;
}

int block_location(const Mat<float>& rollout) {
  int best = 0;
  for (int i = 1; i < rollout.size(); ++i) {
    if (rollout.data()[i] > rollout.data()[best]) best = i;
  }
  return best;
}

Mat<float> bavt_block(const ViTParams<float>& params, const Mat<float>& images,
                      const std::vector<float>& fill, std::vector<int>* blocked) {
  const ImageGeometry geom = geometry_of(params.config);
  check_fill(fill, geom);
  Mat<float> out = images;
  if (blocked != nullptr) blocked->clear();
  const Eigen::Index chunk = 128;
  for (Eigen::Index start = 0; start < images.rows(); start += chunk) {
    const Eigen::Index n = std::min(chunk, images.rows() - start);
    const auto fwd = forward(params, Mat<float>(images.middleRows(start, n)), {true, false});
    for (Eigen::Index b = 0; b < n; ++b) {
      const int patch = block_location(attention_rollout(fwd.attention[b]));
      drop_patch(out.row(start + b).data(), geom, patch, fill);
      if (blocked != nullptr) blocked->push_back(patch);
    }
  }
  return out;
}

DefenseOutcome bavt_evaluation(const ViTParams<float>& params, const Trigger<float>& trigger,
                               const ImageBatch<float>& data, const PayloadSpec& payload,
                               int target_label, const std::vector<float>& fill) {
  const ImageGeometry geom = geometry_of(params.config);
  DefenseOutcome o;
  o.defense = "bavt";
  o.parameters = fmt::format("payload={}", payload.describe());
  o.acc_before = accuracy(params, data);
  o.asr_before = asr(params, trigger, data, payload, target_label);
  o.acc_after = hit_rate(predict(params, bavt_block(params, data.images, fill)), data.labels);

  const auto eligible = asr_eligible(data.labels, target_label);
  const Mat<float> poisoned = gather_rows(apply_payload(data.images, trigger, payload, geom), eligible);
  o.asr_after = hit_rate(predict(params, bavt_block(params, poisoned, fill)),
                         std::vector<int>(eligible.size(), target_label));
  return o;
}

double gaussian_sigma(int window) { return 0.3 * ((window - 1) * 0.5 - 1) + 0.8; }

Vec<double> gaussian_kernel_1d(int window) {
  if (window < 1 || window % 2 == 0) {
    throw ConfigError(fmt::format("Gaussian window must be odd and positive, got {}", window));
  }
  const double sigma = gaussian_sigma(window);
  const int half = window / 2;
  Vec<double> k(window);
  for (int i = 0; i < window; ++i) k(i) = std::exp(-double((i - half) * (i - half)) / (2 * sigma * sigma));
  return k / k.sum();
}

Mat<double> gaussian_kernel(int window) {
  const Vec<double> k = gaussian_kernel_1d(window);
  return k * k.transpose();
}

namespace {

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
  return i;
}

}  // namespace

Mat<float> gaussian_filter(const Mat<float>& images, const ImageGeometry& geom, int window) {
  const Vec<double> k = gaussian_kernel_1d(window);
  if (images.cols() != geom.image_dim()) throw DimensionError("images do not match the geometry");
  const int s = geom.image_size, half = window / 2;
  Mat<float> out(images.rows(), images.cols());
  std::vector<double> tmp(static_cast<std::size_t>(s) * s);
  for (Eigen::Index r = 0; r < images.rows(); ++r) {
    for (int c = 0; c < geom.channels; ++c) {
      const float* in = images.row(r).data() + c * s * s;
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          double acc = 0;
          for (int j = 0; j < window; ++j) acc += k(j) * in[y * s + reflect101(x + j - half, s)];
          tmp[y * s + x] = acc;
        }
      float* dst = out.row(r).data() + c * s * s;
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          double acc = 0;
          for (int j = 0; j < window; ++j) acc += k(j) * tmp[reflect101(y + j - half, s) * s + x];
          dst[y * s + x] = static_cast<float>(acc);
        }
    }
  }
  return out;
}

DefenseOutcome gaussian_evaluation(const ViTParams<float>& params, const Trigger<float>& trigger,
                                   const ImageBatch<float>& data, const PayloadSpec& payload,
                                   int target_label, int window) {
  const ImageGeometry geom = geometry_of(params.config);
  DefenseOutcome o;
  o.defense = "gaussian";
  o.parameters = fmt::format("window={};sigma={:.2f};payload={}", window, gaussian_sigma(window),
                             payload.describe());
  o.acc_before = accuracy(params, data);
  o.asr_before = asr(params, trigger, data, payload, target_label);
  o.acc_after = hit_rate(predict(params, gaussian_filter(data.images, geom, window)), data.labels);
  const auto eligible = asr_eligible(data.labels, target_label);
  const Mat<float> poisoned = gather_rows(apply_payload(data.images, trigger, payload, geom), eligible);
  o.asr_after = hit_rate(predict(params, gaussian_filter(poisoned, geom, window)),
                         std::vector<int>(eligible.size(), target_label));
  return o;
}

double softmax_entropy(const Eigen::Ref<const Vec<double>>& logits) {
  const double mx = logits.maxCoeff();
  const Vec<double> e = (logits.array() - mx).exp();
  const double z = e.sum();
  double h = 0;
  for (Eigen::Index k = 0; k < e.size(); ++k) {
    const double p = e(k) / z;
    if (p > 0) h -= p * std::log(p);
  }
  return h;
}

StripSample strip_entropy(const ViTParams<float>& params, const Vec<float>& x,
                          const Mat<float>& clean_pool, int blends, std::uint64_t seed) {
  if (clean_pool.rows() == 0) throw ConfigError("STRIP needs a non-empty clean pool");
  if (blends < 1) throw ConfigError("STRIP needs at least one blend");
  if (x.size() != clean_pool.cols()) throw DimensionError("STRIP input does not match the pool");
  Rng rng(seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, clean_pool.rows() - 1);
  StripSample s;
  Mat<float> blended(blends, x.size());
  for (int b = 0; b < blends; ++b) {
    const Eigen::Index j = pick(rng);
    s.pool_indices.push_back(static_cast<int>(j));
    blended.row(b) = 0.5f * (x.transpose() + clean_pool.row(j));
  }
  s.logits = forward(params, blended, {false, false}).logits.cast<double>();
  for (int b = 0; b < blends; ++b) s.entropy.push_back(softmax_entropy(s.logits.row(b).transpose()));
  return s;
}

std::vector<double> strip_scores(const ViTParams<float>& params, const Mat<float>& inputs,
                                 const Mat<float>& clean_pool, int blends, std::uint64_t seed) {
  std::vector<double> out;
  for (Eigen::Index r = 0; r < inputs.rows(); ++r) {
    const auto s = strip_entropy(params, Vec<float>(inputs.row(r).transpose()), clean_pool, blends,
                                 derive_seed(seed, "strip", static_cast<std::uint64_t>(r)));
    out.push_back(std::accumulate(s.entropy.begin(), s.entropy.end(), 0.0) / blends);
  }
  return out;
}

Histogram strip_histogram(const std::vector<double>& clean, const std::vector<double>& poisoned,
                          int bins) {
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  std::vector<double> all = clean;
  all.insert(all.end(), poisoned.begin(), poisoned.end());
  if (all.empty()) throw ConfigError("histogram of no values");
  double lo = *std::min_element(all.begin(), all.end());
  double hi = *std::max_element(all.begin(), all.end());
  if (hi <= lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  Histogram h;
  for (int b = 0; b <= bins; ++b) h.edges.push_back(lo + (hi - lo) * b / bins);
  h.clean.assign(bins, 0);
  h.poisoned.assign(bins, 0);
  auto bin_of = [&](double v) {
    return std::clamp(static_cast<int>(std::floor((v - lo) / (hi - lo) * bins)), 0, bins - 1);
  };
  for (double v : clean) ++h.clean[bin_of(v)];
  for (double v : poisoned) ++h.poisoned[bin_of(v)];
  return h;
}

void write_histogram(const Histogram& h, const fs::path& path) {
  CsvTable t{{"bin_low", "bin_high", "clean", "poisoned"}, {}};
  for (std::size_t b = 0; b < h.clean.size(); ++b) {
    t.add({fmt::format("{:.6f}", h.edges[b]), fmt::format("{:.6f}", h.edges[b + 1]),
           std::to_string(h.clean[b]), std::to_string(h.poisoned[b])});
  }
  t.write(path);
}

PruneResult fine_prune(const ViTParams<float>& params, const Mat<float>& calib_clean, double ratio) {
  if (!(ratio >= 0 && ratio < 1)) throw ConfigError(fmt::format("prune ratio {} outside [0, 1)", ratio));
  if (calib_clean.rows() == 0) throw ConfigError("pruning needs calibration data");
  const ModelConfig& c = params.config;
  const int m = c.mlp_dim(), d = c.embed_dim;

  PruneResult r{params, {}, std::vector<double>(m, 0.0)};
  long rows = 0;
  const Eigen::Index chunk = 64;
  for (Eigen::Index start = 0; start < calib_clean.rows(); start += chunk) {
    const Eigen::Index n = std::min(chunk, calib_clean.rows() - start);
    const auto fwd = forward(params, Mat<float>(calib_clean.middleRows(start, n)), {false, true});
    const Mat<float>& act = fwd.cache.blocks.back().act;
    for (Eigen::Index t = 0; t < act.rows(); ++t)
      for (int j = 0; j < m; ++j) r.mean_activation[j] += std::abs(static_cast<double>(act(t, j)));
    rows += act.rows();
  }
  for (double& v : r.mean_activation) v /= static_cast<double>(rows);

  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return r.mean_activation[a] < r.mean_activation[b]; });
  const int count = static_cast<int>(std::floor(ratio * m));
  r.pruned.assign(order.begin(), order.begin() + count);

  const auto& blk = r.params.layout().blocks.back();
  auto fc1_w = r.params.mat(blk.fc1_w, d, m);
  auto fc1_b = r.params.mat(blk.fc1_b, 1, m);
  auto fc2_w = r.params.mat(blk.fc2_w, m, d);
  for (int j : r.pruned) {
    fc1_w.col(j).setZero();
    fc1_b(0, j) = 0;
    fc2_w.row(j).setZero();
  }
  return r;
}

std::vector<PrunePoint> prune_sweep(const ViTParams<float>& params, const Mat<float>& calib_clean,
                                    const std::vector<double>& ratios, const Trigger<float>& trigger,
                                    const ImageBatch<float>& data, const PayloadSpec& payload,
                                    int target_label) {
  std::vector<PrunePoint> out;
  for (double ratio : ratios) {
    const auto pruned = fine_prune(params, calib_clean, ratio);
    out.push_back({ratio, static_cast<int>(pruned.pruned.size()), accuracy(pruned.params, data),
                   asr(pruned.params, trigger, data, payload, target_label)});
  }
  return out;
}

void write_prune_curve(const std::vector<PrunePoint>& points, const fs::path& path) {
  CsvTable t{{"ratio", "pruned_units", "acc", "asr"}, {}};
  for (const auto& p : points) {
    t.add({fmt::format("{:.4f}", p.ratio), std::to_string(p.pruned), format_metric(p.acc),
           format_metric(p.asr)});
  }
  t.write(path);
}

}  // namespace pasta
