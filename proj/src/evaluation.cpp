#include "pasta/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "pasta/trainer.hpp"

namespace pasta {

namespace fs = std::filesystem;

PayloadSpec PayloadSpec::fixed(std::vector<PatchIndex> locations) {
  PayloadSpec p;
  p.mode = Mode::kFixed;
  p.k = static_cast<int>(locations.size());
  p.locations = std::move(locations);
  return p;
}

PayloadSpec PayloadSpec::random(int k, std::uint64_t seed) {
  PayloadSpec p;
  p.mode = Mode::kRandom;
  p.k = k;
  p.seed = seed;
  return p;
}

namespace {

// k distinct patches, uniformly, by a partial Fisher-Yates shuffle.
std::vector<PatchIndex> distinct_patches(int k, int grid, Rng& rng) {
  std::vector<int> ids(grid * grid);
  std::iota(ids.begin(), ids.end(), 0);
  std::vector<PatchIndex> out;
  for (int j = 0; j < k; ++j) {
    std::uniform_int_distribution<int> pick(j, grid * grid - 1);
    std::swap(ids[j], ids[pick(rng)]);
    out.push_back(PatchIndex::from_flat(ids[j], grid));
  }
  return out;
}

int parse_k(const std::string& body, const std::string& text) {
  if (body.rfind("k=", 0) != 0) throw ConfigError(fmt::format("bad payload '{}'", text));
  try {
    std::size_t used = 0;
    const int k = std::stoi(body.substr(2), &used);
    if (used != body.size() - 2) throw ConfigError(fmt::format("bad payload '{}'", text));
    return k;
  } catch (const std::logic_error&) {
    throw ConfigError(fmt::format("bad payload '{}'", text));
  }
}

}  // namespace

PayloadSpec PayloadSpec::parse(const std::string& text, int grid, std::uint64_t seed) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ConfigError(fmt::format("bad payload '{}'", text));
  const std::string mode = text.substr(0, colon);
  const std::string body = text.substr(colon + 1);
  PayloadSpec p;
  if (mode == "random") {
    p = random(parse_k(body, text), seed);
  } else if (mode == "fixed" && body.rfind("k=", 0) == 0) {
    const int k = parse_k(body, text);
    if (k < 1 || k > grid * grid) throw ConfigError(fmt::format("payload k={} out of range", k));
    Rng rng(derive_seed(seed, "payload-fixed"));
    p = fixed(distinct_patches(k, grid, rng));
    p.seed = seed;
  } else if (mode == "fixed") {
    std::vector<PatchIndex> locs;
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ';')) {
      int r = 0, c = 0;
      char comma = 0;
      std::stringstream is(item);
      if (!(is >> r >> comma >> c) || comma != ',') {
        throw ConfigError(fmt::format("bad payload location '{}'", item));
      }
      locs.push_back({r, c});
    }
    p = fixed(std::move(locs));
  } else {
    throw ConfigError(fmt::format("unknown payload mode '{}'", mode));
  }
  p.validate(grid);
  return p;
}

void PayloadSpec::validate(int grid) const {
  const int n = grid * grid;
  if (k < 1 || k > n) throw ConfigError(fmt::format("payload k={} outside [1, {}]", k, n));
  if (mode == Mode::kFixed) {
    if (static_cast<int>(locations.size()) != k) {
      throw ConfigError("fixed payload needs exactly k locations");
    }
    std::vector<PatchIndex> sorted = locations;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw ConfigError("fixed payload repeats a location");
    }
    for (const auto& p : locations) {
      if (!p.valid(grid)) throw ConfigError("fixed payload location outside the grid");
    }
  }
}

std::string PayloadSpec::describe() const {
  if (mode == Mode::kRandom) return fmt::format("random:k={}", k);
  std::string s = "fixed:";
  for (std::size_t j = 0; j < locations.size(); ++j) {
    s += fmt::format("{}{},{}", j ? ";" : "", locations[j].row, locations[j].col);
  }
  return s;
}

std::vector<PatchIndex> PayloadSpec::locations_for(int index, int grid) const {
  if (mode == Mode::kFixed) return locations;
  Rng rng(derive_seed(seed, "payload-random", static_cast<std::uint64_t>(index)));
  return distinct_patches(k, grid, rng);
}

Mat<float> apply_payload(const Mat<float>& images, const Trigger<float>& trigger,
                         const PayloadSpec& payload, const ImageGeometry& geom, int first_index) {
  payload.validate(geom.grid());
  if (trigger.values.size() != geom.patch_dim() || images.cols() != geom.image_dim()) {
    throw DimensionError("payload: trigger or image shape does not match the geometry");
  }
  Mat<float> out = images;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    for (const auto& loc : payload.locations_for(first_index + static_cast<int>(r), geom.grid())) {
      if (payload.insertion == Insertion::kSuperimpose) {
        insert_sup_inplace(out.row(r).data(), trigger.values.data(), loc, geom);
      } else {
        insert_rep_inplace(out.row(r).data(), trigger.values.data(), loc, geom);
      }
    }
  }
  return out;
}

double accuracy(const ViTParams<float>& params, const ImageBatch<float>& data) {
  if (data.size() == 0) throw ConfigError("accuracy of an empty set");
  const auto pred = predict(params, data.images);
  long hits = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) hits += pred[k] == data.labels[k];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

std::vector<int> asr_eligible(const std::vector<int>& labels, int target_label) {
  std::vector<int> out;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] != target_label) out.push_back(static_cast<int>(k));
  }
  return out;
}

namespace {

// Hits of the target label over eligible rows poisoned with `payload`.
long target_hits(const ViTParams<float>& params, const Trigger<float>& trigger,
                 const ImageBatch<float>& data, const std::vector<int>& eligible,
                 const PayloadSpec& payload, int target_label) {
  const ImageGeometry geom = geometry_of(params.config);
  const int chunk = 256;
  long hits = 0;
  Mat<float> rows;
  for (std::size_t start = 0; start < eligible.size(); start += chunk) {
    const std::size_t n = std::min<std::size_t>(chunk, eligible.size() - start);
    rows.resize(static_cast<Eigen::Index>(n), data.images.cols());
    for (std::size_t j = 0; j < n; ++j) {
      const int idx = eligible[start + j];
      rows.row(static_cast<Eigen::Index>(j)) = data.images.row(idx);
      for (const auto& loc : payload.locations_for(idx, geom.grid())) {
        if (payload.insertion == Insertion::kSuperimpose) {
          insert_sup_inplace(rows.row(static_cast<Eigen::Index>(j)).data(), trigger.values.data(),
                             loc, geom);
        } else {
          insert_rep_inplace(rows.row(static_cast<Eigen::Index>(j)).data(), trigger.values.data(),
                             loc, geom);
        }
      }
    }
    const auto pred = predict(params, rows, chunk);
    for (int p : pred) hits += p == target_label;
  }
  return hits;
}

}  // namespace

double asr(const ViTParams<float>& params, const Trigger<float>& trigger,
           const ImageBatch<float>& data, const PayloadSpec& payload, int target_label) {
  const ImageGeometry geom = geometry_of(params.config);
  payload.validate(geom.grid());
  if (target_label < 0 || target_label >= params.config.num_classes) {
    throw ConfigError(fmt::format("target label {} out of range", target_label));
  }
  if (trigger.values.size() != geom.patch_dim()) throw DimensionError("trigger size mismatch");
  const auto eligible = asr_eligible(data.labels, target_label);
  if (eligible.empty()) throw ConfigError("no samples outside the target class");
  const long hits = target_hits(params, trigger, data, eligible, payload, target_label);
  return static_cast<double>(hits) / static_cast<double>(eligible.size());
}

TREHeatmap TREHeatmap::from_grid(Mat<double> values) {
  if (values.rows() != values.cols() || values.rows() == 0) {
    throw DimensionError("heatmap must be a non-empty square grid");
  }
  TREHeatmap h;
  h.grid = static_cast<int>(values.rows());
  h.values = std::move(values);
  double sum = 0;
  for (Eigen::Index k = 0; k < h.values.size(); ++k) sum += h.values.data()[k];
  h.tre = sum / static_cast<double>(h.values.size());
  return h;
}

TREHeatmap tre_heatmap(const ViTParams<float>& params, const Trigger<float>& trigger,
                       const ImageBatch<float>& data, int target_label, Insertion insertion) {
  const int g = params.config.grid_size();
  Mat<double> grid(g, g);
  for (int i = 0; i < g * g; ++i) {
    PayloadSpec p = PayloadSpec::fixed({PatchIndex::from_flat(i, g)});
    p.insertion = insertion;
    grid(i / g, i % g) = asr(params, trigger, data, p, target_label);
  }
  return TREHeatmap::from_grid(std::move(grid));
}

void emit_heatmap(const TREHeatmap& h, const fs::path& stem) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  fs::path csv = stem;
  csv += ".csv";
  std::ofstream out(csv);
  if (!out) throw IngestionError(fmt::format("{}: cannot write heatmap", csv.string()));
  for (int r = 0; r < h.grid; ++r) {
    for (int c = 0; c < h.grid; ++c) out << (c ? "," : "") << fmt::format("{:.6f}", h.values(r, c));
    out << '\n';
  }
  if (!out) throw IngestionError(fmt::format("{}: write failed", csv.string()));

  fs::path pgm = stem;
  pgm += ".pgm";
  std::ofstream img(pgm, std::ios::binary);
  if (!img) throw IngestionError(fmt::format("{}: cannot write heatmap", pgm.string()));
  img << "P5\n" << h.grid << ' ' << h.grid << "\n255\n";
  for (int r = 0; r < h.grid; ++r)
    for (int c = 0; c < h.grid; ++c) {
      const double v = std::clamp(h.values(r, c), 0.0, 1.0);
      img.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  if (!img) throw IngestionError(fmt::format("{}: write failed", pgm.string()));
}

TREHeatmap read_heatmap_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError(fmt::format("{}: cannot open heatmap", path.string()));
  std::vector<std::vector<double>> rows;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::logic_error&) {
        throw IngestionError(fmt::format("{}: bad cell '{}'", path.string(), cell));
      }
    }
    rows.push_back(std::move(row));
  }
  const auto g = static_cast<Eigen::Index>(rows.size());
  Mat<double> values(g, g);
  for (Eigen::Index r = 0; r < g; ++r) {
    if (static_cast<Eigen::Index>(rows[r].size()) != g) {
      throw IngestionError(fmt::format("{}: heatmap is not square", path.string()));
    }
    for (Eigen::Index c = 0; c < g; ++c) values(r, c) = rows[r][c];
  }
  return TREHeatmap::from_grid(std::move(values));
}

double psnr(const Vec<double>& a, const Vec<double>& b, double peak) {
  if (a.size() != b.size() || a.size() == 0) throw DimensionError("psnr: size mismatch");
  const double mse = (a - b).squaredNorm() / static_cast<double>(a.size());
  if (mse == 0.0) return kInf;
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const Vec<double>& a, const Vec<double>& b, int channels, int size, double peak) {
  if (a.size() != b.size() || a.size() != static_cast<Eigen::Index>(channels) * size * size) {
    throw DimensionError("ssim: size mismatch");
  }
  int w = std::min(11, size);
  if (w % 2 == 0) --w;
  const double sigma = 1.5;
  std::vector<double> kernel(w);
  double ksum = 0;
  for (int k = 0; k < w; ++k) {
    const double d = k - (w - 1) / 2.0;
    kernel[k] = std::exp(-d * d / (2 * sigma * sigma));
    ksum += kernel[k];
  }
  for (double& k : kernel) k /= ksum;
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const int span = size - w + 1;
  double total = 0;
  for (int ch = 0; ch < channels; ++ch) {
    const double* x = a.data() + static_cast<std::ptrdiff_t>(ch) * size * size;
    const double* y = b.data() + static_cast<std::ptrdiff_t>(ch) * size * size;
    double acc = 0;
    for (int i = 0; i < span; ++i) {
      for (int j = 0; j < span; ++j) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int u = 0; u < w; ++u) {
          for (int v = 0; v < w; ++v) {
            const double wt = kernel[u] * kernel[v];
            const double p = x[(i + u) * size + j + v];
            const double q = y[(i + u) * size + j + v];
            mx += wt * p;
            my += wt * q;
            sxx += wt * p * p;
            syy += wt * q * q;
            sxy += wt * p * q;
          }
        }
        const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
        acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
    }
    total += acc / (static_cast<double>(span) * span);
  }
  return total / channels;
}

StealthReport visual_stealth(const Dataset& data, const ImageBatch<float>& clean,
                             const Trigger<float>& trigger, const PayloadSpec& payload,
                             const ImageGeometry& geom) {
  const Mat<float> poisoned = apply_payload(clean.images, trigger, payload, geom);
  const Mat<double> x = data.denormalized(clean.images).cast<double>().cwiseMax(0.0).cwiseMin(1.0);
  const Mat<double> y = data.denormalized(poisoned).cast<double>().cwiseMax(0.0).cwiseMin(1.0);
  StealthReport rep;
  double l2 = 0, ps = 0, ss = 0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Vec<double> a = x.row(r).transpose();
    const Vec<double> b = y.row(r).transpose();
    VisualStealth v;
    v.l2 = (a - b).norm();
    v.psnr_db = psnr(a, b, 1.0);
    v.ssim = ssim(a, b, geom.channels, geom.image_size, 1.0);
    l2 += v.l2;
    ps += v.psnr_db;
    ss += v.ssim;
    rep.per_image_visual.push_back(v);
  }
  const double n = std::max<Eigen::Index>(1, x.rows());
  rep.visual = {l2 / n, ps / n, ss / n};
  return rep;
}

StealthReport attention_stealth(const ViTParams<float>& params, const ImageBatch<float>& clean,
                                const Trigger<float>& trigger, const PayloadSpec& payload,
                                AttentionSpec attention) {
  const ModelConfig& cfg = params.config;
  const ImageGeometry geom = geometry_of(cfg);
  const int layers = attention.layer == 0 ? cfg.depth : attention.layer;
  if (layers < 1 || layers > cfg.depth) {
    throw std::out_of_range(fmt::format("attention layer {} outside [1, {}]", layers, cfg.depth));
  }
  const auto pd = params.cast<double>();
  StealthReport rep;
  double l2 = 0, ap = 0, ar = 0;
  const int chunk = 128;
  for (Eigen::Index start = 0; start < clean.images.rows(); start += chunk) {
    const Eigen::Index n = std::min<Eigen::Index>(chunk, clean.images.rows() - start);
    const Mat<float> rows = clean.images.middleRows(start, n);
    const Mat<float> poisoned = apply_payload(rows, trigger, payload, geom, static_cast<int>(start));
    const auto fc = forward(pd, Mat<double>(rows.cast<double>()));
    const auto fp = forward(pd, Mat<double>(poisoned.cast<double>()));
    for (Eigen::Index r = 0; r < n; ++r) {
      Mat<double> mc = attention_map(fc.attention[r], layers);
      Mat<double> mp = attention_map(fp.attention[r], layers);
      if (attention.compare == AttentionCompare::kClassRow) {
        mc = Mat<double>(mc.topRows(1));
        mp = Mat<double>(mp.topRows(1));
      }
      AttentionStealth a;
      a.l2 = (mp - mc).norm();
      const Mat<double> nc = mc / mc.maxCoeff();
      const Mat<double> np = mp / mp.maxCoeff();
      const double mse = (np - nc).squaredNorm() / static_cast<double>(nc.size());
      a.apsnr_db = mse == 0.0 ? kInf : 10.0 * std::log10(1.0 / mse);
      a.ares = (np - nc).cwiseAbs().mean();
      l2 += a.l2;
      ap += a.apsnr_db;
      ar += a.ares;
      rep.per_image_attention.push_back(a);
    }
  }
  const double n = std::max<Eigen::Index>(1, clean.images.rows());
  rep.attention = {l2 / n, ap / n, ar / n};
  return rep;
}

void CsvTable::add(std::vector<std::string> row) {
  if (row.size() != header.size()) throw DimensionError("csv row width differs from the header");
  rows.push_back(std::move(row));
}

void CsvTable::write(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IngestionError(fmt::format("{}: cannot write table", path.string()));
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t k = 0; k < cells.size(); ++k) out << (k ? "," : "") << cells[k];
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
}

std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  if (std::isnan(v)) return "NaN";
  return fmt::format("{:.4f}", v);
}

}  // namespace pasta
