#include "pasta/trigger.hpp"

#include <algorithm>
#include <set>

#include <fmt/format.h>

#include "pasta/container.hpp"

namespace pasta {

namespace {

constexpr char kTriggerVersion[] = "pasta-trig-v1";

void check_index(PatchIndex index, const ImageGeometry& geom) {
  if (!index.valid(geom.grid())) {
    throw std::out_of_range(
        fmt::format("patch ({}, {}) outside a {}x{} grid", index.row, index.col, geom.grid(),
                    geom.grid()));
  }
}

nlohmann::json to_json(const std::vector<PatchIndex>& v) {
  auto out = nlohmann::json::array();
  for (const auto& p : v) out.push_back({p.row, p.col});
  return out;
}

std::vector<PatchIndex> from_json(const nlohmann::json& j) {
  std::vector<PatchIndex> out;
  for (const auto& e : j) out.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
  return out;
}

}  // namespace

PatchMask make_mask(PatchIndex index, const ImageGeometry& geom) {
  check_index(index, geom);
  const int p = geom.patch_size;
  PatchMask mask = PatchMask::Zero(geom.image_size, geom.image_size);
  mask.block(index.row * p, index.col * p, p, p).setOnes();
  return mask;
}

Trigger<float> init_trigger(const ImageGeometry& geom, float low, float upp, std::uint64_t seed,
                            double range_fraction) {
  if (low > upp) throw ConfigError("trigger lower bound exceeds upper bound");
  if (!(range_fraction >= 0)) throw ConfigError("trigger init fraction must be non-negative");
  Trigger<float> t;
  t.channels = geom.channels;
  t.patch_size = geom.patch_size;
  t.low = low;
  t.upp = upp;
  t.values.resize(geom.patch_dim());
  Rng rng(seed);
  const auto half = static_cast<float>(range_fraction * (upp - low));
  std::uniform_real_distribution<float> u(-half, half);
  for (Eigen::Index k = 0; k < t.values.size(); ++k) t.values(k) = u(rng);
  return clamp_trigger(t);
}

template <typename S>
void insert_sup_inplace(S* image, const S* trigger, PatchIndex index, const ImageGeometry& geom) {
  check_index(index, geom);
  const int p = geom.patch_size;
  for (int ch = 0; ch < geom.channels; ++ch)
    for (int py = 0; py < p; ++py)
      for (int px = 0; px < p; ++px)
        image[geom.pixel(ch, index.row * p + py, index.col * p + px)] +=
            trigger[(ch * p + py) * p + px];
}

template <typename S>
void insert_rep_inplace(S* image, const S* pattern, PatchIndex index, const ImageGeometry& geom) {
  check_index(index, geom);
  const int p = geom.patch_size;
  for (int ch = 0; ch < geom.channels; ++ch)
    for (int py = 0; py < p; ++py)
      for (int px = 0; px < p; ++px)
        image[geom.pixel(ch, index.row * p + py, index.col * p + px)] =
            pattern[(ch * p + py) * p + px];
}

template <typename S>
Vec<S> extract_patch(const S* image, PatchIndex index, const ImageGeometry& geom) {
  check_index(index, geom);
  const int p = geom.patch_size;
  Vec<S> out(geom.patch_dim());
  for (int ch = 0; ch < geom.channels; ++ch)
    for (int py = 0; py < p; ++py)
      for (int px = 0; px < p; ++px)
        out((ch * p + py) * p + px) = image[geom.pixel(ch, index.row * p + py, index.col * p + px)];
  return out;
}

template <typename S>
Vec<S> insert_sup(const Vec<S>& x, const Trigger<S>& t, PatchIndex index,
                  const ImageGeometry& geom) {
  if (x.size() != geom.image_dim() || t.values.size() != geom.patch_dim()) {
    throw DimensionError("insert_sup: image or trigger shape does not match the geometry");
  }
  Vec<S> out = x;
  insert_sup_inplace(out.data(), t.values.data(), index, geom);
  return out;
}

template <typename S>
Vec<S> insert_rep(const Vec<S>& x, const Vec<S>& pattern, PatchIndex index,
                  const ImageGeometry& geom) {
  if (x.size() != geom.image_dim() || pattern.size() != geom.patch_dim()) {
    throw DimensionError("insert_rep: image or pattern shape does not match the geometry");
  }
  Vec<S> out = x;
  insert_rep_inplace(out.data(), pattern.data(), index, geom);
  return out;
}

template <typename S>
Vec<S> insert_blend(const Vec<S>& x, S m, const Vec<S>& pattern) {
  if (!(m >= S(0) && m <= S(1))) throw std::domain_error("blend factor must lie in [0, 1]");
  if (x.size() != pattern.size()) throw DimensionError("insert_blend: pattern size mismatch");
  if (m == S(0)) return x;
  if (m == S(1)) return pattern;
  return x * (S(1) - m) + pattern * m;
}

void MISConfig::validate(int grid) const {
  if (center.empty() || corner.empty()) throw ConfigError("MIS candidate sets must be non-empty");
  std::set<PatchIndex> seen;
  for (const auto* set : {&center, &corner}) {
    for (const auto& p : *set) {
      if (!p.valid(grid)) {
        throw ConfigError(fmt::format("MIS location ({}, {}) outside the grid", p.row, p.col));
      }
      if (!seen.insert(p).second) {
        throw ConfigError(fmt::format("MIS location ({}, {}) listed twice", p.row, p.col));
      }
    }
  }
}

PatchIndex mis_sample(const MISConfig& mis, Rng& rng) {
  if (mis.center.empty() || mis.corner.empty()) {
    throw ConfigError("MIS candidate sets must be non-empty");
  }
  std::uniform_int_distribution<std::size_t> top(0, mis.center.size());
  const std::size_t pick = top(rng);
  if (pick < mis.center.size()) return mis.center[pick];
  std::uniform_int_distribution<std::size_t> inner(0, mis.corner.size() - 1);
  return mis.corner[inner(rng)];
}

MISConfig default_mis(int grid) {
  if (grid < 4) throw ConfigError(fmt::format("default MIS needs a grid of at least 4, got {}", grid));
  const int q = grid / 4;
  const int r = grid - 1 - q;
  const int c = grid / 2;
  MISConfig mis;
  mis.corner = {{0, 0}, {0, grid - 1}, {grid - 1, 0}, {grid - 1, grid - 1}};
  for (PatchIndex p : {PatchIndex{q, q}, PatchIndex{q, r}, PatchIndex{c, c}, PatchIndex{r, q},
                       PatchIndex{r, r}}) {
    const bool dup = std::find(mis.center.begin(), mis.center.end(), p) != mis.center.end();
    const bool corner = std::find(mis.corner.begin(), mis.corner.end(), p) != mis.corner.end();
    if (!dup && !corner) mis.center.push_back(p);
  }
  return mis;
}

LocationPolicy LocationPolicy::mis(MISConfig config) {
  LocationPolicy p;
  p.kind_ = Kind::kMis;
  p.mis_ = std::move(config);
  return p;
}

LocationPolicy LocationPolicy::fixed(PatchIndex index) { return uniform({index}); }

LocationPolicy LocationPolicy::uniform(std::vector<PatchIndex> locations) {
  if (locations.empty()) throw ConfigError("location policy needs at least one location");
  LocationPolicy p;
  p.kind_ = Kind::kUniform;
  p.locations_ = std::move(locations);
  p.mis_.center = p.locations_;
  return p;
}

PatchIndex LocationPolicy::sample(Rng& rng) const {
  if (kind_ == Kind::kMis) return mis_sample(mis_, rng);
  if (locations_.size() == 1) return locations_.front();
  std::uniform_int_distribution<std::size_t> pick(0, locations_.size() - 1);
  return locations_[pick(rng)];
}

bool LocationPolicy::valid() const {
  if (kind_ == Kind::kMis) return !mis_.center.empty() && !mis_.corner.empty();
  return !locations_.empty();
}

std::string LocationPolicy::describe() const {
  auto list = [](const std::vector<PatchIndex>& v) {
    std::string s;
    for (const auto& p : v) s += fmt::format("({},{})", p.row, p.col);
    return s;
  };
  if (kind_ == Kind::kMis) return "mis ctr=" + list(mis_.center) + " cor=" + list(mis_.corner);
  return "uniform " + list(locations_);
}

template <typename S>
Trigger<S> scale_to_l2(const Trigger<S>& t, S target) {
  const S current = t.norm();
  if (!(current > S(0))) throw std::domain_error("cannot rescale an all-zero trigger");
  if (target < S(0)) throw std::domain_error("target l2 norm must be non-negative");
  Trigger<S> out = t;
  out.values *= target / current;
  return out;
}

template <typename S>
Trigger<S> clamp_trigger(const Trigger<S>& t) {
  if (t.low > t.upp) throw ConfigError("trigger lower bound exceeds upper bound");
  Trigger<S> out = t;
  out.values = t.values.cwiseMax(t.low).cwiseMin(t.upp);
  return out;
}

void save_trigger(const TriggerFile& file, const std::filesystem::path& path) {
  const auto& t = file.trigger;
  Container box;
  box.version = kTriggerVersion;
  box.header["shape"] = {t.channels, t.patch_size, t.patch_size};
  box.header["bounds"] = {t.low, t.upp};
  box.header["seed"] = file.seed;
  box.header["mis"] = {{"center", to_json(file.mis.center)}, {"corner", to_json(file.mis.corner)}};
  box.payload.assign(t.values.data(), t.values.data() + t.values.size());
  write_container(path, box);
}

TriggerFile load_trigger(const std::filesystem::path& path) {
  const Container box = read_container(path, kTriggerVersion);
  TriggerFile f;
  try {
    const auto shape = box.header.at("shape").get<std::vector<int>>();
    if (shape.size() != 3 || shape[1] != shape[2]) throw IngestionError("bad trigger shape");
    f.trigger.channels = shape[0];
    f.trigger.patch_size = shape[1];
    f.trigger.low = box.header.at("bounds").at(0);
    f.trigger.upp = box.header.at("bounds").at(1);
    f.seed = box.header.at("seed");
    f.mis.center = from_json(box.header.at("mis").at("center"));
    f.mis.corner = from_json(box.header.at("mis").at("corner"));
  } catch (const nlohmann::json::exception& ex) {
    throw IngestionError(fmt::format("{}: malformed trigger header ({})", path.string(), ex.what()));
  }
  const std::size_t count = static_cast<std::size_t>(f.trigger.channels) * f.trigger.patch_size *
                            f.trigger.patch_size;
  if (box.payload.size() != count) throw IngestionError(path.string() + ": trigger payload size");
  f.trigger.values = Eigen::Map<const Vec<float>>(box.payload.data(), static_cast<Eigen::Index>(count));
  return f;
}

#define PASTA_INSTANTIATE_TRIGGER(S)                                                          \
  template void insert_sup_inplace<S>(S*, const S*, PatchIndex, const ImageGeometry&);        \
  template void insert_rep_inplace<S>(S*, const S*, PatchIndex, const ImageGeometry&);        \
  template Vec<S> extract_patch<S>(const S*, PatchIndex, const ImageGeometry&);               \
  template Vec<S> insert_sup<S>(const Vec<S>&, const Trigger<S>&, PatchIndex,                 \
                                const ImageGeometry&);                                        \
  template Vec<S> insert_rep<S>(const Vec<S>&, const Vec<S>&, PatchIndex,                     \
                                const ImageGeometry&);                                        \
  template Vec<S> insert_blend<S>(const Vec<S>&, S, const Vec<S>&);                           \
  template Trigger<S> scale_to_l2<S>(const Trigger<S>&, S);                                   \
  template Trigger<S> clamp_trigger<S>(const Trigger<S>&);

PASTA_INSTANTIATE_TRIGGER(float)
PASTA_INSTANTIATE_TRIGGER(double)

}  // namespace pasta
