#include "pasta/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <openssl/evp.h>

namespace pasta {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

ExperimentConfig ExperimentConfig::preset_named(const std::string& name) {
  ExperimentConfig c;
  c.preset = name;
  c.out_dir = fs::path("runs") / name;
  // Shared attack schedule.
  c.attack.epochs = 15;
  c.attack.trigger_epochs = 3;
  c.attack.model_epochs = 2;
  c.attack.trigger_lr = 10.0;
  c.attack.trigger_fraction = 0.1;
  c.attack.trigger_init = 0.05;
  c.attack.poison_ratio = 0.05;
  c.attack.model_opt.lr = 5e-5;
  c.attack.trigger_weights = {0.03, 0.005};
  c.attack.model_weights = {0.0, 0.005};
  if (name == "desk") {
    c.seed = 1;
    c.dataset.kind = "cifar10";
    if (const char* env = std::getenv("PASTA_CIFAR10_ROOT")) {
      c.dataset.root = env;
    } else {
      c.dataset.root = "data/cifar-10-batches-bin";
    }
    c.dataset.train_subset = 10000;
    c.dataset.test_subset = 2000;
    c.pretrain.epochs = 30;
  } else if (name == "proxy") {
    c.seed = 1;
    c.dataset.kind = "synthetic";
    c.dataset.root = c.out_dir / "synthetic";
    c.dataset.synthetic_train_per_batch = 2000;
    c.dataset.synthetic_test = 2000;
    c.dataset.train_subset = 3000;
    c.dataset.test_subset = 500;
    c.model.depth = 4;
    c.model.embed_dim = 64;
    c.model.num_heads = 4;
    c.model.mlp_ratio = 2;
    c.pretrain.epochs = 15;
    c.defenses.patch_ops = {"drop_shuffle"};
    c.defenses.repetitions = 20;
    c.defenses.calibration = 300;
    c.defenses.strip_blends = 20;
    c.defenses.strip_samples = 100;
  } else if (name == "smoke") {
    c.seed = 1;
    c.dataset.kind = "synthetic";
    c.dataset.root = c.out_dir / "synthetic";
    c.dataset.synthetic_train_per_batch = 40;
    c.dataset.synthetic_test = 40;
    c.dataset.train_subset = 120;
    c.dataset.test_subset = 30;
    c.model.depth = 1;
    c.model.embed_dim = 16;
    c.model.num_heads = 2;
    c.model.mlp_ratio = 2;
    c.model.patch_size = 8;
    c.pretrain.epochs = 1;
    c.pretrain.batch_size = 32;
    c.attack.epochs = 1;
    c.attack.trigger_epochs = 1;
    c.attack.model_epochs = 1;
    c.attack.batch_size = 32;
    c.payloads = {"random:k=1", "random:k=4", "fixed:k=2"};
    c.defenses.repetitions = 3;
    c.defenses.calibration = 20;
    c.defenses.strip_blends = 4;
    c.defenses.strip_samples = 10;
    c.defenses.strip_bins = 5;
    c.defenses.prune_ratios = {0.0, 0.5};
    c.observe.epochs = 1;
    c.observe.l2_sweep = {0.25, 1.0};
  } else {
    throw ConfigError(fmt::format("unknown preset '{}' (desk, proxy, smoke)", name));
  }
  const int g = c.model.grid_size();
  c.single_location = {g / 2, g / 2};
  c.badnets_location = {g / 2, g / 2};
  c.resolve();
  return c;
}

void ExperimentConfig::resolve() { attack.seed = seed; }

void ExperimentConfig::validate() const {
  model.validate();
  attack.validate(model.num_classes);
  attack.model_opt.validate();
  pretrain.opt.validate();
  if (pretrain.epochs < 0 || pretrain.batch_size < 1 || pretrain.warmup_epochs < 0) {
    throw ConfigError("invalid pretraining schedule");
  }
  dataset.norm.validate(model.channels);
  if (dataset.kind == "cifar10" || dataset.kind == "folder") {
    if (!fs::exists(dataset.root)) {
      throw ConfigError(fmt::format("dataset root '{}' does not exist", dataset.root.string()));
    }
  } else if (dataset.kind == "synthetic") {
    if (dataset.root.empty()) throw ConfigError("synthetic dataset needs a root directory");
    if (dataset.synthetic_train_per_batch < 1 || dataset.synthetic_test < 1) {
      throw ConfigError("synthetic dataset sizes must be positive");
    }
  } else {
    throw ConfigError(fmt::format("unknown dataset kind '{}'", dataset.kind));
  }
  if (dataset.kind != "folder" && (model.image_size != 32 || model.channels != 3 ||
                                   model.num_classes != 10)) {
    throw ConfigError("CIFAR-format data needs a 32 x 32 RGB model with 10 classes");
  }
  if (dataset.train_subset < 0 || dataset.test_subset < 0) {
    throw ConfigError("subset sizes must be non-negative");
  }
  if (!(dataset.folder_test_fraction > 0 && dataset.folder_test_fraction < 1)) {
    throw ConfigError("folder_test_fraction must lie in (0, 1)");
  }
  const int g = model.grid_size();
  if (!single_location.valid(g) || !badnets_location.valid(g)) {
    throw ConfigError("baseline location outside the patch grid");
  }
  for (const auto& p : payload_specs()) p.validate(g);
  for (const auto& op : defenses.patch_ops) {
    if (parse_patch_op(op) == PatchOp::kIdentity) throw ConfigError("identity is not a defense");
  }
  if (defenses.repetitions < 1 || defenses.calibration < 1 || defenses.strip_blends < 1 ||
      defenses.strip_samples < 1 || defenses.strip_bins < 1) {
    throw ConfigError("defense counts must be positive");
  }
  for (int w : defenses.windows) {
    if (w < 1 || w % 2 == 0) throw ConfigError(fmt::format("gaussian window {} is not odd", w));
  }
  for (double r : defenses.prune_ratios) {
    if (!(r >= 0 && r < 1)) throw ConfigError("prune ratios must lie in [0, 1)");
  }
  if (observe.epochs < 1 || !(observe.sup_l2 > 0) || !(observe.rep_l2 > 0)) {
    throw ConfigError("observe settings must be positive");
  }
  for (double l2 : observe.l2_sweep) {
    if (!(l2 > 0)) throw ConfigError("observe l2 values must be positive");
  }
}

std::vector<PayloadSpec> ExperimentConfig::payload_specs() const {
  std::vector<PayloadSpec> out;
  for (std::size_t i = 0; i < payloads.size(); ++i) {
    out.push_back(PayloadSpec::parse(payloads[i], model.grid_size(), derive_seed(seed, "payload", i)));
  }
  return out;
}

namespace {

template <typename T>
std::string join(const std::vector<T>& v) {
  return fmt::format("{}", fmt::join(v, " "));
}

template <typename T>
std::vector<T> split_as(const std::string& text) {
  std::istringstream in(text);
  std::vector<T> out;
  std::string tok;
  while (in >> tok) {
    std::istringstream one(tok);
    T v;
    if (!(one >> v) || !one.eof()) throw ConfigError(fmt::format("cannot parse '{}'", tok));
    out.push_back(v);
  }
  return out;
}

template <>
std::vector<std::string> split_as<std::string>(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::string loc_text(PatchIndex p) { return fmt::format("{} {}", p.row, p.col); }

PatchIndex loc_parse(const std::string& text) {
  auto v = split_as<int>(text);
  if (v.size() != 2) throw ConfigError(fmt::format("location '{}' needs two integers", text));
  return {v[0], v[1]};
}

const char* compare_name(AttentionCompare c) {
  return c == AttentionCompare::kClassRow ? "class_row" : "full_map";
}

AttentionCompare compare_parse(const std::string& s) {
  if (s == "full_map") return AttentionCompare::kFullMap;
  if (s == "class_row") return AttentionCompare::kClassRow;
  throw ConfigError(fmt::format("unknown attention comparison '{}'", s));
}

class IniReader {
 public:
  explicit IniReader(const pt::ptree& tree) : tree_(tree) {}

  template <typename T>
  void get(const std::string& key, T& out) const {
    auto node = tree_.get_optional<std::string>(key);
    if (!node) return;
    std::istringstream in(*node);
    T v;
    if (!(in >> v) || !(in >> std::ws).eof()) {
      throw ConfigError(fmt::format("cannot parse {} = '{}'", key, *node));
    }
    out = v;
  }
  void get(const std::string& key, std::string& out) const {
    if (auto node = tree_.get_optional<std::string>(key)) out = *node;
  }
  void get(const std::string& key, fs::path& out) const {
    if (auto node = tree_.get_optional<std::string>(key)) out = *node;
  }
  void get(const std::string& key, bool& out) const {
    auto node = tree_.get_optional<std::string>(key);
    if (!node) return;
    if (*node == "true") out = true;
    else if (*node == "false") out = false;
    else throw ConfigError(fmt::format("{} must be true or false", key));
  }
  template <typename T>
  void list(const std::string& key, std::vector<T>& out) const {
    if (auto node = tree_.get_optional<std::string>(key)) out = split_as<T>(*node);
  }

 private:
  const pt::ptree& tree_;
};

}  // namespace

std::string to_ini(const ExperimentConfig& c) {
  pt::ptree t;
  auto put = [&](const std::string& key, const auto& v) {
    using V = std::decay_t<decltype(v)>;
    if constexpr (std::is_same_v<V, bool>) {
      t.put(key, v ? "true" : "false");
    } else if constexpr (std::is_same_v<V, fs::path>) {
      t.put(key, v.string());
    } else if constexpr (std::is_same_v<V, std::string>) {
      t.put(key, v);
    } else {
      t.put(key, fmt::format("{}", v));
    }
  };
  put("run.preset", c.preset);
  put("run.seed", c.seed);
  put("run.out_dir", c.out_dir);

  const auto& d = c.dataset;
  put("dataset.kind", d.kind);
  put("dataset.root", d.root);
  put("dataset.train_subset", d.train_subset);
  put("dataset.test_subset", d.test_subset);
  put("dataset.folder_test_fraction", d.folder_test_fraction);
  put("dataset.synthetic_train_per_batch", d.synthetic_train_per_batch);
  put("dataset.synthetic_test", d.synthetic_test);
  put("dataset.mean", join(d.norm.mean));
  put("dataset.std", join(d.norm.std));

  const auto& m = c.model;
  put("model.image_size", m.image_size);
  put("model.channels", m.channels);
  put("model.patch_size", m.patch_size);
  put("model.embed_dim", m.embed_dim);
  put("model.num_heads", m.num_heads);
  put("model.depth", m.depth);
  put("model.mlp_ratio", m.mlp_ratio);
  put("model.num_classes", m.num_classes);
  put("model.use_pos_embed", m.use_pos_embed);

  const auto& p = c.pretrain;
  put("pretrain.epochs", p.epochs);
  put("pretrain.batch_size", p.batch_size);
  put("pretrain.lr", p.opt.lr);
  put("pretrain.beta1", p.opt.beta1);
  put("pretrain.beta2", p.opt.beta2);
  put("pretrain.eps", p.opt.eps);
  put("pretrain.weight_decay", p.opt.weight_decay);
  put("pretrain.warmup_epochs", p.warmup_epochs);
  put("pretrain.augment", p.augment);

  const auto& a = c.attack;
  put("attack.epochs", a.epochs);
  put("attack.trigger_epochs", a.trigger_epochs);
  put("attack.model_epochs", a.model_epochs);
  put("attack.trigger_lr", a.trigger_lr);
  put("attack.model_lr", a.model_opt.lr);
  put("attack.model_beta1", a.model_opt.beta1);
  put("attack.model_beta2", a.model_opt.beta2);
  put("attack.model_eps", a.model_opt.eps);
  put("attack.model_weight_decay", a.model_opt.weight_decay);
  put("attack.poison_ratio", a.poison_ratio);
  put("attack.trigger_fraction", a.trigger_fraction);
  put("attack.trigger_init", a.trigger_init);
  put("attack.target_label", a.target_label);
  put("attack.batch_size", a.batch_size);
  put("attack.alpha1", a.trigger_weights.alpha1);
  put("attack.alpha2", a.trigger_weights.alpha2);
  put("attack.model_alpha2", a.model_weights.alpha2);
  put("attack.attention_layer", a.attention.layer);
  put("attack.attention_compare", std::string(compare_name(a.attention.compare)));
  put("attack.single_location", loc_text(c.single_location));
  put("attack.badnets_location", loc_text(c.badnets_location));

  put("evaluation.payloads", join(c.payloads));

  const auto& f = c.defenses;
  put("defense.patch_ops", join(f.patch_ops));
  put("defense.dbavt", f.dbavt);
  put("defense.bavt", f.bavt);
  put("defense.gaussian", f.gaussian);
  put("defense.repetitions", f.repetitions);
  put("defense.calibration", f.calibration);
  put("defense.windows", join(f.windows));
  put("defense.strip_blends", f.strip_blends);
  put("defense.strip_samples", f.strip_samples);
  put("defense.strip_bins", f.strip_bins);
  put("defense.prune_ratios", join(f.prune_ratios));

  put("observe.epochs", c.observe.epochs);
  put("observe.sup_l2", c.observe.sup_l2);
  put("observe.rep_l2", c.observe.rep_l2);
  put("observe.l2_sweep", join(c.observe.l2_sweep));

  std::ostringstream out;
  pt::write_ini(out, t);
  return out.str();
}

ExperimentConfig from_ini(const std::string& text) {
  pt::ptree t;
  std::istringstream in(text);
  try {
    pt::read_ini(in, t);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(fmt::format("config line {}: {}", e.line(), e.message()));
  }
  static const std::vector<std::string> sections{"run",     "dataset", "model",   "pretrain",
                                                 "attack",  "evaluation", "defense", "observe"};
  for (const auto& [name, node] : t) {
    if (std::find(sections.begin(), sections.end(), name) == sections.end()) {
      throw ConfigError(fmt::format("unknown config section [{}]", name));
    }
  }
  IniReader r(t);
  std::string preset = "desk";
  r.get("run.preset", preset);
  ExperimentConfig c = ExperimentConfig::preset_named(preset);
  r.get("run.seed", c.seed);
  r.get("run.out_dir", c.out_dir);

  auto& d = c.dataset;
  r.get("dataset.kind", d.kind);
  r.get("dataset.root", d.root);
  r.get("dataset.train_subset", d.train_subset);
  r.get("dataset.test_subset", d.test_subset);
  r.get("dataset.folder_test_fraction", d.folder_test_fraction);
  r.get("dataset.synthetic_train_per_batch", d.synthetic_train_per_batch);
  r.get("dataset.synthetic_test", d.synthetic_test);
  r.list("dataset.mean", d.norm.mean);
  r.list("dataset.std", d.norm.std);

  auto& m = c.model;
  r.get("model.image_size", m.image_size);
  r.get("model.channels", m.channels);
  r.get("model.patch_size", m.patch_size);
  r.get("model.embed_dim", m.embed_dim);
  r.get("model.num_heads", m.num_heads);
  r.get("model.depth", m.depth);
  r.get("model.mlp_ratio", m.mlp_ratio);
  r.get("model.num_classes", m.num_classes);
  r.get("model.use_pos_embed", m.use_pos_embed);

  auto& p = c.pretrain;
  r.get("pretrain.epochs", p.epochs);
  r.get("pretrain.batch_size", p.batch_size);
  r.get("pretrain.lr", p.opt.lr);
  r.get("pretrain.beta1", p.opt.beta1);
  r.get("pretrain.beta2", p.opt.beta2);
  r.get("pretrain.eps", p.opt.eps);
  r.get("pretrain.weight_decay", p.opt.weight_decay);
  r.get("pretrain.warmup_epochs", p.warmup_epochs);
  r.get("pretrain.augment", p.augment);

  auto& a = c.attack;
  r.get("attack.epochs", a.epochs);
  r.get("attack.trigger_epochs", a.trigger_epochs);
  r.get("attack.model_epochs", a.model_epochs);
  r.get("attack.trigger_lr", a.trigger_lr);
  r.get("attack.model_lr", a.model_opt.lr);
  r.get("attack.model_beta1", a.model_opt.beta1);
  r.get("attack.model_beta2", a.model_opt.beta2);
  r.get("attack.model_eps", a.model_opt.eps);
  r.get("attack.model_weight_decay", a.model_opt.weight_decay);
  r.get("attack.poison_ratio", a.poison_ratio);
  r.get("attack.trigger_fraction", a.trigger_fraction);
  r.get("attack.trigger_init", a.trigger_init);
  r.get("attack.target_label", a.target_label);
  r.get("attack.batch_size", a.batch_size);
  r.get("attack.alpha1", a.trigger_weights.alpha1);
  r.get("attack.alpha2", a.trigger_weights.alpha2);
  r.get("attack.model_alpha2", a.model_weights.alpha2);
  r.get("attack.attention_layer", a.attention.layer);
  if (auto s = t.get_optional<std::string>("attack.attention_compare")) {
    a.attention.compare = compare_parse(*s);
  }
  if (auto s = t.get_optional<std::string>("attack.single_location")) {
    c.single_location = loc_parse(*s);
  }
  if (auto s = t.get_optional<std::string>("attack.badnets_location")) {
    c.badnets_location = loc_parse(*s);
  }

  r.list("evaluation.payloads", c.payloads);

  auto& f = c.defenses;
  r.list("defense.patch_ops", f.patch_ops);
  r.get("defense.dbavt", f.dbavt);
  r.get("defense.bavt", f.bavt);
  r.get("defense.gaussian", f.gaussian);
  r.get("defense.repetitions", f.repetitions);
  r.get("defense.calibration", f.calibration);
  r.list("defense.windows", f.windows);
  r.get("defense.strip_blends", f.strip_blends);
  r.get("defense.strip_samples", f.strip_samples);
  r.get("defense.strip_bins", f.strip_bins);
  r.list("defense.prune_ratios", f.prune_ratios);

  r.get("observe.epochs", c.observe.epochs);
  r.get("observe.sup_l2", c.observe.sup_l2);
  r.get("observe.rep_l2", c.observe.rep_l2);
  r.list("observe.l2_sweep", c.observe.l2_sweep);

  c.resolve();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
  std::ostringstream text;
  text << in.rdbuf();
  return from_ini(text.str());
}

void save_config(const ExperimentConfig& config, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError(fmt::format("cannot write config '{}'", path.string()));
  out << to_ini(config);
}

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
      throw std::runtime_error("sha256 init failed");
    }
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t bytes) {
    if (bytes > 0 && EVP_DigestUpdate(ctx_, data, bytes) != 1) {
      throw std::runtime_error("sha256 update failed");
    }
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_, md, &len) != 1) throw std::runtime_error("sha256 final failed");
    std::string out;
    for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", md[i]);
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(const void* data, std::size_t bytes) {
  Sha256 h;
  h.update(data, bytes);
  return h.hex();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError(fmt::format("cannot read '{}'", path.string()));
  Sha256 h;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json j;
  j["command"] = command;
  j["code_version"] = code_version;
  j["seed"] = seed;
  j["config"] = config;
  j["dataset_digest"] = dataset_digest;
  j["stage_seconds"] = nlohmann::json::array();
  for (const auto& [stage, s] : stage_seconds) {
    j["stage_seconds"].push_back({{"stage", stage}, {"seconds", s}});
  }
  j["files"] = nlohmann::json::array();
  for (const auto& f : files) {
    j["files"].push_back({{"path", f.path}, {"sha256", f.sha256}, {"bytes", f.bytes}});
  }
  j["notes"] = notes;
  return j;
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.code_version = j.at("code_version").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config = j.at("config").get<std::string>();
  m.dataset_digest = j.at("dataset_digest").get<std::string>();
  for (const auto& s : j.at("stage_seconds")) {
    m.stage_seconds.emplace_back(s.at("stage").get<std::string>(), s.at("seconds").get<double>());
  }
  for (const auto& f : j.at("files")) {
    m.files.push_back({f.at("path").get<std::string>(), f.at("sha256").get<std::string>(),
                       f.at("bytes").get<std::uintmax_t>()});
  }
  m.notes = j.value("notes", nlohmann::json::object());
  return m;
}

RunManifest RunManifest::read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError(fmt::format("cannot read manifest '{}'", path.string()));
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(fmt::format("malformed manifest '{}': {}", path.string(), e.what()));
  }
}

std::vector<std::string> RunManifest::verify(const fs::path& run_dir) const {
  std::vector<std::string> bad;
  for (const auto& f : files) {
    const fs::path p = run_dir / f.path;
    if (!fs::is_regular_file(p) || fs::file_size(p) != f.bytes || sha256_file(p) != f.sha256) {
      bad.push_back(f.path);
    }
  }
  return bad;
}

RunRecorder::RunRecorder(const ExperimentConfig& config, std::string command, fs::path run_dir)
    : dir_(std::move(run_dir)) {
  fs::create_directories(dir_);
  manifest_.command = std::move(command);
  manifest_.seed = config.seed;
  manifest_.config = to_ini(config);
  std::ofstream(dir_ / "config.ini") << manifest_.config;
}

fs::path RunRecorder::file(const std::string& relative) {
  fs::path p = dir_ / relative;
  fs::create_directories(p.parent_path());
  return p;
}

void RunRecorder::note(const std::string& key, nlohmann::json value) {
  manifest_.notes[key] = std::move(value);
}

void RunRecorder::record_stage(const std::string& stage,
                               std::chrono::steady_clock::time_point start) {
  const std::chrono::duration<double> d = std::chrono::steady_clock::now() - start;
  manifest_.stage_seconds.emplace_back(stage, d.count());
}

RunManifest RunRecorder::finish() {
  manifest_.files.clear();
  std::vector<fs::path> found;
  for (auto it = fs::recursive_directory_iterator(dir_); it != fs::recursive_directory_iterator();
       ++it) {
    if (it->is_directory() && fs::exists(it->path() / "manifest.json")) {
      it.disable_recursion_pending();
      continue;
    }
    if (!it->is_regular_file()) continue;
    if (it.depth() == 0 && it->path().filename() == "manifest.json") continue;
    found.push_back(it->path());
  }
  std::sort(found.begin(), found.end());
  for (const auto& p : found) {
    manifest_.files.push_back({fs::relative(p, dir_).generic_string(), sha256_file(p),
                               fs::file_size(p)});
  }
  std::ofstream out(dir_ / "manifest.json");
  out << manifest_.to_json().dump(2) << '\n';
  if (!out) throw IngestionError("cannot write manifest in " + dir_.string());
  return manifest_;
}

DatasetPair load_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.kind == "synthetic") {
    if (!fs::exists(spec.root / "test_batch.bin")) {
      write_synthetic_cifar(spec.root, spec.synthetic_train_per_batch, spec.synthetic_test,
                            derive_seed(seed, "synthetic"));
    }
    return load_cifar10(spec.root, {spec.train_subset, spec.test_subset, seed}, spec.norm);
  }
  if (spec.kind == "cifar10") {
    return load_cifar10(spec.root, {spec.train_subset, spec.test_subset, seed}, spec.norm);
  }
  if (spec.kind == "folder") {
    Dataset all = load_image_folder(spec.root, 32, spec.norm);
    return split_dataset(all, spec.folder_test_fraction, derive_seed(seed, "folder-split"));
  }
  throw ConfigError(fmt::format("unknown dataset kind '{}'", spec.kind));
}

std::string dataset_digest(const DatasetPair& data) {
  Sha256 h;
  for (const Dataset* d : {&data.train, &data.test}) {
    const std::int64_t dims[2] = {d->images.rows(), d->images.cols()};
    h.update(dims, sizeof dims);
    h.update(d->images.data(), sizeof(float) * static_cast<std::size_t>(d->images.size()));
    h.update(d->labels.data(), sizeof(int) * d->labels.size());
  }
  return h.hex();
}

ImageBatch<float> batch_of(const Dataset& d) { return d.all(); }

namespace {

void log_row(const std::string& name, const LogRow& row) {
  fmt::print(stderr, "[{}] epoch {} {} pass {}: clean {:.4f} backdoor {:.4f} visual {:.4f} attention {:.5f}\n",
             name, row.epoch, phase_name(row.phase), row.pass, row.report.clean,
             row.report.backdoor, row.report.visual, row.report.attention);
}

PayloadSpec with_insertion(PayloadSpec p, Insertion ins) {
  p.insertion = ins;
  return p;
}

// Rows of `d` whose label differs from the target.
ImageBatch<float> eligible_rows(const ImageBatch<float>& d, int target) {
  ImageBatch<float> out;
  const auto idx = asr_eligible(d.labels, target);
  out.images.resize(static_cast<Eigen::Index>(idx.size()), d.images.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.images.row(static_cast<Eigen::Index>(i)) = d.images.row(idx[i]);
    out.labels.push_back(d.labels[idx[i]]);
  }
  return out;
}

Mat<float> sample_rows(const Mat<float>& images, int count, std::uint64_t seed,
                       std::string_view stage) {
  const auto idx = subset_indices(static_cast<int>(images.rows()), count, seed, stage);
  Mat<float> out(static_cast<Eigen::Index>(idx.size()), images.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = images.row(idx[i]);
  return out;
}

Mat<float> first_rows(const Mat<float>& m, int count) {
  return m.topRows(std::min<Eigen::Index>(count, m.rows()));
}

}  // namespace

PretrainResult pretrain_stage(const ExperimentConfig& config, const DatasetPair& data,
                              RunRecorder& rec) {
  PretrainResult r = rec.timed("pretrain", [&] {
    return pretrain_clean(config.model, data.train, &data.test, config.pretrain,
                          config.seed);
  });
  save_checkpoint(r.params, rec.file("clean.ckpt"));
  CsvTable log{{"epoch", "train_loss", "val_accuracy"}, {}};
  for (std::size_t e = 0; e < r.train_loss.size(); ++e) {
    log.add({std::to_string(e + 1), format_metric(r.train_loss[e]),
             e < r.val_accuracy.size() ? format_metric(r.val_accuracy[e]) : ""});
  }
  log.write(rec.file("pretrain_log.csv"));
  const double acc = accuracy(r.params, data.test.all());
  rec.note("clean_accuracy", acc);
  return r;
}

TrainResult attack_stage(const ExperimentConfig& config, const DatasetPair& data,
                         const ViTParams<float>& clean, const std::string& baseline,
                         RunRecorder& rec) {
  TrainOptions opts;
  opts.on_row = [&](const LogRow& row) { log_row(baseline, row); };
  const AttackConfig& a = config.attack;
  TrainResult r = rec.timed("attack-" + baseline, [&] {
    if (baseline == "pasta") return run_pasta(clean, data.train, a, opts);
    if (baseline == "single") {
      return run_single_location_baseline(clean, data.train, a, config.single_location, opts);
    }
    if (baseline == "badnets") {
      return run_badnets_rep_baseline(clean, data.train, a,
                                      badnets_pattern(config.model, data.train.norm),
                                      config.badnets_location, opts);
    }
    if (baseline == "no_attn") return run_no_attn_ablation(clean, data.train, a, opts);
    throw ConfigError(fmt::format("unknown attack '{}' (pasta, single, badnets, no_attn)", baseline));
  });
  save_checkpoint(r.params, rec.file(baseline + ".ckpt"));
  save_trigger({r.trigger, config.seed, default_mis(config.model.grid_size())},
               rec.file(baseline + ".trig"));
  write_loss_log(r.log, rec.file(baseline + "_loss.csv"));
  rec.note(baseline + "_accuracy", accuracy(r.params, data.test.all()));
  rec.note(baseline + "_trigger_norm", static_cast<double>(r.trigger.norm()));
  return r;
}

AttackArtifact artifact_of(const TrainResult& r) {
  return {r.name, r.params, r.trigger,
          r.name == "badnets" ? Insertion::kReplace : Insertion::kSuperimpose};
}

TREHeatmap eval_tre_stage(const AttackArtifact& a, const DatasetPair& data, int target_label,
                          RunRecorder& rec, const std::string& stem) {
  TREHeatmap h = rec.timed("tre-" + stem, [&] {
    return tre_heatmap(a.params, a.trigger, data.test.all(), target_label, a.insertion);
  });
  emit_heatmap(h, rec.file(stem));
  rec.note("tre_" + stem, h.tre);
  return h;
}

std::vector<StealthRow> eval_stealth_stage(const std::vector<AttackArtifact>& methods,
                                           const DatasetPair& data, std::uint64_t seed,
                                           RunRecorder& rec) {
  std::vector<StealthRow> rows;
  CsvTable visual{{"method", "l2", "psnr_db", "ssim"}, {}};
  CsvTable attention{{"method", "l2", "apsnr_db", "ares"}, {}};
  for (const auto& m : methods) {
    const ImageGeometry g{data.test.channels, data.test.image_size, m.trigger.patch_size};
    const PayloadSpec payload =
        with_insertion(PayloadSpec::random(1, derive_seed(seed, "stealth")), m.insertion);
    StealthRow row{m.name, {}};
    rec.timed("stealth-" + m.name, [&] {
      StealthReport v = visual_stealth(data.test, data.test.all(), m.trigger, payload, g);
      StealthReport at = attention_stealth(m.params, data.test.all(), m.trigger, payload);
      row.report.visual = v.visual;
      row.report.per_image_visual = std::move(v.per_image_visual);
      row.report.attention = at.attention;
      row.report.per_image_attention = std::move(at.per_image_attention);
    });
    visual.add({m.name, format_metric(row.report.visual.l2), format_metric(row.report.visual.psnr_db),
                format_metric(row.report.visual.ssim)});
    attention.add({m.name, format_metric(row.report.attention.l2),
                   format_metric(row.report.attention.apsnr_db),
                   format_metric(row.report.attention.ares)});
    rows.push_back(std::move(row));
  }
  visual.write(rec.file("visual_stealth.csv"));
  attention.write(rec.file("attention_stealth.csv"));
  return rows;
}

DefenseSummary defend_stage(const ExperimentConfig& config, const AttackArtifact& a,
                            const DatasetPair& data, RunRecorder& rec) {
  DefenseSummary out;
  const auto& f = config.defenses;
  const int target = config.attack.target_label;
  const ImageGeometry geom = geometry_of(config.model);
  const auto fill = data.test.norm.floor();
  const ImageBatch<float> test = data.test.all();
  std::vector<PayloadSpec> payloads = config.payload_specs();
  for (auto& p : payloads) p.insertion = a.insertion;
  const PayloadSpec single =
      with_insertion(PayloadSpec::random(1, derive_seed(config.seed, "defend-single")), a.insertion);

  if (!f.patch_ops.empty()) {
    PatchOpSetup setup;
    setup.ops.clear();
    for (const auto& op : f.patch_ops) setup.ops.push_back(parse_patch_op(op));
    setup.repetitions = f.repetitions;
    setup.fill = fill;
    setup.seed = derive_seed(config.seed, "defend-patch-ops");
    out.patch_ops = rec.timed("patch-ops", [&] {
      return patch_op_evaluation(a.params, a.trigger, test, payloads, target, setup);
    });
    write_defense_table(out.patch_ops, rec.file("defense_patch_ops.csv"));
  }
  if (f.dbavt) {
    const Mat<float> calib =
        sample_rows(data.train.images, f.calibration, config.seed, "dbavt-calibration");
    const ImageBatch<float> elig = eligible_rows(test, target);
    const Mat<float> poisoned = apply_payload(elig.images, a.trigger, single, geom);
    out.dbavt = rec.timed("dbavt", [&] {
      return dbavt_detect(a.params, calib, test.images, poisoned, geom, fill, f.repetitions,
                          derive_seed(config.seed, "defend-dbavt"));
    });
    CsvTable t{{"fnr", "tpr", "drop_threshold", "shuffle_threshold", "calibration", "clean",
                "poisoned", "repetitions"},
               {}};
    t.add({format_metric(out.dbavt.fnr), format_metric(out.dbavt.tpr),
           format_metric(out.dbavt.drop_threshold), format_metric(out.dbavt.shuffle_threshold),
           std::to_string(calib.rows()), std::to_string(test.images.rows()),
           std::to_string(poisoned.rows()), std::to_string(f.repetitions)});
    t.write(rec.file("defense_dbavt.csv"));
  }
  if (f.bavt) {
    rec.timed("bavt", [&] {
      for (const auto& p : payloads) {
        out.bavt.push_back(bavt_evaluation(a.params, a.trigger, test, p, target, fill));
      }
    });
    write_defense_table(out.bavt, rec.file("defense_bavt.csv"));
  }
  if (f.gaussian) {
    rec.timed("gaussian", [&] {
      for (int w : f.windows) {
        for (const auto& p : payloads) {
          out.gaussian.push_back(gaussian_evaluation(a.params, a.trigger, test, p, target, w));
        }
      }
    });
    write_defense_table(out.gaussian, rec.file("defense_gaussian.csv"));
  }
  return out;
}

StripSummary strip_stage(const ExperimentConfig& config, const AttackArtifact& a,
                         const DatasetPair& data, RunRecorder& rec) {
  const auto& f = config.defenses;
  const int target = config.attack.target_label;
  const ImageGeometry geom = geometry_of(config.model);
  const PayloadSpec single =
      with_insertion(PayloadSpec::random(1, derive_seed(config.seed, "strip-payload")), a.insertion);
  const Mat<float> pool =
      sample_rows(data.train.images, f.calibration, config.seed, "strip-pool");
  const Mat<float> clean = first_rows(data.test.images, f.strip_samples);
  const ImageBatch<float> elig = eligible_rows(data.test.all(), target);
  const Mat<float> poisoned =
      apply_payload(first_rows(elig.images, f.strip_samples), a.trigger, single, geom);
  StripSummary s;
  rec.timed("strip", [&] {
    const std::uint64_t seed = derive_seed(config.seed, "strip-blends");
    s.clean = strip_scores(a.params, clean, pool, f.strip_blends, seed);
    s.poisoned = strip_scores(a.params, poisoned, pool, f.strip_blends, seed);
  });
  s.histogram = strip_histogram(s.clean, s.poisoned, f.strip_bins);
  write_histogram(s.histogram, rec.file("strip_histogram.csv"));
  CsvTable t{{"set", "index", "entropy"}, {}};
  for (std::size_t i = 0; i < s.clean.size(); ++i) {
    t.add({"clean", std::to_string(i), format_metric(s.clean[i])});
  }
  for (std::size_t i = 0; i < s.poisoned.size(); ++i) {
    t.add({"poisoned", std::to_string(i), format_metric(s.poisoned[i])});
  }
  t.write(rec.file("strip_entropy.csv"));
  return s;
}

std::vector<PrunePoint> prune_stage(const ExperimentConfig& config, const AttackArtifact& a,
                                    const DatasetPair& data, RunRecorder& rec) {
  const Mat<float> calib =
      sample_rows(data.train.images, config.defenses.calibration, config.seed, "prune-calibration");
  const PayloadSpec single =
      with_insertion(PayloadSpec::random(1, derive_seed(config.seed, "prune-payload")), a.insertion);
  auto points = rec.timed("prune", [&] {
    return prune_sweep(a.params, calib, config.defenses.prune_ratios, a.trigger, data.test.all(),
                       single, config.attack.target_label);
  });
  write_prune_curve(points, rec.file("prune_curve.csv"));
  return points;
}

namespace {

// Grid values as CSV (alpha1 rows, alpha2 columns) and a min-max scaled PGM.
void write_grid(const std::vector<double>& rows, const std::vector<double>& cols,
                const std::vector<double>& values, const fs::path& stem) {
  CsvTable t;
  t.header.push_back("alpha1\\alpha2");
  for (double c : cols) t.header.push_back(fmt::format("{}", c));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::vector<std::string> row{fmt::format("{}", rows[i])};
    for (std::size_t j = 0; j < cols.size(); ++j) row.push_back(format_metric(values[i * cols.size() + j]));
    t.add(std::move(row));
  }
  t.write(fs::path(stem).concat(".csv"));

  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double span = *hi - *lo;
  std::ofstream pgm(fs::path(stem).concat(".pgm"));
  pgm << "P2\n" << cols.size() << ' ' << rows.size() << "\n255\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const double v = values[i * cols.size() + j];
      const double u = span > 0 && std::isfinite(v) ? (v - *lo) / span : 0.0;
      pgm << (j ? " " : "") << static_cast<int>(std::lround(255.0 * u));
    }
    pgm << '\n';
  }
}

}  // namespace

std::vector<SweepCell> sweep_alpha(const ExperimentConfig& config, const DatasetPair& data,
                                   const ViTParams<float>& clean, const std::vector<double>& alpha1,
                                   const std::vector<double>& alpha2, RunRecorder& rec) {
  if (alpha1.empty() || alpha2.empty()) throw ConfigError("alpha grid is empty");
  std::vector<SweepCell> cells;
  const ImageGeometry geom = geometry_of(config.model);
  for (double a1 : alpha1) {
    for (double a2 : alpha2) {
      ExperimentConfig c = config;
      c.attack.trigger_weights.alpha1 = a1;
      c.attack.trigger_weights.alpha2 = a2;
      c.attack.model_weights.alpha2 = a2;
      const std::string name = fmt::format("a1_{}_a2_{}", a1, a2);
      c.out_dir = rec.dir() / "cells" / name;
      RunRecorder cell_rec(c, "sweep-alpha cell " + name, c.out_dir);
      cell_rec.set_dataset_digest(dataset_digest(data));
      TrainResult r = attack_stage(c, data, clean, "pasta", cell_rec);
      const PayloadSpec single = PayloadSpec::random(1, derive_seed(c.seed, "sweep-payload"));
      SweepCell cell;
      cell.alpha1 = a1;
      cell.alpha2 = a2;
      cell.acc = accuracy(r.params, data.test.all());
      cell.asr = asr(r.params, r.trigger, data.test.all(), single, c.attack.target_label);
      cell.visual_l2 = visual_stealth(data.test, data.test.all(), r.trigger, single, geom).visual.l2;
      cell.attention_l2 =
          attention_stealth(r.params, data.test.all(), r.trigger, single, c.attack.attention)
              .attention.l2;
      CsvTable m{{"alpha1", "alpha2", "acc", "asr", "visual_l2", "attention_l2"}, {}};
      m.add({fmt::format("{}", a1), fmt::format("{}", a2), format_metric(cell.acc),
             format_metric(cell.asr), format_metric(cell.visual_l2),
             format_metric(cell.attention_l2)});
      m.write(cell_rec.file("metrics.csv"));
      cell_rec.finish();
      cell.manifest = c.out_dir / "manifest.json";
      cells.push_back(cell);
    }
  }
  std::vector<double> acc, asr_v, vis, att;
  for (const auto& c : cells) {
    acc.push_back(c.acc);
    asr_v.push_back(c.asr);
    vis.push_back(c.visual_l2);
    att.push_back(c.attention_l2);
  }
  write_grid(alpha1, alpha2, acc, rec.file("sweep_acc"));
  write_grid(alpha1, alpha2, asr_v, rec.file("sweep_asr"));
  write_grid(alpha1, alpha2, vis, rec.file("sweep_visual_l2"));
  write_grid(alpha1, alpha2, att, rec.file("sweep_attention_l2"));
  nlohmann::json list = nlohmann::json::array();
  for (const auto& c : cells) list.push_back(fs::relative(c.manifest, rec.dir()).generic_string());
  rec.note("cell_manifests", list);
  return cells;
}

std::vector<std::vector<PatchIndex>> observe_pairs(int grid) {
  std::vector<std::vector<PatchIndex>> out;
  for (int k = 1; k <= 3; ++k) {
    const PatchIndex a{k, k}, b{grid - 1 - k, grid - 1 - k};
    if (a.row < b.row) out.push_back({a, b});
  }
  out.push_back({{0, 0}, {grid - 1, grid - 1}});
  return out;
}

ObserveRow observe_run(const ExperimentConfig& config, const DatasetPair& data,
                       const ViTParams<float>& clean, std::string family, std::string label,
                       Insertion insertion, double l2, std::vector<PatchIndex> locations,
                       RunRecorder& rec) {
  AttackConfig a = config.attack;
  a.epochs = config.observe.epochs;
  a.trigger_epochs = 0;
  a.model_epochs = 1;
  a.model_weights.alpha2 = 0.0;
  const ImageGeometry geom = geometry_of(config.model);
  const auto [low, upp] = data.train.norm.bounds();
  Trigger<float> t = init_trigger(geom, low, upp, derive_seed(config.seed, "observe-trigger"), 0.05);
  t = scale_to_l2(t, static_cast<float>(l2));
  if (insertion == Insertion::kReplace) {
    t.low = t.values.minCoeff();
    t.upp = t.values.maxCoeff();
  } else if (!within_bounds(t)) {
    throw ConfigError(fmt::format("observe trigger with l2 {} leaves the pixel bounds", l2));
  }
  AttackPlan plan;
  plan.name = family + "_" + label;
  plan.policy = LocationPolicy::uniform(locations);
  plan.insertion = insertion;
  TrainOptions opts;
  opts.on_row = [&](const LogRow& row) { log_row(plan.name, row); };
  TrainResult r = rec.timed("observe-" + plan.name,
                            [&] { return run_attack(clean, data.train, a, plan, t, opts); });
  AttackArtifact art{plan.name, r.params, r.trigger, insertion};
  TREHeatmap h = eval_tre_stage(art, data, a.target_label, rec, "observe/" + plan.name);
  ObserveRow row;
  row.family = std::move(family);
  row.label = std::move(label);
  row.insertion = insertion;
  row.l2 = l2;
  row.locations = std::move(locations);
  row.tre = h.tre;
  row.acc = accuracy(r.params, data.test.all());
  return row;
}

ObserveReport observe_section4(const ExperimentConfig& config, const DatasetPair& data,
                               const ViTParams<float>& clean, RunRecorder& rec,
                               const std::vector<std::string>& families) {
  static const std::vector<std::string> known{"insertion", "l2_sweep", "two_location",
                                              "corner_pair"};
  for (const auto& f : families) {
    if (std::find(known.begin(), known.end(), f) == known.end()) {
      throw ConfigError(fmt::format("unknown observe family '{}'", f));
    }
  }
  auto wanted = [&](const std::string& f) {
    return families.empty() || std::find(families.begin(), families.end(), f) != families.end();
  };
  const int g = config.model.grid_size();
  const PatchIndex center{g / 2, g / 2}, corner{0, 0};
  const auto& o = config.observe;
  ObserveReport rep;
  auto run = [&](std::string family, std::string label, Insertion ins, double l2,
                 std::vector<PatchIndex> locs) {
    rep.rows.push_back(observe_run(config, data, clean, std::move(family), std::move(label), ins,
                                   l2, std::move(locs), rec));
    return rep.rows.back();
  };
  if (wanted("insertion") || wanted("two_location")) {
    rep.single_center_tre =
        run("insertion", "sup_center", Insertion::kSuperimpose, o.sup_l2, {center}).tre;
  }
  if (wanted("insertion")) {
    run("insertion", "sup_corner", Insertion::kSuperimpose, o.sup_l2, {corner});
    run("insertion", "rep_center", Insertion::kReplace, o.rep_l2, {center});
    run("insertion", "rep_corner", Insertion::kReplace, o.rep_l2, {corner});
  }
  if (wanted("l2_sweep")) {
    for (double l2 : o.l2_sweep) {
      run("l2_sweep", fmt::format("l2_{}", l2), Insertion::kSuperimpose, l2, {center});
    }
  }
  const auto pairs = observe_pairs(g);
  if (wanted("two_location")) {
    double sum = 0;
    const std::size_t n = pairs.size() - 1;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = pairs[i];
      sum += run("two_location", fmt::format("{}_{}__{}_{}", p[0].row, p[0].col, p[1].row, p[1].col),
                 Insertion::kSuperimpose, o.sup_l2, p)
                 .tre;
    }
    rep.two_location_tre = n > 0 ? sum / static_cast<double>(n) : 0.0;
  }
  if (wanted("corner_pair")) {
    rep.corner_pair_tre =
        run("corner_pair", "corners", Insertion::kSuperimpose, o.sup_l2, pairs.back()).tre;
  }
  CsvTable t{{"family", "label", "insertion", "l2", "locations", "tre", "acc"}, {}};
  for (const auto& r : rep.rows) {
    std::string locs;
    for (const auto& p : r.locations) locs += fmt::format("{}({},{})", locs.empty() ? "" : " ", p.row, p.col);
    t.add({r.family, r.label, r.insertion == Insertion::kReplace ? "rep" : "sup",
           fmt::format("{}", r.l2), locs, format_metric(r.tre), format_metric(r.acc)});
  }
  t.write(rec.file("observe_summary.csv"));
  return rep;
}

bool soft_non_decreasing(const std::vector<double>& values, double slack) {
  int drops = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    const double d = values[i - 1] - values[i];
    if (d > 0) {
      ++drops;
      if (d > slack) return false;
    }
  }
  return drops <= 1;
}

}  // namespace pasta
