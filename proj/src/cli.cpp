#include "pasta/cli.hpp"

#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "pasta/harness.hpp"

namespace pasta {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config_path;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string trigger;
  std::string baseline = "pasta";
  std::vector<double> alpha1;
  std::vector<double> alpha2;
  std::vector<std::string> payloads;
  std::vector<int> windows;
  std::vector<std::string> families;
};

ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig::preset_named(o.preset)
                                             : load_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.out_dir = o.out;
  if (!o.data.empty()) c.dataset.root = o.data;
  if (!o.payloads.empty()) c.payloads = o.payloads;
  if (!o.windows.empty()) c.defenses.windows = o.windows;
  c.resolve();
  c.validate();
  return c;
}

ViTParams<float> load_model(const std::string& path, const ModelConfig& expected) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  ViTParams<float> p = load_checkpoint(path);
  if (p.config.image_size != expected.image_size || p.config.patch_size != expected.patch_size ||
      p.config.channels != expected.channels || p.config.num_classes != expected.num_classes) {
    throw ConfigError(fmt::format("checkpoint '{}' does not match the configured geometry", path));
  }
  return p;
}

AttackArtifact load_artifact(const Options& o, const ExperimentConfig& c) {
  if (o.trigger.empty()) throw ConfigError("--trigger is required");
  AttackArtifact a;
  a.name = o.baseline;
  a.params = load_model(o.checkpoint, c.model);
  a.trigger = load_trigger(o.trigger).trigger;
  a.insertion = o.baseline == "badnets" ? Insertion::kReplace : Insertion::kSuperimpose;
  if (a.trigger.patch_size != c.model.patch_size || a.trigger.channels != c.model.channels) {
    throw ConfigError("trigger does not match the configured patch size");
  }
  return a;
}

// The clean model given by --checkpoint, or a fresh pretraining inside the run.
ViTParams<float> clean_model(const Options& o, const ExperimentConfig& c, const DatasetPair& data,
                             RunRecorder& rec) {
  if (!o.checkpoint.empty()) return load_model(o.checkpoint, c.model);
  return pretrain_stage(c, data, rec).params;
}

std::string command_line(int argc, const char* const* argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Patch-wise backdoor workbench for Vision Transformers", "pasta"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config_path, "experiment config (INI)")->check(CLI::ExistingFile);
  app.add_option("--preset", o.preset, "desk, proxy or smoke")->capture_default_str();
  app.add_option("--seed", o.seed, "global seed");
  app.add_option("--out", o.out, "run directory");
  app.add_option("--data", o.data, "dataset root");

  auto* pretrain = app.add_subcommand("pretrain", "train a clean model");
  auto* attack = app.add_subcommand("attack", "run PASTA or a baseline");
  attack->add_option("--baseline", o.baseline, "pasta, single, badnets or no_attn")
      ->check(CLI::IsMember({"pasta", "single", "badnets", "no_attn"}));
  attack->add_option("--checkpoint", o.checkpoint, "clean model (pretrained in the run if absent)");
  attack->add_option("--alpha1", o.alpha1, "visual stealth weight")->expected(1);
  attack->add_option("--alpha2", o.alpha2, "attention stealth weight")->expected(1);

  auto* tre = app.add_subcommand("eval-tre", "TRE heatmap of a trained trigger");
  auto* stealth = app.add_subcommand("eval-stealth", "visual and attention stealth tables");
  auto* defend = app.add_subcommand("defend", "patch operations, DBAVT, BAVT and Gaussian filtering");
  auto* strip = app.add_subcommand("strip", "STRIP entropy histogram");
  auto* prune = app.add_subcommand("prune", "fine-pruning curve");
  for (auto* s : {tre, stealth, defend, strip, prune}) {
    s->add_option("--checkpoint", o.checkpoint, "backdoored model")->required();
    s->add_option("--trigger", o.trigger, "trigger file")->required();
    s->add_option("--baseline", o.baseline, "method name; badnets evaluates by replacement");
  }
  defend->add_option("--payload", o.payloads, "payload, e.g. fixed:k=10 (repeatable)");
  defend->add_option("--window", o.windows, "Gaussian window (repeatable)");

  auto* sweep = app.add_subcommand("sweep-alpha", "PASTA over an alpha1 x alpha2 grid");
  sweep->add_option("--checkpoint", o.checkpoint, "clean model (pretrained in the run if absent)");
  sweep->add_option("--alpha1", o.alpha1, "alpha1 values")->delimiter(',');
  sweep->add_option("--alpha2", o.alpha2, "alpha2 values")->delimiter(',');

  auto* observe = app.add_subcommand("observe", "fixed-trigger REP/SUP, l2 and location studies");
  observe->add_option("--checkpoint", o.checkpoint, "clean model (pretrained in the run if absent)");
  observe->add_option("--family", o.families, "insertion, l2_sweep, two_location, corner_pair")
      ->check(CLI::IsMember({"insertion", "l2_sweep", "two_location", "corner_pair"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << '\n';
    const int code = app.exit(e);
    return code == 0 ? 2 : code;
  }

  ExperimentConfig config;
  try {
    config = resolve_config(o);
    if (attack->parsed()) {
      if (!o.alpha1.empty()) config.attack.trigger_weights.alpha1 = o.alpha1.front();
      if (!o.alpha2.empty()) {
        config.attack.trigger_weights.alpha2 = o.alpha2.front();
        config.attack.model_weights.alpha2 = o.alpha2.front();
      }
      config.validate();
    }
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }

  RunRecorder rec(config, command_line(argc, argv), config.out_dir);
  int code = 0;
  try {
    const DatasetPair data = rec.timed("load-data", [&] {
      return load_dataset(config.dataset, config.seed);
    });
    rec.set_dataset_digest(dataset_digest(data));
    rec.note("train_size", data.train.size());
    rec.note("test_size", data.test.size());
    if (!data.train.class_names.empty()) rec.note("classes", data.train.class_names);
    const int target = config.attack.target_label;

    if (pretrain->parsed()) {
      pretrain_stage(config, data, rec);
    } else if (attack->parsed()) {
      const auto clean = clean_model(o, config, data, rec);
      attack_stage(config, data, clean, o.baseline, rec);
    } else if (tre->parsed()) {
      eval_tre_stage(load_artifact(o, config), data, target, rec, "tre");
    } else if (stealth->parsed()) {
      eval_stealth_stage({load_artifact(o, config)}, data, config.seed, rec);
    } else if (defend->parsed()) {
      const auto s = defend_stage(config, load_artifact(o, config), data, rec);
      if (config.defenses.dbavt) {
        rec.note("dbavt_fnr", s.dbavt.fnr);
        rec.note("dbavt_tpr", s.dbavt.tpr);
      }
    } else if (strip->parsed()) {
      strip_stage(config, load_artifact(o, config), data, rec);
    } else if (prune->parsed()) {
      prune_stage(config, load_artifact(o, config), data, rec);
    } else if (sweep->parsed()) {
      const auto clean = clean_model(o, config, data, rec);
      const std::vector<double> a1 = o.alpha1.empty() ? std::vector<double>{0.5, 1.0, 2.0} : o.alpha1;
      const std::vector<double> a2 =
          o.alpha2.empty() ? std::vector<double>{0.001, 0.005, 0.05} : o.alpha2;
      sweep_alpha(config, data, clean, a1, a2, rec);
    } else if (observe->parsed()) {
      const auto clean = clean_model(o, config, data, rec);
      const auto r = observe_section4(config, data, clean, rec, o.families);
      rec.note("single_center_tre", r.single_center_tre);
      rec.note("two_location_tre", r.two_location_tre);
      rec.note("corner_pair_tre", r.corner_pair_tre);
    }
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    rec.note("error", e.what());
    code = 1;
  }
  rec.finish();
  fmt::print("{}\n", (rec.dir() / "manifest.json").string());
  return code;
}

}  // namespace pasta
