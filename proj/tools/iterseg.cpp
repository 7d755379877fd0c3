// iterseg command-line driver.
//
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "iterseg/iterseg.hpp"

namespace {

namespace fs = std::filesystem;
using namespace iterseg;
using Real = float;

// Bad flags, refused overwrites, incompatible checkpoints: exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> split;
  std::string out;
  bool force = false;
};

fs::path default_out() {
  if (const char* env = std::getenv("ITERSEG_OUT"); env && *env) return fs::path(env) / "run";
  return fs::path("runs") / "run";
}

// One process per output directory. A lock left by a dead process is taken over.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
        ::close(fd);
        held_ = true;
        return;
      }
      if (errno != EEXIST) throw IoError("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
      long owner = 0;
      std::ifstream(path_) >> owner;
      if (owner > 0 && ::kill(static_cast<pid_t>(owner), 0) == 0) {
        throw std::runtime_error("output directory " + dir.string() + " is in use by process " + std::to_string(owner) +
                                 " (lock " + path_.string() + ")");
      }
      fs::remove(path_);
    }
    throw std::runtime_error("could not acquire lock " + path_.string());
  }
  ~RunLock() {
    if (held_) {
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
  bool held_ = false;
};

// Writes via a temporary file so an interrupted write never leaves a torn file.
void write_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  io::write_file(tmp, bytes);
  fs::rename(tmp, path);
}

struct Context {
  ExperimentConfig cfg;
  fs::path out;
  bool force = false;

  fs::path data_dir() const { return cfg.dataset_path.empty() ? out / "data" : fs::path(cfg.dataset_path); }
  fs::path backbone_path() const { return out / "backbone" / detail::concat("split", cfg.split, ".ckpt"); }
  fs::path cascade_dir() const { return out / "cascade" / detail::concat("split", cfg.split); }

  void snapshot(const std::string& command) const {
    fs::create_directories(out / "snapshots");
    write_atomic(out / "snapshots" / (command + ".config.json"), format_config(cfg));
  }
};

Context resolve(const Globals& g) {
  Context ctx;
  ctx.cfg = g.config_path.empty() ? ExperimentConfig{} : load_config(g.config_path);
  if (g.seed) ctx.cfg.seed = *g.seed;
  if (g.split) ctx.cfg.split = *g.split;
  if (!g.out.empty()) ctx.cfg.out_dir = g.out;
  if (ctx.cfg.out_dir.empty()) ctx.cfg.out_dir = default_out().string();
  ctx.cfg.validate();
  ctx.out = fs::absolute(ctx.cfg.out_dir);
  ctx.cfg.out_dir = ctx.out.string();
  ctx.force = g.force;
  return ctx;
}

struct Bench {
  Dataset data;
  std::vector<SplitPlan> splits;
  const SplitPlan& split(int i) const { return splits.at(static_cast<std::size_t>(i)); }
};

Bench load_bench(const Context& ctx) {
  const fs::path dir = ctx.data_dir();
  if (!fs::is_directory(dir)) throw std::runtime_error("no dataset at " + dir.string() + "; run gen-data first");
  Bench b;
  b.data = load_dataset(dir);
  if (b.data.size() == 0) throw std::runtime_error("dataset at " + dir.string() + " is empty");
  const fs::path split_file = dir / "splits.txt";
  b.splits = fs::exists(split_file) ? parse_split_file(io::read_file(split_file))
                                    : make_splits(b.data.class_ids(), ctx.cfg.n_splits);
  if (static_cast<int>(b.splits.size()) != ctx.cfg.n_splits) {
    throw ConfigError(detail::concat("splits.count is ", ctx.cfg.n_splits, " but ", split_file.string(), " defines ",
                                     b.splits.size(), " splits"));
  }
  return b;
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(const Context& ctx) {
  const fs::path dir = ctx.data_dir();
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!ctx.force) throw UsageError("dataset directory " + dir.string() + " is not empty; pass --force to replace it");
    fs::remove_all(dir);
  }
  ctx.snapshot("gen-data");
  const SynthConfig sc = ctx.cfg.synth_config();
  const Dataset d = generate_synthetic_dataset(sc);
  save_dataset(dir, d);
  const auto splits = make_splits(d.class_ids(), ctx.cfg.n_splits);
  io::write_file(dir / "splits.txt", format_split_file(splits));

  nlohmann::json samples = nlohmann::json::array();
  for (const Sample& s : d.samples()) {
    const std::string base = std::to_string(s.class_id) + "/" + std::to_string(s.sample_id);
    samples.push_back({{"class_id", s.class_id}, {"sample_id", s.sample_id}, {"image", base + ".img"},
                       {"mask", base + ".mask"}});
  }
  const nlohmann::json manifest{{"seed", ctx.cfg.seed},
                                {"data_seed", sc.seed},
                                {"synthetic", config_to_json(ctx.cfg).at("synthetic")},
                                {"splits_file", "splits.txt"},
                                {"n_samples", d.size()},
                                {"samples", samples}};
  io::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "wrote " << d.size() << " samples of " << d.class_ids().size() << " classes to " << dir.string()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain-backbone

int cmd_pretrain(const Context& ctx) {
  const Bench b = load_bench(ctx);
  const SplitPlan& split = b.split(ctx.cfg.split);
  const fs::path path = ctx.backbone_path();
  if (fs::exists(path) && !ctx.force) {
    throw UsageError("backbone checkpoint " + path.string() + " exists; pass --force to retrain");
  }
  ctx.snapshot("pretrain-backbone");
  const auto r = pretrain_backbone<Real>(pretraining_stream(b.data, split), split, ctx.cfg.backbone,
                                         ctx.cfg.pretrain_config());
  fs::create_directories(path.parent_path());
  const nlohmann::json meta{{"split", split.split_index},
                            {"seed", ctx.cfg.seed},
                            {"holdout_accuracy", r.holdout_accuracy},
                            {"chance", r.chance},
                            {"epoch_losses", r.epoch_losses}};
  write_atomic(path, io::encode_container(backbone_container(r.backbone, r.seen_classes, meta)));
  std::cout << std::fixed << std::setprecision(4) << "split " << split.split_index << ": held-out accuracy "
            << r.holdout_accuracy << " (chance " << r.chance << "), final loss " << r.epoch_losses.back() << "\n"
            << "wrote " << path.string() << "\n";
  return 0;
}

Backbone<Real> load_backbone(const Context& ctx, const SplitPlan& split) {
  const fs::path path = ctx.backbone_path();
  if (!fs::exists(path)) throw std::runtime_error("no backbone at " + path.string() + "; run pretrain-backbone first");
  const io::Container c = io::load_container(path);
  Backbone<Real> bb = backbone_from_container<Real>(c);
  verify_seen_classes(c.meta.at("seen_classes").get<std::set<int>>(), split);
  BackboneConfig want = ctx.cfg.backbone;
  if (bb.config().describe() != want.describe()) {
    throw UsageError("backbone checkpoint " + path.string() + " was built with backbone " + bb.config().describe() +
                     ", config asks for " + want.describe());
  }
  return bb;
}

// ---------------------------------------------------------------------------
// Training

nlohmann::json run_meta(const Context& ctx, const TrainConfig& t, const Backbone<Real>& bb) {
  ExperimentConfig c = ctx.cfg;
  c.train = t;
  const nlohmann::json full = config_to_json(c);
  return {{"cascade", cascade_config_json(t.cascade)},
          {"train", full.at("train")},
          {"augment", full.at("augment")},
          {"fusion", fusion_config_json(ctx.cfg.fusion_config())},
          {"backbone_fingerprint", bb.fingerprint()},
          {"split", ctx.cfg.split},
          {"seed", t.seed}};
}

int expected_networks(const CascadeConfig& c) { return c.weight_mode == WeightMode::identical ? 1 : c.steps; }

fs::path net_path(const fs::path& dir, int k) { return dir / detail::concat("g", k + 1, ".ckpt"); }

struct TrainRequest {
  TrainConfig train;
  fs::path dir;
  int halt_after_epochs = 0;  // 0: run to completion
  int val_episodes = 0;
  bool quiet = false;
};

// Returns true when the cascade is complete on disk.
bool train_cascade(const Context& ctx, const Bench& b, const Backbone<Real>& bb, const TrainRequest& req) {
  const SplitPlan& split = b.split(ctx.cfg.split);
  const TrainConfig& t = req.train;
  const nlohmann::json meta = run_meta(ctx, t, bb);
  const std::string run_fp = io::hex64(io::fnv1a(meta.dump()));
  const fs::path state_path = req.dir / "resume.state";

  fs::create_directories(req.dir);
  TrainState<Real> st;
  if (fs::exists(state_path)) {
    const io::Container c = io::load_container(state_path);
    if (c.meta.value("run_fingerprint", "") != run_fp) {
      throw UsageError("training state in " + req.dir.string() +
                       " belongs to a different configuration; pass --force to start over");
    }
    st = train_state_from_container<Real>(c);
    if (st.finished) {
      throw UsageError("cascade in " + req.dir.string() + " is already trained; pass --force to retrain");
    }
    if (!req.quiet) {
      std::cout << "resuming at stage " << st.stage + 1 << ", epoch " << st.epochs_done + 1 << "\n";
    }
  } else {
    st = initial_train_state<Real>(t, ctx.cfg.fusion_config());
  }

  nlohmann::json state_meta = meta;
  state_meta["run_fingerprint"] = run_fp;
  const auto save_state = [&](const TrainState<Real>& s) {
    write_atomic(state_path, io::encode_container(train_state_container(s, state_meta)));
    std::string lines;
    for (const auto& r : s.log.steps) lines += step_record_line(r) + "\n";
    write_atomic(req.dir / "train_log.jsonl", lines);
    std::string epochs;
    for (const auto& e : s.log.epochs) {
      epochs += nlohmann::json{{"stage", e.stage},
                               {"epoch", e.epoch},
                               {"mean_loss", e.mean_loss},
                               {"val_miou", e.val_miou ? nlohmann::json(*e.val_miou) : nlohmann::json()}}
                    .dump() +
                "\n";
    }
    write_atomic(req.dir / "epochs.jsonl", epochs);
  };

  const std::vector<int> classes(split.train_classes.begin(), split.train_classes.end());
  const auto source = make_episode_source<Real>(b.data, classes, backbone_extractor(bb), ctx.cfg.augment, t.shots);

  TrainHooks<Real> hooks;
  if (req.val_episodes > 0) {
    // validation episodes come from the train classes; test classes stay unseen
    SplitPlan val;
    val.split_index = split.split_index;
    val.test_classes = split.train_classes;
    hooks.validate = [&, val](int stage, std::span<const FusionNet<Real>> nets) -> std::optional<double> {
      CascadeConfig c = t.cascade;
      if (c.weight_mode == WeightMode::different) c.steps = stage + 1;
      const auto r = evaluate_split(cascade_predictor<Real>(backbone_extractor(bb), nets, c), b.data, val,
                                    req.val_episodes, t.shots, derive_seed(t.seed, "validation"));
      return r.miou;
    };
  }
  int epochs_this_run = 0;
  hooks.on_epoch_end = [&](const TrainState<Real>& s) {
    save_state(s);
    if (!req.quiet) {
      const auto& e = s.log.epochs.back();
      std::cout << "stage " << e.stage + 1 << " epoch " << e.epoch + 1 << "/" << t.stage_epochs(e.stage)
                << " loss " << std::fixed << std::setprecision(4) << e.mean_loss;
      if (e.val_miou) std::cout << " val mIoU " << *e.val_miou;
      std::cout << std::endl;
    }
    ++epochs_this_run;
    return req.halt_after_epochs <= 0 || epochs_this_run < req.halt_after_epochs;
  };

  continue_training(st, t, source, hooks);
  if (st.diverged) {
    save_state(st);
    throw std::runtime_error(detail::concat("training diverged (non-finite loss) in stage ", st.stage + 1,
                                            "; last good weights kept in ", state_path.string()));
  }
  if (!st.finished) {
    std::cout << "halted after " << epochs_this_run << " epoch(s); rerun the same command to resume\n";
    return false;
  }
  save_state(st);
  for (int k = 0; k < static_cast<int>(st.nets.size()); ++k) {
    nlohmann::json m = meta;
    m["stage"] = k + 1;
    write_atomic(net_path(req.dir, k), io::encode_container(fusion_container(st.nets[static_cast<std::size_t>(k)], m)));
  }
  if (!req.quiet) std::cout << "wrote " << st.nets.size() << " checkpoint(s) to " << req.dir.string() << "\n";
  return true;
}

// Loads the cascade networks in `dir`, refusing checkpoints trained for a
// different cascade or backbone.
std::vector<FusionNet<Real>> load_cascade(const fs::path& dir, const CascadeConfig& want, const Backbone<Real>& bb,
                                          std::string* fingerprint) {
  std::vector<FusionNet<Real>> nets;
  std::uint64_t h = io::fnv1a("cascade");
  for (int k = 0; k < expected_networks(want); ++k) {
    const fs::path p = net_path(dir, k);
    if (!fs::exists(p)) throw MissingCheckpoint("missing checkpoint " + p.string());
    const std::string bytes = io::read_file(p);
    const io::Container c = io::decode_container(bytes, p.string());
    const nlohmann::json have = c.meta.value("cascade", nlohmann::json());
    if (have != cascade_config_json(want)) {
      throw UsageError("checkpoint " + p.string() + " was trained for cascade " + have.dump() + " but the config asks for " +
                       cascade_config_json(want).dump());
    }
    if (c.meta.value("backbone_fingerprint", "") != bb.fingerprint()) {
      throw UsageError("checkpoint " + p.string() + " was trained on a different backbone (" +
                       c.meta.value("backbone_fingerprint", "?") + " vs " + bb.fingerprint() + ")");
    }
    nets.push_back(fusion_from_container<Real>(c));
    h = io::fnv1a(bytes, h);
  }
  if (fingerprint) *fingerprint = io::hex64(h);
  return nets;
}

int cmd_train(const Context& ctx, int halt_after, int val_episodes) {
  const Bench b = load_bench(ctx);
  const SplitPlan& split = b.split(ctx.cfg.split);
  const Backbone<Real> bb = load_backbone(ctx, split);
  if (ctx.force) fs::remove_all(ctx.cascade_dir());
  ctx.snapshot("train");
  TrainRequest req{ctx.cfg.train_config(), ctx.cascade_dir(), halt_after, val_episodes, false};
  train_cascade(ctx, b, bb, req);
  return 0;
}

// ---------------------------------------------------------------------------
// eval

EvalReport evaluate_dir(const Context& ctx, const Bench& b, const Backbone<Real>& bb, const fs::path& dir,
                        const CascadeConfig& cascade, int episodes, int shots, std::uint64_t eval_seed) {
  const SplitPlan& split = b.split(ctx.cfg.split);
  std::string fp;
  const auto nets = load_cascade(dir, cascade, bb, &fp);
  EvalReport r = evaluate_split(cascade_predictor<Real>(backbone_extractor(bb), std::span<const FusionNet<Real>>(nets), cascade),
                                b.data, split, episodes, shots, eval_seed);
  r.cascade = cascade;
  r.checkpoint_fingerprint = fp;
  return r;
}

int cmd_eval(Context ctx, std::optional<int> episodes, std::optional<int> shots, const std::string& checkpoints) {
  if (episodes) ctx.cfg.eval.episodes = *episodes;
  if (shots) ctx.cfg.eval.shots = *shots;
  ctx.cfg.validate();
  const Bench b = load_bench(ctx);
  const SplitPlan& split = b.split(ctx.cfg.split);
  const Backbone<Real> bb = load_backbone(ctx, split);
  ctx.snapshot("eval");
  const fs::path dir = checkpoints.empty() ? ctx.cascade_dir() : fs::path(checkpoints);
  EvalReport r;
  try {
    r = evaluate_dir(ctx, b, bb, dir, ctx.cfg.train.cascade, ctx.cfg.eval.episodes, ctx.cfg.eval.shots,
                     ctx.cfg.eval_seed());
  } catch (const MissingCheckpoint& e) {
    throw std::runtime_error(std::string(e.what()) + "; run train first");
  }
  r.seed = ctx.cfg.seed;
  const fs::path path = ctx.out / "eval" / detail::concat("split", split.split_index, "_k", r.shots, ".json");
  fs::create_directories(path.parent_path());
  write_atomic(path, r.to_json().dump(2) + "\n");
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << std::fixed << std::setprecision(4) << "split " << split.split_index << " " << r.shots << "-shot mIoU "
            << r.miou << " over " << r.n_episodes << " episodes\n";
  for (const auto& [c, v] : r.class_iou) std::cout << "  class " << c << ": " << v << "\n";
  std::cout << "wrote " << path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

std::vector<AblationVariant> preset_variants(const std::string& preset) {
  const auto v = [](const std::string& label, int steps, WeightMode w, PriorMode p) {
    return AblationVariant{label, CascadeConfig{steps, w, p, 0.5}};
  };
  if (preset == "inputs") {
    return {v("T=1 (prior only)", 1, WeightMode::different, PriorMode::plain),
            v("T=2 plain estimate", 2, WeightMode::different, PriorMode::plain),
            v("T=2 augmented prior", 2, WeightMode::different, PriorMode::augmented)};
  }
  if (preset == "refinements") {
    std::vector<AblationVariant> out;
    for (int steps = 1; steps <= 3; ++steps) {
      out.push_back(v(detail::concat("T=", steps, " identical"), steps, WeightMode::identical, PriorMode::augmented));
      out.push_back(v(detail::concat("T=", steps, " different"), steps, WeightMode::different, PriorMode::augmented));
    }
    return out;
  }
  throw UsageError("unknown ablation preset '" + preset + "' (expected inputs or refinements)");
}

std::string variant_slug(const CascadeConfig& c) {
  return detail::concat("T", c.steps, "-", to_string(c.weight_mode), "-", to_string(c.prior_mode));
}

int cmd_ablate(Context ctx, const std::string& preset, std::vector<std::uint64_t> seeds, bool eval_only,
               std::optional<int> episodes) {
  const auto variants = preset_variants(preset);
  if (episodes) ctx.cfg.eval.episodes = *episodes;
  if (seeds.empty()) seeds.push_back(ctx.cfg.seed);
  for (const auto& v : variants) {
    TrainConfig t = ctx.cfg.train;
    t.cascade = v.cascade;
    try {
      t.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(v.label + ": " + e.what());
    }
  }
  const Bench b = load_bench(ctx);
  const SplitPlan& split = b.split(ctx.cfg.split);
  const Backbone<Real> bb = load_backbone(ctx, split);
  ctx.snapshot("ablate");
  const fs::path root = ctx.out / "ablate" / detail::concat("split", split.split_index);

  const auto table = run_ablation_table(variants, seeds, [&](const AblationVariant& v, std::uint64_t seed) -> std::optional<double> {
    Context c = ctx;
    c.cfg.seed = seed;
    c.cfg.train.cascade = v.cascade;
    const fs::path dir = root / detail::concat("seed", seed) / variant_slug(v.cascade);
    const bool complete = fs::exists(net_path(dir, expected_networks(v.cascade) - 1));
    if (!complete && !eval_only) {
      std::cout << "training " << v.label << " (seed " << seed << ")" << std::endl;
      if (!train_cascade(c, b, bb, TrainRequest{c.cfg.train_config(), dir, 0, 0, true})) return std::nullopt;
    }
    try {
      const auto r = evaluate_dir(c, b, bb, dir, v.cascade, c.cfg.eval.episodes, c.cfg.eval.shots, c.cfg.eval_seed());
      std::cout << std::fixed << std::setprecision(4) << v.label << " seed " << seed << ": mIoU " << r.miou << std::endl;
      return r.miou;
    } catch (const MissingCheckpoint& e) {
      std::cerr << "warning: " << e.what() << "; cell left absent\n";
      return std::nullopt;
    }
  });

  std::string text = format_ablation_table(table);
  if (preset == "refinements") text += "\n" + format_refinement_grid(table);
  fs::create_directories(root);
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : table.rows) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& x : r.per_seed) cells.push_back(x ? nlohmann::json(*x) : nlohmann::json());
    rows.push_back({{"label", r.variant.label}, {"cascade", cascade_config_json(r.variant.cascade)}, {"miou", cells}});
  }
  write_atomic(root / (preset + ".txt"), text);
  write_atomic(root / (preset + ".json"), nlohmann::json{{"seeds", table.seeds}, {"rows", rows}}.dump(2) + "\n");
  std::cout << text << "wrote " << (root / (preset + ".txt")).string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// viz

int cmd_viz(const Context& ctx, int n_panels, const std::string& columns_flag) {
  std::vector<PanelColumn> columns;
  try {
    columns = parse_panel_columns(columns_flag);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--columns: ") + e.what());
  }
  if (n_panels < 1) throw UsageError("--panels must be >= 1");
  const Bench b = load_bench(ctx);
  const SplitPlan& split = b.split(ctx.cfg.split);
  const Backbone<Real> bb = load_backbone(ctx, split);
  ctx.snapshot("viz");
  std::vector<FusionNet<Real>> nets;
  try {
    nets = load_cascade(ctx.cascade_dir(), ctx.cfg.train.cascade, bb, nullptr);
  } catch (const MissingCheckpoint& e) {
    throw std::runtime_error(std::string(e.what()) + "; run train first");
  }
  const fs::path dir = ctx.out / "viz" / detail::concat("split", split.split_index);
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto episodes = draw_eval_episodes(b.data, split, n_panels, 1, derive_seed(ctx.cfg.eval_seed(), "viz"));
  const auto extract = backbone_extractor(bb);
  std::ostringstream index;
  index << "# file class query support final_iou columns=" << columns_flag << "\n";
  for (std::size_t k = 0; k < episodes.size(); ++k) {
    const Episode& ep = episodes[k];
    const auto trace = run_cascade<Real, FusionNet<Real>>(nets, prepare_episode(extract, ep), ctx.cfg.train.cascade);
    std::ostringstream name;
    name << "panel_" << std::setw(3) << std::setfill('0') << k << ".ppm";
    render_panel(ep, trace, dir / name.str(), columns, ctx.cfg.train.cascade.threshold);
    index << name.str() << " " << ep.class_id << " " << ep.query.sample_id << " " << ep.support.front().sample_id << " "
          << std::fixed << std::setprecision(4) << iou(trace.final_mask_full, ep.query.mask) << "\n";
  }
  io::write_file(dir / "index.txt", index.str());
  std::cout << "wrote " << episodes.size() << " panels to " << dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"iterseg: few-shot segmentation with iterative cascade refinement"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "Experiment config (JSON, comments allowed)");
  app.add_option("--seed", g.seed, "Root seed; overrides the config");
  app.add_option("--split", g.split, "Split index; overrides splits.index");
  app.add_option("--out", g.out, "Output directory (default $ITERSEG_OUT/run or ./runs/run)");
  app.add_flag("--force", g.force, "Replace existing outputs");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  auto* pre = app.add_subcommand("pretrain-backbone", "Pretrain and freeze the backbone on the split's train classes");

  auto* train = app.add_subcommand("train", "Train the cascade (resumes an interrupted run)");
  int halt_after = 0;
  int val_episodes = 16;
  train->add_option("--val-episodes", val_episodes, "Validation episodes per epoch on train classes (0 disables)");
  train->add_option("--halt-after-epochs", halt_after)->group("");

  auto* eval = app.add_subcommand("eval", "Evaluate the trained cascade on the split's test classes");
  std::optional<int> episodes, shots;
  std::string checkpoints;
  eval->add_option("--episodes", episodes, "Number of test episodes");
  eval->add_option("--shots", shots, "Support samples per episode (K)");
  eval->add_option("--checkpoints", checkpoints, "Directory with g1.ckpt ... (default <out>/cascade/split<i>)");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate a grid of cascade variants over seeds");
  std::string preset = "inputs";
  std::vector<std::uint64_t> seeds;
  bool eval_only = false;
  std::optional<int> ablate_episodes;
  ablate->add_option("--preset", preset, "inputs (prior vs estimate vs augmented) or refinements (T x weights)");
  ablate->add_option("--seeds", seeds, "Seeds, comma separated")->delimiter(',');
  ablate->add_option("--episodes", ablate_episodes, "Test episodes per cell");
  ablate->add_flag("--eval-only", eval_only, "Do not train; missing checkpoints become absent cells");

  auto* viz = app.add_subcommand("viz", "Render qualitative panels");
  int n_panels = 4;
  std::string columns = "a,b,c,d,e,f";
  viz->add_option("--panels", n_panels, "Number of panels");
  viz->add_option("--columns", columns, "Columns to render, from a..f");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const Context ctx = resolve(g);
    RunLock lock(ctx.out);
    if (gen->parsed()) return cmd_gen_data(ctx);
    if (pre->parsed()) return cmd_pretrain(ctx);
    if (train->parsed()) return cmd_train(ctx, halt_after, val_episodes);
    if (eval->parsed()) return cmd_eval(ctx, episodes, shots, checkpoints);
    if (ablate->parsed()) return cmd_ablate(ctx, preset, seeds, eval_only, ablate_episodes);
    if (viz->parsed()) return cmd_viz(ctx, n_panels, columns);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
