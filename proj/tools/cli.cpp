#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dsatrack/config.hpp"
#include "dsatrack/evaluate.hpp"
#include "dsatrack/gradsuite.hpp"
#include "dsatrack/pruning.hpp"

namespace fs = std::filesystem;

namespace dsa {

namespace {

struct Flags {
  std::string config, weights, out, data;
  std::uint64_t seed = 1;
  int jobs = 1;
  CLI::Option *seed_opt = nullptr, *jobs_opt = nullptr, *out_opt = nullptr, *data_opt = nullptr;
};

RunConfig resolve(const Flags& f) {
  RunConfig c;
  if (!f.config.empty()) apply_config_file(c, f.config);
  if (f.seed_opt->count()) c.seed = f.seed;
  if (f.jobs_opt->count()) c.jobs = f.jobs;
  if (f.out_opt->count()) c.out = f.out;
  if (f.data_opt->count()) c.data = f.data;
  if (c.data.empty()) {
    if (const char* env = std::getenv("DSATRACK_DATA")) c.data = env;
  }
  if (c.jobs < 1) throw ValidationError("--jobs must be >= 1");
  return c;
}

Model load_or_init(const Flags& f, const RunConfig& c) {
  if (!f.weights.empty()) return load_model(f.weights);
  return Model::init(c.model, c.seed);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw ValidationError("cannot write " + p.string());
  out << s;
}

// every immediate subdirectory holding frames, sorted by name
std::vector<SequenceDir> scan_root(const fs::path& root) {
  if (root.empty()) throw ValidationError("no sequences: pass directories, --data or set DSATRACK_DATA");
  if (!fs::is_directory(root)) throw ValidationError(root.string() + " is not a directory");
  std::vector<fs::path> subs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) subs.push_back(e.path());
  std::sort(subs.begin(), subs.end());
  std::vector<SequenceDir> out;
  for (const auto& s : subs) out.push_back(scan_sequence(s));
  if (out.empty()) throw ValidationError("no sequence directories under " + root.string());
  return out;
}

std::vector<SequenceDir> gather(const std::vector<std::string>& dirs, const RunConfig& c) {
  if (dirs.empty()) return scan_root(c.data);
  std::vector<SequenceDir> out;
  for (const auto& d : dirs) out.push_back(scan_sequence(d));
  return out;
}

// constant-velocity toy set used when no training data is supplied
std::vector<SequenceRecord> default_training_set(const RunConfig& c) {
  return synthetic_suite(c.train_sequences, c.seed * 1000 + 17, c.synth.attributes, c.train_length);
}

std::vector<SequenceRecord> load_records(const fs::path& root) {
  std::vector<SequenceRecord> out;
  for (const SequenceDir& d : scan_root(root)) {
    SequenceRecord r;
    r.name = d.name;
    r.groundtruth = d.groundtruth;
    r.attributes = d.attributes;
    for (const auto& p : d.frames) r.frames.push_back(read_image(p));
    if (r.groundtruth.size() != r.frames.size()) throw ValidationError(d.name + ": frame and ground-truth counts differ");
    out.push_back(std::move(r));
  }
  return out;
}

int run_gradcheck(const RunConfig& c, double tol) {
  const auto results = gradient_suite(c.seed);
  bool ok = true;
  std::printf("%-18s %14s %8s\n", "check", "max_rel_error", "coords");
  for (const auto& r : results) {
    const bool pass = r.max_rel_error < tol;
    ok = ok && pass;
    std::printf("%-18s %14.3e %8zu  %s\n", r.name.c_str(), r.max_rel_error, r.coordinates, pass ? "ok" : "FAIL");
  }
  return ok ? 0 : 2;
}

int run_synth(const RunConfig& c) {
  const fs::path root = c.out / "sequences";
  fs::create_directories(root);
  for (int i = 0; i < c.synth_count; ++i) {
    SequenceSpec s = c.synth;
    s.seed = c.seed + static_cast<std::uint64_t>(i);
    const SequenceRecord r = generate_sequence(s);
    write_sequence(root / r.name, r);
    std::printf("%s  %d frames\n", (root / r.name).c_str(), static_cast<int>(r.frames.size()));
  }
  return 0;
}

int run_train(const Flags& f, RunConfig c, bool baseline) {
  if (baseline) c.model = ModelConfig::standard_baseline(c.model);
  Model m = load_or_init(f, c);
  const auto data = c.data.empty() ? default_training_set(c) : load_records(c.data);
  TrainOptions opt = c.train;
  opt.seed = c.seed;
  opt.trainable_layers = resolve_train_layers(c, m);
  if (opt.trainable_layers.empty()) opt.trainable_layers = m.layer_indices();
  fs::create_directories(c.out);
  std::ofstream log(c.out / "train_loss.csv");
  log << "step,total,focal,l1,giou,grad_norm\n";
  opt.on_step = [&](int step, const TrackingLoss& l, double g) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%.4f\n", step, l.total.value().item(), l.focal, l.l1, l.giou,
                  g);
    log << buf;
    if (step % 100 == 0) std::fprintf(stderr, "step %5d  loss %.4f\n", step, l.total.value().item());
  };
  const TrainReport rep = toy_train(m, data, opt);
  save_model(c.out / "model.dsaw", m);
  std::printf("trained %zu parameters for %d steps on %zu sequences\n", rep.parameters, opt.steps, data.size());
  if (!rep.losses.empty()) std::printf("loss %.4f -> %.4f\n", rep.losses.front(), rep.losses.back());
  std::printf("weights: %s\n", (c.out / "model.dsaw").c_str());
  return 0;
}

std::optional<FrameBox> parse_box(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::vector<double> v;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, ',')) v.push_back(std::stod(part));
  if (v.size() != 4) throw ValidationError("--init expects x,y,w,h");
  return FrameBox{v[0], v[1], v[2], v[3]};
}

int run_track(const Flags& f, const RunConfig& c, const std::vector<std::string>& dirs, const std::string& init) {
  const Model m = load_or_init(f, c);
  const auto seqs = gather(dirs, c);
  const auto init_box = parse_box(init);
  const Float32Weights f32 = float32_weights(m);
  std::vector<std::vector<FrameBox>> boxes(seqs.size());
  std::vector<int> clamps(seqs.size(), 0);
  parallel_for(static_cast<int>(seqs.size()), c.jobs, [&](int i) {
    const SequenceDir& s = seqs[i];
    FrameBox b;
    if (init_box) b = *init_box;
    else if (!s.groundtruth.empty()) b = s.groundtruth[0];
    else throw ValidationError(s.name + ": no groundtruth.txt; pass --init x,y,w,h");
    boxes[i] = track_sequence(m, s, b, c.tracker, c.tracker.single_precision ? &f32 : nullptr, c.seed, &clamps[i]);
  });
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const fs::path dir = c.out / seqs[i].name;
    fs::create_directories(dir);
    write_boxes(dir / "results.txt", boxes[i]);
    if (clamps[i]) std::fprintf(stderr, "warning: %s: %d predictions left the frame and were clamped\n",
                                seqs[i].name.c_str(), clamps[i]);
    std::printf("%s\n", (dir / "results.txt").c_str());
  }
  return 0;
}

std::vector<ProfileSample> profile_samples(const RunConfig& c) {
  const auto data = c.data.empty() ? default_training_set(c) : load_records(c.data);
  RngStream rng(c.seed);
  SampleOptions so = c.train.sampling;
  so.max_bank = static_cast<int>(c.model.bank_size);
  std::vector<ProfileSample> out;
  for (int i = 0; i < 16; ++i) {
    const auto& seq = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))];
    TrainSample s = sample_pair(seq, c.model, rng, so);
    out.push_back({std::move(s.templates), std::move(s.search)});
  }
  return out;
}

int run_prune(const Flags& f, RunConfig c, const std::string& variant, const std::string& method,
              const std::string& contributions) {
  const PruneVariant& v = variant_by_name(variant);
  if (method != "crp" && method != "sp") throw ValidationError("--method must be crp or sp");
  const Model m = load_or_init(f, c);
  c.model = m.config;
  std::vector<LayerProfile> profiles;
  if (!contributions.empty()) {
    profiles = profiles_from_table(read_contributions_json(read_text(contributions)), m.dsa_indices());
  } else {
    profiles = profile_layers(m, profile_samples(c));
  }
  PruneSpec spec;
  if (method == "crp") {
    spec = rank_and_prune(profiles, v.p_d, v.p_s);
  } else {
    std::vector<int> gd, gs;
    for (const auto& p : profiles) (p.group == LayerGroup::D ? gd : gs).push_back(p.index);
    spec = sequential_prune(gd, gs, v.p_d, v.p_s);
    for (const auto& p : profiles) spec.contributions[p.index] = p.delta;
  }
  const Model pruned = build_pruned_model(m, spec);
  fs::create_directories(c.out);
  const std::string stem = "pruned_" + variant + "_" + method;
  const std::string json = prune_spec_json(spec);
  write_text(c.out / (stem + ".json"), json + "\n");
  save_model(c.out / (stem + ".dsaw"), pruned);
  std::printf("%s\n", json.c_str());
  return 0;
}

int run_eval(const Flags& f, const RunConfig& c, const std::vector<std::string>& dirs, const std::string& results_dir,
             int synthetic) {
  std::vector<TrackedSequence> tracked;
  if (synthetic > 0) {
    const Model m = load_or_init(f, c);
    SequenceSpec base = c.synth;
    std::vector<SequenceRecord> recs;
    for (int i = 0; i < synthetic; ++i) {
      base.seed = c.seed + static_cast<std::uint64_t>(i);
      recs.push_back(generate_sequence(base));
    }
    tracked = track_records(m, recs, c.tracker, c.jobs, c.seed);
  } else {
    const auto seqs = gather(dirs, c);
    if (!results_dir.empty()) {
      // score existing results.txt files instead of tracking
      for (const auto& s : seqs) {
        TrackedSequence t;
        t.boxes = read_boxes(fs::path(results_dir) / s.name / "results.txt");
        t.result = {s.name, s.attributes, precision_success(t.boxes, s.groundtruth)};
        tracked.push_back(std::move(t));
      }
    } else {
      const Model m = load_or_init(f, c);
      tracked = track_dirs(m, seqs, c.tracker, c.jobs, c.seed);
    }
  }
  const SuiteReport rep = summarize_tracked(tracked);
  fs::create_directories(c.out / "results");
  for (const auto& t : tracked) {
    fs::create_directories(c.out / "results" / t.result.name);
    write_boxes(c.out / "results" / t.result.name / "results.txt", t.boxes);
  }
  write_metrics_csv(c.out / "metrics.csv", rep.overall);
  write_metrics_svg(c.out / "metrics.svg", rep.overall, "OPE over " + std::to_string(tracked.size()) + " sequences");
  write_text(c.out / "summary.json", summary_json(rep) + "\n");
  std::printf("sequences %zu  precision@20 %.4f  success AUC %.4f\n", tracked.size(), rep.overall.precision_at_20,
              rep.overall.success_auc);
  for (const auto& [tag, r] : rep.per_attribute)
    std::printf("  %-16s n=%-3d precision@20 %.4f  success AUC %.4f\n", tag.c_str(), rep.attribute_counts.at(tag),
                r.precision_at_20, r.success_auc);
  return 0;
}

int run_flops(const Flags& f, const RunConfig& c, const std::string& contributions, std::int64_t templates) {
  const Model m = load_or_init(f, c);
  const auto table = contributions.empty() ? reference_contributions()
                                           : read_contributions_json(read_text(contributions));
  const auto profiles = profiles_from_table(table, m.dsa_indices());
  if (templates <= 0) templates = m.config.bank_size;
  auto line = [&](const std::string& name, const Model& model) {
    const FlopReport r = count_flops(model, templates);
    std::string kept;
    for (int i : model.layer_indices()) kept += (kept.empty() ? "" : ",") + std::to_string(i);
    std::printf("%-5s %2zu layers  %8.3f GFLOPs  [%s]\n", name.c_str(), model.layers.size(), r.total / 1e9,
                kept.c_str());
  };
  line("full", m);
  for (const auto& v : canonical_variants()) line(v.name, build_pruned_model(m, rank_and_prune(profiles, v.p_d, v.p_s)));
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& argv) {
  CLI::App app{"dsatrack: semantic-aware one-stream tracker, desk-scale pipeline", "dsatrack"};
  app.fallthrough();
  app.require_subcommand(1);
  Flags f;
  app.add_option("--config", f.config, "flat key=value config file")->check(CLI::ExistingFile);
  app.add_option("--weights", f.weights, "DSAW model weights")->check(CLI::ExistingFile);
  f.seed_opt = app.add_option("--seed", f.seed, "random seed");
  f.jobs_opt = app.add_option("--jobs", f.jobs, "sequences processed in parallel");
  f.out_opt = app.add_option("--out", f.out, "output directory (default ./out)");
  f.data_opt = app.add_option("--data", f.data, "sequence root (default $DSATRACK_DATA)");
  std::vector<std::string> sets;
  app.add_option("--set", sets, "override one config key, key=value");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  double tol = 1e-4;
  gc->add_option("--tolerance", tol, "maximum relative error");

  auto* sy = app.add_subcommand("synth", "write synthetic sequences");
  std::string attrs;
  int length = 0, count = 0;
  double speed = -2.0;
  sy->add_option("--attributes", attrs, "comma list: camera-motion,fast-motion,low-resolution,occlusion,scale-variation");
  sy->add_option("--length", length, "frames per sequence");
  sy->add_option("--count", count, "number of sequences");
  sy->add_option("--speed", speed, "target speed px/frame (0 = static)");

  auto* tr = app.add_subcommand("train", "toy training on synthetic or supplied sequences");
  int steps = -1;
  double lr = 0.0;
  std::string layers;
  bool baseline = false;
  tr->add_option("--steps", steps, "gradient steps");
  tr->add_option("--lr", lr, "learning rate");
  tr->add_option("--layers", layers, "trainable layers: dsa, all or a comma list");
  tr->add_flag("--baseline", baseline, "use standard blocks everywhere");

  auto* tk = app.add_subcommand("track", "run the tracker over sequence directories");
  std::vector<std::string> track_dirs_arg;
  std::string init;
  tk->add_option("sequences", track_dirs_arg, "sequence directories (default: every one under --data)");
  tk->add_option("--init", init, "initial box x,y,w,h when there is no ground truth");

  auto* pr = app.add_subcommand("prune", "layer pruning by contribution ranking or sequentially");
  std::string variant, method = "crp", contributions;
  pr->add_option("--variant", variant, "d8, d7, d6 or d4")->required();
  pr->add_option("--method", method, "crp or sp")->check(CLI::IsMember({"crp", "sp"}));
  pr->add_option("--contributions", contributions, "JSON {layer: delta}; profiled from data when absent")
      ->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "track and score (precision / success)");
  std::vector<std::string> eval_dirs;
  std::string results_dir;
  int synthetic = 0;
  ev->add_option("sequences", eval_dirs, "sequence directories (default: every one under --data)");
  ev->add_option("--results", results_dir, "score existing <dir>/<name>/results.txt instead of tracking");
  ev->add_option("--synthetic", synthetic, "generate this many sequences in memory");
  ev->add_option("--attributes", attrs, "attributes of generated sequences");
  ev->add_option("--length", length, "frames per generated sequence");

  auto* fl = app.add_subcommand("flops", "analytic FLOPs of the full model and the pruned variants");
  std::string fl_contrib;
  std::int64_t templates = 0;
  fl->add_option("--contributions", fl_contrib, "JSON {layer: delta}")->check(CLI::ExistingFile);
  fl->add_option("--templates", templates, "templates in the bank");

  std::vector<const char*> raw;
  for (const auto& a : argv) raw.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(raw.size()), raw.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    RunConfig c = resolve(f);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ValidationError("--set expects key=value");
      apply_setting(c, s.substr(0, eq), s.substr(eq + 1));
    }
    if (!attrs.empty()) c.synth.attributes = parse_attribute_list(attrs);
    if (length > 0) c.synth.length = length;
    if (count > 0) c.synth_count = count;
    if (speed > -2.0) c.synth.speed = speed;
    if (steps >= 0) c.train.steps = steps;
    if (lr > 0.0) c.train.lr = lr;
    if (!layers.empty()) c.train_layers = layers;
    c.model.validate();

    if (*gc) return run_gradcheck(c, tol);
    if (*sy) return run_synth(c);
    if (*tr) return run_train(f, c, baseline);
    if (*tk) return run_track(f, c, track_dirs_arg, init);
    if (*pr) return run_prune(f, c, variant, method, contributions);
    if (*ev) return run_eval(f, c, eval_dirs, results_dir, synthetic);
    if (*fl) return run_flops(f, c, fl_contrib, templates);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace dsa
