#include "triad/cli.hpp"

#include "triad/gradcheck_suite.hpp"
#include "triad/io.hpp"
#include "triad/model.hpp"
#include "triad/train.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace triad {

namespace fs = std::filesystem;

namespace {

ModelConfig config_or_default(const std::string& path) {
  return path.empty() ? ModelConfig::preset(Variant::full) : load_config(path);
}

Model load_or_build(const ModelConfig& cfg, const std::string& weights) {
  Model m = build_model(cfg);
  if (!weights.empty()) load_weights(m, weights);
  return m;
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// --- run ------------------------------------------------------------------------

struct RunArgs {
  std::string config, weights, image, dump_dir, image_id;
};

int cmd_run(const RunArgs& a, std::ostream& out) {
  const ModelConfig cfg = config_or_default(a.config);
  const Model m = load_or_build(cfg, a.weights);
  const Tensord image = read_ppm(a.image);
  const ForwardResult r = forward(m, image);
  const std::string id = a.image_id.empty() ? fs::path(a.image).stem().string() : a.image_id;
  for (const Detection& d : detect(m, r)) out << format_detection(id, d) << "\n";
  if (!a.dump_dir.empty()) {
    fs::create_directories(a.dump_dir);
    for (std::size_t i = 0; i < 3; ++i) {
      write_pgm((fs::path(a.dump_dir) / ("c" + std::to_string(i + 3) + ".pgm")).string(), channel_grid(r.backbone[i]));
      write_pgm((fs::path(a.dump_dir) / ("p" + std::to_string(i + 3) + ".pgm")).string(), channel_grid(r.neck[i]));
    }
  }
  return 0;
}

// --- gradcheck ------------------------------------------------------------------------

int cmd_gradcheck(const std::string& config, const std::string& module, int seeds, bool corrupt, std::ostream& out) {
  if (!config.empty()) load_config(config);
  const auto rows = run_gradcheck(module, seeds, corrupt);
  out << format_gradcheck_table(rows);
  const bool ok = std::all_of(rows.begin(), rows.end(), [](const GradCheckRow& r) { return r.pass; });
  out << (ok ? "gradcheck: all passed\n" : "gradcheck: FAILED\n");
  return ok ? 0 : 1;
}

// --- params ---------------------------------------------------------------------------

void print_row(std::ostream& out, const std::string& name, long long count) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-14s %14lld\n", name.c_str(), count);
  out << buf;
}

Index total_params(Model& m) { return count_params(parameters(m)); }

int cmd_params(const std::string& config, bool compare_csp, std::ostream& out) {
  const ModelConfig cfg = config_or_default(config);
  Model m = build_model(cfg, false);
  out << "variant " << to_string(cfg.variant) << " widths " << cfg.widths.c3 << "," << cfg.widths.c4 << ","
      << cfg.widths.c5 << " csp " << (cfg.csp ? "on" : "off") << "\n";
  char header[64];
  std::snprintf(header, sizeof header, "%-14s %14s\n", "module", "params");
  out << header;
  for (const auto& [name, count] : parameter_table(m)) print_row(out, name, count);
  print_row(out, "total", total_params(m));
  if (compare_csp) {
    ModelConfig plain = cfg, csp = cfg;
    plain.csp = false;
    csp.csp = true;
    Model mp = build_model(plain, false), mc = build_model(csp, false);
    ParamList np, nc;
    collect("neck", mp.neck, np);
    collect("neck", mc.neck, nc);
    const Index tp = total_params(mp), tc = total_params(mc);
    print_row(out, "neck_plain", count_params(np));
    print_row(out, "neck_csp", count_params(nc));
    print_row(out, "total_plain", tp);
    print_row(out, "total_csp", tc);
    print_row(out, "delta", tp - tc);
  }
  return 0;
}

// --- train-toy ------------------------------------------------------------------------

struct TrainArgs {
  std::string config, save;
  int steps = 200;
  std::uint64_t seed = 7;
  std::optional<double> lr;
};

ModelConfig train_config(const std::string& path) {
  if (!path.empty()) return load_config(path);
  ModelConfig cfg = ModelConfig::preset(Variant::full);
  cfg.widths = {8, 16, 32};
  cfg.ca_ratio = 8;
  return cfg;
}

int cmd_train_toy(const TrainArgs& a, std::ostream& out) {
  ModelConfig cfg = train_config(a.config);
  require(cfg.widths.c3 <= 32 && cfg.widths.c4 <= 32 && cfg.widths.c5 <= 32,
          "train-toy: toy widths must be at most 32");
  require(cfg.image_size == 64, "train-toy: model.image_size must be 64");
  cfg.seed = a.seed;
  Model m = build_model(cfg);
  const LabeledImage scene = training_scene(cfg, a.seed);
  const std::vector<double> losses = train_toy(m, scene, {a.steps, a.lr.value_or(cfg.lr)});
  char buf[96];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "step %zu loss %.9f\n", i, losses[i]);
    out << buf;
  }
  if (!a.save.empty()) save_weights(m, a.save);
  return 0;
}

// --- weights-io-selftest ----------------------------------------------------------------

int cmd_weights_selftest(const std::string& config, std::ostream& out) {
  ModelConfig cfg = config_or_default(config);
  const fs::path dir = fs::temp_directory_path() / ("triad-selftest-" + hex64(std::random_device{}()));
  fs::create_directories(dir);
  const std::string path = (dir / "model.3aw").string();
  bool ok = true;
  const auto report = [&](const std::string& name, bool pass, const std::string& detail) {
    out << name << " " << (pass ? "ok" : "FAILED") << (detail.empty() ? "" : " " + detail) << "\n";
    ok = ok && pass;
  };
  try {
    Model a = build_model(cfg);
    save_weights(a, path);
    ModelConfig other = cfg;
    other.seed = cfg.seed + 1;
    Model b = build_model(other);
    load_weights(b, path);
    const auto ca = parameter_checksum(a), cb = parameter_checksum(b);
    report("roundtrip", ca == cb, "checksum " + hex64(ca) + " " + hex64(cb));

    const auto size = fs::file_size(path);
    const std::string cut = (dir / "truncated.3aw").string();
    fs::copy_file(path, cut, fs::copy_options::overwrite_existing);
    fs::resize_file(cut, size - 6);
    try {
      load_weights(b, cut);
      report("truncated", false, "accepted");
    } catch (const Error& e) {
      report("truncated", std::string(e.what()).find("tensor '") != std::string::npos, std::string("-> ") + e.what());
    }

    const std::string foreign = (dir / "foreign.3aw").string();
    {
      std::ofstream f(foreign, std::ios::binary);
      f << "GGUF" << std::string(64, '\xff');
    }
    try {
      load_weights(b, foreign);
      report("foreign_magic", false, "accepted");
    } catch (const Error& e) {
      report("foreign_magic", std::string(e.what()).find("magic") != std::string::npos, std::string("-> ") + e.what());
    }
  } catch (...) {
    fs::remove_all(dir);
    throw;
  }
  fs::remove_all(dir);
  return ok ? 0 : 1;
}

// --- init-weights ------------------------------------------------------------------------

int cmd_init_weights(const std::string& config, const std::string& path, bool zero, std::ostream& out) {
  const ModelConfig cfg = config_or_default(config);
  Model m = build_model(cfg);
  if (zero) m = zeros_like(m);
  save_weights(m, path);
  out << "wrote " << path << " checksum " << hex64(parameter_checksum(m)) << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Detector with attention heads, coordinate attention and a CSP/PAN neck"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Detect objects in a binary PPM image");
  run_cmd->add_option("--config", run.config, "Configuration file (defaults to the full variant)");
  run_cmd->add_option("--weights", run.weights, "Weight file (defaults to seeded initialisation)");
  run_cmd->add_option("--image", run.image, "Binary PPM image")->required();
  run_cmd->add_option("--dump-features", run.dump_dir, "Directory for C3-C5 / P3-P5 feature maps as PGM");
  run_cmd->add_option("--image-id", run.image_id, "Identifier printed with each detection (defaults to the file stem)");

  std::string gc_config, gc_module = "all";
  int gc_seeds = 20;
  bool gc_corrupt = false;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc_cmd->add_option("--config", gc_config, "Configuration file (validated)");
  gc_cmd->add_option("--module", gc_module, "tensor-core, attention-head, coord-attention, neck, postproc-loss, model or all");
  gc_cmd->add_option("--seeds", gc_seeds, "Random instances per operation");
  gc_cmd->add_flag("--corrupt-backward", gc_corrupt, "Perturb analytic gradients (harness self-test)");

  std::string pa_config;
  bool pa_compare = false;
  auto* pa_cmd = app.add_subcommand("params", "Parameter counts per module");
  pa_cmd->add_option("--config", pa_config, "Configuration file");
  pa_cmd->add_flag("--compare-csp", pa_compare, "Compare plain and CSP fusion blocks");

  TrainArgs tr;
  double tr_lr = 0;
  auto* tr_cmd = app.add_subcommand("train-toy", "Gradient descent on a fixed synthetic scene");
  tr_cmd->add_option("--config", tr.config, "Configuration file (defaults to widths 8,16,32)");
  tr_cmd->add_option("--steps", tr.steps, "Number of updates");
  tr_cmd->add_option("--seed", tr.seed, "Seed for the scene and the initial weights");
  auto* lr_opt = tr_cmd->add_option("--lr", tr_lr, "Learning rate (defaults to train.lr)");
  tr_cmd->add_option("--save", tr.save, "Write the trained weights here");

  std::string wi_config;
  auto* wi_cmd = app.add_subcommand("weights-io-selftest", "Round-trip, truncation and magic checks of the weight format");
  wi_cmd->add_option("--config", wi_config, "Configuration file");

  std::string iw_config, iw_out;
  bool iw_zero = false;
  auto* iw_cmd = app.add_subcommand("init-weights", "Write initial weights");
  iw_cmd->add_option("--config", iw_config, "Configuration file");
  iw_cmd->add_option("--out", iw_out, "Output weight file")->required();
  iw_cmd->add_flag("--zero", iw_zero, "Write all-zero parameters");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*run_cmd) return cmd_run(run, out);
    if (*gc_cmd) return cmd_gradcheck(gc_config, gc_module, gc_seeds, gc_corrupt, out);
    if (*pa_cmd) return cmd_params(pa_config, pa_compare, out);
    if (*tr_cmd) {
      if (*lr_opt) tr.lr = tr_lr;
      return cmd_train_toy(tr, out);
    }
    if (*wi_cmd) return cmd_weights_selftest(wi_config, out);
    if (*iw_cmd) return cmd_init_weights(iw_config, iw_out, iw_zero, out);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg)
      if (c == '\n') c = ' ';
    err << "error: " << msg << "\n";
    return 1;
  }
  return 1;
}

}  // namespace triad
