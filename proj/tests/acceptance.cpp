// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include "triad/attention_head.hpp"
#include "triad/augment.hpp"
#include "triad/cli.hpp"
#include "triad/coord_attention.hpp"
#include "triad/gradcheck_suite.hpp"
#include "triad/io.hpp"
#include "triad/model.hpp"
#include "triad/postproc.hpp"
#include "triad/train.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

using namespace triad;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = true;
  std::string detail;

  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "triad");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string config_path(const std::string& name) { return std::string(TRIAD_SOURCE_DIR) + "/configs/" + name; }

fs::path scratch_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("triad-acceptance-" + std::to_string(std::random_device{}()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// --- 1 -------------------------------------------------------------------------

Verdict gradient_suite() {
  Verdict v;
  const auto t0 = Clock::now();
  double worst = 0;
  std::size_t rows = 0;
  for (const char* module : {"tensor-core", "attention-head", "coord-attention", "postproc-loss"})
    for (const GradCheckRow& r : run_gradcheck(module, 20)) {
      ++rows;
      worst = std::max(worst, r.max_rel_error / r.tolerance);
      v.expect(r.pass, r.module + "/" + r.op + " max " + fmt("%.3g", r.max_rel_error));
      v.expect(r.seeds >= 20, r.op + " ran fewer than 20 seeds");
      v.expect(r.tolerance <= 1e-4, r.op + " tolerance above 1e-4");
    }
  const double elapsed = seconds_since(t0);
  v.expect(elapsed < 300, "runtime " + fmt("%.1f", elapsed) + " s");
  v.detail += (v.detail.empty() ? "" : "; ") + std::to_string(rows) + " ops x 20 seeds, worst error/tolerance " +
              fmt("%.3g", worst) + ", " + fmt("%.1f", elapsed) + " s";
  return v;
}

// --- 2 -------------------------------------------------------------------------

Verdict oracle_equivalences() {
  Verdict v;
  Rng rng(2024);
  double worst_a = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const Index C = 1 + rng.below(6), H = 2 + rng.below(7), W = 2 + rng.below(7);
    SpatialAttnParams p(C, {});
    rng.fill(p.tap_weights, -1, 1);
    ConvParams<double> conv(ConvSpec{C, C, 3, 1, 1, 1, C});
    for (Index c = 0; c < C; ++c)
      for (Index k = 0; k < 9; ++k) conv.weight(c, 0, k / 3, k % 3) = p.tap_weights[k];
    const Tensord x = rng.tensor(Shape{1, C, H, W});
    const StackedFeature y = spatial_attention(concat_levels(x), p, {true});
    worst_a = std::max(worst_a, max_abs_diff(level_as_nchw(y, 0), conv2d(x, conv)));
    worst_a = std::max(worst_a, max_abs_diff(level_as_nchw(y, 1), conv2d(x, conv)));
  }
  v.expect(worst_a < 1e-10, "(a) spatial vs conv2d diff " + fmt("%.3g", worst_a));

  bool relu = true;
  for (int trial = 0; trial < 10; ++trial) {
    const Index C = 4 * (1 + rng.below(4));
    StackedFeature f{rng.tensor(Shape{2, 12, C}), 3, 4};
    DyReluParams p(C, 4, 1.0, 0.5);
    rng.fill(p.fc1.weight, -1, 1);
    rng.fill(p.fc1.bias, -1, 1);
    const StackedFeature y = task_attention(f, p);
    for (Index i = 0; i < f.data.size(); ++i) relu = relu && y.data[i] == std::max(f.data[i], 0.0);
  }
  v.expect(relu, "(b) default task attention differs from ReLU");

  bool quarter = true;
  for (int trial = 0; trial < 10; ++trial) {
    const Index C = 16 * (1 + rng.below(2));
    const Tensord x = rng.tensor(Shape{1, C, 1 + rng.below(6), 1 + rng.below(6)});
    quarter = quarter && identical(coord_attention(x, CAParams(C, 16)), 0.25 * x);
  }
  v.expect(quarter, "(c) zero-parameter CA is not exactly 0.25 x");

  double worst_d = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const Index S = 1 + rng.below(20), C = 1 + rng.below(8);
    const StackedFeature f{rng.tensor(Shape{2, S, C}), 1, S};
    ScaleAttnParams p(2);
    rng.fill(p.weight, -2, 2);
    rng.fill(p.bias, -1, 1);
    const Tensord gates = scale_gates(f, p);
    const StackedFeature y = scale_attention(f, p);
    for (Index l = 0; l < 2; ++l) {
      double mean[2] = {0, 0};
      for (Index k = 0; k < 2; ++k) {
        for (Index s = 0; s < S; ++s)
          for (Index c = 0; c < C; ++c) mean[k] += f.data(k, s, c);
        mean[k] /= static_cast<double>(S * C);
      }
      const double pre = p.weight(l, 0) * mean[0] + p.weight(l, 1) * mean[1] + p.bias[l];
      const double gate = std::max(0.0, std::min(1.0, (pre + 1) / 2));
      worst_d = std::max(worst_d, std::abs(gates[l] - gate));
      for (Index s = 0; s < S; ++s)
        for (Index c = 0; c < C; ++c) worst_d = std::max(worst_d, std::abs(y.data(l, s, c) - gate * f.data(l, s, c)));
    }
  }
  v.expect(worst_d < 1e-12, "(d) scale gate vs naive loop " + fmt("%.3g", worst_d));
  if (v.pass)
    v.detail = "(a) " + fmt("%.2g", worst_a) + " over 10 instances, (b) exact, (c) exact, (d) " + fmt("%.2g", worst_d);
  return v;
}

// --- 3 -------------------------------------------------------------------------

std::vector<Detection> brute_force_nms(const std::vector<Detection>& dets, double t) {
  std::vector<std::size_t> alive(dets.size());
  std::iota(alive.begin(), alive.end(), 0);
  std::vector<Detection> kept;
  while (!alive.empty()) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < alive.size(); ++k)
      if (dets[alive[k]].score > dets[alive[best]].score) best = k;
    const Detection top = dets[alive[best]];
    kept.push_back(top);
    alive.erase(alive.begin() + static_cast<std::ptrdiff_t>(best));
    std::vector<std::size_t> next;
    for (std::size_t i : alive)
      if (dets[i].class_id != top.class_id || diou(top.box, dets[i].box) <= t) next.push_back(i);
    alive = next;
  }
  return kept;
}

Verdict nms_equivalence() {
  Verdict v;
  int mismatches = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    std::vector<Detection> dets;
    for (int i = 0; i < 50; ++i)
      dets.push_back({{rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform(2, 24), rng.uniform(2, 24)}, rng.below(3),
                      rng.uniform()});
    const auto a = diou_nms(dets, 0.45), b = brute_force_nms(dets, 0.45);
    bool same = a.size() == b.size();
    for (std::size_t i = 0; same && i < a.size(); ++i)
      same = a[i].score == b[i].score && a[i].class_id == b[i].class_id && a[i].box.cx == b[i].box.cx &&
             a[i].box.cy == b[i].box.cy && a[i].box.w == b[i].box.w && a[i].box.h == b[i].box.h;
    if (!same) ++mismatches;
  }
  v.expect(mismatches == 0, std::to_string(mismatches) + " of 100 seeds differ from the greedy oracle");
  const Box unit = Box::from_corners(0, 0, 1, 1);
  const double same = diou(unit, unit), diag = diou(unit, Box::from_corners(1, 1, 2, 2));
  v.expect(std::abs(same - 1) < 1e-12, "identical boxes diou " + fmt("%.17g", same));
  v.expect(std::abs(diag + 0.25) < 1e-12, "diagonal unit boxes diou " + fmt("%.17g", diag));
  if (v.pass) v.detail = "100 seeds x 50 boxes identical in set and order; diou 1 and -0.25";
  return v;
}

// --- 4 -------------------------------------------------------------------------

Verdict focal_and_smoothing() {
  Verdict v;
  Rng rng(4);
  double worst_ce = 0;
  for (int i = 0; i < 1000; ++i) {
    const double p = rng.uniform(1e-4, 1 - 1e-4);
    worst_ce = std::max(worst_ce, std::abs(focal_loss(p, 1, 1.0, 0.0) + std::log(p)));
    worst_ce = std::max(worst_ce, std::abs(focal_loss(p, 0, 0.0, 0.0) + std::log(1 - p)));
  }
  v.expect(worst_ce < 1e-12, "focal vs cross-entropy " + fmt("%.3g", worst_ce));
  double worst_mass = 0;
  bool argmax = true;
  for (Index K : {2, 20, 80})
    for (Index hot = 0; hot < K; ++hot) {
      std::vector<double> onehot(static_cast<std::size_t>(K));
      onehot[static_cast<std::size_t>(hot)] = 1;
      const auto s = label_smooth(onehot, 0.1);
      worst_mass = std::max(worst_mass, std::abs(std::accumulate(s.begin(), s.end(), 0.0) - 1));
      argmax = argmax && std::max_element(s.begin(), s.end()) - s.begin() == hot;
    }
  v.expect(worst_mass < 1e-12, "label smoothing mass error " + fmt("%.3g", worst_mass));
  v.expect(argmax, "label smoothing moved the argmax");
  if (v.pass) v.detail = "CE error " + fmt("%.2g", worst_ce) + ", mass error " + fmt("%.2g", worst_mass);
  return v;
}

// --- 5 -------------------------------------------------------------------------

Verdict parameter_audit() {
  Verdict v;
  const CliRun r = cli({"params", "--config", config_path("wide.cfg"), "--compare-csp"});
  v.expect(r.code == 0, "params exited " + std::to_string(r.code) + ": " + r.err);
  const auto at = r.out.find("delta");
  v.expect(at != std::string::npos, "no delta row");
  if (!v.pass) return v;
  const long long delta = std::stoll(r.out.substr(at + 5));
  v.expect(delta > 0, "delta " + std::to_string(delta));
  v.detail = "plain minus CSP = " + std::to_string(delta) + " parameters at widths 256/512/1024";
  return v;
}

// --- 6 -------------------------------------------------------------------------

Verdict variant_contracts() {
  Verdict v;
  const Model tiny = build_model(load_config(config_path("tiny.cfg")));
  v.expect(blocks_per_head(tiny) == 1, "tiny has " + std::to_string(blocks_per_head(tiny)) + " blocks per head");
  v.expect(ca_tap_count(tiny) == 3, "tiny has " + std::to_string(ca_tap_count(tiny)) + " CA taps");
  const Model nano = build_model(load_config(config_path("nano.cfg")));
  v.expect(all_spatial_convs_depthwise(nano), "nano has a non-depthwise spatial conv");

  const std::string image = (scratch_dir() / "variant.ppm").string();
  Rng rng(6);
  write_ppm(image, rng.tensor(Shape{3, 64, 64}, 0, 1));
  std::string timing;
  for (const char* cfg : {"tiny.cfg", "nano.cfg"}) {
    const auto t0 = Clock::now();
    const CliRun r = cli({"run", "--config", config_path(cfg), "--image", image});
    const double s = seconds_since(t0);
    v.expect(r.code == 0, std::string(cfg) + " run failed: " + r.err);
    v.expect(s < 1.0, std::string(cfg) + " took " + fmt("%.3f", s) + " s");
    timing += std::string(timing.empty() ? "" : ", ") + cfg + " " + fmt("%.3f", s) + " s";
  }
  if (v.pass) v.detail = "1 block/head, 3 CA taps, depthwise nano; end-to-end " + timing;
  return v;
}

// --- 7 -------------------------------------------------------------------------

std::vector<double> parse_losses(const std::string& out) {
  std::vector<double> losses;
  std::istringstream lines(out);
  std::string line;
  while (std::getline(lines, line)) losses.push_back(std::stod(line.substr(line.rfind(' ') + 1)));
  return losses;
}

Verdict training_smoke() {
  Verdict v;
  const auto t0 = Clock::now();
  const CliRun a = cli({"train-toy", "--steps", "200", "--seed", "7"});
  const double s = seconds_since(t0);
  const CliRun b = cli({"train-toy", "--steps", "200", "--seed", "7"});
  v.expect(a.code == 0, "train-toy failed: " + a.err);
  if (!v.pass) return v;
  const auto losses = parse_losses(a.out);
  v.expect(losses.size() == 201, "expected 201 loss lines");
  if (!v.pass) return v;
  v.expect(losses.back() < 0.5 * losses.front(),
           "loss " + fmt("%.6f", losses.front()) + " -> " + fmt("%.6f", losses.back()));
  v.expect(a.out == b.out, "two runs differ");
  v.expect(s < 600, "runtime " + fmt("%.1f", s) + " s");
  if (v.pass)
    v.detail = "loss " + fmt("%.4f", losses.front()) + " -> " + fmt("%.4f", losses.back()) + " (ratio " +
               fmt("%.3f", losses.back() / losses.front()) + "), identical reruns, " + fmt("%.2f", s) + " s";
  return v;
}

// --- 8 -------------------------------------------------------------------------

Verdict determinism_and_persistence() {
  Verdict v;
  const ModelConfig cfg = load_config(config_path("toy.cfg"));
  Model a = build_model(cfg);
  const std::string path = (scratch_dir() / "roundtrip.3aw").string();
  save_weights(a, path);
  ModelConfig other = cfg;
  other.seed = cfg.seed + 11;
  Model b = build_model(other);
  load_weights(b, path);
  auto pa = parameters(a), pb = parameters(b);
  bool exact = parameter_checksum(a) == parameter_checksum(b);
  for (std::size_t i = 0; i < pa.size(); ++i)
    exact = exact && identical(pa[i].tensor->cast<float>(), pb[i].tensor->cast<float>());
  v.expect(exact, "weight round trip not bit-exact");

  const std::string image = (scratch_dir() / "det.ppm").string();
  Rng rng(8);
  write_ppm(image, rng.tensor(Shape{3, 64, 64}, 0, 1));
  const std::vector<std::string> run{"run", "--config", config_path("toy.cfg"), "--weights", path, "--image", image};
  const CliRun r1 = cli(run), r2 = cli(run);
  v.expect(r1.code == 0, "run failed: " + r1.err);
  v.expect(r1.out == r2.out, "run output differs between invocations");

  std::vector<LabeledImage> src;
  for (int i = 0; i < 4; ++i) src.push_back(synthetic_image(64, 2, rng));
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng m1(seed), m2(seed);
    const LabeledImage x = mosaic(src, 64, MosaicRanges::stronger(), m1), y = mosaic(src, 64, MosaicRanges::stronger(), m2);
    v.expect(identical(x.pixels, y.pixels) && x.boxes.size() == y.boxes.size(), "mosaic differs under equal seeds");
    Rng u1(seed), u2(seed);
    const LabeledImage p = mixup(src[0], src[1], u1), q = mixup(src[0], src[1], u2);
    v.expect(identical(p.pixels, q.pixels) && p.boxes.size() == q.boxes.size(), "mixup differs under equal seeds");
    for (std::size_t i = 0; i < x.boxes.size() && i < y.boxes.size(); ++i)
      v.expect(x.boxes[i].box.cx == y.boxes[i].box.cx && x.boxes[i].box.w == y.boxes[i].box.w, "mosaic boxes differ");
  }
  if (v.pass)
    v.detail = std::to_string(pa.size()) + " tensors bit-exact, run output identical (" +
               std::to_string(std::count(r1.out.begin(), r1.out.end(), '\n')) + " lines), mosaic/mixup reproducible";
  return v;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient suite", gradient_suite},
      {"oracle equivalences", oracle_equivalences},
      {"DIoU-NMS equivalence", nms_equivalence},
      {"focal / label-smoothing reductions", focal_and_smoothing},
      {"parameter audit", parameter_audit},
      {"variant contracts", variant_contracts},
      {"training smoke test", training_smoke},
      {"determinism and persistence", determinism_and_persistence},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    if (!v.pass) ++failed;
    std::cout << "criterion " << i + 1 << " " << (v.pass ? "PASS" : "FAIL") << " " << criteria[i].first << ": "
              << v.detail << std::endl;
  }
  fs::remove_all(scratch_dir());
  return failed == 0 ? 0 : 1;
}
