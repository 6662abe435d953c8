#include "triad/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace triad {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::tiny: return "tiny";
    case Variant::nano: return "nano";
    case Variant::x_toy: return "x-toy";
  }
  return "full";
}

Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "tiny") return Variant::tiny;
  if (s == "nano") return Variant::nano;
  if (s == "x-toy") return Variant::x_toy;
  throw Error("config: unknown variant '" + s + "' (expected full, tiny, nano or x-toy)");
}

ModelConfig ModelConfig::preset(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.anchors = {std::vector<Anchor>{{4, 5}, {8, 10}, {12, 8}}, std::vector<Anchor>{{12, 20}, {20, 15}, {24, 30}},
               std::vector<Anchor>{{32, 24}, {40, 48}, {56, 56}}};
  switch (v) {
    case Variant::full: break;
    case Variant::tiny: c.head_blocks = 1; break;
    case Variant::nano:
      c.head_blocks = 1;
      c.separable = true;
      c.mixup = true;
      break;
    case Variant::x_toy:
      c.widths = {32, 64, 128};
      c.mosaic = MosaicRanges::stronger();
      break;
  }
  return c;
}

void ModelConfig::validate() const {
  require(num_classes >= 1, "config: model.num_classes must be at least 1");
  require(image_size > 0 && image_size % 32 == 0, "config: model.image_size must be a positive multiple of 32");
  for (std::size_t i = 0; i < 3; ++i) {
    const Index w = widths[i];
    require(w > 0 && w % 4 == 0, "config: width " + std::to_string(w) + " must be a positive multiple of 4");
    require(ca_ratio >= 1 && w % ca_ratio == 0,
            "config: width " + std::to_string(w) + " is not divisible by ca.ratio " + std::to_string(ca_ratio));
    require(!anchors[i].empty(), "config: level " + std::to_string(i) + " has no anchors");
    require(anchors[i].size() == anchors[0].size(), "config: every level needs the same anchor count");
    for (const Anchor& a : anchors[i]) require(a.w > 0 && a.h > 0, "config: anchors must be positive");
  }
  require(conf_threshold >= 0 && conf_threshold <= 1, "config: postproc.conf_threshold must be in [0, 1]");
  require(nms_threshold >= 0 && nms_threshold <= 1, "config: postproc.nms_threshold must be in [0, 1]");
  require(loss.alpha >= 0 && loss.alpha <= 1, "config: loss.alpha must be in [0, 1]");
  require(loss.gamma >= 0, "config: loss.gamma must be non-negative");
  require(loss.label_smoothing >= 0 && loss.label_smoothing < 1, "config: loss.label_smoothing must be in [0, 1)");
  require(dyrelu_reduction >= 1, "config: dyrelu.reduction must be at least 1");
  require(head_blocks >= 1, "config: model.head_blocks must be at least 1");
  require(mosaic.scale_lo > 0 && mosaic.scale_hi >= mosaic.scale_lo, "config: augment scale range is invalid");
  require(lr >= 0, "config: train.lr must be non-negative");
}

std::vector<LevelSpec> ModelConfig::levels() const {
  std::vector<LevelSpec> out;
  for (std::size_t i = 0; i < 3; ++i) out.push_back({static_cast<double>(kPyramidStrides[i]), anchors[i]});
  return out;
}

// --- config text -----------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  require(!v.empty() && end == v.c_str() + v.size() && std::isfinite(d),
          "config: " + key + " expects a number, got '" + v + "'");
  return d;
}

Index parse_index(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long long i = std::strtoll(v.c_str(), &end, 10);
  require(!v.empty() && end == v.c_str() + v.size(), "config: " + key + " expects an integer, got '" + v + "'");
  return static_cast<Index>(i);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error("config: " + key + " expects true or false, got '" + v + "'");
}

std::vector<Anchor> parse_anchors(const std::string& key, const std::string& v) {
  std::vector<Anchor> out;
  for (const std::string& item : split(v, ',')) {
    const auto x = item.find('x');
    require(x != std::string::npos, "config: " + key + " expects WxH pairs, got '" + item + "'");
    out.push_back({parse_double(key, trim(item.substr(0, x))), parse_double(key, trim(item.substr(x + 1)))});
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

using Setter = std::function<void(ModelConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    t["model.num_classes"] = [](ModelConfig& c, const std::string& k, const std::string& v) {
      c.num_classes = parse_index(k, v);
    };
    t["model.widths"] = [](ModelConfig& c, const std::string& k, const std::string& v) {
      const auto parts = split(v, ',');
      require(parts.size() == 3, "config: " + k + " expects three comma-separated widths");
      c.widths = {parse_index(k, parts[0]), parse_index(k, parts[1]), parse_index(k, parts[2])};
    };
    t["model.csp"] = [](ModelConfig& c, const std::string& k, const std::string& v) { c.csp = parse_bool(k, v); };
    t["model.seed"] = [](ModelConfig& c, const std::string& k, const std::string& v) {
      c.seed = static_cast<std::uint64_t>(parse_index(k, v));
    };
    t["model.image_size"] = [](ModelConfig& c, const std::string& k, const std::string& v) {
      c.image_size = parse_index(k, v);
    };
    t["model.head_blocks"] = [](ModelConfig& c, const std::string& k, const std::string& v) {
      c.head_blocks = parse_index(k, v);
    };
    t["model.separable"] = [](ModelConfig& c, const std::string& k, const std::string& v) {
      c.separable = parse_bool(k, v);
    };
    for (int i = 0; i < 3; ++i)
      t["anchors.p" + std::to_string(i + 3)] = [i](ModelConfig& c, const std::string& k, const std::string& v) {
        c.anchors[static_cast<std::size_t>(i)] = parse_anchors(k, v);
      };
    const auto real = [&t](const std::string& key, double ModelConfig::*field) {
      t[key] = [field](ModelConfig& c, const std::string& k, const std::string& v) { c.*field = parse_double(k, v); };
    };
    const auto loss = [&t](const std::string& key, double LossConfig::*field) {
      t[key] = [field](ModelConfig& c, const std::string& k, const std::string& v) {
        c.loss.*field = parse_double(k, v);
      };
    };
    const auto aug = [&t](const std::string& key, double MosaicRanges::*field) {
      t[key] = [field](ModelConfig& c, const std::string& k, const std::string& v) {
        c.mosaic.*field = parse_double(k, v);
      };
    };
    real("postproc.conf_threshold", &ModelConfig::conf_threshold);
    real("postproc.nms_threshold", &ModelConfig::nms_threshold);
    real("dyrelu.lambda_a", &ModelConfig::lambda_a);
    real("dyrelu.lambda_b", &ModelConfig::lambda_b);
    real("train.lr", &ModelConfig::lr);
    loss("loss.alpha", &LossConfig::alpha);
    loss("loss.gamma", &LossConfig::gamma);
    loss("loss.label_smoothing", &LossConfig::label_smoothing);
    loss("loss.w_box", &LossConfig::w_box);
    loss("loss.w_obj", &LossConfig::w_obj);
    loss("loss.w_cls", &LossConfig::w_cls);
    aug("augment.scale_lo", &MosaicRanges::scale_lo);
    aug("augment.scale_hi", &MosaicRanges::scale_hi);
    aug("augment.shift", &MosaicRanges::shift);
    aug("augment.flip_p", &MosaicRanges::flip_p);
    t["augment.mixup"] = [](ModelConfig& c, const std::string& k, const std::string& v) { c.mixup = parse_bool(k, v); };
    t["ca.ratio"] = [](ModelConfig& c, const std::string& k, const std::string& v) { c.ca_ratio = parse_index(k, v); };
    t["dyrelu.reduction"] = [](ModelConfig& c, const std::string& k, const std::string& v) {
      c.dyrelu_reduction = parse_index(k, v);
    };
    return t;
  }();
  return table;
}

}  // namespace

ModelConfig parse_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::string variant = "full";
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "config: line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == "model.variant")
      variant = value;
    else if (setters().count(key))
      entries.emplace_back(key, value);
    else
      throw Error("config: line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  ModelConfig cfg = ModelConfig::preset(variant_from_string(variant));
  for (const auto& [k, v] : entries) setters().at(k)(cfg, k, v);
  cfg.validate();
  return cfg;
}

ModelConfig load_config(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ModelConfig& c) {
  std::ostringstream o;
  o << "model.variant = " << to_string(c.variant) << "\n";
  o << "model.num_classes = " << c.num_classes << "\n";
  o << "model.widths = " << c.widths.c3 << ", " << c.widths.c4 << ", " << c.widths.c5 << "\n";
  o << "model.csp = " << (c.csp ? "true" : "false") << "\n";
  o << "model.seed = " << c.seed << "\n";
  o << "model.image_size = " << c.image_size << "\n";
  o << "model.head_blocks = " << c.head_blocks << "\n";
  o << "model.separable = " << (c.separable ? "true" : "false") << "\n";
  for (std::size_t i = 0; i < 3; ++i) {
    o << "anchors.p" << i + 3 << " =";
    for (std::size_t a = 0; a < c.anchors[i].size(); ++a)
      o << (a ? ", " : " ") << fmt(c.anchors[i][a].w) << "x" << fmt(c.anchors[i][a].h);
    o << "\n";
  }
  o << "postproc.conf_threshold = " << fmt(c.conf_threshold) << "\n";
  o << "postproc.nms_threshold = " << fmt(c.nms_threshold) << "\n";
  o << "loss.alpha = " << fmt(c.loss.alpha) << "\n";
  o << "loss.gamma = " << fmt(c.loss.gamma) << "\n";
  o << "loss.label_smoothing = " << fmt(c.loss.label_smoothing) << "\n";
  o << "loss.w_box = " << fmt(c.loss.w_box) << "\n";
  o << "loss.w_obj = " << fmt(c.loss.w_obj) << "\n";
  o << "loss.w_cls = " << fmt(c.loss.w_cls) << "\n";
  o << "ca.ratio = " << c.ca_ratio << "\n";
  o << "dyrelu.reduction = " << c.dyrelu_reduction << "\n";
  o << "dyrelu.lambda_a = " << fmt(c.lambda_a) << "\n";
  o << "dyrelu.lambda_b = " << fmt(c.lambda_b) << "\n";
  o << "augment.mixup = " << (c.mixup ? "true" : "false") << "\n";
  o << "augment.scale_lo = " << fmt(c.mosaic.scale_lo) << "\n";
  o << "augment.scale_hi = " << fmt(c.mosaic.scale_hi) << "\n";
  o << "augment.shift = " << fmt(c.mosaic.shift) << "\n";
  o << "augment.flip_p = " << fmt(c.mosaic.flip_p) << "\n";
  o << "train.lr = " << fmt(c.lr) << "\n";
  return o.str();
}

// --- model -------------------------------------------------------------------

Model build_model(const ModelConfig& cfg, bool allocate) {
  cfg.validate();
  const BuildOptions opt{allocate, cfg.separable};
  Model m;
  m.config = cfg;
  m.backbone = make_backbone(cfg.widths, opt);
  for (std::size_t i = 0; i < 3; ++i) m.ca[i] = CAParams(cfg.widths[i], cfg.ca_ratio, allocate);
  m.neck = make_neck(cfg.widths, cfg.csp, opt);
  const auto out = m.neck.out_channels();
  for (std::size_t i = 0; i < 3; ++i) {
    HeadConfig hc;
    hc.channels = out[i];
    hc.num_blocks = cfg.head_blocks;
    hc.num_classes = cfg.num_classes;
    hc.anchors = static_cast<Index>(cfg.anchors[i].size());
    hc.dyrelu_reduction = cfg.dyrelu_reduction;
    hc.lambda_a = cfg.lambda_a;
    hc.lambda_b = cfg.lambda_b;
    m.heads[i] = make_tda_head(hc, opt);
  }
  if (allocate) {
    Rng rng(cfg.seed);
    init(m.backbone, rng);
    for (auto& ca : m.ca) init(ca, rng);
    init(m.neck, rng);
    for (auto& h : m.heads) init(h, rng);
  }
  return m;
}

Model zeros_like(const Model& m) {
  Model z = m;
  for (ParamRef& p : parameters(z))
    if (!p.tensor->empty()) p.tensor->set_zero();
  return z;
}

ParamList parameters(Model& m) {
  ParamList out;
  collect("backbone", m.backbone, out);
  for (std::size_t i = 0; i < 3; ++i) collect("ca" + std::to_string(i + 3), m.ca[i], out);
  collect("neck", m.neck, out);
  for (std::size_t i = 0; i < 3; ++i) collect("head" + std::to_string(i + 3), m.heads[i], out);
  return out;
}

std::uint64_t parameter_checksum(Model& m) {
  std::uint64_t h = 1469598103934665603ull;
  const auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const ParamRef& p : parameters(m)) {
    mix(p.name.data(), p.name.size());
    for (Index i = 0; i < p.tensor->size(); ++i) {
      const float f = static_cast<float>((*p.tensor)[i]);
      mix(&f, sizeof f);
    }
  }
  return h;
}

std::vector<std::pair<std::string, Index>> parameter_table(Model& m) {
  std::vector<std::pair<std::string, Index>> rows;
  for (const ParamRef& p : parameters(m)) {
    const std::string module = p.name.substr(0, p.name.find('.'));
    if (rows.empty() || rows.back().first != module) rows.emplace_back(module, 0);
    rows.back().second += p.count();
  }
  return rows;
}

Index ca_tap_count(const Model& m) {
  return static_cast<Index>(std::count_if(m.ca.begin(), m.ca.end(), [](const CAParams& p) {
    return p.channels > 0 && !p.squeeze.weight.empty();
  }));
}

Index blocks_per_head(const Model& m) {
  const Index n = static_cast<Index>(m.heads[0].blocks.size());
  for (const auto& h : m.heads)
    require(static_cast<Index>(h.blocks.size()) == n, "model: heads disagree on block count");
  return n;
}

bool all_spatial_convs_depthwise(const Model& m) {
  bool ok = true;
  Index seen = 0;
  const auto check = [&](const ConvSpec& s) {
    ++seen;
    ok = ok && s.groups == s.in && s.in == s.out;
  };
  for (const auto& st : m.backbone.stages) for_each_spatial_conv(st, check);
  for_each_spatial_conv(m.neck, check);
  for (const auto& h : m.heads) {
    for (const auto& b : h.blocks) {
      for_each_spatial_conv(b.spatial.offset_predictor, check);
      for_each_spatial_conv(b.spatial.modulation_predictor, check);
    }
    for_each_spatial_conv(h.mid, check);
    for_each_spatial_conv(h.out, check);
  }
  return ok && seen > 0;
}

ForwardResult forward(const Model& m, const Tensord& image, ModelCache* cache) {
  require_shape(image.rank() == 4 && image.dim(0) == 1 && image.dim(1) == 3,
                "model: expected a [1, 3, H, W] image, got " + image.shape().str());
  require_shape(image.dim(2) % 32 == 0 && image.dim(3) % 32 == 0,
                "model: image extents " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                    " are not divisible by 32");
  ForwardResult r;
  r.backbone = toy_backbone(image, m.backbone, cache ? &cache->backbone : nullptr);
  r.neck = neck_forward(r.backbone, m.neck, m.ca, cache ? &cache->neck : nullptr);
  for (std::size_t i = 0; i < 3; ++i)
    r.raw[i] = tda_module_forward(r.neck[i], m.heads[i], cache ? &cache->heads[i] : nullptr);
  return r;
}

void backward(const Model& m, const ModelCache& cache, const std::array<Tensord, 3>& draw, Model& grad) {
  FeaturePyramid dp;
  for (std::size_t i = 0; i < 3; ++i) dp[i] = tda_module_backward(m.heads[i], cache.heads[i], draw[i], grad.heads[i]);
  const FeaturePyramid dc = neck_backward(m.neck, m.ca, cache.neck, dp, grad.neck, grad.ca);
  toy_backbone_backward(m.backbone, cache.backbone, dc, grad.backbone);
}

std::vector<Detection> detect(const Model& m, const ForwardResult& r) {
  std::vector<Detection> all;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto d = decode_predictions(r.raw[i], m.config.anchors[i], static_cast<double>(kPyramidStrides[i]),
                                      m.config.conf_threshold);
    all.insert(all.end(), d.begin(), d.end());
  }
  return diou_nms(all, m.config.nms_threshold);
}

}  // namespace triad
