#include "triad/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <vector>

namespace triad {

namespace {

class Reader {
 public:
  Reader(const std::string& path, const std::string& what) : in_(path, std::ios::binary), what_(what) {
    require(in_.good(), what_ + ": cannot open '" + path + "'");
  }

  std::uint64_t offset() const { return offset_; }

  bool read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in_.gcount());
    offset_ += got;
    return got == n;
  }

  void need(void* dst, std::size_t n, const std::string& field) {
    const std::uint64_t at = offset_;
    if (!read(dst, n)) fail(at, "truncated while reading " + field);
  }

  template <typename T>
  T le(const std::string& field) {
    unsigned char b[sizeof(T)];
    need(b, sizeof b, field);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof b; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return static_cast<T>(v);
  }

  int peek() { return in_.peek(); }
  int get() {
    const int c = in_.get();
    if (c != EOF) ++offset_;
    return c;
  }

  [[noreturn]] void fail(std::uint64_t at, const std::string& msg) const {
    throw Error(what_ + ": at byte " + std::to_string(at) + ": " + msg);
  }

 private:
  std::ifstream in_;
  std::string what_;
  std::uint64_t offset_ = 0;
};

template <typename T>
void put_le(std::ofstream& out, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof b; ++i) b[i] = static_cast<unsigned char>(static_cast<std::uint64_t>(v) >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof b);
}

void put_f32(std::ofstream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_le(out, bits);
}

struct ManifestEntry {
  std::string name;
  ParamRef* ref = nullptr;
  std::uint64_t bytes = 0;
};

constexpr std::uint32_t kMaxNameLength = 4096;
constexpr std::uint32_t kMaxRank = 8;

}  // namespace

void save_weights(Model& m, const std::string& path) {
  ParamList params = parameters(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "weights: cannot write '" + path + "'");
  out.write(kWeightMagic, 4);
  put_le(out, static_cast<std::uint32_t>(params.size()));
  for (const ParamRef& p : params) {
    require(p.tensor->size() == p.count(), "weights: tensor '" + p.name + "' is not allocated");
    put_le(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_le(out, std::uint8_t{0});
    put_le(out, static_cast<std::uint32_t>(p.shape.rank()));
    for (int a = 0; a < p.shape.rank(); ++a) put_le(out, static_cast<std::uint32_t>(p.shape[a]));
    put_le(out, static_cast<std::uint64_t>(p.count()) * 4);
  }
  for (const ParamRef& p : params)
    for (Index i = 0; i < p.tensor->size(); ++i) put_f32(out, static_cast<float>((*p.tensor)[i]));
  require(out.good(), "weights: write to '" + path + "' failed");
}

void load_weights(Model& m, const std::string& path) {
  Reader in(path, "weights");
  char magic[4] = {0, 0, 0, 0};
  if (!in.read(magic, 4) || std::memcmp(magic, kWeightMagic, 4) != 0)
    in.fail(0, "bad magic, expected \"3AW1\"");

  ParamList params = parameters(m);
  std::map<std::string, ParamRef*> by_name;
  for (ParamRef& p : params) by_name[p.name] = &p;

  const auto count = in.le<std::uint32_t>("tensor count");
  if (count > params.size())
    in.fail(4, "file lists " + std::to_string(count) + " tensors, model has " + std::to_string(params.size()));

  std::vector<ManifestEntry> manifest;
  std::set<std::string> seen;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint64_t at = in.offset();
    const auto len = in.le<std::uint32_t>("name length of entry " + std::to_string(e));
    if (len == 0 || len > kMaxNameLength) in.fail(at, "implausible name length " + std::to_string(len));
    std::string name(len, '\0');
    in.need(name.data(), len, "name of entry " + std::to_string(e));
    const auto it = by_name.find(name);
    if (it == by_name.end()) in.fail(at, "unknown tensor '" + name + "'");
    if (!seen.insert(name).second) in.fail(at, "duplicate tensor '" + name + "'");
    const auto dtype = in.le<std::uint8_t>("dtype of '" + name + "'");
    if (dtype != 0) in.fail(at, "tensor '" + name + "' has unsupported dtype " + std::to_string(dtype));
    const auto rank = in.le<std::uint32_t>("rank of '" + name + "'");
    if (rank > kMaxRank) in.fail(at, "tensor '" + name + "' has implausible rank " + std::to_string(rank));
    const Shape& want = it->second->shape;
    bool match = static_cast<int>(rank) == want.rank();
    std::string dims;
    for (std::uint32_t a = 0; a < rank; ++a) {
      const auto d = in.le<std::uint32_t>("shape of '" + name + "'");
      dims += (a ? "," : "") + std::to_string(d);
      match = match && static_cast<int>(a) < want.rank() && static_cast<Index>(d) == want[static_cast<int>(a)];
    }
    if (!match) in.fail(at, "tensor '" + name + "' has shape [" + dims + "], model expects " + want.str());
    const auto bytes = in.le<std::uint64_t>("byte length of '" + name + "'");
    if (bytes != static_cast<std::uint64_t>(want.size()) * 4)
      in.fail(at, "tensor '" + name + "' declares " + std::to_string(bytes) + " bytes, shape needs " +
                      std::to_string(want.size() * 4));
    manifest.push_back({name, it->second, bytes});
  }
  for (const ParamRef& p : params)
    if (!seen.count(p.name)) in.fail(in.offset(), "tensor '" + p.name + "' missing from manifest");

  for (const ManifestEntry& e : manifest) {
    const std::uint64_t at = in.offset();
    std::vector<unsigned char> raw(static_cast<std::size_t>(e.bytes));
    if (!in.read(raw.data(), raw.size()))
      in.fail(at, "truncated payload for tensor '" + e.name + "' (" + std::to_string(e.bytes) + " bytes expected)");
    Tensord t(e.ref->shape);
    for (Index i = 0; i < t.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(raw[static_cast<std::size_t>(4 * i + b)]) << (8 * b);
      float f;
      std::memcpy(&f, &bits, sizeof f);
      t[i] = static_cast<double>(f);
    }
    *e.ref->tensor = std::move(t);
  }
  char extra;
  if (in.read(&extra, 1)) in.fail(in.offset() - 1, "trailing bytes after the last payload");
}

// --- images --------------------------------------------------------------------

namespace {

void skip_space_and_comments(Reader& in) {
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      while (in.peek() != '\n' && in.peek() != EOF) in.get();
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      in.get();
    } else {
      return;
    }
  }
}

Index header_number(Reader& in, const std::string& field) {
  skip_space_and_comments(in);
  const std::uint64_t at = in.offset();
  Index v = 0;
  int digits = 0;
  while (in.peek() >= '0' && in.peek() <= '9') {
    v = v * 10 + (in.get() - '0');
    if (++digits > 9) in.fail(at, field + " is too large");
  }
  if (digits == 0) in.fail(at, "expected " + field);
  return v;
}

struct PnmHeader {
  Index width, height;
};

PnmHeader read_header(Reader& in, char kind) {
  char magic[2];
  if (!in.read(magic, 2) || magic[0] != 'P' || magic[1] != kind)
    in.fail(0, std::string("bad magic, expected \"P") + kind + "\"");
  const Index w = header_number(in, "width");
  const Index h = header_number(in, "height");
  const std::uint64_t at = in.offset();
  const Index maxval = header_number(in, "maxval");
  if (w <= 0 || h <= 0) in.fail(at, "image extents must be positive");
  if (maxval != 255) in.fail(at, "only maxval 255 is supported, got " + std::to_string(maxval));
  const int sep = in.get();
  if (sep != ' ' && sep != '\t' && sep != '\n' && sep != '\r')
    in.fail(in.offset(), "expected one whitespace byte before the raster");
  return {w, h};
}

void write_bytes(const std::string& path, const std::string& header, const std::vector<unsigned char>& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "image: cannot write '" + path + "'");
  out << header;
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  require(out.good(), "image: write to '" + path + "' failed");
}

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

Tensord read_ppm(const std::string& path) {
  Reader in(path, "ppm");
  const auto [W, H] = read_header(in, '6');
  std::vector<unsigned char> raster(static_cast<std::size_t>(W * H * 3));
  const std::uint64_t at = in.offset();
  if (!in.read(raster.data(), raster.size()))
    in.fail(at, "raster truncated, expected " + std::to_string(raster.size()) + " bytes");
  Tensord img(Shape{1, 3, H, W});
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      for (Index c = 0; c < 3; ++c)
        img(0, c, y, x) = raster[static_cast<std::size_t>((y * W + x) * 3 + c)] / 255.0;
  return img;
}

void write_ppm(const std::string& path, const Tensord& image) {
  require_shape((image.rank() == 4 && image.dim(0) == 1 && image.dim(1) == 3) || (image.rank() == 3 && image.dim(0) == 3),
                "write_ppm: expected [1, 3, H, W] or [3, H, W], got " + image.shape().str());
  const int o = image.rank() - 3;
  const Index H = image.dim(o + 1), W = image.dim(o + 2);
  std::vector<unsigned char> body(static_cast<std::size_t>(W * H * 3));
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      for (Index c = 0; c < 3; ++c) body[static_cast<std::size_t>((y * W + x) * 3 + c)] = to_byte(image[(c * H + y) * W + x]);
  write_bytes(path, "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n", body);
}

Tensord read_pgm(const std::string& path) {
  Reader in(path, "pgm");
  const auto [W, H] = read_header(in, '5');
  std::vector<unsigned char> raster(static_cast<std::size_t>(W * H));
  const std::uint64_t at = in.offset();
  if (!in.read(raster.data(), raster.size()))
    in.fail(at, "raster truncated, expected " + std::to_string(raster.size()) + " bytes");
  Tensord img(Shape{H, W});
  for (Index i = 0; i < H * W; ++i) img[i] = raster[static_cast<std::size_t>(i)] / 255.0;
  return img;
}

void write_pgm(const std::string& path, const Tensord& gray) {
  require_shape(gray.rank() == 2, "write_pgm: expected [H, W], got " + gray.shape().str());
  const Index H = gray.dim(0), W = gray.dim(1);
  std::vector<unsigned char> body(static_cast<std::size_t>(W * H));
  for (Index i = 0; i < H * W; ++i) body[static_cast<std::size_t>(i)] = to_byte(gray[i]);
  write_bytes(path, "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n", body);
}

Tensord channel_grid(const Tensord& feature) {
  require_shape(feature.rank() == 4 && feature.dim(0) == 1, "channel_grid: expected [1, C, H, W]");
  const Index C = feature.dim(1), H = feature.dim(2), W = feature.dim(3);
  const Index cols = static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(C))));
  const Index rows = (C + cols - 1) / cols;
  const double lo = feature.vec().minCoeff(), hi = feature.vec().maxCoeff();
  const double span = hi > lo ? hi - lo : 1.0;
  Tensord grid(Shape{rows * H, cols * W});
  for (Index c = 0; c < C; ++c)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x)
        grid((c / cols) * H + y, (c % cols) * W + x) = (feature(0, c, y, x) - lo) / span;
  return grid;
}

}  // namespace triad
