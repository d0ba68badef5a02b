#include "iir/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

#include "iir/error.hpp"

namespace iir {

namespace {

constexpr int kSuper = 4;
constexpr int kTextureCells = 4;

std::size_t sz(std::int64_t v) { return static_cast<std::size_t>(v); }

bool inside(const ShapeSpec& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  switch (static_cast<ShapeClass>(s.class_id)) {
    case ShapeClass::circle:
      return dx * dx + dy * dy <= s.size * s.size;
    case ShapeClass::square:
      return std::abs(dx) <= s.size && std::abs(dy) <= s.size;
    case ShapeClass::triangle: {
      // Equilateral, apex up, circumradius `size`.
      double vx[3], vy[3];
      for (int i = 0; i < 3; ++i) {
        const double a = -std::numbers::pi / 2 + i * 2 * std::numbers::pi / 3;
        vx[i] = s.size * std::cos(a);
        vy[i] = s.size * std::sin(a);
      }
      for (int i = 0; i < 3; ++i) {
        const int j = (i + 1) % 3;
        const double cross = (vx[j] - vx[i]) * (dy - vy[i]) - (vy[j] - vy[i]) * (dx - vx[i]);
        if (cross < 0) return false;
      }
      return true;
    }
    case ShapeClass::cross: {
      const double arm = s.size / 3.0;
      return (std::abs(dx) <= s.size && std::abs(dy) <= arm) || (std::abs(dy) <= s.size && std::abs(dx) <= arm);
    }
  }
  return false;
}

double smooth(double u) { return u * u * (3 - 2 * u); }

std::vector<double> value_noise(std::uint64_t seed) {
  Rng rng(seed);
  const int lattice = kTextureCells + 1;
  std::vector<double> node(sz(lattice * lattice));
  for (auto& v : node) v = rng.uniform(-1.0, 1.0);
  std::vector<double> out(sz(kImageSize * kImageSize));
  const double cell = static_cast<double>(kImageSize) / kTextureCells;
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      const double fx = (x + 0.5) / cell, fy = (y + 0.5) / cell;
      const int ix = std::min(static_cast<int>(fx), kTextureCells - 1);
      const int iy = std::min(static_cast<int>(fy), kTextureCells - 1);
      const double u = smooth(fx - ix), v = smooth(fy - iy);
      auto at = [&](int a, int b) { return node[sz(b * lattice + a)]; };
      out[sz(y * kImageSize + x)] = (1 - v) * ((1 - u) * at(ix, iy) + u * at(ix + 1, iy)) +
                                     v * ((1 - u) * at(ix, iy + 1) + u * at(ix + 1, iy + 1));
    }
  }
  return out;
}

std::int64_t reflect(std::int64_t i, std::int64_t n) {
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
  return i;
}

void resize_down_up(std::span<Real> plane, std::int64_t h, std::int64_t w, int f) {
  const std::int64_t hs = h / f, ws = w / f;
  std::vector<double> small(sz(hs * ws), 0.0);
  for (std::int64_t y = 0; y < hs * f; ++y) {
    for (std::int64_t x = 0; x < ws * f; ++x) small[sz((y / f) * ws + x / f)] += plane[sz(y * w + x)];
  }
  for (auto& v : small) v /= f * f;
  auto coord = [f](std::int64_t o, std::int64_t n, std::int64_t& i0, std::int64_t& i1, double& frac) {
    const double src = std::clamp((o + 0.5) / f - 0.5, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::int64_t>(src);
    i1 = std::min(i0 + 1, n - 1);
    frac = src - static_cast<double>(i0);
  };
  for (std::int64_t y = 0; y < h; ++y) {
    std::int64_t y0, y1;
    double fy;
    coord(y, hs, y0, y1, fy);
    for (std::int64_t x = 0; x < w; ++x) {
      std::int64_t x0, x1;
      double fx;
      coord(x, ws, x0, x1, fx);
      const double top = (1 - fx) * small[sz(y0 * ws + x0)] + fx * small[sz(y0 * ws + x1)];
      const double bot = (1 - fx) * small[sz(y1 * ws + x0)] + fx * small[sz(y1 * ws + x1)];
      plane[sz(y * w + x)] = static_cast<Real>((1 - fy) * top + fy * bot);
    }
  }
}

void apply_pass(std::span<Real> plane, std::int64_t h, std::int64_t w, const DegradePass& p, Rng& rng) {
  if (p.blur_sigma > 0) {
    auto b = gaussian_blur(plane, h, w, p.blur_sigma);
    std::copy(b.begin(), b.end(), plane.begin());
  }
  if (p.down_factor > 1) resize_down_up(plane, h, w, p.down_factor);
  if (p.noise_sigma > 0) {
    for (auto& v : plane) v = static_cast<Real>(v + p.noise_sigma * rng.normal());
  }
  for (auto& v : plane) v = std::clamp(v, Real(-1), Real(1));
  if (p.quant_levels > 0) {
    const double steps = p.quant_levels - 1;
    for (auto& v : plane) v = static_cast<Real>(std::round((v + 1.0) / 2.0 * steps) / steps * 2.0 - 1.0);
  }
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace

std::string class_name(int class_id) {
  static const char* names[] = {"circle", "square", "triangle", "cross"};
  if (class_id < 0 || class_id >= kNumShapeClasses) throw Error("unknown class id " + std::to_string(class_id));
  return names[class_id];
}

int parse_class(const std::string& name) {
  for (int c = 0; c < kNumShapeClasses; ++c) {
    if (class_name(c) == name) return c;
  }
  throw ConfigError("unknown class '" + name + "'");
}

void ShapeSpec::validate() const {
  auto fail = [](const std::string& what) { throw Error("shape spec: " + what); };
  if (class_id < 0 || class_id >= kNumShapeClasses) fail("class id out of range");
  if (cx < 6 || cx > 18 || cy < 6 || cy > 18) fail("center outside [6,18]^2");
  if (size < 4 || size > 8) fail("size outside [4,8]");
  if (fg < -1 || fg > 1 || bg < -1 || bg > 1) fail("intensities outside [-1,1]");
  if (std::abs(fg - bg) < 0.5) fail("contrast below 0.5");
  if (texture_amp < 0 || texture_amp > 0.15) fail("texture amplitude outside [0,0.15]");
}

ShapeSpec random_shape(int class_id, Rng& rng) {
  ShapeSpec s;
  s.class_id = class_id;
  s.cx = rng.uniform(6.0, 18.0);
  s.cy = rng.uniform(6.0, 18.0);
  s.size = rng.uniform(4.0, 8.0);
  do {
    s.fg = rng.uniform(-1.0, 1.0);
    s.bg = rng.uniform(-1.0, 1.0);
  } while (std::abs(s.fg - s.bg) < 0.5);
  s.texture_amp = rng.uniform(0.0, 0.15);
  s.texture_seed = rng.next_u64();
  s.validate();
  return s;
}

Tensor render_shape(const ShapeSpec& spec) {
  spec.validate();
  std::vector<double> texture;
  if (spec.texture_amp > 0) texture = value_noise(spec.texture_seed);
  std::vector<Real> img(sz(kImageSize * kImageSize));
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          hits += inside(spec, x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper);
        }
      }
      double v = spec.bg + (spec.fg - spec.bg) * hits / (kSuper * kSuper);
      if (!texture.empty()) v += spec.texture_amp * texture[sz(y * kImageSize + x)];
      img[sz(y * kImageSize + x)] = static_cast<Real>(std::clamp(v, -1.0, 1.0));
    }
  }
  return Tensor::from({1, 1, kImageSize, kImageSize}, std::move(img));
}

bool DegradePass::is_identity() const {
  return blur_sigma == 0 && down_factor == 1 && noise_sigma == 0 && quant_levels == 0;
}

void DegradePass::validate() const {
  if (blur_sigma < 0 || blur_sigma > 1.5) throw Error("degrade: blur sigma outside [0,1.5]");
  if (down_factor != 1 && down_factor != 2 && down_factor != 4) throw Error("degrade: down factor not 1, 2 or 4");
  if (noise_sigma < 0 || noise_sigma > 0.15) throw Error("degrade: noise sigma outside [0,0.15]");
  if (quant_levels != 0 && quant_levels != 32 && quant_levels != 16 && quant_levels != 8) {
    throw Error("degrade: quantization levels not in {none, 32, 16, 8}");
  }
}

Tensor degrade(const Tensor& hq, const DegradeSpec& spec, Rng& rng) {
  spec.first.validate();
  if (spec.second) spec.second->validate();
  if (spec.is_identity()) return hq.detach();
  if (hq.rank() < 2) throw ShapeError("degrade: expected [...,H,W], got " + shape_str(hq.shape()));
  const std::int64_t h = hq.dim(-2), w = hq.dim(-1);
  std::vector<Real> v(hq.data().begin(), hq.data().end());
  for (std::int64_t p = 0; p < hq.numel() / (h * w); ++p) {
    std::span<Real> plane(v.data() + p * h * w, sz(h * w));
    apply_pass(plane, h, w, spec.first, rng);
    if (spec.second) apply_pass(plane, h, w, *spec.second, rng);
  }
  return Tensor::from(hq.shape(), std::move(v));
}

std::string level_name(DegradeLevel level) {
  switch (level) {
    case DegradeLevel::hq: return "hq";
    case DegradeLevel::down4: return "down4";
    case DegradeLevel::down8_analog: return "down8_analog";
    case DegradeLevel::multi: return "multi";
    case DegradeLevel::mild: return "mild";
  }
  return "?";
}

DegradeLevel parse_level(const std::string& name) {
  for (auto l : kAllLevels) {
    if (level_name(l) == name) return l;
  }
  throw ConfigError("unknown degradation level '" + name + "'");
}

DegradeSpec sample_level(DegradeLevel level, Rng& rng, double p2) {
  DegradeSpec s;
  static constexpr int kQuant[] = {32, 16, 8};
  switch (level) {
    case DegradeLevel::hq:
      break;
    case DegradeLevel::down4:
      s.first.down_factor = 2;
      break;
    case DegradeLevel::down8_analog:
      s.first.down_factor = 4;
      break;
    case DegradeLevel::multi: {
      s.first.blur_sigma = rng.uniform(0.5, 1.5);
      s.first.down_factor = 4;
      s.first.noise_sigma = rng.uniform(0.03, 0.15);
      s.first.quant_levels = kQuant[rng.below(3)];
      if (rng.bernoulli(p2)) {
        DegradePass second;
        second.blur_sigma = rng.uniform(0.0, 1.0);
        second.down_factor = rng.bernoulli(0.5) ? 2 : 1;
        second.noise_sigma = rng.uniform(0.0, 0.08);
        second.quant_levels = kQuant[rng.below(3)];
        s.second = second;
      }
      break;
    }
    case DegradeLevel::mild:
      s.first.blur_sigma = rng.uniform(0.0, 0.6);
      s.first.down_factor = 2;
      s.first.noise_sigma = rng.uniform(0.02, 0.06);
      break;
  }
  return s;
}

ImagePair make_pair(std::uint64_t seed, std::int64_t index, DegradeLevel level, double p2,
                    std::optional<int> class_id) {
  const Rng base = Rng(seed).fork(static_cast<std::uint64_t>(index));
  ImagePair p;
  p.seed = seed;
  p.index = index;
  p.level = level;
  p.class_id = class_id ? *class_id : static_cast<int>(index % kNumShapeClasses);
  Rng shape_rng = base.fork(1), spec_rng = base.fork(2), noise_rng = base.fork(3);
  p.shape = random_shape(p.class_id, shape_rng);
  p.hq = render_shape(p.shape);
  p.spec = sample_level(level, spec_rng, p2);
  p.lq = degrade(p.hq, p.spec, noise_rng);
  return p;
}

PairBatch stack_pairs(const std::vector<ImagePair>& pairs) {
  PairBatch b;
  std::vector<Real> hq, lq;
  for (const auto& p : pairs) {
    hq.insert(hq.end(), p.hq.data().begin(), p.hq.data().end());
    lq.insert(lq.end(), p.lq.data().begin(), p.lq.data().end());
    b.class_ids.push_back(p.class_id);
    b.levels.push_back(p.level);
  }
  const Shape s{static_cast<std::int64_t>(pairs.size()), 1, kImageSize, kImageSize};
  b.hq = Tensor::from(s, std::move(hq));
  b.lq = Tensor::from(s, std::move(lq));
  return b;
}

PairBatch make_eval_set(std::uint64_t seed, std::int64_t count, DegradeLevel level, double p2) {
  std::vector<ImagePair> pairs;
  for (std::int64_t i = 0; i < count; ++i) pairs.push_back(make_pair(seed, i, level, p2));
  return stack_pairs(pairs);
}

PairBatch make_train_batch(std::uint64_t seed, std::int64_t step, std::int64_t batch, double p2) {
  const Rng levels = Rng(seed).fork(0x1e7e15);
  std::vector<ImagePair> pairs;
  for (std::int64_t i = 0; i < batch; ++i) {
    const std::int64_t index = step * batch + i;
    Rng pick = levels.fork(static_cast<std::uint64_t>(index));
    const auto level = kAllLevels[pick.below(std::size(kAllLevels))];
    pairs.push_back(make_pair(seed, index, level, p2, static_cast<int>(pick.below(kNumShapeClasses))));
  }
  return stack_pairs(pairs);
}

BatchQueue::BatchQueue(Producer producer, std::int64_t first, std::size_t capacity)
    : producer_(std::move(producer)), next_index_(first), capacity_(std::max<std::size_t>(capacity, 1)) {
  worker_ = std::thread([this] { run(); });
}

BatchQueue::~BatchQueue() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  worker_.join();
}

void BatchQueue::run() {
  for (;;) {
    std::int64_t index;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return stop_ || ready_.size() < capacity_; });
      if (stop_) return;
      index = next_index_++;
    }
    try {
      PairBatch b = producer_(index);
      std::lock_guard lock(mu_);
      ready_.push_back(std::move(b));
    } catch (...) {
      std::lock_guard lock(mu_);
      failure_ = std::current_exception();
      stop_ = true;
    }
    cv_.notify_all();
  }
}

PairBatch BatchQueue::next() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [this] { return !ready_.empty() || failure_; });
  if (ready_.empty() && failure_) std::rethrow_exception(failure_);
  PairBatch b = std::move(ready_.front());
  ready_.pop_front();
  lock.unlock();
  cv_.notify_all();
  return b;
}

void write_manifest(std::ostream& out, const std::vector<ManifestEntry>& entries) {
  out << "split,index,class_id,seed,level,blur_sigma,down_factor,noise_sigma,quant_levels,"
         "second_pass,blur_sigma2,down_factor2,noise_sigma2,quant_levels2\n";
  out.precision(17);
  for (const auto& e : entries) {
    const DegradePass& a = e.spec.first;
    const DegradePass b = e.spec.second.value_or(DegradePass{});
    out << e.split << ',' << e.index << ',' << e.class_id << ',' << e.seed << ',' << level_name(e.level) << ','
        << a.blur_sigma << ',' << a.down_factor << ',' << a.noise_sigma << ',' << a.quant_levels << ','
        << (e.spec.second ? 1 : 0) << ',' << b.blur_sigma << ',' << b.down_factor << ',' << b.noise_sigma
        << ',' << b.quant_levels << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("split,index,", 0) != 0) throw IoError("manifest: missing header");
  std::vector<ManifestEntry> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 14) throw IoError("manifest: malformed row '" + line + "'");
    try {
      ManifestEntry e;
      e.split = c[0];
      e.index = std::stoll(c[1]);
      e.class_id = std::stoi(c[2]);
      e.seed = std::stoull(c[3]);
      e.level = parse_level(c[4]);
      e.spec.first = {std::stod(c[5]), std::stoi(c[6]), std::stod(c[7]), std::stoi(c[8])};
      if (c[9] == "1") e.spec.second = DegradePass{std::stod(c[10]), std::stoi(c[11]), std::stod(c[12]), std::stoi(c[13])};
      out.push_back(std::move(e));
    } catch (const std::logic_error&) {
      throw IoError("manifest: malformed row '" + line + "'");
    }
  }
  return out;
}

std::vector<Real> gaussian_blur(std::span<const Real> planes, std::int64_t height, std::int64_t width,
                                double sigma) {
  if (sigma <= 0) return {planes.begin(), planes.end()};
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(sz(2 * radius + 1));
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[sz(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  std::vector<Real> out(planes.size());
  std::vector<double> tmp(sz(height * width));
  for (std::size_t base = 0; base < planes.size(); base += sz(height * width)) {
    for (std::int64_t y = 0; y < height; ++y) {
      for (std::int64_t x = 0; x < width; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[sz(i + radius)] * planes[base + sz(y * width + reflect(x + i, width))];
        tmp[sz(y * width + x)] = acc;
      }
    }
    for (std::int64_t y = 0; y < height; ++y) {
      for (std::int64_t x = 0; x < width; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[sz(i + radius)] * tmp[sz(reflect(y + i, height) * width + x)];
        out[base + sz(y * width + x)] = static_cast<Real>(acc);
      }
    }
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() < 2 || image.numel() != image.dim(-2) * image.dim(-1)) {
    throw ShapeError("write_pgm: expected a single plane, got " + shape_str(image.shape()));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << image.dim(-1) << ' ' << image.dim(-2) << "\n255\n";
  for (Real v : image.data()) {
    const double q = std::round((std::clamp(static_cast<double>(v), -1.0, 1.0) + 1.0) * 127.5);
    out.put(static_cast<char>(static_cast<unsigned char>(q)));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) throw IoError(path.string() + ": not an 8-bit P5 PGM");
  in.get();
  std::vector<Real> v(sz(std::int64_t{w} * h));
  for (auto& x : v) {
    const int c = in.get();
    if (c == EOF) throw IoError(path.string() + ": truncated");
    x = static_cast<Real>(c / 127.5 - 1.0);
  }
  return Tensor::from({1, 1, h, w}, std::move(v));
}

}  // namespace iir
