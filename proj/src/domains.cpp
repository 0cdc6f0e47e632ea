#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <json.hpp>

#include "udic/evalbench.hpp"

namespace udic {

namespace {

using Rgb = std::array<float, 3>;

constexpr std::array kDomains{Domain::kNatural, Domain::kLineDrawing, Domain::kComic, Domain::kVectorArt};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }
  bool chance(double p) { return uniform() < p; }
  Rgb color(double lo = 0.0, double hi = 1.0) {
    return {float(uniform(lo, hi)), float(uniform(lo, hi)), float(uniform(lo, hi))};
  }

 private:
  std::mt19937_64 gen_;
};

void fill(Image& img, const Rgb& c) {
  for (int ch = 0; ch < 3; ++ch)
    std::fill_n(img.data.begin() + static_cast<std::ptrdiff_t>(ch) * img.height * img.width, img.height * img.width,
                c[ch]);
}

void blend(Image& img, int y, int x, const Rgb& c, float alpha) {
  if (y < 0 || x < 0 || y >= img.height || x >= img.width || alpha <= 0) return;
  alpha = std::min(alpha, 1.0f);
  for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = (1 - alpha) * img.at(ch, y, x) + alpha * c[ch];
}

void set(Image& img, int y, int x, const Rgb& c) {
  if (y < 0 || x < 0 || y >= img.height || x >= img.width) return;
  for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = c[ch];
}

struct Point {
  double x, y;
};

double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

/// Anti-aliased polyline of half-width `radius`.
void stroke(Image& img, const std::vector<Point>& pts, double radius, const Rgb& c) {
  if (pts.size() < 2) return;
  double x0 = pts[0].x, x1 = x0, y0 = pts[0].y, y1 = y0;
  for (const auto& p : pts) {
    x0 = std::min(x0, p.x), x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y), y1 = std::max(y1, p.y);
  }
  const int pad = static_cast<int>(std::ceil(radius)) + 2;
  for (int y = std::max(0, int(y0) - pad); y <= std::min(img.height - 1, int(y1) + pad); ++y)
    for (int x = std::max(0, int(x0) - pad); x <= std::min(img.width - 1, int(x1) + pad); ++x) {
      const Point p{x + 0.5, y + 0.5};
      double d = INFINITY;
      for (std::size_t i = 1; i < pts.size(); ++i) d = std::min(d, segment_distance(p, pts[i - 1], pts[i]));
      blend(img, y, x, c, static_cast<float>(std::clamp(radius + 0.5 - d, 0.0, 1.0)));
    }
}

std::vector<Point> bezier(Point a, Point b, Point c, int segments = 24) {
  std::vector<Point> out;
  for (int i = 0; i <= segments; ++i) {
    const double t = double(i) / segments, u = 1 - t;
    out.push_back({u * u * a.x + 2 * u * t * b.x + t * t * c.x, u * u * a.y + 2 * u * t * b.y + t * t * c.y});
  }
  return out;
}

Point random_point(Rng& rng, int h, int w, double margin = 0.0) {
  return {rng.uniform(-margin, w + margin), rng.uniform(-margin, h + margin)};
}

/// Convex polygon around a centre, vertices sorted by angle.
std::vector<Point> random_polygon(Rng& rng, Point centre, double radius) {
  const int n = rng.integer(3, 7);
  std::vector<double> angles(n);
  for (auto& a : angles) a = rng.uniform(0, 2 * std::numbers::pi);
  std::sort(angles.begin(), angles.end());
  std::vector<Point> out;
  for (double a : angles) {
    const double r = radius * rng.uniform(0.6, 1.0);
    out.push_back({centre.x + r * std::cos(a), centre.y + r * std::sin(a)});
  }
  return out;
}

bool inside(const std::vector<Point>& poly, Point p) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

template <class Pred>
void fill_where(Image& img, const Rgb& c, Pred pred) {
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (pred(Point{x + 0.5, y + 0.5})) set(img, y, x, c);
}

// Bilinear value noise on a grid of `cell` pixels with smoothstep weights.
std::vector<double> value_noise(Rng& rng, int h, int w, double cell) {
  const int gh = static_cast<int>(std::ceil(h / cell)) + 2, gw = static_cast<int>(std::ceil(w / cell)) + 2;
  std::vector<double> grid(static_cast<std::size_t>(gh) * gw);
  for (auto& g : grid) g = rng.uniform(-1, 1);
  const double ox = rng.uniform(0, cell), oy = rng.uniform(0, cell);
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double fy = (y + oy) / cell, fx = (x + ox) / cell;
      const int iy = static_cast<int>(fy), ix = static_cast<int>(fx);
      double ty = fy - iy, tx = fx - ix;
      ty = ty * ty * (3 - 2 * ty);
      tx = tx * tx * (3 - 2 * tx);
      auto g = [&](int r, int c) { return grid[static_cast<std::size_t>(r) * gw + c]; };
      out[static_cast<std::size_t>(y) * w + x] = (1 - ty) * ((1 - tx) * g(iy, ix) + tx * g(iy, ix + 1)) +
                                                 ty * ((1 - tx) * g(iy + 1, ix) + tx * g(iy + 1, ix + 1));
    }
  return out;
}

// Fractal value noise with octaves down to two-pixel cells.
std::vector<double> fractal_noise(Rng& rng, int h, int w, double base_cell, double falloff) {
  std::vector<double> f(static_cast<std::size_t>(h) * w, 0.0);
  double amp = 1.0;
  for (double cell = base_cell; cell >= 2.0; cell /= 2) {
    const auto layer = value_noise(rng, h, w, cell);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] += amp * layer[i];
    amp *= falloff;
  }
  return f;
}

// Coverage of a polygon on a 4x4 subpixel grid, box-blurred by `blur` pixels.
std::vector<double> soft_mask(const std::vector<Point>& poly, int h, int w, int blur) {
  std::vector<double> m(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) hits += inside(poly, Point{x + (sx + 0.5) / 4, y + (sy + 0.5) / 4});
      m[static_cast<std::size_t>(y) * w + x] = hits / 16.0;
    }
  for (int pass = 0; pass < blur; ++pass) {
    std::vector<double> out(m.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
            acc += m[static_cast<std::size_t>(yy) * w + xx];
            ++n;
          }
        out[static_cast<std::size_t>(y) * w + x] = acc / n;
      }
    m.swap(out);
  }
  return m;
}

Image natural_like(int h, int w, Rng& rng) {
  const int n = h * w;
  const double extent = std::max(h, w);
  std::array<std::vector<double>, 3> fields;
  const double base_cell = extent * rng.uniform(0.35, 0.7);
  const double falloff = rng.uniform(0.5, 0.7);
  for (auto& f : fields) f = fractal_noise(rng, h, w, base_cell, falloff);
  std::array<std::array<double, 3>, 3> mix;
  for (auto& row : mix)
    for (auto& v : row) v = rng.uniform(-0.5, 0.5);
  for (int c = 0; c < 3; ++c) mix[c][c] += rng.uniform(0.3, 0.8);
  const Rgb base = rng.color(0.15, 0.85);
  const double gx = rng.uniform(-0.3, 0.3), gy = rng.uniform(-0.3, 0.3);
  std::array<std::vector<double>, 3> img_f;
  for (int c = 0; c < 3; ++c) {
    img_f[c].assign(n, 0.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int i = y * w + x;
        double v = base[c] + gx * (double(x) / w - 0.5) + gy * (double(y) / h - 0.5);
        for (int k = 0; k < 3; ++k) v += 0.35 * mix[c][k] * fields[k][i];
        img_f[c][i] = v;
      }
  }
  // Occluding objects: shaded, textured regions with edges of varying softness.
  const int objects = rng.integer(1, 4);
  for (int o = 0; o < objects; ++o) {
    const auto poly = random_polygon(rng, random_point(rng, h, w), extent * rng.uniform(0.15, 0.5));
    const auto mask = soft_mask(poly, h, w, rng.integer(0, 2));
    const Rgb col = rng.color(0.02, 0.98);
    const auto texture = fractal_noise(rng, h, w, extent * rng.uniform(0.1, 0.3), rng.uniform(0.4, 0.7));
    const double amp = rng.uniform(0.02, 0.15), sx = rng.uniform(-0.4, 0.4), sy = rng.uniform(-0.4, 0.4);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int i = y * w + x;
        const double shade = sx * (double(x) / w - 0.5) + sy * (double(y) / h - 0.5) + amp * texture[i];
        for (int c = 0; c < 3; ++c) img_f[c][i] += mask[i] * (col[c] + shade - img_f[c][i]);
      }
  }
  Image img(h, w);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < n; ++i) img.at(c, i / w, i % w) = static_cast<float>(std::clamp(img_f[c][i], 0.0, 1.0));
  // Sensor-like grain.
  for (auto& v : img.data) v = std::clamp(v + static_cast<float>(rng.uniform(-0.015, 0.015)), 0.0f, 1.0f);
  return img;
}

Image line_drawing(int h, int w, Rng& rng) {
  Image img(h, w);
  const float paper = static_cast<float>(rng.uniform(0.97, 1.0));
  fill(img, {paper, paper, paper});
  const double scale = std::max(h, w) / 64.0;
  const Rgb ink = rng.chance(0.3) ? Rgb{0.1f, 0.12f, 0.35f} : rng.color(0.0, 0.2);
  const int strokes = rng.integer(5, 12);
  for (int s = 0; s < strokes; ++s) {
    const Point a = random_point(rng, h, w, 4), c = random_point(rng, h, w, 4);
    const Point b{(a.x + c.x) / 2 + rng.uniform(-20, 20) * scale, (a.y + c.y) / 2 + rng.uniform(-20, 20) * scale};
    stroke(img, bezier(a, b, c), rng.uniform(0.4, 1.1) * std::sqrt(scale), ink);
  }
  // Short hatching marks.
  const int hatches = rng.integer(0, 3);
  for (int k = 0; k < hatches; ++k) {
    const Point o = random_point(rng, h, w);
    const double angle = rng.uniform(0, std::numbers::pi), len = rng.uniform(4, 10) * scale;
    for (int i = 0; i < rng.integer(3, 6); ++i) {
      const Point p{o.x + 2.5 * i * std::sin(angle), o.y + 2.5 * i * std::cos(angle)};
      stroke(img, {p, {p.x + len * std::cos(angle), p.y - len * std::sin(angle)}}, 0.4, ink);
    }
  }
  return img;
}

Image comic_like(int h, int w, Rng& rng) {
  Image img(h, w);
  fill(img, rng.color(0.75, 1.0));
  const double scale = std::max(h, w) / 64.0;
  const Rgb outline{0.05f, 0.05f, 0.05f};
  const int regions = rng.integer(3, 6);
  for (int r = 0; r < regions; ++r) {
    const Point centre = random_point(rng, h, w);
    const double radius = rng.uniform(8, 22) * scale;
    const Rgb colour = rng.color(0.2, 1.0);
    if (rng.chance(0.4)) {
      fill_where(img, colour, [&](Point p) { return std::hypot(p.x - centre.x, p.y - centre.y) < radius; });
      std::vector<Point> ring;
      for (int i = 0; i <= 32; ++i) {
        const double a = 2 * std::numbers::pi * i / 32;
        ring.push_back({centre.x + radius * std::cos(a), centre.y + radius * std::sin(a)});
      }
      stroke(img, ring, 0.6 * scale, outline);
    } else {
      auto poly = random_polygon(rng, centre, radius);
      const bool halftone = rng.chance(0.5);
      const Rgb dot = {colour[0] * 0.5f, colour[1] * 0.5f, colour[2] * 0.5f};
      const double spacing = 4.0 * scale;
      fill_where(img, colour, [&](Point p) { return inside(poly, p); });
      if (halftone)
        fill_where(img, dot, [&](Point p) {
          if (!inside(poly, p)) return false;
          const double dx = std::fmod(p.x, spacing) - spacing / 2, dy = std::fmod(p.y, spacing) - spacing / 2;
          return dx * dx + dy * dy < 1.3 * scale * scale;
        });
      poly.push_back(poly.front());
      stroke(img, poly, 0.6 * scale, outline);
    }
  }
  for (int s = 0; s < rng.integer(1, 4); ++s) {
    const Point a = random_point(rng, h, w), c = random_point(rng, h, w);
    stroke(img, bezier(a, {(a.x + c.x) / 2 + rng.uniform(-10, 10), (a.y + c.y) / 2 + rng.uniform(-10, 10)}, c),
           0.5 * scale, outline);
  }
  return img;
}

Image vector_art_like(int h, int w, Rng& rng) {
  const int colours = rng.integer(5, 12);
  std::vector<Rgb> palette;
  for (int i = 0; i < colours; ++i) {
    Rgb c = rng.color();
    // Quantize so the palette is exactly representable in 8 bits.
    for (auto& v : c) v = std::round(v * 255.0f) / 255.0f;
    palette.push_back(c);
  }
  auto pick = [&] { return palette[static_cast<std::size_t>(rng.integer(0, colours - 1))]; };
  Image img(h, w);
  fill(img, palette[0]);
  const double scale = std::max(h, w) / 64.0;
  for (int s = 0; s < rng.integer(4, 9); ++s) {
    const auto poly = random_polygon(rng, random_point(rng, h, w), rng.uniform(8, 26) * scale);
    const Rgb c = pick();
    fill_where(img, c, [&](Point p) { return inside(poly, p); });
  }
  // Text-like glyph rows.
  for (int line = 0; line < rng.integer(1, 3); ++line) {
    const int gh = static_cast<int>(rng.integer(4, 6) * scale), gw = static_cast<int>(rng.integer(2, 4) * scale);
    int x = rng.integer(0, w / 3);
    const int y = rng.integer(0, std::max(0, h - gh));
    const Rgb c = pick();
    while (x + gw < w && rng.chance(0.92)) {
      const int height = rng.chance(0.3) ? gh / 2 : gh;
      for (int yy = y + gh - height; yy < y + gh; ++yy)
        for (int xx = x; xx < x + gw; ++xx) set(img, yy, xx, c);
      x += gw + 1 + (rng.chance(0.2) ? gw : 0);
    }
  }
  return img;
}

}  // namespace

std::string_view domain_name(Domain d) {
  switch (d) {
    case Domain::kNatural: return "natural-like";
    case Domain::kLineDrawing: return "line-drawing";
    case Domain::kComic: return "comic-like";
    case Domain::kVectorArt: return "vector-art-like";
  }
  return "?";
}

Domain parse_domain(std::string_view name) {
  for (Domain d : kDomains)
    if (domain_name(d) == name) return d;
  throw std::invalid_argument("unknown domain '" + std::string(name) +
                              "' (expected natural-like, line-drawing, comic-like, vector-art-like)");
}

std::span<const Domain> all_domains() { return kDomains; }

Image generate_image(Domain domain, int height, int width, std::uint64_t seed) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("generate_image: dimensions must be positive");
  Rng rng(seed ^ (0xA24BAED4963EE407ull * (static_cast<std::uint64_t>(domain) + 1)));
  Image img;
  switch (domain) {
    case Domain::kNatural: img = natural_like(height, width, rng); break;
    case Domain::kLineDrawing: img = line_drawing(height, width, rng); break;
    case Domain::kComic: img = comic_like(height, width, rng); break;
    case Domain::kVectorArt: img = vector_art_like(height, width, rng); break;
  }
  // Snap to 8-bit levels so PPM files reproduce the images exactly.
  for (auto& v : img.data) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
  return img;
}

std::uint64_t image_seed(const DomainSpec& spec, int index) { return spec.seed * 1000003ull + static_cast<std::uint64_t>(index); }

std::vector<Image> generate_domain(const DomainSpec& spec) {
  if (spec.count < 0) throw std::invalid_argument("generate_domain: negative count");
  std::vector<Image> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) out.push_back(generate_image(spec.domain, spec.height, spec.width, image_seed(spec, i)));
  return out;
}

std::filesystem::path write_dataset(const std::vector<DomainSpec>& specs, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["version"] = 1;
  manifest["images"] = nlohmann::ordered_json::array();
  for (const auto& spec : specs) {
    const auto images = generate_domain(spec);
    for (int i = 0; i < spec.count; ++i) {
      const std::string name = std::string(domain_name(spec.domain)) + "_" + std::to_string(i) + ".ppm";
      save_image(images[static_cast<std::size_t>(i)], dir / name);
      manifest["images"].push_back({{"path", name},
                                    {"domain", domain_name(spec.domain)},
                                    {"seed", image_seed(spec, i)},
                                    {"height", spec.height},
                                    {"width", spec.width}});
    }
  }
  const auto path = dir / "manifest.json";
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << manifest.dump(2) << '\n';
  return path;
}

std::vector<Image> training_patches(int count, int size, std::uint64_t seed) {
  return generate_domain({Domain::kNatural, count, size, size, seed});
}

}  // namespace udic
