#include "sdgc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace sdgc::dataset {

namespace {

struct Rgb {
  double r, g, b;
};

// hue in [0,1) -> saturated RGB
Rgb hue_to_rgb(double hue, double value) {
  double h = 6.0 * (hue - std::floor(hue));
  int i = static_cast<int>(h);
  double f = h - i;
  double p = 0.15, q = value * (1 - 0.85 * f), t = value * (1 - 0.85 * (1 - f));
  switch (i % 6) {
    case 0: return {value, t, p};
    case 1: return {q, value, p};
    case 2: return {p, value, t};
    case 3: return {p, q, value};
    case 4: return {t, p, value};
    default: return {value, p, q};
  }
}

double smoothstep(double e0, double e1, double x) {
  double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

}  // namespace

std::vector<Image> generate_synthetic_dataset(const SyntheticSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<Image> out;
  out.reserve(static_cast<size_t>(spec.count));
  const int64_t H = spec.height, W = spec.width;
  for (int64_t n = 0; n < spec.count; ++n) {
    // latent factors
    double bg_hue = rng.uniform();
    double grad_angle = rng.uniform() * 6.283185307179586;
    int shape_kind = static_cast<int>(rng.below(2));  // 0 ellipse, 1 rectangle
    double cx = rng.uniform(0.25, 0.75);
    double cy = rng.uniform(0.25, 0.75);
    double rx = rng.uniform(0.12, 0.35);
    double ry = rng.uniform(0.12, 0.35);
    double rot = rng.uniform() * 3.141592653589793;
    double fg_hue = rng.uniform();

    Rgb bg_a = hue_to_rgb(bg_hue, 0.9);
    Rgb bg_b = hue_to_rgb(bg_hue + 0.35, 0.55);
    Rgb fg = hue_to_rgb(fg_hue, 0.95);
    double ca = std::cos(grad_angle), sa = std::sin(grad_angle);
    double cr = std::cos(rot), sr = std::sin(rot);

    Image img = Image::zeros({H, W, 3});
    float* p = img.data();
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double u = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
        double v = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
        double g = 0.5 + 0.5 * ((u - 0.5) * ca + (v - 0.5) * sa) / 0.7071;
        g = std::clamp(g, 0.0, 1.0);
        double r = bg_a.r * (1 - g) + bg_b.r * g;
        double gg = bg_a.g * (1 - g) + bg_b.g * g;
        double b = bg_a.b * (1 - g) + bg_b.b * g;

        // shape coverage with a soft edge (~1 pixel)
        double dx = u - cx, dy = v - cy;
        double lx = (dx * cr + dy * sr) / rx;
        double ly = (-dx * sr + dy * cr) / ry;
        double dist = shape_kind == 0 ? std::sqrt(lx * lx + ly * ly)
                                      : std::max(std::abs(lx), std::abs(ly));
        double edge = 1.0 / (std::min(rx, ry) * static_cast<double>(std::min(H, W)));
        double cover = 1.0 - smoothstep(1.0 - edge, 1.0 + edge, dist);
        r = r * (1 - cover) + fg.r * cover;
        gg = gg * (1 - cover) + fg.g * cover;
        b = b * (1 - cover) + fg.b * cover;

        int64_t base = (y * W + x) * 3;
        p[base + 0] = static_cast<float>(std::clamp(r, 0.0, 1.0));
        p[base + 1] = static_cast<float>(std::clamp(gg, 0.0, 1.0));
        p[base + 2] = static_cast<float>(std::clamp(b, 0.0, 1.0));
      }
    out.push_back(std::move(img));
  }
  return out;
}

uint8_t pixel_to_u8(float v) {
  double x = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<uint8_t>(std::lround(x * 255.0));
}

void save_ppm(const Image& img, const std::string& path) {
  if (img.shape.size() != 3 || img.shape[2] != 3)
    throw DataError(cat("save_ppm: expected (H,W,3), got ", ad::shape_str(img.shape)));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError(cat("save_ppm: cannot open '", path, "'"));
  int64_t H = img.shape[0], W = img.shape[1];
  f << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(W * 3));
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W * 3; ++x) row[static_cast<size_t>(x)] = pixel_to_u8(img.at(y * W * 3 + x));
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw DataError(cat("save_ppm: write failed for '", path, "'"));
}

namespace {

// reads the next header token, skipping whitespace and '#' comments
std::string ppm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (!std::isspace(c)) {
      tok.push_back(static_cast<char>(c));
      while ((c = in.peek()) != EOF && !std::isspace(c)) tok.push_back(static_cast<char>(in.get()));
      return tok;
    }
  }
  return tok;
}

}  // namespace

Image load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(cat("load_ppm: cannot open '", path, "'"));
  std::string magic = ppm_token(f);
  if (magic == "P3") throw DataError(cat("load_ppm: '", path, "': ASCII PPM (P3) is unsupported, need binary P6"));
  if (magic != "P6") throw DataError(cat("load_ppm: '", path, "': bad magic '", magic, "', expected P6"));
  std::string ws = ppm_token(f), hs = ppm_token(f), ms = ppm_token(f);
  int64_t W = 0, H = 0, maxval = 0;
  try {
    W = std::stoll(ws);
    H = std::stoll(hs);
    maxval = std::stoll(ms);
  } catch (...) {
    throw DataError(cat("load_ppm: '", path, "': malformed header"));
  }
  if (W < 1 || H < 1) throw DataError(cat("load_ppm: '", path, "': bad dimensions ", W, "x", H));
  if (maxval != 255) throw DataError(cat("load_ppm: '", path, "': maxval ", maxval, " unsupported, need 255"));
  f.get();  // single whitespace after maxval

  std::vector<unsigned char> buf(static_cast<size_t>(W * H * 3));
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size()))
    throw DataError(cat("load_ppm: '", path, "': truncated payload (", f.gcount(), " of ", buf.size(), " bytes)"));

  Image img = Image::zeros({H, W, 3});
  for (size_t i = 0; i < buf.size(); ++i) img.data()[i] = static_cast<float>(buf[i]) / 255.0f;
  return img;
}

uint64_t dataset_hash(const std::vector<Image>& imgs) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& img : imgs) h = fnv1a(img.data(), img.values->size() * sizeof(float), h);
  return h;
}

}  // namespace sdgc::dataset
