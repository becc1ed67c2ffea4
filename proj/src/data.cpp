#include "cranio/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace cranio {

namespace {

struct Range {
  double lo, hi;
};

// Sampling ranges, in FaceGeometry field order.
constexpr std::array<Range, FaceGeometry::kDims> kRanges = {{
    {0.55, 0.75},   // head_width
    {0.75, 0.92},   // head_height
    {0.55, 0.95},   // jaw_taper
    {0.20, 0.34},   // eye_spacing
    {-0.22, -0.05}, // eye_height
    {0.07, 0.11},   // eye_radius
    {0.15, 0.30},   // nose_length
    {0.06, 0.12},   // nose_width
    {0.12, 0.26},   // mouth_width
    {0.07, 0.15},   // mouth_gap
    {-0.04, 0.04},  // asymmetry
}};

std::array<double*, FaceGeometry::kDims> fields(FaceGeometry& g) {
  return {&g.head_width,  &g.head_height, &g.jaw_taper,  &g.eye_spacing, &g.eye_height, &g.eye_radius,
          &g.nose_length, &g.nose_width,  &g.mouth_width, &g.mouth_gap,  &g.asymmetry};
}

std::mt19937_64 derived_rng(std::uint64_t root, std::uint64_t tag, std::uint64_t index = 0) {
  return std::mt19937_64(derive_seed(root, tag, index));
}

constexpr double kHeadCentreY = 0.04;

// Feature positions of one geometry seen from one view.
struct Layout {
  double cx, cy, head_w, head_h, jaw;
  double eye_x[2], eye_y[2], eye_rx[2], eye_r;
  double nose_x, nose_top, nose_bottom, nose_w;
  double mouth_x, mouth_y, mouth_w;

  Layout(const FaceGeometry& g, View view) {
    const bool lateral = view == View::Lateral;
    cx = lateral ? -0.04 : 0.0;
    cy = kHeadCentreY;
    head_w = g.head_width * (lateral ? 0.9 : 1.0);
    head_h = g.head_height;
    jaw = g.jaw_taper;
    // A turned head compresses horizontal offsets and slides features toward
    // the facing side; the far eye foreshortens.
    const double shift = lateral ? 0.22 * g.head_width : 0.0;
    const double squeeze = lateral ? 0.78 : 1.0;
    eye_r = g.eye_radius;
    for (int side = 0; side < 2; ++side) {
      const double sign = side == 0 ? -1.0 : 1.0;
      eye_x[side] = cx + shift + squeeze * sign * g.eye_spacing;
      eye_y[side] = g.eye_height + sign * 0.5 * g.asymmetry;
      eye_rx[side] = g.eye_radius * (lateral && side == 0 ? 0.75 : 1.0);
    }
    nose_x = cx + shift * 1.25;
    nose_top = g.eye_height + 0.8 * g.eye_radius;
    nose_bottom = g.eye_height + g.nose_length;
    nose_w = g.nose_width;
    mouth_x = cx + shift;
    mouth_y = nose_bottom + g.mouth_gap;
    mouth_w = g.mouth_width * squeeze;
  }

  // Normalized radius inside the head outline (< 1 inside); the lower half
  // narrows toward the chin.
  double head_radius(double u, double v) const {
    const double du = u - cx, dv = v - cy;
    double w = head_w;
    if (dv > 0) w *= 1.0 - (1.0 - jaw) * std::min(1.0, dv / head_h);
    return std::sqrt((du / w) * (du / w) + (dv / head_h) * (dv / head_h));
  }

  double nose_half_width(double v) const {
    const double t = (v - nose_top) / (nose_bottom - nose_top);
    if (t < 0 || t > 1) return -1.0;
    return nose_w * (0.25 + 0.75 * t);
  }

  double eye_distance(int side, double u, double v, double sx, double sy) const {
    const double a = (u - eye_x[side]) / (sx * eye_rx[side]);
    const double b = (v - eye_y[side]) / (sy * eye_r);
    return a * a + b * b;
  }
};

struct Rgb {
  double r, g, b;
};

Rgb skull_colour(const Layout& L, double u, double v) {
  const double rad = L.head_radius(u, v);
  if (rad > 1.0) return {0.02, 0.02, 0.02};
  double b = 0.62 + 0.25 * (1.0 - rad * rad);
  if (rad > 0.9) b = 0.97;
  for (int side = 0; side < 2; ++side) {
    const double d = L.eye_distance(side, u, v, 1.55, 1.35);
    if (d < 1.0) b = d > 0.72 ? 0.93 : 0.07;
  }
  const double hw = L.nose_half_width(v);
  if (hw > 0 && std::abs(u - L.nose_x) < hw) b = 0.05;
  const double mu = u - L.mouth_x, mv = v - L.mouth_y;
  if (std::abs(mv) < 0.055 && std::abs(mu) < 0.6 * L.mouth_w) {
    const double phase = std::fmod(mu + 10.0, 0.045) / 0.045;
    b = (phase < 0.22 || std::abs(mv) < 0.008) ? 0.22 : 0.95;
  }
  return {b, 0.97 * b, 0.9 * b};
}

Rgb face_colour(const Layout& L, double u, double v) {
  const double rad = L.head_radius(u, v);
  if (rad > 1.0) return {0.84 - 0.05 * v, 0.87 - 0.05 * v, 0.92 - 0.04 * v};
  const double shade = 0.78 + 0.22 * (1.0 - rad * rad);
  Rgb c{0.94 * shade, 0.76 * shade, 0.63 * shade};
  if (v - L.cy < -0.5 * L.head_h) return {0.28 * shade, 0.18 * shade, 0.12 * shade};
  for (int side = 0; side < 2; ++side) {
    if (std::abs(v - (L.eye_y[side] - 1.9 * L.eye_r)) < 0.025 && std::abs(u - L.eye_x[side]) < 1.2 * L.eye_rx[side])
      c = {0.3, 0.2, 0.15};
    if (L.eye_distance(side, u, v, 1.25, 0.7) < 1.0) {
      const double du = u - L.eye_x[side], dv = v - L.eye_y[side];
      const double rr = du * du + dv * dv;
      if (rr < std::pow(0.3 * L.eye_r, 2)) c = {0.05, 0.05, 0.05};
      else if (rr < std::pow(0.55 * L.eye_r, 2)) c = {0.22, 0.3, 0.45};
      else c = {0.96, 0.96, 0.96};
    }
  }
  const double hw = L.nose_half_width(v);
  if (hw > 0 && std::abs(u - L.nose_x - 0.3 * hw) < 0.35 * hw) c = {c.r * 0.86, c.g * 0.86, c.b * 0.86};
  for (double side : {-1.0, 1.0}) {
    const double du = u - (L.nose_x + side * 0.55 * L.nose_w), dv = v - (L.nose_bottom - 0.01);
    if (du * du + dv * dv < 0.025 * 0.025) c = {0.45, 0.3, 0.25};
  }
  const double mu = (u - L.mouth_x) / L.mouth_w, mv = (v - L.mouth_y) / 0.045;
  if (mu * mu + mv * mv < 1.0) c = std::abs(v - L.mouth_y) < 0.007 ? Rgb{0.45, 0.15, 0.15} : Rgb{0.78, 0.35, 0.35};
  return c;
}

template <typename F>
Image render(const FaceGeometry& g, View view, Index size, F colour) {
  if (size < 32) throw Error(ErrorKind::InvalidArgument, "render", "image_size must be >= 32");
  const Layout L(g, view);
  Image img(3, size, size);
  constexpr int kSub = 3;  // supersampling per axis
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) {
      Rgb acc{0, 0, 0};
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx) {
          const double u = ((static_cast<double>(x) + (sx + 0.5) / kSub) / static_cast<double>(size)) * 2.0 - 1.0;
          const double v = ((static_cast<double>(y) + (sy + 0.5) / kSub) / static_cast<double>(size)) * 2.0 - 1.0;
          const Rgb c = colour(L, u, v);
          acc.r += c.r;
          acc.g += c.g;
          acc.b += c.b;
        }
      const double n = kSub * kSub;
      img.at(0, y, x) = static_cast<float>(std::clamp(acc.r / n, 0.0, 1.0) * 2.0 - 1.0);
      img.at(1, y, x) = static_cast<float>(std::clamp(acc.g / n, 0.0, 1.0) * 2.0 - 1.0);
      img.at(2, y, x) = static_cast<float>(std::clamp(acc.b / n, 0.0, 1.0) * 2.0 - 1.0);
    }
  return img;
}

float sample_bilinear(const Image& img, Index c, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  const Index y0 = static_cast<Index>(std::floor(y)), x0 = static_cast<Index>(std::floor(x));
  const Index y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const double top = (1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1);
  const double bottom = (1 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1);
  return static_cast<float>((1 - fy) * top + fy * bottom);
}

std::string format_index(const char* prefix, Index v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%04ld", prefix, static_cast<long>(v));
  return buf;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t tag, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(root), static_cast<std::uint32_t>(root >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

const char* to_string(View v) { return v == View::Frontal ? "frontal" : "lateral"; }

View parse_view(const std::string& s) {
  if (s == "frontal") return View::Frontal;
  if (s == "lateral") return View::Lateral;
  throw Error(ErrorKind::Format, "view", "unknown view '" + s + "'");
}

std::array<double, FaceGeometry::kDims> FaceGeometry::normalized() const {
  FaceGeometry copy = *this;
  auto f = fields(copy);
  std::array<double, kDims> out{};
  for (std::size_t i = 0; i < kDims; ++i) out[i] = (*f[i] - kRanges[i].lo) / (kRanges[i].hi - kRanges[i].lo);
  return out;
}

bool FaceGeometry::valid() const {
  if (head_width <= 0 || head_height <= 0 || jaw_taper <= 0 || eye_radius <= 0 || nose_length <= 0 ||
      nose_width <= 0 || mouth_width <= 0 || mouth_gap <= 0 || eye_spacing <= 0)
    return false;
  // Orbits inside the cranium, brows below the hairline, mouth above the chin
  // and narrower than the jaw there.
  if (eye_spacing + 1.6 * eye_radius > 0.85 * head_width) return false;
  if (eye_height - 2.0 * eye_radius - kHeadCentreY < -0.5 * head_height) return false;
  const double mouth_y = eye_height + nose_length + mouth_gap;
  const double depth = (mouth_y + 0.06 - kHeadCentreY) / head_height;
  if (depth > 0.85) return false;
  const double taper = 1.0 - (1.0 - jaw_taper) * std::max(0.0, depth);
  const double half_width = head_width * taper * std::sqrt(std::max(0.0, 1.0 - depth * depth));
  return 0.65 * mouth_width < 0.8 * half_width;
}

FaceGeometry sample_geometry(std::mt19937_64& rng) {
  for (;;) {
    FaceGeometry g{};
    auto f = fields(g);
    for (std::size_t i = 0; i < FaceGeometry::kDims; ++i)
      *f[i] = std::uniform_real_distribution<double>(kRanges[i].lo, kRanges[i].hi)(rng);
    if (g.valid()) return g;
  }
}

FaceGeometry jitter_geometry(const FaceGeometry& g, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 0.01);
  for (int attempt = 0; attempt < 100; ++attempt) {
    FaceGeometry out = g;
    auto f = fields(out);
    for (std::size_t i = 0; i < FaceGeometry::kDims; ++i)
      *f[i] = std::clamp(*f[i] + noise(rng) * (kRanges[i].hi - kRanges[i].lo), kRanges[i].lo, kRanges[i].hi);
    if (out.valid()) return out;
  }
  return g;
}

Image render_skull(const FaceGeometry& g, View view, Index size) { return render(g, view, size, skull_colour); }
Image render_face(const FaceGeometry& g, View view, Index size) { return render(g, view, size, face_colour); }

SynthResult synth_generate(std::uint64_t seed, Index n_identities, Index image_size) {
  if (n_identities < 2) throw Error(ErrorKind::InvalidArgument, "synth_generate", "need at least 2 identities");
  if (image_size < 32) throw Error(ErrorKind::InvalidArgument, "synth_generate", "image_size must be >= 32");
  SynthResult out;
  for (Index id = 0; id < n_identities; ++id) {
    auto rng = derived_rng(seed, 1, static_cast<std::uint64_t>(id));
    const FaceGeometry g = sample_geometry(rng);
    out.geometry.push_back(g);
    for (View view : {View::Frontal, View::Lateral}) {
      const FaceGeometry pose = jitter_geometry(g, rng);
      ImagePair p;
      p.skull = render_skull(pose, view, image_size);
      p.face = render_face(pose, view, image_size);
      p.identity = id;
      p.view = view;
      p.source = static_cast<Index>(out.pairs.size());
      out.pairs.push_back(std::move(p));
    }
  }
  return out;
}

Image flip_horizontal(const Image& img) {
  Image out = img;
  for (Index c = 0; c < img.channels; ++c)
    for (Index y = 0; y < img.height; ++y)
      for (Index x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

Image warp_affine(const Image& img, double degrees, double scale, double shift_x, double shift_y) {
  if (!(scale > 0)) throw Error(ErrorKind::InvalidArgument, "warp_affine", "scale must be > 0");
  Image out = img;
  const double theta = degrees * M_PI / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cx = 0.5 * static_cast<double>(img.width - 1), cy = 0.5 * static_cast<double>(img.height - 1);
  const double tx = shift_x * static_cast<double>(img.width), ty = shift_y * static_cast<double>(img.height);
  for (Index y = 0; y < img.height; ++y)
    for (Index x = 0; x < img.width; ++x) {
      // Output pixel -> source pixel: undo translation, scale, then rotation.
      const double px = (static_cast<double>(x) - cx - tx) / scale;
      const double py = (static_cast<double>(y) - cy - ty) / scale;
      const double sx = cs * px + sn * py + cx;
      const double sy = -sn * px + cs * py + cy;
      for (Index c = 0; c < img.channels; ++c) out.at(c, y, x) = sample_bilinear(img, c, sy, sx);
    }
  return out;
}

Image colour_jitter(const Image& img, double brightness, double contrast) {
  Image out = img;
  Array<double> p = (img.data.cast<double>() + 1.0) * 0.5 * (1.0 + brightness);
  const double m = p.mean();
  p = ((p - m) * (1.0 + contrast) + m).cwiseMax(0.0).cwiseMin(1.0);
  out.data = (p * 2.0 - 1.0).cast<float>();
  return out;
}

std::vector<ImagePair> augment(const std::vector<ImagePair>& pairs, std::uint64_t seed) {
  std::vector<ImagePair> out;
  out.reserve(pairs.size() * kAugmentationFactor);
  for (const ImagePair& p : pairs) {
    auto rng = derived_rng(seed, 2, static_cast<std::uint64_t>(p.source));
    auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    auto variant = [&](const char* kind) {
      ImagePair v = p;
      v.provenance = std::string("augmented:") + kind;
      return v;
    };
    out.push_back(p);

    ImagePair flip = variant("flip");
    flip.skull = flip_horizontal(p.skull);
    flip.face = flip_horizontal(p.face);
    out.push_back(std::move(flip));

    ImagePair rot = variant("rotation");
    const double angle = uniform(-10.0, 10.0);
    rot.skull = warp_affine(p.skull, angle, 1.0, 0.0, 0.0);
    rot.face = warp_affine(p.face, angle, 1.0, 0.0, 0.0);
    out.push_back(std::move(rot));

    ImagePair jit = variant("colour_jitter");
    jit.face = colour_jitter(p.face, uniform(-0.2, 0.2), uniform(-0.2, 0.2));
    out.push_back(std::move(jit));

    ImagePair aff = variant("affine");
    const double s = uniform(0.9, 1.1), tx = uniform(-0.08, 0.08), ty = uniform(-0.08, 0.08);
    aff.skull = warp_affine(p.skull, 0.0, s, tx, ty);
    aff.face = warp_affine(p.face, 0.0, s, tx, ty);
    out.push_back(std::move(aff));
  }
  return out;
}

Split split_pairs(std::vector<ImagePair> pairs, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw Error(ErrorKind::InvalidArgument, "split", "ratio must lie in (0, 1)");
  const Index n = static_cast<Index>(pairs.size());
  if (n < 2) throw Error(ErrorKind::InvalidArgument, "split", "need at least 2 pairs, got " + std::to_string(n));
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  auto rng = derived_rng(seed, 3);
  std::shuffle(order.begin(), order.end(), rng);
  const Index n_train = std::clamp<Index>(std::llround(ratio * static_cast<double>(n)), 1, n - 1);
  std::vector<bool> in_train(static_cast<std::size_t>(n), false);
  for (Index i = 0; i < n_train; ++i) in_train[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  Split out;
  for (Index i = 0; i < n; ++i) (in_train[static_cast<std::size_t>(i)] ? out.train : out.test).push_back(std::move(pairs[static_cast<std::size_t>(i)]));
  return out;
}

Dataset build_dataset(const DatasetOptions& options) {
  Dataset d;
  d.options = options;
  SynthResult synth = synth_generate(options.seed, options.identities, options.image_size);
  d.original_pairs = static_cast<Index>(synth.pairs.size());
  d.originals = synth.pairs;
  Split split = split_pairs(std::move(synth.pairs), options.ratio, options.seed);
  d.train = augment(split.train, options.seed);
  d.test = std::move(split.test);
  return d;
}

std::string pair_stem(const ImagePair& p) {
  std::string stem = format_index("p", p.source) + "_" + format_index("id", p.identity) + "_" + to_string(p.view);
  const std::string prefix = "augmented:";
  if (p.provenance.rfind(prefix, 0) == 0) stem += "_" + p.provenance.substr(prefix.size());
  return stem;
}

Index identity_from_name(const std::string& name) {
  std::size_t pos = 0;
  while ((pos = name.find("id", pos)) != std::string::npos) {
    const bool boundary = pos == 0 || name[pos - 1] == '_' || name[pos - 1] == '/';
    std::size_t end = pos + 2;
    while (end < name.size() && std::isdigit(static_cast<unsigned char>(name[end]))) ++end;
    if (boundary && end > pos + 2) return std::stol(name.substr(pos + 2, end - pos - 2));
    pos += 2;
  }
  return -1;
}

DatasetManifest write_dataset(const Dataset& data, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  DatasetManifest m;
  m.seed = data.options.seed;
  m.identities = data.options.identities;
  m.image_size = data.options.image_size;
  m.ratio = data.options.ratio;
  for (const char* sub : {"train/skull", "train/face", "test/skull", "test/face", "gallery"}) fs::create_directories(dir / sub);
  auto emit = [&](const std::vector<ImagePair>& pairs, const std::string& split) {
    for (const ImagePair& p : pairs) {
      const std::string stem = pair_stem(p);
      ManifestRecord r{split + "/skull/" + stem + ".png", split + "/face/" + stem + ".png", p.identity, p.view,
                       split, p.provenance, p.source};
      save_image(p.skull, dir / r.path_skull);
      save_image(p.face, dir / r.path_face);
      m.records.push_back(std::move(r));
    }
  };
  emit(data.train, "train");
  emit(data.test, "test");
  for (const ImagePair& p : data.originals) save_image(p.face, dir / "gallery" / (pair_stem(p) + ".png"));

  std::ofstream out(dir / "manifest.tsv", std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "write_dataset", "cannot write " + (dir / "manifest.tsv").string());
  out << "# seed=" << m.seed << "\n# identities=" << m.identities << "\n# image_size=" << m.image_size
      << "\n# ratio=" << m.ratio << "\n# augmentation_factor=" << m.augmentation_factor << "\n";
  out << "path_skull\tpath_face\tidentity_id\tview\tsplit\tprovenance\tsource_pair\n";
  for (const auto& r : m.records)
    out << r.path_skull << '\t' << r.path_face << '\t' << r.identity << '\t' << to_string(r.view) << '\t' << r.split
        << '\t' << r.provenance << '\t' << r.source << '\n';
  if (!out.flush()) throw Error(ErrorKind::Io, "write_dataset", "write failed");
  return m;
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.tsv";
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::NotFound, "read_manifest", "no manifest at " + path.string());
  DatasetManifest m;
  std::string line;
  bool header = false;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = line.substr(1, eq - 1);
      key.erase(0, key.find_first_not_of(' '));
      const std::string value = line.substr(eq + 1);
      if (key == "seed") m.seed = std::stoull(value);
      else if (key == "identities") m.identities = std::stol(value);
      else if (key == "image_size") m.image_size = std::stol(value);
      else if (key == "ratio") m.ratio = std::stod(value);
      else if (key == "augmentation_factor") m.augmentation_factor = std::stol(value);
      continue;
    }
    if (!header) {
      if (line.rfind("path_skull\tpath_face\tidentity_id\tview\tsplit\tprovenance", 0) != 0)
        throw Error(ErrorKind::Format, "read_manifest", "missing header row in " + path.string());
      header = true;
      continue;
    }
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() < 6)
      throw Error(ErrorKind::Format, "read_manifest", path.string() + ":" + std::to_string(line_no) + ": expected 6+ columns");
    ManifestRecord r;
    r.path_skull = cols[0];
    r.path_face = cols[1];
    r.identity = std::stol(cols[2]);
    r.view = parse_view(cols[3]);
    r.split = cols[4];
    r.provenance = cols[5];
    r.source = cols.size() > 6 ? std::stol(cols[6]) : -1;
    m.records.push_back(std::move(r));
  }
  if (!header) throw Error(ErrorKind::Format, "read_manifest", "missing header row in " + path.string());
  return m;
}

std::vector<ImagePair> load_split(const std::filesystem::path& dir, const DatasetManifest& manifest,
                                  const std::string& split) {
  std::vector<ImagePair> out;
  for (const auto& r : manifest.records) {
    if (r.split != split) continue;
    ImagePair p;
    p.skull = load_image(dir / r.path_skull);
    p.face = load_image(dir / r.path_face);
    p.identity = r.identity;
    p.view = r.view;
    p.provenance = r.provenance;
    p.source = r.source;
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace cranio
