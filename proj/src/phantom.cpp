#include "wholeheart/phantom.hpp"

#include <algorithm>
#include <cmath>

#include "wholeheart/rng.hpp"

namespace wholeheart {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kAtriumOffset = 20.0;  // atrial centre x displacement, mm
constexpr double kMyoDensity = 1.05;    // g/mL

struct FrameScales {
  double lv, rv, la, ra;
};

FrameScales scales_at(const SceneConfig& c, int64_t t) {
  return {vent_scale(c.amp_lv, 0.0, t, c.frames),
          vent_scale(c.amp_rv, c.phase_rv, t, c.frames),
          atr_scale(c.amp_la, c.phase_la, t, c.frames),
          atr_scale(c.amp_ra, c.phase_ra, t, c.frames)};
}

inline bool in_ellipsoid(double px, double py, double pz, double cx, double cy, double cz,
                         double a, double b, double c) {
  double dx = (px - cx) / a, dy = (py - cy) / b, dz = (pz - cz) / c;
  return dx * dx + dy * dy + dz * dz <= 1.0;
}

uint8_t classify(const SceneConfig& c, const FrameScales& s, double px, double py,
                 double pz) {
  const double cx = c.cx(), cy = c.cy(), zb = c.z_base;

  // LV blood pool: endocardial half-ellipsoid scaled about its centre. The
  // centre sits on the base plane, so the basal cut is invariant under the
  // scaling and the region's volume is exactly r^3 times its ED volume.
  if (pz <= zb &&
      in_ellipsoid(px, py, pz, cx, cy, zb, c.lv_a * s.lv, c.lv_b * s.lv, c.lv_c * s.lv)) {
    return kLvbp;
  }

  // RV blood pool: the ED crescent (basal half of the RV ellipsoid minus the
  // LV epicardial ellipsoid) scaled rigidly about the RV centre, keeping the
  // volume an exact r^3 multiple of the ED crescent. Tested before LVMYO:
  // during systole the scaled crescent grazes the outer septal wall surface,
  // and ceding those voxels to the wall would break the exact scaling. The
  // graze is shallow (about 2 mm) against a >= 7 mm wall, so the myocardial
  // shell around LVBP stays closed.
  double oa = c.lv_a + c.wall, ob = c.lv_b + c.wall, oc = c.lv_c + c.wall;
  {
    double rcx = cx - c.rv_offset();
    double qx = rcx + (px - rcx) / s.rv;
    double qy = cy + (py - cy) / s.rv;
    double qz = zb + (pz - zb) / s.rv;
    if (qz <= zb && in_ellipsoid(qx, qy, qz, rcx, cy, zb, c.rv_a, c.rv_b, c.rv_c) &&
        !in_ellipsoid(qx, qy, qz, cx, cy, zb, oa, ob, oc)) {
      return kRvbp;
    }
  }

  // LV myocardium: fixed epicardial ellipsoid truncated at z_base + wall; the
  // slab above the base closes the shell over the blood pool.
  if (pz <= zb + c.wall && in_ellipsoid(px, py, pz, cx, cy, zb, oa, ob, oc)) return kLvmyo;

  // Atria: full ellipsoids above the base plane, counter-phase motion.
  {
    double acx = cx + kAtriumOffset, acz = c.atrium_cz(c.la_c);
    if (in_ellipsoid(px, py, pz, acx, cy, acz, c.la_ax * s.la, c.la_ay * s.la,
                     c.la_c * s.la)) {
      return kLabp;
    }
  }
  {
    double acx = cx - kAtriumOffset, acz = c.atrium_cz(c.ra_c);
    if (in_ellipsoid(px, py, pz, acx, cy, acz, c.ra_ax * s.ra, c.ra_ay * s.ra,
                     c.ra_c * s.ra)) {
      return kRabp;
    }
  }
  return kBackground;
}

double intensity_level(const SceneConfig& c, uint8_t label) {
  switch (label) {
    case kLvbp:
    case kRvbp:
    case kLabp:
    case kRabp:
      return c.blood;
    case kLvmyo:
      return c.myo;
    default:
      return c.bg;
  }
}

}  // namespace

double vent_scale(double amp, double phase, int64_t t, int64_t frames) {
  return 1.0 - amp * (1.0 - std::cos(2.0 * kPi * double(t) / double(frames) + phase)) / 2.0;
}

double atr_scale(double amp, double phase, int64_t t, int64_t frames) {
  return 1.0 - amp * (1.0 + std::cos(2.0 * kPi * double(t) / double(frames) + phase)) / 2.0;
}

void SceneConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("scene config: " + m); };
  if (grid < 8) fail("grid must be at least 8 voxels");
  if (frames < 2) fail("need at least 2 frames");
  if (voxel <= 0) fail("voxel size must be positive");
  if (wall <= 0) fail("wall thickness must be positive (wall self-intersection)");
  for (double s : {lv_a, lv_b, lv_c, rv_a, rv_b, rv_c, la_ax, la_ay, la_c, ra_ax, ra_ay,
                   ra_c}) {
    if (s <= 0) fail("chamber semi-axes must be positive");
  }
  for (double a : {amp_lv, amp_rv, amp_la, amp_ra}) {
    if (a < 0 || a >= 1) {
      fail("contraction amplitude must lie in [0,1) to keep endocardial radii positive");
    }
  }
  double f = fov();
  if (z_base <= 0 || z_base >= f) fail("base plane outside the grid");
  if (apex_z() <= 0) fail("LV apex extends past z=0");
  if (cx() - lv_a - wall <= 0 || cx() + lv_a + wall >= f) fail("LV extends past the grid in x");
  if (cy() - lv_b - wall <= 0 || cy() + lv_b + wall >= f) fail("LV extends past the grid in y");
  if (cx() - rv_offset() - rv_a <= 0) fail("RV extends past x=0");
  if (cy() - rv_b <= 0 || cy() + rv_b >= f) fail("RV extends past the grid in y");
  if (z_base - rv_c <= 0) fail("RV extends past z=0");
  if (la_ax + ra_ax >= 2 * kAtriumOffset) fail("atria overlap");
  if (atrium_cz(la_c) + la_c >= f || atrium_cz(ra_c) + ra_c >= f) {
    fail("atria extend past the grid in z");
  }
  if (cx() + kAtriumOffset + la_ax >= f || cx() - kAtriumOffset - ra_ax <= 0) {
    fail("atria extend past the grid in x");
  }
  if (cy() + std::max(la_ay, ra_ay) >= f || cy() - std::max(la_ay, ra_ay) <= 0) {
    fail("atria extend past the grid in y");
  }
  for (double v : {blood, myo, bg}) {
    if (v <= 0 || v >= 1) fail("intensity levels must lie in (0,1)");
  }
  if (bias_beta < 0 || bias_beta > 0.5) fail("bias amplitude outside [0, 0.5]");
  if (noise_sigma < 0) fail("noise sigma must be non-negative");
}

uint8_t label_at(const SceneConfig& cfg, const Vec3& p, int64_t t) {
  return classify(cfg, scales_at(cfg, t), p.x, p.y, p.z);
}

DenseScene generate_scene(const SceneConfig& cfg) {
  cfg.validate();
  const int64_t n = cfg.grid;
  DenseScene scene;
  scene.cfg = cfg;
  scene.base = {cfg.cx(), cfg.cy(), cfg.z_base};
  scene.apex = {cfg.cx(), cfg.cy(), cfg.apex_z()};

  // Separable multiplicative shading, one factor per axis.
  std::vector<double> bx(static_cast<size_t>(n)), by(static_cast<size_t>(n)),
      bz(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double ang = 2.0 * kPi * double(i) / double(n);
    bx[size_t(i)] = std::cos(ang + cfg.bias_phase[0]);
    by[size_t(i)] = std::cos(ang + cfg.bias_phase[1]);
    bz[size_t(i)] = std::cos(ang + cfg.bias_phase[2]);
  }

  for (int64_t t = 0; t < cfg.frames; ++t) {
    FrameScales s = scales_at(cfg, t);
    TensorT<uint8_t> lab = TensorT<uint8_t>::zeros({n, n, n});
    Tensor img = Tensor::zeros({n, n, n});
    size_t o = 0;
    for (int64_t z = 0; z < n; ++z) {
      double pz = (double(z) + 0.5) * cfg.voxel;
      for (int64_t y = 0; y < n; ++y) {
        double py = (double(y) + 0.5) * cfg.voxel;
        for (int64_t x = 0; x < n; ++x, ++o) {
          double px = (double(x) + 0.5) * cfg.voxel;
          uint8_t l = classify(cfg, s, px, py, pz);
          lab.data[o] = l;
          double v = intensity_level(cfg, l);
          v *= 1.0 + cfg.bias_beta * bx[size_t(x)] * by[size_t(y)] * bz[size_t(z)];
          if (cfg.noise_sigma > 0) {
            uint64_t counter = uint64_t(((t * n + z) * n + y) * n + x);
            v += cfg.noise_sigma * noise_normal(cfg.noise_seed, counter);
          }
          img.data[o] = float(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    scene.labels.push_back(std::move(lab));
    scene.intensity.push_back(std::move(img));
  }
  return scene;
}

PhenotypeVector compute_phenotypes(const DenseScene& scene) {
  const SceneConfig& cfg = scene.cfg;
  const int64_t T = cfg.frames;
  std::vector<std::vector<int64_t>> counts(6, std::vector<int64_t>(size_t(T), 0));
  for (int64_t t = 0; t < T; ++t) {
    for (uint8_t l : scene.labels[size_t(t)].data) ++counts[l][size_t(t)];
  }
  const char* names[6] = {"background", "LVBP", "LVMYO", "RVBP", "LABP", "RABP"};
  for (int c = 1; c < 6; ++c) {
    if (*std::max_element(counts[c].begin(), counts[c].end()) == 0) {
      throw DataError(std::string("malformed scene: empty label class ") + names[c]);
    }
  }

  double vox_ml = cfg.voxel * cfg.voxel * cfg.voxel / 1000.0;
  auto minmax = [&](int c) {
    auto mm = std::minmax_element(counts[c].begin(), counts[c].end());
    return std::pair<double, double>(double(*mm.first) * vox_ml, double(*mm.second) * vox_ml);
  };

  PhenotypeVector ph;
  auto lv = minmax(kLvbp);
  ph.lvedv = lv.second;
  ph.lvesv = lv.first;
  ph.lvef = 100.0 * (lv.second - lv.first) / lv.second;
  ph.ed_frame =
      std::max_element(counts[kLvbp].begin(), counts[kLvbp].end()) - counts[kLvbp].begin();
  ph.lvm = double(counts[kLvmyo][size_t(ph.ed_frame)]) * vox_ml * kMyoDensity;

  auto rv = minmax(kRvbp);
  ph.rvedv = rv.second;
  ph.rvef = 100.0 * (rv.second - rv.first) / rv.second;

  auto ra = minmax(kRabp);
  ph.raef = 100.0 * (ra.second - ra.first) / ra.second;

  auto la = minmax(kLabp);
  ph.lasv = la.second - la.first;
  return ph;
}

std::vector<PlaneGeometry> default_plane_geometries(const SceneConfig& cfg, int64_t extent,
                                                    double spacing) {
  std::vector<PlaneGeometry> out;
  double span = cfg.z_base - cfg.apex_z();
  for (int k = 0; k < 6; ++k) {
    PlaneGeometry g;
    g.origin = {cfg.cx(), cfg.cy(), cfg.z_base - span * double(k + 1) / 7.0};
    g.u = {1, 0, 0};
    g.v = {0, 1, 0};
    g.view = "SA" + std::to_string(k);
    g.extent = extent;
    g.spacing = spacing;
    out.push_back(g);
  }
  for (int j = 0; j < 3; ++j) {
    double az = kPi * double(j) * 60.0 / 180.0;
    PlaneGeometry g;
    g.origin = {cfg.cx(), cfg.cy(), cfg.fov() / 2.0};
    g.u = {std::cos(az), std::sin(az), 0};
    g.v = {0, 0, 1};
    g.view = "LA" + std::to_string(j);
    g.extent = extent;
    g.spacing = spacing;
    out.push_back(g);
  }
  return out;
}

std::pair<Tensor, TensorT<uint8_t>> slice_plane(const DenseScene& scene,
                                                const PlaneGeometry& geom) {
  const SceneConfig& cfg = scene.cfg;
  const int64_t n = cfg.grid, T = cfg.frames, E = geom.extent;
  Tensor img = Tensor::zeros({T, E, E});
  TensorT<uint8_t> lab = TensorT<uint8_t>::zeros({T, E, E});

  double half = double(E - 1) / 2.0;
  for (int64_t t = 0; t < T; ++t) {
    const Tensor& vol = scene.intensity[size_t(t)];
    const TensorT<uint8_t>& lv = scene.labels[size_t(t)];
    size_t o = size_t(t * E * E);
    for (int64_t j = 0; j < E; ++j) {
      double dv = geom.spacing * (double(j) - half);
      for (int64_t i = 0; i < E; ++i, ++o) {
        double du = geom.spacing * (double(i) - half);
        double px = geom.origin.x + du * geom.u.x + dv * geom.v.x;
        double py = geom.origin.y + du * geom.u.y + dv * geom.v.y;
        double pz = geom.origin.z + du * geom.u.z + dv * geom.v.z;
        // grid coordinates: voxel k's centre sits at (k + 0.5) * voxel
        double gx = px / cfg.voxel - 0.5;
        double gy = py / cfg.voxel - 0.5;
        double gz = pz / cfg.voxel - 0.5;
        double lim = double(n) - 0.5;
        if (gx < -0.5 || gx > lim || gy < -0.5 || gy > lim || gz < -0.5 || gz > lim) {
          img.data[o] = float(cfg.bg);
          lab.data[o] = kBackground;
          continue;
        }
        // trilinear with edge clamping
        auto cell = [&](double g) {
          double c = std::clamp(g, 0.0, double(n) - 1.0);
          int64_t lo = std::min(int64_t(c), n - 2);
          if (n == 1) lo = 0;
          return std::pair<int64_t, double>(lo, c - double(lo));
        };
        auto [x0, fx] = cell(gx);
        auto [y0, fy] = cell(gy);
        auto [z0, fz] = cell(gz);
        auto at = [&](int64_t z, int64_t y, int64_t x) {
          return double(vol.data[size_t((z * n + y) * n + x)]);
        };
        double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x0 + 1) * fx;
        double c01 = at(z0, y0 + 1, x0) * (1 - fx) + at(z0, y0 + 1, x0 + 1) * fx;
        double c10 = at(z0 + 1, y0, x0) * (1 - fx) + at(z0 + 1, y0, x0 + 1) * fx;
        double c11 = at(z0 + 1, y0 + 1, x0) * (1 - fx) + at(z0 + 1, y0 + 1, x0 + 1) * fx;
        double c0 = c00 * (1 - fy) + c01 * fy;
        double c1 = c10 * (1 - fy) + c11 * fy;
        img.data[o] = float(c0 * (1 - fz) + c1 * fz);

        auto nearest = [&](double g) {
          return std::clamp(int64_t(std::floor(g + 0.5)), int64_t(0), n - 1);
        };
        lab.data[o] = lv.data[size_t((nearest(gz) * n + nearest(gy)) * n + nearest(gx))];
      }
    }
  }
  return {std::move(img), std::move(lab)};
}

SizePreset size_preset(int64_t size) {
  if (size == 128) return {96, 128, 1.5, 1.125};
  if (size == 64) return {64, 64, 2.25, 2.25};
  throw ConfigError("size must be 64 or 128, got " + std::to_string(size));
}

SceneConfig randomize_subject_config(uint64_t dataset_seed, int64_t subject, int64_t size) {
  SizePreset preset = size_preset(size);
  Rng rng(derive_seed(dataset_seed, 0x73756265637466ull, uint64_t(subject)));

  SceneConfig c;
  c.grid = preset.grid;
  c.voxel = preset.voxel;
  c.lv_a = rng.uniform(22, 28);
  c.lv_b = rng.uniform(22, 28);
  c.lv_c = rng.uniform(34, 44);
  c.wall = rng.uniform(7, 10);
  c.rv_a = rng.uniform(24, 29);
  c.rv_b = rng.uniform(26, 34);
  c.rv_c = rng.uniform(36, 46);
  c.la_ax = rng.uniform(12, 18);
  c.la_ay = rng.uniform(12, 18);
  c.la_c = rng.uniform(14, 20);
  c.ra_ax = rng.uniform(12, 18);
  c.ra_ay = rng.uniform(12, 18);
  c.ra_c = rng.uniform(14, 20);
  c.amp_lv = rng.uniform(0.25, 0.40);
  c.amp_rv = rng.uniform(0.16, 0.34);
  c.amp_la = rng.uniform(0.20, 0.45);
  c.amp_ra = rng.uniform(0.15, 0.40);
  c.phase_rv = rng.uniform(-0.15, 0.15);
  c.phase_la = rng.uniform(-0.20, 0.20);
  c.phase_ra = rng.uniform(-0.20, 0.20);
  c.blood = rng.uniform(0.82, 0.88);
  c.myo = rng.uniform(0.47, 0.53);
  c.bg = rng.uniform(0.07, 0.13);
  c.bias_beta = rng.uniform(0.05, 0.15);
  for (int i = 0; i < 3; ++i) c.bias_phase[i] = rng.uniform(0, 2 * kPi);
  c.noise_sigma = rng.uniform(0.01, 0.04);
  c.noise_seed = derive_seed(dataset_seed, uint64_t(subject), 0x6e6f697365ull);
  c.validate();
  return c;
}

}  // namespace wholeheart
