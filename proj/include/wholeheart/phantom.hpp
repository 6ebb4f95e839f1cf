#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wholeheart/common.hpp"
#include "wholeheart/tensor.hpp"

namespace wholeheart {

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

enum Label : uint8_t {
  kBackground = 0,
  kLvbp = 1,
  kLvmyo = 2,
  kRvbp = 3,
  kLabp = 4,
  kRabp = 5,
};

// Analytic beating-heart scene. All geometry is in millimetres; the long axis
// is the z direction and the mitral/tricuspid base plane sits at z_base, with
// the ventricles below and the atria above.
struct SceneConfig {
  int64_t grid = 96;     // voxels per axis
  int64_t frames = 50;   // frames per cardiac cycle
  double voxel = 1.5;    // mm

  // LV endocardial semi-axes and wall thickness. The LV centre lies on the
  // base plane, so radial contraction about it preserves the basal cut.
  double lv_a = 25, lv_b = 25, lv_c = 38, wall = 8;
  // RV end-diastolic ellipsoid; the blood pool is its basal half minus the LV
  // epicardial ellipsoid, a crescent lateral to the LV.
  double rv_a = 26, rv_b = 30, rv_c = 41;
  // Atria: full ellipsoids above the base plane.
  double la_ax = 15, la_ay = 15, la_c = 17;
  double ra_ax = 15, ra_ay = 15, ra_c = 17;

  // Contraction amplitudes in (0,1) and phase offsets (radians). Ventricles
  // are maximal at t=0; atria move in counter-phase.
  double amp_lv = 0.30, amp_rv = 0.25, amp_la = 0.30, amp_ra = 0.25;
  double phase_rv = 0.0, phase_la = 0.0, phase_ra = 0.0;

  double blood = 0.85, myo = 0.50, bg = 0.10;
  double bias_beta = 0.10;  // multiplicative cosine shading amplitude
  double bias_phase[3] = {0.0, 0.0, 0.0};
  double noise_sigma = 0.02;
  uint64_t noise_seed = 0;

  double fov() const { return double(grid) * voxel; }
  double cx() const { return fov() / 2; }
  double cy() const { return fov() / 2; }
  double z_base = 78.0;
  double rv_offset() const { return 0.8 * (lv_a + wall) + 0.3 * rv_a; }
  double atrial_gap = 3.0;
  double atrium_cz(double c_axis) const { return z_base + wall + atrial_gap + c_axis; }
  double apex_z() const { return z_base - (lv_c + wall); }

  void validate() const;
};

struct PlaneGeometry {
  Vec3 origin;        // mm
  Vec3 u, v;          // in-plane orthonormal directions
  std::string view;   // "SA0".."SA5" | "LA0".."LA2"
  int64_t extent = 128;
  double spacing = 1.125;  // mm per pixel
};

struct PhenotypeVector {
  double lvm = 0;    // g
  double rvef = 0;   // %
  double raef = 0;   // %
  double rvedv = 0;  // mL
  double lasv = 0;   // mL
  // diagnostics, not regression targets
  double lvedv = 0, lvesv = 0, lvef = 0;
  int64_t ed_frame = 0;

  std::vector<double> targets() const { return {lvm, rvef, raef, rvedv, lasv}; }
};

struct DenseScene {
  SceneConfig cfg;
  std::vector<TensorT<uint8_t>> labels;  // per frame, {Z, Y, X}
  std::vector<Tensor> intensity;         // per frame, {Z, Y, X}, in [0,1]
  Vec3 long_axis{0, 0, 1};
  Vec3 base, apex;
};

// Endocardial radial scale factors at frame t.
double vent_scale(double amp, double phase, int64_t t, int64_t frames);
double atr_scale(double amp, double phase, int64_t t, int64_t frames);

// Class of the point (mm) at frame t; the first matching chamber in class-id
// order wins.
uint8_t label_at(const SceneConfig& cfg, const Vec3& p, int64_t t);

DenseScene generate_scene(const SceneConfig& cfg);

PhenotypeVector compute_phenotypes(const DenseScene& scene);

// 6 SA planes equidistant between base and apex (SA0 most basal) and 3 LA
// planes through the long axis at azimuths 0, 60 and 120 degrees.
std::vector<PlaneGeometry> default_plane_geometries(const SceneConfig& cfg, int64_t extent,
                                                    double spacing);

// Trilinear intensity, nearest-neighbour labels; samples outside the grid
// fall back to the background level / class 0. Outputs are {T, E, E} indexed
// [t][j][i] with i along u and j along v.
std::pair<Tensor, TensorT<uint8_t>> slice_plane(const DenseScene& scene,
                                                const PlaneGeometry& geom);

// Size preset: 128 -> 96-voxel grid at 1.5 mm with 128-pixel planes at
// 1.125 mm; 64 -> 64-voxel grid at 2.25 mm with 64-pixel planes at 2.25 mm
// (plane pixels coincide with voxel centres).
struct SizePreset {
  int64_t grid, plane_extent;
  double voxel, plane_spacing;
};
SizePreset size_preset(int64_t size);

// Deterministic per-subject draw of all randomized scene parameters.
SceneConfig randomize_subject_config(uint64_t dataset_seed, int64_t subject,
                                     int64_t size);

}  // namespace wholeheart
