#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "wholeheart/common.hpp"
#include "wholeheart/graph.hpp"
#include "wholeheart/model.hpp"
#include "wholeheart/tensor.hpp"
#include "wholeheart/tokenizer.hpp"

namespace wholeheart {

inline constexpr int64_t kNumTargets = 5;
inline constexpr int64_t kNumClasses = 6;
inline const char* const kTargetNames[kNumTargets] = {"lvm", "rvef", "raef", "rvedv", "lasv"};
inline const char* const kClassNames[kNumClasses] = {"bg",   "lvbp", "lvmyo",
                                                     "rvbp", "labp", "rabp"};

// ---------------------------------------------------------------------------
// Phenotype regression head: mean-pooled latent -> MLP -> 5 targets.

template <typename T>
struct PhenHeadT {
  LinearT<T> fc1, fc2;

  static PhenHeadT init(int64_t dim, int64_t hidden, Rng& rng) {
    PhenHeadT h;
    h.fc1 = LinearT<T>::init(dim, hidden, rng);
    h.fc2 = LinearT<T>::init(hidden, kNumTargets, rng);
    return h;
  }
};

template <typename T, class F>
void visit_params(PhenHeadT<T>& h, F&& f) {
  detail::visit_linear(h.fc1, "phen.fc1", f);
  detail::visit_linear(h.fc2, "phen.fc2", f);
}

template <typename T>
typename GraphT<T>::NodeId phen_forward(GraphT<T>& g, PhenHeadT<T>& h,
                                        typename GraphT<T>::NodeId pooled) {
  g.set_context("phenotype head");
  return linear(g, h.fc2, g.gelu(linear(g, h.fc1, pooled)));
}

// Per-target affine standardization. Targets are regressed in standardized
// space; predictions are mapped back outside the graph.
struct Standardizer {
  std::vector<double> mean, stdev;

  static Standardizer fit(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw DataError("standardizer: no rows");
    size_t k = rows[0].size();
    Standardizer s;
    s.mean.assign(k, 0.0);
    s.stdev.assign(k, 0.0);
    for (const auto& r : rows)
      for (size_t j = 0; j < k; ++j) s.mean[j] += r[j];
    for (size_t j = 0; j < k; ++j) s.mean[j] /= double(rows.size());
    for (const auto& r : rows)
      for (size_t j = 0; j < k; ++j) s.stdev[j] += (r[j] - s.mean[j]) * (r[j] - s.mean[j]);
    for (size_t j = 0; j < k; ++j) {
      s.stdev[j] = std::sqrt(s.stdev[j] / double(rows.size()));
      if (!(s.stdev[j] > 0.0)) {
        throw DataError("standardizer: target " + std::to_string(j) + " has zero variance");
      }
    }
    return s;
  }

  double forward(size_t j, double v) const { return (v - mean[j]) / stdev[j]; }
  double inverse(size_t j, double z) const { return z * stdev[j] + mean[j]; }
};

template <typename T>
TensorT<T> standardize_targets(const Standardizer& s,
                               const std::vector<std::vector<double>>& rows) {
  TensorT<T> out = TensorT<T>::zeros({int64_t(rows.size()), kNumTargets});
  for (size_t i = 0; i < rows.size(); ++i) {
    if (int64_t(rows[i].size()) != kNumTargets) throw DataError("bad target row width");
    for (size_t j = 0; j < size_t(kNumTargets); ++j) {
      out.data[i * size_t(kNumTargets) + j] = T(s.forward(j, rows[i][j]));
    }
  }
  return out;
}

// MSE over standardized targets, averaged over all subjects and targets.
template <typename T>
typename GraphT<T>::NodeId phenotype_loss(GraphT<T>& g, typename GraphT<T>::NodeId pred,
                                          const TensorT<T>& std_targets) {
  g.set_context("phenotype loss");
  return g.mse(pred, g.input(std_targets));
}

// Map one standardized prediction row back to physical units.
inline std::vector<double> destandardize_row(const Standardizer& s, const Tensor& pred,
                                             int64_t row) {
  std::vector<double> out(static_cast<size_t>(kNumTargets));
  for (size_t j = 0; j < size_t(kNumTargets); ++j) {
    out[j] = s.inverse(j, double(pred.row_ptr(row)[int64_t(j)]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Segmentation head: three stages of 2x upsampling fused with encoder skips,
// then a temporal expansion from patch-time resolution to full frames.

struct SegConfig {
  int64_t entry_dim = 64;
  int64_t stage_dims[3] = {48, 32, 24};
  int64_t frame_dim = 8;
  // 0-based encoder block index feeding each stage's skip connection; -1 is
  // the final normed output. Deepest feature feeds the first (coarsest)
  // stage; defaults correspond to depths {final, 4, 2} of a 4-layer encoder.
  int64_t skip_depths[3] = {-1, 3, 1};
  // Per-view-kind class availability bitmasks (bit c = class c annotated).
  uint8_t sa_classes = 0x3f;
  uint8_t la_classes = 0x3f;

  void validate(const ModelConfig& m) const {
    if ((int64_t(1) << 3) != m.patch_spatial) {
      throw ConfigError("segmentation head requires spatial patch 8 (three 2x stages)");
    }
    for (int64_t d : skip_depths) {
      if (d < -1 || d >= m.enc_layers) throw ConfigError("skip depth out of range");
    }
    if (entry_dim <= 0 || frame_dim <= 0) throw ConfigError("non-positive head dim");
    for (int64_t d : stage_dims)
      if (d <= 0) throw ConfigError("non-positive stage dim");
  }

  uint8_t mask_for(const std::string& view_tag) const {
    return view_is_sa(view_tag) ? sa_classes : la_classes;
  }
};

template <typename T>
struct SegStageT {
  LinearT<T> fuse;  // (c_prev + dim) -> c_s
  LinearT<T> conv;  // 9*c_s -> c_s, applied to the 3x3 neighborhood expansion
};

template <typename T>
struct SegHeadT {
  SegConfig cfg;
  LinearT<T> entry;  // dim -> entry_dim
  SegStageT<T> stages[3];
  LinearT<T> temporal;  // c3 -> p_t * frame_dim
  LinearT<T> cls;       // frame_dim -> classes

  static SegHeadT init(const SegConfig& cfg, const ModelConfig& m, Rng& rng) {
    cfg.validate(m);
    SegHeadT h;
    h.cfg = cfg;
    h.entry = LinearT<T>::init(m.dim, cfg.entry_dim, rng);
    int64_t prev = cfg.entry_dim;
    for (int i = 0; i < 3; ++i) {
      int64_t c = cfg.stage_dims[i];
      h.stages[i].fuse = LinearT<T>::init(prev + m.dim, c, rng);
      h.stages[i].conv = LinearT<T>::init(9 * c, c, rng);
      prev = c;
    }
    h.temporal = LinearT<T>::init(prev, m.patch_temporal * cfg.frame_dim, rng);
    h.cls = LinearT<T>::init(cfg.frame_dim, kNumClasses, rng);
    return h;
  }
};

template <typename T, class F>
void visit_params(SegHeadT<T>& h, F&& f) {
  detail::visit_linear(h.entry, "seg.entry", f);
  for (int i = 0; i < 3; ++i) {
    std::string p = "seg.s" + std::to_string(i + 1);
    detail::visit_linear(h.stages[i].fuse, p + ".fuse", f);
    detail::visit_linear(h.stages[i].conv, p + ".conv", f);
  }
  detail::visit_linear(h.temporal, "seg.temporal", f);
  detail::visit_linear(h.cls, "seg.cls", f);
}

namespace detail {

// Gather indices realizing nearest-neighbour upsampling of a row-major
// (groups, h, w) grid by an integer factor.
inline std::vector<int32_t> upsample_rows(int64_t groups, int64_t h, int64_t w,
                                          int64_t factor) {
  std::vector<int32_t> idx;
  idx.reserve(size_t(groups * h * factor * w * factor));
  for (int64_t g = 0; g < groups; ++g) {
    for (int64_t y = 0; y < h * factor; ++y) {
      for (int64_t x = 0; x < w * factor; ++x) {
        idx.push_back(int32_t((g * h + y / factor) * w + x / factor));
      }
    }
  }
  return idx;
}

}  // namespace detail

// Dense per-frame class logits for every plane in the batch. Output rows are
// ordered frame-fastest-last: row = f * R + r where r = ((plane * grid_t + tp)
// * image + y) * image + x and the absolute frame is tp * patch_temporal + f.
template <typename T>
typename GraphT<T>::NodeId seg_forward(GraphT<T>& g, SegHeadT<T>& h,
                                       const EncodedSeq<T>& enc, const TokenBatch& batch,
                                       const ModelConfig& m) {
  using NodeId = typename GraphT<T>::NodeId;
  int64_t base = m.grid_xy();
  int64_t groups = int64_t(batch.plane_views.size()) * m.grid_t();
  if (batch.n_tokens() != groups * base * base) {
    throw ConfigError("segmentation head expects the full canonical token batch");
  }

  g.set_context("seg entry");
  NodeId cur = linear(g, h.entry, enc.normed);
  int64_t res = base;
  for (int i = 0; i < 3; ++i) {
    g.set_context("seg stage " + std::to_string(i + 1));
    int64_t d = h.cfg.skip_depths[i];
    NodeId skip = d < 0 ? enc.normed : enc.after_block[size_t(d)];
    NodeId up = g.gather_rows(cur, detail::upsample_rows(groups, res, res, 2));
    res *= 2;
    NodeId skip_up =
        g.gather_rows(skip, detail::upsample_rows(groups, base, base, res / base));
    NodeId fused = linear(g, h.stages[i].fuse, g.concat(up, skip_up, 1));
    NodeId neigh = g.neighborhood3x3(fused, groups, res, res);
    cur = g.gelu(linear(g, h.stages[i].conv, neigh));
  }

  g.set_context("seg temporal expansion");
  NodeId feat = linear(g, h.temporal, cur);
  NodeId frames = g.cols_to_rows(feat, m.patch_temporal);
  g.set_context("seg classifier");
  return linear(g, h.cls, frames);
}

// Flattened training targets matching seg_forward's row order.
struct SegTargets {
  std::vector<int32_t> labels;   // true class per row
  std::vector<uint8_t> include;  // row participates in cross-entropy
  std::vector<uint8_t> avail;    // per-row class availability bitmask
  bool any = false;              // at least one row participates
};

// `label_planes` holds one {frames, image, image} u8 volume per plane, in the
// same plane order as the token batch.
inline SegTargets seg_targets(const std::vector<TensorT<uint8_t>>& label_planes,
                              const TokenBatch& batch, const ModelConfig& m,
                              const SegConfig& cfg) {
  if (label_planes.size() != batch.plane_views.size()) {
    throw DataError("label plane count does not match token batch");
  }
  int64_t planes = int64_t(label_planes.size());
  int64_t gt = m.grid_t(), img = m.image, pt = m.patch_temporal;
  int64_t rows = planes * gt * img * img;

  SegTargets t;
  t.labels.resize(size_t(pt * rows));
  t.include.resize(size_t(pt * rows));
  t.avail.resize(size_t(pt * rows));
  for (int64_t p = 0; p < planes; ++p) {
    const auto& vol = label_planes[size_t(p)];
    if (vol.shape != std::vector<int64_t>{m.frames, img, img}) {
      throw DataError("label plane " + std::to_string(p) + " has shape " +
                      shape_str(vol.shape) + ", expected {" + std::to_string(m.frames) +
                      "," + std::to_string(img) + "," + std::to_string(img) + "}");
    }
    uint8_t mask = cfg.mask_for(batch.plane_views[size_t(p)]);
    for (int64_t f = 0; f < pt; ++f) {
      for (int64_t tp = 0; tp < gt; ++tp) {
        int64_t frame = tp * pt + f;
        const uint8_t* src = vol.data.data() + size_t(frame * img * img);
        int64_t row0 = f * rows + ((p * gt + tp) * img) * img;
        for (int64_t i = 0; i < img * img; ++i) {
          uint8_t lab = src[i];
          if (lab >= kNumClasses) throw DataError("label out of range");
          size_t r = size_t(row0 + i);
          t.labels[r] = lab;
          t.avail[r] = mask;
          t.include[r] = uint8_t((mask >> lab) & 1);
          if (t.include[r]) t.any = true;
        }
      }
    }
  }
  return t;
}

// Mean of masked cross-entropy and soft Dice losses. A configuration whose
// availability masks exclude everything yields a constant zero loss.
template <typename T>
typename GraphT<T>::NodeId seg_loss(GraphT<T>& g, typename GraphT<T>::NodeId logits,
                                    const SegTargets& t) {
  if (!t.any) {
    std::fprintf(stderr,
                 "warning: segmentation availability masks exclude every pixel; "
                 "loss contributes zero\n");
    return g.input(TensorT<T>::scalar(T(0)));
  }
  g.set_context("seg loss");
  auto ce = g.cross_entropy(logits, t.labels, t.include);
  auto dice = g.soft_dice(g.softmax(logits), t.labels, t.avail);
  return g.scale(g.add(ce, dice), 0.5);
}

// Argmax decode; ties resolve to the lowest class id.
inline std::vector<uint8_t> seg_decode(const Tensor& logits) {
  int64_t n = logits.rows(), c = logits.cols();
  std::vector<uint8_t> out(static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r) {
    const float* row = logits.row_ptr(r);
    int best = 0;
    for (int j = 1; j < int(c); ++j)
      if (row[j] > row[best]) best = j;
    out[size_t(r)] = uint8_t(best);
  }
  return out;
}

// Reassemble decoded rows into per-plane {frames, image, image} volumes.
inline std::vector<TensorT<uint8_t>> seg_rows_to_planes(const std::vector<uint8_t>& rows,
                                                        int64_t planes,
                                                        const ModelConfig& m) {
  int64_t gt = m.grid_t(), img = m.image, pt = m.patch_temporal;
  int64_t R = planes * gt * img * img;
  if (int64_t(rows.size()) != pt * R) throw DataError("decoded row count mismatch");
  std::vector<TensorT<uint8_t>> out;
  for (int64_t p = 0; p < planes; ++p) {
    TensorT<uint8_t> vol = TensorT<uint8_t>::zeros({m.frames, img, img});
    for (int64_t f = 0; f < pt; ++f) {
      for (int64_t tp = 0; tp < gt; ++tp) {
        int64_t frame = tp * pt + f;
        int64_t row0 = f * R + ((p * gt + tp) * img) * img;
        uint8_t* dst = vol.data.data() + size_t(frame * img * img);
        for (int64_t i = 0; i < img * img; ++i) dst[size_t(i)] = rows[size_t(row0 + i)];
      }
    }
    out.push_back(std::move(vol));
  }
  return out;
}

}  // namespace wholeheart
