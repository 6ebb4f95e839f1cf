#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "wholeheart/common.hpp"
#include "wholeheart/rng.hpp"
#include "wholeheart/tensor.hpp"

namespace wholeheart {

// One acquired plane: a 2D+T intensity array tagged with its view. plane_id
// is derived from the tag against the full plane layout (SAi -> i, LAj ->
// sa_total + j), so dropping planes from a stack never renumbers the rest.
struct PlaneView {
  std::string view;  // "SA0".."SA5", "LA0".."LA2"
  int32_t plane_id = 0;
  Tensor vol;  // {T, H, W}
};

struct PlaneStack {
  std::vector<PlaneView> planes;
  int32_t sa_total = 0, la_total = 0;  // full layout, not the subset held
  float norm_min = 0.f, norm_max = 1.f;

  int64_t frames() const { return planes.at(0).vol.shape.at(0); }
  int64_t height() const { return planes.at(0).vol.shape.at(1); }
  int64_t width() const { return planes.at(0).vol.shape.at(2); }
};

inline bool view_is_sa(const std::string& tag) {
  if (tag.size() < 3 || (tag.compare(0, 2, "SA") != 0 && tag.compare(0, 2, "LA") != 0)) {
    throw ConfigError("bad view tag '" + tag + "'");
  }
  return tag[0] == 'S';
}

inline int32_t view_index(const std::string& tag) {
  (void)view_is_sa(tag);
  return int32_t(std::stoi(tag.substr(2)));
}

inline int32_t plane_id_of(const std::string& tag, int32_t sa_total) {
  return view_is_sa(tag) ? view_index(tag) : sa_total + view_index(tag);
}

// Patch-grid coordinates plus the plane of origin.
struct TokenIndex {
  int32_t plane = 0, x = 0, y = 0, t = 0;
  bool operator==(const TokenIndex&) const = default;
};

struct TokenBatch {
  Tensor values;  // {n_tokens, p_s*p_s*p_t}
  std::vector<TokenIndex> indices;
  // layout needed to invert the map
  int64_t p_s = 0, p_t = 0;
  int64_t height = 0, width = 0, frames = 0;
  std::vector<std::string> plane_views;  // tags in row order
  std::vector<int32_t> plane_ids;
  int32_t sa_total = 0, la_total = 0;
  float norm_min = 0.f, norm_max = 1.f;

  int64_t n_tokens() const { return values.rows(); }
  int64_t patch_dim() const { return values.cols(); }
  int64_t grid_x() const { return width / p_s; }
  int64_t grid_y() const { return height / p_s; }
  int64_t grid_t() const { return frames / p_t; }
  int64_t tokens_per_plane() const { return grid_x() * grid_y() * grid_t(); }
};

struct MaskPlan {
  std::vector<int32_t> kept, masked;  // sorted ascending, disjoint, exhaustive
  uint64_t seed = 0;
  double ratio = 0.0;
};

// Rescale all planes jointly to [0, 1] and record the mapping.
inline void normalize_stack(PlaneStack& stack) {
  if (stack.planes.empty()) throw DataError("empty plane stack");
  float lo = stack.planes[0].vol.data[0], hi = lo;
  for (const PlaneView& p : stack.planes) {
    for (float v : p.vol.data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  float range = hi - lo;
  float inv = range > 0.f ? 1.f / range : 0.f;
  for (PlaneView& p : stack.planes) {
    for (float& v : p.vol.data) v = (v - lo) * inv;
  }
  stack.norm_min = lo;
  stack.norm_max = hi;
}

// Token rows are ordered planes-in-input-order, then t-major, then (y, x)
// row-major; each row is a patch flattened t, then y, then x.
inline TokenBatch patchify(const PlaneStack& stack, int64_t p_s, int64_t p_t) {
  if (stack.planes.empty()) throw DataError("empty plane stack");
  if (p_s <= 0 || p_t <= 0) throw ConfigError("patch sizes must be positive");
  int64_t frames = stack.frames(), h = stack.height(), w = stack.width();
  for (const PlaneView& p : stack.planes) {
    if (p.vol.ndim() != 3) throw ConfigError("plane " + p.view + " is not 2D+T");
    if (p.vol.shape[0] != frames || p.vol.shape[1] != h || p.vol.shape[2] != w) {
      throw ConfigError("plane " + p.view + " shape " + shape_str(p.vol.shape) +
                        " differs from the stack's");
    }
  }
  if (h % p_s != 0) throw ConfigError("plane " + stack.planes[0].view + ": height " +
                                      std::to_string(h) + " not divisible by " +
                                      std::to_string(p_s));
  if (w % p_s != 0) throw ConfigError("plane " + stack.planes[0].view + ": width " +
                                      std::to_string(w) + " not divisible by " +
                                      std::to_string(p_s));
  if (frames % p_t != 0) throw ConfigError("plane " + stack.planes[0].view +
                                           ": frame count " + std::to_string(frames) +
                                           " not divisible by " + std::to_string(p_t));

  TokenBatch b;
  b.p_s = p_s;
  b.p_t = p_t;
  b.height = h;
  b.width = w;
  b.frames = frames;
  b.sa_total = stack.sa_total;
  b.la_total = stack.la_total;
  b.norm_min = stack.norm_min;
  b.norm_max = stack.norm_max;

  int64_t gx = w / p_s, gy = h / p_s, gt = frames / p_t;
  int64_t per_plane = gx * gy * gt;
  int64_t n = int64_t(stack.planes.size()) * per_plane;
  b.values = Tensor::zeros({n, p_s * p_s * p_t});
  b.indices.reserve(size_t(n));

  int64_t row = 0;
  for (const PlaneView& p : stack.planes) {
    b.plane_views.push_back(p.view);
    b.plane_ids.push_back(p.plane_id);
    for (int64_t tp = 0; tp < gt; ++tp) {
      for (int64_t py = 0; py < gy; ++py) {
        for (int64_t px = 0; px < gx; ++px) {
          float* out = b.values.row_ptr(row);
          for (int64_t tl = 0; tl < p_t; ++tl) {
            const float* frame = p.vol.data.data() + (tp * p_t + tl) * h * w;
            for (int64_t yl = 0; yl < p_s; ++yl) {
              const float* src = frame + (py * p_s + yl) * w + px * p_s;
              std::copy(src, src + p_s, out + (tl * p_s + yl) * p_s);
            }
          }
          b.indices.push_back({p.plane_id, int32_t(px), int32_t(py), int32_t(tp)});
          ++row;
        }
      }
    }
  }
  return b;
}

// Exact inverse of patchify. Requires the complete token set.
inline PlaneStack unpatchify(const TokenBatch& b) {
  int64_t gx = b.grid_x(), gy = b.grid_y(), gt = b.grid_t();
  int64_t per_plane = gx * gy * gt;
  int64_t n_expect = int64_t(b.plane_views.size()) * per_plane;

  std::vector<int32_t> id_to_pos;
  for (size_t i = 0; i < b.plane_ids.size(); ++i) {
    int32_t id = b.plane_ids[i];
    if (id >= int32_t(id_to_pos.size())) id_to_pos.resize(size_t(id) + 1, -1);
    id_to_pos[size_t(id)] = int32_t(i);
  }

  auto slot_of = [&](const TokenIndex& ix) -> int64_t {
    if (ix.plane < 0 || ix.plane >= int32_t(id_to_pos.size()) ||
        id_to_pos[size_t(ix.plane)] < 0) {
      throw DataError("token references plane id " + std::to_string(ix.plane) +
                      " absent from the batch");
    }
    if (ix.x < 0 || ix.x >= gx || ix.y < 0 || ix.y >= gy || ix.t < 0 || ix.t >= gt) {
      throw DataError("token index out of grid range");
    }
    int64_t pos = id_to_pos[size_t(ix.plane)];
    return ((pos * gt + ix.t) * gy + ix.y) * gx + ix.x;
  };

  if (int64_t(b.indices.size()) != b.values.rows()) {
    throw DataError("token batch carries " + std::to_string(b.indices.size()) +
                    " indices for " + std::to_string(b.values.rows()) + " rows");
  }
  std::vector<int32_t> row_at(size_t(n_expect), -1);
  for (size_t r = 0; r < b.indices.size(); ++r) {
    int64_t slot = slot_of(b.indices[r]);
    if (row_at[size_t(slot)] != -1) throw DataError("duplicate token index");
    row_at[size_t(slot)] = int32_t(r);
  }
  std::vector<std::string> gaps;
  for (int64_t s = 0; s < n_expect && int64_t(gaps.size()) < 5; ++s) {
    if (row_at[size_t(s)] >= 0) continue;
    int64_t pos = s / per_plane, rem = s % per_plane;
    int64_t t = rem / (gy * gx), y = rem / gx % gy, x = rem % gx;
    gaps.push_back(b.plane_views[size_t(pos)] + "(x=" + std::to_string(x) +
                   ",y=" + std::to_string(y) + ",t=" + std::to_string(t) + ")");
  }
  if (!gaps.empty()) {
    std::string msg = "incomplete token set, missing";
    for (const std::string& s : gaps) msg += " " + s;
    throw DataError(msg);
  }

  PlaneStack stack;
  stack.sa_total = b.sa_total;
  stack.la_total = b.la_total;
  stack.norm_min = b.norm_min;
  stack.norm_max = b.norm_max;
  for (size_t i = 0; i < b.plane_views.size(); ++i) {
    PlaneView p;
    p.view = b.plane_views[i];
    p.plane_id = b.plane_ids[i];
    p.vol = Tensor::zeros({b.frames, b.height, b.width});
    stack.planes.push_back(std::move(p));
  }
  for (int64_t s = 0; s < n_expect; ++s) {
    int64_t pos = s / per_plane, rem = s % per_plane;
    int64_t tp = rem / (gy * gx), py = rem / gx % gy, px = rem % gx;
    const float* in = b.values.row_ptr(row_at[size_t(s)]);
    Tensor& vol = stack.planes[size_t(pos)].vol;
    for (int64_t tl = 0; tl < b.p_t; ++tl) {
      float* frame = vol.data.data() + (tp * b.p_t + tl) * b.height * b.width;
      for (int64_t yl = 0; yl < b.p_s; ++yl) {
        float* dst = frame + (py * b.p_s + yl) * b.width + px * b.p_s;
        std::copy(in + (tl * b.p_s + yl) * b.p_s,
                  in + (tl * b.p_s + yl) * b.p_s + b.p_s, dst);
      }
    }
  }
  return stack;
}

// Fixed sinusoidal embedding, dim split equally over (plane, x, y, t).
inline void positional_embedding_into(const TokenIndex& ix, int64_t dim, float* out) {
  if (dim <= 0 || dim % 8 != 0) {
    throw ConfigError("positional embedding dim must be divisible by 8, got " +
                      std::to_string(dim));
  }
  int64_t group = dim / 4, pairs = dim / 8;
  int32_t vals[4] = {ix.plane, ix.x, ix.y, ix.t};
  for (int64_t gidx = 0; gidx < 4; ++gidx) {
    double v = vals[gidx];
    for (int64_t k = 0; k < pairs; ++k) {
      double omega = std::pow(10000.0, -double(k) / double(pairs));
      out[gidx * group + 2 * k] = float(std::sin(v * omega));
      out[gidx * group + 2 * k + 1] = float(std::cos(v * omega));
    }
  }
}

inline std::vector<float> positional_embedding(const TokenIndex& ix, int64_t dim) {
  std::vector<float> out(static_cast<size_t>(dim));
  positional_embedding_into(ix, dim, out.data());
  return out;
}

inline Tensor positional_embedding_rows(const std::vector<TokenIndex>& idx, int64_t dim) {
  Tensor out = Tensor::zeros({int64_t(idx.size()), dim});
  for (size_t r = 0; r < idx.size(); ++r) {
    positional_embedding_into(idx[r], dim, out.row_ptr(int64_t(r)));
  }
  return out;
}

// Uniform subset without replacement; |kept| = floor((1-q) * n).
inline MaskPlan sample_mask(int64_t n_tokens, double q, uint64_t seed) {
  if (n_tokens <= 0) throw ConfigError("sample_mask: no tokens");
  if (q < 0.0 || q >= 1.0) {
    throw ConfigError("mask ratio must lie in [0, 1), got " + std::to_string(q));
  }
  // epsilon guards against (1-q)*n landing just below an exact integer
  int64_t n_keep = int64_t(std::floor((1.0 - q) * double(n_tokens) + 1e-6));
  std::vector<int32_t> perm(static_cast<size_t>(n_tokens));
  for (int64_t i = 0; i < n_tokens; ++i) perm[size_t(i)] = int32_t(i);
  Rng rng(seed);
  rng.shuffle(perm);
  MaskPlan plan;
  plan.seed = seed;
  plan.ratio = q;
  plan.kept.assign(perm.begin(), perm.begin() + n_keep);
  plan.masked.assign(perm.begin() + n_keep, perm.end());
  std::sort(plan.kept.begin(), plan.kept.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  return plan;
}

// Kept rows in kept-index order, original token indices carried along.
inline TokenBatch apply_mask(const TokenBatch& b, const MaskPlan& plan) {
  if (int64_t(plan.kept.size() + plan.masked.size()) != b.n_tokens()) {
    throw ConfigError("mask plan covers " +
                      std::to_string(plan.kept.size() + plan.masked.size()) +
                      " tokens, batch has " + std::to_string(b.n_tokens()));
  }
  TokenBatch out = b;
  out.values = Tensor::zeros({int64_t(plan.kept.size()), b.patch_dim()});
  out.indices.clear();
  for (size_t r = 0; r < plan.kept.size(); ++r) {
    int32_t src = plan.kept[r];
    if (src < 0 || src >= b.n_tokens()) {
      throw ConfigError("mask plan index " + std::to_string(src) + " out of range");
    }
    const float* in = b.values.row_ptr(src);
    std::copy(in, in + b.patch_dim(), out.values.row_ptr(int64_t(r)));
    out.indices.push_back(b.indices[size_t(src)]);
  }
  return out;
}

}  // namespace wholeheart
