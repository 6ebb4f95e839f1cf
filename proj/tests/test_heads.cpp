#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <doctest.h>

#include "helpers.hpp"
#include "wholeheart/heads.hpp"

using namespace wholeheart;
using testing::check_gradients;
using testing::random_stack;
using testing::random_tensor;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.image = 16;
  c.frames = 4;
  c.patch_spatial = 8;
  c.patch_temporal = 2;
  c.sa_planes = 1;
  c.la_planes = 1;
  c.dim = 16;
  c.heads = 2;
  c.enc_layers = 2;
  c.dec_dim = 8;
  c.dec_heads = 2;
  c.dec_layers = 1;
  c.mlp_ratio = 2;
  c.mask_ratio = 0.5;
  return c;
}

SegConfig tiny_seg() {
  SegConfig s;
  s.entry_dim = 12;
  s.stage_dims[0] = 10;
  s.stage_dims[1] = 8;
  s.stage_dims[2] = 6;
  s.frame_dim = 4;
  s.skip_depths[0] = -1;
  s.skip_depths[1] = 1;
  s.skip_depths[2] = 0;
  return s;
}

TokenBatch tiny_batch(const ModelConfig& c, uint64_t seed) {
  Rng rng(seed);
  PlaneStack s = random_stack(c.sa_planes, c.la_planes, c.frames, c.image, rng);
  return patchify(s, c.patch_spatial, c.patch_temporal);
}

std::vector<TensorT<uint8_t>> random_labels(const ModelConfig& c, int64_t planes,
                                            uint64_t seed) {
  Rng rng(seed);
  std::vector<TensorT<uint8_t>> out;
  for (int64_t p = 0; p < planes; ++p) {
    TensorT<uint8_t> vol = TensorT<uint8_t>::zeros({c.frames, c.image, c.image});
    for (uint8_t& v : vol.data) v = uint8_t(rng.below(uint64_t(kNumClasses)));
    out.push_back(std::move(vol));
  }
  return out;
}

std::vector<std::vector<double>> sample_targets(int64_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> rows;
  for (int64_t i = 0; i < n; ++i) {
    std::vector<double> r(static_cast<size_t>(kNumTargets));
    for (double& v : r) v = rng.uniform(10.0, 150.0);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace

TEST_CASE("phenotype head with zero weights predicts the training means") {
  auto rows = sample_targets(8, 1);
  Standardizer z = Standardizer::fit(rows);

  Rng rng(2);
  auto h = PhenHeadT<float>::init(16, 8, rng);
  visit_params(h, [](const std::string&, Tensor& t) {
    std::fill(t.data.begin(), t.data.end(), 0.f);
  });

  GraphT<float> g;
  auto pred = phen_forward(g, h, g.input(random_tensor<float>({1, 16}, rng)));
  std::vector<double> back = destandardize_row(z, g.value(pred), 0);
  for (size_t j = 0; j < size_t(kNumTargets); ++j) {
    CHECK(back[j] == doctest::Approx(z.mean[j]).epsilon(1e-9));
  }
}

TEST_CASE("phenotype head emits five targets for any pooled width and row count") {
  Rng rng(3);
  for (int64_t dim : {16, 32}) {
    auto h = PhenHeadT<float>::init(dim, 24, rng);
    for (int64_t n : {1, 3}) {
      GraphT<float> g;
      auto out = phen_forward(g, h, g.input(random_tensor<float>({n, dim}, rng)));
      CHECK(g.value(out).shape == std::vector<int64_t>{n, kNumTargets});
    }
  }
}

TEST_CASE("standardizer rejects zero variance and round-trips") {
  auto rows = sample_targets(6, 4);
  for (auto& r : rows) r[3] = 42.0;  // constant target
  CHECK_THROWS_AS(Standardizer::fit(rows), DataError);
  CHECK_THROWS_AS(Standardizer::fit({}), DataError);

  rows = sample_targets(6, 5);
  Standardizer z = Standardizer::fit(rows);
  for (size_t j = 0; j < size_t(kNumTargets); ++j) {
    double v = rows[2][j];
    CHECK(z.inverse(j, z.forward(j, v)) == doctest::Approx(v).epsilon(1e-12));
    // standardized sample has mean 0 and unit variance by construction
    double m = 0, s = 0;
    for (const auto& r : rows) m += z.forward(j, r[j]);
    m /= double(rows.size());
    for (const auto& r : rows) s += z.forward(j, r[j]) * z.forward(j, r[j]);
    CHECK(m == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(s / double(rows.size()) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("phenotype loss is the mean squared standardized error") {
  auto rows = sample_targets(1, 6);
  Standardizer z = Standardizer::fit(sample_targets(12, 7));
  Tensor t = standardize_targets<float>(z, rows);

  GraphT<float> g;
  CHECK(g.value(phenotype_loss(g, g.input(t), t)).data[0] == 0.f);

  // one target off by one standard deviation -> 1/5
  Tensor off = t;
  off.at(0, 2) += 1.f;
  double v = g.value(phenotype_loss(g, g.input(off), t)).data[0];
  CHECK(v == doctest::Approx(0.2).epsilon(1e-6));
}

TEST_CASE("phenotype gradients match finite differences through the pooled latent") {
  ModelConfig cfg = tiny_cfg();
  auto m = MaeModelT<double>::init(cfg, 8);
  Rng rng(9);
  auto h = PhenHeadT<double>::init(cfg.dim, 12, rng);
  TokenBatch b = tiny_batch(cfg, 10);
  Standardizer z = Standardizer::fit(sample_targets(12, 11));
  TensorT<double> t = standardize_targets<double>(z, sample_targets(1, 12));

  std::vector<std::pair<std::string, TensorT<double>*>> params;
  visit_params(h, [&](const std::string& n, TensorT<double>& p) {
    params.emplace_back(n, &p);
  });

  auto build = [&](GraphT<double>& g) {
    auto enc = encode_full(g, m, b);
    auto pooled = pooled_representation(g, enc.normed);
    return phenotype_loss(g, phen_forward(g, h, pooled), t);
  };
  auto res = check_gradients(params, build, 1e-3, 1);
  INFO(res.worst);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("segmentation head emits the documented row layout and decodes per plane") {
  ModelConfig cfg = tiny_cfg();
  auto m = MaeModelT<float>::init(cfg, 13);
  Rng rng(14);
  auto h = SegHeadT<float>::init(tiny_seg(), cfg, rng);
  TokenBatch b = tiny_batch(cfg, 15);

  GraphT<float> g;
  auto enc = encode_full(g, m, b);
  auto logits = seg_forward(g, h, enc, b, cfg);

  int64_t R = cfg.total_planes() * cfg.grid_t() * cfg.image * cfg.image;
  CHECK(g.value(logits).shape == std::vector<int64_t>{cfg.patch_temporal * R, kNumClasses});

  std::vector<uint8_t> cls = seg_decode(g.value(logits));
  auto planes = seg_rows_to_planes(cls, cfg.total_planes(), cfg);
  REQUIRE(planes.size() == 2);
  for (const auto& vol : planes) {
    CHECK(vol.shape == std::vector<int64_t>{cfg.frames, cfg.image, cfg.image});
    CHECK(*std::max_element(vol.data.begin(), vol.data.end()) < uint8_t(kNumClasses));
  }

  MaskPlan plan = sample_mask(b.n_tokens(), 0.5, 1);
  TokenBatch partial = apply_mask(b, plan);
  GraphT<float> g2;
  auto enc2 = encode_full(g2, m, partial);
  CHECK_THROWS_AS(seg_forward(g2, h, enc2, partial, cfg), ConfigError);
}

TEST_CASE("segmentation labels survive a row-layout round trip") {
  ModelConfig cfg = tiny_cfg();
  TokenBatch b = tiny_batch(cfg, 16);
  auto labels = random_labels(cfg, 2, 17);

  SegTargets t = seg_targets(labels, b, cfg, tiny_seg());
  REQUIRE(t.any);
  std::vector<uint8_t> rows(t.labels.begin(), t.labels.end());
  auto back = seg_rows_to_planes(rows, 2, cfg);
  REQUIRE(back.size() == labels.size());
  for (size_t p = 0; p < labels.size(); ++p) {
    CHECK(back[p].shape == labels[p].shape);
    CHECK(back[p].data == labels[p].data);
  }
}

TEST_CASE("segmentation head confines each output pixel to its plane and time slab") {
  // Feed the head an input it can differentiate against directly: every group
  // of base-grid tokens belongs to one (plane, slab) pair, and nothing in the
  // head mixes groups.
  ModelConfig cfg = tiny_cfg();
  Rng rng(18);
  auto h = SegHeadT<float>::init(tiny_seg(), cfg, rng);
  TokenBatch b = tiny_batch(cfg, 19);

  Tensor x = random_tensor<float>({b.n_tokens(), cfg.dim}, rng);
  GraphT<float> g;
  EncodedSeq<float> fake;
  fake.normed = g.param(&x);
  fake.after_block = {fake.normed, fake.normed};
  auto logits = seg_forward(g, h, fake, b, cfg);

  // output row for plane 1, slab 0, y 3, x 5, in-slab frame 1
  int64_t R = cfg.total_planes() * cfg.grid_t() * cfg.image * cfg.image;
  int64_t row = 1 * R + ((int64_t(1) * cfg.grid_t() + 0) * cfg.image + 3) * cfg.image + 5;
  auto probe = g.mse(g.slice(logits, 0, row, 1),
                     g.input(Tensor::zeros({1, kNumClasses})));
  g.backward(probe, /*release_memory=*/false);

  const Tensor* gx = g.grad_of(&x);
  REQUIRE(gx != nullptr);
  // group of (plane 1, slab 0) = 2, i.e. token rows [8, 12)
  int64_t per_group = cfg.grid_xy() * cfg.grid_xy();
  double inside = 0, outside = 0;
  for (int64_t r = 0; r < b.n_tokens(); ++r) {
    for (int64_t j = 0; j < cfg.dim; ++j) {
      double v = std::abs(double(gx->at(r, j)));
      if (r / per_group == 2) {
        inside += v;
      } else {
        outside += v;
      }
    }
  }
  CHECK(inside > 0.0);
  CHECK(outside == 0.0);
}

TEST_CASE("segmentation loss components on crafted logits") {
  const int64_t n = 24;
  Rng rng(20);
  SegTargets t;
  t.labels.resize(size_t(n));
  t.include.assign(size_t(n), 1);
  t.avail.assign(size_t(n), 0x3f);
  t.any = true;
  for (auto& l : t.labels) l = int32_t(rng.below(uint64_t(kNumClasses)));

  SUBCASE("uniform logits: cross-entropy ln 6 plus the uniform dice penalty") {
    GraphT<float> g;
    auto logits = g.input(Tensor::zeros({n, kNumClasses}));
    double v = g.value(seg_loss(g, logits, t)).data[0];

    double dice = 0;
    for (int64_t c = 0; c < kNumClasses; ++c) {
      double nc = double(std::count(t.labels.begin(), t.labels.end(), int32_t(c)));
      double a = nc / 6.0, bsum = double(n) / 6.0 + nc;
      dice += 1.0 - (2.0 * a + 1.0) / (bsum + 1.0);
    }
    dice /= double(kNumClasses);
    CHECK(v == doctest::Approx(0.5 * (std::log(6.0) + dice)).epsilon(1e-5));
  }

  SUBCASE("near-one-hot logits give a near-zero loss") {
    Tensor sharp = Tensor::zeros({n, kNumClasses});
    for (int64_t r = 0; r < n; ++r) sharp.at(r, t.labels[size_t(r)]) = 20.f;
    GraphT<float> g;
    double v = g.value(seg_loss(g, g.input(sharp), t)).data[0];
    CHECK(v >= 0.0);
    CHECK(v < 0.01);
  }

  SUBCASE("empty availability short-circuits to a constant zero") {
    SegTargets none = t;
    std::fill(none.include.begin(), none.include.end(), uint8_t(0));
    std::fill(none.avail.begin(), none.avail.end(), uint8_t(0));
    none.any = false;
    GraphT<float> g;
    auto logits = g.input(Tensor::zeros({n, kNumClasses}));
    CHECK(g.value(seg_loss(g, logits, none)).data[0] == 0.f);
  }
}

TEST_CASE("availability masks follow the view kind of each plane") {
  ModelConfig cfg = tiny_cfg();
  TokenBatch b = tiny_batch(cfg, 21);
  auto labels = random_labels(cfg, 2, 22);

  SegConfig sc = tiny_seg();
  sc.sa_classes = 0x0f;  // bg, lvbp, lvmyo, rvbp
  sc.la_classes = 0x31;  // bg, labp, rabp
  SegTargets t = seg_targets(labels, b, cfg, sc);

  int64_t R = cfg.total_planes() * cfg.grid_t() * cfg.image * cfg.image;
  int64_t per_plane_slab = cfg.image * cfg.image;
  for (int64_t row = 0; row < int64_t(t.labels.size()); row += 97) {
    int64_t r = row % R;
    int64_t plane = r / (cfg.grid_t() * per_plane_slab);
    uint8_t want = plane == 0 ? sc.sa_classes : sc.la_classes;
    CHECK(t.avail[size_t(row)] == want);
    CHECK(t.include[size_t(row)] == uint8_t((want >> t.labels[size_t(row)]) & 1));
  }

  SUBCASE("label planes must match the batch") {
    auto one = random_labels(cfg, 1, 23);
    CHECK_THROWS_AS(seg_targets(one, b, cfg, sc), DataError);
    auto bad = random_labels(cfg, 2, 24);
    bad[1] = TensorT<uint8_t>::zeros({cfg.frames, cfg.image, 8});
    CHECK_THROWS_AS(seg_targets(bad, b, cfg, sc), DataError);
    auto range = random_labels(cfg, 2, 25);
    range[0].data[100] = 6;
    CHECK_THROWS_AS(seg_targets(range, b, cfg, sc), DataError);
  }
}

TEST_CASE("argmax decode breaks ties toward the lower class id") {
  Tensor logits = Tensor::zeros({3, kNumClasses});
  // row 0: all equal -> 0; row 1: tie between 1 and 2 -> 1; row 2: plain max
  logits.at(1, 1) = 7.f;
  logits.at(1, 2) = 7.f;
  logits.at(2, 5) = 1.f;
  std::vector<uint8_t> cls = seg_decode(logits);
  CHECK(cls == std::vector<uint8_t>{0, 1, 5});
}

TEST_CASE("segmentation gradients match finite differences on a small model") {
  ModelConfig cfg = tiny_cfg();
  auto m = MaeModelT<double>::init(cfg, 26);
  Rng rng(27);
  auto h = SegHeadT<double>::init(tiny_seg(), cfg, rng);
  TokenBatch b = tiny_batch(cfg, 28);
  SegTargets t = seg_targets(random_labels(cfg, 2, 29), b, cfg, h.cfg);

  std::vector<std::pair<std::string, TensorT<double>*>> params;
  visit_params(h, [&](const std::string& n, TensorT<double>& p) {
    params.emplace_back(n, &p);
  });

  auto build = [&](GraphT<double>& g) {
    auto enc = encode_full(g, m, b);
    return seg_loss(g, seg_forward(g, h, enc, b, cfg), t);
  };
  auto res = check_gradients(params, build, 1e-3, 7);
  INFO(res.worst);
  CHECK(res.checked > 350);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("segmentation config validation") {
  ModelConfig cfg = tiny_cfg();
  SegConfig sc = tiny_seg();
  CHECK_NOTHROW(sc.validate(cfg));

  SegConfig bad = sc;
  bad.skip_depths[1] = 2;  // only two encoder blocks exist
  CHECK_THROWS_AS(bad.validate(cfg), ConfigError);

  ModelConfig coarse = cfg;
  coarse.image = 32;
  coarse.patch_spatial = 16;
  CHECK_THROWS_AS(sc.validate(coarse), ConfigError);

  CHECK(sc.mask_for("SA3") == sc.sa_classes);
  CHECK(sc.mask_for("LA0") == sc.la_classes);
}

TEST_CASE("head parameter names are stable") {
  Rng rng(30);
  auto ph = PhenHeadT<float>::init(16, 8, rng);
  std::vector<std::string> names;
  visit_params(ph, [&](const std::string& n, Tensor&) { names.push_back(n); });
  CHECK(names == std::vector<std::string>{"phen.fc1.w", "phen.fc1.b", "phen.fc2.w",
                                          "phen.fc2.b"});

  ModelConfig cfg = tiny_cfg();
  auto sh = SegHeadT<float>::init(tiny_seg(), cfg, rng);
  names.clear();
  visit_params(sh, [&](const std::string& n, Tensor&) { names.push_back(n); });
  REQUIRE(names.size() == 18);
  CHECK(names.front() == "seg.entry.w");
  CHECK(names[2] == "seg.s1.fuse.w");
  CHECK(names[names.size() - 2] == "seg.cls.w");
}
