#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wholeheart/phantom.hpp"
#include "wholeheart/tokenizer.hpp"

namespace wholeheart {

enum class ViewFilter { kAll, kSa, kLa };

ViewFilter view_filter_from_string(const std::string& s);
const char* view_filter_name(ViewFilter f);
bool view_allowed(ViewFilter f, const std::string& tag);

struct DatasetManifest {
  std::string dir;
  int64_t n = 0;
  uint64_t seed = 0;
  int64_t size = 0;  // plane extent preset, 64 or 128
  std::vector<int64_t> pretrain, finetune, test;

  static DatasetManifest load(const std::string& dir);
  std::string subject_dir(int64_t subject) const;
  const std::vector<int64_t>& split(const std::string& name) const;
};

// Deterministic split sizes: roughly 1/7 test, 2/7 finetune, rest pretrain
// (224 subjects -> 128/64/32). Subjects are i.i.d. draws, so contiguous
// index ranges are an unbiased assignment.
void split_sizes(int64_t n, int64_t& n_pretrain, int64_t& n_finetune, int64_t& n_test);

// Generates n subjects under out_dir: per subject 9 intensity planes, 9 label
// planes, phenotypes and geometry, plus a dataset manifest. Byte-identical
// for equal (n, seed, size).
DatasetManifest build_dataset(int64_t n, uint64_t seed, const std::string& out_dir,
                              int64_t size);

// Planes in canonical order (SA0..SA5, LA0..LA2) restricted by the filter.
// Intensities are raw; callers normalize via normalize_stack.
PlaneStack load_plane_stack(const std::string& subject_dir, ViewFilter f);
std::vector<TensorT<uint8_t>> load_label_planes(const std::string& subject_dir,
                                                ViewFilter f);
PhenotypeVector load_phenotypes(const std::string& subject_dir);

}  // namespace wholeheart
