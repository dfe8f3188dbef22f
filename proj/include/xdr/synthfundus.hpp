#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "xdr/config.hpp"

namespace xdr {

// Concept order is fixed project-wide: MA, H, HE, SE, NV, IRMA.
enum class LesionKind : int {
  microaneurysm = 0,
  hemorrhage = 1,
  hard_exudate = 2,
  soft_exudate = 3,
  neovascularization = 4,
  irma = 5,
};
constexpr int kNumConcepts = 6;
constexpr int kImageSide = 64;

const char* lesion_kind_name(LesionKind k);
LesionKind lesion_kind_from_name(const std::string& name);

struct LesionSpec {
  LesionKind kind;
  int row = 0;
  int col = 0;
  double radius = 1.0;     // for neovascularization: filament length in pixels
  double intensity = 1.0;  // brightness scale in [0,1]
};

// RGB interleaved, values in [0,1].
struct Image {
  int h = kImageSide;
  int w = kImageSide;
  std::vector<double> px;

  Image() : px(static_cast<size_t>(kImageSide) * kImageSide * 3, 0.0) {}
  double& at(int r, int c, int ch) { return px[(static_cast<size_t>(r) * w + c) * 3 + ch]; }
  double at(int r, int c, int ch) const { return px[(static_cast<size_t>(r) * w + c) * 3 + ch]; }
  double gray(int r, int c) const { return (at(r, c, 0) + at(r, c, 1) + at(r, c, 2)) / 3.0; }
};

struct GradingThresholds {
  int hemorrhage_severe = 20;   // hemorrhage count reaching this is grade >= 3
  int soft_exudate_severe = 4;  // soft-exudate count reaching this is grade >= 3
};

int grade_from_lesions(const std::vector<LesionSpec>& lesions,
                       const GradingThresholds& th = {});
std::array<bool, kNumConcepts> concepts_from_lesions(const std::vector<LesionSpec>& lesions);

// Deterministic render: seed drives vessels and pixel noise; lesion pixels are
// derived from each lesion spec alone, so the same lesion keeps its contrast
// signature across seeds.
Image render_image(const std::vector<LesionSpec>& lesions, uint64_t seed);
// Footprint flags (h*w) of the pixels the lesion painter would touch.
std::vector<uint8_t> lesion_mask(const std::vector<LesionSpec>& lesions);

struct FundusSample {
  std::string id;
  Image image;
  int grade = 0;
  std::array<bool, kNumConcepts> concepts{};
  std::vector<LesionSpec> lesions;
  uint64_t seed = 0;
};

// Rejection-samples a lesion set whose grade matches, renders it. Pure
// function of (grade, record_seed, thresholds).
FundusSample make_sample(int grade, uint64_t record_seed, const GradingThresholds& th = {});

struct ManifestRecord {
  std::string id;
  std::string image_path;  // relative to the dataset dir
  int grade = 0;
  std::array<bool, kNumConcepts> concepts{};
  std::vector<LesionSpec> lesions;
  std::string split = "train";
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  uint64_t seed = 0;
  std::array<int, 5> counts_per_grade{};
  GradingThresholds thresholds;
};

struct DatasetConfig {
  std::array<int, 5> counts_per_grade{10, 10, 10, 10, 10};
  GradingThresholds thresholds;
  double ratio_train = 0.8;
  double ratio_val = 0.1;
  double ratio_test = 0.1;

  static DatasetConfig from_kv(const KVConfig& kv);
};

// Stratified-by-grade split tags, deterministic under seed. Splits with zero
// ratio receive nothing; every nonempty stratum must cover the nonzero splits.
void split_manifest(DatasetManifest& manifest, double ratio_train, double ratio_val,
                    double ratio_test, uint64_t seed);

// Renders every requested sample into out_dir/images/*.ppm, writes
// out_dir/manifest.jsonl and out_dir/meta.json, and returns the manifest.
DatasetManifest generate_dataset(const DatasetConfig& cfg, uint64_t seed,
                                 const std::string& out_dir);

DatasetManifest load_manifest(const std::string& dataset_dir);

void save_ppm(const std::string& path, const Image& img);
Image load_ppm(const std::string& path);

// Loads the PPM behind a record, as the training pipeline sees it.
Image load_record_image(const std::string& dataset_dir, const ManifestRecord& rec);

}  // namespace xdr
