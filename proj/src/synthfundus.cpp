#include "xdr/synthfundus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

#include "xdr/hash.hpp"
#include "xdr/rng.hpp"

namespace xdr {

namespace {

using json = nlohmann::ordered_json;

constexpr double kDiscRow = 32.0, kDiscCol = 32.0, kDiscRadius = 30.0;
constexpr double kOpticRow = 32.0, kOpticCol = 50.0, kOpticRadius = 5.5;
// Lesions keep clear of the optic disc so its highlight never contaminates
// lesion-contrast statistics.
constexpr double kOpticClearance = 8.0;
constexpr double kNoiseSigma = 0.015;

struct Rgb {
  double r, g, b;
};
constexpr Rgb kBaseColor{0.72, 0.38, 0.16};
constexpr Rgb kOpticColor{0.95, 0.85, 0.55};
// Vessels sit close to the background in luminance (hue contrast only), so
// dark-lesion statistics aren't drowned by vessel-length variation.
constexpr Rgb kVesselColor{0.50, 0.22, 0.10};
constexpr Rgb kOutside{0.02, 0.02, 0.02};

// Each kind owns a distinct hue direction so pooled color statistics stay
// separable: crimson MA, near-black H, yellow HE, cream SE, pink NV, purple IRMA.
Rgb kind_color(LesionKind k) {
  switch (k) {
    case LesionKind::microaneurysm: return {0.55, 0.02, 0.12};
    case LesionKind::hemorrhage: return {0.12, 0.02, 0.03};
    case LesionKind::hard_exudate: return {1.00, 0.95, 0.10};
    case LesionKind::soft_exudate: return {0.92, 0.90, 0.80};
    case LesionKind::neovascularization: return {1.00, 0.40, 0.55};
    case LesionKind::irma: return {0.40, 0.08, 0.40};
  }
  throw std::runtime_error("unknown lesion kind");
}

void kind_radius_bounds(LesionKind k, double& lo, double& hi) {
  switch (k) {
    case LesionKind::microaneurysm: lo = 1.5; hi = 2.5; return;
    case LesionKind::hemorrhage: lo = 3.0; hi = 5.0; return;
    case LesionKind::hard_exudate: lo = 2.5; hi = 4.0; return;
    case LesionKind::soft_exudate: lo = 4.0; hi = 6.0; return;
    case LesionKind::neovascularization: lo = 8.0; hi = 14.0; return;  // filament length
    case LesionKind::irma: lo = 4.0; hi = 7.0; return;
  }
  throw std::runtime_error("unknown lesion kind");
}

double dist(double r0, double c0, double r1, double c1) {
  return std::hypot(r0 - r1, c0 - c1);
}

void validate_lesion(const LesionSpec& l) {
  double lo, hi;
  kind_radius_bounds(l.kind, lo, hi);
  if (l.radius < lo || l.radius > hi)
    throw std::runtime_error(std::string("lesion radius out of bounds for ") +
                             lesion_kind_name(l.kind));
  if (l.intensity < 0.0 || l.intensity > 1.0)
    throw std::runtime_error("lesion intensity outside [0, 1]");
  if (dist(l.row, l.col, kDiscRow, kDiscCol) + l.radius > kDiscRadius)
    throw std::runtime_error("lesion outside the fundus disc");
}

// Deterministic per-lesion stream: the painted footprint depends only on the
// spec, never on the image seed.
uint64_t lesion_stream_seed(const LesionSpec& l) {
  uint64_t h = fnv1a64("lesion");
  int fields[4] = {static_cast<int>(l.kind), l.row, l.col,
                   static_cast<int>(std::lround(l.radius * 1000.0))};
  h = fnv1a64(fields, sizeof(fields), h);
  int inten = static_cast<int>(std::lround(l.intensity * 1000.0));
  h = fnv1a64(&inten, sizeof(inten), h);
  return h;
}

struct Painter {
  Image* img = nullptr;
  std::vector<uint8_t>* mask = nullptr;

  void pix(int r, int c, Rgb col, double alpha) {
    if (r < 0 || r >= kImageSide || c < 0 || c >= kImageSide) return;
    if (img) {
      img->at(r, c, 0) = (1.0 - alpha) * img->at(r, c, 0) + alpha * col.r;
      img->at(r, c, 1) = (1.0 - alpha) * img->at(r, c, 1) + alpha * col.g;
      img->at(r, c, 2) = (1.0 - alpha) * img->at(r, c, 2) + alpha * col.b;
    }
    if (mask) (*mask)[static_cast<size_t>(r) * kImageSide + c] = 1;
  }
};

void paint_lesion(const LesionSpec& l, Painter& p) {
  Rng rng(lesion_stream_seed(l));
  Rgb base = kind_color(l.kind);
  Rgb col{base.r * l.intensity, base.g * l.intensity, base.b * l.intensity};
  switch (l.kind) {
    case LesionKind::microaneurysm: {
      int rr = static_cast<int>(std::ceil(l.radius));
      for (int dr = -rr; dr <= rr; ++dr)
        for (int dc = -rr; dc <= rr; ++dc)
          if (std::hypot(dr, dc) <= l.radius + 0.2) p.pix(l.row + dr, l.col + dc, col, 1.0);
      break;
    }
    case LesionKind::hemorrhage: {
      // irregular blob: radius modulated by 8 angular control points.
      double wob[8];
      for (double& w : wob) w = rng.uniform(0.72, 1.0);
      int rr = static_cast<int>(std::ceil(l.radius)) + 1;
      for (int dr = -rr; dr <= rr; ++dr)
        for (int dc = -rr; dc <= rr; ++dc) {
          double d = std::hypot(dr, dc);
          double ang = std::atan2(dr, dc) + 3.14159265358979323846;
          double t = ang / (2.0 * 3.14159265358979323846) * 8.0;
          int i0 = static_cast<int>(t) % 8;
          int i1 = (i0 + 1) % 8;
          double f = t - std::floor(t);
          double rad = l.radius * ((1.0 - f) * wob[i0] + f * wob[i1]);
          if (d <= rad) p.pix(l.row + dr, l.col + dc, col, 1.0);
        }
      break;
    }
    case LesionKind::hard_exudate: {
      int rr = static_cast<int>(std::ceil(l.radius));
      for (int dr = -rr; dr <= rr; ++dr)
        for (int dc = -rr; dc <= rr; ++dc)
          if (std::hypot(dr, dc) <= l.radius) p.pix(l.row + dr, l.col + dc, col, 1.0);
      break;
    }
    case LesionKind::soft_exudate: {
      // fuzzy patch: dense core, fading rim
      int rr = static_cast<int>(std::ceil(l.radius));
      for (int dr = -rr; dr <= rr; ++dr)
        for (int dc = -rr; dc <= rr; ++dc) {
          double d = std::hypot(dr, dc);
          if (d > l.radius) continue;
          double alpha = d <= 0.6 * l.radius
                             ? 0.85
                             : 0.85 - 0.55 * (d - 0.6 * l.radius) / (0.4 * l.radius);
          p.pix(l.row + dr, l.col + dc, col, alpha);
        }
      break;
    }
    case LesionKind::neovascularization: {
      // branching bright filaments radiating from the center, 2 px wide
      int branches = 3 + static_cast<int>(rng.next_u64() % 3);
      for (int b = 0; b < branches; ++b) {
        double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        double pr = l.row, pc = l.col;
        int steps = static_cast<int>(l.radius);
        for (int s = 0; s < steps; ++s) {
          int ir = static_cast<int>(std::lround(pr)), ic = static_cast<int>(std::lround(pc));
          for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc)
              if (std::hypot(dr, dc) <= 1.2) p.pix(ir + dr, ic + dc, col, 1.0);
          theta += rng.uniform(-0.45, 0.45);
          pr += std::sin(theta);
          pc += std::cos(theta);
          if (dist(pr, pc, l.row, l.col) > l.radius) break;
          if (dist(pr, pc, kDiscRow, kDiscCol) > kDiscRadius - 1.0) break;
        }
      }
      break;
    }
    case LesionKind::irma: {
      // short thick squiggles inside the footprint
      int segs = 3 + static_cast<int>(rng.next_u64() % 2);
      for (int s = 0; s < segs; ++s) {
        double pr = l.row + rng.uniform(-l.radius * 0.5, l.radius * 0.5);
        double pc = l.col + rng.uniform(-l.radius * 0.5, l.radius * 0.5);
        double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        int steps = 4 + static_cast<int>(rng.next_u64() % 4);
        for (int t = 0; t < steps; ++t) {
          int ir = static_cast<int>(std::lround(pr)), ic = static_cast<int>(std::lround(pc));
          for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc)
              if (std::hypot(dr, dc) <= 1.2) p.pix(ir + dr, ic + dc, col, 1.0);
          theta += rng.uniform(-0.8, 0.8);
          pr += std::sin(theta);
          pc += std::cos(theta);
          if (dist(pr, pc, l.row, l.col) > l.radius) break;
        }
      }
      break;
    }
  }
}

}  // namespace

const char* lesion_kind_name(LesionKind k) {
  switch (k) {
    case LesionKind::microaneurysm: return "microaneurysm";
    case LesionKind::hemorrhage: return "hemorrhage";
    case LesionKind::hard_exudate: return "hard_exudate";
    case LesionKind::soft_exudate: return "soft_exudate";
    case LesionKind::neovascularization: return "neovascularization";
    case LesionKind::irma: return "irma";
  }
  throw std::runtime_error("unknown lesion kind");
}

LesionKind lesion_kind_from_name(const std::string& name) {
  for (int k = 0; k < kNumConcepts; ++k)
    if (name == lesion_kind_name(static_cast<LesionKind>(k))) return static_cast<LesionKind>(k);
  throw std::runtime_error("unknown lesion kind name: " + name);
}

int grade_from_lesions(const std::vector<LesionSpec>& lesions, const GradingThresholds& th) {
  int count[kNumConcepts] = {0};
  for (const auto& l : lesions) count[static_cast<int>(l.kind)]++;
  int ma = count[0], h = count[1], he = count[2], se = count[3], nv = count[4], irma = count[5];
  if (nv > 0) return 4;
  if (h >= th.hemorrhage_severe || irma > 0 || se >= th.soft_exudate_severe) return 3;
  if (h > 0 || he > 0 || se > 0) return 2;
  if (ma > 0) return 1;
  return 0;
}

std::array<bool, kNumConcepts> concepts_from_lesions(const std::vector<LesionSpec>& lesions) {
  std::array<bool, kNumConcepts> c{};
  for (const auto& l : lesions) c[static_cast<int>(l.kind)] = true;
  return c;
}

Image render_image(const std::vector<LesionSpec>& lesions, uint64_t seed) {
  for (const auto& l : lesions) validate_lesion(l);
  Image img;
  // base disc with radial falloff, optic highlight with a soft edge
  for (int r = 0; r < kImageSide; ++r) {
    for (int c = 0; c < kImageSide; ++c) {
      double d = dist(r, c, kDiscRow, kDiscCol);
      if (d > kDiscRadius) {
        img.at(r, c, 0) = kOutside.r;
        img.at(r, c, 1) = kOutside.g;
        img.at(r, c, 2) = kOutside.b;
        continue;
      }
      double v = 1.0 - 0.30 * (d / kDiscRadius) * (d / kDiscRadius);
      Rgb px{kBaseColor.r * v, kBaseColor.g * v, kBaseColor.b * v};
      double od = dist(r, c, kOpticRow, kOpticCol);
      if (od < kOpticRadius) {
        double a = od < kOpticRadius - 1.5 ? 1.0 : (kOpticRadius - od) / 1.5;
        px.r = (1.0 - a) * px.r + a * kOpticColor.r;
        px.g = (1.0 - a) * px.g + a * kOpticColor.g;
        px.b = (1.0 - a) * px.b + a * kOpticColor.b;
      }
      img.at(r, c, 0) = px.r;
      img.at(r, c, 1) = px.g;
      img.at(r, c, 2) = px.b;
    }
  }

  Rng rng(mix_seed(seed, fnv1a64("render")));
  Painter p{&img, nullptr};

  // vessel arcs radiating from the optic disc; fixed count and fixed length
  // keep the image-level color budget stable across seeds (vessels are
  // nuisance structure, not a label signal)
  const int nvessels = 6, vessel_steps = 34;
  for (int i = 0; i < nvessels; ++i) {
    double theta = std::atan2(kDiscRow - kOpticRow, kDiscCol - kOpticCol) + rng.uniform(-1.4, 1.4);
    double kappa = rng.uniform(-0.06, 0.06);
    double pr = kOpticRow, pc = kOpticCol;
    for (int s = 0; s < vessel_steps; ++s) {
      pr += std::sin(theta);
      pc += std::cos(theta);
      theta += kappa + rng.uniform(-0.05, 0.05);
      if (dist(pr, pc, kDiscRow, kDiscCol) > kDiscRadius - 2.0) {
        // steer back toward the disc center so every vessel paints its full length
        theta = std::atan2(kDiscRow - pr, kDiscCol - pc) + rng.uniform(-0.3, 0.3);
        pr += std::sin(theta);
        pc += std::cos(theta);
      }
      p.pix(static_cast<int>(std::lround(pr)), static_cast<int>(std::lround(pc)), kVesselColor, 1.0);
    }
  }

  for (const auto& l : lesions) paint_lesion(l, p);

  // seeded sensor noise inside the disc only
  for (int r = 0; r < kImageSide; ++r)
    for (int c = 0; c < kImageSide; ++c) {
      if (dist(r, c, kDiscRow, kDiscCol) > kDiscRadius) continue;
      for (int ch = 0; ch < 3; ++ch) {
        double v = img.at(r, c, ch) + kNoiseSigma * rng.gaussian();
        img.at(r, c, ch) = std::clamp(v, 0.0, 1.0);
      }
    }
  return img;
}

std::vector<uint8_t> lesion_mask(const std::vector<LesionSpec>& lesions) {
  for (const auto& l : lesions) validate_lesion(l);
  std::vector<uint8_t> mask(static_cast<size_t>(kImageSide) * kImageSide, 0);
  Painter p{nullptr, &mask};
  for (const auto& l : lesions) paint_lesion(l, p);
  return mask;
}

namespace {

struct Placement {
  std::vector<LesionSpec> placed;

  bool try_place(LesionKind kind, Rng& rng) {
    double lo, hi;
    kind_radius_bounds(kind, lo, hi);
    double radius = lo == hi ? lo : std::floor(rng.uniform(lo, hi + 0.999));
    radius = std::clamp(radius, lo, hi);
    double intensity = rng.uniform(0.9, 1.0);
    for (int attempt = 0; attempt < 500; ++attempt) {
      int row = rng.uniform_int(2, kImageSide - 3);
      int col = rng.uniform_int(2, kImageSide - 3);
      if (dist(row, col, kDiscRow, kDiscCol) + radius > kDiscRadius - 1.5) continue;
      if (dist(row, col, kOpticRow, kOpticCol) < radius + kOpticClearance) continue;
      bool clash = false;
      for (const auto& other : placed) {
        double need = radius + other.radius + 2.0;
        if (dist(row, col, other.row, other.col) < need) {
          clash = true;
          break;
        }
      }
      if (clash) continue;
      placed.push_back({kind, row, col, radius, intensity});
      return true;
    }
    return false;
  }
};

// Lesion-count recipe for a target grade, honoring the configured thresholds.
// Returns nullopt when placement fails; the caller resamples.
std::optional<std::vector<LesionSpec>> sample_lesion_set(int grade, Rng& rng,
                                                         const GradingThresholds& th) {
  int n[kNumConcepts] = {0, 0, 0, 0, 0, 0};  // ma, h, he, se, nv, irma
  switch (grade) {
    case 0: break;
    case 1: n[0] = rng.uniform_int(1, 3); break;
    case 2: {
      std::vector<int> routes;  // 1=h, 2=he, 3=se
      if (th.hemorrhage_severe >= 2) routes.push_back(1);
      routes.push_back(2);
      if (th.soft_exudate_severe >= 2) routes.push_back(3);
      int route = routes[rng.next_u64() % routes.size()];
      if (route == 1) n[1] = rng.uniform_int(1, std::min(3, th.hemorrhage_severe - 1));
      if (route == 2) n[2] = rng.uniform_int(1, 3);
      if (route == 3) n[3] = rng.uniform_int(1, std::min(3, th.soft_exudate_severe - 1));
      if (route != 2 && rng.uniform01() < 0.35) n[2] = rng.uniform_int(1, 2);
      n[0] = rng.uniform_int(0, 2);
      break;
    }
    case 3: {
      bool se_route_ok = th.soft_exudate_severe <= 5;
      bool use_se = se_route_ok && rng.uniform01() < 0.3;
      if (use_se) {
        n[3] = std::min(6, th.soft_exudate_severe + static_cast<int>(rng.next_u64() % 2));
        n[0] = rng.uniform_int(0, 2);
        n[1] = rng.uniform_int(0, 2);
      } else {
        n[5] = rng.uniform_int(1, 2);
        n[1] = rng.uniform_int(1, 4);
        n[2] = rng.uniform_int(0, 2);
        n[0] = rng.uniform_int(0, 2);
      }
      break;
    }
    case 4: {
      n[4] = 1;
      n[0] = rng.uniform_int(0, 2);
      n[1] = rng.uniform_int(0, 3);
      n[2] = rng.uniform_int(0, 2);
      if (rng.uniform01() < 0.25) n[5] = 1;
      if (rng.uniform01() < 0.25) n[3] = 1;
      break;
    }
    default: throw std::runtime_error("grade must be in 0..4");
  }

  Placement pl;
  // big footprints first so packing succeeds
  const LesionKind order[] = {LesionKind::neovascularization, LesionKind::soft_exudate,
                              LesionKind::irma, LesionKind::hemorrhage,
                              LesionKind::hard_exudate, LesionKind::microaneurysm};
  for (LesionKind k : order)
    for (int i = 0; i < n[static_cast<int>(k)]; ++i)
      if (!pl.try_place(k, rng)) return std::nullopt;
  return pl.placed;
}

}  // namespace

FundusSample make_sample(int grade, uint64_t record_seed, const GradingThresholds& th) {
  if (grade < 0 || grade > 4) throw std::runtime_error("grade must be in 0..4");
  if (th.hemorrhage_severe < 1 || th.soft_exudate_severe < 1)
    throw std::runtime_error("grading thresholds must be >= 1");
  Rng rng(mix_seed(record_seed, fnv1a64("lesionset")));
  for (int attempt = 0; attempt < 200; ++attempt) {
    auto lesions = sample_lesion_set(grade, rng, th);
    if (!lesions) continue;
    if (grade_from_lesions(*lesions, th) != grade) continue;
    FundusSample s;
    s.image = render_image(*lesions, record_seed);
    s.grade = grade;
    s.concepts = concepts_from_lesions(*lesions);
    s.lesions = std::move(*lesions);
    s.seed = record_seed;
    return s;
  }
  throw std::runtime_error("cannot realize grade " + std::to_string(grade) +
                           " under the configured thresholds");
}

DatasetConfig DatasetConfig::from_kv(const KVConfig& kv) {
  DatasetConfig cfg;
  for (int g = 0; g < 5; ++g)
    cfg.counts_per_grade[g] =
        static_cast<int>(kv.get_int("n_grade" + std::to_string(g), cfg.counts_per_grade[g]));
  cfg.thresholds.hemorrhage_severe =
      static_cast<int>(kv.get_int("hemorrhage_severe", cfg.thresholds.hemorrhage_severe));
  cfg.thresholds.soft_exudate_severe =
      static_cast<int>(kv.get_int("soft_exudate_severe", cfg.thresholds.soft_exudate_severe));
  cfg.ratio_train = kv.get_num("split_train", cfg.ratio_train);
  cfg.ratio_val = kv.get_num("split_val", cfg.ratio_val);
  cfg.ratio_test = kv.get_num("split_test", cfg.ratio_test);
  return cfg;
}

void split_manifest(DatasetManifest& manifest, double ratio_train, double ratio_val,
                    double ratio_test, uint64_t seed) {
  double ratios[3] = {ratio_train, ratio_val, ratio_test};
  const char* names[3] = {"train", "val", "test"};
  double total = 0.0;
  int nonzero = 0;
  for (double r : ratios) {
    if (r < 0.0) throw std::runtime_error("split: ratios must be nonnegative");
    if (r > 0.0) ++nonzero;
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::runtime_error("split: ratios must sum to 1");
  if (nonzero == 0) throw std::runtime_error("split: all ratios are zero");

  for (int g = 0; g < 5; ++g) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < manifest.records.size(); ++i)
      if (manifest.records[i].grade == g) idx.push_back(i);
    if (idx.empty()) continue;
    if (static_cast<int>(idx.size()) < nonzero)
      throw std::runtime_error("split: grade " + std::to_string(g) +
                               " stratum smaller than the number of splits");
    Rng rng(mix_seed(seed, static_cast<uint64_t>(g) + 0x5b17));
    rng.shuffle(idx);
    size_t n = idx.size();
    // cumulative rounding keeps stratum totals exact
    size_t c0 = static_cast<size_t>(std::lround(ratios[0] * n));
    size_t c1 = static_cast<size_t>(std::lround((ratios[0] + ratios[1]) * n));
    c0 = std::min(c0, n);
    c1 = std::clamp(c1, c0, n);
    for (size_t i = 0; i < n; ++i) {
      const char* tag = i < c0 ? names[0] : (i < c1 ? names[1] : names[2]);
      manifest.records[idx[i]].split = tag;
    }
  }
}

namespace {

json record_to_json(const ManifestRecord& r) {
  json jl = json::array();
  for (const auto& l : r.lesions) {
    jl.push_back({{"kind", lesion_kind_name(l.kind)},
                  {"row", l.row},
                  {"col", l.col},
                  {"radius", l.radius},
                  {"intensity", l.intensity}});
  }
  json jc = json::array();
  for (bool b : r.concepts) jc.push_back(b ? 1 : 0);
  return json{{"id", r.id},     {"image", r.image_path}, {"grade", r.grade},
              {"concepts", jc}, {"lesions", jl},         {"split", r.split}};
}

ManifestRecord record_from_json(const json& j) {
  ManifestRecord r;
  r.id = j.at("id").get<std::string>();
  r.image_path = j.at("image").get<std::string>();
  r.grade = j.at("grade").get<int>();
  const auto& jc = j.at("concepts");
  if (jc.size() != kNumConcepts) throw std::runtime_error("manifest: bad concepts length");
  for (int k = 0; k < kNumConcepts; ++k) r.concepts[k] = jc[k].get<int>() != 0;
  for (const auto& jl : j.at("lesions")) {
    LesionSpec l;
    l.kind = lesion_kind_from_name(jl.at("kind").get<std::string>());
    l.row = jl.at("row").get<int>();
    l.col = jl.at("col").get<int>();
    l.radius = jl.at("radius").get<double>();
    l.intensity = jl.at("intensity").get<double>();
    r.lesions.push_back(l);
  }
  r.split = j.at("split").get<std::string>();
  return r;
}

}  // namespace

DatasetManifest generate_dataset(const DatasetConfig& cfg, uint64_t seed,
                                 const std::string& out_dir) {
  namespace fs = std::filesystem;
  for (int c : cfg.counts_per_grade)
    if (c < 0) throw std::runtime_error("generate_dataset: negative count");
  fs::create_directories(fs::path(out_dir) / "images");

  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.counts_per_grade = cfg.counts_per_grade;
  manifest.thresholds = cfg.thresholds;

  int index = 0;
  for (int g = 0; g < 5; ++g) {
    for (int i = 0; i < cfg.counts_per_grade[g]; ++i, ++index) {
      uint64_t record_seed = mix_seed(seed, static_cast<uint64_t>(index));
      FundusSample s = make_sample(g, record_seed, cfg.thresholds);
      char idbuf[16];
      std::snprintf(idbuf, sizeof(idbuf), "s%05d", index);
      ManifestRecord rec;
      rec.id = idbuf;
      rec.image_path = std::string("images/") + idbuf + ".ppm";
      rec.grade = s.grade;
      rec.concepts = s.concepts;
      rec.lesions = s.lesions;
      save_ppm((fs::path(out_dir) / rec.image_path).string(), s.image);
      manifest.records.push_back(std::move(rec));
    }
  }

  split_manifest(manifest, cfg.ratio_train, cfg.ratio_val, cfg.ratio_test,
                 mix_seed(seed, fnv1a64("split")));

  std::ofstream mf(fs::path(out_dir) / "manifest.jsonl");
  if (!mf) throw std::runtime_error("generate_dataset: cannot write manifest");
  for (const auto& r : manifest.records) mf << record_to_json(r).dump() << "\n";
  mf.close();

  json meta{{"seed", seed},
            {"counts_per_grade", cfg.counts_per_grade},
            {"hemorrhage_severe", cfg.thresholds.hemorrhage_severe},
            {"soft_exudate_severe", cfg.thresholds.soft_exudate_severe},
            {"ratios", {cfg.ratio_train, cfg.ratio_val, cfg.ratio_test}}};
  std::ofstream meta_out(fs::path(out_dir) / "meta.json");
  meta_out << meta.dump(2) << "\n";
  return manifest;
}

DatasetManifest load_manifest(const std::string& dataset_dir) {
  namespace fs = std::filesystem;
  std::ifstream meta_in(fs::path(dataset_dir) / "meta.json");
  if (!meta_in) throw std::runtime_error("load_manifest: missing meta.json in " + dataset_dir);
  json meta = json::parse(meta_in);
  DatasetManifest m;
  m.seed = meta.at("seed").get<uint64_t>();
  for (int g = 0; g < 5; ++g) m.counts_per_grade[g] = meta.at("counts_per_grade")[g].get<int>();
  m.thresholds.hemorrhage_severe = meta.at("hemorrhage_severe").get<int>();
  m.thresholds.soft_exudate_severe = meta.at("soft_exudate_severe").get<int>();

  std::ifstream mf(fs::path(dataset_dir) / "manifest.jsonl");
  if (!mf) throw std::runtime_error("load_manifest: missing manifest.jsonl in " + dataset_dir);
  std::string line;
  std::unordered_map<std::string, int> seen;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    ManifestRecord r = record_from_json(json::parse(line));
    if (seen.count(r.id)) throw std::runtime_error("load_manifest: duplicate id " + r.id);
    seen[r.id] = 1;
    if (!fs::exists(fs::path(dataset_dir) / r.image_path))
      throw std::runtime_error("load_manifest: missing image file " + r.image_path);
    m.records.push_back(std::move(r));
  }
  return m;
}

void save_ppm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_ppm: cannot open " + path);
  os << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> bytes;
  bytes.reserve(img.px.size());
  for (double v : img.px) {
    int q = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    bytes.push_back(static_cast<unsigned char>(q));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_ppm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255) throw std::runtime_error("load_ppm: unsupported format");
  if (w != kImageSide || h != kImageSide) throw std::runtime_error("load_ppm: unexpected size");
  is.get();  // single whitespace after header
  std::vector<unsigned char> bytes(static_cast<size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!is) throw std::runtime_error("load_ppm: truncated file");
  Image img;
  for (size_t i = 0; i < bytes.size(); ++i) img.px[i] = bytes[i] / 255.0;
  return img;
}

Image load_record_image(const std::string& dataset_dir, const ManifestRecord& rec) {
  return load_ppm((std::filesystem::path(dataset_dir) / rec.image_path).string());
}

}  // namespace xdr
