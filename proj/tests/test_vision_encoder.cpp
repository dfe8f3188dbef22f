#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "oracles.hpp"
#include "xdr/hash.hpp"
#include "xdr/synthfundus.hpp"
#include "xdr/vision_encoder.hpp"

using namespace xdr;
namespace fs = std::filesystem;

namespace {

// inverse-map oracle: reassemble the image from its patch matrix
Image unpatchify(const Tensor& patches, int patch_size) {
  Image img;
  int per_side = kImageSide / patch_size;
  int pi = 0;
  for (int pr = 0; pr < per_side; ++pr)
    for (int pc = 0; pc < per_side; ++pc, ++pi) {
      int k = 0;
      for (int r = 0; r < patch_size; ++r)
        for (int c = 0; c < patch_size; ++c)
          for (int ch = 0; ch < 3; ++ch)
            img.at(pr * patch_size + r, pc * patch_size + c, ch) = patches.at(pi, k++);
    }
  return img;
}

std::vector<Image> tiny_train_images;
std::vector<std::array<bool, kNumConcepts>> tiny_train_concepts;

void build_tiny_set(int per_grade, uint64_t seed) {
  tiny_train_images.clear();
  tiny_train_concepts.clear();
  for (int g = 0; g <= 4; ++g)
    for (int i = 0; i < per_grade; ++i) {
      FundusSample s = make_sample(g, mix_seed(seed, g * 1000 + i));
      tiny_train_images.push_back(s.image);
      tiny_train_concepts.push_back(s.concepts);
    }
}

}  // namespace

TEST_CASE("patchify contract") {
  Image img = render_image({}, 42);
  Tensor p = patchify(img, 8);
  CHECK(p.rows() == 64);
  CHECK(p.cols() == 192);

  Image back = unpatchify(p, 8);
  CHECK(back.px == img.px);

  Image constant;
  for (double& v : constant.px) v = 0.375;
  Tensor pc = patchify(constant, 8);
  for (int i = 0; i < pc.size(); ++i) CHECK(pc.at(i) == 0.375);

  CHECK_THROWS_AS(patchify(img, 7), std::runtime_error);
}

TEST_CASE("encode shape and determinism") {
  EncoderConfig cfg;
  VisionEncoder enc = init_encoder(cfg, 11, EncoderInit::generic);
  Image img = render_image({{LesionKind::hemorrhage, 40, 28, 3.0, 0.9}}, 4);
  NoGradGuard ng;
  Tensor f1 = enc.encode(img);
  Tensor f2 = enc.encode(img);
  CHECK(f1.rows() == 64);
  CHECK(f1.cols() == 32);
  CHECK(f1.data() == f2.data());
  for (double v : f1.data()) CHECK(std::isfinite(v));

  // sensitivity: one extra lesion changes the features
  Image img2 = render_image({}, 4);
  Tensor f3 = enc.encode(img2);
  double diff = 0.0;
  for (int i = 0; i < f1.size(); ++i) diff += std::abs(f1.at(i) - f3.at(i));
  CHECK(diff > 1e-6);
}

TEST_CASE("init determinism and seeding") {
  EncoderConfig cfg;
  VisionEncoder a = init_encoder(cfg, 7, EncoderInit::generic);
  VisionEncoder b = init_encoder(cfg, 7, EncoderInit::generic);
  auto an = a.named_params(), bn = b.named_params();
  for (size_t i = 0; i < an.size(); ++i) CHECK(an[i].second.data() == bn[i].second.data());
  VisionEncoder c = init_encoder(cfg, 8, EncoderInit::generic);
  CHECK(a.patch_w.data() != c.patch_w.data());
}

TEST_CASE("zeroed positional embeddings make encode permutation-equivariant") {
  EncoderConfig cfg;
  VisionEncoder enc = init_encoder(cfg, 3, EncoderInit::generic);
  for (double& v : enc.pos_emb.data()) v = 0.0;
  Image img = render_image({{LesionKind::hard_exudate, 24, 40, 2.0, 1.0}}, 9);
  NoGradGuard ng;
  Tensor patches = patchify(img, cfg.patch_size);
  Tensor base = enc.forward(patches);

  std::vector<int> perm(cfg.num_patches());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(5);
  rng.shuffle(perm);
  Tensor permuted_patches = gather_rows(patches, perm);
  Tensor out = enc.forward(permuted_patches);
  for (int i = 0; i < cfg.num_patches(); ++i)
    for (int j = 0; j < cfg.embed_dim; ++j)
      CHECK(out.at(i, j) == doctest::Approx(base.at(perm[i], j)).epsilon(1e-9));
}

TEST_CASE("gradients flow through the full encoder") {
  EncoderConfig cfg;
  cfg.layers = 1;  // keep the finite-difference sweep quick
  VisionEncoder enc = init_encoder(cfg, 21, EncoderInit::generic);
  Image img = render_image({{LesionKind::soft_exudate, 40, 40, 4.0, 0.9}}, 2);
  Tensor patches = patchify(img, cfg.patch_size);
  Rng wrng(77);
  Tensor w = Tensor::randn({cfg.num_patches(), cfg.embed_dim}, 1.0, wrng);
  auto f = [&] { return sum(mul(enc.forward(patches), w)); };
  Rng coord_rng(13);
  auto rep = oracles::fd_check(f, enc.params(), coord_rng, 8);
  CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("pretraining: zero epochs is the identity") {
  build_tiny_set(2, 500);
  EncoderConfig cfg;
  VisionEncoder enc = init_encoder(cfg, 1, EncoderInit::generic);
  std::vector<double> before = enc.patch_w.data();
  PretrainOptions opt;
  opt.epochs = 0;
  PretrainResult res = pretrain_encoder(enc, tiny_train_images, tiny_train_concepts, 9, opt);
  CHECK(enc.patch_w.data() == before);
  CHECK(res.epoch_losses.empty());
  CHECK(enc.init_mode == EncoderInit::generic);
}

TEST_CASE("pretraining improves the proxy task and converges") {
  build_tiny_set(16, 321);  // 80 samples
  EncoderConfig cfg;
  VisionEncoder enc = init_encoder(cfg, 5, EncoderInit::generic);
  uint64_t before_hash = fnv1a64(enc.patch_w.data());
  PretrainOptions opt;
  opt.epochs = 10;
  PretrainResult res = pretrain_encoder(enc, tiny_train_images, tiny_train_concepts, 9, opt);
  CHECK(res.f1_after > res.f1_before);
  CHECK(res.f1_after >= 0.9);
  CHECK(enc.init_mode == EncoderInit::medical);
  CHECK(fnv1a64(enc.patch_w.data()) != before_hash);

  // epoch-average losses: non-increasing within 5% tolerance
  for (size_t i = 1; i < res.epoch_losses.size(); ++i) {
    CHECK(std::isfinite(res.epoch_losses[i]));
    CHECK(res.epoch_losses[i] <= res.epoch_losses[i - 1] * 1.05);
  }

  CHECK_THROWS_AS(pretrain_encoder(enc, {}, {}, 1, opt), std::runtime_error);
}

TEST_CASE("checkpoint round trip with provenance") {
  EncoderConfig cfg;
  VisionEncoder enc = init_encoder(cfg, 31, EncoderInit::medical);
  fs::path p = fs::temp_directory_path() / "xdr_enc_test.bin";
  enc.save(p.string());
  VisionEncoder back = VisionEncoder::load(p.string());
  CHECK(back.init_mode == EncoderInit::medical);
  CHECK(back.cfg.patch_size == cfg.patch_size);
  CHECK(back.cfg.embed_dim == cfg.embed_dim);
  auto a = enc.named_params(), b = back.named_params();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].second.data() == b[i].second.data());
  fs::remove(p);
}
