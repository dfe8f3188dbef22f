#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "xdr/synthfundus.hpp"
#include "xdr/tensor.hpp"
#include "xdr/transformer.hpp"

namespace xdr {

struct EncoderConfig {
  int patch_size = 8;
  int embed_dim = 32;  // D_v
  int layers = 2;
  int heads = 4;
  int mlp_ratio = 2;

  int patches_per_side() const { return kImageSide / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int patch_len() const { return 3 * patch_size * patch_size; }
  void validate() const;
};

enum class EncoderInit { generic, medical };
const char* encoder_init_name(EncoderInit m);

// Row-major patch order; within a patch, flattening order is (row, col, channel).
Tensor patchify(const Image& img, int patch_size);

struct VisionEncoder {
  EncoderConfig cfg;
  EncoderInit init_mode = EncoderInit::generic;
  Tensor patch_w, patch_b;  // [patch_len x D_v], [D_v]
  Tensor pos_emb;           // [P x D_v]
  std::vector<TransformerLayer> blocks;
  Tensor final_g, final_b;

  // Differentiable forward from a patch matrix.
  Tensor forward(const Tensor& patches) const;
  // Convenience: patchify + forward (graph recorded iff grads are enabled).
  Tensor encode(const Image& img) const;

  std::vector<Tensor> params() const;
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  void save(const std::string& path) const;
  static VisionEncoder load(const std::string& path);
};

// Seeded random init tagged with the requested mode; `medical` weights are
// produced by running pretrain_encoder on top of this.
VisionEncoder init_encoder(const EncoderConfig& cfg, uint64_t seed, EncoderInit mode);

struct PretrainOptions {
  int epochs = 10;
  int batch = 16;
  double lr_max = 3e-3;
  double lr_min = 1e-4;
  double weight_decay = 0.01;
};

struct PretrainResult {
  std::vector<double> epoch_losses;
  double f1_before = 0.0;
  double f1_after = 0.0;
};

// Supervised proxy for medical pretraining: a temporary 6-way multi-label
// sigmoid head on mean-pooled features, binary cross-entropy, head discarded.
PretrainResult pretrain_encoder(VisionEncoder& enc, const std::vector<Image>& images,
                                const std::vector<std::array<bool, kNumConcepts>>& concepts,
                                uint64_t seed, const PretrainOptions& opt = {});

}  // namespace xdr
