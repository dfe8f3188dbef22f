#include "xdr/vision_encoder.hpp"

#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "xdr/checkpoint.hpp"
#include "xdr/hash.hpp"
#include "xdr/optim.hpp"

namespace xdr {

void EncoderConfig::validate() const {
  if (patch_size <= 0 || kImageSide % patch_size != 0)
    numeric_error("encoder config: image side not divisible by patch size");
  if (embed_dim <= 0 || embed_dim % heads != 0)
    numeric_error("encoder config: embed_dim must be divisible by heads");
  if (layers <= 0 || mlp_ratio <= 0) numeric_error("encoder config: bad layer/mlp settings");
}

const char* encoder_init_name(EncoderInit m) {
  return m == EncoderInit::medical ? "medical" : "generic";
}

Tensor patchify(const Image& img, int patch_size) {
  if (patch_size <= 0 || img.h % patch_size != 0 || img.w % patch_size != 0)
    numeric_error("patchify: image side not divisible by patch size");
  int per_side = img.h / patch_size;
  int patches = per_side * per_side;
  int len = 3 * patch_size * patch_size;
  std::vector<double> out(static_cast<size_t>(patches) * len);
  int pi = 0;
  for (int pr = 0; pr < per_side; ++pr)
    for (int pc = 0; pc < per_side; ++pc, ++pi) {
      double* row = out.data() + static_cast<size_t>(pi) * len;
      int k = 0;
      for (int r = 0; r < patch_size; ++r)
        for (int c = 0; c < patch_size; ++c)
          for (int ch = 0; ch < 3; ++ch)
            row[k++] = img.at(pr * patch_size + r, pc * patch_size + c, ch);
    }
  return Tensor::from_data({patches, len}, std::move(out));
}

Tensor VisionEncoder::forward(const Tensor& patches) const {
  if (patches.rank() != 2 || patches.cols() != cfg.patch_len() ||
      patches.rows() != cfg.num_patches())
    numeric_error("encoder forward: patch matrix shape mismatch");
  Tensor x = add(add_rowvec(matmul(patches, patch_w), patch_b), pos_emb);
  for (const auto& blk : blocks) x = blk.forward(x, nullptr);
  return layer_norm(x, final_g, final_b);
}

Tensor VisionEncoder::encode(const Image& img) const {
  return forward(patchify(img, cfg.patch_size));
}

std::vector<Tensor> VisionEncoder::params() const {
  std::vector<Tensor> ps = {patch_w, patch_b, pos_emb};
  for (const auto& b : blocks) {
    auto bp = b.params();
    ps.insert(ps.end(), bp.begin(), bp.end());
  }
  ps.push_back(final_g);
  ps.push_back(final_b);
  return ps;
}

std::vector<std::pair<std::string, Tensor>> VisionEncoder::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("patch_proj.w", patch_w);
  out.emplace_back("patch_proj.b", patch_b);
  out.emplace_back("pos_emb", pos_emb);
  for (size_t i = 0; i < blocks.size(); ++i) blocks[i].named(out, "layer" + std::to_string(i));
  out.emplace_back("final_norm.g", final_g);
  out.emplace_back("final_norm.b", final_b);
  return out;
}

void VisionEncoder::save(const std::string& path) const {
  auto entries = named_params();
  Tensor meta = Tensor::from_data(
      {6}, {static_cast<double>(init_mode == EncoderInit::medical ? 1 : 0),
            static_cast<double>(cfg.patch_size), static_cast<double>(cfg.embed_dim),
            static_cast<double>(cfg.layers), static_cast<double>(cfg.heads),
            static_cast<double>(cfg.mlp_ratio)});
  entries.emplace_back("meta", meta);
  save_checkpoint(path, entries);
}

VisionEncoder VisionEncoder::load(const std::string& path) {
  auto entries = load_checkpoint(path);
  std::map<std::string, Tensor> by_name(entries.begin(), entries.end());
  auto it = by_name.find("meta");
  if (it == by_name.end()) throw std::runtime_error("encoder checkpoint: missing meta entry");
  const auto& meta = it->second.data();
  if (meta.size() != 6) throw std::runtime_error("encoder checkpoint: bad meta entry");
  EncoderConfig cfg;
  cfg.patch_size = static_cast<int>(meta[1]);
  cfg.embed_dim = static_cast<int>(meta[2]);
  cfg.layers = static_cast<int>(meta[3]);
  cfg.heads = static_cast<int>(meta[4]);
  cfg.mlp_ratio = static_cast<int>(meta[5]);
  VisionEncoder enc = init_encoder(cfg, 0, meta[0] != 0.0 ? EncoderInit::medical : EncoderInit::generic);
  auto assign = [&](Tensor& dst, const std::string& name) {
    auto f = by_name.find(name);
    if (f == by_name.end()) throw std::runtime_error("encoder checkpoint: missing " + name);
    if (f->second.shape() != dst.shape())
      throw std::runtime_error("encoder checkpoint: shape mismatch for " + name);
    dst.data() = f->second.data();
  };
  for (auto& [name, t] : enc.named_params()) {
    Tensor target = t;
    assign(target, name);
  }
  return enc;
}

VisionEncoder init_encoder(const EncoderConfig& cfg, uint64_t seed, EncoderInit mode) {
  cfg.validate();
  VisionEncoder enc;
  enc.cfg = cfg;
  enc.init_mode = mode;
  Rng rng(mix_seed(seed, fnv1a64("vision_encoder")));
  enc.patch_w = Tensor::randn({cfg.patch_len(), cfg.embed_dim},
                              std::sqrt(2.0 / (cfg.patch_len() + cfg.embed_dim)), rng, true);
  enc.patch_b = Tensor::zeros({cfg.embed_dim}, true);
  enc.pos_emb = Tensor::randn({cfg.num_patches(), cfg.embed_dim}, 0.02, rng, true);
  for (int i = 0; i < cfg.layers; ++i)
    enc.blocks.push_back(
        TransformerLayer::init(cfg.embed_dim, cfg.heads, cfg.embed_dim * cfg.mlp_ratio, rng));
  enc.final_g = Tensor::full({cfg.embed_dim}, 1.0, true);
  enc.final_b = Tensor::zeros({cfg.embed_dim}, true);
  return enc;
}

namespace {

// Macro-averaged F1 of thresholded sigmoid predictions, computed directly.
double proxy_macro_f1(const std::vector<std::array<double, kNumConcepts>>& probs,
                      const std::vector<std::array<bool, kNumConcepts>>& truth) {
  double total = 0.0;
  for (int k = 0; k < kNumConcepts; ++k) {
    long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < probs.size(); ++i) {
      bool pred = probs[i][k] > 0.5;
      bool pos = truth[i][k];
      if (pred && pos) ++tp;
      else if (pred && !pos) ++fp;
      else if (!pred && pos) ++fn;
    }
    double f1 = (2 * tp + fp + fn) == 0 ? 1.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    total += f1;
  }
  return total / kNumConcepts;
}

}  // namespace

PretrainResult pretrain_encoder(VisionEncoder& enc, const std::vector<Image>& images,
                                const std::vector<std::array<bool, kNumConcepts>>& concepts,
                                uint64_t seed, const PretrainOptions& opt) {
  if (images.empty()) numeric_error("pretrain_encoder: empty dataset");
  if (images.size() != concepts.size())
    numeric_error("pretrain_encoder: image/label count mismatch");

  Rng rng(mix_seed(seed, fnv1a64("pretrain")));
  Tensor head_w = Tensor::randn({enc.cfg.embed_dim, kNumConcepts}, 0.02, rng, true);
  Tensor head_b = Tensor::zeros({kNumConcepts}, true);

  // Patch matrices are fixed inputs; hoist them out of the epoch loop.
  std::vector<Tensor> patch_mats;
  patch_mats.reserve(images.size());
  for (const auto& img : images) patch_mats.push_back(patchify(img, enc.cfg.patch_size));

  auto predict_all = [&] {
    NoGradGuard ng;
    std::vector<std::array<double, kNumConcepts>> probs(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
      Tensor pooled = reshape(mean_rows(enc.forward(patch_mats[i])), {1, enc.cfg.embed_dim});
      Tensor logits = add_rowvec(matmul(pooled, head_w), head_b);
      for (int k = 0; k < kNumConcepts; ++k) {
        double z = logits.at(0, k);
        probs[i][k] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      }
    }
    return probs;
  };

  PretrainResult res;
  res.f1_before = proxy_macro_f1(predict_all(), concepts);

  std::vector<Tensor> params = enc.params();
  params.push_back(head_w);
  params.push_back(head_b);

  int n = static_cast<int>(images.size());
  int batches_per_epoch = (n + opt.batch - 1) / opt.batch;
  AdamWConfig acfg;
  acfg.lr_max = opt.lr_max;
  acfg.lr_min = opt.lr_min;
  acfg.weight_decay = opt.weight_decay;
  acfg.total_steps = static_cast<long>(batches_per_epoch) * opt.epochs;
  OptimizerState st = OptimizerState::make(params, acfg);

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      int lo = b * opt.batch;
      int hi = std::min(n, lo + opt.batch);
      std::vector<Tensor> pooled_rows;
      std::vector<double> targets;
      pooled_rows.reserve(hi - lo);
      for (int i = lo; i < hi; ++i) {
        int idx = order[i];
        pooled_rows.push_back(
            reshape(mean_rows(enc.forward(patch_mats[idx])), {1, enc.cfg.embed_dim}));
        for (int k = 0; k < kNumConcepts; ++k) targets.push_back(concepts[idx][k] ? 1.0 : 0.0);
      }
      Tensor logits = add_rowvec(matmul(concat_rows(pooled_rows), head_w), head_b);
      Tensor y = Tensor::from_data({hi - lo, kNumConcepts}, std::move(targets));
      Tensor loss = bce_with_logits(logits, y);
      zero_grads(params);
      backward(loss);
      clip_global_norm(params, 1.0);
      adamw_step(params, st);
      epoch_loss += loss.at(0) * (hi - lo);
    }
    res.epoch_losses.push_back(epoch_loss / n);
  }

  res.f1_after = proxy_macro_f1(predict_all(), concepts);
  if (opt.epochs > 0) enc.init_mode = EncoderInit::medical;
  // head_w / head_b go out of scope here: the proxy head is discarded.
  return res;
}

}  // namespace xdr
