#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dsai/config.hpp"
#include "dsai/context.hpp"
#include "dsai/ops.hpp"
#include "dsai/param_store.hpp"

namespace dsai {

// The full network: shared tokenizer, fine/coarse temporal-convolution
// branches, attentive refinement and interaction, token aggregation, and the
// linear classifier. Parameters live in a ParamStore built at construction;
// every stage is exposed so tests can exercise it in isolation. All stage
// methods take batched tensors; forward_trial wraps a single trial.
class Model {
public:
  Model(ModelConfig cfg, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  // [B,C,T] -> [B,f2,N] convolutional feature map.
  Tensor tokenize(const Tensor& x, const ForwardCtx& ctx) const;

  // [B,f2,N] -> [B,N,d] position-encoded tokens.
  Tensor project_and_encode(const Tensor& f, const ForwardCtx& ctx) const;

  struct BranchOutputs {
    Tensor fine;    // undefined when the fine branch is disabled
    Tensor coarse;  // undefined when the coarse branch is disabled
  };
  // [B,N,d] -> per-branch refined token streams.
  BranchOutputs run_branches(const Tensor& z0, const ForwardCtx& ctx) const;

  // Applies the configured attention layers (intra refinement, then
  // inter-branch interaction) in place on the enabled streams.
  void attentive_stage(BranchOutputs& z, const ForwardCtx& ctx) const;

  // One multi-head attention sublayer on explicit query and key/value
  // streams; family names the parameter set ("intra_fine", "cross_coarse",
  // ...). Exposed so the attention contracts can be tested in isolation.
  Tensor attention(const Tensor& q_src, const Tensor& kv_src, const std::string& family,
                   std::size_t layer, const ForwardCtx& ctx) const;

  // [B,N,d] -> [B,d] weighted token pooling; branch is "fine" or "coarse".
  Tensor aggregate(const Tensor& z, const std::string& branch, const ForwardCtx& ctx) const;

  // [B, d·n_branches] -> [B,K] logits.
  Tensor classify(const Tensor& pooled) const;

  // [B,C,T] -> [B,K] logits, the whole pipeline.
  Tensor forward(const Tensor& x, const ForwardCtx& ctx) const;

  // [C,T] -> [K] logits for one trial.
  Tensor forward_trial(const Tensor& x, const ForwardCtx& ctx) const;

  // Mean absolute input-gradient of the true-class logit, per channel,
  // averaged over time and batch. Evaluation mode.
  std::vector<Real> saliency(const Tensor& x, const std::vector<int>& labels) const;

  std::size_t parameter_count() const { return store_.n_trainable(); }
  // Multiply count for one trial under the documented convention.
  std::size_t mac_count() const;
  static const char* mac_convention();

private:
  struct BnParams {
    Tensor gamma, beta, mean, var;
  };
  struct LnParams {
    Tensor gamma, beta;
  };
  struct MhaParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct FfnParams {
    Tensor w1, b1, w2, b2;
  };
  struct TcBlockParams {
    std::size_t kernel = 0;
    Tensor dw_w, dw_b, pw1_w, pw1_b, pw2_w;
    BnParams bn;
    Tensor alpha;
  };
  struct BranchParams {
    std::vector<TcBlockParams> blocks;
    Tensor alpha_inject;
  };
  struct AttnStreamParams {
    MhaParams mha;
    LnParams ln1, ln2;
    FfnParams ffn;
    Tensor beta;  // cross streams only
  };
  struct AttnLayerParams {
    AttnStreamParams intra_fine, intra_coarse, cross_fine, cross_coarse;
  };
  struct TokenizerParams {
    Tensor conv1, spatial;
    BnParams bn1;
    Tensor dw2, pw2;
    BnParams bn2;
    Tensor proj_w, proj_b;  // undefined when f2 == d
    Tensor pe;              // undefined when positional encoding is off
  };
  struct HeadParams {
    Tensor q;  // undefined in mean-aggregation mode
    Tensor cls_w, cls_b;
  };

  void build(std::uint64_t seed);
  BnParams make_bn(const std::string& prefix, std::size_t ch);
  LnParams make_ln(const std::string& prefix, std::size_t dim);
  MhaParams make_mha(const std::string& prefix, std::uint64_t seed);
  FfnParams make_ffn(const std::string& prefix, std::uint64_t seed);
  AttnStreamParams make_stream(const std::string& prefix, bool cross, std::uint64_t seed);
  BranchParams make_branch(const std::string& prefix, const std::vector<std::size_t>& kernels,
                           std::uint64_t seed);

  Tensor tc_block(const Tensor& h, const TcBlockParams& p, const ForwardCtx& ctx) const;
  Tensor run_branch(const Tensor& z0, const BranchParams& p, const ForwardCtx& ctx) const;
  Tensor mha_block(const Tensor& q_src, const Tensor& kv_src, const MhaParams& p,
                   const ForwardCtx& ctx, const char* family, std::size_t layer) const;
  Tensor ffn_block(const Tensor& x, const FfnParams& p, const ForwardCtx& ctx) const;
  Tensor intra_refine(const Tensor& z, const AttnStreamParams& p, const ForwardCtx& ctx,
                      const char* family, std::size_t layer) const;
  std::pair<Tensor, Tensor> inter_interact(const Tensor& zf, const Tensor& zc,
                                           const AttnStreamParams& pf, const AttnStreamParams& pc,
                                           const ForwardCtx& ctx, std::size_t layer) const;
  Tensor apply_bn(const Tensor& x, const BnParams& p, const ForwardCtx& ctx) const;

  ModelConfig cfg_;
  ParamStore store_;
  TokenizerParams tok_;
  BranchParams fine_, coarse_;
  std::vector<AttnLayerParams> attn_;
  HeadParams head_;
};

// Checkpoint file: magic, version, canonical config text, parameter records.
void save_checkpoint(const std::string& path, const Config& cfg, const ParamStore& store);

struct LoadedModel {
  Config config;
  Model model;
};
LoadedModel load_checkpoint(const std::string& path);

}  // namespace dsai
