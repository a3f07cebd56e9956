#include "dsai/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace dsai {

namespace {

Tensor init_uniform(ParamStore& store, const std::string& name, std::vector<std::size_t> shape,
                    std::size_t fan_in, std::uint64_t seed) {
  Rng rng(Rng::mix(seed, fnv1a(name)));
  const Real bound = std::sqrt(1.0 / static_cast<Real>(fan_in));
  std::vector<Real> v(shape_numel(shape));
  for (Real& x : v) x = rng.uniform(-bound, bound);
  return store.add(name, Tensor::from_data(std::move(shape), std::move(v)));
}

Tensor init_normal(ParamStore& store, const std::string& name, std::vector<std::size_t> shape,
                   Real stddev, std::uint64_t seed) {
  Rng rng(Rng::mix(seed, fnv1a(name)));
  std::vector<Real> v(shape_numel(shape));
  for (Real& x : v) x = stddev * rng.normal();
  return store.add(name, Tensor::from_data(std::move(shape), std::move(v)));
}

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
  Config probe;
  probe.arch = cfg_;
  validate(probe);
  build(init_seed);
}

Model::BnParams Model::make_bn(const std::string& prefix, std::size_t ch) {
  BnParams b;
  b.gamma = store_.add(prefix + ".gamma", Tensor::full({ch}, 1.0));
  b.beta = store_.add(prefix + ".beta", Tensor::zeros({ch}));
  b.mean = store_.add_buffer(prefix + ".running_mean", Tensor::zeros({ch}));
  b.var = store_.add_buffer(prefix + ".running_var", Tensor::full({ch}, 1.0));
  return b;
}

Model::LnParams Model::make_ln(const std::string& prefix, std::size_t dim) {
  LnParams l;
  l.gamma = store_.add(prefix + ".gamma", Tensor::full({dim}, 1.0));
  l.beta = store_.add(prefix + ".beta", Tensor::zeros({dim}));
  return l;
}

Model::MhaParams Model::make_mha(const std::string& prefix, std::uint64_t seed) {
  const std::size_t d = cfg_.embed_dim;
  MhaParams m;
  m.wq = init_uniform(store_, prefix + ".wq", {d, d}, d, seed);
  m.bq = store_.add(prefix + ".bq", Tensor::zeros({d}));
  m.wk = init_uniform(store_, prefix + ".wk", {d, d}, d, seed);
  m.bk = store_.add(prefix + ".bk", Tensor::zeros({d}));
  m.wv = init_uniform(store_, prefix + ".wv", {d, d}, d, seed);
  m.bv = store_.add(prefix + ".bv", Tensor::zeros({d}));
  m.wo = init_uniform(store_, prefix + ".wo", {d, d}, d, seed);
  m.bo = store_.add(prefix + ".bo", Tensor::zeros({d}));
  return m;
}

Model::FfnParams Model::make_ffn(const std::string& prefix, std::uint64_t seed) {
  const std::size_t d = cfg_.embed_dim;
  const std::size_t h = d * cfg_.ffn_ratio;
  FfnParams f;
  f.w1 = init_uniform(store_, prefix + ".w1", {d, h}, d, seed);
  f.b1 = store_.add(prefix + ".b1", Tensor::zeros({h}));
  f.w2 = init_uniform(store_, prefix + ".w2", {h, d}, h, seed);
  f.b2 = store_.add(prefix + ".b2", Tensor::zeros({d}));
  return f;
}

Model::AttnStreamParams Model::make_stream(const std::string& prefix, bool cross,
                                           std::uint64_t seed) {
  AttnStreamParams s;
  s.mha = make_mha(prefix + ".mha", seed);
  if (cross) {
    s.beta = store_.add(prefix + ".beta", Tensor::scalar(cfg_.interaction_init));
  }
  s.ln1 = make_ln(prefix + ".ln1", cfg_.embed_dim);
  s.ffn = make_ffn(prefix + ".ffn", seed);
  s.ln2 = make_ln(prefix + ".ln2", cfg_.embed_dim);
  return s;
}

Model::BranchParams Model::make_branch(const std::string& prefix,
                                       const std::vector<std::size_t>& kernels,
                                       std::uint64_t seed) {
  const std::size_t d = cfg_.embed_dim;
  const std::size_t dh = d * cfg_.expansion_ratio;
  const std::size_t g = cfg_.groups;
  BranchParams br;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    const std::string p = prefix + ".block" + std::to_string(i);
    TcBlockParams blk;
    blk.kernel = kernels[i];
    blk.dw_w = init_uniform(store_, p + ".dw.w", {d, kernels[i]}, kernels[i], seed);
    blk.dw_b = store_.add(p + ".dw.b", Tensor::zeros({d}));
    blk.pw1_w = init_uniform(store_, p + ".pw1.w", {dh, d / g}, d / g, seed);
    blk.pw1_b = store_.add(p + ".pw1.b", Tensor::zeros({dh}));
    blk.pw2_w = init_uniform(store_, p + ".pw2.w", {d, dh / g}, dh / g, seed);
    blk.bn = make_bn(p + ".bn", d);
    blk.alpha = store_.add(p + ".alpha", Tensor::scalar(cfg_.residual_init));
    br.blocks.push_back(std::move(blk));
  }
  if (cfg_.reinjection) {
    br.alpha_inject = store_.add(prefix + ".alpha_inject", Tensor::scalar(cfg_.residual_init));
  }
  return br;
}

void Model::build(std::uint64_t seed) {
  const std::size_t c = cfg_.input_channels;
  const std::size_t f1 = cfg_.f1, f2 = cfg_.f2(), d = cfg_.embed_dim;
  const std::size_t n = cfg_.n_tokens();

  tok_.conv1 = init_uniform(store_, "tokenizer.conv1.w", {f1, cfg_.temporal_kernel1},
                            cfg_.temporal_kernel1, seed);
  tok_.spatial =
      init_uniform(store_, "tokenizer.spatial.w", {f1, cfg_.depth_multiplier, c}, c, seed);
  tok_.bn1 = make_bn("tokenizer.bn1", f2);
  tok_.dw2 = init_uniform(store_, "tokenizer.dw2.w", {f2, cfg_.temporal_kernel2},
                          cfg_.temporal_kernel2, seed);
  tok_.pw2 = init_uniform(store_, "tokenizer.pw2.w", {f2, f2}, f2, seed);
  tok_.bn2 = make_bn("tokenizer.bn2", f2);
  if (f2 != d) {
    tok_.proj_w = init_uniform(store_, "tokenizer.proj.w", {f2, d}, f2, seed);
    tok_.proj_b = store_.add("tokenizer.proj.b", Tensor::zeros({d}));
  }
  if (cfg_.positional_encoding) {
    tok_.pe = init_normal(store_, "tokenizer.pe", {n, d}, 0.02, seed);
  }

  if (cfg_.fine_branch) fine_ = make_branch("fine", cfg_.fine_kernels, seed);
  if (cfg_.coarse_branch) coarse_ = make_branch("coarse", cfg_.coarse_kernels, seed);

  const bool cross_active = cfg_.inter_attention && cfg_.n_branches() == 2;
  attn_.resize(cfg_.attn_layers);
  for (std::size_t l = 0; l < cfg_.attn_layers; ++l) {
    const std::string lp = ".l" + std::to_string(l);
    if (cfg_.intra_attention) {
      if (cfg_.fine_branch) attn_[l].intra_fine = make_stream("intra_fine" + lp, false, seed);
      if (cfg_.coarse_branch) {
        attn_[l].intra_coarse = make_stream("intra_coarse" + lp, false, seed);
      }
    }
    if (cross_active) {
      attn_[l].cross_fine = make_stream("cross_fine" + lp, true, seed);
      attn_[l].cross_coarse = make_stream("cross_coarse" + lp, true, seed);
    }
  }

  if (cfg_.aggregation == "adaptive") {
    head_.q = init_normal(store_, "head.q", {d}, 0.02, seed);
  }
  const std::size_t pooled = d * cfg_.n_branches();
  head_.cls_w = init_uniform(store_, "cls.w", {pooled, cfg_.n_classes}, pooled, seed);
  head_.cls_b = store_.add("cls.b", Tensor::zeros({cfg_.n_classes}));
}

Tensor Model::apply_bn(const Tensor& x, const BnParams& p, const ForwardCtx& ctx) const {
  Tensor mean = p.mean, var = p.var;
  return batch_norm(x, p.gamma, p.beta, mean, var, ctx.train);
}

Tensor Model::tokenize(const Tensor& x, const ForwardCtx& ctx) const {
  if (x.rank() != 3) {
    throw ShapeError("tokenize: expected [batch, channels, samples], got " + shape_str(x.shape()));
  }
  if (x.extent(1) != cfg_.input_channels) {
    throw ConfigError("tokenize: trial has " + std::to_string(x.extent(1)) +
                      " channels, model is configured for " +
                      std::to_string(cfg_.input_channels));
  }
  if (x.extent(2) != cfg_.input_samples) {
    throw ConfigError("tokenize: trial length " + std::to_string(x.extent(2)) +
                      " does not match the configured " + std::to_string(cfg_.input_samples) +
                      " (positional table is sized at model build)");
  }
  Tensor h = conv_temporal_expand(x, tok_.conv1);
  h = conv_spatial_depthwise(h, tok_.spatial);
  h = apply_bn(h, tok_.bn1, ctx);
  h = gelu(h);
  h = avg_pool1d(h, cfg_.pool1);
  h = dropout(h, cfg_.dropout, ctx.train, ctx.rng);
  h = conv1d_depthwise(h, tok_.dw2);
  h = pointwise_grouped(h, tok_.pw2, 1);
  h = apply_bn(h, tok_.bn2, ctx);
  h = gelu(h);
  h = avg_pool1d(h, cfg_.pool2);
  h = dropout(h, cfg_.dropout, ctx.train, ctx.rng);
  return h;
}

Tensor Model::project_and_encode(const Tensor& f, const ForwardCtx& ctx) const {
  (void)ctx;
  if (f.rank() != 3 || f.extent(1) != cfg_.f2()) {
    throw ShapeError("project_and_encode: expected [batch, " + std::to_string(cfg_.f2()) +
                     ", tokens], got " + shape_str(f.shape()));
  }
  if (f.extent(2) != cfg_.n_tokens()) {
    throw ConfigError("project_and_encode: " + std::to_string(f.extent(2)) +
                      " tokens do not match the positional table built for " +
                      std::to_string(cfg_.n_tokens()));
  }
  Tensor z = transpose(f);
  if (cfg_.f2() != cfg_.embed_dim) {
    z = linear(z, tok_.proj_w, tok_.proj_b);
  }
  z = scale(z, std::sqrt(static_cast<Real>(cfg_.embed_dim)));
  if (cfg_.positional_encoding) {
    z = add_suffix(z, tok_.pe);
  }
  return z;
}

Tensor Model::tc_block(const Tensor& h, const TcBlockParams& p, const ForwardCtx& ctx) const {
  Tensor u = conv1d_depthwise(h, p.dw_w);
  u = add_channel_bias(u, p.dw_b);
  u = gelu(u);
  u = pointwise_grouped(u, p.pw1_w, cfg_.groups);
  u = add_channel_bias(u, p.pw1_b);
  u = gelu(u);
  u = pointwise_grouped(u, p.pw2_w, cfg_.groups);
  u = apply_bn(u, p.bn, ctx);
  return add(h, scale_param(u, p.alpha));
}

Tensor Model::run_branch(const Tensor& z0, const BranchParams& p, const ForwardCtx& ctx) const {
  Tensor h = transpose(z0);
  for (const TcBlockParams& blk : p.blocks) {
    h = tc_block(h, blk, ctx);
  }
  Tensor z = transpose(h);
  if (cfg_.reinjection) {
    z = add(z, scale_param(z0, p.alpha_inject));
  }
  return z;
}

Model::BranchOutputs Model::run_branches(const Tensor& z0, const ForwardCtx& ctx) const {
  if (z0.rank() != 3 || z0.extent(2) != cfg_.embed_dim) {
    throw ShapeError("run_branches: expected [batch, tokens, " + std::to_string(cfg_.embed_dim) +
                     "], got " + shape_str(z0.shape()));
  }
  BranchOutputs out;
  if (cfg_.fine_branch) out.fine = run_branch(z0, fine_, ctx);
  if (cfg_.coarse_branch) out.coarse = run_branch(z0, coarse_, ctx);
  return out;
}

Tensor Model::mha_block(const Tensor& q_src, const Tensor& kv_src, const MhaParams& p,
                        const ForwardCtx& ctx, const char* family, std::size_t layer) const {
  if (q_src.extent(1) != kv_src.extent(1)) {
    throw ShapeError("attention: query stream has " + std::to_string(q_src.extent(1)) +
                     " tokens, key/value stream has " + std::to_string(kv_src.extent(1)));
  }
  const std::size_t heads = cfg_.n_heads;
  const std::size_t head_dim = cfg_.embed_dim / heads;
  const std::size_t nb = q_src.extent(0);
  const std::size_t n = q_src.extent(1);
  Tensor qh = split_heads(linear(q_src, p.wq, p.bq), heads);
  Tensor kh = split_heads(linear(kv_src, p.wk, p.bk), heads);
  Tensor vh = split_heads(linear(kv_src, p.wv, p.bv), heads);
  Tensor scores = scale(bmm(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<Real>(head_dim)));
  Tensor probs = softmax(scores, 2);
  if (ctx.capture) {
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const Real* base = probs.data() + ((b * heads + h) * n) * n;
        ctx.capture->attention.push_back(
            {family, layer, h, b, n, n, std::vector<Real>(base, base + n * n)});
      }
    }
  }
  probs = dropout(probs, cfg_.dropout, ctx.train, ctx.rng);
  Tensor mixed = merge_heads(bmm(probs, vh), heads);
  return linear(mixed, p.wo, p.bo);
}

Tensor Model::ffn_block(const Tensor& x, const FfnParams& p, const ForwardCtx& ctx) const {
  Tensor h = gelu(linear(x, p.w1, p.b1));
  h = dropout(h, cfg_.dropout, ctx.train, ctx.rng);
  return linear(h, p.w2, p.b2);
}

Tensor Model::intra_refine(const Tensor& z, const AttnStreamParams& p, const ForwardCtx& ctx,
                           const char* family, std::size_t layer) const {
  Tensor a = mha_block(z, z, p.mha, ctx, family, layer);
  Tensor h = layer_norm(add(z, a), p.ln1.gamma, p.ln1.beta);
  return layer_norm(add(h, ffn_block(h, p.ffn, ctx)), p.ln2.gamma, p.ln2.beta);
}

std::pair<Tensor, Tensor> Model::inter_interact(const Tensor& zf, const Tensor& zc,
                                                const AttnStreamParams& pf,
                                                const AttnStreamParams& pc, const ForwardCtx& ctx,
                                                std::size_t layer) const {
  // Both directions read the pre-update inputs.
  Tensor af = scale_param(mha_block(zf, zc, pf.mha, ctx, "cross_fine", layer), pf.beta);
  Tensor ac = scale_param(mha_block(zc, zf, pc.mha, ctx, "cross_coarse", layer), pc.beta);
  Tensor hf = layer_norm(add(zf, af), pf.ln1.gamma, pf.ln1.beta);
  Tensor hc = layer_norm(add(zc, ac), pc.ln1.gamma, pc.ln1.beta);
  Tensor of = layer_norm(add(hf, ffn_block(hf, pf.ffn, ctx)), pf.ln2.gamma, pf.ln2.beta);
  Tensor oc = layer_norm(add(hc, ffn_block(hc, pc.ffn, ctx)), pc.ln2.gamma, pc.ln2.beta);
  return {of, oc};
}

Tensor Model::attention(const Tensor& q_src, const Tensor& kv_src, const std::string& family,
                        std::size_t layer, const ForwardCtx& ctx) const {
  if (layer >= attn_.size()) {
    throw ContractError("attention: layer " + std::to_string(layer) + " out of range");
  }
  const AttnLayerParams& lp = attn_[layer];
  const AttnStreamParams* stream = nullptr;
  if (family == "intra_fine") {
    stream = &lp.intra_fine;
  } else if (family == "intra_coarse") {
    stream = &lp.intra_coarse;
  } else if (family == "cross_fine") {
    stream = &lp.cross_fine;
  } else if (family == "cross_coarse") {
    stream = &lp.cross_coarse;
  } else {
    throw ContractError("attention: unknown family '" + family + "'");
  }
  if (!stream->mha.wq.defined()) {
    throw ContractError("attention: family '" + family + "' is disabled in this configuration");
  }
  return mha_block(q_src, kv_src, stream->mha, ctx, family.c_str(), layer);
}

void Model::attentive_stage(BranchOutputs& z, const ForwardCtx& ctx) const {
  const bool cross_active = cfg_.inter_attention && cfg_.n_branches() == 2;
  for (std::size_t l = 0; l < cfg_.attn_layers; ++l) {
    const AttnLayerParams& lp = attn_[l];
    if (cfg_.intra_attention) {
      if (z.fine.defined()) z.fine = intra_refine(z.fine, lp.intra_fine, ctx, "intra_fine", l);
      if (z.coarse.defined()) {
        z.coarse = intra_refine(z.coarse, lp.intra_coarse, ctx, "intra_coarse", l);
      }
    }
    if (cross_active) {
      std::tie(z.fine, z.coarse) =
          inter_interact(z.fine, z.coarse, lp.cross_fine, lp.cross_coarse, ctx, l);
    }
  }
}

Tensor Model::aggregate(const Tensor& z, const std::string& branch, const ForwardCtx& ctx) const {
  if (z.rank() != 3 || z.extent(2) != cfg_.embed_dim) {
    throw ShapeError("aggregate: expected [batch, tokens, " + std::to_string(cfg_.embed_dim) +
                     "], got " + shape_str(z.shape()));
  }
  const std::size_t nb = z.extent(0), n = z.extent(1), d = cfg_.embed_dim;
  Tensor scores;
  if (cfg_.aggregation == "adaptive") {
    scores = reshape(linear(z, reshape(head_.q, {d, 1})), {nb, n});
  } else {
    scores = Tensor::zeros({nb, n});
  }
  Tensor w = softmax(scores, 1);
  if (ctx.capture) {
    for (std::size_t b = 0; b < nb; ++b) {
      ctx.capture->aggregation.push_back(
          {branch, b, std::vector<Real>(w.data() + b * n, w.data() + (b + 1) * n)});
    }
  }
  return reshape(bmm(reshape(w, {nb, 1, n}), z), {nb, d});
}

Tensor Model::classify(const Tensor& pooled) const {
  const std::size_t expected = cfg_.embed_dim * cfg_.n_branches();
  if (pooled.rank() != 2 || pooled.extent(1) != expected) {
    throw ConfigError("classify: pooled width " +
                      std::to_string(pooled.rank() == 2 ? pooled.extent(1) : 0) +
                      " does not match the classifier built for " + std::to_string(expected));
  }
  return linear(pooled, head_.cls_w, head_.cls_b);
}

Tensor Model::forward(const Tensor& x, const ForwardCtx& ctx) const {
  Tensor z0 = project_and_encode(tokenize(x, ctx), ctx);
  BranchOutputs z = run_branches(z0, ctx);
  attentive_stage(z, ctx);
  Tensor pooled;
  if (cfg_.fine_branch && cfg_.coarse_branch) {
    pooled = concat(aggregate(z.fine, "fine", ctx), aggregate(z.coarse, "coarse", ctx), 1);
  } else if (cfg_.fine_branch) {
    pooled = aggregate(z.fine, "fine", ctx);
  } else {
    pooled = aggregate(z.coarse, "coarse", ctx);
  }
  return classify(pooled);
}

Tensor Model::forward_trial(const Tensor& x, const ForwardCtx& ctx) const {
  if (x.rank() != 2) {
    throw ShapeError("forward_trial: expected [channels, samples], got " + shape_str(x.shape()));
  }
  Tensor batched =
      reshape(Tensor::from_data(x.shape(), std::vector<Real>(x.data(), x.data() + x.size())),
              {1, x.extent(0), x.extent(1)});
  return reshape(forward(batched, ctx), {cfg_.n_classes});
}

std::vector<Real> Model::saliency(const Tensor& x, const std::vector<int>& labels) const {
  if (x.rank() != 3) {
    throw ShapeError("saliency: expected [batch, channels, samples], got " + shape_str(x.shape()));
  }
  Tensor input =
      Tensor::from_data(x.shape(), std::vector<Real>(x.data(), x.data() + x.size()), true);
  Tape tape;
  {
    TapeScope scope(tape);
    ForwardCtx ctx;
    Tensor logits = forward(input, ctx);
    tape.backward(sum_all(pick(logits, labels)));
  }
  const std::size_t nb = x.extent(0), c = x.extent(1), t = x.extent(2);
  std::vector<Real> out(c, 0.0);
  const std::vector<Real>& g = input.grad_vector();
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      Real acc = 0.0;
      const Real* row = g.data() + (b * c + ch) * t;
      for (std::size_t i = 0; i < t; ++i) acc += std::abs(row[i]);
      out[ch] += acc;
    }
  }
  for (Real& v : out) v /= static_cast<Real>(nb * t);
  for (const auto& [name, p] : store_.params()) Tensor(p).zero_grad();
  return out;
}

std::size_t Model::mac_count() const {
  const ModelConfig& a = cfg_;
  const std::size_t c = a.input_channels, t = a.input_samples;
  const std::size_t f1 = a.f1, f2 = a.f2(), d = a.embed_dim, n = a.n_tokens();
  const std::size_t t1 = t / a.pool1;
  std::size_t macs = 0;
  macs += f1 * a.temporal_kernel1 * c * t;
  macs += f2 * c * t;
  macs += f2 * a.temporal_kernel2 * t1;
  macs += f2 * f2 * t1;
  if (f2 != d) macs += n * f2 * d;
  auto branch_macs = [&](const std::vector<std::size_t>& kernels) {
    std::size_t m = 0;
    const std::size_t dh = d * a.expansion_ratio;
    for (std::size_t k : kernels) {
      m += d * k * n;
      m += dh * (d / a.groups) * n;
      m += d * (dh / a.groups) * n;
    }
    return m;
  };
  if (a.fine_branch) macs += branch_macs(a.fine_kernels);
  if (a.coarse_branch) macs += branch_macs(a.coarse_kernels);
  const std::size_t stream = 4 * n * d * d + 2 * n * n * d + 2 * n * d * (d * a.ffn_ratio);
  std::size_t streams = 0;
  if (a.intra_attention) streams += a.n_branches();
  if (a.inter_attention && a.n_branches() == 2) streams += 2;
  macs += a.attn_layers * streams * stream;
  if (a.aggregation == "adaptive") macs += a.n_branches() * n * d;
  macs += a.n_branches() * n * d;
  macs += a.n_branches() * d * a.n_classes;
  return macs;
}

const char* Model::mac_convention() {
  return "multiplies in convolutions, linear projections, and attention products "
         "(scores and weighted values); normalization, activations, softmax, pooling, "
         "and bias additions excluded";
}

namespace {
constexpr char kCheckpointMagic[4] = {'D', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const Config& cfg, const ParamStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  out.write(kCheckpointMagic, 4);
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof(kCheckpointVersion));
  const std::string text = serialize_config(cfg);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  store.save_records(out);
  if (!out) throw DataError("checkpoint: write failed for '" + path + "'");
}

LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw DataError("checkpoint: '" + path + "' is not a checkpoint file");
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw DataError("checkpoint: truncated header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("checkpoint: truncated config text");
  Config cfg = parse_config(text);
  validate(cfg);
  LoadedModel loaded{cfg, Model(cfg.arch, 0)};
  loaded.model.params().load_records(in);
  return loaded;
}

}  // namespace dsai
