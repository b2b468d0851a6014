#include "pasta/vit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <fmt/format.h>

#include "pasta/container.hpp"

namespace pasta {

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr float kInitStd = 0.02f;
constexpr char kCheckpointVersion[] = "pasta-ckpt-v1";

template <typename S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x / std::numbers::sqrt2_v<S>));
}

template <typename S>
S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x / std::numbers::sqrt2_v<S>));
  const S pdf = std::exp(S(-0.5) * x * x) / std::sqrt(S(2) * std::numbers::pi_v<S>);
  return cdf + x * pdf;
}

// Row-wise layer norm; keeps the normalized input and inverse std for backward.
template <typename S>
void layer_norm(const Mat<S>& x, const ConstMatMap<S>& gain, const ConstMatMap<S>& bias,
                Mat<S>* xhat, Vec<S>* rstd, Mat<S>* out) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  xhat->resize(rows, cols);
  rstd->resize(rows);
  out->resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const S mean = x.row(r).mean();
    const S var = (x.row(r).array() - mean).square().mean();
    const S inv = S(1) / std::sqrt(var + S(kLayerNormEps));
    (*rstd)(r) = inv;
    xhat->row(r) = (x.row(r).array() - mean) * inv;
    out->row(r) = xhat->row(r).cwiseProduct(gain.row(0)) + bias.row(0);
  }
}

template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dout, const Mat<S>& xhat, const Vec<S>& rstd,
                           const ConstMatMap<S>& gain, S* dgain, S* dbias) {
  const Eigen::Index cols = dout.cols();
  Mat<S> dx(dout.rows(), cols);
  Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> dg(dgain, cols);
  Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> db(dbias, cols);
  for (Eigen::Index r = 0; r < dout.rows(); ++r) {
    if (dgain != nullptr) {
      dg += dout.row(r).cwiseProduct(xhat.row(r));
      db += dout.row(r);
    }
    const Eigen::Matrix<S, 1, Eigen::Dynamic> dxhat = dout.row(r).cwiseProduct(gain.row(0));
    const S mean_d = dxhat.mean();
    const S mean_dx = dxhat.cwiseProduct(xhat.row(r)).mean();
    dx.row(r) = rstd(r) * (dxhat.array() - mean_d - xhat.row(r).array() * mean_dx);
  }
  return dx;
}

template <typename S>
void softmax_rows(Mat<S>* m) {
  for (Eigen::Index r = 0; r < m->rows(); ++r) {
    const S mx = m->row(r).maxCoeff();
    m->row(r) = (m->row(r).array() - mx).exp();
    m->row(r) /= m->row(r).sum();
  }
}

float truncated_normal(std::mt19937_64& rng) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  while (true) {
    const float z = normal(rng);
    if (std::abs(z) <= 2.0f) return z * kInitStd;
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (image_size <= 0 || channels <= 0 || patch_size <= 0 || embed_dim <= 0 ||
      num_heads <= 0 || mlp_ratio <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError(fmt::format("patch size {} does not divide image size {}", patch_size,
                                  image_size));
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError(fmt::format("embed_dim {} is not divisible by num_heads {}", embed_dim,
                                  num_heads));
  }
  if (depth < 1) throw ConfigError("depth must be at least 1");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
}

ParamLayout::ParamLayout(const ModelConfig& config) {
  config.validate();
  using I = ParamEntry::Init;
  const int d = config.embed_dim;
  const int m = config.mlp_dim();
  patch_w = add("patch_embed.weight", {config.patch_dim(), d}, I::kTruncNormal);
  patch_b = add("patch_embed.bias", {d}, I::kZeros);
  cls = add("cls_token", {d}, I::kTruncNormal);
  pos = add("pos_embed", {config.num_tokens(), d}, I::kTruncNormal);
  for (int l = 0; l < config.depth; ++l) {
    const std::string p = fmt::format("blocks.{}.", l);
    Block b{};
    b.norm1_w = add(p + "norm1.weight", {d}, I::kOnes);
    b.norm1_b = add(p + "norm1.bias", {d}, I::kZeros);
    b.qkv_w = add(p + "attn.qkv.weight", {d, 3 * d}, I::kTruncNormal);
    b.qkv_b = add(p + "attn.qkv.bias", {3 * d}, I::kZeros);
    b.proj_w = add(p + "attn.proj.weight", {d, d}, I::kTruncNormal);
    b.proj_b = add(p + "attn.proj.bias", {d}, I::kZeros);
    b.norm2_w = add(p + "norm2.weight", {d}, I::kOnes);
    b.norm2_b = add(p + "norm2.bias", {d}, I::kZeros);
    b.fc1_w = add(p + "mlp.fc1.weight", {d, m}, I::kTruncNormal);
    b.fc1_b = add(p + "mlp.fc1.bias", {m}, I::kZeros);
    b.fc2_w = add(p + "mlp.fc2.weight", {m, d}, I::kTruncNormal);
    b.fc2_b = add(p + "mlp.fc2.bias", {d}, I::kZeros);
    blocks.push_back(b);
  }
  norm_w = add("norm.weight", {d}, I::kOnes);
  norm_b = add("norm.bias", {d}, I::kZeros);
  head_w = add("head.weight", {d, config.num_classes}, I::kTruncNormal);
  head_b = add("head.bias", {config.num_classes}, I::kZeros);
}

std::size_t ParamLayout::add(std::string name, std::vector<int> shape, ParamEntry::Init init) {
  std::size_t size = 1;
  for (int s : shape) size *= static_cast<std::size_t>(s);
  entries_.push_back({std::move(name), std::move(shape), total_, size, init});
  total_ += size;
  return entries_.back().offset;
}

const ParamEntry& ParamLayout::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw ConfigError("unknown parameter tensor: " + name);
}

namespace {
std::pair<int, int> matrix_shape(const ParamEntry& e) {
  if (e.shape.size() == 1) return {1, e.shape[0]};
  return {e.shape[0], e.shape[1]};
}
}  // namespace

template <typename S>
MatMap<S> ViTParams<S>::tensor(const std::string& name) {
  const auto& e = layout().find(name);
  const auto [r, c] = matrix_shape(e);
  return mat(e.offset, r, c);
}

template <typename S>
ConstMatMap<S> ViTParams<S>::tensor(const std::string& name) const {
  const auto& e = layout().find(name);
  const auto [r, c] = matrix_shape(e);
  return mat(e.offset, r, c);
}

template <typename S>
ViTParams<S> zero_params(const ModelConfig& config) {
  ViTParams<S> p;
  p.config = config;
  p.layout_ = std::make_shared<const ParamLayout>(config);
  p.data = Vec<S>::Zero(static_cast<Eigen::Index>(p.layout_->total_size()));
  return p;
}

ViTParams<float> init_model(const ModelConfig& config, std::uint64_t seed) {
  auto p = zero_params<float>(config);
  p.seed = seed;
  std::mt19937_64 rng(seed);
  for (const auto& e : p.layout().entries()) {
    for (std::size_t k = 0; k < e.size; ++k) {
      float v = 0.0f;
      if (e.init == ParamEntry::Init::kTruncNormal) v = truncated_normal(rng);
      if (e.init == ParamEntry::Init::kOnes) v = 1.0f;
      p.data(static_cast<Eigen::Index>(e.offset + k)) = v;
    }
  }
  return p;
}

template <typename S>
Mat<S> AttentionStack<S>::head_mean(int layer) const {
  Mat<S> mean = Mat<S>::Zero(tokens, tokens);
  for (int h = 0; h < heads; ++h) mean += head(layer, h);
  return mean / static_cast<S>(heads);
}

template <typename S>
ForwardResult<S> forward(const ViTParams<S>& params, const Mat<S>& images,
                         ForwardOptions options) {
  const ModelConfig& cfg = params.config;
  const ParamLayout& lay = params.layout();
  if (images.cols() != cfg.image_dim()) {
    throw DimensionError(fmt::format("image row has {} values, model expects {}", images.cols(),
                                     cfg.image_dim()));
  }
  if (options.keep_cache) options.keep_attention = true;

  const int batch = static_cast<int>(images.rows());
  const int n = cfg.num_patches();
  const int tokens = cfg.num_tokens();
  const int d = cfg.embed_dim;
  const int heads = cfg.num_heads;
  const int hd = cfg.head_dim();
  const int p = cfg.patch_size;
  const int g = cfg.grid_size();
  const int side = cfg.image_size;
  const int pdim = cfg.patch_dim();
  const int m = cfg.mlp_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(hd));

  ForwardResult<S> out;
  ForwardCache<S>& cache = out.cache;

  Mat<S> patches(batch * n, pdim);
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < n; ++i) {
      const int r0 = (i / g) * p;
      const int c0 = (i % g) * p;
      for (int ch = 0; ch < cfg.channels; ++ch) {
        for (int py = 0; py < p; ++py) {
          for (int px = 0; px < p; ++px) {
            patches(b * n + i, (ch * p + py) * p + px) =
                images(b, (ch * side + r0 + py) * side + c0 + px);
          }
        }
      }
    }
  }

  Mat<S> z(batch * tokens, d);
  {
    Mat<S> emb;
    emb.noalias() = patches * params.mat(lay.patch_w, pdim, d);
    emb.rowwise() += params.mat(lay.patch_b, 1, d).row(0);
    const auto cls = params.mat(lay.cls, 1, d);
    const auto pos = params.mat(lay.pos, tokens, d);
    for (int b = 0; b < batch; ++b) {
      z.row(b * tokens) = cls.row(0);
      z.middleRows(b * tokens + 1, n) = emb.middleRows(b * n, n);
      if (cfg.use_pos_embed) z.middleRows(b * tokens, tokens) += pos;
    }
  }
  if (options.keep_cache) cache.patches = std::move(patches);

  if (options.keep_attention) {
    out.attention.resize(batch);
    for (auto& a : out.attention) {
      a.heads = heads;
      a.tokens = tokens;
      a.layers.assign(cfg.depth, Mat<S>(heads * tokens, tokens));
    }
  }

  for (int l = 0; l < cfg.depth; ++l) {
    const auto& blk = lay.blocks[l];
    typename ForwardCache<S>::Block bc;
    layer_norm<S>(z, params.mat(blk.norm1_w, 1, d), params.mat(blk.norm1_b, 1, d), &bc.xhat1,
                  &bc.rstd1, &bc.a1);
    bc.qkv.noalias() = bc.a1 * params.mat(blk.qkv_w, d, 3 * d);
    bc.qkv.rowwise() += params.mat(blk.qkv_b, 1, 3 * d).row(0);

    bc.ctx.resize(batch * tokens, d);
    Mat<S> probs(tokens, tokens);
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        const auto q = bc.qkv.block(b * tokens, h * hd, tokens, hd);
        const auto k = bc.qkv.block(b * tokens, d + h * hd, tokens, hd);
        const auto v = bc.qkv.block(b * tokens, 2 * d + h * hd, tokens, hd);
        probs.noalias() = q * k.transpose();
        probs *= scale;
        softmax_rows(&probs);
        bc.ctx.block(b * tokens, h * hd, tokens, hd).noalias() = probs * v;
        if (options.keep_attention) out.attention[b].layers[l].middleRows(h * tokens, tokens) = probs;
      }
    }

    bc.z1 = z;
    bc.z1.noalias() += bc.ctx * params.mat(blk.proj_w, d, d);
    bc.z1.rowwise() += params.mat(blk.proj_b, 1, d).row(0);

    layer_norm<S>(bc.z1, params.mat(blk.norm2_w, 1, d), params.mat(blk.norm2_b, 1, d),
                  &bc.xhat2, &bc.rstd2, &bc.a2);
    bc.hpre.noalias() = bc.a2 * params.mat(blk.fc1_w, d, m);
    bc.hpre.rowwise() += params.mat(blk.fc1_b, 1, m).row(0);
    bc.act = bc.hpre.unaryExpr([](S x) { return gelu(x); });
    z = bc.z1;
    z.noalias() += bc.act * params.mat(blk.fc2_w, m, d);
    z.rowwise() += params.mat(blk.fc2_b, 1, d).row(0);

    if (options.keep_cache) cache.blocks.push_back(std::move(bc));
  }

  Mat<S> cls_tokens(batch, d);
  for (int b = 0; b < batch; ++b) cls_tokens.row(b) = z.row(b * tokens);
  Mat<S> xhat_f, cls_out;
  Vec<S> rstd_f;
  layer_norm<S>(cls_tokens, params.mat(lay.norm_w, 1, d), params.mat(lay.norm_b, 1, d), &xhat_f,
                &rstd_f, &cls_out);
  out.logits.noalias() = cls_out * params.mat(lay.head_w, d, cfg.num_classes);
  out.logits.rowwise() += params.mat(lay.head_b, 1, cfg.num_classes).row(0);

  if (options.keep_cache) {
    cache.xhat_f = std::move(xhat_f);
    cache.cls_out = std::move(cls_out);
    cache.rstd_f = std::move(rstd_f);
  }
  return out;
}

template <typename S>
Gradients<S> backward(const ViTParams<S>& params, const ForwardResult<S>& fwd,
                      const Mat<S>& dlogits, const std::vector<AttentionStack<S>>* dattention,
                      BackwardOptions options) {
  const ModelConfig& cfg = params.config;
  const ParamLayout& lay = params.layout();
  const ForwardCache<S>& cache = fwd.cache;
  if (cache.blocks.size() != static_cast<std::size_t>(cfg.depth)) {
    throw DimensionError("backward requires a forward pass with keep_cache");
  }
  const int batch = static_cast<int>(fwd.logits.rows());
  if (dlogits.rows() != batch || dlogits.cols() != cfg.num_classes) {
    throw DimensionError("dlogits shape does not match the forward batch");
  }
  if (dattention != nullptr && static_cast<int>(dattention->size()) != batch) {
    throw DimensionError("attention gradient must hold one stack per image");
  }

  const int n = cfg.num_patches();
  const int tokens = cfg.num_tokens();
  const int d = cfg.embed_dim;
  const int heads = cfg.num_heads;
  const int hd = cfg.head_dim();
  const int m = cfg.mlp_dim();
  const int pdim = cfg.patch_dim();
  const int kc = cfg.num_classes;
  const S scale = S(1) / std::sqrt(static_cast<S>(hd));

  Gradients<S> grads;
  // Parameter gradients are always accumulated (cheap relative to the matmuls
  // that produce the input gradient) and dropped at the end if not requested.
  Vec<S> gp = Vec<S>::Zero(params.data.size());
  auto gmat = [&gp](std::size_t off, int r, int c) { return MatMap<S>(gp.data() + off, r, c); };

  gmat(lay.head_w, d, kc).noalias() += cache.cls_out.transpose() * dlogits;
  gmat(lay.head_b, 1, kc) += dlogits.colwise().sum();
  Mat<S> dcls_out;
  dcls_out.noalias() = dlogits * params.mat(lay.head_w, d, kc).transpose();
  const Mat<S> dcls = layer_norm_backward<S>(dcls_out, cache.xhat_f, cache.rstd_f,
                                             params.mat(lay.norm_w, 1, d), gp.data() + lay.norm_w,
                                             gp.data() + lay.norm_b);

  Mat<S> dz = Mat<S>::Zero(batch * tokens, d);
  for (int b = 0; b < batch; ++b) dz.row(b * tokens) = dcls.row(b);

  Mat<S> dprobs(tokens, tokens);
  Mat<S> dscores(tokens, tokens);
  for (int l = cfg.depth - 1; l >= 0; --l) {
    const auto& blk = lay.blocks[l];
    const auto& bc = cache.blocks[l];

    // MLP branch: z = z1 + gelu(LN2(z1) W1 + b1) W2 + b2
    gmat(blk.fc2_w, m, d).noalias() += bc.act.transpose() * dz;
    gmat(blk.fc2_b, 1, d) += dz.colwise().sum();
    Mat<S> dh;
    dh.noalias() = dz * params.mat(blk.fc2_w, m, d).transpose();
    dh.array() *= bc.hpre.unaryExpr([](S x) { return gelu_grad(x); }).array();
    gmat(blk.fc1_w, d, m).noalias() += bc.a2.transpose() * dh;
    gmat(blk.fc1_b, 1, m) += dh.colwise().sum();
    Mat<S> da2;
    da2.noalias() = dh * params.mat(blk.fc1_w, d, m).transpose();
    Mat<S> dz1 = dz;
    dz1 += layer_norm_backward<S>(da2, bc.xhat2, bc.rstd2, params.mat(blk.norm2_w, 1, d),
                                  gp.data() + blk.norm2_w, gp.data() + blk.norm2_b);

    // Attention branch: z1 = z + ctx Wp + bp
    gmat(blk.proj_w, d, d).noalias() += bc.ctx.transpose() * dz1;
    gmat(blk.proj_b, 1, d) += dz1.colwise().sum();
    Mat<S> dctx;
    dctx.noalias() = dz1 * params.mat(blk.proj_w, d, d).transpose();

    Mat<S> dqkv(batch * tokens, 3 * d);
    for (int b = 0; b < batch; ++b) {
      const Mat<S>* extra = nullptr;
      if (dattention != nullptr) {
        const auto& st = (*dattention)[b];
        if (l < st.depth() && st.layers[l].size() > 0) extra = &st.layers[l];
      }
      for (int h = 0; h < heads; ++h) {
        const auto q = bc.qkv.block(b * tokens, h * hd, tokens, hd);
        const auto k = bc.qkv.block(b * tokens, d + h * hd, tokens, hd);
        const auto v = bc.qkv.block(b * tokens, 2 * d + h * hd, tokens, hd);
        const auto probs = fwd.attention[b].layers[l].middleRows(h * tokens, tokens);
        const auto dout = dctx.block(b * tokens, h * hd, tokens, hd);

        dprobs.noalias() = dout * v.transpose();
        if (extra != nullptr) dprobs += extra->middleRows(h * tokens, tokens);
        dqkv.block(b * tokens, 2 * d + h * hd, tokens, hd).noalias() = probs.transpose() * dout;

        // softmax backward, row-wise
        const Vec<S> inner = probs.cwiseProduct(dprobs).rowwise().sum();
        dscores = probs.cwiseProduct(dprobs.colwise() - inner);
        dscores *= scale;
        dqkv.block(b * tokens, h * hd, tokens, hd).noalias() = dscores * k;
        dqkv.block(b * tokens, d + h * hd, tokens, hd).noalias() = dscores.transpose() * q;
      }
    }
    gmat(blk.qkv_w, d, 3 * d).noalias() += bc.a1.transpose() * dqkv;
    gmat(blk.qkv_b, 1, 3 * d) += dqkv.colwise().sum();
    Mat<S> da1;
    da1.noalias() = dqkv * params.mat(blk.qkv_w, d, 3 * d).transpose();
    dz = dz1;
    dz += layer_norm_backward<S>(da1, bc.xhat1, bc.rstd1, params.mat(blk.norm1_w, 1, d),
                                 gp.data() + blk.norm1_w, gp.data() + blk.norm1_b);
  }

  Mat<S> dpatch(batch * n, d);
  auto gcls = gmat(lay.cls, 1, d);
  auto gpos = gmat(lay.pos, tokens, d);
  for (int b = 0; b < batch; ++b) {
    gcls += dz.row(b * tokens);
    if (cfg.use_pos_embed) gpos += dz.middleRows(b * tokens, tokens);
    dpatch.middleRows(b * n, n) = dz.middleRows(b * tokens + 1, n);
  }
  gmat(lay.patch_w, pdim, d).noalias() += cache.patches.transpose() * dpatch;
  gmat(lay.patch_b, 1, d) += dpatch.colwise().sum();

  if (options.inputs) {
    Mat<S> dpatches;
    dpatches.noalias() = dpatch * params.mat(lay.patch_w, pdim, d).transpose();
    const int p = cfg.patch_size;
    const int g = cfg.grid_size();
    const int side = cfg.image_size;
    grads.images.resize(batch, cfg.image_dim());
    for (int b = 0; b < batch; ++b) {
      for (int i = 0; i < n; ++i) {
        const int r0 = (i / g) * p;
        const int c0 = (i % g) * p;
        for (int ch = 0; ch < cfg.channels; ++ch) {
          for (int py = 0; py < p; ++py) {
            for (int px = 0; px < p; ++px) {
              grads.images(b, (ch * side + r0 + py) * side + c0 + px) =
                  dpatches(b * n + i, (ch * p + py) * p + px);
            }
          }
        }
      }
    }
  }
  if (options.params) grads.params = std::move(gp);
  return grads;
}

template <typename S>
Mat<S> attention_map(const AttentionStack<S>& attn, int upto_layer) {
  if (upto_layer < 1 || upto_layer > attn.depth()) {
    throw std::out_of_range(
        fmt::format("attention layer {} outside [1, {}]", upto_layer, attn.depth()));
  }
  Mat<S> map = attn.head_mean(0);
  for (int l = 1; l < upto_layer; ++l) map = (attn.head_mean(l) * map).eval();
  return map;
}

template <typename S>
Mat<S> attention_rollout(const AttentionStack<S>& attn) {
  if (attn.depth() < 1) throw DimensionError("rollout needs at least one layer");
  const int t = attn.tokens;
  const int n = t - 1;
  const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (g * g != n) throw DimensionError("patch tokens do not form a square grid");

  Mat<S> rollout = Mat<S>::Identity(t, t);
  for (int l = 0; l < attn.depth(); ++l) {
    Mat<S> a = S(0.5) * (attn.head_mean(l) + Mat<S>::Identity(t, t));
    for (int r = 0; r < t; ++r) a.row(r) /= a.row(r).sum();
    rollout = (a * rollout).eval();
  }
  Mat<S> grid(g, g);
  for (int i = 0; i < n; ++i) grid(i / g, i % g) = rollout(0, i + 1);
  const S mx = grid.maxCoeff();
  if (mx > S(0)) grid /= mx;
  return grid;
}

template <typename S>
S cross_entropy(const Mat<S>& logits, const std::vector<int>& labels, Mat<S>* grad) {
  const Eigen::Index batch = logits.rows();
  if (static_cast<Eigen::Index>(labels.size()) != batch) {
    throw DimensionError("label count does not match logits");
  }
  if (grad != nullptr) grad->setZero(batch, logits.cols());
  if (batch == 0) return S(0);
  S total = 0;
  for (Eigen::Index b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || y >= logits.cols()) throw DimensionError(fmt::format("label {} out of range", y));
    const S mx = logits.row(b).maxCoeff();
    const auto shifted = (logits.row(b).array() - mx).eval();
    const S lse = std::log(shifted.exp().sum());
    total += lse - shifted(y);
    if (grad != nullptr) {
      grad->row(b) = (shifted - lse).exp().matrix();
      (*grad)(b, y) -= S(1);
    }
  }
  if (grad != nullptr) *grad /= static_cast<S>(batch);
  return total / static_cast<S>(batch);
}

template <typename S>
std::vector<int> argmax_rows(const Mat<S>& logits) {
  std::vector<int> out(logits.rows());
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    Eigen::Index idx = 0;
    logits.row(b).maxCoeff(&idx);
    out[b] = static_cast<int>(idx);
  }
  return out;
}

void save_checkpoint(const ViTParams<float>& params, const std::filesystem::path& path) {
  const ModelConfig& c = params.config;
  Container box;
  box.version = kCheckpointVersion;
  box.header["seed"] = params.seed;
  box.header["config"] = {{"image_size", c.image_size},   {"channels", c.channels},
                          {"patch_size", c.patch_size},   {"embed_dim", c.embed_dim},
                          {"num_heads", c.num_heads},     {"depth", c.depth},
                          {"mlp_ratio", c.mlp_ratio},     {"num_classes", c.num_classes},
                          {"use_pos_embed", c.use_pos_embed}};
  auto& tensors = box.header["tensors"] = nlohmann::json::array();
  for (const auto& e : params.layout().entries()) {
    tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}});
  }
  box.payload.assign(params.data.data(), params.data.data() + params.data.size());
  write_container(path, box);
}

ViTParams<float> load_checkpoint(const std::filesystem::path& path) {
  const Container box = read_container(path, kCheckpointVersion);
  try {
    const auto& jc = box.header.at("config");
    ModelConfig c;
    c.image_size = jc.at("image_size");
    c.channels = jc.at("channels");
    c.patch_size = jc.at("patch_size");
    c.embed_dim = jc.at("embed_dim");
    c.num_heads = jc.at("num_heads");
    c.depth = jc.at("depth");
    c.mlp_ratio = jc.at("mlp_ratio");
    c.num_classes = jc.at("num_classes");
    c.use_pos_embed = jc.at("use_pos_embed");
    auto params = zero_params<float>(c);
    params.seed = box.header.at("seed");
    for (const auto& jt : box.header.at("tensors")) {
      const auto& e = params.layout().find(jt.at("name"));
      if (jt.at("shape").get<std::vector<int>>() != e.shape) {
        throw IngestionError("tensor shape mismatch for " + e.name);
      }
      const std::size_t off = jt.at("offset");
      if (off + e.size > box.payload.size()) throw IngestionError("truncated tensor " + e.name);
      std::copy_n(box.payload.begin() + static_cast<std::ptrdiff_t>(off), e.size,
                  params.data.data() + e.offset);
    }
    return params;
  } catch (const nlohmann::json::exception& ex) {
    throw IngestionError(fmt::format("{}: malformed checkpoint header ({})", path.string(),
                                     ex.what()));
  }
}

#define PASTA_INSTANTIATE_VIT(S)                                                              \
  template struct ViTParams<S>;                                                               \
  template struct AttentionStack<S>;                                                          \
  template ViTParams<S> zero_params<S>(const ModelConfig&);                                   \
  template ForwardResult<S> forward<S>(const ViTParams<S>&, const Mat<S>&, ForwardOptions);   \
  template Gradients<S> backward<S>(const ViTParams<S>&, const ForwardResult<S>&,             \
                                    const Mat<S>&, const std::vector<AttentionStack<S>>*,     \
                                    BackwardOptions);                                         \
  template Mat<S> attention_map<S>(const AttentionStack<S>&, int);                            \
  template Mat<S> attention_rollout<S>(const AttentionStack<S>&);                             \
  template S cross_entropy<S>(const Mat<S>&, const std::vector<int>&, Mat<S>*);               \
  template std::vector<int> argmax_rows<S>(const Mat<S>&);

PASTA_INSTANTIATE_VIT(float)
PASTA_INSTANTIATE_VIT(double)

}  // namespace pasta
