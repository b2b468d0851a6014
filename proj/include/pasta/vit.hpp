#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "pasta/common.hpp"

namespace pasta {

struct ModelConfig {
  int image_size = 32;
  int channels = 3;
  int patch_size = 4;
  int embed_dim = 128;
  int num_heads = 4;
  int depth = 6;
  int mlp_ratio = 4;
  int num_classes = 10;
  bool use_pos_embed = true;

  int grid_size() const { return image_size / patch_size; }
  int num_patches() const { return grid_size() * grid_size(); }
  int num_tokens() const { return num_patches() + 1; }
  int head_dim() const { return embed_dim / num_heads; }
  int mlp_dim() const { return embed_dim * mlp_ratio; }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int image_dim() const { return channels * image_size * image_size; }

  // Throws ConfigError on any inconsistent dimension.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// One named tensor inside the flat parameter vector.
struct ParamEntry {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  enum class Init { kTruncNormal, kZeros, kOnes } init = Init::kZeros;
};

// Offsets of every parameter tensor in the flat vector. Weight matrices are
// stored row-major as [in, out] so that y = x W + b.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& config);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::size_t total_size() const { return total_; }
  const ParamEntry& find(const std::string& name) const;

  struct Block {
    std::size_t norm1_w, norm1_b, qkv_w, qkv_b, proj_w, proj_b;
    std::size_t norm2_w, norm2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  std::size_t patch_w, patch_b, cls, pos, norm_w, norm_b, head_w, head_b;
  std::vector<Block> blocks;

 private:
  std::size_t add(std::string name, std::vector<int> shape, ParamEntry::Init init);

  std::vector<ParamEntry> entries_;
  std::size_t total_ = 0;
};

template <typename S>
struct ViTParams {
  ModelConfig config;
  std::uint64_t seed = 0;
  Vec<S> data;

  const ParamLayout& layout() const { return *layout_; }

  MatMap<S> mat(std::size_t offset, int rows, int cols) {
    return MatMap<S>(data.data() + offset, rows, cols);
  }
  ConstMatMap<S> mat(std::size_t offset, int rows, int cols) const {
    return ConstMatMap<S>(data.data() + offset, rows, cols);
  }
  // Named access, e.g. tensor("blocks.0.attn.qkv.weight").
  MatMap<S> tensor(const std::string& name);
  ConstMatMap<S> tensor(const std::string& name) const;

  template <typename T>
  ViTParams<T> cast() const {
    ViTParams<T> out;
    out.config = config;
    out.seed = seed;
    out.data = data.template cast<T>();
    out.layout_ = layout_;
    return out;
  }

  std::shared_ptr<const ParamLayout> layout_;
};

// Zero-filled parameters with the layout of `config`.
template <typename S>
ViTParams<S> zero_params(const ModelConfig& config);

// Truncated normal (std 0.02, cut at two std) for projections and embeddings,
// zeros for biases, ones for layer-norm gains.
ViTParams<float> init_model(const ModelConfig& config, std::uint64_t seed);

// Per-image attention probabilities: for each layer a (heads * tokens) x tokens
// matrix, head h occupying rows [h * tokens, (h + 1) * tokens).
template <typename S>
struct AttentionStack {
  int heads = 0;
  int tokens = 0;
  std::vector<Mat<S>> layers;

  int depth() const { return static_cast<int>(layers.size()); }
  auto head(int layer, int h) const { return layers[layer].middleRows(h * tokens, tokens); }
  Mat<S> head_mean(int layer) const;
};

template <typename S>
struct ImageBatch {
  Mat<S> images;  // B x (C * H * W), channel-major within a row
  std::vector<int> labels;

  int size() const { return static_cast<int>(images.rows()); }
};

// Everything the backward pass needs. Populated only when requested.
template <typename S>
struct ForwardCache {
  struct Block {
    Mat<S> xhat1, a1, qkv, ctx, z1, xhat2, a2, hpre, act;
    Vec<S> rstd1, rstd2;
  };
  Mat<S> patches;  // (B * n) x patch_dim
  std::vector<Block> blocks;
  Mat<S> xhat_f, cls_out;
  Vec<S> rstd_f;
};

struct ForwardOptions {
  bool keep_attention = true;
  bool keep_cache = false;
};

template <typename S>
struct ForwardResult {
  Mat<S> logits;                             // B x num_classes
  std::vector<AttentionStack<S>> attention;  // one per image when retained
  ForwardCache<S> cache;
};

template <typename S>
ForwardResult<S> forward(const ViTParams<S>& params, const Mat<S>& images,
                         ForwardOptions options = {});

template <typename S>
struct Gradients {
  Vec<S> params;   // same layout as ViTParams::data; empty if not requested
  Mat<S> images;   // B x image_dim; empty if not requested
};

struct BackwardOptions {
  bool params = true;
  bool inputs = false;
};

// Reverse pass from upstream gradients on the logits and, optionally, on the
// attention probabilities of each image (layers left empty carry no gradient).
// Requires a forward pass run with keep_cache and keep_attention.
template <typename S>
Gradients<S> backward(const ViTParams<S>& params, const ForwardResult<S>& fwd,
                      const Mat<S>& dlogits,
                      const std::vector<AttentionStack<S>>* dattention,
                      BackwardOptions options = {});

template <typename S>
Gradients<S> backward(const ViTParams<S>& params, const ForwardResult<S>& fwd,
                      const Mat<S>& dlogits, BackwardOptions options = {}) {
  return backward<S>(params, fwd, dlogits, nullptr, options);
}

// Composition of head-averaged attention matrices of layers [0, upto_layer):
// A_{upto-1} * ... * A_0.
template <typename S>
Mat<S> attention_map(const AttentionStack<S>& attn, int upto_layer);

// Attention rollout with 0.5 residual mixing and mean head fusion. Returns the
// class-token row over patch tokens as a g x g grid, max-normalized to [0, 1].
template <typename S>
Mat<S> attention_rollout(const AttentionStack<S>& attn);

// Softmax cross-entropy averaged over the rows. Writes d(loss)/d(logits) when
// grad is non-null. An empty batch yields 0.
template <typename S>
S cross_entropy(const Mat<S>& logits, const std::vector<int>& labels, Mat<S>* grad);

template <typename S>
std::vector<int> argmax_rows(const Mat<S>& logits);

void save_checkpoint(const ViTParams<float>& params, const std::filesystem::path& path);
ViTParams<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace pasta
