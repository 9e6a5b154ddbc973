#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "spexit/model.hpp"
#include "spexit/rng.hpp"

namespace spexit {

/// Shape of the miniature decoder-only transformer and its early-exit head.
struct NanoConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_layers = 8;
  std::size_t d_ff = 512;
  std::size_t max_seq_len = 512;
  /// Number of target layers shared with the draft path (N).
  std::size_t exit_after = 2;
  /// Transformer layers in the early-exit block.
  std::size_t exit_depth = 1;
  float norm_eps = 1e-5f;
  float rope_base = 10000.0f;

  void validate() const;
  [[nodiscard]] std::size_t head_dim() const { return d_model / n_heads; }

  friend bool operator==(const NanoConfig&, const NanoConfig&) = default;
};

/// Row-major float tensor.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> values;

  static Tensor zeros(std::vector<std::size_t> shape);
  [[nodiscard]] std::size_t numel() const { return values.size(); }
  [[nodiscard]] float* data() { return values.data(); }
  [[nodiscard]] const float* data() const { return values.data(); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Pre-norm transformer block: RMSNorm -> causal RoPE attention -> residual,
/// RMSNorm -> SiLU MLP -> residual. Matrices are stored input-major (in x out).
struct LayerWeights {
  Tensor attn_norm, wq, wk, wv, wo;
  Tensor ffn_norm, w1, w2;

  template <class Self, class F>
  static void visit(Self& layer, const std::string& prefix, F&& fn) {
    fn(prefix + "attn_norm", layer.attn_norm);
    fn(prefix + "wq", layer.wq);
    fn(prefix + "wk", layer.wk);
    fn(prefix + "wv", layer.wv);
    fn(prefix + "wo", layer.wo);
    fn(prefix + "ffn_norm", layer.ffn_norm);
    fn(prefix + "w1", layer.w1);
    fn(prefix + "w2", layer.w2);
  }

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

/// Target model tensors plus the early-exit block (layers, norm, head).
struct NanoWeights {
  Tensor tok_embedding;
  std::vector<LayerWeights> layers;
  Tensor final_norm;
  Tensor lm_head;
  std::vector<LayerWeights> exit_layers;
  Tensor exit_norm;
  Tensor exit_head;

  friend bool operator==(const NanoWeights&, const NanoWeights&) = default;
};

/// Calls fn(name, tensor) for every tensor in a fixed order. Exit-block
/// tensor names start with "exit".
template <class W, class F>
void for_each_tensor(W& w, F&& fn) {
  fn(std::string("tok_embedding"), w.tok_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    LayerWeights::visit(w.layers[l], "layers." + std::to_string(l) + ".", fn);
  }
  fn(std::string("final_norm"), w.final_norm);
  fn(std::string("lm_head"), w.lm_head);
  for (std::size_t l = 0; l < w.exit_layers.size(); ++l) {
    LayerWeights::visit(w.exit_layers[l], "exit." + std::to_string(l) + ".", fn);
  }
  fn(std::string("exit_norm"), w.exit_norm);
  fn(std::string("exit_head"), w.exit_head);
}

/// True for tensors owned by the early-exit block.
bool is_exit_tensor(const std::string& name);

/// All-zero weights with the shapes implied by `config`.
NanoWeights zero_weights(const NanoConfig& config);

/// Random target weights (N(0, 0.02) matrices, unit norm gains); the exit
/// block is initialized from the target tail.
NanoWeights init_weights(const NanoConfig& config, Rng& rng);

/// Copies the last `exit_depth` target layers into the exit block, the final
/// norm into the exit norm and the target head into the exit head.
NanoWeights init_exit_from_target(const NanoConfig& config, NanoWeights weights);

/// Throws naming the first tensor whose shape disagrees with `config`.
void check_shapes(const NanoConfig& config, const NanoWeights& weights);

void save_checkpoint(const NanoWeights& weights, const NanoConfig& config,
                     const std::filesystem::path& path);
struct LoadedCheckpoint {
  NanoConfig config;
  NanoWeights weights;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Precomputed rotary-embedding angles.
class Rope {
 public:
  Rope(std::size_t max_seq_len, std::size_t head_dim, float base);
  /// Rotates each head of vec (n_heads * head_dim) in place for `position`.
  void apply(float* vec, std::size_t n_heads, std::size_t position) const;
  /// Inverse rotation, used by the backward pass.
  void apply_inverse(float* vec, std::size_t n_heads, std::size_t position) const;

 private:
  std::size_t head_dim_;
  std::vector<float> cos_;
  std::vector<float> sin_;
};

/// Key/value history of one attention layer.
struct KvLayer {
  std::vector<float> keys;
  std::vector<float> values;
  std::size_t length = 0;
};

/// First-N-layer state shared by the draft and target caches of one session.
struct SharedPrefix {
  std::vector<TokenId> tokens;
  std::vector<KvLayer> kv;
  /// H^N, the output of layer N, one row per position.
  std::vector<float> hidden;
  /// Positions pushed through the shared layers since creation.
  std::size_t executions = 0;
};

class NanoModel;

/// Cache of one side (draft or target) of a NanoModel.
class NanoCache : public SessionCache {
 public:
  NanoCache(const void* owner, std::shared_ptr<SharedPrefix> shared, std::size_t own_layers);

  [[nodiscard]] const SharedPrefix& shared() const { return *shared_; }
  /// Positions pushed through this side's private layers since creation.
  [[nodiscard]] std::size_t own_executions() const { return own_executions_; }

 private:
  friend class NanoModel;
  std::shared_ptr<SharedPrefix> shared_;
  std::vector<KvLayer> own_;
  std::size_t own_executions_ = 0;
};

/// The target model and its early-exit draft model. Layers 1..N are computed
/// once per position and shared between both sides of a session.
class NanoModel : public ModelBundle {
 public:
  NanoModel(NanoConfig config, NanoWeights weights);
  NanoModel(const NanoModel&) = delete;
  NanoModel& operator=(const NanoModel&) = delete;
  ~NanoModel() override;

  [[nodiscard]] const LanguageModel& draft() const override;
  [[nodiscard]] const LanguageModel& target() const override;
  [[nodiscard]] BundleSession open_session() const override;

  [[nodiscard]] const NanoConfig& config() const { return config_; }
  [[nodiscard]] const NanoWeights& weights() const { return weights_; }

  /// Full-depth forward step (embedding, all layers, final norm, head).
  StepOutput target_forward(NanoCache& cache, TokenId token) const;
  /// Early-exit forward step (embedding, first N layers, exit block, exit norm, exit head).
  StepOutput draft_forward(NanoCache& cache, TokenId token) const;

 private:
  class Side;
  enum class Role { Draft, Target };

  void rollback(NanoCache& cache, std::size_t position) const;
  void check_position(const NanoCache& cache) const;
  /// Makes shared rows 0..=position agree with the cache history plus `token`.
  void sync_shared(NanoCache& cache, TokenId token) const;
  StepOutput finish(NanoCache& cache, TokenId token, const std::vector<LayerWeights>& layers,
                    std::size_t first_layer, std::size_t layer_count, const Tensor& norm,
                    const Tensor& head) const;

  NanoConfig config_;
  NanoWeights weights_;
  Rope rope_;
  std::unique_ptr<Side> draft_;
  std::unique_ptr<Side> target_;
};

/// Runs one transformer block at `position`, updating x (d_model) in place
/// and appending to `kv`.
void layer_step(const LayerWeights& layer, const NanoConfig& config, const Rope& rope,
                std::size_t position, float* x, KvLayer& kv);

}  // namespace spexit
