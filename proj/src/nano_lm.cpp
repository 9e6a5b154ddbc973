#include "spexit/nano_lm.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "spexit/container.hpp"
#include "spexit/kernels.hpp"

namespace spexit {
namespace {

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

LayerWeights zero_layer(const NanoConfig& c) {
  LayerWeights l;
  l.attn_norm = Tensor::zeros({c.d_model});
  l.wq = Tensor::zeros({c.d_model, c.d_model});
  l.wk = Tensor::zeros({c.d_model, c.d_model});
  l.wv = Tensor::zeros({c.d_model, c.d_model});
  l.wo = Tensor::zeros({c.d_model, c.d_model});
  l.ffn_norm = Tensor::zeros({c.d_model});
  l.w1 = Tensor::zeros({c.d_model, c.d_ff});
  l.w2 = Tensor::zeros({c.d_ff, c.d_model});
  return l;
}

void ensure_rows(KvLayer& kv, std::size_t rows, std::size_t width) {
  if (kv.keys.size() < rows * width) {
    const std::size_t want = std::max(rows * width, kv.keys.size() * 2);
    kv.keys.resize(want);
    kv.values.resize(want);
  }
}

nlohmann::json config_to_json(const NanoConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},     {"d_ff", c.d_ff},           {"max_seq_len", c.max_seq_len},
          {"exit_after", c.exit_after}, {"exit_depth", c.exit_depth}, {"norm_eps", c.norm_eps},
          {"rope_base", c.rope_base}};
}

NanoConfig config_from_json(const nlohmann::json& j) {
  NanoConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.exit_after = j.at("exit_after").get<std::size_t>();
    c.exit_depth = j.at("exit_depth").get<std::size_t>();
    c.norm_eps = j.at("norm_eps").get<float>();
    c.rope_base = j.at("rope_base").get<float>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint config is malformed: ") + e.what());
  }
  return c;
}

}  // namespace

void NanoConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid model config: " + msg); };
  if (vocab_size < 2) fail("vocab_size must be at least 2");
  if (d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0 || max_seq_len == 0) {
    fail("dimensions must be positive");
  }
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) fail("head dimension must be even for rotary embeddings");
  if (exit_after < 1 || exit_after >= n_layers) fail("exit_after must satisfy 1 <= N < n_layers");
  if (exit_depth < 1) fail("exit_depth must be at least 1");
  if (!(norm_eps > 0.0f)) fail("norm_eps must be positive");
  if (!(rope_base > 1.0f)) fail("rope_base must exceed 1");
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  Tensor t;
  t.shape = std::move(shape);
  t.values.assign(n, 0.0f);
  return t;
}

bool is_exit_tensor(const std::string& name) { return name.rfind("exit", 0) == 0; }

NanoWeights zero_weights(const NanoConfig& c) {
  c.validate();
  NanoWeights w;
  w.tok_embedding = Tensor::zeros({c.vocab_size, c.d_model});
  for (std::size_t l = 0; l < c.n_layers; ++l) w.layers.push_back(zero_layer(c));
  w.final_norm = Tensor::zeros({c.d_model});
  w.lm_head = Tensor::zeros({c.d_model, c.vocab_size});
  for (std::size_t l = 0; l < c.exit_depth; ++l) w.exit_layers.push_back(zero_layer(c));
  w.exit_norm = Tensor::zeros({c.d_model});
  w.exit_head = Tensor::zeros({c.d_model, c.vocab_size});
  return w;
}

NanoWeights init_weights(const NanoConfig& c, Rng& rng) {
  NanoWeights w = zero_weights(c);
  for_each_tensor(w, [&](const std::string& name, Tensor& t) {
    if (is_exit_tensor(name)) return;
    if (t.shape.size() == 1) {
      std::fill(t.values.begin(), t.values.end(), 1.0f);
    } else {
      for (float& v : t.values) v = static_cast<float>(rng.normal(0.0, 0.02));
    }
  });
  return init_exit_from_target(c, std::move(w));
}

NanoWeights init_exit_from_target(const NanoConfig& c, NanoWeights w) {
  check_shapes(c, w);
  if (c.exit_depth > c.n_layers) {
    throw ConfigError("exit_depth exceeds the number of target layers to copy from");
  }
  for (std::size_t j = 0; j < c.exit_depth; ++j) {
    w.exit_layers[j] = w.layers[c.n_layers - c.exit_depth + j];
  }
  w.exit_norm = w.final_norm;
  w.exit_head = w.lm_head;
  return w;
}

void check_shapes(const NanoConfig& config, const NanoWeights& weights) {
  const NanoWeights expected = zero_weights(config);
  std::vector<std::pair<std::string, std::vector<std::size_t>>> want;
  for_each_tensor(expected, [&](const std::string& name, const Tensor& t) {
    want.emplace_back(name, t.shape);
  });
  if (weights.layers.size() != config.n_layers ||
      weights.exit_layers.size() != config.exit_depth) {
    throw ConfigError("weights have a layer count that disagrees with the config");
  }
  std::size_t i = 0;
  for_each_tensor(weights, [&](const std::string& name, const Tensor& t) {
    const auto& [wname, wshape] = want[i++];
    if (t.shape != wshape || t.numel() != Tensor::zeros(wshape).numel()) {
      throw ConfigError("tensor '" + name + "' has shape " + shape_string(t.shape) +
                        " but the config implies " + shape_string(wshape));
    }
  });
}

void save_checkpoint(const NanoWeights& weights, const NanoConfig& config,
                     const std::filesystem::path& path) {
  check_shapes(config, weights);
  Container c;
  c.meta = {{"kind", "nano-lm"}, {"config", config_to_json(config)}};
  for_each_tensor(weights, [&](const std::string& name, const Tensor& t) {
    c.tensors.push_back({name, t});
  });
  write_container(path, c);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.meta.value("kind", "") != "nano-lm") {
    throw CheckpointError("checkpoint " + path.string() + " does not hold a nano-lm model");
  }
  LoadedCheckpoint out{config_from_json(c.meta.at("config")), {}};
  try {
    out.config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  }
  out.weights = zero_weights(out.config);
  std::size_t i = 0;
  bool count_ok = true;
  for_each_tensor(out.weights, [&](const std::string& name, Tensor& t) {
    if (i >= c.tensors.size()) {
      count_ok = false;
      return;
    }
    NamedTensor& src = c.tensors[i++];
    if (src.name != name) {
      throw CheckpointError("checkpoint tensor '" + src.name + "' found where '" + name +
                            "' was expected");
    }
    if (src.tensor.shape != t.shape) {
      throw CheckpointError("tensor '" + name + "' has shape " + shape_string(src.tensor.shape) +
                            " but the header config implies " + shape_string(t.shape));
    }
    t = std::move(src.tensor);
  });
  if (!count_ok || i != c.tensors.size()) {
    throw CheckpointError("checkpoint tensor count disagrees with its config");
  }
  return out;
}

Rope::Rope(std::size_t max_seq_len, std::size_t head_dim, float base) : head_dim_(head_dim) {
  const std::size_t half = head_dim / 2;
  cos_.resize(max_seq_len * half);
  sin_.resize(max_seq_len * half);
  for (std::size_t p = 0; p < max_seq_len; ++p) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(static_cast<double>(base),
                                   -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(p) * freq;
      cos_[p * half + i] = static_cast<float>(std::cos(angle));
      sin_[p * half + i] = static_cast<float>(std::sin(angle));
    }
  }
}

void Rope::apply(float* vec, std::size_t n_heads, std::size_t position) const {
  const std::size_t half = head_dim_ / 2;
  const float* c = cos_.data() + position * half;
  const float* s = sin_.data() + position * half;
  for (std::size_t h = 0; h < n_heads; ++h) {
    float* v = vec + h * head_dim_;
    for (std::size_t i = 0; i < half; ++i) {
      const float a = v[2 * i];
      const float b = v[2 * i + 1];
      v[2 * i] = a * c[i] - b * s[i];
      v[2 * i + 1] = a * s[i] + b * c[i];
    }
  }
}

void Rope::apply_inverse(float* vec, std::size_t n_heads, std::size_t position) const {
  const std::size_t half = head_dim_ / 2;
  const float* c = cos_.data() + position * half;
  const float* s = sin_.data() + position * half;
  for (std::size_t h = 0; h < n_heads; ++h) {
    float* v = vec + h * head_dim_;
    for (std::size_t i = 0; i < half; ++i) {
      const float a = v[2 * i];
      const float b = v[2 * i + 1];
      v[2 * i] = a * c[i] + b * s[i];
      v[2 * i + 1] = -a * s[i] + b * c[i];
    }
  }
}

void layer_step(const LayerWeights& layer, const NanoConfig& config, const Rope& rope,
                std::size_t position, float* x, KvLayer& kv) {
  const std::size_t d = config.d_model;
  const std::size_t hd = config.head_dim();
  if (kv.length != position) throw PreconditionError("kv cache is not at the step position");
  ensure_rows(kv, position + 1, d);

  std::vector<float> h(d), q(d), attn(d), proj(d), u(config.d_ff);
  kernels::rms_norm(x, layer.attn_norm.data(), d, config.norm_eps, h.data());
  float* k = kv.keys.data() + position * d;
  float* v = kv.values.data() + position * d;
  kernels::vec_mat(h.data(), layer.wq.data(), d, d, q.data());
  kernels::vec_mat(h.data(), layer.wk.data(), d, d, k);
  kernels::vec_mat(h.data(), layer.wv.data(), d, d, v);
  rope.apply(q.data(), config.n_heads, position);
  rope.apply(k, config.n_heads, position);
  kv.length = position + 1;

  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  std::vector<float> scores(position + 1);
  for (std::size_t head = 0; head < config.n_heads; ++head) {
    const float* qh = q.data() + head * hd;
    float max_score = -INFINITY;
    for (std::size_t j = 0; j <= position; ++j) {
      scores[j] = kernels::dot(qh, kv.keys.data() + j * d + head * hd, hd) * scale;
      max_score = std::max(max_score, scores[j]);
    }
    float total = 0.0f;
    for (std::size_t j = 0; j <= position; ++j) {
      scores[j] = std::exp(scores[j] - max_score);
      total += scores[j];
    }
    const float inv_total = 1.0f / total;
    float* out = attn.data() + head * hd;
    std::fill(out, out + hd, 0.0f);
    for (std::size_t j = 0; j <= position; ++j) {
      const float p = scores[j] * inv_total;
      const float* vj = kv.values.data() + j * d + head * hd;
      for (std::size_t i = 0; i < hd; ++i) out[i] += p * vj[i];
    }
  }
  kernels::vec_mat(attn.data(), layer.wo.data(), d, d, proj.data());
  for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

  kernels::rms_norm(x, layer.ffn_norm.data(), d, config.norm_eps, h.data());
  kernels::vec_mat(h.data(), layer.w1.data(), d, config.d_ff, u.data());
  for (float& ui : u) ui = ui / (1.0f + std::exp(-ui));
  kernels::vec_mat(u.data(), layer.w2.data(), config.d_ff, d, proj.data());
  for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
}

NanoCache::NanoCache(const void* owner, std::shared_ptr<SharedPrefix> shared,
                     std::size_t own_layers)
    : SessionCache(owner), shared_(std::move(shared)), own_(own_layers) {}

class NanoModel::Side : public LanguageModel {
 public:
  Side(const NanoModel& model, Role role) : model_(model), role_(role) {}

  std::size_t vocab_size() const override { return model_.config_.vocab_size; }
  std::size_t hidden_size() const override { return model_.config_.d_model; }
  std::size_t max_positions() const override { return model_.config_.max_seq_len; }

  std::unique_ptr<SessionCache> new_cache() const override {
    return make_cache(std::make_shared<SharedPrefix>());
  }

  std::unique_ptr<NanoCache> make_cache(std::shared_ptr<SharedPrefix> shared) const {
    const auto& c = model_.config_;
    if (shared->kv.empty()) shared->kv.resize(c.exit_after);
    const std::size_t own = role_ == Role::Target ? c.n_layers - c.exit_after : c.exit_depth;
    return std::make_unique<NanoCache>(this, std::move(shared), own);
  }

  StepOutput step(SessionCache& cache, TokenId token) const override {
    check_owner(cache);
    auto& nc = static_cast<NanoCache&>(cache);
    return role_ == Role::Target ? model_.target_forward(nc, token)
                                 : model_.draft_forward(nc, token);
  }

  void rollback(SessionCache& cache, std::size_t position) const override {
    check_owner(cache);
    model_.rollback(static_cast<NanoCache&>(cache), position);
  }

  using LanguageModel::check_owner;
  using LanguageModel::check_token;

 private:
  const NanoModel& model_;
  Role role_;
};

NanoModel::NanoModel(NanoConfig config, NanoWeights weights)
    : config_(config),
      weights_(std::move(weights)),
      rope_((config.validate(), config.max_seq_len), config.head_dim(), config.rope_base) {
  check_shapes(config_, weights_);
  draft_ = std::make_unique<Side>(*this, Role::Draft);
  target_ = std::make_unique<Side>(*this, Role::Target);
}

NanoModel::~NanoModel() = default;

const LanguageModel& NanoModel::draft() const { return *draft_; }
const LanguageModel& NanoModel::target() const { return *target_; }

BundleSession NanoModel::open_session() const {
  auto shared = std::make_shared<SharedPrefix>();
  BundleSession s;
  s.draft = draft_->make_cache(shared);
  s.target = target_->make_cache(shared);
  return s;
}

void NanoModel::check_position(const NanoCache& cache) const {
  if (cache.position() >= config_.max_seq_len) {
    throw PreconditionError("sequence overflow: position " + std::to_string(cache.position()) +
                            " reaches max_seq_len " + std::to_string(config_.max_seq_len));
  }
}

void NanoModel::sync_shared(NanoCache& cache, TokenId token) const {
  SharedPrefix& sp = *cache.shared_;
  const std::size_t need = cache.position() + 1;
  auto wanted = [&](std::size_t i) { return i < cache.position() ? cache.history_[i] : token; };
  std::size_t common = 0;
  const std::size_t limit = std::min(sp.tokens.size(), need);
  while (common < limit && sp.tokens[common] == wanted(common)) ++common;
  if (common == need) return;

  const std::size_t d = config_.d_model;
  sp.tokens.resize(common);
  for (KvLayer& kv : sp.kv) kv.length = std::min(kv.length, common);
  sp.hidden.resize(need * d);
  for (std::size_t p = common; p < need; ++p) {
    const TokenId t = wanted(p);
    float* x = sp.hidden.data() + p * d;
    const float* e = weights_.tok_embedding.data() + static_cast<std::size_t>(t.value) * d;
    std::copy(e, e + d, x);
    for (std::size_t l = 0; l < config_.exit_after; ++l) {
      layer_step(weights_.layers[l], config_, rope_, p, x, sp.kv[l]);
    }
    sp.tokens.push_back(t);
    ++sp.executions;
  }
}

StepOutput NanoModel::finish(NanoCache& cache, TokenId token,
                             const std::vector<LayerWeights>& layers, std::size_t first_layer,
                             std::size_t layer_count, const Tensor& norm,
                             const Tensor& head) const {
  const std::size_t d = config_.d_model;
  const std::size_t p = cache.position();
  sync_shared(cache, token);
  std::vector<float> x(cache.shared_->hidden.begin() + static_cast<std::ptrdiff_t>(p * d),
                       cache.shared_->hidden.begin() + static_cast<std::ptrdiff_t>((p + 1) * d));
  for (std::size_t l = 0; l < layer_count; ++l) {
    layer_step(layers[first_layer + l], config_, rope_, p, x.data(), cache.own_[l]);
  }
  ++cache.own_executions_;
  cache.history_.push_back(token);

  StepOutput out;
  out.hidden.resize(d);
  kernels::rms_norm(x.data(), norm.data(), d, config_.norm_eps, out.hidden.data());
  out.logits.resize(config_.vocab_size);
  kernels::vec_mat(out.hidden.data(), head.data(), d, config_.vocab_size, out.logits.data());
  return out;
}

StepOutput NanoModel::target_forward(NanoCache& cache, TokenId token) const {
  target_->check_owner(cache);
  target_->check_token(token);
  check_position(cache);
  return finish(cache, token, weights_.layers, config_.exit_after,
                config_.n_layers - config_.exit_after, weights_.final_norm, weights_.lm_head);
}

StepOutput NanoModel::draft_forward(NanoCache& cache, TokenId token) const {
  draft_->check_owner(cache);
  draft_->check_token(token);
  check_position(cache);
  return finish(cache, token, weights_.exit_layers, 0, config_.exit_depth, weights_.exit_norm,
                weights_.exit_head);
}

void NanoModel::rollback(NanoCache& cache, std::size_t position) const {
  if (position > cache.position()) {
    throw PreconditionError("rollback to " + std::to_string(position) + " past cache position " +
                            std::to_string(cache.position()));
  }
  cache.history_.resize(position);
  for (KvLayer& kv : cache.own_) kv.length = std::min(kv.length, position);
}

}  // namespace spexit
