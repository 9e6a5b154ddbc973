#include "spexit/training.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "spexit/container.hpp"
#include "spexit/engine.hpp"
#include "spexit/kernels.hpp"

namespace spexit {
namespace {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<float, 1, Eigen::Dynamic>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;
using ConstRowMap = Eigen::Map<const RowVec>;
using RowMap = Eigen::Map<RowVec>;

ConstMatMap as_mat(const Tensor& t) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(t.shape[0]),
                     static_cast<Eigen::Index>(t.shape[1]));
}
MatMap as_mat(Tensor& t) {
  return MatMap(t.data(), static_cast<Eigen::Index>(t.shape[0]),
                static_cast<Eigen::Index>(t.shape[1]));
}
ConstRowMap as_row(const Tensor& t) {
  return ConstRowMap(t.data(), static_cast<Eigen::Index>(t.numel()));
}
RowMap as_row(Tensor& t) { return RowMap(t.data(), static_cast<Eigen::Index>(t.numel())); }

// In-place Fisher-Yates driven by the project Rng, so orders do not depend
// on the standard library's shuffle algorithm.
template <class T>
void seeded_shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_index(i);
    std::swap(items[i - 1], items[j]);
  }
}

std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

// ---------------------------------------------------------------------------
// Batched forward/backward of the nano transformer.

struct RmsTape {
  Mat x;
  Eigen::VectorXf inv;
};

Mat rms_forward(const Mat& x, const Tensor& gain, float eps, RmsTape* tape) {
  const auto d = x.cols();
  Mat y(x.rows(), d);
  Eigen::VectorXf inv(x.rows());
  const ConstRowMap g = as_row(gain);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const float ms = x.row(i).squaredNorm() / static_cast<float>(d);
    inv(i) = 1.0f / std::sqrt(ms + eps);
    y.row(i) = (x.row(i) * inv(i)).cwiseProduct(g);
  }
  if (tape) {
    tape->x = x;
    tape->inv = std::move(inv);
  }
  return y;
}

// Returns dx and accumulates the gain gradient.
Mat rms_backward(const RmsTape& tape, const Tensor& gain, const Mat& dy, Tensor& dgain) {
  const auto d = tape.x.cols();
  const ConstRowMap g = as_row(gain);
  RowMap dg = as_row(dgain);
  Mat dx(dy.rows(), d);
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const float r = tape.inv(i);
    dg += dy.row(i).cwiseProduct(tape.x.row(i)) * r;
    const RowVec gdy = dy.row(i).cwiseProduct(g);
    const float proj = gdy.dot(tape.x.row(i));
    dx.row(i) = gdy * r - tape.x.row(i) * (r * r * r * proj / static_cast<float>(d));
  }
  return dx;
}

struct LayerTape {
  RmsTape attn_norm;
  Mat h1, q, k, v;  // q and k after rotation
  std::vector<Mat> probs;  // per (sequence, head)
  Mat attn;
  RmsTape ffn_norm;
  Mat h2, u, g;
};

struct Shape {
  std::size_t batch = 0;
  std::size_t seq = 0;
};

void rotate_rows(Mat& m, const Rope& rope, std::size_t n_heads, std::size_t seq, bool inverse) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const std::size_t pos = static_cast<std::size_t>(r) % seq;
    if (inverse) {
      rope.apply_inverse(m.row(r).data(), n_heads, pos);
    } else {
      rope.apply(m.row(r).data(), n_heads, pos);
    }
  }
}

void layer_forward(const LayerWeights& w, const NanoConfig& c, const Rope& rope, Shape s, Mat& x,
                   LayerTape* tape) {
  const auto hd = static_cast<Eigen::Index>(c.head_dim());
  const auto T = static_cast<Eigen::Index>(s.seq);
  RmsTape norm1;
  Mat h1 = rms_forward(x, w.attn_norm, c.norm_eps, tape ? &norm1 : nullptr);
  Mat q = h1 * as_mat(w.wq);
  Mat k = h1 * as_mat(w.wk);
  Mat v = h1 * as_mat(w.wv);
  rotate_rows(q, rope, c.n_heads, s.seq, false);
  rotate_rows(k, rope, c.n_heads, s.seq, false);

  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  Mat attn(x.rows(), x.cols());
  std::vector<Mat> probs;
  if (tape) probs.reserve(s.batch * c.n_heads);
  for (std::size_t b = 0; b < s.batch; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b) * T;
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * hd;
      Mat p = q.block(r0, c0, T, hd) * k.block(r0, c0, T, hd).transpose() * scale;
      for (Eigen::Index i = 0; i < T; ++i) {
        const float mx = p.row(i).head(i + 1).maxCoeff();
        float total = 0.0f;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          total += p(i, j);
        }
        p.row(i).head(i + 1) /= total;
        p.row(i).tail(T - i - 1).setZero();
      }
      attn.block(r0, c0, T, hd).noalias() = p * v.block(r0, c0, T, hd);
      if (tape) probs.push_back(std::move(p));
    }
  }
  x.noalias() += attn * as_mat(w.wo);

  RmsTape norm2;
  Mat h2 = rms_forward(x, w.ffn_norm, c.norm_eps, tape ? &norm2 : nullptr);
  Mat u = h2 * as_mat(w.w1);
  Mat g = u.unaryExpr([](float z) { return z / (1.0f + std::exp(-z)); });
  x.noalias() += g * as_mat(w.w2);

  if (tape) {
    tape->attn_norm = std::move(norm1);
    tape->h1 = std::move(h1);
    tape->q = std::move(q);
    tape->k = std::move(k);
    tape->v = std::move(v);
    tape->probs = std::move(probs);
    tape->attn = std::move(attn);
    tape->ffn_norm = std::move(norm2);
    tape->h2 = std::move(h2);
    tape->u = std::move(u);
    tape->g = std::move(g);
  }
}

// dx holds the gradient w.r.t. the layer output on entry and w.r.t. its input
// on return.
void layer_backward(const LayerWeights& w, const NanoConfig& c, const Rope& rope, Shape s,
                    const LayerTape& tape, Mat& dx, LayerWeights& grad) {
  const auto hd = static_cast<Eigen::Index>(c.head_dim());
  const auto T = static_cast<Eigen::Index>(s.seq);

  // MLP branch.
  as_mat(grad.w2).noalias() += tape.g.transpose() * dx;
  Mat dg = dx * as_mat(w.w2).transpose();
  Mat du(dg.rows(), dg.cols());
  for (Eigen::Index i = 0; i < du.size(); ++i) {
    const float z = tape.u.data()[i];
    const float sig = 1.0f / (1.0f + std::exp(-z));
    du.data()[i] = dg.data()[i] * sig * (1.0f + z * (1.0f - sig));
  }
  as_mat(grad.w1).noalias() += tape.h2.transpose() * du;
  Mat dh2 = du * as_mat(w.w1).transpose();
  dx += rms_backward(tape.ffn_norm, w.ffn_norm, dh2, grad.ffn_norm);

  // Attention branch.
  as_mat(grad.wo).noalias() += tape.attn.transpose() * dx;
  Mat dattn = dx * as_mat(w.wo).transpose();
  Mat dq = Mat::Zero(dx.rows(), dx.cols());
  Mat dk = Mat::Zero(dx.rows(), dx.cols());
  Mat dv = Mat::Zero(dx.rows(), dx.cols());
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  std::size_t block = 0;
  for (std::size_t b = 0; b < s.batch; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b) * T;
    for (std::size_t h = 0; h < c.n_heads; ++h, ++block) {
      const auto c0 = static_cast<Eigen::Index>(h) * hd;
      const Mat& p = tape.probs[block];
      const auto d_out = dattn.block(r0, c0, T, hd);
      Mat dp = d_out * tape.v.block(r0, c0, T, hd).transpose();
      dv.block(r0, c0, T, hd).noalias() = p.transpose() * d_out;
      for (Eigen::Index i = 0; i < T; ++i) {
        const float inner = p.row(i).dot(dp.row(i));
        dp.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - inner).matrix());
      }
      dq.block(r0, c0, T, hd).noalias() = dp * tape.k.block(r0, c0, T, hd) * scale;
      dk.block(r0, c0, T, hd).noalias() = dp.transpose() * tape.q.block(r0, c0, T, hd) * scale;
    }
  }
  rotate_rows(dq, rope, c.n_heads, s.seq, true);
  rotate_rows(dk, rope, c.n_heads, s.seq, true);
  as_mat(grad.wq).noalias() += tape.h1.transpose() * dq;
  as_mat(grad.wk).noalias() += tape.h1.transpose() * dk;
  as_mat(grad.wv).noalias() += tape.h1.transpose() * dv;
  Mat dh1 = dq * as_mat(w.wq).transpose();
  dh1.noalias() += dk * as_mat(w.wk).transpose();
  dh1.noalias() += dv * as_mat(w.wv).transpose();
  dx += rms_backward(tape.attn_norm, w.attn_norm, dh1, grad.attn_norm);
}

Shape check_windows(const NanoConfig& c, const std::vector<std::vector<TokenId>>& windows) {
  if (windows.empty()) throw PreconditionError("no training windows");
  const std::size_t len = windows.front().size();
  if (len < 2) throw PreconditionError("training windows need at least two tokens");
  for (const auto& w : windows) {
    if (w.size() != len) throw PreconditionError("training windows differ in length");
    for (TokenId t : w) {
      if (t.value < 0 || static_cast<std::size_t>(t.value) >= c.vocab_size) {
        throw PreconditionError("window token outside the vocabulary");
      }
    }
  }
  if (len - 1 > c.max_seq_len) throw PreconditionError("window longer than max_seq_len");
  return {windows.size(), len - 1};
}

struct PassResult {
  double loss_sum = 0.0;
  std::size_t count = 0;
  Mat logits;
};

// Teacher-forced pass over equal-length windows. With `grads` set, the mean
// cross-entropy is back-propagated into the trainable tensors: all target
// tensors for the target path, only exit tensors for the exit path.
PassResult run_pass(const NanoConfig& c, const NanoWeights& w, const Rope& rope,
                    const std::vector<std::vector<TokenId>>& windows, bool exit_path,
                    NanoWeights* grads, bool keep_logits) {
  const Shape s = check_windows(c, windows);
  const auto R = static_cast<Eigen::Index>(s.batch * s.seq);
  const auto d = static_cast<Eigen::Index>(c.d_model);

  Mat x(R, d);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t t = 0; t < s.seq; ++t) {
      const auto tok = static_cast<Eigen::Index>(windows[b][t].value);
      x.row(static_cast<Eigen::Index>(b * s.seq + t)) = as_mat(w.tok_embedding).row(tok);
    }
  }

  const std::size_t frozen = exit_path ? c.exit_after : 0;
  for (std::size_t l = 0; l < frozen; ++l) layer_forward(w.layers[l], c, rope, s, x, nullptr);
  const std::vector<LayerWeights>& live = exit_path ? w.exit_layers : w.layers;
  std::vector<LayerTape> tapes(grads ? live.size() : 0);
  for (std::size_t l = 0; l < live.size(); ++l) {
    layer_forward(live[l], c, rope, s, x, grads ? &tapes[l] : nullptr);
  }
  const Tensor& norm = exit_path ? w.exit_norm : w.final_norm;
  const Tensor& head = exit_path ? w.exit_head : w.lm_head;
  RmsTape final_tape;
  Mat hn = rms_forward(x, norm, c.norm_eps, grads ? &final_tape : nullptr);
  Mat logits = hn * as_mat(head);

  PassResult result;
  result.count = static_cast<std::size_t>(R);
  Mat dlogits;
  if (grads) dlogits.resize(R, logits.cols());
  const float inv_count = 1.0f / static_cast<float>(R);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t t = 0; t < s.seq; ++t) {
      const auto r = static_cast<Eigen::Index>(b * s.seq + t);
      const auto target = static_cast<Eigen::Index>(windows[b][t + 1].value);
      const float mx = logits.row(r).maxCoeff();
      const RowVec e = (logits.row(r).array() - mx).exp().matrix();
      const float total = e.sum();
      result.loss_sum += static_cast<double>(std::log(total) - (logits(r, target) - mx));
      if (grads) {
        dlogits.row(r) = e * (inv_count / total);
        dlogits(r, target) -= inv_count;
      }
    }
  }
  if (keep_logits) result.logits = logits;
  if (!grads) return result;

  Tensor& dnorm = exit_path ? grads->exit_norm : grads->final_norm;
  Tensor& dhead = exit_path ? grads->exit_head : grads->lm_head;
  as_mat(dhead).noalias() += hn.transpose() * dlogits;
  Mat dhn = dlogits * as_mat(head).transpose();
  Mat dx = rms_backward(final_tape, norm, dhn, dnorm);
  std::vector<LayerWeights>& live_grads = exit_path ? grads->exit_layers : grads->layers;
  for (std::size_t l = live.size(); l-- > 0;) {
    layer_backward(live[l], c, rope, s, tapes[l], dx, live_grads[l]);
  }
  if (!exit_path) {
    MatMap de = as_mat(grads->tok_embedding);
    for (std::size_t b = 0; b < s.batch; ++b) {
      for (std::size_t t = 0; t < s.seq; ++t) {
        const auto r = static_cast<Eigen::Index>(b * s.seq + t);
        de.row(static_cast<Eigen::Index>(windows[b][t].value)) += dx.row(r);
      }
    }
  }
  return result;
}

Rope training_rope(const NanoConfig& c) {
  return Rope(c.max_seq_len, c.head_dim(), c.rope_base);
}

double mean_loss(const NanoConfig& c, const NanoWeights& w,
                 const std::vector<std::vector<TokenId>>& windows, bool exit_path) {
  c.validate();
  check_shapes(c, w);
  if (windows.empty()) throw PreconditionError("no evaluation windows");
  const Rope rope = training_rope(c);
  constexpr std::size_t kChunk = 16;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < windows.size(); i += kChunk) {
    const std::vector<std::vector<TokenId>> chunk(
        windows.begin() + static_cast<std::ptrdiff_t>(i),
        windows.begin() + static_cast<std::ptrdiff_t>(std::min(windows.size(), i + kChunk)));
    const PassResult r = run_pass(c, w, rope, chunk, exit_path, nullptr, false);
    total += r.loss_sum;
    count += r.count;
  }
  return total / static_cast<double>(count);
}

// First-order optimizer over a filtered subset of tensors.
class ParamOptimizer {
 public:
  ParamOptimizer(const TrainConfig& cfg, NanoWeights& weights, bool exit_only)
      : cfg_(cfg), exit_only_(exit_only) {
    for_each_tensor(weights, [&](const std::string& name, Tensor& t) {
      if (exit_only_ && !is_exit_tensor(name)) return;
      params_.push_back(&t);
      m_.emplace_back(t.numel(), 0.0f);
      if (cfg_.optimizer == Optimizer::Adam) v_.emplace_back(t.numel(), 0.0f);
    });
  }

  void step(NanoWeights& grads) {
    std::vector<Tensor*> g;
    for_each_tensor(grads, [&](const std::string& name, Tensor& t) {
      if (exit_only_ && !is_exit_tensor(name)) return;
      g.push_back(&t);
    });
    double norm_sq = 0.0;
    for (const Tensor* t : g) {
      for (float x : t->values) norm_sq += static_cast<double>(x) * x;
    }
    float clip = 1.0f;
    if (cfg_.grad_clip > 0.0 && std::sqrt(norm_sq) > cfg_.grad_clip) {
      clip = static_cast<float>(cfg_.grad_clip / std::sqrt(norm_sq));
    }
    ++t_;
    const auto lr = static_cast<float>(cfg_.learning_rate);
    const float b1 = 0.9f;
    const float b2 = 0.999f;
    const auto c1 = static_cast<float>(1.0 - std::pow(0.9, static_cast<double>(t_)));
    const auto c2 = static_cast<float>(1.0 - std::pow(0.999, static_cast<double>(t_)));
    const auto mu = static_cast<float>(cfg_.momentum);
    for (std::size_t p = 0; p < params_.size(); ++p) {
      float* w = params_[p]->data();
      const float* gr = g[p]->data();
      float* m = m_[p].data();
      for (std::size_t i = 0; i < params_[p]->numel(); ++i) {
        const float gi = gr[i] * clip;
        switch (cfg_.optimizer) {
          case Optimizer::Sgd:
            w[i] -= lr * gi;
            break;
          case Optimizer::Momentum:
            m[i] = mu * m[i] + gi;
            w[i] -= lr * m[i];
            break;
          case Optimizer::Adam: {
            float* v = v_[p].data();
            m[i] = b1 * m[i] + (1.0f - b1) * gi;
            v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
            w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-8f);
            break;
          }
        }
      }
    }
  }

 private:
  const TrainConfig& cfg_;
  bool exit_only_;
  std::vector<Tensor*> params_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::size_t t_ = 0;
};

void check_finite(double loss, const char* what, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss)) {
    std::ostringstream os;
    os << what << " diverged: non-finite loss at epoch " << epoch << ", step " << step
       << "; lower the learning rate or enable gradient clipping";
    throw Error(os.str());
  }
}

std::vector<std::vector<TokenId>> eval_windows(const Corpus& corpus, const TrainConfig& cfg) {
  auto windows = make_windows(corpus.held_out, cfg.seq_len);
  if (windows.empty()) {
    throw PreconditionError("held-out split is shorter than one training window");
  }
  if (cfg.eval_windows != 0 && windows.size() > cfg.eval_windows) {
    windows.resize(cfg.eval_windows);
  }
  return windows;
}

// Cycles through a seeded permutation of `n` items, reshuffling per pass.
class WindowStream {
 public:
  WindowStream(std::size_t n, Rng rng) : rng_(std::move(rng)), order_(iota_vec(n)) { refill(); }

  std::size_t next() {
    if (pos_ == order_.size()) refill();
    return order_[pos_++];
  }

 private:
  void refill() {
    seeded_shuffle(order_, rng_);
    pos_ = 0;
  }

  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Predictor helpers.

struct PredictorGrad {
  std::vector<float> mix;
  std::vector<std::vector<float>> position;
};

double sigmoid(double s) { return 1.0 / (1.0 + std::exp(-s)); }

}  // namespace

std::vector<std::string> split_documents(const std::string& text) {
  std::vector<std::string> docs;
  std::string current;
  std::istringstream in(text);
  std::string line;
  auto flush = [&] {
    std::string t = trim(current);
    if (!t.empty()) docs.push_back(std::move(t));
    current.clear();
  };
  while (std::getline(in, line)) {
    if (trim(line).empty()) {
      flush();
    } else {
      if (!current.empty()) current += '\n';
      current += line;
    }
  }
  flush();
  return docs;
}

Corpus make_corpus(std::vector<std::string> documents, double held_out_fraction,
                   std::uint64_t seed) {
  if (documents.size() < 2) {
    throw ConfigError("corpus needs at least two documents for a train/held-out split");
  }
  if (!(held_out_fraction > 0.0 && held_out_fraction < 1.0)) {
    throw ConfigError("held-out fraction must lie in (0, 1)");
  }
  auto n_held = static_cast<std::size_t>(
      std::llround(held_out_fraction * static_cast<double>(documents.size())));
  n_held = std::clamp<std::size_t>(n_held, 1, documents.size() - 1);
  std::vector<std::size_t> order = iota_vec(documents.size());
  Rng rng(seed);
  seeded_shuffle(order, rng);
  std::vector<bool> held(documents.size(), false);
  for (std::size_t i = 0; i < n_held; ++i) held[order[i]] = true;
  Corpus c;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    (held[i] ? c.held_out : c.train).push_back(std::move(documents[i]));
  }
  c.generated.assign(c.train.size(), false);
  return c;
}

Corpus load_corpus(const std::filesystem::path& path, double held_out_fraction,
                   std::uint64_t seed) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read corpus file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return make_corpus(split_documents(buf.str()), held_out_fraction, seed);
}

std::string_view to_string(Optimizer optimizer) {
  switch (optimizer) {
    case Optimizer::Sgd:
      return "sgd";
    case Optimizer::Momentum:
      return "momentum";
    case Optimizer::Adam:
      return "adam";
  }
  return "?";
}

Optimizer parse_optimizer(std::string_view text) {
  if (text == "sgd") return Optimizer::Sgd;
  if (text == "momentum") return Optimizer::Momentum;
  if (text == "adam") return Optimizer::Adam;
  throw ConfigError("unknown optimizer '" + std::string(text) + "' (sgd, momentum, adam)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be positive");
  }
  if (batch_size == 0 || epochs == 0 || seq_len == 0) {
    throw ConfigError("batch size, epochs and sequence length must be positive");
  }
  if (!(distill_mix >= 0.0 && distill_mix <= 1.0)) {
    throw ConfigError("distill_mix must lie in [0, 1]");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
}

std::vector<std::vector<TokenId>> make_windows(const std::vector<std::string>& documents,
                                               std::size_t seq_len) {
  if (seq_len == 0) throw PreconditionError("seq_len must be positive");
  std::vector<TokenId> stream;
  for (const std::string& doc : documents) {
    for (unsigned char ch : doc) stream.emplace_back(static_cast<std::int32_t>(ch));
    stream.emplace_back(static_cast<std::int32_t>('\n'));
  }
  std::vector<std::vector<TokenId>> windows;
  for (std::size_t start = 0; start + seq_len + 1 <= stream.size(); start += seq_len) {
    windows.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(start),
                         stream.begin() + static_cast<std::ptrdiff_t>(start + seq_len + 1));
  }
  return windows;
}

double target_loss(const NanoConfig& config, const NanoWeights& weights,
                   const std::vector<std::vector<TokenId>>& windows) {
  return mean_loss(config, weights, windows, false);
}

double exit_loss(const NanoConfig& config, const NanoWeights& weights,
                 const std::vector<std::vector<TokenId>>& windows) {
  return mean_loss(config, weights, windows, true);
}

std::vector<std::vector<float>> sequence_logits(const NanoConfig& config,
                                                const NanoWeights& weights,
                                                const std::vector<TokenId>& tokens,
                                                bool exit_path) {
  config.validate();
  check_shapes(config, weights);
  // The last input needs a target for the pass; its value does not affect logits.
  std::vector<TokenId> window = tokens;
  window.emplace_back(0);
  const PassResult r =
      run_pass(config, weights, training_rope(config), {window}, exit_path, nullptr, true);
  std::vector<std::vector<float>> out(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto row = r.logits.row(static_cast<Eigen::Index>(t));
    out[t].assign(row.data(), row.data() + row.size());
  }
  return out;
}

NanoWeights loss_gradients(const NanoConfig& config, const NanoWeights& weights,
                           const std::vector<std::vector<TokenId>>& windows, bool exit_path,
                           double* loss) {
  config.validate();
  check_shapes(config, weights);
  NanoWeights grads = zero_weights(config);
  const PassResult r =
      run_pass(config, weights, training_rope(config), windows, exit_path, &grads, false);
  if (loss) *loss = r.loss_sum / static_cast<double>(r.count);
  return grads;
}

NanoWeights train_target(const NanoConfig& config, const Corpus& corpus, const TrainConfig& cfg,
                         const TrainLog& log) {
  config.validate();
  cfg.validate();
  if (cfg.seq_len > config.max_seq_len) {
    throw ConfigError("train.seq_len exceeds model.max_seq_len");
  }
  const auto windows = make_windows(corpus.train, cfg.seq_len);
  if (windows.empty()) throw ConfigError("training corpus is shorter than one window");

  Rng master(cfg.seed);
  Rng init_rng = master.split(1);
  NanoWeights weights = init_weights(config, init_rng);
  const Rope rope = training_rope(config);
  ParamOptimizer opt(cfg, weights, false);
  Rng order_rng = master.split(2);
  const std::size_t full = (windows.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t steps = cfg.steps_per_epoch ? cfg.steps_per_epoch : full;
  WindowStream stream(windows.size(), order_rng);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t step = 0; step < steps; ++step) {
      std::vector<std::vector<TokenId>> batch;
      batch.reserve(cfg.batch_size);
      for (std::size_t i = 0; i < std::min(cfg.batch_size, windows.size()); ++i) {
        batch.push_back(windows[stream.next()]);
      }
      NanoWeights grads = zero_weights(config);
      const PassResult r = run_pass(config, weights, rope, batch, false, &grads, false);
      const double loss = r.loss_sum / static_cast<double>(r.count);
      check_finite(loss, "target training", epoch, step);
      opt.step(grads);
      if (log) log(epoch, step, loss);
    }
  }
  return init_exit_from_target(config, std::move(weights));
}

std::vector<std::string> sample_prompts(const std::vector<std::string>& documents,
                                        std::size_t count, std::size_t len, std::uint64_t seed) {
  if (len == 0) throw ConfigError("prompt length must be positive");
  std::vector<const std::string*> usable;
  for (const std::string& d : documents) {
    if (d.size() >= len) usable.push_back(&d);
  }
  if (usable.empty()) {
    throw PreconditionError("no document has " + std::to_string(len) + " bytes for a prompt");
  }
  Rng rng(seed);
  std::vector<std::string> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string& d = *usable[rng.uniform_index(usable.size())];
    out.push_back(d.substr(rng.uniform_index(d.size() - len + 1), len));
  }
  return out;
}

std::vector<std::string> self_distill_generate(const NanoConfig& config,
                                               const NanoWeights& weights,
                                               const std::vector<std::string>& prompt_source,
                                               const DistillConfig& cfg) {
  if (!(cfg.greedy_fraction >= 0.0 && cfg.greedy_fraction <= 1.0)) {
    throw ConfigError("greedy_fraction must lie in [0, 1]");
  }
  if (cfg.prompt_len == 0) throw ConfigError("distill prompt_len must be positive");
  std::vector<std::string> sources;
  for (const std::string& s : prompt_source) {
    if (!s.empty()) sources.push_back(s);
  }
  if (sources.empty()) throw PreconditionError("no non-empty documents to draw prompts from");

  const NanoModel model(config, weights);
  const LanguageModel& target = model.target();
  const auto greedy_len = static_cast<std::size_t>(
      std::llround(cfg.greedy_fraction * static_cast<double>(cfg.continuation_len)));
  const Rng master(cfg.seed);
  std::vector<std::string> out;
  out.reserve(cfg.prompts);
  for (std::size_t i = 0; i < cfg.prompts; ++i) {
    const std::string& src = sources[i % sources.size()];
    std::string text = src.substr(0, std::min(cfg.prompt_len, src.size()));
    const std::size_t budget =
        std::min(cfg.continuation_len, config.max_seq_len - std::min(config.max_seq_len, text.size()));
    Rng rng = master.split(i);
    auto cache = target.new_cache();
    StepOutput step;
    for (unsigned char ch : text) step = target.step(*cache, TokenId(ch));
    for (std::size_t j = 0; j < budget; ++j) {
      TokenId next;
      if (j < greedy_len) {
        next = argmax(step.logits);
      } else {
        const float mx = *std::max_element(step.logits.begin(), step.logits.end());
        std::vector<double> p(step.logits.size());
        for (std::size_t v = 0; v < p.size(); ++v) p[v] = std::exp(double(step.logits[v] - mx));
        next = TokenId(static_cast<std::int32_t>(rng.categorical(p)));
      }
      text.push_back(static_cast<char>(next.value));
      if (j + 1 < budget) step = target.step(*cache, next);
    }
    out.push_back(std::move(text));
  }
  return out;
}

NanoWeights train_exit(const NanoConfig& config, const NanoWeights& weights,
                       const Corpus& corpus, const std::vector<std::string>& generated,
                       const TrainConfig& cfg, ExitTrainReport* report, const TrainLog& log) {
  config.validate();
  cfg.validate();
  check_shapes(config, weights);
  const auto corpus_windows = make_windows(corpus.train, cfg.seq_len);
  const auto gen_windows = make_windows(generated, cfg.seq_len);
  const auto held = eval_windows(corpus, cfg);

  const auto n_gen = static_cast<std::size_t>(
      std::llround(cfg.distill_mix * static_cast<double>(cfg.batch_size)));
  const std::size_t n_corpus = cfg.batch_size - n_gen;
  if (n_gen > 0 && gen_windows.empty()) {
    throw PreconditionError("distill_mix > 0 but the generated text is shorter than one window");
  }
  if (n_corpus > 0 && corpus_windows.empty()) {
    throw PreconditionError("distill_mix < 1 but the corpus is shorter than one window");
  }

  ExitTrainReport rep;
  rep.loss_before = exit_loss(config, weights, held);
  NanoWeights trained = weights;
  const Rope rope = training_rope(config);
  ParamOptimizer opt(cfg, trained, true);
  const Rng master(cfg.seed);
  WindowStream corpus_stream(std::max<std::size_t>(corpus_windows.size(), 1), master.split(11));
  WindowStream gen_stream(std::max<std::size_t>(gen_windows.size(), 1), master.split(12));
  const std::size_t pool = n_corpus > 0 ? corpus_windows.size() : gen_windows.size();
  const std::size_t full = (pool + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t steps = cfg.steps_per_epoch ? cfg.steps_per_epoch : full;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t step = 0; step < steps; ++step) {
      std::vector<std::vector<TokenId>> batch;
      batch.reserve(cfg.batch_size);
      for (std::size_t i = 0; i < n_gen; ++i) batch.push_back(gen_windows[gen_stream.next()]);
      for (std::size_t i = 0; i < n_corpus; ++i) {
        batch.push_back(corpus_windows[corpus_stream.next()]);
      }
      rep.generated_windows_used += n_gen;
      rep.corpus_windows_used += n_corpus;
      NanoWeights grads = zero_weights(config);
      const PassResult r = run_pass(config, trained, rope, batch, true, &grads, false);
      const double loss = r.loss_sum / static_cast<double>(r.count);
      check_finite(loss, "exit training", epoch, step);
      opt.step(grads);
      if (log) log(epoch, step, loss);
    }
  }
  rep.loss_after = exit_loss(config, trained, held);
  if (report) *report = rep;
  return trained;
}

double PredictorLabels::positive_rate() const {
  if (label.empty()) return 0.0;
  const auto pos = std::count(label.begin(), label.end(), std::uint8_t{1});
  return static_cast<double>(pos) / static_cast<double>(label.size());
}

void PredictorLabels::append(const PredictorLabels& other) {
  if (other.size() == 0) return;
  if (size() == 0) {
    d_model = other.d_model;
  } else if (other.d_model != d_model) {
    throw PreconditionError("label sets differ in hidden size");
  }
  target_hidden.insert(target_hidden.end(), other.target_hidden.begin(),
                       other.target_hidden.end());
  draft_hidden.insert(draft_hidden.end(), other.draft_hidden.begin(), other.draft_hidden.end());
  step.insert(step.end(), other.step.begin(), other.step.end());
  label.insert(label.end(), other.label.begin(), other.label.end());
}

PredictorLabels make_predictor_labels(const ModelBundle& models,
                                      const std::vector<TokenSequence>& prompts,
                                      const LabelConfig& cfg) {
  if (cfg.rollout == 0) throw ConfigError("label rollout must be positive");
  const LanguageModel& draft = models.draft();
  const LanguageModel& target = models.target();
  PredictorLabels labels;
  labels.d_model = target.hidden_size();
  if (draft.hidden_size() != labels.d_model) {
    throw PreconditionError("draft and target hidden sizes differ");
  }
  for (const TokenSequence& prompt : prompts) {
    if (prompt.empty() || prompt.size() >= cfg.max_len) continue;
    BundleSession session = models.open_session();
    // Same bookkeeping as decode(): the target holds the committed output
    // minus the pending token, the draft lags one more when it was fully accepted.
    std::vector<float> target_hidden =
        target.step_batch(*session.target, prompt.view()).back().hidden;
    target.rollback(*session.target, prompt.size() - 1);
    if (prompt.size() > 1) {
      draft.step_batch(*session.draft, prompt.view().first(prompt.size() - 1));
    }
    std::vector<TokenId> output(prompt.begin(), prompt.end());
    TokenId pending = prompt.back();
    bool draft_behind = false;
    while (output.size() < cfg.max_len) {
      const std::size_t committed = output.size();
      const std::size_t limit = std::min(cfg.rollout, cfg.max_len - committed);
      if (draft_behind) {
        draft.step(*session.draft, output[committed - 2]);
        draft_behind = false;
      }
      TokenSequence drafted(prompt.vocab_size());
      std::vector<std::vector<float>> hiddens;
      TokenId feed = pending;
      for (std::size_t i = 0; i < limit; ++i) {
        StepOutput out = draft.step(*session.draft, feed);
        feed = argmax(out.logits);
        drafted.push_back(feed);
        hiddens.push_back(std::move(out.hidden));
      }
      VerifyResult verdict = verify(target, *session.target, committed - 1, pending, drafted);
      const std::size_t a = verdict.accepted_drafts;
      for (std::size_t i = 0; i < std::min(a + 1, drafted.size()); ++i) {
        labels.target_hidden.insert(labels.target_hidden.end(), target_hidden.begin(),
                                    target_hidden.end());
        labels.draft_hidden.insert(labels.draft_hidden.end(), hiddens[i].begin(),
                                   hiddens[i].end());
        labels.step.push_back(static_cast<std::uint32_t>(i + 1));
        labels.label.push_back(i < a ? 1 : 0);
      }
      for (std::size_t i = 0; i < a; ++i) output.push_back(drafted[i]);
      output.push_back(verdict.bonus);
      if (a < drafted.size()) {
        draft.rollback(*session.draft, committed + a);
      } else {
        draft_behind = true;
      }
      target_hidden = std::move(verdict.bonus_hidden);
      pending = verdict.bonus;
    }
  }
  return labels;
}

void save_labels(const PredictorLabels& labels, const std::filesystem::path& path) {
  const std::size_t n = labels.size();
  const std::size_t d = labels.d_model;
  Container c;
  c.meta = {{"kind", "predictor-labels"}, {"d_model", d}, {"rows", n}};
  Tensor th{{n, d}, labels.target_hidden};
  Tensor dh{{n, d}, labels.draft_hidden};
  Tensor st{{n}, std::vector<float>(labels.step.begin(), labels.step.end())};
  Tensor lb{{n}, std::vector<float>(labels.label.begin(), labels.label.end())};
  c.tensors = {{"target_hidden", th}, {"draft_hidden", dh}, {"step", st}, {"label", lb}};
  write_container(path, c);
}

PredictorLabels load_labels(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.meta.value("kind", "") != "predictor-labels") {
    throw CheckpointError(path.string() + " does not hold predictor labels");
  }
  PredictorLabels l;
  l.d_model = c.meta.at("d_model").get<std::size_t>();
  const auto n = c.meta.at("rows").get<std::size_t>();
  const Tensor& th = c.at("target_hidden");
  const Tensor& dh = c.at("draft_hidden");
  const Tensor& st = c.at("step");
  const Tensor& lb = c.at("label");
  if (th.numel() != n * l.d_model || dh.numel() != n * l.d_model || st.numel() != n ||
      lb.numel() != n) {
    throw CheckpointError("label tensors in " + path.string() + " disagree with the header");
  }
  l.target_hidden = th.values;
  l.draft_hidden = dh.values;
  for (float s : st.values) l.step.push_back(static_cast<std::uint32_t>(s));
  for (float v : lb.values) l.label.push_back(v != 0.0f ? 1 : 0);
  return l;
}

namespace {

PredictorLabels select_rows(const PredictorLabels& src, const std::vector<std::size_t>& rows) {
  PredictorLabels out;
  out.d_model = src.d_model;
  const std::size_t d = src.d_model;
  for (std::size_t r : rows) {
    out.target_hidden.insert(out.target_hidden.end(), src.target_hidden.begin() + r * d,
                             src.target_hidden.begin() + (r + 1) * d);
    out.draft_hidden.insert(out.draft_hidden.end(), src.draft_hidden.begin() + r * d,
                            src.draft_hidden.begin() + (r + 1) * d);
    out.step.push_back(src.step[r]);
    out.label.push_back(src.label[r]);
  }
  return out;
}

}  // namespace

std::pair<PredictorLabels, PredictorLabels> split_labels(const PredictorLabels& labels,
                                                         double held_out_fraction,
                                                         std::uint64_t seed) {
  if (!(held_out_fraction > 0.0 && held_out_fraction < 1.0)) {
    throw ConfigError("held-out fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> order = iota_vec(labels.size());
  Rng rng(seed);
  seeded_shuffle(order, rng);
  const auto n_held = static_cast<std::size_t>(
      std::llround(held_out_fraction * static_cast<double>(labels.size())));
  std::vector<std::size_t> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_held));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_held), order.end());
  std::sort(held.begin(), held.end());
  std::sort(train.begin(), train.end());
  return {select_rows(labels, train), select_rows(labels, held)};
}

PredictorLabels shuffle_labels(const PredictorLabels& labels, std::uint64_t seed) {
  PredictorLabels out = labels;
  Rng rng(seed);
  seeded_shuffle(out.label, rng);
  return out;
}

PredictorWeights train_predictor(const PredictorLabels& labels, const PredictorTrainConfig& cfg) {
  const std::size_t n = labels.size();
  const std::size_t d = labels.d_model;
  if (n == 0 || d == 0) throw PreconditionError("empty predictor label set");
  const auto pos = std::count(labels.label.begin(), labels.label.end(), std::uint8_t{1});
  if (pos == 0 || static_cast<std::size_t>(pos) == n) {
    throw PreconditionError("predictor labels contain a single class; nothing to learn");
  }
  if (cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.learning_rate > 0.0)) {
    throw ConfigError("predictor training needs positive batch size, epochs and learning rate");
  }

  PredictorWeights w = PredictorWeights::identity(d);
  std::vector<Tensor*> params{&w.mix};
  for (Tensor& t : w.position) params.push_back(&t);
  std::vector<std::vector<float>> m, v, g;
  for (const Tensor* t : params) {
    m.emplace_back(t->numel(), 0.0f);
    v.emplace_back(t->numel(), 0.0f);
    g.emplace_back(t->numel(), 0.0f);
  }
  Rng rng(cfg.seed);
  std::vector<std::size_t> order = iota_vec(n);
  std::vector<float> z(2 * d), wt(d);
  std::size_t t = 0;
  const auto lr = static_cast<float>(cfg.learning_rate);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    seeded_shuffle(order, rng);
    for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(n, b0 + cfg.batch_size);
      for (auto& gi : g) std::fill(gi.begin(), gi.end(), 0.0f);
      const float inv_b = 1.0f / static_cast<float>(b1 - b0);
      // w_T: the part of (mix_1 - mix_0) acting on the mapped target state.
      for (std::size_t j = 0; j < d; ++j) wt[j] = w.mix.values[2 * d + j] - w.mix.values[j];
      for (std::size_t bi = b0; bi < b1; ++bi) {
        const std::size_t r = order[bi];
        const float* ht = labels.target_hidden.data() + r * d;
        const float* hdr = labels.draft_hidden.data() + r * d;
        const std::size_t slot = predictor_slot(labels.step[r]);
        const double s = predictor_score(w, {ht, d}, {hdr, d}, labels.step[r]);
        const auto err = static_cast<float>((sigmoid(s) - labels.label[r]) * inv_b);
        kernels::vec_mat(ht, w.position[slot].data(), d, d, z.data());
        std::copy(hdr, hdr + d, z.begin() + static_cast<std::ptrdiff_t>(d));
        for (std::size_t j = 0; j < 2 * d; ++j) {
          g[0][j] -= err * z[j];
          g[0][2 * d + j] += err * z[j];
        }
        float* gw = g[1 + slot].data();
        for (std::size_t a = 0; a < d; ++a) {
          const float ea = err * ht[a];
          for (std::size_t bcol = 0; bcol < d; ++bcol) gw[a * d + bcol] += ea * wt[bcol];
        }
      }
      ++t;
      const auto c1 = static_cast<float>(1.0 - std::pow(0.9, static_cast<double>(t)));
      const auto c2 = static_cast<float>(1.0 - std::pow(0.999, static_cast<double>(t)));
      for (std::size_t p = 0; p < params.size(); ++p) {
        float* wp = params[p]->data();
        for (std::size_t i = 0; i < params[p]->numel(); ++i) {
          m[p][i] = 0.9f * m[p][i] + 0.1f * g[p][i];
          v[p][i] = 0.999f * v[p][i] + 0.001f * g[p][i] * g[p][i];
          wp[i] -= lr * (m[p][i] / c1) / (std::sqrt(v[p][i] / c2) + 1e-8f);
        }
      }
    }
  }
  return w;
}

double roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) throw PreconditionError("scores and labels differ in size");
  std::vector<std::size_t> order = iota_vec(scores.size());
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        pos_rank_sum += mid_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw PreconditionError("AUC needs both classes");
  const double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

double predictor_auc(const PredictorWeights& predictor, const PredictorLabels& labels) {
  const std::size_t d = labels.d_model;
  std::vector<double> scores(labels.size());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    scores[r] = predictor_score(predictor, {labels.target_hidden.data() + r * d, d},
                                {labels.draft_hidden.data() + r * d, d}, labels.step[r]);
  }
  return roc_auc(scores, labels.label);
}

PredictorEvaluation evaluate_predictor(const ModelBundle& models,
                                       const std::vector<TokenSequence>& prompts,
                                       const LabelConfig& labels, double held_out_fraction,
                                       std::uint64_t split_seed, const PredictorTrainConfig& cfg) {
  PredictorEvaluation e;
  e.labels = make_predictor_labels(models, prompts, labels);
  const auto [train, held] = split_labels(e.labels, held_out_fraction, split_seed);
  e.train_size = train.size();
  e.held_out_size = held.size();
  e.predictor = train_predictor(train, cfg);
  e.held_out_auc = predictor_auc(e.predictor, held);
  const PredictorWeights control = train_predictor(shuffle_labels(train, cfg.seed + 1), cfg);
  e.shuffled_control_auc = predictor_auc(control, held);
  return e;
}

}  // namespace spexit
