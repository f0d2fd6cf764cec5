#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "todlab/dialog.hpp"
#include "todlab/jsonio.hpp"
#include "todlab/loss.hpp"
#include "todlab/rng.hpp"

namespace todlab {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct LMConfig {
  int vocab_size = 0;
  int d_model = 96;
  int n_layers = 3;
  int n_heads = 4;
  double dropout = 0.1;
  int max_len = 256;
  uint64_t init_seed = 1;

  int d_ff() const { return 4 * d_model; }
  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || max_len < 2)
      throw std::invalid_argument("invalid model dimensions");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("d_model must be divisible by n_heads");
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw std::invalid_argument("dropout must be in [0,1)");
  }
};

// ---------------------------------------------------------------------------
// Transformer language model (decoder-only, pre-LN, GELU MLP)
// ---------------------------------------------------------------------------

class TransformerLM {
 public:
  struct TensorInfo {
    std::string name;
    size_t offset = 0;
    int rows = 0;
    int cols = 0;
    bool decay = false;  // weight matrices get weight decay, biases/gains do not
    size_t size() const { return static_cast<size_t>(rows) * cols; }
  };

  explicit TransformerLM(const LMConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    build_registry();
    params_.assign(total_params_, 0.0);
    init_parameters();
  }

  const LMConfig& config() const { return cfg_; }
  size_t num_params() const { return total_params_; }
  const std::vector<double>& params() const { return params_; }
  std::vector<double>& params() { return params_; }
  const std::vector<TensorInfo>& registry() const { return tensors_; }

  // -- forward ---------------------------------------------------------------

  struct LayerCache {
    Matrix x_in;           // residual input
    Vector ln1_mean, ln1_rstd;
    Matrix ln1_out;
    Matrix qkv;
    std::vector<Matrix> att;  // per head [T,T] softmax probabilities
    Matrix att_merged;        // concat of head outputs
    Matrix attn_drop;         // dropout mask (empty when off)
    Matrix x_mid;             // after attention residual
    Vector ln2_mean, ln2_rstd;
    Matrix ln2_out;
    Matrix fc_pre;            // pre-GELU
    Matrix gelu_out;
    Matrix mlp_drop;
  };

  struct ForwardCache {
    std::vector<int> tokens;
    Matrix emb_drop;  // dropout mask for embeddings (empty when off)
    Matrix emb_out;   // embeddings after dropout (input to layer 0)
    std::vector<LayerCache> layers;
    Matrix x_final;   // output of last layer
    Vector lnf_mean, lnf_rstd;
    Matrix lnf_out;
  };

  // Causal logits for next-token prediction: row t predicts tokens[t+1].
  // Identical (params, tokens, dropout_seed) triples give identical outputs.
  Matrix forward_train(const std::vector<int>& tokens, uint64_t dropout_seed,
                       ForwardCache* cache) const {
    check_tokens(tokens);
    const int T = static_cast<int>(tokens.size());
    if (T < 2) throw std::invalid_argument("forward_train needs >= 2 tokens");
    const int C = cfg_.d_model;
    const bool drop_on = cfg_.dropout > 0.0;
    Rng drop_rng(dropout_seed);

    ForwardCache local;
    ForwardCache& fc = cache ? *cache : local;
    fc.tokens = tokens;
    fc.layers.resize(cfg_.n_layers);

    auto wte = tensor_map(kWte);
    auto wpe = tensor_map(kWpe);
    Matrix x(T, C);
    for (int t = 0; t < T; ++t)
      x.row(t) = wte.row(tokens[t]) + wpe.row(t);
    if (drop_on) {
      fc.emb_drop = draw_dropout_mask(drop_rng, T, C);
      x = x.cwiseProduct(fc.emb_drop);
    }
    fc.emb_out = x;

    for (int l = 0; l < cfg_.n_layers; ++l) {
      LayerCache& lc = fc.layers[l];
      lc.x_in = x;
      layernorm_forward(x, tensor_map(layer_base(l) + kLn1G),
                        tensor_map(layer_base(l) + kLn1B), lc.ln1_out, lc.ln1_mean,
                        lc.ln1_rstd);
      lc.qkv.noalias() = lc.ln1_out * tensor_map(layer_base(l) + kWqkv);
      lc.qkv.rowwise() += tensor_map(layer_base(l) + kBqkv).row(0);
      attention_forward(lc);
      Matrix attn_out(T, C);
      attn_out.noalias() = lc.att_merged * tensor_map(layer_base(l) + kWo);
      attn_out.rowwise() += tensor_map(layer_base(l) + kBo).row(0);
      if (drop_on) {
        lc.attn_drop = draw_dropout_mask(drop_rng, T, C);
        attn_out = attn_out.cwiseProduct(lc.attn_drop);
      }
      lc.x_mid = lc.x_in + attn_out;

      layernorm_forward(lc.x_mid, tensor_map(layer_base(l) + kLn2G),
                        tensor_map(layer_base(l) + kLn2B), lc.ln2_out, lc.ln2_mean,
                        lc.ln2_rstd);
      lc.fc_pre.noalias() = lc.ln2_out * tensor_map(layer_base(l) + kWfc);
      lc.fc_pre.rowwise() += tensor_map(layer_base(l) + kBfc).row(0);
      lc.gelu_out = gelu(lc.fc_pre);
      Matrix mlp_out(T, C);
      mlp_out.noalias() = lc.gelu_out * tensor_map(layer_base(l) + kWproj);
      mlp_out.rowwise() += tensor_map(layer_base(l) + kBproj).row(0);
      if (drop_on) {
        lc.mlp_drop = draw_dropout_mask(drop_rng, T, C);
        mlp_out = mlp_out.cwiseProduct(lc.mlp_drop);
      }
      x = lc.x_mid + mlp_out;
    }

    fc.x_final = x;
    layernorm_forward(x, tensor_map(kLnfG), tensor_map(kLnfB), fc.lnf_out, fc.lnf_mean,
                      fc.lnf_rstd);
    Matrix logits(T - 1, cfg_.vocab_size);
    logits.noalias() = fc.lnf_out.topRows(T - 1) * tensor_map(kWhead);
    return logits;
  }

  // The public distribution op: per-position next-token distributions.
  LMDistribution forward(const std::vector<int>& tokens, uint64_t dropout_seed) const {
    LMDistribution d;
    d.probs = softmax_rows(forward_train(tokens, dropout_seed, nullptr));
    return d;
  }

  // -- backward ----------------------------------------------------------------

  // Accumulates parameter gradients into `grad` (size num_params()).
  void backward(const ForwardCache& fc, const Matrix& dlogits,
                std::vector<double>& grad) const {
    const int T = static_cast<int>(fc.tokens.size());
    const int C = cfg_.d_model;
    if (grad.size() != total_params_)
      throw std::invalid_argument("gradient buffer size mismatch");
    if (dlogits.rows() != T - 1 || dlogits.cols() != cfg_.vocab_size)
      throw std::invalid_argument("dlogits shape mismatch");

    // head
    {
      auto d_whead = grad_map(grad, kWhead);
      d_whead.noalias() += fc.lnf_out.topRows(T - 1).transpose() * dlogits;
    }
    Matrix dx = Matrix::Zero(T, C);
    dx.topRows(T - 1).noalias() = dlogits * tensor_map(kWhead).transpose();

    layernorm_backward(fc.x_final, fc.lnf_mean, fc.lnf_rstd, tensor_map(kLnfG), dx,
                       grad_map(grad, kLnfG), grad_map(grad, kLnfB));

    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
      const LayerCache& lc = fc.layers[l];
      const int base = layer_base(l);

      // MLP branch
      Matrix d_mlp_out = dx;
      if (lc.mlp_drop.size()) d_mlp_out = d_mlp_out.cwiseProduct(lc.mlp_drop);
      grad_map(grad, base + kBproj).row(0) += d_mlp_out.colwise().sum();
      grad_map(grad, base + kWproj).noalias() += lc.gelu_out.transpose() * d_mlp_out;
      Matrix d_gelu_out = d_mlp_out * tensor_map(base + kWproj).transpose();
      Matrix d_fc_pre = gelu_backward(lc.fc_pre, d_gelu_out);
      grad_map(grad, base + kBfc).row(0) += d_fc_pre.colwise().sum();
      grad_map(grad, base + kWfc).noalias() += lc.ln2_out.transpose() * d_fc_pre;
      Matrix d_ln2_out = d_fc_pre * tensor_map(base + kWfc).transpose();
      Matrix d_x_mid = d_ln2_out;  // reuse as output of LN backward
      layernorm_backward(lc.x_mid, lc.ln2_mean, lc.ln2_rstd, tensor_map(base + kLn2G),
                         d_x_mid, grad_map(grad, base + kLn2G),
                         grad_map(grad, base + kLn2B));
      dx += d_x_mid;  // residual: dx flows both through MLP branch and skip

      // attention branch
      Matrix d_attn_out = dx;
      if (lc.attn_drop.size()) d_attn_out = d_attn_out.cwiseProduct(lc.attn_drop);
      grad_map(grad, base + kBo).row(0) += d_attn_out.colwise().sum();
      grad_map(grad, base + kWo).noalias() += lc.att_merged.transpose() * d_attn_out;
      Matrix d_att_merged = d_attn_out * tensor_map(base + kWo).transpose();
      Matrix d_qkv = Matrix::Zero(T, 3 * C);
      attention_backward(lc, d_att_merged, d_qkv);
      grad_map(grad, base + kBqkv).row(0) += d_qkv.colwise().sum();
      grad_map(grad, base + kWqkv).noalias() += lc.ln1_out.transpose() * d_qkv;
      Matrix d_ln1_out = d_qkv * tensor_map(base + kWqkv).transpose();
      layernorm_backward(lc.x_in, lc.ln1_mean, lc.ln1_rstd, tensor_map(base + kLn1G),
                         d_ln1_out, grad_map(grad, base + kLn1G),
                         grad_map(grad, base + kLn1B));
      dx += d_ln1_out;
    }

    // embeddings
    Matrix d_emb = dx;
    if (fc.emb_drop.size()) d_emb = d_emb.cwiseProduct(fc.emb_drop);
    auto d_wte = grad_map(grad, kWte);
    auto d_wpe = grad_map(grad, kWpe);
    for (int t = 0; t < T; ++t) {
      d_wte.row(fc.tokens[t]) += d_emb.row(t);
      d_wpe.row(t) += d_emb.row(t);
    }
  }

  // -- incremental decoding ----------------------------------------------------

  struct DecodeState {
    std::vector<Matrix> k_cache, v_cache;  // per layer, rows = positions seen
    int len = 0;
  };

  DecodeState make_decode_state() const {
    DecodeState s;
    s.k_cache.assign(cfg_.n_layers, Matrix(cfg_.max_len, cfg_.d_model));
    s.v_cache.assign(cfg_.n_layers, Matrix(cfg_.max_len, cfg_.d_model));
    return s;
  }

  // Feeds one token (dropout off); returns the next-token logits.
  Vector decode_step(DecodeState& st, int token) const {
    if (token < 0 || token >= cfg_.vocab_size)
      throw std::invalid_argument("decode_step: token id out of range");
    if (st.len >= cfg_.max_len)
      throw std::length_error("decode_step: context window exhausted");
    const int C = cfg_.d_model;
    const int H = cfg_.n_heads;
    const int hs = cfg_.head_dim();
    const int pos = st.len;

    Eigen::RowVectorXd x = tensor_map(kWte).row(token) + tensor_map(kWpe).row(pos);
    Eigen::RowVectorXd q(C), merged(C);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const int base = layer_base(l);
      Eigen::RowVectorXd n1 = layernorm_row(x, tensor_map(base + kLn1G),
                                            tensor_map(base + kLn1B));
      Eigen::RowVectorXd qkv = n1 * tensor_map(base + kWqkv);
      qkv += tensor_map(base + kBqkv).row(0);
      st.k_cache[l].row(pos) = qkv.segment(C, C);
      st.v_cache[l].row(pos) = qkv.segment(2 * C, C);
      q = qkv.segment(0, C);
      const double scale = 1.0 / std::sqrt(static_cast<double>(hs));
      for (int h = 0; h < H; ++h) {
        auto K = st.k_cache[l].block(0, h * hs, pos + 1, hs);
        auto V = st.v_cache[l].block(0, h * hs, pos + 1, hs);
        Eigen::VectorXd scores = (K * q.segment(h * hs, hs).transpose()) * scale;
        double mx = scores.maxCoeff();
        Eigen::ArrayXd e = (scores.array() - mx).exp();
        Eigen::VectorXd probs = (e / e.sum()).matrix();
        merged.segment(h * hs, hs) = (V.transpose() * probs).transpose();
      }
      Eigen::RowVectorXd attn_out = merged * tensor_map(base + kWo);
      attn_out += tensor_map(base + kBo).row(0);
      x += attn_out;
      Eigen::RowVectorXd n2 = layernorm_row(x, tensor_map(base + kLn2G),
                                            tensor_map(base + kLn2B));
      Eigen::RowVectorXd fc = n2 * tensor_map(base + kWfc);
      fc += tensor_map(base + kBfc).row(0);
      Eigen::RowVectorXd g(fc.size());
      for (Eigen::Index i = 0; i < fc.size(); ++i) g(i) = gelu_scalar(fc(i));
      Eigen::RowVectorXd mlp_out = g * tensor_map(base + kWproj);
      mlp_out += tensor_map(base + kBproj).row(0);
      x += mlp_out;
    }
    Eigen::RowVectorXd nf = layernorm_row(x, tensor_map(kLnfG), tensor_map(kLnfB));
    st.len++;
    return (nf * tensor_map(kWhead)).transpose();
  }

  // Greedy decoding from `context` until `stop_token` or `max_new` tokens.
  // Returned tokens exclude the context and include the stop token.
  std::vector<int> generate(const std::vector<int>& context, int stop_token,
                            int max_new) const {
    DecodeState st = make_decode_state();
    return generate_continue(st, context, stop_token, max_new);
  }

  // Same but reusing an existing decode state (context appended to it).
  std::vector<int> generate_continue(DecodeState& st, const std::vector<int>& context,
                                     int stop_token, int max_new) const {
    if (st.len == 0 && context.empty())
      throw std::invalid_argument("generate: empty context");
    if (st.len + static_cast<int>(context.size()) >= cfg_.max_len)
      throw std::length_error("generate: context length " +
                              std::to_string(st.len + context.size()) +
                              " >= max length " + std::to_string(cfg_.max_len));
    Vector logits;
    for (int tok : context) logits = decode_step(st, tok);
    std::vector<int> out;
    while (static_cast<int>(out.size()) < max_new) {
      int next = 0;
      logits.maxCoeff(&next);
      out.push_back(next);
      if (next == stop_token) break;
      if (st.len >= cfg_.max_len) break;  // window exhausted, caller diagnoses
      logits = decode_step(st, next);
    }
    return out;
  }

  // Appends tokens to the decode state without generating (context building).
  void prefill(DecodeState& st, const std::vector<int>& tokens) const {
    for (int tok : tokens) decode_step(st, tok);
  }

 private:
  // registry slots per layer, in order
  static constexpr int kLn1G = 0, kLn1B = 1, kWqkv = 2, kBqkv = 3, kWo = 4, kBo = 5,
                       kLn2G = 6, kLn2B = 7, kWfc = 8, kBfc = 9, kWproj = 10,
                       kBproj = 11, kPerLayer = 12;
  static constexpr int kWte = 0, kWpe = 1;
  int layer_base(int l) const { return 2 + l * kPerLayer; }
  int kLnfG = 0, kLnfB = 0, kWhead = 0;  // set by build_registry

  LMConfig cfg_;
  std::vector<TensorInfo> tensors_;
  size_t total_params_ = 0;
  std::vector<double> params_;

  void add_tensor(const std::string& name, int rows, int cols, bool decay) {
    TensorInfo ti;
    ti.name = name;
    ti.offset = total_params_;
    ti.rows = rows;
    ti.cols = cols;
    ti.decay = decay;
    total_params_ += ti.size();
    tensors_.push_back(std::move(ti));
  }

  void build_registry() {
    const int C = cfg_.d_model, F = cfg_.d_ff(), V = cfg_.vocab_size, P = cfg_.max_len;
    add_tensor("wte", V, C, true);
    add_tensor("wpe", P, C, true);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      add_tensor(p + "ln1.g", 1, C, false);
      add_tensor(p + "ln1.b", 1, C, false);
      add_tensor(p + "attn.w_qkv", C, 3 * C, true);
      add_tensor(p + "attn.b_qkv", 1, 3 * C, false);
      add_tensor(p + "attn.w_out", C, C, true);
      add_tensor(p + "attn.b_out", 1, C, false);
      add_tensor(p + "ln2.g", 1, C, false);
      add_tensor(p + "ln2.b", 1, C, false);
      add_tensor(p + "mlp.w_fc", C, F, true);
      add_tensor(p + "mlp.b_fc", 1, F, false);
      add_tensor(p + "mlp.w_proj", F, C, true);
      add_tensor(p + "mlp.b_proj", 1, C, false);
    }
    kLnfG = static_cast<int>(tensors_.size());
    add_tensor("lnf.g", 1, C, false);
    kLnfB = static_cast<int>(tensors_.size());
    add_tensor("lnf.b", 1, C, false);
    kWhead = static_cast<int>(tensors_.size());
    add_tensor("head.w", C, V, true);
  }

  void init_parameters() {
    Rng rng(derive_seed(cfg_.init_seed, "init"));
    for (size_t i = 0; i < tensors_.size(); ++i) {
      const TensorInfo& ti = tensors_[i];
      double* p = params_.data() + ti.offset;
      bool is_gain = ti.name.find(".g") != std::string::npos &&
                     ti.name.find("ln") != std::string::npos;
      if (is_gain) {
        for (size_t k = 0; k < ti.size(); ++k) p[k] = 1.0;
      } else if (ti.cols == static_cast<int>(ti.size()) && ti.rows == 1 &&
                 ti.name.find(".b") != std::string::npos) {
        for (size_t k = 0; k < ti.size(); ++k) p[k] = 0.0;
      } else {
        for (size_t k = 0; k < ti.size(); ++k) p[k] = 0.02 * rng.normal();
      }
    }
  }

  Eigen::Map<const Matrix> tensor_map(int idx) const {
    const TensorInfo& ti = tensors_[idx];
    return Eigen::Map<const Matrix>(params_.data() + ti.offset, ti.rows, ti.cols);
  }

  Eigen::Map<Matrix> grad_map(std::vector<double>& grad, int idx) const {
    const TensorInfo& ti = tensors_[idx];
    return Eigen::Map<Matrix>(grad.data() + ti.offset, ti.rows, ti.cols);
  }

  void check_tokens(const std::vector<int>& tokens) const {
    if (static_cast<int>(tokens.size()) > cfg_.max_len)
      throw std::length_error("sequence length " + std::to_string(tokens.size()) +
                              " exceeds max length " + std::to_string(cfg_.max_len));
    for (int t : tokens)
      if (t < 0 || t >= cfg_.vocab_size)
        throw std::invalid_argument("token id " + std::to_string(t) +
                                    " outside vocabulary");
  }

  Matrix draw_dropout_mask(Rng& rng, int rows, int cols) const {
    const double keep = 1.0 - cfg_.dropout;
    const double scale = 1.0 / keep;
    Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m(r, c) = rng.uniform() < keep ? scale : 0.0;
    return m;
  }

  static void layernorm_forward(const Matrix& x, Eigen::Map<const Matrix> g,
                                Eigen::Map<const Matrix> b, Matrix& out, Vector& mean,
                                Vector& rstd) {
    const int T = static_cast<int>(x.rows());
    const int C = static_cast<int>(x.cols());
    out.resize(T, C);
    mean.resize(T);
    rstd.resize(T);
    for (int t = 0; t < T; ++t) {
      double mu = x.row(t).mean();
      double var = (x.row(t).array() - mu).square().mean();
      double rs = 1.0 / std::sqrt(var + 1e-5);
      mean(t) = mu;
      rstd(t) = rs;
      out.row(t) =
          (((x.row(t).array() - mu) * rs) * g.row(0).array() + b.row(0).array())
              .matrix();
    }
  }

  static Eigen::RowVectorXd layernorm_row(const Eigen::RowVectorXd& x,
                                          Eigen::Map<const Matrix> g,
                                          Eigen::Map<const Matrix> b) {
    double mu = x.mean();
    double var = (x.array() - mu).square().mean();
    double rs = 1.0 / std::sqrt(var + 1e-5);
    return (((x.array() - mu) * rs) * g.row(0).array() + b.row(0).array()).matrix();
  }

  // In-place: `dy` becomes dx. Gain/bias grads accumulated.
  static void layernorm_backward(const Matrix& x, const Vector& mean, const Vector& rstd,
                                 Eigen::Map<const Matrix> g, Matrix& dy,
                                 Eigen::Map<Matrix> dg, Eigen::Map<Matrix> db) {
    const int T = static_cast<int>(x.rows());
    for (int t = 0; t < T; ++t) {
      RowArray xhat = (x.row(t).array() - mean(t)) * rstd(t);
      RowArray dyr = dy.row(t).array();
      dg.row(0).array() += dyr * xhat;
      db.row(0).array() += dyr;
      RowArray dxhat = dyr * g.row(0).array();
      double m1 = dxhat.mean();
      double m2 = (dxhat * xhat).mean();
      dy.row(t) = (rstd(t) * (dxhat - m1 - xhat * m2)).matrix();
    }
  }

  static double gelu_scalar(double x) {
    const double k = 0.7978845608028654;  // sqrt(2/pi)
    double u = k * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
  }

  static Matrix gelu(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) y(i) = gelu_scalar(x(i));
    return y;
  }

  static Matrix gelu_backward(const Matrix& x, const Matrix& dy) {
    const double k = 0.7978845608028654;
    Matrix dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      double xi = x(i);
      double u = k * (xi + 0.044715 * xi * xi * xi);
      double th = std::tanh(u);
      double sech2 = 1.0 - th * th;
      double du = k * (1.0 + 3.0 * 0.044715 * xi * xi);
      dx(i) = dy(i) * (0.5 * (1.0 + th) + 0.5 * xi * sech2 * du);
    }
    return dx;
  }

  void attention_forward(LayerCache& lc) const {
    const int T = static_cast<int>(lc.qkv.rows());
    const int C = cfg_.d_model;
    const int H = cfg_.n_heads;
    const int hs = cfg_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hs));
    lc.att.assign(H, Matrix());
    lc.att_merged.resize(T, C);
    for (int h = 0; h < H; ++h) {
      auto q = lc.qkv.block(0, h * hs, T, hs);
      auto k = lc.qkv.block(0, C + h * hs, T, hs);
      auto v = lc.qkv.block(0, 2 * C + h * hs, T, hs);
      Matrix scores(T, T);
      scores.noalias() = q * k.transpose();
      scores *= scale;
      Matrix& probs = lc.att[h];
      probs = Matrix::Zero(T, T);
      for (int r = 0; r < T; ++r) {
        double mx = scores.row(r).head(r + 1).maxCoeff();
        RowArray e = (scores.row(r).head(r + 1).array() - mx).exp();
        probs.row(r).head(r + 1) = (e / e.sum()).matrix();
      }
      lc.att_merged.block(0, h * hs, T, hs).noalias() = probs * v;
    }
  }

  void attention_backward(const LayerCache& lc, const Matrix& d_merged,
                          Matrix& d_qkv) const {
    const int T = static_cast<int>(lc.qkv.rows());
    const int C = cfg_.d_model;
    const int H = cfg_.n_heads;
    const int hs = cfg_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hs));
    for (int h = 0; h < H; ++h) {
      auto q = lc.qkv.block(0, h * hs, T, hs);
      auto k = lc.qkv.block(0, C + h * hs, T, hs);
      auto v = lc.qkv.block(0, 2 * C + h * hs, T, hs);
      const Matrix& probs = lc.att[h];
      auto d_out = d_merged.block(0, h * hs, T, hs);

      Matrix d_probs(T, T);
      d_probs.noalias() = d_out * v.transpose();
      d_qkv.block(0, 2 * C + h * hs, T, hs).noalias() += probs.transpose() * d_out;

      Matrix d_scores(T, T);
      for (int r = 0; r < T; ++r) {
        auto pr = probs.row(r).array();
        auto dp = d_probs.row(r).array();
        double dot = (pr * dp).sum();
        d_scores.row(r) = (pr * (dp - dot)).matrix();
      }
      d_scores *= scale;
      d_qkv.block(0, h * hs, T, hs).noalias() += d_scores * k;
      d_qkv.block(0, C + h * hs, T, hs).noalias() += d_scores.transpose() * q;
    }
  }
};

// ---------------------------------------------------------------------------
// stage_loss: the Eq. (4) composition for one sequence pair (no gradients)
// ---------------------------------------------------------------------------

// Stage 1: both token lists are the same ground-truth sequence (dropout pair).
// Stage 2: the two mask variants of one sampled sequence; `targets` are the
// pre-mask tokens either way. Runs the forward pass twice with independent
// dropout seeds.
inline LossBreakdown stage_loss(const TransformerLM& model,
                                const std::vector<int>& tokens_a,
                                const std::vector<int>& tokens_b,
                                const std::vector<int>& targets, double alpha,
                                Stage stage, uint64_t seed_a, uint64_t seed_b) {
  if (tokens_a.size() != tokens_b.size())
    throw std::invalid_argument("stage_loss: pair length mismatch");
  if (targets.size() != tokens_a.size())
    throw std::invalid_argument("stage_loss: targets length mismatch");
  Matrix logits_a = model.forward_train(tokens_a, seed_a, nullptr);
  Matrix logits_b = model.forward_train(tokens_b, seed_b, nullptr);
  std::vector<int> shifted(targets.begin() + 1, targets.end());
  PairLossResult r = pair_loss(logits_a, logits_b, shifted, nullptr, alpha, 1.0, false);
  return LossBreakdown::make(r.nll, r.kl, alpha, stage);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct OptimizerState {
  std::vector<double> m, v;
  int64_t t = 0;
};

struct Checkpoint {
  LMConfig config;
  Vocab vocab;
  std::vector<double> params;
  std::optional<OptimizerState> optimizer;
  int64_t global_step = 0;
  int epoch = 0;
};

namespace detail {

inline void write_blob(std::ofstream& out, const std::vector<double>& v) {
  uint64_t n = v.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
}

inline std::vector<double> read_blob(std::ifstream& in) {
  uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error("checkpoint: truncated parameter blob");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  json meta;
  meta["format_version"] = 1;
  meta["config"] = {{"vocab_size", ck.config.vocab_size},
                    {"d_model", ck.config.d_model},
                    {"n_layers", ck.config.n_layers},
                    {"n_heads", ck.config.n_heads},
                    {"dropout", ck.config.dropout},
                    {"max_len", ck.config.max_len},
                    {"init_seed", ck.config.init_seed}};
  meta["vocab"] = ck.vocab.tokens();
  meta["global_step"] = ck.global_step;
  meta["epoch"] = ck.epoch;
  meta["has_optimizer"] = ck.optimizer.has_value();
  if (ck.optimizer) meta["optimizer_t"] = ck.optimizer->t;
  const std::string mstr = meta.dump();
  const char magic[4] = {'T', 'D', 'L', 'M'};
  uint32_t version = 1;
  uint64_t mlen = mstr.size();
  out.write(magic, 4);
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mstr.data(), static_cast<std::streamsize>(mlen));
  detail::write_blob(out, ck.params);
  if (ck.optimizer) {
    detail::write_blob(out, ck.optimizer->m);
    detail::write_blob(out, ck.optimizer->v);
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[4];
  uint32_t version = 0;
  uint64_t mlen = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  if (!in || std::memcmp(magic, "TDLM", 4) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  if (version != 1)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  std::string mstr(mlen, '\0');
  in.read(mstr.data(), static_cast<std::streamsize>(mlen));
  json meta = json::parse(mstr);
  Checkpoint ck;
  const json& jc = meta.at("config");
  ck.config.vocab_size = jc.at("vocab_size").get<int>();
  ck.config.d_model = jc.at("d_model").get<int>();
  ck.config.n_layers = jc.at("n_layers").get<int>();
  ck.config.n_heads = jc.at("n_heads").get<int>();
  ck.config.dropout = jc.at("dropout").get<double>();
  ck.config.max_len = jc.at("max_len").get<int>();
  ck.config.init_seed = jc.at("init_seed").get<uint64_t>();
  for (const auto& t : meta.at("vocab")) ck.vocab.add(t.get<std::string>());
  ck.global_step = meta.at("global_step").get<int64_t>();
  ck.epoch = meta.at("epoch").get<int>();
  ck.params = detail::read_blob(in);
  if (meta.at("has_optimizer").get<bool>()) {
    OptimizerState os;
    os.m = detail::read_blob(in);
    os.v = detail::read_blob(in);
    os.t = meta.at("optimizer_t").get<int64_t>();
    ck.optimizer = std::move(os);
  }
  return ck;
}

// Rebuilds a model from a checkpoint; forward outputs match the saved model
// bit for bit because raw double bits are preserved.
inline TransformerLM model_from_checkpoint(const Checkpoint& ck) {
  TransformerLM model(ck.config);
  if (ck.params.size() != model.num_params())
    throw std::runtime_error("checkpoint parameter count mismatch");
  model.params() = ck.params;
  return model;
}

}  // namespace todlab
