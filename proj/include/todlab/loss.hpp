#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace todlab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;

// Probabilities below this floor are clamped inside log/KL to keep the loss
// finite.
inline constexpr double kProbFloor = 1e-12;

// Per-position categorical next-token distributions: row t is the prediction
// for target position t (the token at index t+1 of the input sequence).
struct LMDistribution {
  Matrix probs;  // [positions, vocab]

  int positions() const { return static_cast<int>(probs.rows()); }
  int vocab() const { return static_cast<int>(probs.cols()); }
};

enum class Stage { stage1, stage2 };

inline const char* stage_name(Stage s) { return s == Stage::stage1 ? "stage1" : "stage2"; }

//総 loss record. `total` is always computed as nll + alpha * kl so the
// composition invariant holds bit-exactly.
struct LossBreakdown {
  double nll = 0.0;
  double kl = 0.0;
  double alpha = 0.0;
  double total = 0.0;
  Stage stage = Stage::stage1;

  static LossBreakdown make(double nll, double kl, double alpha, Stage stage) {
    LossBreakdown b;
    b.nll = nll;
    b.kl = kl;
    b.alpha = alpha;
    b.total = nll + alpha * kl;
    b.stage = stage;
    return b;
  }
};

namespace detail {

inline int masked_count(int n, const std::vector<uint8_t>* mask) {
  if (!mask) return n;
  if (static_cast<int>(mask->size()) != n)
    throw std::invalid_argument("position mask length mismatch");
  int m = 0;
  for (uint8_t v : *mask) m += v ? 1 : 0;
  return m;
}

inline bool active(const std::vector<uint8_t>* mask, int t) {
  return !mask || (*mask)[t];
}

}  // namespace detail

// Mean over unmasked positions of -log P(target_t), probabilities clamped at
// kProbFloor. Throws if no position is unmasked.
inline double nll_loss(const LMDistribution& dist, const std::vector<int>& targets,
                       const std::vector<uint8_t>* position_mask = nullptr) {
  const int n = dist.positions();
  if (static_cast<int>(targets.size()) != n)
    throw std::invalid_argument("nll_loss: targets length " +
                                std::to_string(targets.size()) + " != positions " +
                                std::to_string(n));
  const int m = detail::masked_count(n, position_mask);
  if (m == 0) throw std::invalid_argument("nll_loss: zero unmasked positions");
  double sum = 0.0;
  for (int t = 0; t < n; ++t) {
    if (!detail::active(position_mask, t)) continue;
    int y = targets[t];
    if (y < 0 || y >= dist.vocab())
      throw std::invalid_argument("nll_loss: target id out of range");
    sum -= std::log(std::max(dist.probs(t, y), kProbFloor));
  }
  return sum / m;
}

// Mean over unmasked positions of 1/2 [KL(A||B) + KL(B||A)].
inline double bidirectional_kl(const LMDistribution& a, const LMDistribution& b,
                               const std::vector<uint8_t>* position_mask = nullptr) {
  if (a.positions() != b.positions() || a.vocab() != b.vocab())
    throw std::invalid_argument("bidirectional_kl: shape mismatch");
  const int n = a.positions();
  const int m = detail::masked_count(n, position_mask);
  if (m == 0) throw std::invalid_argument("bidirectional_kl: zero unmasked positions");
  double sum = 0.0;
  for (int t = 0; t < n; ++t) {
    if (!detail::active(position_mask, t)) continue;
    double kl_ab = 0.0, kl_ba = 0.0;
    for (int i = 0; i < a.vocab(); ++i) {
      double pa = a.probs(t, i);
      double pb = b.probs(t, i);
      double la = std::log(std::max(pa, kProbFloor));
      double lb = std::log(std::max(pb, kProbFloor));
      if (pa > 0.0) kl_ab += pa * (la - lb);
      if (pb > 0.0) kl_ba += pb * (lb - la);
    }
    sum += std::max(0.0, 0.5 * (kl_ab + kl_ba));
  }
  return sum / m;
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    double mx = logits.row(r).maxCoeff();
    RowArray e = (logits.row(r).array() - mx).exp();
    out.row(r) = (e / e.sum()).matrix();
  }
  return out;
}

inline Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    double mx = logits.row(r).maxCoeff();
    RowArray sh = logits.row(r).array() - mx;
    double lse = std::log(sh.exp().sum());
    out.row(r) = (sh - lse).matrix();
  }
  return out;
}

// Loss and logit gradients for one dropout-consistency pair:
//   L = 1/2 (NLL_1 + NLL_2) + alpha * KLbar
// where NLL_k is the token-mean NLL of pass k against `targets` and KLbar the
// token-mean bidirectional KL between the two passes. Gradients are scaled by
// `loss_scale` (1/batch for mean-of-sequences batching).
struct PairLossResult {
  double nll = 0.0;  // mean of the two passes
  double kl = 0.0;
  Matrix dlogits1;
  Matrix dlogits2;
};

inline PairLossResult pair_loss(const Matrix& logits1, const Matrix& logits2,
                                const std::vector<int>& targets,
                                const std::vector<uint8_t>* position_mask,
                                double alpha, double loss_scale, bool want_grad) {
  if (logits1.rows() != logits2.rows() || logits1.cols() != logits2.cols())
    throw std::invalid_argument("pair_loss: pass shape mismatch");
  const int n = static_cast<int>(logits1.rows());
  const int vocab = static_cast<int>(logits1.cols());
  if (static_cast<int>(targets.size()) != n)
    throw std::invalid_argument("pair_loss: targets length mismatch");
  const int m = detail::masked_count(n, position_mask);
  if (m == 0) throw std::invalid_argument("pair_loss: zero unmasked positions");

  Matrix lp = log_softmax_rows(logits1);
  Matrix lq = log_softmax_rows(logits2);

  PairLossResult out;
  if (want_grad) {
    out.dlogits1 = Matrix::Zero(n, vocab);
    out.dlogits2 = Matrix::Zero(n, vocab);
  }
  double nll1 = 0.0, nll2 = 0.0, kl_sum = 0.0;
  RowArray p(vocab), q(vocab), s(vocab);
  for (int t = 0; t < n; ++t) {
    if (!detail::active(position_mask, t)) continue;
    int y = targets[t];
    if (y < 0 || y >= vocab)
      throw std::invalid_argument("pair_loss: target id out of range");
    nll1 -= lp(t, y);
    nll2 -= lq(t, y);
    p = lp.row(t).array().exp();
    q = lq.row(t).array().exp();
    s = lp.row(t).array() - lq.row(t).array();
    double kl_pq = (p * s).sum();
    double kl_qp = -(q * s).sum();
    kl_sum += std::max(0.0, 0.5 * (kl_pq + kl_qp));
    if (want_grad) {
      // d/dlogits1 of the per-position terms (chain through both softmaxes)
      double c_nll = loss_scale * 0.5 / m;
      double c_kl = loss_scale * alpha * 0.5 / m;
      RowArray g1 = c_nll * p + c_kl * (p * (s - kl_pq) + (p - q));
      RowArray g2 = c_nll * q + c_kl * (q * (-s - kl_qp) + (q - p));
      g1(y) -= c_nll;
      g2(y) -= c_nll;
      out.dlogits1.row(t) = g1.matrix();
      out.dlogits2.row(t) = g2.matrix();
    }
  }
  out.nll = 0.5 * (nll1 + nll2) / m;
  out.kl = kl_sum / m;
  return out;
}

}  // namespace todlab
