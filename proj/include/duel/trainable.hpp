#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "duel/core.hpp"
#include "duel/denoiser.hpp"
#include "duel/rng.hpp"

namespace duel {

/// Smallest order-sensitive denoiser: token+position embedding sum per
/// position (masked positions use a learned mask embedding), a mean-pooled
/// context vector concatenated per position, one tanh hidden layer, and a
/// per-position output projection to L x V logits. Evaluation applies SUBS:
/// revealed rows are one-hot and the mask token has no logit.
class TrainableDenoiser {
 public:
  TrainableDenoiser(int length, int vocab_size, int hidden, double learning_rate,
                    std::uint64_t seed)
      : length_(length), vocab_size_(vocab_size), hidden_(hidden), learning_rate_(learning_rate) {
    if (length < 1) fail(Errc::BadConfig, "sequence length must be >= 1");
    if (vocab_size < 1) fail(Errc::BadConfig, "vocabulary size must be >= 1");
    if (hidden < 1) fail(Errc::BadConfig, "hidden width must be >= 1");
    params_.assign(num_params(), 0.0);
    PhiloxStream init(seed, 0x1a17);
    for (double& w : params_) w = 0.1 * init.next_normal();
    // Biases start at zero.
    std::fill(params_.begin() + off_b1(), params_.begin() + off_b1() + hidden_, 0.0);
    std::fill(params_.begin() + off_b2(), params_.end(), 0.0);
  }

  TrainableDenoiser(int length, int vocab_size, int hidden, double learning_rate,
                    std::vector<double> params)
      : length_(length), vocab_size_(vocab_size), hidden_(hidden), learning_rate_(learning_rate),
        params_(std::move(params)) {
    if (hidden < 1) fail(Errc::BadConfig, "hidden width must be >= 1");
    if (params_.size() != num_params())
      fail(Errc::BadModel, "parameter vector has wrong size for (L, V, H)");
  }

  int length() const { return length_; }
  int vocab_size() const { return vocab_size_; }
  int hidden() const { return hidden_; }
  double learning_rate() const { return learning_rate_; }
  const std::vector<double>& params() const { return params_; }

  std::size_t num_params() const {
    const std::size_t H = static_cast<std::size_t>(hidden_);
    const std::size_t L = static_cast<std::size_t>(length_);
    const std::size_t V = static_cast<std::size_t>(vocab_size_);
    return (V + 1) * H + L * H + H * 2 * H + H + L * V * H + L * V;
  }

  TrainableDenoiser with_params(std::vector<double> p) const {
    return TrainableDenoiser(length_, vocab_size_, hidden_, learning_rate_, std::move(p));
  }

  TokenProbabilityMatrix evaluate(const MaskedSequence& z) const {
    if (z.length() != length_ || z.vocab_size() != vocab_size_)
      fail(Errc::LengthMismatch, "sequence does not match denoiser (L, V)");
    Forward f = forward(z);
    TokenProbabilityMatrix matrix(length_, vocab_size_);
    for (Position p = 0; p < length_; ++p) {
      if (z.is_masked(p)) {
        std::vector<double> logits(f.logits.begin() + static_cast<std::size_t>(p) * vocab_size_,
                                   f.logits.begin() + static_cast<std::size_t>(p + 1) * vocab_size_);
        matrix.set_masked_row_from_logits(p, logits);
      } else {
        matrix.set_onehot(p, z.at(p));
      }
    }
    return matrix;
  }

  /// Loss of one (mask subset) draw: (L/n) * sum over masked true-token
  /// negative log-probs. Fills `grad` (same layout as params) when non-null.
  double loss_and_gradient(const CleanSequence& x, const PositionSet& masked,
                           std::vector<double>* grad) const {
    const int L = length_, V = vocab_size_, H = hidden_;
    const int n = static_cast<int>(masked.size());
    if (n < 1) fail(Errc::BadConfig, "mask subset must be non-empty");

    MaskedSequence z = MaskedSequence::from_clean(x, V);
    {
      std::vector<TokenId> entries = x.tokens;
      for (Position p : masked) entries[static_cast<std::size_t>(p)] = static_cast<TokenId>(V);
      z = MaskedSequence(std::move(entries), V);
    }
    Forward f = forward(z);

    const double weight = static_cast<double>(L) / n;
    // Log-softmax per masked row, stable for any finite logits.
    std::vector<double> logp(static_cast<std::size_t>(n) * V);
    std::vector<double> lse(static_cast<std::size_t>(n));
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
      const Position p = masked[static_cast<std::size_t>(i)];
      const double* row = f.logits.data() + static_cast<std::size_t>(p) * V;
      double mx = row[0];
      for (int v = 1; v < V; ++v) mx = std::max(mx, row[v]);
      double s = 0.0;
      for (int v = 0; v < V; ++v) s += std::exp(row[v] - mx);
      lse[static_cast<std::size_t>(i)] = mx + std::log(s);
      for (int v = 0; v < V; ++v)
        logp[static_cast<std::size_t>(i) * V + v] = row[v] - lse[static_cast<std::size_t>(i)];
      loss -= weight * logp[static_cast<std::size_t>(i) * V + x.at(p)];
    }
    if (!grad) return loss;

    grad->assign(num_params(), 0.0);
    std::vector<double> d_h(static_cast<std::size_t>(L) * H, 0.0);

    // d loss / d logits = weight * (softmax - onehot(true token)), masked rows only.
    for (int i = 0; i < n; ++i) {
      const Position p = masked[static_cast<std::size_t>(i)];
      for (int v = 0; v < V; ++v) {
        const double soft = std::exp(logp[static_cast<std::size_t>(i) * V + v]);
        const double dl = weight * (soft - (v == x.at(p) ? 1.0 : 0.0));
        (*grad)[off_b2() + static_cast<std::size_t>(p) * V + v] += dl;
        for (int h = 0; h < H; ++h) {
          (*grad)[off_w2() + (static_cast<std::size_t>(p) * V + v) * H + h] +=
              dl * f.hidden[static_cast<std::size_t>(p) * H + h];
          d_h[static_cast<std::size_t>(p) * H + h] +=
              dl * params_[off_w2() + (static_cast<std::size_t>(p) * V + v) * H + h];
        }
      }
    }

    // Through tanh and the shared first layer; the context half of the input
    // routes gradient into every position's embedding via the mean pool.
    std::vector<double> d_e(static_cast<std::size_t>(L) * H, 0.0);
    std::vector<double> d_c(static_cast<std::size_t>(H), 0.0);
    for (Position p = 0; p < L; ++p) {
      for (int i = 0; i < H; ++i) {
        const double hp = f.hidden[static_cast<std::size_t>(p) * H + i];
        const double da = d_h[static_cast<std::size_t>(p) * H + i] * (1.0 - hp * hp);
        if (da == 0.0) continue;
        (*grad)[off_b1() + static_cast<std::size_t>(i)] += da;
        for (int j = 0; j < 2 * H; ++j) {
          const double u = j < H ? f.embed[static_cast<std::size_t>(p) * H + j]
                                 : f.context[static_cast<std::size_t>(j - H)];
          (*grad)[off_w1() + static_cast<std::size_t>(i) * 2 * H + j] += da * u;
          const double back = da * params_[off_w1() + static_cast<std::size_t>(i) * 2 * H + j];
          if (j < H)
            d_e[static_cast<std::size_t>(p) * H + j] += back;
          else
            d_c[static_cast<std::size_t>(j - H)] += back;
        }
      }
    }
    for (Position p = 0; p < L; ++p)
      for (int h = 0; h < H; ++h)
        d_e[static_cast<std::size_t>(p) * H + h] += d_c[static_cast<std::size_t>(h)] / L;

    for (Position p = 0; p < L; ++p) {
      const TokenId tok = z.at(p);  // mask embedding row for masked positions
      for (int h = 0; h < H; ++h) {
        const double de = d_e[static_cast<std::size_t>(p) * H + h];
        (*grad)[off_tok() + static_cast<std::size_t>(tok) * H + h] += de;
        (*grad)[off_pos() + static_cast<std::size_t>(p) * H + h] += de;
      }
    }
    return loss;
  }

 private:
  struct Forward {
    std::vector<double> embed;    // L x H
    std::vector<double> context;  // H
    std::vector<double> hidden;   // L x H (post-tanh)
    std::vector<double> logits;   // L x V
  };

  Forward forward(const MaskedSequence& z) const {
    const int L = length_, V = vocab_size_, H = hidden_;
    Forward f;
    f.embed.resize(static_cast<std::size_t>(L) * H);
    f.context.assign(static_cast<std::size_t>(H), 0.0);
    f.hidden.resize(static_cast<std::size_t>(L) * H);
    f.logits.resize(static_cast<std::size_t>(L) * V);

    for (Position p = 0; p < L; ++p) {
      const TokenId tok = z.at(p);
      for (int h = 0; h < H; ++h) {
        const double e = params_[off_tok() + static_cast<std::size_t>(tok) * H + h] +
                         params_[off_pos() + static_cast<std::size_t>(p) * H + h];
        f.embed[static_cast<std::size_t>(p) * H + h] = e;
        f.context[static_cast<std::size_t>(h)] += e / L;
      }
    }
    for (Position p = 0; p < L; ++p) {
      for (int i = 0; i < H; ++i) {
        double a = params_[off_b1() + static_cast<std::size_t>(i)];
        for (int j = 0; j < H; ++j) {
          a += params_[off_w1() + static_cast<std::size_t>(i) * 2 * H + j] *
               f.embed[static_cast<std::size_t>(p) * H + j];
          a += params_[off_w1() + static_cast<std::size_t>(i) * 2 * H + H + j] *
               f.context[static_cast<std::size_t>(j)];
        }
        f.hidden[static_cast<std::size_t>(p) * H + i] = std::tanh(a);
      }
      for (int v = 0; v < V; ++v) {
        double a = params_[off_b2() + static_cast<std::size_t>(p) * V + v];
        for (int h = 0; h < H; ++h)
          a += params_[off_w2() + (static_cast<std::size_t>(p) * V + v) * H + h] *
               f.hidden[static_cast<std::size_t>(p) * H + h];
        f.logits[static_cast<std::size_t>(p) * V + v] = a;
      }
    }
    return f;
  }

  // Flat parameter layout.
  std::size_t off_tok() const { return 0; }
  std::size_t off_pos() const {
    return (static_cast<std::size_t>(vocab_size_) + 1) * hidden_;
  }
  std::size_t off_w1() const {
    return off_pos() + static_cast<std::size_t>(length_) * hidden_;
  }
  std::size_t off_b1() const {
    return off_w1() + static_cast<std::size_t>(hidden_) * 2 * hidden_;
  }
  std::size_t off_w2() const { return off_b1() + static_cast<std::size_t>(hidden_); }
  std::size_t off_b2() const {
    return off_w2() +
           static_cast<std::size_t>(length_) * vocab_size_ * static_cast<std::size_t>(hidden_);
  }

  int length_;
  int vocab_size_;
  int hidden_;
  double learning_rate_;
  std::vector<double> params_;
};

struct ElboDraw {
  int n_masked;
  PositionSet masked;  // sorted
};

/// n ~ Uniform{1..L}, then a uniform size-n subset of positions.
inline ElboDraw draw_elbo_mask(int length, std::uint64_t seed) {
  PhiloxStream rng(seed, 0x3157);
  const int n = 1 + static_cast<int>(rng.next_below(static_cast<std::uint32_t>(length)));
  std::vector<Position> order(static_cast<std::size_t>(length));
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < n; ++i) {
    const int j = i + static_cast<int>(rng.next_below(static_cast<std::uint32_t>(length - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  PositionSet masked(order.begin(), order.begin() + n);
  std::sort(masked.begin(), masked.end());
  return {n, std::move(masked)};
}

/// Deterministic loss of one mask subset: (L/n) * sum of true-token negative
/// log-probs at the masked positions.
template <DenoiserLike D>
double elbo_loss_term(const D& d, const CleanSequence& x, const PositionSet& masked) {
  const int V = d.vocab_size();
  std::vector<TokenId> entries = x.tokens;
  for (Position p : masked) entries[static_cast<std::size_t>(p)] = static_cast<TokenId>(V);
  const TokenProbabilityMatrix matrix = d.evaluate(MaskedSequence(std::move(entries), V));
  const double weight = NoiseSchedule{d.length()}.weight(static_cast<int>(masked.size()));
  double loss = 0.0;
  for (Position p : masked) loss -= weight * matrix.log_prob(p, x.at(p));
  return loss;
}

/// Single-draw Monte Carlo estimate of the masked-diffusion ELBO loss;
/// unbiased for the exhaustive any-order NLL average.
template <DenoiserLike D>
double elbo_loss_mc(const D& d, const CleanSequence& x, std::uint64_t seed) {
  return elbo_loss_term(d, x, draw_elbo_mask(d.length(), seed).masked);
}

/// Analytic gradient of the same single draw; pair it with elbo_loss_mc by
/// passing the identical seed.
inline std::vector<double> elbo_loss_gradient(const TrainableDenoiser& d, const CleanSequence& x,
                                              std::uint64_t seed) {
  std::vector<double> grad;
  d.loss_and_gradient(x, draw_elbo_mask(d.length(), seed).masked, &grad);
  return grad;
}

/// Plain SGD on elbo_loss_mc over a shuffled corpus; bit-deterministic for a
/// fixed seed.
inline TrainableDenoiser train(const TrainableDenoiser& d, const std::vector<CleanSequence>& corpus,
                               int steps, double learning_rate, std::uint64_t seed) {
  if (corpus.empty()) fail(Errc::EmptyCorpus, "cannot train on an empty corpus");
  if (steps < 0) fail(Errc::BadConfig, "steps must be >= 0");
  std::vector<double> params = d.params();
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<double> grad;
  TrainableDenoiser current = d;
  for (int step = 0; step < steps; ++step) {
    const std::size_t epoch = static_cast<std::size_t>(step) / corpus.size();
    const std::size_t slot = static_cast<std::size_t>(step) % corpus.size();
    if (slot == 0) {
      PhiloxStream shuffle(derive_seed(seed, 0x5u, epoch));
      for (std::size_t i = corpus.size(); i > 1; --i) {
        const std::size_t j = shuffle.next_below(static_cast<std::uint32_t>(i));
        std::swap(order[i - 1], order[j]);
      }
    }
    const CleanSequence& x = corpus[order[slot]];
    const std::uint64_t draw_seed = derive_seed(seed, 0x9u, static_cast<std::uint64_t>(step));
    current.loss_and_gradient(x, draw_elbo_mask(current.length(), draw_seed).masked, &grad);
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= learning_rate * grad[i];
    current = current.with_params(params);
  }
  return current;
}

}  // namespace duel
