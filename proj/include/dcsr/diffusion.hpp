#pragma once

// Conditional Gaussian diffusion over ability vectors.
//
// Forward chain:   x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps
// Reverse kernel:  mean mu~(x_t, x0, t) =
//     (sqrt(abar_{t-1}) b_t x0 + sqrt(a_t)(1-abar_{t-1}) x_t) / (1-abar_t)
// The denoiser predicts that mean directly. Ancestral sampling walks all T
// steps with fixed variance b_t; the strided sampler visits K selected steps,
// re-estimating x0 by inverting the mean formula and jumping through the
// closed-form conditional with no injected noise (K = T reproduces the
// noise-free full chain exactly).
//
// The inversion divides by sqrt(abar_{t-1}) b_t, which is tiny near t = T, so
// denoiser error gets amplified there. The samplers accept an optional clamp
// on the per-step x0 estimate; the default (infinity) leaves the algebra
// untouched.

#include "dcsr/binio.hpp"
#include "dcsr/common.hpp"
#include "dcsr/nn.hpp"

#include <limits>
#include <vector>

namespace dcsr {

struct NoiseSchedule {
    int T = 0;
    Vec beta;       // beta[t-1] for t in 1..T
    Vec alpha;      // 1 - beta
    Vec alpha_bar;  // running product of alpha

    static NoiseSchedule linear(int T, double beta_start = 1e-4, double beta_end = 0.02) {
        if (T < 1) throw ValidationError("noise schedule needs T >= 1");
        if (beta_start <= 0.0 || beta_end >= 1.0 || beta_end < beta_start) {
            throw ValidationError("noise schedule needs 0 < beta_start <= beta_end < 1");
        }
        NoiseSchedule s;
        s.T = T;
        s.beta = Vec(T);
        for (int t = 1; t <= T; ++t) {
            s.beta[t - 1] =
                T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / double(T - 1);
        }
        s.alpha = Vec::Ones(T) - s.beta;
        s.alpha_bar = Vec(T);
        double prod = 1.0;
        for (int t = 1; t <= T; ++t) {
            prod *= s.alpha[t - 1];
            s.alpha_bar[t - 1] = prod;
        }
        return s;
    }

    double abar(int t) const { return t == 0 ? 1.0 : alpha_bar[t - 1]; }

    void check_t(int t) const {
        if (t < 1 || t > T) {
            throw ValidationError("timestep " + std::to_string(t) + " outside 1.." + std::to_string(T));
        }
    }

    void save(std::ostream& out) const {
        binio::write_u32(out, static_cast<std::uint32_t>(T));
        binio::write_vec(out, beta);
    }

    static NoiseSchedule load(std::istream& in) {
        NoiseSchedule s;
        s.T = static_cast<int>(binio::read_u32(in));
        s.beta = binio::read_vec(in);
        if (s.T < 1 || s.beta.size() != s.T) throw RuntimeFailure("bad noise schedule in artifact");
        s.alpha = Vec::Ones(s.T) - s.beta;
        s.alpha_bar = Vec(s.T);
        double prod = 1.0;
        for (int t = 1; t <= s.T; ++t) {
            prod *= s.alpha[t - 1];
            s.alpha_bar[t - 1] = prod;
        }
        return s;
    }
};

inline Vec q_sample(const Vec& x0, int t, const Vec& eps, const NoiseSchedule& sched) {
    sched.check_t(t);
    if (eps.size() != x0.size()) throw ValidationError("noise vector dim mismatch");
    const double abar = sched.abar(t);
    return std::sqrt(abar) * x0 + std::sqrt(1.0 - abar) * eps;
}

inline Vec posterior_mean(const Vec& x_t, const Vec& x0, int t, const NoiseSchedule& sched) {
    sched.check_t(t);
    if (x_t.size() != x0.size()) throw ValidationError("posterior mean dim mismatch");
    const double abar_t = sched.abar(t);
    const double abar_prev = sched.abar(t - 1);
    const double beta_t = sched.beta[t - 1];
    const double alpha_t = sched.alpha[t - 1];
    return (std::sqrt(abar_prev) * beta_t * x0 + std::sqrt(alpha_t) * (1.0 - abar_prev) * x_t) /
           (1.0 - abar_t);
}

// MLP mean-predictor: two tanh hidden layers of width 4*dim(x) by default,
// sinusoidal timestep embedding added to the first pre-activation, the
// conditioning vector concatenated to the input.
class DenoiserNet {
public:
    DenoiserNet() = default;

    static DenoiserNet fresh(Eigen::Index x_dim, Eigen::Index cond_dim, Eigen::Index hidden,
                             std::uint64_t seed) {
        if (x_dim < 1 || cond_dim < 0) throw ValidationError("denoiser dims must be positive");
        DenoiserNet n;
        n.x_dim_ = x_dim;
        n.cond_dim_ = cond_dim;
        n.hidden_ = hidden > 0 ? hidden : 4 * x_dim;
        Rng rng(derive_seed(seed, 3));
        n.in_.init(n.hidden_, x_dim + cond_dim, rng);
        n.mid_.init(n.hidden_, n.hidden_, rng);
        n.out_.init(x_dim, n.hidden_, rng);
        return n;
    }

    Eigen::Index x_dim() const { return x_dim_; }
    Eigen::Index cond_dim() const { return cond_dim_; }
    Eigen::Index hidden() const { return hidden_; }

    Vec time_embedding(int t) const {
        Vec emb = Vec::Zero(hidden_);
        const Eigen::Index half = hidden_ / 2;
        for (Eigen::Index i = 0; i < half; ++i) {
            const double freq = std::pow(10000.0, -double(i) / double(std::max<Eigen::Index>(1, half)));
            emb[2 * i] = std::sin(t * freq);
            emb[2 * i + 1] = std::cos(t * freq);
        }
        if (hidden_ % 2 == 1) emb[hidden_ - 1] = std::sin(t);
        return emb;
    }

    struct Tape {
        Vec xin;  // [x ; cond]
        Vec h1, h2;
    };

    Vec forward(const Vec& x, const Vec& cond, int t, Tape* tape = nullptr) const {
        if (x.size() != x_dim_ || cond.size() != cond_dim_) {
            throw ValidationError("denoiser input dim mismatch");
        }
        Vec xin(x_dim_ + cond_dim_);
        xin << x, cond;
        Vec h1 = (in_.forward(xin) + time_embedding(t)).array().tanh();
        Vec h2 = mid_.forward(h1).array().tanh();
        Vec mu = out_.forward(h2);
        if (tape) {
            tape->xin = std::move(xin);
            tape->h1 = std::move(h1);
            tape->h2 = std::move(h2);
        }
        return mu;
    }

    // Accumulates parameter grads; writes d/d(x) and optionally d/d(cond).
    Vec backward(const Tape& tape, const Vec& dmu, Vec* dcond = nullptr) {
        Vec dh2 = out_.backward(tape.h2, dmu);
        dh2.array() *= 1.0 - tape.h2.array().square();
        Vec dh1 = mid_.backward(tape.h1, dh2);
        dh1.array() *= 1.0 - tape.h1.array().square();
        const Vec dxin = in_.backward(tape.xin, dh1);
        if (dcond) *dcond += dxin.tail(cond_dim_);
        return dxin.head(x_dim_);
    }

    void collect(std::vector<ParamSpan>& spans) {
        in_.collect(spans);
        mid_.collect(spans);
        out_.collect(spans);
    }

    void save(std::ostream& out) const {
        binio::write_u32(out, static_cast<std::uint32_t>(x_dim_));
        binio::write_u32(out, static_cast<std::uint32_t>(cond_dim_));
        binio::write_u32(out, static_cast<std::uint32_t>(hidden_));
        binio::write_mat(out, in_.W);
        binio::write_vec(out, in_.b);
        binio::write_mat(out, mid_.W);
        binio::write_vec(out, mid_.b);
        binio::write_mat(out, out_.W);
        binio::write_vec(out, out_.b);
    }

    static DenoiserNet load(std::istream& in) {
        DenoiserNet n;
        n.x_dim_ = binio::read_u32(in);
        n.cond_dim_ = binio::read_u32(in);
        n.hidden_ = binio::read_u32(in);
        n.in_.W = binio::read_mat(in);
        n.in_.b = binio::read_vec(in);
        n.mid_.W = binio::read_mat(in);
        n.mid_.b = binio::read_vec(in);
        n.out_.W = binio::read_mat(in);
        n.out_.b = binio::read_vec(in);
        n.in_.gW = Mat::Zero(n.in_.W.rows(), n.in_.W.cols());
        n.in_.gb = Vec::Zero(n.in_.b.size());
        n.mid_.gW = Mat::Zero(n.mid_.W.rows(), n.mid_.W.cols());
        n.mid_.gb = Vec::Zero(n.mid_.b.size());
        n.out_.gW = Mat::Zero(n.out_.W.rows(), n.out_.W.cols());
        n.out_.gb = Vec::Zero(n.out_.b.size());
        if (n.in_.W.cols() != n.x_dim_ + n.cond_dim_ || n.out_.W.rows() != n.x_dim_) {
            throw RuntimeFailure("bad denoiser shapes in artifact");
        }
        return n;
    }

private:
    Eigen::Index x_dim_ = 0, cond_dim_ = 0, hidden_ = 0;
    Affine in_, mid_, out_;
};

// Mean-matching objective, per-coordinate mean square. The 1/(2 beta_t)
// precision weight applies for t >= 2; t = 1 is plain reconstruction of x0.
template <typename Net>
double denoising_loss_at(const Net& net, const Vec& x0, const Vec& cond, int t, const Vec& eps,
                         const NoiseSchedule& sched) {
    const Vec x_t = q_sample(x0, t, eps, sched);
    const Vec mu = net.forward(x_t, cond, t);
    const double inv_dim = 1.0 / static_cast<double>(x0.size());
    if (t == 1) return (mu - x0).squaredNorm() * inv_dim;
    const Vec target = posterior_mean(x_t, x0, t, sched);
    return (mu - target).squaredNorm() * inv_dim / (2.0 * sched.beta[t - 1]);
}

template <typename Net>
double denoising_loss(const Net& net, const Vec& x0, const Vec& cond, const NoiseSchedule& sched,
                      Rng& rng) {
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
    return denoising_loss_at(net, x0, cond, t, rng.normal_vec(x0.size()), sched);
}

// Value plus gradients: accumulates weight * d(loss)/d(net params) into the
// net's buffers and, when requested, weight-scaled grads wrt x0 and cond.
inline double denoising_loss_backward(DenoiserNet& net, const Vec& x0, const Vec& cond, int t,
                                      const Vec& eps, const NoiseSchedule& sched, double weight,
                                      Vec* dx0, Vec* dcond) {
    const Vec x_t = q_sample(x0, t, eps, sched);
    DenoiserNet::Tape tape;
    const Vec mu = net.forward(x_t, cond, t, &tape);
    const double inv_dim = 1.0 / static_cast<double>(x0.size());
    const double s1 = std::sqrt(sched.abar(t));

    double loss;
    Vec dmu, dtarget_dx0_scale;
    double k1 = 0.0, k2 = 0.0;
    if (t == 1) {
        const Vec r = mu - x0;
        loss = r.squaredNorm() * inv_dim;
        dmu = (2.0 * inv_dim * weight) * r;
    } else {
        const double abar_t = sched.abar(t);
        const double abar_prev = sched.abar(t - 1);
        const double beta_t = sched.beta[t - 1];
        k1 = std::sqrt(abar_prev) * beta_t / (1.0 - abar_t);
        k2 = std::sqrt(sched.alpha[t - 1]) * (1.0 - abar_prev) / (1.0 - abar_t);
        const Vec target = k1 * x0 + k2 * x_t;
        const Vec r = mu - target;
        loss = r.squaredNorm() * inv_dim / (2.0 * beta_t);
        dmu = (inv_dim / beta_t * weight) * r;
    }

    Vec dcond_local = Vec::Zero(cond.size());
    const Vec dx_net = net.backward(tape, dmu, &dcond_local);
    if (dcond) *dcond += dcond_local;
    if (dx0) {
        if (t == 1) {
            *dx0 += -dmu + s1 * dx_net;
        } else {
            // target depends on x0 directly and through x_t; the net input adds s1 more
            const Vec dtarget = -dmu;
            *dx0 += k1 * dtarget + s1 * (k2 * dtarget + dx_net);
        }
    }
    return loss;
}

template <typename Net>
Vec ancestral_sample(const Net& net, const Vec& cond, const Vec& eps0, const NoiseSchedule& sched,
                     Rng& rng, bool literal_beta_noise = false) {
    Vec x = eps0;
    for (int t = sched.T; t >= 1; --t) {
        Vec mu = net.forward(x, cond, t);
        if (!all_finite(mu)) {
            throw RuntimeFailure("denoiser produced non-finite values at t=" + std::to_string(t));
        }
        if (t > 1) {
            const double beta_t = sched.beta[t - 1];
            const double scale = literal_beta_noise ? beta_t : std::sqrt(beta_t);
            x = mu + scale * rng.normal_vec(mu.size());
        } else {
            x = std::move(mu);
        }
    }
    return x;
}

// K timesteps, evenly strided over 1..T, always ending at T.
inline std::vector<int> fast_times(int T, int K) {
    if (K < 1 || K > T) throw ValidationError("strided sampler needs 1 <= K <= T");
    std::vector<int> times(static_cast<std::size_t>(K));
    for (int k = 1; k <= K; ++k) {
        times[static_cast<std::size_t>(k - 1)] =
            static_cast<int>((static_cast<long long>(k) * T) / K);
    }
    return times;
}

namespace detail {

struct StrideCoeffs {
    double to_x0_from_mu;   // x0_hat = A mu + B x
    double to_x0_from_x;
    double jump_from_x;     // x_next = C x + D x0_hat  (final step: C=0, D=1)
    double jump_from_x0;
};

inline StrideCoeffs stride_coeffs(const NoiseSchedule& sched, int t, int s_or_zero) {
    const double abar_t = sched.abar(t);
    const double abar_prev = sched.abar(t - 1);
    const double beta_t = sched.beta[t - 1];
    const double alpha_t = sched.alpha[t - 1];
    StrideCoeffs c;
    const double denom = std::sqrt(abar_prev) * beta_t;
    c.to_x0_from_mu = (1.0 - abar_t) / denom;
    c.to_x0_from_x = -std::sqrt(alpha_t) * (1.0 - abar_prev) / denom;
    if (s_or_zero == 0) {
        c.jump_from_x = 0.0;
        c.jump_from_x0 = 1.0;
    } else {
        const double abar_s = sched.abar(s_or_zero);
        const double ratio = abar_t / abar_s;
        c.jump_from_x = std::sqrt(ratio) * (1.0 - abar_s) / (1.0 - abar_t);
        c.jump_from_x0 = std::sqrt(abar_s) * (1.0 - ratio) / (1.0 - abar_t);
    }
    return c;
}

}  // namespace detail

template <typename Net>
Vec fast_sample(const Net& net, const Vec& cond, const Vec& eps0, const NoiseSchedule& sched, int K,
                double x0_clip = std::numeric_limits<double>::infinity()) {
    if (!(x0_clip > 0.0)) throw ValidationError("x0 clamp must be positive");
    const auto times = fast_times(sched.T, K);
    Vec x = eps0;
    for (int k = K; k >= 1; --k) {
        const int t = times[static_cast<std::size_t>(k - 1)];
        const Vec mu = net.forward(x, cond, t);
        if (!all_finite(mu)) {
            throw RuntimeFailure("denoiser produced non-finite values at t=" + std::to_string(t));
        }
        const int s = k == 1 ? 0 : times[static_cast<std::size_t>(k - 2)];
        const auto c = detail::stride_coeffs(sched, t, s);
        Vec x0_hat = c.to_x0_from_mu * mu + c.to_x0_from_x * x;
        x0_hat = x0_hat.cwiseMax(-x0_clip).cwiseMin(x0_clip);
        x = c.jump_from_x * x + c.jump_from_x0 * x0_hat;
    }
    return x;
}

// Strided sampling with a tape so generation-level losses can reach the
// denoiser parameters. Gradients flow through the chain state only; the
// conditioning branch is treated as constant.
struct FastSampleTape {
    struct Step {
        int t = 0;
        DenoiserNet::Tape net_tape;
        detail::StrideCoeffs coeffs;
        Vec clamp_pass;  // 1 where the x0 estimate passed the clamp, 0 where pinned
    };
    std::vector<Step> steps;  // in sampling order, last step emits the output
    Vec output;
};

inline Vec fast_sample_tape(DenoiserNet& net, const Vec& cond, const Vec& eps0,
                            const NoiseSchedule& sched, int K, FastSampleTape& tape,
                            double x0_clip = std::numeric_limits<double>::infinity()) {
    if (!(x0_clip > 0.0)) throw ValidationError("x0 clamp must be positive");
    const auto times = fast_times(sched.T, K);
    tape.steps.clear();
    tape.steps.reserve(static_cast<std::size_t>(K));
    Vec x = eps0;
    for (int k = K; k >= 1; --k) {
        const int t = times[static_cast<std::size_t>(k - 1)];
        FastSampleTape::Step step;
        step.t = t;
        const Vec mu = net.forward(x, cond, t, &step.net_tape);
        if (!all_finite(mu)) {
            throw RuntimeFailure("denoiser produced non-finite values at t=" + std::to_string(t));
        }
        const int s = k == 1 ? 0 : times[static_cast<std::size_t>(k - 2)];
        step.coeffs = detail::stride_coeffs(sched, t, s);
        Vec x0_hat = step.coeffs.to_x0_from_mu * mu + step.coeffs.to_x0_from_x * x;
        step.clamp_pass = (x0_hat.array().abs() <= x0_clip).cast<double>().matrix();
        x0_hat = x0_hat.cwiseMax(-x0_clip).cwiseMin(x0_clip);
        x = step.coeffs.jump_from_x * x + step.coeffs.jump_from_x0 * x0_hat;
        tape.steps.push_back(std::move(step));
    }
    tape.output = x;
    return x;
}

inline void fast_sample_backward(DenoiserNet& net, const FastSampleTape& tape, const Vec& dout) {
    Vec dx = dout;
    for (auto it = tape.steps.rbegin(); it != tape.steps.rend(); ++it) {
        const auto& c = it->coeffs;
        const Vec dx0_hat = (c.jump_from_x0 * dx).cwiseProduct(it->clamp_pass);
        Vec dx_prev = c.jump_from_x * dx + c.to_x0_from_x * dx0_hat;
        const Vec dmu = c.to_x0_from_mu * dx0_hat;
        dx_prev += net.backward(it->net_tape, dmu, nullptr);
        dx = std::move(dx_prev);
    }
}

}  // namespace dcsr
