#pragma once

// Minimal dense-layer toolkit with explicit hand-written backprop.
// Every trainable component exposes its storage through ParamSpan lists so the
// optimizer, serializers, checksums and finite-difference harnesses all walk
// the same flat view in the same order.

#include "dcsr/common.hpp"

#include <cstring>
#include <vector>

namespace dcsr {

struct ParamSpan {
    double* value = nullptr;
    double* grad = nullptr;
    std::size_t size = 0;
};

inline std::size_t total_size(const std::vector<ParamSpan>& spans) {
    std::size_t n = 0;
    for (const auto& s : spans) n += s.size;
    return n;
}

inline Vec flatten_values(const std::vector<ParamSpan>& spans) {
    Vec out(static_cast<Eigen::Index>(total_size(spans)));
    Eigen::Index k = 0;
    for (const auto& s : spans)
        for (std::size_t i = 0; i < s.size; ++i) out[k++] = s.value[i];
    return out;
}

inline Vec flatten_grads(const std::vector<ParamSpan>& spans) {
    Vec out(static_cast<Eigen::Index>(total_size(spans)));
    Eigen::Index k = 0;
    for (const auto& s : spans)
        for (std::size_t i = 0; i < s.size; ++i) out[k++] = s.grad[i];
    return out;
}

inline void assign_values(const std::vector<ParamSpan>& spans, const Vec& flat) {
    Eigen::Index k = 0;
    for (const auto& s : spans)
        for (std::size_t i = 0; i < s.size; ++i) s.value[i] = flat[k++];
}

inline void zero_grads(const std::vector<ParamSpan>& spans) {
    for (const auto& s : spans) std::memset(s.grad, 0, s.size * sizeof(double));
}

inline void assign_grads(const std::vector<ParamSpan>& spans, const Vec& flat) {
    Eigen::Index k = 0;
    for (const auto& s : spans)
        for (std::size_t i = 0; i < s.size; ++i) s.grad[i] = flat[k++];
}

inline void axpy_grads(const std::vector<ParamSpan>& spans, double scale, Vec& acc) {
    Eigen::Index k = 0;
    for (const auto& s : spans)
        for (std::size_t i = 0; i < s.size; ++i) acc[k++] += scale * s.grad[i];
}

inline std::uint64_t checksum(const std::vector<ParamSpan>& spans) {
    Fnv64 h;
    for (const auto& s : spans) h.update_doubles(s.value, s.size);
    return h.digest();
}

inline double xavier_bound(Eigen::Index fan_in, Eigen::Index fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

struct Affine {
    Mat W;
    Vec b;
    Mat gW;
    Vec gb;

    void init(Eigen::Index out, Eigen::Index in, Rng& rng) {
        W = Mat(out, in);
        const double bound = xavier_bound(in, out);
        for (Eigen::Index i = 0; i < out; ++i)
            for (Eigen::Index j = 0; j < in; ++j) W(i, j) = rng.uniform(-bound, bound);
        b = Vec::Zero(out);
        gW = Mat::Zero(out, in);
        gb = Vec::Zero(out);
    }

    Vec forward(const Vec& x) const { return W * x + b; }

    // accumulates parameter grads, returns gradient wrt the input
    Vec backward(const Vec& x, const Vec& dy) {
        gW.noalias() += dy * x.transpose();
        gb += dy;
        return W.transpose() * dy;
    }

    void collect(std::vector<ParamSpan>& spans) {
        spans.push_back({W.data(), gW.data(), static_cast<std::size_t>(W.size())});
        spans.push_back({b.data(), gb.data(), static_cast<std::size_t>(b.size())});
    }
};

// f_out(tanh(f_in(x))); the encoder/fusion building block.
struct TwoLayerTanh {
    Affine in_layer;
    Affine out_layer;

    void init(Eigen::Index out, Eigen::Index hidden, Eigen::Index in, Rng& rng) {
        in_layer.init(hidden, in, rng);
        out_layer.init(out, hidden, rng);
    }

    Eigen::Index in_dim() const { return in_layer.W.cols(); }
    Eigen::Index out_dim() const { return out_layer.W.rows(); }

    struct Tape {
        Vec x;
        Vec h;  // tanh(in_layer(x))
    };

    Vec forward(const Vec& x, Tape* tape = nullptr) const {
        Vec h = in_layer.forward(x).array().tanh();
        Vec y = out_layer.forward(h);
        if (tape) {
            tape->x = x;
            tape->h = std::move(h);
        }
        return y;
    }

    Vec backward(const Tape& tape, const Vec& dy) {
        Vec dh = out_layer.backward(tape.h, dy);
        dh.array() *= 1.0 - tape.h.array().square();
        return in_layer.backward(tape.x, dh);
    }

    void collect(std::vector<ParamSpan>& spans) {
        in_layer.collect(spans);
        out_layer.collect(spans);
    }
};

// Adam over a fixed span list. The span layout must not change between steps.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<ParamSpan>& spans) {
        const std::size_t n = total_size(spans);
        if (m_.size() != static_cast<Eigen::Index>(n)) {
            m_ = Vec::Zero(static_cast<Eigen::Index>(n));
            v_ = Vec::Zero(static_cast<Eigen::Index>(n));
            t_ = 0;
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        Eigen::Index k = 0;
        for (const auto& s : spans) {
            for (std::size_t i = 0; i < s.size; ++i, ++k) {
                const double g = s.grad[i];
                m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * g;
                v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * g * g;
                s.value[i] -= lr_ * (m_[k] / bc1) / (std::sqrt(v_[k] / bc2) + eps_);
            }
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    Vec m_, v_;
    long t_ = 0;
};

}  // namespace dcsr
