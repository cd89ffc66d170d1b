#pragma once

// Ability unification stack: splits what a learner carries across domains
// from what is target-specific, and fuses the two back into a target-shaped
// vector.
//
//   shared   = enc_shared(theta_T || mean_m(W_m theta_Sm))
//   specific = enc_specific(theta_T || 0)
//   fused    = fusion(specific || shared)
//
// Three losses shape the split. The shared loss asks `shared` to predict
// responses in every domain through trainable per-domain heads. The specific
// loss asks `specific`/`fused` to predict the target domain while failing on
// the sources; the repelled source terms are hinged at tau so the objective
// stays bounded, and an anchor keeps `fused` near the pretrained ability.
// The orthogonality loss measures |cos| between the two losses' encoder
// gradients, pushing the encoders to carve disjoint directions.

#include "dcsr/binio.hpp"
#include "dcsr/cdm.hpp"
#include "dcsr/common.hpp"
#include "dcsr/nn.hpp"

#include <vector>

namespace dcsr {

struct CsumConfig {
    int common_dim = 0;      // 0: use the target ability dim
    int encoder_hidden = 0;  // 0: 2 * (target dim + common dim)
    int fusion_hidden = 0;   // 0: 4 * common dim
    double tau = 0.5;        // cap on each repelled source row
};

// Pretrained ability vectors for one examinee, target first.
struct AbilitySet {
    Vec target;
    std::vector<Vec> sources;
};

struct ProjectionBank {
    std::vector<Mat> W;   // one per source domain, common_dim x source_dim
    std::vector<Mat> gW;

    void init(Eigen::Index d, const std::vector<Eigen::Index>& source_dims, Rng& rng) {
        W.clear();
        gW.clear();
        for (Eigen::Index n : source_dims) {
            Mat m(d, n);
            const double bound = xavier_bound(n, d);
            for (Eigen::Index i = 0; i < d; ++i)
                for (Eigen::Index j = 0; j < n; ++j) m(i, j) = rng.uniform(-bound, bound);
            W.push_back(std::move(m));
            gW.push_back(Mat::Zero(d, n));
        }
    }

    void check(const std::vector<Vec>& sources) const {
        if (W.empty()) throw ValidationError("projection bank holds no source domains");
        if (sources.size() != W.size())
            throw ValidationError("expected one ability vector per source domain");
        for (std::size_t m = 0; m < W.size(); ++m) {
            if (sources[m].size() != W[m].cols())
                throw ValidationError("source ability dim mismatch for domain index " +
                                      std::to_string(m));
        }
    }

    Vec project_mean(const std::vector<Vec>& sources) const {
        check(sources);
        Vec acc = Vec::Zero(W.front().rows());
        for (std::size_t m = 0; m < W.size(); ++m) acc.noalias() += W[m] * sources[m];
        return acc / static_cast<double>(W.size());
    }

    void backward_mean(const std::vector<Vec>& sources, const Vec& dmean) {
        const double inv = 1.0 / static_cast<double>(W.size());
        for (std::size_t m = 0; m < W.size(); ++m)
            gW[m].noalias() += inv * dmean * sources[m].transpose();
    }

    void collect(std::vector<ParamSpan>& spans) {
        for (std::size_t m = 0; m < W.size(); ++m)
            spans.push_back({W[m].data(), gW[m].data(), static_cast<std::size_t>(W[m].size())});
    }
};

// Response-prediction head in the shape of one domain's diagnosis model, with
// its own trainable copy of the item parameters. Inputs in the common dim are
// bridged to the head's native ability dim by a learned matrix when needed.
struct DomainHead {
    CdmKind kind = CdmKind::Irt;
    std::uint32_t n_questions = 0;
    Eigen::Index common_dim = 0;
    Eigen::Index native_dim = 0;
    IrtItems irt;
    NcdItems ncd;
    Mat adapter;  // native_dim x common_dim; empty when the dims already match
    Mat g_adapter;

    static DomainHead from_model(const CdmModel& proto, Eigen::Index d, Rng& rng) {
        DomainHead h;
        h.kind = proto.kind();
        h.n_questions = proto.n_questions();
        h.common_dim = d;
        h.native_dim = proto.ability_dim();
        if (h.kind == CdmKind::Irt) {
            h.irt = proto.irt_items();
            h.irt.g_log_disc.setZero();
            h.irt.g_diff.setZero();
        } else {
            h.ncd = proto.ncd_items();
            h.ncd.g_diff.setZero();
            h.ncd.g_disc.setZero();
            h.ncd.l1.gW.setZero();
            h.ncd.l1.gb.setZero();
            h.ncd.l2.gW.setZero();
            h.ncd.l2.gb.setZero();
        }
        if (h.native_dim != d) {
            h.adapter = Mat(h.native_dim, d);
            const double bound = xavier_bound(d, h.native_dim);
            for (Eigen::Index i = 0; i < h.native_dim; ++i)
                for (Eigen::Index j = 0; j < d; ++j) h.adapter(i, j) = rng.uniform(-bound, bound);
            h.g_adapter = Mat::Zero(h.native_dim, d);
        }
        return h;
    }

    bool has_adapter() const { return adapter.size() > 0; }

    void check_question(QuestionId q) const {
        if (q >= n_questions)
            throw ValidationError("question id " + std::to_string(q) + " out of range");
    }

    double predict_native(const Vec& x, QuestionId q) const {
        check_question(q);
        if (x.size() != native_dim) throw ValidationError("head input dim mismatch");
        return kind == CdmKind::Irt ? irt.predict(x[0], q) : ncd.predict(x, q);
    }

    double predict_common(const Vec& x, QuestionId q) const {
        if (x.size() != common_dim) throw ValidationError("head input dim mismatch");
        return has_adapter() ? predict_native(adapter * x, q) : predict_native(x, q);
    }

    // Accumulates item gradients, returns d/d(input).
    Vec backward_native(const Vec& x, QuestionId q, double dldp) {
        check_question(q);
        if (x.size() != native_dim) throw ValidationError("head input dim mismatch");
        if (kind == CdmKind::Irt) return Vec::Constant(1, irt.backward(x[0], q, dldp));
        return ncd.backward(x, q, dldp);
    }

    Vec backward_common(const Vec& x, QuestionId q, double dldp) {
        if (x.size() != common_dim) throw ValidationError("head input dim mismatch");
        if (!has_adapter()) return backward_native(x, q, dldp);
        const Vec native = adapter * x;
        const Vec dnative = backward_native(native, q, dldp);
        g_adapter.noalias() += dnative * x.transpose();
        return adapter.transpose() * dnative;
    }

    void clamp_invariants() {
        if (kind == CdmKind::Ncd) ncd.clamp_nonneg();
    }

    void collect(std::vector<ParamSpan>& spans) {
        if (kind == CdmKind::Irt) irt.collect(spans);
        else ncd.collect(spans);
        if (has_adapter())
            spans.push_back(
                {adapter.data(), g_adapter.data(), static_cast<std::size_t>(adapter.size())});
    }
};

struct CsumStack {
    Eigen::Index n_target = 0;
    Eigen::Index d = 0;
    double tau = 0.5;
    ProjectionBank bank;
    TwoLayerTanh shared_enc;    // parameter-shape twin of specific_enc
    TwoLayerTanh specific_enc;
    TwoLayerTanh fusion;
    DomainHead target_head;
    std::vector<DomainHead> source_heads;

    static CsumStack fresh(const CdmModel& target, const std::vector<const CdmModel*>& sources,
                           const CsumConfig& cfg, std::uint64_t seed) {
        if (sources.empty()) throw ValidationError("unification needs at least one source domain");
        if (!(cfg.tau > 0.0)) throw ValidationError("hinge cap tau must be positive");
        CsumStack s;
        s.n_target = target.ability_dim();
        s.d = cfg.common_dim > 0 ? cfg.common_dim : s.n_target;
        s.tau = cfg.tau;
        const Eigen::Index in_dim = s.n_target + s.d;
        const Eigen::Index hidden =
            cfg.encoder_hidden > 0 ? cfg.encoder_hidden : 2 * in_dim;
        const Eigen::Index fusion_hidden = cfg.fusion_hidden > 0 ? cfg.fusion_hidden : 4 * s.d;

        Rng rng(derive_seed(seed, 4));
        std::vector<Eigen::Index> source_dims;
        source_dims.reserve(sources.size());
        for (const CdmModel* m : sources) source_dims.push_back(m->ability_dim());
        s.bank.init(s.d, source_dims, rng);
        s.shared_enc.init(s.d, hidden, in_dim, rng);
        s.specific_enc.init(s.d, hidden, in_dim, rng);
        s.fusion.init(s.n_target, fusion_hidden, 2 * s.d, rng);
        s.target_head = DomainHead::from_model(target, s.d, rng);
        for (const CdmModel* m : sources)
            s.source_heads.push_back(DomainHead::from_model(*m, s.d, rng));
        return s;
    }

    void check_target(const Vec& theta) const {
        if (theta.size() != n_target) throw ValidationError("target ability dim mismatch");
    }

    Vec shared_cognition(const AbilitySet& a, TwoLayerTanh::Tape* tape = nullptr) const {
        check_target(a.target);
        const Vec proj = bank.project_mean(a.sources);
        Vec in(n_target + d);
        in << a.target, proj;
        return shared_enc.forward(in, tape);
    }

    Vec specific_cognition(const Vec& theta_target, TwoLayerTanh::Tape* tape = nullptr) const {
        check_target(theta_target);
        Vec in = Vec::Zero(n_target + d);
        in.head(n_target) = theta_target;
        return specific_enc.forward(in, tape);
    }

    Vec fuse(const Vec& specific, const Vec& shared, TwoLayerTanh::Tape* tape = nullptr) const {
        if (specific.size() != d || shared.size() != d)
            throw ValidationError("fusion input dim mismatch");
        Vec in(2 * d);
        in << specific, shared;
        return fusion.forward(in, tape);
    }

    void collect_shared_params(std::vector<ParamSpan>& spans) { shared_enc.collect(spans); }
    void collect_specific_params(std::vector<ParamSpan>& spans) { specific_enc.collect(spans); }

    void collect_all(std::vector<ParamSpan>& spans) {
        bank.collect(spans);
        shared_enc.collect(spans);
        specific_enc.collect(spans);
        fusion.collect(spans);
        target_head.collect(spans);
        for (auto& h : source_heads) h.collect(spans);
    }

    void clamp_invariants() {
        target_head.clamp_invariants();
        for (auto& h : source_heads) h.clamp_invariants();
    }

    void save(std::ostream& out) const {
        binio::write_magic(out, "DCSRCSU1");
        binio::write_u32(out, static_cast<std::uint32_t>(n_target));
        binio::write_u32(out, static_cast<std::uint32_t>(d));
        binio::write_f64(out, tau);
        binio::write_u32(out, static_cast<std::uint32_t>(bank.W.size()));
        for (const Mat& w : bank.W) binio::write_mat(out, w);
        save_layers(out, shared_enc);
        save_layers(out, specific_enc);
        save_layers(out, fusion);
        save_head(out, target_head);
        binio::write_u32(out, static_cast<std::uint32_t>(source_heads.size()));
        for (const DomainHead& h : source_heads) save_head(out, h);
    }

    static CsumStack load(std::istream& in) {
        binio::expect_magic(in, "DCSRCSU1", "unification stack");
        CsumStack s;
        s.n_target = binio::read_u32(in);
        s.d = binio::read_u32(in);
        s.tau = binio::read_f64(in);
        const std::uint32_t n_sources = binio::read_u32(in);
        for (std::uint32_t m = 0; m < n_sources; ++m) {
            s.bank.W.push_back(binio::read_mat(in));
            s.bank.gW.push_back(Mat::Zero(s.bank.W.back().rows(), s.bank.W.back().cols()));
        }
        load_layers(in, s.shared_enc);
        load_layers(in, s.specific_enc);
        load_layers(in, s.fusion);
        s.target_head = load_head(in);
        const std::uint32_t n_heads = binio::read_u32(in);
        for (std::uint32_t m = 0; m < n_heads; ++m) s.source_heads.push_back(load_head(in));
        return s;
    }

  private:
    static void save_affine(std::ostream& out, const Affine& a) {
        binio::write_mat(out, a.W);
        binio::write_vec(out, a.b);
    }

    static void load_affine(std::istream& in, Affine& a) {
        a.W = binio::read_mat(in);
        a.b = binio::read_vec(in);
        a.gW = Mat::Zero(a.W.rows(), a.W.cols());
        a.gb = Vec::Zero(a.b.size());
    }

    static void save_layers(std::ostream& out, const TwoLayerTanh& net) {
        save_affine(out, net.in_layer);
        save_affine(out, net.out_layer);
    }

    static void load_layers(std::istream& in, TwoLayerTanh& net) {
        load_affine(in, net.in_layer);
        load_affine(in, net.out_layer);
    }

    static void save_head(std::ostream& out, const DomainHead& h) {
        binio::write_u8(out, h.kind == CdmKind::Irt ? 0 : 1);
        binio::write_u32(out, h.n_questions);
        binio::write_u32(out, static_cast<std::uint32_t>(h.common_dim));
        binio::write_u32(out, static_cast<std::uint32_t>(h.native_dim));
        binio::write_u8(out, h.has_adapter() ? 1 : 0);
        if (h.has_adapter()) binio::write_mat(out, h.adapter);
        if (h.kind == CdmKind::Irt) {
            binio::write_vec(out, h.irt.log_disc);
            binio::write_vec(out, h.irt.diff);
        } else {
            binio::write_mat(out, h.ncd.diff);
            binio::write_vec(out, h.ncd.disc);
            binio::write_mat(out, h.ncd.mask);
            save_affine(out, h.ncd.l1);
            save_affine(out, h.ncd.l2);
        }
    }

    static DomainHead load_head(std::istream& in) {
        DomainHead h;
        h.kind = binio::read_u8(in) == 0 ? CdmKind::Irt : CdmKind::Ncd;
        h.n_questions = binio::read_u32(in);
        h.common_dim = binio::read_u32(in);
        h.native_dim = binio::read_u32(in);
        const bool adapted = binio::read_u8(in) != 0;
        if (adapted) {
            h.adapter = binio::read_mat(in);
            h.g_adapter = Mat::Zero(h.adapter.rows(), h.adapter.cols());
        }
        if (h.kind == CdmKind::Irt) {
            h.irt.log_disc = binio::read_vec(in);
            h.irt.diff = binio::read_vec(in);
            h.irt.g_log_disc = Vec::Zero(h.irt.log_disc.size());
            h.irt.g_diff = Vec::Zero(h.irt.diff.size());
        } else {
            h.ncd.diff = binio::read_mat(in);
            h.ncd.disc = binio::read_vec(in);
            h.ncd.mask = binio::read_mat(in);
            load_affine(in, h.ncd.l1);
            load_affine(in, h.ncd.l2);
            h.ncd.g_diff = Mat::Zero(h.ncd.diff.rows(), h.ncd.diff.cols());
            h.ncd.g_disc = Vec::Zero(h.ncd.disc.size());
        }
        return h;
    }
};

// One minibatch of response rows grouped by domain. Rows index into
// `abilities`; every listed examinee contributes to the anchor term whether
// or not it has rows.
struct CsumBatch {
    struct Row {
        int ex = 0;
        QuestionId question = 0;
        int correct = 0;
    };
    std::vector<AbilitySet> abilities;
    std::vector<Row> target_rows;
    std::vector<std::vector<Row>> source_rows;  // one list per source domain
};

namespace detail {

inline void check_batch(const CsumStack& stack, const CsumBatch& batch) {
    if (batch.source_rows.size() != stack.source_heads.size())
        throw ValidationError("batch must carry one row list per source domain");
    const int n_ex = static_cast<int>(batch.abilities.size());
    auto check_rows = [&](const std::vector<CsumBatch::Row>& rows) {
        for (const auto& r : rows) {
            if (r.ex < 0 || r.ex >= n_ex) throw ValidationError("batch row examinee out of range");
            if (r.correct != 0 && r.correct != 1)
                throw ValidationError("batch row label must be 0 or 1");
        }
    };
    check_rows(batch.target_rows);
    for (const auto& rows : batch.source_rows) check_rows(rows);
}

struct CsumExForward {
    TwoLayerTanh::Tape shared_tape, spec_tape, fuse_tape;
    Vec shared, spec, concat;
};

}  // namespace detail

// Mean squared response error of the shared vector across every domain,
// pooled over all rows.
inline double loss_shared(const CsumStack& stack, const CsumBatch& batch) {
    detail::check_batch(stack, batch);
    std::vector<Vec> shared(batch.abilities.size());
    for (std::size_t e = 0; e < batch.abilities.size(); ++e)
        shared[e] = stack.shared_cognition(batch.abilities[e]);

    const std::size_t n_rows = [&] {
        std::size_t n = batch.target_rows.size();
        for (const auto& rows : batch.source_rows) n += rows.size();
        return n;
    }();
    if (n_rows == 0) return 0.0;

    double acc = 0.0;
    for (const auto& r : batch.target_rows) {
        const double e = r.correct - stack.target_head.predict_common(shared[r.ex], r.question);
        acc += e * e;
    }
    for (std::size_t m = 0; m < batch.source_rows.size(); ++m) {
        for (const auto& r : batch.source_rows[m]) {
            const double e =
                r.correct - stack.source_heads[m].predict_common(shared[r.ex], r.question);
            acc += e * e;
        }
    }
    return acc / static_cast<double>(n_rows);
}

// Same value as loss_shared; adds `scale` times its gradient to the stack's
// buffers (shared encoder, projections, heads).
inline double loss_shared_backward(CsumStack& stack, const CsumBatch& batch, double scale = 1.0) {
    detail::check_batch(stack, batch);
    const std::size_t n_ex = batch.abilities.size();
    std::vector<TwoLayerTanh::Tape> tapes(n_ex);
    std::vector<Vec> shared(n_ex), dshared(n_ex);
    for (std::size_t e = 0; e < n_ex; ++e) {
        shared[e] = stack.shared_cognition(batch.abilities[e], &tapes[e]);
        dshared[e] = Vec::Zero(stack.d);
    }

    const std::size_t n_rows = [&] {
        std::size_t n = batch.target_rows.size();
        for (const auto& rows : batch.source_rows) n += rows.size();
        return n;
    }();
    if (n_rows == 0) return 0.0;
    const double inv_rows = 1.0 / static_cast<double>(n_rows);

    double acc = 0.0;
    for (const auto& r : batch.target_rows) {
        const double e = r.correct - stack.target_head.predict_common(shared[r.ex], r.question);
        acc += e * e;
        dshared[r.ex] += stack.target_head.backward_common(shared[r.ex], r.question,
                                                           scale * -2.0 * e * inv_rows);
    }
    for (std::size_t m = 0; m < batch.source_rows.size(); ++m) {
        for (const auto& r : batch.source_rows[m]) {
            const double e =
                r.correct - stack.source_heads[m].predict_common(shared[r.ex], r.question);
            acc += e * e;
            dshared[r.ex] += stack.source_heads[m].backward_common(shared[r.ex], r.question,
                                                                   scale * -2.0 * e * inv_rows);
        }
    }
    for (std::size_t e = 0; e < n_ex; ++e) {
        if (dshared[e].isZero(0.0)) continue;
        const Vec din = stack.shared_enc.backward(tapes[e], dshared[e]);
        stack.bank.backward_mean(batch.abilities[e].sources, din.tail(stack.d));
    }
    return acc * inv_rows;
}

namespace detail {

// Shared walk for the specific loss. The Grad hook receives per-row error
// terms; passing a null stack pointer makes it a pure evaluation.
inline double loss_specific_impl(const CsumStack& cstack, CsumStack* wstack,
                                 const CsumBatch& batch, double scale) {
    check_batch(cstack, batch);
    if (cstack.d != cstack.n_target)
        throw ValidationError(
            "the specific loss feeds the fused vector to domain heads and needs "
            "common dim == target ability dim");

    const std::size_t n_ex = batch.abilities.size();
    std::vector<CsumExForward> fw(n_ex);
    for (std::size_t e = 0; e < n_ex; ++e) {
        auto& f = fw[e];
        const auto& a = batch.abilities[e];
        if (wstack) {
            f.shared = cstack.shared_cognition(a, &f.shared_tape);
            f.spec = cstack.specific_cognition(a.target, &f.spec_tape);
            f.concat = cstack.fuse(f.spec, f.shared, &f.fuse_tape);
        } else {
            f.shared = cstack.shared_cognition(a);
            f.spec = cstack.specific_cognition(a.target);
            f.concat = cstack.fuse(f.spec, f.shared);
        }
    }
    std::vector<Vec> dconcat, dspec, dshared;
    if (wstack) {
        dconcat.assign(n_ex, Vec::Zero(cstack.n_target));
        dspec.assign(n_ex, Vec::Zero(cstack.d));
        dshared.assign(n_ex, Vec::Zero(cstack.d));
    }

    const double n_t = static_cast<double>(batch.target_rows.size());
    std::size_t n_source_rows = 0;
    for (const auto& rows : batch.source_rows) n_source_rows += rows.size();
    const double n_s = static_cast<double>(n_source_rows);

    // Target rows: reward prediction from both the fused and specific vectors.
    double acc_target = 0.0;
    for (const auto& r : batch.target_rows) {
        auto& f = fw[static_cast<std::size_t>(r.ex)];
        const double e1 = r.correct - cstack.target_head.predict_native(f.concat, r.question);
        const double e2 = r.correct - cstack.target_head.predict_common(f.spec, r.question);
        acc_target += e1 * e1 + e2 * e2;
        if (wstack) {
            dconcat[static_cast<std::size_t>(r.ex)] += wstack->target_head.backward_native(
                f.concat, r.question, scale * -2.0 * e1 / n_t);
            dspec[static_cast<std::size_t>(r.ex)] += wstack->target_head.backward_common(
                f.spec, r.question, scale * -2.0 * e2 / n_t);
        }
    }

    // Source rows: repel prediction, each row's pull capped at tau.
    double acc_source = 0.0;
    for (std::size_t m = 0; m < batch.source_rows.size(); ++m) {
        for (const auto& r : batch.source_rows[m]) {
            auto& f = fw[static_cast<std::size_t>(r.ex)];
            const auto& head = cstack.source_heads[m];
            const double e1 = r.correct - head.predict_common(f.concat, r.question);
            const double e2 = r.correct - head.predict_common(f.spec, r.question);
            const double s = e1 * e1 + e2 * e2;
            acc_source += std::min(s, cstack.tau);
            if (wstack && s < cstack.tau) {
                auto& whead = wstack->source_heads[m];
                dconcat[static_cast<std::size_t>(r.ex)] +=
                    whead.backward_common(f.concat, r.question, scale * 2.0 * e1 / n_s);
                dspec[static_cast<std::size_t>(r.ex)] +=
                    whead.backward_common(f.spec, r.question, scale * 2.0 * e2 / n_s);
            }
        }
    }

    // Anchor: every batch examinee, per-coordinate mean.
    double anchor = 0.0;
    if (n_ex > 0) {
        const double w = 1.0 / (static_cast<double>(n_ex) * static_cast<double>(cstack.n_target));
        for (std::size_t e = 0; e < n_ex; ++e) {
            const Vec diff = batch.abilities[e].target - fw[e].concat;
            anchor += diff.squaredNorm() * w;
            if (wstack) dconcat[e] += scale * 2.0 * w * (fw[e].concat - batch.abilities[e].target);
        }
    }

    if (wstack) {
        for (std::size_t e = 0; e < n_ex; ++e) {
            auto& f = fw[e];
            const Vec dfuse_in = wstack->fusion.backward(f.fuse_tape, dconcat[e]);
            dspec[e] += dfuse_in.head(cstack.d);
            dshared[e] += dfuse_in.tail(cstack.d);
            wstack->specific_enc.backward(f.spec_tape, dspec[e]);
            const Vec din = wstack->shared_enc.backward(f.shared_tape, dshared[e]);
            wstack->bank.backward_mean(batch.abilities[e].sources, din.tail(cstack.d));
        }
    }

    double loss = anchor;
    if (n_t > 0) loss += acc_target / n_t;
    if (n_s > 0) loss -= acc_source / n_s;
    return loss;
}

}  // namespace detail

// Target-attraction / source-repulsion loss on the specific and fused
// vectors, with the anchor keeping fusion near the pretrained ability.
inline double loss_specific(const CsumStack& stack, const CsumBatch& batch) {
    return detail::loss_specific_impl(stack, nullptr, batch, 0.0);
}

inline double loss_specific_backward(CsumStack& stack, const CsumBatch& batch,
                                     double scale = 1.0) {
    return detail::loss_specific_impl(stack, &stack, batch, scale);
}

// |cosine| between two flattened gradient vectors; 0 when either is empty of
// signal, so an idle loss never constrains the other.
inline double loss_orth(const Vec& g1, const Vec& g2) {
    if (g1.size() != g2.size()) throw ValidationError("gradient vectors must share a shape");
    const double n1 = g1.norm(), n2 = g2.norm();
    if (n1 == 0.0 || n2 == 0.0) return 0.0;
    return std::abs(g1.dot(g2)) / (n1 * n2);
}

// Accumulates d|cos|/dg1 and d|cos|/dg2; returns the loss value.
inline double loss_orth_backward(const Vec& g1, const Vec& g2, Vec& dg1, Vec& dg2) {
    if (g1.size() != g2.size()) throw ValidationError("gradient vectors must share a shape");
    const double n1 = g1.norm(), n2 = g2.norm();
    if (n1 == 0.0 || n2 == 0.0) return 0.0;
    const double cosv = g1.dot(g2) / (n1 * n2);
    const double sgn = cosv >= 0.0 ? 1.0 : -1.0;
    dg1 += sgn * (g2 / (n1 * n2) - (cosv / (n1 * n1)) * g1);
    dg2 += sgn * (g1 / (n1 * n2) - (cosv / (n2 * n2)) * g2);
    return std::abs(cosv);
}

}  // namespace dcsr
