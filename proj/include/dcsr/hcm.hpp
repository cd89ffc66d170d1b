#pragma once

// Joint training of the conditional denoiser and the unification stack.
//
// Each batch of warm target examinees contributes six loss terms: the
// denoising objective on the specific vector conditioned on the shared one,
// the two unification losses, the gradient-orthogonality penalty between
// them, and two generation-level terms computed by running the strided
// sampler and scoring its output against the pretrained ability
// (consistency) and against sampled warm responses through the frozen target
// model (task). One optimizer step per batch updates the denoiser and the
// stack; the pretrained item parameters never move.
//
// The orthogonality penalty is a function of two gradient vectors, so its
// own training gradient is a Hessian-vector product. Those are evaluated by
// symmetric finite differences of the loss gradients, which keeps the
// backward pass first-order only.

#include "dcsr/binio.hpp"
#include "dcsr/cdm.hpp"
#include "dcsr/common.hpp"
#include "dcsr/csum.hpp"
#include "dcsr/data.hpp"
#include "dcsr/diffusion.hpp"
#include "dcsr/nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace dcsr {

struct LossWeights {
    double diffusion = 1.0;
    double shared = 1.0;
    double specific = 1.0;
    double orth = 0.1;
    double consistency = 0.5;
    double task = 0.5;

    void check() const {
        const double all[] = {diffusion, shared, specific, orth, consistency, task};
        for (double w : all) {
            if (!(w >= 0.0)) throw ValidationError("loss weights must be non-negative");
        }
    }
};

struct HcmConfig {
    int epochs = 40;
    int batch = 256;
    double lr = 1e-3;
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int fast_K = 30;          // strided steps for the generation passes
    int task_sample = 32;     // warm responses scored per batch against generated abilities
    double x0_clip = 6.0;     // per-step clamp on the sampler's x0 estimate, roughly the ability range
    double hvp_eps = 1e-4;    // finite-difference step for the curvature products
    int denoiser_hidden = 0;  // 0 picks 4 * dim
    LossWeights weights;
    CsumConfig csum;
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;

    void check() const {
        if (epochs < 1 || batch < 1) throw ValidationError("training needs epochs >= 1 and batch >= 1");
        if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
        if (fast_K < 1 || fast_K > T) throw ValidationError("fast_K must lie in 1..T");
        if (task_sample < 0) throw ValidationError("task_sample must be >= 0");
        if (!(x0_clip > 0.0)) throw ValidationError("x0 clamp must be positive");
        if (!(hvp_eps > 0.0)) throw ValidationError("hvp_eps must be positive");
        weights.check();
    }
};

// Raw per-epoch loss means; total is the weighted objective actually stepped.
struct EpochStats {
    double total = 0.0;
    double diffusion = 0.0;
    double shared = 0.0;
    double specific = 0.0;
    double orth = 0.0;
    double consistency = 0.0;
    double task = 0.0;
};

// Per-coordinate mean squared distance between a generated ability vector and
// its pretrained anchor.
inline double consistency_loss(const Vec& generated, const Vec& pretrained) {
    if (generated.size() != pretrained.size())
        throw ValidationError("consistency loss dim mismatch");
    return (pretrained - generated).squaredNorm() / static_cast<double>(generated.size());
}

// Mean binary cross-entropy of the frozen model's predictions at theta_hat
// over the given rows, probabilities clamped to [1e-7, 1 - 1e-7]. When dtheta
// is given, accumulates scale * d(loss)/d(theta_hat); the clamp contributes a
// zero subgradient and the item parameters are never touched.
inline double task_loss(const Vec& theta_hat, const std::vector<Answer>& rows,
                        const CdmModel& frozen, Vec* dtheta = nullptr, double scale = 1.0) {
    if (rows.empty()) return 0.0;
    constexpr double kFloor = 1e-7;
    const double inv_n = 1.0 / static_cast<double>(rows.size());
    double loss = 0.0;
    for (const auto& a : rows) {
        const double p_raw = frozen.predict(theta_hat, a.question);
        const double p = std::clamp(p_raw, kFloor, 1.0 - kFloor);
        loss -= a.correct ? std::log(p) : std::log(1.0 - p);
        if (dtheta && p_raw > kFloor && p_raw < 1.0 - kFloor) {
            const double dldp = (a.correct ? -1.0 / p : 1.0 / (1.0 - p)) * inv_n * scale;
            if (frozen.kind() == CdmKind::Irt) {
                (*dtheta)[0] += frozen.irt_items().theta_grad(theta_hat[0], a.question, dldp);
            } else {
                *dtheta += frozen.ncd_items().theta_grad(theta_hat, a.question, dldp);
            }
        }
    }
    return loss * inv_n;
}

// Everything a downstream session needs: the schedule, the trained denoiser
// and stack, the weights and sampler settings it was trained with, and the
// item checksums of the frozen models it expects to run against.
struct DcsrArtifact {
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    LossWeights weights;
    int fast_K = 30;
    double x0_clip = 6.0;
    NoiseSchedule schedule;
    DenoiserNet denoiser;
    CsumStack csum;
    std::uint64_t target_model_checksum = 0;
    std::vector<std::uint64_t> source_model_checksums;
    std::vector<EpochStats> history;

    void save(std::ostream& out) const {
        binio::write_magic(out, "DCSRART1");
        binio::write_u64(out, config_hash);
        binio::write_u64(out, seed);
        binio::write_f64(out, weights.diffusion);
        binio::write_f64(out, weights.shared);
        binio::write_f64(out, weights.specific);
        binio::write_f64(out, weights.orth);
        binio::write_f64(out, weights.consistency);
        binio::write_f64(out, weights.task);
        binio::write_u32(out, static_cast<std::uint32_t>(fast_K));
        binio::write_f64(out, x0_clip);
        schedule.save(out);
        denoiser.save(out);
        csum.save(out);
        binio::write_u64(out, target_model_checksum);
        binio::write_u32(out, static_cast<std::uint32_t>(source_model_checksums.size()));
        for (std::uint64_t c : source_model_checksums) binio::write_u64(out, c);
        binio::write_u32(out, static_cast<std::uint32_t>(history.size()));
        for (const auto& h : history) {
            binio::write_f64(out, h.total);
            binio::write_f64(out, h.diffusion);
            binio::write_f64(out, h.shared);
            binio::write_f64(out, h.specific);
            binio::write_f64(out, h.orth);
            binio::write_f64(out, h.consistency);
            binio::write_f64(out, h.task);
        }
    }

    static DcsrArtifact load(std::istream& in) {
        binio::expect_magic(in, "DCSRART1", "training artifact");
        DcsrArtifact a;
        a.config_hash = binio::read_u64(in);
        a.seed = binio::read_u64(in);
        a.weights.diffusion = binio::read_f64(in);
        a.weights.shared = binio::read_f64(in);
        a.weights.specific = binio::read_f64(in);
        a.weights.orth = binio::read_f64(in);
        a.weights.consistency = binio::read_f64(in);
        a.weights.task = binio::read_f64(in);
        a.fast_K = static_cast<int>(binio::read_u32(in));
        a.x0_clip = binio::read_f64(in);
        a.schedule = NoiseSchedule::load(in);
        a.denoiser = DenoiserNet::load(in);
        a.csum = CsumStack::load(in);
        a.target_model_checksum = binio::read_u64(in);
        const auto n_src = binio::read_u32(in);
        a.source_model_checksums.resize(n_src);
        for (auto& c : a.source_model_checksums) c = binio::read_u64(in);
        const auto n_hist = binio::read_u32(in);
        a.history.resize(n_hist);
        for (auto& h : a.history) {
            h.total = binio::read_f64(in);
            h.diffusion = binio::read_f64(in);
            h.shared = binio::read_f64(in);
            h.specific = binio::read_f64(in);
            h.orth = binio::read_f64(in);
            h.consistency = binio::read_f64(in);
            h.task = binio::read_f64(in);
        }
        return a;
    }

    std::uint64_t checksum() const {
        std::ostringstream os(std::ios::binary);
        save(os);
        const std::string bytes = os.str();
        Fnv64 h;
        h.update(bytes.data(), bytes.size());
        return h.digest();
    }
};

enum class GenMode { Ancestral, Fast };

// Generates a target ability for one examinee from their (possibly
// substituted) target vector and source vectors. The shared vector
// conditions the chain; the sample starts from fresh standard normal noise.
inline Vec generate_target_ability(const DcsrArtifact& art, const AbilitySet& abilities,
                                   GenMode mode, Rng& rng) {
    const Vec share = art.csum.shared_cognition(abilities);
    const Vec eps0 = rng.normal_vec(art.csum.d);
    if (mode == GenMode::Fast) {
        return fast_sample(art.denoiser, share, eps0, art.schedule, art.fast_K, art.x0_clip);
    }
    return ancestral_sample(art.denoiser, share, eps0, art.schedule, rng);
}

namespace detail {

// One warm target examinee's training view: pretrained abilities (sources
// substituted by the domain mean when missing) plus their response rows.
// ab_inf mirrors ab with the target slot replaced by the warm-table mean,
// which is the only target view a cold examinee will ever provide; every
// denoiser conditioning pass uses it so training matches deployment.
struct TrainEx {
    AbilitySet ab;
    AbilitySet ab_inf;
    std::vector<Answer> target_rows;
    std::vector<std::vector<Answer>> source_rows;
};

// Symmetric finite-difference Hessian-vector product: perturb one parameter
// block along v, difference the full loss gradient produced by run_backward.
// Adds weight * H v to master and restores the parameters exactly.
template <typename F>
void add_curvature(const std::vector<ParamSpan>& all, std::size_t begin, const Vec& v,
                   double hvp_eps, F&& run_backward, double weight, Vec& master) {
    const double vn = v.norm();
    if (!(vn > 0.0)) return;
    const double h = hvp_eps / vn;
    const Vec theta0 = flatten_values(all);
    Vec probe = theta0;
    probe.segment(static_cast<Eigen::Index>(begin), v.size()) += h * v;
    assign_values(all, probe);
    zero_grads(all);
    run_backward();
    const Vec gp = flatten_grads(all);
    probe = theta0;
    probe.segment(static_cast<Eigen::Index>(begin), v.size()) -= h * v;
    assign_values(all, probe);
    zero_grads(all);
    run_backward();
    const Vec gm = flatten_grads(all);
    assign_values(all, theta0);
    master += (weight / (2.0 * h)) * (gp - gm);
}

inline std::vector<TrainEx> build_train_set(const TrainPartition& part, const CdmModel& target,
                                            const std::vector<const CdmModel*>& sources) {
    std::vector<ExamineeId> roster;
    for (const auto& t : part.target_warm.logs) roster.push_back(t.examinee);
    std::sort(roster.begin(), roster.end());
    roster.erase(std::unique(roster.begin(), roster.end()), roster.end());
    if (roster.empty()) throw ValidationError("no warm target logs to train on");

    std::map<ExamineeId, std::size_t> slot;
    for (std::size_t i = 0; i < roster.size(); ++i) slot[roster[i]] = i;

    std::vector<Vec> source_means;
    source_means.reserve(sources.size());
    for (const CdmModel* m : sources) source_means.push_back(m->mean_ability());

    const Vec target_mean = target.mean_ability();
    std::vector<TrainEx> exs(roster.size());
    for (std::size_t i = 0; i < roster.size(); ++i) {
        const ExamineeId e = roster[i];
        exs[i].ab.target = target.has_ability(e) ? target.ability(e) : target_mean;
        exs[i].source_rows.resize(sources.size());
        for (std::size_t m = 0; m < sources.size(); ++m) {
            exs[i].ab.sources.push_back(sources[m]->has_ability(e) ? sources[m]->ability(e)
                                                                   : source_means[m]);
        }
        exs[i].ab_inf.target = target_mean;
        exs[i].ab_inf.sources = exs[i].ab.sources;
    }
    for (std::size_t i = 0; i < roster.size(); ++i) {
        bool ok = all_finite(exs[i].ab.target);
        for (const Vec& s : exs[i].ab.sources) ok = ok && all_finite(s);
        if (!ok) {
            throw ValidationError("non-finite pretrained ability for examinee " +
                                  std::to_string(roster[i]));
        }
    }
    for (const auto& t : part.target_warm.logs) {
        exs[slot[t.examinee]].target_rows.push_back({t.question, t.correct});
    }
    for (std::size_t m = 0; m < part.sources.size(); ++m) {
        for (const auto& t : part.sources[m].logs) {
            const auto it = slot.find(t.examinee);
            if (it != slot.end()) exs[it->second].source_rows[m].push_back({t.question, t.correct});
        }
    }
    return exs;
}

}  // namespace detail

inline DcsrArtifact train_dcsr(const TrainPartition& part, const CdmModel& target,
                               const std::vector<const CdmModel*>& sources, const HcmConfig& cfg) {
    cfg.check();
    if (sources.empty()) throw ValidationError("training needs at least one source model");
    if (sources.size() != part.sources.size())
        throw ValidationError("one pretrained model per source domain required");

    DcsrArtifact art;
    art.config_hash = cfg.config_hash;
    art.seed = cfg.seed;
    art.weights = cfg.weights;
    art.fast_K = cfg.fast_K;
    art.x0_clip = cfg.x0_clip;
    art.schedule = NoiseSchedule::linear(cfg.T, cfg.beta_start, cfg.beta_end);
    art.csum = CsumStack::fresh(target, sources, cfg.csum, cfg.seed);
    if (art.csum.d != art.csum.n_target)
        throw ValidationError("joint training requires the common dim to equal the target ability dim");
    art.denoiser = DenoiserNet::fresh(art.csum.d, art.csum.d, cfg.denoiser_hidden, cfg.seed);
    art.target_model_checksum = cdm_checksum(target);
    for (const CdmModel* m : sources) art.source_model_checksums.push_back(cdm_checksum(*m));

    const std::vector<detail::TrainEx> exs = detail::build_train_set(part, target, sources);
    const Eigen::Index d = art.csum.d;

    // Calibrate both encoder outputs to the warm ability distribution before
    // training. A raw tanh init leaves the outputs near zero with arbitrary
    // sign, where the hinged source-repulsion force dominates the early steps
    // and can lock the substrate into a reversed encode of the ability it is
    // later read back as (the positive-discrimination heads then mask the bad
    // target fit behind the saturated hinge). An affine rescale of the output
    // rows is function-class preserving and starts training inside the basin
    // where the pretrained heads already predict well.
    {
        const auto n = static_cast<Eigen::Index>(exs.size());
        Mat th(n, d), sp(n, d), sh(n, d);
        for (Eigen::Index i = 0; i < n; ++i) {
            const detail::TrainEx& ex = exs[static_cast<std::size_t>(i)];
            th.row(i) = ex.ab.target.transpose();
            sp.row(i) = art.csum.specific_cognition(ex.ab.target).transpose();
            sh.row(i) = art.csum.shared_cognition(ex.ab).transpose();
        }
        const auto calibrate = [&](TwoLayerTanh& enc, const Mat& out, Eigen::Index j) {
            const double t_mean = th.col(j).mean();
            const double t_sd = std::sqrt((th.col(j).array() - t_mean).square().mean());
            const double o_mean = out.col(j).mean();
            const double o_sd = std::sqrt((out.col(j).array() - o_mean).square().mean());
            const double cov =
                ((out.col(j).array() - o_mean) * (th.col(j).array() - t_mean)).mean();
            double s = o_sd > 1e-8 ? t_sd / o_sd : 1.0;
            s = std::min(s, 25.0) * (cov < 0.0 ? -1.0 : 1.0);
            enc.out_layer.W.row(j) *= s;
            enc.out_layer.b[j] = s * enc.out_layer.b[j] + t_mean - s * o_mean;
        };
        for (Eigen::Index j = 0; j < d; ++j) {
            calibrate(art.csum.specific_enc, sp, j);
            calibrate(art.csum.shared_enc, sh, j);
        }
    }

    // One flat parameter view shared by the optimizer, the per-loss gradient
    // buffers and the curvature probes. Offsets locate the two encoder blocks
    // inside it.
    std::vector<ParamSpan> all;
    art.denoiser.collect(all);
    art.csum.bank.collect(all);
    const std::size_t shared_begin = total_size(all);
    art.csum.shared_enc.collect(all);
    art.csum.specific_enc.collect(all);
    art.csum.fusion.collect(all);
    art.csum.target_head.collect(all);
    for (auto& h : art.csum.source_heads) h.collect(all);
    const auto n_params = static_cast<Eigen::Index>(total_size(all));

    std::vector<ParamSpan> shared_spans, spec_spans;
    art.csum.collect_shared_params(shared_spans);
    art.csum.collect_specific_params(spec_spans);
    const std::size_t spec_begin = shared_begin + total_size(shared_spans);

    Adam opt(cfg.lr);
    Rng rng(derive_seed(cfg.seed, 6));
    const LossWeights& w = cfg.weights;
    const bool run_generation = w.consistency > 0.0 || w.task > 0.0;

    std::vector<std::size_t> order(exs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        EpochStats ep;
        int n_batches = 0;

        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
            const auto bsz = static_cast<int>(end - start);
            const double inv_b = 1.0 / static_cast<double>(bsz);

            CsumBatch cb;
            cb.source_rows.resize(sources.size());
            for (std::size_t i = start; i < end; ++i) {
                const detail::TrainEx& ex = exs[order[i]];
                const int bi = static_cast<int>(i - start);
                cb.abilities.push_back(ex.ab);
                for (const Answer& a : ex.target_rows)
                    cb.target_rows.push_back({bi, a.question, static_cast<int>(a.correct)});
                for (std::size_t m = 0; m < sources.size(); ++m)
                    for (const Answer& a : ex.source_rows[m])
                        cb.source_rows[m].push_back({bi, a.question, static_cast<int>(a.correct)});
            }

            Vec master = Vec::Zero(n_params);

            // denoising pass: x0 is the specific vector built from the real
            // pretrained ability and treated as data, otherwise the denoising
            // term could zero itself by shrinking its own substrate; the
            // conditioning is the deployment-view shared vector and its
            // gradient reaches the shared encoder and the bank
            zero_grads(all);
            double l_diff = 0.0;
            for (std::size_t i = start; i < end; ++i) {
                const detail::TrainEx& ex = exs[order[i]];
                TwoLayerTanh::Tape sh_tape;
                const Vec share = art.csum.shared_cognition(ex.ab_inf, &sh_tape);
                const Vec spec = art.csum.specific_cognition(ex.ab.target);
                const int t = rng.uniform_int(1, cfg.T);
                const Vec eps = rng.normal_vec(d);
                Vec dcond = Vec::Zero(d);
                l_diff += inv_b * denoising_loss_backward(art.denoiser, spec, share, t, eps,
                                                          art.schedule, inv_b, nullptr, &dcond);
                const Vec din = art.csum.shared_enc.backward(sh_tape, dcond);
                art.csum.bank.backward_mean(ex.ab_inf.sources, din.tail(d));
            }
            if (w.diffusion > 0.0) axpy_grads(all, w.diffusion, master);

            // the two unification losses, each in its own gradient buffer so
            // the encoder blocks can be snapshotted for the orthogonality term
            zero_grads(all);
            const double l1 = loss_shared_backward(art.csum, cb, 1.0);
            const Vec g1 = flatten_grads(shared_spans);
            if (w.shared > 0.0) axpy_grads(all, w.shared, master);

            zero_grads(all);
            const double l2 = loss_specific_backward(art.csum, cb, 1.0);
            const Vec g2 = flatten_grads(spec_spans);
            if (w.specific > 0.0) axpy_grads(all, w.specific, master);

            Vec v1 = Vec::Zero(g1.size()), v2 = Vec::Zero(g2.size());
            const double l3 = loss_orth_backward(g1, g2, v1, v2);
            if (w.orth > 0.0) {
                detail::add_curvature(all, shared_begin, v1, cfg.hvp_eps,
                                      [&] { loss_shared_backward(art.csum, cb, 1.0); }, w.orth,
                                      master);
                detail::add_curvature(all, spec_begin, v2, cfg.hvp_eps,
                                      [&] { loss_specific_backward(art.csum, cb, 1.0); }, w.orth,
                                      master);
            }

            // generation pass: strided sampling per examinee, scored against
            // the pretrained ability and against sampled warm responses
            // through the frozen target model; gradients reach the denoiser
            // only, the conditioning branch is treated as constant
            double l_cc = 0.0, l_tc = 0.0;
            if (run_generation) {
                zero_grads(all);
                std::vector<std::pair<int, const Answer*>> pool;
                for (std::size_t i = start; i < end; ++i) {
                    const int bi = static_cast<int>(i - start);
                    for (const Answer& a : exs[order[i]].target_rows) pool.emplace_back(bi, &a);
                }
                std::vector<std::vector<Answer>> picked(static_cast<std::size_t>(bsz));
                int n_task = 0;
                if (cfg.task_sample > 0 && !pool.empty()) {
                    for (int j = 0; j < cfg.task_sample; ++j) {
                        const auto& pick = pool[rng.below(pool.size())];
                        picked[static_cast<std::size_t>(pick.first)].push_back(*pick.second);
                        ++n_task;
                    }
                }
                for (std::size_t i = start; i < end; ++i) {
                    const detail::TrainEx& ex = exs[order[i]];
                    const auto bi = static_cast<std::size_t>(i - start);
                    const Vec share = art.csum.shared_cognition(ex.ab_inf);
                    const Vec eps0 = rng.normal_vec(d);
                    FastSampleTape tape;
                    const Vec theta_hat = fast_sample_tape(art.denoiser, share, eps0, art.schedule,
                                                           cfg.fast_K, tape, cfg.x0_clip);
                    l_cc += inv_b * consistency_loss(theta_hat, ex.ab.target);
                    Vec dout = (w.consistency * inv_b * 2.0 / static_cast<double>(d)) *
                               (theta_hat - ex.ab.target);
                    if (!picked[bi].empty()) {
                        const double frac =
                            static_cast<double>(picked[bi].size()) / static_cast<double>(n_task);
                        Vec dtask = Vec::Zero(d);
                        l_tc += frac * task_loss(theta_hat, picked[bi], target, &dtask, frac);
                        dout += w.task * dtask;
                    }
                    fast_sample_backward(art.denoiser, tape, dout);
                }
                axpy_grads(all, 1.0, master);
            }

            const double total = w.diffusion * l_diff + w.shared * l1 + w.specific * l2 +
                                 w.orth * l3 + w.consistency * l_cc + w.task * l_tc;
            if (!std::isfinite(total) || !master.allFinite()) {
                throw RuntimeFailure("non-finite training loss at epoch " + std::to_string(epoch + 1) +
                                     " batch " + std::to_string(n_batches + 1));
            }

            assign_grads(all, master);
            opt.step(all);
            art.csum.clamp_invariants();

            ep.total += total;
            ep.diffusion += l_diff;
            ep.shared += l1;
            ep.specific += l2;
            ep.orth += l3;
            ep.consistency += l_cc;
            ep.task += l_tc;
            ++n_batches;
        }

        const double inv_nb = 1.0 / static_cast<double>(n_batches);
        ep.total *= inv_nb;
        ep.diffusion *= inv_nb;
        ep.shared *= inv_nb;
        ep.specific *= inv_nb;
        ep.orth *= inv_nb;
        ep.consistency *= inv_nb;
        ep.task *= inv_nb;
        art.history.push_back(ep);
    }

    return art;
}

}  // namespace dcsr
