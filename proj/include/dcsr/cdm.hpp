#pragma once

// Cognitive diagnosis models. Two interchangeable response models over a
// shared interface:
//
//   2PL:  p = sigmoid(disc_q * (theta - diff_q)), scalar ability.
//   NCD:  p = net(mask_q .* (sigmoid(theta) - diff_q) * disc_q), ability is a
//         per-concept mastery vector; the two-layer interaction net keeps
//         non-negative weights so higher mastery never lowers p.
//
// Abilities live in raw (pre-sigmoid) space everywhere. Joint pretraining
// fits item parameters and an ability table by minibatch gradient descent on
// binary cross-entropy; per-examinee updates do a fixed budget of clipped
// gradient-ascent steps on the log-likelihood.

#include "dcsr/binio.hpp"
#include "dcsr/common.hpp"
#include "dcsr/data.hpp"
#include "dcsr/nn.hpp"

#include <algorithm>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace dcsr {

enum class CdmKind : std::uint8_t { Irt = 0, Ncd = 1 };

inline const char* to_string(CdmKind k) { return k == CdmKind::Irt ? "irt" : "ncd"; }

struct Answer {
    QuestionId question = 0;
    std::uint8_t correct = 0;
};

struct MleConfig {
    int steps = 10;
    double lr = 0.05;
    double clip = 5.0;
};

struct PretrainConfig {
    int epochs = 20;
    int batch = 32;
    double lr = 0.002;
    int ncd_hidden = 32;
    std::uint64_t seed = 0;
};

namespace detail {
constexpr double kProbFloor = 1e-15;
inline double clamp_prob(double p) { return std::clamp(p, kProbFloor, 1.0 - kProbFloor); }
}  // namespace detail

struct IrtItems {
    Vec log_disc, diff;
    Vec g_log_disc, g_diff;

    void init(Eigen::Index n_questions) {
        log_disc = Vec::Zero(n_questions);
        diff = Vec::Zero(n_questions);
        g_log_disc = Vec::Zero(n_questions);
        g_diff = Vec::Zero(n_questions);
    }

    double predict(double theta, QuestionId q) const {
        return detail::clamp_prob(sigmoid(std::exp(log_disc[q]) * (theta - diff[q])));
    }

    // d(p)/d(theta) * dldp
    double theta_grad(double theta, QuestionId q, double dldp) const {
        const double a = std::exp(log_disc[q]);
        const double p = predict(theta, q);
        return dldp * p * (1.0 - p) * a;
    }

    // accumulates item grads, returns d/d(theta)
    double backward(double theta, QuestionId q, double dldp) {
        const double a = std::exp(log_disc[q]);
        const double p = predict(theta, q);
        const double dpre = dldp * p * (1.0 - p);
        g_log_disc[q] += dpre * a * (theta - diff[q]);
        g_diff[q] += -dpre * a;
        return dpre * a;
    }

    void collect(std::vector<ParamSpan>& spans) {
        spans.push_back({log_disc.data(), g_log_disc.data(), static_cast<std::size_t>(log_disc.size())});
        spans.push_back({diff.data(), g_diff.data(), static_cast<std::size_t>(diff.size())});
    }
};

struct NcdItems {
    Mat diff;   // n_concepts x n_questions
    Vec disc;   // per question
    Affine l1;  // hidden x n_concepts, sigmoid activation
    Affine l2;  // 1 x hidden, sigmoid output
    Mat mask;   // n_concepts x n_questions, 0/1 from the q-matrix
    Mat g_diff;
    Vec g_disc;

    void init(const std::vector<std::vector<ConceptId>>& q_matrix, Eigen::Index n_concepts,
              Eigen::Index hidden, Rng& rng) {
        const auto n_questions = static_cast<Eigen::Index>(q_matrix.size());
        diff = Mat::Zero(n_concepts, n_questions);
        disc = Vec::Ones(n_questions);
        g_diff = Mat::Zero(n_concepts, n_questions);
        g_disc = Vec::Zero(n_questions);
        mask = Mat::Zero(n_concepts, n_questions);
        for (Eigen::Index q = 0; q < n_questions; ++q)
            for (ConceptId c : q_matrix[static_cast<std::size_t>(q)]) mask(c, q) = 1.0;
        l1.init(hidden, n_concepts, rng);
        l2.init(1, hidden, rng);
        // monotone from the start: the clamp invariant also holds at init
        l1.W = l1.W.cwiseAbs();
        l2.W = l2.W.cwiseAbs();
    }

    Vec interaction_input(const Vec& theta, QuestionId q) const {
        Vec s = theta.unaryExpr([](double t) { return sigmoid(t); });
        return mask.col(q).cwiseProduct(s - diff.col(q)) * disc[q];
    }

    double predict(const Vec& theta, QuestionId q) const {
        const Vec x = interaction_input(theta, q);
        const Vec h = l1.forward(x).unaryExpr([](double u) { return sigmoid(u); });
        return detail::clamp_prob(sigmoid(l2.forward(h)[0]));
    }

    Vec theta_grad(const Vec& theta, QuestionId q, double dldp) const {
        const Vec s = theta.unaryExpr([](double t) { return sigmoid(t); });
        const Vec x = mask.col(q).cwiseProduct(s - diff.col(q)) * disc[q];
        const Vec h = l1.forward(x).unaryExpr([](double u) { return sigmoid(u); });
        const double p = detail::clamp_prob(sigmoid(l2.forward(h)[0]));
        const double dout = dldp * p * (1.0 - p);
        Vec dh = l2.W.transpose() * Vec::Constant(1, dout);
        dh.array() *= h.array() * (1.0 - h.array());
        const Vec dx = l1.W.transpose() * dh;
        return dx.cwiseProduct(mask.col(q)).cwiseProduct(s.cwiseProduct(Vec::Ones(s.size()) - s)) * disc[q];
    }

    Vec backward(const Vec& theta, QuestionId q, double dldp) {
        const Vec s = theta.unaryExpr([](double t) { return sigmoid(t); });
        const Vec x = mask.col(q).cwiseProduct(s - diff.col(q)) * disc[q];
        const Vec h = l1.forward(x).unaryExpr([](double u) { return sigmoid(u); });
        const double p = detail::clamp_prob(sigmoid(l2.forward(h)[0]));
        const double dout = dldp * p * (1.0 - p);
        Vec dh = l2.backward(h, Vec::Constant(1, dout));
        dh.array() *= h.array() * (1.0 - h.array());
        const Vec dx = l1.backward(x, dh);
        g_disc[q] += dx.dot(mask.col(q).cwiseProduct(s - diff.col(q)));
        g_diff.col(q) += -dx.cwiseProduct(mask.col(q)) * disc[q];
        return dx.cwiseProduct(mask.col(q)).cwiseProduct(s.cwiseProduct(Vec::Ones(s.size()) - s)) * disc[q];
    }

    void clamp_nonneg() {
        l1.W = l1.W.cwiseMax(0.0);
        l2.W = l2.W.cwiseMax(0.0);
        disc = disc.cwiseMax(0.0);
    }

    void collect(std::vector<ParamSpan>& spans) {
        spans.push_back({diff.data(), g_diff.data(), static_cast<std::size_t>(diff.size())});
        spans.push_back({disc.data(), g_disc.data(), static_cast<std::size_t>(disc.size())});
        l1.collect(spans);
        l2.collect(spans);
    }
};

class CdmModel {
public:
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;

    CdmModel() = default;

    // Structure without training; item params at neutral defaults.
    static CdmModel fresh(CdmKind kind, const DomainDataset& ds, int ncd_hidden, std::uint64_t seed) {
        CdmModel m;
        m.kind_ = kind;
        m.domain_ = ds.domain;
        m.n_questions_ = ds.n_questions;
        m.n_concepts_ = ds.n_concepts;
        m.seed = seed;
        Rng rng(derive_seed(seed, 1));
        if (kind == CdmKind::Irt) {
            m.irt_.init(static_cast<Eigen::Index>(ds.n_questions));
        } else {
            m.ncd_.init(ds.q_matrix, static_cast<Eigen::Index>(ds.n_concepts),
                        std::max(1, ncd_hidden), rng);
        }
        return m;
    }

    CdmKind kind() const { return kind_; }
    DomainId domain() const { return domain_; }
    std::uint32_t n_questions() const { return n_questions_; }
    std::uint32_t n_concepts() const { return n_concepts_; }
    Eigen::Index ability_dim() const {
        return kind_ == CdmKind::Irt ? 1 : static_cast<Eigen::Index>(n_concepts_);
    }

    IrtItems& irt_items() { return irt_; }
    NcdItems& ncd_items() { return ncd_; }
    const IrtItems& irt_items() const { return irt_; }
    const NcdItems& ncd_items() const { return ncd_; }

    double predict(const Vec& theta, QuestionId q) const {
        check_question(q);
        check_theta(theta);
        return kind_ == CdmKind::Irt ? irt_.predict(theta[0], q) : ncd_.predict(theta, q);
    }

    double loglik(const Vec& theta, const std::vector<Answer>& evidence) const {
        double ll = 0.0;
        for (const auto& a : evidence) {
            const double p = predict(theta, a.question);
            ll += a.correct ? std::log(p) : std::log1p(-p);
        }
        return ll;
    }

    Vec loglik_grad(const Vec& theta, const std::vector<Answer>& evidence) const {
        check_theta(theta);
        Vec g = Vec::Zero(ability_dim());
        for (const auto& a : evidence) {
            check_question(a.question);
            const double p = predict(theta, a.question);
            const double dldp = a.correct ? 1.0 / p : -1.0 / (1.0 - p);
            if (kind_ == CdmKind::Irt) {
                g[0] += irt_.theta_grad(theta[0], a.question, dldp);
            } else {
                g += ncd_.theta_grad(theta, a.question, dldp);
            }
        }
        return g;
    }

    // d(loglik)/d(item params), accumulated into the grad buffers.
    void accumulate_item_grads(const Vec& theta, const Answer& a) {
        check_question(a.question);
        const double p = predict(theta, a.question);
        const double dldp = a.correct ? 1.0 / p : -1.0 / (1.0 - p);
        if (kind_ == CdmKind::Irt) {
            irt_.backward(theta[0], a.question, dldp);
        } else {
            ncd_.backward(theta, a.question, dldp);
        }
    }

    void collect_item_spans(std::vector<ParamSpan>& spans) {
        if (kind_ == CdmKind::Irt) irt_.collect(spans);
        else ncd_.collect(spans);
    }

    void clamp_invariants() {
        if (kind_ == CdmKind::Ncd) ncd_.clamp_nonneg();
    }

    // --- ability table -----------------------------------------------------

    const std::vector<ExamineeId>& ability_ids() const { return ability_ids_; }

    bool has_ability(ExamineeId e) const {
        auto it = std::lower_bound(ability_ids_.begin(), ability_ids_.end(), e);
        return it != ability_ids_.end() && *it == e;
    }

    Vec ability(ExamineeId e) const {
        auto it = std::lower_bound(ability_ids_.begin(), ability_ids_.end(), e);
        if (it == ability_ids_.end() || *it != e) {
            throw ValidationError("no pretrained ability for examinee " + std::to_string(e) +
                                  " in domain " + std::to_string(domain_));
        }
        return abilities_.col(it - ability_ids_.begin());
    }

    Vec mean_ability() const {
        if (ability_ids_.empty()) throw ValidationError("ability table is empty");
        return abilities_.rowwise().mean();
    }

    void set_ability_table(std::vector<ExamineeId> ids, Mat table) {
        if (table.cols() != static_cast<Eigen::Index>(ids.size()) || table.rows() != ability_dim()) {
            throw ValidationError("ability table shape mismatch");
        }
        ability_ids_ = std::move(ids);
        abilities_ = std::move(table);
    }

    Mat& ability_table() { return abilities_; }
    const Mat& ability_table() const { return abilities_; }

    // --- io ------------------------------------------------------------------

    void save(std::ostream& out) const {
        binio::write_magic(out, "DCSRCDM1");
        binio::write_u64(out, config_hash);
        binio::write_u64(out, seed);
        binio::write_u8(out, static_cast<std::uint8_t>(kind_));
        binio::write_u32(out, domain_);
        binio::write_u32(out, n_questions_);
        binio::write_u32(out, n_concepts_);
        if (kind_ == CdmKind::Irt) {
            binio::write_vec(out, irt_.log_disc);
            binio::write_vec(out, irt_.diff);
        } else {
            binio::write_mat(out, ncd_.diff);
            binio::write_vec(out, ncd_.disc);
            binio::write_mat(out, ncd_.l1.W);
            binio::write_vec(out, ncd_.l1.b);
            binio::write_mat(out, ncd_.l2.W);
            binio::write_vec(out, ncd_.l2.b);
            binio::write_mat(out, ncd_.mask);
        }
        binio::write_u32_list(out, ability_ids_);
        binio::write_mat(out, abilities_);
    }

    static CdmModel load(std::istream& in) {
        CdmModel m;
        binio::expect_magic(in, "DCSRCDM1", "diagnosis model");
        m.config_hash = binio::read_u64(in);
        m.seed = binio::read_u64(in);
        const auto kind = binio::read_u8(in);
        if (kind > 1) throw RuntimeFailure("bad diagnosis model file: unknown kind");
        m.kind_ = static_cast<CdmKind>(kind);
        m.domain_ = binio::read_u32(in);
        m.n_questions_ = binio::read_u32(in);
        m.n_concepts_ = binio::read_u32(in);
        if (m.kind_ == CdmKind::Irt) {
            m.irt_.log_disc = binio::read_vec(in);
            m.irt_.diff = binio::read_vec(in);
            m.irt_.g_log_disc = Vec::Zero(m.irt_.log_disc.size());
            m.irt_.g_diff = Vec::Zero(m.irt_.diff.size());
        } else {
            m.ncd_.diff = binio::read_mat(in);
            m.ncd_.disc = binio::read_vec(in);
            m.ncd_.l1.W = binio::read_mat(in);
            m.ncd_.l1.b = binio::read_vec(in);
            m.ncd_.l2.W = binio::read_mat(in);
            m.ncd_.l2.b = binio::read_vec(in);
            m.ncd_.mask = binio::read_mat(in);
            m.ncd_.g_diff = Mat::Zero(m.ncd_.diff.rows(), m.ncd_.diff.cols());
            m.ncd_.g_disc = Vec::Zero(m.ncd_.disc.size());
            m.ncd_.l1.gW = Mat::Zero(m.ncd_.l1.W.rows(), m.ncd_.l1.W.cols());
            m.ncd_.l1.gb = Vec::Zero(m.ncd_.l1.b.size());
            m.ncd_.l2.gW = Mat::Zero(m.ncd_.l2.W.rows(), m.ncd_.l2.W.cols());
            m.ncd_.l2.gb = Vec::Zero(m.ncd_.l2.b.size());
        }
        m.ability_ids_ = binio::read_u32_list(in);
        m.abilities_ = binio::read_mat(in);
        return m;
    }

private:
    void check_question(QuestionId q) const {
        if (q >= n_questions_) {
            throw ValidationError("question " + std::to_string(q) + " out of range for domain " +
                                  std::to_string(domain_) + " (" + std::to_string(n_questions_) +
                                  " questions)");
        }
    }
    void check_theta(const Vec& theta) const {
        if (theta.size() != ability_dim()) {
            throw ValidationError("ability vector has dim " + std::to_string(theta.size()) +
                                  ", model expects " + std::to_string(ability_dim()));
        }
    }

    CdmKind kind_ = CdmKind::Irt;
    DomainId domain_ = 0;
    std::uint32_t n_questions_ = 0;
    std::uint32_t n_concepts_ = 0;
    IrtItems irt_;
    NcdItems ncd_;
    std::vector<ExamineeId> ability_ids_;
    Mat abilities_;
};

inline void save_cdm(const CdmModel& m, std::ostream& out) { m.save(out); }
inline CdmModel load_cdm(std::istream& in) { return CdmModel::load(in); }

inline std::uint64_t item_checksum(const CdmModel& m) {
    std::vector<ParamSpan> spans;
    const_cast<CdmModel&>(m).collect_item_spans(spans);
    return checksum(spans);
}

inline std::uint64_t cdm_checksum(const CdmModel& m) {
    Fnv64 h;
    h.update_u64(item_checksum(m));
    h.update(m.ability_ids().data(), m.ability_ids().size() * sizeof(ExamineeId));
    h.update_doubles(m.ability_table().data(), static_cast<std::size_t>(m.ability_table().size()));
    return h.digest();
}

struct PretrainResult {
    CdmModel model;
    std::vector<double> epoch_loss;
};

// Joint item/ability fit by minibatch Adam on mean BCE.
inline PretrainResult pretrain(const DomainDataset& ds, CdmKind kind, const PretrainConfig& cfg) {
    if (ds.logs.empty()) throw ValidationError("pretrain: dataset has no logs");
    if (cfg.epochs < 1 || cfg.batch < 1 || cfg.lr <= 0.0) {
        throw ValidationError("pretrain: epochs/batch/lr must be positive");
    }

    PretrainResult res;
    res.model = CdmModel::fresh(kind, ds, cfg.ncd_hidden, cfg.seed);
    CdmModel& m = res.model;

    std::vector<ExamineeId> ids;
    ids.reserve(ds.logs.size());
    for (const auto& t : ds.logs) ids.push_back(t.examinee);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    m.set_ability_table(ids, Mat::Zero(m.ability_dim(), static_cast<Eigen::Index>(ids.size())));

    std::vector<std::size_t> col_of_row(ds.logs.size());
    for (std::size_t i = 0; i < ds.logs.size(); ++i) {
        const auto it = std::lower_bound(ids.begin(), ids.end(), ds.logs[i].examinee);
        col_of_row[i] = static_cast<std::size_t>(it - ids.begin());
    }

    Mat ability_grad = Mat::Zero(m.ability_dim(), static_cast<Eigen::Index>(ids.size()));
    std::vector<ParamSpan> spans;
    m.collect_item_spans(spans);
    spans.push_back({m.ability_table().data(), ability_grad.data(),
                     static_cast<std::size_t>(m.ability_table().size())});

    Adam opt(cfg.lr);
    Rng shuffle_rng(derive_seed(cfg.seed, 2));
    std::vector<std::size_t> order(ds.logs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    auto full_loss = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < ds.logs.size(); ++i) {
            const auto& t = ds.logs[i];
            const double p = m.predict(m.ability_table().col(static_cast<Eigen::Index>(col_of_row[i])),
                                       t.question);
            s -= t.correct ? std::log(p) : std::log1p(-p);
        }
        return s / static_cast<double>(ds.logs.size());
    };

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
            zero_grads(spans);
            const double inv_b = 1.0 / static_cast<double>(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const auto& t = ds.logs[order[i]];
                const auto col = static_cast<Eigen::Index>(col_of_row[order[i]]);
                const Vec theta = m.ability_table().col(col);
                const double p = m.predict(theta, t.question);
                const double dldp = (t.correct ? -1.0 / p : 1.0 / (1.0 - p)) * inv_b;
                if (kind == CdmKind::Irt) {
                    ability_grad(0, col) += m.irt_items().backward(theta[0], t.question, dldp);
                } else {
                    ability_grad.col(col) += m.ncd_items().backward(theta, t.question, dldp);
                }
            }
            opt.step(spans);
            m.clamp_invariants();
        }
        const double loss = full_loss();
        if (!std::isfinite(loss)) {
            throw RuntimeFailure("pretraining diverged at epoch " + std::to_string(epoch));
        }
        res.epoch_loss.push_back(loss);
    }
    return res;
}

// Fixed-budget clipped gradient ascent on the response log-likelihood.
inline Vec update_ability_mle(const CdmModel& m, Vec theta, const std::vector<Answer>& evidence,
                              const MleConfig& cfg) {
    for (int s = 0; s < cfg.steps; ++s) {
        theta += cfg.lr * clip_norm(m.loglik_grad(theta, evidence), cfg.clip);
    }
    if (!all_finite(theta)) throw RuntimeFailure("ability update produced non-finite values");
    return theta;
}

struct FitConfig {
    int steps = 300;
    double lr = 0.05;
    double clip = 5.0;
};

// Per-examinee ability fit with frozen item parameters (the test-time upper
// bound initializer and the target-side fit both use this).
inline std::map<ExamineeId, Vec> fit_abilities(const CdmModel& m, const std::vector<ResponseTriple>& logs,
                                               const FitConfig& cfg = {}) {
    std::map<ExamineeId, std::vector<Answer>> grouped;
    for (const auto& t : logs) grouped[t.examinee].push_back({t.question, t.correct});
    std::map<ExamineeId, Vec> out;
    for (const auto& [e, ev] : grouped) {
        Vec theta = Vec::Zero(m.ability_dim());
        for (int s = 0; s < cfg.steps; ++s) {
            theta += cfg.lr * clip_norm(m.loglik_grad(theta, ev), cfg.clip);
        }
        if (!all_finite(theta)) throw RuntimeFailure("ability fit produced non-finite values");
        out.emplace(e, std::move(theta));
    }
    return out;
}

}  // namespace dcsr
