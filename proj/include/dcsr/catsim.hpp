#pragma once

// Offline adaptive-testing simulator. A session owns one examinee: an
// initializer proposes the starting ability, then each step a policy picks a
// question from the remaining candidate pool, the logged answer is replayed,
// and the ability is re-estimated from all evidence so far. The examinee's
// test logs are split once, seeded, into the candidate pool (80%) and a
// held-out evaluation set (20%) that selection never touches, so metrics are
// never computed on questions the session consumed.
//
// Sessions for distinct examinees are independent: every per-examinee random
// stream derives from (seed, examinee), and all shared inputs are immutable.

#include "dcsr/cdm.hpp"
#include "dcsr/common.hpp"
#include "dcsr/data.hpp"
#include "dcsr/hcm.hpp"

#include <algorithm>
#include <map>
#include <string>
#include <vector>

namespace dcsr {

enum class InitKind : std::uint8_t { Random = 0, Dcsr = 1, Oracle = 2 };
enum class PolicyKind : std::uint8_t { Random = 0, Fisher = 1, Emc = 2 };

inline const char* to_string(InitKind k) {
    switch (k) {
        case InitKind::Random: return "random";
        case InitKind::Dcsr: return "dcsr";
        default: return "oracle";
    }
}

inline const char* to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::Random: return "random";
        case PolicyKind::Fisher: return "fisher";
        default: return "emc";
    }
}

// Elementwise mean of the warm examinees' pretrained target abilities.
inline Vec cold_substitute(const CdmModel& warm_target) {
    if (warm_target.ability_ids().empty())
        throw ValidationError("cold substitute needs at least one warm ability");
    return warm_target.mean_ability();
}

// Uninformed start: each coordinate is the logit of a fresh Uniform(0,1) draw.
inline Vec random_init(Eigen::Index dim, Rng& rng) {
    Vec v(dim);
    for (Eigen::Index i = 0; i < dim; ++i) v[i] = logit(rng.uniform());
    return v;
}

// Generative start for a cold examinee: the warm-mean substitute stands in
// for the missing target ability, the shared vector conditions the strided
// sampler, and the chain runs from pure noise. The noise draw depends on the
// seed only, so examinees with identical source abilities start identically.
inline Vec dcsr_init(const DcsrArtifact& art, ExamineeId e,
                     const std::vector<const CdmModel*>& sources, const CdmModel& warm_target,
                     std::uint64_t seed) {
    if (sources.size() != art.source_model_checksums.size())
        throw ValidationError("artifact expects " +
                              std::to_string(art.source_model_checksums.size()) +
                              " source models, got " + std::to_string(sources.size()));
    if (cdm_checksum(warm_target) != art.target_model_checksum)
        throw ValidationError("artifact was trained against a different target model");

    AbilitySet ab;
    ab.target = cold_substitute(warm_target);
    bool any_source = false;
    for (std::size_t m = 0; m < sources.size(); ++m) {
        if (cdm_checksum(*sources[m]) != art.source_model_checksums[m])
            throw ValidationError("artifact was trained against different source models");
        if (sources[m]->has_ability(e)) {
            ab.sources.push_back(sources[m]->ability(e));
            any_source = true;
        } else {
            ab.sources.push_back(sources[m]->mean_ability());
        }
    }
    if (!any_source)
        throw ValidationError("examinee " + std::to_string(e) +
                              " has no source-domain ability to transfer from");

    Rng rng(derive_seed(seed, 7));
    return generate_target_ability(art, ab, GenMode::Fast, rng);
}

// Most informative item under the two-parameter logistic model:
// I_j = a_j^2 p_j (1 - p_j). Ties go to the smallest question id.
inline QuestionId fisher_select(const std::vector<QuestionId>& pool, const Vec& theta,
                                const CdmModel& m) {
    if (m.kind() != CdmKind::Irt)
        throw ValidationError("information-greedy selection is defined for the scalar logistic model only");
    if (pool.empty()) throw ValidationError("selection pool is empty");
    double best = -1.0;
    QuestionId best_q = 0;
    for (QuestionId q : pool) {
        const double a = std::exp(m.irt_items().log_disc[q]);
        const double p = m.predict(theta, q);
        const double info = a * a * p * (1.0 - p);
        if (info > best || (info == best && q < best_q)) {
            best = info;
            best_q = q;
        }
    }
    return best_q;
}

// Expected model change: how far the ability estimate would move under each
// possible answer, weighted by the predicted answer probability. Works for
// any model kind. Ties go to the smallest question id.
inline QuestionId emc_select(const std::vector<QuestionId>& pool, const Vec& theta,
                             const CdmModel& m, const MleConfig& mle = {}) {
    if (pool.empty()) throw ValidationError("selection pool is empty");
    double best = -1.0;
    QuestionId best_q = 0;
    for (QuestionId q : pool) {
        const double p = m.predict(theta, q);
        const Vec up = update_ability_mle(m, theta, {{q, 1}}, mle);
        const Vec dn = update_ability_mle(m, theta, {{q, 0}}, mle);
        const double delta = p * (up - theta).norm() + (1.0 - p) * (dn - theta).norm();
        if (delta > best || (delta == best && q < best_q)) {
            best = delta;
            best_q = q;
        }
    }
    return best_q;
}

struct SessionRecord {
    ExamineeId examinee = 0;
    InitKind init = InitKind::Random;
    PolicyKind policy = PolicyKind::Random;
    bool truncated = false;           // pool ran out before n_steps
    std::vector<QuestionId> selections;
    std::vector<int> responses;       // replayed logged answers
    std::vector<Vec> trajectory;      // theta^0 .. theta^n
    std::vector<Answer> eval_rows;    // held-out rows, sorted by question
    std::vector<double> eval_pred;    // predictions at the final ability
};

// Immutable inputs shared across sessions. Only the pieces an initializer
// actually uses must be present.
struct SimContext {
    const CdmModel* target = nullptr;                   // frozen pretrained target
    std::vector<const CdmModel*> sources;               // generative initializer inputs
    const DcsrArtifact* artifact = nullptr;             // generative initializer
    const std::map<ExamineeId, Vec>* oracle = nullptr;  // abilities fit on the full test logs
};

// Upper-bound initializer inputs: per-examinee abilities fit on the complete
// test logs with the pretrained items frozen.
inline std::map<ExamineeId, Vec> make_oracle(const CdmModel& m,
                                             const std::vector<ResponseTriple>& test_logs,
                                             const FitConfig& cfg = {}) {
    return fit_abilities(m, test_logs, cfg);
}

inline SessionRecord run_session(ExamineeId e, InitKind init, PolicyKind policy,
                                 const SimContext& ctx, const std::vector<ResponseTriple>& test_logs,
                                 int n_steps, std::uint64_t seed, const MleConfig& mle = {}) {
    if (ctx.target == nullptr) throw ValidationError("session needs a target model");
    if (n_steps < 0) throw ValidationError("n_steps must be >= 0");
    const CdmModel& m = *ctx.target;

    // this examinee's rows, first occurrence per question
    std::vector<Answer> rows;
    {
        std::map<QuestionId, bool> seen;
        for (const auto& t : test_logs) {
            if (t.examinee != e) continue;
            if (seen.emplace(t.question, true).second) rows.push_back({t.question, t.correct});
        }
    }
    if (rows.empty())
        throw ValidationError("examinee " + std::to_string(e) + " has no test logs");

    SessionRecord rec;
    rec.examinee = e;
    rec.init = init;
    rec.policy = policy;

    // seeded 80/20 candidate/evaluation split
    Rng split_rng(derive_seed(derive_seed(seed, 8), e));
    std::vector<std::size_t> idx(rows.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    split_rng.shuffle(idx);
    const std::size_t n_pool = rows.size() * 4 / 5;
    std::vector<QuestionId> avail;
    std::map<QuestionId, int> answer;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Answer& a = rows[idx[i]];
        if (i < n_pool) {
            avail.push_back(a.question);
            answer[a.question] = a.correct;
        } else {
            rec.eval_rows.push_back(a);
        }
    }
    std::sort(avail.begin(), avail.end());
    std::sort(rec.eval_rows.begin(), rec.eval_rows.end(),
              [](const Answer& a, const Answer& b) { return a.question < b.question; });

    Vec theta;
    switch (init) {
        case InitKind::Random: {
            Rng irng(derive_seed(derive_seed(seed, 9), e));
            theta = random_init(m.ability_dim(), irng);
            break;
        }
        case InitKind::Dcsr: {
            if (ctx.artifact == nullptr)
                throw ValidationError("generative initializer needs an artifact");
            theta = dcsr_init(*ctx.artifact, e, ctx.sources, m, seed);
            break;
        }
        case InitKind::Oracle: {
            if (ctx.oracle == nullptr)
                throw ValidationError("oracle initializer needs fitted abilities");
            const auto it = ctx.oracle->find(e);
            if (it == ctx.oracle->end())
                throw ValidationError("no fitted ability for examinee " + std::to_string(e));
            theta = it->second;
            break;
        }
    }
    rec.trajectory.push_back(theta);

    Rng policy_rng(derive_seed(derive_seed(seed, 10), e));
    std::vector<Answer> evidence;
    for (int t = 0; t < n_steps; ++t) {
        if (avail.empty()) {
            rec.truncated = true;
            break;
        }
        QuestionId q = 0;
        switch (policy) {
            case PolicyKind::Random:
                q = avail[policy_rng.below(avail.size())];
                break;
            case PolicyKind::Fisher:
                q = fisher_select(avail, theta, m);
                break;
            case PolicyKind::Emc:
                q = emc_select(avail, theta, m, mle);
                break;
        }
        avail.erase(std::find(avail.begin(), avail.end(), q));
        const int r = answer.at(q);
        evidence.push_back({q, static_cast<std::uint8_t>(r)});
        theta = update_ability_mle(m, theta, evidence, mle);
        rec.selections.push_back(q);
        rec.responses.push_back(r);
        rec.trajectory.push_back(theta);
    }

    rec.eval_pred.reserve(rec.eval_rows.size());
    for (const Answer& a : rec.eval_rows) rec.eval_pred.push_back(m.predict(theta, a.question));
    return rec;
}

}  // namespace dcsr
