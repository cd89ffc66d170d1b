#pragma once

// Response-log datasets: CSV loading/saving, cold-start splitting, and the
// synthetic multi-domain generator used by tests and the synth subcommand.
//
// File formats (headerless CSV, LF line endings, base-10 ids):
//   logs:     examinee_id,question_id,correct         correct in {0,1}
//   q-matrix: question_id,concept_id                  one pair per row
// Question and concept ids are dense per domain; examinee ids are global.

#include "dcsr/common.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace dcsr {

struct ResponseTriple {
    ExamineeId examinee = 0;
    QuestionId question = 0;
    std::uint8_t correct = 0;

    bool operator==(const ResponseTriple&) const = default;
};

struct DomainDataset {
    DomainId domain = 0;
    std::uint32_t n_questions = 0;
    std::uint32_t n_concepts = 0;
    std::vector<std::vector<ConceptId>> q_matrix;  // indexed by question id
    std::vector<ResponseTriple> logs;

    bool operator==(const DomainDataset&) const = default;
};

struct SplitPlan {
    DomainId target = 0;
    std::vector<DomainId> sources;
    std::vector<ExamineeId> warm;  // sorted
    std::vector<ExamineeId> cold;  // sorted
    std::vector<ExamineeId> excluded;  // eligible-filter rejects, sorted, reported not used
};

namespace detail {

inline bool parse_u32(const std::string& field, std::uint32_t& out) {
    if (field.empty() || field.size() > 10) return false;
    std::uint64_t v = 0;
    for (char c : field) {
        if (c < '0' || c > '9') return false;
        v = v * 10 + static_cast<std::uint64_t>(c - '0');
    }
    if (v > 0xffffffffULL) return false;
    out = static_cast<std::uint32_t>(v);
    return true;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

}  // namespace detail

// Reads `examinee_id,question_id,correct` rows. Zero rows is fine.
inline std::vector<ResponseTriple> read_log_rows(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open log file: " + path.string());
    std::vector<ResponseTriple> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != 3) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                                  ": expected 3 fields, got " + std::to_string(fields.size()));
        }
        ResponseTriple t;
        std::uint32_t correct = 0;
        if (!detail::parse_u32(fields[0], t.examinee) || !detail::parse_u32(fields[1], t.question) ||
            !detail::parse_u32(fields[2], correct)) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                                  ": fields must be non-negative base-10 integers");
        }
        if (correct > 1) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                                  ": correct must be 0 or 1, got " + fields[2]);
        }
        t.correct = static_cast<std::uint8_t>(correct);
        rows.push_back(t);
    }
    return rows;
}

// Reads `question_id,concept_id` rows into a dense per-question concept list.
// Every question id in 0..max must appear at least once.
inline void read_q_matrix(const std::filesystem::path& path, std::vector<std::vector<ConceptId>>& q_matrix,
                          std::uint32_t& n_questions, std::uint32_t& n_concepts) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open q-matrix file: " + path.string());
    std::vector<std::pair<QuestionId, ConceptId>> pairs;
    std::string line;
    std::size_t lineno = 0;
    std::uint32_t max_q = 0, max_c = 0;
    bool any = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != 2) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                                  ": expected 2 fields, got " + std::to_string(fields.size()));
        }
        QuestionId q;
        ConceptId c;
        if (!detail::parse_u32(fields[0], q) || !detail::parse_u32(fields[1], c)) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                                  ": fields must be non-negative base-10 integers");
        }
        pairs.emplace_back(q, c);
        max_q = std::max(max_q, q);
        max_c = std::max(max_c, c);
        any = true;
    }
    if (!any) throw ValidationError(path.string() + ": q-matrix is empty");
    n_questions = max_q + 1;
    n_concepts = max_c + 1;
    q_matrix.assign(n_questions, {});
    for (const auto& [q, c] : pairs) q_matrix[q].push_back(c);
    for (std::uint32_t q = 0; q < n_questions; ++q) {
        auto& cs = q_matrix[q];
        if (cs.empty()) {
            throw ValidationError(path.string() + ": question id " + std::to_string(q) +
                                  " missing from q-matrix (ids must be dense)");
        }
        std::sort(cs.begin(), cs.end());
        cs.erase(std::unique(cs.begin(), cs.end()), cs.end());
    }
}

// Sibling naming convention: the q-matrix for X_logs.csv lives in X_qmatrix.csv.
inline std::filesystem::path q_matrix_path_for(const std::filesystem::path& logs_path) {
    std::string name = logs_path.filename().string();
    const auto pos = name.rfind("logs");
    if (pos == std::string::npos) {
        throw ValidationError("cannot derive q-matrix path from '" + logs_path.string() +
                              "': filename does not contain 'logs'");
    }
    name.replace(pos, 4, "qmatrix");
    return logs_path.parent_path() / name;
}

inline DomainDataset load_domain_files(const std::filesystem::path& logs_path,
                                       const std::filesystem::path& qmatrix_path, DomainId domain) {
    DomainDataset ds;
    ds.domain = domain;
    read_q_matrix(qmatrix_path, ds.q_matrix, ds.n_questions, ds.n_concepts);
    ds.logs = read_log_rows(logs_path);
    for (std::size_t i = 0; i < ds.logs.size(); ++i) {
        if (ds.logs[i].question >= ds.n_questions) {
            throw ValidationError(logs_path.string() + ": row " + std::to_string(i + 1) +
                                  " references question " + std::to_string(ds.logs[i].question) +
                                  " missing from q-matrix");
        }
    }
    return ds;
}

inline DomainDataset load_logs(const std::filesystem::path& logs_path, DomainId domain) {
    return load_domain_files(logs_path, q_matrix_path_for(logs_path), domain);
}

inline void save_domain(const DomainDataset& ds, const std::filesystem::path& logs_path,
                        const std::filesystem::path& qmatrix_path) {
    {
        std::ofstream out(logs_path, std::ios::binary);
        if (!out) throw RuntimeFailure("cannot write " + logs_path.string());
        for (const auto& t : ds.logs) {
            out << t.examinee << ',' << t.question << ',' << static_cast<unsigned>(t.correct) << '\n';
        }
    }
    {
        std::ofstream out(qmatrix_path, std::ios::binary);
        if (!out) throw RuntimeFailure("cannot write " + qmatrix_path.string());
        for (QuestionId q = 0; q < ds.n_questions; ++q) {
            for (ConceptId c : ds.q_matrix[q]) out << q << ',' << c << '\n';
        }
    }
}

inline std::map<ExamineeId, std::size_t> count_logs_per_examinee(const DomainDataset& ds) {
    std::map<ExamineeId, std::size_t> counts;
    for (const auto& t : ds.logs) ++counts[t.examinee];
    return counts;
}

// Picks the cold cohort for one target domain. Eligible examinees have at
// least min_logs responses in the target and in at least one source domain;
// everyone else lands in `excluded`. Cold count is round(ratio * eligible),
// clamped so both cohorts stay non-empty.
inline SplitPlan split_cold_start(const std::vector<DomainDataset>& datasets, DomainId target, double ratio,
                                  std::uint64_t seed, std::size_t min_logs = 1) {
    if (ratio <= 0.0 || ratio >= 1.0) throw ValidationError("cold ratio must lie in (0,1)");
    if (min_logs == 0) min_logs = 1;  // an examinee with no logs at all is never eligible
    const DomainDataset* target_ds = nullptr;
    SplitPlan plan;
    plan.target = target;
    for (const auto& ds : datasets) {
        if (ds.domain == target) {
            target_ds = &ds;
        } else {
            plan.sources.push_back(ds.domain);
        }
    }
    if (target_ds == nullptr) throw ValidationError("target domain not present in datasets");
    if (plan.sources.empty()) throw ValidationError("need at least one source domain");

    const auto target_counts = count_logs_per_examinee(*target_ds);
    std::map<ExamineeId, std::size_t> best_source_counts;
    for (const auto& ds : datasets) {
        if (ds.domain == target) continue;
        for (const auto& [e, n] : count_logs_per_examinee(ds)) {
            auto& cur = best_source_counts[e];
            cur = std::max(cur, n);
        }
    }

    std::vector<ExamineeId> eligible;
    std::set<ExamineeId> seen;
    for (const auto& [e, n] : target_counts) seen.insert(e);
    for (const auto& [e, n] : best_source_counts) seen.insert(e);
    for (ExamineeId e : seen) {
        const auto it_t = target_counts.find(e);
        const auto it_s = best_source_counts.find(e);
        const bool ok = it_t != target_counts.end() && it_t->second >= min_logs &&
                        it_s != best_source_counts.end() && it_s->second >= min_logs;
        if (ok) {
            eligible.push_back(e);
        } else {
            plan.excluded.push_back(e);
        }
    }
    if (eligible.size() < 2) {
        throw ValidationError("cold-start split needs at least 2 eligible examinees, have " +
                              std::to_string(eligible.size()));
    }

    std::size_t n_cold = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(eligible.size())));
    n_cold = std::clamp<std::size_t>(n_cold, 1, eligible.size() - 1);

    Rng rng(derive_seed(seed, 5));
    rng.shuffle(eligible);
    plan.cold.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(n_cold));
    plan.warm.assign(eligible.begin() + static_cast<std::ptrdiff_t>(n_cold), eligible.end());
    std::sort(plan.cold.begin(), plan.cold.end());
    std::sort(plan.warm.begin(), plan.warm.end());
    return plan;
}

struct SyntheticConfig {
    std::uint32_t n_examinees = 100;
    std::uint32_t n_domains = 2;
    std::uint32_t items_per_domain = 20;
    std::uint32_t shared_dim = 4;       // latent trait dim k
    double specific_noise = 0.3;        // sigma of the per-domain ability offset
    std::uint64_t seed = 0;
};

struct GroundTruth {
    Mat z;                      // n_examinees x k shared latents
    std::vector<Mat> theta;     // per domain: n_examinees x k true abilities
    std::vector<Vec> readout;   // per domain: w_d, unit norm
    std::vector<Vec> disc;      // per domain: item discriminations
    std::vector<Vec> diff;      // per domain: item difficulties
};

struct SyntheticData {
    std::vector<DomainDataset> datasets;
    GroundTruth truth;
};

// Multi-domain generator. Shared latent z_i drives every domain through an
// orthogonal mixing A_d plus isotropic domain noise; responses follow a 2PL
// on the scalar readout w_d . theta. Readouts are aligned across domains
// (w_d = A_d v for one shared v), so cross-domain skill correlation is exactly
// 1 at specific_noise = 0 and decays as 1/(1+sigma^2).
inline SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
    if (cfg.n_examinees < 2) throw ValidationError("synthetic: need at least 2 examinees");
    if (cfg.n_domains < 2) throw ValidationError("synthetic: need at least 2 domains");
    if (cfg.items_per_domain == 0 || cfg.shared_dim == 0) {
        throw ValidationError("synthetic: items_per_domain and shared_dim must be positive");
    }
    if (cfg.specific_noise < 0.0) throw ValidationError("synthetic: specific_noise must be >= 0");

    const auto n = static_cast<Eigen::Index>(cfg.n_examinees);
    const auto k = static_cast<Eigen::Index>(cfg.shared_dim);
    Rng rng(derive_seed(cfg.seed, 0));

    SyntheticData out;
    out.truth.z = Mat(n, k);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < k; ++j) out.truth.z(i, j) = rng.normal();

    Vec v = rng.normal_vec(k);
    v.normalize();

    for (std::uint32_t d = 0; d < cfg.n_domains; ++d) {
        Mat g(k, k);
        for (Eigen::Index i = 0; i < k; ++i)
            for (Eigen::Index j = 0; j < k; ++j) g(i, j) = rng.normal();
        Eigen::HouseholderQR<Mat> qr(g);
        Mat a = qr.householderQ() * Mat::Identity(k, k);
        Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
        for (Eigen::Index j = 0; j < k; ++j)
            if (r(j, j) < 0.0) a.col(j) = -a.col(j);

        Mat theta(n, k);
        for (Eigen::Index i = 0; i < n; ++i) {
            Vec u(k);
            for (Eigen::Index j = 0; j < k; ++j) u[j] = cfg.specific_noise * rng.normal();
            theta.row(i) = (a * out.truth.z.row(i).transpose() + u).transpose();
        }
        Vec w = a * v;

        const auto m = static_cast<Eigen::Index>(cfg.items_per_domain);
        // domain 0 plays the young course: its bank is lightly calibrated, the
        // later domains are mature with sharper items
        Vec disc(m), diff(m);
        for (Eigen::Index j = 0; j < m; ++j) {
            disc[j] = d == 0 ? rng.uniform(0.35, 0.9) : rng.uniform(0.8, 2.0);
            diff[j] = rng.normal();
        }

        DomainDataset ds;
        ds.domain = d;
        ds.n_questions = cfg.items_per_domain;
        ds.n_concepts = cfg.shared_dim;
        ds.q_matrix.resize(cfg.items_per_domain);
        const std::uint32_t max_tag = std::min<std::uint32_t>(3, cfg.shared_dim);
        for (std::uint32_t q = 0; q < cfg.items_per_domain; ++q) {
            const std::uint32_t n_tags = 1 + static_cast<std::uint32_t>(rng.below(max_tag));
            std::set<ConceptId> tags;
            while (tags.size() < n_tags) tags.insert(static_cast<ConceptId>(rng.below(cfg.shared_dim)));
            ds.q_matrix[q].assign(tags.begin(), tags.end());
        }

        ds.logs.reserve(static_cast<std::size_t>(n) * cfg.items_per_domain);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double skill = w.dot(theta.row(i));
            for (Eigen::Index j = 0; j < m; ++j) {
                const double p = sigmoid(disc[j] * (skill - diff[j]));
                ResponseTriple t;
                t.examinee = static_cast<ExamineeId>(i);
                t.question = static_cast<QuestionId>(j);
                t.correct = rng.uniform() < p ? 1 : 0;
                ds.logs.push_back(t);
            }
        }

        out.truth.theta.push_back(std::move(theta));
        out.truth.readout.push_back(std::move(w));
        out.truth.disc.push_back(std::move(disc));
        out.truth.diff.push_back(std::move(diff));
        out.datasets.push_back(std::move(ds));
    }
    return out;
}

// Leak-free training view derived from a split: warm examinees' target logs,
// all eligible examinees' source logs, and the cold examinees' target logs as
// the held-back test pool.
struct TrainPartition {
    DomainDataset target_warm;              // target domain, warm examinees only
    std::vector<DomainDataset> sources;     // source domains, warm+cold examinees
    std::vector<ResponseTriple> test_logs;  // target domain, cold examinees
};

inline TrainPartition make_partition(const std::vector<DomainDataset>& datasets, const SplitPlan& plan) {
    TrainPartition part;
    const std::set<ExamineeId> warm(plan.warm.begin(), plan.warm.end());
    const std::set<ExamineeId> cold(plan.cold.begin(), plan.cold.end());
    for (const auto& ds : datasets) {
        if (ds.domain == plan.target) {
            part.target_warm = ds;
            part.target_warm.logs.clear();
            for (const auto& t : ds.logs) {
                if (warm.count(t.examinee)) part.target_warm.logs.push_back(t);
                else if (cold.count(t.examinee)) part.test_logs.push_back(t);
            }
        } else {
            DomainDataset s = ds;
            s.logs.clear();
            for (const auto& t : ds.logs) {
                if (warm.count(t.examinee) || cold.count(t.examinee)) s.logs.push_back(t);
            }
            part.sources.push_back(std::move(s));
        }
    }
    return part;
}

}  // namespace dcsr
