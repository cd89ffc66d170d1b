#pragma once
// Rank metrics over held-out responses, the initializer x policy x budget
// experiment grid, and deterministic report / embedding emission.
//
// File formats (all LF, full-precision doubles via %.17g):
//   report json:  fixed key order, 2-space indent, hashes as 16-digit hex
//   report text:  fixed-width table, metrics to 4 decimals
//   embeddings:   headerless CSV, examinee_id,initializer,v0,v1,...

#include "dcsr/catsim.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace dcsr {

// Shortest-ish decimal that parses back to the same double.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// --- rank metrics ----------------------------------------------------------

// Mann-Whitney AUC; tied scores share their average rank.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) {
        throw ValidationError("auc needs one label per score, have " + std::to_string(scores.size()) +
                              " scores and " + std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw ValidationError("auc labels must be 0 or 1");
        n_pos += static_cast<std::size_t>(l);
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw ValidationError("auc is undefined when only one class is present");
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double shared = 0.5 * static_cast<double>(i + j) + 1.0;  // mean of 1-based ranks i+1..j+1
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = shared;
        i = j + 1;
    }

    double rank_sum_pos = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        if (labels[k] == 1) rank_sum_pos += rank[k];
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Fraction of thresholded predictions that match; score == threshold counts as 1.
inline double acc(const std::vector<double>& scores, const std::vector<int>& labels,
                  double threshold = 0.5) {
    if (scores.size() != labels.size()) {
        throw ValidationError("acc needs one label per score, have " + std::to_string(scores.size()) +
                              " scores and " + std::to_string(labels.size()) + " labels");
    }
    if (scores.empty()) throw ValidationError("acc needs at least one prediction");
    std::size_t hits = 0;
    for (std::size_t k = 0; k < scores.size(); ++k) {
        const int pred = scores[k] >= threshold ? 1 : 0;
        if (pred == labels[k]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(scores.size());
}

// --- experiment grid ---------------------------------------------------------

struct GridCell {
    InitKind init{};
    PolicyKind policy{};
    int steps = 0;
};

struct CellMetrics {
    GridCell cell;
    double auc_value = 0.0;
    double acc_value = 0.0;
    std::size_t n_responses = 0;  // pooled held-out answers behind the metrics
    std::size_t n_examinees = 0;
    std::size_t n_truncated = 0;  // sessions that ran out of pool before this budget
};

struct GridConfig {
    std::vector<InitKind> inits{InitKind::Random};
    std::vector<PolicyKind> policies{PolicyKind::Random};
    std::vector<int> steps{1, 5};
    std::uint64_t seed = 0;
    MleConfig mle{};
    std::uint64_t extra_hash = 0;  // upstream config identity, folded into the report hash

    void check() const {
        if (inits.empty()) throw ValidationError("grid needs at least one initializer");
        if (policies.empty()) throw ValidationError("grid needs at least one policy");
        if (steps.empty()) throw ValidationError("grid needs at least one step budget");
        for (int s : steps) {
            if (s < 0) throw ValidationError("step budgets must be >= 0, got " + std::to_string(s));
        }
    }

    std::uint64_t hash() const {
        Fnv64 h;
        for (InitKind k : inits) h.update_u64(static_cast<std::uint64_t>(k));
        h.update_u64(0xA0);
        for (PolicyKind p : policies) h.update_u64(static_cast<std::uint64_t>(p));
        h.update_u64(0xA1);
        for (int s : steps) h.update_u64(static_cast<std::uint64_t>(s));
        h.update_u64(0xA2);
        h.update_u64(seed);
        h.update_u64(static_cast<std::uint64_t>(mle.steps));
        h.update_doubles(&mle.lr, 1);
        h.update_doubles(&mle.clip, 1);
        h.update_u64(extra_hash);
        return h.digest();
    }
};

struct MetricReport {
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    CdmKind kind{};
    DomainId target = 0;
    std::vector<CellMetrics> cells;  // init-major, then policy, then budget
};

// Runs every cold examinee once per (initializer, policy) at the largest budget
// and reads each smaller budget off the recorded trajectory, so all cells of a
// sweep share sessions. Metrics pool the held-out answers across examinees.
inline MetricReport run_grid(const SimContext& ctx, const std::vector<ResponseTriple>& test_logs,
                             const GridConfig& cfg) {
    cfg.check();
    if (!ctx.target) throw ValidationError("grid evaluation needs a target model");
    for (InitKind k : cfg.inits) {
        if (k == InitKind::Dcsr && !ctx.artifact) {
            throw ValidationError("the grid has a dcsr cell but no trained artifact was provided");
        }
        if (k == InitKind::Oracle && !ctx.oracle) {
            throw ValidationError("the grid has an oracle cell but no fitted abilities were provided");
        }
    }

    std::vector<ExamineeId> cold;
    for (const ResponseTriple& t : test_logs) cold.push_back(t.examinee);
    std::sort(cold.begin(), cold.end());
    cold.erase(std::unique(cold.begin(), cold.end()), cold.end());
    if (cold.empty()) throw ValidationError("no test logs to evaluate");

    const int budget = *std::max_element(cfg.steps.begin(), cfg.steps.end());

    MetricReport report;
    report.seed = cfg.seed;
    report.kind = ctx.target->kind();
    report.target = ctx.target->domain();
    {
        Fnv64 h;
        h.update_u64(cfg.hash());
        h.update_u64(static_cast<std::uint64_t>(report.kind));
        h.update_u64(report.target);
        report.config_hash = h.digest();
    }

    for (InitKind init : cfg.inits) {
        for (PolicyKind policy : cfg.policies) {
            std::vector<SessionRecord> records;
            records.reserve(cold.size());
            for (ExamineeId e : cold) {
                records.push_back(run_session(e, init, policy, ctx, test_logs, budget,
                                              cfg.seed, cfg.mle));
            }
            for (int k : cfg.steps) {
                CellMetrics cell;
                cell.cell = {init, policy, k};
                cell.n_examinees = records.size();
                std::vector<double> scores;
                std::vector<int> labels;
                for (const SessionRecord& rec : records) {
                    const std::size_t last = rec.trajectory.size() - 1;
                    const std::size_t idx = std::min(static_cast<std::size_t>(k), last);
                    if (idx < static_cast<std::size_t>(k)) ++cell.n_truncated;
                    for (const Answer& a : rec.eval_rows) {
                        scores.push_back(ctx.target->predict(rec.trajectory[idx], a.question));
                        labels.push_back(a.correct);
                    }
                }
                cell.n_responses = scores.size();
                cell.auc_value = auc(scores, labels);
                cell.acc_value = acc(scores, labels);
                report.cells.push_back(cell);
            }
        }
    }
    return report;
}

// --- report emission ---------------------------------------------------------

inline void write_report_json(const MetricReport& r, std::ostream& out) {
    out << "{\n";
    out << "  \"config_hash\": \"" << hex64(r.config_hash) << "\",\n";
    out << "  \"seed\": " << r.seed << ",\n";
    out << "  \"model_kind\": \"" << to_string(r.kind) << "\",\n";
    out << "  \"target_domain\": " << r.target << ",\n";
    out << "  \"cells\": [";
    for (std::size_t i = 0; i < r.cells.size(); ++i) {
        const CellMetrics& c = r.cells[i];
        out << (i == 0 ? "\n" : ",\n");
        out << "    {\"init\": \"" << to_string(c.cell.init) << "\", \"policy\": \""
            << to_string(c.cell.policy) << "\", \"steps\": " << c.cell.steps
            << ", \"auc\": " << fmt_double(c.auc_value) << ", \"acc\": " << fmt_double(c.acc_value)
            << ", \"responses\": " << c.n_responses << ", \"examinees\": " << c.n_examinees
            << ", \"truncated\": " << c.n_truncated << "}";
    }
    out << (r.cells.empty() ? "]\n" : "\n  ]\n");
    out << "}\n";
}

inline void write_report_text(const MetricReport& r, std::ostream& out) {
    out << "model " << to_string(r.kind) << "  target domain " << r.target << "  seed " << r.seed
        << "  config " << hex64(r.config_hash) << "\n";
    char line[160];
    std::snprintf(line, sizeof line, "%-8s %-8s %6s %8s %8s %10s %10s %10s\n", "init", "policy",
                  "steps", "auc", "acc", "responses", "examinees", "truncated");
    out << line;
    for (const CellMetrics& c : r.cells) {
        std::snprintf(line, sizeof line, "%-8s %-8s %6d %8.4f %8.4f %10zu %10zu %10zu\n",
                      to_string(c.cell.init), to_string(c.cell.policy), c.cell.steps, c.auc_value,
                      c.acc_value, c.n_responses, c.n_examinees, c.n_truncated);
        out << line;
    }
}

inline std::string report_json(const MetricReport& r) {
    std::ostringstream s;
    write_report_json(r, s);
    return s.str();
}

// --- initial-ability embedding dumps ------------------------------------------

struct EmbeddingSet {
    std::string initializer;
    std::vector<ExamineeId> ids;
    Mat table;  // ability_dim x n_examinees, column per id
};

inline void dump_embeddings(const std::vector<EmbeddingSet>& sets, std::ostream& out) {
    for (const EmbeddingSet& s : sets) {
        if (s.table.cols() != static_cast<Eigen::Index>(s.ids.size())) {
            throw ValidationError("embedding table for '" + s.initializer +
                                  "' has " + std::to_string(s.table.cols()) + " columns for " +
                                  std::to_string(s.ids.size()) + " ids");
        }
        if (s.initializer.empty() || s.initializer.find_first_of(",\n") != std::string::npos) {
            throw ValidationError("initializer labels must be non-empty and comma-free");
        }
        for (Eigen::Index c = 0; c < s.table.cols(); ++c) {
            out << s.ids[static_cast<std::size_t>(c)] << ',' << s.initializer;
            for (Eigen::Index d = 0; d < s.table.rows(); ++d) {
                out << ',' << fmt_double(s.table(d, c));
            }
            out << '\n';
        }
    }
}

inline void dump_embeddings(const std::vector<EmbeddingSet>& sets, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw RuntimeFailure("cannot open " + path + " for writing");
    dump_embeddings(sets, f);
    f.flush();
    if (!f) throw RuntimeFailure("write to " + path + " failed");
}

// Rebuilds sets by grouping rows on the initializer label, first appearance first.
inline std::vector<EmbeddingSet> load_embeddings(std::istream& in) {
    struct Raw {
        std::vector<ExamineeId> ids;
        std::vector<Vec> cols;
    };
    std::vector<std::string> order;
    std::map<std::string, Raw> groups;

    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            fields.push_back(line.substr(start, comma == std::string::npos ? comma : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (fields.size() < 3) {
            throw ValidationError("embedding line " + std::to_string(lineno) +
                                  " needs id, initializer and at least one entry");
        }
        Vec v(static_cast<Eigen::Index>(fields.size() - 2));
        char* end = nullptr;
        const unsigned long id = std::strtoul(fields[0].c_str(), &end, 10);
        if (end == fields[0].c_str() || *end != '\0') {
            throw ValidationError("bad examinee id on embedding line " + std::to_string(lineno));
        }
        for (std::size_t k = 2; k < fields.size(); ++k) {
            v[static_cast<Eigen::Index>(k - 2)] = std::strtod(fields[k].c_str(), &end);
            if (end == fields[k].c_str() || *end != '\0') {
                throw ValidationError("bad number on embedding line " + std::to_string(lineno));
            }
        }
        auto [it, fresh] = groups.try_emplace(fields[1]);
        if (fresh) order.push_back(fields[1]);
        if (!it->second.cols.empty() && it->second.cols.front().size() != v.size()) {
            throw ValidationError("embedding dimension changes inside '" + fields[1] + "' on line " +
                                  std::to_string(lineno));
        }
        it->second.ids.push_back(static_cast<ExamineeId>(id));
        it->second.cols.push_back(std::move(v));
    }

    std::vector<EmbeddingSet> sets;
    for (const std::string& name : order) {
        const Raw& raw = groups.at(name);
        EmbeddingSet s;
        s.initializer = name;
        s.ids = raw.ids;
        s.table.resize(raw.cols.front().size(), static_cast<Eigen::Index>(raw.cols.size()));
        for (std::size_t c = 0; c < raw.cols.size(); ++c) {
            s.table.col(static_cast<Eigen::Index>(c)) = raw.cols[c];
        }
        sets.push_back(std::move(s));
    }
    return sets;
}

}  // namespace dcsr
