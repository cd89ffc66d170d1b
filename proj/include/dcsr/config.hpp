#pragma once
// One JSON file drives every subcommand. Parsing is strict: unknown keys are
// rejected recursively and type errors name the offending field, so a typo
// fails before any stage starts. The config hash covers every knob that can
// change results; output locations are deliberately excluded.

#include "dcsr/eval.hpp"
#include "dcsr/hcm.hpp"

#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

namespace dcsr {

// Stage tags for fanning the global seed out via derive_seed, so each stage
// is reproducible on its own and insensitive to the others.
inline constexpr std::uint64_t kStageSynth = 0x51;
inline constexpr std::uint64_t kStageSplit = 0x52;
inline constexpr std::uint64_t kStagePretrain = 0x53;  // folded again with the domain id
inline constexpr std::uint64_t kStageTrain = 0x54;
inline constexpr std::uint64_t kStageSimulate = 0x55;

struct PathsConfig {
    std::string data_dir = "data";
    std::string artifact_dir = "artifacts";
    std::string report_dir = "reports";
};

struct RunConfig {
    std::uint64_t seed = 0;
    PathsConfig paths;

    SyntheticConfig synth;            // synth.seed is ignored; the global seed rules
    DomainId target = 0;
    std::vector<DomainId> sources;    // empty: every other domain, ascending
    double cold_ratio = 0.2;

    CdmKind kind = CdmKind::Irt;
    PretrainConfig pretrain_cfg;      // per-domain seeds derived at use

    HcmConfig train_cfg;              // seed and config_hash stamped at use

    GridConfig grid;                  // seed and extra_hash stamped at use

    std::vector<DomainId> source_ids() const {
        if (!sources.empty()) return sources;
        std::vector<DomainId> out;
        for (DomainId d = 0; d < synth.n_domains; ++d) {
            if (d != target) out.push_back(d);
        }
        return out;
    }

    void check() const {
        if (synth.n_domains < 2) {
            throw ValidationError("need at least 2 domains, one target and one source");
        }
        if (synth.n_examinees < 2) throw ValidationError("need at least 2 examinees");
        if (synth.items_per_domain < 1) throw ValidationError("need at least 1 item per domain");
        if (synth.shared_dim < 1) throw ValidationError("shared_dim must be >= 1");
        if (!(synth.specific_noise >= 0.0)) throw ValidationError("specific_noise must be >= 0");
        if (target >= synth.n_domains) {
            throw ValidationError("target domain " + std::to_string(target) + " does not exist");
        }
        const std::vector<DomainId> src = source_ids();
        if (src.empty()) throw ValidationError("no source domains");
        for (std::size_t i = 0; i < src.size(); ++i) {
            if (src[i] >= synth.n_domains) {
                throw ValidationError("source domain " + std::to_string(src[i]) + " does not exist");
            }
            if (src[i] == target) {
                throw ValidationError("domain " + std::to_string(target) +
                                      " cannot be both target and source");
            }
            if (i > 0 && src[i] <= src[i - 1]) {
                throw ValidationError("source domains must be strictly ascending");
            }
        }
        if (!(cold_ratio > 0.0 && cold_ratio < 1.0)) {
            throw ValidationError("cold_ratio must lie in (0,1)");
        }
        if (pretrain_cfg.epochs < 1 || pretrain_cfg.batch < 1) {
            throw ValidationError("model epochs and batch must be >= 1");
        }
        if (!(pretrain_cfg.lr > 0.0)) throw ValidationError("model lr must be > 0");
        if (pretrain_cfg.ncd_hidden < 1) throw ValidationError("model ncd_hidden must be >= 1");
        train_cfg.check();
        grid.check();
    }

    // Everything that can change numbers, nothing that only changes where
    // files land.
    std::uint64_t hash() const {
        Fnv64 h;
        h.update_u64(seed);
        h.update_u64(synth.n_examinees);
        h.update_u64(synth.n_domains);
        h.update_u64(synth.items_per_domain);
        h.update_u64(synth.shared_dim);
        h.update_doubles(&synth.specific_noise, 1);
        h.update_u64(target);
        for (DomainId d : source_ids()) h.update_u64(d);
        h.update_u64(0xB0);
        h.update_doubles(&cold_ratio, 1);
        h.update_u64(static_cast<std::uint64_t>(kind));
        h.update_u64(static_cast<std::uint64_t>(pretrain_cfg.epochs));
        h.update_u64(static_cast<std::uint64_t>(pretrain_cfg.batch));
        h.update_doubles(&pretrain_cfg.lr, 1);
        h.update_u64(static_cast<std::uint64_t>(pretrain_cfg.ncd_hidden));
        h.update_u64(static_cast<std::uint64_t>(train_cfg.epochs));
        h.update_u64(static_cast<std::uint64_t>(train_cfg.batch));
        h.update_doubles(&train_cfg.lr, 1);
        h.update_u64(static_cast<std::uint64_t>(train_cfg.T));
        h.update_doubles(&train_cfg.beta_start, 1);
        h.update_doubles(&train_cfg.beta_end, 1);
        h.update_u64(static_cast<std::uint64_t>(train_cfg.fast_K));
        h.update_u64(static_cast<std::uint64_t>(train_cfg.task_sample));
        h.update_doubles(&train_cfg.x0_clip, 1);
        h.update_doubles(&train_cfg.hvp_eps, 1);
        h.update_u64(static_cast<std::uint64_t>(train_cfg.denoiser_hidden));
        h.update_doubles(&train_cfg.weights.diffusion, 1);
        h.update_doubles(&train_cfg.weights.shared, 1);
        h.update_doubles(&train_cfg.weights.specific, 1);
        h.update_doubles(&train_cfg.weights.orth, 1);
        h.update_doubles(&train_cfg.weights.consistency, 1);
        h.update_doubles(&train_cfg.weights.task, 1);
        h.update_u64(static_cast<std::uint64_t>(train_cfg.csum.common_dim));
        h.update_u64(static_cast<std::uint64_t>(train_cfg.csum.encoder_hidden));
        h.update_u64(static_cast<std::uint64_t>(train_cfg.csum.fusion_hidden));
        h.update_doubles(&train_cfg.csum.tau, 1);
        GridConfig g = grid;
        g.seed = 0;
        g.extra_hash = 0;
        h.update_u64(g.hash());
        return h.digest();
    }
};

namespace detail {

using Json = nlohmann::json;

[[noreturn]] inline void bad_field(const std::string& path, const std::string& why) {
    throw ValidationError("config field " + path + ": " + why);
}

inline void expect_object(const Json& j, const std::string& path) {
    if (!j.is_object()) bad_field(path, "expected an object");
}

inline void expect_keys(const Json& obj, const std::string& path,
                        std::initializer_list<const char*> allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) {
            if (it.key() == k) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw ValidationError("unknown config key '" + (path.empty() ? it.key() : path + "." + it.key()) + "'");
        }
    }
}

template <class T>
void read_field(const Json& obj, const std::string& path, const char* key, T& out) {
    const auto it = obj.find(key);
    if (it == obj.end()) return;
    try {
        it->get_to(out);
    } catch (const Json::exception& e) {
        bad_field(path.empty() ? key : path + "." + key, e.what());
    }
}

inline CdmKind parse_kind(const std::string& s, const std::string& path) {
    if (s == "irt") return CdmKind::Irt;
    if (s == "ncd") return CdmKind::Ncd;
    bad_field(path, "'" + s + "' is not a model kind (irt, ncd)");
}

inline InitKind parse_init(const std::string& s, const std::string& path) {
    if (s == "random") return InitKind::Random;
    if (s == "dcsr") return InitKind::Dcsr;
    if (s == "oracle") return InitKind::Oracle;
    bad_field(path, "'" + s + "' is not an initializer (random, dcsr, oracle)");
}

inline PolicyKind parse_policy(const std::string& s, const std::string& path) {
    if (s == "random") return PolicyKind::Random;
    if (s == "fisher") return PolicyKind::Fisher;
    if (s == "emc") return PolicyKind::Emc;
    bad_field(path, "'" + s + "' is not a policy (random, fisher, emc)");
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using detail::expect_keys;
    using detail::expect_object;
    using detail::read_field;

    RunConfig cfg;
    expect_object(j, "config");
    expect_keys(j, "", {"seed", "paths", "data", "model", "diffusion", "train", "grid"});
    read_field(j, "", "seed", cfg.seed);

    if (const auto it = j.find("paths"); it != j.end()) {
        expect_object(*it, "paths");
        expect_keys(*it, "paths", {"data_dir", "artifact_dir", "report_dir"});
        read_field(*it, "paths", "data_dir", cfg.paths.data_dir);
        read_field(*it, "paths", "artifact_dir", cfg.paths.artifact_dir);
        read_field(*it, "paths", "report_dir", cfg.paths.report_dir);
    }

    if (const auto it = j.find("data"); it != j.end()) {
        expect_object(*it, "data");
        expect_keys(*it, "data",
                    {"n_examinees", "n_domains", "items_per_domain", "shared_dim",
                     "specific_noise", "target", "sources", "cold_ratio"});
        read_field(*it, "data", "n_examinees", cfg.synth.n_examinees);
        read_field(*it, "data", "n_domains", cfg.synth.n_domains);
        read_field(*it, "data", "items_per_domain", cfg.synth.items_per_domain);
        read_field(*it, "data", "shared_dim", cfg.synth.shared_dim);
        read_field(*it, "data", "specific_noise", cfg.synth.specific_noise);
        read_field(*it, "data", "target", cfg.target);
        read_field(*it, "data", "sources", cfg.sources);
        read_field(*it, "data", "cold_ratio", cfg.cold_ratio);
    }

    if (const auto it = j.find("model"); it != j.end()) {
        expect_object(*it, "model");
        expect_keys(*it, "model", {"kind", "epochs", "batch", "lr", "ncd_hidden"});
        std::string kind = "irt";
        read_field(*it, "model", "kind", kind);
        cfg.kind = detail::parse_kind(kind, "model.kind");
        read_field(*it, "model", "epochs", cfg.pretrain_cfg.epochs);
        read_field(*it, "model", "batch", cfg.pretrain_cfg.batch);
        read_field(*it, "model", "lr", cfg.pretrain_cfg.lr);
        read_field(*it, "model", "ncd_hidden", cfg.pretrain_cfg.ncd_hidden);
    }

    if (const auto it = j.find("diffusion"); it != j.end()) {
        expect_object(*it, "diffusion");
        expect_keys(*it, "diffusion", {"T", "beta_start", "beta_end", "fast_K"});
        read_field(*it, "diffusion", "T", cfg.train_cfg.T);
        read_field(*it, "diffusion", "beta_start", cfg.train_cfg.beta_start);
        read_field(*it, "diffusion", "beta_end", cfg.train_cfg.beta_end);
        read_field(*it, "diffusion", "fast_K", cfg.train_cfg.fast_K);
    }

    if (const auto it = j.find("train"); it != j.end()) {
        expect_object(*it, "train");
        expect_keys(*it, "train",
                    {"epochs", "batch", "lr", "task_sample", "x0_clip", "hvp_eps",
                     "denoiser_hidden", "weights", "csum"});
        read_field(*it, "train", "epochs", cfg.train_cfg.epochs);
        read_field(*it, "train", "batch", cfg.train_cfg.batch);
        read_field(*it, "train", "lr", cfg.train_cfg.lr);
        read_field(*it, "train", "task_sample", cfg.train_cfg.task_sample);
        read_field(*it, "train", "x0_clip", cfg.train_cfg.x0_clip);
        read_field(*it, "train", "hvp_eps", cfg.train_cfg.hvp_eps);
        read_field(*it, "train", "denoiser_hidden", cfg.train_cfg.denoiser_hidden);
        if (const auto w = it->find("weights"); w != it->end()) {
            expect_object(*w, "train.weights");
            expect_keys(*w, "train.weights",
                        {"diffusion", "shared", "specific", "orth", "consistency", "task"});
            read_field(*w, "train.weights", "diffusion", cfg.train_cfg.weights.diffusion);
            read_field(*w, "train.weights", "shared", cfg.train_cfg.weights.shared);
            read_field(*w, "train.weights", "specific", cfg.train_cfg.weights.specific);
            read_field(*w, "train.weights", "orth", cfg.train_cfg.weights.orth);
            read_field(*w, "train.weights", "consistency", cfg.train_cfg.weights.consistency);
            read_field(*w, "train.weights", "task", cfg.train_cfg.weights.task);
        }
        if (const auto c = it->find("csum"); c != it->end()) {
            expect_object(*c, "train.csum");
            expect_keys(*c, "train.csum", {"common_dim", "encoder_hidden", "fusion_hidden", "tau"});
            read_field(*c, "train.csum", "common_dim", cfg.train_cfg.csum.common_dim);
            read_field(*c, "train.csum", "encoder_hidden", cfg.train_cfg.csum.encoder_hidden);
            read_field(*c, "train.csum", "fusion_hidden", cfg.train_cfg.csum.fusion_hidden);
            read_field(*c, "train.csum", "tau", cfg.train_cfg.csum.tau);
        }
    }

    if (const auto it = j.find("grid"); it != j.end()) {
        expect_object(*it, "grid");
        expect_keys(*it, "grid", {"inits", "policies", "steps", "mle"});
        if (it->contains("inits")) {
            std::vector<std::string> names;
            read_field(*it, "grid", "inits", names);
            cfg.grid.inits.clear();
            for (const std::string& n : names) {
                cfg.grid.inits.push_back(detail::parse_init(n, "grid.inits"));
            }
        }
        if (it->contains("policies")) {
            std::vector<std::string> names;
            read_field(*it, "grid", "policies", names);
            cfg.grid.policies.clear();
            for (const std::string& n : names) {
                cfg.grid.policies.push_back(detail::parse_policy(n, "grid.policies"));
            }
        }
        read_field(*it, "grid", "steps", cfg.grid.steps);
        if (const auto m = it->find("mle"); m != it->end()) {
            expect_object(*m, "grid.mle");
            expect_keys(*m, "grid.mle", {"steps", "lr", "clip"});
            read_field(*m, "grid.mle", "steps", cfg.grid.mle.steps);
            read_field(*m, "grid.mle", "lr", cfg.grid.mle.lr);
            read_field(*m, "grid.mle", "clip", cfg.grid.mle.clip);
        }
    }

    cfg.check();
    return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config file " + path.string() + " is not valid json: " + e.what());
    }
    return parse_run_config(j);
}

// DCSR_DATA_DIR beats the config so shared datasets can live outside the tree.
inline void apply_env_overrides(RunConfig& cfg) {
    if (const char* dir = std::getenv("DCSR_DATA_DIR"); dir && *dir) {
        cfg.paths.data_dir = dir;
    }
}

}  // namespace dcsr
