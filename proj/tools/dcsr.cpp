// Command-line driver wiring the pipeline end to end:
//
//   synth     write the synthetic multi-domain dataset
//   pretrain  fit one diagnosis model per domain (target on warm logs only)
//   train     joint diffusion + cognition-stack training, emits one artifact
//   simulate  run one initializer/policy cell over every cold examinee
//   eval      run the configured grid, emit reports and initial-ability dumps
//
// Stages communicate only through declared files; every emitted file carries
// the config hash and seed that produced it. Nothing here writes timestamps,
// so a rerun with identical inputs reproduces identical bytes.
//
// Exit codes: 0 ok, 1 usage, 2 invalid input or config, 3 runtime failure.

#include "dcsr/config.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

using namespace dcsr;

fs::path logs_file(const fs::path& dir, DomainId d) {
    return dir / ("domain" + std::to_string(d) + ".logs.csv");
}
fs::path qmatrix_file(const fs::path& dir, DomainId d) {
    return dir / ("domain" + std::to_string(d) + ".qmatrix.csv");
}
fs::path model_file(const fs::path& dir, DomainId d) {
    return dir / ("model_d" + std::to_string(d) + ".bin");
}
fs::path artifact_file(const fs::path& dir) { return dir / "dcsr.bin"; }

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << text;
    out.flush();
    if (!out) throw RuntimeFailure("write to " + path.string() + " failed");
}

template <class Emit>
void write_binary_file(const fs::path& path, Emit&& emit) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    emit(out);
    out.flush();
    if (!out) throw RuntimeFailure("write to " + path.string() + " failed");
}

std::ifstream open_binary(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeFailure("cannot open " + path.string());
    return in;
}

std::vector<DomainDataset> load_world(const RunConfig& cfg) {
    const fs::path dir = cfg.paths.data_dir;
    std::vector<DomainDataset> out;
    for (DomainId d = 0; d < cfg.synth.n_domains; ++d) {
        out.push_back(load_domain_files(logs_file(dir, d), qmatrix_file(dir, d), d));
    }
    return out;
}

// Split plus partition, restricted to the configured source domains. The split
// seed derives from the config seed alone so the warm/cold cohorts stay glued
// to the models that were pretrained on them.
TrainPartition build_partition(const RunConfig& cfg, const std::vector<DomainDataset>& datasets) {
    const SplitPlan plan =
        split_cold_start(datasets, cfg.target, cfg.cold_ratio, derive_seed(cfg.seed, kStageSplit));
    TrainPartition part = make_partition(datasets, plan);
    const std::vector<DomainId> keep = cfg.source_ids();
    std::vector<DomainDataset> kept;
    for (auto& ds : part.sources) {
        if (std::find(keep.begin(), keep.end(), ds.domain) != keep.end()) {
            kept.push_back(std::move(ds));
        }
    }
    part.sources = std::move(kept);
    return part;
}

struct LoadedModels {
    CdmModel target;
    std::vector<CdmModel> sources;

    std::vector<const CdmModel*> source_ptrs() const {
        std::vector<const CdmModel*> out;
        for (const CdmModel& m : sources) out.push_back(&m);
        return out;
    }
};

LoadedModels load_models(const RunConfig& cfg) {
    const fs::path dir = cfg.paths.artifact_dir;
    auto tin = open_binary(model_file(dir, cfg.target));
    LoadedModels out{CdmModel::load(tin), {}};
    for (DomainId d : cfg.source_ids()) {
        auto in = open_binary(model_file(dir, d));
        out.sources.push_back(CdmModel::load(in));
    }
    return out;
}

// --- subcommands -------------------------------------------------------------

void cmd_synth(const RunConfig& cfg) {
    SyntheticConfig sc = cfg.synth;
    sc.seed = derive_seed(cfg.seed, kStageSynth);
    const SyntheticData syn = generate_synthetic(sc);

    const fs::path dir = cfg.paths.data_dir;
    fs::create_directories(dir);
    nlohmann::json files = nlohmann::json::array();
    for (DomainId d = 0; d < cfg.synth.n_domains; ++d) {
        save_domain(syn.datasets[d], logs_file(dir, d), qmatrix_file(dir, d));
        files.push_back(logs_file(dir, d).filename().string());
        files.push_back(qmatrix_file(dir, d).filename().string());
    }

    nlohmann::json manifest{
        {"stage", "synth"},
        {"config_hash", hex64(cfg.hash())},
        {"seed", cfg.seed},
        {"domains", cfg.synth.n_domains},
        {"examinees", cfg.synth.n_examinees},
        {"files", files},
    };
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
    std::cout << "wrote " << cfg.synth.n_domains << " domains to " << dir.string() << "\n";
}

void cmd_pretrain(const RunConfig& cfg) {
    const std::vector<DomainDataset> datasets = load_world(cfg);
    const TrainPartition part = build_partition(cfg, datasets);

    const fs::path dir = cfg.paths.artifact_dir;
    fs::create_directories(dir);
    nlohmann::json models = nlohmann::json::array();

    const auto fit_and_save = [&](const DomainDataset& ds) {
        PretrainConfig pc = cfg.pretrain_cfg;
        pc.seed = derive_seed(derive_seed(cfg.seed, kStagePretrain), ds.domain);
        const CdmModel model = pretrain(ds, cfg.kind, pc).model;
        const fs::path path = model_file(dir, ds.domain);
        write_binary_file(path, [&](std::ostream& o) { model.save(o); });
        models.push_back({{"domain", ds.domain},
                          {"file", path.filename().string()},
                          {"checksum", hex64(cdm_checksum(model))}});
        std::cout << "domain " << ds.domain << ": " << ds.logs.size() << " logs -> "
                  << path.string() << "\n";
    };

    fit_and_save(part.target_warm);
    for (const DomainDataset& ds : part.sources) fit_and_save(ds);

    nlohmann::json manifest{
        {"stage", "pretrain"},
        {"config_hash", hex64(cfg.hash())},
        {"seed", cfg.seed},
        {"kind", to_string(cfg.kind)},
        {"models", models},
    };
    write_text_file(dir / "pretrain.json", manifest.dump(2) + "\n");
}

void cmd_train(const RunConfig& cfg) {
    const std::vector<DomainDataset> datasets = load_world(cfg);
    const TrainPartition part = build_partition(cfg, datasets);
    const LoadedModels models = load_models(cfg);

    HcmConfig hc = cfg.train_cfg;
    hc.seed = derive_seed(cfg.seed, kStageTrain);
    hc.config_hash = cfg.hash();
    const DcsrArtifact art = train_dcsr(part, models.target, models.source_ptrs(), hc);

    const fs::path dir = cfg.paths.artifact_dir;
    fs::create_directories(dir);
    const fs::path path = artifact_file(dir);
    write_binary_file(path, [&](std::ostream& o) { art.save(o); });

    nlohmann::json manifest{
        {"stage", "train"},
        {"config_hash", hex64(cfg.hash())},
        {"seed", cfg.seed},
        {"artifact", path.filename().string()},
        {"checksum", hex64(art.checksum())},
    };
    write_text_file(dir / "train.json", manifest.dump(2) + "\n");

    const EpochStats& first = art.history.front();
    const EpochStats& last = art.history.back();
    std::cout << "trained " << art.history.size() << " epochs, loss " << first.total << " -> "
              << last.total << ", artifact " << path.string() << "\n";
}

// Context shared by simulate and eval: models, artifact and oracle fit are
// loaded only when some requested cell needs them.
struct EvalWorld {
    TrainPartition part;
    LoadedModels models;
    std::optional<DcsrArtifact> artifact;
    std::map<ExamineeId, Vec> oracle;

    SimContext ctx() const {
        SimContext c;
        c.target = &models.target;
        c.sources = models.source_ptrs();
        if (artifact) c.artifact = &*artifact;
        c.oracle = &oracle;
        return c;
    }
};

EvalWorld load_eval_world(const RunConfig& cfg, const GridConfig& grid, const fs::path& artifact_path) {
    EvalWorld w{build_partition(cfg, load_world(cfg)), load_models(cfg), {}, {}};
    bool wants_dcsr = false, wants_oracle = false;
    for (InitKind k : grid.inits) {
        wants_dcsr |= k == InitKind::Dcsr;
        wants_oracle |= k == InitKind::Oracle;
    }
    if (wants_dcsr) {
        auto in = open_binary(artifact_path);
        w.artifact = DcsrArtifact::load(in);
    }
    if (wants_oracle) w.oracle = make_oracle(w.models.target, w.part.test_logs);
    return w;
}

// Initial abilities per requested initializer, one column per cold examinee,
// reproducing exactly the values the sessions start from.
std::vector<EmbeddingSet> initial_abilities(const EvalWorld& w, const GridConfig& grid) {
    std::vector<ExamineeId> cold;
    for (const ResponseTriple& t : w.part.test_logs) cold.push_back(t.examinee);
    std::sort(cold.begin(), cold.end());
    cold.erase(std::unique(cold.begin(), cold.end()), cold.end());

    const Eigen::Index dim = w.models.target.ability_dim();
    std::vector<EmbeddingSet> sets;
    for (InitKind k : grid.inits) {
        EmbeddingSet s;
        s.initializer = to_string(k);
        s.ids = cold;
        s.table.resize(dim, static_cast<Eigen::Index>(cold.size()));
        for (std::size_t i = 0; i < cold.size(); ++i) {
            const ExamineeId e = cold[i];
            Vec v;
            switch (k) {
                case InitKind::Random: {
                    Rng r(derive_seed(derive_seed(grid.seed, 9), e));
                    v = random_init(dim, r);
                    break;
                }
                case InitKind::Dcsr:
                    v = dcsr_init(*w.artifact, e, w.models.source_ptrs(), w.models.target,
                                  grid.seed);
                    break;
                case InitKind::Oracle:
                    v = w.oracle.at(e);
                    break;
            }
            s.table.col(static_cast<Eigen::Index>(i)) = v;
        }
        sets.push_back(std::move(s));
    }
    return sets;
}

void cmd_simulate(const RunConfig& cfg, const std::string& init_name, const std::string& policy_name,
                  int steps, std::uint64_t session_seed, const fs::path& artifact_path,
                  const fs::path& out_path) {
    if (steps < 0) throw ValidationError("--steps must be >= 0");

    GridConfig grid;
    grid.inits = {detail::parse_init(init_name, "--init")};
    grid.policies = {detail::parse_policy(policy_name, "--policy")};
    grid.steps = {steps};
    grid.seed = session_seed;
    grid.mle = cfg.grid.mle;
    grid.extra_hash = cfg.hash();

    const EvalWorld w = load_eval_world(cfg, grid, artifact_path);
    const MetricReport report = run_grid(w.ctx(), w.part.test_logs, grid);

    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    write_text_file(out_path, report_json(report));
    write_report_text(report, std::cout);
    std::cout << "wrote " << out_path.string() << "\n";
}

void cmd_eval(const RunConfig& cfg, const fs::path& out_dir) {
    GridConfig grid = cfg.grid;
    grid.seed = derive_seed(cfg.seed, kStageSimulate);
    grid.extra_hash = cfg.hash();

    const EvalWorld w = load_eval_world(cfg, grid, artifact_file(cfg.paths.artifact_dir));
    const MetricReport report = run_grid(w.ctx(), w.part.test_logs, grid);

    fs::create_directories(out_dir);
    const std::string tag = hex64(report.config_hash);
    write_text_file(out_dir / ("report-" + tag + ".json"), report_json(report));
    std::ostringstream txt;
    write_report_text(report, txt);
    write_text_file(out_dir / ("report-" + tag + ".txt"), txt.str());
    dump_embeddings(initial_abilities(w, grid), (out_dir / ("embeddings-" + tag + ".csv")).string());

    std::cout << txt.str();
    std::cout << "wrote report-" << tag << ".{json,txt} and embeddings-" << tag << ".csv to "
              << out_dir.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"diffusion-initialized cold-start adaptive testing pipeline"};
    app.require_subcommand(1);

    std::string config_path = "dcsr.json";
    std::optional<std::uint64_t> seed_flag;
    std::string data_dir_flag, artifact_dir_flag;

    const auto add_common = [&](CLI::App* sub, bool with_artifact_dir) {
        sub->add_option("--config", config_path, "run configuration file")
            ->capture_default_str();
        sub->add_option("--seed", seed_flag, "override the config seed");
        sub->add_option("--data-dir", data_dir_flag, "override paths.data_dir");
        if (with_artifact_dir) {
            sub->add_option("--artifact-dir", artifact_dir_flag, "override paths.artifact_dir");
        }
    };

    CLI::App* synth = app.add_subcommand("synth", "generate the synthetic multi-domain dataset");
    add_common(synth, false);
    CLI::App* pretrain_cmd = app.add_subcommand("pretrain", "fit one diagnosis model per domain");
    add_common(pretrain_cmd, true);
    CLI::App* train_cmd = app.add_subcommand("train", "train the generative initializer artifact");
    add_common(train_cmd, true);

    CLI::App* simulate = app.add_subcommand("simulate", "run one grid cell over the cold cohort");
    std::optional<std::uint32_t> sim_target;
    std::string sim_init = "random", sim_policy = "random", sim_out;
    std::string sim_artifact;
    int sim_steps = 5;
    std::optional<std::uint64_t> sim_seed;
    add_common(simulate, true);
    simulate->add_option("--target", sim_target, "target domain (default: config target)");
    simulate->add_option("--init", sim_init, "initializer: random|dcsr|oracle")
        ->capture_default_str();
    simulate->add_option("--policy", sim_policy, "selection policy: random|fisher|emc")
        ->capture_default_str();
    simulate->add_option("--steps", sim_steps, "selections per session")->capture_default_str();
    simulate->add_option("--artifact", sim_artifact,
                         "trained artifact (default: <artifact_dir>/dcsr.bin)");
    simulate->add_option("--out", sim_out, "report file to write")->required();

    CLI::App* eval_cmd = app.add_subcommand("eval", "run the configured experiment grid");
    std::string eval_out;
    eval_cmd->add_option("--grid", config_path, "run configuration file holding the grid")
        ->capture_default_str();
    eval_cmd->add_option("--out", eval_out, "report directory (default: paths.report_dir)");
    eval_cmd->add_option("--data-dir", data_dir_flag, "override paths.data_dir");
    eval_cmd->add_option("--artifact-dir", artifact_dir_flag, "override paths.artifact_dir");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }
    // simulate's --seed scopes the sessions, not the pipeline identity
    if (simulate->parsed() && seed_flag) {
        sim_seed = seed_flag;
        seed_flag.reset();
    }

    try {
        RunConfig cfg = load_run_config(config_path);
        if (seed_flag) cfg.seed = *seed_flag;
        if (simulate->parsed() && sim_target) cfg.target = *sim_target;
        apply_env_overrides(cfg);
        if (!data_dir_flag.empty()) cfg.paths.data_dir = data_dir_flag;
        if (!artifact_dir_flag.empty()) cfg.paths.artifact_dir = artifact_dir_flag;
        cfg.check();

        if (synth->parsed()) {
            cmd_synth(cfg);
        } else if (pretrain_cmd->parsed()) {
            cmd_pretrain(cfg);
        } else if (train_cmd->parsed()) {
            cmd_train(cfg);
        } else if (simulate->parsed()) {
            const fs::path art = sim_artifact.empty() ? artifact_file(cfg.paths.artifact_dir)
                                                      : fs::path(sim_artifact);
            cmd_simulate(cfg, sim_init, sim_policy, sim_steps, sim_seed.value_or(cfg.seed), art,
                         sim_out);
        } else if (eval_cmd->parsed()) {
            const fs::path out = eval_out.empty() ? fs::path(cfg.paths.report_dir) : fs::path(eval_out);
            cmd_eval(cfg, out);
        }
        return 0;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const RuntimeFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
