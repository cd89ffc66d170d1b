#include "dcsr/catsim.hpp"

#include "support/oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

using namespace dcsr;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

namespace {

DomainDataset plain_domain(DomainId dom, std::uint32_t n_questions) {
    DomainDataset ds;
    ds.domain = dom;
    ds.n_questions = n_questions;
    ds.n_concepts = 1;
    ds.q_matrix.assign(n_questions, {0});
    return ds;
}

CdmModel scalar_model(DomainId dom, const Vec& log_disc, const Vec& diff, std::uint64_t seed) {
    CdmModel m = CdmModel::fresh(CdmKind::Irt, plain_domain(dom, static_cast<std::uint32_t>(log_disc.size())), 0, seed);
    m.irt_items().log_disc = log_disc;
    m.irt_items().diff = diff;
    return m;
}

// 25 one-parameter items with spread difficulties; one examinee whose answers
// are simulated once from a true ability and then frozen as logs.
struct SoloBench {
    CdmModel model;
    std::vector<ResponseTriple> logs;
    double true_theta;

    explicit SoloBench(double theta_star, std::uint64_t seed) : model(make_model(seed)), true_theta(theta_star) {
        Rng rng(seed + 1);
        for (std::uint32_t q = 0; q < 25; ++q) {
            const double p = sigmoid(theta_star - model.irt_items().diff[q]);
            logs.push_back({0, q, static_cast<std::uint8_t>(rng.uniform() < p ? 1 : 0)});
        }
    }

    static CdmModel make_model(std::uint64_t seed) {
        Rng rng(seed);
        Vec diff(25);
        for (Eigen::Index q = 0; q < 25; ++q) diff[q] = rng.uniform(-2.0, 2.0);
        return scalar_model(0, Vec::Zero(25), diff, seed);
    }
};

}  // namespace

TEST_CASE("the cold substitute is the warm ability mean") {
    CdmModel m = scalar_model(0, Vec::Zero(4), Vec::Zero(4), 3);

    SECTION("empty table is rejected") {
        CHECK_THROWS_AS(cold_substitute(m), ValidationError);
    }

    SECTION("single examinee passes through") {
        Mat table(1, 1);
        table(0, 0) = 0.73;
        m.set_ability_table({5}, table);
        CHECK(cold_substitute(m)[0] == 0.73);
    }

    SECTION("opposite vectors cancel") {
        Mat table(1, 2);
        table(0, 0) = 1.4;
        table(0, 1) = -1.4;
        m.set_ability_table({1, 2}, table);
        CHECK(cold_substitute(m)[0] == 0.0);
    }

    SECTION("mean equals the brute-force sum") {
        Rng rng(9);
        Mat table(1, 7);
        for (Eigen::Index c = 0; c < 7; ++c) table(0, c) = rng.normal();
        m.set_ability_table({0, 1, 2, 3, 4, 5, 6}, table);
        double acc = 0.0;
        for (Eigen::Index c = 0; c < 7; ++c) acc += table(0, c);
        CHECK(cold_substitute(m)[0] == Approx(acc / 7.0).epsilon(1e-12));
    }
}

TEST_CASE("random initial abilities are logits of uniform draws") {
    Rng rng(5);
    const Vec v = random_init(3, rng);
    REQUIRE(v.size() == 3);
    for (Eigen::Index i = 0; i < 3; ++i) {
        CHECK(sigmoid(v[i]) > 0.0);
        CHECK(sigmoid(v[i]) < 1.0);
    }
    Rng again(5);
    CHECK((random_init(3, again) - v).norm() == 0.0);
    Rng other(6);
    CHECK((random_init(3, other) - v).norm() > 0.0);
}

TEST_CASE("information-greedy selection matches brute force and breaks ties downward") {
    SECTION("unit discrimination picks the difficulty nearest the ability") {
        Vec diff(5);
        diff << -1.5, -0.4, 0.3, 1.1, 2.0;
        CdmModel m = scalar_model(0, Vec::Zero(5), diff, 1);
        Vec theta(1);
        theta[0] = 0.4;
        CHECK(fisher_select({0, 1, 2, 3, 4}, theta, m) == 2);
    }

    SECTION("pool of one") {
        CdmModel m = scalar_model(0, Vec::Zero(3), Vec::Zero(3), 1);
        CHECK(fisher_select({2}, Vec::Zero(1), m) == 2);
    }

    SECTION("100 random items match an independent argmax") {
        Rng rng(31);
        Vec log_disc(100), diff(100);
        for (Eigen::Index q = 0; q < 100; ++q) {
            log_disc[q] = rng.uniform(-0.7, 0.9);
            diff[q] = rng.normal();
        }
        CdmModel m = scalar_model(0, log_disc, diff, 2);
        std::vector<QuestionId> pool(100);
        for (std::uint32_t q = 0; q < 100; ++q) pool[q] = q;

        for (double t : {-1.3, 0.0, 0.8}) {
            Vec theta(1);
            theta[0] = t;
            QuestionId expect = 0;
            double best = -1.0;
            for (QuestionId q : pool) {
                const double a = std::exp(log_disc[q]);
                const double p = sigmoid(a * (t - diff[q]));
                const double info = a * a * p * (1.0 - p);
                if (info > best) {
                    best = info;
                    expect = q;
                }
            }
            CHECK(fisher_select(pool, theta, m) == expect);
        }
    }

    SECTION("exact ties go to the smallest question id") {
        // items 1 and 3 are byte-identical, so their information is equal
        Vec log_disc(4), diff(4);
        log_disc << 0.2, 0.5, -0.1, 0.5;
        diff << 1.0, 0.25, -2.0, 0.25;
        CdmModel m = scalar_model(0, log_disc, diff, 1);
        Vec theta = Vec::Zero(1);
        CHECK(fisher_select({3, 1}, theta, m) == 1);
    }

    SECTION("rejects non-scalar models and empty pools") {
        DomainDataset ds = plain_domain(0, 4);
        ds.n_concepts = 2;
        ds.q_matrix = {{0}, {1}, {0, 1}, {1}};
        const CdmModel ncd = CdmModel::fresh(CdmKind::Ncd, ds, 4, 8);
        CHECK_THROWS_AS(fisher_select({0}, Vec::Zero(2), ncd), ValidationError);

        const CdmModel irt = scalar_model(0, Vec::Zero(2), Vec::Zero(2), 1);
        CHECK_THROWS_AS(fisher_select({}, Vec::Zero(1), irt), ValidationError);
    }
}

TEST_CASE("model-change selection matches brute force for both model kinds") {
    SECTION("pool of one and determinism") {
        CdmModel m = scalar_model(0, Vec::Zero(3), Vec::Zero(3), 1);
        Vec theta(1);
        theta[0] = 0.2;
        CHECK(emc_select({1}, theta, m) == 1);
        CHECK(emc_select({0, 1, 2}, theta, m) == emc_select({0, 1, 2}, theta, m));
    }

    SECTION("scalar model, 40 items") {
        Rng rng(17);
        Vec log_disc(40), diff(40);
        for (Eigen::Index q = 0; q < 40; ++q) {
            log_disc[q] = rng.uniform(-0.5, 0.8);
            diff[q] = rng.normal();
        }
        CdmModel m = scalar_model(0, log_disc, diff, 2);
        std::vector<QuestionId> pool(40);
        for (std::uint32_t q = 0; q < 40; ++q) pool[q] = q;
        Vec theta(1);
        theta[0] = -0.4;

        QuestionId expect = 0;
        double best = -1.0;
        for (QuestionId q : pool) {
            const double p = m.predict(theta, q);
            const Vec up = update_ability_mle(m, theta, {{q, 1}}, MleConfig{});
            const Vec dn = update_ability_mle(m, theta, {{q, 0}}, MleConfig{});
            const double delta = p * (up - theta).norm() + (1.0 - p) * (dn - theta).norm();
            if (delta > best) {
                best = delta;
                expect = q;
            }
        }
        CHECK(emc_select(pool, theta, m) == expect);
    }

    SECTION("concept model, 10 items") {
        DomainDataset ds = plain_domain(0, 10);
        ds.n_concepts = 3;
        for (std::uint32_t q = 0; q < 10; ++q) {
            ds.q_matrix[q] = {static_cast<ConceptId>(q % 3)};
            if (q % 2 == 0) ds.q_matrix[q].push_back(static_cast<ConceptId>((q + 1) % 3));
        }
        CdmModel m = CdmModel::fresh(CdmKind::Ncd, ds, 5, 23);
        Rng rng(24);
        auto& items = m.ncd_items();
        for (Eigen::Index i = 0; i < items.diff.size(); ++i)
            items.diff.data()[i] = rng.uniform(0.0, 1.0);
        for (Eigen::Index q = 0; q < items.disc.size(); ++q) items.disc[q] = rng.uniform(0.3, 1.5);

        std::vector<QuestionId> pool(10);
        for (std::uint32_t q = 0; q < 10; ++q) pool[q] = q;
        const Vec theta = rng.normal_vec(3) * 0.4;

        QuestionId expect = 0;
        double best = -1.0;
        for (QuestionId q : pool) {
            const double p = m.predict(theta, q);
            const Vec up = update_ability_mle(m, theta, {{q, 1}}, MleConfig{});
            const Vec dn = update_ability_mle(m, theta, {{q, 0}}, MleConfig{});
            const double delta = p * (up - theta).norm() + (1.0 - p) * (dn - theta).norm();
            if (delta > best) {
                best = delta;
                expect = q;
            }
        }
        CHECK(emc_select(pool, theta, m) == expect);
    }

    SECTION("exact ties go to the smallest question id") {
        Vec log_disc(3), diff(3);
        log_disc << 0.4, 0.1, 0.4;
        diff << -0.3, 0.9, -0.3;
        CdmModel m = scalar_model(0, log_disc, diff, 1);
        CHECK(emc_select({2, 0}, Vec::Zero(1), m) == 0);
    }
}

TEST_CASE("sessions replay logged answers without repeats") {
    SoloBench bench(1.0, 103);
    SimContext ctx;
    ctx.target = &bench.model;

    SECTION("ability recovery under greedy selection") {
        const SessionRecord rec = run_session(0, InitKind::Random, PolicyKind::Fisher, ctx,
                                              bench.logs, 16, 42);
        REQUIRE(rec.trajectory.size() == 17);
        REQUIRE(rec.selections.size() == 16);
        CHECK_FALSE(rec.truncated);

        std::vector<QuestionId> sorted = rec.selections;
        std::sort(sorted.begin(), sorted.end());
        CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());

        for (const Vec& th : rec.trajectory) CHECK(all_finite(th));
        CHECK(std::abs(rec.trajectory.back()[0] - bench.true_theta) < 0.3);

        // the incremental warm-started estimate agrees with a one-shot
        // cold-started fit of the same evidence
        std::vector<Answer> evidence;
        for (std::size_t i = 0; i < rec.selections.size(); ++i)
            evidence.push_back({rec.selections[i], static_cast<std::uint8_t>(rec.responses[i])});
        MleConfig heavy;
        heavy.steps = 400;
        const Vec ref = update_ability_mle(bench.model, Vec::Zero(1), evidence, heavy);
        CHECK(std::abs(rec.trajectory.back()[0] - ref[0]) < 0.05);

        // every selection came from the candidate pool, never the eval rows
        for (QuestionId q : rec.selections) {
            const bool in_eval = std::any_of(rec.eval_rows.begin(), rec.eval_rows.end(),
                                             [&](const Answer& a) { return a.question == q; });
            CHECK_FALSE(in_eval);
        }
        CHECK(rec.eval_rows.size() == 5);
        CHECK(rec.eval_pred.size() == 5);
    }

    SECTION("zero steps yields just the initial ability") {
        const SessionRecord rec = run_session(0, InitKind::Random, PolicyKind::Random, ctx,
                                              bench.logs, 0, 42);
        CHECK(rec.trajectory.size() == 1);
        CHECK(rec.selections.empty());
        CHECK(rec.eval_pred.size() == rec.eval_rows.size());
    }

    SECTION("an over-long session truncates with the flag set") {
        const SessionRecord rec = run_session(0, InitKind::Random, PolicyKind::Random, ctx,
                                              bench.logs, 50, 42);
        CHECK(rec.truncated);
        CHECK(rec.selections.size() == 20);  // the whole 80% pool
    }

    SECTION("records are reproducible under the same seed") {
        const SessionRecord a = run_session(0, InitKind::Random, PolicyKind::Emc, ctx,
                                            bench.logs, 8, 7);
        const SessionRecord b = run_session(0, InitKind::Random, PolicyKind::Emc, ctx,
                                            bench.logs, 8, 7);
        CHECK(a.selections == b.selections);
        CHECK(a.responses == b.responses);
        REQUIRE(a.trajectory.size() == b.trajectory.size());
        for (std::size_t i = 0; i < a.trajectory.size(); ++i)
            CHECK((a.trajectory[i] - b.trajectory[i]).norm() == 0.0);

        const SessionRecord c = run_session(0, InitKind::Random, PolicyKind::Emc, ctx,
                                            bench.logs, 8, 8);
        CHECK(a.selections != c.selections);
    }

    SECTION("the oracle start with zero steps reproduces the fitted ability exactly") {
        const auto oracle = make_oracle(bench.model, bench.logs);
        ctx.oracle = &oracle;
        const SessionRecord rec = run_session(0, InitKind::Oracle, PolicyKind::Random, ctx,
                                              bench.logs, 0, 3);
        CHECK((rec.trajectory[0] - oracle.at(0)).norm() == 0.0);
    }

    SECTION("missing inputs are rejected") {
        CHECK_THROWS_AS(run_session(1, InitKind::Random, PolicyKind::Random, ctx, bench.logs, 5, 1),
                        ValidationError);  // examinee 1 has no logs
        CHECK_THROWS_AS(run_session(0, InitKind::Oracle, PolicyKind::Random, ctx, bench.logs, 5, 1),
                        ValidationError);  // no oracle map
        CHECK_THROWS_AS(run_session(0, InitKind::Dcsr, PolicyKind::Random, ctx, bench.logs, 5, 1),
                        ValidationError);  // no artifact
        SimContext empty;
        CHECK_THROWS_AS(run_session(0, InitKind::Random, PolicyKind::Random, empty, bench.logs, 5, 1),
                        ValidationError);  // no target model
    }
}

TEST_CASE("generative initialization is deterministic and validates its pairing") {
    // tiny end-to-end pipeline, same shape as the training tests
    SyntheticConfig scfg;
    scfg.n_examinees = 60;
    scfg.n_domains = 3;
    scfg.items_per_domain = 10;
    scfg.shared_dim = 2;
    scfg.specific_noise = 0.25;
    scfg.seed = 19;
    const SyntheticData syn = generate_synthetic(scfg);
    const SplitPlan plan = split_cold_start(syn.datasets, 0, 0.2, 19);
    const TrainPartition part = make_partition(syn.datasets, plan);

    PretrainConfig pc;
    pc.epochs = 6;
    pc.seed = 20;
    std::vector<CdmModel> models;
    models.push_back(pretrain(part.target_warm, CdmKind::Irt, pc).model);
    for (const auto& ds : part.sources) {
        ++pc.seed;
        models.push_back(pretrain(ds, CdmKind::Irt, pc).model);
    }
    const std::vector<const CdmModel*> srcs{&models[1], &models[2]};

    HcmConfig cfg;
    // scalar abilities need a wider denoiser than the 4x-dim default, and enough
    // epochs for the consistency term to pull generations off the clamp boundary
    cfg.epochs = 30;
    cfg.batch = 32;
    cfg.T = 60;
    cfg.fast_K = 10;
    cfg.task_sample = 16;
    cfg.denoiser_hidden = 48;
    cfg.seed = 5;
    const DcsrArtifact art = train_dcsr(part, models[0], srcs, cfg);

    const ExamineeId cold = plan.cold.front();
    const Vec a = dcsr_init(art, cold, srcs, models[0], 42);
    const Vec b = dcsr_init(art, cold, srcs, models[0], 42);
    CHECK((a - b).norm() == 0.0);
    CHECK(a.size() == models[0].ability_dim());

    const Vec c = dcsr_init(art, cold, srcs, models[0], 43);
    CHECK((a - c).norm() > 0.0);

    // same source abilities and seed give the same start, whoever the examinee is
    const ExamineeId cold2 = plan.cold.back();
    REQUIRE(cold2 != cold);
    std::vector<CdmModel> twins = models;
    for (std::size_t m = 1; m < twins.size(); ++m) {
        std::vector<ExamineeId> ids = twins[m].ability_ids();
        Mat table = twins[m].ability_table();
        const auto it_from = std::find(ids.begin(), ids.end(), cold);
        const auto it_to = std::find(ids.begin(), ids.end(), cold2);
        REQUIRE(it_from != ids.end());
        REQUIRE(it_to != ids.end());
        table.col(it_to - ids.begin()) = table.col(it_from - ids.begin());
        twins[m].set_ability_table(ids, table);
    }
    // twin tables change the model checksums, so pair them with a twin artifact
    DcsrArtifact twin_art = art;
    twin_art.target_model_checksum = cdm_checksum(models[0]);
    twin_art.source_model_checksums = {cdm_checksum(twins[1]), cdm_checksum(twins[2])};
    const std::vector<const CdmModel*> twin_srcs{&twins[1], &twins[2]};
    const Vec d1 = dcsr_init(twin_art, cold, twin_srcs, models[0], 42);
    const Vec d2 = dcsr_init(twin_art, cold2, twin_srcs, models[0], 42);
    CHECK((d1 - d2).norm() == 0.0);

    // an examinee no source domain knows is ineligible
    std::vector<CdmModel> blind = models;
    for (std::size_t m = 1; m < blind.size(); ++m) {
        blind[m].set_ability_table({999}, Mat::Zero(1, 1));
    }
    DcsrArtifact blind_art = art;
    blind_art.source_model_checksums = {cdm_checksum(blind[1]), cdm_checksum(blind[2])};
    const std::vector<const CdmModel*> blind_srcs{&blind[1], &blind[2]};
    CHECK_THROWS_MATCHES(dcsr_init(blind_art, cold, blind_srcs, models[0], 42), ValidationError,
                         MessageMatches(ContainsSubstring("no source-domain ability")));

    // mispaired models are caught by checksum
    CHECK_THROWS_MATCHES(dcsr_init(art, cold, {srcs[1], srcs[0]}, models[0], 42), ValidationError,
                         MessageMatches(ContainsSubstring("different source models")));
    CHECK_THROWS_MATCHES(dcsr_init(art, cold, srcs, models[1], 42), ValidationError,
                         MessageMatches(ContainsSubstring("different target model")));
}
