#include "dcsr/cdm.hpp"

#include "dcsr/data.hpp"
#include "support/oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <sstream>

using namespace dcsr;

namespace {

DomainDataset tiny_dataset(std::uint32_t n_questions, std::uint32_t n_concepts) {
    DomainDataset ds;
    ds.domain = 0;
    ds.n_questions = n_questions;
    ds.n_concepts = n_concepts;
    ds.q_matrix.resize(n_questions);
    for (std::uint32_t q = 0; q < n_questions; ++q) {
        ds.q_matrix[q].push_back(q % n_concepts);
        if (n_concepts > 1) ds.q_matrix[q].push_back((q + 1) % n_concepts);
    }
    return ds;
}

DomainDataset all_ones_dataset(std::uint32_t n_examinees, std::uint32_t n_questions) {
    auto ds = tiny_dataset(n_questions, 2);
    for (std::uint32_t e = 0; e < n_examinees; ++e)
        for (std::uint32_t q = 0; q < n_questions; ++q) ds.logs.push_back({e, q, 1});
    return ds;
}

CdmModel random_irt_model(std::uint32_t n_questions, Rng& rng) {
    auto ds = tiny_dataset(n_questions, 1);
    CdmModel m = CdmModel::fresh(CdmKind::Irt, ds, 8, rng.next_u64());
    for (Eigen::Index j = 0; j < m.irt_items().log_disc.size(); ++j) {
        m.irt_items().log_disc[j] = rng.uniform(-0.5, 0.5);
        m.irt_items().diff[j] = rng.normal();
    }
    return m;
}

CdmModel random_ncd_model(std::uint32_t n_questions, std::uint32_t n_concepts, Rng& rng) {
    auto ds = tiny_dataset(n_questions, n_concepts);
    CdmModel m = CdmModel::fresh(CdmKind::Ncd, ds, 6, rng.next_u64());
    auto& it = m.ncd_items();
    for (Eigen::Index c = 0; c < it.diff.rows(); ++c)
        for (Eigen::Index q = 0; q < it.diff.cols(); ++q) it.diff(c, q) = rng.uniform(-0.8, 0.8);
    for (Eigen::Index q = 0; q < it.disc.size(); ++q) it.disc[q] = rng.uniform(0.2, 1.5);
    return m;
}

std::vector<Answer> random_evidence(const CdmModel& m, Rng& rng, int n) {
    std::vector<Answer> ev;
    for (int i = 0; i < n; ++i) {
        ev.push_back({static_cast<QuestionId>(rng.below(m.n_questions())),
                      static_cast<std::uint8_t>(rng.below(2))});
    }
    return ev;
}

}  // namespace

TEST_CASE("two-parameter logistic prediction matches the closed form") {
    Rng rng(1);
    auto m = random_irt_model(4, rng);
    m.irt_items().log_disc[0] = 0.0;  // a = 1
    m.irt_items().diff[0] = 0.0;
    Vec theta = Vec::Constant(1, 2.0);
    CHECK(std::abs(m.predict(theta, 0) - 0.8807970779778823) < 1e-4);
    CHECK(std::abs(m.predict(theta, 0) - 0.8807970779778823) < 1e-12);
}

TEST_CASE("predictions stay strictly inside (0,1)") {
    Rng rng(2);
    auto irt = random_irt_model(3, rng);
    auto ncd = random_ncd_model(5, 3, rng);
    for (double scale : {0.0, 1.0, 50.0, 1000.0}) {
        for (double sign : {-1.0, 1.0}) {
            Vec t1 = Vec::Constant(1, sign * scale);
            Vec t3 = Vec::Constant(3, sign * scale);
            for (QuestionId q = 0; q < 3; ++q) {
                const double p1 = irt.predict(t1, q);
                const double p3 = ncd.predict(t3, q);
                CHECK(p1 > 0.0);
                CHECK(p1 < 1.0);
                CHECK(p3 > 0.0);
                CHECK(p3 < 1.0);
            }
        }
    }
}

TEST_CASE("unknown question id is rejected") {
    Rng rng(3);
    auto m = random_irt_model(3, rng);
    Vec theta = Vec::Zero(1);
    CHECK_THROWS_AS(m.predict(theta, 3), ValidationError);
    CHECK_THROWS_AS(m.loglik_grad(theta, {{7, 1}}), ValidationError);
}

TEST_CASE("log-likelihood gradient at the neutral point") {
    Rng rng(4);
    auto m = random_irt_model(2, rng);
    m.irt_items().log_disc[0] = 0.0;
    m.irt_items().diff[0] = 0.0;
    Vec theta = Vec::Zero(1);
    CHECK(m.loglik_grad(theta, {{0, 1}})[0] == Catch::Approx(0.5).margin(1e-12));
    CHECK(m.loglik_grad(theta, {{0, 0}})[0] == Catch::Approx(-0.5).margin(1e-12));
}

TEST_CASE("analytic ability gradients match finite differences") {
    Rng rng(5);
    for (int rep = 0; rep < 25; ++rep) {
        auto irt = random_irt_model(6, rng);
        auto ev = random_evidence(irt, rng, 10);
        Vec theta = rng.normal_vec(1);
        Vec analytic = irt.loglik_grad(theta, ev);
        Vec fd = oracles::fd_gradient_vec([&](const Vec& t) { return irt.loglik(t, ev); }, theta);
        CHECK(oracles::grad_rel_error(analytic, fd) < 1e-4);

        auto ncd = random_ncd_model(6, 4, rng);
        auto ev2 = random_evidence(ncd, rng, 10);
        Vec theta2 = rng.normal_vec(4);
        Vec analytic2 = ncd.loglik_grad(theta2, ev2);
        Vec fd2 = oracles::fd_gradient_vec([&](const Vec& t) { return ncd.loglik(t, ev2); }, theta2);
        CHECK(oracles::grad_rel_error(analytic2, fd2) < 1e-4);
    }
}

TEST_CASE("analytic item-parameter gradients match finite differences") {
    Rng rng(6);
    for (int rep = 0; rep < 10; ++rep) {
        for (CdmKind kind : {CdmKind::Irt, CdmKind::Ncd}) {
            auto m = kind == CdmKind::Irt ? random_irt_model(5, rng) : random_ncd_model(5, 3, rng);
            auto ev = random_evidence(m, rng, 8);
            Vec theta = rng.normal_vec(m.ability_dim());

            std::vector<ParamSpan> spans;
            m.collect_item_spans(spans);
            zero_grads(spans);
            for (const auto& a : ev) m.accumulate_item_grads(theta, a);
            Vec analytic = flatten_grads(spans);
            Vec fd = oracles::fd_gradient_spans([&] { return m.loglik(theta, ev); }, spans);
            CHECK(oracles::grad_rel_error(analytic, fd) < 1e-4);
        }
    }
}

TEST_CASE("mastery monotonicity: raising ability never lowers the prediction") {
    Rng rng(7);
    auto m = random_ncd_model(8, 5, rng);
    for (int rep = 0; rep < 200; ++rep) {
        Vec lo = rng.normal_vec(5);
        Vec hi = lo;
        for (Eigen::Index i = 0; i < hi.size(); ++i) hi[i] += rng.uniform(0.0, 2.0);
        const auto q = static_cast<QuestionId>(rng.below(8));
        CHECK(m.predict(hi, q) >= m.predict(lo, q));
    }
}

TEST_CASE("ability estimation recovers a known trait from 20 items") {
    Rng rng(8);
    // items spread around the true trait value, responses from the model itself
    auto ds = tiny_dataset(20, 1);
    CdmModel m = CdmModel::fresh(CdmKind::Irt, ds, 8, 42);
    std::vector<Answer> ev;
    const double true_theta = 1.0;
    for (QuestionId q = 0; q < 20; ++q) {
        m.irt_items().log_disc[q] = std::log(rng.uniform(0.5, 2.0));
        m.irt_items().diff[q] = rng.normal();
        const double p = sigmoid(std::exp(m.irt_items().log_disc[q]) * (true_theta - m.irt_items().diff[q]));
        ev.push_back({q, static_cast<std::uint8_t>(rng.uniform() < p ? 1 : 0)});
    }
    Vec est = update_ability_mle(m, Vec::Zero(1), ev, {});
    CHECK(std::abs(est[0] - true_theta) < 0.3);
}

TEST_CASE("ability update with no evidence is the identity") {
    Rng rng(9);
    auto m = random_ncd_model(4, 3, rng);
    Vec theta = rng.normal_vec(3);
    Vec out = update_ability_mle(m, theta, {}, {});
    CHECK(out == theta);
}

TEST_CASE("gradient steps are norm-clipped") {
    Rng rng(10);
    auto m = random_irt_model(30, rng);
    for (Eigen::Index j = 0; j < 30; ++j) m.irt_items().log_disc[j] = std::log(4.0);
    std::vector<Answer> ev;
    for (QuestionId q = 0; q < 30; ++q) ev.push_back({q, 1});
    MleConfig cfg;
    Vec out = update_ability_mle(m, Vec::Zero(1), ev, cfg);
    // |theta| can move at most steps * lr * clip even though the raw gradient is huge
    CHECK(std::abs(out[0]) <= cfg.steps * cfg.lr * cfg.clip + 1e-12);
}

TEST_CASE("pretraining drives an all-correct dataset toward certainty") {
    auto ds = all_ones_dataset(10, 5);
    for (CdmKind kind : {CdmKind::Irt, CdmKind::Ncd}) {
        PretrainConfig cfg;
        cfg.epochs = 300;
        cfg.batch = 16;
        cfg.lr = 0.05;
        cfg.seed = 3;
        auto res = pretrain(ds, kind, cfg);
        for (const auto& row : ds.logs) {
            CHECK(res.model.predict(res.model.ability(row.examinee), row.question) >= 0.9);
        }
        CHECK(res.epoch_loss.back() <= res.epoch_loss.front());
    }
}

TEST_CASE("pretraining is deterministic for a fixed seed") {
    auto data = generate_synthetic({.n_examinees = 40, .n_domains = 2, .items_per_domain = 12,
                                    .shared_dim = 3, .specific_noise = 0.3, .seed = 17});
    PretrainConfig cfg;
    cfg.epochs = 5;
    cfg.seed = 9;
    for (CdmKind kind : {CdmKind::Irt, CdmKind::Ncd}) {
        auto a = pretrain(data.datasets[0], kind, cfg);
        auto b = pretrain(data.datasets[0], kind, cfg);
        CHECK(a.epoch_loss == b.epoch_loss);
        CHECK(cdm_checksum(a.model) == cdm_checksum(b.model));
    }
}

TEST_CASE("pretraining loss decreases over ten-epoch windows") {
    auto data = generate_synthetic({.n_examinees = 60, .n_domains = 2, .items_per_domain = 15,
                                    .shared_dim = 3, .specific_noise = 0.3, .seed = 23});
    PretrainConfig cfg;
    cfg.epochs = 30;
    cfg.seed = 4;
    auto res = pretrain(data.datasets[0], CdmKind::Irt, cfg);
    const auto& loss = res.epoch_loss;
    auto window_mean = [&](std::size_t start) {
        double s = 0.0;
        for (std::size_t i = start; i < start + 10; ++i) s += loss[i];
        return s / 10.0;
    };
    for (std::size_t e = 0; e + 20 <= loss.size(); ++e) {
        CHECK(window_mean(e + 10) <= window_mean(e) + 1e-9);
    }
}

TEST_CASE("ability table covers exactly the examinees that were trained") {
    auto ds = all_ones_dataset(6, 3);
    ds.logs.erase(std::remove_if(ds.logs.begin(), ds.logs.end(),
                                 [](const ResponseTriple& t) { return t.examinee == 2; }),
                  ds.logs.end());
    PretrainConfig cfg;
    cfg.epochs = 2;
    auto res = pretrain(ds, CdmKind::Irt, cfg);
    CHECK(res.model.ability_ids() == std::vector<ExamineeId>{0, 1, 3, 4, 5});
    CHECK(res.model.has_ability(0));
    CHECK_FALSE(res.model.has_ability(2));
    CHECK_THROWS_AS(res.model.ability(2), ValidationError);
}

TEST_CASE("fitting abilities with frozen items recovers the latent ordering") {
    auto data = generate_synthetic({.n_examinees = 150, .n_domains = 2, .items_per_domain = 40,
                                    .shared_dim = 3, .specific_noise = 0.2, .seed = 31});
    PretrainConfig cfg;
    cfg.epochs = 25;
    cfg.seed = 1;
    auto res = pretrain(data.datasets[0], CdmKind::Irt, cfg);
    const std::uint64_t before = item_checksum(res.model);

    auto fitted = fit_abilities(res.model, data.datasets[0].logs);
    CHECK(item_checksum(res.model) == before);  // items stay frozen

    Vec est(150), truth(150);
    for (ExamineeId e = 0; e < 150; ++e) {
        est[e] = fitted.at(e)[0];
        truth[e] = data.truth.readout[0].dot(data.truth.theta[0].row(e));
    }
    CHECK(oracles::pearson(est, truth) > 0.8);
}

TEST_CASE("model files round-trip byte for byte") {
    Rng rng(11);
    for (CdmKind kind : {CdmKind::Irt, CdmKind::Ncd}) {
        auto data = generate_synthetic({.n_examinees = 15, .n_domains = 2, .items_per_domain = 6,
                                        .shared_dim = 3, .specific_noise = 0.3, .seed = 13});
        PretrainConfig cfg;
        cfg.epochs = 3;
        auto res = pretrain(data.datasets[0], kind, cfg);
        res.model.config_hash = 0xabcdef;
        res.model.seed = 99;

        std::ostringstream first;
        save_cdm(res.model, first);
        std::istringstream in(first.str());
        CdmModel loaded = load_cdm(in);
        std::ostringstream second;
        save_cdm(loaded, second);
        CHECK(first.str() == second.str());
        CHECK(cdm_checksum(loaded) == cdm_checksum(res.model));
        CHECK(loaded.config_hash == 0xabcdef);

        Vec theta = rng.normal_vec(res.model.ability_dim());
        for (QuestionId q = 0; q < res.model.n_questions(); ++q) {
            CHECK(loaded.predict(theta, q) == res.model.predict(theta, q));
        }
    }
}

TEST_CASE("corrupt model files are rejected") {
    std::istringstream junk("not a model");
    CHECK_THROWS_AS(load_cdm(junk), RuntimeFailure);
}
