#include <doctest.h>

#include <cmath>

#include "mudi/corpus.hpp"
#include "mudi/dialogue_gat.hpp"
#include "mudi/errors.hpp"
#include "mudi/graph.hpp"
#include "mudi/rng.hpp"
#include "support/gat_reference.hpp"
#include "support/grad_check.hpp"

using namespace mudi;
using mudi_test::finite_difference_check;
using mudi_test::reference_gat_forward;

namespace {

Dialogue annotated_dialogue(int num_utterances, const std::string& id, Rng& rng) {
    Dialogue d;
    d.dialogue_id = id;
    d.persona = {"i collect stamps."};
    const char* topics[] = {"coffee", "rain", "music", "books", "cats", "travel"};
    for (int i = 0; i < num_utterances; ++i) {
        Utterance u;
        u.id = i;
        u.speaker = (i % 2 == 0) ? Speaker::User : Speaker::Bot;
        u.turn_index = i / 2;
        u.text = std::string("talking about ") + topics[rng.uniform_int(6)] +
                 (rng.uniform() < 0.4 ? "?" : ".");
        d.utterances.push_back(u);
    }
    HeuristicAnnotator h;
    return annotate(d, h);
}

GatGraphView random_view(int n, int d, int dim, Rng& rng, bool with_relations) {
    Dialogue dlg = annotated_dialogue(n, "rv", rng);
    HashEmbeddingProvider provider(dim, rng.next_u64());
    DialogueGraph g = build_dialogue_graph(dlg, provider, d);
    return make_gat_view(g, with_relations);
}

} // namespace

TEST_CASE("order_decay matches the closed form") {
    CHECK(order_decay(1, 2, 3, 0.0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(order_decay(2, 1, 3, 0.5) == 0.0); // indicator kills backward pairs
    CHECK(order_decay(1, 2, 3, 0.5) == doctest::Approx(0.6065306597126334).epsilon(1e-12));
    CHECK(order_decay(0, 3, 3, 0.5) == 0.0); // difference not below d
}

TEST_CASE("channel_scores: multiplicative masks and the zero case") {
    Rng rng(3);
    int fin = 5, fout = 4;
    Mat w(fin, fout);
    Eigen::VectorXd ab(2 * fout), ao(2 * fout), at(2 * fout), hi(fin), hj(fin);
    for (long i = 0; i < w.size(); ++i) w(i / fout, i % fout) = rng.gaussian();
    for (long i = 0; i < 2 * fout; ++i) {
        ab(i) = rng.gaussian();
        ao(i) = rng.gaussian();
        at(i) = rng.gaussian();
    }
    for (long i = 0; i < fin; ++i) {
        hi(i) = rng.gaussian();
        hj(i) = rng.gaussian();
    }

    auto masked = channel_scores(hi, hj, w, ab, ao, at, 0.2, 0.0, 0.0);
    CHECK(masked.order == 0.0);
    CHECK(masked.turn == 0.0);
    CHECK(masked.base != 0.0);

    auto zero = channel_scores(Eigen::VectorXd::Zero(fin), Eigen::VectorXd::Zero(fin), w,
                               ab, ao, at, 0.2, 1.0, 1.0);
    CHECK(zero.base == 0.0);
    CHECK(zero.order == 0.0);
    CHECK(zero.turn == 0.0);
}

TEST_CASE("isolated single node passes through ELU(W h)") {
    GatConfig config;
    config.in_dim = 4;
    config.out_dim = 4;
    config.num_layers = 1;
    config.num_heads = 1;
    ParamStore store;
    Rng rng(7);
    init_gat_params(store, config, rng, "enc");

    GatGraphView view;
    view.features = Mat::Zero(1, 4);
    view.features << 0.3, -0.2, 0.9, 0.1;

    Mat out = gat_encode(config, store, "enc", view);
    Mat expect = view.features * store.value("enc.layer0.head0.W");
    for (long c = 0; c < 4; ++c) {
        double e = expect(0, c) > 0 ? expect(0, c) : std::expm1(expect(0, c));
        CHECK(out(0, c) == doctest::Approx(e).epsilon(1e-12));
    }
}

TEST_CASE("singleton softmax puts weight one on a lone base edge") {
    GatConfig config;
    config.in_dim = 3;
    config.out_dim = 3;
    config.num_layers = 1;
    config.num_heads = 1;
    ParamStore store;
    Rng rng(11);
    init_gat_params(store, config, rng, "enc");
    store.value("enc.layer0.head0.a_base").setZero();

    GatGraphView view;
    view.features = Mat::Random(2, 3);
    view.base_edges = {{0, 1}};

    AttentionTrace trace;
    gat_encode(config, store, "enc", view, &trace);
    REQUIRE(trace.layers.size() == 1);
    const auto& base = trace.layers[0][0][0];
    REQUIRE(base.edges.size() == 1);
    CHECK(base.weights[0] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("3-node path graph matches the straight-line reference to 1e-10") {
    Rng rng(0);
    GatConfig config;
    config.in_dim = 6;
    config.per_head_dim = 4;
    config.out_dim = 5;
    config.num_layers = 2;
    config.num_heads = 2;
    ParamStore store;
    init_gat_params(store, config, rng, "enc");

    GatGraphView view = random_view(3, 2, 6, rng, false);
    Mat ours = gat_encode(config, store, "enc", view);
    Mat ref = reference_gat_forward(config, store, "enc", view);
    CHECK((ours - ref).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("50 random graphs match the reference; attention rows sum to one") {
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        GatConfig config;
        config.in_dim = 5;
        config.per_head_dim = 3;
        config.out_dim = 4;
        config.num_layers = 1 + static_cast<int>(rng.uniform_int(2));
        config.num_heads = 1 + static_cast<int>(rng.uniform_int(3));
        config.lambda_decay = rng.uniform(0.0, 1.0);
        config.use_relations = trial % 2 == 0;

        int n = 2 + static_cast<int>(rng.uniform_int(9));
        int d = 1 + static_cast<int>(rng.uniform_int(4));
        GatGraphView view = random_view(n, d, 5, rng, config.use_relations);

        ParamStore store;
        init_gat_params(store, config, rng, "enc");

        AttentionTrace trace;
        Mat ours;
        {
            ad::Tape tape;
            ours = gat_forward(tape, config, store, "enc", view, &trace)->value;
        }
        Mat ref = reference_gat_forward(config, store, "enc", view);
        CHECK((ours - ref).cwiseAbs().maxCoeff() < 1e-10);

        // Per destination node and channel, weights sum to 1 where edges exist.
        for (const auto& layer : trace.layers) {
            for (const auto& head : layer) {
                for (const auto& ch : head) {
                    std::map<int, double> sums;
                    for (std::size_t e = 0; e < ch.edges.size(); ++e) {
                        CHECK(ch.weights[e] >= 0.0);
                        sums[ch.edges[e].second] += ch.weights[e];
                    }
                    for (const auto& [node, s] : sums) {
                        CHECK(std::abs(s - 1.0) < 1e-9);
                    }
                }
            }
        }
    }
}

TEST_CASE("analytic gradients match central differences below 1e-4") {
    Rng rng(1234);
    GatConfig config;
    config.in_dim = 6;
    config.per_head_dim = 3;
    config.out_dim = 5;
    config.num_layers = 2;
    config.num_heads = 2;
    config.use_relations = true;
    ParamStore store;
    init_gat_params(store, config, rng, "enc");

    GatGraphView view = random_view(6, 3, 6, rng, true);
    auto build = [&](ad::Tape& tape) {
        return tape.sum_all(gat_forward(tape, config, store, "enc", view));
    };
    auto res = finite_difference_check(store, build, 1e-5);
    INFO("worst: ", res.worst_param, " analytic=", res.analytic, " numeric=", res.numeric);
    CHECK(res.max_rel_error < 1e-4);
    CHECK(res.max_abs_analytic > 1e-8);
}

TEST_CASE("learnable lambda receives a gradient that matches differences") {
    Rng rng(4321);
    GatConfig config;
    config.in_dim = 5;
    config.per_head_dim = 3;
    config.out_dim = 4;
    config.num_layers = 1;
    config.num_heads = 1;
    config.lambda_learnable = true;
    config.lambda_decay = 0.5;
    ParamStore store;
    init_gat_params(store, config, rng, "enc");

    GatGraphView view = random_view(5, 3, 5, rng, false);
    auto build = [&](ad::Tape& tape) {
        return tape.sum_all(gat_forward(tape, config, store, "enc", view));
    };
    auto res = finite_difference_check(store, build, 1e-5);
    CHECK(res.max_rel_error < 1e-4);
    CHECK(store.at("enc.lambda").grad(0, 0) != 0.0);
}

TEST_CASE("lambda=0 order channel equals a GATv2 score on the same edges") {
    Rng rng(5);
    GatConfig order_only;
    order_only.in_dim = 4;
    order_only.out_dim = 4;
    order_only.num_layers = 1;
    order_only.num_heads = 1;
    order_only.lambda_decay = 0.0;

    ParamStore store;
    init_gat_params(store, order_only, rng, "enc");

    GatGraphView base = random_view(5, 3, 4, rng, false);
    GatGraphView only_order = base;
    only_order.base_edges.clear();
    only_order.turn_edges.clear();

    // Same edges presented as base edges with the base attention vector set
    // to the order attention vector: a plain GATv2 restricted computation.
    GatGraphView as_base = base;
    as_base.base_edges = base.order_edges;
    as_base.order_edges.clear();
    as_base.order_delta.clear();
    as_base.turn_edges.clear();

    ParamStore store2;
    init_gat_params(store2, order_only, rng, "enc2");
    store2.value("enc2.layer0.head0.W") = store.value("enc.layer0.head0.W");
    store2.value("enc2.layer0.head0.a_base") = store.value("enc.layer0.head0.a_order");

    Mat a = gat_encode(order_only, store, "enc", only_order);
    Mat b = gat_encode(order_only, store2, "enc2", as_base);
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("node relabeling permutes outputs identically") {
    Rng rng(6);
    GatConfig config;
    config.in_dim = 5;
    config.per_head_dim = 3;
    config.out_dim = 4;
    config.num_layers = 2;
    config.num_heads = 2;
    ParamStore store;
    init_gat_params(store, config, rng, "enc");

    GatGraphView view = random_view(6, 3, 5, rng, false);
    int n = view.num_nodes();
    std::vector<int> perm = {3, 0, 5, 1, 4, 2};

    GatGraphView pview;
    pview.features = Mat(n, view.features.cols());
    for (int i = 0; i < n; ++i) {
        pview.features.row(perm[static_cast<std::size_t>(i)]) = view.features.row(i);
    }
    auto map_edges = [&](const std::vector<Edge>& edges) {
        std::vector<Edge> out;
        for (const auto& [i, j] : edges) {
            out.push_back({perm[static_cast<std::size_t>(i)],
                           perm[static_cast<std::size_t>(j)]});
        }
        return out;
    };
    pview.base_edges = map_edges(view.base_edges);
    pview.order_edges = map_edges(view.order_edges);
    pview.turn_edges = map_edges(view.turn_edges);
    pview.order_delta = view.order_delta;

    Mat out = gat_encode(config, store, "enc", view);
    Mat pout = gat_encode(config, store, "enc", pview);
    for (int i = 0; i < n; ++i) {
        CHECK((out.row(i) - pout.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() <
              1e-12);
    }
}

TEST_CASE("removing all turn edges equals the two-channel computation") {
    Rng rng(8);
    GatConfig config;
    config.in_dim = 5;
    config.per_head_dim = 3;
    config.out_dim = 4;
    config.num_layers = 2;
    config.num_heads = 2;
    ParamStore store;
    init_gat_params(store, config, rng, "enc");

    GatGraphView view = random_view(6, 3, 5, rng, false);
    GatGraphView no_turn = view;
    no_turn.turn_edges.clear();

    Mat ours = gat_encode(config, store, "enc", no_turn);
    Mat two_channel = reference_gat_forward(config, store, "enc", view, 0b011);
    CHECK((ours - two_channel).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("joint combine mode normalizes across all channels at once") {
    Rng rng(9);
    GatConfig config;
    config.in_dim = 5;
    config.per_head_dim = 3;
    config.out_dim = 4;
    config.num_layers = 1;
    config.num_heads = 1;
    config.combine = ChannelCombine::Joint;
    ParamStore store;
    init_gat_params(store, config, rng, "enc");

    GatGraphView view = random_view(6, 3, 5, rng, false);
    AttentionTrace trace;
    gat_encode(config, store, "enc", view, &trace);

    std::map<int, double> sums;
    for (const auto& ch : trace.layers[0][0]) {
        for (std::size_t e = 0; e < ch.edges.size(); ++e) {
            sums[ch.edges[e].second] += ch.weights[e];
        }
    }
    for (const auto& [node, s] : sums) CHECK(std::abs(s - 1.0) < 1e-9);

    // Gradients flow in joint mode too.
    auto build = [&](ad::Tape& tape) {
        return tape.sum_all(gat_forward(tape, config, store, "enc", view));
    };
    auto res = finite_difference_check(store, build, 1e-5);
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("relation embeddings change the output") {
    Rng rng(10);
    GatConfig config;
    config.in_dim = 5;
    config.per_head_dim = 3;
    config.out_dim = 4;
    config.num_layers = 1;
    config.num_heads = 1;
    config.use_relations = true;
    ParamStore store;
    init_gat_params(store, config, rng, "enc");

    GatGraphView view = random_view(5, 2, 5, rng, true);
    view.rel_multihot.setZero();
    view.rel_multihot.col(static_cast<int>(RelationLabel::Comment)).setOnes();
    Mat all_comment = gat_encode(config, store, "enc", view);
    view.rel_multihot.setZero();
    view.rel_multihot.col(static_cast<int>(RelationLabel::TopicShift)).setOnes();
    Mat all_shift = gat_encode(config, store, "enc", view);
    CHECK((all_comment - all_shift).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("config dim mismatch raises a config error") {
    GatConfig config;
    config.in_dim = 8;
    ParamStore store;
    Rng rng(1);
    init_gat_params(store, config, rng, "enc");
    GatGraphView view;
    view.features = Mat::Zero(2, 4); // wrong width
    view.base_edges = {{0, 1}};
    CHECK_THROWS_AS(gat_encode(config, store, "enc", view), ConfigError);
}
