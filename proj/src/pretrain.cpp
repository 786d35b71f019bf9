#include "mudi/pretrain.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <set>

#include "mudi/errors.hpp"

namespace mudi {

using ad::Node;
using ad::Tape;

int bfs_distance(const DialogueGraph& graph, int from, int to) {
    int n = graph.num_nodes();
    if (from < 0 || from >= n || to < 0 || to >= n) {
        throw ArgumentError("bfs_distance: node out of range");
    }
    if (from == to) return 0;
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
    auto add = [&](const std::vector<Edge>& edges) {
        for (const auto& [i, j] : edges) {
            adj[static_cast<std::size_t>(i)].push_back(j);
            adj[static_cast<std::size_t>(j)].push_back(i);
        }
    };
    add(graph.base_edges);
    add(graph.order_edges);
    add(graph.turn_edges);

    std::vector<int> dist(static_cast<std::size_t>(n), -1);
    dist[static_cast<std::size_t>(from)] = 0;
    std::deque<int> queue = {from};
    while (!queue.empty()) {
        int cur = queue.front();
        queue.pop_front();
        for (int nb : adj[static_cast<std::size_t>(cur)]) {
            if (dist[static_cast<std::size_t>(nb)] < 0) {
                dist[static_cast<std::size_t>(nb)] = dist[static_cast<std::size_t>(cur)] + 1;
                if (nb == to) return dist[static_cast<std::size_t>(nb)];
                queue.push_back(nb);
            }
        }
    }
    return dist[static_cast<std::size_t>(to)];
}

std::vector<SppPair> shortest_path_targets(const DialogueGraph& graph, int num_pairs,
                                           std::uint64_t seed) {
    int n = graph.num_nodes();
    if (n < 2) throw ArgumentError("shortest_path_targets: need >= 2 nodes");

    // All distinct unordered reachable pairs.
    std::vector<SppPair> reachable;
    for (int u = 0; u < n; ++u) {
        for (int v = u + 1; v < n; ++v) {
            int d = bfs_distance(graph, u, v);
            if (d > 0) reachable.push_back({u, v, d});
        }
    }
    if (reachable.empty()) {
        throw StateError("graph '" + graph.dialogue_id + "' has no connected node pair");
    }

    Rng rng(seed);
    if (static_cast<int>(reachable.size()) <= num_pairs) return reachable;
    // Sample without replacement.
    std::vector<SppPair> out;
    std::set<std::size_t> taken;
    while (static_cast<int>(out.size()) < num_pairs) {
        std::size_t k = static_cast<std::size_t>(rng.uniform_int(reachable.size()));
        if (taken.insert(k).second) out.push_back(reachable[k]);
    }
    return out;
}

PretrainExample build_pretrain_example(const DialogueGraph& graph, int num_pairs,
                                       std::uint64_t seed) {
    PretrainExample ex;
    ex.spp = shortest_path_targets(graph, num_pairs, seed);
    int n = graph.num_nodes();
    for (int i = 0; i + 1 < n; ++i) {
        ex.tc_pairs.push_back({i, i + 1});
        ex.tc_labels.push_back(graph.speakers[static_cast<std::size_t>(i)] ==
                                       graph.speakers[static_cast<std::size_t>(i + 1)]
                                   ? 1
                                   : 0);
        ex.gr_nodes.push_back(i);
        ex.gr_targets.push_back(i + 1);
    }
    return ex;
}

void init_pretrain_heads(ParamStore& store, int emb_dim, int hidden, Rng& rng,
                         const std::string& prefix) {
    store.create_xavier(prefix + ".spp.W1", 2 * emb_dim, hidden, rng);
    store.create_zeros(prefix + ".spp.b1", 1, hidden);
    store.create_xavier(prefix + ".spp.W2", hidden, 1, rng);
    store.create_zeros(prefix + ".spp.b2", 1, 1);
    store.create_xavier(prefix + ".tc.W1", 2 * emb_dim, hidden, rng);
    store.create_zeros(prefix + ".tc.b1", 1, hidden);
    store.create_xavier(prefix + ".tc.W2", hidden, 1, rng);
    store.create_zeros(prefix + ".tc.b2", 1, 1);
    store.create_xavier(prefix + ".gr.W", emb_dim, emb_dim, rng);
}

namespace {

Node* param(Tape& tape, ParamStore& store, const std::string& name) {
    auto& e = store.at(name);
    return tape.param(e.value, e.grad);
}

// Two-layer perceptron on concatenated pair embeddings -> [P x 1].
Node* pair_mlp(Tape& tape, ParamStore& store, const std::string& prefix, Node* pairs) {
    Node* z = tape.matmul(pairs, param(tape, store, prefix + ".W1"));
    z = tape.add_rowvec(z, param(tape, store, prefix + ".b1"));
    z = tape.relu(z);
    z = tape.matmul(z, param(tape, store, prefix + ".W2"));
    return tape.add_rowvec(z, param(tape, store, prefix + ".b2"));
}

} // namespace

PretrainLossNodes pretrain_losses(Tape& tape, const std::vector<Node*>& encodings,
                                  const std::vector<PretrainExample>& examples,
                                  ParamStore& store, const std::string& prefix) {
    if (encodings.size() != examples.size()) {
        throw ArgumentError("pretrain_losses: encodings/examples size mismatch");
    }

    // Shortest-path regression items across the whole batch.
    std::vector<Node*> spp_rows;
    std::vector<double> spp_targets;
    std::vector<Node*> tc_rows;
    std::vector<double> tc_targets;
    std::vector<Node*> gr_losses; // per-graph CE (already a mean over rows)
    std::vector<long> gr_counts;

    for (std::size_t g = 0; g < examples.size(); ++g) {
        Node* h = encodings[g];
        const auto& ex = examples[g];
        if (!ex.spp.empty()) {
            std::vector<int> us, vs;
            for (const auto& p : ex.spp) {
                us.push_back(p.u);
                vs.push_back(p.v);
                spp_targets.push_back(static_cast<double>(p.distance));
            }
            spp_rows.push_back(
                tape.concat_cols(tape.gather_rows(h, us), tape.gather_rows(h, vs)));
        }
        if (!ex.tc_pairs.empty()) {
            std::vector<int> is, js;
            for (const auto& [i, j] : ex.tc_pairs) {
                is.push_back(i);
                js.push_back(j);
            }
            for (int l : ex.tc_labels) tc_targets.push_back(static_cast<double>(l));
            tc_rows.push_back(
                tape.concat_cols(tape.gather_rows(h, is), tape.gather_rows(h, js)));
        }
        if (!ex.gr_nodes.empty()) {
            // logits[k, j] = (h_{gr_nodes[k]} W_gr) . h_j over nodes of this graph
            Node* projected = tape.matmul(tape.gather_rows(h, ex.gr_nodes),
                                          param(tape, store, prefix + ".gr.W"));
            Node* logits = tape.matmul_nt(projected, h);
            gr_losses.push_back(ad::ce_from_logits_rows(tape, logits, ex.gr_targets));
            gr_counts.push_back(static_cast<long>(ex.gr_nodes.size()));
        }
    }

    PretrainLossNodes out;
    Node* zero = tape.input(Mat::Zero(1, 1));

    if (!spp_rows.empty()) {
        Node* all = spp_rows.size() == 1 ? spp_rows[0] : tape.concat_rows(spp_rows);
        Node* pred = pair_mlp(tape, store, prefix + ".spp", all);
        Mat target(static_cast<long>(spp_targets.size()), 1);
        for (std::size_t i = 0; i < spp_targets.size(); ++i) {
            target(static_cast<long>(i), 0) = spp_targets[i];
        }
        out.spp = ad::mse_mean(tape, pred, target);
    } else {
        out.spp = zero;
    }

    if (!tc_rows.empty()) {
        Node* all = tc_rows.size() == 1 ? tc_rows[0] : tape.concat_rows(tc_rows);
        Node* logits = pair_mlp(tape, store, prefix + ".tc", all);
        Mat target(static_cast<long>(tc_targets.size()), 1);
        for (std::size_t i = 0; i < tc_targets.size(); ++i) {
            target(static_cast<long>(i), 0) = tc_targets[i];
        }
        out.tc = ad::bce_with_logits_mean(tape, logits, target);
    } else {
        out.tc = zero;
    }

    if (!gr_losses.empty()) {
        // Weighted mean over graphs by row count = mean over all rows.
        long total = 0;
        for (long c : gr_counts) total += c;
        Node* acc = nullptr;
        for (std::size_t i = 0; i < gr_losses.size(); ++i) {
            Node* w = tape.cmul(gr_losses[i],
                                static_cast<double>(gr_counts[i]) / static_cast<double>(total));
            acc = acc == nullptr ? w : tape.add(acc, w);
        }
        out.gr = acc;
    } else {
        out.gr = zero;
    }

    out.da = tape.add(tape.add(out.spp, out.tc), out.gr);

    ad::check_finite(out.spp->value, "L_SPP");
    ad::check_finite(out.tc->value, "L_TC");
    ad::check_finite(out.gr->value, "L_GR");
    return out;
}

namespace {

EpochLoss eval_losses(const PretrainConfig& config, ParamStore& store,
                      const std::vector<GatGraphView>& views,
                      const std::vector<PretrainExample>& examples) {
    Tape tape;
    std::vector<Node*> encodings;
    for (const auto& v : views) {
        encodings.push_back(gat_forward(tape, config.gat, store, "encoder", v));
    }
    auto losses = pretrain_losses(tape, encodings, examples, store);
    EpochLoss out;
    out.spp = losses.spp->value(0, 0);
    out.tc = losses.tc->value(0, 0);
    out.gr = losses.gr->value(0, 0);
    out.da = losses.da->value(0, 0);
    return out;
}

} // namespace

PretrainResult run_pretraining(const PretrainConfig& config,
                               const std::vector<DialogueGraph>& graphs) {
    if (graphs.empty()) throw ArgumentError("run_pretraining: no graphs");

    Rng rng(config.seed);
    ParamStore store;
    init_gat_params(store, config.gat, rng, "encoder");
    init_pretrain_heads(store, config.gat.out_dim, config.head_hidden, rng);

    std::vector<GatGraphView> views;
    std::vector<PretrainExample> examples;
    Rng pair_seeds = rng.fork(1);
    for (std::size_t g = 0; g < graphs.size(); ++g) {
        views.push_back(make_gat_view(graphs[g], /*with_relations=*/false));
        examples.push_back(
            build_pretrain_example(graphs[g], config.num_pairs, pair_seeds.next_u64()));
    }

    // Hold out the tail split for the descent check.
    std::size_t holdout =
        std::max<std::size_t>(1, static_cast<std::size_t>(
                                     static_cast<double>(graphs.size()) *
                                     config.holdout_fraction));
    if (holdout >= graphs.size()) holdout = graphs.size() > 1 ? 1 : 0;
    std::size_t train_count = graphs.size() - holdout;

    std::vector<GatGraphView> train_views(views.begin(),
                                          views.begin() + static_cast<long>(train_count));
    std::vector<PretrainExample> train_examples(
        examples.begin(), examples.begin() + static_cast<long>(train_count));
    std::vector<GatGraphView> hold_views(views.begin() + static_cast<long>(train_count),
                                         views.end());
    std::vector<PretrainExample> hold_examples(
        examples.begin() + static_cast<long>(train_count), examples.end());

    PretrainResult result;
    result.holdout_epoch0 =
        hold_views.empty()
            ? eval_losses(config, store, train_views, train_examples).da
            : eval_losses(config, store, hold_views, hold_examples).da;

    AdamOptimizer opt(config.lr);
    ParamStore last_good = store;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        EpochLoss accum;
        accum.epoch = epoch;
        int batches = 0;
        bool bad = false;
        for (std::size_t start = 0; start < train_count;
             start += static_cast<std::size_t>(config.batch_size)) {
            std::size_t end =
                std::min(train_count, start + static_cast<std::size_t>(config.batch_size));
            store.zero_grad();
            Tape tape;
            std::vector<Node*> encodings;
            std::vector<PretrainExample> batch_examples;
            for (std::size_t g = start; g < end; ++g) {
                encodings.push_back(
                    gat_forward(tape, config.gat, store, "encoder", train_views[g]));
                batch_examples.push_back(train_examples[g]);
            }
            PretrainLossNodes losses;
            try {
                losses = pretrain_losses(tape, encodings, batch_examples, store);
            } catch (const NumericError&) {
                bad = true;
                break;
            }
            tape.backward(losses.da);
            opt.step(store);
            accum.spp += losses.spp->value(0, 0);
            accum.tc += losses.tc->value(0, 0);
            accum.gr += losses.gr->value(0, 0);
            accum.da += losses.da->value(0, 0);
            ++batches;
        }
        if (bad) {
            result.diverged = true;
            store = last_good;
            break;
        }
        if (batches > 0) {
            accum.spp /= batches;
            accum.tc /= batches;
            accum.gr /= batches;
            accum.da /= batches;
        }
        result.log.push_back(accum);
        last_good = store;
    }

    result.holdout_final =
        hold_views.empty()
            ? eval_losses(config, store, train_views, train_examples).da
            : eval_losses(config, store, hold_views, hold_examples).da;

    result.checkpoint.stage = "pretrain";
    result.checkpoint.config_hash = config.config_hash;
    result.checkpoint.meta = {
        {"emb_dim", config.gat.out_dim},
        {"in_dim", config.gat.in_dim},
        {"per_head_dim", config.gat.per_head_dim},
        {"num_layers", config.gat.num_layers},
        {"num_heads", config.gat.num_heads},
        {"lambda", config.gat.lambda_decay},
        {"combine", config.gat.combine == ChannelCombine::Separate ? "separate" : "joint"},
        {"head_hidden", config.head_hidden},
        {"epochs", config.epochs},
        {"holdout_epoch0", result.holdout_epoch0},
        {"holdout_final", result.holdout_final},
    };
    result.checkpoint.params = store;
    return result;
}

void write_loss_csv(const std::string& path, const std::vector<EpochLoss>& log) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write loss log: " + path);
    out << "epoch,l_spp,l_tc,l_gr,l_da\n";
    out.precision(17);
    for (const auto& e : log) {
        out << e.epoch << ',' << e.spp << ',' << e.tc << ',' << e.gr << ',' << e.da << '\n';
    }
}

} // namespace mudi
