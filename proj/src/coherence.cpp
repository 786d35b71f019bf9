#include "mudi/coherence.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>

#include "mudi/errors.hpp"

namespace mudi {

using ad::Node;
using ad::Tape;

CoherenceConfig default_coherence_config(int in_dim, int emb_dim) {
    CoherenceConfig c;
    c.emb_dim = emb_dim;
    c.context_gat.in_dim = in_dim;
    c.context_gat.per_head_dim = std::max(1, emb_dim / 4);
    c.context_gat.out_dim = emb_dim;
    c.context_gat.num_layers = 2;
    c.context_gat.num_heads = 4;
    c.context_gat.use_relations = true;
    c.persona_gat = c.context_gat;
    c.persona_gat.use_relations = false;
    return c;
}

void init_coherence_params(ParamStore& store, const CoherenceConfig& config, Rng& rng) {
    if (config.context_gat.out_dim != config.emb_dim ||
        config.persona_gat.out_dim != config.emb_dim) {
        throw ConfigError("coherence: encoder out_dim must equal emb_dim");
    }
    if (!config.context_gat.use_relations) {
        throw ConfigError("coherence: context encoder must use relations");
    }
    init_gat_params(store, config.context_gat, rng, "context");
    init_gat_params(store, config.persona_gat, rng, "persona");

    int f = config.emb_dim;
    for (int h = 0; h < config.fusion_heads; ++h) {
        std::string hp = "fusion.head" + std::to_string(h);
        store.create_xavier(hp + ".Wq", f, f, rng);
        store.create_xavier(hp + ".Wk", f, f, rng);
        store.create_xavier(hp + ".Wv", f, f, rng);
    }
    store.create_xavier("fusion.Wo", config.fusion_heads * f, f, rng);

    int hidden = config.head_hidden;
    store.create_xavier("dcu.rc.W1", 2 * f, hidden, rng);
    store.create_zeros("dcu.rc.b1", 1, hidden);
    store.create_xavier("dcu.rc.W2", hidden, kNumRelations, rng);
    store.create_zeros("dcu.rc.b2", 1, kNumRelations);

    store.create_xavier("dcu.direct.W1", f, hidden, rng);
    store.create_zeros("dcu.direct.b1", 1, hidden);
    store.create_xavier("dcu.direct.W2", hidden, kNumRelations, rng);
    store.create_zeros("dcu.direct.b2", 1, kNumRelations);

    store.create_xavier("dcu.seq.u", 1, f, rng);
    store.create_xavier("dcu.seq.Wk", f, f, rng);
    store.create_xavier("dcu.seq.Wv", f, f, rng);
    store.create_xavier("dcu.seq.W1", f, hidden, rng);
    store.create_zeros("dcu.seq.b1", 1, hidden);
    store.create_xavier("dcu.seq.W2", hidden, kNumRelations, rng);
    store.create_zeros("dcu.seq.b2", 1, kNumRelations);
}

Mat class_balanced_weights(const std::vector<std::size_t>& counts, double beta) {
    if (counts.size() != static_cast<std::size_t>(kNumRelations)) {
        throw ArgumentError("class_balanced_weights: need 17 counts");
    }
    Mat w(1, kNumRelations);
    for (int c = 0; c < kNumRelations; ++c) {
        std::size_t n = counts[static_cast<std::size_t>(c)];
        if (n == 0) {
            w(0, c) = 1.0;
        } else {
            w(0, c) = (1.0 - beta) /
                      (1.0 - std::pow(beta, static_cast<double>(n)));
        }
    }
    return w;
}

std::vector<std::size_t> relation_class_counts(const std::vector<DialogueGraph>& graphs) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(kNumRelations), 0);
    for (const auto& g : graphs) {
        for (const auto& [edge, labels] : g.edge_relations) {
            for (auto l : labels) ++counts[static_cast<std::size_t>(static_cast<int>(l))];
        }
    }
    return counts;
}

namespace {

Node* param(Tape& tape, ParamStore& store, const std::string& name) {
    auto& e = store.at(name);
    return tape.param(e.value, e.grad);
}

Node* head_mlp(Tape& tape, ParamStore& store, const std::string& prefix, Node* x) {
    Node* z = tape.matmul(x, param(tape, store, prefix + ".W1"));
    z = tape.add_rowvec(z, param(tape, store, prefix + ".b1"));
    z = tape.relu(z);
    z = tape.matmul(z, param(tape, store, prefix + ".W2"));
    return tape.add_rowvec(z, param(tape, store, prefix + ".b2"));
}

// Target positions and multi-hot targets for next-response-type prediction:
// position p predicts the label set on edge (p, p+1).
struct NextTypeTargets {
    std::vector<int> positions;
    Mat multihot; // [P x 17]
};

NextTypeTargets next_type_targets(const GatGraphView& view) {
    NextTypeTargets out;
    std::vector<std::pair<int, long>> rows; // (position, rel_multihot row)
    for (std::size_t e = 0; e < view.base_edges.size(); ++e) {
        auto [i, j] = view.base_edges[e];
        if (j == i + 1) rows.push_back({i, static_cast<long>(e)});
    }
    out.multihot = Mat::Zero(static_cast<long>(rows.size()), kNumRelations);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        out.positions.push_back(rows[k].first);
        out.multihot.row(static_cast<long>(k)) = view.rel_multihot.row(rows[k].second);
    }
    return out;
}

} // namespace

Node* encode_context(Tape& tape, const CoherenceConfig& config, ParamStore& store,
                     const GatGraphView& view) {
    if (!view.has_relations) {
        throw StateError("encode_context: view lacks relation labels");
    }
    return gat_forward(tape, config.context_gat, store, "context", view);
}

Node* encode_persona(Tape& tape, const CoherenceConfig& config, ParamStore& store,
                     const GatGraphView& view) {
    return gat_forward(tape, config.persona_gat, store, "persona", view);
}

Node* fuse(Tape& tape, const CoherenceConfig& config, ParamStore& store, Node* h_c,
           Node* h_p) {
    int f = config.emb_dim;
    if (h_c->value.cols() != f || h_p->value.cols() != f) {
        throw ShapeError("fuse: representations must share emb_dim columns");
    }
    double scale = 1.0 / std::sqrt(static_cast<double>(f));
    std::vector<Node*> heads;
    for (int h = 0; h < config.fusion_heads; ++h) {
        std::string hp = "fusion.head" + std::to_string(h);
        Node* q = tape.matmul(h_c, param(tape, store, hp + ".Wq"));
        Node* k = tape.matmul(h_p, param(tape, store, hp + ".Wk"));
        Node* v = tape.matmul(h_p, param(tape, store, hp + ".Wv"));
        Node* scores = tape.cmul(tape.matmul_nt(q, k), scale); // [N x M]
        Node* attn = tape.softmax_rows(scores);
        heads.push_back(tape.matmul(attn, v)); // [N x F]
    }
    Node* cat = tape.concat_cols(heads);
    return tape.matmul(cat, param(tape, store, "fusion.Wo"));
}

Node* relation_classification_loss(Tape& tape, const CoherenceConfig& config,
                                   ParamStore& store, Node* h_d,
                                   const GatGraphView& view, const Mat& class_weights) {
    if (view.base_edges.empty()) return tape.input(Mat::Zero(1, 1));
    if (view.rel_multihot.rows() != static_cast<long>(view.base_edges.size())) {
        throw StateError("relation_classification_loss: missing relation targets");
    }
    std::vector<int> srcs, dsts;
    for (const auto& [i, j] : view.base_edges) {
        srcs.push_back(i);
        dsts.push_back(j);
    }
    Node* pairs = tape.concat_cols(tape.gather_rows(h_d, srcs), tape.gather_rows(h_d, dsts));
    Node* logits = head_mlp(tape, store, "dcu.rc", pairs); // [E x 17]
    Mat weights = Mat::Ones(logits->value.rows(), 1) * class_weights;
    return ad::bce_with_logits_mean(tape, logits, view.rel_multihot, &weights);
}

NextTypeLosses next_response_type_losses(Tape& tape, const CoherenceConfig& config,
                                         ParamStore& store, Node* h_d,
                                         const GatGraphView& view) {
    NextTypeLosses out;
    auto targets = next_type_targets(view);
    if (targets.positions.empty()) {
        out.direct = tape.input(Mat::Zero(1, 1));
        out.seq = tape.input(Mat::Zero(1, 1));
        return out;
    }

    // Direct: head on the current utterance node.
    Node* direct_in = tape.gather_rows(h_d, targets.positions);
    Node* direct_logits = head_mlp(tape, store, "dcu.direct", direct_in);
    out.direct = ad::bce_with_logits_mean(tape, direct_logits, targets.multihot);

    // Sequential: causal attention pooling over all nodes up to p.
    int n = static_cast<int>(h_d->value.rows());
    int f = config.emb_dim;
    double scale = 1.0 / std::sqrt(static_cast<double>(f));
    Node* k = tape.matmul(h_d, param(tape, store, "dcu.seq.Wk"));     // [N x F]
    Node* v = tape.matmul(h_d, param(tape, store, "dcu.seq.Wv"));     // [N x F]
    Node* s = tape.cmul(tape.matmul_nt(param(tape, store, "dcu.seq.u"), k), scale); // [1xN]
    long p_count = static_cast<long>(targets.positions.size());
    Node* scores = tape.matmul(tape.input(Mat::Ones(p_count, 1)), s); // [P x N]
    Mat mask = Mat::Zero(p_count, n);
    for (long r = 0; r < p_count; ++r) {
        for (int t = 0; t < n; ++t) {
            if (t > targets.positions[static_cast<std::size_t>(r)]) {
                mask(r, t) = -std::numeric_limits<double>::infinity();
            }
        }
    }
    Node* attn = tape.softmax_rows(tape.cadd_mat(scores, mask)); // [P x N]
    Node* pooled = tape.matmul(attn, v);                         // [P x F]
    Node* seq_logits = head_mlp(tape, store, "dcu.seq", pooled);
    out.seq = ad::bce_with_logits_mean(tape, seq_logits, targets.multihot);
    return out;
}

Node* link_prediction_loss(Tape& tape, Node* h_d, const GatGraphView& view,
                           double negative_ratio, std::uint64_t seed) {
    if (view.base_edges.empty()) return tape.input(Mat::Zero(1, 1));
    int n = static_cast<int>(h_d->value.rows());

    std::set<std::pair<int, int>> positive;
    for (const auto& [i, j] : view.base_edges) {
        positive.insert({std::min(i, j), std::max(i, j)});
    }
    std::vector<std::pair<int, int>> candidates;
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            if (!positive.count({i, j})) candidates.push_back({i, j});
        }
    }
    std::size_t wanted = static_cast<std::size_t>(
        std::llround(negative_ratio * static_cast<double>(positive.size())));
    if (wanted > candidates.size()) {
        std::cerr << "[mudi] link prediction: only " << candidates.size()
                  << " negative pairs available, reducing from " << wanted << "\n";
        wanted = candidates.size();
    }

    std::vector<int> is, js;
    std::vector<double> targets;
    for (const auto& [i, j] : view.base_edges) {
        is.push_back(i);
        js.push_back(j);
        targets.push_back(1.0);
    }
    Rng rng(seed);
    std::set<std::size_t> taken;
    while (taken.size() < wanted) {
        std::size_t k = static_cast<std::size_t>(rng.uniform_int(candidates.size()));
        if (taken.insert(k).second) {
            is.push_back(candidates[k].first);
            js.push_back(candidates[k].second);
            targets.push_back(0.0);
        }
    }

    Node* hi = tape.gather_rows(h_d, is);
    Node* hj = tape.gather_rows(h_d, js);
    Node* logits = tape.row_sum(tape.mul(hi, hj)); // inner products, [K x 1]
    Mat target_mat(static_cast<long>(targets.size()), 1);
    for (std::size_t t = 0; t < targets.size(); ++t) {
        target_mat(static_cast<long>(t), 0) = targets[t];
    }
    return ad::bce_with_logits_mean(tape, logits, target_mat);
}

Node* dcu_loss(Tape& tape, Node* l_rc, Node* l_direct, Node* l_seq, Node* l_lp,
               const DcuWeights& w) {
    if (w.alpha < 0 || w.beta < 0 || w.gamma < 0 || w.delta < 0) {
        throw ArgumentError("dcu weights must be nonnegative");
    }
    if (w.alpha == 0 && w.beta == 0 && w.gamma == 0 && w.delta == 0) {
        throw ArgumentError("dcu weights must not all be zero");
    }
    Node* total = tape.cmul(l_rc, w.alpha);
    total = tape.add(total, tape.cmul(l_direct, w.beta));
    total = tape.add(total, tape.cmul(l_seq, w.gamma));
    total = tape.add(total, tape.cmul(l_lp, w.delta));
    return total;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

Eigen::VectorXd response_type_probabilities(const CoherenceConfig& config,
                                            ParamStore& store, const Mat& h_d,
                                            TypePredictionMode mode) {
    Tape tape;
    Node* h = tape.input(h_d);
    int n = static_cast<int>(h_d.rows());
    Node* logits = nullptr;
    if (mode == TypePredictionMode::Direct) {
        logits = head_mlp(tape, store, "dcu.direct", tape.gather_rows(h, {n - 1}));
    } else {
        int f = config.emb_dim;
        double scale = 1.0 / std::sqrt(static_cast<double>(f));
        Node* k = tape.matmul(h, param(tape, store, "dcu.seq.Wk"));
        Node* v = tape.matmul(h, param(tape, store, "dcu.seq.Wv"));
        Node* s = tape.cmul(tape.matmul_nt(param(tape, store, "dcu.seq.u"), k), scale);
        Node* attn = tape.softmax_rows(s);     // pools over the full context
        Node* pooled = tape.matmul(attn, v);   // [1 x F]
        logits = head_mlp(tape, store, "dcu.seq", pooled);
    }
    Eigen::VectorXd probs(kNumRelations);
    for (int c = 0; c < kNumRelations; ++c) {
        double z = logits->value(0, c);
        probs(c) = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    }
    return probs;
}

TypePrediction select_response_types(const Eigen::VectorXd& probs, double threshold) {
    std::vector<int> order(kNumRelations);
    for (int i = 0; i < kNumRelations; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return probs(a) > probs(b); });
    TypePrediction out;
    for (int idx : order) {
        if (probs(idx) > threshold && out.labels.size() < kMaxLabelsPerPair) {
            out.labels.push_back(static_cast<RelationLabel>(idx));
            out.probabilities.push_back(probs(idx));
        }
    }
    if (out.labels.empty()) {
        out.labels.push_back(static_cast<RelationLabel>(order[0]));
        out.probabilities.push_back(probs(order[0]));
    }
    return out;
}

TypePrediction predict_response_type(const CoherenceConfig& config, ParamStore& store,
                                     const Mat& h_d, TypePredictionMode mode,
                                     double threshold) {
    return select_response_types(response_type_probabilities(config, store, h_d, mode),
                                 threshold);
}

CoherenceEncoding coherence_encode(const CoherenceConfig& config, ParamStore& store,
                                   const DialogueGraph& graph,
                                   const PersonaGraph& persona) {
    Tape tape;
    Node* h_c = encode_context(tape, config, store, make_gat_view(graph, true));
    Node* h_p = encode_persona(tape, config, store, make_gat_view(persona));
    Node* h_d = fuse(tape, config, store, h_c, h_p);
    return {h_c->value, h_p->value, h_d->value};
}

FusionMode fusion_mode_from_name(const std::string& name) {
    if (name == "attention") return FusionMode::Attention;
    if (name == "add") return FusionMode::Add;
    if (name == "context_only") return FusionMode::ContextOnly;
    if (name == "persona_only") return FusionMode::PersonaOnly;
    if (name == "random") return FusionMode::Random;
    if (name == "none") return FusionMode::None;
    throw ArgumentError("unknown fusion mode: " + name);
}

const std::string& fusion_mode_name(FusionMode mode) {
    static const std::vector<std::string> names = {"attention", "add", "context_only",
                                                   "persona_only", "random", "none"};
    return names[static_cast<std::size_t>(mode)];
}

Mat ablation_h_d(FusionMode mode, const Mat& h_c, const Mat& h_p, std::uint64_t seed) {
    long n = h_c.rows();
    long f = h_c.cols();
    Eigen::RowVectorXd persona_mean = h_p.colwise().mean();
    switch (mode) {
        case FusionMode::Add: {
            Mat out = h_c;
            out.rowwise() += persona_mean;
            return out;
        }
        case FusionMode::ContextOnly:
            return h_c;
        case FusionMode::PersonaOnly: {
            Mat out(n, f);
            for (long r = 0; r < n; ++r) out.row(r) = persona_mean;
            return out;
        }
        case FusionMode::Random: {
            Rng rng(seed);
            Mat out(n, f);
            for (long r = 0; r < n; ++r) {
                for (long c = 0; c < f; ++c) out(r, c) = rng.gaussian();
            }
            return out;
        }
        default:
            throw ArgumentError("ablation_h_d handles add/context_only/persona_only/random");
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct DialogueLossNodes {
    Node* rc;
    Node* direct;
    Node* seq;
    Node* lp;
    Node* dcu;
};

DialogueLossNodes dialogue_losses(Tape& tape, const CoherenceConfig& config,
                                  ParamStore& store, const GatGraphView& cview,
                                  const GatGraphView& pview, const Mat& class_weights,
                                  std::uint64_t lp_seed) {
    Node* h_c = encode_context(tape, config, store, cview);
    Node* h_p = encode_persona(tape, config, store, pview);
    Node* h_d = fuse(tape, config, store, h_c, h_p);
    DialogueLossNodes out;
    out.rc = relation_classification_loss(tape, config, store, h_d, cview, class_weights);
    auto nt = next_response_type_losses(tape, config, store, h_d, cview);
    out.direct = nt.direct;
    out.seq = nt.seq;
    out.lp = link_prediction_loss(tape, h_d, cview, config.negative_ratio, lp_seed);
    out.dcu = dcu_loss(tape, out.rc, out.direct, out.seq, out.lp, config.weights);
    ad::check_finite(out.dcu->value, "L_DCU");
    return out;
}

std::vector<double> validation_f1(const CoherenceConfig& config, ParamStore& store,
                                  const std::vector<GatGraphView>& cviews,
                                  const std::vector<GatGraphView>& pviews) {
    std::vector<long> tp(kNumRelations, 0), fp(kNumRelations, 0), fn(kNumRelations, 0);
    for (std::size_t g = 0; g < cviews.size(); ++g) {
        Tape tape;
        Node* h_c = encode_context(tape, config, store, cviews[g]);
        Node* h_p = encode_persona(tape, config, store, pviews[g]);
        Node* h_d = fuse(tape, config, store, h_c, h_p);
        const auto& view = cviews[g];
        if (view.base_edges.empty()) continue;
        std::vector<int> srcs, dsts;
        for (const auto& [i, j] : view.base_edges) {
            srcs.push_back(i);
            dsts.push_back(j);
        }
        Node* pairs =
            tape.concat_cols(tape.gather_rows(h_d, srcs), tape.gather_rows(h_d, dsts));
        Node* logits = head_mlp(tape, store, "dcu.rc", pairs);
        for (long e = 0; e < logits->value.rows(); ++e) {
            for (int c = 0; c < kNumRelations; ++c) {
                bool pred = logits->value(e, c) > 0.0; // sigmoid(z) > 0.5
                bool gold = view.rel_multihot(e, c) > 0.5;
                if (pred && gold) ++tp[static_cast<std::size_t>(c)];
                if (pred && !gold) ++fp[static_cast<std::size_t>(c)];
                if (!pred && gold) ++fn[static_cast<std::size_t>(c)];
            }
        }
    }
    std::vector<double> f1(kNumRelations, 0.0);
    for (int c = 0; c < kNumRelations; ++c) {
        long denom = 2 * tp[static_cast<std::size_t>(c)] + fp[static_cast<std::size_t>(c)] +
                     fn[static_cast<std::size_t>(c)];
        f1[static_cast<std::size_t>(c)] =
            denom == 0 ? 0.0
                       : 2.0 * static_cast<double>(tp[static_cast<std::size_t>(c)]) /
                             static_cast<double>(denom);
    }
    return f1;
}

} // namespace

FinetuneResult run_finetune(const CoherenceConfig& config, const GraphSet& set,
                            const Checkpoint* pretrain_ckpt) {
    if (set.graphs.empty()) throw ArgumentError("run_finetune: no graphs");
    if (set.personas.size() != set.graphs.size()) {
        throw ArgumentError("run_finetune: persona/graph count mismatch");
    }

    Rng rng(config.seed);
    ParamStore store;
    init_coherence_params(store, config, rng);

    // Warm-start the context encoder from the pre-training checkpoint.
    if (pretrain_ckpt != nullptr) {
        for (const auto& [name, e] : pretrain_ckpt->params) {
            if (name.rfind("encoder.", 0) != 0) continue;
            std::string target = "context." + name.substr(8);
            if (!store.has(target)) continue;
            if (store.value(target).rows() != e.value.rows() ||
                store.value(target).cols() != e.value.cols()) {
                throw ConfigError("pretrain checkpoint shape mismatch for " + target);
            }
            store.value(target) = e.value;
        }
    }

    std::vector<GatGraphView> cviews, pviews;
    for (std::size_t g = 0; g < set.graphs.size(); ++g) {
        cviews.push_back(make_gat_view(set.graphs[g], /*with_relations=*/true));
        pviews.push_back(make_gat_view(set.personas[g]));
    }

    std::size_t holdout = std::max<std::size_t>(
        1, static_cast<std::size_t>(static_cast<double>(set.graphs.size()) *
                                    config.holdout_fraction));
    if (holdout >= set.graphs.size()) holdout = set.graphs.size() > 1 ? 1 : 0;
    std::size_t train_count = set.graphs.size() - holdout;

    std::vector<DialogueGraph> train_graphs(set.graphs.begin(),
                                            set.graphs.begin() +
                                                static_cast<long>(train_count));
    Mat class_weights = class_balanced_weights(relation_class_counts(train_graphs),
                                               config.cb_beta);

    std::vector<GatGraphView> val_cviews(cviews.begin() + static_cast<long>(train_count),
                                         cviews.end());
    std::vector<GatGraphView> val_pviews(pviews.begin() + static_cast<long>(train_count),
                                         pviews.end());

    AdamOptimizer opt(config.lr);
    ParamStore last_good = store;
    FinetuneResult result;

    Rng seed_rng = rng.fork(99);
    std::vector<std::uint64_t> lp_seeds;
    for (std::size_t g = 0; g < set.graphs.size(); ++g) lp_seeds.push_back(seed_rng.next_u64());

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        DcuEpochLoss accum;
        accum.epoch = epoch;
        int count = 0;
        bool bad = false;
        for (std::size_t start = 0; start < train_count;
             start += static_cast<std::size_t>(config.batch_size)) {
            std::size_t end =
                std::min(train_count, start + static_cast<std::size_t>(config.batch_size));
            store.zero_grad();
            Tape tape;
            Node* batch_loss = nullptr;
            double rc = 0, direct = 0, seq = 0, lp = 0, dcu = 0;
            try {
                for (std::size_t g = start; g < end; ++g) {
                    auto losses = dialogue_losses(tape, config, store, cviews[g], pviews[g],
                                                  class_weights, lp_seeds[g]);
                    Node* scaled = tape.cmul(losses.dcu, 1.0 / static_cast<double>(end - start));
                    batch_loss = batch_loss == nullptr ? scaled : tape.add(batch_loss, scaled);
                    rc += losses.rc->value(0, 0);
                    direct += losses.direct->value(0, 0);
                    seq += losses.seq->value(0, 0);
                    lp += losses.lp->value(0, 0);
                    dcu += losses.dcu->value(0, 0);
                }
            } catch (const NumericError&) {
                bad = true;
                break;
            }
            tape.backward(batch_loss);
            opt.step(store);
            double bs = static_cast<double>(end - start);
            accum.rc += rc / bs;
            accum.direct += direct / bs;
            accum.seq += seq / bs;
            accum.lp += lp / bs;
            accum.dcu += dcu / bs;
            ++count;
        }
        if (bad) {
            result.diverged = true;
            store = last_good;
            break;
        }
        if (count > 0) {
            accum.rc /= count;
            accum.direct /= count;
            accum.seq /= count;
            accum.lp /= count;
            accum.dcu /= count;
        }
        accum.per_class_f1 = val_cviews.empty()
                                 ? std::vector<double>(kNumRelations, 0.0)
                                 : validation_f1(config, store, val_cviews, val_pviews);
        result.log.push_back(accum);
        last_good = store;
    }

    result.checkpoint.stage = "coherence";
    result.checkpoint.config_hash = config.config_hash;
    result.checkpoint.meta = {
        {"emb_dim", config.emb_dim},
        {"in_dim", config.context_gat.in_dim},
        {"per_head_dim", config.context_gat.per_head_dim},
        {"num_layers", config.context_gat.num_layers},
        {"num_heads", config.context_gat.num_heads},
        {"lambda", config.context_gat.lambda_decay},
        {"combine",
         config.context_gat.combine == ChannelCombine::Separate ? "separate" : "joint"},
        {"fusion_heads", config.fusion_heads},
        {"head_hidden", config.head_hidden},
        {"weights",
         {config.weights.alpha, config.weights.beta, config.weights.gamma,
          config.weights.delta}},
        {"cb_beta", config.cb_beta},
        {"negative_ratio", config.negative_ratio},
        {"type_threshold", config.type_threshold},
    };
    result.checkpoint.params = store;
    return result;
}

CoherenceConfig coherence_config_from_checkpoint(const Checkpoint& ckpt) {
    const auto& m = ckpt.meta;
    CoherenceConfig c = default_coherence_config(m.at("in_dim").get<int>(),
                                                 m.at("emb_dim").get<int>());
    c.context_gat.per_head_dim = m.at("per_head_dim").get<int>();
    c.context_gat.num_layers = m.at("num_layers").get<int>();
    c.context_gat.num_heads = m.at("num_heads").get<int>();
    c.context_gat.lambda_decay = m.at("lambda").get<double>();
    c.context_gat.combine = m.at("combine").get<std::string>() == "joint"
                                ? ChannelCombine::Joint
                                : ChannelCombine::Separate;
    c.persona_gat = c.context_gat;
    c.persona_gat.use_relations = false;
    c.fusion_heads = m.at("fusion_heads").get<int>();
    c.head_hidden = m.at("head_hidden").get<int>();
    auto w = m.at("weights").get<std::vector<double>>();
    c.weights = {w[0], w[1], w[2], w[3]};
    c.cb_beta = m.at("cb_beta").get<double>();
    c.negative_ratio = m.at("negative_ratio").get<double>();
    c.type_threshold = m.at("type_threshold").get<double>();
    return c;
}

void write_dcu_csv(const std::string& path, const std::vector<DcuEpochLoss>& log) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write loss log: " + path);
    out << "epoch,l_rc,l_direct,l_seq,l_lp,l_dcu";
    for (const auto& name : relation_names()) out << ",f1_" << name;
    out << "\n";
    out.precision(17);
    for (const auto& e : log) {
        out << e.epoch << ',' << e.rc << ',' << e.direct << ',' << e.seq << ',' << e.lp
            << ',' << e.dcu;
        for (double f : e.per_class_f1) out << ',' << f;
        out << "\n";
    }
}

} // namespace mudi
