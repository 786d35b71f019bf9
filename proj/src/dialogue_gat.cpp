#include "mudi/dialogue_gat.hpp"

#include <algorithm>
#include <cmath>

#include "mudi/errors.hpp"

namespace mudi {

using ad::Node;
using ad::Tape;

GatGraphView make_gat_view(const DialogueGraph& g, bool with_relations) {
    GatGraphView v;
    v.features = g.node_features;
    v.base_edges = g.base_edges;
    v.order_edges = g.order_edges;
    v.turn_edges = g.turn_edges;
    v.order_delta.reserve(g.order_edges.size());
    for (const auto& [i, j] : g.order_edges) {
        v.order_delta.push_back(std::abs(g.orders[static_cast<std::size_t>(i)] -
                                         g.orders[static_cast<std::size_t>(j)]));
    }
    if (with_relations) {
        v.has_relations = true;
        v.rel_multihot = Mat::Zero(static_cast<long>(g.base_edges.size()), kNumRelations);
        for (std::size_t e = 0; e < g.base_edges.size(); ++e) {
            auto it = g.edge_relations.find(g.base_edges[e]);
            if (it == g.edge_relations.end()) {
                throw StateError("graph '" + g.dialogue_id +
                                 "' has a base edge without relation labels");
            }
            for (auto l : it->second) {
                v.rel_multihot(static_cast<long>(e), static_cast<int>(l)) = 1.0;
            }
        }
    }
    return v;
}

GatGraphView make_gat_view(const PersonaGraph& g) {
    GatGraphView v;
    v.features = g.node_features;
    v.base_edges = g.edges;
    return v;
}

void init_gat_params(ParamStore& store, const GatConfig& config, Rng& rng,
                     const std::string& prefix) {
    for (int l = 0; l < config.num_layers; ++l) {
        int fin = config.layer_in_dim(l);
        int fout = config.layer_out_dim(l);
        std::string lp = prefix + ".layer" + std::to_string(l);
        for (int h = 0; h < config.num_heads; ++h) {
            std::string hp = lp + ".head" + std::to_string(h);
            store.create_xavier(hp + ".W", fin, fout, rng);
            store.create_xavier(hp + ".a_base", 2 * fout, 1, rng);
            store.create_xavier(hp + ".a_order", 2 * fout, 1, rng);
            store.create_xavier(hp + ".a_turn", 2 * fout, 1, rng);
        }
        if (config.use_relations) {
            store.create_xavier(lp + ".rel_emb", kNumRelations, fout, rng);
        }
    }
    if (config.lambda_learnable) {
        store.create_constant(prefix + ".lambda", 1, 1, config.lambda_decay);
    }
}

namespace {

struct EdgeIndex {
    std::vector<int> src;
    std::vector<int> dst;
};

EdgeIndex split_edges(const std::vector<Edge>& edges) {
    EdgeIndex idx;
    idx.src.reserve(edges.size());
    idx.dst.reserve(edges.size());
    for (const auto& [i, j] : edges) {
        idx.src.push_back(i);
        idx.dst.push_back(j);
    }
    return idx;
}

// Channel message terms for one head: per-edge source/destination transforms,
// raw scores, and the per-edge message payload (the source transform).
struct ChannelNodes {
    Node* scores = nullptr;   // [E x 1]
    Node* payload = nullptr;  // [E x F_out]
};

ChannelNodes channel_nodes(Tape& tape, Node* hw, const EdgeIndex& idx, Node* a,
                           double leaky_slope, Node* rel_term /*nullable*/,
                           const Mat* score_scale /*nullable, [E x 1]*/) {
    ChannelNodes out;
    if (idx.src.empty()) return out;
    Node* src = tape.gather_rows(hw, idx.src);
    if (rel_term != nullptr) src = tape.add(src, rel_term);
    Node* dst = tape.gather_rows(hw, idx.dst);
    Node* cat = tape.concat_cols(src, dst); // [W h_i || W h_j]
    Node* act = tape.leaky_relu(cat, leaky_slope);
    Node* scores = tape.matmul(act, a); // [E x 1]
    if (score_scale != nullptr) scores = tape.cmul_mat(scores, *score_scale);
    out.scores = scores;
    out.payload = src;
    return out;
}

Node* broadcast_alpha(Tape& tape, Node* alpha, long cols) {
    return tape.matmul(alpha, tape.input(Mat::Ones(1, cols)));
}

void record_trace(AttentionTrace::Channel& ch, const std::vector<Edge>& edges,
                  Node* alpha) {
    ch.edges = edges;
    ch.weights.resize(edges.size());
    for (std::size_t e = 0; e < edges.size(); ++e) {
        ch.weights[e] = alpha->value(static_cast<long>(e), 0);
    }
}

} // namespace

Node* gat_forward(Tape& tape, const GatConfig& config, ParamStore& store,
                  const std::string& prefix, const GatGraphView& view,
                  AttentionTrace* trace) {
    if (config.num_layers < 1) throw ArgumentError("gat_forward: need >= 1 layer");
    int n = view.num_nodes();
    if (view.features.cols() != config.in_dim) {
        throw ConfigError("gat_forward: feature dim " +
                          std::to_string(view.features.cols()) + " != configured in_dim " +
                          std::to_string(config.in_dim));
    }

    std::vector<Edge> base_edges = view.base_edges;
    Mat rel_multihot = view.rel_multihot;
    if (config.self_loops) {
        for (int i = 0; i < n; ++i) base_edges.push_back({i, i});
        if (config.use_relations && rel_multihot.size() > 0) {
            Mat padded = Mat::Zero(static_cast<long>(base_edges.size()), kNumRelations);
            padded.topRows(rel_multihot.rows()) = rel_multihot;
            rel_multihot = padded;
        }
    }
    EdgeIndex base_idx = split_edges(base_edges);
    EdgeIndex order_idx = split_edges(view.order_edges);
    EdgeIndex turn_idx = split_edges(view.turn_edges);

    // Order-decay multipliers on the raw scores. With a learnable lambda the
    // multiplier enters the tape; otherwise it is a constant.
    Node* lambda_node = nullptr;
    Mat order_scale(static_cast<long>(view.order_edges.size()), 1);
    if (config.lambda_learnable) {
        auto& e = store.at(prefix + ".lambda");
        lambda_node = tape.param(e.value, e.grad);
    } else {
        for (std::size_t e = 0; e < view.order_edges.size(); ++e) {
            order_scale(static_cast<long>(e), 0) =
                std::exp(-config.lambda_decay * view.order_delta[e]);
        }
    }

    // Channel presence per node: in-degree > 0, per channel.
    std::vector<std::array<int, 3>> indeg(static_cast<std::size_t>(n), {0, 0, 0});
    for (int d : base_idx.dst) indeg[static_cast<std::size_t>(d)][0] = 1;
    for (int d : order_idx.dst) indeg[static_cast<std::size_t>(d)][1] = 1;
    for (int d : turn_idx.dst) indeg[static_cast<std::size_t>(d)][2] = 1;

    if (trace != nullptr) trace->layers.clear();

    Node* h = tape.input(view.features);
    for (int layer = 0; layer < config.num_layers; ++layer) {
        bool final_layer = layer + 1 == config.num_layers;
        int fout = config.layer_out_dim(layer);
        std::string lp = prefix + ".layer" + std::to_string(layer);

        Node* rel_rows = nullptr; // [E_base x fout]
        if (config.use_relations) {
            if (!view.has_relations) {
                throw StateError("gat_forward: relations requested but none in view");
            }
            if (!base_edges.empty()) {
                auto& re = store.at(lp + ".rel_emb");
                Node* rel_emb = tape.param(re.value, re.grad);
                rel_rows = tape.matmul(tape.input(rel_multihot), rel_emb);
            }
        }

        if (trace != nullptr) {
            trace->layers.emplace_back(
                std::vector<std::array<AttentionTrace::Channel, 3>>(
                    static_cast<std::size_t>(config.num_heads)));
        }

        std::vector<Node*> head_outputs;
        for (int head = 0; head < config.num_heads; ++head) {
            std::string hp = lp + ".head" + std::to_string(head);
            auto& we = store.at(hp + ".W");
            auto& ab = store.at(hp + ".a_base");
            auto& ao = store.at(hp + ".a_order");
            auto& at = store.at(hp + ".a_turn");
            Node* w = tape.param(we.value, we.grad);
            Node* hw = tape.matmul(h, w); // [N x fout]

            Node* order_scale_node = nullptr;
            const Mat* order_scale_ptr = nullptr;
            ChannelNodes base_ch = channel_nodes(tape, hw, base_idx,
                                                 tape.param(ab.value, ab.grad),
                                                 config.leaky_slope, rel_rows, nullptr);
            ChannelNodes order_ch;
            if (!order_idx.src.empty()) {
                Node* a_order = tape.param(ao.value, ao.grad);
                if (lambda_node != nullptr) {
                    Mat deltas(static_cast<long>(view.order_delta.size()), 1);
                    for (std::size_t e = 0; e < view.order_delta.size(); ++e) {
                        deltas(static_cast<long>(e), 0) = view.order_delta[e];
                    }
                    Node* lam_col = tape.matmul(tape.input(deltas), lambda_node);
                    order_scale_node = tape.exp_(tape.neg(lam_col));
                    order_ch = channel_nodes(tape, hw, order_idx, a_order,
                                             config.leaky_slope, nullptr, nullptr);
                    order_ch.scores = tape.mul(order_ch.scores, order_scale_node);
                } else {
                    order_scale_ptr = &order_scale;
                    order_ch = channel_nodes(tape, hw, order_idx, a_order,
                                             config.leaky_slope, nullptr, order_scale_ptr);
                }
            }
            ChannelNodes turn_ch = channel_nodes(tape, hw, turn_idx,
                                                 tape.param(at.value, at.grad),
                                                 config.leaky_slope, nullptr, nullptr);

            Node* head_out = nullptr;
            if (config.combine == ChannelCombine::Separate) {
                // Per-channel softmax over each destination's incoming edges,
                // mean over channels present for that node.
                Node* acc = nullptr;
                std::array<ChannelNodes*, 3> chans = {&base_ch, &order_ch, &turn_ch};
                std::array<const EdgeIndex*, 3> idxs = {&base_idx, &order_idx, &turn_idx};
                std::array<const std::vector<Edge>*, 3> edges = {
                    &base_edges, &view.order_edges, &view.turn_edges};
                for (int c = 0; c < 3; ++c) {
                    if (chans[static_cast<std::size_t>(c)]->scores == nullptr) continue;
                    Node* alpha = tape.segment_softmax(
                        chans[static_cast<std::size_t>(c)]->scores,
                        idxs[static_cast<std::size_t>(c)]->dst, n);
                    if (trace != nullptr) {
                        record_trace(trace->layers.back()[static_cast<std::size_t>(head)]
                                         [static_cast<std::size_t>(c)],
                                     *edges[static_cast<std::size_t>(c)], alpha);
                    }
                    Node* msg = tape.mul(chans[static_cast<std::size_t>(c)]->payload,
                                         broadcast_alpha(tape, alpha, fout));
                    Node* agg = tape.segment_sum(msg, idxs[static_cast<std::size_t>(c)]->dst, n);
                    acc = acc == nullptr ? agg : tape.add(acc, agg);
                }
                Mat channel_scale = Mat::Zero(n, fout);
                Mat iso_mask = Mat::Zero(n, fout);
                for (int i = 0; i < n; ++i) {
                    int count = indeg[static_cast<std::size_t>(i)][0] +
                                indeg[static_cast<std::size_t>(i)][1] +
                                indeg[static_cast<std::size_t>(i)][2];
                    if (count == 0) {
                        iso_mask.row(i).setOnes();
                    } else {
                        channel_scale.row(i).setConstant(1.0 / count);
                    }
                }
                Node* combined = acc == nullptr
                                     ? tape.input(Mat::Zero(n, fout))
                                     : tape.cmul_mat(acc, channel_scale);
                head_out = tape.add(combined, tape.cmul_mat(hw, iso_mask));
            } else {
                // Joint normalization: one softmax per destination over the
                // concatenated (base, order, turn) score list.
                std::vector<Node*> score_parts;
                std::vector<Node*> payload_parts;
                std::vector<int> joint_dst;
                std::array<ChannelNodes*, 3> chans = {&base_ch, &order_ch, &turn_ch};
                std::array<const EdgeIndex*, 3> idxs = {&base_idx, &order_idx, &turn_idx};
                for (int c = 0; c < 3; ++c) {
                    if (chans[static_cast<std::size_t>(c)]->scores == nullptr) continue;
                    score_parts.push_back(chans[static_cast<std::size_t>(c)]->scores);
                    payload_parts.push_back(chans[static_cast<std::size_t>(c)]->payload);
                    const auto& dst = idxs[static_cast<std::size_t>(c)]->dst;
                    joint_dst.insert(joint_dst.end(), dst.begin(), dst.end());
                }
                Node* head_acc = nullptr;
                if (!score_parts.empty()) {
                    Node* all_scores = tape.concat_rows(score_parts);
                    Node* all_payload = tape.concat_rows(payload_parts);
                    Node* alpha = tape.segment_softmax(all_scores, joint_dst, n);
                    if (trace != nullptr) {
                        // Split the joint weights back per channel for inspection.
                        std::size_t offset = 0;
                        std::array<const std::vector<Edge>*, 3> edges = {
                            &base_edges, &view.order_edges, &view.turn_edges};
                        for (int c = 0; c < 3; ++c) {
                            const auto& ce = *edges[static_cast<std::size_t>(c)];
                            if (ce.empty()) continue;
                            auto& ch = trace->layers.back()[static_cast<std::size_t>(head)]
                                                          [static_cast<std::size_t>(c)];
                            ch.edges = ce;
                            ch.weights.resize(ce.size());
                            for (std::size_t e = 0; e < ce.size(); ++e) {
                                ch.weights[e] =
                                    alpha->value(static_cast<long>(offset + e), 0);
                            }
                            offset += ce.size();
                        }
                    }
                    Node* msg = tape.mul(all_payload, broadcast_alpha(tape, alpha, fout));
                    head_acc = tape.segment_sum(msg, joint_dst, n);
                }
                Mat iso_mask = Mat::Zero(n, fout);
                for (int i = 0; i < n; ++i) {
                    int count = indeg[static_cast<std::size_t>(i)][0] +
                                indeg[static_cast<std::size_t>(i)][1] +
                                indeg[static_cast<std::size_t>(i)][2];
                    if (count == 0) iso_mask.row(i).setOnes();
                }
                if (head_acc == nullptr) head_acc = tape.input(Mat::Zero(n, fout));
                head_out = tape.add(head_acc, tape.cmul_mat(hw, iso_mask));
            }
            head_outputs.push_back(head_out);
        }

        Node* merged;
        if (final_layer) {
            Node* sum = head_outputs[0];
            for (std::size_t i = 1; i < head_outputs.size(); ++i) {
                sum = tape.add(sum, head_outputs[i]);
            }
            merged = tape.cmul(sum, 1.0 / config.num_heads);
        } else {
            merged = tape.concat_cols(head_outputs);
        }
        h = tape.elu(merged);
    }
    return h;
}

Mat gat_encode(const GatConfig& config, ParamStore& store, const std::string& prefix,
               const GatGraphView& view, AttentionTrace* trace) {
    Tape tape;
    Node* out = gat_forward(tape, config, store, prefix, view, trace);
    return out->value;
}

double order_decay(int order_i, int order_j, int d, double lambda) {
    return std::exp(-lambda * std::abs(order_i - order_j)) *
           order_indicator(order_i, order_j, d);
}

ChannelScores channel_scores(const Eigen::VectorXd& h_i, const Eigen::VectorXd& h_j,
                             const Mat& w, const Eigen::VectorXd& a_base,
                             const Eigen::VectorXd& a_order,
                             const Eigen::VectorXd& a_turn, double leaky_slope,
                             double s_ij, double t_ij) {
    if (w.rows() != h_i.size() || h_i.size() != h_j.size()) {
        throw ShapeError("channel_scores: W/feature dims inconsistent");
    }
    Eigen::VectorXd wi = w.transpose() * h_i;
    Eigen::VectorXd wj = w.transpose() * h_j;
    Eigen::VectorXd cat(wi.size() + wj.size());
    cat << wi, wj;
    for (long k = 0; k < cat.size(); ++k) {
        if (cat(k) < 0.0) cat(k) *= leaky_slope;
    }
    if (a_base.size() != cat.size() || a_order.size() != cat.size() ||
        a_turn.size() != cat.size()) {
        throw ShapeError("channel_scores: attention vector dims inconsistent");
    }
    ChannelScores out;
    out.base = a_base.dot(cat);
    out.order = a_order.dot(cat) * s_ij;
    out.turn = a_turn.dot(cat) * t_ij;
    return out;
}

} // namespace mudi
