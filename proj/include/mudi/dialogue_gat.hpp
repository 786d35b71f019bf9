#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mudi/autodiff.hpp"
#include "mudi/graph.hpp"
#include "mudi/params.hpp"

namespace mudi {

// DialogueGAT: GATv2-style scoring with three channels per layer —
// base (relation-bearing adjacent edges), order (forward edges weighted by
// exponential order decay) and turn (same-turn edges). Per destination node
// each channel is softmax-normalized over its incoming edges; channel
// messages are mean-combined ("separate", default) or normalized jointly
// across channels ("joint").

enum class ChannelCombine { Separate, Joint };

struct GatConfig {
    int in_dim = 64;
    int per_head_dim = 16; // hidden layers concat heads: width = heads * per_head_dim
    int out_dim = 64;      // final layer: every head emits out_dim, heads averaged
    int num_layers = 2;
    int num_heads = 4;
    double lambda_decay = 0.5;
    bool lambda_learnable = false;
    double leaky_slope = 0.2;
    bool use_relations = false; // embed relation labels into the base channel
    ChannelCombine combine = ChannelCombine::Separate;
    bool self_loops = false;

    int layer_in_dim(int layer) const {
        return layer == 0 ? in_dim : num_heads * per_head_dim;
    }
    int layer_out_dim(int layer) const {
        return layer + 1 == num_layers ? out_dim : per_head_dim;
    }
};

// Per-edge attention weights for inspection and tests.
struct AttentionTrace {
    struct Channel {
        std::vector<Edge> edges;
        std::vector<double> weights;
    };
    // [layer][head][channel], channel 0 = base, 1 = order, 2 = turn.
    std::vector<std::vector<std::array<Channel, 3>>> layers;
};

// Graph as the layer consumes it. `order_delta` holds |order(i) - order(j)|
// per order edge; `rel_multihot` is [E_base x 17] when relations are carried
// (has_relations distinguishes an empty edge list from missing labels).
struct GatGraphView {
    Mat features; // [N x F_in]
    std::vector<Edge> base_edges;
    std::vector<Edge> order_edges;
    std::vector<Edge> turn_edges;
    std::vector<double> order_delta;
    Mat rel_multihot;
    bool has_relations = false;

    int num_nodes() const { return static_cast<int>(features.rows()); }
};

GatGraphView make_gat_view(const DialogueGraph& g, bool with_relations);
GatGraphView make_gat_view(const PersonaGraph& g);

// Parameter names: {prefix}.layer{L}.head{H}.{W,a_base,a_order,a_turn},
// optional {prefix}.lambda and {prefix}.layer{L}.rel_emb.
void init_gat_params(ParamStore& store, const GatConfig& config, Rng& rng,
                     const std::string& prefix);

// Forward pass on the tape; returns [N x out_dim] node embeddings.
ad::Node* gat_forward(ad::Tape& tape, const GatConfig& config, ParamStore& store,
                      const std::string& prefix, const GatGraphView& view,
                      AttentionTrace* trace = nullptr);

// Convenience: forward without gradients, returning a plain matrix.
Mat gat_encode(const GatConfig& config, ParamStore& store, const std::string& prefix,
               const GatGraphView& view, AttentionTrace* trace = nullptr);

// --- scalar building blocks (unit-testable, mirror the layer math) ---------

// exp(-lambda * |order_i - order_j|) * I(i, j, d).
double order_decay(int order_i, int order_j, int d, double lambda);

struct ChannelScores {
    double base = 0.0;
    double order = 0.0;
    double turn = 0.0;
};

// Scores for one (i, j) pair given shared W and per-channel attention vectors.
ChannelScores channel_scores(const Eigen::VectorXd& h_i, const Eigen::VectorXd& h_j,
                             const Mat& w, const Eigen::VectorXd& a_base,
                             const Eigen::VectorXd& a_order,
                             const Eigen::VectorXd& a_turn, double leaky_slope,
                             double s_ij, double t_ij);

} // namespace mudi
