#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mudi/autodiff.hpp"
#include "mudi/checkpoint.hpp"
#include "mudi/dialogue_gat.hpp"
#include "mudi/graph.hpp"

namespace mudi {

// Self-supervised pre-training of the dialogue graph encoder with three
// tasks: shortest-path prediction (MSE), turn classification (BCE on
// same-speaker flags of successive utterances) and graph reconstruction
// realized as successor prediction (CE over in-graph candidates).

struct SppPair {
    int u = 0;
    int v = 0;
    int distance = 0; // BFS hops over the undirected union of all edge sets
};

struct PretrainExample {
    std::vector<SppPair> spp;
    std::vector<std::pair<int, int>> tc_pairs; // successive utterances (i, i+1)
    std::vector<int> tc_labels;                // 1 iff same speaker
    std::vector<int> gr_nodes;                 // nodes with a successor (0..N-2)
    std::vector<int> gr_targets;               // gr_targets[k] = gr_nodes[k] + 1
};

// BFS distance over the undirected union of base/order/turn edges; -1 when
// unreachable.
int bfs_distance(const DialogueGraph& graph, int from, int to);

// Samples `num_pairs` distinct reachable node pairs (resampling on
// disconnected ones); throws StateError when no reachable pair exists.
std::vector<SppPair> shortest_path_targets(const DialogueGraph& graph, int num_pairs,
                                           std::uint64_t seed);

PretrainExample build_pretrain_example(const DialogueGraph& graph, int num_pairs,
                                       std::uint64_t seed);

// Task heads: {prefix}.spp.{W1,b1,W2,b2}, {prefix}.tc.{W1,b1,W2,b2},
// {prefix}.gr.W.
void init_pretrain_heads(ParamStore& store, int emb_dim, int hidden, Rng& rng,
                         const std::string& prefix = "heads");

struct PretrainLossNodes {
    ad::Node* spp = nullptr;
    ad::Node* tc = nullptr;
    ad::Node* gr = nullptr;
    ad::Node* da = nullptr; // spp + tc + gr
};

// Losses over a batch: `encodings[g]` are the encoder outputs for
// `examples[g]`. Item-level means per task across the whole batch; tasks
// with no items contribute an exact zero.
PretrainLossNodes pretrain_losses(ad::Tape& tape,
                                  const std::vector<ad::Node*>& encodings,
                                  const std::vector<PretrainExample>& examples,
                                  ParamStore& store,
                                  const std::string& prefix = "heads");

struct PretrainConfig {
    GatConfig gat;       // use_relations stays false during pre-training
    int head_hidden = 32;
    int num_pairs = 8;
    int epochs = 200;
    double lr = 1e-3;
    int batch_size = 4;
    double holdout_fraction = 0.2;
    std::uint64_t seed = 42;
    std::string config_hash;
};

struct EpochLoss {
    int epoch = 0;
    double spp = 0.0, tc = 0.0, gr = 0.0, da = 0.0;
};

struct PretrainResult {
    Checkpoint checkpoint;
    std::vector<EpochLoss> log; // training losses per epoch
    double holdout_epoch0 = 0.0;
    double holdout_final = 0.0;
    bool diverged = false;
};

PretrainResult run_pretraining(const PretrainConfig& config,
                               const std::vector<DialogueGraph>& graphs);

void write_loss_csv(const std::string& path, const std::vector<EpochLoss>& log);

} // namespace mudi
