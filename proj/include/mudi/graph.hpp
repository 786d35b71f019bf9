#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mudi/corpus.hpp"

namespace mudi {

using Mat = Eigen::MatrixXd;

using Edge = std::pair<int, int>; // directed (source, target)

// Dialogue graph: utterance nodes with three typed edge sets.
//   base_edges  — adjacent pairs (i, i+1), carrying relation labels
//   order_edges — forward edges with order difference below d
//   turn_edges  — bidirectional links between utterances of the same turn
struct DialogueGraph {
    std::string dialogue_id;
    Mat node_features; // [N x F]
    std::vector<Edge> base_edges;
    std::vector<Edge> order_edges;
    std::vector<Edge> turn_edges;
    std::map<Edge, std::vector<RelationLabel>> edge_relations; // keys == base_edges
    std::vector<int> orders; // orders[i] == i
    std::vector<int> turns;  // turns[i] == i / 2
    std::vector<int> speakers; // 0 = USER, 1 = BOT (for pretrain labels)

    int num_nodes() const { return static_cast<int>(orders.size()); }
};

// Persona graph: complete digraph without self-loops.
struct PersonaGraph {
    Mat node_features; // [M x F]
    std::vector<Edge> edges;

    int num_nodes() const { return static_cast<int>(node_features.rows()); }
};

// ---------------------------------------------------------------------------
// Embedding providers
// ---------------------------------------------------------------------------

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::string name() const = 0;
    virtual int dim() const = 0;
    virtual Eigen::VectorXd embed(const std::string& text) = 0;
};

// Deterministic fallback: every token hashes to a fixed pseudo-random
// direction; token-count weighted sum, L2-normalized. No model downloads.
class HashEmbeddingProvider : public EmbeddingProvider {
public:
    explicit HashEmbeddingProvider(int dim = 64, std::uint64_t seed = 0x5EED);
    std::string name() const override { return "fallback"; }
    int dim() const override { return dim_; }
    Eigen::VectorXd embed(const std::string& text) override;

private:
    int dim_;
    std::uint64_t seed_;
};

// External sentence-encoder adapter: POSTs {"text": ...} and expects
// {"embedding": [..]} of the configured dimension. Endpoint from
// MUDI_EMBED_ENDPOINT.
class HttpEmbeddingProvider : public EmbeddingProvider {
public:
    HttpEmbeddingProvider(std::string endpoint, int dim, double timeout_seconds = 10.0);
    std::string name() const override { return "adapter"; }
    int dim() const override { return dim_; }
    Eigen::VectorXd embed(const std::string& text) override;

private:
    std::string host_;
    std::string path_;
    int dim_;
    double timeout_seconds_;
};

// "fallback" or "adapter" (adapter requires MUDI_EMBED_ENDPOINT).
std::unique_ptr<EmbeddingProvider> make_embedding_provider(const std::string& which,
                                                           int dim);

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

// 1 iff order_j > order_i and |order_i - order_j| < d.
int order_indicator(int order_i, int order_j, int d);

DialogueGraph build_dialogue_graph(const Dialogue& dialogue, EmbeddingProvider& provider,
                                   int d);

PersonaGraph build_persona_graph(const std::vector<std::string>& persona,
                                 EmbeddingProvider& provider);

// Corpus-wide relation frequencies over base edges (count of edges whose
// label set contains each relation).
std::map<RelationLabel, std::size_t> relation_frequencies(
    const std::vector<DialogueGraph>& graphs);

// The high-frequency label set: labels with frequency strictly above the
// given quantile of the per-label frequency distribution.
std::set<RelationLabel> high_frequency_labels(
    const std::map<RelationLabel, std::size_t>& freq, double quantile);

// Drops base edges labeled exclusively with high-frequency relations with
// probability (1 - keep_prob); order/turn edges untouched.
std::vector<DialogueGraph> prune_for_balance(const std::vector<DialogueGraph>& graphs,
                                             double keep_prob, double high_freq_quantile,
                                             std::uint64_t seed);

// ---------------------------------------------------------------------------
// Serialization (JSON, lossless round-trip)
// ---------------------------------------------------------------------------

std::string graph_to_json_line(const DialogueGraph& g);
DialogueGraph graph_from_json_line(const std::string& line);

// graphs/ directory layout: meta.json + graphs.jsonl (one DialogueGraph per
// line) + personas.jsonl (node features of each dialogue's persona graph;
// the complete-digraph edges are implied).
struct GraphSetMeta {
    std::string provider;
    int dim = 0;
    int d = 0;
    double keep_prob = 1.0;
    double quantile = 0.75;
    std::uint64_t seed = 0;
    std::string config_hash;
};

struct GraphSet {
    std::vector<DialogueGraph> graphs;
    std::vector<PersonaGraph> personas; // aligned with graphs by index
    GraphSetMeta meta;
};

void save_graph_set(const std::string& dir, const GraphSet& set);
GraphSet load_graph_set(const std::string& dir);

} // namespace mudi
