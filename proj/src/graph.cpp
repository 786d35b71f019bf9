#include "mudi/graph.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>
#include <httplib.h>

#include "mudi/errors.hpp"
#include "mudi/rng.hpp"
#include "mudi/text.hpp"

namespace mudi {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Embedding providers
// ---------------------------------------------------------------------------

HashEmbeddingProvider::HashEmbeddingProvider(int dim, std::uint64_t seed)
    : dim_(dim), seed_(seed) {
    if (dim < 1) throw ArgumentError("embedding dim must be >= 1");
}

Eigen::VectorXd HashEmbeddingProvider::embed(const std::string& text) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(dim_);
    auto tokens = tokenize_words(text);
    for (const auto& tok : tokens) {
        // Each token maps to a fixed pseudo-random direction.
        std::uint64_t state = fnv1a64(tok) ^ seed_;
        for (int i = 0; i < dim_; ++i) {
            std::uint64_t bits = splitmix64(state);
            double u = static_cast<double>(bits >> 11) * 0x1.0p-53; // [0,1)
            v(i) += 2.0 * u - 1.0;
        }
    }
    double norm = v.norm();
    if (norm > 0.0) {
        v /= norm;
    } else {
        v(0) = 1.0; // token-free text falls back to a fixed unit vector
    }
    return v;
}

HttpEmbeddingProvider::HttpEmbeddingProvider(std::string endpoint, int dim,
                                             double timeout_seconds)
    : dim_(dim), timeout_seconds_(timeout_seconds) {
    auto pos = endpoint.find("://");
    std::string rest = pos == std::string::npos ? endpoint : endpoint.substr(pos + 3);
    auto slash = rest.find('/');
    if (slash == std::string::npos) {
        host_ = "http://" + rest;
        path_ = "/";
    } else {
        host_ = "http://" + rest.substr(0, slash);
        path_ = rest.substr(slash);
    }
}

Eigen::VectorXd HttpEmbeddingProvider::embed(const std::string& text) {
    httplib::Client client(host_);
    client.set_connection_timeout(
        std::chrono::milliseconds(static_cast<int>(timeout_seconds_ * 1000)));
    client.set_read_timeout(
        std::chrono::milliseconds(static_cast<int>(timeout_seconds_ * 1000)));
    json req = {{"text", text}};
    auto res = client.Post(path_, req.dump(), "application/json");
    if (!res || res->status != 200) {
        throw ParseError("embedding endpoint unreachable or returned error");
    }
    json reply = json::parse(res->body);
    auto vec = reply.at("embedding").get<std::vector<double>>();
    if (static_cast<int>(vec.size()) != dim_) {
        throw ConfigError("embedding adapter returned dim " + std::to_string(vec.size()) +
                          ", expected " + std::to_string(dim_));
    }
    Eigen::VectorXd v(dim_);
    for (int i = 0; i < dim_; ++i) v(i) = vec[static_cast<std::size_t>(i)];
    if (!v.allFinite()) throw NumericError("embedding adapter returned non-finite values");
    return v;
}

std::unique_ptr<EmbeddingProvider> make_embedding_provider(const std::string& which,
                                                           int dim) {
    if (which == "fallback") {
        return std::make_unique<HashEmbeddingProvider>(dim);
    }
    if (which == "adapter") {
        const char* endpoint = std::getenv("MUDI_EMBED_ENDPOINT");
        if (endpoint == nullptr || *endpoint == '\0') {
            throw ConfigError("provider 'adapter' requires MUDI_EMBED_ENDPOINT");
        }
        return std::make_unique<HttpEmbeddingProvider>(endpoint, dim);
    }
    throw ConfigError("unknown embedding provider: " + which);
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

int order_indicator(int order_i, int order_j, int d) {
    if (d < 1) throw ArgumentError("order_indicator: d must be >= 1");
    return (order_j > order_i && std::abs(order_i - order_j) < d) ? 1 : 0;
}

DialogueGraph build_dialogue_graph(const Dialogue& dialogue, EmbeddingProvider& provider,
                                   int d) {
    if (d < 1) throw ArgumentError("build_dialogue_graph: d must be >= 1");
    if (!dialogue.annotated()) {
        throw StateError("dialogue '" + dialogue.dialogue_id +
                         "' must be annotated before graph construction");
    }
    int n = static_cast<int>(dialogue.utterances.size());

    DialogueGraph g;
    g.dialogue_id = dialogue.dialogue_id;
    g.node_features = Mat(n, provider.dim());
    g.orders.resize(static_cast<std::size_t>(n));
    g.turns.resize(static_cast<std::size_t>(n));
    g.speakers.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto& u = dialogue.utterances[static_cast<std::size_t>(i)];
        Eigen::VectorXd e = provider.embed(u.text);
        if (!e.allFinite()) throw NumericError("non-finite embedding for utterance");
        g.node_features.row(i) = e.transpose();
        g.orders[static_cast<std::size_t>(i)] = i;
        g.turns[static_cast<std::size_t>(i)] = u.turn_index;
        g.speakers[static_cast<std::size_t>(i)] = u.speaker == Speaker::User ? 0 : 1;
    }

    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            if (order_indicator(g.orders[static_cast<std::size_t>(i)],
                                g.orders[static_cast<std::size_t>(j)], d) == 1) {
                g.order_edges.push_back({i, j});
            }
            if (g.turns[static_cast<std::size_t>(i)] ==
                g.turns[static_cast<std::size_t>(j)]) {
                g.turn_edges.push_back({i, j});
            }
        }
    }

    for (const auto& a : dialogue.annotations) {
        Edge e{a.source_id, a.target_id};
        g.base_edges.push_back(e);
        g.edge_relations[e] = a.labels;
    }
    std::sort(g.base_edges.begin(), g.base_edges.end());
    std::sort(g.order_edges.begin(), g.order_edges.end());
    std::sort(g.turn_edges.begin(), g.turn_edges.end());
    return g;
}

PersonaGraph build_persona_graph(const std::vector<std::string>& persona,
                                 EmbeddingProvider& provider) {
    if (persona.empty()) throw ArgumentError("persona must be non-empty");
    int m = static_cast<int>(persona.size());
    PersonaGraph g;
    g.node_features = Mat(m, provider.dim());
    for (int i = 0; i < m; ++i) {
        g.node_features.row(i) = provider.embed(persona[static_cast<std::size_t>(i)]).transpose();
    }
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < m; ++j) {
            if (i != j) g.edges.push_back({i, j});
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Pruning
// ---------------------------------------------------------------------------

std::map<RelationLabel, std::size_t> relation_frequencies(
    const std::vector<DialogueGraph>& graphs) {
    std::map<RelationLabel, std::size_t> freq;
    for (const auto& g : graphs) {
        for (const auto& [edge, labels] : g.edge_relations) {
            for (auto l : labels) ++freq[l];
        }
    }
    return freq;
}

std::set<RelationLabel> high_frequency_labels(
    const std::map<RelationLabel, std::size_t>& freq, double quantile) {
    if (quantile <= 0.0 || quantile >= 1.0) {
        throw ArgumentError("high_freq_quantile must be in (0,1)");
    }
    if (freq.empty()) return {};
    std::vector<std::size_t> counts;
    counts.reserve(freq.size());
    for (const auto& [l, c] : freq) counts.push_back(c);
    std::sort(counts.begin(), counts.end());
    // Empirical quantile (nearest-rank on the per-label count distribution).
    auto idx = static_cast<std::size_t>(quantile * static_cast<double>(counts.size() - 1));
    std::size_t threshold = counts[idx];
    std::set<RelationLabel> out;
    for (const auto& [l, c] : freq) {
        if (c > threshold) out.insert(l);
    }
    return out;
}

std::vector<DialogueGraph> prune_for_balance(const std::vector<DialogueGraph>& graphs,
                                             double keep_prob, double high_freq_quantile,
                                             std::uint64_t seed) {
    if (keep_prob < 0.0 || keep_prob > 1.0) {
        throw ArgumentError("keep_prob must be in [0,1]");
    }
    auto freq = relation_frequencies(graphs);
    auto high = high_frequency_labels(freq, high_freq_quantile);

    std::vector<DialogueGraph> out;
    out.reserve(graphs.size());
    Rng base(seed);
    for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
        DialogueGraph g = graphs[gi];
        Rng rng = base.fork(gi);
        std::vector<Edge> kept;
        for (const auto& e : g.base_edges) {
            const auto& labels = g.edge_relations.at(e);
            bool candidate = !labels.empty() &&
                             std::all_of(labels.begin(), labels.end(),
                                         [&](RelationLabel l) { return high.count(l) != 0; });
            bool keep = true;
            if (candidate) keep = rng.uniform() < keep_prob;
            if (keep) {
                kept.push_back(e);
            } else {
                g.edge_relations.erase(e);
            }
        }
        g.base_edges = std::move(kept);
        out.push_back(std::move(g));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

json edges_to_json(const std::vector<Edge>& edges) {
    json arr = json::array();
    for (const auto& [i, j] : edges) arr.push_back({i, j});
    return arr;
}

std::vector<Edge> edges_from_json(const json& arr) {
    std::vector<Edge> out;
    for (const auto& e : arr) out.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
    return out;
}

} // namespace

std::string graph_to_json_line(const DialogueGraph& g) {
    json j;
    j["dialogue_id"] = g.dialogue_id;
    j["dim"] = g.node_features.cols();
    json feats = json::array();
    for (long r = 0; r < g.node_features.rows(); ++r) {
        json row = json::array();
        for (long c = 0; c < g.node_features.cols(); ++c) {
            row.push_back(g.node_features(r, c));
        }
        feats.push_back(row);
    }
    j["node_features"] = feats;
    j["base_edges"] = edges_to_json(g.base_edges);
    j["order_edges"] = edges_to_json(g.order_edges);
    j["turn_edges"] = edges_to_json(g.turn_edges);
    json rels = json::array();
    for (const auto& [edge, labels] : g.edge_relations) {
        json names = json::array();
        for (auto l : labels) names.push_back(relation_name(l));
        rels.push_back({{"source", edge.first}, {"target", edge.second}, {"labels", names}});
    }
    j["edge_relations"] = rels;
    j["orders"] = g.orders;
    j["turns"] = g.turns;
    j["speakers"] = g.speakers;
    return j.dump();
}

DialogueGraph graph_from_json_line(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw ParseError(std::string("invalid graph JSON: ") + e.what());
    }
    DialogueGraph g;
    g.dialogue_id = j.at("dialogue_id").get<std::string>();
    const auto& feats = j.at("node_features");
    long rows = static_cast<long>(feats.size());
    long cols = j.at("dim").get<long>();
    g.node_features = Mat(rows, cols);
    for (long r = 0; r < rows; ++r) {
        const auto& row = feats[static_cast<std::size_t>(r)];
        if (static_cast<long>(row.size()) != cols) {
            throw ParseError("graph feature row has wrong length");
        }
        for (long c = 0; c < cols; ++c) {
            g.node_features(r, c) = row[static_cast<std::size_t>(c)].get<double>();
        }
    }
    g.base_edges = edges_from_json(j.at("base_edges"));
    g.order_edges = edges_from_json(j.at("order_edges"));
    g.turn_edges = edges_from_json(j.at("turn_edges"));
    for (const auto& r : j.at("edge_relations")) {
        Edge e{r.at("source").get<int>(), r.at("target").get<int>()};
        std::vector<RelationLabel> labels;
        for (const auto& name : r.at("labels")) {
            labels.push_back(relation_from_name(name.get<std::string>()));
        }
        g.edge_relations[e] = labels;
    }
    g.orders = j.at("orders").get<std::vector<int>>();
    g.turns = j.at("turns").get<std::vector<int>>();
    g.speakers = j.at("speakers").get<std::vector<int>>();
    return g;
}

void save_graph_set(const std::string& dir, const GraphSet& set) {
    if (set.personas.size() != set.graphs.size()) {
        throw ArgumentError("save_graph_set: persona/graph count mismatch");
    }
    fs::create_directories(dir);
    const auto& meta = set.meta;
    json m = {{"provider", meta.provider}, {"dim", meta.dim},       {"d", meta.d},
              {"keep_prob", meta.keep_prob}, {"quantile", meta.quantile},
              {"seed", meta.seed},          {"config_hash", meta.config_hash}};
    std::ofstream mo(fs::path(dir) / "meta.json");
    if (!mo) throw ParseError("cannot write graph meta in " + dir);
    mo << m.dump(2) << '\n';

    std::ofstream go(fs::path(dir) / "graphs.jsonl");
    if (!go) throw ParseError("cannot write graphs in " + dir);
    for (const auto& g : set.graphs) go << graph_to_json_line(g) << '\n';

    std::ofstream po(fs::path(dir) / "personas.jsonl");
    if (!po) throw ParseError("cannot write personas in " + dir);
    for (std::size_t i = 0; i < set.personas.size(); ++i) {
        const auto& p = set.personas[i];
        json feats = json::array();
        for (long r = 0; r < p.node_features.rows(); ++r) {
            json row = json::array();
            for (long c = 0; c < p.node_features.cols(); ++c) {
                row.push_back(p.node_features(r, c));
            }
            feats.push_back(row);
        }
        po << json({{"dialogue_id", set.graphs[i].dialogue_id}, {"features", feats}}).dump()
           << '\n';
    }
}

GraphSet load_graph_set(const std::string& dir) {
    std::ifstream mi(fs::path(dir) / "meta.json");
    if (!mi) throw ParseError("cannot open graph meta in " + dir);
    json m;
    mi >> m;
    GraphSet set;
    auto& meta = set.meta;
    meta.provider = m.at("provider").get<std::string>();
    meta.dim = m.at("dim").get<int>();
    meta.d = m.at("d").get<int>();
    meta.keep_prob = m.at("keep_prob").get<double>();
    meta.quantile = m.at("quantile").get<double>();
    meta.seed = m.at("seed").get<std::uint64_t>();
    meta.config_hash = m.value("config_hash", "");

    std::ifstream gi(fs::path(dir) / "graphs.jsonl");
    if (!gi) throw ParseError("cannot open graphs.jsonl in " + dir);
    std::string line;
    while (std::getline(gi, line)) {
        if (trim(line).empty()) continue;
        set.graphs.push_back(graph_from_json_line(line));
    }

    std::ifstream pi(fs::path(dir) / "personas.jsonl");
    if (!pi) throw ParseError("cannot open personas.jsonl in " + dir);
    while (std::getline(pi, line)) {
        if (trim(line).empty()) continue;
        json j = json::parse(line);
        PersonaGraph p;
        const auto& feats = j.at("features");
        long rows = static_cast<long>(feats.size());
        long cols = rows > 0 ? static_cast<long>(feats[0].size()) : 0;
        p.node_features = Mat(rows, cols);
        for (long r = 0; r < rows; ++r) {
            for (long c = 0; c < cols; ++c) {
                p.node_features(r, c) = feats[static_cast<std::size_t>(r)]
                                             [static_cast<std::size_t>(c)]
                                                 .get<double>();
            }
        }
        for (int i = 0; i < rows; ++i) {
            for (int jj = 0; jj < rows; ++jj) {
                if (i != jj) p.edges.push_back({i, jj});
            }
        }
        set.personas.push_back(std::move(p));
    }
    if (set.personas.size() != set.graphs.size()) {
        throw ParseError("graph set in " + dir + " has mismatched persona count");
    }
    return set;
}

} // namespace mudi
