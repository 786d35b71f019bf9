#pragma once

// Independent straight-line reimplementation of the DialogueGAT forward used
// as a numerical oracle. Deliberately written with per-edge loops and scalar
// accumulation — no tape, no gather/scatter — so it shares no code path with
// the library implementation.

#include <array>
#include <cmath>
#include <vector>

#include "mudi/dialogue_gat.hpp"
#include "mudi/params.hpp"

namespace mudi_test {

using mudi::Mat;

inline double ref_leaky(double x, double slope) { return x > 0.0 ? x : slope * x; }
inline double ref_elu(double x) { return x > 0.0 ? x : std::exp(x) - 1.0; }

// channels restricted: bit 0 = base, bit 1 = order, bit 2 = turn
inline Mat reference_gat_forward(const mudi::GatConfig& config,
                                 const mudi::ParamStore& store,
                                 const std::string& prefix,
                                 const mudi::GatGraphView& view,
                                 int channel_mask = 0b111) {
    int n = view.num_nodes();
    Mat h = view.features;

    struct EdgeList {
        std::vector<std::pair<int, int>> edges;
        std::vector<double> scale; // score multiplier (order decay); 1 otherwise
        std::vector<int> rel_row;  // row into rel_multihot, -1 if none
    };
    EdgeList channels[3];
    if (channel_mask & 1) {
        for (std::size_t e = 0; e < view.base_edges.size(); ++e) {
            channels[0].edges.push_back(view.base_edges[e]);
            channels[0].scale.push_back(1.0);
            channels[0].rel_row.push_back(
                config.use_relations ? static_cast<int>(e) : -1);
        }
        if (config.self_loops) {
            for (int i = 0; i < n; ++i) {
                channels[0].edges.push_back({i, i});
                channels[0].scale.push_back(1.0);
                channels[0].rel_row.push_back(-1);
            }
        }
    }
    if (channel_mask & 2) {
        for (std::size_t e = 0; e < view.order_edges.size(); ++e) {
            channels[1].edges.push_back(view.order_edges[e]);
            channels[1].scale.push_back(
                std::exp(-config.lambda_decay * view.order_delta[e]));
            channels[1].rel_row.push_back(-1);
        }
    }
    if (channel_mask & 4) {
        for (const auto& e : view.turn_edges) {
            channels[2].edges.push_back(e);
            channels[2].scale.push_back(1.0);
            channels[2].rel_row.push_back(-1);
        }
    }

    for (int layer = 0; layer < config.num_layers; ++layer) {
        bool final_layer = layer + 1 == config.num_layers;
        int fin = config.layer_in_dim(layer);
        int fout = config.layer_out_dim(layer);
        std::string lp = prefix + ".layer" + std::to_string(layer);

        Mat rel_emb;
        if (config.use_relations) rel_emb = store.at(lp + ".rel_emb").value;

        Mat next(n, final_layer ? fout : fout * config.num_heads);
        if (final_layer) next.setZero();

        for (int head = 0; head < config.num_heads; ++head) {
            std::string hp = lp + ".head" + std::to_string(head);
            const Mat& w = store.at(hp + ".W").value; // [fin x fout]
            const Mat& ab = store.at(hp + ".a_base").value;
            const Mat& ao = store.at(hp + ".a_order").value;
            const Mat& at = store.at(hp + ".a_turn").value;
            const Mat* avec[3] = {&ab, &ao, &at};

            // hw[i] = h_i^T W, computed entry by entry
            Mat hw(n, fout);
            for (int i = 0; i < n; ++i) {
                for (int c = 0; c < fout; ++c) {
                    double acc = 0.0;
                    for (int k = 0; k < fin; ++k) acc += h(i, k) * w(k, c);
                    hw(i, c) = acc;
                }
            }

            Mat head_out = Mat::Zero(n, fout);
            std::vector<int> channels_present(static_cast<std::size_t>(n), 0);

            for (int ch = 0; ch < 3; ++ch) {
                const auto& el = channels[ch];
                if (el.edges.empty()) continue;

                // per-edge source payload = W h_src (+ summed relation embedding)
                std::vector<std::vector<double>> payload(el.edges.size());
                std::vector<double> raw_score(el.edges.size());
                for (std::size_t e = 0; e < el.edges.size(); ++e) {
                    auto [src, dst] = el.edges[e];
                    std::vector<double> p(static_cast<std::size_t>(fout));
                    for (int c = 0; c < fout; ++c) p[static_cast<std::size_t>(c)] = hw(src, c);
                    if (el.rel_row[e] >= 0) {
                        for (int r = 0; r < mudi::kNumRelations; ++r) {
                            if (view.rel_multihot(el.rel_row[e], r) != 0.0) {
                                for (int c = 0; c < fout; ++c) {
                                    p[static_cast<std::size_t>(c)] += rel_emb(r, c);
                                }
                            }
                        }
                    }
                    double score = 0.0;
                    for (int c = 0; c < fout; ++c) {
                        score += (*avec[ch])(c, 0) *
                                 ref_leaky(p[static_cast<std::size_t>(c)], config.leaky_slope);
                        score += (*avec[ch])(fout + c, 0) *
                                 ref_leaky(hw(dst, c), config.leaky_slope);
                    }
                    raw_score[e] = score * el.scale[e];
                    payload[e] = std::move(p);
                }

                // per-destination softmax and weighted sum
                for (int v = 0; v < n; ++v) {
                    std::vector<std::size_t> incoming;
                    for (std::size_t e = 0; e < el.edges.size(); ++e) {
                        if (el.edges[e].second == v) incoming.push_back(e);
                    }
                    if (incoming.empty()) continue;
                    channels_present[static_cast<std::size_t>(v)] += 1;
                    double mx = raw_score[incoming[0]];
                    for (auto e : incoming) mx = std::max(mx, raw_score[e]);
                    double denom = 0.0;
                    for (auto e : incoming) denom += std::exp(raw_score[e] - mx);
                    for (auto e : incoming) {
                        double alpha = std::exp(raw_score[e] - mx) / denom;
                        for (int c = 0; c < fout; ++c) {
                            head_out(v, c) += alpha * payload[e][static_cast<std::size_t>(c)];
                        }
                    }
                }
            }

            for (int v = 0; v < n; ++v) {
                int count = channels_present[static_cast<std::size_t>(v)];
                if (count == 0) {
                    for (int c = 0; c < fout; ++c) head_out(v, c) = hw(v, c);
                } else {
                    for (int c = 0; c < fout; ++c) head_out(v, c) /= count;
                }
            }

            if (final_layer) {
                next += head_out / config.num_heads;
            } else {
                next.middleCols(static_cast<long>(head) * fout, fout) = head_out;
            }
        }

        for (long r = 0; r < next.rows(); ++r) {
            for (long c = 0; c < next.cols(); ++c) next(r, c) = ref_elu(next(r, c));
        }
        h = next;
    }
    return h;
}

} // namespace mudi_test
