#include "mudi/generator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>

#include "mudi/errors.hpp"
#include "mudi/text.hpp"

namespace mudi {

using ad::Node;
using ad::Tape;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

Vocabulary Vocabulary::build(const std::vector<Dialogue>& corpus) {
    Vocabulary v;
    v.tokens_ = {"[PAD]", "[BOS]", "[EOS]", "[UNK]", "[PER]", "[QRY]", "[RSP]", "[PROMPT]"};
    for (const auto& name : relation_names()) {
        v.tokens_.push_back("[REL:" + name + "]");
    }
    std::set<std::string> words = {"respond", "with"}; // prompt template words
    for (const auto& d : corpus) {
        for (const auto& p : d.persona) {
            for (const auto& t : tokenize_words(p)) words.insert(t);
        }
        for (const auto& u : d.utterances) {
            for (const auto& t : tokenize_words(u.text)) words.insert(t);
        }
    }
    for (const auto& w : words) v.tokens_.push_back(w);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        v.ids_[v.tokens_[i]] = static_cast<int>(i);
    }
    return v;
}

int Vocabulary::word_id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::encode_text(const std::string& text) const {
    std::vector<int> out;
    for (const auto& t : tokenize_words(text)) out.push_back(word_id(t));
    return out;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw ArgumentError("token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::decode_text(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    for (int id : ids) {
        if (is_special(id)) continue;
        words.push_back(token(id));
    }
    return join(words, " ");
}

nlohmann::json Vocabulary::to_json() const { return {{"tokens", tokens_}}; }

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
    Vocabulary v;
    v.tokens_ = j.at("tokens").get<std::vector<std::string>>();
    if (static_cast<int>(v.tokens_.size()) < kFirstWord) {
        throw ParseError("vocabulary json lacks the special token block");
    }
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        v.ids_[v.tokens_[i]] = static_cast<int>(i);
    }
    return v;
}

// ---------------------------------------------------------------------------
// Config helpers
// ---------------------------------------------------------------------------

GenVariant variant_from_name(const std::string& name) {
    if (name == "sp") return GenVariant::SP;
    if (name == "emb") return GenVariant::Emb;
    if (name == "sp_emb") return GenVariant::SPEmb;
    throw ConfigError("unknown generator variant: " + name);
}

const std::string& variant_name(GenVariant v) {
    static const std::vector<std::string> names = {"sp", "emb", "sp_emb"};
    return names[static_cast<std::size_t>(v)];
}

DecodeSpec decode_spec_from_string(const std::string& s) {
    DecodeSpec spec;
    if (s == "greedy") {
        spec.kind = DecodeSpec::Kind::Greedy;
        return spec;
    }
    if (s.rfind("beam:", 0) == 0) {
        spec.kind = DecodeSpec::Kind::Beam;
        spec.beam_width = std::stoi(s.substr(5));
        if (spec.beam_width < 1) throw ConfigError("beam width must be >= 1");
        return spec;
    }
    if (s.rfind("sample:", 0) == 0) {
        spec.kind = DecodeSpec::Kind::Sample;
        auto rest = s.substr(7);
        auto colon = rest.find(':');
        if (colon == std::string::npos) {
            throw ConfigError("sample decode needs sample:TEMPERATURE:SEED");
        }
        spec.temperature = std::stod(rest.substr(0, colon));
        spec.seed = std::stoull(rest.substr(colon + 1));
        if (spec.temperature <= 0.0) throw ConfigError("temperature must be positive");
        return spec;
    }
    throw ConfigError("unknown decode spec: " + s);
}

void init_generator_params(ParamStore& store, const GeneratorConfig& config,
                           int vocab_size, Rng& rng) {
    int d = config.model_dim;
    if (d % config.num_heads != 0) {
        throw ConfigError("model_dim must be divisible by num_heads");
    }
    store.create_xavier("gen.embed.tok", vocab_size, d, rng);
    store.create_xavier("gen.embed.pos_src", config.max_src_len, d, rng);
    store.create_xavier("gen.embed.pos_tgt", config.max_tgt_len, d, rng);

    auto make_ln = [&](const std::string& p) {
        store.create_constant(p + ".g", 1, d, 1.0);
        store.create_zeros(p + ".b", 1, d);
    };
    auto make_attn = [&](const std::string& p) {
        store.create_xavier(p + ".Wq", d, d, rng);
        store.create_xavier(p + ".Wk", d, d, rng);
        store.create_xavier(p + ".Wv", d, d, rng);
        store.create_xavier(p + ".Wo", d, d, rng);
    };
    auto make_ffn = [&](const std::string& p) {
        store.create_xavier(p + ".W1", d, config.ffn_dim, rng);
        store.create_zeros(p + ".b1", 1, config.ffn_dim);
        store.create_xavier(p + ".W2", config.ffn_dim, d, rng);
        store.create_zeros(p + ".b2", 1, d);
    };

    for (int l = 0; l < config.enc_layers; ++l) {
        std::string p = "gen.enc" + std::to_string(l);
        make_ln(p + ".ln1");
        make_attn(p + ".attn");
        make_ln(p + ".ln2");
        make_ffn(p + ".ffn");
    }
    make_ln("gen.enc.ln_out");

    for (int l = 0; l < config.dec_layers; ++l) {
        std::string p = "gen.dec" + std::to_string(l);
        make_ln(p + ".ln1");
        make_attn(p + ".self");
        make_ln(p + ".ln2");
        make_attn(p + ".xp"); // persona-aware cross-attention over encoder output
        make_attn(p + ".xc"); // coherence-aware cross-attention over H_D
        store.create_xavier(p + ".dwa.Wg", 2 * d, d, rng);
        store.create_zeros(p + ".dwa.bg", 1, d);
        store.create_zeros(p + ".dwa.mask", 1, d); // sigmoid(0) = 0.5 soft mask
        make_ln(p + ".ln3");
        make_ffn(p + ".ffn");
    }
    make_ln("gen.dec.ln_out");

    store.create_xavier("gen.hd_proj.W", config.coherence_dim, d, rng);
    store.create_zeros("gen.hd_proj.b", 1, d);
    store.create_xavier("gen.rel_emb", kNumRelations, d, rng);
    store.create_xavier("gen.out.W", d, vocab_size, rng);
    store.create_zeros("gen.out.b", 1, vocab_size);
}

// ---------------------------------------------------------------------------
// Input construction
// ---------------------------------------------------------------------------

std::vector<int> build_encoder_input(const Vocabulary& vocab,
                                     const std::vector<std::string>& persona,
                                     const std::vector<std::string>& context,
                                     int max_len) {
    if (context.empty()) throw ArgumentError("build_encoder_input: empty context");
    if (context.size() % 2 == 0) {
        throw ArgumentError("build_encoder_input: context must end with a user query");
    }

    std::vector<std::vector<int>> persona_tok, context_tok;
    for (const auto& p : persona) persona_tok.push_back(vocab.encode_text(p));
    for (const auto& c : context) context_tok.push_back(vocab.encode_text(c));

    auto total_len = [&](std::size_t persona_from, std::size_t context_from) {
        std::size_t n = 3; // [BOS] [PER] [EOS]
        for (std::size_t i = persona_from; i < persona_tok.size(); ++i) {
            n += persona_tok[i].size();
        }
        for (std::size_t i = context_from; i < context_tok.size(); ++i) {
            n += 1 + context_tok[i].size(); // [QRY]/[RSP] marker + tokens
        }
        return n;
    };

    // Drop the oldest exchange pair first; persona only once the context is
    // down to the final query.
    std::size_t context_from = 0;
    while (total_len(0, context_from) > static_cast<std::size_t>(max_len) &&
           context_tok.size() - context_from > 1) {
        context_from += 2;
    }
    std::size_t persona_from = 0;
    while (total_len(persona_from, context_from) > static_cast<std::size_t>(max_len) &&
           persona_from < persona_tok.size()) {
        ++persona_from;
    }

    std::vector<int> out = {Vocabulary::kBos, Vocabulary::kPer};
    for (std::size_t i = persona_from; i < persona_tok.size(); ++i) {
        out.insert(out.end(), persona_tok[i].begin(), persona_tok[i].end());
    }
    for (std::size_t i = context_from; i < context_tok.size(); ++i) {
        bool is_query = (i % 2) == 0;
        out.push_back(is_query ? Vocabulary::kQry : Vocabulary::kRsp);
        out.insert(out.end(), context_tok[i].begin(), context_tok[i].end());
    }
    out.push_back(Vocabulary::kEos);
    if (out.size() > static_cast<std::size_t>(max_len)) {
        // Last resort: clip query tokens from the left, keeping the markers.
        std::size_t overflow = out.size() - static_cast<std::size_t>(max_len);
        out.erase(out.begin() + 2, out.begin() + 2 + static_cast<long>(overflow));
    }
    return out;
}

std::vector<int> build_prompt(const Vocabulary& vocab,
                              const std::vector<RelationLabel>& predicted_types,
                              GenVariant variant) {
    if (predicted_types.empty() || predicted_types.size() > kMaxLabelsPerPair) {
        throw ArgumentError("build_prompt: need 1..3 predicted types");
    }
    std::vector<int> out = {Vocabulary::kPrompt, vocab.word_id("respond"),
                            vocab.word_id("with")};
    bool with_tokens = variant == GenVariant::SP || variant == GenVariant::SPEmb;
    for (int slot = 0; slot < kMaxLabelsPerPair; ++slot) {
        if (with_tokens && slot < static_cast<int>(predicted_types.size())) {
            out.push_back(vocab.rel_token(predicted_types[static_cast<std::size_t>(slot)]));
        } else {
            out.push_back(Vocabulary::kPad);
        }
    }
    return out;
}

DecoderSequence make_decoder_sequence(const std::vector<int>& prompt_ids,
                                      const std::vector<int>& response_ids,
                                      int max_len) {
    std::vector<int> seq = prompt_ids;
    seq.push_back(Vocabulary::kBos);
    seq.push_back(Vocabulary::kRsp);
    long rsp_index = static_cast<long>(seq.size()) - 1;
    for (int id : response_ids) seq.push_back(id);
    seq.push_back(Vocabulary::kEos);
    if (seq.size() > static_cast<std::size_t>(max_len)) {
        seq.resize(static_cast<std::size_t>(max_len) - 1);
        seq.push_back(Vocabulary::kEos);
    }

    DecoderSequence out;
    out.inputs.assign(seq.begin(), seq.end() - 1);
    out.targets.assign(seq.begin() + 1, seq.end());
    for (long t = rsp_index; t < static_cast<long>(out.targets.size()); ++t) {
        out.loss_pos.push_back(static_cast<int>(t));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

Node* param(Tape& tape, ParamStore& store, const std::string& name) {
    auto& e = store.at(name);
    return tape.param(e.value, e.grad);
}

Node* layer_norm_p(Tape& tape, ParamStore& store, const std::string& p, Node* x) {
    return tape.layer_norm(x, param(tape, store, p + ".g"), param(tape, store, p + ".b"));
}

Node* mha(Tape& tape, ParamStore& store, const std::string& p, Node* q_in, Node* kv_in,
          const Mat* additive_mask, int num_heads) {
    long d = q_in->value.cols();
    long dh = d / num_heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Node* q = tape.matmul(q_in, param(tape, store, p + ".Wq"));
    Node* k = tape.matmul(kv_in, param(tape, store, p + ".Wk"));
    Node* v = tape.matmul(kv_in, param(tape, store, p + ".Wv"));
    std::vector<Node*> heads;
    for (int h = 0; h < num_heads; ++h) {
        Node* qh = tape.slice_cols(q, static_cast<int>(h * dh), static_cast<int>(dh));
        Node* kh = tape.slice_cols(k, static_cast<int>(h * dh), static_cast<int>(dh));
        Node* vh = tape.slice_cols(v, static_cast<int>(h * dh), static_cast<int>(dh));
        Node* scores = tape.cmul(tape.matmul_nt(qh, kh), scale);
        if (additive_mask != nullptr) scores = tape.cadd_mat(scores, *additive_mask);
        Node* attn = tape.softmax_rows(scores);
        heads.push_back(tape.matmul(attn, vh));
    }
    return tape.matmul(tape.concat_cols(heads), param(tape, store, p + ".Wo"));
}

Node* ffn(Tape& tape, ParamStore& store, const std::string& p, Node* x) {
    Node* z = tape.add_rowvec(tape.matmul(x, param(tape, store, p + ".W1")),
                              param(tape, store, p + ".b1"));
    z = tape.relu(z);
    return tape.add_rowvec(tape.matmul(z, param(tape, store, p + ".W2")),
                           param(tape, store, p + ".b2"));
}

Node* embed_tokens(Tape& tape, ParamStore& store, const std::vector<int>& ids,
                   const std::string& pos_name, int max_len) {
    if (ids.empty()) throw ArgumentError("embed_tokens: empty sequence");
    if (static_cast<int>(ids.size()) > max_len) {
        throw ShapeError("sequence exceeds configured maximum length");
    }
    Node* tok = tape.gather_rows(param(tape, store, "gen.embed.tok"), ids);
    std::vector<int> pos(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<int>(i);
    Node* pe = tape.gather_rows(param(tape, store, pos_name), pos);
    return tape.add(tok, pe);
}

Mat causal_mask(long t) {
    Mat m = Mat::Zero(t, t);
    for (long r = 0; r < t; ++r) {
        for (long c = r + 1; c < t; ++c) {
            m(r, c) = -std::numeric_limits<double>::infinity();
        }
    }
    return m;
}

} // namespace

Node* encode_source(Tape& tape, const GeneratorConfig& config, ParamStore& store,
                    const std::vector<int>& src_ids) {
    Node* x = embed_tokens(tape, store, src_ids, "gen.embed.pos_src", config.max_src_len);
    for (int l = 0; l < config.enc_layers; ++l) {
        std::string p = "gen.enc" + std::to_string(l);
        Node* a = layer_norm_p(tape, store, p + ".ln1", x);
        x = tape.add(x, mha(tape, store, p + ".attn", a, a, nullptr, config.num_heads));
        Node* b = layer_norm_p(tape, store, p + ".ln2", x);
        x = tape.add(x, ffn(tape, store, p + ".ffn", b));
    }
    return layer_norm_p(tape, store, "gen.enc.ln_out", x);
}

Node* dynamic_weighted_aggregation(Tape& tape, Node* c_persona, Node* c_coherence,
                                   Node* gate, Node* mask_logits, double tau, bool hard) {
    long t = c_persona->value.rows();
    Node* soft_mask = tape.sigmoid(mask_logits); // [1 x D]
    Node* m_rows = tape.matmul(tape.input(Mat::Ones(t, 1)), soft_mask);
    Node* gm = tape.mul(gate, m_rows);
    return tape.dwa_select(c_persona, c_coherence, gm, tau, hard);
}

Node* decode_logits(Tape& tape, const GeneratorConfig& config, ParamStore& store,
                    Node* enc_out, const std::vector<int>& dec_inputs, const Mat* h_d,
                    const std::vector<RelationLabel>& emb_types, GateStats* gate_stats) {
    Node* x = embed_tokens(tape, store, dec_inputs, "gen.embed.pos_tgt",
                           config.max_tgt_len);
    long t = x->value.rows();
    Mat cmask = causal_mask(t);

    Node* hd_proj = nullptr;
    if (h_d != nullptr) {
        if (h_d->cols() != config.coherence_dim) {
            throw ShapeError("decode_logits: H_D width != coherence_dim");
        }
        hd_proj = tape.add_rowvec(
            tape.matmul(tape.input(*h_d), param(tape, store, "gen.hd_proj.W")),
            param(tape, store, "gen.hd_proj.b"));
    }

    // r_emb: mean of the predicted types' learnable embeddings (Emb variants).
    Node* r_emb = nullptr;
    bool use_emb = config.variant == GenVariant::Emb || config.variant == GenVariant::SPEmb;
    if (use_emb && h_d != nullptr && !emb_types.empty()) {
        std::vector<int> ids;
        for (auto l : emb_types) ids.push_back(static_cast<int>(l));
        r_emb = tape.mean_over_rows(
            tape.gather_rows(param(tape, store, "gen.rel_emb"), ids)); // [1 x D]
    }

    for (int l = 0; l < config.dec_layers; ++l) {
        std::string p = "gen.dec" + std::to_string(l);
        Node* a = layer_norm_p(tape, store, p + ".ln1", x);
        x = tape.add(x, mha(tape, store, p + ".self", a, a, &cmask, config.num_heads));

        Node* b = layer_norm_p(tape, store, p + ".ln2", x);
        Node* c_persona = mha(tape, store, p + ".xp", b, enc_out, nullptr, config.num_heads);
        if (hd_proj != nullptr) {
            Node* q_c = r_emb != nullptr ? tape.add_rowvec(b, r_emb) : b;
            Node* c_coherence =
                mha(tape, store, p + ".xc", q_c, hd_proj, nullptr, config.num_heads);
            Node* gate = tape.sigmoid(tape.add_rowvec(
                tape.matmul(tape.concat_cols(c_persona, c_coherence),
                            param(tape, store, p + ".dwa.Wg")),
                param(tape, store, p + ".dwa.bg")));
            Node* soft_mask = tape.sigmoid(param(tape, store, p + ".dwa.mask"));
            Node* m_rows = tape.matmul(tape.input(Mat::Ones(t, 1)), soft_mask);
            Node* gm = tape.mul(gate, m_rows);
            if (gate_stats != nullptr) {
                for (long r = 0; r < gm->value.rows(); ++r) {
                    for (long c = 0; c < gm->value.cols(); ++c) {
                        gate_stats->persona_selected += gm->value(r, c) > config.tau ? 1.0 : 0.0;
                        gate_stats->total += 1.0;
                    }
                }
            }
            Node* combined =
                tape.dwa_select(c_persona, c_coherence, gm, config.tau, config.dwa_hard);
            x = tape.add(x, combined);
        } else {
            // Degraded persona-only path (no coherence memory).
            x = tape.add(x, c_persona);
        }

        Node* f = layer_norm_p(tape, store, p + ".ln3", x);
        x = tape.add(x, ffn(tape, store, p + ".ffn", f));
    }
    x = layer_norm_p(tape, store, "gen.dec.ln_out", x);
    return tape.add_rowvec(tape.matmul(x, param(tape, store, "gen.out.W")),
                           param(tape, store, "gen.out.b"));
}

Node* lm_loss(Tape& tape, Node* logits, const DecoderSequence& seq, long* token_count) {
    if (seq.loss_pos.empty()) throw ArgumentError("lm_loss: no scored positions");
    Node* ls = tape.log_softmax_rows(logits);
    std::vector<std::pair<int, int>> coords;
    for (int pos : seq.loss_pos) {
        coords.push_back({pos, seq.targets[static_cast<std::size_t>(pos)]});
    }
    if (token_count != nullptr) *token_count = static_cast<long>(coords.size());
    Node* picked = tape.gather_elems(ls, std::move(coords));
    return tape.neg(tape.mean_all(picked));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

std::vector<TrainExample> build_train_examples(
    const std::vector<Dialogue>& corpus, const Vocabulary& vocab,
    const GeneratorConfig& config, const CoherenceConfig& coh_config,
    ParamStore& coh_store, EmbeddingProvider& provider, int d) {
    std::vector<TrainExample> out;
    for (const auto& dlg : corpus) {
        if (!dlg.annotated()) {
            throw StateError("dialogue '" + dlg.dialogue_id +
                             "' must be annotated to build training examples");
        }
        PersonaGraph pgraph = build_persona_graph(dlg.persona, provider);
        for (std::size_t p = 1; p < dlg.utterances.size(); p += 2) {
            DialogueGraph prefix_graph;
            if (p == 1) {
                // Single-query prefix: one isolated node.
                prefix_graph.dialogue_id = dlg.dialogue_id + "#1";
                Eigen::VectorXd e = provider.embed(dlg.utterances[0].text);
                prefix_graph.node_features = Mat(1, provider.dim());
                prefix_graph.node_features.row(0) = e.transpose();
                prefix_graph.orders = {0};
                prefix_graph.turns = {0};
                prefix_graph.speakers = {0};
            } else {
                Dialogue prefix;
                prefix.dialogue_id = dlg.dialogue_id + "#" + std::to_string(p);
                prefix.persona = dlg.persona;
                prefix.utterances.assign(dlg.utterances.begin(),
                                         dlg.utterances.begin() + static_cast<long>(p));
                for (const auto& a : dlg.annotations) {
                    if (a.target_id < static_cast<int>(p)) prefix.annotations.push_back(a);
                }
                prefix_graph = build_dialogue_graph(prefix, provider, d);
            }

            auto enc = coherence_encode(coh_config, coh_store, prefix_graph, pgraph);
            auto types = predict_response_type(coh_config, coh_store, enc.h_d,
                                               TypePredictionMode::Direct,
                                               coh_config.type_threshold);

            TrainExample ex;
            ex.dialogue_id = dlg.dialogue_id;
            ex.response_index = static_cast<int>(p);
            for (std::size_t i = 0; i < p; ++i) ex.context.push_back(dlg.utterances[i].text);
            ex.gold = dlg.utterances[p].text;
            ex.src_ids = build_encoder_input(vocab, dlg.persona, ex.context,
                                             config.max_src_len);
            ex.prompt_ids = build_prompt(vocab, types.labels, config.variant);
            ex.response_ids = vocab.encode_text(ex.gold);
            ex.h_d = enc.h_d;
            ex.types = types.labels;
            out.push_back(std::move(ex));
        }
    }
    return out;
}

namespace {

double run_epoch(const GeneratorConfig& config, ParamStore& store,
                 const std::vector<TrainExample>& examples, AdamOptimizer& opt,
                 bool with_coherence, bool* numeric_failure) {
    double total_nll = 0.0;
    long total_tokens = 0;
    for (std::size_t start = 0; start < examples.size();
         start += static_cast<std::size_t>(config.batch_size)) {
        std::size_t end =
            std::min(examples.size(), start + static_cast<std::size_t>(config.batch_size));
        store.zero_grad();
        Tape tape;
        Node* batch_sum = nullptr;
        long batch_tokens = 0;
        for (std::size_t i = start; i < end; ++i) {
            const auto& ex = examples[i];
            Node* enc = encode_source(tape, config, store, ex.src_ids);
            DecoderSequence seq;
            Node* logits = nullptr;
            if (with_coherence) {
                seq = make_decoder_sequence(ex.prompt_ids, ex.response_ids,
                                            config.max_tgt_len);
                logits = decode_logits(tape, config, store, enc, seq.inputs, &ex.h_d,
                                       ex.types);
            } else {
                // Persona-consistency pre-stage: plain response LM, no prompt,
                // no coherence memory.
                seq = make_decoder_sequence({}, ex.response_ids, config.max_tgt_len);
                logits = decode_logits(tape, config, store, enc, seq.inputs, nullptr, {});
            }
            long count = 0;
            Node* mean_nll = lm_loss(tape, logits, seq, &count);
            batch_sum = batch_sum == nullptr
                            ? tape.cmul(mean_nll, static_cast<double>(count))
                            : tape.add(batch_sum,
                                       tape.cmul(mean_nll, static_cast<double>(count)));
            batch_tokens += count;
        }
        Node* batch_loss = tape.cmul(batch_sum, 1.0 / static_cast<double>(batch_tokens));
        if (!batch_loss->value.allFinite()) {
            *numeric_failure = true;
            return total_tokens > 0 ? total_nll / static_cast<double>(total_tokens) : 0.0;
        }
        tape.backward(batch_loss);
        opt.step(store);
        total_nll += batch_loss->value(0, 0) * static_cast<double>(batch_tokens);
        total_tokens += batch_tokens;
    }
    return total_tokens > 0 ? total_nll / static_cast<double>(total_tokens) : 0.0;
}

} // namespace

TrainGeneratorResult train_generator(const GeneratorConfig& config, const Vocabulary& vocab,
                                     const std::vector<TrainExample>& examples) {
    if (examples.empty()) throw ArgumentError("train_generator: no examples");
    Rng rng(config.seed);
    ParamStore store;
    init_generator_params(store, config, vocab.size(), rng);
    AdamOptimizer opt(config.lr);

    TrainGeneratorResult result;
    ParamStore last_good = store;
    bool numeric_failure = false;

    // Persona-consistency pre-stage (encoder-decoder LM on the special-token
    // layout, coherence attention detached).
    for (int epoch = 0; epoch < config.pc_epochs; ++epoch) {
        double loss = run_epoch(config, store, examples, opt, false, &numeric_failure);
        if (numeric_failure) break;
        result.log.push_back({-config.pc_epochs + epoch, loss});
        last_good = store;
    }

    int first_main_epoch = static_cast<int>(result.log.size());
    if (!numeric_failure) {
        for (int epoch = 0; epoch < config.epochs; ++epoch) {
            double loss = run_epoch(config, store, examples, opt, true, &numeric_failure);
            if (numeric_failure) break;
            result.log.push_back({epoch, loss});
            last_good = store;
        }
    }
    if (numeric_failure) {
        result.diverged = true;
        store = last_good;
    }

    // Strict-descent flag over the first 10 epochs of the main stage.
    int checked = std::min(10, static_cast<int>(result.log.size()) - first_main_epoch);
    for (int i = 1; i < checked; ++i) {
        if (result.log[static_cast<std::size_t>(first_main_epoch + i)].loss >=
            result.log[static_cast<std::size_t>(first_main_epoch + i - 1)].loss) {
            result.descent_abort = true;
            break;
        }
    }

    result.checkpoint.stage = "generator";
    result.checkpoint.config_hash = config.config_hash;
    result.checkpoint.meta = {
        {"model_dim", config.model_dim},
        {"ffn_dim", config.ffn_dim},
        {"enc_layers", config.enc_layers},
        {"dec_layers", config.dec_layers},
        {"num_heads", config.num_heads},
        {"max_src_len", config.max_src_len},
        {"max_tgt_len", config.max_tgt_len},
        {"variant", variant_name(config.variant)},
        {"tau", config.tau},
        {"dwa_hard", config.dwa_hard},
        {"coherence_dim", config.coherence_dim},
        {"vocab", vocab.to_json()},
    };
    result.checkpoint.params = store;
    return result;
}

GeneratorConfig generator_config_from_checkpoint(const Checkpoint& ckpt) {
    const auto& m = ckpt.meta;
    GeneratorConfig c;
    c.model_dim = m.at("model_dim").get<int>();
    c.ffn_dim = m.at("ffn_dim").get<int>();
    c.enc_layers = m.at("enc_layers").get<int>();
    c.dec_layers = m.at("dec_layers").get<int>();
    c.num_heads = m.at("num_heads").get<int>();
    c.max_src_len = m.at("max_src_len").get<int>();
    c.max_tgt_len = m.at("max_tgt_len").get<int>();
    c.variant = variant_from_name(m.at("variant").get<std::string>());
    c.tau = m.at("tau").get<double>();
    c.dwa_hard = m.at("dwa_hard").get<bool>();
    c.coherence_dim = m.at("coherence_dim").get<int>();
    return c;
}

Vocabulary vocabulary_from_checkpoint(const Checkpoint& ckpt) {
    return Vocabulary::from_json(ckpt.meta.at("vocab"));
}

void write_gen_csv(const std::string& path, const std::vector<GenEpochLoss>& log) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write loss log: " + path);
    out << "epoch,nll_per_token\n";
    out.precision(17);
    for (const auto& e : log) out << e.epoch << ',' << e.loss << '\n';
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace {

// Log-probabilities of the next token after the current decoder prefix.
Eigen::VectorXd next_token_logprobs(const GeneratorConfig& config, ParamStore& store,
                                    const Mat& enc_out, const std::vector<int>& dec_inputs,
                                    const Mat* h_d,
                                    const std::vector<RelationLabel>& types) {
    Tape tape;
    Node* enc = tape.input(enc_out);
    Node* logits = decode_logits(tape, config, store, enc, dec_inputs, h_d, types);
    long t = logits->value.rows() - 1;
    Eigen::VectorXd row = logits->value.row(t).transpose();
    double mx = row.maxCoeff();
    double lse = std::log((row.array() - mx).exp().sum()) + mx;
    return row.array() - lse;
}

} // namespace

GenerationResult generate_response(const GeneratorConfig& config, ParamStore& store,
                                   const Vocabulary& vocab,
                                   const std::vector<int>& src_ids,
                                   const std::vector<int>& prompt_ids, const Mat* h_d,
                                   const std::vector<RelationLabel>& types,
                                   const DecodeSpec& decode) {
    GenerationResult result;
    result.predicted_types = types;
    if (h_d == nullptr) {
        std::cerr << "[mudi] generator: no coherence memory, degraded persona-only mode\n";
    }

    Mat enc_out;
    {
        Tape tape;
        enc_out = encode_source(tape, config, store, src_ids)->value;
    }

    std::vector<int> prefix = prompt_ids;
    prefix.push_back(Vocabulary::kBos);
    prefix.push_back(Vocabulary::kRsp);
    int budget = config.max_tgt_len - 1 - static_cast<int>(prefix.size());
    if (budget <= 0) throw ConfigError("generate: prompt leaves no decode budget");

    std::vector<int> generated;
    bool ended = false;

    if (decode.kind == DecodeSpec::Kind::Greedy || decode.kind == DecodeSpec::Kind::Sample) {
        Rng rng(decode.seed);
        std::vector<int> dec = prefix;
        for (int step = 0; step < budget; ++step) {
            Eigen::VectorXd lp = next_token_logprobs(config, store, enc_out, dec, h_d, types);
            int next;
            if (decode.kind == DecodeSpec::Kind::Greedy) {
                Eigen::Index arg;
                lp.maxCoeff(&arg);
                next = static_cast<int>(arg);
            } else {
                Eigen::VectorXd probs = (lp.array() / decode.temperature).exp();
                probs /= probs.sum();
                double u = rng.uniform();
                double acc = 0.0;
                next = static_cast<int>(probs.size()) - 1;
                for (int i = 0; i < probs.size(); ++i) {
                    acc += probs(i);
                    if (u < acc) {
                        next = i;
                        break;
                    }
                }
            }
            if (next == Vocabulary::kEos) {
                ended = true;
                break;
            }
            generated.push_back(next);
            dec.push_back(next);
        }
    } else {
        struct Beam {
            std::vector<int> ids;
            double logp = 0.0;
            bool done = false;
        };
        std::vector<Beam> beams = {{prefix, 0.0, false}};
        for (int step = 0; step < budget; ++step) {
            std::vector<Beam> expanded;
            bool any_active = false;
            for (const auto& beam : beams) {
                if (beam.done) {
                    expanded.push_back(beam);
                    continue;
                }
                any_active = true;
                Eigen::VectorXd lp =
                    next_token_logprobs(config, store, enc_out, beam.ids, h_d, types);
                std::vector<int> order(static_cast<std::size_t>(lp.size()));
                for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
                std::partial_sort(order.begin(),
                                  order.begin() + std::min<std::size_t>(
                                                      order.size(),
                                                      static_cast<std::size_t>(
                                                          decode.beam_width)),
                                  order.end(),
                                  [&](int a, int b) { return lp(a) > lp(b); });
                for (int k = 0; k < decode.beam_width &&
                                k < static_cast<int>(order.size());
                     ++k) {
                    Beam nb = beam;
                    nb.logp += lp(order[static_cast<std::size_t>(k)]);
                    if (order[static_cast<std::size_t>(k)] == Vocabulary::kEos) {
                        nb.done = true;
                    } else {
                        nb.ids.push_back(order[static_cast<std::size_t>(k)]);
                    }
                    expanded.push_back(std::move(nb));
                }
            }
            if (!any_active) break;
            std::stable_sort(expanded.begin(), expanded.end(),
                             [](const Beam& a, const Beam& b) { return a.logp > b.logp; });
            if (expanded.size() > static_cast<std::size_t>(decode.beam_width)) {
                expanded.resize(static_cast<std::size_t>(decode.beam_width));
            }
            beams = std::move(expanded);
        }
        const Beam* best = nullptr;
        for (const auto& b : beams) {
            if (b.done && (best == nullptr || b.logp > best->logp)) best = &b;
        }
        if (best == nullptr) best = &beams.front();
        ended = best->done;
        generated.assign(best->ids.begin() + static_cast<long>(prefix.size()),
                         best->ids.end());
    }

    result.truncated = !ended;
    result.response = vocab.decode_text(generated);

    // Gate statistics over the final complete sequence.
    if (h_d != nullptr) {
        std::vector<int> full = prefix;
        full.insert(full.end(), generated.begin(), generated.end());
        GateStats stats;
        Tape tape;
        Node* enc = tape.input(enc_out);
        decode_logits(tape, config, store, enc, full, h_d, types, &stats);
        result.gate_mean = stats.mean();
    }
    return result;
}

std::string generation_to_json_line(const GenerationResult& r) {
    nlohmann::json names = nlohmann::json::array();
    for (auto l : r.predicted_types) names.push_back(relation_name(l));
    return nlohmann::json{{"dialogue_id", r.dialogue_id},
                          {"response", r.response},
                          {"predicted_types", names},
                          {"gate_mean", r.gate_mean},
                          {"truncated", r.truncated}}
        .dump();
}

} // namespace mudi
