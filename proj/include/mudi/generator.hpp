#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mudi/autodiff.hpp"
#include "mudi/checkpoint.hpp"
#include "mudi/coherence.hpp"
#include "mudi/corpus.hpp"
#include "mudi/graph.hpp"

namespace mudi {

// Personalized response generator: a small encoder-decoder transformer whose
// decoder blocks run two cross-attentions — one over the text encoder output
// (persona-aware) and one over the coherence encoder's dialogue memory H_D —
// combined per position by dynamic weighted aggregation (threshold tau +
// learnable mask, straight-through gradient). Response types predicted by the
// coherence module condition generation as prompt relation tokens (SP), as
// learnable embeddings added to the coherence attention query (Emb), or both.

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kPer = 4;
    static constexpr int kQry = 5;
    static constexpr int kRsp = 6;
    static constexpr int kPrompt = 7;
    static constexpr int kFirstRelation = 8; // 17 relation tokens
    static constexpr int kFirstWord = kFirstRelation + kNumRelations;

    // Word inventory from persona and utterance text, plus prompt template words.
    static Vocabulary build(const std::vector<Dialogue>& corpus);

    int size() const { return static_cast<int>(tokens_.size()); }
    int rel_token(RelationLabel label) const {
        return kFirstRelation + static_cast<int>(label);
    }
    bool is_special(int id) const { return id < kFirstWord; }

    int word_id(const std::string& token) const; // kUnk when unknown
    std::vector<int> encode_text(const std::string& text) const;
    const std::string& token(int id) const;
    // Joins word/punctuation tokens with single spaces; specials are skipped.
    std::string decode_text(const std::vector<int>& ids) const;

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> ids_;
};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

enum class GenVariant { SP, Emb, SPEmb };
GenVariant variant_from_name(const std::string& name); // "sp" | "emb" | "sp_emb"
const std::string& variant_name(GenVariant v);

struct DecodeSpec {
    enum class Kind { Greedy, Beam, Sample };
    Kind kind = Kind::Greedy;
    int beam_width = 4;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};
DecodeSpec decode_spec_from_string(const std::string& s); // greedy | beam:4 | sample:0.9:7

struct GeneratorConfig {
    int model_dim = 128;
    int ffn_dim = 256;
    int enc_layers = 2;
    int dec_layers = 2;
    int num_heads = 4;
    int max_src_len = 192;
    int max_tgt_len = 48;
    GenVariant variant = GenVariant::SPEmb;
    double tau = 0.2;
    bool dwa_hard = true; // false: differentiable soft blend (gradient checks)
    int coherence_dim = 64;
    int pc_epochs = 20;   // persona-consistency pre-stage (no coherence memory)
    int epochs = 500;
    double lr = 1e-3;
    int batch_size = 8;
    std::uint64_t seed = 42;
    std::string config_hash;
    DecodeSpec decode;
};

void init_generator_params(ParamStore& store, const GeneratorConfig& config,
                           int vocab_size, Rng& rng);

// ---------------------------------------------------------------------------
// Input construction
// ---------------------------------------------------------------------------

// [BOS][PER] persona tokens ([QRY] q [RSP] r)* [QRY] q_K [EOS]; context texts
// alternate user/bot and must end with a user query (odd count). Over-length
// inputs drop the oldest exchange pair first; persona is only truncated after
// the context is down to the final query.
std::vector<int> build_encoder_input(const Vocabulary& vocab,
                                     const std::vector<std::string>& persona,
                                     const std::vector<std::string>& context,
                                     int max_len);

// Fixed-shape prompt: [PROMPT] "respond" "with" + exactly 3 relation slots.
// SP/SP+Emb fill slots with [REL:*] tokens in descending predicted
// probability ([PAD] padding); Emb leaves all slots [PAD] (relations enter
// through embeddings instead).
std::vector<int> build_prompt(const Vocabulary& vocab,
                              const std::vector<RelationLabel>& predicted_types,
                              GenVariant variant);

struct DecoderSequence {
    std::vector<int> inputs;   // seq[0 .. L-2]
    std::vector<int> targets;  // seq[1 .. L-1]
    std::vector<int> loss_pos; // indices into targets that are scored
};

// Full decoder sequence: prompt + [BOS] [RSP] response [EOS], teacher-forced.
DecoderSequence make_decoder_sequence(const std::vector<int>& prompt_ids,
                                      const std::vector<int>& response_ids,
                                      int max_len);

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct GateStats {
    double persona_selected = 0.0; // sum of gate decisions b
    double total = 0.0;            // number of gated dimensions
    double mean() const { return total > 0 ? persona_selected / total : 0.0; }
};

ad::Node* encode_source(ad::Tape& tape, const GeneratorConfig& config, ParamStore& store,
                        const std::vector<int>& src_ids);

// Decoder forward to vocabulary logits [T x V]. h_d == nullptr selects the
// degraded persona-only path; emb_types feed r_emb for Emb variants.
ad::Node* decode_logits(ad::Tape& tape, const GeneratorConfig& config, ParamStore& store,
                        ad::Node* enc_out, const std::vector<int>& dec_inputs,
                        const Mat* h_d, const std::vector<RelationLabel>& emb_types,
                        GateStats* gate_stats = nullptr);

// Per-token language-model loss (masked mean NLL); token_count returns the
// number of scored positions.
ad::Node* lm_loss(ad::Tape& tape, ad::Node* logits, const DecoderSequence& seq,
                  long* token_count = nullptr);

// One-line direct aggregation op, exposed for tests.
ad::Node* dynamic_weighted_aggregation(ad::Tape& tape, ad::Node* c_persona,
                                       ad::Node* c_coherence, ad::Node* gate,
                                       ad::Node* mask_logits, double tau, bool hard);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainExample {
    std::string dialogue_id;
    int response_index = 0; // utterance id of the gold response
    std::vector<int> src_ids;
    std::vector<int> prompt_ids;
    std::vector<int> response_ids;
    Mat h_d;                              // coherence memory of the prefix
    std::vector<RelationLabel> types;     // predicted response types
    std::vector<std::string> context;     // texts 0..p-1
    std::string gold;                     // text of the gold response
};

// Builds one example per bot response; prefix graphs are rebuilt with the
// given provider and window d, H_D and types come from the coherence model.
std::vector<TrainExample> build_train_examples(
    const std::vector<Dialogue>& corpus, const Vocabulary& vocab,
    const GeneratorConfig& config, const CoherenceConfig& coh_config,
    ParamStore& coh_store, EmbeddingProvider& provider, int d);

struct GenEpochLoss {
    int epoch = 0;
    double loss = 0.0; // NLL per token
};

struct TrainGeneratorResult {
    Checkpoint checkpoint;
    std::vector<GenEpochLoss> log;
    bool descent_abort = false; // first-10-epoch strict descent violated
    bool diverged = false;
};

TrainGeneratorResult train_generator(const GeneratorConfig& config,
                                     const Vocabulary& vocab,
                                     const std::vector<TrainExample>& examples);

GeneratorConfig generator_config_from_checkpoint(const Checkpoint& ckpt);
Vocabulary vocabulary_from_checkpoint(const Checkpoint& ckpt);

void write_gen_csv(const std::string& path, const std::vector<GenEpochLoss>& log);

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct GenerationResult {
    std::string dialogue_id;
    std::string response;
    std::vector<RelationLabel> predicted_types;
    double gate_mean = 0.0;
    bool truncated = false;
};

// Autoregressive decode given a source, a prompt, and an optional coherence
// memory. Greedy decoding is deterministic.
GenerationResult generate_response(const GeneratorConfig& config, ParamStore& store,
                                   const Vocabulary& vocab,
                                   const std::vector<int>& src_ids,
                                   const std::vector<int>& prompt_ids,
                                   const Mat* h_d,
                                   const std::vector<RelationLabel>& types,
                                   const DecodeSpec& decode);

std::string generation_to_json_line(const GenerationResult& r);

} // namespace mudi
