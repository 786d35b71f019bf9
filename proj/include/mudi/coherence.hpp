#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mudi/autodiff.hpp"
#include "mudi/checkpoint.hpp"
#include "mudi/dialogue_gat.hpp"
#include "mudi/graph.hpp"

namespace mudi {

// Fine-tuning of the dialogue graph encoder with relation-aware objectives:
// relation classification (class-balanced BCE), next-response-type prediction
// (direct + sequential heads), link prediction (inner-product decoder), and
// attention-based fusion of context and persona representations.

struct DcuWeights {
    double alpha = 1.0; // relation classification
    double beta = 0.5;  // direct next-response-type
    double gamma = 0.5; // sequential next-response-type
    double delta = 1.0; // link prediction
};

struct CoherenceConfig {
    GatConfig context_gat;  // use_relations = true
    GatConfig persona_gat;  // plain GATv2 over the complete persona graph
    int emb_dim = 64;       // F, shared by both encoders and the fusion
    int fusion_heads = 4;
    int head_hidden = 32;
    DcuWeights weights;
    double cb_beta = 0.999;     // class-balanced loss effective-number beta
    double negative_ratio = 1.0;
    double type_threshold = 0.5;
    int epochs = 100;
    double lr = 1e-3;
    int batch_size = 4;
    double holdout_fraction = 0.2;
    std::uint64_t seed = 42;
    std::string config_hash;
};

CoherenceConfig default_coherence_config(int in_dim, int emb_dim);

// Creates context/persona encoders, fusion and head parameters. Pretrained
// encoder weights can then be copied in by matching names.
void init_coherence_params(ParamStore& store, const CoherenceConfig& config, Rng& rng);

// n_c -> (1 - beta) / (1 - beta^{n_c}); defined as 1 when n_c = 0.
Mat class_balanced_weights(const std::vector<std::size_t>& counts, double beta);

std::vector<std::size_t> relation_class_counts(const std::vector<DialogueGraph>& graphs);

// --- tape builders ----------------------------------------------------------

ad::Node* encode_context(ad::Tape& tape, const CoherenceConfig& config,
                         ParamStore& store, const GatGraphView& view);
ad::Node* encode_persona(ad::Tape& tape, const CoherenceConfig& config,
                         ParamStore& store, const GatGraphView& view);

// Multi-head cross-attention, queries from H_C, keys/values from H_P.
ad::Node* fuse(ad::Tape& tape, const CoherenceConfig& config, ParamStore& store,
               ad::Node* h_c, ad::Node* h_p);

ad::Node* relation_classification_loss(ad::Tape& tape, const CoherenceConfig& config,
                                       ParamStore& store, ad::Node* h_d,
                                       const GatGraphView& view,
                                       const Mat& class_weights);

struct NextTypeLosses {
    ad::Node* direct = nullptr;
    ad::Node* seq = nullptr;
};
NextTypeLosses next_response_type_losses(ad::Tape& tape, const CoherenceConfig& config,
                                         ParamStore& store, ad::Node* h_d,
                                         const GatGraphView& view);

ad::Node* link_prediction_loss(ad::Tape& tape, ad::Node* h_d, const GatGraphView& view,
                               double negative_ratio, std::uint64_t seed);

ad::Node* dcu_loss(ad::Tape& tape, ad::Node* l_rc, ad::Node* l_direct, ad::Node* l_seq,
                   ad::Node* l_lp, const DcuWeights& w);

// --- inference ---------------------------------------------------------------

enum class TypePredictionMode { Direct, Sequential };

struct TypePrediction {
    std::vector<RelationLabel> labels; // descending probability, size 1..3
    std::vector<double> probabilities; // aligned with labels
};

// Probabilities over the 17 labels for the NEXT utterance after the last
// context node.
Eigen::VectorXd response_type_probabilities(const CoherenceConfig& config,
                                            ParamStore& store, const Mat& h_d,
                                            TypePredictionMode mode);

// Labels above `threshold`, capped at the top 3, argmax fallback when empty.
TypePrediction select_response_types(const Eigen::VectorXd& probs, double threshold);

TypePrediction predict_response_type(const CoherenceConfig& config, ParamStore& store,
                                     const Mat& h_d, TypePredictionMode mode,
                                     double threshold);

// Fused representation outside the tape (inference path).
struct CoherenceEncoding {
    Mat h_c;
    Mat h_p;
    Mat h_d;
};
CoherenceEncoding coherence_encode(const CoherenceConfig& config, ParamStore& store,
                                   const DialogueGraph& graph, const PersonaGraph& persona);

// Encoder-ablation replacements for H_D (the "none" mode is handled by the
// generator's degraded path instead).
enum class FusionMode { Attention, Add, ContextOnly, PersonaOnly, Random, None };
FusionMode fusion_mode_from_name(const std::string& name);
const std::string& fusion_mode_name(FusionMode mode);
Mat ablation_h_d(FusionMode mode, const Mat& h_c, const Mat& h_p, std::uint64_t seed);

// --- training ----------------------------------------------------------------

struct DcuEpochLoss {
    int epoch = 0;
    double rc = 0.0, direct = 0.0, seq = 0.0, lp = 0.0, dcu = 0.0;
    std::vector<double> per_class_f1; // 17 entries, validation split
};

struct FinetuneResult {
    Checkpoint checkpoint;
    std::vector<DcuEpochLoss> log;
    bool diverged = false;
};

FinetuneResult run_finetune(const CoherenceConfig& config, const GraphSet& set,
                            const Checkpoint* pretrain_ckpt);

CoherenceConfig coherence_config_from_checkpoint(const Checkpoint& ckpt);

void write_dcu_csv(const std::string& path, const std::vector<DcuEpochLoss>& log);

} // namespace mudi
