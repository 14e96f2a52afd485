#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gridflow/autodiff.hpp"
#include "gridflow/graph_batch.hpp"

namespace gridflow {

struct ModelConfig {
    std::size_t hidden = 8;        // d
    std::size_t hidden_wide = 32;  // d_hi: feed-forward, edge-MLP and prediction-head width
    std::size_t heads = 2;         // M
    std::size_t layers = 8;        // L, shared across refinement steps
    std::size_t steps = 10;        // K unrolled refinement steps
    std::size_t node_dim = kNodeFeatureDim;
    std::size_t edge_dim = kEdgeFeatureDim;
    std::size_t state_dim = 2;     // (V, theta) fed back each step
    double update_scale = 0.1;

    std::size_t head_dim() const { return hidden / heads; }
    void validate() const;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Parameter {
    std::string name;
    ad::Shape shape;
    std::vector<double> values;
    bool frozen = false;
};

// Low-rank update (alpha / rank) * A * B of one attention projection.
struct LoraAdapter {
    std::string target;
    std::size_t rank = 2;
    double alpha = 8.0;

    double scaling() const { return alpha / static_cast<double>(rank); }
    std::string a_name() const { return target + ".lora_A"; }
    std::string b_name() const { return target + ".lora_B"; }
};

enum class Projection { Query, Key, Value };

/// Parameter store of the edge-aware attention GNN. Parameters are kept in
/// creation order; names encode their role:
///   encoder.{weight,bias}
///   layers.L.heads.M.{W_Q,W_K,W_V}     per-head projections (d_h x d)
///   layers.L.{W_O,b_O}                 head concat -> d
///   layers.L.norm{1,2}.{gain,bias}
///   layers.L.ffn.{W1,b1,W2,b2}
///   layers.L.edge.M.{W1,b1,W2,b2}      f_edge: d_e -> d_hi -> 1
///   head.{W1,b1,W2,b2}                 prediction head: d -> d_hi -> 2
class Model {
public:
    Model() = default;
    Model(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    std::vector<Parameter>& parameters() { return parameters_; }
    const std::vector<Parameter>& parameters() const { return parameters_; }
    bool has_parameter(std::string_view name) const;
    Parameter& parameter(std::string_view name);
    const Parameter& parameter(std::string_view name) const;
    void add_parameter(Parameter p);
    void remove_parameter(std::string_view name);

    std::vector<LoraAdapter>& adapters() { return adapters_; }
    const std::vector<LoraAdapter>& adapters() const { return adapters_; }
    const LoraAdapter* adapter_for(std::string_view target) const;

    static std::string projection_name(std::size_t layer, std::size_t head, Projection which);
    static bool is_head_parameter(std::string_view name);
    static bool is_lora_parameter(std::string_view name);

private:
    void reindex();

    ModelConfig config_;
    std::vector<Parameter> parameters_;
    std::map<std::string, std::size_t, std::less<>> index_;
    std::vector<LoraAdapter> adapters_;
};

std::size_t count_params(const Model& model, bool trainable_only);
// Parameters that exist without adapters; the Full-FT trainable count.
std::size_t count_base_params(const Model& model);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);
nlohmann::json to_json(const Model& model);
Model model_from_json(const nlohmann::json& j);

// ---- forward pass ----

// Parameters placed on a tape as leaves; frozen parameters do not require grad.
class BoundModel {
public:
    BoundModel(ad::Tape& tape, const Model& model);
    const ad::Tensor& operator[](std::string_view name) const;
    const std::map<std::string, ad::Tensor, std::less<>>& tensors() const { return tensors_; }

private:
    std::map<std::string, ad::Tensor, std::less<>> tensors_;
};

struct EdgeMlp {
    ad::Tensor w1, b1, w2, b2;
};

struct LayerWeights {
    // Effective (adapter-applied) projections of all heads stacked as rows
    // [Q_0 .. Q_{M-1}, K_0 .., V_0 ..]: 3d x d.
    ad::Tensor w_qkv;
    ad::Tensor w_o, b_o;
    ad::Tensor norm1_gain, norm1_bias;
    ad::Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    ad::Tensor norm2_gain, norm2_bias;
};

// Attention coefficients and aggregated messages of one layer, for inspection.
struct AttentionTrace {
    std::vector<double> alpha;  // n_edges x heads, row-major
    ad::Tensor aggregate;       // n_nodes x d, heads side by side
};

// Scalar head-specific bias per directed edge: n_edges x 1.
ad::Tensor edge_bias(const ad::Tensor& edge_features, const EdgeMlp& mlp);

/// One edge-aware multi-head attention layer: per head, logits
/// q_i.k_j / sqrt(d_h) + beta_ij softmaxed over each node's incoming edges,
/// value aggregation, head concat, output projection, then residual + layer
/// norm and a residual tanh feed-forward block with a second layer norm.
/// `edge_biases` is n_edges x heads.
ad::Tensor attention_layer(const ad::Tensor& h, const GraphBatch& batch, const LayerWeights& weights,
                           const ad::Tensor& edge_biases, AttentionTrace* trace = nullptr);

// W + (alpha / r) A B when an adapter targets `name`, else W itself.
ad::Tensor effective_weight(const Model& model, const BoundModel& bound, const std::string& name);
LayerWeights layer_weights(const Model& model, const BoundModel& bound, std::size_t layer);
EdgeMlp edge_mlp(const BoundModel& bound, std::size_t layer, std::size_t head);
// All heads' edge biases of one layer side by side: n_edges x heads.
ad::Tensor layer_edge_biases(const Model& model, const BoundModel& bound, const ad::Tensor& edge_features,
                             std::size_t layer);

// States V^(0..K) as (n_nodes x 1) magnitude and angle columns.
struct Trajectory {
    std::vector<ad::Tensor> v_mag;
    std::vector<ad::Tensor> theta;

    std::size_t steps() const { return v_mag.empty() ? 0 : v_mag.size() - 1; }
    const ad::Tensor& final_v() const { return v_mag.back(); }
    const ad::Tensor& final_theta() const { return theta.back(); }
};

/// Unrolled refinement: each step encodes [node features | V | theta],
/// runs the shared L-layer stack, reads (dV, dtheta) from the prediction
/// head and adds update_scale times that to every non-slack bus. The slack
/// entries therefore stay bit-identical to their setpoints. Throws
/// std::runtime_error("numerical blowup at step t") on non-finite states.
Trajectory forward(ad::Tape& tape, const Model& model, const BoundModel& bound, const GraphBatch& batch);

// Convenience: evaluation-mode forward returning plain profiles per graph.
std::vector<VoltageProfile> predict(const Model& model, const GraphBatch& batch);

}  // namespace gridflow
