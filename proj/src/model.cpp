#include "gridflow/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "gridflow/rng.hpp"

namespace gridflow {

void ModelConfig::validate() const {
    if (hidden == 0 || hidden_wide == 0) throw std::invalid_argument("model config: widths must be positive");
    if (heads == 0 || hidden % heads != 0) throw std::invalid_argument("model config: hidden width must be divisible by heads");
    if (layers == 0) throw std::invalid_argument("model config: layers must be >= 1");
    if (steps == 0) throw std::invalid_argument("model config: steps (K) must be >= 1");
    if (node_dim != kNodeFeatureDim || edge_dim != kEdgeFeatureDim || state_dim != 2) {
        throw std::invalid_argument("model config: feature dimensions must match the grid encoders");
    }
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"hidden", c.hidden},       {"hidden_wide", c.hidden_wide}, {"heads", c.heads},
            {"layers", c.layers},       {"steps", c.steps},             {"node_dim", c.node_dim},
            {"edge_dim", c.edge_dim},   {"state_dim", c.state_dim},     {"update_scale", c.update_scale}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.hidden = j.value("hidden", c.hidden);
    c.hidden_wide = j.value("hidden_wide", c.hidden_wide);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.steps = j.value("steps", c.steps);
    c.node_dim = j.value("node_dim", c.node_dim);
    c.edge_dim = j.value("edge_dim", c.edge_dim);
    c.state_dim = j.value("state_dim", c.state_dim);
    c.update_scale = j.value("update_scale", c.update_scale);
    return c;
}

namespace {

Parameter uniform_fan_in(std::string name, std::size_t rows, std::size_t cols, Rng& rng) {
    Parameter p{std::move(name), {rows, cols}, std::vector<double>(rows * cols), false};
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    for (auto& v : p.values) v = uniform(rng, -bound, bound);
    return p;
}

Parameter filled(std::string name, std::size_t rows, std::size_t cols, double value) {
    return {std::move(name), {rows, cols}, std::vector<double>(rows * cols, value), false};
}

std::string layer_prefix(std::size_t layer) { return "layers." + std::to_string(layer) + "."; }

}  // namespace

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    auto rng = make_rng(seed, 0x6d6f64656cULL);
    const std::size_t d = config_.hidden, wide = config_.hidden_wide, dh = config_.head_dim();
    const std::size_t in_dim = config_.node_dim + config_.state_dim;

    parameters_.push_back(uniform_fan_in("encoder.weight", d, in_dim, rng));
    parameters_.push_back(filled("encoder.bias", 1, d, 0.0));
    for (std::size_t l = 0; l < config_.layers; ++l) {
        const auto pre = layer_prefix(l);
        for (std::size_t m = 0; m < config_.heads; ++m) {
            for (auto which : {Projection::Query, Projection::Key, Projection::Value}) {
                parameters_.push_back(uniform_fan_in(projection_name(l, m, which), dh, d, rng));
            }
        }
        parameters_.push_back(uniform_fan_in(pre + "W_O", d, d, rng));
        parameters_.push_back(filled(pre + "b_O", 1, d, 0.0));
        parameters_.push_back(filled(pre + "norm1.gain", 1, d, 1.0));
        parameters_.push_back(filled(pre + "norm1.bias", 1, d, 0.0));
        parameters_.push_back(uniform_fan_in(pre + "ffn.W1", wide, d, rng));
        parameters_.push_back(filled(pre + "ffn.b1", 1, wide, 0.0));
        parameters_.push_back(uniform_fan_in(pre + "ffn.W2", d, wide, rng));
        parameters_.push_back(filled(pre + "ffn.b2", 1, d, 0.0));
        parameters_.push_back(filled(pre + "norm2.gain", 1, d, 1.0));
        parameters_.push_back(filled(pre + "norm2.bias", 1, d, 0.0));
        for (std::size_t m = 0; m < config_.heads; ++m) {
            const auto edge = pre + "edge." + std::to_string(m) + ".";
            parameters_.push_back(uniform_fan_in(edge + "W1", wide, config_.edge_dim, rng));
            parameters_.push_back(filled(edge + "b1", 1, wide, 0.0));
            parameters_.push_back(uniform_fan_in(edge + "W2", 1, wide, rng));
            parameters_.push_back(filled(edge + "b2", 1, 1, 0.0));
        }
    }
    parameters_.push_back(uniform_fan_in("head.W1", wide, d, rng));
    parameters_.push_back(filled("head.b1", 1, wide, 0.0));
    // Zero output layer: the untrained model reproduces the initial state.
    parameters_.push_back(filled("head.W2", 2, wide, 0.0));
    parameters_.push_back(filled("head.b2", 1, 2, 0.0));
    reindex();
}

void Model::reindex() {
    index_.clear();
    for (std::size_t i = 0; i < parameters_.size(); ++i) {
        if (!index_.emplace(parameters_[i].name, i).second) {
            throw std::invalid_argument("duplicate parameter '" + parameters_[i].name + "'");
        }
    }
}

bool Model::has_parameter(std::string_view name) const { return index_.find(name) != index_.end(); }

Parameter& Model::parameter(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
    return parameters_[it->second];
}

const Parameter& Model::parameter(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
    return parameters_[it->second];
}

void Model::add_parameter(Parameter p) {
    if (has_parameter(p.name)) throw std::invalid_argument("parameter '" + p.name + "' already exists");
    if (p.values.size() != p.shape.size()) throw std::invalid_argument("parameter '" + p.name + "' has wrong size");
    parameters_.push_back(std::move(p));
    index_.emplace(parameters_.back().name, parameters_.size() - 1);
}

void Model::remove_parameter(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
    parameters_.erase(parameters_.begin() + static_cast<std::ptrdiff_t>(it->second));
    reindex();
}

const LoraAdapter* Model::adapter_for(std::string_view target) const {
    for (const auto& a : adapters_) {
        if (a.target == target) return &a;
    }
    return nullptr;
}

std::string Model::projection_name(std::size_t layer, std::size_t head, Projection which) {
    const char* suffix = which == Projection::Query ? "W_Q" : which == Projection::Key ? "W_K" : "W_V";
    return layer_prefix(layer) + "heads." + std::to_string(head) + "." + suffix;
}

bool Model::is_head_parameter(std::string_view name) { return name.starts_with("head."); }

bool Model::is_lora_parameter(std::string_view name) {
    return name.ends_with(".lora_A") || name.ends_with(".lora_B");
}

std::size_t count_params(const Model& model, bool trainable_only) {
    std::size_t total = 0;
    for (const auto& p : model.parameters()) {
        if (!trainable_only || !p.frozen) total += p.values.size();
    }
    return total;
}

std::size_t count_base_params(const Model& model) {
    std::size_t total = 0;
    for (const auto& p : model.parameters()) {
        if (!Model::is_lora_parameter(p.name)) total += p.values.size();
    }
    return total;
}

nlohmann::json to_json(const Model& model) {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : model.parameters()) {
        params.push_back({{"name", p.name},
                          {"rows", p.shape.rows},
                          {"cols", p.shape.cols},
                          {"frozen", p.frozen},
                          {"values", p.values}});
    }
    nlohmann::json adapters = nlohmann::json::array();
    for (const auto& a : model.adapters()) {
        adapters.push_back({{"target", a.target}, {"rank", a.rank}, {"alpha", a.alpha}});
    }
    return {{"format", "gridflow-model"},
            {"version", 1},
            {"config", to_json(model.config())},
            {"parameters", std::move(params)},
            {"adapters", std::move(adapters)}};
}

Model model_from_json(const nlohmann::json& j) {
    if (j.value("format", std::string()) != "gridflow-model") throw std::runtime_error("not a gridflow model checkpoint");
    Model rebuilt(model_config_from_json(j.at("config")), 0);
    while (!rebuilt.parameters().empty()) rebuilt.remove_parameter(rebuilt.parameters().back().name);
    for (const auto& p : j.at("parameters")) {
        Parameter param{p.at("name").get<std::string>(),
                        {p.at("rows").get<std::size_t>(), p.at("cols").get<std::size_t>()},
                        p.at("values").get<std::vector<double>>(),
                        p.at("frozen").get<bool>()};
        rebuilt.add_parameter(std::move(param));
    }
    for (const auto& a : j.at("adapters")) {
        LoraAdapter adapter{a.at("target").get<std::string>(), a.at("rank").get<std::size_t>(), a.at("alpha").get<double>()};
        if (!rebuilt.has_parameter(adapter.a_name()) || !rebuilt.has_parameter(adapter.b_name())) {
            throw std::runtime_error("checkpoint adapter '" + adapter.target + "' is missing its A/B matrices");
        }
        rebuilt.adapters().push_back(adapter);
    }
    return rebuilt;
}

void save_model(const Model& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out << to_json(model).dump() << '\n';
    if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("missing checkpoint " + path.string());
    try {
        return model_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed checkpoint " + path.string() + ": " + e.what());
    }
}

BoundModel::BoundModel(ad::Tape& tape, const Model& model) {
    for (const auto& p : model.parameters()) {
        tensors_.emplace(p.name, tape.leaf(p.shape, p.values, !p.frozen));
    }
}

const ad::Tensor& BoundModel::operator[](std::string_view name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("no bound parameter '" + std::string(name) + "'");
    return it->second;
}

ad::Tensor edge_bias(const ad::Tensor& edge_features, const EdgeMlp& mlp) {
    const auto hidden = ad::tanh(ad::linear(edge_features, mlp.w1, &mlp.b1));
    return ad::linear(hidden, mlp.w2, &mlp.b2);
}

ad::Tensor attention_layer(const ad::Tensor& h, const GraphBatch& batch, const LayerWeights& weights,
                           const ad::Tensor& edge_biases, AttentionTrace* trace) {
    if (h.rows() != batch.n_nodes) throw std::invalid_argument("attention_layer: node count mismatch");
    const std::size_t heads = edge_biases.cols();
    const auto qkv = ad::linear(h, weights.w_qkv);
    const auto merged = ad::edge_attention(qkv, edge_biases, batch.src, batch.dst, heads);
    if (trace) {
        trace->alpha = ad::attention_weights(qkv, edge_biases, batch.src, batch.dst, heads);
        trace->aggregate = merged;
    }
    const auto h1 = ad::layer_norm(ad::add(h, ad::linear(merged, weights.w_o, &weights.b_o)), weights.norm1_gain,
                                   weights.norm1_bias);
    const auto ffn = ad::linear(ad::tanh(ad::linear(h1, weights.ffn_w1, &weights.ffn_b1)), weights.ffn_w2, &weights.ffn_b2);
    return ad::layer_norm(ad::add(h1, ffn), weights.norm2_gain, weights.norm2_bias);
}

ad::Tensor effective_weight(const Model& model, const BoundModel& bound, const std::string& name) {
    const auto& base = bound[name];
    const auto* adapter = model.adapter_for(name);
    if (!adapter) return base;
    const auto delta = ad::matmul(bound[adapter->a_name()], bound[adapter->b_name()]);
    return ad::add(base, ad::scale(delta, adapter->scaling()));
}

LayerWeights layer_weights(const Model& model, const BoundModel& bound, std::size_t layer) {
    const auto pre = layer_prefix(layer);
    LayerWeights w;
    std::vector<ad::Tensor> rows;
    for (auto which : {Projection::Query, Projection::Key, Projection::Value}) {
        for (std::size_t m = 0; m < model.config().heads; ++m) {
            rows.push_back(effective_weight(model, bound, Model::projection_name(layer, m, which)));
        }
    }
    w.w_qkv = ad::concat(rows, 0);
    w.w_o = bound[pre + "W_O"];
    w.b_o = bound[pre + "b_O"];
    w.norm1_gain = bound[pre + "norm1.gain"];
    w.norm1_bias = bound[pre + "norm1.bias"];
    w.ffn_w1 = bound[pre + "ffn.W1"];
    w.ffn_b1 = bound[pre + "ffn.b1"];
    w.ffn_w2 = bound[pre + "ffn.W2"];
    w.ffn_b2 = bound[pre + "ffn.b2"];
    w.norm2_gain = bound[pre + "norm2.gain"];
    w.norm2_bias = bound[pre + "norm2.bias"];
    return w;
}

EdgeMlp edge_mlp(const BoundModel& bound, std::size_t layer, std::size_t head) {
    const auto pre = layer_prefix(layer) + "edge." + std::to_string(head) + ".";
    return {bound[pre + "W1"], bound[pre + "b1"], bound[pre + "W2"], bound[pre + "b2"]};
}

ad::Tensor layer_edge_biases(const Model& model, const BoundModel& bound, const ad::Tensor& edge_features,
                             std::size_t layer) {
    std::vector<ad::Tensor> cols;
    for (std::size_t m = 0; m < model.config().heads; ++m) cols.push_back(edge_bias(edge_features, edge_mlp(bound, layer, m)));
    return cols.size() == 1 ? cols[0] : ad::concat(cols, 1);
}

Trajectory forward(ad::Tape& tape, const Model& model, const BoundModel& bound, const GraphBatch& batch) {
    const auto& cfg = model.config();
    const std::size_t n = batch.n_nodes;
    const auto features = tape.constant({n, cfg.node_dim}, batch.node_features);
    const auto free_mask = tape.constant({n, 1}, batch.free_mask);
    // The edge MLPs only see distinct feature rows; biases are then gathered per edge.
    const auto edges = tape.constant({batch.distinct_edge_features.size() / cfg.edge_dim, cfg.edge_dim},
                                     batch.distinct_edge_features);

    // Weights and edge biases do not depend on the state: build them once per pass.
    std::vector<LayerWeights> layers;
    std::vector<ad::Tensor> biases;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        layers.push_back(layer_weights(model, bound, l));
        biases.push_back(ad::gather_rows(layer_edge_biases(model, bound, edges, l), batch.edge_feature_row));
    }

    Trajectory traj;
    traj.v_mag.push_back(tape.constant({n, 1}, batch.v_init));
    traj.theta.push_back(tape.constant({n, 1}, batch.theta_init));
    for (std::size_t t = 1; t <= cfg.steps; ++t) {
        const auto input = ad::concat({features, traj.v_mag.back(), traj.theta.back()}, 1);
        auto h = ad::tanh(ad::linear(input, bound["encoder.weight"], &bound["encoder.bias"]));
        for (std::size_t l = 0; l < cfg.layers; ++l) h = attention_layer(h, batch, layers[l], biases[l]);
        const auto hidden = ad::tanh(ad::linear(h, bound["head.W1"], &bound["head.b1"]));
        const auto update = ad::linear(hidden, bound["head.W2"], &bound["head.b2"]);
        const auto dv = ad::mul(ad::slice(update, 1, 0, 1), free_mask);
        const auto dtheta = ad::mul(ad::slice(update, 1, 1, 2), free_mask);
        traj.v_mag.push_back(ad::add(traj.v_mag.back(), ad::scale(dv, cfg.update_scale)));
        traj.theta.push_back(ad::add(traj.theta.back(), ad::scale(dtheta, cfg.update_scale)));
        for (const auto* column : {&traj.v_mag.back(), &traj.theta.back()}) {
            for (double value : column->values()) {
                if (!std::isfinite(value)) throw std::runtime_error("numerical blowup at step " + std::to_string(t));
            }
        }
    }
    return traj;
}

std::vector<VoltageProfile> predict(const Model& model, const GraphBatch& batch) {
    ad::Tape tape(false);
    const BoundModel bound(tape, model);
    const auto traj = forward(tape, model, bound, batch);
    const auto v = traj.final_v().values();
    const auto th = traj.final_theta().values();
    std::vector<VoltageProfile> out(batch.n_graphs);
    for (std::size_t g = 0; g < batch.n_graphs; ++g) {
        const auto begin = static_cast<std::ptrdiff_t>(batch.node_offset[g]);
        const auto end = static_cast<std::ptrdiff_t>(batch.node_offset[g + 1]);
        out[g].v_mag.assign(v.begin() + begin, v.begin() + end);
        out[g].theta.assign(th.begin() + begin, th.begin() + end);
    }
    return out;
}

}  // namespace gridflow
