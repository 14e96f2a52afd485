#include "gridflow/adaptation.hpp"

#include <stdexcept>

namespace gridflow {

std::string to_string(AdaptMode mode) {
    switch (mode) {
        case AdaptMode::ZeroShot: return "zeroshot";
        case AdaptMode::FullFT: return "full_ft";
        case AdaptMode::HeadOnly: return "head_only";
        case AdaptMode::LoraOnly: return "lora_only";
        case AdaptMode::LoraPHead: return "lora_phead";
    }
    return "unknown";
}

AdaptMode parse_adapt_mode(std::string_view text) {
    for (auto mode : {AdaptMode::ZeroShot, AdaptMode::FullFT, AdaptMode::HeadOnly, AdaptMode::LoraOnly,
                      AdaptMode::LoraPHead}) {
        if (text == to_string(mode)) return mode;
    }
    throw std::invalid_argument("unknown adaptation mode '" + std::string(text) +
                                "' (expected zeroshot, full_ft, head_only, lora_only or lora_phead)");
}

bool uses_lora(AdaptMode mode) { return mode == AdaptMode::LoraOnly || mode == AdaptMode::LoraPHead; }

void LoraConfig::validate() const {
    if (rank == 0) throw std::invalid_argument("lora: rank must be >= 1");
    if (!(alpha > 0.0)) throw std::invalid_argument("lora: alpha must be positive");
    if (!(sigma >= 0.0)) throw std::invalid_argument("lora: sigma must be >= 0");
}

void attach_lora(Model& model, const LoraConfig& config, Rng& rng) {
    config.validate();
    const auto& cfg = model.config();
    std::normal_distribution<double> normal(0.0, config.sigma);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (std::size_t m = 0; m < cfg.heads; ++m) {
            for (auto which : {Projection::Query, Projection::Key, Projection::Value}) {
                const auto target = Model::projection_name(l, m, which);
                if (model.adapter_for(target)) throw std::logic_error("lora: '" + target + "' already has an adapter");
                auto& base = model.parameter(target);
                base.frozen = true;
                const ad::Shape shape = base.shape;
                LoraAdapter adapter{target, config.rank, config.alpha};
                Parameter a{adapter.a_name(), {shape.rows, config.rank}, std::vector<double>(shape.rows * config.rank), false};
                for (auto& v : a.values) v = config.sigma == 0.0 ? 0.0 : normal(rng);
                Parameter b{adapter.b_name(), {config.rank, shape.cols}, std::vector<double>(config.rank * shape.cols, 0.0), false};
                model.add_parameter(std::move(a));
                model.add_parameter(std::move(b));
                model.adapters().push_back(adapter);
            }
        }
    }
}

void merge_lora(Model& model) {
    if (model.adapters().empty()) throw std::logic_error("lora: no adapters to merge");
    for (const auto& adapter : model.adapters()) {
        const auto& a = model.parameter(adapter.a_name());
        const auto& b = model.parameter(adapter.b_name());
        auto& w = model.parameter(adapter.target);
        const std::size_t rows = w.shape.rows, cols = w.shape.cols, r = adapter.rank;
        const double s = adapter.scaling();
        // Same association as the adapter forward: W + s * (A B).
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < r; ++k) acc += a.values[i * r + k] * b.values[k * cols + j];
                w.values[i * cols + j] += s * acc;
            }
        }
        w.frozen = false;
    }
    const auto adapters = model.adapters();
    model.adapters().clear();
    for (const auto& adapter : adapters) {
        model.remove_parameter(adapter.a_name());
        model.remove_parameter(adapter.b_name());
    }
}

void apply_mode(Model& model, AdaptMode mode) {
    if (uses_lora(mode) && model.adapters().empty()) {
        throw std::logic_error("mode " + to_string(mode) + " needs LoRA adapters; attach them first");
    }
    if (!uses_lora(mode) && !model.adapters().empty()) {
        throw std::logic_error("mode " + to_string(mode) + " expects a model without adapters");
    }
    for (auto& p : model.parameters()) {
        const bool head = Model::is_head_parameter(p.name);
        const bool lora = Model::is_lora_parameter(p.name);
        bool trainable = false;
        switch (mode) {
            case AdaptMode::ZeroShot: trainable = false; break;
            case AdaptMode::FullFT: trainable = true; break;
            case AdaptMode::HeadOnly: trainable = head; break;
            case AdaptMode::LoraOnly: trainable = lora; break;
            case AdaptMode::LoraPHead: trainable = lora || head; break;
        }
        p.frozen = !trainable;
    }
}

double trainable_fraction(const Model& model) {
    return static_cast<double>(count_params(model, true)) / static_cast<double>(count_base_params(model));
}

}  // namespace gridflow
