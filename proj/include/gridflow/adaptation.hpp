#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "gridflow/model.hpp"
#include "gridflow/rng.hpp"

namespace gridflow {

enum class AdaptMode { ZeroShot, FullFT, HeadOnly, LoraOnly, LoraPHead };

std::string to_string(AdaptMode mode);
// Accepts zeroshot, full_ft, head_only, lora_only, lora_phead.
AdaptMode parse_adapt_mode(std::string_view text);
bool uses_lora(AdaptMode mode);

struct LoraConfig {
    std::size_t rank = 2;
    double alpha = 8.0;
    double sigma = 0.02;  // std of the A initialisation

    void validate() const;
};

/// Attaches A (d_out x r, normal(0, sigma^2)) and B (r x d_in, zeros) to every
/// query, key and value projection and freezes the adapted base matrices.
/// The forward pass is unchanged until B moves. Throws if a target already
/// carries an adapter.
void attach_lora(Model& model, const LoraConfig& config, Rng& rng);

/// Folds W + (alpha / r) A B into each target and removes the adapters.
/// Throws when no adapters are attached.
void merge_lora(Model& model);

/// Sets freeze flags: ZeroShot none trainable, FullFT all base parameters,
/// HeadOnly the prediction head, LoraOnly the adapters, LoraPHead adapters
/// and head. Lora modes require attached adapters.
void apply_mode(Model& model, AdaptMode mode);

// Trainable parameters over the non-adapter (Full-FT) parameter count.
double trainable_fraction(const Model& model);

}  // namespace gridflow
