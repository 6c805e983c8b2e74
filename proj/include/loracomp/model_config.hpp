// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "loracomp/core.hpp"
#include "loracomp/lora.hpp"

namespace loracomp {

/// Shape of the patch transformer. Inputs are square images of
/// `image_side`² values cut into non-overlapping `patch_side`² patches.
struct ModelConfig {
    std::size_t image_side = 8;
    std::size_t patch_side = 4;
    std::size_t d_model = 16;
    std::size_t heads = 2;
    std::size_t blocks = 2;
    std::size_t mlp_hidden = 32;

    std::size_t input_dim() const noexcept { return image_side * image_side; }
    std::size_t patch_dim() const noexcept { return patch_side * patch_side; }
    std::size_t tokens() const noexcept {
        const std::size_t per_side = image_side / patch_side;
        return per_side * per_side;
    }
    std::size_t head_dim() const noexcept { return d_model / heads; }

    void validate() const {
        if (image_side == 0 || patch_side == 0 || image_side % patch_side != 0) {
            throw ConfigError("image side must be a positive multiple of the patch side");
        }
        if (d_model == 0 || heads == 0 || d_model % heads != 0) {
            throw ConfigError("d_model must be divisible by heads");
        }
        if (blocks == 0 || mlp_hidden == 0) {
            throw ConfigError("blocks and mlp_hidden must be positive");
        }
    }

    /// Canonical text used for hashing; class count is task-dependent and excluded.
    std::string canonical() const {
        return "image_side=" + std::to_string(image_side) + ";patch_side=" + std::to_string(patch_side) +
               ";d_model=" + std::to_string(d_model) + ";heads=" + std::to_string(heads) +
               ";blocks=" + std::to_string(blocks) + ";mlp_hidden=" + std::to_string(mlp_hidden);
    }

    std::uint64_t hash() const noexcept { return detail::fnv1a(canonical()); }

    /// The micro configuration used by gradient checks.
    static ModelConfig micro() {
        ModelConfig c;
        c.image_side = 4;
        c.patch_side = 2;
        c.d_model = 4;
        c.heads = 2;
        c.blocks = 2;
        c.mlp_hidden = 6;
        return c;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Adapted sites in canonical order: block-major, then q, k, v.
inline std::vector<SiteId> adapted_sites(const ModelConfig& cfg) {
    std::vector<SiteId> out;
    out.reserve(cfg.blocks * kAdaptedRoles.size());
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        for (Role r : kAdaptedRoles) {
            out.push_back({b, r});
        }
    }
    return out;
}

}  // namespace loracomp
