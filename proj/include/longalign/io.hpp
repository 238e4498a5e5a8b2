#pragma once

// Image and displacement-field files.

#include <filesystem>

#include <torch/torch.h>

#include "longalign/warpkit.hpp"

namespace longalign::io {

// Single-channel 8- or 16-bit PNG -> (1, H, W) float32 in [0, 1].
torch::Tensor load_image(const std::filesystem::path& path);

// (1, H, W) or (H, W) tensor, clamped to [0, 1], written as 16-bit PNG.
void save_image(const std::filesystem::path& path, const torch::Tensor& image);

// Field files: `<stem>.bin` holds little-endian float32 values in (2, H, W)
// order and `<stem>.json` holds {"h": H, "w": W, "units": "px"}. Either path
// may be given.
void save_field(const std::filesystem::path& path, const warpkit::DeformationField& field);
warpkit::DeformationField load_field(const std::filesystem::path& path);

}  // namespace longalign::io
