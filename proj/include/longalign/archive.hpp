#pragma once

// Single-file container for checkpoints: a JSON header (free-form metadata plus
// an index) followed by raw little-endian float32 tensors and opaque byte blobs.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace longalign::archive {

struct Archive {
    nlohmann::json meta;
    std::vector<std::pair<std::string, torch::Tensor>> tensors;
    std::map<std::string, std::string> blobs;
};

void write(const std::string& path, const Archive& a);
Archive read(const std::string& path);  // throws FormatError / DataError

// Load named tensors into a module's parameters. Names and shapes must match
// exactly; throws FormatError otherwise.
void load_parameters(torch::nn::Module& module, const std::vector<std::pair<std::string, torch::Tensor>>& params);
std::vector<std::pair<std::string, torch::Tensor>> capture_parameters(const torch::nn::Module& module);

// torch optimizer state to and from an opaque byte string.
std::string save_optimizer(const torch::optim::Optimizer& opt);
void load_optimizer(torch::optim::Optimizer& opt, const std::string& blob);

}  // namespace longalign::archive
