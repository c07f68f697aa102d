#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "keepfit/nn.hpp"
#include "keepfit/tensor.hpp"

namespace keepfit {

/// Self-describing binary container: magic, a JSON header (kind, metadata,
/// tensor directory) and the raw little-endian float64 payload.
struct Checkpoint {
    std::string kind;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> tensors;

    bool has(const std::string& name) const;
    const Tensor& tensor(const std::string& name) const;
    void put(std::string name, Tensor t) { tensors.emplace_back(std::move(name), std::move(t)); }

    void put_parameters(const nn::ParameterList& params, const std::string& prefix);
    /// Copies stored values into `params`; every parameter must be present
    /// with a matching shape.
    void load_parameters(const nn::ParameterList& params, const std::string& prefix) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Write to a sibling temporary file, then rename over `path`.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

} // namespace keepfit
