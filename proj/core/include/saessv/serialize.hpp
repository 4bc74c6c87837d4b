#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saessv/tensor.hpp"

namespace saessv::nd {

// Single tensor: `<base>.bin` holds little-endian float64 values, `<base>.json`
// holds {"shape": [...], "name": "..."}.
void save_tensor(const Tensor& t, const std::string& name, const std::filesystem::path& base);
Tensor load_tensor(const std::filesystem::path& base, std::string* name = nullptr);

// Named-tensor container: one `<base>.bin` blob with every tensor back to
// back and a `<base>.json` sidecar listing {"name", "shape", "offset"} per
// tensor (offset in elements) plus free-form metadata under "meta".
struct TensorBundle {
    std::vector<std::pair<std::string, Tensor>> tensors;
    nlohmann::json meta = nlohmann::json::object();

    const Tensor& get(const std::string& name) const;
};

void save_bundle(const TensorBundle& bundle, const std::filesystem::path& base);
TensorBundle load_bundle(const std::filesystem::path& base);

// Raw little-endian float64 I/O.
void write_f64(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64(const std::filesystem::path& path);

std::filesystem::path with_suffix(const std::filesystem::path& base, const std::string& suffix);

}  // namespace saessv::nd
