#include "saessv/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "saessv/error.hpp"

namespace saessv::nd {

static_assert(std::endian::native == std::endian::little, "float64 blobs are written in host order");

std::filesystem::path with_suffix(const std::filesystem::path& base, const std::string& suffix) {
    return std::filesystem::path(base.string() + suffix);
}

void write_f64(const std::filesystem::path& path, std::span<const double> values) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    if (!out) throw ArtifactError("short write to " + path.string());
}

std::vector<double> read_f64(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw ArtifactError("cannot read " + path.string());
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes % sizeof(double) != 0) throw ArtifactError(path.string() + " is not a float64 blob");
    std::vector<double> values(bytes / sizeof(double));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
    return values;
}

namespace {

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot read " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

}  // namespace

void save_tensor(const Tensor& t, const std::string& name, const std::filesystem::path& base) {
    write_f64(with_suffix(base, ".bin"), t.data());
    write_json(with_suffix(base, ".json"), {{"shape", t.shape()}, {"name", name}});
}

Tensor load_tensor(const std::filesystem::path& base, std::string* name) {
    const auto meta = read_json(with_suffix(base, ".json"));
    auto values = read_f64(with_suffix(base, ".bin"));
    if (name) *name = meta.value("name", "");
    return Tensor(meta.at("shape").get<Shape>(), std::move(values));
}

const Tensor& TensorBundle::get(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return t;
    }
    throw ArtifactError("bundle has no tensor named " + name);
}

void save_bundle(const TensorBundle& bundle, const std::filesystem::path& base) {
    std::vector<double> blob;
    nlohmann::json index = nlohmann::json::array();
    for (const auto& [name, t] : bundle.tensors) {
        index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", blob.size()}});
        blob.insert(blob.end(), t.data().begin(), t.data().end());
    }
    write_f64(with_suffix(base, ".bin"), blob);
    write_json(with_suffix(base, ".json"), {{"tensors", index}, {"meta", bundle.meta}});
}

TensorBundle load_bundle(const std::filesystem::path& base) {
    const auto sidecar = read_json(with_suffix(base, ".json"));
    const auto blob = read_f64(with_suffix(base, ".bin"));
    TensorBundle bundle;
    bundle.meta = sidecar.value("meta", nlohmann::json::object());
    for (const auto& entry : sidecar.at("tensors")) {
        const auto shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::size_t>();
        const auto n = shape_numel(shape);
        if (offset + n > blob.size()) throw ArtifactError("bundle index points past the end of " + base.string() + ".bin");
        bundle.tensors.emplace_back(entry.at("name").get<std::string>(),
                                    Tensor(shape, std::vector<double>(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                                                                      blob.begin() + static_cast<std::ptrdiff_t>(offset + n))));
    }
    return bundle;
}

}  // namespace saessv::nd
