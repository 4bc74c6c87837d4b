#include "saessv/hash.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <iterator>
#include <memory>

#include "saessv/error.hpp"

namespace saessv {

namespace {

std::string sha256_hex16(const void* data, std::size_t len) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int digest_len = 0;
    if (EVP_Digest(data, len, digest.data(), &digest_len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 digest failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < 8 && i < digest_len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xF]);
    }
    return out;
}

}  // namespace

std::string content_hash(std::string_view bytes) { return sha256_hex16(bytes.data(), bytes.size()); }

std::string content_hash(std::span<const double> values) { return sha256_hex16(values.data(), values.size_bytes()); }

std::string file_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot read " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return content_hash(bytes);
}

}  // namespace saessv
