#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dawn/common.hpp"

namespace dawn {

// DTEN: little-endian binary tensor container.
// Layout: magic "DTEN", u8 version=1, u8 dtype (0=f32, 1=u8), u8 rank,
// padding byte, rank x u32 dims, raw row-major payload.
struct Tensor {
    enum class DType : std::uint8_t { F32 = 0, U8 = 1 };

    DType dtype = DType::F32;
    std::vector<std::uint32_t> dims;
    std::vector<float> f32;
    std::vector<std::uint8_t> u8;

    std::size_t size() const {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return dims.empty() ? 0 : n;
    }
};

Tensor load_dten(const std::filesystem::path& path);
void save_dten(const std::filesystem::path& path, const Tensor& t);

// Row-major flattening of an Eigen matrix into a rank-2 f32 tensor.
Tensor tensor_from_matrix(const Eigen::MatrixXd& m);
Eigen::MatrixXd matrix_from_tensor(const Tensor& t);

// Binary PGM (P5, maxval 255) export of a grayscale frame in [0,1].
void write_pgm(const std::filesystem::path& path, const Eigen::MatrixXd& frame);
Eigen::MatrixXd read_pgm(const std::filesystem::path& path);

// Line-based `key = value` files used by manifests and configs.
// Lines starting with '#' and blank lines are skipped. Repeated keys keep
// every occurrence in order.
struct KvFile {
    std::vector<std::pair<std::string, std::string>> entries;

    std::string get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    bool has(const std::string& key) const;
    std::vector<std::string> all(const std::string& key) const;
    void set(const std::string& key, const std::string& value);
};

KvFile load_kv(const std::filesystem::path& path);
void save_kv(const std::filesystem::path& path, const KvFile& kv);

}  // namespace dawn
