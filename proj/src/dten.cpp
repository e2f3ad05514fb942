#include "dawn/dten.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace dawn {

namespace {

void read_exact(std::istream& in, void* dst, std::size_t n, const std::filesystem::path& path) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw io_error("truncated DTEN file: " + path.string());
}

}  // namespace

Tensor load_dten(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());

    char magic[4];
    read_exact(in, magic, 4, path);
    if (std::memcmp(magic, "DTEN", 4) != 0)
        throw io_error("bad DTEN magic in " + path.string());

    std::uint8_t header[4];
    read_exact(in, header, 4, path);
    if (header[0] != 1) throw io_error("unsupported DTEN version in " + path.string());
    if (header[1] > 1) throw io_error("unsupported DTEN dtype in " + path.string());

    Tensor t;
    t.dtype = static_cast<Tensor::DType>(header[1]);
    t.dims.resize(header[2]);
    for (auto& d : t.dims) read_exact(in, &d, 4, path);

    const std::size_t n = t.size();
    if (t.dtype == Tensor::DType::F32) {
        t.f32.resize(n);
        read_exact(in, t.f32.data(), n * 4, path);
    } else {
        t.u8.resize(n);
        read_exact(in, t.u8.data(), n, path);
    }
    return t;
}

void save_dten(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write " + path.string());

    out.write("DTEN", 4);
    std::uint8_t header[4] = {1, static_cast<std::uint8_t>(t.dtype),
                              static_cast<std::uint8_t>(t.dims.size()), 0};
    out.write(reinterpret_cast<char*>(header), 4);
    for (auto d : t.dims) out.write(reinterpret_cast<const char*>(&d), 4);

    if (t.dtype == Tensor::DType::F32)
        out.write(reinterpret_cast<const char*>(t.f32.data()),
                  static_cast<std::streamsize>(t.f32.size() * 4));
    else
        out.write(reinterpret_cast<const char*>(t.u8.data()),
                  static_cast<std::streamsize>(t.u8.size()));
    if (!out) throw io_error("write failed for " + path.string());
}

Tensor tensor_from_matrix(const Eigen::MatrixXd& m) {
    Tensor t;
    t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    t.f32.resize(static_cast<std::size_t>(m.size()));
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) t.f32[k++] = static_cast<float>(m(i, j));
    return t;
}

Eigen::MatrixXd matrix_from_tensor(const Tensor& t) {
    if (t.dims.size() != 2) throw io_error("expected rank-2 tensor");
    Eigen::MatrixXd m(t.dims[0], t.dims[1]);
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            m(i, j) = (t.dtype == Tensor::DType::F32) ? t.f32[k++] : t.u8[k++];
    return m;
}

void write_pgm(const std::filesystem::path& path, const Eigen::MatrixXd& frame) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write " + path.string());
    out << "P5\n" << frame.cols() << " " << frame.rows() << "\n255\n";
    for (Eigen::Index i = 0; i < frame.rows(); ++i)
        for (Eigen::Index j = 0; j < frame.cols(); ++j) {
            double v = std::min(1.0, std::max(0.0, frame(i, j)));
            auto b = static_cast<unsigned char>(v * 255.0 + 0.5);
            out.write(reinterpret_cast<char*>(&b), 1);
        }
    if (!out) throw io_error("write failed for " + path.string());
}

Eigen::MatrixXd read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255)
        throw io_error("unsupported PGM header in " + path.string());
    in.get();
    Eigen::MatrixXd m(h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            int c = in.get();
            if (c < 0) throw io_error("truncated PGM " + path.string());
            m(i, j) = c / 255.0;
        }
    return m;
}

std::string KvFile::get(const std::string& key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return v;
    throw io_error("missing key: " + key);
}

std::string KvFile::get_or(const std::string& key, const std::string& fallback) const {
    for (const auto& [k, v] : entries)
        if (k == key) return v;
    return fallback;
}

bool KvFile::has(const std::string& key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return true;
    return false;
}

std::vector<std::string> KvFile::all(const std::string& key) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries)
        if (k == key) out.push_back(v);
    return out;
}

void KvFile::set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries)
        if (k == key) {
            v = value;
            return;
        }
    entries.emplace_back(key, value);
}

namespace {

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    auto e = s.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

}  // namespace

KvFile load_kv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path.string());
    KvFile kv;
    std::string line;
    while (std::getline(in, line)) {
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos) {
            // bare directive line, e.g. "clip 0007 train 200": key = first word
            auto sp = t.find(' ');
            if (sp == std::string::npos)
                kv.entries.emplace_back(t, "");
            else
                kv.entries.emplace_back(t.substr(0, sp), trim(t.substr(sp + 1)));
            continue;
        }
        kv.entries.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return kv;
}

void save_kv(const std::filesystem::path& path, const KvFile& kv) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot write " + path.string());
    for (const auto& [k, v] : kv.entries) {
        if (k == "clip")
            out << k << " " << v << "\n";
        else
            out << k << " = " << v << "\n";
    }
    if (!out) throw io_error("write failed for " + path.string());
}

}  // namespace dawn
