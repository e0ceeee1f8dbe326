#include "ctrip/npy.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ctrip/error.hpp"

namespace ctrip::npy {
namespace {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

constexpr char kMagic[] = "\x93NUMPY";

std::string shape_literal(c10::IntArrayRef shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << shape[i];
        if (shape.size() == 1 || i + 1 < shape.size()) os << ',';
        if (i + 1 < shape.size()) os << ' ';
    }
    os << ')';
    return os.str();
}

std::vector<char> read_all(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + file.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void write_f32(const std::filesystem::path& file, const torch::Tensor& t) {
    auto c = t.to(torch::kFloat32).contiguous();
    std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': " +
                         shape_literal(c.sizes()) + ", }";
    // magic(6) + version(2) + len(2) + header + '\n' padded to a multiple of 64
    const std::size_t unpadded = 10 + header.size() + 1;
    header.append((64 - unpadded % 64) % 64, ' ');
    header.push_back('\n');

    std::ofstream out(file, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + file.string());
    out.write(kMagic, 6);
    const char version[2] = {1, 0};
    out.write(version, 2);
    const auto len = static_cast<std::uint16_t>(header.size());
    out.write(reinterpret_cast<const char*>(&len), 2);
    out.write(header.data(), std::streamsize(header.size()));
    out.write(static_cast<const char*>(c.data_ptr()), std::streamsize(c.numel() * 4));
}

torch::Tensor read_f32(const std::filesystem::path& file) {
    const auto bytes = read_all(file);
    if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 6) != 0)
        throw ConfigError(file.string() + ": not an .npy file");
    if (bytes[6] != 1) throw ConfigError(file.string() + ": unsupported .npy version");
    std::uint16_t len = 0;
    std::memcpy(&len, bytes.data() + 8, 2);
    if (bytes.size() < 10u + len) throw ConfigError(file.string() + ": truncated header");
    const std::string header(bytes.data() + 10, len);

    if (header.find("'descr': '<f4'") == std::string::npos)
        throw ConfigError(file.string() + ": dtype must be little-endian float32");
    if (header.find("'fortran_order': False") == std::string::npos)
        throw ConfigError(file.string() + ": fortran order not supported");
    const auto open = header.find('(', header.find("'shape'"));
    const auto close = header.find(')', open);
    if (open == std::string::npos || close == std::string::npos)
        throw ConfigError(file.string() + ": malformed shape");

    std::vector<int64_t> shape;
    std::istringstream ss(header.substr(open + 1, close - open - 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.find_first_not_of(' ') == std::string::npos) continue;
        shape.push_back(std::stoll(item));
    }
    int64_t numel = 1;
    for (auto s : shape) numel *= s;
    if (bytes.size() != 10u + len + std::size_t(numel) * 4)
        throw ConfigError(file.string() + ": payload size does not match shape");

    auto t = torch::empty(shape, torch::kFloat32);
    std::memcpy(t.data_ptr(), bytes.data() + 10 + len, std::size_t(numel) * 4);
    return t;
}

void write_raw_f32(const std::filesystem::path& file, const torch::Tensor& t) {
    auto c = t.to(torch::kFloat32).contiguous();
    std::ofstream out(file, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + file.string());
    out.write(static_cast<const char*>(c.data_ptr()), std::streamsize(c.numel() * 4));
}

torch::Tensor read_raw_f32(const std::filesystem::path& file, c10::IntArrayRef shape) {
    const auto bytes = read_all(file);
    int64_t numel = 1;
    for (auto s : shape) numel *= s;
    if (bytes.size() != std::size_t(numel) * 4)
        throw ConfigError(file.string() + ": expected " + std::to_string(numel * 4) +
                          " bytes, found " + std::to_string(bytes.size()));
    auto t = torch::empty(shape, torch::kFloat32);
    std::memcpy(t.data_ptr(), bytes.data(), bytes.size());
    return t;
}

}  // namespace ctrip::npy
