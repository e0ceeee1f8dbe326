#pragma once

#include <filesystem>

#include <torch/torch.h>

namespace ctrip::npy {

// Minimal reader/writer for NumPy .npy (format 1.0, little-endian float32, C order).
void write_f32(const std::filesystem::path& file, const torch::Tensor& t);
torch::Tensor read_f32(const std::filesystem::path& file);

// Headerless little-endian float32 blob with an expected shape.
void write_raw_f32(const std::filesystem::path& file, const torch::Tensor& t);
torch::Tensor read_raw_f32(const std::filesystem::path& file, c10::IntArrayRef shape);

}  // namespace ctrip::npy
