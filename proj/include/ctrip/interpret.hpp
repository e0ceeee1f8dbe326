#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ctrip/contrastive.hpp"
#include "ctrip/data_model.hpp"
#include "ctrip/encoders.hpp"

namespace ctrip {

struct AttentionMap {
    torch::Tensor patch_grid;  // head-averaged [CLS] -> patch weights, [14, 14]
    torch::Tensor image;       // bilinear up-sampled, min-max normalized, [224, 224]
    double max_row_sum_error = 0.0;  // max |sum_j a_ij - 1| over every query of the final block
};

/// [CLS] attention of the final encoder block for one localizer stack.
/// `positions` ([N], optional) overrides the positional index of each patch token;
/// the grid is always laid out in token order.
AttentionMap attention_map(ModalityEncoder& encoder, const ImageStack& localizer,
                           const torch::Tensor& positions = {});

/// 8-bit grayscale PNG of a [H, W] map with values in [0, 1].
void write_png(const std::filesystem::path& file, const torch::Tensor& map);

/// Rows (subject, modality) with 256 embedding values plus coloring metadata.
/// Returns the number of rows written.
std::size_t export_embeddings(AlignmentModel& model, const Cohort& cohort, const std::vector<std::size_t>& idx,
                              const std::filesystem::path& file);

/// Stage-I encoders with freshly seeded projections, for the pre-alignment embedding space.
AlignmentModel pre_alignment_model(const std::map<Modality, ModalityEncoder>& stage1_encoders,
                                   const TabularSchema& schema, AlignmentEdges edges, std::uint64_t seed);

}  // namespace ctrip
