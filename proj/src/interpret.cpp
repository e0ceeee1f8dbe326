#include "ctrip/interpret.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <memory>

#include "ctrip/error.hpp"
#include "ctrip/training.hpp"

namespace F = torch::nn::functional;

namespace ctrip {

AttentionMap attention_map(ModalityEncoder& encoder, const ImageStack& localizer, const torch::Tensor& positions) {
    const auto& cfg = encoder->config();
    if (!cfg.is_image()) throw ConfigError("attention maps need an image encoder");
    if (!localizer.voxels.defined() || localizer.voxels.sizes() != torch::IntArrayRef{kSlices, kImageSize, kImageSize})
        throw ConfigError("localizer must be [3,224,224]");
    const int64_t g = kImageSize / cfg.patch_size;
    const int64_t N = g * g;

    torch::NoGradGuard guard;
    encoder->eval();
    encoder->set_capture_attention(true);
    auto batch = make_batch_from_images(localizer.voxels.unsqueeze(0).to(torch::kFloat32), cfg);
    torch::Tensor pos = positions.defined() ? positions.to(torch::kInt64).reshape({1, N})
                                            : torch::arange(N, torch::kInt64).unsqueeze(0);
    encoder->encode_embedded(encoder->embed(batch), pos);
    auto attn = encoder->last_attention().to(torch::kFloat64);  // [1, H, N+1, N+1]
    encoder->set_capture_attention(false);

    AttentionMap out;
    out.max_row_sum_error = (attn.sum(-1) - 1.0).abs().max().item<double>();
    if (out.max_row_sum_error > 1e-4) throw ConfigError("attention rows do not sum to one");

    out.patch_grid = attn[0].select(1, 0).slice(1, 1).mean(0).reshape({g, g});
    auto up = F::interpolate(out.patch_grid.view({1, 1, g, g}),
                             F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{kImageSize, kImageSize})
                                 .mode(torch::kBilinear)
                                 .align_corners(false))
                  .view({kImageSize, kImageSize});
    const double lo = up.min().item<double>(), hi = up.max().item<double>();
    out.image = hi > lo ? (up - lo) / (hi - lo) : torch::zeros_like(up);
    return out;
}

void write_png(const std::filesystem::path& file, const torch::Tensor& map) {
    if (map.dim() != 2) throw ConfigError("PNG export needs a 2-D map");
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    auto px = (map.to(torch::kFloat64).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
    const auto h = png_uint_32(px.size(0)), w = png_uint_32(px.size(1));

    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(file.c_str(), "wb"), &std::fclose);
    if (!fp) throw ConfigError("cannot write " + file.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw ConfigError("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ConfigError("libpng failed writing " + file.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    auto* base = px.data_ptr<std::uint8_t>();
    for (png_uint_32 r = 0; r < h; ++r) png_write_row(png, base + std::size_t(r) * w);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

AlignmentModel pre_alignment_model(const std::map<Modality, ModalityEncoder>& stage1_encoders,
                                   const TabularSchema& schema, AlignmentEdges edges, std::uint64_t seed) {
    return make_alignment_model(stage1_encoders, schema, edges, TemperaturePair{}, seed);
}

namespace {

int64_t sex_of(const SubjectRecord& s) {
    if (!s.tabular) return -1;
    for (const auto& c : s.tabular->categorical)
        if (c.name == "sex") return c.index;
    return -1;
}

}  // namespace

std::size_t export_embeddings(AlignmentModel& model, const Cohort& cohort, const std::vector<std::size_t>& idx,
                              const std::filesystem::path& file) {
    const auto& schema = cohort.schema();
    const std::size_t lvm = schema.phenotype_index("LVM"), lvef = schema.phenotype_index("LVEF"),
                      rvef = schema.phenotype_index("RVEF"), rvedv = schema.phenotype_index("RVEDV");
    const auto emb = embed_batch(model, cohort, idx);

    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file);
    out << "subject_id,modality";
    for (int64_t d = 0; d < kSharedDim; ++d) out << ",dim_" << d;
    out << ",lvm,lvef,rvef,rvedv,sex\n" << std::setprecision(9);

    std::size_t rows = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& s = cohort[idx[k]];
        const auto& e = emb[k];
        const std::pair<Modality, const std::optional<std::vector<float>>*> parts[] = {
            {Modality::Localizer, &e.z_l}, {Modality::Ecg, &e.z_e}, {Modality::Tabular, &e.z_t}};
        for (const auto& [m, z] : parts) {
            if (!*z) continue;
            out << s.subject_id << ',' << short_name(m);
            for (float v : **z) out << ',' << v;
            const auto& y = s.phenotypes.values;
            out << ',' << y[lvm] << ',' << y[lvef] << ',' << y[rvef] << ',' << y[rvedv] << ',' << sex_of(s) << '\n';
            ++rows;
        }
    }
    return rows;
}

}  // namespace ctrip
