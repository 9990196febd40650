#include "ibcaps/report.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace ibcaps {

namespace {

void push_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void push_chunk(std::vector<std::uint8_t>& out, const char type[4],
                const std::vector<std::uint8_t>& payload) {
    push_be32(out, static_cast<std::uint32_t>(payload.size()));
    std::vector<std::uint8_t> body(type, type + 4);
    body.insert(body.end(), payload.begin(), payload.end());
    out.insert(out.end(), body.begin(), body.end());
    push_be32(out, static_cast<std::uint32_t>(
                       crc32(0, body.data(), static_cast<uInt>(body.size()))));
}

}  // namespace

void write_png(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
               int height, int channels) {
    if (channels != 1 && channels != 3) throw std::invalid_argument("write_png: channels");
    if (pixels.size() != static_cast<std::size_t>(width) * height * channels)
        throw std::invalid_argument("write_png: pixel buffer size mismatch");

    std::vector<std::uint8_t> raw;
    raw.reserve(pixels.size() + static_cast<std::size_t>(height));
    const std::size_t stride = static_cast<std::size_t>(width) * channels;
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), pixels.begin() + y * stride, pixels.begin() + (y + 1) * stride);
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> z(zlen);
    if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("write_png: deflate failed");
    z.resize(zlen);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<std::uint8_t> ihdr;
    push_be32(ihdr, static_cast<std::uint32_t>(width));
    push_be32(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);                                // bit depth
    ihdr.push_back(channels == 1 ? 0 : 2);            // gray / truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    push_chunk(out, "IHDR", ihdr);
    push_chunk(out, "IDAT", z);
    push_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

void write_pnm(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
               int height, int channels) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f << (channels == 1 ? "P5\n" : "P6\n") << width << " " << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
}

void write_image(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
                 int height, int channels) {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".png")
        write_png(path, pixels, width, height, channels);
    else
        write_pnm(path, pixels, width, height, channels);
}

namespace {

std::vector<std::uint8_t> to_u8(const Tensor& img) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(img.numel()));
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        double v = static_cast<double>(img[i]) * 255.0 + 0.5;
        out[static_cast<std::size_t>(i)] =
            static_cast<std::uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v));
    }
    return out;
}

Tensor reconstruct_one(const AnyModel& model, const Tensor& img) {
    NoGradGuard ng;
    Tensor batch({1, img.dim(0), img.dim(1), img.dim(2)});
    batch.data = img.data;
    ForwardOut fw = model.forward(constant(batch), nullptr, Mode::Eval, nullptr, false, true);
    if (!fw.recon) throw std::invalid_argument("model has no reconstruction head");
    Tensor out(img.shape);
    out.data = fw.recon->val.data;
    return out;
}

}  // namespace

void emit_reconstruction_grid(const AnyModel& capsnet, const AnyModel& ibcapsnet,
                              const Dataset& data, const GridSpec& spec,
                              const std::string& out_path) {
    const int ch = data.channels, H = data.height, W = data.width;
    const int rows = 5;
    const int cols = static_cast<int>(spec.sample_indices.size());
    const int pad = 2;
    const int block_gap = 8;  // between the CapsNet and IBCapsNet halves
    const int grid_w = 2 * cols * (W + pad) - pad + block_gap;
    const int grid_h = rows * (H + pad) - pad;
    std::vector<std::uint8_t> canvas(static_cast<std::size_t>(grid_w) * grid_h * ch, 255);

    auto paste = [&](const Tensor& img, int row, int col_px) {
        const auto u8 = to_u8(img);
        const int y0 = row * (H + pad);
        for (int c = 0; c < ch; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    canvas[((static_cast<std::size_t>(y0 + y) * grid_w) + col_px + x) * ch + c] =
                        u8[static_cast<std::size_t>(c) * H * W + static_cast<std::size_t>(y) * W + x];
    };

    const CorruptionSpec specs[3] = {
        {CorruptionKind::ClampedAdditive, spec.clamped_severity, spec.corruption_seed},
        {CorruptionKind::GaussianBlur, spec.blur_severity, spec.corruption_seed},
        {CorruptionKind::SaltPepper, spec.salt_pepper_severity, spec.corruption_seed}};

    for (int col = 0; col < cols; ++col) {
        const std::int64_t idx = spec.sample_indices[static_cast<std::size_t>(col)];
        if (idx < 0 || idx >= data.size())
            throw std::out_of_range("grid sample index " + std::to_string(idx) +
                                    " out of range (dataset size " + std::to_string(data.size()) +
                                    ")");
        const Tensor gt = data.image_real(idx);
        const AnyModel* models[2] = {&capsnet, &ibcapsnet};
        for (int half = 0; half < 2; ++half) {
            const int col_px = half * (cols * (W + pad) + block_gap) + col * (W + pad);
            paste(gt, 0, col_px);
            paste(reconstruct_one(*models[half], gt), 1, col_px);
            for (int s = 0; s < 3; ++s) {
                Tensor corrupted = apply_corruption(gt, specs[s], static_cast<std::uint64_t>(idx));
                paste(reconstruct_one(*models[half], corrupted), 2 + s, col_px);
            }
        }
    }
    write_image(out_path, canvas, grid_w, grid_h, ch);

    std::ofstream legend(out_path + ".legend.txt");
    legend << "layout: CapsNet block left, IBCapsNet block right; one column per sample\n";
    legend << "rows: GT (input), Reco (clean reconstruction), Clmp (clamped additive "
           << specs[0].severity << "), Gaus (gaussian blur " << specs[1].severity
           << "), S&P (salt-pepper " << specs[2].severity << ")\n";
    legend << "row severities are defaults chosen for this artifact and flag-overridable\n";
    legend << "corruption seed: " << spec.corruption_seed << "\nsamples:";
    for (auto i : spec.sample_indices) legend << " " << i;
    legend << "\n";
}

void write_sweep_csv(const std::vector<EvalRecord>& records, const std::string& path) {
    std::ofstream f(path, std::ios::binary);  // binary: byte-identical re-emission
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f << "dataset,kind,severity,model,accuracy\n";
    for (const auto& r : records) {
        char row[256];
        std::snprintf(row, sizeof row, "%s,%s,%.2f,%s,%.6f\n", r.dataset.c_str(),
                      r.corruption.c_str(), r.severity, r.model.c_str(), r.accuracy);
        f << row;
    }
}

void emit_sweep_plots(const std::vector<EvalRecord>& records, const std::string& dir) {
    // one plot per (dataset, kind); simple polyline rasterizer
    std::set<std::pair<std::string, std::string>> groups;
    for (const auto& r : records)
        if (r.corruption != "none") groups.insert({r.dataset, r.corruption});
    const int PW = 480, PH = 320, ML = 40, MB = 24, MT = 8, MR = 8;
    for (const auto& [ds, kind] : groups) {
        std::vector<std::uint8_t> canvas(static_cast<std::size_t>(PW) * PH * 3, 255);
        auto setpx = [&](int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
            if (x < 0 || x >= PW || y < 0 || y >= PH) return;
            auto* p = &canvas[(static_cast<std::size_t>(y) * PW + x) * 3];
            p[0] = r; p[1] = g; p[2] = b;
        };
        // axes
        for (int x = ML; x < PW - MR; ++x) setpx(x, PH - MB, 0, 0, 0);
        for (int y = MT; y < PH - MB; ++y) setpx(ML, y, 0, 0, 0);

        std::map<std::string, std::map<double, double>> curves;
        double max_sev = 0;
        for (const auto& r : records)
            if (r.dataset == ds && r.corruption == kind) {
                curves[r.model][r.severity] = r.accuracy;
                max_sev = std::max(max_sev, r.severity);
            }
        if (max_sev == 0) continue;
        const std::uint8_t palette[6][3] = {{200, 30, 30},  {30, 30, 200}, {30, 160, 30},
                                            {200, 130, 20}, {130, 30, 160}, {0, 0, 0}};
        int ci = 0;
        for (const auto& [model, pts] : curves) {
            const auto* col = palette[ci++ % 6];
            double px = -1, py = -1;
            for (const auto& [sev, acc] : pts) {
                const double x = ML + sev / max_sev * (PW - ML - MR - 1);
                const double y = (PH - MB) - acc * (PH - MB - MT - 1);
                if (px >= 0) {
                    const int steps = 64;
                    for (int s = 0; s <= steps; ++s)
                        setpx(static_cast<int>(px + (x - px) * s / steps),
                              static_cast<int>(py + (y - py) * s / steps), col[0], col[1], col[2]);
                }
                px = x; py = y;
            }
        }
        write_png(dir + "/sweep_" + ds + "_" + kind + ".png", canvas, PW, PH, 3);
    }
}

}  // namespace ibcaps
