#pragma once

#include <string>
#include <vector>

#include "ibcaps/trainer.hpp"

namespace ibcaps {

// 8-bit image writers. pixels are row-major, top-to-bottom; channels = 1
// (gray) or 3 (RGB).
void write_png(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
               int height, int channels);
void write_pnm(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
               int height, int channels);
// Picks by extension: .png, .pgm (gray) or .ppm (RGB).
void write_image(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
                 int height, int channels);

// Row labels of the reconstruction grid, in emission order.
inline std::vector<std::string> grid_row_labels() { return {"GT", "Reco", "Clmp", "Gaus", "S&P"}; }

struct GridSpec {
    std::vector<std::int64_t> sample_indices;
    double clamped_severity = 0.5;
    double blur_severity = 1.5;
    double salt_pepper_severity = 0.3;
    std::uint64_t corruption_seed = 42;
};

// Side-by-side grid: CapsNet block on the left, IBCapsNet on the right.
// Writes the raster plus a "<out>.legend.txt" sidecar naming rows and
// severities.
void emit_reconstruction_grid(const AnyModel& capsnet, const AnyModel& ibcapsnet,
                              const Dataset& data, const GridSpec& spec,
                              const std::string& out_path);

// Sweep records CSV: dataset, kind, severity, model, accuracy. Emission from
// identical records is byte-identical.
void write_sweep_csv(const std::vector<EvalRecord>& records, const std::string& path);

// Minimal accuracy-vs-severity line plot, one PNG per (dataset, kind).
void emit_sweep_plots(const std::vector<EvalRecord>& records, const std::string& dir);

}  // namespace ibcaps
