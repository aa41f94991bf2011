#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cpath/errors.hpp"
#include "cpath/image.hpp"
#include "cpath/rng.hpp"

namespace cpath {

// Synthetic texture "slides" for desk-scale experiments. Each slide is a
// grid of cells: background cells are near-white (rejected by the edge
// filter), tissue cells carry a class-conditional band texture. Two binary
// slide-level targets are emitted:
//   mut   - tissue texture family of the whole slide (gene-status analog)
//   tumor - whether distinct high-frequency cells are mixed in
//           (metastasis analog; the bag signal is presence, not prevalence)

struct SyntheticDatasetSpec {
  int num_slides = 40;
  int classes = 2;
  int patches_per_slide = 200;
  int patch_px = 64;
  double background_fraction = 0.15;
  double noise_level = 0.05;
  double tumor_fraction = 0.35;   // tumor-cell share inside positive slides
  double external_fraction = 0.3;
  double balance = 0.5;
  std::uint64_t seed = 7;

  void validate() const {
    if (num_slides < 4) throw Error("synthetic spec: need at least 4 slides");
    if (classes != 2) throw Error("synthetic spec: binary targets only");
    if (patches_per_slide < 1 || patch_px < 8) throw Error("synthetic spec: bad patch geometry");
    if (background_fraction < 0 || background_fraction >= 1)
      throw Error("synthetic spec: background_fraction in [0,1)");
    if (balance <= 0 || balance >= 1) throw Error("synthetic spec: balance in (0,1)");
    if (external_fraction <= 0 || external_fraction >= 1)
      throw Error("synthetic spec: external_fraction in (0,1)");
  }

  int grid_rows() const {
    int rows = static_cast<int>(std::floor(std::sqrt(static_cast<double>(patches_per_slide))));
    while (patches_per_slide % rows) --rows;
    return rows;
  }
  int grid_cols() const { return patches_per_slide / grid_rows(); }
};

namespace detail {

struct TextureBand {
  double cycles;  // per patch edge
  double angle;
  double amp;
};

struct TextureClass {
  float base[3];
  TextureBand band1, band2;
};

inline const TextureClass& texture_class(int kind) {
  // 0/1: tissue families (mut target); 2: tumor analog
  static const TextureClass classes[3] = {
      {{0.84f, 0.64f, 0.74f}, {5.0, 0.4, 0.20}, {8.0, 1.9, 0.12}},
      {{0.66f, 0.52f, 0.78f}, {9.0, 1.1, 0.20}, {13.0, 2.6, 0.12}},
      {{0.48f, 0.38f, 0.58f}, {16.0, 0.8, 0.20}, {6.0, 2.2, 0.10}},
  };
  return classes[kind];
}

inline void paint_texture(ImageU8& slide, int y0, int x0, int px, int kind, double noise,
                          Rng& rng) {
  const TextureClass& tc = texture_class(kind);
  const double phi1 = uniform_real(rng, 0, 2 * M_PI);
  const double phi2 = uniform_real(rng, 0, 2 * M_PI);
  const double jitter = uniform_real(rng, -0.15, 0.15);
  auto band = [&](const TextureBand& b, double phi, int y, int x) {
    const double a = b.angle + jitter;
    const double fx = std::cos(a) * b.cycles / px;
    const double fy = std::sin(a) * b.cycles / px;
    return b.amp * std::sin(2 * M_PI * (fx * x + fy * y) + phi);
  };
  for (int y = 0; y < px; ++y)
    for (int x = 0; x < px; ++x) {
      const double v = band(tc.band1, phi1, y, x) + band(tc.band2, phi2, y, x);
      for (int ch = 0; ch < 3; ++ch) {
        const double val = tc.base[ch] + v + noise * normal(rng);
        slide.at(y0 + y, x0 + x, ch) =
            static_cast<std::uint8_t>(std::lround(std::clamp(val, 0.0, 1.0) * 255.0));
      }
    }
}

inline void paint_background(ImageU8& slide, int y0, int x0, int px, Rng& rng) {
  for (int y = 0; y < px; ++y)
    for (int x = 0; x < px; ++x) {
      const double val = 0.96 + 0.01 * normal(rng);
      for (int ch = 0; ch < 3; ++ch)
        slide.at(y0 + y, x0 + x, ch) =
            static_cast<std::uint8_t>(std::lround(std::clamp(val, 0.0, 1.0) * 255.0));
    }
}

}  // namespace detail

struct SyntheticSummary {
  int slides = 0;
  int internal_slides = 0;
  int external_slides = 0;
  std::map<std::string, int> positives;  // per target
};

/// Spec file: same line-oriented `key = value` format as training configs.
inline SyntheticDatasetSpec parse_synth_spec_text(const std::string& text) {
  SyntheticDatasetSpec spec;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    const auto b = line.find_last_not_of(" \t\r");
    line = line.substr(a, b - a + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", line_no);
    auto strip = [](std::string s) {
      const auto x = s.find_first_not_of(" \t");
      const auto y = s.find_last_not_of(" \t");
      return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
    };
    const std::string key = strip(line.substr(0, eq));
    const std::string val = strip(line.substr(eq + 1));
    try {
      if (key == "num_slides") spec.num_slides = std::stoi(val);
      else if (key == "classes") spec.classes = std::stoi(val);
      else if (key == "patches_per_slide") spec.patches_per_slide = std::stoi(val);
      else if (key == "patch_px") spec.patch_px = std::stoi(val);
      else if (key == "background_fraction") spec.background_fraction = std::stod(val);
      else if (key == "noise_level") spec.noise_level = std::stod(val);
      else if (key == "tumor_fraction") spec.tumor_fraction = std::stod(val);
      else if (key == "external_fraction") spec.external_fraction = std::stod(val);
      else if (key == "balance") spec.balance = std::stod(val);
      else if (key == "seed") spec.seed = std::stoull(val);
      else throw ParseError("unknown key '" + key + "'", line_no);
    } catch (const ParseError&) {
      throw;
    } catch (...) {
      throw ParseError("bad value '" + val + "' for key '" + key + "'", line_no);
    }
  }
  try {
    spec.validate();
  } catch (const Error& e) {
    throw ParseError(std::string("invalid spec: ") + e.what());
  }
  return spec;
}

inline SyntheticDatasetSpec parse_synth_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read spec " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_synth_spec_text(ss.str());
}

/// Generate the dataset under `out_dir`:
///   slides/<id>.png, labels.tsv, cells.tsv (per-cell texture truth),
///   dataset.meta (spec echo incl. the nominal microns-per-pixel).
inline SyntheticSummary generate_synthetic(const SyntheticDatasetSpec& spec,
                                           const std::string& out_dir) {
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "slides", ec);
  if (ec) throw IoError("cannot create " + out_dir);

  const int rows = spec.grid_rows(), cols = spec.grid_cols();
  const int n_external = std::max(1, static_cast<int>(std::lround(spec.external_fraction * spec.num_slides)));
  const int n_internal = spec.num_slides - n_external;
  if (n_internal < 2) throw Error("synthetic spec: internal cohort too small");

  std::ofstream labels(fs::path(out_dir) / "labels.tsv");
  labels << "slide_id\tpatient_id\tcohort\tmut\ttumor\n";
  std::ofstream cells(fs::path(out_dir) / "cells.tsv");
  cells << "slide_id\tcol\trow\tkind\n";

  SyntheticSummary summary;
  summary.slides = spec.num_slides;
  summary.internal_slides = n_internal;
  summary.external_slides = n_external;

  for (int i = 0; i < spec.num_slides; ++i) {
    const bool internal = i < n_internal;
    const int within = internal ? i : i - n_internal;
    const int cohort_n = internal ? n_internal : n_external;
    // exact per-cohort marginals: `balance` sets the mut prevalence, the
    // tumor target alternates at one half
    const int n_mut = static_cast<int>(std::lround(spec.balance * cohort_n));
    const int mut = within >= cohort_n - n_mut ? 1 : 0;
    const int tumor = within % 2;
    summary.positives["mut"] += mut;
    summary.positives["tumor"] += tumor;

    char sid[16], pid[16];
    std::snprintf(sid, sizeof sid, "S%04d", i);
    std::snprintf(pid, sizeof pid, "P%04d", i);
    labels << sid << "\t" << pid << "\t" << (internal ? "internal" : "external") << "\t" << mut
           << "\t" << tumor << "\n";

    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(i) + 1));
    ImageU8 slide(rows * spec.patch_px, cols * spec.patch_px, 3);
    for (int r = 0; r < rows; ++r)
      for (int cidx = 0; cidx < cols; ++cidx) {
        const int y0 = r * spec.patch_px, x0 = cidx * spec.patch_px;
        std::string kind;
        if (uniform_real(rng) < spec.background_fraction) {
          detail::paint_background(slide, y0, x0, spec.patch_px, rng);
          kind = "bg";
        } else if (tumor && uniform_real(rng) < spec.tumor_fraction) {
          detail::paint_texture(slide, y0, x0, spec.patch_px, 2, spec.noise_level, rng);
          kind = "tumor";
        } else {
          detail::paint_texture(slide, y0, x0, spec.patch_px, mut, spec.noise_level, rng);
          kind = mut ? "t1" : "t0";
        }
        cells << sid << "\t" << cidx << "\t" << r << "\t" << kind << "\n";
      }
    write_png((fs::path(out_dir) / "slides" / (std::string(sid) + ".png")).string(), slide);
  }

  std::ofstream meta(fs::path(out_dir) / "dataset.meta");
  meta << "kind=synthetic\nmpp=0.5\nseed=" << spec.seed << "\nnum_slides=" << spec.num_slides
       << "\npatches_per_slide=" << spec.patches_per_slide << "\npatch_px=" << spec.patch_px
       << "\nbackground_fraction=" << spec.background_fraction << "\nnoise_level="
       << spec.noise_level << "\ntumor_fraction=" << spec.tumor_fraction << "\nexternal_fraction="
       << spec.external_fraction << "\nbalance=" << spec.balance << "\n";
  return summary;
}

/// Fisher separation of per-patch mean intensity between the two tissue
/// families, computed from the generated artifacts. The committed spec keeps
/// this above 1 by construction.
inline double synthetic_fisher_separation(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream cells(fs::path(dir) / "cells.tsv");
  if (!cells) throw IoError("missing cells.tsv in " + dir);
  std::string header;
  std::getline(cells, header);
  std::map<std::string, ImageU8> slide_cache;
  std::vector<double> means[2];
  std::string sid;
  int col, row;
  std::string kind;
  int patch_px = 0;
  {
    std::ifstream meta(fs::path(dir) / "dataset.meta");
    std::string line;
    while (std::getline(meta, line))
      if (line.rfind("patch_px=", 0) == 0) patch_px = std::stoi(line.substr(9));
  }
  if (patch_px <= 0) throw IoError("dataset.meta lacks patch_px");
  while (cells >> sid >> col >> row >> kind) {
    if (kind != "t0" && kind != "t1") continue;
    auto it = slide_cache.find(sid);
    if (it == slide_cache.end())
      it = slide_cache.emplace(sid, read_png((fs::path(dir) / "slides" / (sid + ".png")).string()))
               .first;
    const ImageU8& img = it->second;
    double m = 0;
    for (int y = 0; y < patch_px; ++y)
      for (int x = 0; x < patch_px; ++x)
        m += img.at(row * patch_px + y, col * patch_px + x, 1);  // green channel
    means[kind == "t1"].push_back(m / (patch_px * patch_px * 255.0));
  }
  auto stats = [](const std::vector<double>& v) {
    double mu = 0;
    for (double x : v) mu += x;
    mu /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mu) * (x - mu);
    var /= static_cast<double>(v.size());
    return std::pair{mu, var};
  };
  if (means[0].empty() || means[1].empty()) throw Error("need both tissue families present");
  const auto [m0, v0] = stats(means[0]);
  const auto [m1, v1] = stats(means[1]);
  return (m0 - m1) * (m0 - m1) / (v0 + v1);
}

}  // namespace cpath
