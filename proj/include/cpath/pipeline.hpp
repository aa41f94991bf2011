#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cpath/errors.hpp"
#include "cpath/hash.hpp"
#include "cpath/image.hpp"
#include "cpath/rng.hpp"

namespace cpath {

// Slide preprocessing: rescale to the working resolution, tessellate into a
// non-overlapping patch grid, reject background by edge content, and persist
// patches + manifests. Also the deterministic nested slide-level subsampling
// used by the data-fraction ablation.

struct PatchRecord {
  int x, y, w, h;  // source-pixel coordinates
  bool accepted;
};

struct SlideManifest {
  std::string slide_id;
  std::string source_path;
  double mpp_source = 0.0;
  std::vector<PatchRecord> patches;

  std::size_t accepted_count() const {
    std::size_t n = 0;
    for (const auto& p : patches) n += p.accepted;
    return n;
  }
};

struct TessellationResult {
  SlideManifest manifest;
  ImageU8 rescaled;          // slide at the target resolution
  std::vector<int> grid_xy;  // rescaled top-left per patch, (x, y) pairs
};

/// Rescale by mpp_source/target_mpp, grid into patch_size squares (partial
/// edge tiles dropped), run the background filter per tile.
inline TessellationResult tessellate(const ImageU8& slide, const std::string& slide_id,
                                     double mpp_source, double target_mpp, int patch_size,
                                     const CannyParams& canny = {}) {
  if (!(mpp_source > 0)) throw UnknownMppError();
  if (!(target_mpp > 0) || patch_size < 1) throw Error("tessellate: bad parameters");
  const double scale = mpp_source / target_mpp;
  TessellationResult out;
  out.manifest.slide_id = slide_id;
  out.manifest.mpp_source = mpp_source;

  const int rh = std::max(1, static_cast<int>(std::lround(slide.h * scale)));
  const int rw = std::max(1, static_cast<int>(std::lround(slide.w * scale)));
  out.rescaled = scale == 1.0 ? slide : to_u8(resize_bilinear(to_float(slide), rh, rw));

  const int ny = out.rescaled.h / patch_size;
  const int nx = out.rescaled.w / patch_size;
  const double inv = 1.0 / scale;
  for (int gy = 0; gy < ny; ++gy)
    for (int gx = 0; gx < nx; ++gx) {
      const int rx = gx * patch_size, ry = gy * patch_size;
      ImageU8 patch(patch_size, patch_size, 3);
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x)
          for (int ch = 0; ch < 3; ++ch)
            patch.at(y, x, ch) = out.rescaled.at(ry + y, rx + x, ch);
      PatchRecord rec;
      rec.x = static_cast<int>(std::lround(rx * inv));
      rec.y = static_cast<int>(std::lround(ry * inv));
      rec.w = static_cast<int>(std::lround(patch_size * inv));
      rec.h = rec.w;
      rec.accepted = reject_background(patch, canny);
      out.manifest.patches.push_back(rec);
      out.grid_xy.push_back(rx);
      out.grid_xy.push_back(ry);
    }
  return out;
}

// ---- manifest files: one header line, tab-separated --------------------------

inline void write_manifest(const std::string& path, const SlideManifest& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path);
  out << "slide_id\tx\ty\tw\th\taccepted\n";
  for (const auto& p : m.patches)
    out << m.slide_id << "\t" << p.x << "\t" << p.y << "\t" << p.w << "\t" << p.h << "\t"
        << (p.accepted ? 1 : 0) << "\n";
}

inline SlideManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path);
  std::string header;
  std::getline(in, header);
  SlideManifest m;
  std::string sid;
  PatchRecord p{};
  int acc;
  while (in >> sid >> p.x >> p.y >> p.w >> p.h >> acc) {
    m.slide_id = sid;
    p.accepted = acc != 0;
    m.patches.push_back(p);
  }
  return m;
}

// ---- cohort labels -----------------------------------------------------------

struct SlideInfo {
  std::string slide_id;
  std::string patient_id;
  std::string cohort;  // internal | external
  std::map<std::string, int> labels;
};

struct LabelTable {
  std::vector<SlideInfo> slides;
  std::vector<std::string> targets;
};

inline LabelTable read_labels(const std::string& dir) {
  const auto path = std::filesystem::path(dir) / "labels.tsv";
  std::ifstream in(path);
  if (!in) throw IoError("missing labels.tsv in " + dir);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty labels.tsv");
  LabelTable table;
  {
    std::istringstream hs(line);
    std::string col;
    int i = 0;
    while (std::getline(hs, col, '\t')) {
      if (i >= 3) table.targets.push_back(col);
      ++i;
    }
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    SlideInfo s;
    std::string field;
    std::getline(ls, s.slide_id, '\t');
    std::getline(ls, s.patient_id, '\t');
    std::getline(ls, s.cohort, '\t');
    for (const auto& t : table.targets) {
      if (!std::getline(ls, field, '\t')) throw IoError("labels.tsv row too short");
      s.labels[t] = std::stoi(field);
    }
    table.slides.push_back(std::move(s));
  }
  return table;
}

inline void write_labels(const std::string& dir, const LabelTable& table) {
  std::ofstream out(std::filesystem::path(dir) / "labels.tsv");
  out << "slide_id\tpatient_id\tcohort";
  for (const auto& t : table.targets) out << "\t" << t;
  out << "\n";
  for (const auto& s : table.slides) {
    out << s.slide_id << "\t" << s.patient_id << "\t" << s.cohort;
    for (const auto& t : table.targets) out << "\t" << s.labels.at(t);
    out << "\n";
  }
}

// ---- preprocessing driver ------------------------------------------------------

struct PreprocessSummary {
  int slides = 0;
  std::size_t patches_total = 0;
  std::size_t patches_accepted = 0;
  std::string dataset_hash;
};

inline std::map<std::string, std::string> read_meta(const std::string& dir) {
  std::map<std::string, std::string> kv;
  std::ifstream in(std::filesystem::path(dir) / "dataset.meta");
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline std::string patch_filename(int x, int y) {
  return "p_" + std::to_string(x) + "_" + std::to_string(y) + ".png";
}

/// Tessellate every slide of a raw dataset directory into `out_dir`:
/// patches/<slide>/p_<x>_<y>.png (accepted only), manifests/<slide>.tsv,
/// labels.tsv copied through, dataset.hash content identity.
inline PreprocessSummary preprocess_dataset(const std::string& in_dir, const std::string& out_dir,
                                            double target_mpp, int patch_size,
                                            const CannyParams& canny = {},
                                            double source_mpp_override = 0.0) {
  namespace fs = std::filesystem;
  const auto meta = read_meta(in_dir);
  double mpp_source = source_mpp_override;
  if (mpp_source <= 0 && meta.count("mpp")) mpp_source = std::stod(meta.at("mpp"));
  if (mpp_source <= 0) throw UnknownMppError();

  const auto labels = read_labels(in_dir);
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "manifests", ec);
  fs::create_directories(fs::path(out_dir) / "patches", ec);

  PreprocessSummary sum;
  std::vector<std::string> hash_paths;
  for (const auto& s : labels.slides) {
    const auto slide_png = fs::path(in_dir) / "slides" / (s.slide_id + ".png");
    if (!fs::exists(slide_png)) throw IoError("missing slide image " + slide_png.string());
    const auto tess = tessellate(read_png(slide_png.string()), s.slide_id, mpp_source, target_mpp,
                                 patch_size, canny);
    const auto patch_dir = fs::path(out_dir) / "patches" / s.slide_id;
    fs::create_directories(patch_dir, ec);
    for (std::size_t i = 0; i < tess.manifest.patches.size(); ++i) {
      const auto& rec = tess.manifest.patches[i];
      ++sum.patches_total;
      if (!rec.accepted) continue;
      ++sum.patches_accepted;
      const int rx = tess.grid_xy[2 * i], ry = tess.grid_xy[2 * i + 1];
      ImageU8 patch(patch_size, patch_size, 3);
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x)
          for (int ch = 0; ch < 3; ++ch)
            patch.at(y, x, ch) = tess.rescaled.at(ry + y, rx + x, ch);
      const auto ppath = patch_dir / patch_filename(rec.x, rec.y);
      write_png(ppath.string(), patch);
      hash_paths.push_back(ppath.string());
    }
    const auto mpath = fs::path(out_dir) / "manifests" / (s.slide_id + ".tsv");
    write_manifest(mpath.string(), tess.manifest);
    hash_paths.push_back(mpath.string());
    ++sum.slides;
  }
  write_labels(out_dir, labels);
  hash_paths.push_back((fs::path(out_dir) / "labels.tsv").string());

  std::ofstream m(fs::path(out_dir) / "dataset.meta");
  m << "kind=preprocessed\ntarget_mpp=" << target_mpp << "\npatch_size=" << patch_size
    << "\ncanny_sigma=" << canny.sigma << "\ncanny_low=" << canny.low << "\ncanny_high="
    << canny.high << "\nmin_edge_fraction=" << canny.min_edge_fraction << "\n";
  m.close();

  // content identity: relative paths + file bytes, independent of where the
  // dataset lives on disk
  std::sort(hash_paths.begin(), hash_paths.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : hash_paths) {
    h = fnv1a64(fs::relative(p, out_dir).generic_string(), h);
    h ^= hash_file(p);
    h *= 0x100000001b3ULL;
  }
  sum.dataset_hash = hex64(h);
  std::ofstream hf(fs::path(out_dir) / "dataset.hash");
  hf << sum.dataset_hash << "\n";
  return sum;
}

// ---- preprocessed dataset view -----------------------------------------------

struct PreprocessedDataset {
  std::string root;
  LabelTable labels;
  int patch_size = 0;

  static PreprocessedDataset open(const std::string& root) {
    PreprocessedDataset d;
    d.root = root;
    d.labels = read_labels(root);
    const auto meta = read_meta(root);
    if (meta.count("patch_size")) d.patch_size = std::stoi(meta.at("patch_size"));
    return d;
  }

  std::string dataset_hash() const {
    std::ifstream in(std::filesystem::path(root) / "dataset.hash");
    std::string h;
    in >> h;
    if (h.empty()) throw IoError("missing dataset.hash in " + root);
    return h;
  }

  std::vector<SlideInfo> cohort(const std::string& name) const {
    std::vector<SlideInfo> out;
    for (const auto& s : labels.slides)
      if (s.cohort == name) out.push_back(s);
    return out;
  }

  /// Paths of the accepted patches of one slide, manifest order.
  std::vector<std::string> accepted_patches(const std::string& slide_id) const {
    namespace fs = std::filesystem;
    const auto m = read_manifest((fs::path(root) / "manifests" / (slide_id + ".tsv")).string());
    std::vector<std::string> out;
    for (const auto& p : m.patches)
      if (p.accepted)
        out.push_back((fs::path(root) / "patches" / slide_id / patch_filename(p.x, p.y)).string());
    return out;
  }
};

// ---- nested slide-level subsampling -------------------------------------------

/// Uniform slide sample without replacement of ceil(fraction * n) slides.
/// For a fixed seed the selected sets are nested across fractions; output
/// preserves the input order.
template <class T>
std::vector<T> subsample_fraction(const std::vector<T>& slides, double fraction,
                                  std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0) throw Error("fraction must be in (0, 1]");
  if (slides.empty()) throw EmptyResultError("no slides to subsample");
  if (fraction == 1.0) return slides;
  const std::size_t keep =
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(slides.size())));
  if (keep == 0) throw EmptyResultError("fraction leaves no slides");
  std::vector<std::size_t> order(slides.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0x5ab5e7ULL));
  shuffle(order, rng);
  std::vector<char> selected(slides.size(), 0);
  for (std::size_t i = 0; i < keep; ++i) selected[order[i]] = 1;
  std::vector<T> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < slides.size(); ++i)
    if (selected[i]) out.push_back(slides[i]);
  return out;
}

}  // namespace cpath
