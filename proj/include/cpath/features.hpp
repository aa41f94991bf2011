#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cpath/checkpoint.hpp"
#include "cpath/encoder.hpp"
#include "cpath/errors.hpp"
#include "cpath/image.hpp"
#include "cpath/momentum.hpp"
#include "cpath/pipeline.hpp"

namespace cpath {

// Frozen-feature extraction and the per-slide feature file: a small binary
// container (magic, version, slide id, extraction mode, dimension, row
// count, producing-checkpoint hash) followed by row-major 32-bit floats.

struct FeatureFile {
  std::string slide_id;
  std::string mode;
  std::string checkpoint_hash;
  std::uint32_t dim = 0;
  std::uint32_t count = 0;
  std::vector<float> data;  // count x dim
};

inline void write_feature_file(const std::string& path, const FeatureFile& f) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write("CPFE", 4);
  detail::write_le<std::uint32_t>(out, 1);
  auto put_str = [&](const std::string& s) {
    detail::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
  };
  put_str(f.slide_id);
  put_str(f.mode);
  put_str(f.checkpoint_hash);
  detail::write_le<std::uint32_t>(out, f.dim);
  detail::write_le<std::uint32_t>(out, f.count);
  for (float v : f.data) detail::write_le<float>(out, v);
  if (!out) throw IoError("write failed for " + path);
}

inline FeatureFile read_feature_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "CPFE") throw IoError("not a feature file: " + path);
  if (detail::read_le<std::uint32_t>(in) != 1) throw IoError("unsupported feature file version");
  auto get_str = [&]() {
    const auto len = detail::read_le<std::uint16_t>(in);
    std::string s(len, '\0');
    in.read(s.data(), len);
    return s;
  };
  FeatureFile f;
  f.slide_id = get_str();
  f.mode = get_str();
  f.checkpoint_hash = get_str();
  f.dim = detail::read_le<std::uint32_t>(in);
  f.count = detail::read_le<std::uint32_t>(in);
  f.data.resize(static_cast<std::size_t>(f.dim) * f.count);
  for (auto& v : f.data) v = detail::read_le<float>(in);
  if (!in) throw IoError("feature file truncated: " + path);
  return f;
}

/// Rebuild the encoder family description from a checkpoint's meta echo.
inline StageEncoderConfig encoder_config_from_meta(const std::string& meta) {
  std::map<std::string, std::string> kv;
  std::istringstream in(meta);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  StageEncoderConfig c;
  c.input_size = std::stoi(kv.at("input_size"));
  c.stem_kernel = c.stem_stride = std::stoi(kv.at("stem"));
  c.window = std::stoi(kv.at("window"));
  c.head_dim = std::stoi(kv.at("head_dim"));
  c.mlp_ratio = std::stod(kv.at("mlp_ratio"));
  c.feature_dim = std::stoi(kv.at("feature_dim"));
  c.stages.clear();
  std::istringstream ss(kv.at("stages"));
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto x = item.find('x');
    c.stages.push_back({std::stoi(item.substr(0, x)), std::stoi(item.substr(x + 1))});
  }
  c.validate();
  return c;
}

/// The trained backbone loaded for inference: query-encoder parameters only.
struct FrozenEncoder {
  StageEncoderConfig cfg;
  ParamStore<float> params;
  std::string checkpoint_hash;

  static FrozenEncoder load(const std::string& checkpoint_path) {
    const auto ck = load_checkpoint(checkpoint_path);
    FrozenEncoder enc;
    enc.cfg = encoder_config_from_meta(ck.meta);
    enc.checkpoint_hash = cpath::checkpoint_hash(checkpoint_path);
    for (const auto& b : ck.blobs) {
      if (b.name.rfind("q.enc.", 0) != 0) continue;
      Tensor<float> t(b.shape);
      for (std::size_t i = 0; i < b.data.size(); ++i) t.data[i] = static_cast<float>(b.data[i]);
      enc.params.add(b.name.substr(2), std::move(t));  // strip the "q." prefix
    }
    if (enc.params.entries.empty()) throw IoError("checkpoint holds no encoder parameters");
    return enc;
  }

  /// Pooled features of a batch of [0,1] float images.
  Tensor<float> embed(const std::vector<ImageF>& images, ExtractMode mode) {
    const int px = cfg.input_size;
    Tensor<float> batch({static_cast<int>(images.size()), px, px, 3});
    for (std::size_t i = 0; i < images.size(); ++i) {
      const ImageF resized = resize_bilinear(images[i], px, px);
      for (std::size_t k = 0; k < resized.pix.size(); ++k)
        batch.data[i * resized.pix.size() + k] = resized.pix[k] * 2.0f - 1.0f;
    }
    return extract_features(batch, cfg, params, mode);
  }
};

struct ExtractSummary {
  int slides_written = 0;
  std::vector<std::string> skipped;  // slides with zero accepted patches
  int dim = 0;
};

/// One feature file per slide under `out_dir`; slides without accepted
/// patches are skipped with a warning and recorded in skipped.tsv.
inline ExtractSummary extract_cohort_features(const std::string& checkpoint_path, ExtractMode mode,
                                              const std::string& data_dir,
                                              const std::string& out_dir, int batch_size = 64) {
  namespace fs = std::filesystem;
  auto enc = FrozenEncoder::load(checkpoint_path);
  const auto ds = PreprocessedDataset::open(data_dir);
  fs::create_directories(out_dir);

  ExtractSummary sum;
  sum.dim = extract_width(enc.cfg, mode);
  for (const auto& slide : ds.labels.slides) {
    const auto paths = ds.accepted_patches(slide.slide_id);
    if (paths.empty()) {
      std::cerr << "warning: slide " << slide.slide_id << " has no accepted patches; skipped\n";
      sum.skipped.push_back(slide.slide_id);
      continue;
    }
    FeatureFile f;
    f.slide_id = slide.slide_id;
    f.mode = extract_mode_name(mode);
    f.checkpoint_hash = enc.checkpoint_hash;
    f.dim = static_cast<std::uint32_t>(sum.dim);
    f.count = static_cast<std::uint32_t>(paths.size());
    f.data.reserve(paths.size() * static_cast<std::size_t>(sum.dim));
    for (std::size_t start = 0; start < paths.size(); start += static_cast<std::size_t>(batch_size)) {
      std::vector<ImageF> images;
      const std::size_t stop = std::min(paths.size(), start + static_cast<std::size_t>(batch_size));
      for (std::size_t i = start; i < stop; ++i)
        images.push_back(to_float(read_png(paths[i])));
      const auto feats = enc.embed(images, mode);
      f.data.insert(f.data.end(), feats.data.begin(), feats.data.end());
    }
    write_feature_file((fs::path(out_dir) / (slide.slide_id + ".feat")).string(), f);
    ++sum.slides_written;
  }
  std::ofstream meta(fs::path(out_dir) / "store.meta");
  meta << "mode=" << extract_mode_name(mode) << "\ndim=" << sum.dim << "\ncheckpoint_hash="
       << enc.checkpoint_hash << "\nslides=" << sum.slides_written << "\n";
  std::ofstream skip(fs::path(out_dir) / "skipped.tsv");
  skip << "slide_id\n";
  for (const auto& s : sum.skipped) skip << s << "\n";
  return sum;
}

/// Read-side view of a feature directory. Refuses stores with mixed
/// dimensions or modes.
struct FeatureStore {
  std::string root;
  std::string mode;
  std::string checkpoint_hash;
  int dim = 0;
  std::vector<std::string> slide_ids;

  static FeatureStore open(const std::string& root) {
    namespace fs = std::filesystem;
    FeatureStore s;
    s.root = root;
    for (const auto& entry : fs::directory_iterator(root)) {
      if (entry.path().extension() != ".feat") continue;
      const auto f = read_feature_file(entry.path().string());
      if (s.dim == 0) {
        s.dim = static_cast<int>(f.dim);
        s.mode = f.mode;
        s.checkpoint_hash = f.checkpoint_hash;
      } else if (s.dim != static_cast<int>(f.dim) || s.mode != f.mode) {
        throw ModeMismatchError("feature store " + root + " mixes dimensions or modes");
      }
      s.slide_ids.push_back(f.slide_id);
    }
    if (s.slide_ids.empty()) throw IoError("no feature files in " + root);
    std::sort(s.slide_ids.begin(), s.slide_ids.end());
    return s;
  }

  bool has(const std::string& slide_id) const {
    return std::filesystem::exists(std::filesystem::path(root) / (slide_id + ".feat"));
  }

  FeatureFile load(const std::string& slide_id) const {
    return read_feature_file((std::filesystem::path(root) / (slide_id + ".feat")).string());
  }
};

}  // namespace cpath
