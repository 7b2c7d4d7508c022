// Dataset plumbing: binary PNM raster I/O, bilinear/nearest resizing,
// synthetic shape generation, directory loading with optional manifest
// splits, and the checkpoint container. Images live in [0,1] as float
// tensors of shape (1,3,h,w); masks are integer class ids.
#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "rfcnet/model.hpp"
#include "rfcnet/tensor.hpp"

namespace rfc {

static_assert(std::endian::native == std::endian::little,
              "raster/checkpoint codecs assume a little-endian host");

// ---------------------------------------------------------------------------
// PNM (P5 grayscale / P6 RGB, binary, 8-bit)

struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;                // 1 or 3
  std::vector<std::uint8_t> data;  // row-major, interleaved

  std::uint8_t at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

namespace detail {

// Reads one whitespace-delimited header token, skipping '#' comments.
inline std::string pnm_token(std::istream& in, const std::string& path) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) {
    const long long offset = static_cast<long long>(in.tellg());
    throw FormatError(path + ": unexpected end of file in header at offset " +
                      std::to_string(offset < 0 ? 0 : offset));
  }
  return tok;
}

inline int pnm_int(std::istream& in, const std::string& path, const char* what) {
  const std::string tok = pnm_token(in, path);
  try {
    std::size_t pos = 0;
    const int v = std::stoi(tok, &pos);
    if (pos != tok.size() || v <= 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw FormatError(path + ": invalid " + what + " '" + tok + "' in header");
  }
}

}  // namespace detail

inline Raster read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const std::string magic = detail::pnm_token(in, path);
  Raster raster;
  if (magic == "P5")
    raster.channels = 1;
  else if (magic == "P6")
    raster.channels = 3;
  else
    throw FormatError(path + ": unsupported magic '" + magic + "' (want binary P5 or P6)");
  raster.width = detail::pnm_int(in, path, "width");
  raster.height = detail::pnm_int(in, path, "height");
  const int maxval = detail::pnm_int(in, path, "maxval");
  if (maxval != 255) throw FormatError(path + ": unsupported maxval " + std::to_string(maxval));
  // Exactly one whitespace byte separates the header from the pixel block.
  const std::size_t count =
      static_cast<std::size_t>(raster.width) * raster.height * raster.channels;
  raster.data.resize(count);
  in.read(reinterpret_cast<char*>(raster.data.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(in.gcount()) != count)
    throw FormatError(path + ": truncated pixel data at offset " +
                      std::to_string(static_cast<long long>(in.tellg() < 0
                                                                ? in.gcount()
                                                                : static_cast<long long>(in.tellg()))) +
                      " (expected " + std::to_string(count) + " bytes)");
  return raster;
}

inline void write_pnm(const std::string& path, const Raster& raster) {
  if (raster.channels != 1 && raster.channels != 3)
    throw ArgumentError("write_pnm: channels must be 1 or 3");
  if (raster.data.size() != static_cast<std::size_t>(raster.width) * raster.height * raster.channels)
    throw ArgumentError("write_pnm: data size does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << (raster.channels == 1 ? "P5" : "P6") << "\n"
      << raster.width << " " << raster.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(raster.data.data()),
            static_cast<std::streamsize>(raster.data.size()));
  if (!out) throw IoError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Samples and resizing

struct Sample {
  Tensor<float> image;  // (1,3,h,w), values in [0,1]
  ClassMask mask;       // (1,h,w)
  // Original content extent before any alignment padding; equal to the tensor
  // dims when no padding was applied. Evaluation crops to this region.
  int content_h = 0;
  int content_w = 0;
};

namespace detail {

// Bilinear sample of a raster channel with the half-pixel (align_corners=false)
// convention, matching the model's upsampling.
inline float sample_bilinear(const Raster& raster, int c, double sy, double sx) {
  const double fy = std::max(0.0, std::min(sy, static_cast<double>(raster.height - 1)));
  const double fx = std::max(0.0, std::min(sx, static_cast<double>(raster.width - 1)));
  const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
  const int y1 = std::min(y0 + 1, raster.height - 1), x1 = std::min(x0 + 1, raster.width - 1);
  const double wy = fy - y0, wx = fx - x0;
  const double top = raster.at(y0, x0, c) * (1.0 - wx) + raster.at(y0, x1, c) * wx;
  const double bot = raster.at(y1, x0, c) * (1.0 - wx) + raster.at(y1, x1, c) * wx;
  return static_cast<float>((top * (1.0 - wy) + bot * wy) / 255.0);
}

// Symmetric (edge-reflecting) index for alignment padding.
inline int mirror_index(int i, int n) {
  if (i < n) return i;
  const int m = 2 * (n - 1) - i;
  return m < 0 ? 0 : m;
}

}  // namespace detail

/// Grows an image to (padded_h, padded_w) by reflecting rows/columns at the
/// bottom/right edge; used to reach dims divisible by 4.
inline Tensor<float> reflect_pad_to(const Tensor<float>& image, int padded_h, int padded_w) {
  const Shape s = image.shape();
  if (padded_h < s.h || padded_w < s.w) throw ArgumentError("reflect_pad_to: target smaller than input");
  if (padded_h == s.h && padded_w == s.w) return image;
  Tensor<float> padded = Tensor<float>::zeros({s.n, s.c, padded_h, padded_w});
  auto src = image.data();
  auto dst = padded.data();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::size_t src_base = (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
      const std::size_t dst_base = (static_cast<std::size_t>(n) * s.c + c) * padded_h * padded_w;
      for (int y = 0; y < padded_h; ++y) {
        const int sy = detail::mirror_index(y, s.h);
        for (int x = 0; x < padded_w; ++x)
          dst[dst_base + static_cast<std::size_t>(y) * padded_w + x] =
              src[src_base + static_cast<std::size_t>(sy) * s.w + detail::mirror_index(x, s.w)];
      }
    }
  return padded;
}

inline ClassMask reflect_pad_to(const ClassMask& mask, int padded_h, int padded_w) {
  if (padded_h < mask.h || padded_w < mask.w)
    throw ArgumentError("reflect_pad_to: target smaller than input");
  if (padded_h == mask.h && padded_w == mask.w) return mask;
  ClassMask padded{mask.n, padded_h, padded_w,
                   std::vector<int>(static_cast<std::size_t>(mask.n) * padded_h * padded_w)};
  for (int n = 0; n < mask.n; ++n)
    for (int y = 0; y < padded_h; ++y)
      for (int x = 0; x < padded_w; ++x)
        padded.ids[(static_cast<std::size_t>(n) * padded_h + y) * padded_w + x] =
            mask.ids[(static_cast<std::size_t>(n) * mask.h + detail::mirror_index(y, mask.h)) * mask.w +
                     detail::mirror_index(x, mask.w)];
  return padded;
}

/// Resizes a 1- or 3-channel raster to a float image tensor; grayscale input
/// is replicated across the three channels.
inline Tensor<float> raster_to_image(const Raster& raster, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw ArgumentError("raster_to_image: output dims must be positive");
  Tensor<float> image = Tensor<float>::zeros({1, 3, out_h, out_w});
  auto dst = image.data();
  const double scale_y = static_cast<double>(raster.height) / out_h;
  const double scale_x = static_cast<double>(raster.width) / out_w;
  for (int c = 0; c < 3; ++c) {
    const int src_c = raster.channels == 3 ? c : 0;
    for (int y = 0; y < out_h; ++y) {
      const double sy = (y + 0.5) * scale_y - 0.5;
      for (int x = 0; x < out_w; ++x) {
        const double sx = (x + 0.5) * scale_x - 0.5;
        dst[(static_cast<std::size_t>(c) * out_h + y) * out_w + x] =
            detail::sample_bilinear(raster, src_c, sy, sx);
      }
    }
  }
  return image;
}

/// Nearest-neighbor resize of a grayscale mask raster, binarized at 0.5
/// (pixel >= 128 becomes class 1).
inline ClassMask raster_to_mask(const Raster& raster, int out_h, int out_w) {
  if (raster.channels != 1) throw FormatError("mask raster must be grayscale (P5)");
  ClassMask mask{1, out_h, out_w, std::vector<int>(static_cast<std::size_t>(out_h) * out_w)};
  const double scale_y = static_cast<double>(raster.height) / out_h;
  const double scale_x = static_cast<double>(raster.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(raster.height - 1, static_cast<int>((y + 0.5) * scale_y));
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(raster.width - 1, static_cast<int>((x + 0.5) * scale_x));
      mask.ids[static_cast<std::size_t>(y) * out_w + x] = raster.at(sy, sx, 0) >= 128 ? 1 : 0;
    }
  }
  return mask;
}

/// Writes mask plane n as a P5 raster with 0 for background and 255 for any
/// nonzero class id.
inline void save_mask(const ClassMask& mask, int n, const std::string& path) {
  if (n < 0 || n >= mask.n) throw ArgumentError("save_mask: plane index out of range");
  Raster raster;
  raster.width = mask.w;
  raster.height = mask.h;
  raster.channels = 1;
  raster.data.resize(static_cast<std::size_t>(mask.h) * mask.w);
  const std::size_t base = static_cast<std::size_t>(n) * mask.h * mask.w;
  for (std::size_t i = 0; i < raster.data.size(); ++i)
    raster.data[i] = mask.ids[base + i] > 0 ? 255 : 0;
  write_pnm(path, raster);
}

/// Writes image plane n (values clamped to [0,1]) as a P6 raster.
inline void save_image(const Tensor<float>& image, int n, const std::string& path) {
  const Shape s = image.shape();
  if (s.c != 3) throw ArgumentError("save_image: expected 3 channels");
  if (n < 0 || n >= s.n) throw ArgumentError("save_image: plane index out of range");
  Raster raster;
  raster.width = s.w;
  raster.height = s.h;
  raster.channels = 3;
  raster.data.resize(static_cast<std::size_t>(s.h) * s.w * 3);
  auto src = image.data();
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = src[((static_cast<std::size_t>(n) * 3 + c) * s.h + y) * s.w + x];
        raster.data[(static_cast<std::size_t>(y) * s.w + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
      }
  write_pnm(path, raster);
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Generates `count` images of smooth textured background with 1-3 filled
/// ellipses as the foreground class. Foreground covers 2-60% of each image
/// (parameters are redrawn until that holds). Fully determined by `seed`.
inline std::vector<Sample> gen_synthetic(int count, int h, int w, std::uint64_t seed) {
  if (count <= 0 || h <= 0 || w <= 0) throw ArgumentError("gen_synthetic: count and dims must be positive");
  if (h % 4 != 0 || w % 4 != 0) throw ArgumentError("gen_synthetic: dims must be divisible by 4");
  Rng rng(seed);
  const double two_pi = 6.283185307179586;
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    std::vector<int> ids(static_cast<std::size_t>(h) * w);
    double base[3], amp[3], fy[3], fx[3], phase[3];
    double contrast = 0.0;
    // Redraw the whole sample until the foreground fraction is reasonable.
    for (;;) {
      for (int c = 0; c < 3; ++c) {
        base[c] = 0.10 + 0.25 * rng.uniform();
        amp[c] = 0.02 + 0.04 * rng.uniform();
        fy[c] = 0.5 + 2.5 * rng.uniform();
        fx[c] = 0.5 + 2.5 * rng.uniform();
        phase[c] = two_pi * rng.uniform();
      }
      contrast = 0.40 + 0.15 * rng.uniform();
      std::fill(ids.begin(), ids.end(), 0);
      const int num_ellipses = static_cast<int>(rng.uniform_int(1, 3));
      const double min_dim = static_cast<double>(std::min(h, w));
      for (int e = 0; e < num_ellipses; ++e) {
        const double cy = (0.2 + 0.6 * rng.uniform()) * h;
        const double cx = (0.2 + 0.6 * rng.uniform()) * w;
        const double ry = (0.08 + 0.14 * rng.uniform()) * min_dim;
        const double rx = (0.08 + 0.14 * rng.uniform()) * min_dim;
        const double theta = 3.141592653589793 * rng.uniform();
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const double dy = y - cy, dx = x - cx;
            const double u = (dx * ct + dy * st) / rx;
            const double v = (-dx * st + dy * ct) / ry;
            if (u * u + v * v <= 1.0) ids[static_cast<std::size_t>(y) * w + x] = 1;
          }
      }
      const std::size_t fg = static_cast<std::size_t>(
          std::count(ids.begin(), ids.end(), 1));
      const double fraction = static_cast<double>(fg) / ids.size();
      if (fraction >= 0.02 && fraction <= 0.6) break;
    }
    Tensor<float> image = Tensor<float>::zeros({1, 3, h, w});
    auto dst = image.data();
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double v = base[c] +
                     amp[c] * std::sin(two_pi * (fy[c] * y / h + fx[c] * x / w) + phase[c]) +
                     (rng.uniform() - 0.5) * 0.03;
          if (ids[static_cast<std::size_t>(y) * w + x] == 1) v += contrast;
          dst[(static_cast<std::size_t>(c) * h + y) * w + x] =
              static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    samples.push_back(Sample{std::move(image), ClassMask{1, h, w, std::move(ids)}, h, w});
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Directory loading

struct DirectoryDataset {
  std::vector<Sample> samples;
  std::vector<std::string> stems;  // aligned with samples
};

struct ManifestEntry {
  std::string stem;
  std::string split;
};

/// Parses a `filename,split` manifest. Extensions on the filename are
/// dropped; blank lines and '#' comments are skipped.
inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos)
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected 'filename,split'");
    auto trim = [](std::string s) {
      const std::size_t a = s.find_first_not_of(" \t");
      const std::size_t b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string name = trim(line.substr(0, comma));
    std::string split = trim(line.substr(comma + 1));
    if (name.empty() || split.empty())
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected 'filename,split'");
    entries.push_back({std::filesystem::path(name).stem().string(), split});
  }
  return entries;
}

struct LoadOptions {
  int threads = 1;
  std::string manifest;      // optional manifest path
  std::string split;         // manifest split to keep ("" keeps everything)
  std::ostream* log = &std::cerr;
};

/// Loads `dir/images/*.{ppm,pgm,pnm}` with filename-matched masks from
/// `dir/masks/`, resized to (target_h, target_w). Targets not divisible by 4
/// are reflect-padded up to the next multiple and the content extent is
/// recorded on each sample.
inline DirectoryDataset load_directory(const std::string& dir, int target_h, int target_w,
                                       const LoadOptions& opts = {}) {
  namespace fs = std::filesystem;
  if (target_h <= 0 || target_w <= 0) throw ArgumentError("load_directory: target dims must be positive");
  const fs::path image_dir = fs::path(dir) / "images";
  const fs::path mask_dir = fs::path(dir) / "masks";
  if (!fs::is_directory(image_dir)) throw IoError("missing directory " + image_dir.string());
  if (!fs::is_directory(mask_dir)) throw IoError("missing directory " + mask_dir.string());

  auto is_raster = [](const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
  };
  std::map<std::string, fs::path> images, masks;
  for (const auto& entry : fs::directory_iterator(image_dir))
    if (entry.is_regular_file() && is_raster(entry.path())) images[entry.path().stem().string()] = entry.path();
  for (const auto& entry : fs::directory_iterator(mask_dir))
    if (entry.is_regular_file() && is_raster(entry.path())) masks[entry.path().stem().string()] = entry.path();

  for (const auto& [stem, path] : images)
    if (!masks.count(stem)) throw IoError("unpaired image " + path.string() + ": no mask with stem '" + stem + "'");
  for (const auto& [stem, path] : masks)
    if (!images.count(stem)) throw IoError("unpaired mask " + path.string() + ": no image with stem '" + stem + "'");

  std::vector<std::string> stems;
  if (!opts.manifest.empty()) {
    for (const auto& entry : read_manifest(opts.manifest)) {
      if (!opts.split.empty() && entry.split != opts.split) continue;
      if (!images.count(entry.stem))
        throw IoError("manifest entry '" + entry.stem + "' has no file in " + image_dir.string());
      stems.push_back(entry.stem);
    }
    std::sort(stems.begin(), stems.end());
    stems.erase(std::unique(stems.begin(), stems.end()), stems.end());
  } else {
    for (const auto& [stem, path] : images) stems.push_back(stem);  // map iteration is sorted
  }
  if (stems.empty()) throw IoError("no samples found in " + dir);

  const int padded_h = (target_h + 3) / 4 * 4;
  const int padded_w = (target_w + 3) / 4 * 4;
  if ((padded_h != target_h || padded_w != target_w) && opts.log)
    *opts.log << "note: padding " << target_h << "x" << target_w << " samples to " << padded_h << "x"
              << padded_w << " (model needs dims divisible by 4); evaluation crops back\n";

  DirectoryDataset dataset;
  dataset.stems = stems;
  dataset.samples.resize(stems.size());

  auto load_one = [&](std::size_t i) {
    const Raster image_raster = read_pnm(images.at(stems[i]).string());
    const Raster mask_raster = read_pnm(masks.at(stems[i]).string());
    Tensor<float> image = raster_to_image(image_raster, target_h, target_w);
    ClassMask mask = raster_to_mask(mask_raster, target_h, target_w);
    dataset.samples[i] = Sample{reflect_pad_to(image, padded_h, padded_w),
                                reflect_pad_to(mask, padded_h, padded_w), target_h, target_w};
  };

  const int threads = std::max(1, opts.threads);
  if (threads == 1 || stems.size() < 2) {
    for (std::size_t i = 0; i < stems.size(); ++i) load_one(i);
  } else {
    std::vector<std::exception_ptr> errors(stems.size());
    std::vector<std::thread> pool;
    const int workers = std::min<int>(threads, static_cast<int>(stems.size()));
    for (int t = 0; t < workers; ++t)
      pool.emplace_back([&, t]() {
        for (std::size_t i = static_cast<std::size_t>(t); i < stems.size(); i += workers) {
          try {
            load_one(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
    for (const auto& err : errors)
      if (err) std::rethrow_exception(err);  // first failing index wins, deterministically
  }
  return dataset;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointMagic = "RFCNET-CKPT";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& in, const std::string& path) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (in.gcount() != 4)
    throw FormatError(path + ": truncated checkpoint at offset " +
                      std::to_string(static_cast<long long>(in.tellg())));
  return v;
}

inline std::string config_to_header(const RfcConfig& cfg) {
  std::ostringstream os;
  os << "m=" << cfg.m << "\n";
  os << "kernels=";
  for (std::size_t i = 0; i < cfg.kernels.size(); ++i) os << (i ? "," : "") << cfg.kernels[i];
  os << "\n";
  os << "depth=" << cfg.depth << "\n";
  os << "width=" << cfg.width << "\n";
  os << "stem1=" << cfg.stem1 << "\n";
  os << "stem2=" << cfg.stem2 << "\n";
  os << "classes=" << cfg.num_classes << "\n";
  os << "merge=" << to_string(cfg.merge) << "\n";
  os << "seed=" << cfg.seed << "\n";
  return os.str();
}

}  // namespace detail

/// Serializes the model configuration and every named parameter. The header
/// is plain text; tensor payloads are little-endian float32.
template <typename T>
void save_checkpoint(const RfcModel<T>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  auto named = model.named_parameters();
  out << kCheckpointMagic << " " << kCheckpointVersion << "\n";
  out << detail::config_to_header(model.config);
  out << "tensors=" << named.size() << "\n";
  out << "---\n";
  for (const auto& [name, tensor] : named) {
    detail::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape s = tensor.shape();
    detail::write_u32(out, static_cast<std::uint32_t>(s.n));
    detail::write_u32(out, static_cast<std::uint32_t>(s.c));
    detail::write_u32(out, static_cast<std::uint32_t>(s.h));
    detail::write_u32(out, static_cast<std::uint32_t>(s.w));
    auto src = tensor.data();
    for (std::size_t i = 0; i < static_cast<std::size_t>(s.numel()); ++i) {
      const float v = static_cast<float>(src[i]);
      out.write(reinterpret_cast<const char*>(&v), 4);
    }
  }
  if (!out) throw IoError("write failed for " + path);
}

/// Rebuilds the model described by the checkpoint header and loads every
/// tensor. The header configuration goes through the usual validation;
/// unknown versions and structural mismatches are rejected.
inline RfcModel<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line))
    throw FormatError(path + ": unexpected end of file at offset 0 (empty checkpoint?)");
  {
    std::istringstream head(line);
    std::string magic;
    int version = -1;
    head >> magic >> version;
    if (magic != kCheckpointMagic) throw FormatError(path + ": bad magic '" + magic + "'");
    if (version != kCheckpointVersion)
      throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  RfcConfig cfg;
  cfg.kernels.clear();
  std::size_t tensor_count = 0;
  bool saw_tensors = false;
  while (std::getline(in, line)) {
    if (line == "---") break;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path + ": malformed header line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "m")
        cfg.m = std::stoi(value);
      else if (key == "kernels") {
        std::istringstream vs(value);
        std::string item;
        while (std::getline(vs, item, ',')) cfg.kernels.push_back(std::stoi(item));
      } else if (key == "depth")
        cfg.depth = std::stoi(value);
      else if (key == "width")
        cfg.width = std::stoi(value);
      else if (key == "stem1")
        cfg.stem1 = std::stoi(value);
      else if (key == "stem2")
        cfg.stem2 = std::stoi(value);
      else if (key == "classes")
        cfg.num_classes = std::stoi(value);
      else if (key == "merge")
        cfg.merge = merge_mode_from_string(value);
      else if (key == "seed")
        cfg.seed = std::stoull(value);
      else if (key == "tensors") {
        tensor_count = std::stoul(value);
        saw_tensors = true;
      } else
        throw FormatError(path + ": unknown header key '" + key + "'");
    } catch (const FormatError&) {
      throw;
    } catch (const ArgumentError&) {
      throw;
    } catch (const std::exception&) {
      throw FormatError(path + ": invalid value '" + value + "' for header key '" + key + "'");
    }
  }
  if (line != "---") throw FormatError(path + ": missing '---' header terminator");
  if (!saw_tensors) throw FormatError(path + ": missing 'tensors=' header line");
  cfg.validate();

  RfcModel<float> model = build_rfc_net<float>(cfg);
  auto named = model.named_parameters();
  if (named.size() != tensor_count)
    throw FormatError(path + ": header declares " + std::to_string(tensor_count) + " tensors but the " +
                      "described model has " + std::to_string(named.size()));
  for (auto& [name, tensor] : named) {
    const std::uint32_t name_len = detail::read_u32(in, path);
    if (name_len > 4096) throw FormatError(path + ": implausible name length " + std::to_string(name_len));
    std::string stored(name_len, '\0');
    in.read(stored.data(), name_len);
    if (static_cast<std::uint32_t>(in.gcount()) != name_len)
      throw FormatError(path + ": truncated tensor name at offset " +
                        std::to_string(static_cast<long long>(in.tellg())));
    if (stored != name)
      throw FormatError(path + ": tensor '" + stored + "' where '" + name + "' was expected");
    Shape s;
    s.n = static_cast<int>(detail::read_u32(in, path));
    s.c = static_cast<int>(detail::read_u32(in, path));
    s.h = static_cast<int>(detail::read_u32(in, path));
    s.w = static_cast<int>(detail::read_u32(in, path));
    const Shape expect = tensor.shape();
    if (s.n != expect.n || s.c != expect.c || s.h != expect.h || s.w != expect.w)
      throw FormatError(path + ": tensor '" + name + "' has shape " + s.to_string() + ", expected " +
                        expect.to_string());
    auto dst = tensor.data();
    in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(expect.numel() * 4));
    if (in.gcount() != static_cast<std::streamsize>(expect.numel() * 4))
      throw FormatError(path + ": truncated data for tensor '" + name + "' at offset " +
                        std::to_string(static_cast<long long>(in.tellg())));
  }
  return model;
}

}  // namespace rfc
