#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "omnifuse/common.hpp"

namespace omnifuse {

// H x W x S reflectance cube, band-minor in memory. Values live in [0,1] and
// are float32 so the ENVI interchange round-trip is bit-exact.
struct HyperspectralCube {
  int h = 0, w = 0, s = 0;
  std::vector<float> data;             // [h][w][s]
  std::vector<double> wavelengths_nm;  // [s], strictly increasing
  std::string scene_id;
  std::string patient_id;

  float at(int y, int x, int band) const { return data[(static_cast<size_t>(y) * w + x) * s + band]; }
  float& at(int y, int x, int band) { return data[(static_cast<size_t>(y) * w + x) * s + band]; }

  // Data-level invariants: consistent sizes, finite values, strictly
  // increasing wavelengths. Pipeline dimension requirements are checked at
  // the model boundary instead, since the I/O layer also handles tiny cubes.
  void validate() const;
};

struct SegmentationMask {
  int h = 0, w = 0;
  std::vector<uint8_t> data;  // 0 / 1

  uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * w + x]; }
  uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * w + x]; }
};

struct SceneRecord {
  std::string scene_id;
  std::string patient_id;
  std::string cube_path;  // ENVI header path
  std::string mask_path;  // PGM path
};

struct DatasetSplit {
  std::vector<SceneRecord> train, val, test;
  uint64_t seed = 0;
};

struct AugmentationSpec {
  bool rotate_enabled = false;
  double rotation_min_deg = -15.0, rotation_max_deg = 15.0;
  bool scale_enabled = false;
  double scale_min = 0.9, scale_max = 1.1;
  bool elastic_enabled = false;
  double elastic_alpha = 8.0;
  double elastic_sigma = 4.0;

  bool any_enabled() const { return rotate_enabled || scale_enabled || elastic_enabled; }
  void validate() const;
};

struct SynthParams {
  int h = 64, w = 64, s = 16;
  int n_blobs = 3;
  double noise_sigma = 0.05;
  double band_correlation = 0.9;
};

// ENVI BSQ float32 little-endian pair: <name>.hdr + <name>.raw.
HyperspectralCube read_envi(const std::string& header_path);
void write_envi(const HyperspectralCube& cube, const std::string& header_path);

// Binary masks as 8-bit PGM (P5), 0 = background, 255 = foreground.
SegmentationMask read_mask_pgm(const std::string& path);
void write_mask_pgm(const SegmentationMask& mask, const std::string& path);

// Scene manifest CSV: scene_id,patient_id,cube_path,mask_path.
std::vector<SceneRecord> read_manifest(const std::string& path);
void write_manifest(const std::vector<SceneRecord>& records, const std::string& path);

// Bands nearest 420 / 495 / 625 nm mapped to B, G, R; ties to the lower
// wavelength. Layout [h][w][3].
std::vector<float> pseudo_color(const HyperspectralCube& cube);
// Same selection repackaged as a 3-band cube for the pure-spatial input mode.
HyperspectralCube pseudo_color_cube(const HyperspectralCube& cube);

DatasetSplit patient_split(const std::vector<SceneRecord>& records, const std::array<int, 3>& ratios, uint64_t seed);

// One geometric transform (scale -> rotate -> elastic, composed into a single
// displacement and applied once) hits every band and the mask alike; bands
// bilinear, mask nearest. Output shapes equal input shapes.
void augment(const HyperspectralCube& cube, const SegmentationMask& mask, const AugmentationSpec& spec, Rng& rng,
             HyperspectralCube& out_cube, SegmentationMask& out_mask);

std::pair<HyperspectralCube, SegmentationMask> synth_scene(const SynthParams& params, Rng& rng);

HyperspectralCube normalize_cube(const HyperspectralCube& cube);

SegmentationMask downsample_mask_nearest(const SegmentationMask& mask, int factor);

}  // namespace omnifuse
