#include "omnifuse/datacube.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace omnifuse {

namespace fs = std::filesystem;

void HyperspectralCube::validate() const {
  if (h < 1 || w < 1 || s < 2) throw IntegrityError("cube dims must satisfy H,W >= 1 and S >= 2");
  if (data.size() != static_cast<size_t>(h) * w * s) throw IntegrityError("cube data size does not match dims");
  if (wavelengths_nm.size() != static_cast<size_t>(s)) throw IntegrityError("wavelength count does not match band count");
  for (size_t i = 1; i < wavelengths_nm.size(); ++i) {
    if (!(wavelengths_nm[i] > wavelengths_nm[i - 1])) throw IntegrityError("wavelengths must be strictly increasing");
  }
  for (float v : data) {
    if (!std::isfinite(v)) throw IntegrityError("cube contains non-finite values");
  }
}

void AugmentationSpec::validate() const {
  if (scale_enabled && (scale_min < 0.5 || scale_max > 2.0 || scale_min > scale_max)) {
    throw ParameterError("scale_factor range must lie within [0.5, 2.0]");
  }
  if (elastic_enabled && !(elastic_sigma > 0.0)) throw ParameterError("elastic_sigma must be > 0 when elastic is enabled");
  if (elastic_enabled && elastic_alpha < 0.0) throw ParameterError("elastic_alpha must be >= 0");
  if (rotate_enabled && rotation_min_deg > rotation_max_deg) throw ParameterError("rotation range is inverted");
}

namespace {

std::string raw_path_for(const std::string& header_path) {
  if (header_path.size() < 4 || header_path.substr(header_path.size() - 4) != ".hdr") {
    throw FormatError("ENVI header path must end in .hdr: " + header_path);
  }
  return header_path.substr(0, header_path.size() - 4) + ".raw";
}

// key = value lines; the wavelength list may span lines until its brace closes.
std::map<std::string, std::string> parse_envi_header(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open ENVI header: " + path);
  std::map<std::string, std::string> fields;
  std::string line;
  std::getline(in, line);
  if (line.rfind("ENVI", 0) != 0) throw FormatError("missing ENVI magic in header: " + path);
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string& t) {
      const auto a = t.find_first_not_of(" \t\r");
      const auto b = t.find_last_not_of(" \t\r");
      t = a == std::string::npos ? std::string() : t.substr(a, b - a + 1);
    };
    trim(key);
    trim(value);
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
    if (value.find('{') != std::string::npos) {
      while (value.find('}') == std::string::npos) {
        std::string more;
        if (!std::getline(in, more)) throw FormatError("unterminated { list for field '" + key + "' in " + path);
        value += more;
      }
    }
    fields[key] = value;
  }
  return fields;
}

long require_int_field(const std::map<std::string, std::string>& fields, const std::string& key, const std::string& path) {
  auto it = fields.find(key);
  if (it == fields.end()) throw FormatError("ENVI header missing field '" + key + "' in " + path);
  try {
    size_t pos = 0;
    const long v = std::stol(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw FormatError("ENVI header field '" + key + "' is not an integer in " + path);
  }
}

std::vector<double> parse_wavelengths(const std::map<std::string, std::string>& fields, const std::string& path) {
  auto it = fields.find("wavelength");
  if (it == fields.end()) throw FormatError("ENVI header missing field 'wavelength' in " + path);
  const auto open = it->second.find('{');
  const auto close = it->second.find('}');
  if (open == std::string::npos || close == std::string::npos || close < open) {
    throw FormatError("ENVI header field 'wavelength' is not a { } list in " + path);
  }
  std::string body = it->second.substr(open + 1, close - open - 1);
  for (char& c : body) {
    if (c == ',') c = ' ';
  }
  std::istringstream is(body);
  std::vector<double> out;
  double v;
  while (is >> v) out.push_back(v);
  if (out.empty()) throw FormatError("ENVI header field 'wavelength' is empty in " + path);
  return out;
}

float load_le_float(const unsigned char* p) {
  uint32_t u = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) | (static_cast<uint32_t>(p[2]) << 16) |
               (static_cast<uint32_t>(p[3]) << 24);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

void store_le_float(float f, unsigned char* p) {
  uint32_t u;
  std::memcpy(&u, &f, 4);
  p[0] = static_cast<unsigned char>(u & 0xff);
  p[1] = static_cast<unsigned char>((u >> 8) & 0xff);
  p[2] = static_cast<unsigned char>((u >> 16) & 0xff);
  p[3] = static_cast<unsigned char>((u >> 24) & 0xff);
}

}  // namespace

HyperspectralCube read_envi(const std::string& header_path) {
  const auto fields = parse_envi_header(header_path);
  const long samples = require_int_field(fields, "samples", header_path);
  const long lines = require_int_field(fields, "lines", header_path);
  const long bands = require_int_field(fields, "bands", header_path);
  if (samples < 1 || lines < 1 || bands < 1) throw FormatError("non-positive dims in ENVI header " + header_path);
  if (require_int_field(fields, "data type", header_path) != 4) {
    throw FormatError("ENVI header field 'data type' must be 4 (float32) in " + header_path);
  }
  if (require_int_field(fields, "byte order", header_path) != 0) {
    throw FormatError("ENVI header field 'byte order' must be 0 (little-endian) in " + header_path);
  }
  {
    auto it = fields.find("interleave");
    if (it == fields.end()) throw FormatError("ENVI header missing field 'interleave' in " + header_path);
    std::string v = it->second;
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
    if (v != "bsq") throw FormatError("ENVI header field 'interleave' must be bsq in " + header_path);
  }
  auto wavelengths = parse_wavelengths(fields, header_path);
  if (static_cast<long>(wavelengths.size()) != bands) {
    throw FormatError("ENVI header field 'wavelength' has " + std::to_string(wavelengths.size()) + " entries, expected " +
                      std::to_string(bands) + " in " + header_path);
  }

  const std::string raw = raw_path_for(header_path);
  std::ifstream rf(raw, std::ios::binary);
  if (!rf) throw FormatError("missing ENVI raw companion: " + raw);
  rf.seekg(0, std::ios::end);
  const int64_t file_size = rf.tellg();
  const int64_t expected = static_cast<int64_t>(samples) * lines * bands * 4;
  if (file_size != expected) {
    throw IntegrityError("ENVI raw size mismatch: " + raw + " has " + std::to_string(file_size) + " bytes, header implies " +
                         std::to_string(expected));
  }
  rf.seekg(0);
  std::vector<unsigned char> bytes(static_cast<size_t>(expected));
  rf.read(reinterpret_cast<char*>(bytes.data()), expected);
  if (!rf) throw IoError("short read from " + raw);

  HyperspectralCube cube;
  cube.h = static_cast<int>(lines);
  cube.w = static_cast<int>(samples);
  cube.s = static_cast<int>(bands);
  cube.wavelengths_nm = std::move(wavelengths);
  cube.data.resize(static_cast<size_t>(cube.h) * cube.w * cube.s);
  const int64_t plane = static_cast<int64_t>(cube.h) * cube.w;
  for (int b = 0; b < cube.s; ++b) {
    for (int y = 0; y < cube.h; ++y) {
      for (int x = 0; x < cube.w; ++x) {
        float v = load_le_float(bytes.data() + (b * plane + static_cast<int64_t>(y) * cube.w + x) * 4);
        if (!std::isfinite(v)) v = 0.0f;
        cube.at(y, x, b) = v;
      }
    }
  }
  return cube;
}

void write_envi(const HyperspectralCube& cube, const std::string& header_path) {
  cube.validate();
  const std::string raw = raw_path_for(header_path);
  {
    std::ofstream hf(header_path);
    if (!hf) throw IoError("cannot write ENVI header: " + header_path);
    hf << "ENVI\n";
    hf << "samples = " << cube.w << "\n";
    hf << "lines = " << cube.h << "\n";
    hf << "bands = " << cube.s << "\n";
    hf << "header offset = 0\n";
    hf << "file type = ENVI Standard\n";
    hf << "data type = 4\n";
    hf << "interleave = bsq\n";
    hf << "byte order = 0\n";
    hf << "wavelength = {";
    for (int b = 0; b < cube.s; ++b) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "%.9g", cube.wavelengths_nm[static_cast<size_t>(b)]);
      hf << (b ? ", " : "") << buf;
    }
    hf << "}\n";
    if (!hf) throw IoError("failed writing ENVI header: " + header_path);
  }
  std::vector<unsigned char> bytes(static_cast<size_t>(cube.h) * cube.w * cube.s * 4);
  const int64_t plane = static_cast<int64_t>(cube.h) * cube.w;
  for (int b = 0; b < cube.s; ++b) {
    for (int y = 0; y < cube.h; ++y) {
      for (int x = 0; x < cube.w; ++x) {
        store_le_float(cube.at(y, x, b), bytes.data() + (b * plane + static_cast<int64_t>(y) * cube.w + x) * 4);
      }
    }
  }
  std::ofstream rf(raw, std::ios::binary);
  if (!rf) throw IoError("cannot write ENVI raw: " + raw);
  rf.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!rf) throw IoError("failed writing ENVI raw: " + raw);
}

SegmentationMask read_mask_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open PGM mask: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw FormatError("mask is not binary PGM (P5): " + path);
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w < 1 || h < 1 || maxval < 1 || maxval > 255) throw FormatError("bad PGM dimensions in " + path);
  in.get();  // single whitespace after maxval
  SegmentationMask mask;
  mask.w = w;
  mask.h = h;
  std::vector<unsigned char> bytes(static_cast<size_t>(w) * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw IntegrityError("PGM pixel data truncated in " + path);
  mask.data.resize(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) mask.data[i] = bytes[i] >= 128 ? 1 : 0;
  return mask;
}

void write_mask_pgm(const SegmentationMask& mask, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write PGM mask: " + path);
  out << "P5\n" << mask.w << " " << mask.h << "\n255\n";
  std::vector<unsigned char> bytes(mask.data.size());
  for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing PGM mask: " + path);
}

std::vector<SceneRecord> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest: " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty manifest: " + path);
  std::vector<SceneRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    SceneRecord r;
    auto field = [&](std::string& dst) {
      if (!std::getline(is, dst, ',')) throw FormatError("manifest row with missing columns: " + line);
    };
    field(r.scene_id);
    field(r.patient_id);
    field(r.cube_path);
    if (!std::getline(is, r.mask_path)) throw FormatError("manifest row with missing columns: " + line);
    if (r.patient_id.empty()) throw FormatError("manifest row with empty patient_id: " + line);
    records.push_back(std::move(r));
  }
  return records;
}

void write_manifest(const std::vector<SceneRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path);
  out << "scene_id,patient_id,cube_path,mask_path\n";
  for (const auto& r : records) out << r.scene_id << "," << r.patient_id << "," << r.cube_path << "," << r.mask_path << "\n";
}

namespace {

int nearest_band(const std::vector<double>& wavelengths, double target) {
  int best = 0;
  double best_dist = std::abs(wavelengths[0] - target);
  for (size_t i = 1; i < wavelengths.size(); ++i) {
    const double d = std::abs(wavelengths[i] - target);
    if (d < best_dist) {  // strict: ties keep the lower wavelength
      best_dist = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

}  // namespace

std::vector<float> pseudo_color(const HyperspectralCube& cube) {
  cube.validate();
  const int bb = nearest_band(cube.wavelengths_nm, 420.0);
  const int gb = nearest_band(cube.wavelengths_nm, 495.0);
  const int rb = nearest_band(cube.wavelengths_nm, 625.0);
  std::vector<float> out(static_cast<size_t>(cube.h) * cube.w * 3);
  for (int y = 0; y < cube.h; ++y) {
    for (int x = 0; x < cube.w; ++x) {
      const size_t o = (static_cast<size_t>(y) * cube.w + x) * 3;
      out[o + 0] = cube.at(y, x, bb);
      out[o + 1] = cube.at(y, x, gb);
      out[o + 2] = cube.at(y, x, rb);
    }
  }
  return out;
}

HyperspectralCube pseudo_color_cube(const HyperspectralCube& cube) {
  HyperspectralCube out;
  out.h = cube.h;
  out.w = cube.w;
  out.s = 3;
  out.data = pseudo_color(cube);
  out.wavelengths_nm = {420.0, 495.0, 625.0};
  out.scene_id = cube.scene_id;
  out.patient_id = cube.patient_id;
  return out;
}

DatasetSplit patient_split(const std::vector<SceneRecord>& records, const std::array<int, 3>& ratios, uint64_t seed) {
  std::set<std::string> unique;
  for (const auto& r : records) unique.insert(r.patient_id);
  if (unique.size() < 5) {
    throw InsufficientDataError("patient_split needs at least 5 distinct patients, got " + std::to_string(unique.size()));
  }
  std::vector<std::string> patients(unique.begin(), unique.end());

  // Explicit Fisher-Yates so the shuffle is identical across standard
  // library implementations.
  Rng rng(seed);
  for (size_t i = patients.size() - 1; i > 0; --i) {
    std::uniform_int_distribution<size_t> pick(0, i);
    std::swap(patients[i], patients[pick(rng)]);
  }

  const int total_ratio = ratios[0] + ratios[1] + ratios[2];
  const size_t n = patients.size();
  std::array<size_t, 3> counts{};
  std::array<double, 3> frac{};
  size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = static_cast<double>(n) * ratios[static_cast<size_t>(i)] / total_ratio;
    counts[static_cast<size_t>(i)] = static_cast<size_t>(exact);
    frac[static_cast<size_t>(i)] = exact - static_cast<double>(counts[static_cast<size_t>(i)]);
    assigned += counts[static_cast<size_t>(i)];
  }
  while (assigned < n) {  // largest remainder, ties resolved train > val > test
    int best = 0;
    for (int i = 1; i < 3; ++i) {
      if (frac[static_cast<size_t>(i)] > frac[static_cast<size_t>(best)]) best = i;
    }
    counts[static_cast<size_t>(best)]++;
    frac[static_cast<size_t>(best)] = -1.0;
    assigned++;
  }

  std::map<std::string, int> partition_of;
  size_t pos = 0;
  for (int part = 0; part < 3; ++part) {
    for (size_t i = 0; i < counts[static_cast<size_t>(part)]; ++i) partition_of[patients[pos++]] = part;
  }

  DatasetSplit split;
  split.seed = seed;
  for (const auto& r : records) {
    switch (partition_of.at(r.patient_id)) {
      case 0: split.train.push_back(r); break;
      case 1: split.val.push_back(r); break;
      default: split.test.push_back(r); break;
    }
  }
  return split;
}

namespace {

// Separable Gaussian blur on a [h x w] field, truncated at 3 sigma.
void gaussian_smooth(std::vector<double>& field, int h, int w, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[static_cast<size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= sum;
  std::vector<double> tmp(field.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int xx = std::clamp(x + i, 0, w - 1);
        acc += kernel[static_cast<size_t>(i + radius)] * field[static_cast<size_t>(y) * w + xx];
      }
      tmp[static_cast<size_t>(y) * w + x] = acc;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int yy = std::clamp(y + i, 0, h - 1);
        acc += kernel[static_cast<size_t>(i + radius)] * tmp[static_cast<size_t>(yy) * w + x];
      }
      field[static_cast<size_t>(y) * w + x] = acc;
    }
  }
}

}  // namespace

void augment(const HyperspectralCube& cube, const SegmentationMask& mask, const AugmentationSpec& spec, Rng& rng,
             HyperspectralCube& out_cube, SegmentationMask& out_mask) {
  spec.validate();
  if (cube.h != mask.h || cube.w != mask.w) throw ShapeError("augment: cube/mask shape mismatch");
  const int h = cube.h, w = cube.w, s = cube.s;

  double theta = 0.0, factor = 1.0;
  if (spec.rotate_enabled) {
    std::uniform_real_distribution<double> d(spec.rotation_min_deg, spec.rotation_max_deg);
    theta = d(rng) * M_PI / 180.0;
  }
  if (spec.scale_enabled) {
    std::uniform_real_distribution<double> d(spec.scale_min, spec.scale_max);
    factor = d(rng);
  }
  std::vector<double> dx, dy;
  if (spec.elastic_enabled) {
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    dx.resize(static_cast<size_t>(h) * w);
    dy.resize(dx.size());
    for (auto& v : dx) v = d(rng);
    for (auto& v : dy) v = d(rng);
    gaussian_smooth(dx, h, w, spec.elastic_sigma);
    gaussian_smooth(dy, h, w, spec.elastic_sigma);
    for (auto& v : dx) v *= spec.elastic_alpha;
    for (auto& v : dy) v *= spec.elastic_alpha;
  }

  out_cube = cube;
  out_mask = mask;
  if (!spec.any_enabled()) return;

  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const double cos_t = std::cos(-theta), sin_t = std::sin(-theta);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Inverse map: elastic displacement, then un-rotate, then un-scale.
      double sx = x, sy = y;
      if (spec.elastic_enabled) {
        sx += dx[static_cast<size_t>(y) * w + x];
        sy += dy[static_cast<size_t>(y) * w + x];
      }
      const double rxc = sx - cx, ryc = sy - cy;
      double ux = cos_t * rxc - sin_t * ryc;
      double uy = sin_t * rxc + cos_t * ryc;
      ux /= factor;
      uy /= factor;
      const double fx = ux + cx, fy = uy + cy;

      const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
      const double ax = fx - x0, ay = fy - y0;
      auto in_bounds = [&](int xx, int yy) { return xx >= 0 && xx < w && yy >= 0 && yy < h; };
      for (int b = 0; b < s; ++b) {
        auto tap = [&](int xx, int yy) -> double { return in_bounds(xx, yy) ? cube.at(yy, xx, b) : 0.0; };
        const double v = (1 - ax) * (1 - ay) * tap(x0, y0) + ax * (1 - ay) * tap(x0 + 1, y0) +
                         (1 - ax) * ay * tap(x0, y0 + 1) + ax * ay * tap(x0 + 1, y0 + 1);
        out_cube.at(y, x, b) = static_cast<float>(v);
      }
      const int nx = static_cast<int>(std::lround(fx)), ny = static_cast<int>(std::lround(fy));
      out_mask.at(y, x) = in_bounds(nx, ny) ? mask.at(ny, nx) : 0;
    }
  }
}

std::pair<HyperspectralCube, SegmentationMask> synth_scene(const SynthParams& params, Rng& rng) {
  if (params.h < 8 || params.w < 8 || params.s < 2) throw ParameterError("synth_scene: dims must satisfy H,W >= 8, S >= 2");
  if (params.n_blobs < 0) throw ParameterError("synth_scene: n_blobs must be >= 0");
  if (params.band_correlation < 0.0 || params.band_correlation >= 1.0) {
    throw ParameterError("synth_scene: band_correlation must lie in [0, 1)");
  }
  if (params.noise_sigma < 0.0) throw ParameterError("synth_scene: noise_sigma must be >= 0");

  const int h = params.h, w = params.w, s = params.s;
  HyperspectralCube cube;
  cube.h = h;
  cube.w = w;
  cube.s = s;
  cube.data.resize(static_cast<size_t>(h) * w * s);
  cube.wavelengths_nm.resize(static_cast<size_t>(s));
  const double lambda_lo = 450.0, lambda_hi = 750.0;
  for (int b = 0; b < s; ++b) cube.wavelengths_nm[static_cast<size_t>(b)] = lambda_lo + (lambda_hi - lambda_lo) * b / (s - 1);

  SegmentationMask mask;
  mask.h = h;
  mask.w = w;
  mask.data.assign(static_cast<size_t>(h) * w, 0);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double rmin = std::min(h, w) / 10.0, rmax = std::min(h, w) / 4.0;
  for (int blob = 0; blob < params.n_blobs; ++blob) {
    const double bx = (0.2 + 0.6 * unit(rng)) * w;
    const double by = (0.2 + 0.6 * unit(rng)) * h;
    const double a = rmin + (rmax - rmin) * unit(rng);
    const double b2 = rmin + (rmax - rmin) * unit(rng);
    const double phi = M_PI * unit(rng);
    const double cp = std::cos(phi), sp = std::sin(phi);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double ddx = x - bx, ddy = y - by;
        const double ex = cp * ddx + sp * ddy;
        const double ey = -sp * ddx + cp * ddy;
        if ((ex / a) * (ex / a) + (ey / b2) * (ey / b2) <= 1.0) mask.at(y, x) = 1;
      }
    }
  }
  size_t area = 0;
  for (uint8_t m : mask.data) area += m;
  if (area > 0.9 * h * w) throw ParameterError("synth_scene: blob area exceeds 90% of the image");

  // Two Gaussian-bump reflectance curves; classes peak at different
  // wavelengths (positive early, negative late in the range).
  const double sigma_l = (lambda_hi - lambda_lo) / 6.0;
  const double mu_pos = lambda_lo + (lambda_hi - lambda_lo) / 3.0;
  const double mu_neg = lambda_lo + 2.0 * (lambda_hi - lambda_lo) / 3.0;
  auto curve = [&](double lambda, double mu) { return 0.25 + 0.5 * std::exp(-0.5 * (lambda - mu) * (lambda - mu) / (sigma_l * sigma_l)); };
  const double peak_gap = std::abs(curve(mu_pos, mu_pos) - curve(mu_pos, mu_neg));
  if (3.0 * params.noise_sigma > peak_gap) {
    throw ParameterError("synth_scene: noise_sigma too large for a 3-sigma class separation at the peak");
  }

  std::normal_distribution<double> gauss(0.0, 1.0);
  const double rho = params.band_correlation;
  const double innov = std::sqrt(1.0 - rho * rho);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double mu = mask.at(y, x) ? mu_pos : mu_neg;
      double n = 0.0;
      for (int b = 0; b < s; ++b) {
        if (params.noise_sigma > 0.0) {
          n = b == 0 ? gauss(rng) : rho * n + innov * gauss(rng);
        }
        const double v = curve(cube.wavelengths_nm[static_cast<size_t>(b)], mu) + params.noise_sigma * n;
        cube.at(y, x, b) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return {std::move(cube), std::move(mask)};
}

HyperspectralCube normalize_cube(const HyperspectralCube& cube) {
  cube.validate();
  HyperspectralCube out = cube;
  for (int b = 0; b < cube.s; ++b) {
    float lo = cube.at(0, 0, b), hi = lo;
    for (int y = 0; y < cube.h; ++y) {
      for (int x = 0; x < cube.w; ++x) {
        lo = std::min(lo, cube.at(y, x, b));
        hi = std::max(hi, cube.at(y, x, b));
      }
    }
    const float range = hi - lo;
    for (int y = 0; y < cube.h; ++y) {
      for (int x = 0; x < cube.w; ++x) {
        out.at(y, x, b) = range > 0.0f ? (cube.at(y, x, b) - lo) / range : 0.0f;
      }
    }
  }
  return out;
}

SegmentationMask downsample_mask_nearest(const SegmentationMask& mask, int factor) {
  if (mask.h % factor != 0 || mask.w % factor != 0) throw ShapeError("downsample_mask_nearest: factor must divide dims");
  SegmentationMask out;
  out.h = mask.h / factor;
  out.w = mask.w / factor;
  out.data.resize(static_cast<size_t>(out.h) * out.w);
  for (int y = 0; y < out.h; ++y) {
    for (int x = 0; x < out.w; ++x) out.at(y, x) = mask.at(y * factor, x * factor);
  }
  return out;
}

}  // namespace omnifuse
