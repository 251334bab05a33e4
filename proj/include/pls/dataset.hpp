#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pls/common.hpp"
#include "pls/rng.hpp"

namespace pls {

constexpr int kUnknownIdentity = -1;

enum class Provenance { Real, Generated };

struct Sample {
  Vec input;                 // feature vector, dimension D
  int identity = kUnknownIdentity;
  int camera = 0;            // in [0, A)
  Provenance provenance = Provenance::Real;
  int source_camera = -1;    // camera of the source sample, Generated only

  bool operator==(const Sample&) const = default;
};

// Immutable after construction; indices are stable for the whole run.
struct Dataset {
  std::vector<Sample> samples;
  int input_dim = 0;      // D
  int camera_count = 0;   // A
  int identity_count = 0; // C

  int size() const { return static_cast<int>(samples.size()); }

  bool operator==(const Dataset&) const = default;
};

struct OneShotSplit {
  std::vector<int> labeled;    // shots per identity
  std::vector<int> unlabeled;  // everything else
};

struct SyntheticParams {
  int identity_count = 50;        // C
  int per_identity = 8;
  int input_dim = 16;             // D
  int camera_count = 4;           // A
  double identity_spread = 10.0;  // scale of identity centers
  double camera_shift_scale = 1.0;
  double noise_scale = 0.5;
  std::uint64_t seed = 1;
};

namespace detail {

// Per-camera style: x -> (I + mild random map) * x + offset. Affine by
// construction so a feature-space translator can invert it exactly.
struct CameraStyle {
  Matrix linear;  // D x D
  Vec offset;     // D

  Vec apply(const Vec& x) const {
    const std::size_t d = offset.size();
    Vec out(d);
    for (std::size_t r = 0; r < d; ++r) {
      out[r] = dot(linear.row(r), x) + offset[r];
    }
    return out;
  }
};

inline CameraStyle make_camera_style(Rng& rng, int dim, double scale) {
  CameraStyle style;
  style.offset = rng.gaussian_vec(static_cast<std::size_t>(dim), scale);
  style.linear = Matrix(static_cast<std::size_t>(dim),
                        static_cast<std::size_t>(dim));
  const double mild = 0.1 * scale / std::sqrt(static_cast<double>(dim));
  for (std::size_t r = 0; r < style.linear.rows; ++r) {
    for (std::size_t c = 0; c < style.linear.cols; ++c) {
      style.linear.at(r, c) = (r == c ? 1.0 : 0.0) + rng.gaussian() * mild;
    }
  }
  return style;
}

}  // namespace detail

// Gaussian identity clusters pushed through a per-camera affine style.
// Samples of one identity are spread round-robin over cameras.
inline Dataset generate_synthetic(const SyntheticParams& p) {
  require(p.identity_count >= 2, "generate_synthetic: C must be >= 2");
  require(p.per_identity >= 2, "generate_synthetic: per_identity must be >= 2");
  require(p.input_dim >= 2, "generate_synthetic: D must be >= 2");
  require(p.camera_count >= 2, "generate_synthetic: A must be >= 2");
  require(p.identity_spread > 0.0 && p.camera_shift_scale > 0.0 &&
              p.noise_scale > 0.0,
          "generate_synthetic: all scales must be > 0");

  Rng rng(mix_seed(p.seed, 0x5d47a));
  std::vector<detail::CameraStyle> styles;
  styles.reserve(static_cast<std::size_t>(p.camera_count));
  for (int a = 0; a < p.camera_count; ++a) {
    styles.push_back(
        detail::make_camera_style(rng, p.input_dim, p.camera_shift_scale));
  }

  Dataset ds;
  ds.input_dim = p.input_dim;
  ds.camera_count = p.camera_count;
  ds.identity_count = p.identity_count;
  ds.samples.reserve(static_cast<std::size_t>(p.identity_count) *
                     static_cast<std::size_t>(p.per_identity));
  for (int i = 0; i < p.identity_count; ++i) {
    const Vec center = rng.gaussian_vec(
        static_cast<std::size_t>(p.input_dim), p.identity_spread);
    for (int j = 0; j < p.per_identity; ++j) {
      const int camera = j % p.camera_count;
      Vec latent = rng.gaussian_vec(
          static_cast<std::size_t>(p.input_dim), p.noise_scale);
      for (std::size_t k = 0; k < latent.size(); ++k) latent[k] += center[k];
      Sample s;
      s.input = styles[static_cast<std::size_t>(camera)].apply(latent);
      s.identity = i;
      s.camera = camera;
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

// Selects `shots` samples per identity uniformly at random; camera ids are
// not consulted. The remainder becomes the unlabeled pool.
inline OneShotSplit split_one_shot(const Dataset& ds, int shots,
                                   std::uint64_t seed) {
  require(shots >= 1, "split_one_shot: shots must be >= 1");

  std::map<int, std::vector<int>> by_identity;
  for (int idx = 0; idx < ds.size(); ++idx) {
    const int id = ds.samples[static_cast<std::size_t>(idx)].identity;
    if (id != kUnknownIdentity) by_identity[id].push_back(idx);
  }
  for (const auto& [id, members] : by_identity) {
    if (static_cast<int>(members.size()) < shots) {
      throw ValidationError("split_one_shot: identity " + std::to_string(id) +
                            " has " + std::to_string(members.size()) +
                            " samples, fewer than shots=" +
                            std::to_string(shots));
    }
  }

  Rng rng(mix_seed(seed, 0x517f7));
  OneShotSplit split;
  std::vector<bool> labeled(static_cast<std::size_t>(ds.size()), false);
  for (const auto& [id, members] : by_identity) {
    const auto picked = rng.sample_without_replacement(
        members.size(), static_cast<std::size_t>(shots));
    for (const auto k : picked) {
      labeled[static_cast<std::size_t>(members[k])] = true;
    }
  }
  for (int idx = 0; idx < ds.size(); ++idx) {
    if (labeled[static_cast<std::size_t>(idx)]) {
      split.labeled.push_back(idx);
    } else {
      split.unlabeled.push_back(idx);
    }
  }
  return split;
}

namespace detail {

// %.17g survives a save/load round trip bit-for-bit on IEEE doubles.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Text format: header "D A C", then one record per line:
//   identity camera provenance v_1 ... v_D
// provenance is R or G:<source_camera>; '#' lines are comments.
inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_dataset: cannot open " + path);
  out << ds.input_dim << ' ' << ds.camera_count << ' ' << ds.identity_count
      << '\n';
  for (const auto& s : ds.samples) {
    out << s.identity << ' ' << s.camera << ' ';
    if (s.provenance == Provenance::Real) {
      out << 'R';
    } else {
      out << "G:" << s.source_camera;
    }
    for (const double v : s.input) out << ' ' << detail::format_double(v);
    out << '\n';
  }
  if (!out) throw IoError("save_dataset: write failed for " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_dataset: cannot open " + path);

  Dataset ds;
  std::string line;
  int line_no = 0;
  bool have_header = false;

  auto fail = [&](const std::string& msg) -> void {
    throw ValidationError("load_dataset: " + path + ":" +
                          std::to_string(line_no) + ": " + msg);
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    if (!have_header) {
      if (!(ss >> ds.input_dim >> ds.camera_count >> ds.identity_count)) {
        fail("malformed header, expected 'D A C'");
      }
      std::string extra;
      if (ss >> extra) fail("trailing tokens after header");
      if (ds.input_dim < 1 || ds.camera_count < 1 || ds.identity_count < 1) {
        fail("header values must be positive");
      }
      have_header = true;
      continue;
    }

    Sample s;
    std::string prov;
    if (!(ss >> s.identity >> s.camera >> prov)) {
      fail("expected 'identity camera provenance v_1 ... v_D'");
    }
    if (s.identity != kUnknownIdentity &&
        (s.identity < 0 || s.identity >= ds.identity_count)) {
      fail("identity " + std::to_string(s.identity) + " out of range [0, " +
           std::to_string(ds.identity_count) + ")");
    }
    if (s.camera < 0 || s.camera >= ds.camera_count) {
      fail("camera " + std::to_string(s.camera) + " out of range [0, " +
           std::to_string(ds.camera_count) + ")");
    }
    if (prov == "R") {
      s.provenance = Provenance::Real;
    } else if (prov.rfind("G:", 0) == 0) {
      s.provenance = Provenance::Generated;
      try {
        s.source_camera = std::stoi(prov.substr(2));
      } catch (const std::exception&) {
        fail("malformed provenance '" + prov + "'");
      }
      if (s.source_camera < 0 || s.source_camera >= ds.camera_count) {
        fail("source camera " + std::to_string(s.source_camera) +
             " out of range");
      }
    } else {
      fail("malformed provenance '" + prov + "', expected R or G:<camera>");
    }
    s.input.reserve(static_cast<std::size_t>(ds.input_dim));
    double v = 0.0;
    while (ss >> v) s.input.push_back(v);
    if (!ss.eof()) fail("non-numeric feature value");
    if (static_cast<int>(s.input.size()) != ds.input_dim) {
      fail("expected " + std::to_string(ds.input_dim) + " feature values, got " +
           std::to_string(s.input.size()));
    }
    ds.samples.push_back(std::move(s));
  }
  line_no = 0;
  if (!have_header) fail("empty file, missing header");

  std::vector<bool> seen(static_cast<std::size_t>(ds.identity_count), false);
  for (const auto& s : ds.samples) {
    if (s.identity != kUnknownIdentity) {
      seen[static_cast<std::size_t>(s.identity)] = true;
    }
  }
  for (int i = 0; i < ds.identity_count; ++i) {
    if (!seen[static_cast<std::size_t>(i)]) {
      throw ValidationError("load_dataset: " + path + ": identity " +
                            std::to_string(i) + " has no samples");
    }
  }
  return ds;
}

}  // namespace pls
