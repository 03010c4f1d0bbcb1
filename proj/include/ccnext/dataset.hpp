#pragma once

// Dataset manifests and on-disk samples.
//
// One record per line, tab-separated key=value fields:
//   left, right, fx, cx, cy, baseline_m  (required)
//   gt_disparity, id                     (optional)
// Relative paths resolve against the manifest's directory.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ccnext/config.hpp"
#include "ccnext/image_io.hpp"
#include "ccnext/synthetic.hpp"

namespace ccnext {

struct SampleDescriptor {
  std::string id;
  std::filesystem::path left;
  std::filesystem::path right;
  std::optional<std::filesystem::path> gt_disparity;
  double fx = 0;
  double cx = 0;
  double cy = 0;
  double baseline_m = 0;
};

inline std::vector<SampleDescriptor> load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("manifest: cannot open '" + path + "'");
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  std::vector<SampleDescriptor> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    std::map<std::string, std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) {
      if (field.empty()) continue;
      const auto eq = field.find('=');
      if (eq == std::string::npos || eq == 0) throw IoError(where + ": malformed field '" + field + "'");
      if (!f.emplace(field.substr(0, eq), field.substr(eq + 1)).second)
        throw IoError(where + ": duplicate field '" + field.substr(0, eq) + "'");
    }
    auto need = [&](const std::string& key) -> const std::string& {
      auto it = f.find(key);
      if (it == f.end()) throw IoError(where + ": missing field '" + key + "'");
      return it->second;
    };
    auto number = [&](const std::string& key) {
      const std::string& s = need(key);
      try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument("trailing");
        return v;
      } catch (const std::exception&) {
        throw IoError(where + ": field '" + key + "' is not a number: '" + s + "'");
      }
    };
    auto file = [&](const std::string& key) {
      std::filesystem::path p = need(key);
      if (p.is_relative()) p = base / p;
      if (!std::filesystem::exists(p)) throw IoError(where + ": " + key + " file '" + p.string() + "' does not exist");
      return p;
    };
    SampleDescriptor d;
    d.left = file("left");
    d.right = file("right");
    d.fx = number("fx");
    d.cx = number("cx");
    d.cy = number("cy");
    d.baseline_m = number("baseline_m");
    if (!(d.fx > 0)) throw IoError(where + ": fx must be > 0");
    if (!(d.baseline_m > 0)) throw IoError(where + ": baseline_m must be > 0");
    if (!(d.cx >= 0) || !(d.cy >= 0)) throw IoError(where + ": cx and cy must be >= 0");
    if (f.count("gt_disparity")) d.gt_disparity = file("gt_disparity");
    d.id = f.count("id") ? f["id"] : d.left.stem().string();
    for (const auto& [k, v] : f)
      if (k != "left" && k != "right" && k != "fx" && k != "cx" && k != "cy" && k != "baseline_m" &&
          k != "gt_disparity" && k != "id")
        throw IoError(where + ": unknown field '" + k + "'");
    out.push_back(std::move(d));
  }
  return out;
}

/// Formats one manifest record.
inline std::string manifest_line(const SampleDescriptor& d) {
  std::ostringstream os;
  os.precision(17);
  os << "id=" << d.id << "\tleft=" << d.left.string() << "\tright=" << d.right.string() << "\tfx=" << d.fx
     << "\tcx=" << d.cx << "\tcy=" << d.cy << "\tbaseline_m=" << d.baseline_m;
  if (d.gt_disparity) os << "\tgt_disparity=" << d.gt_disparity->string();
  return os.str();
}

/// Ground truth from a 16-bit PNG (value / 256, 0 invalid) or a PFM map
/// (non-finite or nonpositive entries invalid, stored as 0).
template <class T>
Tensor<T> load_disparity(const std::filesystem::path& path) {
  if (path.extension() == ".pfm") {
    Tensor<T> d = read_pfm<T>(path.string());
    for (auto& v : d.mutable_values())
      if (!std::isfinite(v) || v <= T(0)) v = T(0);
    return d;
  }
  return decode_disparity16<T>(read_png_gray16(path.string()));
}

template <class T>
SamplePair<T> load_sample(const SampleDescriptor& d) {
  SamplePair<T> s;
  s.id = d.id;
  s.left = read_png_rgb<T>(d.left.string());
  s.right = read_png_rgb<T>(d.right.string());
  if (s.left.shape() != s.right.shape())
    throw ShapeError("sample '" + d.id + "': left " + to_string(s.left.shape()) + " and right " +
                     to_string(s.right.shape()) + " differ");
  s.camera = StereoCamera{d.fx, d.cx, d.cy, d.baseline_m, s.left.dim(3), s.left.dim(2)};
  s.camera.validate();
  if (d.gt_disparity) {
    Tensor<T> gt = load_disparity<T>(*d.gt_disparity);
    if (gt.dim(2) != s.left.dim(2) || gt.dim(3) != s.left.dim(3))
      throw ShapeError("sample '" + d.id + "': ground truth " + to_string(gt.shape()) + " does not match image " +
                       to_string(s.left.shape()));
    s.gt_disparity = gt;
  }
  return s;
}

inline StereoCamera read_camera_file(const std::string& path) {
  const auto kv = KeyValueFile::load(path);
  kv.reject_unknown({"fx", "cx", "cy", "baseline_m", "width", "height"});
  StereoCamera c{kv.get_double("fx"),
                 kv.get_double("cx"),
                 kv.get_double("cy"),
                 kv.get_double("baseline_m"),
                 static_cast<int>(kv.get_int("width")),
                 static_cast<int>(kv.get_int("height"))};
  c.validate();
  return c;
}

inline void write_camera_file(const std::string& path, const StereoCamera& c) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write camera file '" + path + "'");
  os.precision(17);
  os << "fx=" << c.fx << "\ncx=" << c.cx << "\ncy=" << c.cy << "\nbaseline_m=" << c.baseline_m << "\nwidth=" << c.width
     << "\nheight=" << c.height << "\n";
}

}  // namespace ccnext
