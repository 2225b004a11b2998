// SPDX-License-Identifier: Apache-2.0
#include "surfcap/bundle.hpp"

#include "surfcap/binary_io.hpp"
#include "surfcap/error.hpp"

#include "json.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace surfcap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

std::string frame_name(std::size_t t, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05zu.%s", t, ext);
  return buf;
}

std::string side_name(SourceKind k) { return k == SourceKind::HandLeft ? "left" : "right"; }

SourceKind side_from_name(const std::string& s) {
  if (s == "left") return SourceKind::HandLeft;
  if (s == "right") return SourceKind::HandRight;
  throw Error(ErrorCode::ParseError, "hand side must be left or right, got '" + s + "'");
}

std::string object_file(std::size_t k) {
  return k == 0 ? "seed.ply" : "seed_" + std::to_string(k) + ".ply";
}

std::string format_float(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(static_cast<float>(v)));
  return buf;
}

json camera_to_json(const std::string& name, const Camera& c) {
  std::vector<double> rot;
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) rot.push_back(c.world_to_cam.rotation(r, k));
  const Vec3& t = c.world_to_cam.translation;
  return {{"name", name},   {"width", c.width}, {"height", c.height},
          {"fx", c.fx},     {"fy", c.fy},       {"cx", c.cx},
          {"cy", c.cy},     {"rotation", rot},  {"translation", {t[0], t[1], t[2]}}};
}

Camera camera_from_json(const json& j) {
  Camera c;
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  const auto rot = j.at("rotation").get<std::vector<double>>();
  const auto t = j.at("translation").get<std::vector<double>>();
  if (rot.size() != 9 || t.size() != 3)
    throw Error(ErrorCode::ParseError, "camera rotation needs 9 and translation 3 values");
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) c.world_to_cam.rotation(r, k) = rot[r * 3 + k];
  c.world_to_cam.translation = {t[0], t[1], t[2]};
  c.validate();
  return c;
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::MissingFile, "missing " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::MissingFile, "cannot write " + path.string());
  os << text;
}

void write_obj(const fs::path& path, const TemplateSequence& t) {
  std::ostringstream os;
  for (const Vec3& v : t.frames.at(0).vertices)
    os << "v " << format_float(v[0]) << ' ' << format_float(v[1]) << ' ' << format_float(v[2]) << '\n';
  for (const Face& f : t.topology.faces)
    os << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  write_text(path, os.str());
}

Topology read_obj(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::MissingFile, "missing " + path.string());
  Topology topo;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      ++topo.vertex_count;
    } else if (tag == "f") {
      std::vector<long long> idx;
      std::string tok;
      while (ls >> tok) {
        // Accept "i", "i/t" and "i/t/n"; only the position index matters.
        try {
          idx.push_back(std::stoll(tok.substr(0, tok.find('/'))));
        } catch (const std::exception&) {
          throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(lineno) + ": bad face index");
        }
      }
      if (idx.size() != 3)
        throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(lineno) + ": faces must be triangles");
      Face f;
      for (int k = 0; k < 3; ++k) {
        if (idx[k] < 1 || idx[k] > 0xffffffffLL)
          throw Error(ErrorCode::TopologyOutOfRange,
                      path.string() + ":" + std::to_string(lineno) + ": face index " + std::to_string(idx[k]));
        f[k] = static_cast<std::uint32_t>(idx[k] - 1);
      }
      topo.faces.push_back(f);
    }
  }
  try {
    topo.validate();
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
  return topo;
}

void write_frames_bin(const fs::path& path, const TemplateSequence& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::MissingFile, "cannot write " + path.string());
  for (const auto& frame : t.frames) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(frame.vertices.size()));
    for (const Vec3& v : frame.vertices)
      for (int k = 0; k < 3; ++k) write_le<float>(os, static_cast<float>(v[k]));
  }
}

std::vector<TemplateFrame> read_frames_bin(const fs::path& path, std::size_t frames) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::MissingFile, "missing " + path.string());
  std::vector<TemplateFrame> out;
  try {
    for (std::size_t t = 0; t < frames; ++t) {
      TemplateFrame f;
      f.t = t;
      const auto n = read_le<std::uint32_t>(is);
      f.vertices.resize(n);
      for (auto& v : f.vertices)
        for (int k = 0; k < 3; ++k) v[k] = read_le<float>(is);
      out.push_back(std::move(f));
    }
  } catch (const Error&) {
    throw Error(ErrorCode::GridIncomplete,
                path.string() + ": holds fewer than " + std::to_string(frames) + " frames (frame " +
                    std::to_string(out.size()) + " missing)");
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw Error(ErrorCode::ParseError, path.string() + ": trailing data after the last frame");
  return out;
}

void write_ply(const fs::path& path, const ObjectSeed& seed) {
  std::ostringstream os;
  const bool colored = !seed.colors.empty();
  os << "ply\nformat ascii 1.0\nelement vertex " << seed.points.size()
     << "\nproperty float x\nproperty float y\nproperty float z\n";
  if (colored) os << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  os << "end_header\n";
  for (std::size_t i = 0; i < seed.points.size(); ++i) {
    const Vec3& p = seed.points[i];
    os << format_float(p[0]) << ' ' << format_float(p[1]) << ' ' << format_float(p[2]);
    if (colored)
      for (int k = 0; k < 3; ++k)
        os << ' ' << static_cast<int>(std::lround(std::clamp(seed.colors[i][k], 0.0, 1.0) * 255.0));
    os << '\n';
  }
  write_text(path, os.str());
}

ObjectSeed read_ply(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::MissingFile, "missing " + path.string());
  auto fail = [&](const std::string& why) { throw Error(ErrorCode::ParseError, path.string() + ": " + why); };
  std::string line;
  if (!std::getline(is, line) || line != "ply") fail("not a PLY file");
  std::size_t count = 0;
  std::vector<std::string> props, types;
  bool in_vertex = false, ascii = false;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "end_header") break;
    if (tag == "format") {
      std::string f;
      ls >> f;
      ascii = f == "ascii";
    } else if (tag == "element") {
      std::string name;
      ls >> name;
      in_vertex = name == "vertex";
      if (in_vertex) ls >> count;
    } else if (tag == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
      types.push_back(type);
    }
  }
  if (!ascii) fail("only ASCII PLY is supported");
  auto find = [&](const std::string& n) {
    const auto it = std::find(props.begin(), props.end(), n);
    return it == props.end() ? -1 : static_cast<int>(it - props.begin());
  };
  const int ix = find("x"), iy = find("y"), iz = find("z");
  const int ir = find("red"), ig = find("green"), ib = find("blue");
  if (ix < 0 || iy < 0 || iz < 0) fail("vertex element needs x, y, z");
  const bool colored = ir >= 0 && ig >= 0 && ib >= 0;
  ObjectSeed seed;
  std::vector<double> vals(props.size());
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(is, line)) fail("expected " + std::to_string(count) + " vertices");
    std::istringstream ls(line);
    for (std::size_t k = 0; k < vals.size(); ++k) {
      if (!(ls >> vals[k])) fail("bad vertex line " + std::to_string(i));
      if (types[k] == "float" || types[k] == "float32") vals[k] = static_cast<float>(vals[k]);
    }
    seed.points.emplace_back(vals[ix], vals[iy], vals[iz]);
    if (colored) seed.colors.emplace_back(vals[ir] / 255.0, vals[ig] / 255.0, vals[ib] / 255.0);
  }
  return seed;
}

}  // namespace

void SceneBundle::validate() const {
  auto fail = [](ErrorCode c, const std::string& m) { throw Error(c, m); };
  if (frame_count == 0) fail(ErrorCode::EmptySequence, "bundle has no frames");
  if (cameras.size() != view_names.size())
    fail(ErrorCode::LengthMismatch, "camera and view name counts differ");
  if (images.size() != cameras.size() || masks.size() != cameras.size())
    fail(ErrorCode::GridIncomplete, "image or mask grid does not cover every view");
  for (std::size_t v = 0; v < cameras.size(); ++v) {
    cameras[v].validate();
    for (std::size_t t = 0; t < frame_count; ++t) {
      const std::string where = "view " + view_names[v] + " frame " + std::to_string(t);
      if (t >= images[v].size() || t >= masks[v].size())
        fail(ErrorCode::GridIncomplete, "missing image or mask for " + where);
      const Image& img = images[v][t];
      const Image& m = masks[v][t];
      if (img.width != cameras[v].width || img.height != cameras[v].height || img.channels != 3)
        fail(ErrorCode::DimensionMismatch, "image size differs from camera for " + where);
      if (m.width != img.width || m.height != img.height || m.channels != 1)
        fail(ErrorCode::DimensionMismatch, "mask size differs from image for " + where);
    }
    if (images[v].size() != frame_count || masks[v].size() != frame_count)
      fail(ErrorCode::GridIncomplete, "view " + view_names[v] + " has extra frames");
  }
  if (hand_names.size() != hands.size()) fail(ErrorCode::LengthMismatch, "hand name count differs");
  for (std::size_t h = 0; h < hands.size(); ++h) {
    hands[h].validate();
    if (hands[h].frames.size() != frame_count)
      fail(ErrorCode::GridIncomplete, "template " + hand_names[h] + " has " +
                                          std::to_string(hands[h].frames.size()) + " frames, expected " +
                                          std::to_string(frame_count));
  }
  for (const auto& o : objects)
    if (!o.colors.empty() && o.colors.size() != o.points.size())
      fail(ErrorCode::LengthMismatch, "object seed colors do not match points");
}

void save_bundle(const SceneBundle& b, const fs::path& root) {
  b.validate();
  fs::create_directories(root);
  json manifest;
  manifest["schema_version"] = kManifestVersion;
  manifest["frame_count"] = b.frame_count;
  manifest["frame_indexing"] = "zero-based";
  manifest["views"] = b.view_names;
  manifest["hands"] = json::array();
  for (std::size_t h = 0; h < b.hands.size(); ++h) {
    std::vector<std::string> prov;
    for (const auto& f : b.hands[h].frames) prov.push_back(f.provenance);
    manifest["hands"].push_back(
        {{"name", b.hand_names[h]}, {"side", side_name(b.hands[h].side)}, {"provenance", prov}});
  }
  manifest["objects"] = b.objects.size();
  manifest["tau"] = b.meta.tau;
  manifest["units"] = b.meta.units;
  manifest["frame_rate"] = b.meta.frame_rate;
  write_text(root / "manifest.json", manifest.dump(2) + "\n");

  json cams = json::array();
  for (std::size_t v = 0; v < b.cameras.size(); ++v) cams.push_back(camera_to_json(b.view_names[v], b.cameras[v]));
  write_text(root / "cameras.json", json{{"cameras", cams}}.dump(2) + "\n");

  for (std::size_t v = 0; v < b.cameras.size(); ++v) {
    const fs::path idir = root / "images" / b.view_names[v];
    const fs::path mdir = root / "masks" / b.view_names[v];
    fs::create_directories(idir);
    fs::create_directories(mdir);
    for (std::size_t t = 0; t < b.frame_count; ++t) {
      write_ppm(idir / frame_name(t, "ppm"), b.images[v][t]);
      write_pgm(mdir / frame_name(t, "pgm"), b.masks[v][t]);
    }
  }
  for (std::size_t h = 0; h < b.hands.size(); ++h) {
    const fs::path dir = root / "template" / b.hand_names[h];
    fs::create_directories(dir);
    write_obj(dir / "topology.obj", b.hands[h]);
    write_frames_bin(dir / "frames.bin", b.hands[h]);
  }
  if (!b.objects.empty()) fs::create_directories(root / "object");
  for (std::size_t k = 0; k < b.objects.size(); ++k) write_ply(root / "object" / object_file(k), b.objects[k]);
}

SceneBundle load_bundle(const fs::path& root) {
  const json manifest = read_json(root / "manifest.json");
  SceneBundle b;
  std::vector<std::string> problems;
  ErrorCode first = ErrorCode::ParseError;
  auto record = [&](const Error& e) {
    if (problems.empty()) first = e.code();
    problems.push_back(std::string(to_string(e.code())) + ": " + e.what());
  };
  try {
    if (manifest.at("schema_version").get<int>() != kManifestVersion)
      throw Error(ErrorCode::ParseError, "unsupported manifest schema_version");
    b.frame_count = manifest.at("frame_count").get<std::size_t>();
    b.view_names = manifest.at("views").get<std::vector<std::string>>();
    b.meta.tau = manifest.value("tau", b.meta.tau);
    b.meta.units = manifest.value("units", b.meta.units);
    b.meta.frame_rate = manifest.value("frame_rate", b.meta.frame_rate);
    const json cams = read_json(root / "cameras.json").at("cameras");
    if (cams.size() != b.view_names.size())
      throw Error(ErrorCode::ParseError, "cameras.json lists " + std::to_string(cams.size()) +
                                             " cameras for " + std::to_string(b.view_names.size()) + " views");
    for (std::size_t v = 0; v < cams.size(); ++v) {
      if (cams[v].at("name").get<std::string>() != b.view_names[v])
        throw Error(ErrorCode::ParseError, "cameras.json entry " + std::to_string(v) + " is not view " + b.view_names[v]);
      b.cameras.push_back(camera_from_json(cams[v]));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, (root / "manifest.json").string() + ": " + e.what());
  }

  b.images.assign(b.view_names.size(), {});
  b.masks.assign(b.view_names.size(), {});
  for (std::size_t v = 0; v < b.view_names.size(); ++v)
    for (std::size_t t = 0; t < b.frame_count; ++t) {
      const fs::path ip = root / "images" / b.view_names[v] / frame_name(t, "ppm");
      const fs::path mp = root / "masks" / b.view_names[v] / frame_name(t, "pgm");
      const std::string where = " (view " + b.view_names[v] + ", frame " + std::to_string(t) + ")";
      for (const auto& [path, is_mask] : {std::pair{ip, false}, std::pair{mp, true}}) {
        if (!fs::exists(path)) {
          record(Error(ErrorCode::GridIncomplete, "missing " + path.string() + where));
          continue;
        }
        try {
          Image img = is_mask ? read_pgm(path) : read_ppm(path);
          if (is_mask) {
            if (img.width != b.cameras[v].width || img.height != b.cameras[v].height)
              throw Error(ErrorCode::DimensionMismatch, path.string() + " size differs from camera");
            b.masks[v].push_back(std::move(img));
          } else {
            if (img.width != b.cameras[v].width || img.height != b.cameras[v].height)
              throw Error(ErrorCode::DimensionMismatch, path.string() + " size differs from camera");
            b.images[v].push_back(std::move(img));
          }
        } catch (const Error& e) {
          record(e);
        }
      }
    }

  try {
    for (const auto& h : manifest.at("hands")) {
      const std::string name = h.at("name").get<std::string>();
      const fs::path dir = root / "template" / name;
      TemplateSequence tmpl;
      tmpl.side = side_from_name(h.at("side").get<std::string>());
      try {
        tmpl.topology = read_obj(dir / "topology.obj");
        tmpl.frames = read_frames_bin(dir / "frames.bin", b.frame_count);
        const auto prov = h.value("provenance", std::vector<std::string>{});
        for (std::size_t t = 0; t < tmpl.frames.size() && t < prov.size(); ++t) tmpl.frames[t].provenance = prov[t];
        for (std::size_t t = 0; t < tmpl.frames.size(); ++t)
          if (tmpl.frames[t].vertices.size() != tmpl.topology.vertex_count)
            throw Error(ErrorCode::ParseError, (dir / "frames.bin").string() + ": frame " + std::to_string(t) +
                                                   " has " + std::to_string(tmpl.frames[t].vertices.size()) +
                                                   " vertices, topology.obj has " +
                                                   std::to_string(tmpl.topology.vertex_count));
      } catch (const Error& e) {
        record(e);
      }
      b.hand_names.push_back(name);
      b.hands.push_back(std::move(tmpl));
    }
    const auto objects = manifest.at("objects").get<std::size_t>();
    for (std::size_t k = 0; k < objects; ++k) {
      try {
        b.objects.push_back(read_ply(root / "object" / object_file(k)));
      } catch (const Error& e) {
        record(e);
      }
    }
  } catch (const json::exception& e) {
    record(Error(ErrorCode::ParseError, (root / "manifest.json").string() + ": " + e.what()));
  }

  if (!problems.empty()) {
    std::string msg = std::to_string(problems.size()) + " problem(s) in " + root.string();
    for (const auto& p : problems) msg += "\n  " + p;
    throw Error(first, msg);
  }
  b.validate();
  return b;
}

}  // namespace surfcap
