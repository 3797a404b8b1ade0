// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#include "psimap/io.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace psimap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void ply_fail(const std::string& path, std::streampos offset, const std::string& what) {
  throw std::runtime_error("malformed PLY '" + path + "' at byte offset " +
                           std::to_string(static_cast<long long>(offset)) + ": " + what);
}

struct PlyProperty {
  std::string name;
  std::string type;
};

size_t type_size(const std::string& t) {
  if (t == "float" || t == "float32" || t == "int" || t == "int32" || t == "uint" ||
      t == "uint32") {
    return 4;
  }
  if (t == "double" || t == "float64") return 8;
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  return 0;
}

double read_binary_scalar(std::istream& in, const std::string& type) {
  if (type == "float" || type == "float32") {
    float v;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  }
  if (type == "double" || type == "float64") {
    double v;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
  }
  if (type == "uchar" || type == "uint8") {
    uint8_t v;
    in.read(reinterpret_cast<char*>(&v), 1);
    return v;
  }
  if (type == "char" || type == "int8") {
    int8_t v;
    in.read(reinterpret_cast<char*>(&v), 1);
    return v;
  }
  if (type == "short" || type == "int16") {
    int16_t v;
    in.read(reinterpret_cast<char*>(&v), 2);
    return v;
  }
  if (type == "ushort" || type == "uint16") {
    uint16_t v;
    in.read(reinterpret_cast<char*>(&v), 2);
    return v;
  }
  if (type == "int" || type == "int32") {
    int32_t v;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  }
  if (type == "uint" || type == "uint32") {
    uint32_t v;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  }
  throw std::runtime_error("unsupported PLY property type: " + type);
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: unexpected end of file");
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const uint32_t n = read_pod<uint32_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("checkpoint: unexpected end of file");
  return s;
}

void write_vecx(std::ostream& out, const VecX& v) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(v.size()));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

VecX read_vecx(std::istream& in) {
  const uint32_t n = read_pod<uint32_t>(in);
  VecX v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error("checkpoint: unexpected end of file");
  return v;
}

json camera_json(const Camera& cam) {
  json j;
  j["r_cw"] = std::vector<double>(cam.r_cw.data(), cam.r_cw.data() + 9);  // column-major
  j["t_cw"] = {cam.t_cw[0], cam.t_cw[1], cam.t_cw[2]};
  j["fx"] = cam.fx;
  j["fy"] = cam.fy;
  j["cx"] = cam.cx;
  j["cy"] = cam.cy;
  j["width"] = cam.width;
  j["height"] = cam.height;
  j["near"] = cam.near_clip;
  j["far"] = cam.far_clip;
  return j;
}

Camera camera_from_json(const json& j) {
  if (j.contains("eye")) {
    auto v3 = [&](const char* key) {
      return Vec3(j.at(key)[0].get<double>(), j.at(key)[1].get<double>(),
                  j.at(key)[2].get<double>());
    };
    return Camera::look_at(v3("eye"), v3("target"),
                           j.contains("up") ? v3("up") : Vec3(0, 1, 0), j.at("fx").get<double>(),
                           j.at("fy").get<double>(), j.at("width").get<int>(),
                           j.at("height").get<int>(),
                           j.value("near", 0.01), j.value("far", 100.0));
  }
  Mat3 r_cw;
  const auto& rv = j.at("r_cw");
  for (int i = 0; i < 9; ++i) r_cw.data()[i] = rv[i].get<double>();
  const Vec3 t_cw(j.at("t_cw")[0].get<double>(), j.at("t_cw")[1].get<double>(),
                  j.at("t_cw")[2].get<double>());
  return Camera::make(r_cw, t_cw, j.at("fx").get<double>(), j.at("fy").get<double>(),
                      j.at("cx").get<double>(), j.at("cy").get<double>(), j.at("width").get<int>(),
                      j.at("height").get<int>(), j.value("near", 0.01), j.value("far", 100.0));
}

}  // namespace

PointCloud load_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open PLY file: " + path);

  std::string line;
  if (!std::getline(in, line)) ply_fail(path, in.tellg(), "empty file");
  if (line == "ply\r") line = "ply";
  if (line != "ply") ply_fail(path, 0, "missing 'ply' magic");

  bool binary = false;
  bool format_seen = false;
  size_t vertex_count = 0;
  std::vector<PlyProperty> props;
  bool in_vertex_element = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "comment") continue;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "ascii") {
        binary = false;
      } else if (fmt == "binary_little_endian") {
        binary = true;
      } else {
        ply_fail(path, in.tellg(), "unsupported format '" + fmt + "'");
      }
      format_seen = true;
    } else if (tok == "element") {
      std::string name;
      size_t count;
      ls >> name >> count;
      in_vertex_element = name == "vertex";
      if (in_vertex_element) vertex_count = count;
    } else if (tok == "property") {
      if (!in_vertex_element) continue;
      std::string type, name;
      ls >> type >> name;
      if (type == "list") ply_fail(path, in.tellg(), "list property in vertex element");
      props.push_back({name, type});
    } else if (tok == "end_header") {
      break;
    }
  }
  if (!format_seen) ply_fail(path, in.tellg(), "missing format line");
  if (!in) ply_fail(path, in.tellg(), "truncated header");

  int ix = -1, iy = -1, iz = -1, ii = -1;
  for (size_t p = 0; p < props.size(); ++p) {
    if (props[p].name == "x") ix = static_cast<int>(p);
    if (props[p].name == "y") iy = static_cast<int>(p);
    if (props[p].name == "z") iz = static_cast<int>(p);
    if (props[p].name == "intensity") ii = static_cast<int>(p);
  }
  if (ix < 0 || iy < 0 || iz < 0) ply_fail(path, in.tellg(), "vertex element lacks x/y/z");

  PointCloud cloud;
  cloud.points.reserve(vertex_count);
  cloud.intensities.reserve(vertex_count);
  std::vector<double> row(props.size());
  for (size_t v = 0; v < vertex_count; ++v) {
    const std::streampos at = in.tellg();
    if (binary) {
      for (size_t p = 0; p < props.size(); ++p) {
        if (type_size(props[p].type) == 0) {
          ply_fail(path, at, "unsupported property type '" + props[p].type + "'");
        }
        row[p] = read_binary_scalar(in, props[p].type);
      }
      if (!in) ply_fail(path, at, "truncated vertex data at vertex " + std::to_string(v));
    } else {
      if (!std::getline(in, line)) {
        ply_fail(path, at, "truncated vertex data at vertex " + std::to_string(v));
      }
      std::istringstream ls(line);
      for (size_t p = 0; p < props.size(); ++p) {
        if (!(ls >> row[p])) {
          ply_fail(path, at, "bad ascii vertex at vertex " + std::to_string(v));
        }
      }
    }
    cloud.points.emplace_back(row[ix], row[iy], row[iz]);
    cloud.intensities.push_back(ii >= 0 ? row[ii] : 0.5);
  }
  return cloud;
}

void save_ply(const std::string& path, const PointCloud& cloud, bool binary) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write PLY file: " + path);
  out << "ply\n";
  out << (binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n");
  out << "element vertex " << cloud.points.size() << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  out << "property double intensity\n";
  out << "end_header\n";
  if (binary) {
    for (size_t i = 0; i < cloud.points.size(); ++i) {
      write_pod(out, cloud.points[i][0]);
      write_pod(out, cloud.points[i][1]);
      write_pod(out, cloud.points[i][2]);
      write_pod(out, cloud.intensities[i]);
    }
  } else {
    out.precision(17);
    for (size_t i = 0; i < cloud.points.size(); ++i) {
      out << cloud.points[i][0] << " " << cloud.points[i][1] << " " << cloud.points[i][2] << " "
          << cloud.intensities[i] << "\n";
    }
  }
}

void save_ppm(const std::string& path, const Image& img) {
  if (img.channels != 3) throw std::invalid_argument("save_ppm: need a 3-channel image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write PPM file: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(x, y, c), 0.0, 1.0);
        row[static_cast<size_t>(x) * 3 + c] = static_cast<uint8_t>(std::lround(v * 255.0));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

Image load_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open PPM file: " + path);
  std::string magic;
  int w, h, maxval;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255) throw std::runtime_error("unsupported PPM: " + path);
  in.get();  // single whitespace after maxval
  Image img(w, h, 3);
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!in) throw std::runtime_error("truncated PPM: " + path);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = row[static_cast<size_t>(x) * 3 + c] / 255.0;
    }
  }
  return img;
}

namespace {

constexpr char kRawMagic[8] = {'P', 'S', 'I', 'P', 'L', 'A', 'N', 'E'};

void save_raw_impl(const std::string& path, int w, int h, int c, uint32_t dtype, const void* data,
                   size_t bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write raw plane: " + path);
  out.write(kRawMagic, 8);
  write_pod<uint32_t>(out, static_cast<uint32_t>(w));
  write_pod<uint32_t>(out, static_cast<uint32_t>(h));
  write_pod<uint32_t>(out, static_cast<uint32_t>(c));
  write_pod<uint32_t>(out, dtype);  // 0 = f64, 1 = i32
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
}

void load_raw_header(std::ifstream& in, const std::string& path, int& w, int& h, int& c,
                     uint32_t& dtype) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kRawMagic, 8) != 0) {
    throw std::runtime_error("bad raw plane magic: " + path);
  }
  w = static_cast<int>(read_pod<uint32_t>(in));
  h = static_cast<int>(read_pod<uint32_t>(in));
  c = static_cast<int>(read_pod<uint32_t>(in));
  dtype = read_pod<uint32_t>(in);
}

}  // namespace

void save_raw(const std::string& path, const Image& plane) {
  save_raw_impl(path, plane.width, plane.height, plane.channels, 0, plane.data.data(),
                plane.data.size() * sizeof(double));
}

void save_raw(const std::string& path, const IntPlane& plane) {
  save_raw_impl(path, plane.width, plane.height, plane.channels, 1, plane.data.data(),
                plane.data.size() * sizeof(int32_t));
}

Image load_raw_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open raw plane: " + path);
  int w, h, c;
  uint32_t dtype;
  load_raw_header(in, path, w, h, c, dtype);
  if (dtype != 0) throw std::runtime_error("raw plane dtype is not f64: " + path);
  Image img(w, h, c);
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size() * sizeof(double)));
  if (!in) throw std::runtime_error("truncated raw plane: " + path);
  return img;
}

IntPlane load_raw_int(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open raw plane: " + path);
  int w, h, c;
  uint32_t dtype;
  load_raw_header(in, path, w, h, c, dtype);
  if (dtype != 1) throw std::runtime_error("raw plane dtype is not i32: " + path);
  IntPlane img(w, h, c);
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size() * sizeof(int32_t)));
  if (!in) throw std::runtime_error("truncated raw plane: " + path);
  return img;
}

namespace {
constexpr char kCkptMagic[8] = {'P', 'S', 'I', 'M', 'A', 'P', 'C', 'K'};
constexpr uint32_t kCkptVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const SceneMap& scene) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(kCkptMagic, 8);
  write_pod<uint32_t>(out, kCkptVersion);
  write_pod<uint32_t>(out, static_cast<uint32_t>(scene.vocabulary.size()));
  for (const auto& s : scene.vocabulary) write_string(out, s);
  write_pod<uint32_t>(out, static_cast<uint32_t>(scene.c_sem()));
  write_pod<uint32_t>(out, static_cast<uint32_t>(scene.c_ins()));
  write_pod<uint64_t>(out, scene.surfels.size());
  for (const Surfel& s : scene.surfels) {
    out.write(reinterpret_cast<const char*>(s.center.data()), 3 * sizeof(double));
    out.write(reinterpret_cast<const char*>(s.rotation.data()), 4 * sizeof(double));
    out.write(reinterpret_cast<const char*>(s.scales.data()), 2 * sizeof(double));
    write_pod(out, s.opacity);
    out.write(reinterpret_cast<const char*>(s.color.data()), 3 * sizeof(double));
    out.write(reinterpret_cast<const char*>(s.f_sem.data()),
              static_cast<std::streamsize>(s.f_sem.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(s.f_ins.data()),
              static_cast<std::streamsize>(s.f_ins.size() * sizeof(double)));
  }
  write_pod<uint64_t>(out, scene.queries.size());
  for (const InstanceQuery& q : scene.queries) {
    write_vecx(out, q.feature);
    out.write(reinterpret_cast<const char*>(q.mean.data()), 3 * sizeof(double));
    out.write(reinterpret_cast<const char*>(q.cov.data()), 9 * sizeof(double));
    write_pod<uint32_t>(out, static_cast<uint32_t>(q.class_votes.size()));
    for (int64_t v : q.class_votes) write_pod(out, v);
    write_pod<int32_t>(out, q.class_id);
    write_pod<int64_t>(out, q.assign_count);
    write_pod<uint8_t>(out, q.alive ? 1 : 0);
  }
  write_pod<uint32_t>(out, static_cast<uint32_t>(scene.attn.w_q.rows()));
  write_pod<uint32_t>(out, static_cast<uint32_t>(scene.attn.w_q.cols()));
  for (const MatX* m : {&scene.attn.w_q, &scene.attn.w_k, &scene.attn.w_v}) {
    out.write(reinterpret_cast<const char*>(m->data()),
              static_cast<std::streamsize>(m->size() * sizeof(double)));
  }
  write_pod<int32_t>(out, scene.attn.pos_enc_bands);
  write_pod(out, scene.attn.pos_enc_base_freq);
  write_pod<uint64_t>(out, scene.attn.pos_enc_seed);
}

SceneMap load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCkptMagic, 8) != 0) {
    throw std::runtime_error("bad checkpoint magic: " + path);
  }
  const uint32_t version = read_pod<uint32_t>(in);
  if (version != kCkptVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  SceneMap scene;
  const uint32_t n_vocab = read_pod<uint32_t>(in);
  for (uint32_t i = 0; i < n_vocab; ++i) scene.vocabulary.push_back(read_string(in));
  const uint32_t c_sem = read_pod<uint32_t>(in);
  const uint32_t c_ins = read_pod<uint32_t>(in);
  const uint64_t n_surf = read_pod<uint64_t>(in);
  scene.surfels.resize(n_surf);
  for (Surfel& s : scene.surfels) {
    in.read(reinterpret_cast<char*>(s.center.data()), 3 * sizeof(double));
    in.read(reinterpret_cast<char*>(s.rotation.data()), 4 * sizeof(double));
    in.read(reinterpret_cast<char*>(s.scales.data()), 2 * sizeof(double));
    s.opacity = read_pod<double>(in);
    in.read(reinterpret_cast<char*>(s.color.data()), 3 * sizeof(double));
    s.f_sem = VecX(c_sem);
    in.read(reinterpret_cast<char*>(s.f_sem.data()),
            static_cast<std::streamsize>(c_sem * sizeof(double)));
    s.f_ins = VecX(c_ins);
    in.read(reinterpret_cast<char*>(s.f_ins.data()),
            static_cast<std::streamsize>(c_ins * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated surfel data");
  }
  const uint64_t n_q = read_pod<uint64_t>(in);
  scene.queries.resize(n_q);
  for (InstanceQuery& q : scene.queries) {
    q.feature = read_vecx(in);
    in.read(reinterpret_cast<char*>(q.mean.data()), 3 * sizeof(double));
    in.read(reinterpret_cast<char*>(q.cov.data()), 9 * sizeof(double));
    const uint32_t nv = read_pod<uint32_t>(in);
    q.class_votes.resize(nv);
    for (uint32_t i = 0; i < nv; ++i) q.class_votes[i] = read_pod<int64_t>(in);
    q.class_id = read_pod<int32_t>(in);
    q.assign_count = read_pod<int64_t>(in);
    q.alive = read_pod<uint8_t>(in) != 0;
  }
  const uint32_t rows = read_pod<uint32_t>(in);
  const uint32_t cols = read_pod<uint32_t>(in);
  scene.attn.w_q = MatX(rows, cols);
  scene.attn.w_k = MatX(rows, cols);
  scene.attn.w_v = MatX(rows, cols);
  for (MatX* m : {&scene.attn.w_q, &scene.attn.w_k, &scene.attn.w_v}) {
    in.read(reinterpret_cast<char*>(m->data()),
            static_cast<std::streamsize>(m->size() * sizeof(double)));
  }
  scene.attn.pos_enc_bands = read_pod<int32_t>(in);
  scene.attn.pos_enc_base_freq = read_pod<double>(in);
  scene.attn.pos_enc_seed = read_pod<uint64_t>(in);
  if (!in) throw std::runtime_error("checkpoint: truncated attention data");
  return scene;
}

void save_sogmm_model(const std::string& path, const SogmmModel& model) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write SOGMM model: " + path);
  out.precision(17);
  out << "sogmm 1\n";
  out << "components " << model.k() << "\n";
  out << "config " << model.config.planarity_threshold << " " << model.config.min_points << " "
      << model.config.max_depth << " " << model.config.em_iters << " "
      << model.config.max_points_per_component << "\n";
  for (const auto& c : model.components) {
    out << "component " << c.weight << " " << c.point_count << " " << c.depth << "\n";
    out << "  mean " << c.mean[0] << " " << c.mean[1] << " " << c.mean[2] << "\n";
    out << "  cov";
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) out << " " << c.cov(i, j);
    }
    out << "\n";
    out << "  intensity " << c.intensity_mean << " " << c.intensity_var << "\n";
  }
}

SogmmModel load_sogmm_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open SOGMM model: " + path);
  std::string tok;
  int version;
  in >> tok >> version;
  if (tok != "sogmm" || version != 1) throw std::runtime_error("bad SOGMM model header: " + path);
  SogmmModel model;
  int k;
  in >> tok >> k;
  in >> tok >> model.config.planarity_threshold >> model.config.min_points >>
      model.config.max_depth >> model.config.em_iters >> model.config.max_points_per_component;
  for (int i = 0; i < k; ++i) {
    SogmmComponent c;
    in >> tok >> c.weight >> c.point_count >> c.depth;
    in >> tok >> c.mean[0] >> c.mean[1] >> c.mean[2];
    in >> tok;
    for (int r = 0; r < 3; ++r) {
      for (int j = 0; j < 3; ++j) in >> c.cov(r, j);
    }
    in >> tok >> c.intensity_mean >> c.intensity_var;
    if (!in) throw std::runtime_error("truncated SOGMM model: " + path);
    eigen_frame(c);
    model.components.push_back(std::move(c));
  }
  return model;
}

namespace {

void save_frame_dir(const fs::path& dir, const FrameBundle& fb, const IntPlane& ids,
                    const IntPlane& classes) {
  fs::create_directories(dir);
  save_ppm((dir / "rgb.ppm").string(), fb.rgb);
  save_raw((dir / "ids.raw").string(), ids);
  save_raw((dir / "classes.raw").string(), classes);
}

FrameBundle load_frame_dir(const fs::path& dir, const Camera& cam,
                           const std::vector<int>& instance_class, IntPlane* ids_out,
                           IntPlane* classes_out) {
  FrameBundle fb;
  fb.camera = cam;
  fb.rgb = load_ppm((dir / "rgb.ppm").string());
  const IntPlane ids = load_raw_int((dir / "ids.raw").string());
  fb.sem_gt = load_raw_int((dir / "classes.raw").string());
  const int n_inst = static_cast<int>(instance_class.size());
  for (int inst = 0; inst < n_inst; ++inst) {
    Image mask(ids.width, ids.height, 1);
    bool any = false;
    for (int i = 0; i < ids.pixel_count(); ++i) {
      mask.data[i] = ids.data[i] == inst ? 1.0 : 0.0;
      any |= ids.data[i] == inst;
    }
    if (any) fb.instance_gt.push_back(std::move(mask));
  }
  if (ids_out != nullptr) *ids_out = ids;
  if (classes_out != nullptr) *classes_out = fb.sem_gt;
  return fb;
}

}  // namespace

void save_dataset(const std::string& dir, const SyntheticScene& scene) {
  fs::create_directories(dir);
  json manifest;
  manifest["version"] = 1;
  manifest["vocabulary"] = scene.vocabulary;
  manifest["instance_class"] = scene.instance_class;
  json frames = json::array();
  char name[32];
  int index = 0;
  for (size_t i = 0; i < scene.train_frames.size(); ++i, ++index) {
    std::snprintf(name, sizeof(name), "frame_%04d", index);
    save_frame_dir(fs::path(dir) / name, scene.train_frames[i], scene.train_ids[i],
                   scene.train_classes[i]);
    json f;
    f["name"] = name;
    f["split"] = "train";
    f["camera"] = camera_json(scene.train_frames[i].camera);
    frames.push_back(f);
  }
  for (size_t i = 0; i < scene.heldout_frames.size(); ++i, ++index) {
    std::snprintf(name, sizeof(name), "frame_%04d", index);
    save_frame_dir(fs::path(dir) / name, scene.heldout_frames[i], scene.heldout_ids[i],
                   scene.heldout_classes[i]);
    json f;
    f["name"] = name;
    f["split"] = "heldout";
    f["camera"] = camera_json(scene.heldout_frames[i].camera);
    frames.push_back(f);
  }
  manifest["frames"] = frames;
  manifest["cloud"] = "points.ply";
  save_ply((fs::path(dir) / "points.ply").string(), scene.cloud, true);
  std::ofstream out(fs::path(dir) / "manifest.json");
  out << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error("cannot open dataset manifest in " + dir);
  json manifest;
  in >> manifest;
  Dataset ds;
  ds.vocabulary = manifest.at("vocabulary").get<std::vector<std::string>>();
  ds.instance_class = manifest.at("instance_class").get<std::vector<int>>();
  for (const auto& f : manifest.at("frames")) {
    const Camera cam = camera_from_json(f.at("camera"));
    const fs::path fdir = fs::path(dir) / f.at("name").get<std::string>();
    IntPlane ids, classes;
    FrameBundle fb = load_frame_dir(fdir, cam, ds.instance_class, &ids, &classes);
    ds.width = cam.width;
    ds.height = cam.height;
    if (f.at("split").get<std::string>() == "train") {
      ds.train_frames.push_back(std::move(fb));
    } else {
      ds.heldout_frames.push_back(std::move(fb));
      ds.heldout_ids.push_back(std::move(ids));
      ds.heldout_classes.push_back(std::move(classes));
    }
  }
  ds.cloud = load_ply((fs::path(dir) / manifest.value("cloud", "points.ply")).string());
  return ds;
}

std::string camera_to_json(const Camera& cam) { return camera_json(cam).dump(2); }

Camera camera_from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open camera file: " + path);
  json j;
  in >> j;
  return camera_from_json(j);
}

std::string bench_report_to_json(const BenchReport& report) {
  json j;
  j["repetitions"] = report.repetitions;
  j["width"] = report.width;
  j["height"] = report.height;
  j["surfels"] = report.surfel_count;
  json rows = json::array();
  for (const auto& r : report.rows) {
    json row;
    row["config"] = r.name;
    row["binning"] = r.binning == Binning::Circle ? "circle" : "aabb";
    row["blending"] = r.blending == Blending::Full ? "full" : "topk";
    row["time_ms"] = r.time_ms;
    row["fps"] = r.fps;
    row["rn_total"] = r.rn_total;
    row["rn_per_tile"] = r.rn_per_tile;
    row["blended_total"] = r.blended_total;
    row["blended_per_pixel"] = r.blended_per_pixel;
    rows.push_back(row);
  }
  j["rows"] = rows;
  return j.dump(2);
}

std::string bench_report_to_csv(const BenchReport& report) {
  std::ostringstream out;
  out << "config,binning,blending,time_ms,fps,rn_total,rn_per_tile,blended_total,blended_per_pixel\n";
  for (const auto& r : report.rows) {
    out << r.name << "," << (r.binning == Binning::Circle ? "circle" : "aabb") << ","
        << (r.blending == Blending::Full ? "full" : "topk") << "," << r.time_ms << "," << r.fps
        << "," << r.rn_total << "," << r.rn_per_tile << "," << r.blended_total << ","
        << r.blended_per_pixel << "\n";
  }
  return out.str();
}

}  // namespace psimap
