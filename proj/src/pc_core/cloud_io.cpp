#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "placerec/binio.hpp"
#include "placerec/pc_core.hpp"

namespace placerec {

namespace {

constexpr std::string_view kNativeMagic = "GPC1";

bool is_ply(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".ply";
}

void save_native(const PointCloud& cloud, const std::filesystem::path& path) {
  binio::Writer w;
  w.magic(kNativeMagic);
  w.u32(static_cast<std::uint32_t>(cloud.size()));
  w.u32(static_cast<std::uint32_t>(cloud.feature_dim));
  for (const auto& p : cloud.points) {
    w.f32(static_cast<float>(p.x));
    w.f32(static_cast<float>(p.y));
    w.f32(static_cast<float>(p.z));
  }
  for (double f : cloud.features) w.f32(static_cast<float>(f));
  w.write_file(path);
}

PointCloud load_native(const std::filesystem::path& path) {
  auto r = binio::Reader::from_file(path);
  r.expect_magic(kNativeMagic);
  const auto count = r.u32();
  const auto dim = r.u32();
  r.need(static_cast<std::size_t>(count) * (3 + dim) * sizeof(float));
  PointCloud cloud;
  cloud.feature_dim = dim;
  cloud.points.resize(count);
  for (auto& p : cloud.points) {
    p.x = r.f32();
    p.y = r.f32();
    p.z = r.f32();
  }
  cloud.features.resize(static_cast<std::size_t>(count) * dim);
  for (auto& f : cloud.features) f = r.f32();
  if (!r.at_end()) r.error("trailing bytes after point data", r.offset());
  return cloud;
}

// --- PLY -------------------------------------------------------------------

enum class PlyType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

bool parse_ply_type(const std::string& s, PlyType& out) {
  static const std::pair<const char*, PlyType> table[] = {
      {"char", PlyType::Int8},     {"int8", PlyType::Int8},       {"uchar", PlyType::UInt8},
      {"uint8", PlyType::UInt8},   {"short", PlyType::Int16},     {"int16", PlyType::Int16},
      {"ushort", PlyType::UInt16}, {"uint16", PlyType::UInt16},   {"int", PlyType::Int32},
      {"int32", PlyType::Int32},   {"uint", PlyType::UInt32},     {"uint32", PlyType::UInt32},
      {"float", PlyType::Float32}, {"float32", PlyType::Float32}, {"double", PlyType::Float64},
      {"float64", PlyType::Float64}};
  for (const auto& [name, t] : table) {
    if (s == name) {
      out = t;
      return true;
    }
  }
  return false;
}

double read_binary_value(binio::Reader& r, PlyType t) {
  switch (t) {
    case PlyType::Int8: { std::int8_t v; r.bytes(&v, 1); return v; }
    case PlyType::UInt8: { std::uint8_t v; r.bytes(&v, 1); return v; }
    case PlyType::Int16: { std::int16_t v; r.bytes(&v, 2); return v; }
    case PlyType::UInt16: return r.u16();
    case PlyType::Int32: { std::int32_t v; r.bytes(&v, 4); return v; }
    case PlyType::UInt32: return r.u32();
    case PlyType::Float32: return r.f32();
    case PlyType::Float64: return r.f64();
  }
  return 0.0;
}

struct PlyProperty {
  std::string name;
  PlyType type = PlyType::Float32;
  bool is_list = false;
  PlyType count_type = PlyType::UInt8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
};

[[noreturn]] void ply_error(const std::filesystem::path& path, const std::string& what, std::size_t line) {
  fail(ErrorKind::ParseError, path.string() + ": " + what + " at line " + std::to_string(line));
}

PointCloud load_ply(const std::filesystem::path& path) {
  auto data = binio::read_file(path);
  std::size_t pos = 0;
  std::size_t line_no = 0;
  auto next_line = [&]() -> std::string {
    if (pos >= data.size()) ply_error(path, "unexpected end of file", line_no + 1);
    const auto start = pos;
    while (pos < data.size() && data[pos] != '\n') ++pos;
    std::string line(data.begin() + static_cast<std::ptrdiff_t>(start), data.begin() + static_cast<std::ptrdiff_t>(pos));
    if (pos < data.size()) ++pos;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  };

  if (next_line() != "ply") ply_error(path, "missing 'ply' magic", line_no);
  bool binary = false;
  bool have_format = false;
  std::vector<PlyElement> elements;
  for (;;) {
    const auto line = next_line();
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "end_header") break;
    if (word.empty() || word == "comment" || word == "obj_info") continue;
    if (word == "format") {
      std::string fmt, version;
      ls >> fmt >> version;
      if (fmt == "ascii") binary = false;
      else if (fmt == "binary_little_endian") binary = true;
      else ply_error(path, "unsupported PLY format '" + fmt + "'", line_no);
      have_format = true;
    } else if (word == "element") {
      PlyElement e;
      long long count = -1;
      ls >> e.name >> count;
      if (!ls || count < 0) ply_error(path, "malformed element line", line_no);
      e.count = static_cast<std::size_t>(count);
      elements.push_back(std::move(e));
    } else if (word == "property") {
      if (elements.empty()) ply_error(path, "property before any element", line_no);
      PlyProperty p;
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string count_type, item_type;
        ls >> count_type >> item_type >> p.name;
        p.is_list = true;
        if (!parse_ply_type(count_type, p.count_type) || !parse_ply_type(item_type, p.type))
          ply_error(path, "unknown list property type", line_no);
      } else {
        ls >> p.name;
        if (!parse_ply_type(type, p.type)) ply_error(path, "unknown property type '" + type + "'", line_no);
      }
      if (p.name.empty()) ply_error(path, "property without a name", line_no);
      elements.back().properties.push_back(std::move(p));
    } else {
      ply_error(path, "unexpected header keyword '" + word + "'", line_no);
    }
  }
  if (!have_format) ply_error(path, "missing format line", line_no);

  PointCloud cloud;
  binio::Reader reader(std::vector<std::uint8_t>(data.begin() + static_cast<std::ptrdiff_t>(pos), data.end()),
                       path.string());
  for (const auto& element : elements) {
    const bool is_vertex = element.name == "vertex";
    int axis_slot[3] = {-1, -1, -1};
    for (std::size_t i = 0; i < element.properties.size(); ++i) {
      const auto& name = element.properties[i].name;
      if (name == "x") axis_slot[0] = static_cast<int>(i);
      if (name == "y") axis_slot[1] = static_cast<int>(i);
      if (name == "z") axis_slot[2] = static_cast<int>(i);
    }
    if (is_vertex && (axis_slot[0] < 0 || axis_slot[1] < 0 || axis_slot[2] < 0))
      ply_error(path, "vertex element lacks x/y/z properties", line_no);
    if (is_vertex) cloud.points.resize(element.count);

    for (std::size_t row = 0; row < element.count; ++row) {
      if (binary) {
        for (std::size_t i = 0; i < element.properties.size(); ++i) {
          const auto& prop = element.properties[i];
          if (prop.is_list) {
            const auto n = static_cast<std::size_t>(read_binary_value(reader, prop.count_type));
            for (std::size_t j = 0; j < n; ++j) read_binary_value(reader, prop.type);
            continue;
          }
          const double v = read_binary_value(reader, prop.type);
          if (is_vertex)
            for (int a = 0; a < 3; ++a)
              if (axis_slot[a] == static_cast<int>(i)) cloud.points[row][a] = v;
        }
      } else {
        const auto line = next_line();
        const char* p = line.data();
        const char* end = line.data() + line.size();
        auto next_number = [&]() -> double {
          while (p < end && (*p == ' ' || *p == '\t')) ++p;
          double v = 0.0;
          auto [ptr, ec] = std::from_chars(p, end, v);
          if (ec != std::errc()) ply_error(path, "malformed number", line_no);
          p = ptr;
          return v;
        };
        for (std::size_t i = 0; i < element.properties.size(); ++i) {
          const auto& prop = element.properties[i];
          if (prop.is_list) {
            const auto n = static_cast<std::size_t>(next_number());
            for (std::size_t j = 0; j < n; ++j) next_number();
            continue;
          }
          const double v = next_number();
          if (is_vertex)
            for (int a = 0; a < 3; ++a)
              if (axis_slot[a] == static_cast<int>(i)) cloud.points[row][a] = v;
        }
      }
    }
    if (is_vertex) break;
  }
  for (std::size_t i = 0; i < cloud.size(); ++i)
    if (!cloud.points[i].finite())
      fail(ErrorKind::ParseError, path.string() + ": non-finite coordinate in vertex " + std::to_string(i));
  return cloud;
}

void save_ply(const PointCloud& cloud, const std::filesystem::path& path, bool binary) {
  std::ostringstream header;
  header << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n"
         << "element vertex " << cloud.size() << "\n"
         << "property float x\nproperty float y\nproperty float z\nend_header\n";
  binio::Writer w;
  const auto h = header.str();
  w.bytes(h.data(), h.size());
  if (binary) {
    for (const auto& p : cloud.points) {
      w.f32(static_cast<float>(p.x));
      w.f32(static_cast<float>(p.y));
      w.f32(static_cast<float>(p.z));
    }
  } else {
    char buf[128];
    for (const auto& p : cloud.points) {
      // %.9g round-trips any float exactly.
      const int n = std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g\n", static_cast<double>(static_cast<float>(p.x)),
                                  static_cast<double>(static_cast<float>(p.y)),
                                  static_cast<double>(static_cast<float>(p.z)));
      w.bytes(buf, static_cast<std::size_t>(n));
    }
  }
  w.write_file(path);
}

}  // namespace

PointCloud load_cloud(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorKind::IoError, "no such file: " + path.string());
  PointCloud cloud = is_ply(path) ? load_ply(path) : load_native(path);
  return cloud;
}

void save_cloud(const PointCloud& cloud, const std::filesystem::path& path, std::optional<CloudFormat> format) {
  cloud.validate();
  const CloudFormat f = format.value_or(is_ply(path) ? CloudFormat::PlyBinary : CloudFormat::Native);
  switch (f) {
    case CloudFormat::Native: save_native(cloud, path); break;
    case CloudFormat::PlyBinary: save_ply(cloud, path, true); break;
    case CloudFormat::PlyAscii: save_ply(cloud, path, false); break;
  }
}

}  // namespace placerec
