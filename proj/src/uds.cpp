#include "unidiff/uds.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace unidiff {

void write_f32_le(std::ostream& os, const float* data, std::size_t n) {
  std::vector<unsigned char> buf(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(data[i]);
    for (int b = 0; b < 4; ++b) buf[i * 4 + static_cast<std::size_t>(b)] = static_cast<unsigned char>(bits >> (8 * b));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("write failed");
}

void read_f32_le(std::istream& is, float* data, std::size_t n) {
  std::vector<unsigned char> buf(n * 4);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (is.gcount() != static_cast<std::streamsize>(buf.size())) throw std::runtime_error("raw file is truncated");
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[i * 4 + static_cast<std::size_t>(b)]) << (8 * b);
    data[i] = std::bit_cast<float>(bits);
  }
}

void write_uds(const std::filesystem::path& path, const Dataset& data, const nlohmann::json& spec,
               std::uint64_t seed, const nlohmann::json& extra) {
  const std::size_t n = data.size();
  const int dx = data.d_x();
  const int dy = data.d_y();
  const auto bin = path.string() + ".bin";

  nlohmann::json m;
  m["format"] = "uds";
  m["spec"] = spec;
  m["n"] = n;
  m["d_x"] = dx;
  m["d_y"] = dy;
  m["seed"] = seed;
  m["byte_order"] = "little";
  m["dtype"] = "f32";
  m["data_file"] = std::filesystem::path(bin).filename().string();
  for (const auto& [k, v] : extra.items()) m[k] = v;

  std::vector<float> rec(n * static_cast<std::size_t>(dx + dy));
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (int j = 0; j < dx; ++j) rec[k++] = static_cast<float>(data.x(r, j));
    for (int j = 0; j < dy; ++j) rec[k++] = static_cast<float>(data.y(r, j));
  }
  std::ofstream raw(bin, std::ios::binary);
  if (!raw) throw std::runtime_error("cannot open " + bin);
  write_f32_le(raw, rec.data(), rec.size());

  std::ofstream mf(path);
  if (!mf) throw std::runtime_error("cannot open " + path.string());
  mf << m.dump(2) << "\n";
}

UdsFile read_uds(const std::filesystem::path& path) {
  std::ifstream mf(path);
  if (!mf) throw std::runtime_error("cannot open " + path.string());
  const auto m = nlohmann::json::parse(mf);
  if (m.value("byte_order", "") != "little" || m.value("dtype", "") != "f32") {
    throw ConfigError("uds", "only little-endian f32 payloads are supported");
  }
  const auto n = m.at("n").get<std::size_t>();
  const int dx = m.at("d_x").get<int>();
  const int dy = m.at("d_y").get<int>();
  if (dx < 0 || dy < 0 || dx + dy == 0) throw ConfigError("uds", "bad record dimensions");
  const auto bin = path.parent_path() / m.at("data_file").get<std::string>();

  std::vector<float> rec(n * static_cast<std::size_t>(dx + dy));
  std::ifstream raw(bin, std::ios::binary);
  if (!raw) throw std::runtime_error("cannot open " + bin.string());
  read_f32_le(raw, rec.data(), rec.size());

  UdsFile out;
  out.data.x.resize(static_cast<Eigen::Index>(n), dx);
  out.data.y.resize(static_cast<Eigen::Index>(n), dy);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (int j = 0; j < dx; ++j) out.data.x(r, j) = rec[k++];
    for (int j = 0; j < dy; ++j) out.data.y(r, j) = rec[k++];
  }
  out.spec = m.value("spec", nlohmann::json());
  out.seed = m.value("seed", std::uint64_t{0});
  out.extra = m;
  return out;
}

}  // namespace unidiff
