#include "unidiff/checkpoint.hpp"

#include <fstream>

#include "unidiff/uds.hpp"

namespace unidiff {

namespace fs = std::filesystem;

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir);
  if (ckpt.params.size() != Backbone<float>(ckpt.backbone).parameter_count()) {
    throw std::invalid_argument("checkpoint: parameter count does not match the backbone config");
  }
  nlohmann::json m;
  m["format"] = "unidiff-checkpoint";
  m["backbone"] = ckpt.backbone.to_json();
  m["schedule"] = ckpt.schedule.to_json();
  m["spec"] = ckpt.spec;
  m["train"] = ckpt.train;
  m["step"] = ckpt.step;
  m["param_count"] = ckpt.params.size();
  m["byte_order"] = "little";
  m["dtype"] = "f32";
  m["params_file"] = "params.f32";
  auto& names = m["layout"] = nlohmann::json::array();
  for (const auto& e : ckpt.params.layout->entries()) names.push_back({e.name, e.rows, e.cols});

  // Write both files under temporary names, then rename, so a crash never
  // leaves a manifest pointing at a half-written payload.
  const auto tmp_bin = dir / "params.f32.tmp";
  const auto tmp_json = dir / "checkpoint.json.tmp";
  {
    std::ofstream raw(tmp_bin, std::ios::binary);
    if (!raw) throw std::runtime_error("cannot open " + tmp_bin.string());
    write_f32_le(raw, ckpt.params.values.data(), ckpt.params.size());
  }
  {
    std::ofstream mf(tmp_json);
    if (!mf) throw std::runtime_error("cannot open " + tmp_json.string());
    mf << m.dump(2) << "\n";
  }
  fs::rename(tmp_bin, dir / "params.f32");
  fs::rename(tmp_json, dir / "checkpoint.json");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream mf(dir / "checkpoint.json");
  if (!mf) throw ConfigError("ckpt", "no checkpoint.json in " + dir.string());
  const auto m = nlohmann::json::parse(mf);
  if (m.value("format", "") != "unidiff-checkpoint") throw ConfigError("ckpt", "not a unidiff checkpoint");

  Checkpoint c;
  c.backbone = BackboneConfig::from_json(m.at("backbone"));
  c.schedule = NoiseSchedule::from_json(m.at("schedule"));
  if (c.schedule.T() != c.backbone.timesteps) throw ConfigError("ckpt.schedule.T", "does not match backbone.timesteps");
  c.spec = m.value("spec", nlohmann::json());
  c.train = m.value("train", nlohmann::json());
  c.step = m.value("step", std::uint64_t{0});

  const Backbone<float> net(c.backbone);
  c.params = net.zero_params();
  const auto& entries = c.params.layout->entries();
  const auto& stored = m.at("layout");
  if (stored.size() != entries.size()) throw ConfigError("ckpt.layout", "tensor count mismatch");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (stored[i][0] != entries[i].name || stored[i][1] != entries[i].rows || stored[i][2] != entries[i].cols) {
      throw ConfigError("ckpt.layout", "tensor " + entries[i].name + " does not match the stored layout");
    }
  }
  std::ifstream raw(dir / m.value("params_file", "params.f32"), std::ios::binary);
  if (!raw) throw ConfigError("ckpt", "missing parameter payload");
  read_f32_le(raw, c.params.values.data(), c.params.size());
  if (!c.params.all_finite()) throw NumericalError("checkpoint holds non-finite parameters");
  return c;
}

}  // namespace unidiff
