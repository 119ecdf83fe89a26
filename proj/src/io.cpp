#include "deltaprune/io.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <vector>

#include <json.hpp>

namespace dp {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts need byte swapping");

namespace {

constexpr const char* kFormat = "deltaprune-checkpoint-v1";

struct TensorSlot {
  std::string name;
  Matrix* tensor;
};

// Deterministic enumeration of every tensor in the model.
std::vector<TensorSlot> tensor_slots(ToyModel& m) {
  std::vector<TensorSlot> slots;
  slots.push_back({"embedding", &m.embedding});
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const std::string lp = "layers." + std::to_string(l) + ".";
    for (size_t h = 0; h < m.layers[l].heads.size(); ++h) {
      const std::string hp = lp + "heads." + std::to_string(h) + ".";
      HeadParams& head = m.layers[l].heads[h];
      slots.push_back({hp + "w_q", &head.w_q});
      slots.push_back({hp + "w_k", &head.w_k});
      slots.push_back({hp + "w_v", &head.w_v});
      slots.push_back({hp + "w_beta", &head.w_beta});
      if (!head.w_alpha.data.empty()) slots.push_back({hp + "w_alpha", &head.w_alpha});
      slots.push_back({hp + "conv_q", &head.conv_q});
      slots.push_back({hp + "conv_k", &head.conv_k});
      slots.push_back({hp + "conv_v", &head.conv_v});
    }
    slots.push_back({lp + "w_o", &m.layers[l].w_o});
  }
  slots.push_back({"lm_head", &m.lm_head});
  return slots;
}

void write_binary(const std::filesystem::path& p, const Matrix& t) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw config_error("cannot write tensor file: " + p.string());
  out.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!out) throw config_error("write failed: " + p.string());
}

void read_binary(const std::filesystem::path& p, Matrix& t, int rows, int cols) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(p, ec);
  if (ec) throw config_error("missing tensor file: " + p.string());
  const uint64_t expected = static_cast<uint64_t>(rows) * static_cast<uint64_t>(cols) * sizeof(double);
  if (size != expected)
    throw config_error("tensor file size mismatch: " + p.string() + " (" + std::to_string(size) + " bytes, expected " +
                       std::to_string(expected) + ")");
  t = Matrix(rows, cols);
  std::ifstream in(p, std::ios::binary);
  if (!in) throw config_error("cannot read tensor file: " + p.string());
  in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(expected));
  if (!in) throw config_error("read failed: " + p.string());
}

nlohmann::json config_json(const ToyConfig& c) {
  nlohmann::json j;
  j["vocab"] = c.vocab;
  j["modelDim"] = c.model_dim;
  j["numLayers"] = c.num_layers;
  j["numHeads"] = c.num_heads;
  j["keyDim"] = c.key_dim;
  j["valueDim"] = c.value_dim;
  j["convLen"] = c.conv_len;
  j["seqLen"] = c.seq_len;
  j["numPairs"] = c.num_pairs;
  j["variant"] = variant_name(c.variant);
  j["rmsEps"] = c.rms_eps;
  return j;
}

ToyConfig config_from(const nlohmann::json& j) {
  ToyConfig c;
  c.vocab = j.value("vocab", c.vocab);
  c.model_dim = j.value("modelDim", c.model_dim);
  c.num_layers = j.value("numLayers", c.num_layers);
  c.num_heads = j.value("numHeads", c.num_heads);
  c.key_dim = j.value("keyDim", c.key_dim);
  c.value_dim = j.value("valueDim", c.value_dim);
  c.conv_len = j.value("convLen", c.conv_len);
  c.seq_len = j.value("seqLen", c.seq_len);
  c.num_pairs = j.value("numPairs", c.num_pairs);
  if (j.contains("variant")) c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.rms_eps = j.value("rmsEps", c.rms_eps);
  return c;
}

}  // namespace

void save_checkpoint(const ToyModel& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  // tensor_slots needs a mutable model; saving never mutates the tensors.
  ToyModel& mutable_m = const_cast<ToyModel&>(m);
  nlohmann::json manifest;
  manifest["format"] = kFormat;
  manifest["config"] = config_json(m.config);
  manifest["tensors"] = nlohmann::json::array();
  for (const TensorSlot& slot : tensor_slots(mutable_m)) {
    const std::string file = slot.name + ".bin";
    nlohmann::json jt;
    jt["name"] = slot.name;
    jt["shape"] = {slot.tensor->rows, slot.tensor->cols};
    jt["dtype"] = "f64";
    jt["file"] = file;
    jt["byteOrder"] = "little";
    manifest["tensors"].push_back(std::move(jt));
    write_binary(dir / file, *slot.tensor);
  }
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

ToyModel load_checkpoint(const std::filesystem::path& dir) {
  const std::filesystem::path manifest_path = dir / "manifest.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw config_error("invalid checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kFormat)
    throw config_error("unrecognized checkpoint format in " + manifest_path.string());

  ToyModel m;
  m.config = config_from(manifest.at("config"));
  // Allocate empty layers so slots exist; w_alpha slots only for gated.
  m.layers.resize(static_cast<size_t>(m.config.num_layers));
  for (LayerParams& l : m.layers) {
    l.dims = HeadDims{m.config.model_dim, m.config.key_dim, m.config.value_dim, m.config.num_heads,
                      m.config.conv_len};
    l.rms_eps = m.config.rms_eps;
    l.heads.resize(static_cast<size_t>(m.config.num_heads));
    if (m.config.variant == MixerVariant::gated)
      for (HeadParams& h : l.heads) h.w_alpha = Matrix(1, 1);  // placeholder; loaded below
  }

  std::vector<TensorSlot> slots = tensor_slots(m);
  std::vector<bool> filled(slots.size(), false);
  for (const auto& jt : manifest.at("tensors")) {
    const std::string name = jt.at("name").get<std::string>();
    if (jt.value("dtype", "") != "f64" || jt.value("byteOrder", "") != "little")
      throw config_error("unsupported tensor encoding for " + name + " in " + manifest_path.string());
    const std::vector<int> shape = jt.at("shape").get<std::vector<int>>();
    if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0)
      throw config_error("bad tensor shape for " + name + " in " + manifest_path.string());
    auto it = std::find_if(slots.begin(), slots.end(), [&](const TensorSlot& s) { return s.name == name; });
    if (it == slots.end()) throw config_error("unexpected tensor " + name + " in " + manifest_path.string());
    const size_t idx = static_cast<size_t>(it - slots.begin());
    if (filled[idx]) throw config_error("duplicate tensor " + name + " in " + manifest_path.string());
    read_binary(dir / jt.at("file").get<std::string>(), *it->tensor, shape[0], shape[1]);
    filled[idx] = true;
  }
  for (size_t i = 0; i < slots.size(); ++i)
    if (!filled[i]) throw config_error("checkpoint is missing tensor " + slots[i].name);

  for (const LayerParams& l : m.layers) validate_layer(l);
  return m;
}

std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw config_error("cannot open file: " + p.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return text;
}

void write_text_file(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw config_error("cannot write file: " + p.string());
  out << text;
  if (!out) throw config_error("write failed: " + p.string());
}

std::string config_to_json(const ToyConfig& c) { return config_json(c).dump(2) + "\n"; }

ToyConfig config_from_json(const std::string& text) {
  try {
    return config_from(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("invalid model config JSON: ") + e.what());
  }
}

std::string train_metrics_json(const TrainMetrics& metrics) {
  nlohmann::json j;
  j["stepsRun"] = metrics.steps_run;
  j["finalAccuracy"] = metrics.final_accuracy;
  j["history"] = nlohmann::json::array();
  for (const TrainPoint& p : metrics.history) {
    nlohmann::json jp;
    jp["step"] = p.step;
    jp["loss"] = p.loss;
    if (p.accuracy >= 0.0) jp["accuracy"] = p.accuracy;
    j["history"].push_back(std::move(jp));
  }
  return j.dump(2) + "\n";
}

}  // namespace dp
