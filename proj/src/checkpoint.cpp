#include "ibgc/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "ibgc/error.hpp"
#include "ibgc/loss.hpp"

namespace ibgc {

using Json = nlohmann::json;

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "seed",         "input_channels", "input_height",    "input_width",       "classes",    "layout",
      "hidden",       "clamp",          "s0",              "gamma_init",        "rank",       "mu_init",
      "lr",           "momentum",       "weight_decay",    "cooling_factor",    "max_coolings", "plateau_patience",
      "batch_size",   "epochs",         "beta",            "label_smoothing",   "dequant_amplitude", "flip",
      "crop",         "quantized"};
  return keys;
}

double get_number(const Json& j, const std::string& key) {
  if (!j.is_number()) throw usage_error("config key '" + key + "' must be a number");
  return j.get<double>();
}

std::size_t get_count(const Json& j, const std::string& key) {
  if (!j.is_number_integer() || j.get<long long>() < 0) {
    throw usage_error("config key '" + key + "' must be a non-negative integer");
  }
  return j.get<std::size_t>();
}

bool get_bool(const Json& j, const std::string& key) {
  if (!j.is_boolean()) throw usage_error("config key '" + key + "' must be true or false");
  return j.get<bool>();
}

void validate_model(const ModelSpec& m) {
  if (m.input_chw[0] == 0 || m.input_chw[1] == 0 || m.input_chw[2] == 0) throw usage_error("input extents must be positive");
  if (m.classes < 2) throw usage_error("classes must be at least 2");
  if (m.hidden == 0) throw usage_error("hidden must be positive");
  if (!(m.clamp > 0.0) || !std::isfinite(m.clamp)) throw usage_error("clamp must be positive");
  if (!(m.s0 > 0.0) || !std::isfinite(m.s0)) throw usage_error("s0 must be positive");
  if (!std::isfinite(m.gamma_init)) throw usage_error("gamma_init must be finite");
  if (m.rank == 0) throw usage_error("rank must be positive");
  if (!(m.mu_init >= 0.0) || !std::isfinite(m.mu_init)) throw usage_error("mu_init must be non-negative");
  for (const auto& tok : m.layout) parse_layout_token(tok);
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw usage_error(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw usage_error("config must be a JSON object");
  ExperimentConfig cfg;
  ModelSpec& m = cfg.model;
  TrainConfig& t = cfg.train;
  for (const auto& [key, v] : j.items()) {
    if (!known_keys().count(key)) throw usage_error("unknown config key '" + key + "'");
    if (key == "seed") {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
        throw usage_error("config key 'seed' must be a non-negative integer");
      }
      m.seed = t.seed = v.get<std::uint64_t>();
    } else if (key == "input_channels") {
      m.input_chw[0] = get_count(v, key);
    } else if (key == "input_height") {
      m.input_chw[1] = get_count(v, key);
    } else if (key == "input_width") {
      m.input_chw[2] = get_count(v, key);
    } else if (key == "classes") {
      m.classes = get_count(v, key);
    } else if (key == "layout") {
      if (!v.is_array()) throw usage_error("config key 'layout' must be an array of strings");
      m.layout.clear();
      for (const auto& tok : v) {
        if (!tok.is_string()) throw usage_error("config key 'layout' must be an array of strings");
        m.layout.push_back(tok.get<std::string>());
      }
    } else if (key == "hidden") {
      m.hidden = get_count(v, key);
    } else if (key == "clamp") {
      m.clamp = get_number(v, key);
    } else if (key == "s0") {
      m.s0 = get_number(v, key);
    } else if (key == "gamma_init") {
      m.gamma_init = get_number(v, key);
    } else if (key == "rank") {
      m.rank = get_count(v, key);
    } else if (key == "mu_init") {
      m.mu_init = get_number(v, key);
    } else if (key == "lr") {
      t.lr0 = get_number(v, key);
    } else if (key == "momentum") {
      t.momentum = get_number(v, key);
    } else if (key == "weight_decay") {
      t.weight_decay = get_number(v, key);
    } else if (key == "cooling_factor") {
      t.cooling_factor = get_number(v, key);
    } else if (key == "max_coolings") {
      t.max_coolings = get_count(v, key);
    } else if (key == "plateau_patience") {
      t.plateau_patience = get_count(v, key);
    } else if (key == "batch_size") {
      t.batch_size = get_count(v, key);
    } else if (key == "epochs") {
      t.epochs = get_count(v, key);
    } else if (key == "beta") {
      if (v.is_string() && v.get<std::string>() == "inf") {
        t.beta = kInfiniteBeta;
      } else {
        t.beta = get_number(v, key);
      }
    } else if (key == "label_smoothing") {
      t.label_smoothing = get_number(v, key);
    } else if (key == "dequant_amplitude") {
      t.dequant_amplitude = get_number(v, key);
    } else if (key == "flip") {
      t.flip = get_bool(v, key);
    } else if (key == "crop") {
      t.crop = get_bool(v, key);
    } else if (key == "quantized") {
      t.quantized = get_bool(v, key);
    }
  }
  validate_model(m);
  t.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string config_json(const ExperimentConfig& cfg) {
  const ModelSpec& m = cfg.model;
  const TrainConfig& t = cfg.train;
  Json j;
  j["seed"] = m.seed;
  j["input_channels"] = m.input_chw[0];
  j["input_height"] = m.input_chw[1];
  j["input_width"] = m.input_chw[2];
  j["classes"] = m.classes;
  j["layout"] = m.layout;
  j["hidden"] = m.hidden;
  j["clamp"] = m.clamp;
  j["s0"] = m.s0;
  j["gamma_init"] = m.gamma_init;
  j["rank"] = m.rank;
  j["mu_init"] = m.mu_init;
  j["lr"] = t.lr0;
  j["momentum"] = t.momentum;
  j["weight_decay"] = t.weight_decay;
  j["cooling_factor"] = t.cooling_factor;
  j["max_coolings"] = t.max_coolings;
  j["plateau_patience"] = t.plateau_patience;
  j["batch_size"] = t.batch_size;
  j["epochs"] = t.epochs;
  if (std::isinf(t.beta)) {
    j["beta"] = "inf";
  } else {
    j["beta"] = t.beta;
  }
  j["label_smoothing"] = t.label_smoothing;
  j["dequant_amplitude"] = t.dequant_amplitude;
  j["flip"] = t.flip;
  j["crop"] = t.crop;
  j["quantized"] = t.quantized;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[5] = {'I', 'B', 'G', 'C', '1'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void doubles(std::span<double> out) {
    need(out.size() * sizeof(double));
    std::memcpy(out.data(), bytes_.data() + pos_, out.size() * sizeof(double));
    pos_ += out.size() * sizeof(double);
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw data_error("checkpoint is truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string checkpoint_bytes(const FlowModel& model, const ExperimentConfig& config,
                             const std::optional<ScoreSet>& refs) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = config_json(config);
  put<std::uint64_t>(out, cfg.size());
  out += cfg;
  const auto params = model.parameters();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const Parameter& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) put<std::uint64_t>(out, d);
  }
  for (const Parameter& p : params) {
    for (double v : p.value.data()) put<double>(out, v);
  }
  const std::size_t n = refs ? refs->size() : 0;
  put<std::uint64_t>(out, n);
  if (refs) {
    for (double v : refs->scores()) put<double>(out, v);
  }
  return out;
}

void save_checkpoint(const FlowModel& model, const ExperimentConfig& config, const std::optional<ScoreSet>& refs,
                     const std::string& path) {
  const std::string bytes = checkpoint_bytes(model, config, refs);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw data_error("failed writing checkpoint '" + path + "'");
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw data_error("not an IBGC1 checkpoint (bad magic)");
  }
  in.text(sizeof(kMagic));
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw data_error("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                     std::to_string(kCheckpointVersion) + ")");
  }
  const auto cfg_len = in.get<std::uint64_t>();
  if (cfg_len > bytes.size()) throw data_error("checkpoint is truncated");
  Checkpoint ck;
  try {
    ck.config = parse_config_text(in.text(cfg_len));
  } catch (const Error& e) {
    throw data_error(std::string("checkpoint config: ") + e.what());
  }
  auto model = std::make_unique<FlowModel>(ck.config.model);
  auto params = model->parameters();
  const auto count = in.get<std::uint32_t>();
  if (count != params.size()) {
    throw data_error("checkpoint has " + std::to_string(count) + " tensors, the configured model has " +
                     std::to_string(params.size()));
  }
  for (const Parameter& p : params) {
    const auto name_len = in.get<std::uint32_t>();
    if (name_len > bytes.size()) throw data_error("checkpoint is truncated");
    const std::string name = in.text(name_len);
    const auto rank = in.get<std::uint32_t>();
    if (rank > 8) throw data_error("checkpoint tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.get<std::uint64_t>();
    if (name != p.name || shape != p.value.shape()) {
      throw data_error("checkpoint tensor '" + name + "' " + shape_str(shape) + " does not match model tensor '" +
                       p.name + "' " + shape_str(p.value.shape()));
    }
  }
  for (Parameter& p : params) {
    in.doubles(p.value.mutable_data());
    for (double v : p.value.data()) {
      if (!std::isfinite(v)) throw data_error("checkpoint tensor '" + p.name + "' holds a non-finite value");
    }
  }
  const auto n = in.get<std::uint64_t>();
  if (n > bytes.size() / sizeof(double)) throw data_error("checkpoint is truncated");
  if (n > 0) {
    std::vector<double> scores(n);
    in.doubles(scores);
    try {
      ck.refs = ScoreSet(std::move(scores));
    } catch (const Error& e) {
      throw data_error(std::string("checkpoint reference scores: ") + e.what());
    }
  }
  if (!in.at_end()) throw data_error("checkpoint has trailing bytes");
  ck.model = std::move(model);
  return ck;
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace ibgc
