#include "mixssm/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mixssm/errors.hpp"

namespace mixssm {
namespace {

using Json = nlohmann::ordered_json;

void reject_unknown(const Json& obj, const std::set<std::string>& allowed, const std::string& section) {
  if (!obj.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError(section + ": unknown key '" + key + "'");
  }
}

template <typename V>
void read(const Json& obj, const char* key, V& out, const std::string& section) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(section + "." + key + ": wrong type (" + obj.at(key).dump() + ")");
  }
}

Json model_to(const ModelConfig& c) {
  Json branches = Json::array();
  for (auto b : c.branches) branches.push_back(to_string(b));
  Json j;
  j["image_height"] = c.image_height;
  j["image_width"] = c.image_width;
  j["in_channels"] = c.in_channels;
  j["patch_size"] = c.patch_size;
  j["depths"] = c.depths;
  j["channels"] = c.channels;
  j["heads"] = c.heads;
  j["branches"] = branches;
  j["ssm_state"] = c.ssm_state;
  j["ssm_separate_directions"] = c.ssm_separate_directions;
  j["mlp_ratio"] = c.mlp_ratio;
  j["conv_kernel"] = c.conv_kernel;
  j["selective"] = {{"kernel", c.selective.kernel},
                    {"pooling", to_string(c.selective.pooling)},
                    {"mode", to_string(c.selective.mode)},
                    {"reduction", c.selective.reduction}};
  j["num_classes"] = c.num_classes;
  j["seed"] = c.seed;
  return j;
}

ModelConfig model_from(const Json& j) {
  const std::string sec = "model";
  reject_unknown(j,
                 {"preset", "image_height", "image_width", "in_channels", "patch_size", "depths", "channels", "heads",
                  "branches", "ssm_state", "ssm_separate_directions", "mlp_ratio", "conv_kernel", "selective",
                  "num_classes", "seed"},
                 sec);
  ModelConfig c;
  if (j.contains("preset")) {
    std::string preset;
    read(j, "preset", preset, sec);
    if (preset == "desk") {
      c = desk_config();
    } else if (preset != "default") {
      throw ConfigError("model.preset: unknown preset '" + preset + "' (expected default, desk)");
    }
  }
  read(j, "image_height", c.image_height, sec);
  read(j, "image_width", c.image_width, sec);
  read(j, "in_channels", c.in_channels, sec);
  read(j, "patch_size", c.patch_size, sec);
  read(j, "depths", c.depths, sec);
  read(j, "channels", c.channels, sec);
  read(j, "heads", c.heads, sec);
  if (j.contains("branches")) {
    std::vector<std::string> names;
    read(j, "branches", names, sec);
    c.branches.clear();
    for (const auto& n : names) c.branches.push_back(parse_branch(n));
  }
  read(j, "ssm_state", c.ssm_state, sec);
  read(j, "ssm_separate_directions", c.ssm_separate_directions, sec);
  read(j, "mlp_ratio", c.mlp_ratio, sec);
  read(j, "conv_kernel", c.conv_kernel, sec);
  if (j.contains("selective")) {
    const auto& s = j.at("selective");
    const std::string ssec = "model.selective";
    reject_unknown(s, {"kernel", "pooling", "mode", "reduction"}, ssec);
    read(s, "kernel", c.selective.kernel, ssec);
    read(s, "reduction", c.selective.reduction, ssec);
    std::string name;
    if (s.contains("pooling")) {
      read(s, "pooling", name, ssec);
      c.selective.pooling = parse_pooling(name);
    }
    if (s.contains("mode")) {
      read(s, "mode", name, ssec);
      c.selective.mode = parse_aggregation(name);
    }
  }
  read(j, "num_classes", c.num_classes, sec);
  read(j, "seed", c.seed, sec);
  c.validate();
  return c;
}

Json train_to(const TrainConfig& t) {
  Json j;
  j["epochs"] = t.epochs;
  j["batch_size"] = t.batch_size;
  j["lr"] = t.lr;
  j["seed"] = t.seed;
  j["max_steps"] = t.max_steps;
  j["train_data"] = t.train_data;
  j["eval_data"] = t.eval_data;
  return j;
}

TrainConfig train_from(const Json& j) {
  const std::string sec = "train";
  reject_unknown(j, {"epochs", "batch_size", "lr", "seed", "max_steps", "train_data", "eval_data"}, sec);
  TrainConfig t;
  read(j, "epochs", t.epochs, sec);
  read(j, "batch_size", t.batch_size, sec);
  read(j, "lr", t.lr, sec);
  read(j, "seed", t.seed, sec);
  read(j, "max_steps", t.max_steps, sec);
  read(j, "train_data", t.train_data, sec);
  read(j, "eval_data", t.eval_data, sec);
  if (t.batch_size == 0) throw ConfigError("train.batch_size: must be positive");
  if (!(t.lr >= 0.0)) throw ConfigError("train.lr: must be a non-negative number");
  return t;
}

Json parse_text(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

}  // namespace

std::string model_config_to_json(const ModelConfig& c, int indent) { return model_to(c).dump(indent); }

ModelConfig parse_model_config(const std::string& text) { return model_from(parse_text(text)); }

std::string run_config_to_json(const RunConfig& c, int indent) {
  Json j;
  j["model"] = model_to(c.model);
  j["train"] = train_to(c.train);
  return j.dump(indent);
}

RunConfig parse_run_config(const std::string& text) {
  const auto j = parse_text(text);
  reject_unknown(j, {"model", "train"}, "config");
  RunConfig c;
  c.model = j.contains("model") ? model_from(j.at("model")) : ModelConfig{};
  if (j.contains("train")) c.train = train_from(j.at("train"));
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace mixssm
