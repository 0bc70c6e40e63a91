#include "medvit/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace medvit {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + ": bad value for '" + key + "'");
  }
}

std::string projection_name(KanProjection p) { return p == KanProjection::Rswaf ? "rswaf" : "linear"; }

KanProjection parse_projection(const std::string& name) {
  if (name == "rswaf") return KanProjection::Rswaf;
  if (name == "linear") return KanProjection::Linear;
  throw ConfigError("model: kan_projection must be 'rswaf' or 'linear'");
}

json stage_json(const StageSpec& s) {
  return {{"channels", s.channels}, {"lfp_per_group", s.lfp_per_group}, {"groups", s.groups},
          {"has_gfp", s.has_gfp},   {"reduction", s.reduction},         {"dilation", s.dilation}};
}

StageSpec parse_stage(const json& j, std::size_t i) {
  const std::string where = "model.stages[" + std::to_string(i) + "]";
  reject_unknown(j, {"channels", "lfp_per_group", "groups", "has_gfp", "reduction", "dilation"}, where);
  StageSpec s;
  read(j, "channels", s.channels, where);
  read(j, "lfp_per_group", s.lfp_per_group, where);
  read(j, "groups", s.groups, where);
  read(j, "has_gfp", s.has_gfp, where);
  read(j, "reduction", s.reduction, where);
  read(j, "dilation", s.dilation, where);
  return s;
}

json model_json(const ModelConfig& c) {
  json stages = json::array();
  for (const auto& s : c.stages) stages.push_back(stage_json(s));
  return {{"name", c.name},
          {"in_channels", c.in_channels},
          {"stem_channels", c.stem_channels},
          {"stem_strides", c.stem_strides},
          {"stages", stages},
          {"k", c.k},
          {"head_dim", c.head_dim},
          {"shrink", c.shrink},
          {"lffn_expansion", c.lffn_expansion},
          {"kan_expansion", c.kan_expansion},
          {"kan_centers", c.kan_centers},
          {"kan_projection", projection_name(c.kan_projection)},
          {"num_classes", c.num_classes},
          {"resolution", c.resolution}};
}

ModelConfig model_from(const json& j) {
  const std::string where = "model";
  reject_unknown(j,
                 {"variant", "name", "in_channels", "stem_channels", "stem_strides", "stages", "k", "head_dim",
                  "shrink", "lffn_expansion", "kan_expansion", "kan_centers", "kan_projection", "num_classes",
                  "resolution"},
                 where);
  ModelConfig c;
  if (j.contains("variant")) {
    try {
      c = ModelConfig::variant(j.at("variant").get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(std::string("model: ") + e.what());
    }
  }
  read(j, "name", c.name, where);
  read(j, "in_channels", c.in_channels, where);
  read(j, "stem_channels", c.stem_channels, where);
  read(j, "stem_strides", c.stem_strides, where);
  if (j.contains("stages")) {
    if (!j["stages"].is_array()) throw ConfigError("model: 'stages' must be an array");
    c.stages.clear();
    for (std::size_t i = 0; i < j["stages"].size(); ++i) c.stages.push_back(parse_stage(j["stages"][i], i));
  }
  read(j, "k", c.k, where);
  read(j, "head_dim", c.head_dim, where);
  read(j, "shrink", c.shrink, where);
  read(j, "lffn_expansion", c.lffn_expansion, where);
  read(j, "kan_expansion", c.kan_expansion, where);
  read(j, "kan_centers", c.kan_centers, where);
  if (j.contains("kan_projection")) {
    std::string p;
    read(j, "kan_projection", p, where);
    c.kan_projection = parse_projection(p);
  }
  read(j, "num_classes", c.num_classes, where);
  read(j, "resolution", c.resolution, where);
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return c;
}

json train_json(const train::TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"decay", t.decay},
          {"milestones", t.milestones},
          {"beta1", t.adamw.beta1},
          {"beta2", t.adamw.beta2},
          {"eps", t.adamw.eps},
          {"weight_decay", t.adamw.weight_decay},
          {"seed", t.seed},
          {"resolution", t.resolution},
          {"target_train_accuracy", t.target_train_accuracy}};
}

train::TrainConfig train_from(const json& j) {
  const std::string where = "train";
  reject_unknown(j,
                 {"preset", "epochs", "batch_size", "lr", "decay", "milestones", "beta1", "beta2", "eps",
                  "weight_decay", "seed", "resolution", "target_train_accuracy"},
                 where);
  train::TrainConfig t;
  if (j.contains("preset")) {
    try {
      t = train::TrainConfig::preset(j.at("preset").get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(std::string("train: ") + e.what());
    }
  }
  read(j, "epochs", t.epochs, where);
  read(j, "batch_size", t.batch_size, where);
  read(j, "lr", t.lr, where);
  read(j, "decay", t.decay, where);
  read(j, "milestones", t.milestones, where);
  read(j, "beta1", t.adamw.beta1, where);
  read(j, "beta2", t.adamw.beta2, where);
  read(j, "eps", t.adamw.eps, where);
  read(j, "weight_decay", t.adamw.weight_decay, where);
  read(j, "seed", t.seed, where);
  read(j, "resolution", t.resolution, where);
  read(j, "target_train_accuracy", t.target_train_accuracy, where);
  try {
    t.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return t;
}

json parse_text(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

}  // namespace

std::string model_config_json(const ModelConfig& cfg) { return model_json(cfg).dump(); }

ModelConfig parse_model_config(const std::string& text) { return model_from(parse_text(text)); }

std::string run_config_json(const RunConfig& cfg) {
  return json{{"model", model_json(cfg.model)}, {"train", train_json(cfg.train)}}.dump(2);
}

RunConfig parse_run_config(const std::string& text) {
  const json j = parse_text(text);
  reject_unknown(j, {"model", "train"}, "config");
  RunConfig cfg;
  if (j.contains("model")) cfg.model = model_from(j["model"]);
  if (j.contains("train")) cfg.train = train_from(j["train"]);
  if (!j.contains("train") || !j["train"].contains("resolution")) cfg.train.resolution = cfg.model.resolution;
  if (cfg.train.resolution != cfg.model.resolution) {
    throw ConfigError("config: train.resolution differs from model.resolution");
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace medvit
