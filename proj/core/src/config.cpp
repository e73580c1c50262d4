// SPDX-License-Identifier: Apache-2.0
#include "pemma/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pemma/adaptation.hpp"
#include "pemma/errors.hpp"

namespace pemma {

using nlohmann::json;

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::pretrain: return "pretrain";
    case Stage::adapt: return "adapt";
    case Stage::continual: return "continual";
    case Stage::eval: return "eval";
    case Stage::prognosis: return "prognosis";
    default: return "report";
  }
}

Stage parse_stage(const std::string& s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "adapt") return Stage::adapt;
  if (s == "continual") return Stage::continual;
  if (s == "eval") return Stage::eval;
  if (s == "prognosis") return Stage::prognosis;
  if (s == "report") return Stage::report;
  throw ConfigError("unknown stage '" + s + "'");
}

const char* method_name(Method m) {
  switch (m) {
    case Method::pemma_lora: return "pemma_lora";
    case Method::pemma_dora: return "pemma_dora";
    case Method::early: return "early";
    default: return "late";
  }
}

Method parse_method(const std::string& m) {
  if (m == "pemma_lora") return Method::pemma_lora;
  if (m == "pemma_dora") return Method::pemma_dora;
  if (m == "early") return Method::early;
  if (m == "late") return Method::late;
  throw ConfigError("unknown method '" + m + "' (expected pemma_lora, pemma_dora, early or late)");
}

const char* scope_name(TrainScope s) { return s == TrainScope::peft_only ? "peft_only" : "wide"; }

TrainScope parse_scope(const std::string& s) {
  if (s == "peft_only") return TrainScope::peft_only;
  if (s == "wide") return TrainScope::wide;
  throw ConfigError("unknown scope '" + s + "' (expected peft_only or wide)");
}

const char* ct_inference_name(CtInference c) {
  return c == CtInference::native ? "native" : "joint";
}

CtInference parse_ct_inference(const std::string& s) {
  if (s == "native") return CtInference::native;
  if (s == "joint") return CtInference::joint;
  throw ConfigError("unknown ct_inference '" + s + "' (expected native or joint)");
}

double RunConfig::resolved_lr() const {
  if (lr > 0) return lr;
  switch (stage) {
    case Stage::pretrain: return 1e-3;
    case Stage::prognosis: return 1e-3;  // head-only training
    default: return 1e-4;
  }
}

int RunConfig::resolved_steps() const {
  if (steps > 0) return steps;
  switch (stage) {
    case Stage::pretrain: return 300;
    case Stage::adapt: return 200;
    case Stage::continual: return 100;
    default: return 0;
  }
}

AdaptationConfig RunConfig::adaptation() const {
  AdaptationConfig cfg;
  cfg.method = method == Method::pemma_dora ? AdaptMethod::dora : AdaptMethod::lora;
  cfg.rank = rank;
  cfg.alpha = alpha;
  cfg.targets = targets;
  cfg.dora_form = dora_form;
  return cfg;
}

void RunConfig::validate() const {
  geometry.validate();
  if (manifest_path.empty()) throw ConfigError("config: manifest path is required");
  if (out_dir.empty()) throw ConfigError("config: output directory is required");
  if (lr < 0) throw ConfigError("config: learning rate must be non-negative");
  if (steps < 0) throw ConfigError("config: step count must be non-negative");
  if (patience <= 0) throw ConfigError("config: patience must be positive");
  if (weight_decay < 0) throw ConfigError("config: weight decay must be non-negative");
  if (fg_weight < 1) throw ConfigError("config: foreground weight must be at least 1");
  if (eval_modes.empty()) throw ConfigError("config: at least one evaluation mode is required");
  if (continual_modes.empty()) throw ConfigError("config: at least one continual training mode is required");
  if (late_w_ct < 0 || late_w_ct > 1) throw ConfigError("config: late fusion weight must lie in [0, 1]");
  if (prognosis_hidden <= 0) throw ConfigError("config: prognosis hidden width must be positive");
  if (prognosis_bins <= 0) throw ConfigError("config: prognosis bin count must be positive");
  if (prognosis_steps < 0) throw ConfigError("config: prognosis step count must be non-negative");
  if (deephit_eta < 0) throw ConfigError("config: ranking weight must be non-negative");
  if (deephit_sigma <= 0) throw ConfigError("config: ranking temperature must be positive");
  dropout.validate();
  if (method == Method::pemma_lora || method == Method::pemma_dora) adaptation().validate();
  parse_pet_init(pet_init);  // rejects unknown strategies
}

namespace {

[[noreturn]] void bad_key(const std::string& where, const std::string& key) {
  throw ConfigError("config: unknown key '" + key + "' in " + where);
}

void check_keys(const json& obj, const std::string& where, const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ConfigError("config: " + where + " must be a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (allowed.find(it.key()) == allowed.end()) bad_key(where, it.key());
}

template <typename T>
T get_or(const json& obj, const std::string& key, const T& fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config: bad value for '" + key + "': " + e.what());
  }
}

std::vector<Mode> parse_modes(const json& arr, const std::string& key) {
  if (!arr.is_array()) throw ConfigError("config: '" + key + "' must be an array of mode names");
  std::vector<Mode> out;
  std::set<int> seen;
  for (const auto& item : arr) {
    if (!item.is_string()) throw ConfigError("config: '" + key + "' entries must be strings");
    Mode m = parse_mode(item.get<std::string>());
    if (!seen.insert(static_cast<int>(m)).second)
      throw ConfigError("config: duplicate mode in '" + key + "'");
    out.push_back(m);
  }
  return out;
}

std::vector<AttnTarget> parse_targets(const json& arr) {
  if (!arr.is_array()) throw ConfigError("config: 'adaptation.targets' must be an array");
  std::vector<AttnTarget> out;
  for (const auto& item : arr) {
    if (!item.is_string()) throw ConfigError("config: 'adaptation.targets' entries must be strings");
    const std::string s = item.get<std::string>();
    if (s == "q") out.push_back(AttnTarget::q);
    else if (s == "k") out.push_back(AttnTarget::k);
    else if (s == "v") out.push_back(AttnTarget::v);
    else if (s == "o") out.push_back(AttnTarget::o);
    else throw ConfigError("config: unknown attention target '" + s + "'");
  }
  return out;
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  check_keys(root, "run config",
             {"version", "stage", "manifest", "out", "seed", "geometry", "method", "adaptation",
              "training", "eval", "continual", "late", "pet_init", "ct_inference", "prognosis"});
  if (!root.contains("version")) throw ConfigError("config: missing 'version'");
  if (!root.at("version").is_number_integer() || root.at("version").get<int>() != 1)
    throw ConfigError("config: unsupported schema version (expected 1)");

  RunConfig cfg;
  if (root.contains("stage")) cfg.stage = parse_stage(get_or<std::string>(root, "stage", "pretrain"));
  cfg.manifest_path = get_or<std::string>(root, "manifest", "");
  cfg.out_dir = get_or<std::string>(root, "out", "");
  cfg.seed = get_or<uint64_t>(root, "seed", cfg.seed);
  if (root.contains("method")) cfg.method = parse_method(get_or<std::string>(root, "method", ""));
  if (root.contains("pet_init")) cfg.pet_init = get_or<std::string>(root, "pet_init", cfg.pet_init);
  if (root.contains("ct_inference"))
    cfg.ct_inference = parse_ct_inference(get_or<std::string>(root, "ct_inference", "native"));

  if (root.contains("geometry")) {
    const json& g = root.at("geometry");
    check_keys(g, "'geometry'",
               {"side", "patch", "dim", "heads", "blocks", "classes", "mlp_ratio", "decoder_channels"});
    cfg.geometry.side = get_or<int>(g, "side", cfg.geometry.side);
    cfg.geometry.patch = get_or<int>(g, "patch", cfg.geometry.patch);
    cfg.geometry.dim = get_or<int>(g, "dim", cfg.geometry.dim);
    cfg.geometry.heads = get_or<int>(g, "heads", cfg.geometry.heads);
    cfg.geometry.blocks = get_or<int>(g, "blocks", cfg.geometry.blocks);
    cfg.geometry.classes = get_or<int>(g, "classes", cfg.geometry.classes);
    cfg.geometry.mlp_ratio = get_or<int>(g, "mlp_ratio", cfg.geometry.mlp_ratio);
    cfg.geometry.decoder_channels = get_or<int>(g, "decoder_channels", cfg.geometry.decoder_channels);
  }

  if (root.contains("adaptation")) {
    const json& a = root.at("adaptation");
    check_keys(a, "'adaptation'", {"rank", "alpha", "targets", "dora_form"});
    cfg.rank = get_or<int>(a, "rank", cfg.rank);
    cfg.alpha = get_or<double>(a, "alpha", cfg.alpha);
    if (a.contains("targets")) cfg.targets = parse_targets(a.at("targets"));
    if (a.contains("dora_form")) {
      const std::string f = get_or<std::string>(a, "dora_form", "canonical");
      if (f == "canonical") cfg.dora_form = DoraForm::canonical;
      else if (f == "paper_literal") cfg.dora_form = DoraForm::paper_literal;
      else throw ConfigError("config: unknown dora_form '" + f + "'");
    }
  }

  if (root.contains("training")) {
    const json& t = root.at("training");
    check_keys(t, "'training'",
               {"lr", "steps", "patience", "augment", "weight_decay", "fg_weight", "dropout"});
    cfg.lr = get_or<double>(t, "lr", cfg.lr);
    cfg.steps = get_or<int>(t, "steps", cfg.steps);
    cfg.patience = get_or<int>(t, "patience", cfg.patience);
    cfg.augment = get_or<bool>(t, "augment", cfg.augment);
    cfg.weight_decay = get_or<double>(t, "weight_decay", cfg.weight_decay);
    cfg.fg_weight = get_or<double>(t, "fg_weight", cfg.fg_weight);
    if (t.contains("dropout")) {
      const json& d = t.at("dropout");
      check_keys(d, "'training.dropout'", {"ct", "pet", "ctpet"});
      cfg.dropout.p_ct = get_or<double>(d, "ct", cfg.dropout.p_ct);
      cfg.dropout.p_pet = get_or<double>(d, "pet", cfg.dropout.p_pet);
      cfg.dropout.p_ctpet = get_or<double>(d, "ctpet", cfg.dropout.p_ctpet);
    }
  }

  if (root.contains("eval")) {
    const json& e = root.at("eval");
    check_keys(e, "'eval'", {"modes"});
    if (e.contains("modes")) cfg.eval_modes = parse_modes(e.at("modes"), "eval.modes");
  }

  if (root.contains("continual")) {
    const json& c = root.at("continual");
    check_keys(c, "'continual'", {"scope", "modes", "center"});
    if (c.contains("scope")) cfg.scope = parse_scope(get_or<std::string>(c, "scope", "peft_only"));
    if (c.contains("modes")) cfg.continual_modes = parse_modes(c.at("modes"), "continual.modes");
    cfg.continual_center = get_or<std::string>(c, "center", cfg.continual_center);
  }

  if (root.contains("late")) {
    const json& l = root.at("late");
    check_keys(l, "'late'", {"w_ct"});
    cfg.late_w_ct = get_or<double>(l, "w_ct", cfg.late_w_ct);
  }

  if (root.contains("prognosis")) {
    const json& p = root.at("prognosis");
    check_keys(p, "'prognosis'", {"hidden", "bins", "steps", "eta", "sigma"});
    cfg.prognosis_hidden = get_or<int>(p, "hidden", cfg.prognosis_hidden);
    cfg.prognosis_bins = get_or<int>(p, "bins", cfg.prognosis_bins);
    cfg.prognosis_steps = get_or<int>(p, "steps", cfg.prognosis_steps);
    cfg.deephit_eta = get_or<double>(p, "eta", cfg.deephit_eta);
    cfg.deephit_sigma = get_or<double>(p, "sigma", cfg.deephit_sigma);
  }

  return cfg;
}

RunConfig parse_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config_text(buf.str());
}

std::string run_config_to_json(const RunConfig& cfg) {
  json root;
  root["version"] = 1;
  root["stage"] = stage_name(cfg.stage);
  root["manifest"] = cfg.manifest_path;
  root["out"] = cfg.out_dir;
  root["seed"] = cfg.seed;
  root["geometry"] = {{"side", cfg.geometry.side},
                      {"patch", cfg.geometry.patch},
                      {"dim", cfg.geometry.dim},
                      {"heads", cfg.geometry.heads},
                      {"blocks", cfg.geometry.blocks},
                      {"classes", cfg.geometry.classes},
                      {"mlp_ratio", cfg.geometry.mlp_ratio},
                      {"decoder_channels", cfg.geometry.decoder_channels}};
  root["method"] = method_name(cfg.method);
  json targets = json::array();
  for (AttnTarget t : cfg.targets) {
    switch (t) {
      case AttnTarget::q: targets.push_back("q"); break;
      case AttnTarget::k: targets.push_back("k"); break;
      case AttnTarget::v: targets.push_back("v"); break;
      default: targets.push_back("o"); break;
    }
  }
  root["adaptation"] = {{"rank", cfg.rank},
                        {"alpha", cfg.alpha},
                        {"targets", targets},
                        {"dora_form", cfg.dora_form == DoraForm::canonical ? "canonical" : "paper_literal"}};
  root["training"] = {{"lr", cfg.lr},
                      {"steps", cfg.steps},
                      {"patience", cfg.patience},
                      {"augment", cfg.augment},
                      {"weight_decay", cfg.weight_decay},
                      {"fg_weight", cfg.fg_weight},
                      {"dropout", {{"ct", cfg.dropout.p_ct}, {"pet", cfg.dropout.p_pet}, {"ctpet", cfg.dropout.p_ctpet}}}};
  json modes = json::array();
  for (Mode m : cfg.eval_modes) modes.push_back(mode_name(m));
  root["eval"] = {{"modes", modes}};
  json cmodes = json::array();
  for (Mode m : cfg.continual_modes) cmodes.push_back(mode_name(m));
  root["continual"] = {{"scope", scope_name(cfg.scope)}, {"modes", cmodes}, {"center", cfg.continual_center}};
  root["late"] = {{"w_ct", cfg.late_w_ct}};
  root["pet_init"] = cfg.pet_init;
  root["ct_inference"] = ct_inference_name(cfg.ct_inference);
  root["prognosis"] = {{"hidden", cfg.prognosis_hidden},
                       {"bins", cfg.prognosis_bins},
                       {"steps", cfg.prognosis_steps},
                       {"eta", cfg.deephit_eta},
                       {"sigma", cfg.deephit_sigma}};
  return root.dump(2) + "\n";
}

}  // namespace pemma
