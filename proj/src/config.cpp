#include "keepfit/config.hpp"

#include <sstream>

#include "keepfit/checkpoint.hpp"

namespace keepfit::config {

json defaults() {
    const data::SyntheticCorpusSpec corpus;
    const encoders::TextEncoderConfig text;
    const mlm::MlmConfig mlm_config;
    const ibq::AutoencoderConfig cb;
    const trainer::ModelConfig model_config;
    const trainer::TrainConfig train_config;
    const eval::EvalTask task;
    const eval::FewShotConfig& fs = task.few_shot;

    json j;
    j["data"] = {{"classes", corpus.n_classes},
                 {"elite", corpus.n_elite},
                 {"categorical", corpus.n_categorical},
                 {"image_size", corpus.image_size},
                 {"variants", corpus.n_variants},
                 {"seed", corpus.seed},
                 {"elite_ground_truth", corpus.elite_ground_truth},
                 {"out", ""}};
    j["text"] = {{"corpus", ""},
                 {"data", ""},
                 {"sentences", 2000},
                 {"steps", mlm_config.steps},
                 {"batch_size", mlm_config.batch_size},
                 {"lr", mlm_config.lr},
                 {"weight_decay", mlm_config.weight_decay},
                 {"mask_fraction", mlm_config.policy.mask_fraction},
                 {"mask_token", mlm_config.policy.mask_token},
                 {"random_token", mlm_config.policy.random_token},
                 {"max_tokens", text.max_tokens},
                 {"hidden_dim", text.hidden_dim},
                 {"layers", text.n_layers},
                 {"heads", text.n_heads},
                 {"ffn_dim", text.ffn_dim},
                 {"seed", mlm_config.seed},
                 {"resume", ""},
                 {"out", ""}};
    j["codebook"] = {{"data", ""},
                     {"size", cb.codebook_size},
                     {"dim", cb.code_dim},
                     {"input_size", cb.input_size},
                     {"hidden_channels", cb.hidden_channels},
                     {"steps", cb.steps},
                     {"batch_size", cb.batch_size},
                     {"lr", cb.lr},
                     {"commitment_beta", cb.commitment_beta},
                     {"entropy_weight", cb.entropy_weight},
                     {"seed", cb.seed},
                     {"out", ""}};
    j["model"] = {{"backbone", "small-conv"},
                  {"input_size", model_config.image.input_size},
                  {"channels", model_config.image.channels},
                  {"strides", model_config.image.strides},
                  {"shared_dim", model_config.shared_dim},
                  {"attention_heads", model_config.attention_heads},
                  {"temperature_init", model_config.temperature_init}};
    j["train"] = {{"data", ""},
                  {"codebook", ""},
                  {"text_init", ""},
                  {"lambda1", train_config.lambda1},
                  {"lambda2", train_config.lambda2},
                  {"lr", train_config.lr},
                  {"weight_decay", train_config.weight_decay},
                  {"warmup_epochs", train_config.warmup_epochs},
                  {"epochs", train_config.epochs},
                  {"batch_size", train_config.batch_size},
                  {"ek_elite_gradient", train_config.ek_elite_gradient},
                  {"seed", train_config.seed},
                  {"out", ""}};
    j["eval"] = {{"data", ""},
                 {"run", ""},
                 {"setting", eval::to_string(task.setting)},
                 {"folds", task.folds},
                 {"seed", task.seed},
                 {"labeled_only", task.labeled_only},
                 {"shots", fs.shots},
                 {"adapter", eval::to_string(fs.adapter)},
                 {"clip_ratio", fs.clip_ratio},
                 {"clip_epochs", fs.clip_epochs},
                 {"tip_f_epochs", fs.tip_f_epochs},
                 {"probe_max_epochs", task.linear_probe.max_epochs},
                 {"probe_lr", task.linear_probe.lr},
                 {"probe_tolerance", task.linear_probe.tolerance},
                 {"out", ""}};
    return j;
}

namespace {

bool compatible(const json& def, const json& v) {
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_string()) return v.is_string();
    if (def.is_number_unsigned()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    if (def.is_number_integer()) return v.is_number_integer();
    if (def.is_number_float()) return v.is_number();
    if (def.is_array()) {
        if (!v.is_array()) return false;
        for (const auto& x : v) {
            if (!def.empty() && !compatible(def.front(), x)) return false;
        }
        return true;
    }
    return false;
}

std::string type_name(const json& v) {
    if (v.is_number_unsigned()) return "non-negative integer";
    if (v.is_number_float()) return "number";
    if (v.is_array()) return "array";
    return v.type_name();
}

void set_key(json& config, const std::string& section, const std::string& key, const json& value,
             const std::string& origin) {
    if (!config.contains(section)) throw UsageError(origin + ": unknown config section '" + section + "'");
    json& sec = config[section];
    if (!sec.contains(key)) throw UsageError(origin + ": unknown config key '" + section + "." + key + "'");
    if (!compatible(sec[key], value)) {
        throw UsageError(origin + ": '" + section + "." + key + "' expects a " + type_name(sec[key]) + ", got " +
                         value.dump());
    }
    sec[key] = sec[key].is_number_float() ? json(value.get<double>()) : value;
}

} // namespace

void merge(json& base, const json& patch, const std::string& origin) {
    if (!patch.is_object()) throw UsageError(origin + ": config must be a JSON object");
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        if (!it.value().is_object()) throw UsageError(origin + ": section '" + it.key() + "' must be an object");
        for (auto kv = it.value().begin(); kv != it.value().end(); ++kv) set_key(base, it.key(), kv.key(), kv.value(), origin);
    }
}

void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
        throw UsageError("override '" + assignment + "' is not of the form section.key=value");
    }
    const std::string section = assignment.substr(0, dot);
    const std::string key = assignment.substr(dot + 1, eq - dot - 1);
    const std::string raw = assignment.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    // A path like "123" or "true" is still a string when the key is one.
    const json& def = config.contains(section) && config[section].contains(key) ? config[section][key] : json();
    if (def.is_string() && !value.is_string()) value = raw;
    set_key(config, section, key, value, "--set " + assignment);
}

json resolve(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
    json config = defaults();
    if (!file.empty()) {
        json patch;
        try {
            patch = json::parse(read_file(file));
        } catch (const json::exception& e) {
            throw UsageError(file.string() + ": " + e.what());
        }
        merge(config, patch, file.string());
    }
    for (const auto& o : overrides) apply_override(config, o);
    return config;
}

std::string describe(const json& config) {
    std::ostringstream out;
    for (auto sec = config.begin(); sec != config.end(); ++sec) {
        for (auto kv = sec.value().begin(); kv != sec.value().end(); ++kv) {
            out << "  " << sec.key() << "." << kv.key() << " = " << kv.value().dump() << "\n";
        }
    }
    return out.str();
}

data::SyntheticCorpusSpec corpus_spec(const json& config) {
    const json& d = config.at("data");
    data::SyntheticCorpusSpec s;
    s.n_classes = d.at("classes").get<int>();
    s.n_elite = d.at("elite").get<int>();
    s.n_categorical = d.at("categorical").get<int>();
    s.image_size = d.at("image_size").get<std::size_t>();
    s.n_variants = d.at("variants").get<std::size_t>();
    s.seed = d.at("seed").get<std::uint64_t>();
    s.elite_ground_truth = d.at("elite_ground_truth").get<bool>();
    s.validate();
    return s;
}

encoders::TextEncoderConfig text_encoder(const json& config) {
    const json& t = config.at("text");
    encoders::TextEncoderConfig c;
    c.max_tokens = t.at("max_tokens").get<std::size_t>();
    c.hidden_dim = t.at("hidden_dim").get<std::size_t>();
    c.n_layers = t.at("layers").get<std::size_t>();
    c.n_heads = t.at("heads").get<std::size_t>();
    c.ffn_dim = t.at("ffn_dim").get<std::size_t>();
    return c;
}

mlm::MlmConfig mlm(const json& config) {
    const json& t = config.at("text");
    mlm::MlmConfig c;
    c.steps = t.at("steps").get<std::size_t>();
    c.batch_size = t.at("batch_size").get<std::size_t>();
    c.lr = t.at("lr").get<double>();
    c.weight_decay = t.at("weight_decay").get<double>();
    c.policy.mask_fraction = t.at("mask_fraction").get<double>();
    c.policy.mask_token = t.at("mask_token").get<double>();
    c.policy.random_token = t.at("random_token").get<double>();
    c.seed = t.at("seed").get<std::uint64_t>();
    c.policy.validate();
    if (c.steps == 0) throw UsageError("text.steps must be positive");
    if (!(c.lr > 0.0)) throw UsageError("text.lr must be positive");
    return c;
}

ibq::AutoencoderConfig codebook(const json& config) {
    const json& c = config.at("codebook");
    ibq::AutoencoderConfig a;
    a.codebook_size = c.at("size").get<std::size_t>();
    a.code_dim = c.at("dim").get<std::size_t>();
    a.input_size = c.at("input_size").get<std::size_t>();
    a.hidden_channels = c.at("hidden_channels").get<std::size_t>();
    a.steps = c.at("steps").get<std::size_t>();
    a.batch_size = c.at("batch_size").get<std::size_t>();
    a.lr = c.at("lr").get<double>();
    a.commitment_beta = c.at("commitment_beta").get<double>();
    a.entropy_weight = c.at("entropy_weight").get<double>();
    a.seed = c.at("seed").get<std::uint64_t>();
    a.validate();
    return a;
}

trainer::ModelConfig model(const json& config) {
    const json& m = config.at("model");
    trainer::ModelConfig c;
    c.image = encoders::image_config_from_json({{"backbone", m.at("backbone")},
                                                {"input_size", m.at("input_size")},
                                                {"channels", m.at("channels")},
                                                {"strides", m.at("strides")}});
    c.text = text_encoder(config);
    c.shared_dim = m.at("shared_dim").get<std::size_t>();
    c.attention_heads = m.at("attention_heads").get<std::size_t>();
    c.code_dim = config.at("codebook").at("dim").get<std::size_t>();
    c.temperature_init = m.at("temperature_init").get<double>();
    c.image.validate();
    return c;
}

trainer::TrainConfig train(const json& config) {
    const json& t = config.at("train");
    trainer::TrainConfig c;
    c.lambda1 = t.at("lambda1").get<double>();
    c.lambda2 = t.at("lambda2").get<double>();
    c.lr = t.at("lr").get<double>();
    c.weight_decay = t.at("weight_decay").get<double>();
    c.warmup_epochs = t.at("warmup_epochs").get<std::size_t>();
    c.epochs = t.at("epochs").get<std::size_t>();
    c.batch_size = t.at("batch_size").get<std::size_t>();
    c.ek_elite_gradient = t.at("ek_elite_gradient").get<bool>();
    c.seed = t.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
}

eval::EvalTask eval_task(const json& config) {
    const json& e = config.at("eval");
    eval::EvalTask t;
    t.setting = eval::parse_setting(e.at("setting").get<std::string>());
    t.folds = e.at("folds").get<std::size_t>();
    if (t.folds == 0) throw UsageError("eval.folds must be positive");
    t.seed = e.at("seed").get<std::uint64_t>();
    t.labeled_only = e.at("labeled_only").get<bool>();
    t.few_shot.shots = e.at("shots").get<std::size_t>();
    t.few_shot.adapter = eval::parse_adapter(e.at("adapter").get<std::string>());
    t.few_shot.clip_ratio = e.at("clip_ratio").get<double>();
    t.few_shot.clip_epochs = e.at("clip_epochs").get<std::size_t>();
    t.few_shot.tip_f_epochs = e.at("tip_f_epochs").get<std::size_t>();
    t.linear_probe.max_epochs = e.at("probe_max_epochs").get<std::size_t>();
    t.linear_probe.lr = e.at("probe_lr").get<double>();
    t.linear_probe.tolerance = e.at("probe_tolerance").get<double>();
    if (t.setting == eval::Setting::few_shot && t.few_shot.shots == 0) throw UsageError("eval.shots must be positive");
    return t;
}

} // namespace keepfit::config
