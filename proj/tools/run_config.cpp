#include "run_config.hpp"

#include <fstream>
#include <set>

namespace kpt::cli {

using nlohmann::json;

namespace {

const std::set<std::string> kTopKeys = {
    "model",       "init",       "warmup_steps",   "total_steps", "peak_lr",          "beta1",
    "beta2",       "adam_eps",   "weight_decay",   "enabled_objectives", "seed",      "accum_steps",
    "min_freq",    "corpus",     "data",           "vocab",       "checkpoint",       "out",
    "beam_size",   "length_penalty", "max_gen_len", "unfreeze_decoder"};

const std::set<std::string> kModelKeys = {"vocab_size", "d_model",  "n_heads",      "n_enc_layers",
                                          "n_dec_layers", "d_ff",   "max_len",      "dropout_p",
                                          "n_categories", "n_boundary_labels"};

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        if (!allowed.count(key)) throw ConfigError("unknown config key '" + where + key + "'");
    }
}

template <typename T>
void read(const json& j, const char* key, T& field) {
    if (!j.contains(key)) return;
    try {
        field = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
}

// Literals built in C++ are signed even when positive; parsed ones are not.
bool non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// get<size_t>() would silently wrap -1
void read_count(const json& j, const char* key, std::size_t& field) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!non_negative_integer(v)) {
        throw ConfigError(std::string("config key '") + key + "' must be a non-negative integer");
    }
    field = v.get<std::size_t>();
}

ModelConfig model_from_json(const json& j) {
    if (j.is_string()) {
        try {
            return ModelConfig::preset(j.get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    if (!j.is_object()) throw ConfigError("config key 'model' must be a preset name or an object");
    reject_unknown(j, kModelKeys, "model.");
    ModelConfig m = ModelConfig::desk();
    read_count(j, "vocab_size", m.vocab_size);
    read_count(j, "d_model", m.d_model);
    read_count(j, "n_heads", m.n_heads);
    read_count(j, "n_enc_layers", m.n_enc_layers);
    read_count(j, "n_dec_layers", m.n_dec_layers);
    read_count(j, "d_ff", m.d_ff);
    read_count(j, "max_len", m.max_len);
    read(j, "dropout_p", m.dropout_p);
    read_count(j, "n_categories", m.n_categories);
    read_count(j, "n_boundary_labels", m.n_boundary_labels);
    return m;
}

}  // namespace

std::string init_name(InitScheme init) { return init == InitScheme::normal ? "normal" : "zero_output"; }

InitScheme init_from_name(const std::string& name) {
    if (name == "normal") return InitScheme::normal;
    if (name == "zero_output") return InitScheme::zero_output;
    throw ConfigError("unknown init scheme '" + name + "' (expected normal or zero_output)");
}

void RunConfig::validate() const {
    try {
        model.validate();
        schedule.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (objectives.empty()) throw ConfigError("enabled_objectives must name at least one objective");
    if (accum_steps == 0) throw ConfigError("accum_steps must be >= 1");
    if (min_freq == 0) throw ConfigError("min_freq must be >= 1");
    if (beam_size == 0) throw ConfigError("beam_size must be >= 1");
    if (max_gen_len == 0) throw ConfigError("max_gen_len must be >= 1");
    if (!(length_penalty >= 0.0)) throw ConfigError("length_penalty must be >= 0");
    if (!(adam.peak_lr > 0.0)) throw ConfigError("peak_lr must be > 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
        throw ConfigError("beta1 and beta2 must lie in [0, 1)");
    }
    if (!(adam.eps > 0.0)) throw ConfigError("adam_eps must be > 0");
    if (!(adam.weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (out.empty()) throw ConfigError("out must not be empty");
}

RunConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    reject_unknown(j, kTopKeys, "");
    RunConfig c;
    if (j.contains("model")) {
        c.model = model_from_json(j.at("model"));
        c.vocab_size_fixed = j.at("model").is_object() && j.at("model").contains("vocab_size");
    }
    if (j.contains("init")) {
        std::string name;
        read(j, "init", name);
        c.init = init_from_name(name);
    }
    read_count(j, "warmup_steps", c.schedule.warmup_steps);
    read_count(j, "total_steps", c.schedule.total_steps);
    read(j, "peak_lr", c.adam.peak_lr);
    read(j, "beta1", c.adam.beta1);
    read(j, "beta2", c.adam.beta2);
    read(j, "adam_eps", c.adam.eps);
    read(j, "weight_decay", c.adam.weight_decay);
    if (j.contains("enabled_objectives")) {
        std::vector<std::string> names;
        read(j, "enabled_objectives", names);
        c.objectives.clear();
        for (const auto& n : names) {
            try {
                c.objectives.insert(parse_objective(n));
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        }
    }
    if (j.contains("seed")) {
        const json& s = j.at("seed");
        if (!non_negative_integer(s)) throw ConfigError("config key 'seed' must be a non-negative integer");
        c.seed = s.get<std::uint64_t>();
    }
    read_count(j, "accum_steps", c.accum_steps);
    read_count(j, "min_freq", c.min_freq);
    read(j, "corpus", c.corpus);
    read(j, "data", c.data);
    read(j, "vocab", c.vocab);
    read(j, "checkpoint", c.checkpoint);
    read(j, "out", c.out);
    read_count(j, "beam_size", c.beam_size);
    read(j, "length_penalty", c.length_penalty);
    read_count(j, "max_gen_len", c.max_gen_len);
    read(j, "unfreeze_decoder", c.unfreeze_decoder);
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

json config_to_json(const RunConfig& c) {
    json objectives = json::array();
    for (Objective o : kAllObjectives) {
        if (c.objectives.count(o)) objectives.push_back(objective_name(o));
    }
    json model = {{"vocab_size", c.model.vocab_size},     {"d_model", c.model.d_model},
                  {"n_heads", c.model.n_heads},           {"n_enc_layers", c.model.n_enc_layers},
                  {"n_dec_layers", c.model.n_dec_layers}, {"d_ff", c.model.d_ff},
                  {"max_len", c.model.max_len},           {"dropout_p", c.model.dropout_p},
                  {"n_categories", c.model.n_categories}, {"n_boundary_labels", c.model.n_boundary_labels}};
    return json{{"model", model},
                {"init", init_name(c.init)},
                {"warmup_steps", c.schedule.warmup_steps},
                {"total_steps", c.schedule.total_steps},
                {"peak_lr", c.adam.peak_lr},
                {"beta1", c.adam.beta1},
                {"beta2", c.adam.beta2},
                {"adam_eps", c.adam.eps},
                {"weight_decay", c.adam.weight_decay},
                {"enabled_objectives", objectives},
                {"seed", c.seed},
                {"accum_steps", c.accum_steps},
                {"min_freq", c.min_freq},
                {"corpus", c.corpus},
                {"data", c.data},
                {"vocab", c.vocab},
                {"checkpoint", c.checkpoint},
                {"out", c.out},
                {"beam_size", c.beam_size},
                {"length_penalty", c.length_penalty},
                {"max_gen_len", c.max_gen_len},
                {"unfreeze_decoder", c.unfreeze_decoder}};
}

}  // namespace kpt::cli
