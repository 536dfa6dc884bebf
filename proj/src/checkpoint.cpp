#include "peftlab/checkpoint.h"

#include <fstream>
#include <sstream>

#include "peftlab/errors.h"

namespace peftlab {

using nlohmann::json;

namespace {

constexpr const char* kModelFormat = "peftlab-model";
constexpr const char* kAdapterFormat = "peftlab-adapters";

json tensor_values(const Tensor& t) { return json(std::vector<double>(t.values().begin(), t.values().end())); }

void load_values(const json& j, const std::string& name, Tensor& t) {
    if (!j.contains(name)) throw DataError("checkpoint is missing tensor '" + name + "'");
    const auto values = j.at(name).get<std::vector<double>>();
    if (values.size() != t.numel()) {
        throw DataError("checkpoint tensor '" + name + "' has " + std::to_string(values.size()) +
                        " values, expected " + std::to_string(t.numel()));
    }
    std::copy(values.begin(), values.end(), t.mutable_values().begin());
}

json parse_container(std::string_view text, const char* format) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || j.value("format", "") != format) {
        throw DataError(std::string("checkpoint format is not '") + format + "'");
    }
    if (j.value("version", 0) != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + j.value("version", json()).dump());
    }
    return j;
}

}  // namespace

json to_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_heads", c.n_heads},
                {"n_enc_layers", c.n_enc_layers}, {"n_dec_layers", c.n_dec_layers}, {"d_ff", c.d_ff},
                {"max_seq_len", c.max_seq_len}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    try {
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.d_model = j.value("d_model", c.d_model);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.n_enc_layers = j.value("n_enc_layers", c.n_enc_layers);
        c.n_dec_layers = j.value("n_dec_layers", c.n_dec_layers);
        c.d_ff = j.value("d_ff", c.d_ff);
        c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

json to_json(const AdapterConfig& c) {
    json targets = json::array();
    for (auto k : c.target_sites) targets.push_back(to_string(k));
    json j{{"method", to_string(c.method)}, {"rank", c.rank},       {"target_sites", targets},
           {"lambda", c.lambda},            {"budget", c.budget},   {"dropout", c.dropout}};
    j["last_n"] = c.last_n ? json(*c.last_n) : json(nullptr);
    return j;
}

AdapterConfig adapter_config_from_json(const json& j) {
    try {
        AdapterConfig c;
        c.method = parse_adapter_method(j.at("method").get<std::string>());
        c.rank = j.value("rank", c.rank);
        c.lambda = j.value("lambda", c.lambda);
        c.budget = j.value("budget", c.budget);
        c.dropout = j.value("dropout", c.dropout);
        if (j.contains("last_n") && !j.at("last_n").is_null()) c.last_n = j.at("last_n").get<std::size_t>();
        if (j.contains("target_sites")) {
            for (const auto& s : j.at("target_sites")) c.target_sites.insert(parse_site_kind(s.get<std::string>()));
        } else {
            c.target_sites = AdapterConfig::default_targets(c.method);
        }
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("adapter config: ") + e.what());
    } catch (const DataError& e) {
        throw ConfigError(std::string("adapter config: ") + e.what());
    }
}

std::string serialize_model(const ModelParams& params) {
    json p = json::object();
    for (const auto& [name, t] : params.named()) p[name] = tensor_values(t);
    json j{{"format", kModelFormat}, {"version", kCheckpointVersion}, {"config", to_json(params.config)},
           {"params", std::move(p)}};
    return j.dump() + "\n";
}

ModelParams deserialize_model(std::string_view text) {
    const json j = parse_container(text, kModelFormat);
    ModelConfig config;
    try {
        config = model_config_from_json(j.at("config"));
    } catch (const std::exception& e) {
        throw DataError(std::string("model checkpoint config: ") + e.what());
    }
    ModelParams params = zero_model(config);
    const json& p = j.at("params");
    const auto named = params.named();
    if (p.size() != named.size()) {
        throw DataError("model checkpoint has " + std::to_string(p.size()) + " tensors, expected " +
                        std::to_string(named.size()));
    }
    for (auto [name, t] : named) load_values(p, name, t);
    return params;
}

std::string serialize_adapters(const AdapterSet& adapters) {
    json t = json::object();
    for (const auto& [site, state] : adapters.sites()) {
        const std::string prefix = site.str() + ".";
        if (const auto* s = std::get_if<LoraSite>(&state)) {
            t[prefix + "a"] = tensor_values(s->a);
            t[prefix + "b"] = tensor_values(s->b);
        } else if (const auto* s = std::get_if<AdaLoraSite>(&state)) {
            t[prefix + "a"] = tensor_values(s->a);
            t[prefix + "alpha"] = tensor_values(s->alpha);
            t[prefix + "b"] = tensor_values(s->b);
            t[prefix + "keep"] = tensor_values(s->keep);
        } else if (const auto* s = std::get_if<Ia3Site>(&state)) {
            t[prefix + "gamma"] = tensor_values(s->gamma);
        }
    }
    json j{{"format", kAdapterFormat}, {"version", kCheckpointVersion},
           {"config", to_json(adapters.config())}, {"sites", std::move(t)}};
    return j.dump() + "\n";
}

AdapterSet deserialize_adapters(std::string_view text, const ModelConfig& model) {
    const json j = parse_container(text, kAdapterFormat);
    AdapterSet set;
    try {
        set = init_adapters(adapter_config_from_json(j.at("config")), model, 0);
    } catch (const ConfigError& e) {
        throw DataError(std::string("adapter checkpoint does not fit this model: ") + e.what());
    }
    const json& t = j.at("sites");
    std::size_t expected = 0;
    for (auto& [site, state] : set.mutable_sites()) {
        const std::string prefix = site.str() + ".";
        if (auto* s = std::get_if<LoraSite>(&state)) {
            load_values(t, prefix + "a", s->a);
            load_values(t, prefix + "b", s->b);
            expected += 2;
        } else if (auto* s = std::get_if<AdaLoraSite>(&state)) {
            load_values(t, prefix + "a", s->a);
            load_values(t, prefix + "alpha", s->alpha);
            load_values(t, prefix + "b", s->b);
            load_values(t, prefix + "keep", s->keep);
            expected += 4;
        } else if (auto* s = std::get_if<Ia3Site>(&state)) {
            load_values(t, prefix + "gamma", s->gamma);
            expected += 1;
        }
    }
    if (t.size() != expected) throw DataError("adapter checkpoint has tensors for unknown sites");
    return set;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) throw DataError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace peftlab
