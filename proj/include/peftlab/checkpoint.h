#pragma once

#include <filesystem>
#include <json.hpp>
#include <string>
#include <string_view>

#include "peftlab/adapters.h"
#include "peftlab/model.h"

namespace peftlab {

inline constexpr int kCheckpointVersion = 1;

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);  // throws ConfigError
nlohmann::json to_json(const AdapterConfig& c);
AdapterConfig adapter_config_from_json(const nlohmann::json& j);  // throws ConfigError

// {"format":"peftlab-model","version":1,"config":{...},"params":{name:[...]}}
// Keys are sorted, so equal parameters always serialize to equal bytes.
std::string serialize_model(const ModelParams& params);
ModelParams deserialize_model(std::string_view text);  // throws DataError

// Adapter tensors keyed by "<site>.<a|b|alpha|keep|gamma>".
std::string serialize_adapters(const AdapterSet& adapters);
AdapterSet deserialize_adapters(std::string_view text, const ModelConfig& model);  // throws DataError

std::string read_text_file(const std::filesystem::path& path);  // throws DataError
// Writes via a sibling temp file and rename.
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace peftlab
