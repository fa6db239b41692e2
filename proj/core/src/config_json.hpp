#pragma once

// JSON (de)serialization helpers shared by the config parser and the
// checkpoint manifest. Not installed; internal to the library build.

#include <nlohmann/json.hpp>
#include <string>

#include "qtrain/config.hpp"
#include "qtrain/errors.hpp"

namespace qtrain::detail {

using json = nlohmann::json;

// Throws ConfigError if `obj` holds a key outside `allowed`. `path` names
// the object in messages ("model.quant.qkv").
void check_keys(const json& obj, const std::string& path,
                std::initializer_list<const char*> allowed);

json quant_config_to_json(const QuantConfig& cfg);
QuantConfig quant_config_from_json(const json& j, const std::string& path);

json layer_spec_to_json(const LayerQuantSpec& spec);
LayerQuantSpec layer_spec_from_json(const json& j, const std::string& path);

json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const json& j, const std::string& path);

json adam_hyper_to_json(const AdamHyper& h);
AdamHyper adam_hyper_from_json(const json& j, const std::string& path);

json moment_quant_to_json(const MomentQuantConfig& mq);
MomentQuantConfig moment_quant_from_json(const json& j, const std::string& path);

}  // namespace qtrain::detail
