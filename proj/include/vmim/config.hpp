#pragma once

#include "json.hpp"
#include "vmim/infer.hpp"
#include "vmim/models.hpp"
#include "vmim/patch.hpp"
#include "vmim/train.hpp"

namespace vmim {

using Json = nlohmann::json;

void to_json(Json& j, const ViTConfig& c);
void from_json(const Json& j, ViTConfig& c);
void to_json(Json& j, const MAEDecoderConfig& c);
void from_json(const Json& j, MAEDecoderConfig& c);
void to_json(Json& j, const SimCLRConfig& c);
void from_json(const Json& j, SimCLRConfig& c);
void to_json(Json& j, const UNETRConfig& c);
void from_json(const Json& j, UNETRConfig& c);
void to_json(Json& j, const ModelConfig& c);
void from_json(const Json& j, ModelConfig& c);
void to_json(Json& j, const MaskingConfig& c);
void from_json(const Json& j, MaskingConfig& c);
void to_json(Json& j, const SlidingWindowConfig& c);
void from_json(const Json& j, SlidingWindowConfig& c);
void to_json(Json& j, const TrainConfig& c);
void from_json(const Json& j, TrainConfig& c);

}  // namespace vmim
