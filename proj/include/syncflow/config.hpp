#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "json.hpp"

#include "syncflow/codec.hpp"
#include "syncflow/ddit.hpp"
#include "syncflow/eval.hpp"
#include "syncflow/rfm.hpp"
#include "syncflow/training.hpp"

namespace syncflow {

using Json = nlohmann::ordered_json;

struct DataConfig {
    int n_train = 512;
    int n_val = 64;
    int n_test = 64;
    std::uint64_t seed = 1234; // run seed: data, model init, training RNG
};

struct SampleConfig {
    rfm::SampleMode mode = rfm::SampleMode::kT2AV;
    double guidance = 6.0;
    int steps = 50;
    std::uint64_t seed = 0;
};

struct RunConfig {
    CodecConfig codec;
    TowerConfig tower;
    train::StageSpec stage;
    SampleConfig sample;
    eval::EvalConfig eval;
    DataConfig data;

    void validate() const; // ConfigError
};

// Every field is optional on input; unknown keys are a ConfigError.
Json to_json(const CodecConfig& c);
Json to_json(const TowerConfig& c);
Json to_json(const train::StageSpec& s);
Json to_json(const SampleConfig& s);
Json to_json(const eval::EvalConfig& e);
Json to_json(const DataConfig& d);
Json to_json(const RunConfig& r);

CodecConfig codec_from_json(const Json& j);
TowerConfig tower_from_json(const Json& j);
train::StageSpec stage_from_json(const Json& j);
SampleConfig sample_from_json(const Json& j);
eval::EvalConfig eval_from_json(const Json& j);
DataConfig data_from_json(const Json& j);
RunConfig run_config_from_json(const Json& j);

RunConfig parse_run_config(const std::string& text); // ConfigError on bad JSON
RunConfig load_run_config(const std::string& path);
std::string dump_run_config(const RunConfig& r);

// Seed precedence: flag > SYNCFLOW_SEED > config.
std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t config_value);

} // namespace syncflow
