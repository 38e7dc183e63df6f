#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualdiff/model.hpp"
#include "dualdiff/scene.hpp"
#include "dualdiff/train.hpp"

namespace dualdiff {

/// Malformed or inconsistent configuration; the message names the key.
class ConfigError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct PathsConfig {
    std::string scenes_dir = "scenes";
    std::string checkpoint = "checkpoint.dckp";
    std::string out_dir = "out";
};

struct DatasetConfig {
    std::int64_t count = 256;
    GeneratorSpec generator;
};

/// near / far of zero select default_plan's values for each scene.
struct PlanConfig {
    std::int64_t samples = 32;
    double near = 0.0;
    double far = 0.0;

    SamplingPlan for_grid(const OccupancyGrid& grid) const;
};

struct ModelSection {
    std::int64_t unet_base = 32;
    std::int64_t width = 64;  // encoder, SFA condition and cross-attention width
    std::int64_t c_txt = 32;
    std::int64_t d_v = 64;
    std::int64_t heads = 1;
    std::int64_t k_def = 4;
    std::int64_t ors_class_width = 4;
    std::string dtype = "f32";
};

struct VerifyToggles {
    bool ors = true;
    bool gradients = true;
    bool masks = true;
    bool schedule = true;
    bool sfa = true;
    bool model = true;
};

struct RunConfig {
    std::uint64_t seed = 0;
    PathsConfig paths;
    DatasetConfig dataset;
    PlanConfig plan;
    ModelSection model;
    TrainConfig train;  // train.seed is ignored; the global seed is used
    std::int64_t checkpoint_every = 500;
    VerifyToggles verify;
};

/// Throws ConfigError on unknown keys, wrong types or invalid values.
RunConfig config_from_json(const std::string& text);
/// Canonical form: every key present, keys sorted, compact.
std::string config_to_json(const RunConfig& cfg);
void validate_config(const RunConfig& cfg);

/// Lower-case hex SHA-256.
std::string sha256_hex(const std::string& bytes);
/// Digest of the canonical document.
std::string config_hash(const RunConfig& cfg);
/// Digest of the sections that fix parameter shapes (model, plan samples).
std::string model_hash(const RunConfig& cfg);
/// Digest of everything a resumed run must share with the interrupted one:
/// model_hash inputs plus the train section without its step count.
std::string resume_hash(const RunConfig& cfg);

ModelConfig to_model_config(const RunConfig& cfg);
DType model_dtype(const RunConfig& cfg);

struct Manifest {
    int version = 1;
    std::int64_t scene_count = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> files;
    std::string config_hash;
};

std::string manifest_to_json(const Manifest& m);
Manifest manifest_from_json(const std::string& text);

inline constexpr const char* kManifestName = "manifest.json";
std::string scene_file_name(std::int64_t index);

}  // namespace dualdiff
