#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dualdiff/autodiff.hpp"

namespace dualdiff {

struct Parameter {
    std::string name;
    ad::Var var;
    bool trainable = true;
};

/// Owns every parameter of a model under unique slash-separated names.
/// References returned by add/get stay valid for the store's lifetime.
class ParameterStore {
   public:
    ParameterStore(DType dtype, std::uint64_t seed) : dtype_(dtype), rng_(seed) {}

    ad::Var add(const std::string& name, Tensor init, bool trainable = true);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Parameter& get(const std::string& name);
    const Parameter& get(const std::string& name) const;

    std::vector<Parameter*> all();
    std::vector<const Parameter*> all() const;
    std::vector<Parameter*> with_prefix(std::string_view prefix);
    std::size_t size() const { return params_.size(); }

    void set_trainable(std::string_view prefix, bool trainable);
    void zero_grad();

    DType dtype() const { return dtype_; }
    std::mt19937_64& rng() { return rng_; }

    // FNV-1a over names and raw payloads of parameters under prefix.
    std::uint64_t digest(std::string_view prefix = "") const;

   private:
    DType dtype_;
    std::mt19937_64 rng_;
    std::deque<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

Tensor uniform_tensor(Shape shape, DType dtype, std::mt19937_64& rng, double bound);
Tensor normal_tensor(Shape shape, DType dtype, std::mt19937_64& rng, double stddev);

// Checkpoint file: "DCKP", version u32, count u32, then per record
// name length u16, utf-8 name, dtype u8, rank u8, extents u32 each, and the
// raw little-endian payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
    std::string name;
    Tensor tensor;
};

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointRecord> records);
std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path);

std::vector<CheckpointRecord> export_parameters(const ParameterStore& store);
// Copies matching records into the store; every store parameter must be present
// with an identical shape and dtype. Records with unknown names are ignored.
void import_parameters(ParameterStore& store, std::span<const CheckpointRecord> records);

struct AdamConfig {
    double lr = 8e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adaptive-moment optimizer with bias correction; one (m, v) slot per parameter.
class Adam {
   public:
    explicit Adam(AdamConfig config) : config_(config) {}

    // Applies one update to every trainable parameter holding a gradient.
    // In checked mode a non-finite gradient throws NonFiniteError before any
    // parameter is touched.
    void step(std::span<Parameter* const> params);

    std::int64_t steps() const { return steps_; }
    AdamConfig& config() { return config_; }

    std::vector<CheckpointRecord> export_state() const;
    void import_state(std::span<const CheckpointRecord> records);

   private:
    struct Moments {
        Tensor m;
        Tensor v;
    };
    AdamConfig config_;
    std::int64_t steps_ = 0;
    std::map<std::string, Moments> moments_;
};

}  // namespace dualdiff
