#include "dualdiff/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace dualdiff {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

ad::Var ParameterStore::add(const std::string& name, Tensor init, bool trainable) {
    if (name.empty()) throw std::invalid_argument("parameter name must not be empty");
    if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    if (init.dtype() != dtype_) init = init.cast(dtype_);
    ad::Var var = ad::variable(std::move(init), trainable);
    index_[name] = params_.size();
    params_.push_back(Parameter{name, var, trainable});
    return var;
}

Parameter& ParameterStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
}

std::vector<Parameter*> ParameterStore::all() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
    std::vector<const Parameter*> out;
    for (const auto& p : params_) out.push_back(&p);
    return out;
}

std::vector<Parameter*> ParameterStore::with_prefix(std::string_view prefix) {
    std::vector<Parameter*> out;
    for (auto& p : params_)
        if (std::string_view(p.name).starts_with(prefix)) out.push_back(&p);
    return out;
}

void ParameterStore::set_trainable(std::string_view prefix, bool trainable) {
    for (auto* p : with_prefix(prefix)) {
        p->trainable = trainable;
        p->var.set_requires_grad(trainable);
        if (!trainable) p->var.zero_grad();
    }
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

std::uint64_t ParameterStore::digest(std::string_view prefix) const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& p : params_) {
        if (!std::string_view(p.name).starts_with(prefix)) continue;
        mix(p.name.data(), p.name.size());
        dispatch(p.var.dtype(), [&]<class T>() {
            auto d = p.var.value().data<T>();
            mix(d.data(), d.size_bytes());
        });
    }
    return h;
}

Tensor uniform_tensor(Shape shape, DType dtype, std::mt19937_64& rng, double bound) {
    Tensor t(std::move(shape), dtype);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set_item(i, dist(rng));
    return t;
}

Tensor normal_tensor(Shape shape, DType dtype, std::mt19937_64& rng, double stddev) {
    Tensor t(std::move(shape), dtype);
    std::normal_distribution<double> dist(0.0, stddev);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set_item(i, dist(rng));
    return t;
}

namespace {

template <class U>
void put(std::ostream& out, U value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <class U>
U take(std::istream& in, const std::filesystem::path& path) {
    U value{};
    if (!in.read(reinterpret_cast<char*>(&value), sizeof(U)))
        throw CheckpointError("truncated checkpoint: " + path.string());
    return value;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointRecord> records) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path.string());
    out.write("DCKP", 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        if (r.name.size() > 0xffff) throw CheckpointError("parameter name too long: " + r.name);
        put<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
        out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        put<std::uint8_t>(out, static_cast<std::uint8_t>(r.tensor.dtype()));
        put<std::uint8_t>(out, static_cast<std::uint8_t>(r.tensor.rank()));
        for (auto e : r.tensor.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
        dispatch(r.tensor.dtype(), [&]<class T>() {
            auto d = r.tensor.data<T>();
            out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
        });
    }
    if (!out) throw CheckpointError("failed writing checkpoint: " + path.string());
}

std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "DCKP", 4) != 0)
        throw CheckpointError("bad checkpoint magic: " + path.string());
    const auto version = take<std::uint32_t>(in, path);
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const auto count = take<std::uint32_t>(in, path);
    std::vector<CheckpointRecord> records;
    records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = take<std::uint16_t>(in, path);
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw CheckpointError("truncated checkpoint: " + path.string());
        const auto dtype_code = take<std::uint8_t>(in, path);
        if (dtype_code > 1) throw CheckpointError("bad dtype code in record " + name);
        const auto rank = take<std::uint8_t>(in, path);
        Shape shape;
        for (int r = 0; r < rank; ++r) shape.push_back(take<std::uint32_t>(in, path));
        Tensor t(shape, static_cast<DType>(dtype_code));
        dispatch(t.dtype(), [&]<class T>() {
            auto d = t.data<T>();
            if (!in.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size_bytes())))
                throw CheckpointError("truncated payload for " + name);
        });
        records.push_back({std::move(name), std::move(t)});
    }
    return records;
}

std::vector<CheckpointRecord> export_parameters(const ParameterStore& store) {
    std::vector<CheckpointRecord> out;
    for (const auto* p : store.all()) out.push_back({p->name, p->var.value()});
    return out;
}

void import_parameters(ParameterStore& store, std::span<const CheckpointRecord> records) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& r : records) by_name[r.name] = &r.tensor;
    for (auto* p : store.all()) {
        auto it = by_name.find(p->name);
        if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter " + p->name);
        const Tensor& t = *it->second;
        if (t.shape() != p->var.shape() || t.dtype() != p->var.dtype())
            throw CheckpointError("checkpoint parameter " + p->name + " has shape " + shape_str(t.shape()) +
                                  ", model expects " + shape_str(p->var.shape()));
        p->var.mutable_value() = t;
    }
}

void Adam::step(std::span<Parameter* const> params) {
    if (ad::checked())
        for (const auto* p : params)
            if (p->trainable && p->var.has_grad() && !p->var.grad().all_finite())
                throw NonFiniteError("adam: non-finite gradient for " + p->name);
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (auto* p : params) {
        if (!p->trainable || !p->var.has_grad()) continue;
        auto& slot = moments_[p->name];
        if (!slot.m.defined()) {
            slot.m = Tensor(p->var.shape(), p->var.dtype());
            slot.v = Tensor(p->var.shape(), p->var.dtype());
        }
        dispatch(p->var.dtype(), [&]<class T>() {
            auto w = p->var.mutable_value().data<T>();
            auto g = p->var.grad().data<T>();
            auto m = slot.m.data<T>();
            auto v = slot.v.data<T>();
            const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
            const T lr = static_cast<T>(config_.lr), eps = static_cast<T>(config_.eps);
            const T ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2);
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = b1 * m[i] + (T(1) - b1) * g[i];
                v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
                const T mhat = m[i] * ic1;
                const T vhat = v[i] * ic2;
                w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        });
    }
}

std::vector<CheckpointRecord> Adam::export_state() const {
    std::vector<CheckpointRecord> out;
    out.push_back({"adam/steps", Tensor::scalar(static_cast<double>(steps_), DType::f64)});
    for (const auto& [name, slot] : moments_) {
        out.push_back({"adam/m/" + name, slot.m});
        out.push_back({"adam/v/" + name, slot.v});
    }
    return out;
}

void Adam::import_state(std::span<const CheckpointRecord> records) {
    moments_.clear();
    steps_ = 0;
    for (const auto& r : records) {
        if (r.name == "adam/steps") {
            steps_ = static_cast<std::int64_t>(r.tensor.item(0));
        } else if (r.name.starts_with("adam/m/")) {
            moments_[r.name.substr(7)].m = r.tensor;
        } else if (r.name.starts_with("adam/v/")) {
            moments_[r.name.substr(7)].v = r.tensor;
        }
    }
}

}  // namespace dualdiff
