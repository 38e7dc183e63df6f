#include "dualdiff/run_config.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <json.hpp>
#include <set>

namespace dualdiff {

using nlohmann::json;

namespace {

/// Reads the members of one object, remembering which keys were consumed.
class Section {
   public:
    Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) throw ConfigError("config: '" + where() + "' must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        auto it = obj_.find(key);
        seen_.insert(key);
        if (it == obj_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config: '" + name(key) + "' has the wrong type");
        }
    }

    void range(const char* key, IntRange& out) {
        std::vector<int> v{out.min, out.max};
        get(key, v);
        if (v.size() != 2) throw ConfigError("config: '" + name(key) + "' must be [min, max]");
        out = {v[0], v[1]};
    }

    Section child(const char* key) {
        seen_.insert(key);
        auto it = obj_.find(key);
        return Section(it == obj_.end() ? empty() : *it, name(key));
    }

    void finish() const {
        for (const auto& [key, value] : obj_.items())
            if (!seen_.count(key)) throw ConfigError("config: unknown key '" + name(key.c_str()) + "'");
    }

   private:
    static const json& empty() {
        static const json e = json::object();
        return e;
    }
    std::string where() const { return path_.empty() ? "<root>" : path_; }
    std::string name(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    const json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

json generator_json(const GeneratorSpec& g) {
    auto r = [](IntRange x) { return json::array({x.min, x.max}); };
    return {{"H", g.H},
            {"W", g.W},
            {"D", g.D},
            {"voxel_size", g.voxel_size},
            {"vehicles", r(g.vehicles)},
            {"buildings", r(g.buildings)},
            {"pedestrians", r(g.pedestrians)},
            {"trees", r(g.trees)},
            {"poles", r(g.poles)},
            {"cameras", g.cameras},
            {"image_width", g.image_width},
            {"image_height", g.image_height},
            {"camera_height", g.camera_height},
            {"camera_pitch", g.camera_pitch},
            {"camera_hfov", g.camera_hfov},
            {"road_half_width", g.road_half_width}};
}

void read_generator(Section s, GeneratorSpec& g) {
    s.get("H", g.H);
    s.get("W", g.W);
    s.get("D", g.D);
    s.get("voxel_size", g.voxel_size);
    s.range("vehicles", g.vehicles);
    s.range("buildings", g.buildings);
    s.range("pedestrians", g.pedestrians);
    s.range("trees", g.trees);
    s.range("poles", g.poles);
    s.get("cameras", g.cameras);
    s.get("image_width", g.image_width);
    s.get("image_height", g.image_height);
    s.get("camera_height", g.camera_height);
    s.get("camera_pitch", g.camera_pitch);
    s.get("camera_hfov", g.camera_hfov);
    s.get("road_half_width", g.road_half_width);
    s.finish();
}

json model_json(const RunConfig& c) {
    const ModelSection& m = c.model;
    return {{"unet_base", m.unet_base}, {"width", m.width}, {"c_txt", m.c_txt},
            {"d_v", m.d_v},             {"heads", m.heads}, {"k_def", m.k_def},
            {"ors_class_width", m.ors_class_width}, {"dtype", m.dtype}};
}

json train_json(const TrainConfig& t, bool with_steps) {
    json j = {{"phase", phase_name(t.phase)},
              {"lr", t.lr},
              {"batch", t.batch},
              {"p_drop", t.p_drop},
              {"use_mask", t.use_mask},
              {"sampler",
               {{"kind", sampler_name(t.sampler.kind)},
                {"steps", t.sampler.steps},
                {"eta", t.sampler.eta},
                {"guidance", t.sampler.guidance}}}};
    if (with_steps) j["steps"] = t.steps;
    return j;
}

json to_json(const RunConfig& c) {
    return {{"seed", c.seed},
            {"paths", {{"scenes_dir", c.paths.scenes_dir}, {"checkpoint", c.paths.checkpoint}, {"out_dir", c.paths.out_dir}}},
            {"dataset", {{"count", c.dataset.count}, {"generator", generator_json(c.dataset.generator)}}},
            {"plan", {{"samples", c.plan.samples}, {"near", c.plan.near}, {"far", c.plan.far}}},
            {"model", model_json(c)},
            {"train", train_json(c.train, true)},
            {"checkpoint_every", c.checkpoint_every},
            {"verify",
             {{"ors", c.verify.ors},
              {"gradients", c.verify.gradients},
              {"masks", c.verify.masks},
              {"schedule", c.verify.schedule},
              {"sfa", c.verify.sfa},
              {"model", c.verify.model}}}};
}

}  // namespace

SamplingPlan PlanConfig::for_grid(const OccupancyGrid& grid) const {
    SamplingPlan p = default_plan(grid);
    p.N = samples;
    if (near > 0.0) p.near = near;
    if (far > 0.0) p.far = far;
    return p;
}

RunConfig config_from_json(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: not valid JSON: ") + e.what());
    }
    RunConfig c;
    Section root(doc, "");
    root.get("seed", c.seed);
    {
        Section s = root.child("paths");
        s.get("scenes_dir", c.paths.scenes_dir);
        s.get("checkpoint", c.paths.checkpoint);
        s.get("out_dir", c.paths.out_dir);
        s.finish();
    }
    {
        Section s = root.child("dataset");
        s.get("count", c.dataset.count);
        read_generator(s.child("generator"), c.dataset.generator);
        s.finish();
    }
    {
        Section s = root.child("plan");
        s.get("samples", c.plan.samples);
        s.get("near", c.plan.near);
        s.get("far", c.plan.far);
        s.finish();
    }
    {
        Section s = root.child("model");
        ModelSection& m = c.model;
        s.get("unet_base", m.unet_base);
        s.get("width", m.width);
        s.get("c_txt", m.c_txt);
        s.get("d_v", m.d_v);
        s.get("heads", m.heads);
        s.get("k_def", m.k_def);
        s.get("ors_class_width", m.ors_class_width);
        s.get("dtype", m.dtype);
        s.finish();
    }
    {
        Section s = root.child("train");
        TrainConfig& t = c.train;
        std::string phase = phase_name(t.phase);
        s.get("phase", phase);
        s.get("lr", t.lr);
        s.get("batch", t.batch);
        s.get("steps", t.steps);
        s.get("p_drop", t.p_drop);
        s.get("use_mask", t.use_mask);
        Section sm = s.child("sampler");
        std::string kind = sampler_name(t.sampler.kind);
        sm.get("kind", kind);
        sm.get("steps", t.sampler.steps);
        sm.get("eta", t.sampler.eta);
        sm.get("guidance", t.sampler.guidance);
        sm.finish();
        s.finish();
        try {
            t.phase = parse_phase(phase);
            t.sampler.kind = parse_sampler(kind);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }
    root.get("checkpoint_every", c.checkpoint_every);
    {
        Section s = root.child("verify");
        s.get("ors", c.verify.ors);
        s.get("gradients", c.verify.gradients);
        s.get("masks", c.verify.masks);
        s.get("schedule", c.verify.schedule);
        s.get("sfa", c.verify.sfa);
        s.get("model", c.verify.model);
        s.finish();
    }
    root.finish();
    validate_config(c);
    return c;
}

std::string config_to_json(const RunConfig& cfg) { return to_json(cfg).dump(); }

void validate_config(const RunConfig& c) {
    auto check = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError("config: " + what);
    };
    check(c.dataset.count >= 0, "dataset.count must be >= 0");
    check(c.plan.samples >= 2, "plan.samples must be >= 2");
    check(c.plan.near >= 0.0 && c.plan.far >= 0.0, "plan.near and plan.far must be >= 0");
    check(c.plan.near == 0.0 || c.plan.far == 0.0 || c.plan.near < c.plan.far, "plan.near must be below plan.far");
    check(c.checkpoint_every >= 1, "checkpoint_every must be >= 1");
    check(c.model.dtype == "f32" || c.model.dtype == "f64", "model.dtype must be \"f32\" or \"f64\"");
    check(c.model.unet_base >= 1 && c.model.width >= 1 && c.model.c_txt >= 1 && c.model.d_v >= 1 &&
              c.model.heads >= 1 && c.model.k_def >= 1 && c.model.ors_class_width >= 1,
          "model sizes must be positive");
    check(c.model.d_v % c.model.heads == 0, "model.d_v must be divisible by model.heads");
    try {
        validate_spec(c.dataset.generator);
        validate_train_config(c.train);
        validate_sampler(c.train.sampler, 1000);
        validate_model_config(to_model_config(c));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    check(c.dataset.generator.image_width % 4 == 0 && c.dataset.generator.image_height % 4 == 0,
          "image extents must be divisible by 4");
}

std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256: digest failed");
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", digest[i]);
        hex += buf;
    }
    return hex;
}

std::string config_hash(const RunConfig& cfg) { return sha256_hex(config_to_json(cfg)); }

std::string model_hash(const RunConfig& cfg) {
    return sha256_hex(json{{"model", model_json(cfg)}, {"plan_samples", cfg.plan.samples}}.dump());
}

std::string resume_hash(const RunConfig& cfg) {
    return sha256_hex(json{{"model", model_json(cfg)},
                           {"plan_samples", cfg.plan.samples},
                           {"seed", cfg.seed},
                           {"train", train_json(cfg.train, false)}}
                          .dump());
}

ModelConfig to_model_config(const RunConfig& c) {
    ModelConfig m;
    m.unet.base = c.model.unet_base;
    m.unet.cond_width = c.model.width;
    m.encoders.d = c.model.width;
    m.encoders.c_txt = c.model.c_txt;
    m.sfa = SfaConfig{c.model.d_v, c.model.width, c.model.heads, c.model.k_def};
    m.ors_class_width = c.model.ors_class_width;
    m.ors_samples = c.plan.samples;
    return m;
}

DType model_dtype(const RunConfig& cfg) { return cfg.model.dtype == "f64" ? DType::f64 : DType::f32; }

std::string manifest_to_json(const Manifest& m) {
    return json{{"version", m.version},
                {"scene_count", m.scene_count},
                {"seeds", m.seeds},
                {"files", m.files},
                {"config_hash", m.config_hash}}
        .dump(2);
}

Manifest manifest_from_json(const std::string& text) {
    Manifest m;
    try {
        const json j = json::parse(text);
        m.version = j.at("version").get<int>();
        m.scene_count = j.at("scene_count").get<std::int64_t>();
        m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        m.files = j.at("files").get<std::vector<std::string>>();
        m.config_hash = j.at("config_hash").get<std::string>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("manifest: ") + e.what());
    }
    if (m.seeds.size() != static_cast<std::size_t>(m.scene_count) || m.files.size() != m.seeds.size())
        throw ConfigError("manifest: scene_count disagrees with the seed or file lists");
    return m;
}

std::string scene_file_name(std::int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%05lld.json", static_cast<long long>(index));
    return buf;
}

}  // namespace dualdiff
