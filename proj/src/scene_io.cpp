#include "dualdiff/scene_io.hpp"

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace dualdiff {

using nlohmann::json;

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    using namespace boost::archive::iterators;
    using Encoder = base64_from_binary<transform_width<const std::uint8_t*, 6, 8>>;
    std::string out(Encoder(bytes.data()), Encoder(bytes.data() + bytes.size()));
    out.append((3 - bytes.size() % 3) % 3, '=');
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    using namespace boost::archive::iterators;
    using Decoder = transform_width<binary_from_base64<std::string::const_iterator>, 8, 6>;
    if (text.size() % 4 != 0) throw std::invalid_argument("base64: length is not a multiple of 4");
    std::size_t pad = 0;
    while (pad < 2 && pad < text.size() && text[text.size() - 1 - pad] == '=') ++pad;
    std::string body = text.substr(0, text.size() - pad);
    if (body.find('=') != std::string::npos) throw std::invalid_argument("base64: misplaced padding");
    body.append(pad, 'A');
    try {
        std::vector<std::uint8_t> out(Decoder(body.begin()), Decoder(body.end()));
        out.resize(out.size() - pad);
        return out;
    } catch (const std::exception&) {
        throw std::invalid_argument("base64: invalid character");
    }
}

namespace {

json vec_json(const Vec3& v) { return json::array({v[0], v[1], v[2]}); }

template <std::size_t N>
json array_json(const std::array<double, N>& a) {
    json out = json::array();
    for (double v : a) out.push_back(v);
    return out;
}

[[noreturn]] void fail(const std::string& field, const std::string& what) {
    throw SceneFormatError("scene field '" + field + "': " + what);
}

const json& member(const json& obj, const char* key, const std::string& path) {
    if (!obj.is_object()) fail(path, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) fail(path.empty() ? key : path + "." + key, "missing");
    return *it;
}

double number(const json& j, const std::string& path) {
    if (!j.is_number()) fail(path, "expected a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) fail(path, "non-finite value");
    return v;
}

std::int64_t integer(const json& j, const std::string& path, std::int64_t lo, std::int64_t hi) {
    if (!j.is_number_integer()) fail(path, "expected an integer");
    const std::int64_t v = j.get<std::int64_t>();
    if (v < lo || v > hi) fail(path, "value " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                                         std::to_string(hi) + "]");
    return v;
}

const json& array_of(const json& j, const std::string& path, std::size_t size) {
    if (!j.is_array()) fail(path, "expected an array");
    if (size != 0 && j.size() != size)
        fail(path, "expected " + std::to_string(size) + " entries, got " + std::to_string(j.size()));
    return j;
}

Vec3 vec(const json& j, const std::string& path) {
    array_of(j, path, 3);
    return {number(j[0], path + "[0]"), number(j[1], path + "[1]"), number(j[2], path + "[2]")};
}

template <std::size_t N>
std::array<double, N> fixed(const json& j, const std::string& path) {
    array_of(j, path, N);
    std::array<double, N> out{};
    for (std::size_t i = 0; i < N; ++i) out[i] = number(j[i], path + "[" + std::to_string(i) + "]");
    return out;
}

std::vector<std::uint8_t> class_list(const json& j, const std::string& path, int num_classes) {
    array_of(j, path, 0);
    std::vector<std::uint8_t> out;
    for (std::size_t i = 0; i < j.size(); ++i)
        out.push_back(static_cast<std::uint8_t>(integer(j[i], path + "[" + std::to_string(i) + "]", 0, num_classes - 1)));
    return out;
}

}  // namespace

std::string scene_to_json(const Scene& scene) {
    const OccupancyGrid& g = scene.grid;
    json doc;
    doc["version"] = kSceneFormatVersion;
    doc["seed"] = scene.seed;
    doc["dims"] = json::array({g.H, g.W, g.D});
    doc["origin"] = vec_json(g.origin);
    doc["voxel_size"] = g.voxel_size;
    doc["labels_b64"] = base64_encode(g.labels);
    doc["taxonomy"] = {{"names", scene.taxonomy.names},
                       {"foreground", scene.taxonomy.foreground},
                       {"background", scene.taxonomy.background}};
    json boxes = json::array();
    for (const auto& b : scene.boxes) {
        json corners = json::array();
        for (const Vec3& c : b.corners) corners.push_back(vec_json(c));
        boxes.push_back({{"category", b.category}, {"corners", corners}});
    }
    doc["boxes"] = boxes;
    json map = json::array();
    for (const auto& m : scene.map) {
        json pts = json::array();
        for (const Vec3& p : m.points) pts.push_back(vec_json(p));
        map.push_back({{"category", map_category_name(m.category)}, {"points", pts}});
    }
    doc["map"] = map;
    json cams = json::array();
    for (const auto& c : scene.cameras)
        cams.push_back({{"K", array_json(c.K)},
                        {"R", array_json(c.R)},
                        {"t", vec_json(c.t)},
                        {"image_size", json::array({c.width, c.height})}});
    doc["cameras"] = cams;
    doc["prompt_tokens"] = scene.prompt;
    return doc.dump(1) + "\n";
}

Scene scene_from_json(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw SceneFormatError(std::string("scene document is not valid JSON: ") + e.what());
    }
    static const char* known[] = {"version", "seed",   "dims", "origin",  "voxel_size",   "labels_b64",
                                  "taxonomy", "boxes", "map",  "cameras", "prompt_tokens"};
    if (!doc.is_object()) fail("<root>", "expected an object");
    for (const auto& [key, _] : doc.items())
        if (std::find(std::begin(known), std::end(known), key) == std::end(known)) fail(key, "unknown field");

    Scene scene;
    if (integer(member(doc, "version", ""), "version", 0, 1 << 30) != kSceneFormatVersion)
        fail("version", "unsupported version");
    const json& seed = member(doc, "seed", "");
    if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<std::int64_t>() >= 0))
        fail("seed", "expected a non-negative integer");
    scene.seed = seed.get<std::uint64_t>();

    const json& tax = member(doc, "taxonomy", "");
    const json& names = array_of(member(tax, "names", "taxonomy"), "taxonomy.names", 0);
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (!names[i].is_string()) fail("taxonomy.names[" + std::to_string(i) + "]", "expected a string");
        scene.taxonomy.names.push_back(names[i].get<std::string>());
    }
    const int nc = scene.taxonomy.num_classes();
    if (nc < 2 || nc > 256) fail("taxonomy.names", "class count must be in [2, 256]");
    scene.taxonomy.foreground = class_list(member(tax, "foreground", "taxonomy"), "taxonomy.foreground", nc);
    scene.taxonomy.background = class_list(member(tax, "background", "taxonomy"), "taxonomy.background", nc);
    try {
        validate_taxonomy(scene.taxonomy);
    } catch (const std::invalid_argument& e) {
        fail("taxonomy", e.what());
    }

    const json& dims = array_of(member(doc, "dims", ""), "dims", 3);
    const std::int64_t H = integer(dims[0], "dims[0]", 1, 4096), W = integer(dims[1], "dims[1]", 1, 4096),
                       D = integer(dims[2], "dims[2]", 1, 4096);
    const double e = number(member(doc, "voxel_size", ""), "voxel_size");
    if (!(e > 0.0)) fail("voxel_size", "must be positive");
    scene.grid = OccupancyGrid(H, W, D, vec(member(doc, "origin", ""), "origin"), e);
    const json& b64 = member(doc, "labels_b64", "");
    if (!b64.is_string()) fail("labels_b64", "expected a string");
    try {
        scene.grid.labels = base64_decode(b64.get<std::string>());
    } catch (const std::invalid_argument& ex) {
        fail("labels_b64", ex.what());
    }
    if (scene.grid.labels.size() != static_cast<std::size_t>(H * W * D))
        fail("labels_b64", "decoded " + std::to_string(scene.grid.labels.size()) + " labels, expected " +
                               std::to_string(H * W * D));
    for (std::size_t i = 0; i < scene.grid.labels.size(); ++i)
        if (scene.grid.labels[i] >= nc) fail("labels_b64", "label at index " + std::to_string(i) + " out of range");

    const json& boxes = array_of(member(doc, "boxes", ""), "boxes", 0);
    for (std::size_t n = 0; n < boxes.size(); ++n) {
        const std::string path = "boxes[" + std::to_string(n) + "]";
        BoundingBox3D box;
        box.category = static_cast<std::uint8_t>(integer(member(boxes[n], "category", path), path + ".category", 0, nc - 1));
        if (!scene.taxonomy.is_foreground(box.category)) fail(path + ".category", "not a foreground class");
        const json& corners = array_of(member(boxes[n], "corners", path), path + ".corners", 8);
        for (std::size_t c = 0; c < 8; ++c) box.corners[c] = vec(corners[c], path + ".corners[" + std::to_string(c) + "]");
        if (!is_cuboid(box)) fail(path + ".corners", "corners do not form a cuboid in the documented order");
        scene.boxes.push_back(box);
    }

    const json& map = array_of(member(doc, "map", ""), "map", 0);
    for (std::size_t n = 0; n < map.size(); ++n) {
        const std::string path = "map[" + std::to_string(n) + "]";
        MapPolyline line;
        const json& cat = member(map[n], "category", path);
        if (!cat.is_string()) fail(path + ".category", "expected a string");
        try {
            line.category = parse_map_category(cat.get<std::string>());
        } catch (const std::invalid_argument& ex) {
            fail(path + ".category", ex.what());
        }
        const json& pts = array_of(member(map[n], "points", path), path + ".points", kPolylinePoints);
        for (std::size_t p = 0; p < kPolylinePoints; ++p) {
            line.points[p] = vec(pts[p], path + ".points[" + std::to_string(p) + "]");
            if (p > 0 && line.points[p] == line.points[p - 1]) fail(path + ".points", "consecutive points coincide");
        }
        scene.map.push_back(line);
    }

    const json& cams = array_of(member(doc, "cameras", ""), "cameras", 0);
    for (std::size_t n = 0; n < cams.size(); ++n) {
        const std::string path = "cameras[" + std::to_string(n) + "]";
        Camera cam;
        cam.K = fixed<9>(member(cams[n], "K", path), path + ".K");
        cam.R = fixed<9>(member(cams[n], "R", path), path + ".R");
        cam.t = vec(member(cams[n], "t", path), path + ".t");
        const json& size = array_of(member(cams[n], "image_size", path), path + ".image_size", 2);
        cam.width = integer(size[0], path + ".image_size[0]", 1, 1 << 16);
        cam.height = integer(size[1], path + ".image_size[1]", 1, 1 << 16);
        try {
            validate_camera(cam);
        } catch (const CameraError& ex) {
            fail(path + "." + std::string(ex.what()).substr(0, std::string(ex.what()).find(':')), ex.what());
        }
        scene.cameras.push_back(cam);
    }

    const json& prompt = array_of(member(doc, "prompt_tokens", ""), "prompt_tokens", 0);
    const auto vocab = static_cast<std::int64_t>(prompt_vocabulary().size());
    for (std::size_t n = 0; n < prompt.size(); ++n)
        scene.prompt.push_back(integer(prompt[n], "prompt_tokens[" + std::to_string(n) + "]", 0, vocab - 1));
    return scene;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::span<const char> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + path.string() + "' failed");
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::span<const char>(text.data(), text.size()));
}

void save_scene(const std::filesystem::path& path, const Scene& scene) { write_file(path, scene_to_json(scene)); }

Scene load_scene(const std::filesystem::path& path) { return scene_from_json(read_file(path)); }

void write_ppm(const std::filesystem::path& path, const Image& image) {
    std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    for (float c : image.rgb)
        out.push_back(static_cast<char>(std::lround(std::clamp(static_cast<double>(c), 0.0, 1.0) * 255.0)));
    write_file(path, out);
}

void write_pgm(const std::filesystem::path& path, std::int64_t width, std::int64_t height,
               std::span<const std::uint8_t> pixels) {
    if (pixels.size() != static_cast<std::size_t>(width * height)) throw std::invalid_argument("write_pgm: size mismatch");
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.append(pixels.begin(), pixels.end());
    write_file(path, out);
}

void write_pgm_ascii(const std::filesystem::path& path, std::int64_t width, std::int64_t height, int maxval,
                     std::span<const std::uint16_t> pixels) {
    if (pixels.size() != static_cast<std::size_t>(width * height))
        throw std::invalid_argument("write_pgm_ascii: size mismatch");
    std::string out = "P2\n" + std::to_string(width) + " " + std::to_string(height) + "\n" + std::to_string(maxval) + "\n";
    for (std::int64_t v = 0; v < height; ++v) {
        for (std::int64_t u = 0; u < width; ++u) {
            if (u) out.push_back(' ');
            out += std::to_string(pixels[static_cast<std::size_t>(v * width + u)]);
        }
        out.push_back('\n');
    }
    write_file(path, out);
}

}  // namespace dualdiff
