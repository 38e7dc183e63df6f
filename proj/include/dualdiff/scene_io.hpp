#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualdiff/raster.hpp"
#include "dualdiff/scene.hpp"

namespace dualdiff {

/// Malformed scene document; the message names the offending field.
class SceneFormatError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// File could not be opened, read or written.
class IoError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kSceneFormatVersion = 1;

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& text);

void save_scene(const std::filesystem::path& path, const Scene& scene);
Scene load_scene(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const char> bytes);
void write_file(const std::filesystem::path& path, const std::string& text);

/// Binary P6 with maxval 255.
void write_ppm(const std::filesystem::path& path, const Image& image);
/// Binary P5 with maxval 255.
void write_pgm(const std::filesystem::path& path, std::int64_t width, std::int64_t height,
               std::span<const std::uint8_t> pixels);
/// ASCII P2 with an explicit maxval (up to 65535).
void write_pgm_ascii(const std::filesystem::path& path, std::int64_t width, std::int64_t height, int maxval,
                     std::span<const std::uint16_t> pixels);

}  // namespace dualdiff
