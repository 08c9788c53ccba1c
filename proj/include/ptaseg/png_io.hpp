/*
 * Copyright 2026 The ptaseg Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <png.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptaseg {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Interleaved 8-bit RGB raster.
struct RgbImage {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels; // width * height * 3

    std::array<std::uint8_t, 3> at(std::size_t y, std::size_t x) const
    {
        const std::size_t i = (y * width + x) * 3;
        return {pixels[i], pixels[i + 1], pixels[i + 2]};
    }
};

/// Decodes any PNG (gray, paletted, RGB, with or without alpha) to RGB.
inline RgbImage read_png(const std::filesystem::path& path)
{
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str()))
        throw DataError("cannot read PNG " + path.string() + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    RgbImage out;
    out.width = img.width;
    out.height = img.height;
    out.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw DataError("cannot decode PNG " + path.string() + ": " + msg);
    }
    return out;
}

inline void write_png(const std::filesystem::path& path, const RgbImage& image)
{
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.pixels.data(), 0, nullptr))
        throw DataError("cannot write PNG " + path.string() + ": " + img.message);
}

/// Writes a paletted PNG: one palette index per pixel, palette of RGB entries.
inline void write_png_paletted(const std::filesystem::path& path, std::size_t width, std::size_t height,
                               const std::vector<std::uint8_t>& indices,
                               const std::vector<std::array<std::uint8_t, 3>>& palette)
{
    if (palette.empty() || palette.size() > 256)
        throw DataError("palette must have 1..256 entries");
    std::vector<std::uint8_t> cmap;
    for (const auto& c : palette)
        cmap.insert(cmap.end(), c.begin(), c.end());
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(width);
    img.height = static_cast<png_uint_32>(height);
    img.format = PNG_FORMAT_RGB_COLORMAP;
    img.colormap_entries = static_cast<png_uint_32>(palette.size());
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, indices.data(), 0, cmap.data()))
        throw DataError("cannot write PNG " + path.string() + ": " + img.message);
}

} // namespace ptaseg
