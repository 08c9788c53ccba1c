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

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "png_io.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace ptaseg {

/// Per-pixel class indices, row-major.
struct LabelMap {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> labels;

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) { }

    std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }

    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// One image (1,3,H,W) with values in [0,1] and its label map.
struct SegSample {
    Tensor<float> image;
    LabelMap mask;
    std::string id;

    std::size_t height() const { return mask.height; }
    std::size_t width() const { return mask.width; }
};

struct DatasetSplit {
    std::vector<SegSample> train, val, test;
    std::vector<std::string> warnings;
};

/// Class names and their RGB label colors.
struct ClassMap {
    std::vector<std::string> names;
    std::vector<std::array<std::uint8_t, 3>> colors;

    std::size_t size() const { return names.size(); }

    std::optional<std::uint8_t> index_of(const std::array<std::uint8_t, 3>& rgb) const
    {
        for (std::size_t i = 0; i < colors.size(); ++i)
            if (colors[i] == rgb)
                return static_cast<std::uint8_t>(i);
        return std::nullopt;
    }

    /// Index of the class named "unlabeled" (or "void"), else the last class.
    std::uint8_t unlabeled_index() const
    {
        for (std::size_t i = 0; i < names.size(); ++i) {
            std::string n = names[i];
            std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
            if (n == "unlabeled" || n == "unlabelled" || n == "void")
                return static_cast<std::uint8_t>(i);
        }
        return static_cast<std::uint8_t>(names.size() - 1);
    }
};

/// The 12-class CamVid labelling and its conventional colors.
inline ClassMap camvid_class_map()
{
    return ClassMap{{"sky", "building", "pole", "road", "pavement", "tree", "sign_symbol", "fence", "car",
                     "pedestrian", "bicyclist", "unlabeled"},
                    {{{128, 128, 128}},
                     {{128, 0, 0}},
                     {{192, 192, 128}},
                     {{128, 64, 128}},
                     {{60, 40, 222}},
                     {{128, 128, 0}},
                     {{192, 128, 128}},
                     {{64, 64, 128}},
                     {{64, 0, 128}},
                     {{64, 64, 0}},
                     {{0, 128, 192}},
                     {{0, 0, 0}}}};
}

/// Reads `name r g b` lines; blank lines and '#' comments are skipped.
inline ClassMap load_class_map(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open class map " + path.string());
    ClassMap map;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#' || line.find_first_not_of(" \t\r") == std::string::npos)
            continue;
        std::istringstream ls(line);
        std::string name;
        int r, g, b;
        if (!(ls >> name >> r >> g >> b) || r < 0 || r > 255 || g < 0 || g > 255 || b < 0 || b > 255)
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected `name r g b`");
        map.names.push_back(name);
        map.colors.push_back({static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)});
    }
    if (map.size() < 2 || map.size() > 255)
        throw DataError("class map " + path.string() + " must list between 2 and 255 classes");
    return map;
}

inline void save_class_map(const std::filesystem::path& path, const ClassMap& map)
{
    std::ofstream out(path);
    if (!out)
        throw DataError("cannot write class map " + path.string());
    for (std::size_t i = 0; i < map.size(); ++i)
        out << map.names[i] << ' ' << int(map.colors[i][0]) << ' ' << int(map.colors[i][1]) << ' '
            << int(map.colors[i][2]) << '\n';
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear resize with half-pixel centers. Same-size resize is the identity.
inline Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t out_h, std::size_t out_w)
{
    const Shape& s = image.shape();
    if (s.h == out_h && s.w == out_w)
        return image;
    Tensor<float> out(Shape{s.n, s.c, out_h, out_w});
    auto taps = [](std::size_t out_size, std::size_t in_size) {
        std::vector<std::pair<std::array<std::size_t, 2>, float>> t(out_size);
        const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
        for (std::size_t i = 0; i < out_size; ++i) {
            double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
            const std::size_t i0 = static_cast<std::size_t>(src);
            const std::size_t i1 = std::min(i0 + 1, in_size - 1);
            t[i] = {{i0, i1}, static_cast<float>(src - static_cast<double>(i0))};
        }
        return t;
    };
    const auto ty = taps(out_h, s.h);
    const auto tx = taps(out_w, s.w);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t y = 0; y < out_h; ++y) {
                const auto& [ry, fy] = ty[y];
                for (std::size_t x = 0; x < out_w; ++x) {
                    const auto& [rx, fx] = tx[x];
                    const float top = (1.f - fx) * image.at(n, c, ry[0], rx[0]) + fx * image.at(n, c, ry[0], rx[1]);
                    const float bot = (1.f - fx) * image.at(n, c, ry[1], rx[0]) + fx * image.at(n, c, ry[1], rx[1]);
                    out.at(n, c, y, x) = (1.f - fy) * top + fy * bot;
                }
            }
    return out;
}

inline LabelMap resize_nearest(const LabelMap& mask, std::size_t out_h, std::size_t out_w)
{
    if (mask.height == out_h && mask.width == out_w)
        return mask;
    LabelMap out(out_h, out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const std::size_t sy = std::min(mask.height - 1, y * mask.height / out_h);
        for (std::size_t x = 0; x < out_w; ++x) {
            const std::size_t sx = std::min(mask.width - 1, x * mask.width / out_w);
            out.at(y, x) = mask.at(sy, sx);
        }
    }
    return out;
}

inline SegSample crop(const SegSample& s, std::size_t top, std::size_t left, std::size_t h, std::size_t w)
{
    if (top + h > s.height() || left + w > s.width() || h == 0 || w == 0)
        throw ShapeError("crop window outside the sample");
    SegSample out{Tensor<float>(Shape{1, 3, h, w}), LabelMap(h, w), s.id};
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                out.image.at(0, c, y, x) = s.image.at(0, c, top + y, left + x);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            out.mask.at(y, x) = s.mask.at(top + y, left + x);
    return out;
}

// ---------------------------------------------------------------------------
// Letterboxing

struct LetterboxGeometry {
    std::size_t content_h, content_w;
    std::size_t top, left;
};

/// Aspect-preserving fit of (h, w) into target x target, centered.
inline LetterboxGeometry letterbox_geometry(std::size_t h, std::size_t w, std::size_t target)
{
    const double scale = static_cast<double>(target) / static_cast<double>(std::max(h, w));
    const auto ch = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(h * scale)), 1, target);
    const auto cw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(w * scale)), 1, target);
    return {ch, cw, (target - ch) / 2, (target - cw) / 2};
}

/// Resizes to fit target x target, then pads symmetrically: image with 0,
/// mask with pad_class.
inline SegSample letterbox(const SegSample& s, std::size_t target = 256, std::uint8_t pad_class = 11)
{
    const LetterboxGeometry g = letterbox_geometry(s.height(), s.width(), target);
    const Tensor<float> content = resize_bilinear(s.image, g.content_h, g.content_w);
    const LabelMap cmask = resize_nearest(s.mask, g.content_h, g.content_w);
    SegSample out{Tensor<float>(Shape{1, 3, target, target}, 0.f), LabelMap(target, target, pad_class), s.id};
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < g.content_h; ++y)
            for (std::size_t x = 0; x < g.content_w; ++x)
                out.image.at(0, c, g.top + y, g.left + x) = content.at(0, c, y, x);
    for (std::size_t y = 0; y < g.content_h; ++y)
        for (std::size_t x = 0; x < g.content_w; ++x)
            out.mask.at(g.top + y, g.left + x) = cmask.at(y, x);
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentOptions {
    double min_crop_area = 0.8;
    double max_crop_area = 1.0;
    double brightness = 0.2;
    double contrast = 0.2;
    double saturation = 0.2;
};

/// Random crop (area fraction uniform in [min_crop_area, max_crop_area],
/// aspect kept) resized back to the input size, followed by color jitter on
/// the image only. Values are clamped to [0,1].
inline SegSample augment(const SegSample& s, Rng& rng, const AugmentOptions& opt = {})
{
    const std::size_t h = s.height(), w = s.width();
    const double area = rng.uniform(opt.min_crop_area, opt.max_crop_area);
    const double side = std::sqrt(std::clamp(area, 0.0, 1.0));
    const auto ch = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(h * side)), 1, h);
    const auto cw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(w * side)), 1, w);
    const std::size_t top = rng.below(h - ch + 1);
    const std::size_t left = rng.below(w - cw + 1);

    SegSample out = (ch == h && cw == w) ? s : crop(s, top, left, ch, cw);
    out.image = resize_bilinear(out.image, h, w);
    out.mask = resize_nearest(out.mask, h, w);

    const double bf = 1.0 + rng.uniform(-opt.brightness, opt.brightness);
    const double cf = 1.0 + rng.uniform(-opt.contrast, opt.contrast);
    const double sf = 1.0 + rng.uniform(-opt.saturation, opt.saturation);
    const std::size_t plane = h * w;
    float* px = out.image.data();

    if (bf != 1.0)
        for (std::size_t i = 0; i < 3 * plane; ++i)
            px[i] = static_cast<float>(px[i] * bf);
    if (cf != 1.0) {
        double mean = 0.0;
        for (std::size_t i = 0; i < plane; ++i)
            mean += 0.299 * px[i] + 0.587 * px[plane + i] + 0.114 * px[2 * plane + i];
        mean /= static_cast<double>(plane);
        for (std::size_t i = 0; i < 3 * plane; ++i)
            px[i] = static_cast<float>((px[i] - mean) * cf + mean);
    }
    if (sf != 1.0) {
        for (std::size_t i = 0; i < plane; ++i) {
            const double gray = 0.299 * px[i] + 0.587 * px[plane + i] + 0.114 * px[2 * plane + i];
            for (std::size_t c = 0; c < 3; ++c)
                px[c * plane + i] = static_cast<float>((px[c * plane + i] - gray) * sf + gray);
        }
    }
    for (std::size_t i = 0; i < 3 * plane; ++i)
        px[i] = std::clamp(px[i], 0.f, 1.f);
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic shapes dataset

struct SyntheticOptions {
    std::size_t n_train = 500;
    std::size_t n_val = 100;
    std::size_t n_test = 0;
    std::size_t size = 64;
    std::size_t n_classes = 4;
    std::uint64_t seed = 0;
};

/// Fill color of class k >= 1 (class 0 is the noise background).
inline std::array<float, 3> synthetic_color(std::size_t k)
{
    static constexpr std::array<std::array<float, 3>, 11> palette{{{0.9f, 0.1f, 0.1f},
                                                                   {0.1f, 0.85f, 0.1f},
                                                                   {0.1f, 0.2f, 0.95f},
                                                                   {0.95f, 0.9f, 0.1f},
                                                                   {0.9f, 0.1f, 0.9f},
                                                                   {0.1f, 0.9f, 0.9f},
                                                                   {1.0f, 0.55f, 0.0f},
                                                                   {0.5f, 0.0f, 0.9f},
                                                                   {0.0f, 0.5f, 0.3f},
                                                                   {1.0f, 1.0f, 1.0f},
                                                                   {0.0f, 0.0f, 0.0f}}};
    return palette.at(k - 1);
}

inline ClassMap synthetic_class_map(std::size_t n_classes)
{
    ClassMap map;
    map.names.push_back("background");
    map.colors.push_back({{40, 40, 40}});
    for (std::size_t k = 1; k < n_classes; ++k) {
        const auto c = synthetic_color(k);
        map.names.push_back("shape" + std::to_string(k));
        map.colors.push_back({static_cast<std::uint8_t>(std::lround(c[0] * 255)),
                              static_cast<std::uint8_t>(std::lround(c[1] * 255)),
                              static_cast<std::uint8_t>(std::lround(c[2] * 255))});
    }
    return map;
}

/// One sample: mid-gray noise background with 1-4 rectangles or disks, each
/// filled with its class color plus small noise.
inline SegSample make_synthetic_sample(std::size_t size, std::size_t n_classes, std::uint64_t seed, std::string id)
{
    Rng rng(seed);
    SegSample s{Tensor<float>(Shape{1, 3, size, size}), LabelMap(size, size, 0), std::move(id)};
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x)
                s.image.at(0, c, y, x) = static_cast<float>(rng.uniform(0.3, 0.6));

    const std::size_t shapes = 1 + rng.below(4);
    for (std::size_t k = 0; k < shapes; ++k) {
        const std::size_t cls = 1 + rng.below(n_classes - 1);
        const auto color = synthetic_color(cls);
        const bool disk = rng.below(2) == 1;
        const double cy = rng.uniform(0.15, 0.85) * size, cx = rng.uniform(0.15, 0.85) * size;
        const double ry = rng.uniform(0.08, 0.25) * size, rx = disk ? ry : rng.uniform(0.08, 0.25) * size;
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
                const bool inside = disk ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
                if (!inside)
                    continue;
                s.mask.at(y, x) = static_cast<std::uint8_t>(cls);
                for (std::size_t c = 0; c < 3; ++c)
                    s.image.at(0, c, y, x) = std::clamp(color[c] + static_cast<float>(rng.uniform(-0.05, 0.05)), 0.f, 1.f);
            }
    }
    return s;
}

inline DatasetSplit make_synthetic(const SyntheticOptions& opt)
{
    if (opt.size < 16)
        throw std::invalid_argument("synthetic images must be at least 16 pixels");
    if (opt.n_classes < 2 || opt.n_classes > 12)
        throw std::invalid_argument("synthetic data supports 2..12 classes");
    DatasetSplit out;
    const std::array<std::pair<std::vector<SegSample>*, std::size_t>, 3> parts{
        {{&out.train, opt.n_train}, {&out.val, opt.n_val}, {&out.test, opt.n_test}}};
    const std::array<const char*, 3> names{"train", "val", "test"};
    for (std::size_t p = 0; p < parts.size(); ++p)
        for (std::size_t i = 0; i < parts[p].second; ++i)
            parts[p].first->push_back(make_synthetic_sample(opt.size, opt.n_classes, Rng::derive(opt.seed, p + 1, i),
                                                            std::string(names[p]) + "_" + std::to_string(i)));
    return out;
}

// ---------------------------------------------------------------------------
// CamVid-layout datasets on disk

namespace detail {

inline Tensor<float> image_from_rgb(const RgbImage& img)
{
    Tensor<float> t(Shape{1, 3, img.height, img.width});
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                t.at(0, c, y, x) = img.pixels[(y * img.width + x) * 3 + c] / 255.f;
    return t;
}

inline RgbImage rgb_from_image(const Tensor<float>& t)
{
    RgbImage img{t.shape().w, t.shape().h, {}};
    img.pixels.resize(img.width * img.height * 3);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                img.pixels[(y * img.width + x) * 3 + c] =
                    static_cast<std::uint8_t>(std::lround(std::clamp(t.at(0, c, y, x), 0.f, 1.f) * 255.f));
    return img;
}

inline LabelMap labels_from_rgb(const RgbImage& img, const ClassMap& map, const std::filesystem::path& file)
{
    LabelMap m(img.height, img.width);
    std::map<std::array<std::uint8_t, 3>, std::uint8_t> cache;
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const auto rgb = img.at(y, x);
            auto it = cache.find(rgb);
            if (it == cache.end()) {
                auto idx = map.index_of(rgb);
                if (!idx)
                    throw DataError("mask " + file.string() + ": color (" + std::to_string(rgb[0]) + "," +
                                    std::to_string(rgb[1]) + "," + std::to_string(rgb[2]) + ") at (" +
                                    std::to_string(x) + "," + std::to_string(y) + ") is not in the class map");
                it = cache.emplace(rgb, *idx).first;
            }
            m.at(y, x) = it->second;
        }
    return m;
}

} // namespace detail

struct LoadOptions {
    std::size_t letterbox_to = 0; // 0 keeps native resolution
};

/// Loads `<root>/{train,val,test}/{images,labels}/*.png` with masks decoded
/// through the class map. A label is paired by identical file name or by
/// the `<stem>_L.png` convention. Missing or empty splits produce warnings.
inline DatasetSplit load_camvid(const std::filesystem::path& root, const ClassMap& map, const LoadOptions& opt = {})
{
    namespace fs = std::filesystem;
    DatasetSplit out;
    const std::array<std::pair<const char*, std::vector<SegSample>*>, 3> splits{
        {{"train", &out.train}, {"val", &out.val}, {"test", &out.test}}};
    for (const auto& [name, dst] : splits) {
        const fs::path images = root / name / "images";
        const fs::path labels = root / name / "labels";
        if (!fs::is_directory(images)) {
            out.warnings.push_back(std::string("split '") + name + "' has no images directory at " + images.string());
            continue;
        }
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(images))
            if (e.is_regular_file() && e.path().extension() == ".png")
                files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) {
            out.warnings.push_back(std::string("split '") + name + "' is empty");
            continue;
        }
        for (const fs::path& img_path : files) {
            fs::path label_path = labels / img_path.filename();
            if (!fs::exists(label_path))
                label_path = labels / (img_path.stem().string() + "_L.png");
            if (!fs::exists(label_path))
                throw DataError("no label for image " + img_path.string() + " (looked in " + labels.string() + ")");
            const RgbImage img = read_png(img_path);
            const RgbImage lab = read_png(label_path);
            if (img.width != lab.width || img.height != lab.height)
                throw DataError("image " + img_path.string() + " and label " + label_path.string() +
                                " differ in size");
            SegSample s{detail::image_from_rgb(img), detail::labels_from_rgb(lab, map, label_path),
                        img_path.stem().string()};
            if (opt.letterbox_to)
                s = letterbox(s, opt.letterbox_to, map.unlabeled_index());
            dst->push_back(std::move(s));
        }
    }
    return out;
}

/// Writes a split set in the layout load_camvid reads, with paletted masks.
inline void write_dataset(const std::filesystem::path& root, const DatasetSplit& data, const ClassMap& map)
{
    namespace fs = std::filesystem;
    const std::array<std::pair<const char*, const std::vector<SegSample>*>, 3> splits{
        {{"train", &data.train}, {"val", &data.val}, {"test", &data.test}}};
    fs::create_directories(root);
    save_class_map(root / "class_map.txt", map);
    for (const auto& [name, samples] : splits) {
        fs::create_directories(root / name / "images");
        fs::create_directories(root / name / "labels");
        for (const SegSample& s : *samples) {
            write_png(root / name / "images" / (s.id + ".png"), detail::rgb_from_image(s.image));
            write_png_paletted(root / name / "labels" / (s.id + ".png"), s.width(), s.height(), s.mask.labels,
                               map.colors);
        }
    }
}

// ---------------------------------------------------------------------------
// Batching

template <typename T>
struct Batch {
    Tensor<T> images; // (N,3,H,W)
    Tensor<T> onehot; // (N,C,H,W)
};

template <typename T = float>
Batch<T> make_batch(const std::vector<const SegSample*>& samples, std::size_t n_classes)
{
    if (samples.empty())
        throw std::invalid_argument("make_batch: no samples");
    const std::size_t h = samples[0]->height(), w = samples[0]->width();
    Batch<T> b{Tensor<T>(Shape{samples.size(), 3, h, w}), Tensor<T>(Shape{samples.size(), n_classes, h, w})};
    for (std::size_t n = 0; n < samples.size(); ++n) {
        const SegSample& s = *samples[n];
        if (s.height() != h || s.width() != w)
            throw ShapeError("make_batch: samples differ in size");
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    b.images.at(n, c, y, x) = static_cast<T>(s.image.at(0, c, y, x));
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t cls = s.mask.at(y, x);
                if (cls >= n_classes)
                    throw DataError("sample " + s.id + ": class index " + std::to_string(cls) + " out of range");
                b.onehot.at(n, cls, y, x) = T(1);
            }
    }
    return b;
}

} // namespace ptaseg
