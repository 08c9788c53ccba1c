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

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "model.hpp"
#include "png_io.hpp"

namespace ptaseg {

/// Malformed or mismatched checkpoint. A DataError so tools treat it as a
/// data failure.
class CheckpointError : public DataError {
public:
    using DataError::DataError;
};

inline constexpr int kCheckpointSchema = 1;
inline constexpr const char* kManifestFile = "manifest.txt";
inline constexpr const char* kPayloadFile = "tensors.bin";

/// One tensor record of a manifest, in payload order.
struct ManifestEntry {
    std::string name;
    std::string kind; // "param" or "buffer"
    Shape shape;
    std::uint64_t offset = 0; // in float32 elements
};

struct Manifest {
    int schema = kCheckpointSchema;
    ModelSpec spec;
    std::vector<PtaSiteInfo> sites;
    PtaConfig config;
    std::uint64_t payload_hash = 0;
    std::vector<ManifestEntry> tensors;
};

namespace detail {

template <typename T, typename Fn>
void for_each_state_tensor(SegModel<T>& model, Fn&& fn)
{
    model.visit_parameters([&](Var<T>& p) { fn(p.name(), "param", p.mutable_value()); });
    model.visit_buffers([&](const std::string& name, Tensor<T>& b) { fn(name, "buffer", b); });
}

inline void put_le32(std::vector<unsigned char>& out, float v)
{
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

inline float get_le32(const unsigned char* p)
{
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i)
        bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(bits);
}

[[noreturn]] inline void manifest_fail(const std::filesystem::path& file, std::size_t line, const std::string& msg)
{
    throw CheckpointError("checkpoint manifest " + file.string() + ":" + std::to_string(line) + ": " + msg);
}

} // namespace detail

inline std::string format_manifest(const Manifest& m)
{
    std::ostringstream os;
    os << "ptaseg-checkpoint " << m.schema << "\n";
    os << "n_classes " << m.spec.n_classes << "\n";
    os << "decoder_widths";
    for (std::size_t w : m.spec.decoder_widths)
        os << ' ' << w;
    os << "\ninput_skip " << (m.spec.input_skip ? 1 : 0) << "\n";
    os << "encoder mobilenetv2\n";
    os << "pta_sites " << m.sites.size() << "\n";
    for (std::size_t i = 0; i < m.sites.size(); ++i)
        os << "site " << i << " block " << m.sites[i].block_index << " channels " << m.sites[i].channels << " stride "
           << m.sites[i].stride << "\n";
    os << "config " << m.config.str() << "\n";
    os << "payload " << kPayloadFile << " float32_le fnv1a " << std::hex << std::setw(16) << std::setfill('0')
       << m.payload_hash << std::dec << "\n";
    os << "tensors " << m.tensors.size() << "\n";
    for (const ManifestEntry& e : m.tensors)
        os << "tensor " << e.name << ' ' << e.kind << ' ' << e.shape.n << ' ' << e.shape.c << ' ' << e.shape.h << ' '
           << e.shape.w << ' ' << e.offset << "\n";
    return os.str();
}

inline Manifest parse_manifest(const std::string& text, const std::filesystem::path& file = kManifestFile)
{
    Manifest m;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    std::size_t n_sites = 0, n_tensors = 0;
    bool have_header = false, have_sites = false, have_tensors = false, have_payload = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        auto need = [&](bool ok, const std::string& what) {
            if (!ok || ls.fail())
                detail::manifest_fail(file, lineno, what);
        };
        if (!have_header) {
            need(key == "ptaseg-checkpoint", "missing 'ptaseg-checkpoint' header");
            ls >> m.schema;
            need(true, "unreadable schema version");
            if (m.schema != kCheckpointSchema)
                detail::manifest_fail(file, lineno, "unsupported schema version " + std::to_string(m.schema));
            have_header = true;
        } else if (key == "n_classes") {
            ls >> m.spec.n_classes;
            need(m.spec.n_classes >= 2, "bad n_classes");
        } else if (key == "decoder_widths") {
            for (std::size_t& w : m.spec.decoder_widths)
                ls >> w;
            need(true, "expected 5 decoder widths");
        } else if (key == "input_skip") {
            int v = -1;
            ls >> v;
            need(v == 0 || v == 1, "input_skip must be 0 or 1");
            m.spec.input_skip = v == 1;
        } else if (key == "encoder") {
            std::string enc;
            ls >> enc;
            need(enc == "mobilenetv2", "unknown encoder '" + enc + "'");
        } else if (key == "pta_sites") {
            ls >> n_sites;
            need(true, "bad site count");
            have_sites = true;
        } else if (key == "site") {
            std::string kb, kc, ks;
            std::size_t idx = 0;
            PtaSiteInfo s;
            ls >> idx >> kb >> s.block_index >> kc >> s.channels >> ks >> s.stride;
            need(kb == "block" && kc == "channels" && ks == "stride" && idx == m.sites.size(), "malformed site line");
            m.sites.push_back(s);
        } else if (key == "config") {
            std::string c;
            ls >> c;
            try {
                m.config = parse_config(c);
            } catch (const ConfigError& e) {
                detail::manifest_fail(file, lineno, e.what());
            }
        } else if (key == "payload") {
            std::string name, fmt, hk, hex;
            ls >> name >> fmt >> hk >> hex;
            need(name == kPayloadFile && fmt == "float32_le" && hk == "fnv1a" && hex.size() == 16,
                 "malformed payload line");
            m.payload_hash = std::stoull(hex, nullptr, 16);
            have_payload = true;
        } else if (key == "tensors") {
            ls >> n_tensors;
            need(true, "bad tensor count");
            have_tensors = true;
        } else if (key == "tensor") {
            ManifestEntry e;
            ls >> e.name >> e.kind >> e.shape.n >> e.shape.c >> e.shape.h >> e.shape.w >> e.offset;
            need(e.kind == "param" || e.kind == "buffer", "malformed tensor line");
            need(e.shape.numel() > 0, "tensor '" + e.name + "' has an empty shape");
            m.tensors.push_back(std::move(e));
        } else {
            detail::manifest_fail(file, lineno, "unknown key '" + key + "'");
        }
    }
    if (!have_header)
        detail::manifest_fail(file, lineno, "empty manifest");
    if (!have_sites || m.sites.size() != n_sites)
        detail::manifest_fail(file, lineno, "site list incomplete");
    if (!have_payload)
        detail::manifest_fail(file, lineno, "missing payload line");
    if (!have_tensors || m.tensors.size() != n_tensors)
        detail::manifest_fail(file, lineno,
                              "expected " + std::to_string(n_tensors) + " tensors, found " +
                                  std::to_string(m.tensors.size()));
    return m;
}

/// Writes <dir>/manifest.txt and <dir>/tensors.bin. Parameters come first,
/// then normalization buffers, both in model visit order.
template <typename T>
void save_checkpoint(SegModel<T>& model, const std::filesystem::path& dir)
{
    Manifest m;
    m.spec = model.spec();
    m.sites = model.site_info();
    m.config = model.config();
    std::vector<unsigned char> payload;
    std::uint64_t offset = 0;
    detail::for_each_state_tensor(model, [&](const std::string& name, const char* kind, Tensor<T>& t) {
        m.tensors.push_back(ManifestEntry{name, kind, t.shape(), offset});
        offset += t.numel();
        for (std::size_t i = 0; i < t.numel(); ++i)
            detail::put_le32(payload, static_cast<float>(t[i]));
    });
    m.payload_hash = fnv1a(payload.data(), payload.size());

    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec)
        throw CheckpointError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    {
        std::ofstream bin(dir / kPayloadFile, std::ios::binary | std::ios::trunc);
        bin.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
        if (!bin)
            throw CheckpointError("cannot write " + (dir / kPayloadFile).string());
    }
    std::ofstream man(dir / kManifestFile, std::ios::trunc);
    man << format_manifest(m);
    if (!man)
        throw CheckpointError("cannot write " + (dir / kManifestFile).string());
}

inline Manifest read_manifest(const std::filesystem::path& dir)
{
    const auto file = dir / kManifestFile;
    std::ifstream in(file);
    if (!in)
        throw CheckpointError("checkpoint manifest " + file.string() + " not found");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_manifest(ss.str(), file);
}

/// Rebuilds the model described by the manifest and fills it from the
/// payload. Any disagreement between manifest, payload and architecture is
/// reported as CheckpointError.
template <typename T = float>
SegModel<T> load_checkpoint(const std::filesystem::path& dir)
{
    const Manifest m = read_manifest(dir);
    const auto man_file = dir / kManifestFile;
    SegModel<T> model(m.spec);

    const auto sites = model.site_info();
    if (sites.size() != m.sites.size())
        throw CheckpointError("checkpoint manifest " + man_file.string() + ": site count " +
                              std::to_string(m.sites.size()) + " does not match architecture (" +
                              std::to_string(sites.size()) + ")");
    for (std::size_t i = 0; i < sites.size(); ++i)
        if (sites[i].block_index != m.sites[i].block_index || sites[i].channels != m.sites[i].channels ||
            sites[i].stride != m.sites[i].stride)
            throw CheckpointError("checkpoint manifest " + man_file.string() + ": site " + std::to_string(i) +
                                  " metadata does not match architecture");

    const auto bin_file = dir / kPayloadFile;
    std::ifstream bin(bin_file, std::ios::binary);
    if (!bin)
        throw CheckpointError("checkpoint payload " + bin_file.string() + " not found");
    std::vector<unsigned char> payload((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    if (fnv1a(payload.data(), payload.size()) != m.payload_hash)
        throw CheckpointError("checkpoint payload " + bin_file.string() + " does not match manifest hash");

    std::size_t idx = 0;
    detail::for_each_state_tensor(model, [&](const std::string& name, const char* kind, Tensor<T>& t) {
        if (idx >= m.tensors.size())
            throw CheckpointError("checkpoint manifest " + man_file.string() + ": missing tensor '" + name + "'");
        const ManifestEntry& e = m.tensors[idx++];
        if (e.name != name || e.kind != kind || !(e.shape == t.shape()))
            throw CheckpointError("checkpoint manifest " + man_file.string() + ": tensor " + std::to_string(idx - 1) +
                                  " is '" + e.name + "' " + e.shape.str() + ", architecture expects '" + name + "' " +
                                  t.shape().str());
        if ((e.offset + t.numel()) * 4 > payload.size())
            throw CheckpointError("checkpoint payload " + bin_file.string() + " truncated at tensor '" + name + "'");
        const unsigned char* src = payload.data() + e.offset * 4;
        for (std::size_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<T>(detail::get_le32(src + 4 * i));
    });
    if (idx != m.tensors.size())
        throw CheckpointError("checkpoint manifest " + man_file.string() + ": " +
                              std::to_string(m.tensors.size() - idx) + " unexpected extra tensors");
    model.apply_config(m.config);
    return model;
}

} // namespace ptaseg
