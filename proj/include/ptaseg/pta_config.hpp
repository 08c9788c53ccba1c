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

#include <array>
#include <cctype>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "random.hpp"

namespace ptaseg {

enum class Branch : std::uint8_t { Light, Heavy, Both };

inline char branch_letter(Branch b)
{
    switch (b) {
    case Branch::Light: return 'L';
    case Branch::Heavy: return 'H';
    case Branch::Both: return 'B';
    }
    return '?';
}

class ConfigError : public std::invalid_argument {
public:
    ConfigError(const std::string& what, std::size_t position)
      : std::invalid_argument(what), m_position(position)
    { }

    /// Zero-based index of the offending character (or the length for
    /// length errors).
    std::size_t position() const { return m_position; }

private:
    std::size_t m_position;
};

/// Branch selection for the three adaptive sites, shallow to deep.
struct PtaConfig {
    static constexpr std::size_t kSites = 3;
    std::array<Branch, kSites> branches{Branch::Heavy, Branch::Heavy, Branch::Heavy};

    Branch operator[](std::size_t i) const { return branches[i]; }

    bool uses(Branch b) const
    {
        for (Branch x : branches)
            if (x == b)
                return true;
        return false;
    }

    /// Canonical form, e.g. "HLH".
    std::string str() const
    {
        std::string s;
        for (Branch b : branches)
            s += branch_letter(b);
        return s;
    }

    friend bool operator==(const PtaConfig&, const PtaConfig&) = default;
};

/// Parses a 3-letter config over {L,H,B}, case-insensitive.
inline PtaConfig parse_config(std::string_view text)
{
    if (text.size() != PtaConfig::kSites)
        throw ConfigError("PTA config '" + std::string(text) + "' must have exactly 3 letters (got " +
                              std::to_string(text.size()) + ")",
                          std::min(text.size(), PtaConfig::kSites));
    PtaConfig cfg;
    for (std::size_t i = 0; i < text.size(); ++i) {
        switch (std::toupper(static_cast<unsigned char>(text[i]))) {
        case 'L': cfg.branches[i] = Branch::Light; break;
        case 'H': cfg.branches[i] = Branch::Heavy; break;
        case 'B': cfg.branches[i] = Branch::Both; break;
        default:
            throw ConfigError("PTA config '" + std::string(text) + "': invalid branch '" + std::string(1, text[i]) +
                                  "' at position " + std::to_string(i) + " (expected L, H or B)",
                              i);
        }
    }
    return cfg;
}

/// The six post-training configurations reported for a trained model.
inline std::vector<PtaConfig> evaluation_configs()
{
    std::vector<PtaConfig> out;
    for (const char* s : {"HHH", "LHH", "HLH", "HHL", "LLL", "BBB"})
        out.push_back(parse_config(s));
    return out;
}

/// Train-time categorical distribution over configurations. Weights are
/// integers so the probabilities sum to one exactly.
class SamplingStrategy {
public:
    struct Entry {
        PtaConfig config;
        std::uint32_t weight;
    };

    explicit SamplingStrategy(std::vector<Entry> support) : m_support(std::move(support))
    {
        if (m_support.empty())
            throw std::invalid_argument("sampling strategy needs at least one configuration");
        for (const Entry& e : m_support) {
            if (e.weight == 0)
                throw std::invalid_argument("sampling weight for " + e.config.str() + " must be positive");
            m_total += e.weight;
        }
    }

    /// HHH 0.45, LHH/HLH/HHL 0.15 each, LLL 0.10. Both is never sampled.
    static SamplingStrategy standard()
    {
        return SamplingStrategy({{parse_config("HHH"), 45},
                                 {parse_config("LHH"), 15},
                                 {parse_config("HLH"), 15},
                                 {parse_config("HHL"), 15},
                                 {parse_config("LLL"), 10}});
    }

    static SamplingStrategy fixed(PtaConfig cfg) { return SamplingStrategy({{cfg, 1}}); }

    /// "standard" or "fixed:CFG".
    static SamplingStrategy parse(std::string_view spec)
    {
        if (spec == "standard")
            return standard();
        constexpr std::string_view prefix = "fixed:";
        if (spec.substr(0, prefix.size()) == prefix)
            return fixed(parse_config(spec.substr(prefix.size())));
        throw ConfigError("unknown sampling strategy '" + std::string(spec) + "' (expected standard or fixed:CFG)", 0);
    }

    const std::vector<Entry>& support() const { return m_support; }
    std::uint64_t total_weight() const { return m_total; }

    double probability(const PtaConfig& cfg) const
    {
        for (const Entry& e : m_support)
            if (e.config == cfg)
                return static_cast<double>(e.weight) / static_cast<double>(m_total);
        return 0.0;
    }

    PtaConfig sample(Rng& rng) const
    {
        std::uint64_t r = rng.below(m_total);
        for (const Entry& e : m_support) {
            if (r < e.weight)
                return e.config;
            r -= e.weight;
        }
        return m_support.back().config;
    }

private:
    std::vector<Entry> m_support;
    std::uint64_t m_total = 0;
};

} // namespace ptaseg
