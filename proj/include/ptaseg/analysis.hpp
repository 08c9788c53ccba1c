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
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "autodiff.hpp"
#include "model.hpp"
#include "pta_config.hpp"
#include "random.hpp"

namespace ptaseg {

// ---------------------------------------------------------------------------
// Complexity accounting

inline constexpr const char* kMacConvention =
    "conv mult-adds = Cout*(Cin/groups)*k*k*Hout*Wout; batchnorm folded (0); activations 0; "
    "add/mean2 counted 1 op per element in a separate elementwise column";

struct LayerRow {
    std::string name;
    OpKind kind;
    Shape output;
    std::uint64_t params = 0; // parameter scalars first used by this op
    std::uint64_t mult_adds = 0;
    std::uint64_t elementwise = 0;
};

struct ComplexityReport {
    std::string label;
    std::size_t resolution = 0;
    std::uint64_t params = 0;
    std::uint64_t mult_adds = 0;
    std::uint64_t elementwise = 0;
    std::vector<LayerRow> rows;
};

namespace detail {

class CountingObserver final : public ExecutionObserver {
public:
    CountingObserver() : ExecutionObserver(true) { }

    void on_op(const OpEvent& ev) override
    {
        LayerRow row{{}, ev.kind, ev.output, 0, ev.mult_adds, ev.elementwise};
        for (const ParamUse& p : ev.params)
            if (m_seen.insert(p.id).second)
                row.params += p.numel;
        row.name = ev.params.empty() ? std::string(op_name(ev.kind)) + "#" + std::to_string(m_rows.size())
                                     : std::string(ev.params.front().name);
        m_rows.push_back(std::move(row));
    }

    ComplexityReport report(std::string label, std::size_t resolution) &&
    {
        ComplexityReport r{std::move(label), resolution, 0, 0, 0, std::move(m_rows)};
        for (const LayerRow& row : r.rows) {
            r.params += row.params;
            r.mult_adds += row.mult_adds;
            r.elementwise += row.elementwise;
        }
        return r;
    }

private:
    std::unordered_set<const void*> m_seen;
    std::vector<LayerRow> m_rows;
};

} // namespace detail

/// Counts parameters reachable in one forward pass of a (1,3,R,R) input and
/// its multiply-adds, without doing any arithmetic. Works for any model type
/// exposing forward(Var, bool).
template <typename Model>
ComplexityReport measure_complexity(Model& model, std::size_t resolution, std::string label)
{
    if (resolution < 32)
        throw std::invalid_argument("complexity: resolution must be >= 32, got " + std::to_string(resolution));
    using T = typename Model::value_type;
    detail::CountingObserver obs;
    {
        ObserverScope scope(obs);
        model.forward(Var<T>(Tensor<T>(Shape{1, 3, resolution, resolution})), false);
    }
    return std::move(obs).report(std::move(label), resolution);
}

/// Complexity under cfg. The model's previous configuration is restored.
template <typename Model>
ComplexityReport measure_complexity(Model& model, const PtaConfig& cfg, std::size_t resolution)
{
    const PtaConfig prev = model.config();
    model.apply_config(cfg);
    try {
        ComplexityReport r = measure_complexity(model, resolution, "PTA-" + cfg.str());
        model.apply_config(prev);
        return r;
    } catch (...) {
        model.apply_config(prev);
        throw;
    }
}

template <typename Model>
std::uint64_t count_params(Model& model, const PtaConfig& cfg)
{ return measure_complexity(model, cfg, 32).params; }

template <typename Model>
std::uint64_t count_mult_adds(Model& model, const PtaConfig& cfg, std::size_t resolution)
{ return measure_complexity(model, cfg, resolution).mult_adds; }

inline constexpr const char* kNoPtaLabel = "No PTA";

/// No-PTA clone followed by the six evaluation configurations.
template <typename Model>
std::vector<ComplexityReport> complexity_table(Model& model, std::size_t resolution,
                                               const std::vector<PtaConfig>& configs = evaluation_configs())
{
    std::vector<ComplexityReport> out;
    auto plain = model.without_pta();
    out.push_back(measure_complexity(plain, resolution, kNoPtaLabel));
    for (const PtaConfig& c : configs)
        out.push_back(measure_complexity(model, c, resolution));
    return out;
}

// ---------------------------------------------------------------------------
// Latency

struct TimingReport {
    std::string label;
    Shape batch_shape;
    std::size_t n_batches = 0;
    double mean_ms = 0.0;
    double stddev_ms = 0.0;
    double ci95_half_width_ms = 0.0;
    std::optional<double> relative_percent;
    std::string baseline;
};

/// Mean, sample standard deviation and 95% normal-approximation half-width.
inline TimingReport summarize_timings(std::string label, const Shape& batch, const std::vector<double>& ms)
{
    if (ms.size() < 2)
        throw std::invalid_argument("benchmark: at least 2 batches are needed for a confidence interval");
    TimingReport r;
    r.label = std::move(label);
    r.batch_shape = batch;
    r.n_batches = ms.size();
    double sum = 0.0;
    for (double v : ms)
        sum += v;
    r.mean_ms = sum / static_cast<double>(ms.size());
    double ss = 0.0;
    for (double v : ms)
        ss += (v - r.mean_ms) * (v - r.mean_ms);
    r.stddev_ms = std::sqrt(ss / static_cast<double>(ms.size() - 1));
    r.ci95_half_width_ms = 1.96 * r.stddev_ms / std::sqrt(static_cast<double>(ms.size()));
    return r;
}

/// One variant in a benchmark: prepare() runs untimed before every timed
/// run() call.
struct BenchCase {
    std::string label;
    std::function<void()> prepare;
    std::function<void()> run;
};

/// Round-robin timing: each round runs every case once, so slow drifts of
/// the machine affect all cases alike. Warmup rounds are discarded.
inline std::vector<TimingReport> benchmark_interleaved(const std::vector<BenchCase>& cases, const Shape& batch,
                                                       std::size_t n_batches, std::size_t warmup = 3)
{
    if (n_batches < 2)
        throw std::invalid_argument("benchmark: at least 2 batches are needed for a confidence interval");
    if (cases.empty())
        throw std::invalid_argument("benchmark: no cases");
    std::vector<std::vector<double>> ms(cases.size());
    for (std::size_t round = 0; round < warmup + n_batches; ++round)
        for (std::size_t i = 0; i < cases.size(); ++i) {
            if (cases[i].prepare)
                cases[i].prepare();
            const auto t0 = std::chrono::steady_clock::now();
            cases[i].run();
            const auto t1 = std::chrono::steady_clock::now();
            if (round >= warmup)
                ms[i].push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
    std::vector<TimingReport> out;
    for (std::size_t i = 0; i < cases.size(); ++i)
        out.push_back(summarize_timings(cases[i].label, batch, ms[i]));
    return out;
}

/// Benchmark cases for a model: "No PTA" (clone sharing weights) and/or
/// PTA configurations. Inputs are uniform in [0,1) drawn from seed.
template <typename T>
std::vector<BenchCase> model_bench_cases(SegModel<T>& model, const std::vector<std::optional<PtaConfig>>& variants,
                                         const Shape& batch, std::uint64_t seed = 0)
{
    auto input = std::make_shared<Var<T>>(Tensor<T>(batch));
    Rng rng(seed);
    for (std::size_t i = 0; i < input->numel(); ++i)
        input->mutable_value()[i] = static_cast<T>(rng.uniform());
    std::vector<BenchCase> cases;
    for (const auto& v : variants) {
        if (!v) {
            auto plain = std::make_shared<SegModel<T>>(model.without_pta());
            cases.push_back({kNoPtaLabel, {}, [plain, input] { plain->forward(*input, false); }});
        } else {
            const PtaConfig cfg = *v;
            cases.push_back({"PTA-" + cfg.str(), [&model, cfg] { model.apply_config(cfg); },
                             [&model, input] { model.forward(*input, false); }});
        }
    }
    return cases;
}

/// Single-configuration benchmark.
template <typename T>
TimingReport benchmark(SegModel<T>& model, const PtaConfig& cfg, const Shape& batch, std::size_t n_batches,
                       std::size_t warmup = 3, std::uint64_t seed = 0)
{ return benchmark_interleaved(model_bench_cases(model, {cfg}, batch, seed), batch, n_batches, warmup).front(); }

/// relative_percent = 100 * mean / mean(baseline).
inline void set_relative(std::vector<TimingReport>& reports, const std::string& baseline)
{
    auto it = std::find_if(reports.begin(), reports.end(), [&](const TimingReport& r) { return r.label == baseline; });
    if (it == reports.end())
        throw std::invalid_argument("benchmark: baseline '" + baseline + "' was not measured");
    const double base = it->mean_ms;
    for (TimingReport& r : reports) {
        r.relative_percent = 100.0 * r.mean_ms / base;
        r.baseline = baseline;
    }
}

// ---------------------------------------------------------------------------
// Tables

/// One row of a results table; absent fields become omitted columns.
struct TableRow {
    std::string label;
    std::optional<std::string> task;
    std::optional<std::size_t> resolution;
    std::optional<std::uint64_t> params;
    std::optional<std::uint64_t> mult_adds;
    std::optional<std::uint64_t> elementwise;
    std::optional<double> mean_ms;
    std::optional<double> ci95_ms;
    std::optional<double> relative_percent;
    std::optional<double> dice;

    friend bool operator==(const TableRow&, const TableRow&) = default;
};

inline TableRow to_row(const ComplexityReport& r)
{
    TableRow row;
    row.label = r.label;
    row.resolution = r.resolution;
    row.params = r.params;
    row.mult_adds = r.mult_adds;
    row.elementwise = r.elementwise;
    return row;
}

inline TableRow to_row(const TimingReport& r)
{
    TableRow row;
    row.label = r.label;
    row.mean_ms = r.mean_ms;
    row.ci95_ms = r.ci95_half_width_ms;
    row.relative_percent = r.relative_percent;
    return row;
}

/// Merges rows with equal labels, later fields filling gaps.
inline std::vector<TableRow> merge_rows(const std::vector<TableRow>& a, const std::vector<TableRow>& b)
{
    std::vector<TableRow> out = a;
    for (const TableRow& r : b) {
        auto it = std::find_if(out.begin(), out.end(), [&](const TableRow& x) { return x.label == r.label; });
        if (it == out.end()) {
            out.push_back(r);
            continue;
        }
        auto fill = [](auto& dst, const auto& src) {
            if (!dst)
                dst = src;
        };
        fill(it->task, r.task);
        fill(it->resolution, r.resolution);
        fill(it->params, r.params);
        fill(it->mult_adds, r.mult_adds);
        fill(it->elementwise, r.elementwise);
        fill(it->mean_ms, r.mean_ms);
        fill(it->ci95_ms, r.ci95_ms);
        fill(it->relative_percent, r.relative_percent);
        fill(it->dice, r.dice);
    }
    return out;
}

/// Classification-encoder vs segmentation comparison rows.
inline std::vector<TableRow> task_comparison_rows(const std::vector<ComplexityReport>& classification,
                                                  const std::vector<ComplexityReport>& segmentation)
{
    std::vector<TableRow> out;
    for (const auto& r : classification) {
        out.push_back(to_row(r));
        out.back().label = "MobileNetV2 " + r.label;
        out.back().task = "Class.";
    }
    for (const auto& r : segmentation) {
        out.push_back(to_row(r));
        out.back().label = "U-Net " + r.label;
        out.back().task = "Segm.";
    }
    return out;
}

namespace detail {

inline std::string fixed(double v, int digits)
{
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

inline std::string millions(std::uint64_t v) { return fixed(static_cast<double>(v) / 1e6, 2); }

} // namespace detail

/// Aligned plain-text table. Columns that no row fills are left out.
inline std::string render_text(const std::vector<TableRow>& rows)
{
    if (rows.empty())
        throw std::invalid_argument("render_tables: no rows");
    struct Column {
        std::string header;
        std::function<std::optional<std::string>(const TableRow&)> cell;
        bool left = false;
    };
    using S = std::optional<std::string>;
    const std::vector<Column> all{
        {"Config", [](const TableRow& r) -> S { return r.label; }, true},
        {"Task", [](const TableRow& r) -> S { return r.task; }, true},
        {"Res", [](const TableRow& r) -> S { return r.resolution ? S(std::to_string(*r.resolution)) : S(); }},
        {"Params (M)", [](const TableRow& r) -> S { return r.params ? S(detail::millions(*r.params)) : S(); }},
        {"Mult-Adds (M)",
         [](const TableRow& r) -> S { return r.mult_adds ? S(detail::millions(*r.mult_adds)) : S(); }},
        {"Elementwise (M)",
         [](const TableRow& r) -> S { return r.elementwise ? S(detail::millions(*r.elementwise)) : S(); }},
        {"Time (ms)",
         [](const TableRow& r) -> S {
             if (!r.mean_ms)
                 return S();
             return detail::fixed(*r.mean_ms, 2) + (r.ci95_ms ? " +- " + detail::fixed(*r.ci95_ms, 2) : "");
         }},
        {"Relative (%)",
         [](const TableRow& r) -> S { return r.relative_percent ? S(detail::fixed(*r.relative_percent, 2)) : S(); }},
        {"Dice", [](const TableRow& r) -> S { return r.dice ? S(detail::fixed(*r.dice, 4)) : S(); }},
    };

    std::vector<const Column*> used;
    std::vector<std::vector<std::string>> cells;
    for (const Column& c : all) {
        std::vector<std::string> col;
        bool any = false;
        for (const TableRow& r : rows) {
            auto v = c.cell(r);
            any = any || v.has_value();
            col.push_back(v.value_or("-"));
        }
        if (any) {
            used.push_back(&c);
            cells.push_back(std::move(col));
        }
    }
    std::vector<std::size_t> width(used.size());
    for (std::size_t j = 0; j < used.size(); ++j) {
        width[j] = used[j]->header.size();
        for (const auto& s : cells[j])
            width[j] = std::max(width[j], s.size());
    }
    std::ostringstream os;
    auto emit = [&](auto cell_of) {
        for (std::size_t j = 0; j < used.size(); ++j) {
            if (j)
                os << "  ";
            const std::string s = cell_of(j);
            if (used[j]->left)
                os << s << std::string(j + 1 < used.size() ? width[j] - s.size() : 0, ' ');
            else
                os << std::string(width[j] - s.size(), ' ') << s;
        }
        os << '\n';
    };
    emit([&](std::size_t j) { return used[j]->header; });
    std::size_t total = 0;
    for (std::size_t w : width)
        total += w;
    os << std::string(total + 2 * (used.size() - 1), '-') << '\n';
    for (std::size_t i = 0; i < rows.size(); ++i)
        emit([&](std::size_t j) { return cells[j][i]; });
    return os.str();
}

inline nlohmann::json row_to_json(const TableRow& r)
{
    nlohmann::json j;
    j["config"] = r.label;
    auto put = [&](const char* key, const auto& v) {
        if (v)
            j[key] = *v;
    };
    put("task", r.task);
    put("resolution", r.resolution);
    put("params", r.params);
    put("mult_adds", r.mult_adds);
    put("elementwise", r.elementwise);
    put("mean_ms", r.mean_ms);
    put("ci95_ms", r.ci95_ms);
    put("relative_percent", r.relative_percent);
    put("dice", r.dice);
    return j;
}

inline TableRow row_from_json(const nlohmann::json& j)
{
    TableRow r;
    r.label = j.at("config").get<std::string>();
    auto get = [&](const char* key, auto& dst) {
        if (j.contains(key))
            dst = j.at(key).get<typename std::remove_reference_t<decltype(dst)>::value_type>();
    };
    get("task", r.task);
    get("resolution", r.resolution);
    get("params", r.params);
    get("mult_adds", r.mult_adds);
    get("elementwise", r.elementwise);
    get("mean_ms", r.mean_ms);
    get("ci95_ms", r.ci95_ms);
    get("relative_percent", r.relative_percent);
    get("dice", r.dice);
    return r;
}

/// One JSON object per line.
inline std::string render_jsonl(const std::vector<TableRow>& rows)
{
    std::string out;
    for (const TableRow& r : rows)
        out += row_to_json(r).dump() + "\n";
    return out;
}

inline std::vector<TableRow> parse_jsonl(const std::string& text)
{
    std::vector<TableRow> rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line))
        if (!line.empty())
            rows.push_back(row_from_json(nlohmann::json::parse(line)));
    return rows;
}

} // namespace ptaseg
