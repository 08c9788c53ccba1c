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

// ptaseg command-line tool: train, eval, benchmark, complexity, synth-data
// and inspect subcommands over the header-only library.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ptaseg/analysis.hpp"
#include "ptaseg/checkpoint.hpp"
#include "ptaseg/data.hpp"
#include "ptaseg/model.hpp"
#include "ptaseg/training.hpp"

namespace fs = std::filesystem;
using namespace ptaseg;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct DataArgs {
    std::string root;
    bool synthetic = false;
    SyntheticOptions synth;
    std::size_t letterbox = 256;
};

void add_data_options(CLI::App* cmd, DataArgs& d)
{
    auto* root = cmd->add_option("--data", d.root, "dataset root (<root>/{train,val,test}/{images,labels})");
    auto* syn = cmd->add_flag("--synthetic", d.synthetic, "use the generated shapes dataset");
    root->excludes(syn);
    cmd->add_option("--synthetic-train", d.synth.n_train, "synthetic training samples")->capture_default_str();
    cmd->add_option("--synthetic-val", d.synth.n_val, "synthetic validation samples")->capture_default_str();
    cmd->add_option("--synthetic-size", d.synth.size, "synthetic image side")->capture_default_str();
    cmd->add_option("--synthetic-classes", d.synth.n_classes, "synthetic class count")->capture_default_str();
    cmd->add_option("--data-seed", d.synth.seed, "synthetic generator seed")->capture_default_str();
    cmd->add_option("--letterbox", d.letterbox, "letterbox side for --data images (0 keeps size)")
        ->capture_default_str();
}

struct LoadedData {
    DatasetSplit split;
    std::size_t n_classes = 0;
};

LoadedData load_data(const DataArgs& d)
{
    LoadedData out;
    if (d.synthetic) {
        out.split = make_synthetic(d.synth);
        out.n_classes = d.synth.n_classes;
        return out;
    }
    if (d.root.empty())
        throw CLI::ValidationError("data", "one of --data or --synthetic is required");
    const fs::path map_file = fs::path(d.root) / "class_map.txt";
    const ClassMap map = fs::exists(map_file) ? load_class_map(map_file) : camvid_class_map();
    out.split = load_camvid(d.root, map, LoadOptions{d.letterbox});
    for (const std::string& w : out.split.warnings)
        std::cerr << "warning: " << w << "\n";
    out.n_classes = map.size();
    return out;
}

std::vector<PtaConfig> parse_config_list(const std::string& text)
{
    if (text == "all" || text == "ALL")
        return evaluation_configs();
    std::vector<PtaConfig> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t comma = text.find(',', start);
        out.push_back(parse_config(text.substr(start, comma - start)));
        if (comma == std::string::npos)
            break;
        start = comma + 1;
    }
    return out;
}

void emit_jsonl(const std::string& path, const std::string& text)
{
    if (path.empty())
        return;
    if (path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream f(path, std::ios::trunc);
    f << text;
    if (!f)
        throw DataError("cannot write " + path);
}

SegModel<float> model_from(const std::string& ckpt, std::size_t n_classes, std::uint64_t seed)
{
    if (!ckpt.empty())
        return load_checkpoint<float>(ckpt);
    ModelSpec spec;
    spec.n_classes = n_classes;
    spec.seed = seed;
    return SegModel<float>(spec);
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    DataArgs data;
    TrainConfig cfg;
    std::string out;
    std::string metrics;
    std::string sampling = "standard";
    bool no_augment = false;
};

int run_train(TrainArgs& a)
{
    const SamplingStrategy strategy = SamplingStrategy::parse(a.sampling);
    LoadedData d = load_data(a.data);
    if (d.split.train.empty())
        throw DataError("training split is empty");
    a.cfg.augment = !a.no_augment;

    ModelSpec spec;
    spec.n_classes = d.n_classes;
    spec.seed = a.cfg.seed;
    SegModel<float> model(spec);

    const std::string metrics_path = a.metrics.empty() ? (fs::path(a.out) / "metrics.jsonl").string() : a.metrics;
    fs::create_directories(fs::path(metrics_path).parent_path().empty() ? fs::path(".")
                                                                         : fs::path(metrics_path).parent_path());
    std::ofstream log(metrics_path, std::ios::trunc);
    if (!log)
        throw DataError("cannot write metrics log " + metrics_path);
    nlohmann::json start{{"event", "start"},
                         {"rng", Rng::kIdentity},
                         {"seed", a.cfg.seed},
                         {"sampling", a.sampling},
                         {"epochs", a.cfg.epochs},
                         {"batch_size", a.cfg.batch_size},
                         {"lr", a.cfg.adam.lr},
                         {"max_iterations", a.cfg.max_iterations},
                         {"train_samples", d.split.train.size()},
                         {"val_samples", d.split.val.size()},
                         {"n_classes", d.n_classes},
                         {"params", model.parameter_count()}};
    log << start.dump() << "\n" << std::flush;

    train(model, d.split.train, d.split.val, a.cfg, strategy, [&](const EpochMetrics& m) {
        nlohmann::json rec{{"event", "epoch"},
                           {"epoch", m.epoch},
                           {"iterations", m.iterations},
                           {"wall_time", m.wall_seconds},
                           {"train_loss", m.train_loss}};
        nlohmann::json dice = nlohmann::json::object();
        for (const auto& [c, v] : m.val_dice)
            dice[c.str()] = v;
        rec["val_dice"] = dice;
        log << rec.dump() << "\n" << std::flush;
        std::printf("epoch %zu  iter %zu  %.1fs  loss %.4f", m.epoch, m.iterations, m.wall_seconds, m.train_loss);
        for (const auto& [c, v] : m.val_dice)
            std::printf("  %s %.4f", c.str().c_str(), v);
        std::printf("\n");
        std::fflush(stdout);
    });
    model.apply_config(PtaConfig{});
    save_checkpoint(model, a.out);
    std::printf("checkpoint written to %s\n", a.out.c_str());
    return kOk;
}

struct EvalArgs {
    DataArgs data;
    std::string ckpt;
    std::string config = "all";
    std::string split = "val";
    std::size_t batch_size = 16;
    std::string jsonl;
};

int run_eval(EvalArgs& a)
{
    const std::vector<PtaConfig> configs = parse_config_list(a.config);
    SegModel<float> model = load_checkpoint<float>(a.ckpt);
    a.data.synth.n_test = a.split == "test" ? a.data.synth.n_val : 0;
    LoadedData d = load_data(a.data);
    if (d.n_classes != model.spec().n_classes)
        throw DataError("dataset has " + std::to_string(d.n_classes) + " classes, checkpoint expects " +
                        std::to_string(model.spec().n_classes));
    const std::vector<SegSample>& samples =
        a.split == "train" ? d.split.train : a.split == "test" ? d.split.test : d.split.val;
    if (samples.empty())
        throw DataError("split '" + a.split + "' is empty");

    std::vector<TableRow> rows;
    for (const PtaConfig& c : configs) {
        TableRow r;
        r.label = "PTA-" + c.str();
        r.dice = evaluate(model, samples, c, a.batch_size);
        rows.push_back(r);
    }
    std::cout << render_text(rows);
    emit_jsonl(a.jsonl, render_jsonl(rows));
    return kOk;
}

struct BenchArgs {
    std::string ckpt;
    std::string config = "all";
    std::string baseline = "HHH";
    std::size_t batches = 1000;
    std::size_t batch_size = 8;
    std::size_t resolution = 256;
    std::size_t warmup = 3;
    std::size_t classes = 12;
    std::uint64_t seed = 0;
    std::string jsonl;
};

std::string baseline_label(const std::string& b)
{
    std::string s = b;
    for (char& ch : s)
        ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (s == "nopta" || s == "no-pta" || s == "none")
        return kNoPtaLabel;
    return "PTA-" + parse_config(b).str();
}

int run_benchmark(BenchArgs& a)
{
    const std::vector<PtaConfig> configs = parse_config_list(a.config);
    const std::string base = baseline_label(a.baseline);
    SegModel<float> model = model_from(a.ckpt, a.classes, a.seed);

    std::vector<std::optional<PtaConfig>> variants;
    if (a.config == "all" || base == kNoPtaLabel)
        variants.push_back(std::nullopt);
    for (const PtaConfig& c : configs)
        variants.push_back(c);
    if (base != kNoPtaLabel && std::none_of(configs.begin(), configs.end(),
                                            [&](const PtaConfig& c) { return "PTA-" + c.str() == base; }))
        variants.push_back(parse_config(a.baseline));

    const Shape batch{a.batch_size, 3, a.resolution, a.resolution};
    const std::uint64_t before = model.state_checksum();
    auto reports = benchmark_interleaved(model_bench_cases(model, variants, batch, a.seed), batch, a.batches, a.warmup);
    if (model.state_checksum() != before)
        throw NumericError("benchmark modified model state");
    set_relative(reports, base);

    std::vector<TableRow> rows;
    for (const auto& r : reports)
        rows.push_back(to_row(r));
    std::printf("batch %s, %zu batches after %zu warmup, relative to %s\n", batch.str().c_str(), a.batches, a.warmup,
                base.c_str());
    std::cout << render_text(rows);
    emit_jsonl(a.jsonl, render_jsonl(rows));
    return kOk;
}

struct ComplexityArgs {
    std::string ckpt;
    std::string config = "all";
    std::size_t resolution = 128;
    std::size_t classes = 12;
    bool task_comparison = false;
    bool layers = false;
    std::string jsonl;
};

int run_complexity(ComplexityArgs& a)
{
    const std::vector<PtaConfig> configs = parse_config_list(a.config);
    SegModel<float> model = model_from(a.ckpt, a.classes, 0);

    std::vector<ComplexityReport> reports;
    if (a.config == "all") {
        reports = complexity_table(model, a.resolution, configs);
    } else {
        for (const PtaConfig& c : configs)
            reports.push_back(measure_complexity(model, c, a.resolution));
    }

    std::vector<TableRow> rows;
    if (a.task_comparison) {
        Classifier<float> cls;
        auto plain = cls.without_pta();
        const std::vector<ComplexityReport> c{measure_complexity(plain, a.resolution, kNoPtaLabel),
                                              measure_complexity(cls, parse_config("LLL"), a.resolution)};
        auto seg_plain = model.without_pta();
        const std::vector<ComplexityReport> s{measure_complexity(seg_plain, a.resolution, kNoPtaLabel),
                                              measure_complexity(model, parse_config("LLL"), a.resolution)};
        rows = task_comparison_rows(c, s);
    } else {
        for (const auto& r : reports)
            rows.push_back(to_row(r));
    }

    std::printf("resolution %zux%zu; %s\n", a.resolution, a.resolution, kMacConvention);
    std::cout << render_text(rows);
    if (a.layers)
        for (const auto& r : reports) {
            std::printf("\n%s\n", r.label.c_str());
            for (const LayerRow& l : r.rows)
                std::printf("  %-48s %-12s %10llu %14llu %10llu\n", l.name.c_str(), l.output.str().c_str(),
                            static_cast<unsigned long long>(l.params), static_cast<unsigned long long>(l.mult_adds),
                            static_cast<unsigned long long>(l.elementwise));
        }
    emit_jsonl(a.jsonl, render_jsonl(rows));
    return kOk;
}

struct SynthArgs {
    SyntheticOptions opt;
    std::string out;
};

int run_synth(SynthArgs& a)
{
    const DatasetSplit d = make_synthetic(a.opt);
    write_dataset(a.out, d, synthetic_class_map(a.opt.n_classes));
    std::printf("wrote %zu/%zu/%zu samples to %s\n", d.train.size(), d.val.size(), d.test.size(), a.out.c_str());
    return kOk;
}

struct InspectArgs {
    std::string ckpt;
    std::size_t classes = 12;
};

int run_inspect(InspectArgs& a)
{
    SegModel<float> model = model_from(a.ckpt, a.classes, 0);
    const ModelSpec& s = model.spec();
    std::printf("source          %s\n", a.ckpt.empty() ? "fresh model" : a.ckpt.c_str());
    if (!a.ckpt.empty())
        std::printf("schema          %d\n", read_manifest(a.ckpt).schema);
    std::printf("classes         %zu\n", s.n_classes);
    std::printf("decoder widths  %zu %zu %zu %zu %zu%s\n", s.decoder_widths[0], s.decoder_widths[1],
                s.decoder_widths[2], s.decoder_widths[3], s.decoder_widths[4], s.input_skip ? " (+input skip)" : "");
    std::printf("config          %s\n", model.config().str().c_str());
    const std::vector<PtaSiteInfo> sites = model.site_info();
    for (std::size_t i = 0; i < sites.size(); ++i) {
        const PtaSiteInfo& p = sites[i];
        std::printf("site %zu          block %zu, %zu channels, stride %zu\n", i, p.block_index, p.channels, p.stride);
    }
    std::printf("parameters      %zu (all branches)\n", model.parameter_count());
    std::printf("checksum        %016llx\n", static_cast<unsigned long long>(model.state_checksum()));
    return kOk;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"U-Net segmentation with post-train adaptive blocks"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "ptaseg 1.0.0");

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "train a model with PTA sampling");
    add_data_options(train_cmd, train_args.data);
    train_cmd->add_option("--epochs", train_args.cfg.epochs, "epochs")->capture_default_str()->check(
        CLI::PositiveNumber);
    train_cmd->add_option("--batch-size", train_args.cfg.batch_size, "mini-batch size")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    train_cmd->add_option("--lr", train_args.cfg.adam.lr, "Adam learning rate")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    train_cmd->add_option("--seed", train_args.cfg.seed, "seed")->capture_default_str();
    train_cmd->add_option("--max-iterations", train_args.cfg.max_iterations, "stop after this many steps (0: no cap)")
        ->capture_default_str();
    train_cmd
        ->add_option("--sampling", train_args.sampling,
                     "standard (45% HHH, 15% each single-Light, 10% LLL) or fixed:CONFIG")
        ->capture_default_str();
    train_cmd->add_option("--out", train_args.out, "checkpoint directory")->required();
    train_cmd->add_option("--metrics", train_args.metrics, "metrics log (default <out>/metrics.jsonl)");
    train_cmd->add_flag("--no-augment", train_args.no_augment, "disable crop and color jitter");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "dice score per configuration");
    add_data_options(eval_cmd, eval_args.data);
    eval_cmd->add_option("--ckpt", eval_args.ckpt, "checkpoint directory")->required();
    eval_cmd->add_option("--config", eval_args.config, "config, comma list, or all")->capture_default_str();
    eval_cmd->add_option("--split", eval_args.split, "train, val or test")
        ->capture_default_str()
        ->check(CLI::IsMember({"train", "val", "test"}));
    eval_cmd->add_option("--batch-size", eval_args.batch_size, "evaluation batch")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    eval_cmd->add_option("--jsonl", eval_args.jsonl, "structured output file (- for stdout)");

    BenchArgs bench_args;
    auto* bench_cmd = app.add_subcommand("benchmark", "forward latency with 95% confidence intervals");
    bench_cmd->add_option("--ckpt", bench_args.ckpt, "checkpoint (default: fresh model)");
    bench_cmd->add_option("--config", bench_args.config, "config, comma list, or all")->capture_default_str();
    bench_cmd->add_option("--baseline", bench_args.baseline, "relative-time denominator: CONFIG or nopta")
        ->capture_default_str();
    bench_cmd->add_option("--batches", bench_args.batches, "timed batches per config")
        ->capture_default_str()
        ->check(CLI::Validator(
            [](std::string& v) {
                return std::stoll(v) < 2 ? std::string("at least 2 batches are needed, the CI is undefined for 1")
                                         : std::string();
            },
            ">=2"));
    bench_cmd->add_option("--batch-size", bench_args.batch_size, "batch size")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    bench_cmd->add_option("--resolution", bench_args.resolution, "input side (multiple of 32)")->capture_default_str();
    bench_cmd->add_option("--warmup", bench_args.warmup, "untimed rounds")->capture_default_str();
    bench_cmd->add_option("--classes", bench_args.classes, "classes of a fresh model")->capture_default_str();
    bench_cmd->add_option("--seed", bench_args.seed, "seed for weights and input")->capture_default_str();
    bench_cmd->add_option("--jsonl", bench_args.jsonl, "structured output file (- for stdout)");

    ComplexityArgs cx_args;
    auto* cx_cmd = app.add_subcommand("complexity", "parameter and multiply-add counts");
    cx_cmd->add_option("--ckpt", cx_args.ckpt, "checkpoint (default: fresh model)");
    cx_cmd->add_option("--config", cx_args.config, "config, comma list, or all")->capture_default_str();
    cx_cmd->add_option("--resolution", cx_args.resolution, "input side used for counting")->capture_default_str();
    cx_cmd->add_option("--classes", cx_args.classes, "classes of a fresh model")->capture_default_str();
    cx_cmd->add_flag("--task-comparison", cx_args.task_comparison, "classification vs segmentation rows");
    cx_cmd->add_flag("--layers", cx_args.layers, "per-layer breakdown");
    cx_cmd->add_option("--jsonl", cx_args.jsonl, "structured output file (- for stdout)");

    SynthArgs synth_args;
    auto* synth_cmd = app.add_subcommand("synth-data", "write the synthetic shapes dataset to disk");
    synth_cmd->add_option("--out", synth_args.out, "dataset root")->required();
    synth_cmd->add_option("--train", synth_args.opt.n_train, "training samples")->capture_default_str();
    synth_cmd->add_option("--val", synth_args.opt.n_val, "validation samples")->capture_default_str();
    synth_cmd->add_option("--test", synth_args.opt.n_test, "test samples")->capture_default_str();
    synth_cmd->add_option("--size", synth_args.opt.size, "image side")->capture_default_str();
    synth_cmd->add_option("--classes", synth_args.opt.n_classes, "classes")->capture_default_str();
    synth_cmd->add_option("--seed", synth_args.opt.seed, "seed")->capture_default_str();

    InspectArgs inspect_args;
    auto* inspect_cmd = app.add_subcommand("inspect", "summarize a checkpoint or a fresh model");
    inspect_cmd->add_option("--ckpt", inspect_args.ckpt, "checkpoint directory");
    inspect_cmd->add_option("--classes", inspect_args.classes, "classes of a fresh model")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*train_cmd)
            return run_train(train_args);
        if (*eval_cmd)
            return run_eval(eval_args);
        if (*bench_cmd)
            return run_benchmark(bench_args);
        if (*cx_cmd)
            return run_complexity(cx_args);
        if (*synth_cmd)
            return run_synth(synth_args);
        if (*inspect_cmd)
            return run_inspect(inspect_args);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    }
    return kUsage;
}
