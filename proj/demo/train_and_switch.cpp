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

// Train once on a small synthetic task, then switch the same weights
// between PTA configurations and compare quality and cost.

#include <cstdio>

#include "ptaseg/analysis.hpp"
#include "ptaseg/training.hpp"

using namespace ptaseg;

int main()
{
    SyntheticOptions data_opt;
    data_opt.n_train = 96;
    data_opt.n_val = 32;
    const DatasetSplit data = make_synthetic(data_opt);

    ModelSpec spec;
    spec.n_classes = data_opt.n_classes;
    SegModel<float> model(spec);

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.eval_configs = {};
    train(model, data.train, data.val, cfg, SamplingStrategy::standard(), [](const EpochMetrics& m) {
        std::printf("epoch %zu: loss %.4f (%.1fs)\n", m.epoch, m.train_loss, m.wall_seconds);
    });

    std::printf("\n%-8s %10s %14s %8s\n", "config", "params", "mult-adds@64", "dice");
    for (const PtaConfig& c : evaluation_configs()) {
        const ComplexityReport r = measure_complexity(model, c, 64);
        const double dice = evaluate(model, data.val, c);
        std::printf("%-8s %10llu %14llu %8.4f\n", c.str().c_str(), static_cast<unsigned long long>(r.params),
                    static_cast<unsigned long long>(r.mult_adds), dice);
    }
    return 0;
}
