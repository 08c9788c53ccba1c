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

#include <fstream>

#include <gtest/gtest.h>

#include "ptaseg/checkpoint.hpp"
#include "test_util.hpp"

using namespace ptaseg;
using ptaseg::testing::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& s)
{
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
}

// A model whose normalization buffers are no longer at their defaults.
SegModel<float> trained_like_model(std::uint64_t seed)
{
    SegModel<float> m = build_model<float>(seed, 4);
    Rng rng(seed + 100);
    m.visit_buffers([&](const std::string& name, Tensor<float>& b) {
        const bool var = name.ends_with("running_var");
        for (float& v : b.span())
            v = static_cast<float>(var ? rng.uniform(0.5, 1.5) : rng.uniform(-0.2, 0.2));
    });
    m.apply_config(parse_config("LBH"));
    return m;
}

std::size_t line_of(const std::string& text, const std::string& prefix)
{
    std::istringstream in(text);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n)
        if (line.starts_with(prefix))
            return n;
    return 0;
}

void expect_error(const std::filesystem::path& dir, const std::string& fragment)
{
    try {
        load_checkpoint(dir);
        ADD_FAILURE() << "expected CheckpointError containing '" << fragment << "'";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
}

class CheckpointTest : public ::testing::Test {
protected:
    void SetUp() override { save_checkpoint(model, dir.path()); }
    std::filesystem::path manifest() const { return dir.path() / kManifestFile; }
    std::filesystem::path payload() const { return dir.path() / kPayloadFile; }

    TempDir dir{"ckpt"};
    SegModel<float> model = trained_like_model(7);
};

TEST_F(CheckpointTest, RoundTripIsBitwise)
{
    SegModel<float> back = load_checkpoint(dir.path());
    EXPECT_EQ(back.state_checksum(), model.state_checksum());
    EXPECT_EQ(back.config().str(), "LBH");
    Rng rng(1);
    const Var<float> x(ptaseg::testing::random_tensor<float>(Shape{2, 3, 64, 64}, rng, 0, 1));
    for (const PtaConfig& c : evaluation_configs()) {
        model.apply_config(c);
        back.apply_config(c);
        EXPECT_TRUE(ptaseg::testing::bitwise_equal(model.forward(x, false).value(), back.forward(x, false).value()))
            << c.str();
    }
}

TEST_F(CheckpointTest, ModeSwitchAfterLoadKeepsState)
{
    SegModel<float> back = load_checkpoint(dir.path());
    const auto before = back.state_checksum();
    for (const char* c : {"LLL", "BBB", "HLB", "HHH"}) {
        back.apply_config(parse_config(c));
        back.forward(Var<float>(Tensor<float>(Shape{1, 3, 32, 32}, 0.5f)), false);
        EXPECT_EQ(back.state_checksum(), before) << c;
    }
}

TEST_F(CheckpointTest, ResaveIsIdentical)
{
    TempDir again("ckpt2");
    save_checkpoint(*std::make_unique<SegModel<float>>(load_checkpoint(dir.path())), again.path());
    EXPECT_EQ(slurp(again.path() / kManifestFile), slurp(manifest()));
    EXPECT_EQ(slurp(again.path() / kPayloadFile), slurp(payload()));
}

TEST_F(CheckpointTest, ManifestFormatRoundTrip)
{
    const std::string text = slurp(manifest());
    EXPECT_EQ(format_manifest(parse_manifest(text)), text);
    EXPECT_EQ(line_of(text, "ptaseg-checkpoint 1"), 1u);
}

TEST_F(CheckpointTest, CorruptManifestNamesLine)
{
    std::string text = slurp(manifest());
    const std::size_t n = line_of(text, "config ");
    ASSERT_GT(n, 0u);
    text.replace(text.find("config LBH"), 10, "config LXH");
    spit(manifest(), text);
    expect_error(dir.path(), "manifest.txt:" + std::to_string(n) + ":");

    text = slurp(manifest());
    text.replace(text.find("config LXH"), 10, "konfig LBH");
    spit(manifest(), text);
    expect_error(dir.path(), "manifest.txt:" + std::to_string(n) + ": unknown key 'konfig'");
}

TEST_F(CheckpointTest, UnsupportedSchema)
{
    std::string text = slurp(manifest());
    text.replace(0, 19, "ptaseg-checkpoint 9");
    spit(manifest(), text);
    expect_error(dir.path(), "manifest.txt:1: unsupported schema version 9");
}

TEST_F(CheckpointTest, PayloadHashMismatch)
{
    std::string bin = slurp(payload());
    bin[bin.size() / 2] ^= 0x01;
    spit(payload(), bin);
    expect_error(dir.path(), "does not match manifest hash");
}

TEST_F(CheckpointTest, TruncatedPayload)
{
    std::string bin = slurp(payload());
    bin.resize(bin.size() - 4);
    spit(payload(), bin);
    // Rewrite the hash so only the length is wrong.
    Manifest m = read_manifest(dir.path());
    m.payload_hash = fnv1a(reinterpret_cast<const unsigned char*>(bin.data()), bin.size());
    spit(manifest(), format_manifest(m));
    expect_error(dir.path(), "truncated at tensor");
}

TEST_F(CheckpointTest, ShapeAndNameMismatch)
{
    const Manifest original = read_manifest(dir.path());
    Manifest m = original;
    m.spec.n_classes = 5;
    spit(manifest(), format_manifest(m));
    expect_error(dir.path(), "architecture expects");

    m = original;
    m.tensors[0].name = "stem.renamed";
    spit(manifest(), format_manifest(m));
    expect_error(dir.path(), "'stem.renamed'");

    m.tensors[0].name = original.tensors[0].name;
    m.tensors.pop_back();
    spit(manifest(), format_manifest(m));
    expect_error(dir.path(), "missing tensor");
}

TEST_F(CheckpointTest, SiteMetadataMismatch)
{
    Manifest m = read_manifest(dir.path());
    m.sites[1].channels = 97;
    spit(manifest(), format_manifest(m));
    expect_error(dir.path(), "site 1 metadata");
}

TEST(Checkpoint, MissingFiles)
{
    TempDir dir("none");
    expect_error(dir.path() / "nope", "not found");
    SegModel<float> m = build_model<float>(0, 3);
    save_checkpoint(m, dir.path());
    std::filesystem::remove(dir.path() / kPayloadFile);
    expect_error(dir.path(), "tensors.bin not found");
    spit(dir.path() / kManifestFile, "");
    expect_error(dir.path(), "empty manifest");
}

} // namespace
