#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "patchlens/checkpoint.hpp"
#include "patchlens/errors.hpp"
#include "patchlens/trace.hpp"
#include "support/oracle.hpp"

using namespace patchlens;
namespace fs = std::filesystem;

namespace {

const fs::path kData = fs::path(PATCHLENS_SOURCE_DIR) / "tests" / "data";

nlohmann::json reference(const std::string& name) {
    std::ifstream in(kData / name / "reference.json");
    return nlohmann::json::parse(in);
}

double max_diff(std::span<const float> a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("patchlens_ckpt_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Runs every reference case through the engine and compares against transformers.
void check_against_reference(const std::string& name) {
    auto weights = load_checkpoint(kData / name);
    ModelHandle model(weights);
    for (const auto& c : reference(name)["cases"]) {
        CAPTURE(c["name"].get<std::string>());
        auto tokens = c["tokens"].get<std::vector<int>>();
        const int n = static_cast<int>(tokens.size());
        std::optional<Matrix> visual;
        PositionMap pm = PositionMap::text_only(n);
        if (c.contains("visual_block")) {
            const auto rows = c["visual_block"].get<std::vector<std::vector<float>>>();
            Matrix block(static_cast<int>(rows.size()), weights->config.d_model);
            for (std::size_t r = 0; r < rows.size(); ++r)
                for (std::size_t k = 0; k < rows[r].size(); ++k) block(static_cast<int>(r), static_cast<int>(k)) = rows[r][k];
            const int begin = c["visual_begin"].get<int>();
            REQUIRE(begin == 1);
            pm = PositionMap::with_visual(n, {begin, begin + static_cast<int>(block.rows())}, weights->config.vision.rows,
                                          weights->config.vision.cols);
            visual = block;
        }
        auto trace = run_traced(model, {tokens, visual}, pm);

        const auto ref_logits = c["logits"].get<std::vector<double>>();
        REQUIRE(ref_logits.size() == static_cast<std::size_t>(trace->logits().size()));
        CHECK(max_diff({trace->logits().data(), ref_logits.size()}, ref_logits) <= 1e-4);

        const auto inputs = c["layer_inputs_last"].get<std::vector<std::vector<double>>>();
        for (int l = 0; l < trace->n_layers(); ++l)
            CHECK(max_diff(trace->layer_input(l, n - 1), inputs[static_cast<std::size_t>(l)]) <= 1e-4);

        // Decomposition holds on an imported checkpoint too.
        for (int l = 0; l < trace->n_layers(); ++l) {
            VectorD sum = VectorD::Zero(trace->d_model());
            for (int j = 0; j < trace->n_heads(); ++j) sum += head_output(*trace, {l, j});
            double m = 0.0;
            for (int k = 0; k < trace->d_model(); ++k) m = std::max(m, std::abs(trace->attn_out(l)[static_cast<std::size_t>(k)] - sum[k]));
            CHECK(m <= 1e-4);
        }
        if (!visual) {
            const auto ref = oracle::forward_logits(*weights, tokens);
            CHECK(max_diff({trace->logits().data(), ref.size()}, ref) <= 1e-4);
        }
    }
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("llama checkpoint reproduces transformers logits and layer inputs") {
    check_against_reference("tiny-llama");
}

TEST_CASE("qwen2 checkpoint with q/k/v bias reproduces transformers") {
    auto w = load_checkpoint(kData / "tiny-qwen2");
    CHECK(w->config.qkv_bias);
    CHECK(w->config.n_kv_heads == 2);
    check_against_reference("tiny-qwen2");
}

TEST_CASE("config mapping") {
    nlohmann::json j = {{"model_type", "llama"}, {"hidden_size", 64}, {"num_hidden_layers", 3},
                        {"num_attention_heads", 8}, {"num_key_value_heads", 2}, {"intermediate_size", 100},
                        {"vocab_size", 50}, {"rms_norm_eps", 1e-5}, {"rope_theta", 5e5}};
    auto c = config_from_hf(j, "m");
    CHECK(c.n_layers == 3);
    CHECK(c.head_dim() == 8);
    CHECK(c.group_size() == 4);
    CHECK(c.rope_theta == doctest::Approx(5e5));
    CHECK_FALSE(c.vision.enabled());

    SUBCASE("llava wrapper reads text_config and derives the patch grid") {
        nlohmann::json w = {{"model_type", "llava"}, {"text_config", j},
                            {"vision_config", {{"image_size", 336}, {"patch_size", 14}}}};
        auto v = config_from_hf(w, "m");
        CHECK(v.vision.rows == 24);
        CHECK(v.vision.cells() == 576);
        CHECK(v.n_layers == 3);
    }
    SUBCASE("unsupported settings are capability errors") {
        auto bad = j;
        bad["model_type"] = "gpt2";
        CHECK_THROWS_AS(config_from_hf(bad, "m"), CapabilityError);
        bad = j;
        bad["rope_scaling"] = {{"type", "linear"}};
        CHECK_THROWS_AS(config_from_hf(bad, "m"), CapabilityError);
        bad = j;
        bad["head_dim"] = 16;
        CHECK_THROWS_AS(config_from_hf(bad, "m"), CapabilityError);
    }
    SUBCASE("missing fields are input errors") {
        auto bad = j;
        bad.erase("hidden_size");
        CHECK_THROWS_AS(config_from_hf(bad, "m"), InputError);
    }
}

TEST_CASE("save and reload reproduce the weights exactly") {
    auto w = load_checkpoint(kData / "tiny-qwen2");
    const auto dir = scratch("roundtrip");
    save_checkpoint(*w, dir);
    auto back = load_checkpoint(dir);
    CHECK(back->config.qkv_bias);
    CHECK(back->embed == w->embed);
    CHECK(back->unembed == w->unembed);
    for (std::size_t l = 0; l < w->layers.size(); ++l) {
        CHECK(back->layers[l].wq == w->layers[l].wq);
        CHECK(back->layers[l].bv == w->layers[l].bv);
        CHECK(back->layers[l].w_down == w->layers[l].w_down);
    }
    fs::remove_all(dir);
}

TEST_CASE("safetensors reader") {
    const auto dir = scratch("st");
    write_safetensors(dir / "a.safetensors", {{"x", {{2, 3}, {1, 2, 3, 4, 5, 6}}}, {"y", {{1}, {7}}}});
    SafetensorsFile f(dir / "a.safetensors");
    CHECK(f.names() == std::vector<std::string>{"x", "y"});
    CHECK(f.shape("x") == std::vector<std::int64_t>{2, 3});
    CHECK(f.read("x")[5] == 6.0f);
    CHECK(f.read("y")[0] == 7.0f);
    CHECK_THROWS_AS(f.read("z"), InputError);

    SUBCASE("half-precision tensors are widened") {
        // 1.5 as F16 is 0x3E00, as BF16 0x3FC0.
        nlohmann::json h = {{"h", {{"dtype", "F16"}, {"shape", {1}}, {"data_offsets", {0, 2}}}},
                            {"b", {{"dtype", "BF16"}, {"shape", {1}}, {"data_offsets", {2, 4}}}}};
        std::string hs = h.dump();
        std::ofstream out(dir / "h.safetensors", std::ios::binary);
        const std::uint64_t len = hs.size();
        out.write(reinterpret_cast<const char*>(&len), 8);
        out << hs;
        const std::uint16_t vals[2] = {0x3E00, 0x3FC0};
        out.write(reinterpret_cast<const char*>(vals), 4);
        out.close();
        SafetensorsFile g(dir / "h.safetensors");
        CHECK(g.read("h")[0] == 1.5f);
        CHECK(g.read("b")[0] == 1.5f);
    }
    SUBCASE("corrupt files are rejected") {
        std::ofstream(dir / "bad.safetensors", std::ios::binary) << "\xff\xff\xff\xff\xff\xff\xff\x0f";
        CHECK_THROWS_AS(SafetensorsFile(dir / "bad.safetensors"), InputError);
        CHECK_THROWS_AS(SafetensorsFile(dir / "missing.safetensors"), InputError);
    }
    fs::remove_all(dir);
}

TEST_CASE("checkpoint bundle wires the tokenizer and a vision front end") {
    auto b = load_checkpoint_bundle(kData / "tiny-llama");
    CHECK(b.id == "tiny-llama");
    REQUIRE(b.encoder);
    CHECK(b.encoder->id() == "stub");
    CHECK(b.tokenizer->encode(" dog").size() == 1);
    auto q = load_checkpoint_bundle(kData / "tiny-qwen2");
    CHECK_FALSE(q.encoder);
    CHECK_THROWS_AS(load_checkpoint_bundle(kData / "missing"), InputError);
}

}
