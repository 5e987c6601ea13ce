#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "cozinb/error.hpp"
#include "cozinb/serialize.hpp"

using namespace cozinb;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::path(testing::TempDir()) / name;
    fs::remove_all(p);
    return p;
}

void expect_same_mlp(const MlpWeights& a, const MlpWeights& b) {
    ASSERT_EQ(a.weight.size(), b.weight.size());
    for (std::size_t l = 0; l < a.weight.size(); ++l) {
        EXPECT_EQ(a.weight[l], b.weight[l]);
        EXPECT_EQ(a.bias[l], b.bias[l]);
    }
}

}  // namespace

TEST(Serialize, DoublesRoundTrip) {
    const fs::path dir = scratch("cozinb_ser_doubles");
    fs::create_directories(dir);
    const std::vector<double> v = {0.0, -1.5, 1e-300, 3.141592653589793, 1e300};
    write_doubles(dir / "v.bin", v.data(), v.size());
    EXPECT_EQ(fs::file_size(dir / "v.bin"), v.size() * sizeof(double));
    EXPECT_EQ(read_doubles(dir / "v.bin", v.size()), v);
    EXPECT_THROW(read_doubles(dir / "v.bin", v.size() + 1), DataError);
    EXPECT_THROW(read_doubles(dir / "missing.bin", 1), DataError);
    fs::remove_all(dir);
}

TEST(Serialize, BlockShapeChecked) {
    const fs::path dir = scratch("cozinb_ser_block");
    fs::create_directories(dir);
    const std::vector<double> v = {1, 2, 3, 4, 5, 6};
    const nlohmann::json entry = write_block(dir, "x", v.data(), 2, 3);
    EXPECT_EQ(read_block(dir, entry, 2, 3), v);
    EXPECT_THROW(read_block(dir, entry, 3, 2), DataError);
    fs::remove_all(dir);
}

TEST(Serialize, HyperParamsAndScheduleJson) {
    HyperParams hp;
    hp.K = 17;
    hp.encoder_hidden = {3, 2};
    hp.activation = Activation::Relu;
    const HyperParams h2 = hyperparams_from_json(to_json(hp));
    EXPECT_EQ(h2.K, 17);
    EXPECT_EQ(h2.encoder_hidden, hp.encoder_hidden);
    EXPECT_EQ(h2.activation, Activation::Relu);
    Schedule s;
    s.batch_size = 9;
    s.kappa = 0.9;
    const Schedule s2 = schedule_from_json(to_json(s));
    EXPECT_EQ(s2.batch_size, 9);
    EXPECT_DOUBLE_EQ(s2.kappa, 0.9);
}

TEST(Serialize, CheckpointRoundTrip) {
    Checkpoint c;
    c.hp.K = 5;
    c.hp.d_h = 3;
    c.hp.d_l = 3;
    c.hp.encoder_hidden = {6, 4};
    c.hp.decoder_hidden = {5};
    c.schedule.max_epochs = 7;
    c.global = init_global(c.hp, 11, 42);
    c.global.iteration = 33;
    c.global.gamma0 = 2.5;
    c.global.adam_encoder.step = 4;
    c.epoch = 6;
    Rng rng(9);
    rng.uniform();
    c.rng_state = rng.state();
    c.extra_json = R"({"note": "x"})";
    const fs::path dir = scratch("cozinb_ser_ckpt");
    save_checkpoint(c, dir);
    EXPECT_TRUE(fs::exists(dir / "manifest.json"));
    const Checkpoint b = load_checkpoint(dir);
    EXPECT_EQ(b.hp.K, 5);
    EXPECT_EQ(b.hp.encoder_hidden, c.hp.encoder_hidden);
    EXPECT_EQ(b.schedule.max_epochs, 7);
    EXPECT_EQ(b.epoch, 6);
    EXPECT_EQ(b.rng_state, c.rng_state);
    EXPECT_EQ(nlohmann::json::parse(b.extra_json), nlohmann::json::parse(c.extra_json));
    const GlobalState& g = c.global;
    const GlobalState& h = b.global;
    EXPECT_EQ(h.K, g.K);
    EXPECT_EQ(h.M, g.M);
    EXPECT_TRUE((h.eta == g.eta).all());
    EXPECT_TRUE((h.tau1 == g.tau1).all());
    EXPECT_TRUE((h.tau2 == g.tau2).all());
    EXPECT_TRUE((h.r_shape == g.r_shape).all());
    EXPECT_TRUE((h.r_scale == g.r_scale).all());
    EXPECT_TRUE((h.anchor_logit == g.anchor_logit).all());
    EXPECT_EQ(h.gamma0, g.gamma0);
    EXPECT_EQ(h.l, g.l);
    EXPECT_EQ(h.iteration, 33u);
    EXPECT_EQ(h.adam_encoder.step, 4u);
    expect_same_mlp(h.encoder, g.encoder);
    expect_same_mlp(h.decoder, g.decoder);
    // Saving the loaded state reproduces the same bytes.
    const fs::path again = scratch("cozinb_ser_ckpt2");
    save_checkpoint(b, again);
    for (const auto& e : fs::directory_iterator(dir)) {
        std::ifstream x(e.path(), std::ios::binary), y(again / e.path().filename(), std::ios::binary);
        const std::string sx((std::istreambuf_iterator<char>(x)), {}), sy((std::istreambuf_iterator<char>(y)), {});
        EXPECT_EQ(sx, sy) << e.path().filename();
    }
    fs::remove_all(dir);
    fs::remove_all(again);
}

TEST(Serialize, MissingManifest) {
    const fs::path dir = scratch("cozinb_ser_empty");
    fs::create_directories(dir);
    try {
        load_checkpoint(dir);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("manifest"), std::string::npos);
    }
    fs::remove_all(dir);
}

TEST(Serialize, TruncatedBlockRejected) {
    Checkpoint c;
    c.hp.K = 3;
    c.hp.d_h = 2;
    c.hp.d_l = 2;
    c.hp.encoder_hidden = {4};
    c.hp.decoder_hidden = {4};
    c.global = init_global(c.hp, 6, 1);
    const fs::path dir = scratch("cozinb_ser_trunc");
    save_checkpoint(c, dir);
    fs::resize_file(dir / "eta.bin", 8);
    EXPECT_THROW(load_checkpoint(dir), DataError);
    fs::remove_all(dir);
}
