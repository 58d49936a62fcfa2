#include <gtest/gtest.h>

#include <cstdio>
#include <cstring>
#include <fstream>

#include "protoneck/checkpoint.hpp"
#include "protoneck/model.hpp"

using namespace protoneck;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.image_size = 32;
    cfg.backbone_channels = 8;
    cfg.channels = 8;
    cfg.prototypes = 4;
    cfg.queries = 3;
    cfg.heads = 2;
    cfg.ffn_dim = 16;
    return cfg;
}

std::string temp_path(const char* name) {
    return std::string(::testing::TempDir()) + name;
}

}  // namespace

TEST(Checkpoint, RoundTripRestoresForwardExactly) {
    ModelConfig cfg = small_config();
    Model a = model_init(cfg, 100);
    Model b = model_init(cfg, 200);
    DataSpec ds;
    ds.image_size = 32;
    ds.num_classes = 3;
    SceneSample s = generate(51, 0, ds);

    Tape t1;
    ForwardOut fa = model_forward(a, s, NeckNormMode::Softmax);
    std::string path = temp_path("roundtrip.ckpt");
    std::vector<NamedParam> pa = a.params();
    save_checkpoint(path, pa, {{"note", "roundtrip"}});

    std::vector<NamedParam> pb = b.params();
    load_checkpoint(path, pb);
    ForwardOut fb = model_forward(b, s, NeckNormMode::Softmax);
    ASSERT_EQ(fa.class_logits.numel(), fb.class_logits.numel());
    EXPECT_EQ(std::memcmp(fa.class_logits.data().data(), fb.class_logits.data().data(),
                          static_cast<size_t>(fa.class_logits.numel()) * sizeof(double)),
              0);
    EXPECT_EQ(std::memcmp(fa.boxes.data().data(), fb.boxes.data().data(),
                          static_cast<size_t>(fa.boxes.numel()) * sizeof(double)),
              0);
    std::remove(path.c_str());
}

TEST(Checkpoint, MetaSurvivesTheTrip) {
    Model m = model_init(small_config(), 101);
    std::string path = temp_path("meta.ckpt");
    std::vector<NamedParam> params = m.params();
    save_checkpoint(path, params, {{"mode", "softmax"}, {"config_hash", "abc123"}});
    auto meta = read_checkpoint_meta(path);
    EXPECT_EQ(meta.at("mode"), "softmax");
    EXPECT_EQ(meta.at("config_hash"), "abc123");
    std::remove(path.c_str());
}

TEST(Checkpoint, ShapeMismatchNamesTheParameter) {
    ModelConfig cfg = small_config();
    Model a = model_init(cfg, 102);
    std::string path = temp_path("shape.ckpt");
    std::vector<NamedParam> pa = a.params();
    save_checkpoint(path, pa);

    cfg.prototypes = 8;  // different neck width
    Model b = model_init(cfg, 103);
    std::vector<NamedParam> pb = b.params();
    try {
        load_checkpoint(path, pb);
        FAIL() << "expected checkpoint_error";
    } catch (const checkpoint_error& e) {
        EXPECT_NE(std::string(e.what()).find("neck."), std::string::npos);
    }
    std::remove(path.c_str());
}

TEST(Checkpoint, CountMismatchIsRejected) {
    Model a = model_init(small_config(), 104);
    std::vector<NamedParam> pa = a.params();
    std::vector<NamedParam> subset(pa.begin(), pa.begin() + 5);
    std::string path = temp_path("subset.ckpt");
    save_checkpoint(path, subset);
    EXPECT_THROW(load_checkpoint(path, pa), checkpoint_error);
    std::remove(path.c_str());
}

TEST(Checkpoint, RejectsMissingGarbageAndTruncated) {
    Model m = model_init(small_config(), 105);
    std::vector<NamedParam> params = m.params();
    EXPECT_THROW(load_checkpoint(temp_path("missing.ckpt"), params), checkpoint_error);

    std::string garbage = temp_path("garbage.ckpt");
    {
        std::ofstream f(garbage, std::ios::binary);
        f << "not a checkpoint at all\n123456";
    }
    EXPECT_THROW(load_checkpoint(garbage, params), checkpoint_error);

    std::string path = temp_path("trunc.ckpt");
    save_checkpoint(path, params);
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    {
        std::ofstream f(path, std::ios::binary);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 64));
    }
    EXPECT_THROW(load_checkpoint(path, params), checkpoint_error);
    std::remove(path.c_str());
    std::remove(garbage.c_str());
}
