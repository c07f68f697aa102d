#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "gradcheck.hpp"
#include "keepfit/checkpoint.hpp"
#include "keepfit/encoders.hpp"
#include "keepfit/mlm.hpp"
#include "keepfit/tokenizer.hpp"

using namespace keepfit;
using namespace keepfit::encoders;
using ag::Var;

namespace {

ImageEncoderConfig tiny_image_config() {
    ImageEncoderConfig c;
    c.input_size = 16;
    c.channels = {4, 8};
    c.strides = {2, 2};
    return c;
}

TextEncoderConfig tiny_text_config(std::size_t vocab) {
    TextEncoderConfig c;
    c.vocab_size = vocab;
    c.max_tokens = 16;
    c.hidden_dim = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.ffn_dim = 12;
    return c;
}

void check_rows_equal(const Tensor& a, std::size_t ra, const Tensor& b, std::size_t rb, double tol) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
        if (tol == 0.0) {
            CHECK(a.at(ra, j) == b.at(rb, j));
        } else {
            CHECK(a.at(ra, j) == doctest::Approx(b.at(rb, j)).epsilon(tol));
        }
    }
}

} // namespace

TEST_CASE("tokenizer: empty text is the class token alone") {
    const Vocabulary v = Vocabulary::build({"optic disc cupping"});
    CHECK(v.tokenize("") == std::vector<std::size_t>{Vocabulary::kCls});
}

TEST_CASE("tokenizer: in-vocabulary text round-trips") {
    const std::string text = "The optic disc shows cupping, with drusen near the macula.";
    const Vocabulary v = Vocabulary::build({text});
    CHECK(v.detokenize(v.tokenize(text)) == text);
    CHECK(v.tokenize(text) == v.tokenize(text));
}

TEST_CASE("tokenizer: unseen words map to UNK") {
    const Vocabulary v = Vocabulary::build({"optic disc"});
    const auto ids = v.tokenize("optic nerve");
    REQUIRE(ids.size() == 3);
    CHECK(ids[1] == v.id("optic"));
    CHECK(ids[2] == Vocabulary::kUnk);
    CHECK(v.detokenize(ids) == "optic [UNK]");
}

TEST_CASE("tokenizer: vocabulary file round-trips and truncation keeps the prefix") {
    const Vocabulary v = Vocabulary::build({"a b c d", "e f."});
    const auto path = std::filesystem::temp_directory_path() / "keepfit-test-vocab.txt";
    v.save(path);
    CHECK(Vocabulary::load(path) == v);
    const auto ids = v.tokenize("a b c d e f");
    CHECK(truncate_tokens(ids, 3) == std::vector<std::size_t>(ids.begin(), ids.begin() + 3));
    CHECK(truncate_tokens(ids, 100) == ids);
}

TEST_CASE("image encoder: flat and spatial shapes") {
    Rng rng(1);
    ImageEncoderConfig c = tiny_image_config();
    VisionTower tower(c, 8, rng);
    const EncodedBatch out = tower.encode(testing::random_tensor({4, 16, 16, 3}, rng));
    CHECK(out.flat.shape() == Shape{4, 8});
    CHECK(out.spatial.shape() == Shape{4, 4, 4, 8});
    CHECK_THROWS_AS(tower.encode(Tensor({1, 8, 8, 3})), ShapeError);
}

TEST_CASE("image encoder: default configuration produces the shared dimension") {
    Rng rng(2);
    ImageEncoderConfig c;
    VisionTower tower(c, 64, rng);
    const EncodedBatch out = tower.encode(testing::random_tensor({4, 32, 32, 3}, rng));
    CHECK(out.flat.shape() == Shape{4, 64});
    CHECK(out.spatial.shape() == Shape{4, c.grid(), c.grid(), c.feature_channels()});
}

TEST_CASE("image encoder: config requires divisibility") {
    ImageEncoderConfig c = tiny_image_config();
    c.input_size = 18;
    CHECK_THROWS_AS(c.validate(), UsageError);
}

TEST_CASE("image encoder: all-zero image gives finite outputs") {
    for (auto backbone : {Backbone::small_conv, Backbone::resnet_like}) {
        Rng rng(3);
        ImageEncoderConfig c = tiny_image_config();
        c.backbone = backbone;
        VisionTower tower(c, 8, rng);
        const EncodedBatch out = tower.encode(Tensor({1, 16, 16, 3}));
        for (double v : out.flat.value().storage()) CHECK(std::isfinite(v));
        for (double v : out.spatial.value().storage()) CHECK(std::isfinite(v));
    }
}

TEST_CASE("image encoder: batch permutation permutes outputs") {
    Rng rng(4);
    VisionTower tower(tiny_image_config(), 8, rng);
    const Tensor x = testing::random_tensor({3, 16, 16, 3}, rng);
    const std::size_t per = 16 * 16 * 3;
    Tensor perm({3, 16, 16, 3});
    const std::vector<std::size_t> order{2, 0, 1};
    for (std::size_t b = 0; b < 3; ++b)
        std::copy(x.storage().begin() + order[b] * per, x.storage().begin() + (order[b] + 1) * per,
                  perm.storage().begin() + b * per);
    const Tensor a = tower.encode(x).flat.value(), p = tower.encode(perm).flat.value();
    for (std::size_t b = 0; b < 3; ++b) check_rows_equal(p, b, a, order[b], 1e-12);
}

TEST_CASE("text encoder: shapes, determinism and shared dimension") {
    const Vocabulary v = Vocabulary::build({"optic disc cupping with drusen"});
    Rng rng(5);
    TextTower text(tiny_text_config(v.size()), 6, rng);
    VisionTower vision(tiny_image_config(), 6, rng);
    const auto ids = v.tokenize("optic disc cupping");
    const Tensor out = text.encode({ids, ids}).value();
    CHECK(out.shape() == Shape{2, 6});
    check_rows_equal(out, 0, out, 1, 0.0);
    CHECK(vision.encode(Tensor({1, 16, 16, 3})).flat.shape()[1] == out.shape()[1]);
}

TEST_CASE("text encoder: long captions are truncated to max_tokens") {
    std::string caption;
    for (int i = 0; i < 299; ++i) caption += (i % 2 ? "disc " : "cup ");
    const Vocabulary v = Vocabulary::build({caption});
    TextEncoderConfig c = tiny_text_config(v.size());
    c.max_tokens = 256;
    Rng rng(6);
    TextTower text(c, 8, rng);
    const auto ids = v.tokenize(caption);
    REQUIRE(ids.size() == 300);
    const Tensor full = text.encode({ids}).value();
    const Tensor cut = text.encode({truncate_tokens(ids, 256)}).value();
    check_rows_equal(full, 0, cut, 0, 0.0);
    CHECK_THROWS_AS(text.encoder().hidden_states(ids), ShapeError);
}

TEST_CASE("text encoder: token ids outside the vocabulary are rejected") {
    Rng rng(7);
    TextTower text(tiny_text_config(10), 8, rng);
    CHECK_THROWS_AS(text.encode({{Vocabulary::kCls, 10}}), Error);
}

TEST_CASE("masking policy validation") {
    mlm::MaskingPolicy p;
    CHECK_NOTHROW(p.validate());
    p.mask_fraction = 0.0;
    CHECK_THROWS_AS(p.validate(), UsageError);
    p.mask_fraction = 1.0;
    CHECK_THROWS_AS(p.validate(), UsageError);
    p = {};
    p.mask_token = 0.95;
    CHECK_THROWS_AS(p.validate(), UsageError);
}

TEST_CASE("masking selects about 15 of 100 tokens and never the class token") {
    Rng rng(8);
    std::vector<std::size_t> ids{Vocabulary::kCls};
    for (int i = 0; i < 100; ++i) ids.push_back(4 + i % 20);
    const int trials = 2000;
    double selected = 0.0;
    for (int t = 0; t < trials; ++t) {
        const auto m = mlm::apply_mask(ids, 24, {}, rng);
        selected += static_cast<double>(m.positions.size());
        for (auto p : m.positions) CHECK(p != 0);
        for (std::size_t k = 0; k < m.positions.size(); ++k) CHECK(m.targets[k] == ids[m.positions[k]]);
    }
    // Binomial(100, 0.15) mean over 2000 trials: sigma of the mean is about 0.08.
    CHECK(std::abs(selected / trials - 15.0) < 0.5);
}

TEST_CASE("no masked position means no loss contribution") {
    Rng rng(9);
    TextEncoder enc(tiny_text_config(10), rng);
    mlm::MlmHead head(8, 10, rng);
    mlm::MaskedSequence unmasked{{Vocabulary::kCls, 5, 6}, {}, {}};
    CHECK_FALSE(mlm::masked_lm_loss(enc, head, {unmasked}).has_value());
    mlm::MaskedSequence masked{{Vocabulary::kCls, Vocabulary::kMask, 6}, {1}, {5}};
    const auto both = mlm::masked_lm_loss(enc, head, {unmasked, masked});
    const auto one = mlm::masked_lm_loss(enc, head, {masked});
    REQUIRE(both.has_value());
    CHECK(both->item() == one->item());
}

TEST_CASE("masked-LM gradient matches finite differences on a 2-layer encoder") {
    Rng rng(10);
    TextEncoder enc(tiny_text_config(10), rng);
    mlm::MlmHead head(8, 10, rng);
    const std::vector<mlm::MaskedSequence> batch{{{Vocabulary::kCls, Vocabulary::kMask, 6, 7}, {1, 3}, {5, 8}},
                                                 {{Vocabulary::kCls, 4, Vocabulary::kMask}, {2}, {9}}};
    nn::ParameterList params;
    nn::append(params, enc.parameters(), "encoder");
    nn::append(params, head.parameters(), "head");
    const auto reports = testing::gradcheck(params, [&] { return *mlm::masked_lm_loss(enc, head, batch); });
    for (const auto& r : reports) {
        INFO(r.name);
        CHECK(r.rel_error < 1e-4);
    }
}

TEST_CASE("masked-LM pretraining on one sentence halves the loss") {
    const std::vector<std::string> corpus{"the optic disc shows glaucomatous cupping with a thin rim"};
    const Vocabulary v = Vocabulary::build(corpus);
    TextEncoderConfig c = tiny_text_config(v.size());
    c.hidden_dim = 16;
    c.ffn_dim = 32;
    mlm::MlmConfig m;
    m.steps = 200;
    m.batch_size = 8;
    m.lr = 3e-3;
    const auto result = mlm::mlm_pretrain(corpus, v, c, m);
    REQUIRE(result.losses.size() > 20);
    double tail = 0.0;
    for (std::size_t i = result.losses.size() - 10; i < result.losses.size(); ++i) tail += result.losses[i] / 10.0;
    CHECK(tail <= 0.5 * result.losses.front());
}

TEST_CASE("masked-LM resume matches an uninterrupted run") {
    const std::vector<std::string> corpus{"drusen near the macula", "cupping of the optic disc"};
    const Vocabulary v = Vocabulary::build(corpus);
    const TextEncoderConfig c = tiny_text_config(v.size());
    mlm::MlmConfig m;
    m.batch_size = 4;
    m.steps = 10;
    const auto full = mlm::mlm_pretrain(corpus, v, c, [&] {
        auto x = m;
        x.steps = 20;
        return x;
    }());
    const auto first = mlm::mlm_pretrain(corpus, v, c, m);
    const auto resumed = mlm::mlm_pretrain(corpus, v, c, m, &first.checkpoint);
    CHECK(resumed.step == 20);
    CHECK(serialize_checkpoint(resumed.checkpoint) == serialize_checkpoint(full.checkpoint));
    CHECK(mlm::vocabulary_from(resumed.checkpoint) == v);
}

TEST_CASE("masked-LM rejects an empty corpus") {
    const Vocabulary v = Vocabulary::build({"a b"});
    CHECK_THROWS_AS(mlm::mlm_pretrain({}, v, tiny_text_config(v.size()), {}), Error);
}
