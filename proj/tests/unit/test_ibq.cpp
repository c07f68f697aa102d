#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "gradcheck.hpp"
#include "keepfit/ibq.hpp"

using namespace keepfit;
using namespace keepfit::ibq;
using ag::Var;

namespace {

std::size_t brute_argmax(const Tensor& feats, std::size_t row, const Tensor& codebook) {
    std::size_t best = 0;
    double best_v = -INFINITY;
    for (std::size_t k = 0; k < codebook.dim(0); ++k) {
        double v = 0.0;
        for (std::size_t j = 0; j < codebook.dim(1); ++j) v += feats.at(row, j) * codebook.at(k, j);
        if (v > best_v) {
            best_v = v;
            best = k;
        }
    }
    return best;
}

std::vector<data::Image> synthetic_images(std::size_t n, std::size_t size) {
    data::SyntheticCorpusSpec spec;
    spec.n_elite = 0;
    spec.n_categorical = static_cast<int>(n);
    spec.image_size = size;
    std::vector<data::Image> out;
    for (const auto& r : data::generate_synthetic_corpus(spec).records) out.push_back(std::get<data::Image>(r.image));
    return out;
}

} // namespace

TEST_CASE("spatial projection: shape, zero input and linearity") {
    Rng rng(1);
    SpatialProjection proj(32, 16, rng);
    CHECK(proj.forward(Var::constant(testing::random_tensor({2, 4, 4, 32}, rng))).shape() == Shape{2, 16, 16});
    CHECK_THROWS_AS(proj.forward(Var::constant(Tensor({2, 4, 4, 8}))), ShapeError);

    proj.linear().bias().mutable_value().fill(0.0);
    const Tensor zero = proj.forward(Var::constant(Tensor({1, 2, 2, 32}))).value();
    for (double v : zero.storage()) CHECK(v == 0.0);

    const Tensor x = testing::random_tensor({1, 2, 2, 32}, rng);
    Tensor ax = x;
    for (auto& v : ax.storage()) v *= 2.5;
    const Tensor a = proj.forward(Var::constant(x)).value(), b = proj.forward(Var::constant(ax)).value();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(2.5 * a[i]).epsilon(1e-12));
}

TEST_CASE("quantize: a feature equal to code 5 selects code 5") {
    Tensor cb({8, 8});
    for (std::size_t k = 0; k < 8; ++k) cb.at(k, k) = 1.0;
    Tensor feat({1, 1, 8});
    feat[5] = 1.0;
    const QuantizedBatch q = quantize(Var::constant(feat), Var::constant(cb));
    CHECK(q.hard_indices == std::vector<std::size_t>{5});
    for (std::size_t j = 0; j < 8; ++j) CHECK(q.codes.value()[j] == cb.at(5, j));
}

TEST_CASE("quantize: codes equal the brute-force argmax row bit-exactly") {
    Rng rng(2);
    const Tensor cb = testing::random_tensor({16, 4}, rng);
    const Tensor x = testing::random_tensor({5, 7, 4}, rng, 2.0);
    const QuantizedBatch q = quantize(Var::constant(x), Var::constant(cb));
    const Tensor flat = x.reshaped({35, 4});
    for (std::size_t r = 0; r < 35; ++r) {
        const std::size_t k = brute_argmax(flat, r, cb);
        CHECK(q.hard_indices[r] == k);
        for (std::size_t j = 0; j < 4; ++j) CHECK(q.codes.value()[r * 4 + j] == cb.at(k, j));
    }
}

TEST_CASE("quantize: soft rows sum to one and hard rows are exact one-hots") {
    Rng rng(3);
    const QuantizedBatch q = quantize(Var::constant(testing::random_tensor({3, 4, 6}, rng)),
                                      Var::constant(testing::random_tensor({10, 6}, rng)));
    for (std::size_t r = 0; r < 12; ++r) {
        double s = 0.0, ones = 0.0, hot = 0.0;
        for (std::size_t k = 0; k < 10; ++k) {
            s += q.soft_distribution.at(r, k);
            const double v = q.index.value().at(r, k);
            CHECK((v == 0.0 || v == 1.0));
            ones += v;
            if (v == 1.0) hot = static_cast<double>(k);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(ones == 1.0);
        CHECK(hot == static_cast<double>(q.hard_indices[r]));
    }
}

TEST_CASE("quantize: dot-product semantics make the argmax scale sensitive") {
    // Code 0 is short and well aligned, code 1 long and less aligned.
    const Tensor cb({2, 2}, {1.0, 0.0, 3.0, 3.0});
    const QuantizedBatch small = quantize(Var::constant(Tensor({1, 1, 2}, {1.0, -0.9})), Var::constant(cb));
    const QuantizedBatch flipped = quantize(Var::constant(Tensor({1, 1, 2}, {1.0, -0.5})), Var::constant(cb));
    CHECK(small.hard_indices[0] == 0);
    CHECK(flipped.hard_indices[0] == 1);
}

TEST_CASE("quantize: ties break to the lowest index and dims are checked") {
    const Tensor cb({3, 2}, {0.0, 1.0, 1.0, 0.0, 1.0, 0.0});
    CHECK(quantize(Var::constant(Tensor({1, 1, 2}, {1.0, 0.0})), Var::constant(cb)).hard_indices[0] == 1);
    CHECK_THROWS_AS(quantize(Var::constant(Tensor({1, 1, 3})), Var::constant(cb)), ShapeError);
}

TEST_CASE("quantize: code gradient w.r.t. logits is the soft-weighted code gradient") {
    // D=4, K=8: compare d(probe . Q)/d(logits) through the straight-through
    // index with central differences of probe . softmax(logits) C.
    Rng rng(4);
    const Tensor cb = testing::random_tensor({8, 4}, rng);
    const Tensor probe = testing::random_tensor({3, 4}, rng);
    Var logits = Var::parameter(testing::random_tensor({3, 8}, rng));
    Var q = ag::matmul(ag::straight_through_onehot(logits), Var::constant(cb));
    ag::backward(ag::sum(ag::mul(q, Var::constant(probe))));
    nn::ParameterList params{{"logits", Var::parameter(logits.value())}};
    const auto reports = testing::gradcheck(params, [&] {
        return ag::sum(ag::mul(ag::matmul(ag::softmax_rows(params[0].var), Var::constant(cb)), Var::constant(probe)));
    });
    CHECK(reports[0].rel_error < 1e-6);
    double diff = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < logits.grad().size(); ++i) {
        diff += std::pow(logits.grad()[i] - params[0].var.grad()[i], 2);
        norm += std::pow(params[0].var.grad()[i], 2);
    }
    CHECK(std::sqrt(diff / norm) < 1e-12);
}

TEST_CASE("quantize: gradient reaches the features but not a constant codebook") {
    Rng rng(5);
    Var x = Var::parameter(testing::random_tensor({2, 3, 4}, rng));
    Var cb = Var::constant(testing::random_tensor({8, 4}, rng));
    const QuantizedBatch q = quantize(x, cb);
    ag::backward(ag::sum(ag::square(pool_quantized(q))));
    double norm = 0.0;
    for (double g : x.grad().storage()) norm += g * g;
    CHECK(norm > 0.0);
    CHECK(cb.grad().empty());
}

TEST_CASE("pool: one position is the identity, equal codes pool to themselves, two codes average") {
    const Tensor cb({3, 2}, {1.0, 0.0, 0.0, 1.0, -1.0, -1.0});
    const auto one = quantize(Var::constant(Tensor({1, 1, 2}, {0.0, 2.0})), Var::constant(cb));
    CHECK(pool_quantized(one).value()[0] == 0.0);
    CHECK(pool_quantized(one).value()[1] == 1.0);
    const auto same = quantize(Var::constant(Tensor({1, 3, 2}, {2, 0, 3, 0, 4, 1})), Var::constant(cb));
    CHECK(pool_quantized(same).value()[0] == 1.0);
    CHECK(pool_quantized(same).value()[1] == 0.0);
    const auto two = quantize(Var::constant(Tensor({1, 2, 2}, {2, 0, 0, 2})), Var::constant(cb));
    CHECK(pool_quantized(two).value()[0] == 0.5);
    CHECK(pool_quantized(two).value()[1] == 0.5);
}

TEST_CASE("code usage statistics") {
    const CodeUsage u = code_usage({0, 1, 1, 3}, 4);
    CHECK(u.utilization == 0.75);
    const double h = -(0.25 * std::log(0.25) * 2 + 0.5 * std::log(0.5));
    CHECK(u.perplexity == doctest::Approx(std::exp(h)));
    CHECK(code_usage({2, 2, 2}, 8).perplexity == doctest::Approx(1.0));
}

TEST_CASE("codebook files round-trip and keep the checksum") {
    Rng rng(6);
    Codebook cb{testing::random_tensor({8, 4}, rng), "abc"};
    const auto path = std::filesystem::temp_directory_path() / "keepfit-test-codebook.kfc";
    save_codebook(path, cb, {{"utilization", 0.5}});
    const Codebook back = load_codebook(path);
    CHECK(back.checksum() == cb.checksum());
    CHECK(back.fingerprint == "abc");
    CHECK_THROWS_AS(codebook_from(Checkpoint{"text-encoder", {}, {}}), Error);
}

TEST_CASE("codebook pretraining: reconstruction falls by 60 percent on 64 images") {
    AutoencoderConfig c;
    c.codebook_size = 256;
    c.code_dim = 16;
    c.input_size = 16;
    c.hidden_channels = 8;
    c.steps = 500;
    c.batch_size = 8;
    const CodebookReport r = pretrain_codebook(synthetic_images(64, 16), c);
    REQUIRE(r.reconstruction_losses.size() == 500);
    CHECK(r.reconstruction_losses.back() <= 0.4 * r.reconstruction_losses.front());
    CHECK(r.utilization > 0.0);
    CHECK(r.utilization <= 1.0);
    CHECK(r.perplexity >= 1.0);
    const Tensor& e = r.codebook.embeddings;
    for (std::size_t a = 0; a < e.dim(0); ++a)
        for (std::size_t b = a + 1; b < e.dim(0); ++b) {
            double d = 0.0;
            for (std::size_t j = 0; j < e.dim(1); ++j) d += std::pow(e.at(a, j) - e.at(b, j), 2);
            CHECK(d > 0.0);
        }
}

TEST_CASE("codebook pretraining is deterministic for a fixed seed") {
    AutoencoderConfig c;
    c.codebook_size = 16;
    c.code_dim = 4;
    c.input_size = 8;
    c.hidden_channels = 4;
    c.steps = 10;
    c.batch_size = 4;
    const auto images = synthetic_images(8, 8);
    const CodebookReport a = pretrain_codebook(images, c), b = pretrain_codebook(images, c);
    CHECK(serialize_checkpoint(to_checkpoint(a.codebook)) == serialize_checkpoint(to_checkpoint(b.codebook)));
    c.seed = 1;
    CHECK(pretrain_codebook(images, c).codebook.checksum() != a.codebook.checksum());
    CHECK_THROWS_AS(pretrain_codebook({}, c), Error);
}
