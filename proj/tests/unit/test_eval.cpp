#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>

#include "gradcheck.hpp"
#include "keepfit/eval.hpp"

using namespace keepfit;
using namespace keepfit::eval;

namespace {

Tensor normalized_rows(Tensor t) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < t.cols(); ++c) s += t.at(r, c) * t.at(r, c);
        for (std::size_t c = 0; c < t.cols(); ++c) t.at(r, c) /= std::sqrt(s);
    }
    return t;
}

Tensor binary_probs(const std::vector<double>& p1) {
    Tensor p({p1.size(), 2});
    for (std::size_t i = 0; i < p1.size(); ++i) {
        p.at(i, 0) = 1.0 - p1[i];
        p.at(i, 1) = p1[i];
    }
    return p;
}

// Features clustered around `c` orthogonal directions in d dims.
void clustered(std::size_t per_class, std::size_t c, std::size_t d, double noise, Rng& rng, Tensor& feats,
               std::vector<int>& labels) {
    feats = Tensor({per_class * c, d});
    labels.clear();
    for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t i = 0; i < per_class; ++i) {
            const std::size_t r = k * per_class + i;
            for (std::size_t j = 0; j < d; ++j) feats.at(r, j) = noise * rng.normal();
            feats.at(r, k) += 1.0;
            labels.push_back(static_cast<int>(k));
        }
    }
    feats = normalized_rows(feats);
}

trainer::LoadedModel tiny_loaded(const data::Corpus& corpus, std::uint64_t seed) {
    trainer::ModelConfig m;
    m.image.input_size = 16;
    m.image.channels = {4, 8};
    m.image.strides = {2, 2};
    trainer::LoadedModel out;
    out.vocabulary = trainer::corpus_vocabulary(corpus);
    m.text.vocab_size = out.vocabulary.size();
    m.text.max_tokens = 32;
    m.text.hidden_dim = 8;
    m.text.n_layers = 1;
    m.text.n_heads = 2;
    m.text.ffn_dim = 8;
    m.shared_dim = 8;
    m.attention_heads = 2;
    m.code_dim = 8;
    out.model = std::make_unique<trainer::KeepFitModel>(m, seed);
    return out;
}

data::Corpus labeled_corpus(int classes, int n) {
    data::SyntheticCorpusSpec spec;
    spec.n_classes = classes;
    spec.n_elite = 0;
    spec.n_categorical = n;
    spec.image_size = 16;
    return data::generate_synthetic_corpus(spec);
}

} // namespace

TEST_CASE("metrics: perfect predictions") {
    const Tensor p({3, 3}, {.8, .1, .1, .1, .8, .1, .1, .1, .8});
    const Metrics m = compute_metrics(p, {0, 1, 2});
    CHECK(m.acc == 1.0);
    CHECK(m.auc == 1.0);
    CHECK(m.aupr == 1.0);
    CHECK(m.warnings.empty());
}

TEST_CASE("metrics: binary hand example") {
    const Metrics m = compute_metrics(binary_probs({0.9, 0.8, 0.3, 0.1}), {1, 0, 1, 0});
    CHECK(m.acc == 0.5);
    CHECK(m.auc == doctest::Approx(0.75));
    CHECK(m.aupr == doctest::Approx(5.0 / 6.0));
}

TEST_CASE("metrics: tied scores count half and break argmax to the lowest index") {
    const Metrics m = compute_metrics(binary_probs({0.5, 0.5, 0.5, 0.5}), {1, 0, 1, 0});
    CHECK(m.auc == 0.5);
    CHECK(m.aupr == 0.5);
    CHECK(m.acc == 0.5);
}

TEST_CASE("metrics: a single class and absent classes produce warnings") {
    const Metrics one = compute_metrics(Tensor({3, 1}, 1.0), {0, 0, 0});
    CHECK(one.acc == 1.0);
    CHECK(std::isnan(one.auc));
    CHECK(one.aupr == 1.0);
    CHECK_FALSE(one.warnings.empty());

    const Tensor p({2, 3}, {.6, .3, .1, .2, .7, .1});
    const Metrics absent = compute_metrics(p, {0, 1});
    CHECK(absent.auc == 1.0);
    REQUIRE(absent.warnings.size() == 1);
    CHECK(absent.warnings[0].find("class 2") != std::string::npos);
}

TEST_CASE("metrics: malformed inputs are rejected") {
    CHECK_THROWS_AS(compute_metrics(Tensor({2, 2}, 0.5), {0}), ShapeError);
    CHECK_THROWS_AS(compute_metrics(Tensor({1, 2}, {0.3, 0.3}), {0}), Error);
    CHECK_THROWS_AS(compute_metrics(Tensor({1, 2}, 0.5), {2}), Error);
}

TEST_CASE("zero-shot: each image retrieves the class it coincides with") {
    Rng rng(1);
    const Tensor cls = normalized_rows(testing::random_tensor({4, 6}, rng));
    const Tensor logits = zero_shot_logits(cls, cls, 0.1);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(logits.at(i, i) == doctest::Approx(10.0));
        for (std::size_t k = 0; k < 4; ++k) CHECK(logits.at(i, k) <= logits.at(i, i));
    }
    CHECK(compute_metrics(softmax(logits), {0, 1, 2, 3}).acc == 1.0);
}

TEST_CASE("zero-shot: invariant to positive rescaling of image features") {
    Rng rng(2);
    const Tensor cls = normalized_rows(testing::random_tensor({3, 5}, rng));
    const Tensor f = testing::random_tensor({4, 5}, rng);
    Tensor g = f;
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 5; ++c) g.at(r, c) *= 0.25 + static_cast<double>(r);
    const Tensor a = zero_shot_logits(f, cls, 0.07), b = zero_shot_logits(g, cls, 0.07);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    CHECK_THROWS_AS(zero_shot_logits(Tensor({1, 5}), cls, 0.07), Error);
}

TEST_CASE("zero-shot: class embeddings do not depend on the order of template variants") {
    const data::Corpus corpus = labeled_corpus(3, 3);
    const trainer::LoadedModel model = tiny_loaded(corpus, 3);
    data::PromptTemplate reordered = corpus.classes.prompts;
    for (auto& v : reordered.variants) std::reverse(v.begin(), v.end());
    const Tensor a = class_embeddings(*model.model, model.vocabulary, corpus.classes.prompts, 3);
    const Tensor b = class_embeddings(*model.model, model.vocabulary, reordered, 3);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    data::PromptTemplate missing = corpus.classes.prompts;
    missing.variants[1].clear();
    CHECK_THROWS_AS(class_embeddings(*model.model, model.vocabulary, missing, 3), Error);
}

TEST_CASE("tip-adapter: alpha 0 returns the zero-shot logits exactly") {
    Rng rng(4);
    const Tensor cls = normalized_rows(testing::random_tensor({3, 6}, rng));
    const Tensor q = normalized_rows(testing::random_tensor({5, 6}, rng));
    const Tensor keys = normalized_rows(testing::random_tensor({6, 6}, rng));
    const Tensor zs = zero_shot_logits(q, cls, 0.07);
    const Tensor tip = tip_adapter_logits(q, keys, {0, 0, 1, 1, 2, 2}, cls, 0.07, 0.0, 5.0);
    for (std::size_t i = 0; i < zs.size(); ++i) CHECK(tip[i] == zs[i]);
}

TEST_CASE("tip-adapter: a query equal to a key leans toward that key's label") {
    // Uninformative class embeddings leave the cache to decide.
    Tensor cls({2, 2}, {1.0, 0.0, 1.0, 0.0});
    const Tensor keys = normalized_rows(Tensor({2, 2}, {1.0, 1.0, 1.0, -1.0}));
    const std::vector<int> labels{1, 0};
    const Tensor logits = tip_adapter_logits(keys, keys, labels, cls, 0.07, 1.0, 5.0);
    CHECK(logits.at(0, 1) > logits.at(0, 0));
    CHECK(logits.at(1, 0) > logits.at(1, 1));
    CHECK(logits.at(0, 1) - logits.at(0, 0) == doctest::Approx(1.0 - std::exp(-5.0)));
}

TEST_CASE("tip-adapter-f never ends below plain tip-adapter on the support set") {
    Rng rng(5);
    Tensor support, query;
    std::vector<int> s_labels, q_labels;
    clustered(4, 3, 6, 0.6, rng, support, s_labels);
    clustered(10, 3, 6, 0.6, rng, query, q_labels);
    FewShotInputs in{support, s_labels, query, normalized_rows(testing::random_tensor({3, 6}, rng)), 0.07};
    FewShotConfig config;
    config.shots = 4;
    config.adapter = Adapter::tip_adapter_f;
    config.tip_f_epochs = 50;
    const FewShotResult r = few_shot_adapt(in, config);
    CHECK(r.details.at("support_accuracy").get<double>() >= r.details.at("tip_support_accuracy").get<double>());
    CHECK(r.probabilities.shape() == Shape{30, 3});
}

TEST_CASE("few-shot: every adapter classifies separated clusters") {
    Rng rng(6);
    Tensor support, query;
    std::vector<int> s_labels, q_labels;
    clustered(5, 3, 8, 0.3, rng, support, s_labels);
    clustered(20, 3, 8, 0.3, rng, query, q_labels);
    // Class embeddings point roughly at their clusters.
    Tensor cls = testing::random_tensor({3, 8}, rng, 0.5);
    for (std::size_t k = 0; k < 3; ++k) cls.at(k, k) += 1.0;
    FewShotInputs in{support, s_labels, query, normalized_rows(cls), 0.07};
    for (auto adapter : {Adapter::clip_adapter, Adapter::tip_adapter, Adapter::tip_adapter_f}) {
        INFO(to_string(adapter));
        FewShotConfig config;
        config.adapter = adapter;
        CHECK(compute_metrics(few_shot_adapt(in, config).probabilities, q_labels).acc >= 0.9);
    }
}

TEST_CASE("few-shot: support sets must hold exactly `shots` items of every class") {
    Rng rng(7);
    Tensor support, query;
    std::vector<int> s_labels, q_labels;
    clustered(2, 2, 4, 0.3, rng, support, s_labels);
    clustered(1, 2, 4, 0.3, rng, query, q_labels);
    FewShotInputs in{support, s_labels, query, normalized_rows(testing::random_tensor({3, 4}, rng)), 0.07};
    FewShotConfig config;
    config.shots = 2;
    CHECK_THROWS_WITH_AS(few_shot_adapt(in, config), doctest::Contains("class 2"), Error);
    in.class_emb = normalized_rows(testing::random_tensor({2, 4}, rng));
    config.shots = 3;
    CHECK_THROWS_AS(few_shot_adapt(in, config), Error);
    config.shots = 0;
    CHECK_THROWS_AS(few_shot_adapt(in, config), UsageError);
}

TEST_CASE("linear probe: separable features are classified perfectly") {
    Rng rng(8);
    Tensor train_f, test_f;
    std::vector<int> train_l, test_l;
    clustered(10, 3, 5, 0.1, rng, train_f, train_l);
    clustered(10, 3, 5, 0.1, rng, test_f, test_l);
    const Tensor p = linear_probe(train_f, train_l, test_f, 3, {});
    CHECK(compute_metrics(p, test_l).acc == 1.0);
}

TEST_CASE("linear probe: shuffled labels give chance accuracy") {
    Rng rng(9);
    const std::size_t c = 4, n = 400;
    const Tensor train_f = normalized_rows(testing::random_tensor({n, 6}, rng));
    const Tensor test_f = normalized_rows(testing::random_tensor({n, 6}, rng));
    std::vector<int> train_l(n), test_l(n);
    for (std::size_t i = 0; i < n; ++i) {
        train_l[i] = static_cast<int>(rng.below(c));
        test_l[i] = static_cast<int>(rng.below(c));
    }
    LinearProbeConfig config;
    config.max_epochs = 300;
    const double acc = compute_metrics(linear_probe(train_f, train_l, test_f, c, config), test_l).acc;
    const double sigma = std::sqrt(0.25 * 0.75 / static_cast<double>(n));
    CHECK(std::abs(acc - 0.25) <= 3.0 * sigma);
}

TEST_CASE("linear probe: a single training class is rejected") {
    const Tensor f = normalized_rows(Tensor({3, 2}, {1, 0, 0, 1, 1, 1}));
    CHECK_THROWS_WITH_AS(linear_probe(f, {1, 1, 1}, f, 2, {}), doctest::Contains("single class"), Error);
}

TEST_CASE("folds: a pure function of the record id with every fold used") {
    std::map<std::size_t, int> counts;
    for (int i = 0; i < 500; ++i) {
        const std::string id = "record-" + std::to_string(i);
        const std::size_t f = fold_of(id, 7, 5);
        CHECK(f < 5);
        CHECK(fold_of(id, 7, 5) == f);
        ++counts[f];
    }
    CHECK(counts.size() == 5);
    CHECK(fold_of("x", 0, 1) == 0);
    CHECK_THROWS_AS(fold_of("x", 0, 0), UsageError);
}

TEST_CASE("run_eval: five folds partition the corpus and reports are reproducible") {
    const data::Corpus corpus = labeled_corpus(3, 60);
    const trainer::LoadedModel model = tiny_loaded(corpus, 1);
    EvalTask task;
    const EvalReport a = run_eval(task, corpus, {}, model);
    const EvalReport b = run_eval(task, corpus, {}, model);
    CHECK(a.to_json().dump() == b.to_json().dump());
    REQUIRE(a.folds.size() == 5);
    std::vector<std::size_t> expected(5, 0);
    for (const auto& r : corpus.records) ++expected[fold_of(data::record_id(r), task.seed, 5)];
    std::size_t total = 0;
    double acc_sum = 0.0;
    for (const auto& f : a.folds) {
        CHECK(f.n_test == expected[f.fold]);
        total += f.n_test;
        acc_sum += f.metrics.acc;
    }
    CHECK(total == corpus.records.size());
    CHECK(a.mean.acc == doctest::Approx(acc_sum / 5.0).epsilon(1e-12));
    CHECK(a.encoder_checksum_before == a.encoder_checksum_after);
}

TEST_CASE("run_eval: adapters and the probe leave the encoders untouched") {
    const data::Corpus corpus = labeled_corpus(2, 40);
    const trainer::LoadedModel model = tiny_loaded(corpus, 2);
    const auto before = nn::checksum(model.model->encoder_parameters());
    EvalTask task;
    task.folds = 2;
    task.setting = Setting::linear_probe;
    task.linear_probe.max_epochs = 50;
    CHECK_NOTHROW(run_eval(task, corpus, {}, model));
    task.setting = Setting::few_shot;
    task.few_shot.shots = 2;
    for (auto adapter : {Adapter::clip_adapter, Adapter::tip_adapter, Adapter::tip_adapter_f}) {
        task.few_shot.adapter = adapter;
        task.few_shot.clip_epochs = 20;
        task.few_shot.tip_f_epochs = 20;
        const EvalReport r = run_eval(task, corpus, {}, model);
        CHECK(r.encoder_checksum_before == r.encoder_checksum_after);
        CHECK(r.folds[0].n_train == 4);
    }
    CHECK(nn::checksum(model.model->encoder_parameters()) == before);
}

TEST_CASE("run_eval: a single fold evaluates on every record, excluding few-shot support") {
    const data::Corpus corpus = labeled_corpus(2, 20);
    const trainer::LoadedModel model = tiny_loaded(corpus, 3);
    EvalTask task;
    task.folds = 1;
    const EvalReport zs = run_eval(task, corpus, {}, model);
    REQUIRE(zs.folds.size() == 1);
    CHECK(zs.folds[0].n_test == 20);
    task.setting = Setting::few_shot;
    task.few_shot.shots = 3;
    const EvalReport fs = run_eval(task, corpus, {}, model);
    CHECK(fs.folds[0].n_train == 6);
    CHECK(fs.folds[0].n_test == 14);
}

TEST_CASE("run_eval: too few support candidates name the fold and class") {
    const data::Corpus corpus = labeled_corpus(2, 12);
    const trainer::LoadedModel model = tiny_loaded(corpus, 4);
    EvalTask task;
    task.setting = Setting::few_shot;
    task.few_shot.shots = 8;
    CHECK_THROWS_WITH_AS(run_eval(task, corpus, {}, model), doctest::Contains("fold 0"), Error);
    try {
        run_eval(task, corpus, {}, model);
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("class") != std::string::npos);
    }
}

TEST_CASE("run_eval: unlabeled records are rejected unless labeled_only is set") {
    data::SyntheticCorpusSpec spec;
    spec.n_classes = 2;
    spec.n_elite = 4;
    spec.n_categorical = 10;
    spec.image_size = 16;
    const data::Corpus corpus = data::generate_synthetic_corpus(spec);
    const trainer::LoadedModel model = tiny_loaded(corpus, 5);
    EvalTask task;
    task.folds = 1;
    CHECK_THROWS_WITH_AS(run_eval(task, corpus, {}, model), doctest::Contains("labeled_only"), Error);
    task.labeled_only = true;
    const EvalReport r = run_eval(task, corpus, {}, model);
    CHECK(r.folds[0].n_test == 10);
    CHECK(r.task.at("skipped_unlabeled") == 4);
}

TEST_CASE("setting and adapter names parse and reject unknowns") {
    for (auto s : {Setting::zero_shot, Setting::few_shot, Setting::linear_probe}) CHECK(parse_setting(to_string(s)) == s);
    for (auto a : {Adapter::clip_adapter, Adapter::tip_adapter, Adapter::tip_adapter_f}) CHECK(parse_adapter(to_string(a)) == a);
    CHECK_THROWS_AS(parse_setting("one-shot"), UsageError);
    CHECK_THROWS_AS(parse_adapter("lora"), UsageError);
}
