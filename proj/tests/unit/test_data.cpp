#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "keepfit/checkpoint.hpp"
#include "keepfit/data.hpp"

using namespace keepfit;
using namespace keepfit::data;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("keepfit-test-data-" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

Image tiny_image(std::uint8_t seed) {
    Image img{2, 3, 3, {}};
    for (std::size_t i = 0; i < 18; ++i) img.pixels.push_back(static_cast<std::uint8_t>(seed + 13 * i));
    return img;
}

} // namespace

TEST_CASE("small spec yields the requested record counts") {
    SyntheticCorpusSpec spec;
    spec.n_classes = 2;
    spec.n_elite = 4;
    spec.n_categorical = 4;
    spec.seed = 7;
    const Corpus corpus = generate_synthetic_corpus(spec);
    REQUIRE(corpus.records.size() == 8);
    int captions = 0, categories = 0;
    for (const auto& r : corpus.records) {
        captions += r.caption.has_value();
        categories += r.category_id.has_value();
    }
    CHECK(captions == 4);
    CHECK(categories == 4);
}

TEST_CASE("generation is a pure function of the spec") {
    SyntheticCorpusSpec spec;
    spec.n_classes = 3;
    spec.n_elite = 6;
    spec.n_categorical = 9;
    spec.image_size = 16;
    const Corpus a = generate_synthetic_corpus(spec);
    const Corpus b = generate_synthetic_corpus(spec);
    CHECK(serialize_manifest(a.records) == serialize_manifest(b.records));
    CHECK(to_json(a.classes).dump() == to_json(b.classes).dump());
    spec.seed += 1;
    CHECK(serialize_manifest(generate_synthetic_corpus(spec).records) != serialize_manifest(a.records));
}

TEST_CASE("class histogram is balanced within one per split") {
    SyntheticCorpusSpec spec;
    spec.elite_ground_truth = true;
    const Corpus corpus = generate_synthetic_corpus(spec);
    std::map<Source, std::vector<int>> hist{{Source::elite, std::vector<int>(8)}, {Source::categorical, std::vector<int>(8)}};
    for (const auto& r : corpus.records) hist[r.source][*r.category_id] += 1;
    for (const auto& [source, counts] : hist) {
        const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
        CHECK(*hi - *lo <= 1);
    }
    CHECK(std::accumulate(hist[Source::elite].begin(), hist[Source::elite].end(), 0) == 200);
    CHECK(std::accumulate(hist[Source::categorical].begin(), hist[Source::categorical].end(), 0) == 800);
}

TEST_CASE("elite captions contain the class motif keyword") {
    SyntheticCorpusSpec spec;
    spec.n_elite = 64;
    spec.n_categorical = 8;
    spec.elite_ground_truth = true;
    const Corpus corpus = generate_synthetic_corpus(spec);
    for (const auto& r : corpus.records) {
        if (r.source != Source::elite) continue;
        const auto& cls = corpus.classes.classes.at(*r.category_id);
        CHECK(r.caption->find(cls.motif) != std::string::npos);
        CHECK(r.caption->find(cls.name) != std::string::npos);
    }
}

TEST_CASE("elite records carry no category unless ground truth is requested") {
    SyntheticCorpusSpec spec;
    spec.n_elite = 8;
    spec.n_categorical = 8;
    for (const auto& r : generate_synthetic_corpus(spec).records) {
        if (r.source == Source::elite) CHECK_FALSE(r.category_id.has_value());
    }
}

TEST_CASE("invalid specs are rejected") {
    SyntheticCorpusSpec spec;
    spec.n_classes = 1;
    CHECK_THROWS_AS(generate_synthetic_corpus(spec), UsageError);
    spec = {};
    spec.n_variants = 0;
    CHECK_THROWS_AS(generate_synthetic_corpus(spec), UsageError);
}

TEST_CASE("single-variant template expands to the fundus photograph prompt") {
    const PromptTemplate t = build_prompt_template({"glaucoma"}, 1);
    Rng rng(0);
    CHECK(expand_category_to_text(0, t, rng) == "A fundus photograph of glaucoma");
    CHECK(fill_template("A fundus photograph of [class name]", "cataract") == "A fundus photograph of cataract");
}

TEST_CASE("expansion is reproducible for a fixed rng and rejects unknown ids") {
    const PromptTemplate t = build_prompt_template({"a", "b"}, 3);
    REQUIRE(t.variants[0].size() == 3);
    Rng r1(42), r2(42);
    for (int i = 0; i < 20; ++i) CHECK(expand_category_to_text(0, t, r1) == expand_category_to_text(0, t, r2));
    CHECK_THROWS_AS(expand_category_to_text(2, t, r1), Error);
    CHECK_THROWS_AS(expand_category_to_text(-1, t, r1), Error);
}

TEST_CASE("variant sampling frequencies stay within five sigma of uniform") {
    const PromptTemplate t = build_prompt_template({"drusen"}, 3);
    Rng rng(123);
    std::map<std::string, int> counts;
    const int n = 10000;
    for (int i = 0; i < n; ++i) counts[expand_category_to_text(0, t, rng)] += 1;
    REQUIRE(counts.size() == 3);
    const double p = 1.0 / 3.0, sigma = std::sqrt(n * p * (1 - p));
    for (const auto& [text, c] : counts) CHECK(std::abs(c - n * p) < 5 * sigma);
}

TEST_CASE("empty manifest parses to an empty list") {
    CHECK(parse_manifest("").empty());
    const auto dir = scratch_dir("empty");
    std::ofstream(dir / "manifest.jsonl").close();
    CHECK(load_manifest(dir / "manifest.jsonl").empty());
}

TEST_CASE("manifest round-trips through text and disk") {
    std::vector<ManifestRecord> records;
    records.push_back({std::string("images/a.ppm"), std::string("a caption, with punctuation."), std::nullopt,
                       Source::elite, Modality::CFP});
    records.push_back({tiny_image(3), std::nullopt, 4, Source::categorical, Modality::OCT});
    records.push_back({tiny_image(9), std::string("both"), 1, Source::elite, Modality::synthetic});
    const std::string text = serialize_manifest(records);
    CHECK(parse_manifest(text) == records);
    CHECK(serialize_manifest(parse_manifest(text)) == text);
    const auto dir = scratch_dir("roundtrip");
    save_manifest(dir / "m.jsonl", records);
    CHECK(load_manifest(dir / "m.jsonl") == records);
}

TEST_CASE("manifest errors name the offending line") {
    const std::string good = serialize_manifest({{std::string("x.ppm"), std::nullopt, 0, Source::categorical, Modality::CFP}});
    SUBCASE("neither caption nor category") {
        const std::string text = good + R"({"image":"y.ppm","source":"categorical","modality":"CFP"})" + "\n";
        try {
            parse_manifest(text);
            FAIL("expected a manifest error");
        } catch (const ManifestError& e) {
            CHECK(e.line() == 2);
            CHECK(std::string(e.what()).find("line 2") != std::string::npos);
        }
    }
    SUBCASE("malformed json") {
        try {
            parse_manifest(good + good + "{not json\n");
            FAIL("expected a manifest error");
        } catch (const ManifestError& e) {
            CHECK(e.line() == 3);
        }
    }
    SUBCASE("unknown source") {
        CHECK_THROWS_AS(parse_manifest(R"({"image":"y.ppm","category_id":1,"source":"public"})"), ManifestError);
    }
}

TEST_CASE("record invariants") {
    ManifestRecord r{std::string("a.ppm"), std::nullopt, std::nullopt, Source::categorical, Modality::CFP};
    CHECK_THROWS_AS(validate(r), Error);
    r.category_id = 2;
    CHECK_NOTHROW(validate(r));
    r.source = Source::elite;
    CHECK_THROWS_AS(validate(r), Error);
    r.caption = "text";
    CHECK_NOTHROW(validate(r));
    r.category_id = -1;
    CHECK_THROWS_AS(validate(r), Error);
}

TEST_CASE("record ids are stable and distinguish inline images") {
    ManifestRecord a{tiny_image(1), std::nullopt, 0, Source::categorical, Modality::CFP};
    ManifestRecord b{tiny_image(2), std::nullopt, 0, Source::categorical, Modality::CFP};
    CHECK(record_id(a) == record_id(a));
    CHECK(record_id(a) != record_id(b));
    ManifestRecord c{std::string("images/x.ppm"), std::nullopt, 0, Source::categorical, Modality::CFP};
    CHECK(record_id(c) == "images/x.ppm");
}

TEST_CASE("PPM write and read are inverse") {
    const auto dir = scratch_dir("ppm");
    const Image img = tiny_image(77);
    write_ppm(dir / "a.ppm", img);
    CHECK(read_ppm(dir / "a.ppm") == img);
    atomic_write(dir / "bad.ppm", "P3\n1 1\n255\n0 0 0\n");
    CHECK_THROWS_AS(read_ppm(dir / "bad.ppm"), Error);
}

TEST_CASE("written corpora read back identically") {
    SyntheticCorpusSpec spec;
    spec.n_classes = 2;
    spec.n_elite = 3;
    spec.n_categorical = 3;
    spec.image_size = 8;
    const Corpus corpus = generate_synthetic_corpus(spec);
    const auto dir = scratch_dir("corpus");
    write_corpus(dir, corpus);
    CHECK(std::filesystem::exists(dir / "manifest.jsonl"));
    CHECK(std::filesystem::exists(dir / "images"));
    const Corpus back = read_corpus(dir);
    REQUIRE(back.records.size() == corpus.records.size());
    for (std::size_t i = 0; i < back.records.size(); ++i) {
        CHECK(load_image(back.records[i], dir) == load_image(corpus.records[i], dir));
        CHECK(back.records[i].caption == corpus.records[i].caption);
        CHECK(back.records[i].category_id == corpus.records[i].category_id);
    }
    CHECK(back.classes.names() == corpus.classes.names());
}

TEST_CASE("image tensors are scaled to [-1, 1] and resized on demand") {
    Image img{2, 2, 3, std::vector<std::uint8_t>(12, 255)};
    img.pixels[0] = 0;
    const Tensor t = images_to_tensor({&img}, 2);
    CHECK(t.shape() == Shape{1, 2, 2, 3});
    CHECK(t[0] == -1.0);
    CHECK(t[1] == 1.0);
    const Tensor big = images_to_tensor({&img}, 4);
    CHECK(big.shape() == Shape{1, 4, 4, 3});
    for (std::size_t i = 0; i < big.size(); ++i) CHECK((big[i] >= -1.0 && big[i] <= 1.0));
}

TEST_CASE("text corpus generation is deterministic and non-empty") {
    const ClassTable table = make_class_table(4, 3);
    const auto a = generate_text_corpus(table, 50, 3);
    CHECK(a.size() == 50);
    CHECK(a == generate_text_corpus(table, 50, 3));
    for (const auto& s : a) CHECK_FALSE(s.empty());
}
