#include <algorithm>
#include <cmath>
#include <fstream>

#include "keepfit/checkpoint.hpp"
#include "keepfit/data.hpp"

namespace keepfit::data {

namespace {

const std::vector<std::string> kClassNames = {
    "glaucoma",          "cataract",          "diabetic retinopathy", "pathologic myopia",
    "macular degeneration", "retinal vein occlusion", "hypertensive retinopathy", "macular hole",
    "retinal detachment", "drusen",           "optic neuritis",       "chorioretinitis",
};

const std::vector<std::string> kMotifs = {"blob", "ring", "band", "streak", "cross", "patch", "spots", "wedge"};

struct NamedColor {
    const char* name;
    std::array<std::uint8_t, 3> rgb;
};

const std::vector<NamedColor> kColors = {
    {"yellow", {240, 220, 60}}, {"white", {245, 245, 235}}, {"gray", {140, 140, 140}},     {"green", {60, 190, 90}},
    {"blue", {60, 90, 230}},    {"black", {10, 10, 10}},    {"orange", {250, 150, 30}}, {"purple", {170, 60, 210}},
};

const std::vector<std::string> kAttributes = {
    "with blurred margins",    "near the optic disc",     "in the macular region",  "in the peripheral retina",
    "with mild hemorrhage",    "with sharp borders",      "with surrounding edema", "of varying size",
    "with vessel tortuosity",  "affecting both quadrants", "with exudates nearby",  "without neovascularization",
};

const std::vector<std::string> kAltPatterns = {
    "A retinal image showing [class name]",
    "[class name] observed in a fundus photograph",
    "A color fundus image with signs of [class name]",
    "Fundus photograph presenting [class name]",
    "An eye fundus picture of [class name]",
};

const char* count_word(int n) {
    static const char* words[] = {"zero", "one", "two", "three", "four", "five", "six"};
    return (n >= 0 && n <= 6) ? words[n] : "several";
}

void set_pixel(Image& img, long y, long x, const std::array<int, 3>& rgb) {
    if (y < 0 || x < 0 || y >= static_cast<long>(img.height) || x >= static_cast<long>(img.width)) return;
    for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(rgb[c], 0, 255));
}

// Membership test for one primitive centred at the origin with radius r.
bool inside(int shape, double dx, double dy, double r) {
    const double d2 = dx * dx + dy * dy;
    switch (shape) {
    case 0: return d2 <= r * r;
    case 1: return d2 <= r * r && d2 >= 0.45 * r * r;
    case 2: return std::abs(dx) <= r && std::abs(dy) <= 0.3 * r;
    case 3: return std::abs(dy) <= r && std::abs(dx) <= 0.3 * r;
    case 4: return (std::abs(dx) <= r && std::abs(dy) <= 0.22 * r) || (std::abs(dy) <= r && std::abs(dx) <= 0.22 * r);
    case 5: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case 7: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.5;
    default: return false;
    }
}

} // namespace

std::vector<std::string> ClassTable::names() const {
    std::vector<std::string> out;
    for (const auto& c : classes) out.push_back(c.name);
    return out;
}

std::string fill_template(const std::string& pattern, const std::string& class_name) {
    static const std::string slot = "[class name]";
    std::string out = pattern;
    for (auto pos = out.find(slot); pos != std::string::npos; pos = out.find(slot, pos + class_name.size())) {
        out.replace(pos, slot.size(), class_name);
    }
    return out;
}

PromptTemplate build_prompt_template(const std::vector<std::string>& class_names, std::size_t n_variants,
                                     std::string pattern) {
    if (n_variants == 0) throw UsageError("prompt template needs at least one variant per class");
    PromptTemplate t;
    t.pattern = std::move(pattern);
    for (const auto& name : class_names) {
        std::vector<std::string> v{fill_template(t.pattern, name)};
        for (std::size_t i = 1; i < n_variants; ++i) v.push_back(fill_template(kAltPatterns[(i - 1) % kAltPatterns.size()], name));
        t.variants.push_back(std::move(v));
    }
    return t;
}

std::string expand_category_to_text(int category_id, const PromptTemplate& templates, Rng& rng) {
    if (category_id < 0 || static_cast<std::size_t>(category_id) >= templates.variants.size() ||
        templates.variants[static_cast<std::size_t>(category_id)].empty()) {
        throw Error("unknown category id " + std::to_string(category_id));
    }
    const auto& v = templates.variants[static_cast<std::size_t>(category_id)];
    if (v.size() == 1) return v.front();
    return v[rng.below(v.size())];
}

nlohmann::json to_json(const ClassTable& table) {
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& c : table.classes) {
        classes.push_back({{"id", c.id}, {"name", c.name}, {"motif", c.motif}, {"color_name", c.color_name},
                           {"shape", c.shape}, {"color", c.color}});
    }
    return {{"classes", classes}, {"prompts", {{"pattern", table.prompts.pattern}, {"variants", table.prompts.variants}}}};
}

ClassTable class_table_from_json(const nlohmann::json& j) {
    ClassTable t;
    for (const auto& c : j.at("classes")) {
        ClassDescriptor d;
        d.id = c.at("id").get<int>();
        d.name = c.at("name").get<std::string>();
        d.motif = c.value("motif", std::string{});
        d.color_name = c.value("color_name", std::string{});
        d.shape = c.value("shape", 0);
        if (c.contains("color")) d.color = c.at("color").get<std::array<std::uint8_t, 3>>();
        t.classes.push_back(std::move(d));
    }
    t.prompts.pattern = j.at("prompts").at("pattern").get<std::string>();
    t.prompts.variants = j.at("prompts").at("variants").get<std::vector<std::vector<std::string>>>();
    if (t.prompts.variants.size() != t.classes.size()) throw Error("class table: prompt variants do not cover every class");
    for (std::size_t i = 0; i < t.prompts.variants.size(); ++i)
        if (t.prompts.variants[i].empty()) throw Error("class table: class " + std::to_string(i) + " has no prompt");
    return t;
}

void SyntheticCorpusSpec::validate() const {
    if (n_classes < 2) throw UsageError("synthetic corpus needs at least 2 classes");
    if (n_classes > 64) throw UsageError("synthetic corpus supports at most 64 classes");
    if (n_elite < 0 || n_categorical < 0) throw UsageError("record counts must be non-negative");
    if (image_size < 8) throw UsageError("image_size must be at least 8");
    if (n_variants == 0) throw UsageError("n_variants must be at least 1");
}

ClassTable make_class_table(int n_classes, std::size_t n_variants) {
    ClassTable t;
    for (int c = 0; c < n_classes; ++c) {
        ClassDescriptor d;
        d.id = c;
        d.name = static_cast<std::size_t>(c) < kClassNames.size() ? kClassNames[static_cast<std::size_t>(c)]
                                                                   : "retinal condition " + std::to_string(c);
        d.shape = c % 8;
        const auto& col = kColors[static_cast<std::size_t>((c + c / 8) % 8)];
        d.color = col.rgb;
        d.color_name = col.name;
        d.motif = kMotifs[static_cast<std::size_t>(d.shape)];
        t.classes.push_back(std::move(d));
    }
    t.prompts = build_prompt_template(t.names(), n_variants);
    return t;
}

Image draw_class_image(const ClassDescriptor& cls, std::size_t size, int motif_count, Rng& rng) {
    Image img{size, size, 3, std::vector<std::uint8_t>(size * size * 3)};
    const double s = static_cast<double>(size);
    const double half = s / 2.0;
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double dy = (static_cast<double>(y) + 0.5 - half) / half;
            const double dx = (static_cast<double>(x) + 0.5 - half) / half;
            const double vignette = 1.0 - 0.35 * (dx * dx + dy * dy);
            const std::array<double, 3> base{185.0, 75.0, 45.0};
            std::array<int, 3> rgb{};
            for (std::size_t c = 0; c < 3; ++c) rgb[c] = static_cast<int>(std::lround(base[c] * vignette + rng.normal(0.0, 10.0)));
            set_pixel(img, static_cast<long>(y), static_cast<long>(x), rgb);
        }

    // optic disc: present in every class, carries no label information
    {
        const double r = s / 11.0;
        const double cy = rng.uniform(0.35, 0.65) * s;
        const double cx = (rng.bernoulli(0.5) ? 0.25 : 0.75) * s;
        for (long y = static_cast<long>(cy - r) - 1; y <= static_cast<long>(cy + r) + 1; ++y)
            for (long x = static_cast<long>(cx - r) - 1; x <= static_cast<long>(cx + r) + 1; ++x) {
                const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
                if (dx * dx + dy * dy <= r * r) set_pixel(img, y, x, {235, 200, 150});
            }
    }

    for (int k = 0; k < motif_count; ++k) {
        const double r = rng.uniform(0.10, 0.17) * s;
        const double cy = rng.uniform(r, s - r);
        const double cx = rng.uniform(r, s - r);
        std::array<int, 3> rgb{};
        for (std::size_t c = 0; c < 3; ++c) rgb[c] = static_cast<int>(cls.color[c]) + rng.between(-15, 15);
        if (cls.shape == 6) {
            const double dot = std::max(1.0, 0.35 * r);
            for (int d = 0; d < 3; ++d) {
                const double oy = cy + rng.uniform(-r, r) * 0.7, ox = cx + rng.uniform(-r, r) * 0.7;
                for (long y = static_cast<long>(oy - dot) - 1; y <= static_cast<long>(oy + dot) + 1; ++y)
                    for (long x = static_cast<long>(ox - dot) - 1; x <= static_cast<long>(ox + dot) + 1; ++x) {
                        const double dy = static_cast<double>(y) + 0.5 - oy, dx = static_cast<double>(x) + 0.5 - ox;
                        if (dx * dx + dy * dy <= dot * dot) set_pixel(img, y, x, rgb);
                    }
            }
            continue;
        }
        for (long y = static_cast<long>(cy - r) - 1; y <= static_cast<long>(cy + r) + 1; ++y)
            for (long x = static_cast<long>(cx - r) - 1; x <= static_cast<long>(cx + r) + 1; ++x) {
                if (inside(cls.shape, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, r)) {
                    set_pixel(img, y, x, rgb);
                }
            }
    }
    return img;
}

std::string make_elite_caption(const ClassDescriptor& cls, int motif_count, Rng& rng) {
    std::string caption = "fundus photograph shows ";
    caption += count_word(motif_count);
    caption += " " + cls.color_name + " " + cls.motif + " lesions consistent with " + cls.name;
    std::vector<std::size_t> idx(kAttributes.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    const int n_attr = rng.between(1, 3);
    for (int a = 0; a < n_attr; ++a) caption += ", " + kAttributes[idx[static_cast<std::size_t>(a)]];
    caption += ".";
    return caption;
}

Corpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec) {
    spec.validate();
    Corpus corpus;
    corpus.classes = make_class_table(spec.n_classes, spec.n_variants);
    Rng rng(spec.seed);
    const auto emit = [&](Source source, int count) {
        for (int i = 0; i < count; ++i) {
            const int cls = i % spec.n_classes;
            const auto& desc = corpus.classes.classes[static_cast<std::size_t>(cls)];
            const int motifs = rng.between(2, 4);
            ManifestRecord r;
            r.image = draw_class_image(desc, spec.image_size, motifs, rng);
            r.source = source;
            r.modality = Modality::synthetic;
            if (source == Source::elite) {
                r.caption = make_elite_caption(desc, motifs, rng);
                if (spec.elite_ground_truth) r.category_id = cls;
            } else {
                r.category_id = cls;
            }
            corpus.records.push_back(std::move(r));
        }
    };
    emit(Source::elite, spec.n_elite);
    emit(Source::categorical, spec.n_categorical);
    return corpus;
}

std::vector<std::string> generate_text_corpus(const ClassTable& table, std::size_t n_sentences, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n_sentences; ++i) {
        const auto& cls = table.classes[rng.below(table.classes.size())];
        if (rng.bernoulli(0.25)) {
            out.push_back(expand_category_to_text(cls.id, table.prompts, rng));
        } else {
            out.push_back(make_elite_caption(cls, rng.between(1, 4), rng));
        }
    }
    return out;
}

void write_corpus(const std::filesystem::path& root, const Corpus& corpus) {
    std::filesystem::create_directories(root / "images");
    std::vector<ManifestRecord> out;
    std::size_t n_elite = 0, n_cat = 0;
    for (const auto& r : corpus.records) {
        ManifestRecord w = r;
        if (const auto* img = std::get_if<Image>(&r.image)) {
            char name[64];
            if (r.source == Source::elite) {
                std::snprintf(name, sizeof name, "images/elite_%06zu.ppm", n_elite++);
            } else {
                std::snprintf(name, sizeof name, "images/cat_%06zu.ppm", n_cat++);
            }
            write_ppm(root / name, *img);
            w.image = std::string(name);
        }
        out.push_back(std::move(w));
    }
    save_manifest(root / "manifest.jsonl", out);
    atomic_write(root / "classes.json", to_json(corpus.classes).dump(2) + "\n");
}

Corpus read_corpus(const std::filesystem::path& root) {
    Corpus c;
    c.records = load_manifest(root / "manifest.jsonl");
    try {
        c.classes = class_table_from_json(nlohmann::json::parse(read_file(root / "classes.json")));
    } catch (const nlohmann::json::exception& e) {
        throw Error((root / "classes.json").string() + ": " + e.what());
    }
    for (const auto& r : c.records) {
        if (r.category_id && static_cast<std::size_t>(*r.category_id) >= c.classes.classes.size()) {
            throw Error(root.string() + ": category_id " + std::to_string(*r.category_id) + " outside class table");
        }
    }
    return c;
}

} // namespace keepfit::data
