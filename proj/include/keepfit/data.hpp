#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "keepfit/rng.hpp"
#include "keepfit/tensor.hpp"

namespace keepfit::data {

/// 8-bit interleaved image (HWC).
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<std::uint8_t> pixels;

    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
    friend bool operator==(const Image&, const Image&) = default;
};

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);
Image resize_bilinear(const Image& image, std::size_t height, std::size_t width);
/// Stack images into a [B, size, size, 3] tensor scaled to [-1, 1], resizing
/// any image whose side differs from `size`.
Tensor images_to_tensor(const std::vector<const Image*>& images, std::size_t size);

enum class Source { elite, categorical };
enum class Modality { CFP, FFA, OCT, synthetic };

std::string to_string(Source s);
std::string to_string(Modality m);
Source parse_source(const std::string& s);
Modality parse_modality(const std::string& s);

class ManifestError : public Error {
public:
    ManifestError(std::size_t line, const std::string& what)
        : Error("manifest line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// One corpus entry. `image` is either a path (relative to the manifest's
/// directory) or inline pixels.
struct ManifestRecord {
    std::variant<std::string, Image> image;
    std::optional<std::string> caption;
    std::optional<int> category_id;
    Source source = Source::categorical;
    Modality modality = Modality::synthetic;

    friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

/// Throws Error naming the violated invariant.
void validate(const ManifestRecord& record);
/// Stable identifier: the image path, or a hash of inline pixels.
std::string record_id(const ManifestRecord& record);

nlohmann::json to_json(const ManifestRecord& record);
ManifestRecord record_from_json(const nlohmann::json& j);
std::string serialize_manifest(const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> parse_manifest(const std::string& text);
std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);

/// Resolve a record's pixels, reading from `root` for path references.
Image load_image(const ManifestRecord& record, const std::filesystem::path& root);

/// Zero-shot / label-augmentation prompts: one list of expansions per class.
struct PromptTemplate {
    std::string pattern = "A fundus photograph of [class name]";
    std::vector<std::vector<std::string>> variants;
};

/// Fill the `[class name]` slot.
std::string fill_template(const std::string& pattern, const std::string& class_name);
/// `n_variants` expansions per class; the first one always uses `pattern`.
PromptTemplate build_prompt_template(const std::vector<std::string>& class_names, std::size_t n_variants,
                                     std::string pattern = "A fundus photograph of [class name]");
/// Uniformly sampled expansion for `category_id`.
std::string expand_category_to_text(int category_id, const PromptTemplate& templates, Rng& rng);

struct ClassDescriptor {
    int id = 0;
    std::string name;
    /// Visual motif keyword; every elite caption for the class contains it.
    std::string motif;
    std::string color_name;
    int shape = 0;
    std::array<std::uint8_t, 3> color{};
};

struct ClassTable {
    std::vector<ClassDescriptor> classes;
    PromptTemplate prompts;

    std::vector<std::string> names() const;
};

nlohmann::json to_json(const ClassTable& table);
ClassTable class_table_from_json(const nlohmann::json& j);

struct SyntheticCorpusSpec {
    int n_classes = 8;
    int n_elite = 200;
    int n_categorical = 800;
    std::size_t image_size = 32;
    std::size_t n_variants = 3;
    std::uint64_t seed = 7;
    /// Also stamp category ids on elite records (ground truth for analysis).
    bool elite_ground_truth = false;

    void validate() const;
};

struct Corpus {
    std::vector<ManifestRecord> records;
    ClassTable classes;
};

ClassTable make_class_table(int n_classes, std::size_t n_variants);
/// Draw one image of `cls`: `motif_count` primitives (2–4 in generated
/// corpora) over a noisy fundus-like background.
Image draw_class_image(const ClassDescriptor& cls, std::size_t size, int motif_count, Rng& rng);
/// Names the class, its motif keyword and colour, plus 1–3 attribute phrases.
std::string make_elite_caption(const ClassDescriptor& cls, int motif_count, Rng& rng);
/// Pure function of the spec; images are inline.
Corpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec);
/// Free-text ophthalmic phrases for masked-language pretraining.
std::vector<std::string> generate_text_corpus(const ClassTable& table, std::size_t n_sentences, std::uint64_t seed);

/// Layout: {root}/images/*.ppm, {root}/manifest.jsonl, {root}/classes.json.
void write_corpus(const std::filesystem::path& root, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& root);

} // namespace keepfit::data
