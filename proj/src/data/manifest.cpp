#include <fstream>
#include <set>
#include <sstream>

#include "keepfit/checkpoint.hpp"
#include "keepfit/data.hpp"

namespace keepfit::data {

std::string to_string(Source s) { return s == Source::elite ? "elite" : "categorical"; }

std::string to_string(Modality m) {
    switch (m) {
    case Modality::CFP: return "CFP";
    case Modality::FFA: return "FFA";
    case Modality::OCT: return "OCT";
    case Modality::synthetic: return "synthetic";
    }
    return "synthetic";
}

Source parse_source(const std::string& s) {
    if (s == "elite") return Source::elite;
    if (s == "categorical") return Source::categorical;
    throw Error("unknown source '" + s + "' (expected elite or categorical)");
}

Modality parse_modality(const std::string& s) {
    if (s == "CFP") return Modality::CFP;
    if (s == "FFA") return Modality::FFA;
    if (s == "OCT") return Modality::OCT;
    if (s == "synthetic") return Modality::synthetic;
    throw Error("unknown modality '" + s + "'");
}

void validate(const ManifestRecord& record) {
    if (!record.caption && !record.category_id) throw Error("record has neither caption nor category_id");
    if (record.source == Source::elite && !record.caption) throw Error("elite record without caption");
    if (record.source == Source::categorical && !record.category_id) throw Error("categorical record without category_id");
    if (record.category_id && *record.category_id < 0) throw Error("negative category_id");
    if (const auto* img = std::get_if<Image>(&record.image)) {
        if (img->pixels.size() != img->height * img->width * img->channels) throw Error("inline image size mismatch");
    } else if (std::get<std::string>(record.image).empty()) {
        throw Error("empty image path");
    }
}

std::string record_id(const ManifestRecord& record) {
    if (const auto* path = std::get_if<std::string>(&record.image)) return *path;
    const auto& img = std::get<Image>(record.image);
    return "inline:" + hex64(fnv1a(img.pixels.data(), img.pixels.size()));
}

nlohmann::json to_json(const ManifestRecord& record) {
    nlohmann::json j;
    if (const auto* path = std::get_if<std::string>(&record.image)) {
        j["image"] = *path;
    } else {
        const auto& img = std::get<Image>(record.image);
        j["image"] = {{"height", img.height}, {"width", img.width}, {"channels", img.channels}, {"pixels", img.pixels}};
    }
    if (record.caption) j["caption"] = *record.caption;
    if (record.category_id) j["category_id"] = *record.category_id;
    j["source"] = to_string(record.source);
    j["modality"] = to_string(record.modality);
    return j;
}

ManifestRecord record_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"image", "caption", "category_id", "source", "modality"};
    if (!j.is_object()) throw Error("record is not an object");
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw Error("unknown field '" + key + "'");
    ManifestRecord r;
    if (!j.contains("image")) throw Error("missing field 'image'");
    const auto& im = j.at("image");
    if (im.is_string()) {
        r.image = im.get<std::string>();
    } else if (im.is_object()) {
        Image img;
        img.height = im.at("height").get<std::size_t>();
        img.width = im.at("width").get<std::size_t>();
        img.channels = im.at("channels").get<std::size_t>();
        img.pixels = im.at("pixels").get<std::vector<std::uint8_t>>();
        r.image = std::move(img);
    } else {
        throw Error("'image' must be a path or an inline pixel object");
    }
    if (j.contains("caption")) r.caption = j.at("caption").get<std::string>();
    if (j.contains("category_id")) r.category_id = j.at("category_id").get<int>();
    if (!j.contains("source")) throw Error("missing field 'source'");
    r.source = parse_source(j.at("source").get<std::string>());
    r.modality = j.contains("modality") ? parse_modality(j.at("modality").get<std::string>()) : Modality::synthetic;
    validate(r);
    return r;
}

std::string serialize_manifest(const std::vector<ManifestRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        validate(r);
        out += to_json(r).dump();
        out += '\n';
    }
    return out;
}

std::vector<ManifestRecord> parse_manifest(const std::string& text) {
    std::vector<ManifestRecord> records;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            records.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ManifestError(lineno, e.what());
        } catch (const Error& e) {
            throw ManifestError(lineno, e.what());
        }
    }
    return records;
}

std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path) { return parse_manifest(read_file(path)); }

void save_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
    atomic_write(path, serialize_manifest(records));
}

Image load_image(const ManifestRecord& record, const std::filesystem::path& root) {
    if (const auto* img = std::get_if<Image>(&record.image)) return *img;
    return read_ppm(root / std::get<std::string>(record.image));
}

} // namespace keepfit::data
