#include "keepfit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace keepfit {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'K', 'E', 'E', 'P', 'F', 'I', 'T', '1'};
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw Error("checkpoint (" + kind + "): missing tensor '" + name + "'");
}

void Checkpoint::put_parameters(const nn::ParameterList& params, const std::string& prefix) {
    for (const auto& p : params) put(prefix + p.name, p.var.value());
}

void Checkpoint::load_parameters(const nn::ParameterList& params, const std::string& prefix) const {
    for (auto p : params) {
        const Tensor& t = tensor(prefix + p.name);
        if (t.shape() != p.var.value().shape()) {
            throw Error("checkpoint: tensor '" + prefix + p.name + "' has shape " + shape_str(t.shape()) +
                        ", model expects " + shape_str(p.var.value().shape()));
        }
        p.var.mutable_value() = t;
    }
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json header;
    header["kind"] = ckpt.kind;
    header["meta"] = ckpt.meta;
    auto dir = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        dir.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.size();
    }
    header["tensors"] = dir;
    const std::string h = header.dump();

    std::string out(kMagic, sizeof kMagic);
    const std::uint64_t hlen = h.size();
    out.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out += h;
    for (const auto& [name, t] : ckpt.tensors) out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
    return out;
}

Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin) {
    if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw Error(origin + ": not a keepfit checkpoint");
    }
    std::uint64_t hlen;
    std::memcpy(&hlen, bytes.data() + sizeof kMagic, sizeof hlen);
    const std::size_t body = sizeof kMagic + sizeof hlen;
    if (bytes.size() < body + hlen) throw Error(origin + ": truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(body, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw Error(origin + ": bad header: " + e.what());
    }
    Checkpoint ckpt;
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.meta = header.at("meta");
    const std::size_t payload = body + hlen;
    for (const auto& entry : header.at("tensors")) {
        Shape shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::size_t>();
        const std::size_t n = shape_numel(shape);
        if (payload + (offset + n) * sizeof(double) > bytes.size()) throw Error(origin + ": truncated payload");
        std::vector<double> values(n);
        std::memcpy(values.data(), bytes.data() + payload + offset * sizeof(double), n * sizeof(double));
        ckpt.put(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values)));
    }
    return ckpt;
}

void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot write " + tmp.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw Error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    atomic_write(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path), path.string()); }

} // namespace keepfit
