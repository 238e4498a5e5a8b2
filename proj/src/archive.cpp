#include "longalign/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "longalign/errors.hpp"

namespace longalign::archive {

static_assert(std::endian::native == std::endian::little, "archive format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'L', 'A', 'L', 'G', 'A', 'R', 'C', '1'};

}  // namespace

void write(const std::string& path, const Archive& a) {
    nlohmann::json index = nlohmann::json::array();
    nlohmann::json blob_index = nlohmann::json::array();
    uint64_t offset = 0;
    std::vector<torch::Tensor> payload;
    for (const auto& [name, t] : a.tensors) {
        auto c = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
        const uint64_t nbytes = static_cast<uint64_t>(c.numel()) * sizeof(float);
        index.push_back({{"name", name}, {"shape", c.sizes().vec()}, {"offset", offset}, {"nbytes", nbytes}});
        offset += nbytes;
        payload.push_back(c);
    }
    for (const auto& [name, bytes] : a.blobs) {
        blob_index.push_back({{"name", name}, {"offset", offset}, {"nbytes", bytes.size()}});
        offset += bytes.size();
    }
    const std::string header =
        nlohmann::json{{"meta", a.meta}, {"tensors", index}, {"blobs", blob_index}}.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out.write(kMagic, sizeof(kMagic));
    const uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& c : payload) {
        out.write(reinterpret_cast<const char*>(c.data_ptr<float>()),
                  static_cast<std::streamsize>(c.numel() * sizeof(float)));
    }
    for (const auto& [name, bytes] : a.blobs) out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + path);
}

Archive read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    char magic[sizeof(kMagic)];
    uint64_t len = 0;
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError(path + ": not a checkpoint archive");
    }
    if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)) || len > (1ULL << 32)) {
        throw FormatError(path + ": truncated header");
    }
    std::string header(len, '\0');
    if (!in.read(header.data(), static_cast<std::streamsize>(len))) throw FormatError(path + ": truncated header");
    std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    nlohmann::json h;
    try {
        h = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": bad header: " + e.what());
    }
    auto slice = [&](uint64_t off, uint64_t n) {
        if (off + n > body.size()) throw FormatError(path + ": truncated payload");
        return body.data() + off;
    };
    Archive a;
    try {
        a.meta = h.at("meta");
        for (const auto& e : h.at("tensors")) {
            const auto shape = e.at("shape").get<std::vector<int64_t>>();
            const uint64_t n = e.at("nbytes").get<uint64_t>();
            auto t = torch::empty(shape, torch::kFloat32);
            if (static_cast<uint64_t>(t.numel()) * sizeof(float) != n) throw FormatError(path + ": size mismatch");
            std::memcpy(t.data_ptr<float>(), slice(e.at("offset").get<uint64_t>(), n), n);
            a.tensors.emplace_back(e.at("name").get<std::string>(), t);
        }
        for (const auto& e : h.at("blobs")) {
            const uint64_t n = e.at("nbytes").get<uint64_t>();
            a.blobs[e.at("name").get<std::string>()] = std::string(slice(e.at("offset").get<uint64_t>(), n), n);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": bad index: " + e.what());
    }
    return a;
}

std::vector<std::pair<std::string, torch::Tensor>> capture_parameters(const torch::nn::Module& module) {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& item : module.named_parameters()) {
        out.emplace_back(item.key(), item.value().detach().to(torch::kCPU, torch::kFloat32).clone());
    }
    for (const auto& item : module.named_buffers()) {
        if (!item.value().is_floating_point()) continue;
        out.emplace_back("buffer:" + item.key(), item.value().detach().to(torch::kCPU, torch::kFloat32).clone());
    }
    return out;
}

void load_parameters(torch::nn::Module& module, const std::vector<std::pair<std::string, torch::Tensor>>& params) {
    auto named = module.named_parameters();
    auto buffers = module.named_buffers();
    size_t expected = named.size();
    for (const auto& item : buffers) expected += item.value().is_floating_point() ? 1 : 0;
    if (params.size() != expected) {
        throw FormatError("parameter count mismatch: archive has " + std::to_string(params.size()) +
                          ", model expects " + std::to_string(expected));
    }
    torch::NoGradGuard guard;
    for (const auto& [name, value] : params) {
        const bool is_buffer = name.rfind("buffer:", 0) == 0;
        const std::string key = is_buffer ? name.substr(7) : name;
        torch::Tensor* target = is_buffer ? buffers.find(key) : named.find(key);
        if (target == nullptr) throw FormatError("unknown parameter '" + name + "'");
        if (target->sizes() != value.sizes()) throw FormatError("shape mismatch for '" + name + "'");
        target->copy_(value);
    }
}

std::string save_optimizer(const torch::optim::Optimizer& opt) {
    torch::serialize::OutputArchive out;
    opt.save(out);
    std::ostringstream ss;
    out.save_to(ss);
    return ss.str();
}

void load_optimizer(torch::optim::Optimizer& opt, const std::string& blob) {
    std::istringstream ss(blob);
    torch::serialize::InputArchive in;
    in.load_from(ss);
    opt.load(in);
}

}  // namespace longalign::archive
