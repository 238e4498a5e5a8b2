#include "longalign/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include <opencv2/imgcodecs.hpp>

#include "longalign/errors.hpp"

namespace longalign::io {

namespace {

std::filesystem::path with_ext(std::filesystem::path p, const char* ext) {
    p.replace_extension(ext);
    return p;
}

}  // namespace

torch::Tensor load_image(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw DataError("image not found: " + path.string());
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) throw DataError("cannot decode image " + path.string());
    if (m.channels() != 1) throw DataError("expected a single-channel image: " + path.string());
    double scale = 0.0;
    if (m.depth() == CV_8U) {
        scale = 1.0 / 255.0;
    } else if (m.depth() == CV_16U) {
        scale = 1.0 / 65535.0;
    } else {
        throw DataError("expected an 8- or 16-bit image: " + path.string());
    }
    cv::Mat f;
    m.convertTo(f, CV_32F, scale);
    auto t = torch::from_blob(f.data, {1, f.rows, f.cols}, torch::kFloat32).clone();
    return t;
}

void save_image(const std::filesystem::path& path, const torch::Tensor& image) {
    auto t = image.detach().to(torch::kFloat32).squeeze().contiguous();
    if (t.dim() != 2) throw DataError("save_image: expected a single-channel image");
    auto q = (t.clamp(0.0, 1.0) * 65535.0).round().to(torch::kInt32).contiguous();
    cv::Mat m(static_cast<int>(q.size(0)), static_cast<int>(q.size(1)), CV_16UC1);
    const int32_t* src = q.data_ptr<int32_t>();
    for (int r = 0; r < m.rows; ++r) {
        auto* row = m.ptr<uint16_t>(r);
        for (int c = 0; c < m.cols; ++c) row[c] = static_cast<uint16_t>(src[r * m.cols + c]);
    }
    if (!cv::imwrite(path.string(), m)) throw DataError("cannot write image " + path.string());
}

void save_field(const std::filesystem::path& path, const warpkit::DeformationField& field) {
    field.validate();
    auto d = field.disp.to(torch::kFloat32).contiguous();
    const auto bin = with_ext(path, ".bin");
    std::ofstream out(bin, std::ios::binary);
    if (!out) throw DataError("cannot write " + bin.string());
    const float* p = d.data_ptr<float>();
    for (int64_t i = 0; i < d.numel(); ++i) {
        uint32_t bits = std::bit_cast<uint32_t>(p[i]);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
    nlohmann::json meta = {{"h", field.height()}, {"w", field.width()}, {"units", "px"}};
    std::ofstream js(with_ext(path, ".json"));
    if (!js) throw DataError("cannot write " + with_ext(path, ".json").string());
    js << meta.dump() << '\n';
}

warpkit::DeformationField load_field(const std::filesystem::path& path) {
    const auto bin = with_ext(path, ".bin");
    const auto sidecar = with_ext(path, ".json");
    if (!std::filesystem::exists(sidecar)) throw DataError("field sidecar not found: " + sidecar.string());
    if (!std::filesystem::exists(bin)) throw DataError("field data not found: " + bin.string());
    nlohmann::json meta;
    try {
        std::ifstream js(sidecar);
        js >> meta;
    } catch (const std::exception& e) {
        throw FormatError("bad field sidecar " + sidecar.string() + ": " + e.what());
    }
    if (!meta.contains("h") || !meta.contains("w")) throw FormatError("field sidecar lacks h/w");
    if (meta.value("units", "px") != "px") throw FormatError("field units must be px");
    const int64_t h = meta["h"].get<int64_t>();
    const int64_t w = meta["w"].get<int64_t>();
    const auto expected = static_cast<std::uintmax_t>(2 * h * w * 4);
    if (h <= 0 || w <= 0 || std::filesystem::file_size(bin) != expected) {
        throw FormatError("field data size does not match sidecar (" + std::to_string(h) + "x" +
                          std::to_string(w) + ")");
    }
    auto t = torch::empty({2, h, w}, torch::kFloat32);
    std::ifstream in(bin, std::ios::binary);
    float* p = t.data_ptr<float>();
    for (int64_t i = 0; i < t.numel(); ++i) {
        uint32_t bits = 0;
        in.read(reinterpret_cast<char*>(&bits), sizeof(bits));
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        p[i] = std::bit_cast<float>(bits);
    }
    warpkit::DeformationField f{t};
    f.validate();
    return f;
}

}  // namespace longalign::io
