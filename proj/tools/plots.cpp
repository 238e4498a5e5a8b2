#include "plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "longalign/errors.hpp"
#include "longalign/warpkit.hpp"

namespace longalign::plots {

namespace {

const cv::Scalar kBlack(0, 0, 0);
const cv::Scalar kGrey(160, 160, 160);
const std::vector<cv::Scalar> kPalette = {{180, 90, 30}, {40, 130, 230}, {60, 160, 60}, {40, 40, 200},
                                          {150, 90, 150}, {90, 90, 90}};

torch::Tensor as_field(const torch::Tensor& disp) {
    auto d = disp.dim() == 4 ? disp.squeeze(0) : disp;
    if (d.dim() != 3 || d.size(0) != 2) throw DataError("plot: expected a (2, H, W) field");
    return d.detach().to(torch::kCPU, torch::kFloat64).contiguous();
}

std::string fmt(double v, const char* f = "%.3f") {
    char buf[32];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

void text(cv::Mat& img, const std::string& s, cv::Point at, double size = 0.45) {
    cv::putText(img, s, at, cv::FONT_HERSHEY_SIMPLEX, size, kBlack, 1, cv::LINE_AA);
}

struct Frame {
    int left = 70, right = 20, top = 40, bottom = 50, width = 640, height = 400;
    double y0 = 0, y1 = 1;
    int px(double t) const { return left + static_cast<int>(std::lround(t * (width - left - right))); }
    int py(double v) const {
        const double t = (v - y0) / (y1 - y0);
        return height - bottom - static_cast<int>(std::lround(t * (height - top - bottom)));
    }
};

cv::Mat axes(const Frame& f, const std::string& title) {
    cv::Mat img(f.height, f.width, CV_8UC3, cv::Scalar(255, 255, 255));
    cv::line(img, {f.left, f.top}, {f.left, f.height - f.bottom}, kBlack);
    cv::line(img, {f.left, f.height - f.bottom}, {f.width - f.right, f.height - f.bottom}, kBlack);
    for (int i = 0; i <= 4; ++i) {
        const double v = f.y0 + (f.y1 - f.y0) * i / 4.0;
        const int y = f.py(v);
        cv::line(img, {f.left - 4, y}, {f.left, y}, kBlack);
        text(img, fmt(v, "%.2f"), {8, y + 4}, 0.4);
    }
    text(img, title, {f.left, 24}, 0.55);
    return img;
}

void padded_range(Frame& f, double lo, double hi) {
    if (!std::isfinite(lo) || !std::isfinite(hi)) {
        lo = 0.0;
        hi = 1.0;
    }
    const double pad = std::max(0.05 * (hi - lo), 1e-3);
    f.y0 = lo - pad;
    f.y1 = hi + pad;
}

}  // namespace

cv::Mat quiver(const torch::Tensor& disp, const torch::Tensor& background, int step, int scale) {
    if (step <= 0 || scale <= 0) throw ConfigError("quiver: step and scale must be positive");
    auto d = as_field(disp);
    const auto H = static_cast<int>(d.size(1)), W = static_cast<int>(d.size(2));
    cv::Mat img(H * scale, W * scale, CV_8UC3, cv::Scalar(255, 255, 255));
    if (background.defined()) {
        auto bg = (background.dim() == 3 ? background[0] : background).detach().to(torch::kCPU, torch::kFloat32).contiguous();
        if (bg.size(0) != H || bg.size(1) != W) throw DataError("quiver: background and field sizes differ");
        cv::Mat grey(H, W, CV_32F, bg.data_ptr<float>());
        cv::Mat g8, big;
        grey.convertTo(g8, CV_8U, 255.0);
        cv::resize(g8, big, img.size(), 0, 0, cv::INTER_NEAREST);
        cv::cvtColor(big, img, cv::COLOR_GRAY2BGR);
    }
    auto acc = d.accessor<double, 3>();
    for (int r = step / 2; r < H; r += step) {
        for (int c = step / 2; c < W; c += step) {
            const cv::Point2d from((c + 0.5) * scale, (r + 0.5) * scale);
            const cv::Point2d to(from.x + acc[1][r][c] * scale, from.y + acc[0][r][c] * scale);
            cv::arrowedLine(img, from, to, cv::Scalar(0, 140, 255), 1, cv::LINE_AA, 0, 0.3);
        }
    }
    return img;
}

cv::Mat jacobian_map(const torch::Tensor& disp, int scale) {
    if (scale <= 0) throw ConfigError("jacobian_map: scale must be positive");
    auto det = warpkit::jacobian_det(as_field(disp)).contiguous();
    const auto H = static_cast<int>(det.size(0)), W = static_cast<int>(det.size(1));
    cv::Mat img(H * scale, W * scale, CV_8UC3);
    auto acc = det.accessor<double, 2>();
    for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
            const double v = acc[r][c];
            cv::Vec3b color;
            if (v < 0) {
                color = {0, 0, 255};
            } else {
                // Valid: white at det = 1, towards blue (never red) as it departs.
                const auto fade = static_cast<uchar>(std::lround(200.0 * std::min(1.0, std::abs(v - 1.0))));
                color = {255, static_cast<uchar>(255 - fade), static_cast<uchar>(255 - fade)};
            }
            img(cv::Rect(c * scale, r * scale, scale, scale)).setTo(cv::Scalar(color[0], color[1], color[2]));
        }
    }
    return img;
}

const std::vector<cv::Scalar>& palette() { return kPalette; }

int count_red(const cv::Mat& img) {
    int n = 0;
    for (int r = 0; r < img.rows; ++r) {
        for (int c = 0; c < img.cols; ++c) {
            const auto& p = img.at<cv::Vec3b>(r, c);
            if (p[0] == 0 && p[1] == 0 && p[2] == 255) ++n;
        }
    }
    return n;
}

cv::Mat bar_chart(const std::vector<Bar>& bars, const std::string& title) {
    Frame f;
    double lo = 0.0, hi = 1.0;
    if (!bars.empty()) {
        lo = bars.front().lo;
        hi = bars.front().hi;
        for (const auto& b : bars) {
            lo = std::min({lo, b.lo, b.value});
            hi = std::max({hi, b.hi, b.value});
        }
    }
    padded_range(f, std::min(lo, 0.0), hi);
    auto img = axes(f, title);
    const double slot = 1.0 / static_cast<double>(std::max<size_t>(bars.size(), 1));
    for (size_t i = 0; i < bars.size(); ++i) {
        const auto& b = bars[i];
        const int x0 = f.px((static_cast<double>(i) + 0.2) * slot), x1 = f.px((static_cast<double>(i) + 0.8) * slot);
        const int xm = (x0 + x1) / 2;
        cv::rectangle(img, {x0, f.py(b.value)}, {x1, f.py(std::max(f.y0, 0.0))}, kPalette[i % kPalette.size()], cv::FILLED);
        cv::line(img, {xm, f.py(b.lo)}, {xm, f.py(b.hi)}, kBlack, 2);
        cv::line(img, {xm - 8, f.py(b.lo)}, {xm + 8, f.py(b.lo)}, kBlack, 2);
        cv::line(img, {xm - 8, f.py(b.hi)}, {xm + 8, f.py(b.hi)}, kBlack, 2);
        text(img, b.label, {x0, f.height - f.bottom + 18});
        text(img, fmt(b.value), {x0, f.height - f.bottom + 36}, 0.4);
    }
    return img;
}

cv::Mat line_chart(const std::vector<double>& x, const std::vector<Series>& series, const std::string& title,
                   const std::string& x_label) {
    if (x.empty()) throw DataError("line_chart: no points");
    for (double v : x) {
        if (!(v > 0)) throw DataError("line_chart: x must be positive for a log axis");
    }
    Frame f;
    f.right = 150;  // legend column
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& s : series) {
        if (s.y.size() != x.size()) throw DataError("line_chart: series '" + s.label + "' has the wrong length");
        for (double v : s.y) {
            if (std::isfinite(v)) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        }
    }
    padded_range(f, lo, hi);
    auto img = axes(f, title);
    const double lx0 = std::log10(*std::min_element(x.begin(), x.end()));
    const double lx1 = std::log10(*std::max_element(x.begin(), x.end()));
    auto tx = [&](double v) { return lx1 > lx0 ? (std::log10(v) - lx0) / (lx1 - lx0) : 0.5; };
    for (double v : x) {
        const int px = f.px(tx(v));
        cv::line(img, {px, f.height - f.bottom}, {px, f.height - f.bottom + 4}, kBlack);
        text(img, fmt(v, "%g"), {px - 14, f.height - f.bottom + 18}, 0.4);
    }
    text(img, x_label, {f.width / 2 - 30, f.height - 10});
    for (size_t s = 0; s < series.size(); ++s) {
        const auto color = kPalette[s % kPalette.size()];
        cv::Point prev(-1, -1);
        for (size_t i = 0; i < x.size(); ++i) {
            if (!std::isfinite(series[s].y[i])) {
                prev = {-1, -1};
                continue;
            }
            cv::Point p(f.px(tx(x[i])), f.py(series[s].y[i]));
            cv::circle(img, p, 3, color, cv::FILLED);
            if (prev.x >= 0) cv::line(img, prev, p, color, 2, cv::LINE_AA);
            prev = p;
        }
        const int ly = f.top + 18 * static_cast<int>(s + 1);
        cv::line(img, {f.width - f.right + 12, ly - 4}, {f.width - f.right + 28, ly - 4}, color, 2);
        text(img, series[s].label, {f.width - f.right + 34, ly}, 0.4);
    }
    return img;
}

void save_png(const std::filesystem::path& path, const cv::Mat& img) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace longalign::plots
