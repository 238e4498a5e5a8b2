#pragma once

// Static figures: displacement quivers, Jacobian validity maps, density bars
// and alpha curves. Images are BGR cv::Mat.

#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

namespace longalign::plots {

// Arrows from p to p + disp(p) every `step` pixels, drawn over `background`
// ((1, H, W) in [0, 1]) or a white canvas when it is undefined.
cv::Mat quiver(const torch::Tensor& disp, const torch::Tensor& background = torch::Tensor(), int step = 8,
               int scale = 2);

// One block of scale x scale pixels per field pixel: red where det J < 0,
// otherwise white at det = 1 fading to blue as |det - 1| grows.
cv::Mat jacobian_map(const torch::Tensor& disp, int scale = 1);
int count_red(const cv::Mat& img);

struct Bar {
    std::string label;
    double value = 0.0;
    double lo = 0.0;
    double hi = 0.0;
};
// Fill colours of bars and series, in order.
const std::vector<cv::Scalar>& palette();

cv::Mat bar_chart(const std::vector<Bar>& bars, const std::string& title);

struct Series {
    std::string label;
    std::vector<double> y;  // NaN points are skipped
};
// x is plotted on a log10 axis.
cv::Mat line_chart(const std::vector<double>& x, const std::vector<Series>& series, const std::string& title,
                   const std::string& x_label);

void save_png(const std::filesystem::path& path, const cv::Mat& img);

}  // namespace longalign::plots
