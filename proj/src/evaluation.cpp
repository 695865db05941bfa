#include "ldic/evaluation.hpp"

#include "ldic/bitstream.hpp"
#include "ldic/codec.hpp"
#include "ldic/errors.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <Eigen/Dense>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

namespace ldic::eval {

namespace fs = std::filesystem;

namespace {

// Per-image PSNR is capped here before averaging so one lossless image does
// not turn a curve point into +inf.
constexpr double kPsnrCapDb = 100.0;

void check_same_shape(const RgbImage& a, const RgbImage& b, const char* what) {
    if (!a.values.defined() || !b.values.defined() || a.values.sizes() != b.values.sizes()) {
        throw UsageError(std::string(what) + ": image shapes differ");
    }
}

torch::Tensor to_8bit(const torch::Tensor& t) {
    return t.to(torch::kFloat64).clamp(0.0, 1.0).mul(255.0).round();
}

// ---- Bjontegaard helpers -------------------------------------------------

struct Samples {
    std::vector<double> x, y;
};

Samples sorted_samples(const RdCurve& c, bool quality_axis) {
    std::vector<std::pair<double, double>> xy;
    for (const auto& p : c.points) {
        const double lr = std::log(p.bpp);
        xy.emplace_back(quality_axis ? p.psnr_db : lr, quality_axis ? lr : p.psnr_db);
    }
    std::sort(xy.begin(), xy.end());
    Samples s;
    for (auto& [x, y] : xy) {
        s.x.push_back(x);
        s.y.push_back(y);
    }
    return s;
}

Eigen::VectorXd polyfit(const Samples& s, int degree) {
    const auto n = static_cast<Eigen::Index>(s.x.size());
    Eigen::MatrixXd A(n, degree + 1);
    Eigen::VectorXd b(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double v = 1.0;
        for (int k = 0; k <= degree; ++k) {
            A(i, k) = v;
            v *= s.x[static_cast<size_t>(i)];
        }
        b(i) = s.y[static_cast<size_t>(i)];
    }
    return A.colPivHouseholderQr().solve(b);
}

double poly_integral(const Eigen::VectorXd& c, double lo, double hi) {
    double acc = 0.0;
    for (Eigen::Index k = 0; k < c.size(); ++k) {
        const double e = static_cast<double>(k + 1);
        acc += c(k) * (std::pow(hi, e) - std::pow(lo, e)) / e;
    }
    return acc;
}

// Monotone piecewise cubic Hermite interpolant (Fritsch-Carlson slopes).
class Pchip {
public:
    explicit Pchip(Samples s) : s_(std::move(s)) {
        const size_t n = s_.x.size();
        for (size_t i = 1; i < n; ++i) {
            if (!(s_.x[i] > s_.x[i - 1])) {
                throw UsageError("pchip needs strictly increasing abscissae");
            }
        }
        std::vector<double> h(n - 1), delta(n - 1);
        for (size_t i = 0; i + 1 < n; ++i) {
            h[i] = s_.x[i + 1] - s_.x[i];
            delta[i] = (s_.y[i + 1] - s_.y[i]) / h[i];
        }
        d_.assign(n, 0.0);
        for (size_t i = 1; i + 1 < n; ++i) {
            if (delta[i - 1] * delta[i] > 0.0) {
                const double w1 = 2.0 * h[i] + h[i - 1];
                const double w2 = h[i] + 2.0 * h[i - 1];
                d_[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        d_[0] = end_slope(h[0], n > 2 ? h[1] : h[0], delta[0], n > 2 ? delta[1] : delta[0]);
        d_[n - 1] = end_slope(h[n - 2], n > 2 ? h[n - 3] : h[n - 2], delta[n - 2], n > 2 ? delta[n - 3] : delta[n - 2]);
    }

    double operator()(double x) const {
        const auto& X = s_.x;
        size_t i = static_cast<size_t>(std::upper_bound(X.begin(), X.end(), x) - X.begin());
        i = std::clamp<size_t>(i, 1, X.size() - 1) - 1;
        const double h = X[i + 1] - X[i];
        const double t = (x - X[i]) / h;
        const double t2 = t * t, t3 = t2 * t;
        return (2 * t3 - 3 * t2 + 1) * s_.y[i] + (t3 - 2 * t2 + t) * h * d_[i] + (-2 * t3 + 3 * t2) * s_.y[i + 1] +
               (t3 - t2) * h * d_[i + 1];
    }

    double integral(double lo, double hi) const {
        constexpr int n = 2048;  // Simpson, even
        const double step = (hi - lo) / n;
        double acc = (*this)(lo) + (*this)(hi);
        for (int k = 1; k < n; ++k) {
            acc += (k % 2 ? 4.0 : 2.0) * (*this)(lo + k * step);
        }
        return acc * step / 3.0;
    }

private:
    static double end_slope(double h0, double h1, double d0, double d1) {
        double d = ((2 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if (d * d0 <= 0.0) {
            d = 0.0;
        } else if (d0 * d1 < 0.0 && std::abs(d) > std::abs(3 * d0)) {
            d = 3 * d0;
        }
        return d;
    }

    Samples s_;
    std::vector<double> d_;
};

// Mean difference test - baseline of y over the common x interval.
double mean_gap(const RdCurve& baseline, const RdCurve& test, bool quality_axis, BdInterpolation interp) {
    baseline.validate();
    test.validate();
    if (baseline.points.size() < 4 || test.points.size() < 4) {
        throw UsageError("Bjontegaard deltas need at least 4 points per curve");
    }
    const auto a = sorted_samples(baseline, quality_axis);
    const auto b = sorted_samples(test, quality_axis);
    const double lo = std::max(a.x.front(), b.x.front());
    const double hi = std::min(a.x.back(), b.x.back());
    if (!(hi > lo)) {
        std::ostringstream os;
        os << "curves '" << baseline.label << "' [" << a.x.front() << ", " << a.x.back() << "] and '" << test.label
           << "' [" << b.x.front() << ", " << b.x.back() << "] do not overlap on the "
           << (quality_axis ? "PSNR" : "log-rate") << " axis";
        throw UsageError(os.str());
    }
    double ia, ib;
    if (interp == BdInterpolation::Cubic) {
        ia = poly_integral(polyfit(a, 3), lo, hi);
        ib = poly_integral(polyfit(b, 3), lo, hi);
    } else {
        ia = Pchip(a).integral(lo, hi);
        ib = Pchip(b).integral(lo, hi);
    }
    return (ib - ia) / (hi - lo);
}

// ---- plotting ------------------------------------------------------------

const cv::Scalar kPalette[] = {{200, 80, 30}, {40, 40, 210}, {40, 160, 40}, {160, 60, 160}, {20, 140, 200}};

void draw_chart(const std::vector<RdCurve>& curves, bool use_ssim, const fs::path& path) {
    const int W = 720, H = 520, left = 80, right = 200, top = 40, bottom = 60;
    cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& c : curves) {
        for (const auto& p : c.points) {
            const double v = use_ssim ? p.ssim : std::min(p.psnr_db, kPsnrCapDb);
            x0 = std::min(x0, p.bpp);
            x1 = std::max(x1, p.bpp);
            y0 = std::min(y0, v);
            y1 = std::max(y1, v);
        }
    }
    if (!(x1 > x0)) x1 = x0 + 1.0;
    if (!(y1 > y0)) y1 = y0 + 1.0;
    const double px = (x1 - x0) * 0.05, py = (y1 - y0) * 0.05;
    x0 -= px, x1 += px, y0 -= py, y1 += py;
    auto to_px = [&](double x, double y) {
        return cv::Point(left + static_cast<int>(std::lround((x - x0) / (x1 - x0) * (W - left - right))),
                         H - bottom - static_cast<int>(std::lround((y - y0) / (y1 - y0) * (H - top - bottom))));
    };
    const cv::Scalar black(0, 0, 0), grey(210, 210, 210);
    const auto font = cv::FONT_HERSHEY_SIMPLEX;
    for (int k = 0; k <= 5; ++k) {
        const double x = x0 + (x1 - x0) * k / 5.0, y = y0 + (y1 - y0) * k / 5.0;
        cv::line(img, to_px(x, y0), to_px(x, y1), grey, 1);
        cv::line(img, to_px(x0, y), to_px(x1, y), grey, 1);
        std::ostringstream xs, ys;
        xs << std::fixed << std::setprecision(3) << x;
        ys << std::fixed << std::setprecision(use_ssim ? 3 : 2) << y;
        cv::putText(img, xs.str(), to_px(x, y0) + cv::Point(-20, 20), font, 0.4, black, 1, cv::LINE_AA);
        cv::putText(img, ys.str(), to_px(x0, y) + cv::Point(-60, 4), font, 0.4, black, 1, cv::LINE_AA);
    }
    cv::rectangle(img, to_px(x0, y1), to_px(x1, y0), black, 1);
    cv::putText(img, "bpp", cv::Point((W - right + left) / 2 - 10, H - 15), font, 0.5, black, 1, cv::LINE_AA);
    cv::putText(img, use_ssim ? "SSIM" : "PSNR (dB)", cv::Point(10, 25), font, 0.5, black, 1, cv::LINE_AA);
    for (size_t i = 0; i < curves.size(); ++i) {
        const auto colour = kPalette[i % std::size(kPalette)];
        std::vector<cv::Point> pts;
        for (const auto& p : curves[i].points) {
            pts.push_back(to_px(p.bpp, use_ssim ? p.ssim : std::min(p.psnr_db, kPsnrCapDb)));
        }
        cv::polylines(img, pts, false, colour, 2, cv::LINE_AA);
        for (const auto& q : pts) {
            cv::circle(img, q, 4, colour, cv::FILLED, cv::LINE_AA);
        }
        const cv::Point legend(W - right + 15, top + 20 + 22 * static_cast<int>(i));
        cv::line(img, legend, legend + cv::Point(25, 0), colour, 2, cv::LINE_AA);
        cv::putText(img, curves[i].label, legend + cv::Point(32, 5), font, 0.45, black, 1, cv::LINE_AA);
    }
    if (!cv::imwrite(path.string(), img)) {
        throw DataError("cannot write plot " + path.string());
    }
}

}  // namespace

double psnr(const RgbImage& x, const RgbImage& x_hat) {
    check_same_shape(x, x_hat, "psnr");
    const double mse = (to_8bit(x.values) - to_8bit(x_hat.values)).pow(2).mean().item<double>();
    if (mse == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double ssim(const RgbImage& x, const RgbImage& x_hat) {
    check_same_shape(x, x_hat, "ssim");
    auto luma = [](const torch::Tensor& t) {
        auto v = to_8bit(t);
        return (0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2]).unsqueeze(0).unsqueeze(0);
    };
    auto a = luma(x.values), b = luma(x_hat.values);
    int64_t k = std::min<int64_t>({11, a.size(2), a.size(3)});
    if (k % 2 == 0) --k;
    auto g = torch::arange(k, torch::kFloat64) - static_cast<double>(k / 2);
    g = torch::exp(-g.pow(2) / (2.0 * 1.5 * 1.5));
    g = g / g.sum();
    auto window = torch::outer(g, g).view({1, 1, k, k});
    auto filt = [&](const torch::Tensor& t) { return torch::conv2d(t, window); };
    const double c1 = std::pow(0.01 * 255.0, 2), c2 = std::pow(0.03 * 255.0, 2);
    auto mu_a = filt(a), mu_b = filt(b);
    auto var_a = filt(a * a) - mu_a * mu_a;
    auto var_b = filt(b * b) - mu_b * mu_b;
    auto cov = filt(a * b) - mu_a * mu_b;
    auto map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    return map.mean().item<double>();
}

std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::NoLidar: return "no_lidar";
        case Scenario::UncompressedLidar: return "uncompressed_lidar";
        case Scenario::CompressedLidar: return "compressed_lidar";
        case Scenario::RandomMap: return "random_map";
    }
    return "unknown";
}

Scenario scenario_from_string(const std::string& name) {
    for (auto s : {Scenario::NoLidar, Scenario::UncompressedLidar, Scenario::CompressedLidar, Scenario::RandomMap}) {
        if (to_string(s) == name) return s;
    }
    throw UsageError("unknown scenario '" + name +
                     "' (expected no_lidar, uncompressed_lidar, compressed_lidar or random_map)");
}

void RdCurve::validate() const {
    for (size_t i = 0; i < points.size(); ++i) {
        const auto& p = points[i];
        if (!std::isfinite(p.bpp) || !(p.bpp > 0.0) || !std::isfinite(p.psnr_db) || !std::isfinite(p.ssim)) {
            throw UsageError("curve '" + label + "' point " + std::to_string(i) + " is not finite and positive");
        }
        if (i > 0 && !(p.bpp > points[i - 1].bpp)) {
            throw UsageError("curve '" + label + "': bpp must increase strictly along the curve");
        }
    }
}

void to_json(nlohmann::json& j, const RdPoint& p) {
    j = nlohmann::json{{"m_lambda", p.m_lambda}, {"bpp", p.bpp},     {"psnr_db", p.psnr_db},
                       {"ssim", p.ssim},         {"depth_bpp", p.depth_bpp}};
}

void from_json(const nlohmann::json& j, RdPoint& p) {
    p.m_lambda = j.at("m_lambda").get<double>();
    p.bpp = j.at("bpp").get<double>();
    p.psnr_db = j.at("psnr_db").get<double>();
    p.ssim = j.at("ssim").get<double>();
    p.depth_bpp = j.value("depth_bpp", 0.0);
}

void to_json(nlohmann::json& j, const RdCurve& c) {
    j = nlohmann::json{{"label", c.label}, {"points", c.points}};
}

void from_json(const nlohmann::json& j, RdCurve& c) {
    c.label = j.at("label").get<std::string>();
    c.points = j.at("points").get<std::vector<RdPoint>>();
}

double bd_rate(const RdCurve& baseline, const RdCurve& test, BdInterpolation interp) {
    return (std::exp(mean_gap(baseline, test, true, interp)) - 1.0) * 100.0;
}

double bd_psnr(const RdCurve& baseline, const RdCurve& test, BdInterpolation interp) {
    return mean_gap(baseline, test, false, interp);
}

BdMetrics bd_metrics(const RdCurve& baseline, const RdCurve& test, BdInterpolation interp) {
    return {baseline.label, test.label, bd_rate(baseline, test, interp), bd_psnr(baseline, test, interp)};
}

AlignedDepth random_map(int64_t height, int64_t width, uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    AlignedDepth d;
    d.values = torch::rand({1, height, width}, gen, torch::kFloat32);
    d.source_height = height;
    d.source_width = width;
    return d;
}

RdCurve run_scenario(Scenario scenario, model::Model* guided, model::Model* baseline,
                     const std::vector<data::RgbdPair>& set, const ScenarioOptions& options,
                     std::vector<ImageReport>* per_image) {
    if (set.empty()) {
        throw UsageError("evaluation set is empty");
    }
    if (options.m_grid.empty()) {
        throw UsageError("m_lambda grid is empty");
    }
    model::Model* chosen = scenario == Scenario::NoLidar ? baseline : guided;
    if (chosen == nullptr || !*chosen) {
        throw UsageError(to_string(scenario) + " needs a " +
                         (scenario == Scenario::NoLidar ? "baseline" : "depth-guided") + " checkpoint");
    }
    if (scenario != Scenario::NoLidar && !(*chosen)->config().depth_guided) {
        throw UsageError(to_string(scenario) + " needs a depth-guided model");
    }
    auto& m = *chosen;
    m->eval();
    if (!m->tables()) {
        m->freeze_entropy_tables();
    }

    const size_t G = options.m_grid.size();
    std::vector<ImageReport> reports(set.size() * G);
    std::atomic<size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;

    auto work = [&] {
        for (size_t i = next++; i < set.size(); i = next++) {
            try {
                const auto& pair = set[i];
                const auto H = pair.image.height(), W = pair.image.width();
                const double pixels = static_cast<double>(H * W);
                std::optional<AlignedDepth> depth;
                std::shared_ptr<const bitstream::CompressedImage> depth_stream;
                switch (scenario) {
                    case Scenario::NoLidar: break;
                    case Scenario::UncompressedLidar: depth = pair.depth_aligned; break;
                    case Scenario::RandomMap: depth = random_map(H, W, options.random_seed + i); break;
                    case Scenario::CompressedLidar: {
                        auto dc = codec::compress_depth_map(m, pair.depth_raw, H, W);
                        depth = dc.reconstruction;
                        depth_stream = std::make_shared<const bitstream::CompressedImage>(std::move(dc.stream));
                        break;
                    }
                }
                for (size_t g = 0; g < G; ++g) {
                    auto stream = codec::encode_image(m, pair.image, depth, options.m_grid[g]);
                    stream.depth = depth_stream;
                    const auto bytes = bitstream::serialize(stream);
                    // Compressed depth is recovered from the stream itself.
                    auto decoded = codec::decode_image(
                        m, bitstream::parse(bytes), depth_stream ? std::nullopt : depth);
                    auto& r = reports[i * G + g];
                    r.id = pair.id;
                    r.m_lambda = options.m_grid[g];
                    r.bpp = 8.0 * static_cast<double>(bytes.size()) / pixels;
                    if (depth_stream) {
                        r.depth_bpp = 8.0 * static_cast<double>(4 + bitstream::serialized_size(*depth_stream)) / pixels;
                    }
                    r.psnr_db = psnr(pair.image, decoded);
                    r.ssim = ssim(pair.image, decoded);
                }
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mu);
                if (!failure) failure = std::current_exception();
                next = set.size();
            }
        }
    };
    const int jobs = std::clamp(options.jobs, 1, static_cast<int>(set.size()));
    if (jobs == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }

    RdCurve curve;
    curve.label = to_string(scenario);
    for (size_t g = 0; g < G; ++g) {
        RdPoint p;
        p.m_lambda = options.m_grid[g];
        for (size_t i = 0; i < set.size(); ++i) {
            const auto& r = reports[i * G + g];
            p.bpp += r.bpp;
            p.depth_bpp += r.depth_bpp;
            p.psnr_db += std::min(r.psnr_db, kPsnrCapDb);
            p.ssim += r.ssim;
        }
        const double n = static_cast<double>(set.size());
        p.bpp /= n;
        p.depth_bpp /= n;
        p.psnr_db /= n;
        p.ssim /= n;
        curve.points.push_back(p);
    }
    if (per_image) {
        *per_image = std::move(reports);
    }
    return curve;
}

std::vector<fs::path> emit_rd_plot(const std::vector<RdCurve>& curves, const fs::path& prefix) {
    if (curves.empty()) {
        throw UsageError("emit_rd_plot needs at least one curve");
    }
    if (prefix.has_parent_path() && !fs::is_directory(prefix.parent_path())) {
        throw DataError("plot directory " + prefix.parent_path().string() + " does not exist");
    }
    const fs::path psnr_png = prefix.string() + "_psnr.png";
    const fs::path ssim_png = prefix.string() + "_ssim.png";
    const fs::path tsv = prefix.string() + ".tsv";
    {
        std::ofstream out(tsv);
        if (!out) {
            throw DataError("cannot write plot data " + tsv.string());
        }
        out << "label\tm_lambda\tbpp\tpsnr_db\tssim\tdepth_bpp\n";
        out << std::setprecision(10);
        for (const auto& c : curves) {
            for (const auto& p : c.points) {
                out << c.label << "\t" << p.m_lambda << "\t" << p.bpp << "\t" << p.psnr_db << "\t" << p.ssim << "\t"
                    << p.depth_bpp << "\n";
            }
        }
    }
    draw_chart(curves, false, psnr_png);
    draw_chart(curves, true, ssim_png);
    return {psnr_png, ssim_png, tsv};
}

void write_curves(const std::vector<RdCurve>& curves, const fs::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write curves " + path.string());
    }
    for (const auto& c : curves) {
        out << nlohmann::json(c).dump() << "\n";
    }
}

std::vector<RdCurve> read_curves(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot read curves " + path.string());
    }
    std::vector<RdCurve> curves;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            curves.push_back(nlohmann::json::parse(line).get<RdCurve>());
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed curve record in " + path.string() + ": " + e.what());
        }
    }
    return curves;
}

}  // namespace ldic::eval
