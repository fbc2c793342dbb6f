// SPDX-License-Identifier: Apache-2.0
#include "rmdlab/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <stdexcept>

#include "rmdlab/parallel.hpp"

namespace rmdlab {

namespace {

void require_homogeneous(std::span<const ImageGrid> images, const char* what) {
    for (const auto& im : images)
        if (im.shape() != images.front().shape())
            throw std::invalid_argument(std::string(what) + ": sample shapes differ");
}

double sq_dist(const ImageGrid& a, const ImageGrid& b) {
    const auto x = a.data(), y = b.data();
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - y[i];
        s += d * d;
    }
    return s;
}

// Kernel matrix of the pooled set, row-major n x n (diagonal = 1).
std::vector<double> pooled_kernel(std::span<const ImageGrid> z, double bandwidth) {
    const std::size_t n = z.size();
    const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
    std::vector<double> k(n * n, 1.0);
    parallel_for(n, [&](std::size_t i) {
        for (std::size_t j = i + 1; j < n; ++j) k[i * n + j] = std::exp(-sq_dist(z[i], z[j]) * inv);
    });
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j) k[i * n + j] = k[j * n + i];
    return k;
}

// Unbiased MMD^2 for a labelling: label[i] = true means set A.
double mmd_from_kernel(const std::vector<double>& k, std::size_t n, const std::vector<char>& label) {
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    std::size_t m = 0;
    for (char l : label) m += l ? 1 : 0;
    const std::size_t nb = n - m;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = &k[i * n];
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            if (label[i] && label[j]) saa += row[j];
            else if (!label[i] && !label[j]) sbb += row[j];
            else if (label[i]) sab += row[j];
        }
    }
    const double dm = static_cast<double>(m), dn = static_cast<double>(nb);
    return saa / (dm * (dm - 1.0)) + sbb / (dn * (dn - 1.0)) - 2.0 * sab / (dm * dn);
}

}  // namespace

GridShape SampleSet::shape() const {
    if (images.empty()) throw std::invalid_argument("empty sample set '" + provenance + "'");
    require_homogeneous(images, provenance.c_str());
    return images.front().shape();
}

double median_bandwidth(std::span<const ImageGrid> images) {
    if (images.size() < 2) throw std::invalid_argument("median_bandwidth: need at least 2 samples");
    require_homogeneous(images, "median_bandwidth");
    std::vector<double> d;
    d.reserve(images.size() * (images.size() - 1) / 2);
    for (std::size_t i = 0; i < images.size(); ++i)
        for (std::size_t j = i + 1; j < images.size(); ++j) d.push_back(std::sqrt(sq_dist(images[i], images[j])));
    const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    if (!(*mid > 0.0)) throw std::invalid_argument("median_bandwidth: degenerate (identical) samples");
    return *mid;
}

double mmd_rbf(std::span<const ImageGrid> a, std::span<const ImageGrid> b, double bandwidth) {
    if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("mmd_rbf: each set needs at least 2 samples");
    if (!(bandwidth > 0.0)) throw std::invalid_argument("mmd_rbf: bandwidth must be positive");
    require_homogeneous(a, "mmd_rbf");
    require_homogeneous(b, "mmd_rbf");
    if (a.front().shape() != b.front().shape()) throw std::invalid_argument("mmd_rbf: sets have different shapes");
    const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
    auto within = [&](std::span<const ImageGrid> s) {
        double acc = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i)
            for (std::size_t j = i + 1; j < s.size(); ++j) acc += std::exp(-sq_dist(s[i], s[j]) * inv);
        const double n = static_cast<double>(s.size());
        return 2.0 * acc / (n * (n - 1.0));
    };
    std::vector<double> cross_rows(a.size());
    parallel_for(a.size(), [&](std::size_t i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < b.size(); ++j) acc += std::exp(-sq_dist(a[i], b[j]) * inv);
        cross_rows[i] = acc;
    });
    double cross = 0.0;
    for (double r : cross_rows) cross += r;
    cross /= static_cast<double>(a.size()) * static_cast<double>(b.size());
    return within(a) + within(b) - 2.0 * cross;
}

double mmd_rbf(const SampleSet& a, const SampleSet& b, double bandwidth) {
    return mmd_rbf(std::span<const ImageGrid>(a.images), std::span<const ImageGrid>(b.images), bandwidth);
}

std::vector<double> mmd_permutation_null(std::span<const ImageGrid> a, std::span<const ImageGrid> b,
                                         double bandwidth, int permutations, std::uint64_t seed) {
    if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("permutation null: each set needs >= 2 samples");
    std::vector<ImageGrid> pooled(a.begin(), a.end());
    pooled.insert(pooled.end(), b.begin(), b.end());
    require_homogeneous(pooled, "permutation null");
    const std::size_t n = pooled.size();
    const std::vector<double> k = pooled_kernel(pooled, bandwidth);
    SeededRng rng(seed);
    std::vector<std::size_t> idx(n);
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(std::max(permutations, 0)));
    std::vector<char> label(n);
    for (int p = 0; p < permutations; ++p) {
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        // Fisher-Yates with the portable generator
        for (std::size_t i = n - 1; i > 0; --i)
            std::swap(idx[i], idx[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i + 1)))]);
        std::fill(label.begin(), label.end(), 0);
        for (std::size_t i = 0; i < a.size(); ++i) label[idx[i]] = 1;
        out.push_back(mmd_from_kernel(k, n, label));
    }
    return out;
}

double null_width(std::span<const double> null_values, double quantile) {
    if (null_values.empty()) throw std::invalid_argument("null_width: no null samples");
    std::vector<double> a;
    a.reserve(null_values.size());
    for (double v : null_values) a.push_back(std::abs(v));
    std::sort(a.begin(), a.end());
    const double pos = quantile * static_cast<double>(a.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, a.size() - 1);
    return a[lo] + (pos - static_cast<double>(lo)) * (a[hi] - a[lo]);
}

SummaryStats summary_stats(std::span<const ImageGrid> images) {
    if (images.empty()) throw std::invalid_argument("summary_stats: empty set");
    require_homogeneous(images, "summary_stats");
    SummaryStats s;
    double sum = 0.0, sum2 = 0.0, edge = 0.0;
    std::size_t npx = 0, nedge = 0;
    std::array<double, 4> power{};
    const int h = images.front().height(), w = images.front().width();
    const double rmax = std::sqrt(0.5);
    std::vector<double> centered(static_cast<std::size_t>(h) * w);
    for (const ImageGrid& im : images) {
        for (int c = 0; c < im.channels(); ++c) {
            double mean = 0.0;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double v = im.at(c, y, x);
                    sum += v;
                    sum2 += v * v;
                    mean += v;
                    ++npx;
                    if (x + 1 < w) {
                        edge += std::abs(im.at(c, y, x + 1) - v);
                        ++nedge;
                    }
                    if (y + 1 < h) {
                        edge += std::abs(im.at(c, y + 1, x) - v);
                        ++nedge;
                    }
                }
            mean /= static_cast<double>(h * w);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) centered[static_cast<std::size_t>(y * w + x)] = im.at(c, y, x) - mean;
            // Direct 2-D DFT; images here are at most a few dozen pixels across.
            for (int u = 0; u < h; ++u)
                for (int v = 0; v < w; ++v) {
                    double re = 0.0, imv = 0.0;
                    for (int y = 0; y < h; ++y)
                        for (int x = 0; x < w; ++x) {
                            const double ang = -2.0 * std::numbers::pi *
                                               (static_cast<double>(u * y) / h + static_cast<double>(v * x) / w);
                            const double val = centered[static_cast<std::size_t>(y * w + x)];
                            re += val * std::cos(ang);
                            imv += val * std::sin(ang);
                        }
                    const double fu = static_cast<double>(std::min(u, h - u)) / h;
                    const double fv = static_cast<double>(std::min(v, w - v)) / w;
                    const double r = std::sqrt(fu * fu + fv * fv);
                    const int bin = std::min(3, static_cast<int>(std::floor(r / (rmax / 4.0))));
                    power[static_cast<std::size_t>(bin)] += re * re + imv * imv;
                }
        }
    }
    s.mean_intensity = sum / static_cast<double>(npx);
    s.pixel_variance = sum2 / static_cast<double>(npx) - s.mean_intensity * s.mean_intensity;
    s.edge_energy = nedge ? edge / static_cast<double>(nedge) : 0.0;
    const double total = power[0] + power[1] + power[2] + power[3];
    if (total > 0.0)
        for (std::size_t b = 0; b < 4; ++b) s.radial_spectrum[b] = power[b] / total;
    return s;
}

double cost_model_speedup(const CostEntry& base, double cfg_multiplier, std::span<const CostEntry> method,
                          double gamma) {
    auto cost = [gamma](const CostEntry& e) {
        if (e.steps <= 0 || e.height <= 0 || e.width <= 0) throw std::invalid_argument("cost entries must be positive");
        return e.steps * std::pow(static_cast<double>(e.height) * e.width, gamma);
    };
    if (method.empty() || !(cfg_multiplier > 0)) throw std::invalid_argument("cost model: empty method or bad cfg");
    double m = 0.0;
    for (const auto& e : method) m += cost(e);
    return cost(base) * cfg_multiplier / m;
}

void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << "method,metric,value\n" << std::setprecision(12);
    for (const auto& r : rows) out << r.method << ',' << r.metric << ',' << r.value << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_contact_sheet(const std::filesystem::path& path, std::span<const ImageGrid> images, int count,
                         int columns) {
    const std::size_t n = std::min<std::size_t>(images.size(), static_cast<std::size_t>(std::max(count, 1)));
    if (n == 0) throw std::invalid_argument("write_contact_sheet: no images");
    write_pnm(path, tile_grid(images.first(n), columns));
}

}  // namespace rmdlab
