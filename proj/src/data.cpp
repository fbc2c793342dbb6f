// SPDX-License-Identifier: Apache-2.0
#include "rmdlab/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace rmdlab {

namespace {

// Sub-samples across the whole canvas (at least 4 per pixel). A fixed canvas
// density makes renders at different resolutions share one sample lattice.
constexpr int kCanvasSamples = 64;
constexpr int kMinSupersample = 4;

bool inside_shape(int class_id, const Pose& p, double x, double y) {
    const double dx = std::abs(x - p.center_x);
    const double dy = std::abs(y - p.center_y);
    const double half = 0.5 * p.size;
    switch (class_id) {
        case 0:
            return dx * dx + dy * dy <= half * half;
        case 1:  // landscape rectangle, 3:5 aspect
            return dx <= half && dy <= 0.6 * half;
        case 2: {
            const double arm = half / 3.0;  // bar half-thickness
            return (dx <= half && dy <= arm) || (dx <= arm && dy <= half);
        }
        default:
            throw std::invalid_argument("class_id out of range: " + std::to_string(class_id));
    }
}

// Separable [1 2 1]/4 with clamped edges.
ImageGrid binomial_blur(const ImageGrid& x) {
    const int h = x.height(), w = x.width();
    ImageGrid tmp(x.shape()), out(x.shape());
    for (int c = 0; c < x.channels(); ++c) {
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx)
                tmp.at(c, yy, xx) = 0.25 * x.at(c, yy, std::max(xx - 1, 0)) + 0.5 * x.at(c, yy, xx) +
                                    0.25 * x.at(c, yy, std::min(xx + 1, w - 1));
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx)
                out.at(c, yy, xx) = 0.25 * tmp.at(c, std::max(yy - 1, 0), xx) + 0.5 * tmp.at(c, yy, xx) +
                                    0.25 * tmp.at(c, std::min(yy + 1, h - 1), xx);
    }
    return out;
}

void require(bool ok, const std::string& key, const std::string& why) {
    if (!ok) throw std::invalid_argument("data." + key + ": " + why);
}

// ---- binary record encoding (little endian) ----

void put_f64(std::string& buf, double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double get_f64(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

std::string tier_name(Tier t) { return t == Tier::high ? "high" : "low"; }

std::string format_real(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

void write_tier(const std::filesystem::path& file, Tier tier, const std::vector<ShapeSample>& samples,
                const DatasetParams& p) {
    const int res = tier == Tier::high ? p.high_res : p.low_res;
    const std::size_t record = 2 + 8 + 8 * static_cast<std::size_t>(res) * res;
    std::array<int, kNumShapeClasses> counts{};
    for (const auto& s : samples) ++counts.at(static_cast<std::size_t>(s.class_id));

    std::ostringstream head;
    head << "rmdlab-dataset 1\n"
         << "tier=" << tier_name(tier) << "\n"
         << "count=" << samples.size() << "\n"
         << "channels=1\nheight=" << res << "\nwidth=" << res << "\n"
         << "record_size=" << record << "\n"
         << "class_counts=" << counts[0] << "," << counts[1] << "," << counts[2] << "\n"
         << "seed=" << p.seed << "\n"
         << "size_min=" << format_real(p.size_min) << "\nsize_max=" << format_real(p.size_max) << "\n"
         << "intensity_min=" << format_real(p.intensity_min) << "\n"
         << "intensity_max=" << format_real(p.intensity_max) << "\n"
         << "jitter_scale=" << format_real(p.jitter_scale) << "\n"
         << "noise_std_max=" << format_real(p.noise_std_max) << "\n"
         << "blur_prob=" << format_real(p.blur_prob) << "\n"
         << "intensity_jitter=" << format_real(p.intensity_jitter) << "\n"
         << "haze_max=" << format_real(p.haze_max) << "\n";
    // data_offset is written zero-padded so the header length does not depend on it.
    const std::string tail = "end_header\n";
    const std::string prefix = head.str();
    const std::size_t offset_line = std::string("data_offset=0000000000\n").size();
    const std::size_t offset = prefix.size() + offset_line + tail.size();
    std::ostringstream off;
    off << "data_offset=" << std::setw(10) << std::setfill('0') << offset << "\n";

    std::string buf = prefix + off.str() + tail;
    buf.reserve(offset + record * samples.size());
    for (const auto& s : samples) {
        if (s.image.height() != res || s.image.width() != res || s.image.channels() != 1)
            throw std::runtime_error("dataset sample has wrong raster size for tier " + tier_name(tier));
        buf.push_back(static_cast<char>(s.class_id));
        buf.push_back(static_cast<char>(tier == Tier::high ? 1 : 0));
        put_f64(buf, s.quality_jitter);
        for (double v : s.image.data()) put_f64(buf, v);
    }

    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + file.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("write failed: " + file.string());
}

std::vector<ShapeSample> read_tier(const std::filesystem::path& file, TierFileInfo& info) {
    info = read_tier_header(file);
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + file.string());
    in.seekg(static_cast<std::streamoff>(info.data_offset));
    std::vector<unsigned char> rec(info.record_size);
    std::vector<ShapeSample> out;
    out.reserve(static_cast<std::size_t>(info.count));
    const GridShape shape{1, info.height, info.width};
    for (int i = 0; i < info.count; ++i) {
        in.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
        if (!in) throw std::runtime_error(file.string() + ": truncated at record " + std::to_string(i));
        ShapeSample s;
        s.class_id = rec[0];
        s.tier = rec[1] ? Tier::high : Tier::low;
        if (s.class_id >= kNumShapeClasses || s.tier != info.tier)
            throw std::runtime_error(file.string() + ": corrupt record " + std::to_string(i));
        s.quality_jitter = get_f64(rec.data() + 2);
        std::vector<double> px(shape.size());
        for (std::size_t k = 0; k < px.size(); ++k) px[k] = get_f64(rec.data() + 10 + 8 * k);
        s.image = ImageGrid(shape, std::move(px));
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

ImageGrid render_shape(int class_id, const Pose& pose, int resolution) {
    if (class_id < 0 || class_id >= kNumShapeClasses)
        throw std::invalid_argument("class_id out of range: " + std::to_string(class_id));
    if (resolution < 1) throw std::invalid_argument("render resolution must be positive");
    if (pose.size * resolution <= 1.0)
        throw std::invalid_argument("degenerate shape: size covers <= 1 pixel");
    const double half = 0.5 * pose.size, eps = 1e-12;
    if (pose.center_x - half < -eps || pose.center_x + half > 1 + eps || pose.center_y - half < -eps ||
        pose.center_y + half > 1 + eps)
        throw std::invalid_argument("pose extends outside the canvas");

    ImageGrid img(GridShape{1, resolution, resolution});
    const int ss = std::max(kMinSupersample, (kCanvasSamples + resolution - 1) / resolution);
    const double inv = 1.0 / (resolution * ss);
    for (int y = 0; y < resolution; ++y)
        for (int x = 0; x < resolution; ++x) {
            int hits = 0;
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const double px = (x * ss + sx + 0.5) * inv;
                    const double py = (y * ss + sy + 0.5) * inv;
                    hits += inside_shape(class_id, pose, px, py) ? 1 : 0;
                }
            img.at(0, y, x) = pose.intensity * hits / double(ss * ss);
        }
    return img;
}

void DatasetParams::validate() const {
    require(high_count >= 0 && low_count >= 0, "count", "must be non-negative");
    require(low_res >= 2 && high_res > low_res, "high_res", "tiers need 2 <= low_res < high_res");
    require(size_min > 0 && size_min <= size_max && size_max <= 1, "size_min", "need 0 < size_min <= size_max <= 1");
    require(size_min * low_res > 1, "size_min", "shapes must cover more than one low-tier pixel");
    require(intensity_min >= 0 && intensity_min <= intensity_max && intensity_max <= 1, "intensity_min",
            "need 0 <= intensity_min <= intensity_max <= 1");
    require(jitter_scale >= 0, "jitter_scale", "must be non-negative");
    require(noise_std_max >= 0 && intensity_jitter >= 0 && haze_max >= 0, "noise_std_max",
            "corruption magnitudes must be non-negative");
    require(blur_prob >= 0 && blur_prob <= 1, "blur_prob", "must lie in [0,1]");
}

Pose sample_pose(SeededRng& rng, const DatasetParams& p) {
    Pose pose;
    pose.size = rng.uniform(p.size_min, p.size_max);
    const double half = 0.5 * pose.size;
    pose.center_x = rng.uniform(half, 1.0 - half);
    pose.center_y = rng.uniform(half, 1.0 - half);
    pose.intensity = rng.uniform(p.intensity_min, p.intensity_max);
    return pose;
}

ShapeSample corrupt_low_tier(int class_id, const Pose& pose, const DatasetParams& p, SeededRng& rng) {
    const double q = p.jitter_scale;
    // Draw every random quantity unconditionally so the stream layout does not depend on q.
    const double gain = rng.uniform(-1.0, 1.0) * p.intensity_jitter * q;
    const bool blur = rng.uniform() < p.blur_prob;
    const double haze = rng.uniform() * p.haze_max * q;
    const double noise_std = rng.uniform() * p.noise_std_max * q;
    ImageGrid noise = gaussian_noise(GridShape{1, p.low_res, p.low_res}, rng);

    Pose jittered = pose;
    jittered.intensity = pose.intensity + gain;
    ImageGrid img = render_shape(class_id, jittered, p.low_res);
    if (blur && q > 0) img = binomial_blur(img);
    auto px = img.data();
    const auto nz = noise.data();
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::clamp(px[i] + haze + noise_std * nz[i], 0.0, 1.0);

    ShapeSample s;
    s.image = std::move(img);
    s.class_id = class_id;
    s.tier = Tier::low;
    s.quality_jitter = noise_std;
    return s;
}

Dataset gen_dataset(const DatasetParams& params) {
    params.validate();
    Dataset ds;
    ds.params = params;
    const std::uint64_t high_root = derive_seed(params.seed, "data/high");
    const std::uint64_t low_root = derive_seed(params.seed, "data/low");
    ds.high.reserve(static_cast<std::size_t>(params.high_count));
    for (int i = 0; i < params.high_count; ++i) {
        SeededRng rng(derive_seed(high_root, static_cast<std::uint64_t>(i)));
        const int cls = i % kNumShapeClasses;
        const Pose pose = sample_pose(rng, params);
        ds.high.push_back(ShapeSample{render_shape(cls, pose, params.high_res), cls, Tier::high, 0.0});
    }
    ds.low.reserve(static_cast<std::size_t>(params.low_count));
    for (int i = 0; i < params.low_count; ++i) {
        SeededRng rng(derive_seed(low_root, static_cast<std::uint64_t>(i)));
        const int cls = i % kNumShapeClasses;
        const Pose pose = sample_pose(rng, params);
        ds.low.push_back(corrupt_low_tier(cls, pose, params, rng));
    }
    return ds;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    std::filesystem::create_directories(dir);
    write_tier(dir / "high.rmdd", Tier::high, ds.high, ds.params);
    write_tier(dir / "low.rmdd", Tier::low, ds.low, ds.params);
}

TierFileInfo read_tier_header(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + file.string());
    std::string line;
    std::getline(in, line);
    if (line != "rmdlab-dataset 1") throw std::runtime_error(file.string() + ": not an rmdlab dataset (v1)");
    TierFileInfo info;
    bool ended = false;
    while (std::getline(in, line)) {
        if (line == "end_header") {
            ended = true;
            break;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error(file.string() + ": bad header line '" + line + "'");
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "tier") info.tier = val == "high" ? Tier::high : Tier::low;
        else if (key == "count") info.count = std::stoi(val);
        else if (key == "height") info.height = std::stoi(val);
        else if (key == "width") info.width = std::stoi(val);
        else if (key == "record_size") info.record_size = std::stoull(val);
        else if (key == "data_offset") info.data_offset = std::stoull(val);
        else if (key == "class_counts") {
            std::istringstream is(val);
            char comma;
            is >> info.class_counts[0] >> comma >> info.class_counts[1] >> comma >> info.class_counts[2];
        }
    }
    if (!ended) throw std::runtime_error(file.string() + ": header not terminated");
    if (static_cast<std::size_t>(in.tellg()) != info.data_offset)
        throw std::runtime_error(file.string() + ": data_offset does not match header length");
    if (info.record_size != 10 + 8 * static_cast<std::size_t>(info.height) * info.width)
        throw std::runtime_error(file.string() + ": record_size inconsistent with raster size");
    return info;
}

Dataset read_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    TierFileInfo hi, lo;
    ds.high = read_tier(dir / "high.rmdd", hi);
    ds.low = read_tier(dir / "low.rmdd", lo);
    ds.params.high_count = hi.count;
    ds.params.low_count = lo.count;
    ds.params.high_res = hi.height;
    ds.params.low_res = lo.height;
    return ds;
}

std::vector<ImageGrid> images_of(const std::vector<ShapeSample>& samples) {
    std::vector<ImageGrid> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.image);
    return out;
}

}  // namespace rmdlab
