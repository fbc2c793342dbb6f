// SPDX-License-Identifier: Apache-2.0
#include "rmdlab/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "rmdlab/schedule.hpp"

namespace rmdlab {

NetSpec NetConfig::spec(int num_classes) const { return make_denoiser_spec(channels, dilations, embed_dim, num_classes); }

namespace {

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view why) {
    throw std::invalid_argument("config key '" + std::string(key) + "': cannot use '" + std::string(value) +
                                "' (" + std::string(why) + ")");
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

template <class T>
T parse_number(std::string_view key, std::string_view v) {
    v = trim(v);
    T out{};
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) bad_value(key, v, "not a number");
    return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
    v = trim(v);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v, "expected true or false");
}

template <class T>
std::vector<T> parse_list(std::string_view key, std::string_view v) {
    std::vector<T> out;
    v = trim(v);
    if (v.empty()) return out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = v.find(',', start);
        out.push_back(parse_number<T>(key, v.substr(start, comma == std::string_view::npos ? v.npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

template <class T>
std::string fmt(T v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

template <class T>
std::string fmt_list(const std::vector<T>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
    return s;
}

struct Key {
    std::string name;
    std::function<void(RunConfig&, std::string_view)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define RMD_NUM(path, member, type)                                                                   \
    Key {                                                                                             \
        path, [](RunConfig& c, std::string_view v) { c.member = parse_number<type>(path, v); },       \
            [](const RunConfig& c) { return fmt(c.member); }                                          \
    }
#define RMD_LIST(path, member, type)                                                                  \
    Key {                                                                                             \
        path, [](RunConfig& c, std::string_view v) { c.member = parse_list<type>(path, v); },         \
            [](const RunConfig& c) { return fmt_list(c.member); }                                     \
    }
#define RMD_BOOL(path, member)                                                                        \
    Key {                                                                                             \
        path, [](RunConfig& c, std::string_view v) { c.member = parse_bool(path, v); },               \
            [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }               \
    }
#define RMD_STR(path, member)                                                                         \
    Key {                                                                                             \
        path, [](RunConfig& c, std::string_view v) { c.member = std::string(trim(v)); },              \
            [](const RunConfig& c) { return c.member; }                                               \
    }

const std::vector<Key>& keys() {
    static const std::vector<Key> k = {
        RMD_NUM("seed", seed, std::uint64_t),
        RMD_NUM("data.high_count", data.high_count, int),
        RMD_NUM("data.low_count", data.low_count, int),
        RMD_NUM("data.high_res", data.high_res, int),
        RMD_NUM("data.low_res", data.low_res, int),
        RMD_NUM("data.size_min", data.size_min, double),
        RMD_NUM("data.size_max", data.size_max, double),
        RMD_NUM("data.intensity_min", data.intensity_min, double),
        RMD_NUM("data.intensity_max", data.intensity_max, double),
        RMD_NUM("data.jitter_scale", data.jitter_scale, double),
        RMD_NUM("data.noise_std_max", data.noise_std_max, double),
        RMD_NUM("data.blur_prob", data.blur_prob, double),
        RMD_NUM("data.intensity_jitter", data.intensity_jitter, double),
        RMD_NUM("data.haze_max", data.haze_max, double),
        RMD_NUM("net.channels", net.channels, int),
        RMD_LIST("net.dilations", net.dilations, int),
        RMD_NUM("net.embed_dim", net.embed_dim, int),
        RMD_NUM("teacher.low_steps", teacher.low_steps, int),
        RMD_NUM("teacher.high_steps", teacher.high_steps, int),
        RMD_NUM("teacher.batch", teacher.batch, int),
        RMD_NUM("teacher.lr", teacher.optim.lr, double),
        RMD_NUM("teacher.beta1", teacher.optim.beta1, double),
        RMD_NUM("teacher.beta2", teacher.optim.beta2, double),
        RMD_NUM("teacher.weight_decay", teacher.optim.weight_decay, double),
        RMD_NUM("teacher.clip_norm", teacher.optim.clip_norm, double),
        RMD_NUM("teacher.validation_count", teacher.validation_count, int),
        RMD_NUM("teacher.ema_decay", teacher.ema_decay, double),
        RMD_LIST("schedule.thresholds", rmd.thresholds, double),
        RMD_LIST("schedule.resolutions", rmd.resolutions, int),
        RMD_NUM("schedule.flow_shift", rmd.flow_shift, double),
        RMD_NUM("schedule.t_max", rmd.t_max, double),
        RMD_NUM("schedule.steps", rmd.steps, int),
        RMD_NUM("rmd.alpha", rmd.alpha, double),
        RMD_NUM("rmd.alpha_inference", rmd.alpha_inference, double),
        RMD_LIST("rmd.lambda_r", rmd.lambda_r, double),
        RMD_LIST("rmd.stage_weights", rmd.stage_weights, double),
        RMD_NUM("rmd.snr_clamp_lo", rmd.snr_clamp_lo, double),
        RMD_NUM("rmd.snr_clamp_hi", rmd.snr_clamp_hi, double),
        RMD_NUM("rmd.warmup_steps", rmd.warmup_steps, int),
        RMD_NUM("rmd.train_steps", rmd.train_steps, int),
        RMD_NUM("rmd.batch", rmd.batch, int),
        RMD_NUM("rmd.lr_generator", rmd.lr_generator, double),
        RMD_NUM("rmd.lr_fake", rmd.lr_fake, double),
        RMD_NUM("rmd.beta1", rmd.beta1, double),
        RMD_NUM("rmd.beta2", rmd.beta2, double),
        RMD_NUM("rmd.weight_decay", rmd.weight_decay, double),
        RMD_NUM("rmd.clip_norm", rmd.clip_norm, double),
        RMD_NUM("rmd.huber_coeff", rmd.huber_coeff, double),
        RMD_BOOL("rmd.cross_resolution", rmd.cross_resolution),
        RMD_NUM("rmd.checkpoint_every", rmd.checkpoint_every, int),
        RMD_STR("rmd.run_name", run_name),
        RMD_NUM("eval.samples", eval.samples, int),
        RMD_NUM("eval.permutations", eval.permutations, int),
        RMD_NUM("eval.teacher_steps", eval.teacher_steps, int),
        RMD_STR("eval.rm_off_run", eval.rm_off_run),
        RMD_NUM("sample.count", sample_count, int),
        RMD_NUM("sample.class", sample_class, int),
    };
    return k;
}

#undef RMD_NUM
#undef RMD_LIST
#undef RMD_BOOL
#undef RMD_STR

}  // namespace

std::string RunConfig::serialize() const {
    std::string out = "preset = " + preset + "\n";
    for (const Key& k : keys()) out += k.name + " = " + k.get(*this) + "\n";
    return out;
}

std::uint64_t RunConfig::hash() const { return fnv1a64(serialize()); }

std::vector<std::string> config_keys() {
    std::vector<std::string> out{"preset"};
    for (const Key& k : keys()) out.push_back(k.name);
    return out;
}

std::vector<std::string> preset_names() { return {"toy-default", "sdxl-like", "sd35-like", "wan-like"}; }

RunConfig preset(std::string_view name) {
    RunConfig c;
    c.preset = std::string(name);
    if (name == "toy-default") {
        // 2+2 steps at 8 -> 16 px; the boundary sits between t=750 and t=500 as in the SDXL split.
        c.rmd.thresholds = {sigma_to_logsnr(Sigma{0.502}).value};
        c.rmd.resolutions = {8, 16};
        c.rmd.flow_shift = 1.0;
        c.rmd.steps = 4;
        return c;
    }
    if (name == "sdxl-like") {
        // Low-resolution interval t in [502, 1000].
        c.rmd.thresholds = {sigma_to_logsnr(Sigma{0.502}).value};
        c.rmd.resolutions = {512, 1024};
        c.rmd.flow_shift = 1.0;
        c.rmd.steps = 4;
        return c;
    }
    if (name == "sd35-like") {
        c.rmd.thresholds = {-2.5};
        c.rmd.resolutions = {512, 1024};
        c.rmd.flow_shift = 3.0;
        c.rmd.steps = 4;
        return c;
    }
    if (name == "wan-like") {
        // Boundary between t=909 and t=833 gives the 3+3 split (480p -> 720p by frame height).
        c.rmd.thresholds = {-3.9};
        c.rmd.resolutions = {480, 720};
        c.rmd.flow_shift = 5.0;
        c.rmd.steps = 6;
        c.rmd.alpha = 0.5;
        c.rmd.alpha_inference = 0.9;
        c.rmd.warmup_steps = 20;
        c.rmd.beta2 = 0.95;
        return c;
    }
    throw std::invalid_argument("unknown preset '" + std::string(name) + "'");
}

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
    key = trim(key);
    if (key == "preset") {
        cfg = preset(trim(value));
        return;
    }
    for (const Key& k : keys()) {
        if (k.name == key) {
            k.set(cfg, value);
            return;
        }
    }
    throw std::invalid_argument("unknown config key '" + std::string(key) + "'");
}

RunConfig parse_config(std::string_view text, RunConfig base) {
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    bool any = false;
    while (std::getline(in, line)) {
        ++lineno;
        std::string_view l = line;
        if (const auto hash = l.find('#'); hash != std::string_view::npos) l = l.substr(0, hash);
        l = trim(l);
        if (l.empty()) continue;
        const auto eq = l.find('=');
        if (eq == std::string_view::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected 'key = value'");
        const std::string_view key = trim(l.substr(0, eq));
        if (key == "preset" && any)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": 'preset' must precede all other keys");
        apply_setting(base, key, l.substr(eq + 1));
        any = true;
    }
    return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

void validate_config(const RunConfig& cfg) {
    cfg.data.validate();
    cfg.rmd.validate();
    auto require = [](bool ok, const char* key, const char* why) {
        if (!ok) throw std::invalid_argument(std::string(key) + ": " + why);
    };
    require(cfg.net.channels >= 1, "net.channels", "must be >= 1");
    require(!cfg.net.dilations.empty(), "net.dilations", "need at least one hidden layer");
    for (int d : cfg.net.dilations) require(d >= 1, "net.dilations", "dilations must be >= 1");
    require(cfg.net.embed_dim >= 2 && cfg.net.embed_dim % 2 == 0, "net.embed_dim", "must be even and >= 2");
    require(cfg.teacher.batch >= 1, "teacher.batch", "must be >= 1");
    require(cfg.teacher.low_steps >= 0 && cfg.teacher.high_steps >= 0, "teacher.low_steps", "must be >= 0");
    require(cfg.teacher.optim.lr > 0, "teacher.lr", "must be positive");
    require(cfg.teacher.ema_decay >= 0 && cfg.teacher.ema_decay < 1, "teacher.ema_decay", "must lie in [0, 1)");
    require(cfg.eval.samples >= 2, "eval.samples", "must be >= 2");
    require(cfg.eval.permutations >= 1, "eval.permutations", "must be >= 1");
    require(cfg.eval.teacher_steps >= 1, "eval.teacher_steps", "must be >= 1");
    require(!cfg.run_name.empty() && cfg.run_name.find('/') == std::string::npos, "rmd.run_name",
            "must be a plain directory name");
    require(cfg.sample_count >= 1, "sample.count", "must be >= 1");
    require(cfg.sample_class >= -1 && cfg.sample_class < kNumShapeClasses, "sample.class", "must be -1, 0, 1 or 2");
}

}  // namespace rmdlab
