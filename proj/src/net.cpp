// SPDX-License-Identifier: Apache-2.0
#include "rmdlab/net.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "activation.hpp"

namespace rmdlab {

namespace {

constexpr char kMagic[8] = {'R', 'M', 'D', 'L', 'N', 'E', 'T', '\0'};
constexpr std::uint32_t kFormatVersion = 1;

#if defined(__GLIBC__)
// Training churns through many ~50-100 KB activation buffers per step; with
// glibc's default trim threshold the heap top is returned to the kernel and
// re-faulted constantly (a third of wall time in sys).
const bool kAllocatorTuned = [] {
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
    mallopt(M_MMAP_THRESHOLD, 16 << 20);
    return true;
}();
#endif

// Zero-padded copy of `in` with `pad` pixels on every side.
std::vector<double> pad_planes(const ImageGrid& in, int pad) {
    const int h = in.height();
    const int w = in.width();
    const int ph = h + 2 * pad;
    const int pw = w + 2 * pad;
    std::vector<double> out(static_cast<std::size_t>(in.channels()) * ph * pw, 0.0);
    for (int c = 0; c < in.channels(); ++c) {
        const double* src = in.channel(c).data();
        double* dst = out.data() + static_cast<std::size_t>(c) * ph * pw;
        for (int y = 0; y < h; ++y) {
            std::memcpy(dst + static_cast<std::size_t>(y + pad) * pw + pad, src + static_cast<std::size_t>(y) * w,
                        sizeof(double) * static_cast<std::size_t>(w));
        }
    }
    return out;
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Fills `col` with the column matrix of shape (cin*9) x (h*w): row (ci, ky, kx) holds the input
// plane shifted by (ky-1, kx-1)*dil with zero padding.
void im2col(const ImageGrid& in, int dil, RowMatrix& col) {
    const int cin = in.channels();
    const int h = in.height();
    const int w = in.width();
    const int pw = w + 2 * dil;
    const std::size_t plane = static_cast<std::size_t>(h + 2 * dil) * pw;
    const std::vector<double> padded = pad_planes(in, dil);
    col.resize(cin * 9, h * w);
    for (int ci = 0; ci < cin; ++ci) {
        const double* p = padded.data() + static_cast<std::size_t>(ci) * plane;
        for (int k = 0; k < 9; ++k) {
            const int ky = k / 3;
            const int kx = k % 3;
            double* dst = col.row(ci * 9 + k).data();
            for (int y = 0; y < h; ++y) {
                std::memcpy(dst + static_cast<std::size_t>(y) * w,
                            p + static_cast<std::size_t>(y + ky * dil) * pw + kx * dil,
                            sizeof(double) * static_cast<std::size_t>(w));
            }
        }
    }
}

// Scatter-add transpose of im2col.
ImageGrid col2im(const RowMatrix& col, GridShape shape, int dil) {
    const int h = shape.height;
    const int w = shape.width;
    const int pw = w + 2 * dil;
    const std::size_t plane = static_cast<std::size_t>(h + 2 * dil) * pw;
    std::vector<double> dpad(static_cast<std::size_t>(shape.channels) * plane, 0.0);
    for (int ci = 0; ci < shape.channels; ++ci) {
        double* p = dpad.data() + static_cast<std::size_t>(ci) * plane;
        for (int k = 0; k < 9; ++k) {
            const int ky = k / 3;
            const int kx = k % 3;
            const double* src = col.row(ci * 9 + k).data();
            for (int y = 0; y < h; ++y) {
                double* __restrict d = p + static_cast<std::size_t>(y + ky * dil) * pw + kx * dil;
                const double* __restrict s = src + static_cast<std::size_t>(y) * w;
                for (int x = 0; x < w; ++x) d[x] += s[x];
            }
        }
    }
    ImageGrid din(shape);
    for (int c = 0; c < shape.channels; ++c) {
        double* dst = din.channel(c).data();
        const double* src = dpad.data() + static_cast<std::size_t>(c) * plane;
        for (int y = 0; y < h; ++y) {
            std::memcpy(dst + static_cast<std::size_t>(y) * w, src + static_cast<std::size_t>(y + dil) * pw + dil,
                        sizeof(double) * static_cast<std::size_t>(w));
        }
    }
    return din;
}

// Eigen-owned (aligned) copy of a raw row-major block. GEMM and reduction
// kernels peel differently depending on pointer alignment, which would make
// results depend on where the allocator placed our vectors.
void load_aligned(const double* src, int rows, int cols, RowMatrix& dst) {
    dst.resize(rows, cols);
    std::memcpy(dst.data(), src, sizeof(double) * static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols));
}

void conv3x3_forward(const ImageGrid& in, const double* weights, const double* bias, int out_channels, int dil,
                     ImageGrid& out) {
    const int cin = in.channels();
    const int hw = in.height() * in.width();
    thread_local RowMatrix col, wmat, res;
    im2col(in, dil, col);
    load_aligned(weights, out_channels, cin * 9, wmat);
    res.resize(out_channels, hw);
    res.noalias() = wmat * col;
    out = ImageGrid({out_channels, in.height(), in.width()});
    double* o = out.data().data();
    for (int co = 0; co < out_channels; ++co) {
        const double* r = res.row(co).data();
        double* dst = o + static_cast<std::size_t>(co) * hw;
        for (int i = 0; i < hw; ++i) dst[i] = r[i] + bias[co];
    }
}

// Accumulates weight/bias gradients and returns the input gradient.
ImageGrid conv3x3_backward(const ImageGrid& in, const double* weights, int out_channels, int dil,
                           const ImageGrid& dout, double* dweights, double* dbias) {
    const int cin = in.channels();
    const int hw = in.height() * in.width();
    thread_local RowMatrix col, dcol, g, wmat, dw;
    im2col(in, dil, col);
    load_aligned(dout.data().data(), out_channels, hw, g);
    load_aligned(weights, out_channels, cin * 9, wmat);
    dw.resize(out_channels, cin * 9);
    dw.noalias() = g * col.transpose();
    const double* dwp = dw.data();
    for (std::size_t i = 0, n = static_cast<std::size_t>(out_channels) * cin * 9; i < n; ++i) dweights[i] += dwp[i];
    for (int co = 0; co < out_channels; ++co) {
        const double* r = g.row(co).data();
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += r[i];
        dbias[co] += acc;
    }
    dcol.resize(cin * 9, hw);
    dcol.noalias() = wmat.transpose() * g;
    return col2im(dcol, in.shape(), dil);
}

void write_u32(std::ostream& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void write_u64(std::ostream& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

NetSpec make_denoiser_spec(int channels, std::span<const int> dilations, int embed_dim, int num_classes) {
    if (channels <= 0 || dilations.empty()) {
        throw std::invalid_argument("make_denoiser_spec: need positive channels and at least one hidden layer");
    }
    NetSpec spec;
    spec.embed_dim = embed_dim;
    spec.num_classes = num_classes;
    int in = 1;
    for (int d : dilations) {
        spec.layers.push_back({in, channels, d, true});
        in = channels;
    }
    spec.layers.push_back({in, 1, 1, false});
    return spec;
}

std::vector<double> sigma_features(double sigma, int dim) {
    std::vector<double> f(static_cast<std::size_t>(dim), 0.0);
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double frac = half > 1 ? static_cast<double>(k) / (half - 1) : 0.0;
        const double freq = std::numbers::pi * std::pow(32.0, frac);
        f[static_cast<std::size_t>(2 * k)] = std::sin(freq * sigma);
        f[static_cast<std::size_t>(2 * k + 1)] = std::cos(freq * sigma);
    }
    return f;
}

DenoiserNet::DenoiserNet(NetSpec spec) : spec_(std::move(spec)) {
    if (spec_.layers.empty()) {
        throw std::invalid_argument("DenoiserNet: at least one layer is required");
    }
    if (spec_.embed_dim <= 0 || spec_.embed_dim % 2 != 0) {
        throw std::invalid_argument("DenoiserNet: embed_dim must be a positive even number");
    }
    if (spec_.num_classes < 0) {
        throw std::invalid_argument("DenoiserNet: num_classes must be non-negative");
    }
    std::size_t n = 0;
    int prev_out = spec_.layers.front().in_channels;
    for (const LayerSpec& l : spec_.layers) {
        if (l.in_channels <= 0 || l.out_channels <= 0 || l.dilation <= 0) {
            throw std::invalid_argument("DenoiserNet: layer dimensions must be positive");
        }
        if (l.in_channels != prev_out) {
            throw std::invalid_argument("DenoiserNet: layer channel counts do not chain");
        }
        prev_out = l.out_channels;
        LayerOffsets off{};
        off.weights = n;
        n += static_cast<std::size_t>(l.out_channels) * l.in_channels * 9;
        off.bias = n;
        n += static_cast<std::size_t>(l.out_channels);
        off.modulation = n;
        if (l.nonlinear) {
            n += static_cast<std::size_t>(2 * l.out_channels) * spec_.embed_dim;
        }
        offsets_.push_back(off);
    }
    class_offset_ = n;
    n += static_cast<std::size_t>(spec_.num_classes) * spec_.embed_dim;
    params_.assign(n, 0.0);
}

void DenoiserNet::init_random(SeededRng& rng) {
    const std::size_t last = spec_.layers.size() - 1;
    for (std::size_t li = 0; li < spec_.layers.size(); ++li) {
        const LayerSpec& l = spec_.layers[li];
        const LayerOffsets& off = offsets_[li];
        const double fan_in = 9.0 * l.in_channels;
        const double std_w = li == last ? 0.1 / std::sqrt(fan_in) : std::sqrt(2.0 / fan_in);
        const std::size_t nw = static_cast<std::size_t>(l.out_channels) * l.in_channels * 9;
        for (std::size_t i = 0; i < nw; ++i) params_[off.weights + i] = std_w * rng.normal();
        for (int i = 0; i < l.out_channels; ++i) params_[off.bias + static_cast<std::size_t>(i)] = 0.0;
        if (l.nonlinear) {
            const std::size_t nm = static_cast<std::size_t>(2 * l.out_channels) * spec_.embed_dim;
            const double std_m = 0.1 / std::sqrt(static_cast<double>(spec_.embed_dim));
            for (std::size_t i = 0; i < nm; ++i) params_[off.modulation + i] = std_m * rng.normal();
        }
    }
    const std::size_t nc = static_cast<std::size_t>(spec_.num_classes) * spec_.embed_dim;
    for (std::size_t i = 0; i < nc; ++i) params_[class_offset_ + i] = 0.5 * rng.normal();
}

std::vector<double> DenoiserNet::embed(double sigma, std::optional<int> class_id) const {
    std::vector<double> e = sigma_features(sigma, spec_.embed_dim);
    if (class_id) {
        if (*class_id < 0 || *class_id >= spec_.num_classes) {
            throw std::out_of_range("DenoiserNet: class id " + std::to_string(*class_id) + " out of range");
        }
        const double* row = params_.data() + class_offset_ + static_cast<std::size_t>(*class_id) * spec_.embed_dim;
        for (int i = 0; i < spec_.embed_dim; ++i) e[static_cast<std::size_t>(i)] += row[i];
    }
    return e;
}

ImageGrid DenoiserNet::forward(const ImageGrid& x, double sigma, std::optional<int> class_id,
                               ForwardTape* tape) const {
    if (x.channels() != spec_.layers.front().in_channels) {
        throw std::invalid_argument("DenoiserNet::forward: input channel count mismatch");
    }
    if (!(sigma >= 0.0 && sigma <= 1.0)) {
        throw std::domain_error("DenoiserNet::forward: sigma must lie in [0, 1]");
    }
    const std::vector<double> emb = embed(sigma, class_id);
    const int edim = spec_.embed_dim;
    if (tape) {
        *tape = ForwardTape{};
        tape->input_shape = x.shape();
        tape->class_id = class_id.value_or(-1);
        tape->embedding = emb;
    }
    ImageGrid h = x;
    for (std::size_t li = 0; li < spec_.layers.size(); ++li) {
        const LayerSpec& l = spec_.layers[li];
        const LayerOffsets& off = offsets_[li];
        ImageGrid z;
        conv3x3_forward(h, params_.data() + off.weights, params_.data() + off.bias, l.out_channels, l.dilation, z);
        if (tape) tape->inputs.push_back(std::move(h));
        if (!l.nonlinear) {
            h = std::move(z);
            continue;
        }
        const double* m = params_.data() + off.modulation;
        std::vector<double> scale(static_cast<std::size_t>(l.out_channels));
        ImageGrid u(z.shape());
        for (int c = 0; c < l.out_channels; ++c) {
            double gamma = 0.0;
            double beta = 0.0;
            const double* mg = m + static_cast<std::size_t>(c) * edim;
            const double* mb = m + static_cast<std::size_t>(l.out_channels + c) * edim;
            for (int e = 0; e < edim; ++e) {
                gamma += mg[e] * emb[static_cast<std::size_t>(e)];
                beta += mb[e] * emb[static_cast<std::size_t>(e)];
            }
            scale[static_cast<std::size_t>(c)] = 1.0 + gamma;
            auto zs = z.channel(c);
            auto us = u.channel(c);
            for (std::size_t i = 0; i < zs.size(); ++i) us[i] = zs[i] * (1.0 + gamma) + beta;
        }
        ImageGrid act(u.shape());
        ImageGrid sig(u.shape());
        detail::silu_forward(u.data().data(), sig.data().data(), act.data().data(), u.size());
        if (tape) {
            tape->pre.push_back(std::move(z));
            tape->act_in.push_back(std::move(u));
            tape->gate.push_back(std::move(sig));
            tape->scale.push_back(std::move(scale));
        }
        h = std::move(act);
    }
    return h;
}

ImageGrid DenoiserNet::backward(const ForwardTape& tape, const ImageGrid& upstream,
                                std::span<double> param_grad) const {
    if (param_grad.size() != params_.size()) {
        throw std::invalid_argument("DenoiserNet::backward: gradient buffer has the wrong length");
    }
    if (tape.inputs.size() != spec_.layers.size()) {
        throw std::invalid_argument("DenoiserNet::backward: tape does not belong to this network");
    }
    if (upstream.height() != tape.input_shape.height || upstream.width() != tape.input_shape.width ||
        upstream.channels() != spec_.layers.back().out_channels) {
        throw std::invalid_argument("DenoiserNet::backward: upstream shape mismatch");
    }
    const int edim = spec_.embed_dim;
    std::vector<double> demb(static_cast<std::size_t>(edim), 0.0);
    ImageGrid g = upstream;
    std::size_t nl_index = tape.pre.size();
    for (std::size_t li = spec_.layers.size(); li-- > 0;) {
        const LayerSpec& l = spec_.layers[li];
        const LayerOffsets& off = offsets_[li];
        if (l.nonlinear) {
            --nl_index;
            const ImageGrid& z = tape.pre[nl_index];
            const ImageGrid& u = tape.act_in[nl_index];
            const ImageGrid& gate = tape.gate[nl_index];
            const std::vector<double>& scale = tape.scale[nl_index];
            const double* m = params_.data() + off.modulation;
            double* dm = param_grad.data() + off.modulation;
            for (int c = 0; c < l.out_channels; ++c) {
                auto gs = g.channel(c);
                auto zs = z.channel(c);
                auto us = u.channel(c);
                auto ss = gate.channel(c);
                double dgamma = 0.0;
                double dbeta = 0.0;
                const double sc = scale[static_cast<std::size_t>(c)];
                for (std::size_t i = 0; i < gs.size(); ++i) {
                    const double s = ss[i];
                    const double du = gs[i] * (s + us[i] * s * (1.0 - s));
                    dgamma += du * zs[i];
                    dbeta += du;
                    gs[i] = du * sc;  // now dz
                }
                double* dmg = dm + static_cast<std::size_t>(c) * edim;
                double* dmb = dm + static_cast<std::size_t>(l.out_channels + c) * edim;
                const double* mg = m + static_cast<std::size_t>(c) * edim;
                const double* mb = m + static_cast<std::size_t>(l.out_channels + c) * edim;
                for (int e = 0; e < edim; ++e) {
                    const double ev = tape.embedding[static_cast<std::size_t>(e)];
                    dmg[e] += dgamma * ev;
                    dmb[e] += dbeta * ev;
                    demb[static_cast<std::size_t>(e)] += dgamma * mg[e] + dbeta * mb[e];
                }
            }
        }
        g = conv3x3_backward(tape.inputs[li], params_.data() + off.weights, l.out_channels, l.dilation, g,
                             param_grad.data() + off.weights, param_grad.data() + off.bias);
    }
    if (tape.class_id >= 0) {
        double* dc = param_grad.data() + class_offset_ + static_cast<std::size_t>(tape.class_id) * edim;
        for (int e = 0; e < edim; ++e) dc[e] += demb[static_cast<std::size_t>(e)];
    }
    return g;
}

DenoiserNet::Gradients DenoiserNet::backward(const ImageGrid& x, double sigma, std::optional<int> class_id,
                                             const ImageGrid& upstream) const {
    ForwardTape tape;
    const ImageGrid out = forward(x, sigma, class_id, &tape);
    require_same_shape(out, upstream, "DenoiserNet::backward");
    Gradients g{GradientVector(params_.size(), 0.0), ImageGrid{}};
    g.input = backward(tape, upstream, g.params);
    return g;
}

void DenoiserNet::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("DenoiserNet::save: cannot open " + path.string());
    }
    out.write(kMagic, sizeof(kMagic));
    write_u32(out, kFormatVersion);
    write_u32(out, static_cast<std::uint32_t>(spec_.layers.size()));
    for (const LayerSpec& l : spec_.layers) {
        write_u32(out, static_cast<std::uint32_t>(l.in_channels));
        write_u32(out, static_cast<std::uint32_t>(l.out_channels));
        write_u32(out, static_cast<std::uint32_t>(l.dilation));
        write_u32(out, l.nonlinear ? 1u : 0u);
    }
    write_u32(out, static_cast<std::uint32_t>(spec_.embed_dim));
    write_u32(out, static_cast<std::uint32_t>(spec_.num_classes));
    write_u64(out, params_.size());
    for (double v : params_) write_u64(out, std::bit_cast<std::uint64_t>(v));
    if (!out) {
        throw std::runtime_error("DenoiserNet::save: write failed for " + path.string());
    }
}

DenoiserNet DenoiserNet::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("DenoiserNet::load: cannot open " + path.string());
    }
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("DenoiserNet::load: bad magic in " + path.string());
    }
    const std::uint32_t version = read_u32(in);
    if (version != kFormatVersion) {
        throw std::runtime_error("DenoiserNet::load: unsupported format version " + std::to_string(version));
    }
    NetSpec spec;
    const std::uint32_t nlayers = read_u32(in);
    if (nlayers == 0 || nlayers > 1024) {
        throw std::runtime_error("DenoiserNet::load: implausible layer count");
    }
    for (std::uint32_t i = 0; i < nlayers; ++i) {
        LayerSpec l;
        l.in_channels = static_cast<int>(read_u32(in));
        l.out_channels = static_cast<int>(read_u32(in));
        l.dilation = static_cast<int>(read_u32(in));
        l.nonlinear = read_u32(in) != 0;
        spec.layers.push_back(l);
    }
    spec.embed_dim = static_cast<int>(read_u32(in));
    spec.num_classes = static_cast<int>(read_u32(in));
    DenoiserNet net(spec);
    const std::uint64_t count = read_u64(in);
    if (count != net.param_count()) {
        throw std::runtime_error("DenoiserNet::load: parameter count does not match layer specs");
    }
    for (double& v : net.params_) v = std::bit_cast<double>(read_u64(in));
    return net;
}

double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

AdamW::AdamW(std::size_t n, AdamWConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

StepReport AdamW::step(std::span<double> params, std::span<const double> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
        throw std::invalid_argument("AdamW::step: vector length mismatch");
    }
    StepReport rep;
    rep.grad_norm = l2_norm(grads);
    if (!std::isfinite(rep.grad_norm)) {
        rep.skipped = true;
        return rep;
    }
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0 && rep.grad_norm > cfg_.clip_norm) {
        scale = cfg_.clip_norm / rep.grad_norm;
        rep.clipped = true;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i] * scale;
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m_[i] / bc1;
        const double vhat = v_[i] / bc2;
        params[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * params[i]);
    }
    return rep;
}

namespace {

double relative_error(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
    return std::abs(a - b) / denom;
}

std::vector<double> unit_direction(std::size_t n, SeededRng& rng) {
    std::vector<double> u(n);
    for (double& v : u) v = rng.normal();
    const double norm = l2_norm(u);
    for (double& v : u) v /= norm;
    return u;
}

}  // namespace

GradientCheckReport gradient_check_with(const DenoiserNet& net, const ImageGrid& x, double sigma,
                                        std::optional<int> class_id, const ImageGrid& weights,
                                        std::span<const double> param_grad, double tolerance, std::uint64_t seed,
                                        int probes, double h) {
    SeededRng rng(seed);
    GradientCheckReport rep;
    DenoiserNet probe = net;
    auto base = net.params();
    for (int k = 0; k < probes; ++k) {
        const std::vector<double> u = unit_direction(net.param_count(), rng);
        double analytic = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) analytic += param_grad[i] * u[i];
        auto p = probe.params();
        for (std::size_t i = 0; i < u.size(); ++i) p[i] = base[i] + h * u[i];
        const double fp = dot(probe.forward(x, sigma, class_id), weights);
        for (std::size_t i = 0; i < u.size(); ++i) p[i] = base[i] - h * u[i];
        const double fm = dot(probe.forward(x, sigma, class_id), weights);
        rep.max_relative_error = std::max(rep.max_relative_error, relative_error(analytic, (fp - fm) / (2.0 * h)));
        ++rep.probes;
    }
    rep.passed = rep.max_relative_error < tolerance;
    return rep;
}

GradientCheckReport gradient_check(const DenoiserNet& net, double tolerance, std::uint64_t seed, int probes,
                                   double h, GridShape shape) {
    SeededRng rng(seed);
    const ImageGrid x = gaussian_noise(shape, rng);
    const ImageGrid w = gaussian_noise({net.spec().layers.back().out_channels, shape.height, shape.width}, rng);
    const double sigma = rng.uniform(0.1, 0.9);
    std::optional<int> cls;
    if (net.spec().num_classes > 0) cls = rng.uniform_int(net.spec().num_classes);

    const auto grads = net.backward(x, sigma, cls, w);
    GradientCheckReport rep =
        gradient_check_with(net, x, sigma, cls, w, grads.params, tolerance, derive_seed(seed, "params"), probes, h);

    // Input-direction probes.
    for (int k = 0; k < probes; ++k) {
        const std::vector<double> u = unit_direction(x.size(), rng);
        ImageGrid du(x.shape(), u);
        const double analytic = dot(grads.input, du);
        const double fp = dot(net.forward(lincomb(1.0, x, h, du), sigma, cls), w);
        const double fm = dot(net.forward(lincomb(1.0, x, -h, du), sigma, cls), w);
        rep.max_relative_error = std::max(rep.max_relative_error, relative_error(analytic, (fp - fm) / (2.0 * h)));
        ++rep.probes;
    }
    rep.passed = rep.max_relative_error < tolerance;
    return rep;
}

}  // namespace rmdlab
