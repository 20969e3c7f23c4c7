#include "hitsr/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

#include "hitsr/ops.hpp"

namespace hitsr {

namespace {

// Seeded init with hand-rolled distributions so the draw sequence does not
// depend on the standard library implementation.
class InitRng {
public:
    explicit InitRng(std::uint64_t seed) : gen_(seed) {}

    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double trunc_normal(double sigma) {
        for (;;) {
            const double u1 = uniform();
            const double u2 = uniform();
            if (u1 <= 0.0) continue;
            const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
            if (std::abs(z) <= 2.0) return z * sigma;
        }
    }

    Tensor normal_tensor(Shape shape, double sigma) {
        std::vector<double> v(static_cast<size_t>(shape_size(shape)));
        for (double& x : v) x = trunc_normal(sigma);
        return Tensor::from(std::move(shape), std::move(v), true);
    }

private:
    std::mt19937_64 gen_;
};

constexpr double kInitSigma = 0.02;

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor ones_param(Shape shape) { return Tensor::full(std::move(shape), 1.0, true); }

Tensor s_linear_init(int down_hw, int win_hw) {
    std::vector<double> v(static_cast<size_t>(down_hw) * win_hw, 0.0);
    if (down_hw == win_hw) {
        for (int i = 0; i < win_hw; ++i) v[static_cast<size_t>(i) * win_hw + i] = 1.0;
    } else {
        const double avg = 1.0 / win_hw;
        for (double& x : v) x = avg;
    }
    return Tensor::from({down_hw, win_hw}, std::move(v), true);
}

SccLayerParams build_layer(const ModelConfig& cfg, int win_h, int win_w, double ratio, InitRng& rng) {
    const int C = cfg.channels;
    const int Cr = C / cfg.dfe_reduction;
    SccLayerParams p;
    p.win_h = win_h;
    p.win_w = win_w;
    if (ratio <= 1.0) {
        p.down_h = win_h;
        p.down_w = win_w;
    } else {
        p.down_h = cfg.base_window_h;
        p.down_w = cfg.base_window_w;
    }
    p.heads_s = cfg.heads_s;
    p.per_head_denominator = cfg.per_head_denominator;

    p.ln1_g = ones_param({C});
    p.ln1_b = zeros_param({C});
    p.dfe.reduction = cfg.dfe_reduction;
    p.dfe.linear_w = rng.normal_tensor({C, C}, kInitSigma);
    p.dfe.linear_b = zeros_param({C});
    p.dfe.conv1_w = rng.normal_tensor({Cr, C, 3, 3}, kInitSigma);
    p.dfe.conv1_b = zeros_param({Cr});
    p.dfe.conv2_w = rng.normal_tensor({Cr, Cr, 3, 3}, kInitSigma);
    p.dfe.conv2_b = zeros_param({Cr});
    p.dfe.conv3_w = rng.normal_tensor({C, Cr, 3, 3}, kInitSigma);
    p.dfe.conv3_b = zeros_param({C});

    p.s_linear_w = s_linear_init(p.down_h * p.down_w, win_h * win_w);

    p.bias_mlp.w1 = rng.normal_tensor({2, cfg.bias_hidden}, kInitSigma);
    p.bias_mlp.b1 = zeros_param({cfg.bias_hidden});
    p.bias_mlp.w2 = rng.normal_tensor({cfg.bias_hidden, cfg.heads_s}, kInitSigma);
    p.bias_mlp.b2 = zeros_param({cfg.heads_s});

    p.proj_w = rng.normal_tensor({C / 2, C}, kInitSigma);
    p.proj_b = zeros_param({C});

    p.ln2_g = ones_param({C});
    p.ln2_b = zeros_param({C});
    p.ffn_w1 = rng.normal_tensor({C, cfg.ffn_ratio * C}, kInitSigma);
    p.ffn_b1 = zeros_param({cfg.ffn_ratio * C});
    p.ffn_w2 = rng.normal_tensor({cfg.ffn_ratio * C, C}, kInitSigma);
    p.ffn_b2 = zeros_param({C});
    return p;
}

template <typename Fn>
void visit_layer(const SccLayerParams& p, const std::string& prefix, Fn&& fn) {
    fn(prefix + ".ln1.gamma", p.ln1_g);
    fn(prefix + ".ln1.beta", p.ln1_b);
    fn(prefix + ".dfe.linear.weight", p.dfe.linear_w);
    fn(prefix + ".dfe.linear.bias", p.dfe.linear_b);
    fn(prefix + ".dfe.conv1.weight", p.dfe.conv1_w);
    fn(prefix + ".dfe.conv1.bias", p.dfe.conv1_b);
    fn(prefix + ".dfe.conv2.weight", p.dfe.conv2_w);
    fn(prefix + ".dfe.conv2.bias", p.dfe.conv2_b);
    fn(prefix + ".dfe.conv3.weight", p.dfe.conv3_w);
    fn(prefix + ".dfe.conv3.bias", p.dfe.conv3_b);
    fn(prefix + ".s_linear.weight", p.s_linear_w);
    fn(prefix + ".bias_mlp.w1", p.bias_mlp.w1);
    fn(prefix + ".bias_mlp.b1", p.bias_mlp.b1);
    fn(prefix + ".bias_mlp.w2", p.bias_mlp.w2);
    fn(prefix + ".bias_mlp.b2", p.bias_mlp.b2);
    fn(prefix + ".proj.weight", p.proj_w);
    fn(prefix + ".proj.bias", p.proj_b);
    fn(prefix + ".ln2.gamma", p.ln2_g);
    fn(prefix + ".ln2.beta", p.ln2_b);
    fn(prefix + ".ffn.w1", p.ffn_w1);
    fn(prefix + ".ffn.b1", p.ffn_b1);
    fn(prefix + ".ffn.w2", p.ffn_w2);
    fn(prefix + ".ffn.b2", p.ffn_b2);
}

template <typename Fn>
void visit_network(const HitNetwork& net, Fn&& fn) {
    fn("shallow.weight", net.shallow_w);
    fn("shallow.bias", net.shallow_b);
    for (size_t b = 0; b < net.blocks.size(); ++b) {
        const std::string bp = "blocks." + std::to_string(b);
        for (size_t l = 0; l < net.blocks[b].layers.size(); ++l) {
            visit_layer(net.blocks[b].layers[l], bp + ".layers." + std::to_string(l), fn);
        }
        fn(bp + ".conv.weight", net.blocks[b].conv_w);
        fn(bp + ".conv.bias", net.blocks[b].conv_b);
    }
    fn("recon.weight", net.recon_w);
    fn("recon.bias", net.recon_b);
}

} // namespace

void ModelConfig::validate() const {
    if (channels < 2 || channels % 2 != 0) {
        throw ConfigError("channels must be even and >= 2, got " + std::to_string(channels));
    }
    if (blocks < 1) throw ConfigError("need at least one block");
    if (layers_per_block < 1 || static_cast<size_t>(layers_per_block) != ratios.size()) {
        throw ConfigError("layers_per_block (" + std::to_string(layers_per_block) +
                          ") must equal the number of window ratios (" + std::to_string(ratios.size()) + ")");
    }
    if (heads_s < 1 || (channels / 2) % heads_s != 0) {
        throw ConfigError("heads (" + std::to_string(heads_s) + ") must divide half the channels (" +
                          std::to_string(channels / 2) + ")");
    }
    if (upscale < 2 || upscale > 4) throw ConfigError("upscale must be 2, 3 or 4");
    if (dfe_reduction < 1 || channels % dfe_reduction != 0) {
        throw ConfigError("dfe reduction ratio must divide the channel count");
    }
    if (ffn_ratio < 1) throw ConfigError("ffn_ratio must be >= 1");
    if (bias_hidden < 1) throw ConfigError("bias_hidden must be >= 1");
    if (base_window_h < 1 || base_window_w < 1) throw ConfigError("base window must be positive");
}

HitNetwork build(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    HitNetwork net;
    net.config = cfg;
    net.schedule = WindowSchedule::from_ratios(cfg.base_window_h, cfg.base_window_w, cfg.ratios);

    InitRng rng(seed);
    const int C = cfg.channels;
    net.shallow_w = rng.normal_tensor({C, 3, 3, 3}, kInitSigma);
    net.shallow_b = zeros_param({C});

    net.blocks.resize(static_cast<size_t>(cfg.blocks));
    for (int b = 0; b < cfg.blocks; ++b) {
        auto& block = net.blocks[static_cast<size_t>(b)];
        block.layers.reserve(static_cast<size_t>(cfg.layers_per_block));
        for (int l = 0; l < cfg.layers_per_block; ++l) {
            const auto& [wh, ww] = net.schedule.layer_windows[static_cast<size_t>(l)];
            block.layers.push_back(build_layer(cfg, wh, ww, cfg.ratios[static_cast<size_t>(l)], rng));
        }
        block.conv_w = rng.normal_tensor({C, C, 3, 3}, kInitSigma);
        block.conv_b = zeros_param({C});
    }

    net.recon_w = rng.normal_tensor({3 * cfg.upscale * cfg.upscale, C, 3, 3}, kInitSigma);
    net.recon_b = zeros_param({3 * cfg.upscale * cfg.upscale});
    return net;
}

std::vector<std::pair<std::string, Tensor>> HitNetwork::parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    visit_network(*this, [&out](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
    return out;
}

std::int64_t HitNetwork::param_count() const {
    std::int64_t n = 0;
    visit_network(*this, [&n](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
}

void HitNetwork::zero_grad() const {
    visit_network(*this, [](const std::string&, const Tensor& t) { Tensor(t).zero_grad(); });
}

Tensor forward(const HitNetwork& net, const Tensor& img) {
    if (img.rank() != 3 || img.dim(0) != 3) {
        throw ShapeError("forward: expected [3,H,W] input, got " + shape_str(img.shape()));
    }
    const int H = img.dim(1), W = img.dim(2);
    auto [padded, pad] = pad_to_multiple(img, net.schedule.max_h(), net.schedule.max_w());
    const int Hp = pad.padded_h, Wp = pad.padded_w;

    Tensor shallow = conv2d(padded, net.shallow_w, net.shallow_b); // [C,Hp,Wp]
    Tensor shallow_tokens = tokens_from_planar(shallow);

    Tensor x = shallow_tokens;
    for (const auto& block : net.blocks) {
        Tensor bx = x;
        for (const auto& layer : block.layers) bx = layer_forward(bx, layer, Hp, Wp);
        Tensor conv = conv2d(planar_from_tokens(bx, Hp, Wp), block.conv_w, block.conv_b);
        x = add(x, tokens_from_planar(conv)); // block residual
    }

    Tensor fused = add(shallow_tokens, x); // global residual into reconstruction
    Tensor recon = conv2d(planar_from_tokens(fused, Hp, Wp), net.recon_w, net.recon_b);
    Tensor up = pixel_shuffle(recon, net.config.upscale);
    return crop2d(up, net.config.upscale * H, net.config.upscale * W);
}

namespace {

constexpr char kCheckpointMagic[8] = {'H', 'I', 'T', 'S', 'R', 'C', 'P', '1'};

void put_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void put_f64_le(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64_le(os, bits);
}

double get_f64_le(std::istream& is) {
    const std::uint64_t bits = get_u64_le(is);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"channels", cfg.channels},
                          {"blocks", cfg.blocks},
                          {"layers_per_block", cfg.layers_per_block},
                          {"heads_s", cfg.heads_s},
                          {"base_window_h", cfg.base_window_h},
                          {"base_window_w", cfg.base_window_w},
                          {"ratios", cfg.ratios},
                          {"upscale", cfg.upscale},
                          {"dfe_reduction", cfg.dfe_reduction},
                          {"ffn_ratio", cfg.ffn_ratio},
                          {"bias_hidden", cfg.bias_hidden},
                          {"per_head_denominator", cfg.per_head_denominator}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.channels = j.at("channels").get<int>();
    cfg.blocks = j.at("blocks").get<int>();
    cfg.layers_per_block = j.at("layers_per_block").get<int>();
    cfg.heads_s = j.at("heads_s").get<int>();
    cfg.base_window_h = j.at("base_window_h").get<int>();
    cfg.base_window_w = j.at("base_window_w").get<int>();
    cfg.ratios = j.at("ratios").get<std::vector<double>>();
    cfg.upscale = j.at("upscale").get<int>();
    cfg.dfe_reduction = j.at("dfe_reduction").get<int>();
    cfg.ffn_ratio = j.at("ffn_ratio").get<int>();
    cfg.bias_hidden = j.at("bias_hidden").get<int>();
    cfg.per_head_denominator = j.at("per_head_denominator").get<bool>();
    return cfg;
}

} // namespace

void save_checkpoint(const HitNetwork& net, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);

    nlohmann::json header;
    header["format_version"] = 1;
    header["endianness"] = "little";
    header["dtype"] = "f64";
    header["config"] = config_to_json(net.config);
    nlohmann::json params = nlohmann::json::array();
    for (const auto& [name, t] : net.parameters()) {
        params.push_back({{"name", name}, {"shape", t.shape()}});
    }
    header["params"] = params;
    const std::string header_str = header.dump();

    os.write(kCheckpointMagic, 8);
    put_u64_le(os, header_str.size());
    os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [name, t] : net.parameters()) {
        for (double v : t.values()) put_f64_le(os, v);
    }
    if (!os) throw IoError("failed writing checkpoint: " + path);
}

HitNetwork load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);

    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw IoError("not a checkpoint file (bad magic): " + path);
    }
    const std::uint64_t header_len = get_u64_le(is);
    std::string header_str(header_len, '\0');
    is.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!is) throw IoError("truncated checkpoint header: " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad checkpoint header: " + std::string(e.what()));
    }
    if (header.at("format_version").get<int>() != 1) {
        throw IoError("unsupported checkpoint version");
    }

    HitNetwork net = build(config_from_json(header.at("config")), 0);
    const auto params = net.parameters();
    const auto& jparams = header.at("params");
    if (jparams.size() != params.size()) throw IoError("checkpoint parameter table mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& [name, t] = params[i];
        if (jparams[i].at("name").get<std::string>() != name ||
            jparams[i].at("shape").get<Shape>() != t.shape()) {
            throw IoError("checkpoint parameter " + name + " does not match the model layout");
        }
        auto dst = Tensor(t).mutable_values();
        for (double& v : dst) v = get_f64_le(is);
    }
    if (!is) throw IoError("truncated checkpoint data: " + path);
    return net;
}

} // namespace hitsr
