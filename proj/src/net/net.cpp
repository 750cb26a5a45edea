#include "petprompt/net.hpp"

#include <cmath>
#include <numbers>

namespace petprompt::net {

namespace {

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

int log2_int(int v) {
    int n = 0;
    while (v > 1) {
        v >>= 1;
        ++n;
    }
    return n;
}

void check_volume_tensor(const torch::Tensor& x, const Shape3& size, const char* what) {
    require(x.dim() == 5 && x.size(1) == 1 && x.size(2) == size.d && x.size(3) == size.h && x.size(4) == size.w,
            "shape",
            std::string(what) + " must be [B, 1, " + std::to_string(size.d) + ", " + std::to_string(size.h) + ", " +
                std::to_string(size.w) + "], got " + c10::str(x.sizes()));
}

} // namespace

// ------------------------------------------------------------------ config

void NetConfig::validate() const {
    require(is_power_of_two(patch_size), "config", "patch_size must be a power of two");
    require(embed_dim > 0 && depth >= 0 && num_heads > 0 && decoder_dim > 0 && decoder_heads > 0, "config",
            "network widths, depth and head counts must be positive");
    require(embed_dim % num_heads == 0, "config", "embed_dim must be divisible by num_heads");
    require(decoder_dim % 2 == 0, "config", "decoder_dim must be even");
    require((decoder_dim / 2) % decoder_heads == 0, "config", "decoder_dim / 2 must be divisible by decoder_heads");
    require(decoder_depth >= 1 && mlp_ratio >= 1, "config", "decoder_depth and mlp_ratio must be >= 1");
    for (int a = 0; a < 3; ++a) {
        require(input_size[a] > 0 && input_size[a] % patch_size == 0, "config",
                "input_size " + to_string(input_size) + " must be divisible by patch_size " + std::to_string(patch_size));
    }
}

Shape3 NetConfig::grid() const {
    return {input_size.d / patch_size, input_size.h / patch_size, input_size.w / patch_size};
}

int NetConfig::upscale_stages() const { return log2_int(patch_size); }

NetConfig NetConfig::full_scale() {
    NetConfig c;
    c.patch_size = 16;
    c.embed_dim = 768;
    c.depth = 16;
    c.num_heads = 12;
    c.decoder_dim = 384;
    c.decoder_heads = 8;
    c.input_size = {128, 128, 128};
    return c;
}

NetConfig NetConfig::benchmark() {
    NetConfig c;
    c.input_size = {32, 32, 32};
    return c;
}

nlohmann::json to_json(const NetConfig& c) {
    return {{"patch_size", c.patch_size},       {"embed_dim", c.embed_dim},
            {"depth", c.depth},                 {"num_heads", c.num_heads},
            {"decoder_dim", c.decoder_dim},     {"decoder_heads", c.decoder_heads},
            {"decoder_depth", c.decoder_depth}, {"mlp_ratio", c.mlp_ratio},
            {"input_size", {c.input_size.d, c.input_size.h, c.input_size.w}}};
}

NetConfig net_config_from_json(const nlohmann::json& j) {
    NetConfig c;
    c.patch_size = j.value("patch_size", c.patch_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.depth = j.value("depth", c.depth);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.decoder_dim = j.value("decoder_dim", c.decoder_dim);
    c.decoder_heads = j.value("decoder_heads", c.decoder_heads);
    c.decoder_depth = j.value("decoder_depth", c.decoder_depth);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    if (j.contains("input_size")) {
        const auto& s = j.at("input_size");
        require(s.is_array() && s.size() == 3, "config", "input_size must have 3 entries");
        c.input_size = {s[0].get<int64_t>(), s[1].get<int64_t>(), s[2].get<int64_t>()};
    }
    c.validate();
    return c;
}

// ------------------------------------------------------------ building blocks

LayerNorm3dImpl::LayerNorm3dImpl(int64_t channels, double eps) : eps_(eps) {
    weight_ = register_parameter("weight", torch::ones({channels}));
    bias_ = register_parameter("bias", torch::zeros({channels}));
}

torch::Tensor LayerNorm3dImpl::forward(const torch::Tensor& x) {
    const auto mean = x.mean(1, true);
    const auto var = (x - mean).pow(2).mean(1, true);
    const auto y = (x - mean) / torch::sqrt(var + eps_);
    return y * weight_.view({1, -1, 1, 1, 1}) + bias_.view({1, -1, 1, 1, 1});
}

AttentionImpl::AttentionImpl(int64_t dim, int64_t heads, int64_t downsample) : heads_(heads) {
    const int64_t inner = dim / downsample;
    require(inner % heads == 0, "config", "attention width must be divisible by the head count");
    q_proj_ = register_module("q_proj", torch::nn::Linear(dim, inner));
    k_proj_ = register_module("k_proj", torch::nn::Linear(dim, inner));
    v_proj_ = register_module("v_proj", torch::nn::Linear(dim, inner));
    out_proj_ = register_module("out_proj", torch::nn::Linear(inner, dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v) {
    const auto split = [this](const torch::Tensor& t) {
        const int64_t b = t.size(0);
        const int64_t n = t.size(1);
        return t.view({b, n, heads_, t.size(2) / heads_}).transpose(1, 2);
    };
    const auto qh = split(q_proj_(q));
    const auto kh = split(k_proj_(k));
    const auto vh = split(v_proj_(v));
    const double scale = 1.0 / std::sqrt(static_cast<double>(qh.size(3)));
    const auto attn = torch::softmax(qh.matmul(kh.transpose(-2, -1)) * scale, -1);
    auto out = attn.matmul(vh).transpose(1, 2);
    out = out.reshape({out.size(0), out.size(1), -1});
    return out_proj_(out);
}

MlpImpl::MlpImpl(int64_t in, int64_t hidden, int64_t out, int layers) {
    for (int i = 0; i < layers; ++i) {
        const int64_t a = i == 0 ? in : hidden;
        const int64_t b = i == layers - 1 ? out : hidden;
        layers_.push_back(register_module("layer" + std::to_string(i), torch::nn::Linear(a, b)));
    }
}

torch::Tensor MlpImpl::forward(torch::Tensor x) {
    for (size_t i = 0; i < layers_.size(); ++i) {
        x = layers_[i](x);
        if (i + 1 < layers_.size()) x = torch::gelu(x);
    }
    return x;
}

EncoderBlockImpl::EncoderBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio) {
    norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn_ = register_module("attn", Attention(dim, heads));
    norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    mlp_ = register_module("mlp", Mlp(dim, dim * mlp_ratio, dim));
}

torch::Tensor EncoderBlockImpl::forward(const torch::Tensor& x) {
    const auto h = norm1_(x);
    const auto y = x + attn_(h, h, h);
    return y + mlp_(norm2_(y));
}

// ------------------------------------------------------------- image encoder

ImageEncoderImpl::ImageEncoderImpl(const NetConfig& cfg) {
    cfg.validate();
    const Shape3 g = cfg.grid();
    patch_embed_ = register_module(
        "patch_embed",
        torch::nn::Conv3d(torch::nn::Conv3dOptions(1, cfg.embed_dim, cfg.patch_size).stride(cfg.patch_size)));
    pos_embed_ = register_parameter("pos_embed", torch::randn({1, g.voxels(), cfg.embed_dim}) * 0.02);
    blocks_ = register_module("blocks", torch::nn::ModuleList());
    for (int i = 0; i < cfg.depth; ++i) blocks_->push_back(EncoderBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio));
    norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.embed_dim})));
}

torch::Tensor ImageEncoderImpl::patch_tokens(const torch::Tensor& x) {
    return patch_embed_(x).flatten(2).transpose(1, 2);
}

torch::Tensor ImageEncoderImpl::forward(const torch::Tensor& x) {
    auto t = patch_tokens(x) + pos_embed_;
    for (const auto& block : *blocks_) t = block->as<EncoderBlock>()->forward(t);
    return norm_(t);
}

// ------------------------------------------------------------ prompt encoder

PositionEmbeddingImpl::PositionEmbeddingImpl(int64_t dim) {
    gaussian_ = register_buffer("gaussian", torch::randn({3, dim / 2}));
}

torch::Tensor PositionEmbeddingImpl::encode(const torch::Tensor& coords01) {
    const auto c = (2.0 * coords01 - 1.0).matmul(gaussian_) * (2.0 * std::numbers::pi);
    return torch::cat({torch::sin(c), torch::cos(c)}, -1);
}

torch::Tensor PositionEmbeddingImpl::dense(const Shape3& grid) {
    const auto opts = gaussian_.options();
    const auto axis = [&](int64_t n) { return (torch::arange(n, opts) + 0.5) / static_cast<double>(n); };
    const auto mesh = torch::meshgrid({axis(grid.d), axis(grid.h), axis(grid.w)}, "ij");
    const auto coords = torch::stack({mesh[0], mesh[1], mesh[2]}, -1);  // [Dp, Hp, Wp, 3]
    return encode(coords).permute({3, 0, 1, 2});
}

PromptEncoderImpl::PromptEncoderImpl(const NetConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int64_t dim = cfg.decoder_dim;
    pe_ = register_module("pe", PositionEmbedding(dim));
    polarity_ = register_parameter("polarity", torch::randn({2, dim}));
    no_mask_ = register_parameter("no_mask", torch::randn({dim}));

    mask_downscaling_ = torch::nn::Sequential();
    int64_t in = 1;
    for (int k = 0; k < cfg.upscale_stages(); ++k) {
        const int64_t out = k == 0 ? 4 : 16;
        mask_downscaling_->push_back(torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 2).stride(2)));
        mask_downscaling_->push_back(LayerNorm3d(out));
        mask_downscaling_->push_back(torch::nn::GELU());
        in = out;
    }
    mask_downscaling_->push_back(torch::nn::Conv3d(torch::nn::Conv3dOptions(in, dim, 1)));
    register_module("mask_downscaling", mask_downscaling_);
}

torch::Tensor PromptEncoderImpl::dense_pe() { return pe_->dense(cfg_.grid()); }

PromptEmbedding PromptEncoderImpl::forward(const std::vector<std::vector<PromptPoint>>& points,
                                           const std::optional<torch::Tensor>& prev_mask) {
    require(!points.empty(), "shape", "prompt batch is empty");
    const auto batch = static_cast<int64_t>(points.size());
    const auto count = static_cast<int64_t>(points.front().size());
    require(count >= 1, "shape", "every batch element needs at least one prompt point");
    const Shape3& size = cfg_.input_size;
    std::vector<double> coords;
    std::vector<int64_t> polarity;
    coords.reserve(static_cast<size_t>(batch * count * 3));
    for (const auto& list : points) {
        require(static_cast<int64_t>(list.size()) == count, "shape", "prompt lists must have equal length");
        for (const auto& p : list) {
            require(in_bounds(size, p.coord), "bounds",
                    "prompt " + to_string(p.coord) + " outside input " + to_string(size));
            coords.push_back((static_cast<double>(p.coord.z) + 0.5) / static_cast<double>(size.d));
            coords.push_back((static_cast<double>(p.coord.y) + 0.5) / static_cast<double>(size.h));
            coords.push_back((static_cast<double>(p.coord.x) + 0.5) / static_cast<double>(size.w));
            polarity.push_back(p.polarity == Polarity::Positive ? 1 : 0);
        }
    }
    const auto opts = polarity_.options();
    const auto coord_t = torch::tensor(coords, torch::kDouble).to(opts.dtype()).view({batch, count, 3});
    const auto pol_t = torch::tensor(polarity, torch::kLong);
    const int64_t dim = cfg_.decoder_dim;
    PromptEmbedding out;
    out.sparse = pe_->encode(coord_t) + polarity_.index_select(0, pol_t).view({batch, count, dim});
    const Shape3 g = cfg_.grid();
    if (prev_mask) {
        check_volume_tensor(*prev_mask, size, "previous mask");
        require(prev_mask->size(0) == batch, "shape", "previous mask batch differs from prompt batch");
        out.dense = mask_downscaling_->forward(*prev_mask);
    } else {
        out.dense = no_mask_.view({1, dim, 1, 1, 1}).expand({batch, dim, g.d, g.h, g.w});
    }
    return out;
}

// -------------------------------------------------------------- mask decoder

TwoWayBlockImpl::TwoWayBlockImpl(int64_t dim, int64_t heads, int64_t mlp_dim, bool skip_first_layer_pe)
    : skip_first_layer_pe_(skip_first_layer_pe) {
    const auto ln = [dim] { return torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})); };
    self_attn_ = register_module("self_attn", Attention(dim, heads));
    norm1_ = register_module("norm1", ln());
    cross_token_to_image_ = register_module("cross_token_to_image", Attention(dim, heads, 2));
    norm2_ = register_module("norm2", ln());
    mlp_ = register_module("mlp", Mlp(dim, mlp_dim, dim));
    norm3_ = register_module("norm3", ln());
    cross_image_to_token_ = register_module("cross_image_to_token", Attention(dim, heads, 2));
    norm4_ = register_module("norm4", ln());
}

std::pair<torch::Tensor, torch::Tensor> TwoWayBlockImpl::forward(torch::Tensor queries, torch::Tensor keys,
                                                                 const torch::Tensor& query_pe,
                                                                 const torch::Tensor& key_pe) {
    if (skip_first_layer_pe_) {
        queries = self_attn_(queries, queries, queries);
    } else {
        const auto q = queries + query_pe;
        queries = queries + self_attn_(q, q, queries);
    }
    queries = norm1_(queries);

    auto q = queries + query_pe;
    auto k = keys + key_pe;
    queries = norm2_(queries + cross_token_to_image_(q, k, keys));
    queries = norm3_(queries + mlp_(queries));

    q = queries + query_pe;
    k = keys + key_pe;
    keys = norm4_(keys + cross_image_to_token_(k, q, queries));
    return {queries, keys};
}

MaskDecoderImpl::MaskDecoderImpl(const NetConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int64_t dim = cfg.decoder_dim;
    neck_ = register_module("neck", torch::nn::Linear(cfg.embed_dim, dim));
    neck_norm_ = register_module("neck_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    mask_token_ = register_parameter("mask_token", torch::randn({1, 1, dim}));
    blocks_ = register_module("blocks", torch::nn::ModuleList());
    for (int i = 0; i < cfg.decoder_depth; ++i) {
        blocks_->push_back(TwoWayBlock(dim, cfg.decoder_heads, dim * cfg.mlp_ratio, i == 0));
    }
    final_attn_ = register_module("final_attn", Attention(dim, cfg.decoder_heads, 2));
    final_norm_ = register_module("final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));

    upscaling_ = torch::nn::Sequential();
    int64_t channels = dim;
    const int stages = cfg.upscale_stages();
    for (int k = 0; k < stages; ++k) {
        const int64_t next = std::max<int64_t>(channels / 2, 8);
        upscaling_->push_back(
            torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(channels, next, 2).stride(2)));
        if (k + 1 < stages) upscaling_->push_back(LayerNorm3d(next));
        upscaling_->push_back(torch::nn::GELU());
        channels = next;
    }
    register_module("upscaling", upscaling_);
    hypernet_ = register_module("hypernet", Mlp(dim, dim, channels, 3));
}

torch::Tensor MaskDecoderImpl::forward(const ImageEmbedding& image, const PromptEmbedding& prompts,
                                       const torch::Tensor& dense_pe) {
    const Shape3 g = cfg_.grid();
    require(image.grid_shape == g && image.tokens.dim() == 3 && image.tokens.size(1) == g.voxels() &&
                image.tokens.size(2) == cfg_.embed_dim,
            "config", "image embedding does not match the decoder configuration");
    const int64_t batch = image.tokens.size(0);
    const int64_t dim = cfg_.decoder_dim;
    require(prompts.sparse.size(0) == batch && prompts.dense.size(0) == batch, "config",
            "prompt batch differs from image batch");

    auto keys = neck_norm_(neck_(image.tokens)) + prompts.dense.flatten(2).transpose(1, 2);
    const auto key_pe = dense_pe.flatten(1).transpose(0, 1).unsqueeze(0).expand({batch, g.voxels(), dim});
    const auto tokens = torch::cat({mask_token_.expand({batch, 1, dim}), prompts.sparse}, 1);

    auto queries = tokens;
    for (const auto& block : *blocks_) {
        std::tie(queries, keys) = block->as<TwoWayBlock>()->forward(queries, keys, tokens, key_pe);
    }
    queries = final_norm_(queries + final_attn_(queries + tokens, keys + key_pe, keys));

    const auto mask_out = queries.select(1, 0);  // [B, dim]
    const auto features = upscaling_->forward(keys.transpose(1, 2).reshape({batch, dim, g.d, g.h, g.w}));
    const auto hyper = hypernet_(mask_out);  // [B, C]
    const Shape3& s = cfg_.input_size;
    return hyper.unsqueeze(1).bmm(features.flatten(2)).view({batch, 1, s.d, s.h, s.w});
}

// ----------------------------------------------------------------- segmenter

PromptableSegmenterImpl::PromptableSegmenterImpl(const NetConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    image_encoder_ = register_module("image_encoder", ImageEncoder(cfg));
    prompt_encoder_ = register_module("prompt_encoder", PromptEncoder(cfg));
    mask_decoder_ = register_module("mask_decoder", MaskDecoder(cfg));
}

ImageEmbedding PromptableSegmenterImpl::encode_image(const torch::Tensor& x) {
    check_volume_tensor(x, cfg_.input_size, "image");
    ++stats_.encoder_calls;
    return {image_encoder_(x), cfg_.grid()};
}

PromptEmbedding PromptableSegmenterImpl::encode_prompts(const std::vector<std::vector<PromptPoint>>& points,
                                                        const std::optional<torch::Tensor>& prev_mask) {
    return prompt_encoder_(points, prev_mask);
}

torch::Tensor PromptableSegmenterImpl::decode_mask(const ImageEmbedding& image, const PromptEmbedding& prompts) {
    ++stats_.decoder_calls;
    return mask_decoder_(image, prompts, prompt_encoder_->dense_pe());
}

PredictionStack PromptableSegmenterImpl::predict_iterative(const torch::Tensor& x, int n_pt,
                                                           const PromptSource& source) {
    require(n_pt >= 1, "config", "n_pt must be >= 1");
    ++stats_.loops;
    const ImageEmbedding embedding = encode_image(x);
    const int64_t batch = x.size(0);
    const Shape3& s = cfg_.input_size;

    PredictionStack stack;
    stack.points.resize(static_cast<size_t>(batch));
    // Y_0 is the all-zero mask.
    torch::Tensor prev = torch::zeros({batch, 1, s.d, s.h, s.w}, x.options());
    for (int i = 1; i <= n_pt; ++i) {
        if (i == 1 && prev.abs().max().item<double>() != 0.0) ++stats_.nonzero_initial_masks;
        const auto fresh = source(i, prev);
        require(static_cast<int64_t>(fresh.size()) == batch, "shape", "prompt source must supply one point per image");
        for (int64_t b = 0; b < batch; ++b) stack.points[static_cast<size_t>(b)].push_back(fresh[static_cast<size_t>(b)]);
        const PromptEmbedding prompts = encode_prompts(stack.points, prev);
        auto logits = decode_mask(embedding, prompts);
        prev = torch::sigmoid(logits).detach();
        stack.logits.push_back(std::move(logits));
    }
    return stack;
}

PredictionStack PromptableSegmenterImpl::predict_with_labels(const torch::Tensor& x,
                                                             const std::vector<Grid3<uint8_t>>& labels, int n_pt,
                                                             std::vector<prompting::PromptSampler>& samplers) {
    const auto batch = static_cast<size_t>(x.size(0));
    require(labels.size() == batch && samplers.size() == batch, "shape", "one label and sampler per image required");
    for (const auto& l : labels) {
        require(l.shape() == cfg_.input_size, "shape", "label shape must equal the network input size");
    }
    return predict_iterative(x, n_pt, [&](int iteration, const torch::Tensor& prev) {
        std::vector<PromptPoint> out;
        out.reserve(batch);
        for (size_t b = 0; b < batch; ++b) {
            if (iteration == 1) {
                out.push_back(samplers[b].initial(labels[b]));
            } else {
                out.push_back(samplers[b].next(labels[b], to_binary_grid(prev[static_cast<int64_t>(b)])));
            }
        }
        return out;
    });
}

PredictionStack PromptableSegmenterImpl::predict_with_prompts(const torch::Tensor& x,
                                                              const std::vector<std::vector<PromptPoint>>& points) {
    require(!points.empty() && static_cast<int64_t>(points.size()) == x.size(0), "shape",
            "one prompt list per image required");
    const size_t n = points.front().size();
    for (const auto& p : points) require(p.size() == n, "shape", "prompt lists must have equal length");
    return predict_iterative(x, static_cast<int>(n), [&](int iteration, const torch::Tensor&) {
        std::vector<PromptPoint> out;
        for (const auto& p : points) out.push_back(p[static_cast<size_t>(iteration - 1)]);
        return out;
    });
}

PromptableSegmenter make_segmenter(const NetConfig& cfg, uint64_t seed) {
    torch::manual_seed(seed);
    return PromptableSegmenter(cfg);
}

// -------------------------------------------------------------- conversions

torch::Tensor to_tensor(const Grid3<float>& g) {
    const Shape3& s = g.shape();
    return torch::from_blob(const_cast<float*>(g.values().data()), {1, 1, s.d, s.h, s.w}, torch::kFloat).clone();
}

torch::Tensor to_tensor(const Grid3<uint8_t>& g) {
    const Shape3& s = g.shape();
    return torch::from_blob(const_cast<uint8_t*>(g.values().data()), {1, 1, s.d, s.h, s.w}, torch::kUInt8)
        .to(torch::kFloat);
}

Grid3<float> to_grid(const torch::Tensor& t) {
    require(t.dim() >= 3, "shape", "tensor must have at least 3 dimensions");
    const int64_t n = t.dim();
    const Shape3 s{t.size(n - 3), t.size(n - 2), t.size(n - 1)};
    require(t.numel() == s.voxels(), "shape", "tensor holds more than one volume");
    const auto c = t.detach().to(torch::kFloat).contiguous().cpu();
    const float* p = c.data_ptr<float>();
    return Grid3<float>(s, std::vector<float>(p, p + s.voxels()));
}

Grid3<uint8_t> to_binary_grid(const torch::Tensor& prob, float threshold) {
    const auto g = to_grid(prob);
    Grid3<uint8_t> out(g.shape());
    auto src = g.values();
    auto dst = out.values();
    for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > threshold ? 1 : 0;
    return out;
}

} // namespace petprompt::net
