#pragma once

#include <torch/torch.h>

#include <atomic>
#include <functional>
#include <optional>
#include <vector>

#include "json.hpp"
#include "petprompt/prompting.hpp"
#include "petprompt/volume.hpp"

namespace petprompt::net {

struct NetConfig {
    int patch_size = 8;  // cubic patch edge; a power of two
    int embed_dim = 96;
    int depth = 4;
    int num_heads = 4;
    int decoder_dim = 96;
    int decoder_heads = 4;
    int decoder_depth = 2;  // two-way blocks
    int mlp_ratio = 4;
    Shape3 input_size{64, 64, 64};

    void validate() const;
    Shape3 grid() const;
    int upscale_stages() const;  // log2(patch_size)

    // 128^3 input, 16^3 patches, width 768, 16 blocks.
    static NetConfig full_scale();
    // Toy width on 32^3 crops: the desk-scale benchmark setting.
    static NetConfig benchmark();

    bool operator==(const NetConfig&) const = default;
};

nlohmann::json to_json(const NetConfig& c);
NetConfig net_config_from_json(const nlohmann::json& j);

// Patch tokens of one or more images: tokens [B, Dp*Hp*Wp, embed_dim].
struct ImageEmbedding {
    torch::Tensor tokens;
    Shape3 grid_shape;
};

struct PromptEmbedding {
    torch::Tensor sparse;  // [B, K, decoder_dim]
    torch::Tensor dense;   // [B, decoder_dim, Dp, Hp, Wp]
};

// Channel-wise LayerNorm over [B, C, ...] feature maps.
class LayerNorm3dImpl : public torch::nn::Module {
public:
    explicit LayerNorm3dImpl(int64_t channels, double eps = 1e-6);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::Tensor weight_, bias_;
    double eps_;
};
TORCH_MODULE(LayerNorm3d);

// Multi-head attention with separate q/k/v projections; `downsample` shrinks
// the internal width (the decoder's cross-attention uses 2).
class AttentionImpl : public torch::nn::Module {
public:
    AttentionImpl(int64_t dim, int64_t heads, int64_t downsample = 1);
    torch::Tensor forward(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v);

private:
    int64_t heads_;
    torch::nn::Linear q_proj_{nullptr}, k_proj_{nullptr}, v_proj_{nullptr}, out_proj_{nullptr};
};
TORCH_MODULE(Attention);

class MlpImpl : public torch::nn::Module {
public:
    MlpImpl(int64_t in, int64_t hidden, int64_t out, int layers = 2);
    torch::Tensor forward(torch::Tensor x);

private:
    std::vector<torch::nn::Linear> layers_;
};
TORCH_MODULE(Mlp);

// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
class EncoderBlockImpl : public torch::nn::Module {
public:
    EncoderBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
    Attention attn_{nullptr};
    Mlp mlp_{nullptr};
};
TORCH_MODULE(EncoderBlock);

class ImageEncoderImpl : public torch::nn::Module {
public:
    explicit ImageEncoderImpl(const NetConfig& cfg);
    // x: [B, 1, D, H, W] -> tokens [B, N, embed_dim]
    torch::Tensor forward(const torch::Tensor& x);
    // Patch projection alone, before the positional encoding.
    torch::Tensor patch_tokens(const torch::Tensor& x);
    torch::Tensor& pos_embed() { return pos_embed_; }

private:
    torch::nn::Conv3d patch_embed_{nullptr};
    torch::Tensor pos_embed_;
    torch::nn::ModuleList blocks_;
    torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(ImageEncoder);

// Random Fourier features of normalized 3D coordinates.
class PositionEmbeddingImpl : public torch::nn::Module {
public:
    explicit PositionEmbeddingImpl(int64_t dim);
    // coords [B, K, 3] in [0,1] -> [B, K, dim]
    torch::Tensor encode(const torch::Tensor& coords01);
    // [dim, Dp, Hp, Wp] at token-cell centers
    torch::Tensor dense(const Shape3& grid);

private:
    torch::Tensor gaussian_;
};
TORCH_MODULE(PositionEmbedding);

class PromptEncoderImpl : public torch::nn::Module {
public:
    explicit PromptEncoderImpl(const NetConfig& cfg);

    // points: one list per batch element, all of equal length K >= 1.
    // prev_mask: [B, 1, D, H, W] probabilities, or nullopt for "no mask".
    PromptEmbedding forward(const std::vector<std::vector<PromptPoint>>& points,
                            const std::optional<torch::Tensor>& prev_mask);
    torch::Tensor dense_pe();
    torch::Tensor& polarity_embedding() { return polarity_; }

private:
    NetConfig cfg_;
    PositionEmbedding pe_{nullptr};
    torch::Tensor polarity_;      // [2, dim]: negative, positive
    torch::Tensor no_mask_;       // [dim]
    torch::nn::Sequential mask_downscaling_{nullptr};
};
TORCH_MODULE(PromptEncoder);

class TwoWayBlockImpl : public torch::nn::Module {
public:
    TwoWayBlockImpl(int64_t dim, int64_t heads, int64_t mlp_dim, bool skip_first_layer_pe);
    std::pair<torch::Tensor, torch::Tensor> forward(torch::Tensor queries, torch::Tensor keys,
                                                    const torch::Tensor& query_pe, const torch::Tensor& key_pe);

private:
    bool skip_first_layer_pe_;
    Attention self_attn_{nullptr}, cross_token_to_image_{nullptr}, cross_image_to_token_{nullptr};
    torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr}, norm3_{nullptr}, norm4_{nullptr};
    Mlp mlp_{nullptr};
};
TORCH_MODULE(TwoWayBlock);

class MaskDecoderImpl : public torch::nn::Module {
public:
    explicit MaskDecoderImpl(const NetConfig& cfg);
    // Returns mask logits [B, 1, D, H, W] at full input resolution.
    torch::Tensor forward(const ImageEmbedding& image, const PromptEmbedding& prompts, const torch::Tensor& dense_pe);

private:
    NetConfig cfg_;
    torch::nn::Linear neck_{nullptr};
    torch::nn::LayerNorm neck_norm_{nullptr};
    torch::Tensor mask_token_;
    torch::nn::ModuleList blocks_;
    Attention final_attn_{nullptr};
    torch::nn::LayerNorm final_norm_{nullptr};
    torch::nn::Sequential upscaling_{nullptr};
    Mlp hypernet_{nullptr};
};
TORCH_MODULE(MaskDecoder);

// Per-iteration logits of one prompting loop plus the points that produced them.
struct PredictionStack {
    std::vector<torch::Tensor> logits;                    // n_pt x [B, 1, D, H, W]
    std::vector<std::vector<PromptPoint>> points;         // per batch element, cumulative

    size_t size() const { return logits.size(); }
    torch::Tensor probabilities(size_t i) const { return torch::sigmoid(logits.at(i)); }
    torch::Tensor final_probabilities() const { return probabilities(logits.size() - 1); }
};

struct InferenceStats {
    std::atomic<int64_t> encoder_calls{0};
    std::atomic<int64_t> decoder_calls{0};
    std::atomic<int64_t> loops{0};
    std::atomic<int64_t> nonzero_initial_masks{0};  // first decode of a loop saw a non-zero previous mask
};

// Supplies the new point (one per batch element) for iteration i >= 1 given
// the previous iteration's probabilities ([B,1,D,H,W]; all zeros for i = 1).
using PromptSource = std::function<std::vector<PromptPoint>(int iteration, const torch::Tensor& prev_prob)>;

class PromptableSegmenterImpl : public torch::nn::Module {
public:
    explicit PromptableSegmenterImpl(const NetConfig& cfg);

    ImageEmbedding encode_image(const torch::Tensor& x);
    PromptEmbedding encode_prompts(const std::vector<std::vector<PromptPoint>>& points,
                                   const std::optional<torch::Tensor>& prev_mask);
    torch::Tensor decode_mask(const ImageEmbedding& image, const PromptEmbedding& prompts);

    // Iterative prompting loop: the image is encoded once, the initial previous mask is
    // all zeros, and iteration i decodes with points 1..i plus the previous
    // probabilities (detached) as the dense prompt.
    PredictionStack predict_iterative(const torch::Tensor& x, int n_pt, const PromptSource& source);

    // Training / simulation mode: the first point comes from initial_prompt,
    // later ones from the error region of the previous binarized mask.
    PredictionStack predict_with_labels(const torch::Tensor& x, const std::vector<Grid3<uint8_t>>& labels, int n_pt,
                                        std::vector<prompting::PromptSampler>& samplers);

    // Interactive mode: points[b][i] is the point added at iteration i + 1.
    PredictionStack predict_with_prompts(const torch::Tensor& x, const std::vector<std::vector<PromptPoint>>& points);

    const NetConfig& config() const { return cfg_; }
    InferenceStats& stats() { return stats_; }
    ImageEncoder& image_encoder() { return image_encoder_; }
    PromptEncoder& prompt_encoder() { return prompt_encoder_; }
    MaskDecoder& mask_decoder() { return mask_decoder_; }

private:
    NetConfig cfg_;
    ImageEncoder image_encoder_{nullptr};
    PromptEncoder prompt_encoder_{nullptr};
    MaskDecoder mask_decoder_{nullptr};
    InferenceStats stats_;
};
TORCH_MODULE(PromptableSegmenter);

PromptableSegmenter make_segmenter(const NetConfig& cfg, uint64_t seed);

// Dense voxel data <-> [1, 1, D, H, W] tensors.
torch::Tensor to_tensor(const Grid3<float>& g);
torch::Tensor to_tensor(const Grid3<uint8_t>& g);
Grid3<float> to_grid(const torch::Tensor& t);  // accepts [D,H,W] or [1,1,D,H,W]
Grid3<uint8_t> to_binary_grid(const torch::Tensor& prob, float threshold = 0.5f);

} // namespace petprompt::net
