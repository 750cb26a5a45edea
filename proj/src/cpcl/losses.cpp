#include "petprompt/cpcl.hpp"

#include <cmath>

namespace petprompt::cpcl {

torch::Tensor mean_prediction(const ProbabilityStack& probs) {
    require(!probs.empty(), "shape", "prediction stack is empty");
    return torch::stack(probs).mean(0);
}

torch::Tensor consistency_loss(const ProbabilityStack& probs) {
    require(!probs.empty(), "shape", "prediction stack is empty");
    const auto mean = mean_prediction(probs).detach();
    auto loss = torch::zeros({}, probs.front().options());
    for (const auto& p : probs) loss = loss + (mean - p).pow(2).mean();
    return loss;
}

torch::Tensor entropy_uncertainty(const torch::Tensor& mean_prob) {
    const auto p = mean_prob;
    const auto q = 1.0 - p;
    return -(torch::special::xlogy(p, p) + torch::special::xlogy(q, q));
}

torch::Tensor rectify_labels(const torch::Tensor& labels, const torch::Tensor& uncertainty, double threshold) {
    require(labels.sizes() == uncertainty.sizes(), "shape", "labels and uncertainty must have the same shape");
    return torch::where(uncertainty > threshold, 1.0 - labels, labels);
}

LabelVolume rectify_labels(const LabelVolume& labels, const Grid3<float>& uncertainty, double threshold) {
    require(labels.shape() == uncertainty.shape(), "shape", "labels and uncertainty must have the same shape");
    validate(labels);
    LabelVolume out{labels.data, labels.target_name, LabelQuality::Rectified};
    const auto u = uncertainty.values();
    auto y = out.data.values();
    for (size_t i = 0; i < y.size(); ++i) {
        if (u[i] > threshold) y[i] = static_cast<uint8_t>(1 - y[i]);
    }
    return out;
}

torch::Tensor soft_dice_loss(const torch::Tensor& prob, const torch::Tensor& target, double eps) {
    require(prob.sizes() == target.sizes(), "shape", "prediction and target must have the same shape");
    const auto p = prob.flatten(1);
    const auto y = target.flatten(1);
    const auto inter = (p * y).sum(1);
    const auto dice = (2.0 * inter + eps) / (p.sum(1) + y.sum(1) + eps);
    return (1.0 - dice).mean();
}

torch::Tensor bce_with_logits(const torch::Tensor& logits, const torch::Tensor& target) {
    require(logits.sizes() == target.sizes(), "shape", "prediction and target must have the same shape");
    return torch::binary_cross_entropy_with_logits(logits, target);
}

torch::Tensor supervised_loss(const std::vector<torch::Tensor>& logits, const torch::Tensor& target) {
    require(!logits.empty(), "shape", "prediction stack is empty");
    auto loss = torch::zeros({}, logits.front().options());
    for (const auto& l : logits) loss = loss + soft_dice_loss(torch::sigmoid(l), target) + bce_with_logits(l, target);
    return loss / static_cast<double>(logits.size());
}

double ramp_up_lambda(int64_t t, int64_t t_max, double omega_max, RampShape shape) {
    require(t_max > 0, "config", "t_max must be positive");
    require(t >= 0 && t <= t_max, "config", "ramp-up step must lie in [0, t_max]");
    const double phase = 1.0 - static_cast<double>(t) / static_cast<double>(t_max);
    const double exponent = shape == RampShape::Squared ? phase * phase : phase;
    return omega_max * std::exp(-5.0 * exponent);
}

} // namespace petprompt::cpcl
