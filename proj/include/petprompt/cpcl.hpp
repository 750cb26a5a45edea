#pragma once

#include <torch/torch.h>

#include <vector>

#include "petprompt/volume.hpp"

namespace petprompt::cpcl {

// Probabilities of every prompt iteration, all of one shape.
using ProbabilityStack = std::vector<torch::Tensor>;

// Voxelwise mean over the prompt iterations.
torch::Tensor mean_prediction(const ProbabilityStack& probs);

// sum_i mean_voxels (mean - p_i)^2. The mean is a constant target
// (stop-gradient); since sum_i (mean - p_i) = 0 this leaves the gradient unchanged.
torch::Tensor consistency_loss(const ProbabilityStack& probs);

// Binary predictive entropy in nats, with 0 ln 0 = 0. Range [0, ln 2].
torch::Tensor entropy_uncertainty(const torch::Tensor& mean_prob);

// Flips exactly the label voxels whose uncertainty exceeds `threshold`.
torch::Tensor rectify_labels(const torch::Tensor& labels, const torch::Tensor& uncertainty, double threshold);
LabelVolume rectify_labels(const LabelVolume& labels, const Grid3<float>& uncertainty, double threshold);

inline constexpr double kDiceSmooth = 1e-5;

// 1 - (2 sum(p y) + eps) / (sum p + sum y + eps) per batch element, averaged.
torch::Tensor soft_dice_loss(const torch::Tensor& prob, const torch::Tensor& target, double eps = kDiceSmooth);
torch::Tensor bce_with_logits(const torch::Tensor& logits, const torch::Tensor& target);

// Mean over iterations of soft Dice + BCE, evaluated on logits.
torch::Tensor supervised_loss(const std::vector<torch::Tensor>& logits, const torch::Tensor& target);

enum class RampShape { Printed, Squared };

// omega_max * exp(-5 (1 - t/t_max)) for Printed, exponent squared for Squared.
double ramp_up_lambda(int64_t t, int64_t t_max, double omega_max, RampShape shape = RampShape::Printed);

} // namespace petprompt::cpcl
