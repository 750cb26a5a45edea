#include "petprompt/metrics.hpp"

namespace petprompt::eval {

double dsc(const Grid3<uint8_t>& g, const Grid3<uint8_t>& s) {
    require(g.shape() == s.shape(), "shape",
            "dsc operands differ in shape: " + to_string(g.shape()) + " vs " + to_string(s.shape()));
    const auto a = g.values();
    const auto b = s.values();
    int64_t inter = 0;
    int64_t total = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        require(a[i] <= 1 && b[i] <= 1, "label", "dsc operands must be binary");
        inter += a[i] & b[i];
        total += a[i] + b[i];
    }
    if (total == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

Grid3<uint8_t> binarize(const Grid3<float>& prob, float threshold) {
    Grid3<uint8_t> out(prob.shape());
    const auto p = prob.values();
    auto o = out.values();
    for (size_t i = 0; i < p.size(); ++i) o[i] = p[i] > threshold ? 1 : 0;
    return out;
}

} // namespace petprompt::eval
