#pragma once

#include "petprompt/volume.hpp"

namespace petprompt::eval {

// Dice similarity 2|G n S| / (|G| + |S|); two empty masks score 1.0.
double dsc(const Grid3<uint8_t>& g, const Grid3<uint8_t>& s);
inline double dsc(const LabelVolume& g, const LabelVolume& s) { return dsc(g.data, s.data); }

// p > threshold (strict).
Grid3<uint8_t> binarize(const Grid3<float>& prob, float threshold = 0.5f);

} // namespace petprompt::eval
