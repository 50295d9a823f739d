#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ct/autograd.hpp"
#include "ct/tensor.hpp"

namespace ct::rasg {

// Binary edit-region mask, 1 = garment region.
struct SegmentationMask {
    Tensor values;  // [H,W], entries in {0,1}
    int frame_index = 0;
};

// Aggregated garment-attention probability map for one layer of one frame.
struct AttentionRecord {
    std::string layer_id;
    int frame_index = 0;
    Tensor probs;  // [Ha,Wa], entries in [0,1]
};

// Same record with the map still on the tape (training path).
struct AttentionRecordVar {
    std::string layer_id;
    int frame_index = 0;
    ag::Var probs;  // [Ha,Wa]
};

struct LossWeights {
    double lambda_n = 0.5;
    double lambda_r = 0.1;
};

// Collapses multi-head row-stochastic attention [heads,Q,K] to a spatial map
// of total mass on the garment keys, averaged over heads.
AttentionRecord aggregate_attention(const Tensor& raw_attention,
                                    const std::vector<int>& garment_keys, int height, int width,
                                    const std::string& layer_id = "", int frame_index = 0);

// Nearest-neighbor mask resampling (preserves binarity).
Tensor resample_mask_nearest(const Tensor& mask, int out_h, int out_w);

// L = mean over records of [ mean_{M=1}(1-A)^2 + lambda_n * mean_{M=0}A^2 ].
// Empty regions contribute zero to their term. Masks are indexed by the
// record's frame and resampled to the record's spatial size.
double rasg_loss(const std::vector<AttentionRecord>& records,
                 const std::vector<SegmentationMask>& masks, double lambda_n);
ag::Var rasg_loss(const std::vector<AttentionRecordVar>& records,
                  const std::vector<SegmentationMask>& masks, double lambda_n);

double total_loss(double l_ldm, double l_rasg, double lambda_r);

// Call-count probe; the sampling path must leave this untouched.
std::uint64_t eval_count();

}  // namespace ct::rasg
