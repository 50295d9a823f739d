#include "ct/rasg.hpp"

#include <atomic>
#include <cmath>

namespace ct::rasg {

namespace {

std::atomic<std::uint64_t> g_eval_count{0};

const SegmentationMask& mask_for_frame(const std::vector<SegmentationMask>& masks, int frame) {
    for (const auto& m : masks)
        if (m.frame_index == frame) return m;
    throw ValidationError("rasg_loss: no mask for frame " + std::to_string(frame));
}

}  // namespace

std::uint64_t eval_count() { return g_eval_count.load(); }

AttentionRecord aggregate_attention(const Tensor& raw_attention,
                                    const std::vector<int>& garment_keys, int height, int width,
                                    const std::string& layer_id, int frame_index) {
    if (raw_attention.rank() != 3)
        throw ValidationError("aggregate_attention: expected [heads,queries,keys]");
    if (garment_keys.empty())
        throw ValidationError("aggregate_attention: garment key set is empty");
    int heads = raw_attention.shape[0];
    int queries = raw_attention.shape[1];
    int keys = raw_attention.shape[2];
    if (queries != height * width)
        throw ValidationError("aggregate_attention: query count does not match spatial shape");
    for (int k : garment_keys)
        if (k < 0 || k >= keys) throw ValidationError("aggregate_attention: key index out of range");

    for (int h = 0; h < heads; ++h)
        for (int q = 0; q < queries; ++q) {
            double s = 0.0;
            for (int k = 0; k < keys; ++k)
                s += raw_attention.data[(static_cast<std::size_t>(h) * queries + q) * keys + k];
            if (std::fabs(s - 1.0) > 1e-5)
                throw ValidationError("aggregate_attention: attention row is not stochastic (sum=" +
                                      std::to_string(s) + ")");
        }

    AttentionRecord rec;
    rec.layer_id = layer_id;
    rec.frame_index = frame_index;
    rec.probs = Tensor({height, width});
    for (int q = 0; q < queries; ++q) {
        double acc = 0.0;
        for (int h = 0; h < heads; ++h)
            for (int k : garment_keys)
                acc += raw_attention.data[(static_cast<std::size_t>(h) * queries + q) * keys + k];
        rec.probs.data[q] = acc / heads;
    }
    return rec;
}

Tensor resample_mask_nearest(const Tensor& mask, int out_h, int out_w) {
    if (mask.rank() != 2) throw ValidationError("resample_mask_nearest: rank-2 mask required");
    int h = mask.shape[0], w = mask.shape[1];
    Tensor out({out_h, out_w});
    for (int y = 0; y < out_h; ++y) {
        int sy = static_cast<int>((y + 0.5) * h / out_h);
        if (sy >= h) sy = h - 1;
        for (int x = 0; x < out_w; ++x) {
            int sx = static_cast<int>((x + 0.5) * w / out_w);
            if (sx >= w) sx = w - 1;
            out.at2(y, x) = mask.at2(sy, sx);
        }
    }
    return out;
}

double rasg_loss(const std::vector<AttentionRecord>& records,
                 const std::vector<SegmentationMask>& masks, double lambda_n) {
    std::vector<AttentionRecordVar> vars;
    vars.reserve(records.size());
    for (const auto& r : records) vars.push_back({r.layer_id, r.frame_index, ag::constant(r.probs)});
    return rasg_loss(vars, masks, lambda_n)->val.data[0];
}

ag::Var rasg_loss(const std::vector<AttentionRecordVar>& records,
                  const std::vector<SegmentationMask>& masks, double lambda_n) {
    g_eval_count.fetch_add(1);
    if (records.empty()) throw ValidationError("rasg_loss: no attention records");

    std::vector<ag::Var> terms;
    terms.reserve(records.size());
    for (const auto& rec : records) {
        const Tensor& probs = rec.probs->val;
        if (probs.rank() != 2) throw ValidationError("rasg_loss: attention map must be rank 2");
        const SegmentationMask& mask = mask_for_frame(masks, rec.frame_index);
        Tensor m = resample_mask_nearest(mask.values, probs.shape[0], probs.shape[1]);
        if (!m.same_shape(probs))
            throw ValidationError("rasg_loss: mask/record size mismatch after resampling");

        double edit_count = 0.0, rest_count = 0.0;
        Tensor rest(m.shape);
        for (std::size_t i = 0; i < m.numel(); ++i) {
            if (m.data[i] != 0.0 && m.data[i] != 1.0)
                throw ValidationError("rasg_loss: mask is not binary");
            edit_count += m.data[i];
            rest.data[i] = 1.0 - m.data[i];
            rest_count += rest.data[i];
        }

        std::vector<ag::Var> parts;
        if (edit_count > 0.0) {
            // mean over edit region of (1 - A)^2
            ag::Var one_minus = ag::affine(rec.probs, -1.0, 1.0);
            ag::Var sq = ag::mul(one_minus, one_minus);
            ag::Var masked = ag::mul(sq, ag::constant(m));
            parts.push_back(ag::affine(ag::sum_all(masked), 1.0 / edit_count, 0.0));
        }
        if (rest_count > 0.0 && lambda_n != 0.0) {
            ag::Var sq = ag::mul(rec.probs, rec.probs);
            ag::Var masked = ag::mul(sq, ag::constant(rest));
            parts.push_back(ag::affine(ag::sum_all(masked), lambda_n / rest_count, 0.0));
        }
        if (!parts.empty()) terms.push_back(ag::vsum(parts));
    }
    if (terms.empty()) return ag::constant(Tensor::scalar(0.0));
    return ag::affine(ag::vsum(terms), 1.0 / static_cast<double>(records.size()), 0.0);
}

double total_loss(double l_ldm, double l_rasg, double lambda_r) {
    if (!std::isfinite(l_ldm) || !std::isfinite(l_rasg))
        throw ValidationError("total_loss: non-finite inputs");
    return l_ldm + lambda_r * l_rasg;
}

}  // namespace ct::rasg
