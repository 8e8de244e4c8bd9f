#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmcan/rng.hpp"
#include "mmcan/tensor.hpp"

namespace mmcan {

constexpr double kLayerNormEps = 1e-5;
constexpr double kAttentionMaskValue = -1e9;

// Parameter-free positional embedding: position t gets sin(t / 10000^(2i/d))
// on even dims and the matching cos on odd dims.
inline Tensor sinusoidal_positions(std::size_t len, std::size_t dim) {
    if (dim % 2 != 0) {
        throw std::invalid_argument("sinusoidal_positions: dimension must be even, got " +
                                    std::to_string(dim));
    }
    Tensor out = Tensor::zeros(len, dim);
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t i = 0; i < dim / 2; ++i) {
            const double angle = static_cast<double>(t) /
                                 std::pow(10000.0, (2.0 * static_cast<double>(i)) / static_cast<double>(dim));
            out.at(t, 2 * i) = std::sin(angle);
            out.at(t, 2 * i + 1) = std::cos(angle);
        }
    }
    return out;
}

// Uniform Glorot initialization.
inline Tensor glorot_init(std::size_t rows, std::size_t cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Tensor t = Tensor::zeros(rows, cols, true);
    for (double& v : t.values()) v = rng.uniform(-limit, limit);
    return t;
}

// Optionally filled by attention ops: one [L_q x L_kv] weight matrix per head.
struct AttentionCapture {
    std::vector<Tensor> head_weights;
};

// Multi-head attention from explicit projection lists. Masked key columns
// receive an additive -1e9 before the softmax, which underflows to an exact
// zero weight for any row that also attends to at least one unmasked key.
inline Tensor multi_head_attention(const Tensor& queries_in, const Tensor& keys_values_in,
                                   const std::vector<Tensor>& w_query,
                                   const std::vector<Tensor>& w_key,
                                   const std::vector<Tensor>& w_value, const Tensor& w_out,
                                   const std::vector<bool>* key_mask,
                                   AttentionCapture* capture = nullptr) {
    const std::size_t heads = w_query.size();
    if (heads == 0) throw std::invalid_argument("multi_head_attention: no heads configured");
    const std::size_t head_dim = w_query.front().cols();
    const double scaling = 1.0 / std::sqrt(static_cast<double>(head_dim));
    if (key_mask != nullptr && key_mask->size() != keys_values_in.rows()) {
        throw std::invalid_argument("multi_head_attention: mask covers " +
                                    std::to_string(key_mask->size()) + " keys, expected " +
                                    std::to_string(keys_values_in.rows()));
    }

    Tensor additive_mask;
    if (key_mask != nullptr) {
        additive_mask = Tensor::zeros(queries_in.rows(), keys_values_in.rows());
        for (std::size_t i = 0; i < queries_in.rows(); ++i) {
            for (std::size_t j = 0; j < keys_values_in.rows(); ++j) {
                if ((*key_mask)[j]) additive_mask.at(i, j) = kAttentionMaskValue;
            }
        }
    }

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor q = matmul(queries_in, w_query[h]);
        Tensor k = matmul(keys_values_in, w_key[h]);
        Tensor v = matmul(keys_values_in, w_value[h]);
        Tensor scores = scale(matmul(q, transpose(k)), scaling);
        if (key_mask != nullptr) scores = add(scores, additive_mask);
        Tensor weights = softmax_rows(scores);
        if (capture != nullptr) capture->head_weights.push_back(weights.detached_copy());
        head_outputs.push_back(matmul(weights, v));
    }
    return matmul(concat_cols(head_outputs), w_out);
}

// One post-norm encoder layer: multi-head self-attention and a ReLU FFN with
// hidden width 4d, each wrapped in a residual connection and LayerNorm.
// Dropout is applied to the FFN output in train mode.
struct TransformerLayer {
    std::size_t dim = 0;
    std::size_t heads = 0;
    double dropout_rate = 0.0;
    std::vector<Tensor> w_query, w_key, w_value;
    Tensor w_out;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;

    TransformerLayer() = default;

    TransformerLayer(std::size_t dim_, std::size_t heads_, double dropout_rate_, Rng& rng)
        : dim(dim_), heads(heads_), dropout_rate(dropout_rate_) {
        if (heads == 0 || dim % heads != 0) {
            throw std::invalid_argument("transformer layer: dim " + std::to_string(dim) +
                                        " not divisible by " + std::to_string(heads) + " heads");
        }
        const std::size_t head_dim = dim / heads;
        for (std::size_t h = 0; h < heads; ++h) {
            w_query.push_back(glorot_init(dim, head_dim, rng));
            w_key.push_back(glorot_init(dim, head_dim, rng));
            w_value.push_back(glorot_init(dim, head_dim, rng));
        }
        w_out = glorot_init(dim, dim, rng);
        ffn_w1 = glorot_init(dim, 4 * dim, rng);
        ffn_b1 = Tensor::zeros(1, 4 * dim, true);
        ffn_w2 = glorot_init(4 * dim, dim, rng);
        ffn_b2 = Tensor::zeros(1, dim, true);
        ln1_gamma = Tensor::full(1, dim, 1.0, true);
        ln1_beta = Tensor::zeros(1, dim, true);
        ln2_gamma = Tensor::full(1, dim, 1.0, true);
        ln2_beta = Tensor::zeros(1, dim, true);
    }

    Tensor forward(const Tensor& x, const std::vector<bool>* key_mask, bool train, Rng* dropout_rng,
                   AttentionCapture* capture = nullptr) const {
        Tensor attended = multi_head_attention(x, x, w_query, w_key, w_value, w_out, key_mask, capture);
        Tensor normed = layer_norm_rows(add(x, attended), ln1_gamma, ln1_beta, kLayerNormEps);
        Tensor hidden = relu(add_rowvec(matmul(normed, ffn_w1), ffn_b1));
        Tensor ffn_out = add_rowvec(matmul(hidden, ffn_w2), ffn_b2);
        if (train && dropout_rate > 0.0) {
            if (dropout_rng == nullptr) {
                throw std::logic_error("transformer layer: train mode needs a dropout rng");
            }
            ffn_out = dropout(ffn_out, dropout_rate, train, *dropout_rng);
        }
        return layer_norm_rows(add(normed, ffn_out), ln2_gamma, ln2_beta, kLayerNormEps);
    }

    void collect_parameters(const std::string& prefix,
                            std::vector<std::pair<std::string, Tensor>>& out) const {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::string hs = std::to_string(h);
            out.emplace_back(prefix + ".wq" + hs, w_query[h]);
            out.emplace_back(prefix + ".wk" + hs, w_key[h]);
            out.emplace_back(prefix + ".wv" + hs, w_value[h]);
        }
        out.emplace_back(prefix + ".wo", w_out);
        out.emplace_back(prefix + ".ffn_w1", ffn_w1);
        out.emplace_back(prefix + ".ffn_b1", ffn_b1);
        out.emplace_back(prefix + ".ffn_w2", ffn_w2);
        out.emplace_back(prefix + ".ffn_b2", ffn_b2);
        out.emplace_back(prefix + ".ln1_gamma", ln1_gamma);
        out.emplace_back(prefix + ".ln1_beta", ln1_beta);
        out.emplace_back(prefix + ".ln2_gamma", ln2_gamma);
        out.emplace_back(prefix + ".ln2_beta", ln2_beta);
    }
};

// Token embedding + sinusoidal positions + one encoder layer. Pad positions
// are excluded from attention as keys; sequences are padded or truncated to
// the configured length, keeping the first tokens.
struct TextEncoder {
    std::size_t vocab_size = 0;
    std::size_t seq_len = 0;
    std::size_t dim = 0;
    int pad_id = 0;
    Tensor embedding;
    Tensor positions;  // constant
    TransformerLayer layer;

    TextEncoder() = default;

    TextEncoder(std::size_t vocab_size_, std::size_t seq_len_, std::size_t dim_, std::size_t heads,
                double dropout_rate, Rng& rng)
        : vocab_size(vocab_size_), seq_len(seq_len_), dim(dim_) {
        embedding = Tensor::zeros(vocab_size, dim, true);
        for (double& v : embedding.values()) v = rng.normal(0.0, 0.02);
        positions = sinusoidal_positions(seq_len, dim);
        layer = TransformerLayer(dim, heads, dropout_rate, rng);
    }

    std::vector<int> fit_length(const std::vector<int>& tokens) const {
        std::vector<int> fitted(tokens.begin(),
                                tokens.begin() + static_cast<std::ptrdiff_t>(std::min(tokens.size(), seq_len)));
        fitted.resize(seq_len, pad_id);
        return fitted;
    }

    std::vector<bool> pad_mask(const std::vector<int>& tokens) const {
        const std::vector<int> fitted = fit_length(tokens);
        std::vector<bool> mask(seq_len);
        for (std::size_t i = 0; i < seq_len; ++i) mask[i] = fitted[i] == pad_id;
        return mask;
    }

    Tensor encode(const std::vector<int>& tokens, bool train, Rng* dropout_rng,
                  AttentionCapture* capture = nullptr) const {
        const std::vector<int> fitted = fit_length(tokens);
        for (int id : fitted) {
            if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
                throw std::out_of_range("text encoder: token id " + std::to_string(id) +
                                        " outside vocabulary of " + std::to_string(vocab_size));
            }
        }
        const std::vector<bool> mask = pad_mask(tokens);
        const bool any_content = std::find(mask.begin(), mask.end(), false) != mask.end();
        Tensor embedded = embed_rows(embedding, fitted);
        Tensor x = add(embedded, positions);
        // An all-pad sequence would mask every key; fall back to unmasked
        // attention so the output stays finite.
        return layer.forward(x, any_content ? &mask : nullptr, train, dropout_rng, capture);
    }

    void collect_parameters(const std::string& prefix,
                            std::vector<std::pair<std::string, Tensor>>& out) const {
        out.emplace_back(prefix + ".embedding", embedding);
        layer.collect_parameters(prefix + ".layer", out);
    }
};

// Patch projection + sinusoidal positions + one encoder layer. The grid is
// always complete: exactly patch_count rows of patch_dim values.
struct ImageEncoder {
    std::size_t patch_count = 0;
    std::size_t patch_dim = 0;
    std::size_t dim = 0;
    Tensor projection;
    Tensor projection_bias;
    Tensor positions;  // constant
    TransformerLayer layer;

    ImageEncoder() = default;

    ImageEncoder(std::size_t patch_count_, std::size_t patch_dim_, std::size_t dim_,
                 std::size_t heads, double dropout_rate, Rng& rng)
        : patch_count(patch_count_), patch_dim(patch_dim_), dim(dim_) {
        projection = glorot_init(patch_dim, dim, rng);
        projection_bias = Tensor::zeros(1, dim, true);
        positions = sinusoidal_positions(patch_count, dim);
        layer = TransformerLayer(dim, heads, dropout_rate, rng);
    }

    Tensor encode(const Tensor& patches, bool train, Rng* dropout_rng,
                  AttentionCapture* capture = nullptr) const {
        if (patches.rows() != patch_count || patches.cols() != patch_dim) {
            throw std::invalid_argument("image encoder: expected " +
                                        detail::shape_str(patch_count, patch_dim) +
                                        " patch grid, got " +
                                        detail::shape_str(patches.rows(), patches.cols()));
        }
        Tensor projected = add_rowvec(matmul(patches, projection), projection_bias);
        Tensor x = add(projected, positions);
        return layer.forward(x, nullptr, train, dropout_rng, capture);
    }

    void collect_parameters(const std::string& prefix,
                            std::vector<std::pair<std::string, Tensor>>& out) const {
        out.emplace_back(prefix + ".projection", projection);
        out.emplace_back(prefix + ".projection_bias", projection_bias);
        layer.collect_parameters(prefix + ".layer", out);
    }
};

}  // namespace mmcan
