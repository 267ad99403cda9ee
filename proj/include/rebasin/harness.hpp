// Copyright (c) 2026 moe-rebasin authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rebasin/model.hpp"
#include "rebasin/numerics.hpp"
#include "rebasin/parallel.hpp"

namespace rebasin {

struct DatasetSpec {
    std::size_t classes = 2;
    std::size_t samples_per_class = 64;
    std::size_t input_dim = 8;
    double noise_sigma = 0.35;
    std::uint64_t seed = 0;

    void validate() const {
        if (classes < 2) throw std::invalid_argument("dataset: need at least 2 classes");
        if (samples_per_class < 1 || input_dim < 1)
            throw std::invalid_argument("dataset: empty shape");
        if (!(noise_sigma >= 0.0)) throw std::invalid_argument("dataset: negative noise");
    }

    bool operator==(const DatasetSpec&) const = default;
};

struct Dataset {
    Matrix features;  // samples x input_dim
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
};

struct SplitDataset {
    Dataset train;
    Dataset test;
};

/// Gaussian blobs: class c sits at a seeded unit-norm mean scaled by
/// 4*noise_sigma, with isotropic noise_sigma noise. The first 80% of each
/// class goes to train, the rest to test, all from one seeded stream.
inline SplitDataset gen_blobs(const DatasetSpec& spec) {
    spec.validate();
    RngStream rng(spec.seed);
    std::vector<std::vector<double>> centers(spec.classes);
    for (auto& c : centers) {
        c = rng.normal_vector(spec.input_dim);
        double norm = std::sqrt(dot(c, c));
        if (norm == 0.0) norm = 1.0;
        const double scale = 4.0 * spec.noise_sigma / norm;
        for (double& x : c) x *= scale;
    }
    const std::size_t train_per_class = (spec.samples_per_class * 8) / 10;
    SplitDataset out;
    out.train.features = Matrix(spec.classes * train_per_class, spec.input_dim);
    out.test.features =
        Matrix(spec.classes * (spec.samples_per_class - train_per_class), spec.input_dim);
    std::size_t train_row = 0, test_row = 0;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
            const bool is_train = s < train_per_class;
            Matrix& dst = is_train ? out.train.features : out.test.features;
            const std::size_t row = is_train ? train_row++ : test_row++;
            for (std::size_t j = 0; j < spec.input_dim; ++j)
                dst(row, j) = centers[c][j] + spec.noise_sigma * rng.next_normal();
            (is_train ? out.train.labels : out.test.labels).push_back(c);
        }
    }
    return out;
}

/// CSV ingestion: header f0..f{D-1},label; decimal floats, integer labels.
inline Dataset load_csv_dataset(const std::string& text) {
    Dataset out;
    std::size_t dim = 0;
    std::vector<double> values;
    std::size_t pos = 0, line_no = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(pos, end - pos);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        pos = end + 1;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t fpos = 0;
        while (true) {
            const std::size_t comma = line.find(',', fpos);
            fields.push_back(line.substr(fpos, comma - fpos));
            if (comma == std::string::npos) break;
            fpos = comma + 1;
        }
        if (line_no == 0) {
            if (fields.size() < 2 || fields.back() != "label")
                throw std::invalid_argument("csv: header must be f0..f{D-1},label");
            dim = fields.size() - 1;
            ++line_no;
            continue;
        }
        if (fields.size() != dim + 1)
            throw std::invalid_argument("csv: row " + std::to_string(line_no) +
                                        " has wrong field count");
        for (std::size_t j = 0; j < dim; ++j) values.push_back(std::stod(fields[j]));
        const long label = std::stol(fields[dim]);
        if (label < 0) throw std::invalid_argument("csv: negative label");
        out.labels.push_back(static_cast<std::size_t>(label));
        ++line_no;
    }
    if (out.labels.empty()) throw std::invalid_argument("csv: no data rows");
    out.features = Matrix(out.labels.size(), dim, std::move(values));
    return out;
}

/// Encoder/readout pair generated once per experiment family and shared
/// bitwise across every run being compared.
struct FrozenBackbone {
    Matrix encoder;                    // d x input_dim
    std::vector<double> encoder_bias;  // d
    Matrix readout;                    // classes x d
    std::vector<double> readout_bias;  // classes
    std::uint64_t seed = 0;

    std::size_t input_dim() const { return encoder.cols; }
    std::size_t model_dim() const { return encoder.rows; }
    std::size_t classes() const { return readout.rows; }
};

inline FrozenBackbone make_backbone(std::size_t input_dim, std::size_t d, std::size_t classes,
                                    std::uint64_t seed) {
    if (input_dim < 1 || d < 1 || classes < 2)
        throw std::invalid_argument("backbone: bad dimensions");
    RngStream rng(seed);
    FrozenBackbone bb;
    bb.seed = seed;
    bb.encoder = rng.normal_matrix(d, input_dim, 1.0 / std::sqrt(static_cast<double>(input_dim)));
    bb.encoder_bias.assign(d, 0.0);
    bb.readout = rng.normal_matrix(classes, d, 1.0 / std::sqrt(static_cast<double>(d)));
    bb.readout_bias.assign(classes, 0.0);
    return bb;
}

inline void require_matching_backbone(std::uint64_t seed_a, std::uint64_t seed_b) {
    if (seed_a != seed_b)
        throw std::invalid_argument(
            "backbone seeds differ; runs are only comparable against the same frozen backbone");
}

struct LossAccuracy {
    double loss = 0.0;
    double accuracy = 0.0;
};

namespace detail {

struct SampleEval {
    double loss = 0.0;
    bool correct = false;
};

inline SampleEval eval_sample(const MoEParams& phi, const FrozenBackbone& bb,
                              std::span<const double> x_raw, std::size_t label) {
    if (label >= bb.classes()) throw std::invalid_argument("model_loss: label out of range");
    std::vector<double> enc = matvec(bb.encoder, x_raw);
    for (std::size_t i = 0; i < enc.size(); ++i) enc[i] += bb.encoder_bias[i];
    std::vector<double> y = moe_forward(enc, phi);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += enc[i];  // residual skip
    std::vector<double> logits = matvec(bb.readout, y);
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += bb.readout_bias[i];

    const double m = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double l : logits) sum += std::exp(l - m);
    const double lse = m + std::log(sum);

    std::size_t argmax = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[argmax]) argmax = i;

    return SampleEval{lse - logits[label], argmax == label};
}

}  // namespace detail

/// Mean cross-entropy and accuracy of the encoder -> MoE(+skip) -> readout
/// pipeline over a batch. Per-sample results land in their own slots before
/// one sequential reduction, so the value is thread-count independent.
inline LossAccuracy model_loss(const MoEParams& phi, const FrozenBackbone& bb,
                               const Dataset& batch) {
    if (batch.size() == 0) throw std::invalid_argument("model_loss: empty batch");
    if (bb.model_dim() != phi.config.d)
        throw std::invalid_argument("model_loss: backbone/model width mismatch");
    if (batch.features.cols != bb.input_dim())
        throw std::invalid_argument("model_loss: feature width mismatch");
    std::vector<detail::SampleEval> evals(batch.size());
    parallel_for(batch.size(), [&](std::size_t s) {
        evals[s] = detail::eval_sample(phi, bb, batch.features.row(s), batch.labels[s]);
    });
    LossAccuracy out;
    for (const auto& e : evals) {
        out.loss += e.loss;
        out.accuracy += e.correct ? 1.0 : 0.0;
    }
    out.loss /= static_cast<double>(batch.size());
    out.accuracy /= static_cast<double>(batch.size());
    return out;
}

/// Gradient container shaped exactly like the trainable parameters.
struct MoEGradient {
    std::vector<GateEntry> gates;
    std::vector<ExpertParams> experts;
};

inline MoEGradient zero_gradient(const MoEParams& phi) {
    MoEGradient g;
    g.gates.resize(phi.gates.size());
    for (std::size_t i = 0; i < phi.gates.size(); ++i) {
        g.gates[i].W.assign(phi.gates[i].W.size(), 0.0);
        g.gates[i].b = 0.0;
    }
    g.experts.resize(phi.experts.size());
    for (std::size_t i = 0; i < phi.experts.size(); ++i) {
        const ExpertParams& e = phi.experts[i];
        g.experts[i].A = Matrix(e.A.rows, e.A.cols);
        g.experts[i].u.assign(e.u.size(), 0.0);
        g.experts[i].B = Matrix(e.B.rows, e.B.cols);
        g.experts[i].v.assign(e.v.size(), 0.0);
    }
    return g;
}

struct GradResult {
    MoEGradient grad;
    double loss = 0.0;
    double accuracy = 0.0;
};

namespace detail {

inline void backprop_expert(const ExpertParams& theta, std::span<const double> x,
                            std::span<const double> upstream, ExpertParams& grad) {
    std::vector<double> z = matvec(theta.A, x);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += theta.u[i];
    const std::vector<double> hval = relu(z);
    const std::size_t h = theta.hidden_dim();
    const std::size_t d = theta.io_dim();
    // B, v
    for (std::size_t i = 0; i < d; ++i) {
        grad.v[i] += upstream[i];
        for (std::size_t j = 0; j < h; ++j) grad.B(i, j) += upstream[i] * hval[j];
    }
    // through ReLU into A, u
    for (std::size_t j = 0; j < h; ++j) {
        if (z[j] <= 0.0) continue;
        double dz = 0.0;
        for (std::size_t i = 0; i < d; ++i) dz += theta.B(i, j) * upstream[i];
        grad.u[j] += dz;
        for (std::size_t k = 0; k < x.size(); ++k) grad.A(j, k) += dz * x[k];
    }
}

/// dL/dscores for a softmax whose outputs received gradient dweights.
inline std::vector<double> softmax_backward(std::span<const double> weights,
                                            std::span<const double> dweights) {
    double inner = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) inner += weights[i] * dweights[i];
    std::vector<double> ds(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) ds[i] = weights[i] * (dweights[i] - inner);
    return ds;
}

/// Backprop through one MoE forward at input x with upstream dL/doutput.
/// Top-k selections are treated as locally constant.
inline void backprop_moe(const MoEParams& phi, std::span<const double> x,
                         std::span<const double> upstream, MoEGradient& grad) {
    const std::size_t n = phi.config.n;
    switch (phi.config.variant) {
        case GatingVariant::Dense: {
            const std::vector<double> scores = gate_scores(x, phi.gates);
            const std::vector<double> weights = stable_softmax(scores);
            std::vector<std::vector<double>> outs(n);
            for (std::size_t i = 0; i < n; ++i) outs[i] = expert_forward(x, phi.experts[i]);
            std::vector<double> dweights(n);
            for (std::size_t i = 0; i < n; ++i) dweights[i] = dot(upstream, outs[i]);
            const std::vector<double> ds = softmax_backward(weights, dweights);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t k = 0; k < x.size(); ++k) grad.gates[i].W[k] += ds[i] * x[k];
                grad.gates[i].b += ds[i];
                std::vector<double> dexpert(upstream.size());
                for (std::size_t k = 0; k < dexpert.size(); ++k)
                    dexpert[k] = weights[i] * upstream[k];
                backprop_expert(phi.experts[i], x, dexpert, grad.experts[i]);
            }
            break;
        }
        case GatingVariant::Sparse: {
            const std::vector<double> scores = gate_scores(x, phi.gates);
            const std::vector<std::size_t> selected = top_k_indices(scores, phi.config.top_k);
            std::vector<double> restricted(selected.size());
            for (std::size_t i = 0; i < selected.size(); ++i) restricted[i] = scores[selected[i]];
            const std::vector<double> weights = stable_softmax(restricted);
            std::vector<double> dweights(selected.size());
            std::vector<std::vector<double>> outs(selected.size());
            for (std::size_t i = 0; i < selected.size(); ++i) {
                outs[i] = expert_forward(x, phi.experts[selected[i]]);
                dweights[i] = dot(upstream, outs[i]);
            }
            const std::vector<double> ds = softmax_backward(weights, dweights);
            for (std::size_t i = 0; i < selected.size(); ++i) {
                const std::size_t e = selected[i];
                for (std::size_t k = 0; k < x.size(); ++k) grad.gates[e].W[k] += ds[i] * x[k];
                grad.gates[e].b += ds[i];
                std::vector<double> dexpert(upstream.size());
                for (std::size_t k = 0; k < dexpert.size(); ++k)
                    dexpert[k] = weights[i] * upstream[k];
                backprop_expert(phi.experts[e], x, dexpert, grad.experts[e]);
            }
            break;
        }
        case GatingVariant::Shared: {
            const std::size_t n_s = phi.config.n_shared;
            for (std::size_t i = 0; i < n_s; ++i)
                backprop_expert(phi.experts[i], x, upstream, grad.experts[i]);
            const std::vector<double> probs = stable_softmax(gate_scores(x, phi.gates));
            const std::vector<std::size_t> selected =
                top_k_indices(probs, phi.config.top_k_routed);
            // Unselected routed gates still receive gradient through the
            // softmax normalization; the mask alone is held constant.
            std::vector<double> dprobs(probs.size(), 0.0);
            for (std::size_t idx : selected) {
                const std::vector<double> out = expert_forward(x, phi.experts[n_s + idx]);
                dprobs[idx] = dot(upstream, out);
                std::vector<double> dexpert(upstream.size());
                for (std::size_t k = 0; k < dexpert.size(); ++k)
                    dexpert[k] = probs[idx] * upstream[k];
                backprop_expert(phi.experts[n_s + idx], x, dexpert, grad.experts[n_s + idx]);
            }
            const std::vector<double> ds = softmax_backward(probs, dprobs);
            for (std::size_t i = 0; i < probs.size(); ++i) {
                for (std::size_t k = 0; k < x.size(); ++k) grad.gates[i].W[k] += ds[i] * x[k];
                grad.gates[i].b += ds[i];
            }
            break;
        }
    }
}

}  // namespace detail

/// Analytic reverse-mode gradient of the mean batch loss with respect to
/// every MoE parameter. Sequential over the batch for determinism.
inline GradResult grad_model_loss(const MoEParams& phi, const FrozenBackbone& bb,
                                  const Dataset& batch) {
    if (batch.size() == 0) throw std::invalid_argument("grad_model_loss: empty batch");
    GradResult result;
    result.grad = zero_gradient(phi);
    const std::size_t classes = bb.classes();
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const std::size_t label = batch.labels[s];
        if (label >= classes) throw std::invalid_argument("grad_model_loss: label out of range");
        const auto x_raw = batch.features.row(s);
        std::vector<double> enc = matvec(bb.encoder, x_raw);
        for (std::size_t i = 0; i < enc.size(); ++i) enc[i] += bb.encoder_bias[i];
        std::vector<double> y = moe_forward(enc, phi);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += enc[i];
        std::vector<double> logits = matvec(bb.readout, y);
        for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += bb.readout_bias[i];

        const double m = *std::max_element(logits.begin(), logits.end());
        double sum = 0.0;
        for (double l : logits) sum += std::exp(l - m);
        result.loss += m + std::log(sum) - logits[label];
        std::size_t argmax = 0;
        for (std::size_t i = 1; i < logits.size(); ++i)
            if (logits[i] > logits[argmax]) argmax = i;
        if (argmax == label) result.accuracy += 1.0;

        std::vector<double> dlogits(classes);
        for (std::size_t i = 0; i < classes; ++i)
            dlogits[i] = std::exp(logits[i] - m) / sum - (i == label ? 1.0 : 0.0);
        std::vector<double> dy(phi.config.d, 0.0);
        for (std::size_t i = 0; i < classes; ++i)
            for (std::size_t k = 0; k < dy.size(); ++k) dy[k] += bb.readout(i, k) * dlogits[i];
        detail::backprop_moe(phi, enc, dy, result.grad);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    result.loss *= inv;
    result.accuracy *= inv;
    for (auto& g : result.grad.gates) {
        for (double& w : g.W) w *= inv;
        g.b *= inv;
    }
    for (auto& e : result.grad.experts) {
        for (double& a : e.A.data) a *= inv;
        for (double& u : e.u) u *= inv;
        for (double& b : e.B.data) b *= inv;
        for (double& v : e.v) v *= inv;
    }
    return result;
}

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 32;
    double learning_rate = 0.05;
    std::uint64_t init_seed = 1;
    std::uint64_t data_order_seed = 2;
    double init_scale = 1.0;

    void validate() const {
        if (steps < 1 || batch_size < 1)
            throw std::invalid_argument("train config: steps and batch_size must be positive");
        if (!(learning_rate >= 0.0))
            throw std::invalid_argument("train config: negative learning rate");
        if (!(init_scale > 0.0)) throw std::invalid_argument("train config: init_scale <= 0");
    }

    bool operator==(const TrainConfig&) const = default;
};

/// Seeded initialization: gate weights then experts, in index order; zero
/// biases; 1/sqrt(fan-in) scaling.
inline MoEParams init_moe(const MoEConfig& config, RngStream& rng, double init_scale) {
    config.validate();
    const double gate_scale = init_scale / std::sqrt(static_cast<double>(config.d));
    const double hidden_scale = init_scale / std::sqrt(static_cast<double>(config.h));
    MoEParams phi;
    phi.config = config;
    phi.gates.resize(config.gate_count());
    for (auto& g : phi.gates) {
        g.W = rng.normal_vector(config.d, gate_scale);
        g.b = 0.0;
    }
    phi.experts.resize(config.n);
    for (auto& e : phi.experts) {
        e.A = rng.normal_matrix(config.h, config.d, gate_scale);
        e.u.assign(config.h, 0.0);
        e.B = rng.normal_matrix(config.d, config.h, hidden_scale);
        e.v.assign(config.d, 0.0);
    }
    return phi;
}

struct TrainResult {
    MoEParams params;
    std::vector<double> loss_history;  // batch loss before each update
};

/// Plain SGD over seeded minibatches. The checkpoint is a pure function of
/// (dataset spec, backbone, config); divergence raises with the step index.
inline TrainResult train_sgd(const Dataset& train_data, const FrozenBackbone& bb,
                             const MoEConfig& moe_config, const TrainConfig& tc) {
    tc.validate();
    if (train_data.size() == 0) throw std::invalid_argument("train_sgd: empty training set");
    RngStream init_rng(tc.init_seed);
    RngStream order_rng(tc.data_order_seed);
    TrainResult result;
    result.params = init_moe(moe_config, init_rng, tc.init_scale);
    result.loss_history.reserve(tc.steps);
    Dataset batch;
    batch.features = Matrix(tc.batch_size, train_data.features.cols);
    batch.labels.resize(tc.batch_size);
    for (std::size_t step = 0; step < tc.steps; ++step) {
        for (std::size_t s = 0; s < tc.batch_size; ++s) {
            const std::size_t idx = order_rng.next_below(train_data.size());
            for (std::size_t j = 0; j < batch.features.cols; ++j)
                batch.features(s, j) = train_data.features(idx, j);
            batch.labels[s] = train_data.labels[idx];
        }
        const GradResult g = grad_model_loss(result.params, bb, batch);
        if (!std::isfinite(g.loss))
            throw std::runtime_error("train_sgd: loss diverged at step " + std::to_string(step));
        result.loss_history.push_back(g.loss);
        for (std::size_t i = 0; i < result.params.gates.size(); ++i) {
            for (std::size_t k = 0; k < result.params.gates[i].W.size(); ++k)
                result.params.gates[i].W[k] -= tc.learning_rate * g.grad.gates[i].W[k];
            result.params.gates[i].b -= tc.learning_rate * g.grad.gates[i].b;
        }
        for (std::size_t i = 0; i < result.params.experts.size(); ++i) {
            ExpertParams& e = result.params.experts[i];
            const ExpertParams& ge = g.grad.experts[i];
            for (std::size_t k = 0; k < e.A.data.size(); ++k)
                e.A.data[k] -= tc.learning_rate * ge.A.data[k];
            for (std::size_t k = 0; k < e.u.size(); ++k) e.u[k] -= tc.learning_rate * ge.u[k];
            for (std::size_t k = 0; k < e.B.data.size(); ++k)
                e.B.data[k] -= tc.learning_rate * ge.B.data[k];
            for (std::size_t k = 0; k < e.v.size(); ++k) e.v[k] -= tc.learning_rate * ge.v[k];
        }
    }
    return result;
}

inline TrainResult train_sgd(const DatasetSpec& spec, const FrozenBackbone& bb,
                             const MoEConfig& moe_config, const TrainConfig& tc) {
    if (bb.input_dim() != spec.input_dim)
        throw std::invalid_argument("train_sgd: backbone input dim != dataset input dim");
    const SplitDataset data = gen_blobs(spec);
    return train_sgd(data.train, bb, moe_config, tc);
}

/// Loss closure over a fixed evaluation set, for interpolation curves.
inline std::function<double(const MoEParams&)> make_loss_fn(const FrozenBackbone& bb,
                                                            const Dataset& eval_set) {
    return [&bb, &eval_set](const MoEParams& phi) { return model_loss(phi, bb, eval_set).loss; };
}

inline std::function<double(const MoEParams&)> make_accuracy_fn(const FrozenBackbone& bb,
                                                                const Dataset& eval_set) {
    return
        [&bb, &eval_set](const MoEParams& phi) { return model_loss(phi, bb, eval_set).accuracy; };
}

}  // namespace rebasin
