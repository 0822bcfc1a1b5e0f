// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowlab/net.hpp"

#include <cmath>
#include <memory>
#include <string>

namespace flowlab::net {

using autodiff::Tape;
using autodiff::Var;

namespace {

constexpr int kTimeFeatures = 64;
constexpr double kTimeScale = 1000.0;

std::string block_prefix(int layer, const char* stream) {
    return "blocks." + std::to_string(layer) + "." + stream + ".";
}

Var linear(Tape& tape, Var x, const std::string& name) {
    return autodiff::add_row(autodiff::matmul(x, tape.param(name + ".weight")), tape.param(name + ".bias"));
}

Matrix time_features(std::span<const ModelInput> batch) {
    const int half = kTimeFeatures / 2;
    Matrix f(static_cast<Eigen::Index>(batch.size()), kTimeFeatures);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            const double angle = kTimeScale * batch[b].t * freq;
            f(static_cast<Eigen::Index>(b), i) = std::cos(angle);
            f(static_cast<Eigen::Index>(b), half + i) = std::sin(angle);
        }
    }
    return f;
}

struct Stream {
    Var x;
    Eigen::Index group_rows;  // tokens per batch element
    const char* name;
};

}  // namespace

void ModelConfig::validate() const {
    if (layers < 1) throw ConfigError("model.layers must be >= 1");
    if (heads < 1) throw ConfigError("model.heads must be >= 1");
    if (head_dim < 2 || head_dim % 2 != 0) throw ConfigError("model.head_dim must be a positive even integer");
    if (hidden != heads * head_dim) throw ConfigError("model.hidden must equal heads * head_dim");
    if (!(ffn_mult > 0.0)) throw ConfigError("model.ffn_mult must be positive");
    if (patch < 1) throw ConfigError("model.patch must be >= 1");
    if (vocab < 1) throw ConfigError("model.vocab must be >= 1");
    if (channels < 1) throw ConfigError("model.channels must be >= 1");
    rope.validate();
    if (rope.head_dim != head_dim) throw ConfigError("model.rope.head_dim must equal model.head_dim");
}

int ModelConfig::ffn_hidden() const {
    return static_cast<int>(std::lround(ffn_mult * hidden));
}

std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> parameter_shapes(const ModelConfig& config) {
    config.validate();
    const Eigen::Index h = config.hidden;
    const Eigen::Index f = config.ffn_hidden();
    std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> shapes;
    auto lin = [&](const std::string& name, Eigen::Index in, Eigen::Index out) {
        shapes[name + ".weight"] = {in, out};
        shapes[name + ".bias"] = {1, out};
    };
    lin("time.fc1", kTimeFeatures, h);
    lin("time.fc2", h, h);
    shapes["txt.embed"] = {config.vocab, h};
    lin("img.in", config.patch_dim(), h);
    for (int l = 0; l < config.layers; ++l) {
        for (const char* stream : {"txt", "img"}) {
            const std::string p = block_prefix(l, stream);
            lin(p + "mod", h, 4 * h);
            lin(p + "qkv", h, 3 * h);
            shapes[p + "q_norm"] = {1, config.head_dim};
            shapes[p + "k_norm"] = {1, config.head_dim};
            lin(p + "out", h, h);
            lin(p + "ffn1", h, f);
            lin(p + "ffn2", f, h);
        }
    }
    lin("final.mod", h, 2 * h);
    lin("final.out", h, config.patch_dim());
    return shapes;
}

ParameterStore init_parameters(const ModelConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    ParameterStore params;
    for (const auto& [name, shape] : parameter_shapes(config)) {
        Matrix m;
        const bool is_bias = name.ends_with(".bias");
        const bool is_gain = name.ends_with("_norm");
        if (is_gain) {
            m = Matrix::Ones(shape.first, shape.second);
        } else if (is_bias || name.starts_with("final.out")) {
            m = Matrix::Zero(shape.first, shape.second);
        } else {
            m.resize(shape.first, shape.second);
            for (Eigen::Index i = 0; i < m.size(); ++i) {
                double z = rng.normal();
                while (std::abs(z) > 2.0) z = rng.normal();
                m.data()[i] = 0.02 * z;
            }
        }
        params.emplace(name, std::move(m));
    }
    return params;
}

Matrix patchify(const Latent& canvas, int height, int width, int channels, int patch) {
    if (height % patch != 0 || width % patch != 0) {
        throw ShapeError("patch " + std::to_string(patch) + " does not divide " + std::to_string(height) + "x" +
                         std::to_string(width));
    }
    if (canvas.size() != static_cast<Eigen::Index>(height) * width * channels) {
        throw ShapeError("canvas has " + std::to_string(canvas.size()) + " values, expected " +
                         std::to_string(height * width * channels));
    }
    const int gh = height / patch;
    const int gw = width / patch;
    Matrix tokens(gh * gw, patch * patch * channels);
    for (int ty = 0; ty < gh; ++ty) {
        for (int tx = 0; tx < gw; ++tx) {
            int col = 0;
            for (int dy = 0; dy < patch; ++dy) {
                for (int dx = 0; dx < patch; ++dx) {
                    for (int c = 0; c < channels; ++c) {
                        const int y = ty * patch + dy;
                        const int x = tx * patch + dx;
                        tokens(ty * gw + tx, col++) = canvas[(y * width + x) * channels + c];
                    }
                }
            }
        }
    }
    return tokens;
}

Latent unpatchify(const Matrix& tokens, int height, int width, int channels, int patch) {
    const int gh = height / patch;
    const int gw = width / patch;
    if (height % patch != 0 || width % patch != 0 || tokens.rows() != gh * gw ||
        tokens.cols() != patch * patch * channels) {
        throw ShapeError("token matrix does not match the declared grid");
    }
    Latent canvas(static_cast<Eigen::Index>(height) * width * channels);
    for (int ty = 0; ty < gh; ++ty) {
        for (int tx = 0; tx < gw; ++tx) {
            int col = 0;
            for (int dy = 0; dy < patch; ++dy) {
                for (int dx = 0; dx < patch; ++dx) {
                    for (int c = 0; c < channels; ++c) {
                        const int y = ty * patch + dy;
                        const int x = tx * patch + dx;
                        canvas[(y * width + x) * channels + c] = tokens(ty * gw + tx, col++);
                    }
                }
            }
        }
    }
    return canvas;
}

std::vector<Latent> split_output(const Matrix& output, std::size_t batch, const ModelConfig& config,
                                 const ImageGeometry& geometry) {
    const Eigen::Index per = (geometry.height / config.patch) * (geometry.width / config.patch);
    if (output.rows() != per * static_cast<Eigen::Index>(batch)) throw ShapeError("split_output row count");
    std::vector<Latent> out;
    out.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        out.push_back(unpatchify(output.middleRows(static_cast<Eigen::Index>(b) * per, per), geometry.height,
                                 geometry.width, config.channels, config.patch));
    }
    return out;
}

Matrix join_canvases(std::span<const Latent> canvases, const ModelConfig& config, const ImageGeometry& geometry) {
    const Eigen::Index per = (geometry.height / config.patch) * (geometry.width / config.patch);
    Matrix out(per * static_cast<Eigen::Index>(canvases.size()), config.patch_dim());
    for (std::size_t b = 0; b < canvases.size(); ++b) {
        out.middleRows(static_cast<Eigen::Index>(b) * per, per) =
            patchify(canvases[b], geometry.height, geometry.width, config.channels, config.patch);
    }
    return out;
}

Var forward(Tape& tape, const ModelConfig& config, const ImageGeometry& geometry, std::span<const ModelInput> batch,
            const ForwardOptions& options) {
    config.validate();
    if (batch.empty()) throw ShapeError("forward on an empty batch");
    if (geometry.height % config.patch != 0 || geometry.width % config.patch != 0) {
        throw ShapeError("patch size does not divide the image grid");
    }
    const auto B = static_cast<Eigen::Index>(batch.size());
    const auto L = static_cast<Eigen::Index>(batch.front().tokens.size());
    const bool with_condition = batch.front().condition.has_value();
    const int gh = geometry.height / config.patch;
    const int gw = geometry.width / config.patch;
    const Eigen::Index nt = static_cast<Eigen::Index>(gh) * gw;
    const Eigen::Index nc = with_condition ? nt : 0;
    const Eigen::Index ni = nc + nt;
    const Eigen::Index n = L + ni;
    if (L < 1) throw ShapeError("prompt must contain at least one token");

    std::vector<int> all_tokens;
    Matrix patches(B * ni, config.patch_dim());
    for (Eigen::Index b = 0; b < B; ++b) {
        const ModelInput& in = batch[static_cast<std::size_t>(b)];
        if (static_cast<Eigen::Index>(in.tokens.size()) != L || in.condition.has_value() != with_condition) {
            throw ShapeError("batch elements differ in prompt length or conditioning");
        }
        for (int id : in.tokens) {
            if (id < 0 || id >= config.vocab) {
                throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " +
                                 std::to_string(config.vocab));
            }
        }
        all_tokens.insert(all_tokens.end(), in.tokens.begin(), in.tokens.end());
        if (with_condition) {
            patches.middleRows(b * ni, nc) =
                patchify(*in.condition, geometry.height, geometry.width, config.channels, config.patch);
        }
        patches.middleRows(b * ni + nc, nt) =
            patchify(in.image, geometry.height, geometry.width, config.channels, config.patch);
    }

    // Joint token order per element: text, condition image, target image.
    auto layout = positional::joint_layout(static_cast<int>(L), gh, gw, with_condition, options.frames);
    if (options.target_ids) {
        if (static_cast<Eigen::Index>(options.target_ids->size()) != nt) throw ShapeError("target_ids length");
        std::copy(options.target_ids->begin(), options.target_ids->end(), layout.ids.end() - nt);
    }
    std::vector<positional::PositionId> ids;
    ids.reserve(static_cast<std::size_t>(B * n));
    for (Eigen::Index b = 0; b < B; ++b) ids.insert(ids.end(), layout.ids.begin(), layout.ids.end());
    auto table = std::make_shared<const positional::RotationTable>(positional::rotation_table(ids, config.rope));

    std::vector<Eigen::Index> joint_index;  // row of concat(text, image) feeding each joint row
    std::vector<Eigen::Index> text_back, image_back;
    joint_index.reserve(static_cast<std::size_t>(B * n));
    for (Eigen::Index b = 0; b < B; ++b) {
        for (Eigen::Index j = 0; j < L; ++j) {
            text_back.push_back(static_cast<Eigen::Index>(joint_index.size()));
            joint_index.push_back(b * L + j);
        }
        for (Eigen::Index j = 0; j < ni; ++j) {
            image_back.push_back(static_cast<Eigen::Index>(joint_index.size()));
            joint_index.push_back(B * L + b * ni + j);
        }
    }

    using namespace autodiff;
    const Eigen::Index h = config.hidden;
    Var temb = linear(tape, silu(linear(tape, tape.constant(time_features(batch)), "time.fc1")), "time.fc2");
    Var cond = silu(temb);

    Stream streams[2] = {
        {embedding(tape.param("txt.embed"), all_tokens), L, "txt"},
        {linear(tape, tape.constant(std::move(patches)), "img.in"), ni, "img"},
    };

    for (int l = 0; l < config.layers; ++l) {
        Var q[2], k[2], v[2], mod[2];
        for (int s = 0; s < 2; ++s) {
            const std::string p = block_prefix(l, streams[s].name);
            mod[s] = linear(tape, cond, p + "mod");
            Var hs = modulate(layer_norm(streams[s].x), slice_cols(mod[s], 0, h), slice_cols(mod[s], h, h),
                              streams[s].group_rows);
            Var qkv = linear(tape, hs, p + "qkv");
            q[s] = head_rms_norm(slice_cols(qkv, 0, h), tape.param(p + "q_norm"), config.head_dim);
            k[s] = head_rms_norm(slice_cols(qkv, h, h), tape.param(p + "k_norm"), config.head_dim);
            v[s] = slice_cols(qkv, 2 * h, h);
        }
        Var qj = rotary(gather_rows(concat_rows({q[0], q[1]}), joint_index), table, config.head_dim);
        Var kj = rotary(gather_rows(concat_rows({k[0], k[1]}), joint_index), table, config.head_dim);
        Var vj = gather_rows(concat_rows({v[0], v[1]}), joint_index);
        Var o = attention(qj, kj, vj, config.heads, config.head_dim, n);
        const std::vector<Eigen::Index>* back[2] = {&text_back, &image_back};
        for (int s = 0; s < 2; ++s) {
            const std::string p = block_prefix(l, streams[s].name);
            Var& x = streams[s].x;
            x = add(x, linear(tape, gather_rows(o, *back[s]), p + "out"));
            Var hs = modulate(layer_norm(x), slice_cols(mod[s], 2 * h, h), slice_cols(mod[s], 3 * h, h),
                              streams[s].group_rows);
            x = add(x, linear(tape, gelu(linear(tape, hs, p + "ffn1")), p + "ffn2"));
        }
    }

    std::vector<Eigen::Index> target_rows;
    target_rows.reserve(static_cast<std::size_t>(B * nt));
    for (Eigen::Index b = 0; b < B; ++b) {
        for (Eigen::Index j = 0; j < nt; ++j) target_rows.push_back(b * ni + nc + j);
    }
    Var x = gather_rows(streams[1].x, std::move(target_rows));
    Var fmod = linear(tape, cond, "final.mod");
    Var hs = modulate(layer_norm(x), slice_cols(fmod, 0, h), slice_cols(fmod, h, h), nt);
    return linear(tape, hs, "final.out");
}

std::vector<Latent> predict(const ParameterStore& params, const ModelConfig& config, const ImageGeometry& geometry,
                            std::span<const ModelInput> batch, const ForwardOptions& options) {
    Tape tape(&params, /*record=*/false);
    Var out = forward(tape, config, geometry, batch, options);
    return split_output(out.value(), batch.size(), config, geometry);
}

sampler::VelocityOracle make_oracle(const ParameterStore& params, const ModelConfig& config, ImageGeometry geometry,
                                    ForwardOptions options) {
    return [&params, config, geometry, options](std::span<const Latent> xs, std::span<const double> ts,
                                                std::span<const sampler::Condition> conds) {
        std::vector<ModelInput> batch(xs.size());
        for (std::size_t i = 0; i < xs.size(); ++i) {
            batch[i].tokens = conds[i].tokens;
            batch[i].image = xs[i];
            batch[i].condition = conds[i].image;
            batch[i].t = ts[i];
        }
        return predict(params, config, geometry, batch, options);
    };
}

LossAndGradients gradient(const ParameterStore& params, const LossClosure& loss) {
    Tape tape(&params, /*record=*/true);
    Var out = loss(tape);
    if (out.rows() != 1 || out.cols() != 1) throw ShapeError("loss closure must return a scalar");
    const double value = out.value()(0, 0);
    if (!std::isfinite(value)) throw NumericError("loss is not finite");
    tape.backward(out);
    LossAndGradients result{value, tape.parameter_gradients()};
    for (const auto& [name, m] : params) {
        if (!result.grads.contains(name)) result.grads.emplace(name, Matrix::Zero(m.rows(), m.cols()));
    }
    return result;
}

}  // namespace flowlab::net
