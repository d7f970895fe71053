#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pia/bpl.hpp"
#include "pia/checkpoint.hpp"
#include "pia/dbdl.hpp"
#include "pia/encoder.hpp"
#include "pia/rng.hpp"

namespace pia {

struct ModelConfig {
    EncoderConfig encoder;
    bool use_dbdl = true;
    std::size_t attention_kernel = 7;
    std::size_t num_ids = 1;      // training identities K
    std::size_t num_clothes = 1;  // training clothing classes
};

struct NamedTensor {
    std::string name;
    Tensor* tensor;
    bool trainable;
};

/// Everything learned: backbone, attention, per-branch batch norms, heads.
/// Without DBDL the attention, the clothing batch norm and the clothing head
/// exist but receive no gradients.
struct PiaModel {
    ModelConfig cfg;
    EncoderParams encoder;
    BatchNormLayer bn_clothing;
    dbdl::AttentionParams attention;
    ClassifierHeads heads;

    static PiaModel init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.encoder.validate();
        Rng rng(mix_seed(seed, 0x5eed));
        PiaModel m;
        m.cfg = cfg;
        m.encoder = init_encoder(cfg.encoder, rng);
        const std::size_t d = cfg.encoder.embedding_dim();
        m.bn_clothing = BatchNormLayer::init(d);
        m.attention = dbdl::init_attention(cfg.attention_kernel, rng);
        m.heads.id_head = init_linear(d, cfg.num_ids, rng);
        m.heads.clothing_head = init_linear(d, cfg.num_clothes, rng);
        return m;
    }

    std::size_t embedding_dim() const { return cfg.encoder.embedding_dim(); }

    std::vector<NamedTensor> tensors() {
        std::vector<NamedTensor> out;
        for (std::size_t i = 0; i < encoder.blocks.size(); ++i) {
            const auto p = "encoder.block" + std::to_string(i);
            out.push_back({p + ".weight", &encoder.blocks[i].weight, true});
            out.push_back({p + ".bias", &encoder.blocks[i].bias, true});
        }
        const bool d = cfg.use_dbdl;
        const bool bn = cfg.encoder.use_bn;
        out.push_back({"bn_id.gamma", &encoder.final_bn.gamma, bn});
        out.push_back({"bn_id.beta", &encoder.final_bn.beta, bn});
        out.push_back({"bn_id.running_mean", &encoder.final_bn.stats.running_mean, false});
        out.push_back({"bn_id.running_var", &encoder.final_bn.stats.running_var, false});
        out.push_back({"bn_clothing.gamma", &bn_clothing.gamma, d && bn});
        out.push_back({"bn_clothing.beta", &bn_clothing.beta, d && bn});
        out.push_back({"bn_clothing.running_mean", &bn_clothing.stats.running_mean, false});
        out.push_back({"bn_clothing.running_var", &bn_clothing.stats.running_var, false});
        out.push_back({"attention.w1", &attention.w1, d});
        out.push_back({"attention.b1", &attention.b1, d});
        out.push_back({"attention.lambda_raw", &attention.lambda_raw, d});
        out.push_back({"head.id.weight", &heads.id_head.weight, true});
        out.push_back({"head.id.bias", &heads.id_head.bias, true});
        out.push_back({"head.clothing.weight", &heads.clothing_head.weight, d});
        out.push_back({"head.clothing.bias", &heads.clothing_head.bias, d});
        return out;
    }

    std::vector<Tensor*> trainable() {
        std::vector<Tensor*> out;
        for (auto& nt : tensors()) {
            if (nt.trainable) out.push_back(nt.tensor);
        }
        return out;
    }

    struct Forward {
        Var z;
        std::optional<dbdl::MaskPair> masks;
        Var f;
        std::optional<Var> f_c;
    };

    /// images: [N,3,H,W].
    Forward forward(Tape& tape, Tensor images, Mode mode) {
        for (auto& nt : tensors()) nt.tensor->requires_grad = nt.trainable && mode == Mode::train;
        Forward out;
        out.z = forward_backbone(tape.constant(std::move(images)), encoder, cfg.encoder);
        BatchNormLayer* bn_id = cfg.encoder.use_bn ? &encoder.final_bn : nullptr;
        if (!cfg.use_dbdl) {
            out.f = embed(out.z, cfg.encoder.pooling, bn_id, mode);
            return out;
        }
        out.masks = dbdl::masks(out.z, attention);
        auto pair = dbdl::disentangle(out.z, *out.masks, cfg.encoder.pooling, bn_id,
                                      cfg.encoder.use_bn ? &bn_clothing : nullptr, mode);
        out.f = pair.f;
        out.f_c = pair.f_c;
        return out;
    }
};

/// Serializes model tensors (and optionally a prototype bank) with the
/// resolved configuration text.
inline Checkpoint make_checkpoint(PiaModel& model, const bpl::PrototypeBank* bank, std::string config_text) {
    Checkpoint ck;
    ck.config_text = std::move(config_text);
    ck.tensors.emplace_back("model.num_ids", Tensor::scalar(static_cast<double>(model.cfg.num_ids)));
    ck.tensors.emplace_back("model.num_clothes", Tensor::scalar(static_cast<double>(model.cfg.num_clothes)));
    for (auto& nt : model.tensors()) ck.tensors.emplace_back(nt.name, Tensor(nt.tensor->shape, nt.tensor->data));
    if (bank) {
        const Shape rows{bank->num_ids, bank->dim};
        ck.tensors.emplace_back("bank.protos_v", Tensor(rows, bank->protos_v));
        ck.tensors.emplace_back("bank.protos_i", Tensor(rows, bank->protos_i));
        std::vector<double> fv, fi;
        for (bool b : bank->initialized_v) fv.push_back(b ? 1.0 : 0.0);
        for (bool b : bank->initialized_i) fi.push_back(b ? 1.0 : 0.0);
        ck.tensors.emplace_back("bank.initialized_v", Tensor({bank->num_ids}, fv));
        ck.tensors.emplace_back("bank.initialized_i", Tensor({bank->num_ids}, fi));
        ck.tensors.emplace_back("bank.alpha", Tensor::scalar(bank->alpha));
        ck.tensors.emplace_back("bank.iteration", Tensor::scalar(static_cast<double>(bank->iteration)));
    }
    return ck;
}

/// Copies checkpoint tensors into a model built from `cfg` (class counts are
/// taken from the checkpoint).
inline PiaModel model_from_checkpoint(const Checkpoint& ck, ModelConfig cfg) {
    cfg.num_ids = static_cast<std::size_t>(ck.at("model.num_ids").item());
    cfg.num_clothes = static_cast<std::size_t>(ck.at("model.num_clothes").item());
    PiaModel m = PiaModel::init(cfg, 0);
    for (auto& nt : m.tensors()) {
        const Tensor& src = ck.at(nt.name);
        if (src.shape != nt.tensor->shape) {
            throw ShapeError("checkpoint tensor " + nt.name + " has shape " + to_string(src.shape) + ", model expects " +
                             to_string(nt.tensor->shape));
        }
        nt.tensor->data = src.data;
    }
    return m;
}

inline std::optional<bpl::PrototypeBank> bank_from_checkpoint(const Checkpoint& ck) {
    const Tensor* pv = ck.find("bank.protos_v");
    if (!pv) return std::nullopt;
    bpl::PrototypeBank b = bpl::PrototypeBank::create(pv->dim(0), pv->dim(1), ck.at("bank.alpha").item());
    b.protos_v = pv->data;
    b.protos_i = ck.at("bank.protos_i").data;
    for (std::size_t k = 0; k < b.num_ids; ++k) {
        b.initialized_v[k] = ck.at("bank.initialized_v")[k] != 0.0;
        b.initialized_i[k] = ck.at("bank.initialized_i")[k] != 0.0;
    }
    b.iteration = static_cast<std::uint64_t>(ck.at("bank.iteration").item());
    return b;
}

}  // namespace pia
