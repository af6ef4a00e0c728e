#include <gtest/gtest.h>

#include <random>

#include "bimix/forward.hpp"
#include "bimix/peft.hpp"
#include "gradcheck.hpp"

using bimix::AdapterRole;
using bimix::AdapterSet;
using bimix::init_adapters;
using bimix::LinearTarget;
using bimix::MaskKind;
using bimix::ModelConfig;
using bimix::PeftConfig;
using bimix::PeftKind;
using bimix::Tensor;
using bimix::Weights;
using D = Tensor<double>;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 12;
    cfg.d_mlp = 20;
    cfg.vocab_size = 32;
    cfg.max_seq_len = 16;
    return cfg;
}

PeftConfig peft(PeftKind kind, int rank = 4) {
    PeftConfig p;
    p.kind = kind;
    p.rank = rank;
    return p;
}

}  // namespace

TEST(AdaptedLinear, LoraWithZeroBEqualsBase) {
    ModelConfig cfg = tiny_config();
    auto w = Weights<double>::random_init(cfg, 1);
    auto set = init_adapters<double>(cfg, peft(PeftKind::lora), AdapterRole::causal, 7, w);
    std::mt19937 rng(2);
    D x = D::zeros({3, static_cast<std::size_t>(cfg.d_model)});
    bimix::fill_uniform(x, rng, -1.0, 1.0);
    D adapted = bimix::adapted_linear(x, w.layers[0].w_q, &set, 0, LinearTarget::q);
    D base = bimix::matmul(x, w.layers[0].w_q);
    EXPECT_EQ(adapted.data(), base.data());
}

TEST(AdaptedLinear, DoraInitEqualsBase) {
    ModelConfig cfg = tiny_config();
    auto w = Weights<double>::random_init(cfg, 3);
    auto set = init_adapters<double>(cfg, peft(PeftKind::dora), AdapterRole::causal, 7, w);

    // Column-norm oracle: the initial magnitude must equal norms computed
    // directly from the base weight.
    const auto& wq = w.layers[0].w_q;
    for (std::size_t j = 0; j < wq.dim(1); ++j) {
        double norm = 0.0;
        for (std::size_t i = 0; i < wq.dim(0); ++i) norm += wq.at(i, j) * wq.at(i, j);
        norm = std::sqrt(norm);
        EXPECT_NEAR(set.layers[0].linear[0].magnitude.data()[j], norm, 1e-12);
    }

    std::mt19937 rng(4);
    D x = D::zeros({3, static_cast<std::size_t>(cfg.d_model)});
    bimix::fill_uniform(x, rng, -1.0, 1.0);
    D adapted = bimix::adapted_linear(x, wq, &set, 0, LinearTarget::q);
    D base = bimix::matmul(x, wq);
    for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(adapted.data()[i], base.data()[i], 1e-6);
}

TEST(AdaptedLinear, Ia3OnesEqualsBaseThroughBlock) {
    ModelConfig cfg = tiny_config();
    auto w = Weights<double>::random_init(cfg, 5);
    auto set = init_adapters<double>(cfg, peft(PeftKind::ia3), AdapterRole::causal, 7, w);
    std::vector<int> tokens{4, 9, 2};
    auto with = bimix::model_forward<double>(cfg, w, &set, tokens, MaskKind::causal, nullptr);
    auto without = bimix::model_forward<double>(cfg, w, nullptr, tokens, MaskKind::causal, nullptr);
    EXPECT_EQ(with.logits.data(), without.logits.data());
}

TEST(AdaptedLinear, RankAboveMinDimensionIsConfigError) {
    ModelConfig cfg = tiny_config();
    auto w = Weights<double>::random_init(cfg, 6);
    EXPECT_THROW(init_adapters<double>(cfg, peft(PeftKind::lora, cfg.d_model + 1), AdapterRole::causal, 7, w),
                 std::invalid_argument);
}

TEST(InitAdapters, FreshAdaptersAreNoOpForEveryKind) {
    ModelConfig cfg = tiny_config();
    auto w = Weights<double>::random_init(cfg, 8);
    std::vector<int> tokens{1, 2, 3, 4};
    auto plain = bimix::model_forward<double>(cfg, w, nullptr, tokens, MaskKind::causal, nullptr);
    for (PeftKind kind : {PeftKind::lora, PeftKind::dora, PeftKind::ia3}) {
        auto set = init_adapters<double>(cfg, peft(kind), AdapterRole::causal, 9, w);
        auto adapted = bimix::model_forward<double>(cfg, w, &set, tokens, MaskKind::causal, nullptr);
        double max_diff = 0.0;
        for (std::size_t i = 0; i < plain.logits.numel(); ++i) {
            max_diff = std::max(max_diff, std::abs(plain.logits.data()[i] - adapted.logits.data()[i]));
        }
        EXPECT_LE(max_diff, kind == PeftKind::dora ? 1e-12 : 0.0) << bimix::to_string(kind);
    }
}

TEST(InitAdapters, RolesDrawFromDifferentSeedStreams) {
    ModelConfig cfg = tiny_config();
    auto w = Weights<double>::random_init(cfg, 10);
    auto c = init_adapters<double>(cfg, peft(PeftKind::lora), AdapterRole::causal, 42, w);
    auto b = init_adapters<double>(cfg, peft(PeftKind::lora), AdapterRole::bidirectional, 42, w);
    EXPECT_NE(c.layers[0].linear[0].a.data(), b.layers[0].linear[0].a.data());
}

TEST(InitAdapters, SameSeedReproducesIdenticalParameters) {
    ModelConfig cfg = tiny_config();
    auto w = Weights<double>::random_init(cfg, 11);
    auto a = init_adapters<double>(cfg, peft(PeftKind::lora), AdapterRole::causal, 42, w);
    auto b = init_adapters<double>(cfg, peft(PeftKind::lora), AdapterRole::causal, 42, w);
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        for (std::size_t t = 0; t < 6; ++t) {
            EXPECT_EQ(a.layers[l].linear[t].a.data(), b.layers[l].linear[t].a.data());
        }
    }
}

TEST(ParamCount, LinearInRank) {
    ModelConfig cfg = tiny_config();
    EXPECT_EQ(bimix::adapter_set_param_count(cfg, peft(PeftKind::lora, 8)),
              2 * bimix::adapter_set_param_count(cfg, peft(PeftKind::lora, 4)));
}

TEST(ParamCount, Ia3IndependentOfRank) {
    ModelConfig cfg = tiny_config();
    EXPECT_EQ(bimix::adapter_set_param_count(cfg, peft(PeftKind::ia3, 4)),
              bimix::adapter_set_param_count(cfg, peft(PeftKind::ia3, 16)));
}

// Closed-form count audited against an exhaustive registry walk.
TEST(ParamCount, RegistryWalkMatchesClosedForm) {
    ModelConfig cfg = tiny_config();
    auto w = Weights<double>::random_init(cfg, 12);
    for (PeftKind kind : {PeftKind::lora, PeftKind::dora, PeftKind::ia3}) {
        auto set = init_adapters<double>(cfg, peft(kind), AdapterRole::causal, 13, w);
        long long walked = 0;
        set.visit([&](const std::string&, D& t) { walked += static_cast<long long>(t.numel()); });
        EXPECT_EQ(walked, bimix::adapter_set_param_count(cfg, peft(kind))) << bimix::to_string(kind);
    }
}

TEST(ParamCount, DualSetPlusThetaIdentity) {
    ModelConfig cfg = tiny_config();
    const long long dual_r4 = bimix::trainable_param_count(cfg, peft(PeftKind::lora, 4), 2, true);
    const long long single_r8 = bimix::trainable_param_count(cfg, peft(PeftKind::lora, 8), 1, false);
    EXPECT_EQ(dual_r4, single_r8 + 2LL * cfg.n_layers);
}

TEST(ParamNames, FollowRoleLayerModuleScheme) {
    ModelConfig cfg = tiny_config();
    auto w = Weights<double>::random_init(cfg, 14);
    auto set = init_adapters<double>(cfg, peft(PeftKind::lora), AdapterRole::bidirectional, 15, w);
    std::vector<std::string> names;
    set.visit([&](const std::string& name, D&) { names.push_back(name); });
    EXPECT_EQ(names.front(), "peft.bidirectional.0.q.A");
    EXPECT_EQ(names.back(), "peft.bidirectional.1.down.B");
}

TEST(Gradients, LoraAndDoraPathsMatchFiniteDifferences) {
    ModelConfig cfg = tiny_config();
    auto w = Weights<double>::random_init(cfg, 16);
    std::mt19937 rng(17);
    D x = D::zeros({3, static_cast<std::size_t>(cfg.d_model)});
    bimix::fill_uniform(x, rng, -1.0, 1.0);
    D weights = D::zeros({3, static_cast<std::size_t>(cfg.d_model)});
    bimix::fill_uniform(weights, rng, -1.0, 1.0);

    for (PeftKind kind : {PeftKind::lora, PeftKind::dora}) {
        auto set = init_adapters<double>(cfg, peft(kind), AdapterRole::causal, 18, w);
        auto& ad = set.layers[0].linear[0];
        bimix::fill_uniform(ad.b, rng, -0.3, 0.3);  // leave the no-op point
        auto loss = [&] {
            D out = bimix::adapted_linear(x, w.layers[0].w_q, &set, 0, LinearTarget::q);
            return bimix::sum(bimix::mul(out, weights));
        };
        std::vector<D*> params{&ad.a, &ad.b};
        if (kind == PeftKind::dora) params.push_back(&ad.magnitude);
        auto rep = testutil::finite_diff_check(loss, params, 1e-5);
        EXPECT_LT(rep.max_rel_err, 1e-5) << bimix::to_string(kind);
    }
}

TEST(Gradients, LoraBReceivesGradientAtInit) {
    ModelConfig cfg = tiny_config();
    auto w = Weights<double>::random_init(cfg, 19);
    auto set = init_adapters<double>(cfg, peft(PeftKind::lora), AdapterRole::causal, 20, w);
    std::mt19937 rng(21);
    D x = D::zeros({2, static_cast<std::size_t>(cfg.d_model)});
    bimix::fill_uniform(x, rng, -1.0, 1.0);
    bimix::sum(bimix::adapted_linear(x, w.layers[0].w_q, &set, 0, LinearTarget::q)).backward();
    double norm = 0.0;
    for (double g : set.layers[0].linear[0].b.grad()) norm += std::abs(g);
    EXPECT_GT(norm, 0.0);
}
