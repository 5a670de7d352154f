#include "doctest.h"

#include <cmath>
#include <sstream>

#include "unitlm/model.hpp"
#include "unitlm/rng.hpp"

using namespace unitlm;

static ModelConfig tiny_config(int vocab = 13, bool tied = true) {
    ModelConfig c;
    c.layers = 2;
    c.hidden = 8;
    c.heads = 2;
    c.vocab = vocab;
    c.maxlen = 12;
    c.mlp_mult = 4;
    c.tie_output = tied;
    return c;
}

TEST_CASE("count_params matches a hand expansion") {
    ModelConfig c;
    c.layers = 1;
    c.hidden = 2;
    c.heads = 1;
    c.vocab = 3;
    c.maxlen = 2;
    c.tie_output = true;
    // embed 6 + pos 4 + attn 4*(4+2)=24 + mlp 32+10 + norms 8 + final 4
    CHECK(count_params(c) == 88);
    c.tie_output = false;
    CHECK(count_params(c) == 94);
}

TEST_CASE("count_params equals the allocated tensor sizes") {
    for (bool tied : {true, false}) {
        ModelConfig c = tiny_config(29, tied);
        c.layers = 3;
        c.hidden = 12;
        c.heads = 3;
        auto p = ModelParams<float>::shaped(c);
        CHECK(p.total_size() == count_params(c));
    }
}

TEST_CASE("reference-scale parameter counts land near the published sizes") {
    ModelConfig small;
    small.layers = 12;
    small.hidden = 768;
    small.heads = 12;
    small.vocab = 50272 + 1000 + 5;
    small.maxlen = 2048;
    small.tie_output = true;
    double rel_small = std::abs(static_cast<double>(count_params(small)) - 125e6) / 125e6;
    CHECK(rel_small < 0.05);

    ModelConfig mid = small;
    mid.layers = 24;
    mid.hidden = 1024;
    mid.heads = 16;
    double rel_mid = std::abs(static_cast<double>(count_params(mid)) - 350e6) / 350e6;
    CHECK(rel_mid < 0.05);
}

TEST_CASE("init is deterministic and respects parameter kinds") {
    ModelConfig c = tiny_config();
    auto a = init_params<float>(c, 5);
    auto b = init_params<float>(c, 5);
    auto d = init_params<float>(c, 6);
    bool same = true, diff = false;
    std::vector<const Tensor<float>*> ta, tb, td;
    a.visit([&](const std::string&, const Tensor<float>& t, ParamKind) { ta.push_back(&t); });
    b.visit([&](const std::string&, const Tensor<float>& t, ParamKind) { tb.push_back(&t); });
    d.visit([&](const std::string&, const Tensor<float>& t, ParamKind) { td.push_back(&t); });
    for (size_t i = 0; i < ta.size(); ++i) {
        same = same && ta[i]->v == tb[i]->v;
        diff = diff || ta[i]->v != td[i]->v;
    }
    CHECK(same);
    CHECK(diff);

    for (float v : a.layers[0].ln1_g.v) {
        CHECK(v == 1.0f);
    }
    for (float v : a.layers[1].b_in.v) {
        CHECK(v == 0.0f);
    }
    double sum2 = 0;
    for (float v : a.tok_embed.v) {
        sum2 += static_cast<double>(v) * v;
    }
    double std_est = std::sqrt(sum2 / a.tok_embed.size());
    CHECK(std_est > 0.01);
    CHECK(std_est < 0.03);
}

TEST_CASE("invalid configs are rejected") {
    ModelConfig c = tiny_config();
    c.heads = 3;
    CHECK_THROWS_AS(ModelParams<float>::shaped(c), Error);
    c = tiny_config();
    c.vocab = 0;
    CHECK_THROWS_AS(count_params(c), Error);
}

TEST_CASE("zeroed output projection gives uniform predictions") {
    ModelConfig c = tiny_config(13, false);
    auto p = init_params<double>(c, 3);
    p.out_proj.zero();
    std::vector<TokenId> ids = {0, 5, 2, 9};
    auto logits = forward(c, p, ids);
    for (double v : logits) {
        CHECK(v == 0.0);
    }
    std::vector<uint8_t> mask = {0, 1, 1, 1};
    CHECK(loss_value(c, p, ids, mask) == doctest::Approx(std::log(13.0)).epsilon(1e-12));
}

TEST_CASE("forward is strictly causal") {
    ModelConfig c = tiny_config();
    for (uint64_t seed : {11u, 12u, 13u}) {
        auto p = init_params<double>(c, seed);
        Rng rng(seed * 100);
        std::vector<TokenId> ids(10);
        for (auto& id : ids) {
            id = static_cast<TokenId>(rng.below(13));
        }
        auto base = forward(c, p, ids);
        for (int j = 1; j < 10; ++j) {
            auto mutated = ids;
            mutated[j] = static_cast<TokenId>((mutated[j] + 1 + rng.below(12)) % 13);
            auto out = forward(c, p, mutated);
            for (int t = 0; t < j; ++t) {
                for (int v = 0; v < 13; ++v) {
                    REQUIRE(out[t * 13 + v] == base[t * 13 + v]);
                }
            }
            bool changed = false;
            for (int v = 0; v < 13; ++v) {
                changed = changed || out[j * 13 + v] != base[j * 13 + v];
            }
            REQUIRE(changed);
        }
    }
}

TEST_CASE("forward validates inputs") {
    ModelConfig c = tiny_config();
    auto p = init_params<float>(c, 1);
    CHECK_THROWS_AS(forward(c, p, {}), Error);
    CHECK_THROWS_AS(forward(c, p, {13}), Error);
    CHECK_THROWS_AS(forward(c, p, std::vector<TokenId>(13, 0)), Error);
    CHECK_NOTHROW(forward(c, p, std::vector<TokenId>(12, 0)));
}

TEST_CASE("analytic gradients match central finite differences") {
    for (bool tied : {true, false}) {
        for (uint64_t seed : {1u, 2u, 3u}) {
            ModelConfig c = tiny_config(13, tied);
            auto p = init_params<double>(c, seed);
            Rng rng(seed + 50);
            std::vector<TokenId> ids(9);
            for (auto& id : ids) {
                id = static_cast<TokenId>(rng.below(13));
            }
            std::vector<uint8_t> mask(9, 0);
            for (int i = 1; i < 9; ++i) {
                mask[i] = seed == 2 ? (i >= 3 && i <= 5) : 1;
            }

            auto grads = ModelParams<double>::shaped(c);
            grads.zero();
            loss_and_backward(c, p, ids, mask, grads, 1.0);
            std::vector<double> analytic;
            grads.visit([&](const std::string&, const Tensor<double>& t, ParamKind) {
                analytic.insert(analytic.end(), t.v.begin(), t.v.end());
            });

            const double h = 1e-5;
            size_t idx = 0;
            double worst = 0;
            p.visit([&](const std::string& name, Tensor<double>& t, ParamKind) {
                for (size_t i = 0; i < t.v.size(); ++i) {
                    double orig = t.v[i];
                    t.v[i] = orig + h;
                    double fp = loss_value(c, p, ids, mask);
                    t.v[i] = orig - h;
                    double fm = loss_value(c, p, ids, mask);
                    t.v[i] = orig;
                    double num = (fp - fm) / (2 * h);
                    double ana = analytic[idx++];
                    double rel = std::abs(ana - num) / std::max({1e-6, std::abs(ana), std::abs(num)});
                    if (rel > worst) {
                        worst = rel;
                    }
                    if (rel > 1e-4) {
                        CAPTURE(name);
                        CAPTURE(i);
                        CAPTURE(ana);
                        CAPTURE(num);
                        REQUIRE(rel <= 1e-4);
                    }
                }
            });
            CHECK(worst <= 1e-4);
        }
    }
}

TEST_CASE("segment-masked loss equals the mean of its per-position terms") {
    ModelConfig c = tiny_config();
    auto p = init_params<double>(c, 9);
    std::vector<TokenId> ids = {3, 1, 4, 1, 5, 9, 2, 6};
    std::vector<uint8_t> seg(8, 0);
    seg[3] = seg[4] = seg[5] = 1;
    double seg_loss = loss_value(c, p, ids, seg);
    double acc = 0;
    for (int i = 3; i <= 5; ++i) {
        std::vector<uint8_t> one(8, 0);
        one[i] = 1;
        acc += loss_value(c, p, ids, one);
    }
    CHECK(seg_loss == doctest::Approx(acc / 3).epsilon(1e-12));
}

TEST_CASE("loss rejects bad masks") {
    ModelConfig c = tiny_config();
    auto p = init_params<double>(c, 9);
    std::vector<TokenId> ids = {3, 1, 4, 1};
    CHECK_THROWS_AS(loss_value(c, p, ids, {0, 0, 0, 0}), Error);
    CHECK_THROWS_AS(loss_value(c, p, ids, {1, 1, 1, 1}), Error);
    CHECK_THROWS_AS(loss_value(c, p, ids, {0, 1, 1}), Error);
}

TEST_CASE("fifty descent steps on one batch reduce the loss") {
    ModelConfig c = tiny_config();
    auto p = init_params<float>(c, 4);
    std::vector<std::vector<TokenId>> batch = {
        {9, 0, 1, 2, 3, 12}, {9, 3, 2, 1, 0, 12}, {10, 5, 6, 7, 12}, {9, 1, 1, 2, 12}};
    auto batch_loss = [&](bool with_grads, ModelParams<float>* grads) {
        float total = 0;
        for (const auto& ids : batch) {
            std::vector<uint8_t> mask(ids.size(), 1);
            mask[0] = 0;
            if (with_grads) {
                total += loss_and_backward(c, p, ids, mask, *grads, 1.0f / batch.size());
            } else {
                total += loss_value(c, p, ids, mask);
            }
        }
        return total / batch.size();
    };
    auto grads = ModelParams<float>::shaped(c);
    float first = batch_loss(false, nullptr);
    for (int step = 0; step < 50; ++step) {
        grads.zero();
        batch_loss(true, &grads);
        std::vector<Tensor<float>*> pt, gt;
        p.visit([&](const std::string&, Tensor<float>& t, ParamKind) { pt.push_back(&t); });
        grads.visit([&](const std::string&, Tensor<float>& t, ParamKind) { gt.push_back(&t); });
        for (size_t i = 0; i < pt.size(); ++i) {
            for (size_t j = 0; j < pt[i]->v.size(); ++j) {
                pt[i]->v[j] -= 0.1f * gt[i]->v[j];
            }
        }
    }
    float last = batch_loss(false, nullptr);
    CHECK(last < first);
    CHECK(last < 0.8f * first);
}

TEST_CASE("incremental decode equals the uncached forward at every prefix") {
    ModelConfig c = tiny_config();
    for (uint64_t seed : {21u, 22u}) {
        auto p = init_params<double>(c, seed);
        Rng rng(seed);
        std::vector<TokenId> ids(12);
        for (auto& id : ids) {
            id = static_cast<TokenId>(rng.below(13));
        }
        auto st = make_decode_state<double>(c);
        for (int t = 0; t < 12; ++t) {
            auto step_logits = decode_step(c, p, st, ids[t]);
            std::vector<TokenId> prefix(ids.begin(), ids.begin() + t + 1);
            auto full = forward(c, p, prefix);
            for (int v = 0; v < 13; ++v) {
                REQUIRE(step_logits[v] == doctest::Approx(full[t * 13 + v]).epsilon(1e-10));
            }
        }
        CHECK_THROWS_AS(decode_step(c, p, st, 0), Error);
    }
}

TEST_CASE("decode state copies fork cleanly") {
    ModelConfig c = tiny_config();
    auto p = init_params<double>(c, 31);
    auto st = make_decode_state<double>(c);
    decode_step(c, p, st, 3);
    decode_step(c, p, st, 7);
    auto fork = st;
    auto a = decode_step(c, p, st, 1);
    auto b = decode_step(c, p, fork, 1);
    CHECK(a == b);
    auto c2 = decode_step(c, p, fork, 2);
    CHECK(a != c2);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    ModelConfig c = tiny_config(17, false);
    auto p = init_params<float>(c, 77);
    std::ostringstream out;
    save_checkpoint(out, c, p);
    std::string bytes = out.str();

    std::istringstream in(bytes);
    Checkpoint ck = load_checkpoint(in);
    CHECK(ck.config.layers == c.layers);
    CHECK(ck.config.vocab == 17);
    CHECK(ck.config.tie_output == false);
    std::ostringstream out2;
    save_checkpoint(out2, ck.config, ck.params);
    CHECK(out2.str() == bytes);

    auto logits_a = forward(c, p, {0, 1, 2});
    auto logits_b = forward(ck.config, ck.params, {0, 1, 2});
    CHECK(logits_a == logits_b);
}

TEST_CASE("checkpoint loader rejects malformed files") {
    ModelConfig c = tiny_config();
    auto p = init_params<float>(c, 1);
    std::ostringstream out;
    save_checkpoint(out, c, p);
    std::string good = out.str();

    auto code_of = [](const std::string& s) {
        std::istringstream in(s);
        try {
            load_checkpoint(in);
            return ErrorCode::invalid_argument;
        } catch (const Error& e) {
            return e.code();
        }
    };
    CHECK(code_of("SPCKX\n") == ErrorCode::unparseable);
    CHECK(code_of("SPCK1\nlayers=2\n\n") == ErrorCode::unparseable);
    CHECK(code_of(good.substr(0, good.size() - 10)) == ErrorCode::io_failure);
    CHECK(code_of(good + "x") == ErrorCode::unparseable);

    std::string renamed = good;
    size_t pos = renamed.find("tok_embed dims");
    renamed.replace(pos, 3, "zok");
    CHECK(code_of(renamed) == ErrorCode::unparseable);

    std::string extra_key = good;
    extra_key.insert(6, "bogus=1\n");
    CHECK(code_of(extra_key) == ErrorCode::unparseable);
}
