#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gradcheck.hpp"
#include "relkd/relation.hpp"

using namespace relkd;
using relkd::testing::grad_check;
using relkd::testing::NamedLeaf;
using relkd::testing::random_stochastic;
using relkd::testing::random_tensor;

namespace {

using T64 = Tensor<double>;

ModelConfig make_config(int layers, int hidden, int heads, int vocab = 11) {
    ModelConfig c;
    c.num_layers = layers;
    c.hidden_size = hidden;
    c.num_heads = heads;
    c.ffn_size = 2 * hidden;
    c.vocab_size = vocab;
    c.max_seq_len = 8;
    c.dropout = 0.0;
    return c;
}

template <typename T>
void jitter(EncoderParams<T>& p, std::uint64_t seed, double scale) {
    Rng rng(seed);
    for (auto& n : p.named()) {
        for (auto& v : n.tensor->mutable_data()) {
            v += static_cast<T>((2 * rng.uniform() - 1) * scale);
        }
    }
}

std::vector<T64> random_heads(std::size_t count, std::size_t n, std::size_t d, Rng& rng) {
    std::vector<T64> out;
    for (std::size_t h = 0; h < count; ++h) {
        out.push_back(random_tensor({n, d}, rng));
    }
    return out;
}

// Softmax(a b^T / sqrt(d)) for one head, straight loops.
std::vector<double> naive_relation(const T64& a, const T64& b, const std::vector<std::uint8_t>& keys_on = {}) {
    const auto n = a.rows(), d = a.cols();
    std::vector<double> r(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
            if (!keys_on.empty() && !keys_on[j]) {
                continue;
            }
            double dot = 0;
            for (std::size_t k = 0; k < d; ++k) {
                dot += a.at(i, k) * b.at(j, k);
            }
            s[j] = dot / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (keys_on.empty() || keys_on[j]) {
                z += std::exp(s[j] - mx);
            }
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (keys_on.empty() || keys_on[j]) {
                r[i * n + j] = std::exp(s[j] - mx) / z;
            }
        }
    }
    return r;
}

RelationSet<double> as_set(std::vector<T64> heads) {
    RelationSet<double> s;
    s.heads = std::move(heads);
    return s;
}

std::vector<int> toy_tokens() { return {3, 7, 9}; }

} // namespace

TEST_CASE("parse_relations and relation_names") {
    CHECK(parse_relations("qq,kk,vv") == default_alpha());
    CHECK(relation_names(default_alpha()) == std::vector<std::string>{"qq", "kk", "vv"});
    CHECK(relation_names(parse_relations("all")).size() == 9);
    CHECK(relation_names(parse_relations("vk,qv")) == std::vector<std::string>{"qv", "vk"});
    CHECK(relation_names(parse_relations("vv")) == std::vector<std::string>{"vv"});
    try {
        parse_relations("qq,kx");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("'kx'") != std::string::npos);
        CHECK(msg.find("qk") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_relations(""), ConfigError);
    CHECK_THROWS_AS(parse_relations("qqq"), ConfigError);
}

TEST_CASE("DistillConfig::validate") {
    const auto t = make_config(4, 64, 4);
    const auto s = make_config(2, 32, 2);
    DistillConfig cfg;
    cfg.relation_heads = 8;
    CHECK_NOTHROW(cfg.validate(t, s));
    CHECK(cfg.resolved_teacher_layer(t) == 4);
    CHECK(cfg.resolved_student_layer(s) == 2);

    cfg.relation_heads = 7;
    try {
        cfg.validate(t, s);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("d_h=64") != std::string::npos);
        CHECK(msg.find("A_r=7") != std::string::npos);
    }
    cfg.relation_heads = 8;
    cfg.teacher_layer = 5;
    CHECK_THROWS_AS(cfg.validate(t, s), ConfigError);
    cfg.teacher_layer = 2;
    cfg.student_layer = -1;
    CHECK_THROWS_AS(cfg.validate(t, s), ConfigError);
    cfg.student_layer = 1;
    cfg.alpha = AlphaMatrix{};
    CHECK_THROWS_AS(cfg.validate(t, s), ConfigError);
}

TEST_CASE("regroup_heads: index-arithmetic oracles") {
    Rng rng(5);
    SUBCASE("A_r == A_h is the identity") {
        auto heads = random_heads(3, 4, 2, rng);
        auto r = regroup_heads<double>(heads, 3);
        REQUIRE(r.heads.size() == 3);
        for (std::size_t a = 0; a < 3; ++a) {
            CHECK(std::ranges::equal(r.heads[a].data(), heads[a].data()));
        }
    }
    SUBCASE("A_h=2, d_k=2, A_r=4: one column per relation head") {
        auto heads = random_heads(2, 3, 2, rng);
        auto r = regroup_heads<double>(heads, 4);
        REQUIRE(r.heads.size() == 4);
        const std::array<std::pair<int, int>, 4> map{{{0, 0}, {0, 1}, {1, 0}, {1, 1}}};
        for (std::size_t a = 0; a < 4; ++a) {
            CHECK(r.heads[a].shape() == Shape{3, 1});
            for (std::size_t t = 0; t < 3; ++t) {
                CHECK(r.heads[a].at(t, 0) == heads[map[a].first].at(t, map[a].second));
            }
        }
    }
    SUBCASE("A_h=2, d_k=3, A_r=3: the middle relation head straddles both attention heads") {
        auto heads = random_heads(2, 2, 3, rng);
        auto r = regroup_heads<double>(heads, 3);
        REQUIRE(r.heads.size() == 3);
        for (std::size_t t = 0; t < 2; ++t) {
            CHECK(r.heads[0].at(t, 0) == heads[0].at(t, 0));
            CHECK(r.heads[0].at(t, 1) == heads[0].at(t, 1));
            CHECK(r.heads[1].at(t, 0) == heads[0].at(t, 2));
            CHECK(r.heads[1].at(t, 1) == heads[1].at(t, 0));
            CHECK(r.heads[2].at(t, 0) == heads[1].at(t, 1));
            CHECK(r.heads[2].at(t, 1) == heads[1].at(t, 2));
        }
    }
    SUBCASE("non-divisible split names d_h and A_r") {
        auto heads = random_heads(2, 2, 3, rng);
        try {
            regroup_heads<double>(heads, 4);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("d_h=6") != std::string::npos);
            CHECK(msg.find("A_r=4") != std::string::npos);
        }
    }
}

TEST_CASE("regroup_heads: split then concatenate is the identity (random shapes)") {
    Rng rng(77);
    for (int trial = 0; trial < 60; ++trial) {
        const auto a_h = 1 + rng.below(5);
        const auto d_k = 1 + rng.below(6);
        const auto n = 1 + rng.below(5);
        const auto d_h = a_h * d_k;
        std::vector<std::size_t> divisors;
        for (std::size_t d = 1; d <= d_h; ++d) {
            if (d_h % d == 0) {
                divisors.push_back(d);
            }
        }
        const auto a_r = divisors[rng.below(divisors.size())];
        auto heads = random_heads(a_h, n, d_k, rng);
        auto r = regroup_heads<double>(heads, static_cast<int>(a_r));
        CAPTURE(a_h);
        CAPTURE(d_k);
        CAPTURE(a_r);
        REQUIRE(r.heads.size() == a_r);
        CHECK(r.head_size() == d_h / a_r);
        const auto original = concat_last<double>(heads);
        const auto rebuilt = concat_last<double>(r.heads);
        CHECK(std::ranges::equal(original.data(), rebuilt.data()));
        const auto st = r.stacked();
        CHECK(st.shape() == Shape{a_r, n, d_h / a_r});
    }
}

TEST_CASE("relation: identity inputs give the scalar softmax evaluation") {
    const T64 eye({2, 2}, {1, 0, 0, 1});
    RelationInputs<double> in;
    in.heads = {eye};
    auto r = relation(in, in);
    const double hi = std::exp(1 / std::sqrt(2.0)) / (std::exp(1 / std::sqrt(2.0)) + 1);
    CHECK(std::abs(r.heads[0].at(0, 0) - 0.66984) <= 1e-4);
    CHECK(std::abs(r.heads[0].at(0, 1) - 0.33016) <= 1e-4);
    CHECK(std::abs(r.heads[0].at(1, 0) - 0.33016) <= 1e-4);
    CHECK(std::abs(r.heads[0].at(1, 1) - 0.66984) <= 1e-4);
    CHECK(std::abs(r.heads[0].at(0, 0) - hi) <= 1e-15);
    CHECK(r.name() == "qk");
}

TEST_CASE("relation: rows are distributions and match a naive oracle, with masking") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = 2 + rng.below(5), d = 1 + rng.below(4), a_r = 1 + rng.below(3);
        RelationInputs<double> ai, aj;
        ai.heads = random_heads(a_r, n, d, rng);
        aj.heads = random_heads(a_r, n, d, rng);
        std::vector<std::uint8_t> mask(n, 1);
        const std::size_t valid = 1 + rng.below(n);
        std::fill(mask.begin() + static_cast<long>(valid), mask.end(), 0);
        auto r = relation(ai, aj, mask);
        for (std::size_t a = 0; a < a_r; ++a) {
            const auto oracle = naive_relation(ai.heads[a], aj.heads[a], mask);
            for (std::size_t i = 0; i < n; ++i) {
                double row = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    row += r.heads[a].at(i, j);
                    CHECK(std::abs(r.heads[a].at(i, j) - oracle[i * n + j]) <= 1e-12);
                    if (!mask[j]) {
                        CHECK(r.heads[a].at(i, j) == 0.0);
                    }
                }
                CHECK(std::abs(row - 1.0) <= 1e-12);
            }
        }
        CHECK(r.stacked().shape() == Shape{a_r, n, n});
    }
}

TEST_CASE("relation: float rows sum to one") {
    Rng rng(3);
    RelationInputs<float> in;
    for (int h = 0; h < 3; ++h) {
        std::vector<float> v(6 * 4);
        for (auto& x : v) {
            x = static_cast<float>(rng.normal() * 3);
        }
        in.heads.emplace_back(Shape{6, 4}, std::move(v));
    }
    auto r = relation(in, in);
    for (const auto& h : r.heads) {
        for (std::size_t i = 0; i < 6; ++i) {
            float s = 0;
            for (std::size_t j = 0; j < 6; ++j) {
                s += h.at(i, j);
            }
            CHECK(std::abs(s - 1.0f) <= 1e-6f);
        }
    }
}

TEST_CASE("relation: permuting positions permutes rows and columns") {
    Rng rng(19);
    const std::size_t n = 5, d = 3;
    RelationInputs<double> ai, aj;
    ai.heads = random_heads(2, n, d, rng);
    aj.heads = random_heads(2, n, d, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    auto permute = [&](const T64& x) {
        std::vector<double> v(x.numel());
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t k = 0; k < x.cols(); ++k) {
                v[t * x.cols() + k] = x.at(perm[t], k);
            }
        }
        return T64(x.shape(), std::move(v));
    };
    RelationInputs<double> pi, pj;
    for (std::size_t a = 0; a < 2; ++a) {
        pi.heads.push_back(permute(ai.heads[a]));
        pj.heads.push_back(permute(aj.heads[a]));
    }
    auto r = relation(ai, aj);
    auto rp = relation(pi, pj);
    for (std::size_t a = 0; a < 2; ++a) {
        for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t t = 0; t < n; ++t) {
                CHECK(std::abs(rp.heads[a].at(s, t) - r.heads[a].at(perm[s], perm[t])) <= 1e-12);
            }
        }
    }
}

TEST_CASE("relation: Q-K relation reproduces the encoder attention distributions") {
    auto c = make_config(2, 12, 3);
    auto p = init_params<double>(c, 8);
    jitter(p, 9, 0.3);
    const std::vector<int> toks{3, 5, 1, 8, 10, 4};
    ForwardOptions opt;
    opt.capture = true;
    for (int masked : {0, 2}) {
        std::vector<std::uint8_t> mask(toks.size(), 1);
        std::fill(mask.end() - masked, mask.end(), 0);
        auto out = forward<double>(toks, p, c, opt, mask);
        for (int l = 1; l <= 2; ++l) {
            const auto& layer = out.state->layer(l);
            auto r = relation(relation_inputs(layer, Role::query, 3), relation_inputs(layer, Role::key, 3), mask);
            for (std::size_t a = 0; a < 3; ++a) {
                const auto& probs = layer.probs[a];
                for (std::size_t i = 0; i < probs.numel(); ++i) {
                    CHECK(std::abs(r.heads[a].data()[i] - probs.data()[i]) <= 1e-10);
                }
            }
        }
    }
}

TEST_CASE("relation_pair_loss: closed forms and oracles") {
    SUBCASE("one-hot teacher, uniform student gives ln 2") {
        auto t = as_set({T64({2, 2}, {1, 0, 1, 0})});
        auto s = as_set({T64({2, 2}, {0.5, 0.5, 0.5, 0.5})});
        CHECK(std::abs(relation_pair_loss(t, s).item() - std::log(2.0)) <= 1e-6);
    }
    SUBCASE("identical relations give 0") {
        Rng rng(2);
        auto t = as_set({random_stochastic(4, 4, rng), random_stochastic(4, 4, rng)});
        CHECK(relation_pair_loss(t, t).item() == 0.0);
    }
    SUBCASE("random case against an explicit double sum, with padding") {
        Rng rng(31);
        for (std::size_t valid : {5u, 3u}) {
            const std::size_t n = 5, a_r = 3;
            std::vector<T64> th, sh;
            for (std::size_t a = 0; a < a_r; ++a) {
                th.push_back(random_stochastic(n, n, rng));
                sh.push_back(random_stochastic(n, n, rng));
            }
            std::vector<std::uint8_t> mask(n, 0);
            std::fill(mask.begin(), mask.begin() + static_cast<long>(valid), 1);
            double oracle = 0;
            for (std::size_t a = 0; a < a_r; ++a) {
                for (std::size_t t = 0; t < valid; ++t) {
                    for (std::size_t j = 0; j < n; ++j) {
                        const double pt = th[a].at(t, j), ps = sh[a].at(t, j);
                        oracle += pt * (std::log(std::max(pt, kKlFloor)) - std::log(std::max(ps, kKlFloor)));
                    }
                }
            }
            oracle /= static_cast<double>(a_r * valid);
            auto loss = relation_pair_loss(as_set(th), as_set(sh), mask);
            CHECK(std::abs(loss.item() - oracle) <= 1e-10);
        }
    }
    SUBCASE("head-count mismatch") {
        Rng rng(4);
        auto t = as_set({random_stochastic(2, 2, rng)});
        auto s = as_set({random_stochastic(2, 2, rng), random_stochastic(2, 2, rng)});
        CHECK_THROWS_AS(relation_pair_loss(t, s), ConfigError);
    }
    SUBCASE("gradient flows to the student side only") {
        Rng rng(6);
        auto tq = random_tensor({3, 2}, rng, 1.0, true);
        auto sq = random_tensor({3, 2}, rng, 1.0, true);
        RelationInputs<double> ti, si;
        ti.heads = {tq};
        si.heads = {sq};
        auto loss = relation_pair_loss(relation(ti, ti), relation(si, si));
        backward(loss);
        CHECK_FALSE(tq.has_grad());
        CHECK(sq.has_grad());
    }
}

TEST_CASE("distill_loss: self-distillation is zero, nine pairs sum, order invariance") {
    auto c = make_config(2, 8, 2);
    auto p = init_params<double>(c, 12);
    jitter(p, 13, 0.3);
    const std::vector<int> toks{3, 6, 9, 2, 4};
    ForwardOptions opt;
    opt.capture = true;
    auto teacher = forward<double>(toks, p, c, opt);
    auto student_params = clone_params(p, true);
    auto student = forward<double>(toks, student_params, c, opt);

    DistillConfig cfg;
    cfg.relation_heads = 4;
    auto self = distill_loss(*teacher.state, *student.state, cfg);
    CHECK(self.total.item() == 0.0);
    CHECK(self.pairs.size() == 3);

    // Perturbed student.
    auto other = init_params<double>(c, 99);
    jitter(other, 98, 0.5);
    auto so = forward<double>(toks, other, c, opt);
    cfg.alpha = parse_relations("all");
    auto all = distill_loss(*teacher.state, *so.state, cfg);
    REQUIRE(all.pairs.size() == 9);
    CHECK(all.total.item() > 0.0);

    double summed = 0;
    const auto names = relation_names(cfg.alpha);
    for (std::size_t k = 0; k < 9; ++k) {
        CHECK(all.pairs[k].first == names[k]);
        DistillConfig one = cfg;
        one.alpha = parse_relations(names[k]);
        const double v = distill_loss(*teacher.state, *so.state, one).total.item();
        CHECK(v >= 0.0);
        CHECK(std::abs(v - all.pairs[k].second) <= 1e-15);
        summed += v;
    }
    CHECK(std::abs(all.total.item() - summed) <= 1e-12);

    // Reverse and shuffled accumulation orders.
    Rng rng(1);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> vals;
        for (const auto& pr : all.pairs) {
            vals.push_back(pr.second);
        }
        rng.shuffle(vals.begin(), vals.end());
        double acc = 0;
        for (double v : vals) {
            acc += v;
        }
        CHECK(std::abs(acc - all.total.item()) <= 1e-12);
    }

    SUBCASE("value-relation only") {
        DistillConfig vv = cfg;
        vv.alpha = parse_relations("vv");
        auto r = distill_loss(*teacher.state, *so.state, vv);
        CHECK(r.pairs.size() == 1);
        CHECK(r.total.item() == all.pairs[8].second);
    }
    SUBCASE("layer out of range") {
        DistillConfig bad = cfg;
        bad.teacher_layer = 3;
        CHECK_THROWS_AS(distill_loss(*teacher.state, *so.state, bad), ConfigError);
    }
}

TEST_CASE("distill_loss: non-negative on random models") {
    Rng rng(50);
    for (int trial = 0; trial < 5; ++trial) {
        auto tc = make_config(2, 8, 2);
        auto sc = make_config(1, 4, 1 + static_cast<int>(rng.below(2)) * 1);
        auto tp = init_params<double>(tc, rng.next_u64());
        auto sp = init_params<double>(sc, rng.next_u64());
        jitter(tp, rng.next_u64(), 0.5);
        jitter(sp, rng.next_u64(), 0.5);
        const std::vector<int> toks{3, 1, 5, 7};
        ForwardOptions opt;
        opt.capture = true;
        auto t = forward<double>(toks, tp, tc, opt);
        auto s = forward<double>(toks, sp, sc, opt);
        DistillConfig cfg;
        cfg.relation_heads = 2;
        cfg.alpha = parse_relations("all");
        CHECK(distill_loss(*t.state, *s.state, cfg).total.item() >= 0.0);
    }
}

TEST_CASE("distill_loss: teacher with 4 heads, student with 2, shared A_r=4 is differentiable") {
    auto tc = make_config(1, 8, 4);
    auto sc = make_config(1, 4, 2);
    auto tp = init_params<double>(tc, 21);
    auto sp = init_params<double>(sc, 22);
    jitter(tp, 23, 0.4);
    jitter(sp, 24, 0.4);
    const std::vector<int> toks{3, 8, 2, 4};
    ForwardOptions opt;
    opt.truncate_at_layer = 1;
    auto teacher = forward<double>(toks, tp, tc, opt);
    DistillConfig cfg;
    cfg.relation_heads = 4;
    cfg.validate(tc, sc);
    auto loss_fn = [&] {
        auto s = forward<double>(toks, sp, sc, opt);
        return distill_loss(*teacher.state, *s.state, cfg).total;
    };
    CHECK(std::isfinite(loss_fn().item()));
    std::vector<NamedLeaf> leaves;
    for (auto& n : sp.named()) {
        leaves.push_back({n.name, n.tensor});
    }
    auto r = grad_check(loss_fn, leaves);
    INFO(r.worst);
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("distill_loss: student gradients match finite differences (teacher 2x8x2, student 1x8x4, |x|=3)") {
    auto tc = make_config(2, 8, 2);
    auto sc = make_config(1, 8, 4);
    auto tp = init_params<double>(tc, 61);
    auto sp = init_params<double>(sc, 62);
    jitter(tp, 63, 0.4);
    jitter(sp, 64, 0.4);
    const auto toks = toy_tokens();
    ForwardOptions topt;
    topt.capture = true;
    auto teacher = forward<double>(toks, clone_params(tp, false), tc, topt);
    DistillConfig cfg;
    cfg.relation_heads = 4;
    cfg.alpha = parse_relations("all");
    cfg.validate(tc, sc);
    ForwardOptions sopt;
    sopt.capture = true;
    auto loss_fn = [&] {
        auto s = forward<double>(toks, sp, sc, sopt);
        return distill_loss(*teacher.state, *s.state, cfg).total;
    };
    std::vector<NamedLeaf> leaves;
    for (auto& n : sp.named()) {
        leaves.push_back({n.name, n.tensor});
    }
    auto r = grad_check(loss_fn, leaves);
    INFO(r.worst);
    CHECK(r.checked > 300);
    CHECK(r.max_rel_error < 1e-4);

    SUBCASE("teacher parameters receive no gradient") {
        auto tp_live = clone_params(tp, true);
        auto t_live = forward<double>(toks, tp_live, tc, topt);
        auto s = forward<double>(toks, sp, sc, sopt);
        backward(distill_loss(*t_live.state, *s.state, cfg).total);
        for (auto& n : tp_live.named()) {
            CHECK_FALSE(n.tensor->has_grad());
        }
    }
}

TEST_CASE("distill_loss: two-token input with padding, gradient check") {
    auto tc = make_config(1, 4, 2);
    auto sc = make_config(1, 4, 1);
    auto tp = init_params<double>(tc, 71);
    auto sp = init_params<double>(sc, 72);
    jitter(tp, 73, 0.5);
    jitter(sp, 74, 0.5);
    const std::vector<int> toks{5, 9, 0};
    const std::vector<std::uint8_t> mask{1, 1, 0};
    ForwardOptions opt;
    opt.capture = true;
    auto teacher = forward<double>(toks, tp, tc, opt, mask);
    DistillConfig cfg;
    cfg.relation_heads = 2;
    auto loss_fn = [&] {
        auto s = forward<double>(toks, sp, sc, opt, mask);
        return distill_loss(*teacher.state, *s.state, cfg, mask).total;
    };
    // Padding must not matter: same value on the unpadded prefix.
    const std::vector<int> prefix{5, 9};
    auto t2 = forward<double>(prefix, tp, tc, opt);
    auto s2 = forward<double>(prefix, sp, sc, opt);
    CHECK(std::abs(distill_loss(*t2.state, *s2.state, cfg).total.item() - loss_fn().item()) <= 1e-12);

    std::vector<NamedLeaf> leaves;
    for (auto& n : sp.named()) {
        leaves.push_back({n.name, n.tensor});
    }
    auto r = grad_check(loss_fn, leaves);
    INFO(r.worst);
    CHECK(r.max_rel_error < 1e-4);
}
