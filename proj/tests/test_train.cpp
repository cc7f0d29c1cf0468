#include <algorithm>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "relkd/archive.hpp"
#include "relkd/error.hpp"
#include "relkd/experiment.hpp"
#include "relkd/synthetic.hpp"
#include "relkd/trainer.hpp"

using namespace relkd;

namespace {

ModelConfig tiny_model(int layers, int hidden, int heads, int vocab) {
    ModelConfig c;
    c.num_layers = layers;
    c.hidden_size = hidden;
    c.num_heads = heads;
    c.ffn_size = 2 * hidden;
    c.vocab_size = vocab;
    c.max_seq_len = 16;
    c.dropout = 0.0;
    return c;
}

// Tokens 5.. are the symbols, the last id is the separator.
std::vector<std::vector<int>> copy_language(std::size_t n, int symbols, int len, std::uint64_t seed) {
    SyntheticOptions o;
    o.num_symbols = symbols;
    o.min_len = o.max_len = len;
    o.seed = seed;
    std::vector<std::vector<int>> docs;
    for (const auto& d : synthetic_corpus(n, o)) {
        std::vector<int> ids;
        for (const auto& t : split_whitespace(d.text)) {
            ids.push_back(t == kSeparator ? kNumReserved + symbols : kNumReserved + std::stoi(t.substr(1)));
        }
        docs.push_back(ids);
    }
    return docs;
}

// Gives `p` the gradient `g` through loss = sum(p * g).
void set_grad(Tensor<double>& p, const std::vector<double>& g) {
    p.zero_grad();
    backward(sum(mul(p, Tensor<double>(p.shape(), g))));
}

template <typename T>
std::vector<std::vector<T>> snapshot(const EncoderParams<T>& p) {
    std::vector<std::vector<T>> out;
    for (const auto& [name, t] : p.named()) {
        out.emplace_back(t->data().begin(), t->data().end());
    }
    return out;
}

} // namespace

TEST_CASE("lr_at: warmup then linear decay") {
    AdamConfig c;
    c.peak_lr = 1.0;
    c.warmup_steps = 10;
    c.total_steps = 110;
    CHECK(lr_at(c, 0) == 0.0);
    CHECK(lr_at(c, 5) == doctest::Approx(0.5));
    CHECK(lr_at(c, 10) == 1.0);
    CHECK(lr_at(c, 60) == doctest::Approx(0.5));
    CHECK(lr_at(c, 110) == 0.0);
    CHECK(lr_at(c, 500) == 0.0);
    double peak = 0.0;
    std::int64_t argmax = -1;
    for (std::int64_t s = 0; s <= 110; ++s) {
        if (lr_at(c, s) > peak) {
            peak = lr_at(c, s);
            argmax = s;
        }
        if (s > 0) {
            CHECK(std::abs(lr_at(c, s) - lr_at(c, s - 1)) <= 0.1 + 1e-12);
        }
    }
    CHECK(argmax == 10);
    c.warmup_steps = 0;
    CHECK(lr_at(c, 1) == doctest::Approx(1.0 - 1.0 / 110));
}

TEST_CASE("AdamConfig: validation") {
    AdamConfig c;
    c.total_steps = 10;
    c.validate();
    auto bad = c;
    bad.peak_lr = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.beta2 = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.warmup_steps = 11;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("AdamW: three steps against a hand recurrence") {
    AdamConfig c;
    c.peak_lr = 0.1;
    c.warmup_steps = 1;
    c.total_steps = 5;
    c.weight_decay = 0.5;
    c.clip_norm = 0.0;
    auto mat = Tensor<double>(Shape{1, 2}, {0.3, -0.7}, true);
    auto vec = Tensor<double>(Shape{2}, {1.5, 2.0}, true);
    AdamW<double> opt({{"w", &mat}, {"b", &vec}}, c);

    const std::vector<std::vector<double>> grads{{1.0, -2.0}, {0.5, 0.25}, {-3.0, 0.0}};
    double pm[2] = {0.3, -0.7}, pv[2] = {1.5, 2.0};
    double m[2][2] = {}, v[2][2] = {};
    for (int t = 1; t <= 3; ++t) {
        set_grad(mat, grads[t - 1]);
        set_grad(vec, grads[t - 1]);
        const auto info = opt.step();
        // lr: 0.1 at t=1 (end of warmup), then 0.1*(5-t)/4
        const double lr = t == 1 ? 0.1 : 0.1 * (5 - t) / 4.0;
        CHECK(info.lr == doctest::Approx(lr).epsilon(1e-15));
        for (int which = 0; which < 2; ++which) {
            double* p = which == 0 ? pm : pv;
            for (int k = 0; k < 2; ++k) {
                const double g = grads[t - 1][k];
                m[which][k] = 0.9 * m[which][k] + 0.1 * g;
                v[which][k] = 0.999 * v[which][k] + 0.001 * g * g;
                const double mh = m[which][k] / (1 - std::pow(0.9, t));
                const double vh = v[which][k] / (1 - std::pow(0.999, t));
                const double decay = which == 0 ? lr * 0.5 * p[k] : 0.0;
                p[k] = p[k] - decay - lr * mh / (std::sqrt(vh) + 1e-6);
            }
        }
        for (int k = 0; k < 2; ++k) {
            CHECK(std::abs(mat.data()[k] - pm[k]) <= 1e-12);
            CHECK(std::abs(vec.data()[k] - pv[k]) <= 1e-12);
        }
    }
    CHECK(opt.step_count() == 3);
}

TEST_CASE("AdamW: constant unit gradient moves each step by lr/(1+eps)") {
    AdamConfig c;
    c.peak_lr = 0.01;
    c.total_steps = 50;
    c.weight_decay = 0.0;
    c.clip_norm = 0.0;
    auto p = Tensor<double>(Shape{1}, {0.0}, true);
    AdamW<double> opt({{"p", &p}}, c);
    double expected = 0.0;
    for (int t = 1; t <= 20; ++t) {
        set_grad(p, {1.0});
        opt.step();
        expected -= lr_at(c, t) / (1.0 + 1e-6);
        CHECK(std::abs(p.data()[0] - expected) <= 1e-12);
    }
}

TEST_CASE("AdamW: zero gradients leave vectors fixed and only decay matrices") {
    AdamConfig c;
    c.peak_lr = 0.1;
    c.total_steps = 10;
    c.weight_decay = 0.2;
    auto mat = Tensor<double>(Shape{2, 2}, {1, 2, 3, 4}, true);
    auto vec = Tensor<double>(Shape{2}, {5, 6}, true);
    AdamW<double> opt({{"w", &mat}, {"b", &vec}}, c);
    const auto info = opt.step();
    CHECK(info.grad_norm == 0.0);
    CHECK(std::vector<double>(vec.data().begin(), vec.data().end()) == std::vector<double>{5, 6});
    const double f = 1.0 - lr_at(c, 1) * 0.2;
    for (int k = 0; k < 4; ++k) {
        CHECK(mat.data()[k] == doctest::Approx((k + 1) * f).epsilon(1e-14));
    }
    c.weight_decay = 0.0;
    auto still = Tensor<double>(Shape{2, 2}, {1, 2, 3, 4}, true);
    AdamW<double> plain({{"w", &still}}, c);
    for (int i = 0; i < 5; ++i) {
        plain.step();
    }
    CHECK(std::vector<double>(still.data().begin(), still.data().end()) == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("AdamW: global-norm clipping") {
    AdamConfig c;
    c.peak_lr = 0.1;
    c.total_steps = 10;
    c.clip_norm = 1.0;
    auto a = Tensor<double>(Shape{1}, {0.0}, true);
    auto b = Tensor<double>(Shape{1}, {0.0}, true);
    AdamW<double> opt({{"a", &a}, {"b", &b}}, c);
    set_grad(a, {3.0});
    set_grad(b, {4.0});
    const auto info = opt.step();
    CHECK(info.clipped);
    CHECK(info.grad_norm == doctest::Approx(5.0));
    CHECK(opt.first_moment(0)[0] == doctest::Approx(0.1 * 0.6).epsilon(1e-14));
    CHECK(opt.first_moment(1)[0] == doctest::Approx(0.1 * 0.8).epsilon(1e-14));
    set_grad(a, {0.3});
    set_grad(b, {0.4});
    CHECK_FALSE(opt.step().clipped);
}

TEST_CASE("AdamW: a non-finite gradient names the parameter and changes nothing") {
    AdamConfig c;
    c.total_steps = 10;
    auto a = Tensor<double>(Shape{2}, {1.0, 2.0}, true);
    auto b = Tensor<double>(Shape{2}, {3.0, 4.0}, true);
    AdamW<double> opt({{"layer1.ffn.w1", &a}, {"layer2.attn.wq", &b}}, c);
    set_grad(a, {1.0, 1.0});
    set_grad(b, {std::numeric_limits<double>::quiet_NaN(), 0.0});
    try {
        opt.step();
        FAIL("expected NonFiniteGradientError");
    } catch (const NonFiniteGradientError& e) {
        CHECK(e.param() == "layer2.attn.wq");
        CHECK(std::string(e.what()).find("layer2.attn.wq") != std::string::npos);
    }
    CHECK(opt.step_count() == 0);
    CHECK(a.data()[0] == 1.0);
    CHECK(b.data()[1] == 4.0);
    CHECK(opt.first_moment(0)[0] == 0.0);
    set_grad(b, {std::numeric_limits<double>::infinity(), 0.0});
    CHECK_THROWS_AS(opt.step(), NonFiniteGradientError);
}

TEST_CASE("metrics: format and parse round trip, wall time kept apart") {
    MetricRecord r;
    r.step = 12;
    r.lr = 7.2e-05;
    r.loss = 0.41;
    r.min_loss = 0.39;
    r.grad_norm = 0.8;
    r.extra = {{"loss.qq", 0.1}, {"loss.vv", 1.0 / 3.0}};
    r.wall_ms = 431.5;
    const auto line = format_metric(r);
    CHECK(line.rfind("step=12 lr=7.2e-05 loss=0.41 min_loss=0.39 grad_norm=0.8 loss.qq=0.1 loss.vv=", 0) == 0);
    CHECK(line.find("wall") == std::string::npos);
    const auto back = parse_metric(line);
    CHECK(back.step == 12);
    CHECK(back.loss == r.loss);
    CHECK(back.get("loss.vv").value() == 1.0 / 3.0);
    CHECK_FALSE(back.get("nothing").has_value());
    CHECK_THROWS_AS(parse_metric("step=1 lr"), FormatError);
    CHECK_THROWS_AS(parse_metric("step=x lr=1 loss=1 min_loss=1 grad_norm=1"), FormatError);
    MetricsLog log;
    log.add(r);
    CHECK(log.timing_text() == "step=12 wall_ms=431.5\n");
}

TEST_CASE("metrics: running minimum is monotone and equals the prefix minimum (random sequences)") {
    Rng rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        MetricsLog log;
        double prefix = std::numeric_limits<double>::infinity();
        const auto n = 1 + rng.below(60);
        for (std::size_t i = 0; i < n; ++i) {
            MetricRecord r;
            r.step = static_cast<std::int64_t>(i + 1);
            r.loss = rng.normal() * 3.0;
            prefix = std::min(prefix, r.loss);
            log.add(r);
            CHECK(log.records().back().min_loss == prefix);
        }
        for (std::size_t i = 1; i < log.records().size(); ++i) {
            CHECK(log.records()[i].min_loss <= log.records()[i - 1].min_loss);
        }
        CHECK(log.min_loss() == prefix);
    }
}

TEST_CASE("metrics: head and tail means") {
    MetricsLog log;
    for (int i = 1; i <= 30; ++i) {
        MetricRecord r;
        r.step = i;
        r.loss = i;
        log.add(r);
    }
    CHECK(log.head_mean(10) == doctest::Approx(5.5));
    CHECK(log.tail_mean(10) == doctest::Approx(25.5));
    CHECK(log.tail_mean(100) == doctest::Approx(15.5));
}

TEST_CASE("pretrain_teacher: a 4-symbol copy language drops below ln V in 200 steps") {
    const auto docs = copy_language(200, 4, 4, 5);
    const auto cfg = tiny_model(2, 32, 2, kNumReserved + 5);
    TrainConfig t;
    t.steps = 200;
    t.seq_len = 12;
    t.batch_size = 8;
    t.seed = 3;
    t.adam.peak_lr = 2e-3;
    t.adam.warmup_steps = 10;
    const auto res = pretrain_teacher<float>(docs, cfg, t);
    REQUIRE(res.metrics.records().size() == 200);
    CHECK(res.metrics.tail_mean(20) < std::log(static_cast<double>(cfg.vocab_size)));
    CHECK(res.metrics.tail_mean(20) < res.metrics.head_mean(20));
    const auto& st = res.corruption;
    CHECK(std::abs(static_cast<double>(st.selected) / static_cast<double>(st.eligible) - 0.15) <= 0.01);
    CHECK(st.masked + st.randomized + st.kept == st.selected);
    for (const auto& [name, p] : res.params.named()) {
        CHECK_FALSE(p->has_grad());
    }
}

TEST_CASE("pretrain_teacher: same seed gives a byte-identical checkpoint") {
    const auto docs = copy_language(40, 4, 3, 2);
    const auto cfg = tiny_model(1, 16, 2, kNumReserved + 5);
    TrainConfig t;
    t.steps = 6;
    t.seq_len = 10;
    t.batch_size = 4;
    t.seed = 11;
    auto run = [&] {
        const auto r = pretrain_teacher<double>(docs, cfg, t);
        return serialize_archive(make_checkpoint(r.params, cfg, 6, r.rng_state, "teacher")) + r.metrics.text();
    };
    const auto a = run();
    CHECK(a == run());
    t.seed = 12;
    CHECK(a != run());
    CHECK_THROWS_AS(pretrain_teacher<double>({}, cfg, t), IngestionError);
}

TEST_CASE("distill: a student identical to the teacher stays put with near-zero loss") {
    const auto docs = copy_language(30, 4, 3, 8);
    const auto cfg = tiny_model(2, 16, 2, kNumReserved + 5);
    const auto teacher = init_params<double>(cfg, 77);
    TrainConfig t;
    t.steps = 100;
    t.seq_len = 10;
    t.batch_size = 4;
    t.adam.weight_decay = 0.0;
    DistillConfig d;
    d.relation_heads = 4;
    d.alpha = parse_relations("all");
    const auto before = snapshot(teacher);
    double first_grad = -1.0;
    const auto res = distill<double>(teacher, cfg, cfg, d, docs, t, &teacher, {},
                                     [&](std::int64_t step, const MetricRecord& r) {
                                         if (step == 1) {
                                             first_grad = r.grad_norm;
                                         }
                                     });
    CHECK(first_grad <= 1e-14);
    for (const auto& r : res.metrics.records()) {
        CHECK(r.loss <= 1e-8);
    }
    // Near a minimum Adam turns a roundoff gradient g into a step lr * g / eps,
    // so the copy wanders at the 1e-7 level instead of staying bit-exact.
    double drift = 0.0;
    const auto after = snapshot(res.student);
    for (std::size_t i = 0; i < before.size(); ++i) {
        for (std::size_t k = 0; k < before[i].size(); ++k) {
            drift = std::max(drift, std::abs(after[i][k] - before[i][k]));
        }
    }
    CHECK(drift <= 1e-6);
}

TEST_CASE("distill: teacher is untouched, loss falls, relation-head count matters") {
    const auto docs = copy_language(40, 4, 3, 8);
    auto tcfg = tiny_model(2, 16, 2, kNumReserved + 5);
    auto scfg = tiny_model(1, 8, 2, kNumReserved + 5);
    scfg.dropout = 0.1;
    const auto teacher = init_params<float>(tcfg, 5);
    const auto before = snapshot(teacher);
    TrainConfig t;
    t.steps = 40;
    t.seq_len = 10;
    t.batch_size = 4;
    t.eval_every = 20;
    t.adam.peak_lr = 3e-3;
    DistillConfig d;
    d.relation_heads = 2;
    DistillOptions opts;
    opts.heldout = &docs;
    const auto a = distill<float>(teacher, tcfg, scfg, d, docs, t, nullptr, opts);
    CHECK(snapshot(teacher) == before);
    for (const auto& [name, p] : teacher.named()) {
        CHECK_FALSE(p->has_grad());
    }
    CHECK(a.metrics.records().front().get("loss.qq").has_value());
    CHECK(a.metrics.records().back().get("heldout_kl").has_value());
    CHECK(a.metrics.tail_mean(5) < a.metrics.head_mean(5));
    d.relation_heads = 8;
    const auto b = distill<float>(teacher, tcfg, scfg, d, docs, t, nullptr, opts);
    CHECK(a.metrics.text() != b.metrics.text());
    for (const auto& r : b.metrics.records()) {
        CHECK(std::isfinite(r.loss));
        CHECK(r.loss >= 0.0);
    }
    opts.cache_teacher = false;
    const auto c = distill<float>(teacher, tcfg, scfg, d, docs, t, nullptr, opts);
    CHECK(c.metrics.text() == b.metrics.text());
    d.relation_heads = 3;
    CHECK_THROWS_AS(distill<float>(teacher, tcfg, scfg, d, docs, t), ConfigError);
}

TEST_CASE("linear probe: separable data, chance on noise, single-class rejection") {
    Rng rng(3);
    std::vector<std::vector<double>> x, tx;
    std::vector<int> y, ty;
    for (int i = 0; i < 400; ++i) {
        const int label = static_cast<int>(rng.below(3));
        std::vector<double> f{rng.normal(), rng.normal(), rng.normal()};
        f[static_cast<std::size_t>(label)] += 4.0;
        (i < 300 ? x : tx).push_back(f);
        (i < 300 ? y : ty).push_back(label);
    }
    CHECK(linear_probe_accuracy(x, y, tx, ty, 3) >= 0.95);

    std::vector<std::vector<double>> nx, ntx;
    std::vector<int> ny, nty;
    for (int i = 0; i < 2000; ++i) {
        std::vector<double> f(4);
        for (auto& v : f) {
            v = rng.normal();
        }
        (i < 1000 ? nx : ntx).push_back(f);
        (i < 1000 ? ny : nty).push_back(static_cast<int>(rng.below(2)));
    }
    const double acc = linear_probe_accuracy(nx, ny, ntx, nty, 2);
    CHECK(acc >= 0.4);
    CHECK(acc <= 0.6);
    CHECK_THROWS_AS(linear_probe_accuracy(nx, std::vector<int>(1000, 1), ntx, nty, 2), EvaluationError);
    CHECK_THROWS_AS(linear_probe_accuracy({}, {}, ntx, nty, 2), EvaluationError);
}

TEST_CASE("make_probe_task: framed documents, dense labels") {
    SyntheticOptions o;
    o.num_symbols = 4;
    o.random_fraction = 0.5;
    o.seed = 2;
    const auto task = make_probe_task(50, 20, o, {5, 6, 7, 8}, 9);
    CHECK(task.num_classes == 2);
    CHECK(task.train_docs.size() == 50);
    CHECK(task.test_labels.size() == 20);
    for (const auto& d : task.train_docs) {
        CHECK(d.front() == kClsId);
        CHECK(d.back() == kSepId);
        CHECK(d.size() == 15);
    }
    for (int l : task.train_labels) {
        CHECK((l == 0 || l == 1));
    }
}

TEST_CASE("sweeps: sorted rows, failures become status rows, csv marks the best") {
    const auto docs = copy_language(20, 4, 3, 1);
    const auto tcfg = tiny_model(2, 16, 2, kNumReserved + 5);
    const auto scfg = tiny_model(1, 8, 2, kNumReserved + 5);
    const auto teacher = init_params<float>(tcfg, 9);
    SyntheticOptions so;
    so.num_symbols = 4;
    so.min_len = so.max_len = 3;
    so.random_fraction = 0.5;
    const auto probe = make_probe_task(40, 20, so, {5, 6, 7, 8}, 9);
    ExperimentSetup<float> s;
    s.teacher = &teacher;
    s.teacher_config = tcfg;
    s.student_config = scfg;
    s.distill.relation_heads = 2;
    s.train.steps = 3;
    s.train.seq_len = 10;
    s.train.batch_size = 4;
    s.train_docs = &docs;
    s.heldout_docs = &docs;
    s.probe = &probe;
    s.probe_options.iterations = 50;

    const auto layers = layer_sweep(s, {3, 2, 1});
    REQUIRE(layers.rows.size() == 3);
    CHECK(layers.rows[0].teacher_layer == 1);
    CHECK(layers.rows[1].teacher_layer == 2);
    CHECK(layers.rows[0].ok());
    CHECK(layers.rows[1].ok());
    CHECK_FALSE(layers.rows[2].ok());
    CHECK(layers.rows[2].status.find("failed") == 0);
    CHECK(layers.best_index() >= 0);
    CHECK(layers.best_index() <= 1);
    const auto csv = layers.csv();
    CHECK(csv.rfind("teacher_layer,relation_heads,final_loss,heldout_kl,probe_accuracy,status,best\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    CHECK(std::count(csv.begin(), csv.end(), '*') == 1);

    const auto heads = relation_head_sweep(s, {2, 3, 4});
    REQUIRE(heads.rows.size() == 3);
    CHECK(heads.rows[0].ok());
    CHECK_FALSE(heads.rows[1].ok());
    CHECK(heads.rows[2].ok());
    CHECK(heads.rows[0].teacher_layer == 2);

    s.jobs = 3;
    CHECK(relation_head_sweep(s, {2, 3, 4}).csv() == heads.csv());
}

TEST_CASE("probe_eval: a briefly pretrained teacher is above chance on copy vs random continuation") {
    SyntheticOptions so;
    so.seed = 1;
    const auto docs = synthetic_corpus(1000, so);
    const auto vocab = build_vocab(doc_texts(docs), 100);
    auto cfg = tiny_model(2, 32, 2, vocab.size());
    cfg.dropout = 0.1;
    TrainConfig t;
    t.steps = 400;
    t.batch_size = 8;
    t.seq_len = 16;
    t.seed = 1;
    t.adam.peak_lr = 2e-3;
    t.adam.warmup_steps = 10;
    const auto teacher = pretrain_teacher<float>(encode_corpus(doc_texts(docs), vocab), cfg, t);
    std::vector<int> ids;
    for (int i = 0; i < so.num_symbols; ++i) {
        ids.push_back(vocab.id(symbol_name(i)));
    }
    auto po = so;
    po.seed = 99;
    po.random_fraction = 0.5;
    const auto task = make_probe_task(1000, 400, po, ids, vocab.id(kSeparator));
    CHECK(probe_eval(teacher.params, cfg, task) > 0.6);
}
