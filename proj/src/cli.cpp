#include "relkd/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "relkd/archive.hpp"
#include "relkd/error.hpp"
#include "relkd/experiment.hpp"
#include "relkd/probe.hpp"
#include "relkd/synthetic.hpp"
#include "relkd/trainer.hpp"

namespace fs = std::filesystem;

namespace relkd::cli {

namespace {

const std::vector<std::string> kCommands{"pretrain", "distill", "sweep", "inspect", "probe"};

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (!trim(cur).empty()) {
                out.push_back(trim(cur));
            }
            cur.clear();
        } else {
            cur += c;
        }
    }
    return out;
}

const KeySpec& spec_for(const std::string& key) {
    for (const auto& k : key_specs()) {
        if (k.key == key) {
            return k;
        }
    }
    throw ConfigError("unknown configuration key '" + key + "'");
}

class Resolved {
public:
    explicit Resolved(Settings s) : s_(std::move(s)) {}

    const Settings& all() const { return s_; }

    std::string str(const std::string& key) const {
        spec_for(key);
        const auto it = s_.find(key);
        return it == s_.end() ? std::string() : it->second;
    }

    std::int64_t integer(const std::string& key, std::int64_t min = std::numeric_limits<std::int64_t>::min()) const {
        const auto v = str(key);
        std::int64_t out = 0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size()) {
            bad(key, v, "an integer");
        }
        if (out < min) {
            bad(key, v, "an integer >= " + std::to_string(min));
        }
        return out;
    }

    int small(const std::string& key, int min) const { return static_cast<int>(integer(key, min)); }

    double real(const std::string& key) const {
        const auto v = str(key);
        double out = 0.0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
            bad(key, v, "a finite number");
        }
        return out;
    }

    bool boolean(const std::string& key) const {
        const auto v = str(key);
        if (v == "true" || v == "1") {
            return true;
        }
        if (v == "false" || v == "0") {
            return false;
        }
        bad(key, v, "true or false");
        return false;
    }

    std::string choice(const std::string& key, const std::vector<std::string>& allowed) const {
        const auto v = str(key);
        if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
            std::string list;
            for (const auto& a : allowed) {
                list += (list.empty() ? "" : ", ") + a;
            }
            bad(key, v, "one of " + list);
        }
        return v;
    }

private:
    [[noreturn]] static void bad(const std::string& key, const std::string& v, const std::string& expected) {
        throw ConfigError("invalid value '" + v + "' for " + key + " (" + spec_for(key).flag + "): expected " +
                          expected);
    }

    Settings s_;
};

ModelConfig model_config(const Resolved& r, int vocab_size) {
    ModelConfig c;
    c.num_layers = r.small("model.num_layers", 1);
    c.hidden_size = r.small("model.hidden_size", 1);
    c.num_heads = r.small("model.num_heads", 1);
    c.ffn_size = r.small("model.ffn_size", 1);
    c.max_seq_len = r.small("model.max_seq_len", 3);
    c.dropout = r.real("model.dropout");
    c.vocab_size = vocab_size;
    c.validate();
    return c;
}

TrainConfig train_config(const Resolved& r) {
    TrainConfig t;
    t.steps = r.integer("run.steps", 1);
    t.batch_size = static_cast<std::size_t>(r.integer("run.batch_size", 1));
    t.seq_len = static_cast<std::size_t>(r.integer("run.seq_len", 3));
    t.seed = static_cast<std::uint64_t>(r.integer("run.seed", 0));
    t.log_every = r.integer("run.log_every", 1);
    t.eval_every = r.integer("run.eval_every", 0);
    t.mlm_rate = r.real("run.mlm_rate");
    t.adam.peak_lr = r.real("run.lr");
    t.adam.warmup_steps = r.integer("run.warmup_steps", 0);
    t.adam.weight_decay = r.real("run.weight_decay");
    t.adam.eps = r.real("run.adam_eps");
    t.adam.clip_norm = r.real("run.clip_norm");
    if (t.adam.warmup_steps >= t.steps) {
        t.adam.warmup_steps = t.steps / 20;
    }
    return t;
}

DistillConfig distill_config(const Resolved& r) {
    DistillConfig d;
    d.relation_heads = r.small("distill.relation_heads", 1);
    d.teacher_layer = r.small("distill.teacher_layer", 0);
    d.student_layer = r.small("distill.student_layer", 0);
    d.alpha = parse_relations(r.str("distill.relations"));
    return d;
}

SyntheticOptions synthetic_options(const Resolved& r) {
    SyntheticOptions o;
    o.num_symbols = r.small("synthetic.symbols", 2);
    o.min_len = o.max_len = r.small("synthetic.length", 2);
    o.seed = static_cast<std::uint64_t>(r.integer("synthetic.seed", 0));
    return o;
}

ProbeOptions probe_options(const Resolved& r) {
    ProbeOptions p;
    p.iterations = r.small("probe.iterations", 1);
    p.learning_rate = r.real("probe.lr");
    p.l2 = r.real("probe.l2");
    return p;
}

std::vector<std::string> corpus_lines(const Resolved& r, std::ostream& out) {
    const auto path = r.str("io.corpus");
    if (path.empty()) {
        const auto n = static_cast<std::size_t>(r.integer("synthetic.docs", 1));
        out << "corpus: " << n << " generated copy-language documents\n";
        return doc_texts(synthetic_corpus(n, synthetic_options(r)));
    }
    if (!fs::is_regular_file(path)) {
        throw ConfigError("corpus file not found: " + path);
    }
    return load_corpus(path);
}

fs::path required_file(const Resolved& r, const std::string& key, const std::string& what) {
    const auto path = r.str(key);
    if (path.empty()) {
        throw ConfigError(what + " is required (" + spec_for(key).flag + ")");
    }
    if (!fs::is_regular_file(path)) {
        throw ConfigError(what + " not found: " + path);
    }
    return path;
}

Vocab vocab_for(const Resolved& r, const fs::path& checkpoint, const ModelConfig& config) {
    auto path = fs::path(r.str("io.vocab"));
    if (path.empty()) {
        path = checkpoint.parent_path() / "vocab.txt";
    }
    if (!fs::is_regular_file(path)) {
        throw ConfigError("vocabulary not found: " + path.string() + " (set " + spec_for("io.vocab").flag + ")");
    }
    auto v = Vocab::load(path);
    if (v.size() != config.vocab_size) {
        throw ConfigError("vocabulary " + path.string() + " has " + std::to_string(v.size()) +
                          " tokens but the checkpoint expects " + std::to_string(config.vocab_size));
    }
    return v;
}

// Copy-vs-random-continuation classification over the generated symbols; empty when
// the vocabulary lacks them.
std::optional<ProbeTask> probe_task(const Resolved& r, const Vocab& vocab) {
    auto o = synthetic_options(r);
    o.seed = static_cast<std::uint64_t>(r.integer("probe.seed", 0));
    o.random_fraction = 0.5;
    std::vector<int> ids;
    for (int i = 0; i < o.num_symbols; ++i) {
        if (!vocab.contains(symbol_name(i))) {
            return std::nullopt;
        }
        ids.push_back(vocab.id(symbol_name(i)));
    }
    if (!vocab.contains(kSeparator)) {
        return std::nullopt;
    }
    return make_probe_task(static_cast<std::size_t>(r.integer("probe.train_size", 2)),
                           static_cast<std::size_t>(r.integer("probe.test_size", 1)), o, ids, vocab.id(kSeparator));
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f || !(f << text)) {
        throw Error("cannot write " + path.string());
    }
}

fs::path prepare_out(const Resolved& r, const std::string& command, const std::string& preset) {
    const fs::path dir = r.str("io.out");
    if (dir.empty()) {
        throw ConfigError("output directory is required (--out)");
    }
    fs::create_directories(dir);
    std::string manifest = "command=" + command + "\npreset=" + preset + "\n";
    for (const auto& [k, v] : r.all()) {
        manifest += k + "=" + v + "\n";
    }
    write_text(dir / "manifest.txt", manifest);
    return dir;
}

StepHook printer(const Resolved& r, std::ostream& out, std::int64_t steps) {
    const auto every = r.integer("run.print_every", 0);
    auto best = std::make_shared<double>(std::numeric_limits<double>::infinity());
    return [&out, every, steps, best](std::int64_t step, const MetricRecord& rec) {
        *best = std::min(*best, rec.loss);
        if (every > 0 && (step == 1 || step % every == 0 || step == steps)) {
            auto shown = rec;
            shown.min_loss = *best;
            out << format_metric(shown) << '\n' << std::flush;
        }
    };
}

void split_heldout(const Resolved& r, std::vector<std::vector<int>>& docs, std::vector<std::vector<int>>& heldout) {
    const auto n = static_cast<std::size_t>(r.integer("run.heldout_docs", 0));
    if (n >= docs.size()) {
        throw ConfigError("run.heldout_docs (" + std::to_string(n) + ") leaves no training documents out of " +
                          std::to_string(docs.size()));
    }
    heldout.assign(docs.end() - static_cast<long>(n), docs.end());
    docs.resize(docs.size() - n);
}

template <typename T>
int cmd_pretrain(const Resolved& r, const std::string& preset, std::ostream& out) {
    const auto lines = corpus_lines(r, out);
    const auto vocab = build_vocab(lines, r.small("model.vocab_size", kNumReserved));
    const auto config = model_config(r, vocab.size());
    const auto train = train_config(r);
    train.validate(config);
    const auto docs = encode_corpus(lines, vocab);
    const auto dir = prepare_out(r, "pretrain", preset);
    vocab.save(dir / "vocab.txt");
    if (r.str("io.corpus").empty()) {
        std::string text;
        for (const auto& l : lines) {
            text += l + "\n";
        }
        write_text(dir / "corpus.txt", text);
    }
    const auto res = pretrain_teacher<T>(docs, config, train, printer(r, out, train.steps));
    res.metrics.write(dir / "metrics.txt", dir / "timing.txt");
    save_archive(make_checkpoint(res.params, config, static_cast<std::uint64_t>(train.steps), res.rng_state, "teacher"),
                 dir / "teacher.ckpt");
    out << "vocab_size=" << vocab.size() << " truncated=" << res.truncated
        << " final_loss=" << format_double(res.metrics.tail_mean(10)) << "\n"
        << "wrote " << (dir / "teacher.ckpt").string() << "\n";
    return 0;
}

struct Teacher {
    fs::path path;
    Checkpoint ckpt;
};

Teacher load_teacher(const Resolved& r) {
    Teacher t;
    t.path = required_file(r, "io.teacher", "teacher checkpoint");
    t.ckpt = load_checkpoint(t.path);
    return t;
}

template <typename T>
int cmd_distill(const Resolved& r, const std::string& preset, std::ostream& out) {
    const auto teacher = load_teacher(r);
    const auto& tcfg = teacher.ckpt.config;
    const auto vocab = vocab_for(r, teacher.path, tcfg);
    const auto scfg = model_config(r, tcfg.vocab_size);
    const auto dcfg = distill_config(r);
    dcfg.validate(tcfg, scfg);
    const auto train = train_config(r);
    train.validate(scfg);
    train.validate(tcfg);
    auto docs = encode_corpus(corpus_lines(r, out), vocab);
    std::vector<std::vector<int>> heldout;
    split_heldout(r, docs, heldout);
    const auto tparams = params_from_checkpoint<T>(teacher.ckpt, std::nullopt, false);
    const auto dir = prepare_out(r, "distill", preset);
    vocab.save(dir / "vocab.txt");

    DistillOptions opts;
    opts.heldout = heldout.empty() ? nullptr : &heldout;
    const auto res = distill<T>(tparams, tcfg, scfg, dcfg, docs, train, nullptr, opts, printer(r, out, train.steps));
    res.metrics.write(dir / "metrics.txt", dir / "timing.txt");
    auto archive = make_checkpoint(res.student, scfg, static_cast<std::uint64_t>(train.steps), res.rng_state, "student");
    archive.set("distill.teacher_layer", std::to_string(dcfg.resolved_teacher_layer(tcfg)));
    archive.set("distill.relation_heads", std::to_string(dcfg.relation_heads));
    save_archive(archive, dir / "student.ckpt");
    out << "teacher_layer=" << dcfg.resolved_teacher_layer(tcfg) << " relation_heads=" << dcfg.relation_heads
        << " final_loss=" << format_double(res.metrics.tail_mean(10));
    if (!heldout.empty()) {
        out << " heldout_kl="
            << format_double(heldout_relation_kl(tparams, tcfg, res.student, scfg, dcfg, heldout, train.seq_len));
    }
    out << "\nwrote " << (dir / "student.ckpt").string() << "\n";
    return 0;
}

std::vector<int> parse_ints(const Resolved& r, const std::string& key) {
    std::vector<int> out;
    for (const auto& item : split_list(r.str(key))) {
        int v = 0;
        const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (ec != std::errc() || p != item.data() + item.size()) {
            throw ConfigError("invalid entry '" + item + "' in " + key + " (" + spec_for(key).flag +
                              "): expected a comma-separated list of integers");
        }
        out.push_back(v);
    }
    if (out.empty()) {
        throw ConfigError(key + " (" + spec_for(key).flag + ") is empty");
    }
    return out;
}

template <typename T>
int cmd_sweep(const Resolved& r, const std::string& preset, std::ostream& out) {
    const auto teacher = load_teacher(r);
    const auto& tcfg = teacher.ckpt.config;
    const auto vocab = vocab_for(r, teacher.path, tcfg);
    const auto over = r.choice("sweep.over", {"layers", "relation_heads"});
    std::vector<int> values;
    if (over == "layers") {
        if (r.str("sweep.layers") == "all") {
            for (int l = 1; l <= tcfg.num_layers; ++l) {
                values.push_back(l);
            }
        } else {
            values = parse_ints(r, "sweep.layers");
        }
        for (int l : values) {
            if (l < 1 || l > tcfg.num_layers) {
                throw ConfigError("teacher layer " + std::to_string(l) + " outside 1.." +
                                  std::to_string(tcfg.num_layers) + " (--layers)");
            }
        }
    } else {
        values = parse_ints(r, "sweep.relation_heads");
        for (int a : values) {
            if (a < 1) {
                throw ConfigError("relation head count " + std::to_string(a) + " must be positive (--sweep-heads)");
            }
        }
    }
    ExperimentSetup<T> setup;
    setup.teacher_config = tcfg;
    setup.student_config = model_config(r, tcfg.vocab_size);
    setup.distill = distill_config(r);
    setup.train = train_config(r);
    setup.train.validate(setup.student_config);
    setup.train.validate(tcfg);
    setup.probe_options = probe_options(r);
    setup.jobs = r.small("sweep.jobs", 1);
    auto docs = encode_corpus(corpus_lines(r, out), vocab);
    std::vector<std::vector<int>> heldout;
    split_heldout(r, docs, heldout);
    const auto task = probe_task(r, vocab);
    if (!task) {
        out << "probe skipped: vocabulary lacks the generated symbols\n";
    }
    const auto tparams = params_from_checkpoint<T>(teacher.ckpt, std::nullopt, false);
    setup.teacher = &tparams;
    setup.train_docs = &docs;
    setup.heldout_docs = heldout.empty() ? nullptr : &heldout;
    setup.probe = task ? &*task : nullptr;

    const auto dir = prepare_out(r, "sweep", preset);
    const auto report = over == "layers" ? layer_sweep(setup, values) : relation_head_sweep(setup, values);
    write_text(dir / "report.csv", report.csv());
    out << report.csv();
    const int best = report.best_index();
    if (best >= 0) {
        const auto& row = report.rows[static_cast<std::size_t>(best)];
        out << "best " << (over == "layers" ? "teacher_layer=" + std::to_string(row.teacher_layer)
                                             : "relation_heads=" + std::to_string(row.relation_heads))
            << "\n";
    }
    out << "wrote " << (dir / "report.csv").string() << "\n";
    const bool all_ok = std::all_of(report.rows.begin(), report.rows.end(), [](const auto& x) { return x.ok(); });
    return all_ok ? 0 : 1;
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts) {
    std::vector<T> data;
    for (const auto& p : parts) {
        data.insert(data.end(), p.data().begin(), p.data().end());
    }
    return Tensor<T>(Shape{parts.size(), parts.front().rows(), parts.front().cols()}, std::move(data));
}

std::string shape_text(const Shape& s) {
    std::string out;
    for (auto d : s) {
        out += (out.empty() ? "" : "x") + std::to_string(d);
    }
    return out;
}

template <typename T>
int cmd_inspect(const Resolved& r, const std::string& preset, std::ostream& out) {
    const auto path = required_file(r, "io.checkpoint", "checkpoint");
    const auto ckpt = load_checkpoint(path);
    const auto& cfg = ckpt.config;
    const auto vocab = vocab_for(r, path, cfg);
    const auto names = relation_names(parse_relations(r.str("inspect.pairs")));
    DistillConfig dc;
    dc.relation_heads = r.small("distill.relation_heads", 1);
    dc.validate(cfg, cfg);
    int layer = r.small("inspect.layer", 0);
    if (layer == 0) {
        layer = cfg.num_layers;
    }
    if (layer > cfg.num_layers) {
        throw ConfigError("layer " + std::to_string(layer) + " outside 1.." + std::to_string(cfg.num_layers) +
                          " (--layer)");
    }
    const auto text = r.str("inspect.text");
    const auto tokens = vocab.encode(text);
    if (tokens.empty()) {
        throw ConfigError("input text is required (--text)");
    }
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len) {
        throw ConfigError("input has " + std::to_string(tokens.size()) + " tokens, model.max_seq_len is " +
                          std::to_string(cfg.max_seq_len));
    }
    const auto params = params_from_checkpoint<T>(ckpt, std::nullopt, false);
    ForwardOptions fo;
    fo.truncate_at_layer = layer;
    const auto fwd = forward<T>(tokens, params, cfg, fo);
    const auto& cap = fwd.state->layer(layer);

    TensorArchive dump;
    dump.set("kind", "relations");
    dump.set("layer", std::to_string(layer));
    dump.set("relation_heads", std::to_string(dc.relation_heads));
    std::string ids;
    for (int t : tokens) {
        ids += (ids.empty() ? "" : " ") + std::to_string(t);
    }
    dump.set("tokens", ids);
    dump.tensors.push_back(to_record("attention", stack(cap.probs)));
    for (const auto& name : names) {
        const auto role = [](char c) { return c == 'q' ? Role::query : c == 'k' ? Role::key : Role::value; };
        const auto a = role(name[0]), b = role(name[1]);
        const auto rel = relation(relation_inputs(cap, a, dc.relation_heads), relation_inputs(cap, b, dc.relation_heads),
                                  {}, a, b);
        dump.tensors.push_back(to_record("relation." + name, rel.stacked()));
    }
    const auto dir = prepare_out(r, "inspect", preset);
    save_archive(dump, dir / "relations.mrd");
    for (const auto& t : dump.tensors) {
        out << t.name << " shape=" << shape_text(t.shape) << "\n";
    }
    out << "wrote " << (dir / "relations.mrd").string() << "\n";
    return 0;
}

template <typename T>
int cmd_probe(const Resolved& r, const std::string& preset, std::ostream& out) {
    EncoderParams<T> params;
    ModelConfig cfg;
    std::optional<Vocab> vocab;
    if (r.boolean("probe.random_init")) {
        const auto vpath = fs::path(r.str("io.vocab"));
        if (vpath.empty() || !fs::is_regular_file(vpath)) {
            throw ConfigError("vocabulary not found: '" + vpath.string() + "' (--vocab is required with --random-init)");
        }
        vocab = Vocab::load(vpath);
        cfg = model_config(r, vocab->size());
        params = init_params<T>(cfg, student_init_seed(static_cast<std::uint64_t>(r.integer("run.seed", 0))));
    } else {
        const auto path = required_file(r, "io.checkpoint", "checkpoint");
        const auto ckpt = load_checkpoint(path);
        cfg = ckpt.config;
        vocab = vocab_for(r, path, cfg);
        params = params_from_checkpoint<T>(ckpt, std::nullopt, false);
    }
    const auto task = probe_task(r, *vocab);
    if (!task) {
        throw ConfigError("vocabulary lacks the generated symbols s0..s" +
                          std::to_string(r.small("synthetic.symbols", 2) - 1) + " and '|' the probe task uses");
    }
    const double acc = probe_eval(params, cfg, *task, probe_options(r));
    const auto dir = prepare_out(r, "probe", preset);
    const auto line = "accuracy=" + format_double(acc) + " classes=" + std::to_string(task->num_classes) +
                      " chance=" + format_double(1.0 / task->num_classes) +
                      " train=" + std::to_string(task->train_docs.size()) +
                      " test=" + std::to_string(task->test_docs.size()) + "\n";
    write_text(dir / "probe.txt", line);
    out << line;
    return 0;
}

template <typename T>
int dispatch(const std::string& command, const Resolved& r, const std::string& preset, std::ostream& out) {
    if (command == "pretrain") {
        return cmd_pretrain<T>(r, preset, out);
    }
    if (command == "distill") {
        return cmd_distill<T>(r, preset, out);
    }
    if (command == "sweep") {
        return cmd_sweep<T>(r, preset, out);
    }
    if (command == "inspect") {
        return cmd_inspect<T>(r, preset, out);
    }
    return cmd_probe<T>(r, preset, out);
}

std::string help_text() {
    std::string s =
        "usage: relkd <command> [--preset desk|tiny|paper] [--config FILE] [--KEY VALUE ...]\n"
        "\n"
        "commands:\n"
        "  pretrain   train a teacher with masked language modelling\n"
        "  distill    train a student on the teacher's self-attention relations\n"
        "  sweep      distil once per teacher layer or relation-head count, write report.csv\n"
        "  inspect    dump attention and relation tensors for one input\n"
        "  probe      linear-probe accuracy of a checkpoint's pooled features\n"
        "\n"
        "Settings resolve as preset < config file < flags. A config file holds\n"
        "key=value lines with the keys below.\n"
        "\n"
        "keys:\n";
    for (const auto& k : key_specs()) {
        auto left = "  " + k.flag;
        left.resize(std::max<std::size_t>(left.size() + 1, 24), ' ');
        auto mid = k.key;
        mid.resize(std::max<std::size_t>(mid.size() + 1, 24), ' ');
        s += left + mid + k.help + "\n";
    }
    s += "\nexit codes: 0 success, 1 runtime failure, 2 usage or configuration error\n";
    return s;
}

} // namespace

const std::vector<KeySpec>& key_specs() {
    static const std::vector<KeySpec> specs{
        {"model.num_layers", "--num-layers", "encoder layers of the model being trained"},
        {"model.hidden_size", "--hidden-size", "hidden width"},
        {"model.num_heads", "--num-heads", "attention heads"},
        {"model.ffn_size", "--ffn-size", "feed-forward width"},
        {"model.max_seq_len", "--max-seq-len", "position table size"},
        {"model.dropout", "--dropout", "dropout rate while training"},
        {"model.vocab_size", "--vocab-size", "vocabulary cap when building from a corpus (pretrain)"},
        {"distill.relations", "--relations", "relation pairs: qq,kk,vv or all or any list of the nine"},
        {"distill.relation_heads", "--relation-heads", "number of relation heads"},
        {"distill.teacher_layer", "--teacher-layer", "teacher layer to transfer, 0 = last"},
        {"distill.student_layer", "--student-layer", "student layer to train, 0 = last"},
        {"run.seed", "--seed", "run seed (batching, masking, dropout, initialisation)"},
        {"run.steps", "--steps", "optimizer steps"},
        {"run.batch_size", "--batch-size", "sequences per step"},
        {"run.seq_len", "--seq-len", "maximum sequence length including [CLS] and [SEP]"},
        {"run.lr", "--lr", "peak learning rate"},
        {"run.warmup_steps", "--warmup-steps", "linear warmup steps (steps/20 when not below run.steps)"},
        {"run.weight_decay", "--weight-decay", "decoupled weight decay on matrices"},
        {"run.adam_eps", "--adam-eps", "Adam epsilon"},
        {"run.clip_norm", "--clip-norm", "global gradient-norm clip, 0 disables"},
        {"run.mlm_rate", "--mlm-rate", "masking rate for pretraining"},
        {"run.log_every", "--log-every", "metrics.txt cadence in steps"},
        {"run.print_every", "--print-every", "stdout metric cadence in steps, 0 silences"},
        {"run.eval_every", "--eval-every", "held-out relation KL cadence in steps, 0 disables"},
        {"run.heldout_docs", "--heldout-docs", "corpus tail held out from distillation"},
        {"run.precision", "--precision", "f32 or f64"},
        {"synthetic.docs", "--synthetic-docs", "generated documents when no corpus is given"},
        {"synthetic.symbols", "--synthetic-symbols", "alphabet size of the generated language"},
        {"synthetic.length", "--synthetic-length", "symbols per half of a generated document"},
        {"synthetic.seed", "--synthetic-seed", "seed of the generated corpus"},
        {"probe.train_size", "--probe-train-size", "probe training documents"},
        {"probe.test_size", "--probe-test-size", "probe test documents"},
        {"probe.iterations", "--probe-iterations", "gradient-descent iterations of the probe"},
        {"probe.lr", "--probe-lr", "probe learning rate"},
        {"probe.l2", "--probe-l2", "probe L2 penalty"},
        {"probe.seed", "--probe-seed", "seed of the probe documents"},
        {"probe.random_init", "--random-init", "probe a fresh random model of shape model.* instead of a checkpoint"},
        {"sweep.over", "--over", "layers or relation_heads"},
        {"sweep.layers", "--layers", "teacher layers to sweep: all or a list"},
        {"sweep.relation_heads", "--sweep-heads", "relation-head counts to sweep"},
        {"sweep.jobs", "--jobs", "sub-runs in parallel"},
        {"inspect.text", "--text", "input text, whitespace tokenised, not framed"},
        {"inspect.pairs", "--pairs", "relation pairs to dump"},
        {"inspect.layer", "--layer", "layer to dump, 0 = last"},
        {"io.corpus", "--corpus", "corpus file, one document per line; empty generates one"},
        {"io.out", "--out", "output directory"},
        {"io.teacher", "--teacher", "teacher checkpoint"},
        {"io.checkpoint", "--checkpoint", "checkpoint to inspect or probe"},
        {"io.vocab", "--vocab", "vocabulary file, defaults to vocab.txt beside the checkpoint"},
    };
    return specs;
}

Settings preset_settings(const std::string& preset, const std::string& command) {
    const bool teacher_role = command == "pretrain";
    Settings s{
        {"model.max_seq_len", "32"},
        {"model.dropout", "0.1"},
        {"model.vocab_size", "1000"},
        {"distill.relations", "qq,kk,vv"},
        {"distill.relation_heads", "8"},
        {"distill.teacher_layer", "0"},
        {"distill.student_layer", "0"},
        {"run.seed", "1"},
        {"run.steps", "2000"},
        {"run.batch_size", "16"},
        {"run.seq_len", "32"},
        {"run.lr", "0.0006"},
        {"run.warmup_steps", "100"},
        {"run.weight_decay", "0.01"},
        {"run.adam_eps", "1e-06"},
        {"run.clip_norm", "1"},
        {"run.mlm_rate", "0.15"},
        {"run.log_every", "1"},
        {"run.print_every", "100"},
        {"run.eval_every", "0"},
        {"run.heldout_docs", "200"},
        {"run.precision", "f32"},
        {"synthetic.docs", "4000"},
        {"synthetic.symbols", "12"},
        {"synthetic.length", "6"},
        {"synthetic.seed", "1"},
        {"probe.train_size", "2000"},
        {"probe.test_size", "1000"},
        {"probe.iterations", "2000"},
        {"probe.lr", "0.5"},
        {"probe.l2", "0.0001"},
        {"probe.seed", "99"},
        {"probe.random_init", "false"},
        {"sweep.over", "layers"},
        {"sweep.layers", "all"},
        {"sweep.relation_heads", "2,4,8,16"},
        {"sweep.jobs", "1"},
        {"inspect.text", ""},
        {"inspect.pairs", "qk"},
        {"inspect.layer", "0"},
        {"io.corpus", ""},
        {"io.out", "relkd-run"},
        {"io.teacher", ""},
        {"io.checkpoint", ""},
        {"io.vocab", ""},
    };
    auto model = [&](int layers, int hidden, int heads, int ffn) {
        s["model.num_layers"] = std::to_string(layers);
        s["model.hidden_size"] = std::to_string(hidden);
        s["model.num_heads"] = std::to_string(heads);
        s["model.ffn_size"] = std::to_string(ffn);
    };
    if (preset == "desk") {
        teacher_role ? model(4, 64, 4, 256) : model(2, 32, 2, 128);
    } else if (preset == "tiny") {
        teacher_role ? model(2, 32, 2, 64) : model(1, 16, 2, 32);
        s["distill.relation_heads"] = "4";
        s["run.steps"] = "100";
        s["run.batch_size"] = "8";
        s["run.warmup_steps"] = "10";
        s["run.print_every"] = "20";
        s["run.heldout_docs"] = "50";
        s["synthetic.docs"] = "400";
        s["probe.train_size"] = "200";
        s["probe.test_size"] = "100";
        s["probe.iterations"] = "300";
    } else if (preset == "paper") {
        teacher_role ? model(12, 768, 12, 3072) : model(6, 384, 12, 1536);
        s["model.max_seq_len"] = "512";
        s["model.vocab_size"] = "30522";
        s["distill.relation_heads"] = "48";
        s["run.steps"] = "400000";
        s["run.batch_size"] = "256";
        s["run.seq_len"] = "512";
        s["run.warmup_steps"] = "4000";
        s["run.print_every"] = "1000";
        s["run.log_every"] = "100";
    } else {
        throw ConfigError("unknown preset '" + preset + "' (valid: desk, tiny, paper)");
    }
    return s;
}

Settings parse_config_text(const std::string& text, const std::string& origin) {
    Settings s;
    std::istringstream in(text);
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto t = trim(line);
        if (t.empty() || t[0] == '#') {
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(number) + ": expected key=value, got '" + t + "'");
        }
        const auto key = trim(std::string_view(t).substr(0, eq));
        const bool known = std::any_of(key_specs().begin(), key_specs().end(),
                                       [&](const KeySpec& k) { return k.key == key; });
        if (!known) {
            throw ConfigError(origin + ":" + std::to_string(number) + ": unknown configuration key '" + key + "'");
        }
        s[key] = trim(std::string_view(t).substr(eq + 1));
    }
    return s;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    if (args.empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help") {
        (args.empty() ? err : out) << help_text();
        return args.empty() ? 2 : 0;
    }
    if (std::find(args.begin(), args.end(), "--help") != args.end() ||
        std::find(args.begin(), args.end(), "-h") != args.end()) {
        out << help_text();
        return 0;
    }
    const auto& command = args[0];
    if (std::find(kCommands.begin(), kCommands.end(), command) == kCommands.end()) {
        err << "error: unknown command '" << command << "' (valid: pretrain, distill, sweep, inspect, probe)\n";
        return 2;
    }
    try {
        CLI::App app("relkd " + command);
        app.set_help_flag();
        std::string preset = "desk", config_path;
        app.add_option("--preset", preset);
        app.add_option("--config", config_path);
        std::map<std::string, std::string> values;
        std::map<std::string, CLI::Option*> options;
        bool random_init = false;
        for (const auto& k : key_specs()) {
            if (k.key == "probe.random_init") {
                options[k.key] = app.add_flag(k.flag, random_init, k.help);
            } else {
                options[k.key] = app.add_option(k.flag, values[k.key], k.help);
            }
        }
        std::vector<std::string> rest(args.rbegin(), args.rend() - 1);
        try {
            app.parse(rest);
        } catch (const CLI::ParseError& e) {
            err << "error: " << e.what() << "\n";
            return 2;
        }

        auto settings = preset_settings(preset, command);
        if (!config_path.empty()) {
            std::ifstream f(config_path, std::ios::binary);
            if (!f) {
                throw ConfigError("config file not found: " + config_path);
            }
            std::stringstream buf;
            buf << f.rdbuf();
            for (auto& [k, v] : parse_config_text(buf.str(), config_path)) {
                settings[k] = v;
            }
        }
        for (const auto& [key, opt] : options) {
            if (opt->count() > 0) {
                settings[key] = key == "probe.random_init" ? (random_init ? "true" : "false") : values[key];
            }
        }
        const Resolved r(std::move(settings));
        const auto precision = r.choice("run.precision", {"f32", "f64"});
        return precision == "f64" ? dispatch<double>(command, r, preset, out) : dispatch<float>(command, r, preset, out);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace relkd::cli
