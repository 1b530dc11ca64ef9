// SPDX-License-Identifier: Apache-2.0
#include "nvib/probing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "nvib/rng.hpp"
#include "nvib/training.hpp"

namespace nvib {

const char* probe_kind_name(ProbeKind kind) {
    return kind == ProbeKind::Aggregating ? "aggregating" : "attention";
}

ProbeKind probe_kind_from_name(const std::string& name) {
    if (name == "aggregating") return ProbeKind::Aggregating;
    if (name == "attention") return ProbeKind::Attention;
    throw std::invalid_argument("unknown probe kind: " + name);
}

ProbeConfig ProbeConfig::defaults(ProbeKind kind) {
    ProbeConfig c;
    c.kind = kind;
    if (kind == ProbeKind::Attention) {
        c.epochs = 50;
        c.batch_size = 256;
        c.lr = 1e-3;
    }
    return c;
}

void ProbeConfig::validate() const {
    if (hidden <= 0) throw std::invalid_argument("ProbeConfig: hidden must be positive");
    if (epochs <= 0) throw std::invalid_argument("ProbeConfig: epochs must be positive");
    if (batch_size <= 0) throw std::invalid_argument("ProbeConfig: batch_size must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("ProbeConfig: lr must be positive");
    if (layer < 0) throw std::invalid_argument("ProbeConfig: layer must be non-negative");
    if (n_classes < 2) throw std::invalid_argument("ProbeConfig: n_classes must be at least 2");
}

// ---------------------------------------------------------------------------
// Labelled datasets
// ---------------------------------------------------------------------------

LabelledDataset load_labelled_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open dataset file: " + path);

    std::vector<std::pair<std::string, std::string>> raw;  // (text, label name)
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        // The label follows the last tab, so the text may itself contain tabs.
        const std::size_t tab = line.rfind('\t');
        if (tab == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": expected text<TAB>label");
        std::string text = line.substr(0, tab);
        std::string label = line.substr(tab + 1);
        if (text.empty() || label.empty())
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": empty text or label");
        raw.emplace_back(std::move(text), std::move(label));
    }
    if (raw.empty()) throw std::runtime_error("dataset file has no examples: " + path);

    std::vector<std::string> names;
    names.reserve(raw.size());
    for (const auto& [text, label] : raw) names.push_back(label);
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());

    LabelledDataset ds;
    ds.class_names = names;
    ds.examples.reserve(raw.size());
    for (auto& [text, label] : raw) {
        const int id = static_cast<int>(
            std::lower_bound(names.begin(), names.end(), label) - names.begin());
        ds.examples.push_back({std::move(text), id});
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Representation extraction
// ---------------------------------------------------------------------------

std::vector<Matrix> extract_representations(const Model& model,
                                            const std::vector<std::string>& texts,
                                            const Tokenizer& tok, int layer,
                                            double alpha_threshold) {
    const int depth = model.config().n_enc_layers;
    if (layer < 0 || layer >= depth)
        throw std::out_of_range("extract_representations: layer " + std::to_string(layer) +
                                " outside encoder depth " + std::to_string(depth));
    const int n = static_cast<int>(texts.size());
    if (n == 0) throw std::invalid_argument("extract_representations: no examples");

    struct Slot {
        bool ok = false;
        bool encode_error = false;
        Matrix reps;
        std::string error;
    };
    std::vector<Slot> slots(static_cast<std::size_t>(n));

#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
        Slot& s = slots[static_cast<std::size_t>(i)];
        try {
            const std::vector<int> ids = tok.encode(texts[static_cast<std::size_t>(i)]);
            Tape t(false);
            const Model::Bound b = model.bind(t);
            try {
                const EncodeResult enc = model.encode(t, b, ids, false, alpha_threshold,
                                                      nullptr, /*capture_attention=*/true);
                const LayerTrace& tr = enc.traces.at(static_cast<std::size_t>(layer));
                std::vector<int> keep;
                for (int r = 0; r < tr.hidden.rows(); ++r)
                    if (!tr.is_nvib || tr.retained[static_cast<std::size_t>(r)] != 0)
                        keep.push_back(r);
                Matrix out(static_cast<int>(keep.size()), tr.hidden.cols());
                for (int r = 0; r < out.rows(); ++r)
                    for (int c = 0; c < out.cols(); ++c)
                        out(r, c) = tr.hidden(keep[static_cast<std::size_t>(r)], c);
                s.reps = std::move(out);
                s.ok = true;
            } catch (const EncodeError& e) {
                s.encode_error = true;
                s.error = e.what();
            }
        } catch (const std::exception& e) {
            s.error = e.what();
        }
    }

    std::vector<Matrix> reps;
    reps.reserve(slots.size());
    for (int i = 0; i < n; ++i) {
        Slot& s = slots[static_cast<std::size_t>(i)];
        if (!s.ok) {
            const std::string msg =
                "extract_representations: example " + std::to_string(i) + ": " + s.error;
            if (s.encode_error) throw EncodeError(msg, {});
            throw std::runtime_error(msg);
        }
        reps.push_back(std::move(s.reps));
    }
    return reps;
}

Matrix canonicalize_rows(const Matrix& m) {
    std::vector<int> order(static_cast<std::size_t>(m.rows()));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return std::lexicographical_compare(m.row(a), m.row(a) + m.cols(), m.row(b),
                                            m.row(b) + m.cols());
    });
    Matrix out(m.rows(), m.cols());
    for (int r = 0; r < m.rows(); ++r) {
        const double* src = m.row(order[static_cast<std::size_t>(r)]);
        std::copy(src, src + m.cols(), out.row(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Probe model
// ---------------------------------------------------------------------------

namespace {

Matrix xavier(Rng& rng, int rows, int cols) {
    const double lim = std::sqrt(6.0 / (rows + cols));
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = (2.0 * rng.uniform() - 1.0) * lim;
    return m;
}

std::vector<Matrix> snapshot_params(const ParamStore& ps) {
    std::vector<Matrix> out;
    out.reserve(static_cast<std::size_t>(ps.count()));
    for (int id = 0; id < ps.count(); ++id) out.push_back(ps.value(id));
    return out;
}

void restore_params(ParamStore& ps, const std::vector<Matrix>& snap) {
    for (int id = 0; id < ps.count(); ++id) ps.value(id) = snap[static_cast<std::size_t>(id)];
}

}  // namespace

Probe::Probe(ProbeConfig cfg, int input_width, std::uint64_t init_seed)
    : cfg_(cfg), width_(input_width) {
    cfg_.validate();
    if (width_ <= 0) throw std::invalid_argument("Probe: input width must be positive");
    Rng rng(init_seed);
    w1_ = store_.add("w1", xavier(rng, width_, cfg_.hidden));
    b1_ = store_.add("b1", Matrix(1, cfg_.hidden, 0.0));
    if (cfg_.kind == ProbeKind::Aggregating) {
        w2_ = store_.add("w2", xavier(rng, cfg_.hidden, cfg_.n_classes));
        b2_ = store_.add("b2", Matrix(1, cfg_.n_classes, 0.0));
    } else {
        w2_ = store_.add("w2", xavier(rng, cfg_.hidden, width_));
        b2_ = store_.add("b2", Matrix(1, width_, 0.0));
        query_ = store_.add("query", xavier(rng, 1, width_));
        wc_ = store_.add("wc", xavier(rng, width_, cfg_.n_classes));
        bc_ = store_.add("bc", Matrix(1, cfg_.n_classes, 0.0));
    }
}

std::vector<Tape::Var> Probe::bind(Tape& t) const {
    std::vector<Tape::Var> vars(static_cast<std::size_t>(store_.count()));
    for (int id = 0; id < store_.count(); ++id)
        vars[static_cast<std::size_t>(id)] = t.leaf(store_.value(id), t.grad_enabled());
    return vars;
}

Tape::Var Probe::forward(Tape& t, const std::vector<Tape::Var>& b, const Matrix& rows) const {
    if (rows.rows() < 1 || rows.cols() != width_)
        throw std::invalid_argument("Probe::forward: expected a non-empty set of width-" +
                                    std::to_string(width_) + " rows");
    const Tape::Var x = t.constant(canonicalize_rows(rows));
    auto v = [&](int id) { return b.at(static_cast<std::size_t>(id)); };
    if (cfg_.kind == ProbeKind::Aggregating) {
        const Tape::Var mean = t.scale(t.col_sum(x), 1.0 / rows.rows());
        const Tape::Var h = t.relu(t.add_row_vector(t.matmul(mean, v(w1_)), v(b1_)));
        return t.add_row_vector(t.matmul(h, v(w2_)), v(b2_));
    }
    const Tape::Var h = t.relu(t.add_row_vector(t.matmul(x, v(w1_)), v(b1_)));  // k x hidden
    const Tape::Var mapped = t.add_row_vector(t.matmul(h, v(w2_)), v(b2_));     // k x width
    const Tape::Var scores =
        t.scale(t.matmul_nt(v(query_), mapped), 1.0 / std::sqrt(static_cast<double>(width_)));
    const Tape::Var pooled = t.matmul(t.softmax_rows(scores), mapped);  // 1 x width
    return t.add_row_vector(t.matmul(pooled, v(wc_)), v(bc_));
}

int Probe::predict(const Matrix& rows) const {
    Tape t(false);
    const std::vector<Tape::Var> b = bind(t);
    const Matrix& logits = t.value(forward(t, b, rows));
    int best = 0;
    for (int j = 1; j < logits.cols(); ++j)
        if (logits(0, j) > logits(0, best)) best = j;
    return best;
}

void Probe::harvest_grads(const Tape& t, const std::vector<Tape::Var>& b) {
    for (int id = 0; id < store_.count(); ++id) {
        const Matrix* g = t.maybe_grad(b[static_cast<std::size_t>(id)]);
        if (g == nullptr) continue;
        Matrix& acc = store_.grad(id);
        for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += g->data()[i];
    }
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

ProbeMetrics probe_metrics(const std::vector<int>& predictions, const std::vector<int>& labels,
                           int n_classes) {
    if (predictions.size() != labels.size() || predictions.empty())
        throw std::invalid_argument("probe_metrics: prediction/label size mismatch");
    std::vector<std::int64_t> tp(static_cast<std::size_t>(n_classes), 0);
    std::vector<std::int64_t> fp(static_cast<std::size_t>(n_classes), 0);
    std::vector<std::int64_t> fn(static_cast<std::size_t>(n_classes), 0);
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int p = predictions[i];
        const int y = labels[i];
        if (p < 0 || p >= n_classes || y < 0 || y >= n_classes)
            throw std::invalid_argument("probe_metrics: class id out of range");
        if (p == y) {
            ++correct;
            ++tp[static_cast<std::size_t>(y)];
        } else {
            ++fp[static_cast<std::size_t>(p)];
            ++fn[static_cast<std::size_t>(y)];
        }
    }
    ProbeMetrics m;
    m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
    double f1_sum = 0.0;
    for (int c = 0; c < n_classes; ++c) {
        const auto k = static_cast<std::size_t>(c);
        const double prec = tp[k] + fp[k] > 0
                                ? static_cast<double>(tp[k]) / static_cast<double>(tp[k] + fp[k])
                                : 0.0;
        const double rec = tp[k] + fn[k] > 0
                               ? static_cast<double>(tp[k]) / static_cast<double>(tp[k] + fn[k])
                               : 0.0;
        f1_sum += prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    }
    m.macro_f1 = f1_sum / n_classes;
    return m;
}

ProbeResult train_probe(const std::vector<Matrix>& representations,
                        const std::vector<int>& labels, const ProbeConfig& cfg) {
    cfg.validate();
    if (representations.size() != labels.size())
        throw std::invalid_argument("train_probe: representation/label count mismatch");
    const int n = static_cast<int>(representations.size());
    if (n < 3) throw std::invalid_argument("train_probe: need at least 3 examples");

    const int width = representations.front().cols();
    for (const Matrix& m : representations)
        if (m.rows() < 1 || m.cols() != width)
            throw std::invalid_argument("train_probe: inconsistent representation shapes");
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(cfg.n_classes), 0);
    for (int y : labels) {
        if (y < 0 || y >= cfg.n_classes)
            throw std::invalid_argument("train_probe: label out of range: " + std::to_string(y));
        seen[static_cast<std::size_t>(y)] = 1;
    }
    if (std::count(seen.begin(), seen.end(), std::uint8_t{1}) < 2)
        throw std::invalid_argument("train_probe: dataset has a single class");

    // Fixed 80/10/10 split behind a seeded shuffle; validation and test
    // always get at least one example each.
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 split_gen(Rng::derive(cfg.seed, 0x5B117));
    std::shuffle(order.begin(), order.end(), split_gen);
    const int n_val = std::max(1, n / 10);
    const int n_test = std::max(1, n / 10);
    const int n_train = n - n_val - n_test;
    if (n_train < 1) throw std::invalid_argument("train_probe: dataset too small to split");
    const std::vector<int> train_idx(order.begin(), order.begin() + n_train);
    const std::vector<int> val_idx(order.begin() + n_train, order.begin() + n_train + n_val);
    const std::vector<int> test_idx(order.begin() + n_train + n_val, order.end());

    Probe probe(cfg, width, Rng::derive(cfg.seed, 0x11717));
    MomentOptimizer opt(/*rectified=*/false);  // plain Adam at a constant lr

    auto eval_split = [&](const std::vector<int>& idx) {
        std::vector<int> pred, truth;
        pred.reserve(idx.size());
        truth.reserve(idx.size());
        for (int ex : idx) {
            pred.push_back(probe.predict(representations[static_cast<std::size_t>(ex)]));
            truth.push_back(labels[static_cast<std::size_t>(ex)]);
        }
        return probe_metrics(pred, truth, cfg.n_classes);
    };

    ProbeResult res;
    res.config = cfg;
    res.n_train = n_train;
    res.n_val = n_val;
    res.n_test = n_test;

    std::vector<Matrix> best_params = snapshot_params(probe.params());
    double best_f1 = -1.0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<int> sched = train_idx;
        std::mt19937_64 epoch_gen(Rng::derive(cfg.seed, 0xE90C, static_cast<std::uint64_t>(epoch)));
        std::shuffle(sched.begin(), sched.end(), epoch_gen);
        for (std::size_t b0 = 0; b0 < sched.size();
             b0 += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t b1 =
                std::min(sched.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
            Tape t(true);
            const std::vector<Tape::Var> bv = probe.bind(t);
            Tape::Var logits = -1;
            std::vector<int> targets;
            targets.reserve(b1 - b0);
            for (std::size_t i = b0; i < b1; ++i) {
                const int ex = sched[i];
                const Tape::Var row =
                    probe.forward(t, bv, representations[static_cast<std::size_t>(ex)]);
                logits = logits < 0 ? row : t.concat_rows(logits, row);
                targets.push_back(labels[static_cast<std::size_t>(ex)]);
            }
            t.backward(t.cross_entropy_rows(logits, std::move(targets)));
            probe.params().zero_grads();
            probe.harvest_grads(t, bv);
            opt.step(probe.params(), cfg.lr);
        }
        const ProbeMetrics vm = eval_split(val_idx);
        res.val_f1_by_epoch.push_back(vm.macro_f1);
        if (vm.macro_f1 > best_f1) {  // strict: ties keep the earlier epoch
            best_f1 = vm.macro_f1;
            res.best_epoch = epoch;
            res.val = vm;
            best_params = snapshot_params(probe.params());
        }
    }

    restore_params(probe.params(), best_params);
    res.test = eval_split(test_idx);
    return res;
}

// ---------------------------------------------------------------------------
// Layer-by-layer report
// ---------------------------------------------------------------------------

std::vector<LayerwiseRow> layerwise_report(const Model& model, const LabelledDataset& data,
                                           const Tokenizer& tok,
                                           const std::vector<ProbeConfig>& protos,
                                           double alpha_threshold) {
    if (protos.empty()) throw std::invalid_argument("layerwise_report: no probe prototypes");
    std::vector<std::string> texts;
    std::vector<int> labels;
    texts.reserve(data.examples.size());
    labels.reserve(data.examples.size());
    for (const LabelledExample& e : data.examples) {
        texts.push_back(e.text);
        labels.push_back(e.label);
    }

    std::vector<LayerwiseRow> rows;
    for (int layer = 0; layer < model.config().n_enc_layers; ++layer) {
        const std::vector<Matrix> reps =
            extract_representations(model, texts, tok, layer, alpha_threshold);
        for (const ProbeConfig& proto : protos) {
            ProbeConfig cfg = proto;
            cfg.layer = layer;
            cfg.n_classes = data.n_classes();
            const ProbeResult r = train_probe(reps, labels, cfg);
            rows.push_back({layer, cfg.kind, r.test.accuracy, r.test.macro_f1, r.best_epoch});
        }
    }
    return rows;
}

void write_layerwise_csv(const std::string& path, const std::vector<LayerwiseRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write report file: " + path);
    out.precision(17);
    out << "layer,kind,accuracy,macro_f1,best_epoch\n";
    for (const LayerwiseRow& r : rows)
        out << r.layer << ',' << probe_kind_name(r.kind) << ',' << r.accuracy << ','
            << r.macro_f1 << ',' << r.best_epoch << '\n';
    if (!out.good()) throw std::runtime_error("cannot write report file: " + path);
}

}  // namespace nvib
