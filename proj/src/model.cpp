// SPDX-License-Identifier: Apache-2.0
#include "nvib/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <utility>

#include <json.hpp>

namespace nvib {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) {
        throw std::invalid_argument("ModelConfig: " + msg);
    };
    if (n_enc_layers < 1) fail("n_enc_layers must be >= 1");
    if (n_dec_layers < 1) fail("n_dec_layers must be >= 1");
    if (n_nvib_layers < 0 || n_nvib_layers > n_enc_layers)
        fail("n_nvib_layers must lie in [0, n_enc_layers]");
    if (p < 2 || p % 2 != 0) fail("p must be a positive even width");
    if (d_ff < 1) fail("d_ff must be >= 1");
    if (n_heads != 1) fail("only single-head attention is supported");
    if (d_k < 0) fail("d_k must be >= 0 (0 means p)");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
    if (vocab_size < 5) fail("vocab_size must cover the four specials plus data");
}

std::string model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["n_enc_layers"] = cfg.n_enc_layers;
    j["n_dec_layers"] = cfg.n_dec_layers;
    j["n_nvib_layers"] = cfg.n_nvib_layers;
    j["p"] = cfg.p;
    j["d_ff"] = cfg.d_ff;
    j["n_heads"] = cfg.n_heads;
    j["d_k"] = cfg.d_k;
    j["dropout"] = cfg.dropout;
    j["vocab_size"] = cfg.vocab_size;
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& json_text) {
    const nlohmann::json j = nlohmann::json::parse(json_text);
    const ModelConfig defaults;
    ModelConfig cfg;
    cfg.n_enc_layers = j.value("n_enc_layers", defaults.n_enc_layers);
    cfg.n_dec_layers = j.value("n_dec_layers", defaults.n_dec_layers);
    cfg.n_nvib_layers = j.value("n_nvib_layers", defaults.n_nvib_layers);
    cfg.p = j.value("p", defaults.p);
    cfg.d_ff = j.value("d_ff", defaults.d_ff);
    cfg.n_heads = j.value("n_heads", defaults.n_heads);
    cfg.d_k = j.value("d_k", defaults.d_k);
    cfg.dropout = j.value("dropout", defaults.dropout);
    cfg.vocab_size = j.value("vocab_size", defaults.vocab_size);
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

int ParamStore::add(const std::string& name, Matrix value) {
    if (find(name) >= 0) throw std::invalid_argument("ParamStore: duplicate name " + name);
    Entry e;
    e.name = name;
    e.grad = Matrix(value.rows(), value.cols());
    e.value = std::move(value);
    entries_.push_back(std::move(e));
    return static_cast<int>(entries_.size()) - 1;
}

int ParamStore::find(const std::string& name) const {
    for (int i = 0; i < static_cast<int>(entries_.size()); ++i)
        if (entries_[i].name == name) return i;
    return -1;
}

void ParamStore::zero_grads() {
    for (Entry& e : entries_) e.grad.fill(0.0);
}

double ParamStore::grad_norm() const {
    double s = 0.0;
    for (const Entry& e : entries_)
        for (std::size_t i = 0; i < e.grad.size(); ++i) s += e.grad.data()[i] * e.grad.data()[i];
    return std::sqrt(s);
}

std::size_t ParamStore::scalar_count() const {
    std::size_t s = 0;
    for (const Entry& e : entries_) s += e.value.size();
    return s;
}

// ---------------------------------------------------------------------------
// Construction / initialisation
// ---------------------------------------------------------------------------

namespace {

Matrix xavier(Rng& rng, int rows, int cols) {
    const double lim = std::sqrt(6.0 / (rows + cols));
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = (2.0 * rng.uniform() - 1.0) * lim;
    return m;
}

std::vector<std::uint8_t> causal_mask(int len) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(len) * len, 0);
    for (int i = 0; i < len; ++i)
        for (int j = 0; j <= i; ++j) m[static_cast<std::size_t>(i) * len + j] = 1;
    return m;
}

// Single-head scaled dot-product attention with output projection.
Tape::Var standard_attention(Tape& t, Tape::Var q_in, Tape::Var kv_in, Tape::Var wq,
                             Tape::Var wk, Tape::Var wv, Tape::Var wo, int dk,
                             std::vector<std::uint8_t> mask, Matrix* attn_out) {
    Tape::Var q = t.matmul(q_in, wq);
    Tape::Var k = t.matmul(kv_in, wk);
    Tape::Var logits = t.scale(t.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dk)));
    Tape::Var attn = t.softmax_rows(logits, std::move(mask));
    if (attn_out) *attn_out = t.value(attn);
    Tape::Var v = t.matmul(kv_in, wv);
    return t.matmul(t.matmul(attn, v), wo);
}

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(init_seed);
    const int p = cfg_.p;
    const int dk = cfg_.key_width();

    // Embedding rows come out unit-variance after the sqrt(p) lookup scale.
    Matrix emb(cfg_.vocab_size, p);
    const double emb_sd = 1.0 / std::sqrt(static_cast<double>(p));
    for (int i = 0; i < emb.rows(); ++i)
        for (int j = 0; j < emb.cols(); ++j) emb(i, j) = rng.normal() * emb_sd;
    embed_id_ = store_.add("embed", std::move(emb));

    enc_.resize(cfg_.n_enc_layers);
    for (int l = 0; l < cfg_.n_enc_layers; ++l) {
        EncLayerIds& e = enc_[l];
        const std::string pre = "enc" + std::to_string(l) + ".";
        e.nvib = is_nvib_layer(l);
        if (e.nvib) {
            // Zero alpha head: every component opens with pseudo-count 1.
            e.nv.w_alpha = store_.add(pre + "nvib.w_alpha", Matrix(1, p, 0.0));
            e.nv.b_alpha = store_.add(pre + "nvib.b_alpha", Matrix(1, 1, 0.0));
            e.nv.w_mu = store_.add(pre + "nvib.w_mu", xavier(rng, p, p));
            e.nv.b_mu = store_.add(pre + "nvib.b_mu", Matrix(1, p, 0.0));
            e.nv.w_sigma = store_.add(pre + "nvib.w_sigma", xavier(rng, p, p));
            // Start the std-dev head below 1 so early reconstruction signal
            // is not swamped by sampling noise.
            e.nv.b_sigma = store_.add(pre + "nvib.b_sigma", Matrix(1, p, -1.0));
            e.nv.w_q = store_.add(pre + "nvib.w_q", xavier(rng, p, dk));
            e.nv.w_k = store_.add(pre + "nvib.w_k", xavier(rng, p, dk));
            e.nv.wo = store_.add(pre + "wo", xavier(rng, p, p));
        } else {
            e.attn.wq = store_.add(pre + "wq", xavier(rng, p, dk));
            e.attn.wk = store_.add(pre + "wk", xavier(rng, p, dk));
            e.attn.wv = store_.add(pre + "wv", xavier(rng, p, p));
            e.attn.wo = store_.add(pre + "wo", xavier(rng, p, p));
        }
        e.ln1.gain = store_.add(pre + "ln1.gain", Matrix(1, p, 1.0));
        e.ln1.bias = store_.add(pre + "ln1.bias", Matrix(1, p, 0.0));
        e.ff.w1 = store_.add(pre + "ff.w1", xavier(rng, p, cfg_.d_ff));
        e.ff.b1 = store_.add(pre + "ff.b1", Matrix(1, cfg_.d_ff, 0.0));
        e.ff.w2 = store_.add(pre + "ff.w2", xavier(rng, cfg_.d_ff, p));
        e.ff.b2 = store_.add(pre + "ff.b2", Matrix(1, p, 0.0));
        e.ln2.gain = store_.add(pre + "ln2.gain", Matrix(1, p, 1.0));
        e.ln2.bias = store_.add(pre + "ln2.bias", Matrix(1, p, 0.0));
    }

    dec_.resize(cfg_.n_dec_layers);
    for (int l = 0; l < cfg_.n_dec_layers; ++l) {
        DecLayerIds& d = dec_[l];
        const std::string pre = "dec" + std::to_string(l) + ".";
        d.self_attn.wq = store_.add(pre + "self.wq", xavier(rng, p, dk));
        d.self_attn.wk = store_.add(pre + "self.wk", xavier(rng, p, dk));
        d.self_attn.wv = store_.add(pre + "self.wv", xavier(rng, p, p));
        d.self_attn.wo = store_.add(pre + "self.wo", xavier(rng, p, p));
        d.ln1.gain = store_.add(pre + "ln1.gain", Matrix(1, p, 1.0));
        d.ln1.bias = store_.add(pre + "ln1.bias", Matrix(1, p, 0.0));
        d.cross.wq = store_.add(pre + "cross.wq", xavier(rng, p, dk));
        d.cross.wk = store_.add(pre + "cross.wk", xavier(rng, p, dk));
        d.cross.wv = store_.add(pre + "cross.wv", xavier(rng, p, p));
        d.cross.wo = store_.add(pre + "cross.wo", xavier(rng, p, p));
        d.ln2.gain = store_.add(pre + "ln2.gain", Matrix(1, p, 1.0));
        d.ln2.bias = store_.add(pre + "ln2.bias", Matrix(1, p, 0.0));
        d.ff.w1 = store_.add(pre + "ff.w1", xavier(rng, p, cfg_.d_ff));
        d.ff.b1 = store_.add(pre + "ff.b1", Matrix(1, cfg_.d_ff, 0.0));
        d.ff.w2 = store_.add(pre + "ff.w2", xavier(rng, cfg_.d_ff, p));
        d.ff.b2 = store_.add(pre + "ff.b2", Matrix(1, p, 0.0));
        d.ln3.gain = store_.add(pre + "ln3.gain", Matrix(1, p, 1.0));
        d.ln3.bias = store_.add(pre + "ln3.bias", Matrix(1, p, 0.0));
    }

    out_w_id_ = store_.add("out.w", xavier(rng, p, cfg_.vocab_size));
    out_b_id_ = store_.add("out.b", Matrix(1, cfg_.vocab_size, 0.0));
}

Model::Bound Model::bind(Tape& t) const {
    Bound b;
    b.vars.resize(store_.count());
    for (int id = 0; id < store_.count(); ++id)
        b.vars[id] = t.leaf(store_.value(id), t.grad_enabled());
    return b;
}

void Model::harvest_grads(const Tape& t, const Bound& b) {
    for (int id = 0; id < store_.count(); ++id) {
        const Matrix* g = t.maybe_grad(b.vars[id]);
        if (g == nullptr) continue;
        Matrix& acc = store_.grad(id);
        for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += g->data()[i];
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

Tape::Var Model::sublayer_norm(Tape& t, const Bound& b, LnIds ln, Tape::Var residual,
                               Tape::Var sub_out, bool train_mode, Rng* rng) const {
    if (train_mode && cfg_.dropout > 0.0) sub_out = t.dropout(sub_out, cfg_.dropout, *rng);
    return t.layer_norm_rows(t.add(residual, sub_out), b[ln.gain], b[ln.bias]);
}

Tape::Var Model::feed_forward(Tape& t, const Bound& b, FfIds ff, Tape::Var x) const {
    Tape::Var h = t.relu(t.add_row_vector(t.matmul(x, b[ff.w1]), b[ff.b1]));
    return t.add_row_vector(t.matmul(h, b[ff.w2]), b[ff.b2]);
}

NvibProjectionVars Model::nvib_vars(const Bound& b, const NvibIds& ids) const {
    NvibProjectionVars pv;
    pv.w_alpha = b[ids.w_alpha];
    pv.b_alpha = b[ids.b_alpha];
    pv.w_mu = b[ids.w_mu];
    pv.b_mu = b[ids.b_mu];
    pv.w_sigma = b[ids.w_sigma];
    pv.b_sigma = b[ids.b_sigma];
    pv.w_q = b[ids.w_q];
    pv.w_k = b[ids.w_k];
    pv.d = cfg_.key_width();
    return pv;
}

EncodeResult Model::encode(Tape& t, const Bound& b, const std::vector<int>& tokens,
                           bool train_mode, double alpha_threshold, Rng* rng,
                           bool capture_attention) const {
    if (tokens.empty()) throw std::invalid_argument("Model::encode: empty input sequence");
    for (int id : tokens)
        if (id < 0 || id >= cfg_.vocab_size)
            throw std::invalid_argument("Model::encode: token id out of range: " +
                                        std::to_string(id));
    if (train_mode && rng == nullptr)
        throw std::invalid_argument("Model::encode: train mode requires an rng");

    const int n = static_cast<int>(tokens.size());
    const int p = cfg_.p;
    const int dk = cfg_.key_width();

    EncodeResult res;
    Tape::Var x = t.gather_rows(b[embed_id_], tokens);
    x = t.scale(x, std::sqrt(static_cast<double>(p)));
    x = t.add(x, t.constant(positional_encoding(n, p)));
    if (train_mode && cfg_.dropout > 0.0) x = t.dropout(x, cfg_.dropout, *rng);

    Tape::Var log_alpha_prev = t.constant(Matrix(n, 1, 0.0));
    std::vector<std::uint8_t> carry;  // keep mask of the previous denoising layer

    for (int l = 0; l < cfg_.n_enc_layers; ++l) {
        const EncLayerIds& ids = enc_[l];
        LayerTrace tr;
        tr.layer = l;
        Tape::Var sub = -1;
        if (ids.nvib) {
            tr.is_nvib = true;
            tr.sampled = train_mode;
            const NvibProjectionVars proj = nvib_vars(b, ids.nv);
            DpParamsVars dpv = project_dp_params(t, x, log_alpha_prev, proj, l);
            tr.alpha = t.value(dpv.alpha);
            Tape::Var attn_var = -1;
            if (train_mode) {
                // Training never prunes, but retention is still logged
                // against the threshold.
                const std::vector<std::uint8_t> keep = retained_mask(t, dpv, alpha_threshold);
                tr.retained.assign(keep.begin(), keep.begin() + n);
                const SampledMixtureVars mix = sample_dp(t, dpv, *rng);
                sub = denoising_attention_train(t, x, mix, proj, {},
                                                capture_attention ? &attn_var : nullptr);
            } else {
                const std::vector<std::uint8_t> keep =
                    threshold_alpha(t, dpv, alpha_threshold, carry.empty() ? nullptr : &carry);
                carry = keep;
                tr.retained.assign(keep.begin(), keep.begin() + n);
                try {
                    sub = denoising_attention_test(t, x, dpv, proj, keep,
                                                   capture_attention ? &attn_var : nullptr);
                } catch (const NumericalError& err) {
                    res.traces.push_back(std::move(tr));
                    throw EncodeError(std::string(err.what()) + " (encoder layer " +
                                          std::to_string(l) + ")",
                                      res.traces);
                }
            }
            if (attn_var >= 0) tr.attention = t.value(attn_var);
            sub = t.matmul(sub, b[ids.nv.wo]);
            log_alpha_prev = dpv.log_alpha;
            res.dp.push_back(dpv);
            res.nvib_layers.push_back(l);
        } else {
            Matrix attn_m;
            sub = standard_attention(t, x, x, b[ids.attn.wq], b[ids.attn.wk], b[ids.attn.wv],
                                     b[ids.attn.wo], dk, {},
                                     capture_attention ? &attn_m : nullptr);
            tr.attention = std::move(attn_m);
        }
        x = sublayer_norm(t, b, ids.ln1, x, sub, train_mode, rng);
        x = sublayer_norm(t, b, ids.ln2, x, feed_forward(t, b, ids.ff, x), train_mode, rng);
        if (capture_attention) tr.hidden = t.value(x);
        res.traces.push_back(std::move(tr));
    }

    res.hidden = x;
    if (cfg_.n_nvib_layers > 0) {
        // The bottleneck: only components whose final-layer pseudo-count
        // clears the threshold stay visible to the decoder.  In eval mode
        // `carry` already folds in drops from the lower denoising layers.
        const std::vector<std::uint8_t> keep =
            train_mode ? retained_mask(t, res.dp.back(), alpha_threshold) : carry;
        res.bottleneck.assign(keep.begin(), keep.begin() + n);
        bool any = false;
        for (std::uint8_t f : res.bottleneck) any = any || (f != 0);
        if (!any)
            throw EncodeError(
                "encoder bottleneck fully pruned: no data component of layer " +
                    std::to_string(res.nvib_layers.back()) +
                    " has alpha above the threshold",
                res.traces);
    } else {
        res.bottleneck.assign(static_cast<std::size_t>(n), 1);
    }
    return res;
}

Tape::Var Model::decode(Tape& t, const Bound& b, const std::vector<int>& prefix,
                        Tape::Var memory, const std::vector<std::uint8_t>& memory_mask,
                        bool train_mode, Rng* rng) const {
    if (prefix.empty() || prefix.front() != kBosId)
        throw std::invalid_argument("Model::decode: prefix must start with BOS");
    for (int id : prefix)
        if (id < 0 || id >= cfg_.vocab_size)
            throw std::invalid_argument("Model::decode: token id out of range: " +
                                        std::to_string(id));
    if (train_mode && rng == nullptr)
        throw std::invalid_argument("Model::decode: train mode requires an rng");
    const int n_mem = t.value(memory).rows();
    if (static_cast<int>(memory_mask.size()) != n_mem)
        throw std::invalid_argument("Model::decode: memory mask size mismatch");
    bool any = false;
    for (std::uint8_t f : memory_mask) any = any || (f != 0);
    if (!any)
        throw NumericalError("Model::decode: memory fully masked, cross-attention has "
                             "no visible encoder position");

    const int L = static_cast<int>(prefix.size());
    const int p = cfg_.p;
    const int dk = cfg_.key_width();

    Tape::Var x = t.gather_rows(b[embed_id_], prefix);
    x = t.scale(x, std::sqrt(static_cast<double>(p)));
    x = t.add(x, t.constant(positional_encoding(L, p)));
    if (train_mode && cfg_.dropout > 0.0) x = t.dropout(x, cfg_.dropout, *rng);

    for (const DecLayerIds& d : dec_) {
        Tape::Var sub = standard_attention(t, x, x, b[d.self_attn.wq], b[d.self_attn.wk],
                                           b[d.self_attn.wv], b[d.self_attn.wo], dk,
                                           causal_mask(L), nullptr);
        x = sublayer_norm(t, b, d.ln1, x, sub, train_mode, rng);
        sub = standard_attention(t, x, memory, b[d.cross.wq], b[d.cross.wk], b[d.cross.wv],
                                 b[d.cross.wo], dk, memory_mask, nullptr);
        x = sublayer_norm(t, b, d.ln2, x, sub, train_mode, rng);
        x = sublayer_norm(t, b, d.ln3, x, feed_forward(t, b, d.ff, x), train_mode, rng);
    }
    return t.add_row_vector(t.matmul(x, b[out_w_id_]), b[out_b_id_]);
}

std::vector<int> Model::greedy_decode(const std::vector<int>& src, int max_len,
                                      double alpha_threshold,
                                      std::vector<LayerTrace>* traces_out) const {
    Tape t(false);
    const Bound b = bind(t);
    const EncodeResult enc =
        encode(t, b, src, false, alpha_threshold, nullptr, traces_out != nullptr);
    if (traces_out) *traces_out = enc.traces;

    std::vector<int> out;
    std::vector<int> prefix{kBosId};
    for (int step = 0; step < max_len; ++step) {
        const Tape::Var logits = decode(t, b, prefix, enc.hidden, enc.bottleneck, false, nullptr);
        const Matrix& lv = t.value(logits);
        const int last = lv.rows() - 1;
        int best = 0;
        for (int j = 1; j < lv.cols(); ++j)
            if (lv(last, j) > lv(last, best)) best = j;
        if (best == kEosId) break;
        out.push_back(best);
        prefix.push_back(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Traces / retention
// ---------------------------------------------------------------------------

Matrix positional_encoding(int length, int width) {
    Matrix pe(length, width);
    for (int pos = 0; pos < length; ++pos) {
        for (int j = 0; j < width; j += 2) {
            const double rate = std::pow(10000.0, -static_cast<double>(j) / width);
            pe(pos, j) = std::sin(pos * rate);
            pe(pos, j + 1) = std::cos(pos * rate);
        }
    }
    return pe;
}

std::vector<double> count_retention(const std::vector<LayerTrace>& traces) {
    std::vector<double> out;
    for (const LayerTrace& tr : traces) {
        if (!tr.is_nvib) continue;
        double kept = 0.0;
        for (std::uint8_t f : tr.retained) kept += (f != 0) ? 1.0 : 0.0;
        out.push_back(tr.retained.empty() ? 0.0 : kept / static_cast<double>(tr.retained.size()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[9] = "NVIBCKPT";  // 8 payload bytes + NUL

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}
std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model,
                     const std::string& meta_json) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    os.write(kMagic, 8);
    write_u32(os, kCheckpointVersion);

    nlohmann::json header;
    header["config"] = nlohmann::json::parse(model_config_to_json(model.config()));
    header["meta"] =
        meta_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(meta_json);
    const std::string head = header.dump();
    write_u64(os, head.size());
    os.write(head.data(), static_cast<std::streamsize>(head.size()));

    const ParamStore& ps = model.params();
    write_u64(os, static_cast<std::uint64_t>(ps.count()));
    for (int id = 0; id < ps.count(); ++id) {
        const std::string& nm = ps.name(id);
        write_u32(os, static_cast<std::uint32_t>(nm.size()));
        os.write(nm.data(), static_cast<std::streamsize>(nm.size()));
        const Matrix& v = ps.value(id);
        write_u64(os, static_cast<std::uint64_t>(v.rows()));
        write_u64(os, static_cast<std::uint64_t>(v.cols()));
        os.write(reinterpret_cast<const char*>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

Model load_checkpoint(const std::string& path, std::string* meta_json) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const std::uint32_t version = read_u32(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported format version " +
                                 std::to_string(version));

    const std::uint64_t head_len = read_u64(is);
    std::string head(head_len, '\0');
    is.read(head.data(), static_cast<std::streamsize>(head_len));
    if (!is) throw std::runtime_error("checkpoint: truncated header in " + path);
    const nlohmann::json header = nlohmann::json::parse(head);
    const ModelConfig cfg = model_config_from_json(header.at("config").dump());
    if (meta_json) *meta_json = header.value("meta", nlohmann::json::object()).dump();

    Model model(cfg, 0);
    ParamStore& ps = model.params();
    const std::uint64_t n_tensors = read_u64(is);
    std::vector<bool> seen(static_cast<std::size_t>(ps.count()), false);
    for (std::uint64_t k = 0; k < n_tensors; ++k) {
        const std::uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw std::runtime_error("checkpoint: truncated tensor name in " + path);
        const int rows = static_cast<int>(read_u64(is));
        const int cols = static_cast<int>(read_u64(is));
        const int id = ps.find(name);
        if (id < 0) throw std::runtime_error("checkpoint: unknown tensor " + name);
        if (seen[static_cast<std::size_t>(id)])
            throw std::runtime_error("checkpoint: duplicate tensor " + name);
        Matrix& dst = ps.value(id);
        if (dst.rows() != rows || dst.cols() != cols)
            throw std::runtime_error("checkpoint: shape mismatch for tensor " + name);
        is.read(reinterpret_cast<char*>(dst.data()),
                static_cast<std::streamsize>(dst.size() * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated tensor data in " + path);
        seen[static_cast<std::size_t>(id)] = true;
    }
    for (int id = 0; id < ps.count(); ++id)
        if (!seen[static_cast<std::size_t>(id)])
            throw std::runtime_error("checkpoint: missing tensor " + ps.name(id));
    return model;
}

}  // namespace nvib
