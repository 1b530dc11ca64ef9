// SPDX-License-Identifier: Apache-2.0
#include "nvib/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>

#include <json.hpp>

#include "nvib/nvib_math.hpp"

namespace nvib {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) {
        throw std::invalid_argument("TrainConfig: " + msg);
    };
    if (steps < 1) fail("steps must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(lr > 0.0)) fail("lr must be positive");
    if (!(grad_clip_norm > 0.0)) fail("grad_clip_norm must be positive");
    if (!(deletion_prob >= 0.0 && deletion_prob < 1.0)) fail("deletion_prob must lie in [0, 1)");
    if (!(lambda_d_prime >= 0.0)) fail("lambda_d_prime must be >= 0");
    if (!(lambda_g_prime >= 0.0)) fail("lambda_g_prime must be >= 0");
    if (!(alpha_delta >= 0.0)) fail("alpha_delta must be >= 0");
    if (!(alpha_threshold >= 0.0)) fail("alpha_threshold must be >= 0");
    if (!(anneal_start >= 0.0 && anneal_start <= anneal_end && anneal_end <= 1.0))
        fail("anneal window must satisfy 0 <= start <= end <= 1");
    if (max_len < 1) fail("max_len must be >= 1");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) fail("val_fraction must lie in [0, 1)");
    if (eval_every < 1) fail("eval_every must be >= 1");
    if (optimizer != "radam" && optimizer != "adam")
        fail("optimizer must be \"radam\" or \"adam\"");
}

std::string train_config_to_json(const TrainConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["steps"] = cfg.steps;
    j["batch_size"] = cfg.batch_size;
    j["lr"] = cfg.lr;
    j["grad_clip_norm"] = cfg.grad_clip_norm;
    j["deletion_prob"] = cfg.deletion_prob;
    j["lambda_d_prime"] = cfg.lambda_d_prime;
    j["lambda_g_prime"] = cfg.lambda_g_prime;
    j["alpha_delta"] = cfg.alpha_delta;
    j["alpha_threshold"] = cfg.alpha_threshold;
    j["anneal_start"] = cfg.anneal_start;
    j["anneal_end"] = cfg.anneal_end;
    j["max_len"] = cfg.max_len;
    j["val_fraction"] = cfg.val_fraction;
    j["eval_every"] = cfg.eval_every;
    j["optimizer"] = cfg.optimizer;
    return j.dump();
}

TrainConfig train_config_from_json(const std::string& json_text) {
    const nlohmann::json j = nlohmann::json::parse(json_text);
    const TrainConfig d;
    TrainConfig cfg;
    cfg.seed = j.value("seed", d.seed);
    cfg.steps = j.value("steps", d.steps);
    cfg.batch_size = j.value("batch_size", d.batch_size);
    cfg.lr = j.value("lr", d.lr);
    cfg.grad_clip_norm = j.value("grad_clip_norm", d.grad_clip_norm);
    cfg.deletion_prob = j.value("deletion_prob", d.deletion_prob);
    cfg.lambda_d_prime = j.value("lambda_d_prime", d.lambda_d_prime);
    cfg.lambda_g_prime = j.value("lambda_g_prime", d.lambda_g_prime);
    cfg.alpha_delta = j.value("alpha_delta", d.alpha_delta);
    cfg.alpha_threshold = j.value("alpha_threshold", d.alpha_threshold);
    cfg.anneal_start = j.value("anneal_start", d.anneal_start);
    cfg.anneal_end = j.value("anneal_end", d.anneal_end);
    cfg.max_len = j.value("max_len", d.max_len);
    cfg.val_fraction = j.value("val_fraction", d.val_fraction);
    cfg.eval_every = j.value("eval_every", d.eval_every);
    cfg.optimizer = j.value("optimizer", d.optimizer);
    cfg.validate();
    return cfg;
}

namespace {

void flatten_json(const nlohmann::json& j, const std::string& prefix,
                  std::map<std::string, std::string>& out) {
    if (j.is_object()) {
        for (auto it = j.begin(); it != j.end(); ++it)
            flatten_json(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    } else {
        out[prefix] = j.dump();
    }
}

}  // namespace

std::vector<std::string> json_config_diff(const std::string& a, const std::string& b) {
    std::map<std::string, std::string> fa, fb;
    flatten_json(nlohmann::json::parse(a), "", fa);
    flatten_json(nlohmann::json::parse(b), "", fb);
    std::vector<std::string> diff;
    for (const auto& [k, v] : fa) {
        const auto it = fb.find(k);
        if (it == fb.end() || it->second != v) diff.push_back(k);
    }
    for (const auto& [k, v] : fb)
        if (fa.find(k) == fa.end()) diff.push_back(k);
    std::sort(diff.begin(), diff.end());
    diff.erase(std::unique(diff.begin(), diff.end()), diff.end());
    return diff;
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

std::vector<double> beta_weights(int n_layers) {
    if (n_layers < 1) throw std::invalid_argument("beta_weights: n_layers must be >= 1");
    const double denom = static_cast<double>(n_layers) * (n_layers + 1) / 2.0;
    std::vector<double> w(static_cast<std::size_t>(n_layers));
    for (int l = 1; l <= n_layers; ++l) w[l - 1] = static_cast<double>(l) / denom;
    return w;
}

std::pair<double, double> scale_lambdas(double lambda_d_prime, double lambda_g_prime, int n,
                                        int d) {
    if (n < 1 || d < 1) throw std::invalid_argument("scale_lambdas: n and d must be >= 1");
    return {lambda_d_prime / n, lambda_g_prime / (static_cast<double>(n) * d)};
}

double anneal_factor(std::int64_t step, std::int64_t total_steps, double lo, double hi) {
    if (total_steps < 1) throw std::invalid_argument("anneal_factor: total_steps must be >= 1");
    const double progress =
        static_cast<double>(step) / static_cast<double>(total_steps);
    if (progress <= lo) return 0.0;
    if (progress >= hi) return 1.0;
    return (progress - lo) / (hi - lo);
}

double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
    if (total_steps < 1) throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
    const double progress =
        static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

std::vector<std::string> load_corpus(const std::string& path, int max_len) {
    if (max_len < 1) throw std::invalid_argument("load_corpus: max_len must be >= 1");
    std::ifstream is(path);
    if (!is) throw std::runtime_error("corpus: cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::uint32_t> cps = Tokenizer::utf8_decode(line);
        if (static_cast<int>(cps.size()) > max_len) {
            std::string clipped;
            for (int i = 0; i < max_len; ++i) clipped += Tokenizer::utf8_encode_one(cps[i]);
            line = std::move(clipped);
        }
        lines.push_back(line);
    }
    if (lines.empty()) throw std::runtime_error("corpus: no usable lines in " + path);
    return lines;
}

CorpusSplit split_corpus(std::vector<std::string> lines, double val_fraction,
                         std::uint64_t seed) {
    if (lines.empty()) throw std::invalid_argument("split_corpus: empty corpus");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0))
        throw std::invalid_argument("split_corpus: val_fraction must lie in [0, 1)");
    std::mt19937_64 eng(Rng::derive(seed, 0x5B17));
    std::shuffle(lines.begin(), lines.end(), eng);
    const int n = static_cast<int>(lines.size());
    int k = static_cast<int>(std::ceil(val_fraction * n));
    if (val_fraction > 0.0 && k < 1) k = 1;
    if (k >= n) k = n - 1;  // keep at least one training line
    CorpusSplit split;
    split.val.assign(lines.begin(), lines.begin() + k);
    split.train.assign(lines.begin() + k, lines.end());
    return split;
}

std::vector<int> noise_delete(const std::vector<int>& tokens, double deletion_prob, Rng& rng) {
    if (!(deletion_prob >= 0.0 && deletion_prob < 1.0))
        throw std::invalid_argument("noise_delete: deletion_prob must lie in [0, 1)");
    std::vector<int> out;
    out.reserve(tokens.size());
    std::vector<std::size_t> data_positions;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= 4) {
            data_positions.push_back(i);
            if (rng.uniform() < deletion_prob) continue;  // deleted
        }
        out.push_back(tokens[i]);
    }
    if (out.empty() && !data_positions.empty()) {
        // Everything fell: keep one uniformly chosen character instead.
        const std::size_t pick = data_positions[rng.integer(data_positions.size())];
        out.push_back(tokens[pick]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

double LossBreakdown::recompute_total() const {
    double kl = 0.0;
    for (std::size_t i = 0; i < kl_d.size(); ++i)
        kl += beta[i] * (lambda_d * kl_d[i] + lambda_g * kl_g[i]);
    return reconstruction + anneal * kl;
}

SequenceLossResult sequence_loss(const Model& model, Tape& t, const Model::Bound& b,
                                 const std::vector<int>& noisy, const std::vector<int>& clean,
                                 const TrainConfig& tc, std::int64_t step, Rng& rng) {
    if (clean.empty()) throw std::invalid_argument("sequence_loss: empty clean target");
    SequenceLossResult out;
    const EncodeResult enc = model.encode(t, b, noisy, true, tc.alpha_threshold, &rng);

    std::vector<int> prefix;
    prefix.reserve(clean.size() + 1);
    prefix.push_back(kBosId);
    prefix.insert(prefix.end(), clean.begin(), clean.end());
    std::vector<int> targets = clean;
    targets.push_back(kEosId);
    const Tape::Var logits = model.decode(t, b, prefix, enc.hidden, enc.bottleneck, true, &rng);
    Tape::Var loss = t.cross_entropy_rows(logits, targets);

    LossBreakdown& bd = out.breakdown;
    bd.reconstruction = t.value(loss)(0, 0);
    bd.anneal = anneal_factor(step, tc.steps, tc.anneal_start, tc.anneal_end);
    const int n = static_cast<int>(noisy.size());
    const auto [lam_d, lam_g] =
        scale_lambdas(tc.lambda_d_prime, tc.lambda_g_prime, n, model.config().p);
    bd.lambda_d = lam_d;
    bd.lambda_g = lam_g;
    const std::vector<double> betas = beta_weights(model.config().n_enc_layers);
    const double alpha_p0_prime = 1.0 + n * tc.alpha_delta;

    for (std::size_t i = 0; i < enc.dp.size(); ++i) {
        const double beta = betas.at(static_cast<std::size_t>(enc.nvib_layers[i]));
        bd.beta.push_back(beta);
        double kd_val = 0.0, kg_val = 0.0;
        if (tc.lambda_d_prime != 0.0) {
            const Tape::Var a0 = t.sum_all(enc.dp[i].alpha);
            const Tape::Var kd = kl_dirichlet(t, a0, alpha_p0_prime);
            kd_val = t.value(kd)(0, 0);
            loss = t.add(loss, t.scale(kd, bd.anneal * beta * lam_d));
        }
        if (tc.lambda_g_prime != 0.0) {
            const Tape::Var kg = kl_gaussian(t, enc.dp[i]);
            kg_val = t.value(kg)(0, 0);
            loss = t.add(loss, t.scale(kg, bd.anneal * beta * lam_g));
        }
        bd.kl_d.push_back(kd_val);
        bd.kl_g.push_back(kg_val);
    }
    bd.total = t.value(loss)(0, 0);
    out.loss = loss;
    out.retention = count_retention(enc.traces);
    return out;
}

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

MomentOptimizer::MomentOptimizer(bool rectified, double beta1, double beta2, double eps)
    : rectified_(rectified), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void MomentOptimizer::step(ParamStore& params, double lr) {
    if (m_.empty()) {
        m_.resize(static_cast<std::size_t>(params.count()));
        v_.resize(static_cast<std::size_t>(params.count()));
        for (int id = 0; id < params.count(); ++id) {
            m_[id] = Matrix::zeros_like(params.value(id));
            v_[id] = Matrix::zeros_like(params.value(id));
        }
    }
    ++t_;
    const double b1t = std::pow(beta1_, static_cast<double>(t_));
    const double b2t = std::pow(beta2_, static_cast<double>(t_));
    const double rho_inf = 2.0 / (1.0 - beta2_) - 1.0;
    const double rho_t = rho_inf - 2.0 * static_cast<double>(t_) * b2t / (1.0 - b2t);
    bool adaptive = true;
    double rect = 1.0;
    if (rectified_) {
        if (rho_t > 4.0) {
            rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                             ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
        } else {
            adaptive = false;  // variance not yet tractable: momentum-only update
        }
    }
    for (int id = 0; id < params.count(); ++id) {
        Matrix& x = params.value(id);
        const Matrix& g = params.grad(id);
        Matrix& m = m_[id];
        Matrix& v = v_[id];
        for (std::size_t k = 0; k < x.size(); ++k) {
            const double gk = g.data()[k];
            m.data()[k] = beta1_ * m.data()[k] + (1.0 - beta1_) * gk;
            v.data()[k] = beta2_ * v.data()[k] + (1.0 - beta2_) * gk * gk;
            const double mhat = m.data()[k] / (1.0 - b1t);
            if (adaptive) {
                const double vhat = std::sqrt(v.data()[k] / (1.0 - b2t));
                x.data()[k] -= lr * rect * mhat / (vhat + eps_);
            } else {
                x.data()[k] -= lr * mhat;
            }
        }
    }
}

double clip_gradients(ParamStore& params, double max_norm) {
    const double norm = params.grad_norm();
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (int id = 0; id < params.count(); ++id) {
            Matrix& g = params.grad(id);
            for (std::size_t k = 0; k < g.size(); ++k) g.data()[k] *= scale;
        }
    }
    return norm;
}

int edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= m; ++j) {
            const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

struct EvalSlot {
    bool ok = false;
    bool failed_encode = false;
    double ce = 0.0;
    double accuracy = 0.0;
    std::vector<double> retention;
    std::string error;
};

}  // namespace

EvalResult evaluate(const Model& model, const std::vector<std::string>& lines,
                    const Tokenizer& tok, const TrainConfig& tc, std::uint64_t noise_salt,
                    bool with_accuracy) {
    EvalResult res;
    std::vector<std::vector<int>> seqs;
    for (const std::string& line : lines) {
        std::vector<int> ids = tok.encode(line);
        if (!ids.empty()) seqs.push_back(std::move(ids));
    }
    const int n = static_cast<int>(seqs.size());
    if (n == 0) throw std::invalid_argument("evaluate: no non-empty sequences");
    std::vector<EvalSlot> slots(static_cast<std::size_t>(n));

#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
        EvalSlot& s = slots[static_cast<std::size_t>(i)];
        try {
            const std::vector<int>& clean = seqs[static_cast<std::size_t>(i)];
            Rng noise_rng(Rng::derive(noise_salt, static_cast<std::uint64_t>(i)));
            const std::vector<int> noisy = noise_delete(clean, tc.deletion_prob, noise_rng);

            Tape t(false);
            const Model::Bound b = model.bind(t);
            try {
                const EncodeResult enc =
                    model.encode(t, b, noisy, false, tc.alpha_threshold, nullptr);
                std::vector<int> prefix{kBosId};
                prefix.insert(prefix.end(), clean.begin(), clean.end());
                std::vector<int> targets = clean;
                targets.push_back(kEosId);
                const Tape::Var logits =
                    model.decode(t, b, prefix, enc.hidden, enc.bottleneck, false, nullptr);
                s.ce = t.value(t.cross_entropy_rows(logits, targets))(0, 0);
                s.retention = count_retention(enc.traces);
                if (with_accuracy) {
                    const std::vector<int> decoded = model.greedy_decode(
                        clean, tc.max_len + 8, tc.alpha_threshold);
                    const double cer =
                        static_cast<double>(edit_distance(decoded, clean)) /
                        static_cast<double>(clean.size());
                    s.accuracy = std::max(0.0, 1.0 - cer);
                }
            } catch (const EncodeError&) {
                // Fully pruned bottleneck: score as an uninformed model.
                s.failed_encode = true;
                s.ce = std::log(static_cast<double>(model.config().vocab_size));
                s.accuracy = 0.0;
            }
            s.ok = true;
        } catch (const std::exception& e) {
            s.ok = false;
            s.error = e.what();
        }
    }

    for (const EvalSlot& s : slots)
        if (!s.ok) throw std::runtime_error("evaluate: " + s.error);

    double ce_sum = 0.0, acc_sum = 0.0;
    std::vector<double> ret_sum;
    int ret_count = 0;
    for (const EvalSlot& s : slots) {
        ce_sum += s.ce;
        acc_sum += s.accuracy;
        if (s.failed_encode) ++res.encode_failures;
        if (!s.retention.empty()) {
            if (ret_sum.empty()) ret_sum.assign(s.retention.size(), 0.0);
            for (std::size_t l = 0; l < s.retention.size(); ++l) ret_sum[l] += s.retention[l];
            ++ret_count;
        }
    }
    res.n_sequences = n;
    res.noisy_ce = ce_sum / n;
    res.clean_accuracy = with_accuracy ? acc_sum / n : 0.0;
    if (ret_count > 0) {
        res.retention = ret_sum;
        for (double& r : res.retention) r /= ret_count;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

struct SlotOut {
    bool ok = false;
    std::string error;
    LossBreakdown bd;
    std::vector<double> retention;
    std::vector<Matrix> grads;  // aligned to parameter ids; empty if unreached
};

}  // namespace

TrainResult train(Model& model, const std::vector<std::string>& train_lines,
                  const std::vector<std::string>& val_lines, const Tokenizer& tok,
                  const TrainConfig& tc, const std::string& out_dir, std::ostream* console) {
    tc.validate();
    std::filesystem::create_directories(out_dir);

    std::vector<std::vector<int>> seqs;
    for (const std::string& line : train_lines) {
        std::vector<int> ids = tok.encode(line);
        if (!ids.empty()) seqs.push_back(std::move(ids));
    }
    if (seqs.empty()) throw std::invalid_argument("train: corpus tokenised to nothing");

    TrainResult res;
    res.metrics_path = out_dir + "/metrics.jsonl";
    std::ofstream metrics(res.metrics_path, std::ios::app);
    if (!metrics) throw std::runtime_error("train: cannot open metrics log " + res.metrics_path);

    MomentOptimizer opt(tc.optimizer == "radam");
    {
        nlohmann::json j;
        j["event"] = "start";
        j["optimizer"] = opt.name();
        j["model_config"] = nlohmann::json::parse(model_config_to_json(model.config()));
        j["train_config"] = nlohmann::json::parse(train_config_to_json(tc));
        metrics << j.dump() << "\n";
    }

    const auto make_meta = [&](int step_no) {
        nlohmann::json m;
        m["tokenizer"] = nlohmann::json::parse(tok.to_json());
        m["train_config"] = nlohmann::json::parse(train_config_to_json(tc));
        m["step"] = step_no;
        return m.dump();
    };
    const auto save = [&](const std::string& name, int step_no) {
        const std::string path = out_dir + "/" + name;
        save_checkpoint(path, model, make_meta(step_no));
        return path;
    };

    std::vector<std::size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::uint64_t epoch = 0;
    std::size_t cursor = 0;
    const auto reshuffle = [&]() {
        std::mt19937_64 eng(Rng::derive(tc.seed, 0xDA7A, epoch));
        std::shuffle(order.begin(), order.end(), eng);
        cursor = 0;
    };
    reshuffle();

    const int cadence = std::max(1, tc.steps / 10);
    const std::uint64_t val_noise_salt = Rng::derive(tc.seed, 0xE7A1);
    std::string last_good = "(none)";
    double best_val = std::numeric_limits<double>::infinity();

    for (int step = 0; step < tc.steps; ++step) {
        std::vector<std::size_t> batch(static_cast<std::size_t>(tc.batch_size));
        for (int i = 0; i < tc.batch_size; ++i) {
            if (cursor >= order.size()) {
                ++epoch;
                reshuffle();
            }
            batch[static_cast<std::size_t>(i)] = order[cursor++];
        }

        std::vector<SlotOut> outs(static_cast<std::size_t>(tc.batch_size));
#pragma omp parallel for schedule(dynamic)
        for (int i = 0; i < tc.batch_size; ++i) {
            SlotOut& so = outs[static_cast<std::size_t>(i)];
            try {
                const std::uint64_t s0 = Rng::derive(tc.seed, static_cast<std::uint64_t>(step),
                                                     static_cast<std::uint64_t>(i));
                Rng noise_rng(Rng::derive(s0, 1));
                Rng model_rng(Rng::derive(s0, 2));
                const std::vector<int>& clean = seqs[batch[static_cast<std::size_t>(i)]];
                const std::vector<int> noisy = noise_delete(clean, tc.deletion_prob, noise_rng);
                Tape t(true);
                const Model::Bound bound = model.bind(t);
                SequenceLossResult sl =
                    sequence_loss(model, t, bound, noisy, clean, tc, step, model_rng);
                t.backward(sl.loss);
                so.grads.resize(bound.vars.size());
                for (std::size_t id = 0; id < bound.vars.size(); ++id) {
                    const Matrix* g = t.maybe_grad(bound.vars[id]);
                    if (g != nullptr) so.grads[id] = *g;
                }
                so.bd = std::move(sl.breakdown);
                so.retention = std::move(sl.retention);
                so.ok = true;
            } catch (const std::exception& e) {
                so.ok = false;
                so.error = e.what();
            }
        }

        for (const SlotOut& so : outs) {
            if (!so.ok) {
                res.aborted = true;
                res.abort_message = "training aborted at step " + std::to_string(step + 1) +
                                    ": " + so.error + "; last good checkpoint: " + last_good;
                res.steps_completed = step;
                nlohmann::json j;
                j["event"] = "abort";
                j["step"] = step + 1;
                j["message"] = res.abort_message;
                metrics << j.dump() << "\n";
                if (console) *console << res.abort_message << "\n";
                return res;
            }
        }

        // Ordered reduction keeps the update bitwise-deterministic for any
        // thread count.
        model.params().zero_grads();
        const double inv_b = 1.0 / static_cast<double>(tc.batch_size);
        for (int i = 0; i < tc.batch_size; ++i) {
            const SlotOut& so = outs[static_cast<std::size_t>(i)];
            for (int id = 0; id < model.params().count(); ++id) {
                const Matrix& g = so.grads[static_cast<std::size_t>(id)];
                if (g.empty()) continue;
                Matrix& acc = model.params().grad(id);
                for (std::size_t k = 0; k < acc.size(); ++k)
                    acc.data()[k] += g.data()[k] * inv_b;
            }
        }

        double ce = 0.0, total = 0.0;
        std::vector<double> kd_mean, kg_mean, ret_mean;
        for (const SlotOut& so : outs) {
            ce += so.bd.reconstruction * inv_b;
            total += so.bd.total * inv_b;
            if (!so.bd.kl_d.empty()) {
                if (kd_mean.empty()) {
                    kd_mean.assign(so.bd.kl_d.size(), 0.0);
                    kg_mean.assign(so.bd.kl_g.size(), 0.0);
                    ret_mean.assign(so.retention.size(), 0.0);
                }
                for (std::size_t l = 0; l < kd_mean.size(); ++l) {
                    kd_mean[l] += so.bd.kl_d[l] * inv_b;
                    kg_mean[l] += so.bd.kl_g[l] * inv_b;
                    ret_mean[l] += so.retention[l] * inv_b;
                }
            }
        }

        if (!std::isfinite(total)) {
            res.aborted = true;
            res.abort_message = "training aborted at step " + std::to_string(step + 1) +
                                ": non-finite loss; last good checkpoint: " + last_good;
            res.steps_completed = step;
            nlohmann::json j;
            j["event"] = "abort";
            j["step"] = step + 1;
            j["message"] = res.abort_message;
            metrics << j.dump() << "\n";
            if (console) *console << res.abort_message << "\n";
            return res;
        }

        const double grad_norm = clip_gradients(model.params(), tc.grad_clip_norm);
        const double lr_t = cosine_lr(tc.lr, step, tc.steps);
        opt.step(model.params(), lr_t);

        {
            nlohmann::json j;
            j["step"] = step + 1;
            j["lr"] = lr_t;
            j["anneal"] = outs[0].bd.anneal;
            j["ce"] = ce;
            j["kl_d"] = kd_mean;
            j["kl_g"] = kg_mean;
            j["retention"] = ret_mean;
            j["grad_norm"] = grad_norm;
            j["total"] = total;
            metrics << j.dump() << "\n";
        }

        if ((step + 1) % cadence == 0)
            last_good = save("ckpt_step_" + std::to_string(step + 1) + ".bin", step + 1);

        const bool eval_now =
            !val_lines.empty() && ((step + 1) % tc.eval_every == 0 || step + 1 == tc.steps);
        if (eval_now) {
            const EvalResult ev =
                evaluate(model, val_lines, tok, tc, val_noise_salt, /*with_accuracy=*/false);
            if (ev.noisy_ce < best_val) {
                best_val = ev.noisy_ce;
                res.best_checkpoint = save("best.bin", step + 1);
            }
            res.final_val_ce = ev.noisy_ce;
            nlohmann::json j;
            j["event"] = "eval";
            j["step"] = step + 1;
            j["val_ce"] = ev.noisy_ce;
            j["val_retention"] = ev.retention;
            j["encode_failures"] = ev.encode_failures;
            metrics << j.dump() << "\n";
            if (console)
                *console << "step " << (step + 1) << "/" << tc.steps << " lr " << lr_t
                         << " train_ce " << ce << " val_ce " << ev.noisy_ce << "\n";
        }
        metrics.flush();
    }

    res.final_checkpoint = save("final.bin", tc.steps);
    if (res.best_checkpoint.empty()) res.best_checkpoint = res.final_checkpoint;
    res.best_val_ce = std::isfinite(best_val) ? best_val : res.final_val_ce;
    res.steps_completed = tc.steps;
    return res;
}

}  // namespace nvib
