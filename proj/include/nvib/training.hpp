// SPDX-License-Identifier: Apache-2.0
//
// Training pipeline: corpus ingestion, noisy-deletion objective, loss
// assembly with per-layer beta weights and annealed KL regularisers,
// RAdam optimisation with cosine cool-down and gradient clipping,
// checkpointing, and deterministic evaluation.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "nvib/model.hpp"
#include "nvib/rng.hpp"
#include "nvib/tape.hpp"
#include "nvib/tokenizer.hpp"

namespace nvib {

struct TrainConfig {
    std::uint64_t seed = 1;
    int steps = 2000;
    int batch_size = 32;
    double lr = 1e-3;             // cosine cool-down over all steps
    double grad_clip_norm = 0.1;  // global L2 clip
    double deletion_prob = 0.1;
    double lambda_d_prime = 1.0;   // Dirichlet KL weight before length scaling
    double lambda_g_prime = 1e-2;  // Gaussian KL weight before length/width scaling
    double alpha_delta = 0.25;     // conditional-prior increment per character
    double alpha_threshold = 0.1;  // pruning / bottleneck threshold
    double anneal_start = 0.30;    // KL ramp window as fractions of total steps
    double anneal_end = 0.60;
    int max_len = 64;          // sequences clipped to this many characters
    double val_fraction = 0.1;
    int eval_every = 100;      // validation cadence in steps
    std::string optimizer = "radam";  // "radam" | "adam" (fallback, logged)

    void validate() const;  // throws std::invalid_argument
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& json_text);

// Flat field-by-field diff of two JSON objects (dot-joined paths for
// nesting).  Returns the paths whose values differ or exist on one side
// only, sorted.
std::vector<std::string> json_config_diff(const std::string& a, const std::string& b);

// ---------------------------------------------------------------------------
// Closed-form schedules (pure functions)
// ---------------------------------------------------------------------------

// beta^(l) = l / sum_{k=1..N} k for l = 1..N: KL weight grows linearly
// with encoder depth and the weights sum to one.
std::vector<double> beta_weights(int n_layers);

// lambda_D = lambda'_D / n, lambda_G = lambda'_G / (n * d): KL weights
// independent of sequence length n and width d.
std::pair<double, double> scale_lambdas(double lambda_d_prime, double lambda_g_prime, int n,
                                        int d);

// 0 before `lo`*total, linear ramp to 1 at `hi`*total, 1 after.
double anneal_factor(std::int64_t step, std::int64_t total_steps, double lo = 0.30,
                     double hi = 0.60);

// lr * 0.5 * (1 + cos(pi * step / total)): cosine cool-down to zero.
double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps);

// ---------------------------------------------------------------------------
// Corpus handling and noising
// ---------------------------------------------------------------------------

// Newline-delimited sequences; blank lines dropped; each line clipped to
// max_len characters.  Throws std::runtime_error naming the path.
std::vector<std::string> load_corpus(const std::string& path, int max_len);

struct CorpusSplit {
    std::vector<std::string> train, val;
};
// Deterministic seeded shuffle, then the first ceil(val_fraction * n)
// lines (at least 1, at most n-1 when n > 1) become the validation set.
CorpusSplit split_corpus(std::vector<std::string> lines, double val_fraction,
                         std::uint64_t seed);

// Deletes each data character (id >= 4) independently with the given
// probability; specials are exempt.  If everything would be deleted and
// nothing else remains, keeps one uniformly chosen character instead.
std::vector<int> noise_delete(const std::vector<int>& tokens, double deletion_prob, Rng& rng);

// ---------------------------------------------------------------------------
// Loss assembly
// ---------------------------------------------------------------------------

struct LossBreakdown {
    double reconstruction = 0.0;      // mean per-token CE
    std::vector<double> kl_d;         // per NVIB layer, bottom-up
    std::vector<double> kl_g;
    std::vector<double> beta;         // beta^(l) at the hosting global layer
    double lambda_d = 0.0;            // after per-sequence scaling
    double lambda_g = 0.0;
    double anneal = 0.0;
    double total = 0.0;

    // total recomputed from the parts; must match `total` within 1e-6.
    double recompute_total() const;
};

struct SequenceLossResult {
    Tape::Var loss = -1;  // scalar node actually optimised
    LossBreakdown breakdown;
    std::vector<double> retention;  // per NVIB layer at the train threshold
};

// Full train-mode pipeline for one (noisy input, clean target) pair:
// encode, teacher-forced decode of the clean sequence, CE plus the
// annealed, beta-weighted KL terms.  When a lambda' is zero its KL nodes
// are skipped and logged as zero.
SequenceLossResult sequence_loss(const Model& model, Tape& t, const Model::Bound& b,
                                 const std::vector<int>& noisy, const std::vector<int>& clean,
                                 const TrainConfig& tc, std::int64_t step, Rng& rng);

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

// Adaptive-moment optimiser with warmup-rectified variance ("radam").
// With rectification disabled ("adam") it is plain Adam with bias
// correction.  State is keyed by parameter index.
class MomentOptimizer {
  public:
    explicit MomentOptimizer(bool rectified, double beta1 = 0.9, double beta2 = 0.999,
                             double eps = 1e-8);
    // Applies one update using the gradients accumulated in `params`.
    void step(ParamStore& params, double lr);
    const char* name() const { return rectified_ ? "radam" : "adam"; }
    std::int64_t steps_taken() const { return t_; }

  private:
    bool rectified_;
    double beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::vector<Matrix> m_, v_;
};

// Scales all gradients so the global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_gradients(ParamStore& params, double max_norm);

// Per-character error rate helpers (Levenshtein distance over ids).
int edit_distance(const std::vector<int>& a, const std::vector<int>& b);

// ---------------------------------------------------------------------------
// Train / evaluate
// ---------------------------------------------------------------------------

struct EvalResult {
    double noisy_ce = 0.0;          // teacher-forced CE on deterministically noised inputs
    double clean_accuracy = 0.0;    // mean per-sequence (1 - CER) via greedy decode
    std::vector<double> retention;  // mean per NVIB layer (eval mode)
    int n_sequences = 0;
    int encode_failures = 0;  // sequences whose bottleneck fully pruned
};

// Deterministic: noise per line is derived from (noise_salt, line index).
// Greedy decoding dominates the cost, so `with_accuracy=false` computes the
// cheap metrics only (clean_accuracy then reads 0).
EvalResult evaluate(const Model& model, const std::vector<std::string>& lines,
                    const Tokenizer& tok, const TrainConfig& tc, std::uint64_t noise_salt,
                    bool with_accuracy = true);

struct TrainResult {
    std::string final_checkpoint;
    std::string best_checkpoint;
    std::string metrics_path;
    double best_val_ce = 0.0;
    double final_val_ce = 0.0;
    int steps_completed = 0;
    bool aborted = false;
    std::string abort_message;  // references the last good checkpoint
};

// Runs the optimisation loop.  Writes metrics.jsonl (one record per step:
// step, lr, anneal, ce, per-layer kl_d/kl_g/retention, grad_norm, total),
// periodic checkpoints every 10% of steps, a best-validation checkpoint
// and a final checkpoint, all under out_dir.  `console`, when non-null,
// receives occasional progress lines.  A non-finite loss aborts with a
// message naming the last good checkpoint.
TrainResult train(Model& model, const std::vector<std::string>& train_lines,
                  const std::vector<std::string>& val_lines, const Tokenizer& tok,
                  const TrainConfig& tc, const std::string& out_dir,
                  std::ostream* console = nullptr);

}  // namespace nvib
