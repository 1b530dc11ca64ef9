// SPDX-License-Identifier: Apache-2.0
//
// Lightweight classification probes over frozen encoder representations:
// the aggregating probe (mean of the vector set into a 2-layer MLP) and
// the attention-based probe (2-layer MLP map, then attention with one
// learnable query, then a linear classifier).  Probes never touch the
// encoder weights; representations are extracted once in eval mode.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nvib/matrix.hpp"
#include "nvib/model.hpp"
#include "nvib/tape.hpp"
#include "nvib/tokenizer.hpp"

namespace nvib {

enum class ProbeKind { Aggregating, Attention };

const char* probe_kind_name(ProbeKind kind);
// Throws std::invalid_argument on an unknown name.
ProbeKind probe_kind_from_name(const std::string& name);

struct ProbeConfig {
    ProbeKind kind = ProbeKind::Aggregating;
    int hidden = 256;     // probe MLP width
    int epochs = 10;
    int batch_size = 128;
    double lr = 1e-4;     // constant Adam step size
    int layer = 0;        // encoder layer whose representations feed the probe
    int n_classes = 2;
    std::uint64_t seed = 1;

    // Reference settings per kind: aggregating trains 10 epochs at lr 1e-4
    // with batches of 128; attention trains 50 epochs at lr 1e-3 with
    // batches of 256.  Both use a hidden width of 256.
    static ProbeConfig defaults(ProbeKind kind);

    // Positive dimensions, n_classes >= 2, layer >= 0.  The upper layer
    // bound is checked by extract_representations, which sees the model.
    void validate() const;  // throws std::invalid_argument
};

// ---------------------------------------------------------------------------
// Labelled datasets
// ---------------------------------------------------------------------------

struct LabelledExample {
    std::string text;
    int label = 0;
};

struct LabelledDataset {
    std::vector<LabelledExample> examples;
    std::vector<std::string> class_names;  // label id -> name, sorted
    int n_classes() const { return static_cast<int>(class_names.size()); }
};

// Reads "text<TAB>label" lines; the label follows the last tab, so the
// text may itself contain tabs.  Label strings map to ids in sorted order
// so the numbering is independent of line order; blank lines are dropped.
// Throws std::runtime_error naming the path on IO failure or a line
// without a tab or with an empty text/label field.
LabelledDataset load_labelled_dataset(const std::string& path);

// ---------------------------------------------------------------------------
// Representation extraction
// ---------------------------------------------------------------------------

// Per example, the retained vectors at encoder layer `layer` in eval mode:
// the rows of that layer's output whose component cleared the alpha
// threshold (all rows for standard layers; the prior component is not a
// query position, so it never appears).  Deterministic; parallel over
// examples.  Throws std::out_of_range when `layer` is outside the encoder
// depth; EncodeError from fully-pruned examples is surfaced.
std::vector<Matrix> extract_representations(const Model& model,
                                            const std::vector<std::string>& texts,
                                            const Tokenizer& tok, int layer,
                                            double alpha_threshold);

// Rows sorted lexicographically (row-major element order).  Probe forward
// passes canonicalise their input with this, which makes the outputs
// bitwise invariant to the order of the vector set, not just invariant in
// exact arithmetic.
Matrix canonicalize_rows(const Matrix& m);

// ---------------------------------------------------------------------------
// Probe model
// ---------------------------------------------------------------------------

class Probe {
  public:
    // Xavier-uniform weights, zero biases, from the given seed.
    Probe(ProbeConfig cfg, int input_width, std::uint64_t init_seed);

    const ProbeConfig& config() const { return cfg_; }
    int input_width() const { return width_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    // Tape variables for every parameter, indexed by parameter id.
    std::vector<Tape::Var> bind(Tape& t) const;

    // Class logits (1 x n_classes) for one representation set (k rows of
    // input_width).  Aggregating: mean row -> relu MLP -> classes.
    // Attention: per-row relu MLP back to input_width, softmax attention
    // with the learnable query, then a linear classifier on the pooled
    // row.  Rows are canonicalised first, so any row order yields bitwise
    // identical logits.
    Tape::Var forward(Tape& t, const std::vector<Tape::Var>& b, const Matrix& rows) const;

    // Argmax class of forward() on a grad-free tape; ties break low.
    int predict(const Matrix& rows) const;

    // Adds the tape gradients of every bound parameter into the store's
    // accumulators.  Call after Tape::backward.
    void harvest_grads(const Tape& t, const std::vector<Tape::Var>& b);

  private:
    ProbeConfig cfg_;
    int width_ = 0;
    ParamStore store_;
    int w1_ = -1, b1_ = -1, w2_ = -1, b2_ = -1;  // MLP
    int query_ = -1;                             // attention probe only
    int wc_ = -1, bc_ = -1;                      // attention probe classifier
};

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

struct ProbeMetrics {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
};

// Accuracy and macro-F1 (per-class F1 averaged over all n_classes, with
// empty classes scoring zero) of argmax predictions against labels.
ProbeMetrics probe_metrics(const std::vector<int>& predictions, const std::vector<int>& labels,
                           int n_classes);

struct ProbeResult {
    ProbeConfig config;
    ProbeMetrics test;  // test metrics of the best-validation epoch
    ProbeMetrics val;   // that epoch's validation metrics
    int best_epoch = 0;  // 1-based; earliest epoch wins ties
    std::vector<double> val_f1_by_epoch;
    int n_train = 0, n_val = 0, n_test = 0;
};

// Trains a probe on frozen representations with Adam at a constant lr and
// a seeded 80/10/10 split (validation and test each get at least one
// example).  After every epoch the validation macro-F1 is measured; the
// parameters of the best epoch are restored at the end and the test
// metrics reported for them.  Throws std::invalid_argument on size
// mismatches, empty or single-class datasets, out-of-range labels, or
// inconsistent representation widths.
ProbeResult train_probe(const std::vector<Matrix>& representations,
                        const std::vector<int>& labels, const ProbeConfig& cfg);

// ---------------------------------------------------------------------------
// Layer-by-layer report
// ---------------------------------------------------------------------------

struct LayerwiseRow {
    int layer = 0;
    ProbeKind kind = ProbeKind::Aggregating;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    int best_epoch = 0;
};

// Runs train_probe for every encoder layer x prototype combination.  Each
// prototype supplies the probe kind and hyperparameters; its `layer` and
// `n_classes` fields are overwritten per row.  Rows are ordered layer-
// major, prototypes in the given order.
std::vector<LayerwiseRow> layerwise_report(const Model& model, const LabelledDataset& data,
                                           const Tokenizer& tok,
                                           const std::vector<ProbeConfig>& protos,
                                           double alpha_threshold);

// CSV with header layer,kind,accuracy,macro_f1,best_epoch.  Throws
// std::runtime_error naming the path when the file cannot be written.
void write_layerwise_csv(const std::string& path, const std::vector<LayerwiseRow>& rows);

}  // namespace nvib
