// SPDX-License-Identifier: Apache-2.0
//
// Attention-map export (matrix files + heatmaps), unsupervised word
// segmentation scoring (Hungarian matching over longest-common-substring
// overlaps) and the character-perturbation robustness harness.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nvib/matrix.hpp"
#include "nvib/model.hpp"
#include "nvib/rng.hpp"
#include "nvib/tokenizer.hpp"

namespace nvib {

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

// Inclusive character-index span.
struct Span {
    int start = 0;
    int end = 0;  // inclusive; end >= start
    friend bool operator==(const Span& a, const Span& b) {
        return a.start == b.start && a.end == b.end;
    }
};

// Non-overlapping spans in ascending order.
using Segmentation = std::vector<Span>;

// Per query position (row) takes the argmax over the retained data
// components (ties resolve to the lowest index); maximal runs of equal
// argmax become spans.  `n_data` is the number of data components, i.e.
// the column count without any appended prior column; `retained` is
// either empty (all data components kept) or one flag per data component.
// Rows with no retained component cannot occur downstream (a fully pruned
// layer raises during encoding), but standalone calls with an all-zero
// mask return an empty segmentation.
Segmentation extract_segments(const Matrix& attn, const std::vector<std::uint8_t>& retained,
                              int n_data);

// Whitespace word spans of a codepoint sequence (ASCII space/tab separate;
// punctuation stays attached to its word).
std::vector<Span> word_spans(const std::vector<std::uint32_t>& text);

// Length of the longest common substring (contiguous) of two codepoint
// sequences.
int lcs_length(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b);

// One row of the match table.  Unmatched words/segments appear with the
// other index set to -1 and zero scores.
struct PairMatch {
    int word = -1;
    int segment = -1;
    int overlap = 0;
    double p = 0.0;
    double r = 0.0;
};

struct SegScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::vector<PairMatch> pairs;
};

// Scores a predicted segmentation against reference word spans over the
// same codepoint sequence.  Pairwise overlap is the longest common
// substring of the two texts; the Hungarian assignment maximises total
// overlap (ties resolved towards larger exact P then R sums, so the
// result agrees with an exhaustive-assignment oracle); per matched pair
// P = overlap / segment length and R = overlap / word length.  The
// macro-average divides by max(#words, #segments): unmatched items are
// zero-score pairs.  Empty prediction scores 0.  The result is invariant
// to the order of either span list (both are sorted internally; pair
// indices refer to the sorted lists).  Span lengths are limited to 64
// characters (the exact tie-break arithmetic needs a common denominator
// over all lengths).
SegScore score_segmentation(const std::vector<std::uint32_t>& text, const Segmentation& pred,
                            const std::vector<Span>& words);

// Exact maximum-total-overlap assignment for the test oracle and the
// scorer: returns, for each row of `score`, the matched column or -1.
// Rectangular inputs are padded internally with zero scores.  The
// tie-break maximises the exact P-sum then R-sum given the row (segment)
// and column (word) lengths.
std::vector<int> assign_segments_to_words(const std::vector<std::vector<int>>& overlap,
                                          const std::vector<int>& segment_lengths,
                                          const std::vector<int>& word_lengths);

// Corpus-level segmentation quality of the final encoder layer's
// attention map, averaged per sequence then over the corpus.
struct SegmentationReport {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    int n_sequences = 0;
    int encode_failures = 0;  // scored as zero
    // Per-sequence scores in scoring order (lines that tokenize to nothing
    // are skipped; pairs omitted); encode failures appear as zeros.
    std::vector<SegScore> lines;
};

SegmentationReport segment_corpus(const Model& model, const std::vector<std::string>& lines,
                                  const Tokenizer& tok, double alpha_threshold);

// ---------------------------------------------------------------------------
// Perturbations
// ---------------------------------------------------------------------------

enum class PerturbKind { Swap, Delete, Insert, Substitute };

const char* perturb_kind_name(PerturbKind kind);
PerturbKind perturb_kind_from_name(const std::string& name);

// Applies one perturbation kind at an independent per-character rate in
// [0, 1].  Only data tokens (id >= 4) are touched: swap exchanges a
// character with its successor (left to right over the evolving
// sequence), delete drops the character, insert appends a uniformly drawn
// data character after it, substitute replaces it with a uniformly drawn
// data character (possibly the same one).  Deterministic for a fixed rng
// state.
std::vector<int> perturb(const std::vector<int>& tokens, PerturbKind kind, double rate,
                         int vocab_size, Rng& rng);

struct RobustnessRow {
    std::string kind;
    double rate = 0.0;
    double accuracy = 0.0;  // mean per-sequence (1 - CER), greedy decode
    double ce = 0.0;        // teacher-forced CE against the clean targets
};

// Deterministic eval-mode robustness sweep: one row per (kind, rate).
// Perturbations are seeded per (kind, rate, line); a perturbation that
// deletes a whole sequence falls back to one uniformly kept character.
std::vector<RobustnessRow> robustness_curve(const Model& model,
                                            const std::vector<std::string>& lines,
                                            const Tokenizer& tok,
                                            const std::vector<PerturbKind>& kinds,
                                            const std::vector<double>& rates,
                                            double alpha_threshold, int max_decode_len,
                                            std::uint64_t seed);

// CSV with header "kind,rate,accuracy,ce".
void write_robustness_csv(const std::string& path, const std::vector<RobustnessRow>& rows);
std::vector<RobustnessRow> read_robustness_csv(const std::string& path);

// Accuracy-vs-rate line plot, one polyline per kind (SVG).
void write_robustness_plot(const std::string& path, const std::vector<RobustnessRow>& rows);

// ---------------------------------------------------------------------------
// Attention export
// ---------------------------------------------------------------------------

// Self-describing binary matrix file: magic "NVIBATTN", format version,
// a JSON header (layer, rows, cols, dtype, input text, retained mask)
// and the weights as little-endian row-major float32.
inline constexpr std::uint32_t kAttentionFileVersion = 1;

struct AttentionFile {
    int layer = 0;
    bool is_nvib = false;
    std::string input;
    std::vector<std::uint8_t> retained;  // empty = all kept
    Matrix weights;                      // stored as float32; read back widened
};

void write_attention_matrix(const std::string& path, const AttentionFile& file);
AttentionFile read_attention_matrix(const std::string& path);

// Heatmap rendering (binary PPM).  Each matrix cell becomes a
// kHeatmapCellSize x kHeatmapCellSize block; the colour scale is fixed to
// [0,1] from dark purple to light yellow; dropped data columns render
// fully dark.
inline constexpr int kHeatmapCellSize = 8;

void write_attention_heatmap(const std::string& path, const Matrix& weights,
                             const std::vector<std::uint8_t>& retained);

// Runs the encoder on one line in eval mode, then writes
// layer<k>.attn / layer<k>.ppm for every encoder layer under out_dir.
// Returns the number of layers written.  I/O and encode failures throw
// with the offending path/reason.
int export_attention(const Model& model, const std::string& line, const Tokenizer& tok,
                     double alpha_threshold, const std::string& out_dir);

}  // namespace nvib
