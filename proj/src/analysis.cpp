// SPDX-License-Identifier: Apache-2.0
#include "nvib/analysis.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "nvib/tape.hpp"
#include "nvib/training.hpp"

namespace nvib {

// ---------------------------------------------------------------------------
// Segment extraction
// ---------------------------------------------------------------------------

Segmentation extract_segments(const Matrix& attn, const std::vector<std::uint8_t>& retained,
                              int n_data) {
    if (n_data < 0 || n_data > static_cast<int>(attn.cols()))
        throw std::invalid_argument("extract_segments: n_data out of range");
    if (!retained.empty() && static_cast<int>(retained.size()) != n_data)
        throw std::invalid_argument("extract_segments: retained mask size mismatch");
    const int m = static_cast<int>(attn.rows());
    std::vector<int> argmax(static_cast<std::size_t>(m), -1);
    for (int i = 0; i < m; ++i) {
        double best = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n_data; ++j) {
            if (!retained.empty() && retained[static_cast<std::size_t>(j)] == 0) continue;
            const double w = attn(i, j);
            if (w > best) {
                best = w;
                argmax[static_cast<std::size_t>(i)] = j;
            }
        }
        if (argmax[static_cast<std::size_t>(i)] < 0) return {};  // nothing retained
    }
    Segmentation spans;
    for (int i = 0; i < m;) {
        int j = i + 1;
        while (j < m && argmax[static_cast<std::size_t>(j)] == argmax[static_cast<std::size_t>(i)])
            ++j;
        spans.push_back(Span{i, j - 1});
        i = j;
    }
    return spans;
}

std::vector<Span> word_spans(const std::vector<std::uint32_t>& text) {
    const auto is_sep = [](std::uint32_t cp) { return cp == U' ' || cp == U'\t'; };
    std::vector<Span> words;
    const int n = static_cast<int>(text.size());
    for (int i = 0; i < n;) {
        if (is_sep(text[static_cast<std::size_t>(i)])) {
            ++i;
            continue;
        }
        int j = i;
        while (j + 1 < n && !is_sep(text[static_cast<std::size_t>(j + 1)])) ++j;
        words.push_back(Span{i, j});
        i = j + 1;
    }
    return words;
}

int lcs_length(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    int best = 0;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            if (a[i - 1] == b[j - 1]) {
                cur[j] = prev[j - 1] + 1;
                best = std::max(best, cur[j]);
            } else {
                cur[j] = 0;
            }
        }
        std::swap(prev, cur);
    }
    return best;
}

// ---------------------------------------------------------------------------
// Exact assignment.  Costs are lexicographic triples (overlap, exact P
// numerator, exact R numerator); the fraction numerators share the common
// denominator lcm(1..64), so the comparison is exact integer arithmetic.
// Component-wise addition with lexicographic order forms an ordered group,
// which is all the Hungarian algorithm needs.
// ---------------------------------------------------------------------------

namespace {

using int128 = __int128;

int128 lcm_1_to_64() {
    int128 l = 1;
    for (int k = 2; k <= 64; ++k) {
        int128 a = l, b = k;
        while (b != 0) {
            const int128 t = a % b;
            a = b;
            b = t;
        }
        l = l / a * k;
    }
    return l;
}

const int128 kLengthLcm = lcm_1_to_64();

struct LexCost {
    std::int64_t overlap = 0;
    int128 pnum = 0;
    int128 rnum = 0;

    friend LexCost operator+(const LexCost& a, const LexCost& b) {
        return {a.overlap + b.overlap, a.pnum + b.pnum, a.rnum + b.rnum};
    }
    friend LexCost operator-(const LexCost& a, const LexCost& b) {
        return {a.overlap - b.overlap, a.pnum - b.pnum, a.rnum - b.rnum};
    }
    LexCost operator-() const { return {-overlap, -pnum, -rnum}; }
    friend bool operator<(const LexCost& a, const LexCost& b) {
        if (a.overlap != b.overlap) return a.overlap < b.overlap;
        if (a.pnum != b.pnum) return a.pnum < b.pnum;
        return a.rnum < b.rnum;
    }
    static LexCost inf() {
        return {std::numeric_limits<std::int64_t>::max() / 4, 0, 0};
    }
};

// Classic O(k^3) potential-based assignment, minimising the total cost of
// a perfect matching on a square matrix.
std::vector<int> hungarian_min(const std::vector<std::vector<LexCost>>& a) {
    const int n = static_cast<int>(a.size());
    std::vector<LexCost> u(static_cast<std::size_t>(n) + 1), v(static_cast<std::size_t>(n) + 1);
    std::vector<int> p(static_cast<std::size_t>(n) + 1, 0),
        way(static_cast<std::size_t>(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<LexCost> minv(static_cast<std::size_t>(n) + 1, LexCost::inf());
        std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = p[static_cast<std::size_t>(j0)];
            int j1 = -1;
            LexCost delta = LexCost::inf();
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const LexCost cur = a[static_cast<std::size_t>(i0 - 1)]
                                     [static_cast<std::size_t>(j - 1)] -
                                    u[static_cast<std::size_t>(i0)] -
                                    v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] =
                        u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] + delta;
                    v[static_cast<std::size_t>(j)] = v[static_cast<std::size_t>(j)] - delta;
                } else {
                    minv[static_cast<std::size_t>(j)] = minv[static_cast<std::size_t>(j)] - delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= n; ++j)
        if (p[static_cast<std::size_t>(j)] > 0)
            row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    return row_to_col;
}

void check_span_list(const std::vector<Span>& spans, int text_len, const char* what) {
    int prev_end = -1;
    for (const Span& s : spans) {
        if (s.start < 0 || s.end < s.start || s.end >= text_len)
            throw std::invalid_argument(std::string("score_segmentation: ") + what +
                                        " span out of bounds");
        if (s.start <= prev_end)
            throw std::invalid_argument(std::string("score_segmentation: ") + what +
                                        " spans overlap or are unordered");
        if (s.end - s.start + 1 > 64)
            throw std::invalid_argument(std::string("score_segmentation: ") + what +
                                        " span longer than 64 characters");
        prev_end = s.end;
    }
}

std::vector<std::uint32_t> slice(const std::vector<std::uint32_t>& text, const Span& s) {
    return std::vector<std::uint32_t>(text.begin() + s.start, text.begin() + s.end + 1);
}

}  // namespace

std::vector<int> assign_segments_to_words(const std::vector<std::vector<int>>& overlap,
                                          const std::vector<int>& segment_lengths,
                                          const std::vector<int>& word_lengths) {
    const int s = static_cast<int>(segment_lengths.size());
    const int w = static_cast<int>(word_lengths.size());
    if (static_cast<int>(overlap.size()) != s)
        throw std::invalid_argument("assign_segments_to_words: overlap row count mismatch");
    for (const std::vector<int>& row : overlap)
        if (static_cast<int>(row.size()) != w)
            throw std::invalid_argument("assign_segments_to_words: overlap column count mismatch");
    const int k = std::max(s, w);
    if (k == 0) return {};
    std::vector<std::vector<LexCost>> cost(
        static_cast<std::size_t>(k), std::vector<LexCost>(static_cast<std::size_t>(k)));
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            LexCost score;  // pads keep the zero score
            if (i < s && j < w) {
                const std::int64_t ov = overlap[static_cast<std::size_t>(i)]
                                               [static_cast<std::size_t>(j)];
                score.overlap = ov;
                score.pnum = ov * (kLengthLcm / segment_lengths[static_cast<std::size_t>(i)]);
                score.rnum = ov * (kLengthLcm / word_lengths[static_cast<std::size_t>(j)]);
            }
            cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = -score;
        }
    }
    std::vector<int> match = hungarian_min(cost);
    match.resize(static_cast<std::size_t>(s));
    for (int& j : match)
        if (j >= w) j = -1;  // matched to a zero pad: unmatched
    return match;
}

SegScore score_segmentation(const std::vector<std::uint32_t>& text, const Segmentation& in_pred,
                            const std::vector<Span>& in_words) {
    const int text_len = static_cast<int>(text.size());
    // Scoring is invariant to the order of either span list.
    Segmentation pred = in_pred;
    std::vector<Span> words = in_words;
    const auto by_start = [](const Span& a, const Span& b) { return a.start < b.start; };
    std::sort(pred.begin(), pred.end(), by_start);
    std::sort(words.begin(), words.end(), by_start);
    check_span_list(pred, text_len, "segment");
    check_span_list(words, text_len, "word");
    SegScore score;
    const int s = static_cast<int>(pred.size());
    const int w = static_cast<int>(words.size());
    if (s == 0) {
        for (int j = 0; j < w; ++j) score.pairs.push_back(PairMatch{j, -1, 0, 0.0, 0.0});
        return score;  // empty prediction scores zero
    }
    std::vector<int> seg_len(static_cast<std::size_t>(s)), word_len(static_cast<std::size_t>(w));
    std::vector<std::vector<std::uint32_t>> seg_text(static_cast<std::size_t>(s)),
        word_text(static_cast<std::size_t>(w));
    for (int i = 0; i < s; ++i) {
        seg_text[static_cast<std::size_t>(i)] = slice(text, pred[static_cast<std::size_t>(i)]);
        seg_len[static_cast<std::size_t>(i)] =
            static_cast<int>(seg_text[static_cast<std::size_t>(i)].size());
    }
    for (int j = 0; j < w; ++j) {
        word_text[static_cast<std::size_t>(j)] = slice(text, words[static_cast<std::size_t>(j)]);
        word_len[static_cast<std::size_t>(j)] =
            static_cast<int>(word_text[static_cast<std::size_t>(j)].size());
    }
    std::vector<std::vector<int>> overlap(static_cast<std::size_t>(s),
                                          std::vector<int>(static_cast<std::size_t>(w), 0));
    for (int i = 0; i < s; ++i)
        for (int j = 0; j < w; ++j)
            overlap[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = lcs_length(
                seg_text[static_cast<std::size_t>(i)], word_text[static_cast<std::size_t>(j)]);

    const std::vector<int> match = assign_segments_to_words(overlap, seg_len, word_len);
    std::vector<char> word_used(static_cast<std::size_t>(w), 0);
    double p_sum = 0.0, r_sum = 0.0;
    for (int i = 0; i < s; ++i) {
        const int j = match[static_cast<std::size_t>(i)];
        if (j < 0) {
            score.pairs.push_back(PairMatch{-1, i, 0, 0.0, 0.0});
            continue;
        }
        word_used[static_cast<std::size_t>(j)] = 1;
        const int ov = overlap[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        PairMatch pm;
        pm.word = j;
        pm.segment = i;
        pm.overlap = ov;
        pm.p = static_cast<double>(ov) / seg_len[static_cast<std::size_t>(i)];
        pm.r = static_cast<double>(ov) / word_len[static_cast<std::size_t>(j)];
        p_sum += pm.p;
        r_sum += pm.r;
        score.pairs.push_back(pm);
    }
    for (int j = 0; j < w; ++j)
        if (!word_used[static_cast<std::size_t>(j)])
            score.pairs.push_back(PairMatch{j, -1, 0, 0.0, 0.0});

    const double k = static_cast<double>(std::max(s, w));
    score.precision = p_sum / k;
    score.recall = r_sum / k;
    score.f1 = (score.precision + score.recall > 0.0)
                   ? 2.0 * score.precision * score.recall / (score.precision + score.recall)
                   : 0.0;
    return score;
}

// ---------------------------------------------------------------------------
// Corpus segmentation
// ---------------------------------------------------------------------------

namespace {

struct SegSlot {
    bool ok = false;
    bool failed_encode = false;
    double p = 0.0, r = 0.0, f1 = 0.0;
    std::string error;
};

}  // namespace

SegmentationReport segment_corpus(const Model& model, const std::vector<std::string>& lines,
                                  const Tokenizer& tok, double alpha_threshold) {
    std::vector<std::string> usable;
    for (const std::string& line : lines)
        if (!tok.encode(line).empty()) usable.push_back(line);
    const int n = static_cast<int>(usable.size());
    if (n == 0) throw std::invalid_argument("segment_corpus: no non-empty sequences");
    std::vector<SegSlot> slots(static_cast<std::size_t>(n));

#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
        SegSlot& s = slots[static_cast<std::size_t>(i)];
        try {
            const std::vector<int> ids = tok.encode(usable[static_cast<std::size_t>(i)]);
            const std::vector<std::uint32_t> cps =
                Tokenizer::utf8_decode(usable[static_cast<std::size_t>(i)]);
            Tape t(false);
            const Model::Bound b = model.bind(t);
            try {
                const EncodeResult enc = model.encode(t, b, ids, false, alpha_threshold, nullptr,
                                                      /*capture_attention=*/true);
                const LayerTrace& last = enc.traces.back();
                const int n_data = last.is_nvib ? static_cast<int>(last.attention.cols()) - 1
                                                : static_cast<int>(last.attention.cols());
                const Segmentation seg =
                    extract_segments(last.attention, last.retained, n_data);
                const SegScore sc = score_segmentation(cps, seg, word_spans(cps));
                s.p = sc.precision;
                s.r = sc.recall;
                s.f1 = sc.f1;
            } catch (const EncodeError&) {
                s.failed_encode = true;  // scored zero
            }
            s.ok = true;
        } catch (const std::exception& e) {
            s.ok = false;
            s.error = e.what();
        }
    }

    SegmentationReport rep;
    rep.n_sequences = n;
    for (const SegSlot& s : slots) {
        if (!s.ok) throw std::runtime_error("segment_corpus: " + s.error);
        rep.precision += s.p;
        rep.recall += s.r;
        rep.f1 += s.f1;
        SegScore line;
        line.precision = s.p;
        line.recall = s.r;
        line.f1 = s.f1;
        rep.lines.push_back(std::move(line));
        if (s.failed_encode) ++rep.encode_failures;
    }
    rep.precision /= n;
    rep.recall /= n;
    rep.f1 /= n;
    return rep;
}

// ---------------------------------------------------------------------------
// Perturbations
// ---------------------------------------------------------------------------

const char* perturb_kind_name(PerturbKind kind) {
    switch (kind) {
        case PerturbKind::Swap: return "swap";
        case PerturbKind::Delete: return "delete";
        case PerturbKind::Insert: return "insert";
        case PerturbKind::Substitute: return "substitute";
    }
    throw std::invalid_argument("perturb_kind_name: unknown kind");
}

PerturbKind perturb_kind_from_name(const std::string& name) {
    if (name == "swap") return PerturbKind::Swap;
    if (name == "delete") return PerturbKind::Delete;
    if (name == "insert") return PerturbKind::Insert;
    if (name == "substitute") return PerturbKind::Substitute;
    throw std::invalid_argument("unknown perturbation kind: " + name);
}

std::vector<int> perturb(const std::vector<int>& tokens, PerturbKind kind, double rate,
                         int vocab_size, Rng& rng) {
    if (!(rate >= 0.0 && rate <= 1.0))
        throw std::invalid_argument("perturb: rate must lie in [0, 1]");
    const int n_data_vocab = vocab_size - 4;
    if ((kind == PerturbKind::Insert || kind == PerturbKind::Substitute) && n_data_vocab < 1)
        throw std::invalid_argument("perturb: no data vocabulary to draw from");
    const auto draw = [&]() { return 4 + static_cast<int>(rng.integer(
                                          static_cast<std::uint64_t>(n_data_vocab))); };
    std::vector<int> out;
    out.reserve(tokens.size() + tokens.size() / 4);
    switch (kind) {
        case PerturbKind::Swap: {
            out = tokens;
            for (std::size_t i = 0; i + 1 < out.size(); ++i)
                if (out[i] >= 4 && out[i + 1] >= 4 && rng.uniform() < rate)
                    std::swap(out[i], out[i + 1]);
            break;
        }
        case PerturbKind::Delete: {
            for (int id : tokens) {
                if (id >= 4 && rng.uniform() < rate) continue;
                out.push_back(id);
            }
            break;
        }
        case PerturbKind::Insert: {
            for (int id : tokens) {
                out.push_back(id);
                if (id >= 4 && rng.uniform() < rate) out.push_back(draw());
            }
            break;
        }
        case PerturbKind::Substitute: {
            for (int id : tokens)
                out.push_back(id >= 4 && rng.uniform() < rate ? draw() : id);
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Robustness harness
// ---------------------------------------------------------------------------

namespace {

struct RobustSlot {
    bool ok = false;
    double ce = 0.0;
    double accuracy = 0.0;
    std::string error;
};

}  // namespace

std::vector<RobustnessRow> robustness_curve(const Model& model,
                                            const std::vector<std::string>& lines,
                                            const Tokenizer& tok,
                                            const std::vector<PerturbKind>& kinds,
                                            const std::vector<double>& rates,
                                            double alpha_threshold, int max_decode_len,
                                            std::uint64_t seed) {
    std::vector<std::vector<int>> seqs;
    for (const std::string& line : lines) {
        std::vector<int> ids = tok.encode(line);
        if (!ids.empty()) seqs.push_back(std::move(ids));
    }
    const int n = static_cast<int>(seqs.size());
    if (n == 0) throw std::invalid_argument("robustness_curve: no non-empty sequences");

    std::vector<RobustnessRow> rows;
    for (std::size_t ki = 0; ki < kinds.size(); ++ki) {
        for (std::size_t ri = 0; ri < rates.size(); ++ri) {
            const PerturbKind kind = kinds[ki];
            const double rate = rates[ri];
            std::vector<RobustSlot> slots(static_cast<std::size_t>(n));

#pragma omp parallel for schedule(dynamic)
            for (int i = 0; i < n; ++i) {
                RobustSlot& s = slots[static_cast<std::size_t>(i)];
                try {
                    const std::vector<int>& clean = seqs[static_cast<std::size_t>(i)];
                    Rng rng(Rng::derive(seed, ki * 1024 + ri, static_cast<std::uint64_t>(i)));
                    std::vector<int> pert =
                        perturb(clean, kind, rate, tok.vocab_size(), rng);
                    if (pert.empty())
                        pert.push_back(clean[rng.integer(clean.size())]);

                    Tape t(false);
                    const Model::Bound b = model.bind(t);
                    try {
                        const EncodeResult enc =
                            model.encode(t, b, pert, false, alpha_threshold, nullptr);
                        std::vector<int> prefix{kBosId};
                        prefix.insert(prefix.end(), clean.begin(), clean.end());
                        std::vector<int> targets = clean;
                        targets.push_back(kEosId);
                        const Tape::Var logits =
                            model.decode(t, b, prefix, enc.hidden, enc.bottleneck, false,
                                         nullptr);
                        s.ce = t.value(t.cross_entropy_rows(logits, targets))(0, 0);
                        const std::vector<int> decoded =
                            model.greedy_decode(pert, max_decode_len, alpha_threshold);
                        const double cer = static_cast<double>(edit_distance(decoded, clean)) /
                                           static_cast<double>(clean.size());
                        s.accuracy = std::max(0.0, 1.0 - cer);
                    } catch (const EncodeError&) {
                        s.ce = std::log(static_cast<double>(model.config().vocab_size));
                        s.accuracy = 0.0;
                    }
                    s.ok = true;
                } catch (const std::exception& e) {
                    s.ok = false;
                    s.error = e.what();
                }
            }

            RobustnessRow row;
            row.kind = perturb_kind_name(kind);
            row.rate = rate;
            for (const RobustSlot& s : slots) {
                if (!s.ok) throw std::runtime_error("robustness_curve: " + s.error);
                row.accuracy += s.accuracy;
                row.ce += s.ce;
            }
            row.accuracy /= n;
            row.ce /= n;
            rows.push_back(row);
        }
    }
    return rows;
}

void write_robustness_csv(const std::string& path, const std::vector<RobustnessRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("robustness csv: cannot open " + path);
    os << "kind,rate,accuracy,ce\n";
    os.precision(17);
    for (const RobustnessRow& r : rows)
        os << r.kind << "," << r.rate << "," << r.accuracy << "," << r.ce << "\n";
    if (!os) throw std::runtime_error("robustness csv: write failed for " + path);
}

std::vector<RobustnessRow> read_robustness_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("robustness csv: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != "kind,rate,accuracy,ce")
        throw std::runtime_error("robustness csv: bad header in " + path);
    std::vector<RobustnessRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        RobustnessRow r;
        std::string field;
        if (!std::getline(ls, r.kind, ',')) break;
        std::getline(ls, field, ',');
        r.rate = std::stod(field);
        std::getline(ls, field, ',');
        r.accuracy = std::stod(field);
        std::getline(ls, field, ',');
        r.ce = std::stod(field);
        rows.push_back(r);
    }
    return rows;
}

void write_robustness_plot(const std::string& path, const std::vector<RobustnessRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("robustness plot: cannot open " + path);
    const int width = 640, height = 440, ml = 60, mr = 140, mt = 20, mb = 50;
    const double plot_w = width - ml - mr, plot_h = height - mt - mb;
    double rate_max = 0.0;
    std::vector<std::string> kinds;
    for (const RobustnessRow& r : rows) {
        rate_max = std::max(rate_max, r.rate);
        if (std::find(kinds.begin(), kinds.end(), r.kind) == kinds.end())
            kinds.push_back(r.kind);
    }
    if (rate_max <= 0.0) rate_max = 1.0;
    const auto x_of = [&](double rate) { return ml + rate / rate_max * plot_w; };
    const auto y_of = [&](double acc) { return mt + (1.0 - acc) * plot_h; };
    static const char* kColours[] = {"#4444cc", "#cc4444", "#44aa44", "#aa7700",
                                     "#aa44aa", "#44aaaa"};

    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
       << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    // Axes with ticks.
    os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
       << (mt + plot_h) << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << (mt + plot_h) << "\" x2=\"" << (ml + plot_w)
       << "\" y2=\"" << (mt + plot_h) << "\" stroke=\"black\"/>\n";
    for (int tick = 0; tick <= 5; ++tick) {
        const double acc = tick / 5.0;
        os << "<text x=\"" << (ml - 8) << "\" y=\"" << (y_of(acc) + 4)
           << "\" font-size=\"11\" text-anchor=\"end\">" << acc << "</text>\n";
        const double rate = rate_max * tick / 5.0;
        os << "<text x=\"" << x_of(rate) << "\" y=\"" << (mt + plot_h + 16)
           << "\" font-size=\"11\" text-anchor=\"middle\">" << rate << "</text>\n";
    }
    os << "<text x=\"" << (ml + plot_w / 2) << "\" y=\"" << (height - 12)
       << "\" font-size=\"12\" text-anchor=\"middle\">perturbation rate</text>\n";
    os << "<text x=\"14\" y=\"" << (mt + plot_h / 2)
       << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
       << (mt + plot_h / 2) << ")\">accuracy</text>\n";

    for (std::size_t k = 0; k < kinds.size(); ++k) {
        const char* colour = kColours[k % 6];
        os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
        for (const RobustnessRow& r : rows)
            if (r.kind == kinds[k]) os << x_of(r.rate) << "," << y_of(r.accuracy) << " ";
        os << "\"/>\n";
        for (const RobustnessRow& r : rows)
            if (r.kind == kinds[k])
                os << "<circle cx=\"" << x_of(r.rate) << "\" cy=\"" << y_of(r.accuracy)
                   << "\" r=\"3\" fill=\"" << colour << "\"/>\n";
        const double ly = mt + 16 + 18.0 * static_cast<double>(k);
        os << "<line x1=\"" << (ml + plot_w + 12) << "\" y1=\"" << ly << "\" x2=\""
           << (ml + plot_w + 34) << "\" y2=\"" << ly << "\" stroke=\"" << colour
           << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << (ml + plot_w + 40) << "\" y=\"" << (ly + 4)
           << "\" font-size=\"12\">" << kinds[k] << "</text>\n";
    }
    os << "</svg>\n";
    if (!os) throw std::runtime_error("robustness plot: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Attention export
// ---------------------------------------------------------------------------

namespace {

constexpr char kAttnMagic[8] = {'N', 'V', 'I', 'B', 'A', 'T', 'T', 'N'};

static_assert(std::endian::native == std::endian::little,
              "attention files assume a little-endian host");

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& is, T& v, const std::string& path) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("attention file: truncated read in " + path);
}

}  // namespace

void write_attention_matrix(const std::string& path, const AttentionFile& file) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("attention file: cannot open " + path);
    os.write(kAttnMagic, sizeof(kAttnMagic));
    write_pod(os, kAttentionFileVersion);
    nlohmann::json header;
    header["layer"] = file.layer;
    header["is_nvib"] = file.is_nvib;
    header["rows"] = file.weights.rows();
    header["cols"] = file.weights.cols();
    header["dtype"] = "f32";
    header["input"] = file.input;
    header["retained"] = file.retained;
    const std::string htext = header.dump();
    write_pod(os, static_cast<std::uint64_t>(htext.size()));
    os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (std::size_t k = 0; k < file.weights.size(); ++k) {
        const float v = static_cast<float>(file.weights.data()[k]);
        write_pod(os, v);
    }
    if (!os) throw std::runtime_error("attention file: write failed for " + path);
}

AttentionFile read_attention_matrix(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("attention file: cannot open " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kAttnMagic, sizeof(magic)) != 0)
        throw std::runtime_error("attention file: bad magic in " + path);
    std::uint32_t version = 0;
    read_pod(is, version, path);
    if (version != kAttentionFileVersion)
        throw std::runtime_error("attention file: unsupported version in " + path);
    std::uint64_t hlen = 0;
    read_pod(is, hlen, path);
    std::string htext(hlen, '\0');
    is.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw std::runtime_error("attention file: truncated header in " + path);
    const nlohmann::json header = nlohmann::json::parse(htext);
    if (header.at("dtype") != "f32")
        throw std::runtime_error("attention file: unsupported dtype in " + path);
    AttentionFile file;
    file.layer = header.at("layer").get<int>();
    file.is_nvib = header.at("is_nvib").get<bool>();
    file.input = header.at("input").get<std::string>();
    file.retained = header.at("retained").get<std::vector<std::uint8_t>>();
    const auto rows = header.at("rows").get<std::size_t>();
    const auto cols = header.at("cols").get<std::size_t>();
    file.weights = Matrix(static_cast<int>(rows), static_cast<int>(cols));
    for (std::size_t k = 0; k < file.weights.size(); ++k) {
        float v = 0.0f;
        read_pod(is, v, path);
        file.weights.data()[k] = static_cast<double>(v);
    }
    return file;
}

void write_attention_heatmap(const std::string& path, const Matrix& weights,
                             const std::vector<std::uint8_t>& retained) {
    const int rows = static_cast<int>(weights.rows());
    const int cols = static_cast<int>(weights.cols());
    const int cell = kHeatmapCellSize;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("heatmap: cannot open " + path);
    os << "P6\n" << cols * cell << " " << rows * cell << "\n255\n";
    // Colour scale fixed to [0,1]: dark purple at 0 up to light yellow at 1.
    const auto shade = [](double v, unsigned char rgb[3]) {
        v = std::clamp(v, 0.0, 1.0);
        const double r0 = 68, g0 = 1, b0 = 84;      // dark purple
        const double r1 = 253, g1 = 231, b1 = 37;   // light yellow
        rgb[0] = static_cast<unsigned char>(r0 + (r1 - r0) * v);
        rgb[1] = static_cast<unsigned char>(g0 + (g1 - g0) * v);
        rgb[2] = static_cast<unsigned char>(b0 + (b1 - b0) * v);
    };
    std::vector<unsigned char> scanline(static_cast<std::size_t>(cols) * cell * 3);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            unsigned char rgb[3] = {0, 0, 0};
            const bool dropped =
                j < static_cast<int>(retained.size()) && retained[static_cast<std::size_t>(j)] == 0;
            if (!dropped) shade(weights(i, j), rgb);
            for (int px = 0; px < cell; ++px) {
                const std::size_t base = (static_cast<std::size_t>(j) * cell + px) * 3;
                scanline[base] = rgb[0];
                scanline[base + 1] = rgb[1];
                scanline[base + 2] = rgb[2];
            }
        }
        for (int py = 0; py < cell; ++py)
            os.write(reinterpret_cast<const char*>(scanline.data()),
                     static_cast<std::streamsize>(scanline.size()));
    }
    if (!os) throw std::runtime_error("heatmap: write failed for " + path);
}

int export_attention(const Model& model, const std::string& line, const Tokenizer& tok,
                     double alpha_threshold, const std::string& out_dir) {
    const std::vector<int> ids = tok.encode(line);
    if (ids.empty()) throw std::invalid_argument("export_attention: empty input line");
    std::filesystem::create_directories(out_dir);
    Tape t(false);
    const Model::Bound b = model.bind(t);
    const EncodeResult enc =
        model.encode(t, b, ids, false, alpha_threshold, nullptr, /*capture_attention=*/true);
    int written = 0;
    for (const LayerTrace& trace : enc.traces) {
        AttentionFile file;
        file.layer = trace.layer;
        file.is_nvib = trace.is_nvib;
        file.input = line;
        file.retained = trace.retained;
        file.weights = trace.attention;
        const std::string stem = out_dir + "/layer" + std::to_string(trace.layer);
        write_attention_matrix(stem + ".attn", file);
        write_attention_heatmap(stem + ".ppm", trace.attention, trace.retained);
        ++written;
    }
    return written;
}

}  // namespace nvib
