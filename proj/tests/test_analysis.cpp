// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "nvib/analysis.hpp"
#include "nvib/model.hpp"
#include "nvib/tokenizer.hpp"
#include "nvib/training.hpp"
#include "testutil.hpp"

using namespace nvib;
using namespace testutil;

namespace {

std::vector<std::uint32_t> cps(const std::string& s) { return Tokenizer::utf8_decode(s); }

std::string temp_dir(const std::string& tag) {
    const std::string dir =
        (std::filesystem::temp_directory_path() / ("nvib_analysis_" + tag)).string();
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// ---------------------------------------------------------------------------
// Independent oracles
// ---------------------------------------------------------------------------

// Full-table longest-common-substring DP (quadratic, no rolling rows).
int lcs_oracle(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
    int best = 0;
    std::vector<std::vector<int>> dp(a.size() + 1, std::vector<int>(b.size() + 1, 0));
    for (std::size_t i = 1; i <= a.size(); ++i)
        for (std::size_t j = 1; j <= b.size(); ++j)
            if (a[i - 1] == b[j - 1]) {
                dp[i][j] = dp[i - 1][j - 1] + 1;
                best = std::max(best, dp[i][j]);
            }
    return best;
}

// Exhaustive-assignment scoring oracle.  Enumerates every injective map
// from segments to words (via permutations of the zero-padded square
// problem), ranks assignments by the exact lexicographic criterion
// (total overlap, exact P sum, exact R sum) using int64 rationals over
// the instance's own common denominator, and returns the (P, R, F1)
// triples of every top-ranked assignment, each computed exactly like the
// scorer (double sums over ascending segment index).  Valid for span
// lengths <= 16 so the rationals stay in int64.
struct OracleScore {
    double p, r, f1;
};

std::vector<OracleScore> brute_force_scores(const std::vector<std::uint32_t>& text,
                                            Segmentation segs, std::vector<Span> words) {
    const auto by_start = [](const Span& a, const Span& b) { return a.start < b.start; };
    std::sort(segs.begin(), segs.end(), by_start);
    std::sort(words.begin(), words.end(), by_start);
    const int s = static_cast<int>(segs.size());
    const int w = static_cast<int>(words.size());
    const int k = std::max(s, w);
    REQUIRE(k >= 1);
    REQUIRE(k <= 8);

    std::int64_t denom = 1;
    const auto span_len = [](const Span& sp) { return sp.end - sp.start + 1; };
    for (const Span& sp : segs) {
        REQUIRE(span_len(sp) <= 16);
        denom = std::lcm(denom, static_cast<std::int64_t>(span_len(sp)));
    }
    for (const Span& sp : words) {
        REQUIRE(span_len(sp) <= 16);
        denom = std::lcm(denom, static_cast<std::int64_t>(span_len(sp)));
    }

    const auto text_of = [&](const Span& sp) {
        return std::vector<std::uint32_t>(text.begin() + sp.start, text.begin() + sp.end + 1);
    };
    std::vector<std::vector<int>> ov(s, std::vector<int>(w, 0));
    for (int i = 0; i < s; ++i)
        for (int j = 0; j < w; ++j) ov[i][j] = lcs_oracle(text_of(segs[i]), text_of(words[j]));

    std::vector<int> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::int64_t best_ov = -1, best_p = -1, best_r = -1;
    std::vector<std::vector<int>> best_assignments;
    do {
        std::int64_t tot_ov = 0, tot_p = 0, tot_r = 0;
        for (int i = 0; i < s; ++i) {
            const int j = perm[i];
            if (j >= w) continue;  // padded: unmatched segment
            const std::int64_t o = ov[i][j];
            tot_ov += o;
            tot_p += o * (denom / span_len(segs[i]));
            tot_r += o * (denom / span_len(words[j]));
        }
        if (std::tie(tot_ov, tot_p, tot_r) > std::tie(best_ov, best_p, best_r)) {
            best_ov = tot_ov;
            best_p = tot_p;
            best_r = tot_r;
            best_assignments.clear();
        }
        if (std::tie(tot_ov, tot_p, tot_r) == std::tie(best_ov, best_p, best_r))
            best_assignments.push_back(std::vector<int>(perm.begin(), perm.begin() + s));
    } while (std::next_permutation(perm.begin(), perm.end()));

    std::vector<OracleScore> out;
    for (const std::vector<int>& assign : best_assignments) {
        double p_sum = 0.0, r_sum = 0.0;
        for (int i = 0; i < s; ++i) {
            const int j = assign[i];
            if (j >= w) continue;
            p_sum += static_cast<double>(ov[i][j]) / span_len(segs[i]);
            r_sum += static_cast<double>(ov[i][j]) / span_len(words[j]);
        }
        OracleScore sc;
        sc.p = p_sum / k;
        sc.r = r_sum / k;
        sc.f1 = (sc.p + sc.r > 0.0) ? 2.0 * sc.p * sc.r / (sc.p + sc.r) : 0.0;
        out.push_back(sc);
    }
    return out;
}

// Random scoring instance: 2-6 words of 1-4 letters over a 3-letter
// alphabet (collisions likely), plus a random sparse segmentation.
struct Instance {
    std::string text;
    Segmentation segs;
};

Instance random_instance(Rng& rng) {
    Instance inst;
    const int n_words = 2 + static_cast<int>(rng.integer(5));
    for (int wi = 0; wi < n_words; ++wi) {
        if (wi > 0) inst.text += ' ';
        const int len = 1 + static_cast<int>(rng.integer(4));
        for (int c = 0; c < len; ++c)
            inst.text += static_cast<char>('a' + static_cast<int>(rng.integer(3)));
        if (inst.text.size() >= 14) break;
    }
    const int n = static_cast<int>(inst.text.size());
    int pos = 0;
    while (pos < n && static_cast<int>(inst.segs.size()) < 8) {
        if (rng.uniform() < 0.25) {  // gap
            ++pos;
            continue;
        }
        const int len = 1 + static_cast<int>(rng.integer(4));
        const int end = std::min(n - 1, pos + len - 1);
        inst.segs.push_back(Span{pos, end});
        pos = end + 1;
    }
    if (inst.segs.empty()) inst.segs.push_back(Span{0, 0});
    return inst;
}

ModelConfig tiny_config(int vocab, int n_nvib) {
    ModelConfig cfg;
    cfg.n_enc_layers = 2;
    cfg.n_dec_layers = 1;
    cfg.n_nvib_layers = n_nvib;
    cfg.p = 16;
    cfg.d_ff = 32;
    cfg.vocab_size = vocab;
    return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Segment extraction
// ---------------------------------------------------------------------------

TEST_CASE("extract_segments: run-length over the argmax vector") {
    // Rows with argmax column pattern (1,1,1,2,2).
    Matrix attn(5, 4);
    const int arg[5] = {1, 1, 1, 2, 2};
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 4; ++j) attn(i, j) = 0.1;
        attn(i, arg[i]) = 0.7;
    }
    const Segmentation seg = extract_segments(attn, {}, 4);
    REQUIRE(seg.size() == 2);
    CHECK(seg[0] == Span{0, 2});
    CHECK(seg[1] == Span{3, 4});
}

TEST_CASE("extract_segments: diagonal attention gives singleton spans") {
    const int n = 6;
    Matrix attn(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) attn(i, j) = (i == j) ? 1.0 : 0.0;
    const Segmentation seg = extract_segments(attn, {}, n);
    REQUIRE(seg.size() == static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) CHECK(seg[static_cast<std::size_t>(i)] == Span{i, i});
}

TEST_CASE("extract_segments: alternating argmax gives singletons") {
    Matrix attn(4, 3);
    const int arg[4] = {1, 2, 1, 2};
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 3; ++j) attn(i, j) = 0.0;
        attn(i, arg[i]) = 1.0;
    }
    const Segmentation seg = extract_segments(attn, {}, 3);
    REQUIRE(seg.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(seg[static_cast<std::size_t>(i)] == Span{i, i});
}

TEST_CASE("extract_segments: dropped components and the prior column are excluded") {
    // Column 2 dominates everywhere but is dropped; column 3 is the prior
    // (beyond n_data) and must be ignored even though it is the global max.
    Matrix attn(3, 4);
    for (int i = 0; i < 3; ++i) {
        attn(i, 0) = 0.2;
        attn(i, 1) = 0.1;
        attn(i, 2) = 0.3;
        attn(i, 3) = 0.4;
    }
    const std::vector<std::uint8_t> retained = {1, 1, 0};
    const Segmentation seg = extract_segments(attn, retained, 3);
    REQUIRE(seg.size() == 1);
    CHECK(seg[0] == Span{0, 2});  // argmax 0 everywhere

    // All components dropped: empty segmentation.
    CHECK(extract_segments(attn, {0, 0, 0}, 3).empty());
}

TEST_CASE("word_spans: whitespace tokenisation keeps punctuation attached") {
    CHECK(word_spans(cps("ab cd")) == std::vector<Span>{{0, 1}, {3, 4}});
    CHECK(word_spans(cps("  a  bc ")) == std::vector<Span>{{2, 2}, {5, 6}});
    CHECK(word_spans(cps("one,two.")) == std::vector<Span>{{0, 7}});
    CHECK(word_spans(cps("a\tb")) == std::vector<Span>{{0, 0}, {2, 2}});
    CHECK(word_spans(cps("")).empty());
    CHECK(word_spans(cps("   ")).empty());
}

// ---------------------------------------------------------------------------
// LCS
// ---------------------------------------------------------------------------

TEST_CASE("lcs_length: hand cases") {
    CHECK(lcs_length(cps("abcdef"), cps("zcdez")) == 3);  // "cde"
    CHECK(lcs_length(cps("abc"), cps("abc")) == 3);
    CHECK(lcs_length(cps("abc"), cps("xyz")) == 0);
    CHECK(lcs_length(cps(""), cps("abc")) == 0);
    CHECK(lcs_length(cps("ababab"), cps("babab")) == 5);
    CHECK(lcs_length(cps("ab"), cps("ba")) == 1);
}

TEST_CASE("lcs_length: matches the quadratic DP oracle on random pairs") {
    Rng rng(404);
    for (int trial = 0; trial < 3000; ++trial) {
        const auto make = [&]() {
            std::vector<std::uint32_t> v(rng.integer(33));
            for (std::uint32_t& c : v) c = 'a' + static_cast<std::uint32_t>(rng.integer(4));
            return v;
        };
        const std::vector<std::uint32_t> a = make(), b = make();
        CHECK(lcs_length(a, b) == lcs_oracle(a, b));
    }
}

// ---------------------------------------------------------------------------
// Segmentation scoring
// ---------------------------------------------------------------------------

TEST_CASE("score_segmentation: perfect segmentation scores one") {
    const std::vector<std::uint32_t> text = cps("ab cd");
    const std::vector<Span> words = word_spans(text);
    const SegScore sc = score_segmentation(text, Segmentation(words.begin(), words.end()), words);
    CHECK(sc.precision == 1.0);
    CHECK(sc.recall == 1.0);
    CHECK(sc.f1 == 1.0);
    REQUIRE(sc.pairs.size() == 2);
    for (const PairMatch& pm : sc.pairs) {
        CHECK(pm.word >= 0);
        CHECK(pm.segment >= 0);
        CHECK(pm.p == 1.0);
        CHECK(pm.r == 1.0);
    }
}

TEST_CASE("score_segmentation: single-character segments have P=1, R=1/len per pair") {
    const std::vector<std::uint32_t> text = cps("ab cd");
    Segmentation chars;
    for (int i = 0; i < 5; ++i) chars.push_back(Span{i, i});
    const SegScore sc = score_segmentation(text, chars, word_spans(text));
    int matched = 0;
    for (const PairMatch& pm : sc.pairs) {
        if (pm.word >= 0 && pm.segment >= 0 && pm.overlap > 0) {
            ++matched;
            CHECK(pm.p == 1.0);        // the one-char segment sits inside the word
            CHECK(pm.r == 0.5);        // words have length 2
        }
    }
    CHECK(matched == 2);  // one pair per word
    // Macro averages divide by max(2 words, 5 segments) = 5.
    CHECK(sc.precision == doctest::Approx(2.0 / 5.0).epsilon(1e-12));
    CHECK(sc.recall == doctest::Approx(1.0 / 5.0).epsilon(1e-12));
}

TEST_CASE("score_segmentation: empty prediction scores zero") {
    const std::vector<std::uint32_t> text = cps("ab cd");
    const SegScore sc = score_segmentation(text, {}, word_spans(text));
    CHECK(sc.precision == 0.0);
    CHECK(sc.recall == 0.0);
    CHECK(sc.f1 == 0.0);
    REQUIRE(sc.pairs.size() == 2);
    for (const PairMatch& pm : sc.pairs) CHECK(pm.segment == -1);
}

TEST_CASE("score_segmentation: invariant to span list order") {
    const std::vector<std::uint32_t> text = cps("abc def gh");
    const Segmentation seg = {{0, 2}, {4, 6}, {8, 9}};
    Segmentation shuffled = {{8, 9}, {0, 2}, {4, 6}};
    const std::vector<Span> words = word_spans(text);
    std::vector<Span> words_shuffled = {words[1], words[0], words[2]};
    const SegScore a = score_segmentation(text, seg, words);
    const SegScore b = score_segmentation(text, shuffled, words_shuffled);
    CHECK(a.precision == b.precision);
    CHECK(a.recall == b.recall);
    CHECK(a.f1 == b.f1);
}

TEST_CASE("score_segmentation: rejects invalid spans") {
    const std::vector<std::uint32_t> text = cps("abcdef");
    CHECK_THROWS_AS(score_segmentation(text, {{0, 6}}, {}), std::invalid_argument);
    CHECK_THROWS_AS(score_segmentation(text, {{-1, 2}}, {}), std::invalid_argument);
    CHECK_THROWS_AS(score_segmentation(text, {{0, 2}, {2, 3}}, {}), std::invalid_argument);
    CHECK_THROWS_AS(score_segmentation(text, {{3, 2}}, {}), std::invalid_argument);
}

TEST_CASE("score_segmentation: matches the exhaustive-assignment oracle") {
    Rng rng(777);
    for (int trial = 0; trial < 400; ++trial) {
        const Instance inst = random_instance(rng);
        const std::vector<std::uint32_t> text = cps(inst.text);
        const std::vector<Span> words = word_spans(text);
        if (words.empty()) continue;
        const SegScore sc = score_segmentation(text, inst.segs, words);
        const std::vector<OracleScore> best = brute_force_scores(text, inst.segs, words);
        REQUIRE(!best.empty());
        bool found = false;
        for (const OracleScore& o : best)
            if (o.p == sc.precision && o.r == sc.recall && o.f1 == sc.f1) found = true;
        CAPTURE(inst.text);
        CHECK(found);
    }
}

TEST_CASE("assign_segments_to_words: validates shapes") {
    CHECK_THROWS_AS(assign_segments_to_words({{1, 2}}, {3, 4}, {2, 2}), std::invalid_argument);
    CHECK_THROWS_AS(assign_segments_to_words({{1}}, {3}, {2, 2}), std::invalid_argument);
    CHECK(assign_segments_to_words({}, {}, {}).empty());
}

// ---------------------------------------------------------------------------
// Perturbations
// ---------------------------------------------------------------------------

TEST_CASE("perturb: rate zero is the identity for every kind") {
    const std::vector<int> tokens = {4, 5, 6, 7, 8, 9};
    for (const PerturbKind kind : {PerturbKind::Swap, PerturbKind::Delete, PerturbKind::Insert,
                                   PerturbKind::Substitute}) {
        Rng rng(1);
        CHECK(perturb(tokens, kind, 0.0, 20, rng) == tokens);
    }
}

TEST_CASE("perturb: swap at rate one reverses a pair") {
    const std::vector<int> ab = {4, 5};
    Rng rng(1);
    CHECK(perturb(ab, PerturbKind::Swap, 1.0, 20, rng) == std::vector<int>{5, 4});
}

TEST_CASE("perturb: deletion shrinks by the rate on long input") {
    const std::vector<int> tokens(400, 7);
    const double rate = 0.2;
    Rng rng(33);
    std::int64_t kept = 0;
    const int trials = 200;
    for (int trial = 0; trial < trials; ++trial)
        kept += static_cast<std::int64_t>(perturb(tokens, PerturbKind::Delete, rate, 20, rng).size());
    const double total = static_cast<double>(tokens.size()) * trials;
    const double observed = 1.0 - static_cast<double>(kept) / total;
    const double se = std::sqrt(rate * (1.0 - rate) / total);
    CHECK(std::abs(observed - rate) <= 3.0 * se);
}

TEST_CASE("perturb: insert and substitute draw from the data vocabulary") {
    const int vocab = 9;  // data ids 4..8
    const std::vector<int> tokens(100, 4);
    Rng rng(9);
    const std::vector<int> ins = perturb(tokens, PerturbKind::Insert, 0.5, vocab, rng);
    CHECK(ins.size() > tokens.size());
    for (int id : ins) {
        CHECK(id >= 4);
        CHECK(id < vocab);
    }
    const std::vector<int> sub = perturb(tokens, PerturbKind::Substitute, 0.5, vocab, rng);
    CHECK(sub.size() == tokens.size());
    bool changed = false;
    for (int id : sub) {
        CHECK(id >= 4);
        CHECK(id < vocab);
        if (id != 4) changed = true;
    }
    CHECK(changed);
}

TEST_CASE("perturb: special tokens are never touched") {
    const std::vector<int> tokens = {kUnkId, 4, kUnkId, 5, kUnkId};
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const std::vector<int> out = perturb(tokens, PerturbKind::Delete, 0.9, 20, rng);
        CHECK(std::count(out.begin(), out.end(), kUnkId) == 3);
        const std::vector<int> sub = perturb(tokens, PerturbKind::Substitute, 0.9, 20, rng);
        REQUIRE(sub.size() == 5);
        CHECK(sub[0] == kUnkId);
        CHECK(sub[2] == kUnkId);
        CHECK(sub[4] == kUnkId);
    }
}

TEST_CASE("perturb: bit-exact reproducibility under a fixed seed") {
    const std::vector<int> tokens = {4, 5, 6, 7, 8, 9, 10, 11, 12, 13};
    for (const PerturbKind kind : {PerturbKind::Swap, PerturbKind::Delete, PerturbKind::Insert,
                                   PerturbKind::Substitute}) {
        Rng a(77), b(77);
        for (int trial = 0; trial < 25; ++trial)
            CHECK(perturb(tokens, kind, 0.4, 20, a) == perturb(tokens, kind, 0.4, 20, b));
    }
}

TEST_CASE("perturb: invalid arguments") {
    const std::vector<int> tokens = {4, 5};
    Rng rng(1);
    CHECK_THROWS_AS(perturb(tokens, PerturbKind::Delete, -0.1, 20, rng), std::invalid_argument);
    CHECK_THROWS_AS(perturb(tokens, PerturbKind::Delete, 1.5, 20, rng), std::invalid_argument);
    CHECK_THROWS_AS(perturb(tokens, PerturbKind::Insert, 0.5, 4, rng), std::invalid_argument);
    CHECK(perturb_kind_from_name("swap") == PerturbKind::Swap);
    CHECK_THROWS_AS(perturb_kind_from_name("rotate"), std::invalid_argument);
    CHECK(std::string(perturb_kind_name(PerturbKind::Substitute)) == "substitute");
}

// ---------------------------------------------------------------------------
// Robustness harness
// ---------------------------------------------------------------------------

TEST_CASE("robustness_curve: deterministic rows, rate zero equals clean evaluation") {
    const std::vector<std::string> lines = {"the cat sat", "a dog ran", "rain fell"};
    const Tokenizer tok = Tokenizer::build(lines);
    const Model model(tiny_config(tok.vocab_size(), 1), 55);
    const std::vector<PerturbKind> kinds = {PerturbKind::Delete, PerturbKind::Substitute};
    const std::vector<double> rates = {0.0, 0.3};

    const std::vector<RobustnessRow> rows =
        robustness_curve(model, lines, tok, kinds, rates, 0.1, 24, 99);
    REQUIRE(rows.size() == 4);
    const std::vector<RobustnessRow> rows2 =
        robustness_curve(model, lines, tok, kinds, rates, 0.1, 24, 99);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].kind == rows2[i].kind);
        CHECK(rows[i].rate == rows2[i].rate);
        CHECK(rows[i].accuracy == rows2[i].accuracy);
        CHECK(rows[i].ce == rows2[i].ce);
    }
    // Rate-0 rows are the unperturbed evaluation, identical across kinds.
    CHECK(rows[0].rate == 0.0);
    CHECK(rows[2].rate == 0.0);
    CHECK(rows[0].accuracy == rows[2].accuracy);
    CHECK(rows[0].ce == rows[2].ce);
    for (const RobustnessRow& r : rows) {
        CHECK(r.accuracy >= 0.0);
        CHECK(r.accuracy <= 1.0);
        CHECK(std::isfinite(r.ce));
    }
}

TEST_CASE("robustness csv: header and exact round trip") {
    const std::string dir = temp_dir("csv");
    const std::string path = dir + "/rob.csv";
    std::vector<RobustnessRow> rows;
    rows.push_back(RobustnessRow{"swap", 0.1, 0.123456789012345678, 3.33333333333333331});
    rows.push_back(RobustnessRow{"delete", 0.25, 1.0, 0.5});
    write_robustness_csv(path, rows);
    {
        std::ifstream is(path);
        std::string header;
        std::getline(is, header);
        CHECK(header == "kind,rate,accuracy,ce");
    }
    const std::vector<RobustnessRow> back = read_robustness_csv(path);
    REQUIRE(back.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back[i].kind == rows[i].kind);
        CHECK(back[i].rate == rows[i].rate);
        CHECK(back[i].accuracy == rows[i].accuracy);
        CHECK(back[i].ce == rows[i].ce);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("robustness plot: one polyline per kind") {
    const std::string dir = temp_dir("plot");
    const std::string path = dir + "/rob.svg";
    std::vector<RobustnessRow> rows;
    for (const char* kind : {"swap", "delete"})
        for (double rate : {0.0, 0.1, 0.2})
            rows.push_back(RobustnessRow{kind, rate, 1.0 - rate, rate});
    write_robustness_plot(path, rows);
    std::ifstream is(path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    CHECK(text.rfind("<svg", 0) == 0);
    std::size_t polylines = 0, pos = 0;
    while ((pos = text.find("<polyline", pos)) != std::string::npos) {
        ++polylines;
        pos += 9;
    }
    CHECK(polylines == 2);
    CHECK(text.find("swap") != std::string::npos);
    CHECK(text.find("delete") != std::string::npos);
    std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Attention export
// ---------------------------------------------------------------------------

TEST_CASE("attention file: bit-exact float32 round trip") {
    const std::string dir = temp_dir("attnfile");
    const std::string path = dir + "/layer3.attn";
    AttentionFile file;
    file.layer = 3;
    file.is_nvib = true;
    file.input = "héllo wörld";
    file.retained = {1, 0, 1, 1};
    Rng rng(1234);
    file.weights = random_uniform(rng, 5, 5, -2.0, 2.0);
    write_attention_matrix(path, file);

    const AttentionFile back = read_attention_matrix(path);
    CHECK(back.layer == 3);
    CHECK(back.is_nvib);
    CHECK(back.input == file.input);
    CHECK(back.retained == file.retained);
    REQUIRE(back.weights.rows() == file.weights.rows());
    REQUIRE(back.weights.cols() == file.weights.cols());
    for (std::size_t k = 0; k < file.weights.size(); ++k) {
        const double expected = static_cast<double>(static_cast<float>(file.weights.data()[k]));
        CHECK(back.weights.data()[k] == expected);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("attention file: corruption is rejected with the path") {
    const std::string dir = temp_dir("attnbad");
    const std::string path = dir + "/bad.attn";
    {
        std::ofstream os(path, std::ios::binary);
        os << "NOTMAGIC and some junk";
    }
    try {
        read_attention_matrix(path);
        FAIL("expected an exception");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find(path) != std::string::npos);
    }
    CHECK_THROWS_AS(read_attention_matrix(dir + "/missing.attn"), std::runtime_error);
    std::filesystem::remove_all(dir);
}

TEST_CASE("heatmap: dimensions, colour scale endpoints and dark dropped columns") {
    const std::string dir = temp_dir("heatmap");
    const std::string path = dir + "/map.ppm";
    Matrix w(2, 3);
    w(0, 0) = 0.0;
    w(0, 1) = 1.0;
    w(0, 2) = 7.5;  // clamps to 1
    w(1, 0) = 0.5;
    w(1, 1) = -3.0;  // clamps to 0
    w(1, 2) = 0.25;
    const std::vector<std::uint8_t> retained = {1, 0, 1};  // column 1 dropped
    write_attention_heatmap(path, w, retained);

    std::ifstream is(path, std::ios::binary);
    std::string magic;
    int width = 0, height = 0, maxval = 0;
    is >> magic >> width >> height >> maxval;
    is.get();  // single whitespace after the header
    CHECK(magic == "P6");
    CHECK(width == 3 * kHeatmapCellSize);
    CHECK(height == 2 * kHeatmapCellSize);
    CHECK(maxval == 255);
    std::vector<unsigned char> px(static_cast<std::size_t>(width) * height * 3);
    is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
    REQUIRE(static_cast<bool>(is));

    const auto at = [&](int y, int x) {
        const std::size_t base = (static_cast<std::size_t>(y) * width + x) * 3;
        return std::array<int, 3>{px[base], px[base + 1], px[base + 2]};
    };
    const int c = kHeatmapCellSize;
    // Cell (0,0): value 0 -> dark purple.
    CHECK(at(0, 0) == std::array<int, 3>{68, 1, 84});
    // Cell (0,2): clamped to 1 -> light yellow.
    CHECK(at(0, 2 * c) == std::array<int, 3>{253, 231, 37});
    // Cell (1,1): dropped column -> fully dark, despite any value.
    CHECK(at(c, c) == std::array<int, 3>{0, 0, 0});
    // Cell (1,0): value 0.5 sits strictly between the endpoints.
    const std::array<int, 3> mid = at(c, 0);
    CHECK(mid[0] > 68);
    CHECK(mid[0] < 253);
    std::filesystem::remove_all(dir);
}

TEST_CASE("export_attention: one matrix and heatmap per encoder layer") {
    const std::vector<std::string> lines = {"abc def", "ghi jk"};
    const Tokenizer tok = Tokenizer::build(lines);
    const Model model(tiny_config(tok.vocab_size(), 1), 3);
    const std::string dir = temp_dir("export");
    const int written = export_attention(model, "abc def", tok, 0.1, dir);
    CHECK(written == 2);
    for (int l = 0; l < 2; ++l) {
        const std::string stem = dir + "/layer" + std::to_string(l);
        REQUIRE(std::filesystem::exists(stem + ".attn"));
        REQUIRE(std::filesystem::exists(stem + ".ppm"));
        const AttentionFile f = read_attention_matrix(stem + ".attn");
        CHECK(f.layer == l);
        CHECK(f.input == "abc def");
        CHECK(f.weights.rows() == 7);  // one query row per character
        if (f.is_nvib) {
            CHECK(f.weights.cols() == 8);  // data components + prior
            CHECK(f.retained.size() == 7);
        } else {
            CHECK(f.weights.cols() == 7);
            CHECK(f.retained.empty());
        }
    }
    // Layer 1 is the denoising layer in a 2-layer stack with one NVIB layer.
    CHECK(read_attention_matrix(dir + "/layer1.attn").is_nvib);
    CHECK(!read_attention_matrix(dir + "/layer0.attn").is_nvib);
    std::filesystem::remove_all(dir);
}

TEST_CASE("segment_corpus: runs end to end and is deterministic") {
    const std::vector<std::string> lines = {"the cat sat", "a dog ran", "owls hoot"};
    const Tokenizer tok = Tokenizer::build(lines);
    const Model model(tiny_config(tok.vocab_size(), 1), 21);
    const SegmentationReport a = segment_corpus(model, lines, tok, 0.1);
    const SegmentationReport b = segment_corpus(model, lines, tok, 0.1);
    CHECK(a.n_sequences == 3);
    CHECK(a.encode_failures == 0);
    CHECK(a.precision == b.precision);
    CHECK(a.recall == b.recall);
    CHECK(a.f1 == b.f1);
    CHECK(a.precision >= 0.0);
    CHECK(a.precision <= 1.0);
    CHECK(a.recall >= 0.0);
    CHECK(a.recall <= 1.0);
    CHECK(a.f1 >= 0.0);
    CHECK(a.f1 <= 1.0);
}
