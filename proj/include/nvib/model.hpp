// SPDX-License-Identifier: Apache-2.0
//
// Character-level Transformer encoder-decoder in which the self-attention
// of the topmost encoder layers can be replaced by nonparametric
// variational denoising attention (see nvib_math.hpp).  The model owns a
// named parameter store; each forward pass binds the parameters as leaves
// onto a fresh Tape so that gradients can be harvested per sequence.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nvib/matrix.hpp"
#include "nvib/nvib_math.hpp"
#include "nvib/rng.hpp"
#include "nvib/tape.hpp"

namespace nvib {

// Special token ids shared by the tokenizer and the decoder.
constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kUnkId = 3;

struct ModelConfig {
    int n_enc_layers = 6;   // encoder depth
    int n_dec_layers = 2;   // decoder depth
    int n_nvib_layers = 3;  // topmost encoder layers with denoising attention
    int p = 64;             // model width (embeddings, projections)
    int d_ff = 128;         // feed-forward hidden width
    int n_heads = 1;        // single-head attention throughout
    int d_k = 0;            // key/query width; 0 means p
    double dropout = 0.1;
    int vocab_size = 0;

    int key_width() const { return d_k > 0 ? d_k : p; }
    void validate() const;  // throws std::invalid_argument on bad values
};

// Snapshot of one encoder layer taken during encode().  For denoising
// layers `attention` is m x (n+1) (last column = prior component), `alpha`
// is (n+1) x 1 (captured before any thresholding) and `retained` flags the
// n data components with alpha above the threshold (intersected with
// upstream drops in eval mode).  Standard
// layers record only the m x n attention matrix.  The heavy fields
// (`attention` and the layer's n x p output `hidden`) are copied only when
// encode() runs with capture_attention = true; the cheap fields (alpha,
// retained) are always filled.
struct LayerTrace {
    int layer = 0;       // 0-based encoder layer index
    bool is_nvib = false;
    bool sampled = false;  // true when the layer ran in sampling (train) mode
    Matrix attention;
    Matrix hidden;  // layer output states (post feed-forward and norms)
    Matrix alpha;
    std::vector<std::uint8_t> retained;
};

// Thrown when encoding cannot produce a usable memory (e.g. every data
// component of the final denoising layer was pruned).  Carries the layer
// traces collected up to the failure point for diagnosis.
struct EncodeError : NumericalError {
    std::vector<LayerTrace> traces;
    EncodeError(const std::string& msg, std::vector<LayerTrace> tr)
        : NumericalError(msg), traces(std::move(tr)) {}
};

struct EncodeResult {
    Tape::Var hidden = -1;                 // n x p final encoder states
    std::vector<LayerTrace> traces;        // one per encoder layer
    std::vector<std::uint8_t> bottleneck;  // n flags; 1 = visible to decoder
    // Posterior parameters per denoising layer (bottom-up), with the global
    // 0-based layer index of each entry; used to assemble the KL losses.
    std::vector<DpParamsVars> dp;
    std::vector<int> nvib_layers;
};

// Named dense parameters with matching gradient accumulators.
class ParamStore {
  public:
    int add(const std::string& name, Matrix value);
    // Returns the id for `name`, or -1 when absent.
    int find(const std::string& name) const;
    int count() const { return static_cast<int>(entries_.size()); }
    const std::string& name(int id) const { return entries_.at(id).name; }
    Matrix& value(int id) { return entries_.at(id).value; }
    const Matrix& value(int id) const { return entries_.at(id).value; }
    Matrix& grad(int id) { return entries_.at(id).grad; }
    const Matrix& grad(int id) const { return entries_.at(id).grad; }
    void zero_grads();
    double grad_norm() const;  // global L2 norm over every gradient
    std::size_t scalar_count() const;

  private:
    struct Entry {
        std::string name;
        Matrix value;
        Matrix grad;
    };
    std::vector<Entry> entries_;
};

class Model {
  public:
    // Builds a freshly initialised model.  Projections use Xavier-uniform
    // initialisation; the alpha head starts at exactly zero so every
    // component opens with alpha = 1 (retention 100%).
    Model(ModelConfig cfg, std::uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    // Tape variables for every parameter, indexed by parameter id.
    struct Bound {
        std::vector<Tape::Var> vars;
        Tape::Var operator[](int id) const { return vars.at(id); }
    };
    Bound bind(Tape& t) const;

    // Runs the encoder over a token sequence (no BOS/EOS framing).  In
    // train mode the denoising layers sample their mixture; in eval mode
    // they use the posterior mean with alpha thresholding, and drops
    // propagate upward through the multiplicative alpha skip.  `rng` is
    // required in train mode (sampling + dropout) and ignored otherwise.
    EncodeResult encode(Tape& t, const Bound& b, const std::vector<int>& tokens,
                        bool train_mode, double alpha_threshold, Rng* rng,
                        bool capture_attention = false) const;

    // Teacher-forced decoder pass.  `prefix` must start with BOS; returns
    // the |prefix| x vocab_size logits variable.  `memory_mask` flags the
    // encoder positions visible to cross-attention (the bottleneck).
    Tape::Var decode(Tape& t, const Bound& b, const std::vector<int>& prefix,
                     Tape::Var memory, const std::vector<std::uint8_t>& memory_mask,
                     bool train_mode, Rng* rng) const;

    // Deterministic greedy decoding in eval mode.  Returns the generated
    // token ids (BOS/EOS excluded); stops at EOS or after max_len tokens.
    // `traces_out`, when non-null, receives the encoder traces.
    std::vector<int> greedy_decode(const std::vector<int>& src, int max_len,
                                   double alpha_threshold,
                                   std::vector<LayerTrace>* traces_out = nullptr) const;

    // Adds the tape gradients of every bound parameter into the store's
    // accumulators.  Call after Tape::backward.
    void harvest_grads(const Tape& t, const Bound& b);

    // True for encoder layers running denoising attention (the topmost
    // n_nvib_layers of the stack).
    bool is_nvib_layer(int layer) const {
        return layer >= cfg_.n_enc_layers - cfg_.n_nvib_layers;
    }

  private:
    struct AttnIds {
        int wq = -1, wk = -1, wv = -1, wo = -1;
    };
    struct NvibIds {
        int w_alpha = -1, b_alpha = -1, w_mu = -1, b_mu = -1;
        int w_sigma = -1, b_sigma = -1, w_q = -1, w_k = -1, wo = -1;
    };
    struct LnIds {
        int gain = -1, bias = -1;
    };
    struct FfIds {
        int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
    };
    struct EncLayerIds {
        bool nvib = false;
        AttnIds attn;  // standard layers
        NvibIds nv;    // denoising layers
        LnIds ln1, ln2;
        FfIds ff;
    };
    struct DecLayerIds {
        AttnIds self_attn, cross;
        LnIds ln1, ln2, ln3;
        FfIds ff;
    };

    Tape::Var sublayer_norm(Tape& t, const Bound& b, LnIds ln, Tape::Var residual,
                            Tape::Var sub_out, bool train_mode, Rng* rng) const;
    Tape::Var feed_forward(Tape& t, const Bound& b, FfIds ff, Tape::Var x) const;
    NvibProjectionVars nvib_vars(const Bound& b, const NvibIds& ids) const;

    ModelConfig cfg_;
    ParamStore store_;
    int embed_id_ = -1;
    int out_w_id_ = -1, out_b_id_ = -1;
    std::vector<EncLayerIds> enc_;
    std::vector<DecLayerIds> dec_;
};

// Sinusoidal position encodings, rows = positions, cols = width.
Matrix positional_encoding(int length, int width);

// Retained fraction of data components per denoising layer, bottom-up,
// read from the traces produced by Model::encode.
std::vector<double> count_retention(const std::vector<LayerTrace>& traces);

// ---------------------------------------------------------------------------
// Checkpoints.  Binary container: magic "NVIBCKPT", format version, a JSON
// blob ({"config": ..., "meta": ...}) and the named f64 tensors in
// little-endian row-major order.
// ---------------------------------------------------------------------------

constexpr std::uint32_t kCheckpointVersion = 1;

// `meta_json` must be a serialised JSON value (use "{}" when unused); it is
// stored verbatim and returned by load_checkpoint.
void save_checkpoint(const std::string& path, const Model& model,
                     const std::string& meta_json);
Model load_checkpoint(const std::string& path, std::string* meta_json = nullptr);

// JSON (de)serialisation of the model configuration.
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json_text);

}  // namespace nvib
