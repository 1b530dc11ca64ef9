// SPDX-License-Identifier: Apache-2.0
#include "nvib/cli.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <omp.h>

#include "nvib/analysis.hpp"
#include "nvib/gradcheck.hpp"
#include "nvib/model.hpp"
#include "nvib/probing.hpp"
#include "nvib/rng.hpp"
#include "nvib/tokenizer.hpp"
#include "nvib/training.hpp"

namespace nvib {
namespace {

using nlohmann::json;

void require_file(const std::string& path, const std::string& what) {
    if (!std::filesystem::exists(path))
        throw std::invalid_argument(what + " not found: " + path);
}

void write_text(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << body;
    if (!out.good()) throw std::runtime_error("cannot write file: " + path);
}

// ---------------------------------------------------------------------------
// Config handling: one JSON document with "model" and "train" sections,
// optionally read from a file, then overridden by --set section.key=value
// flags.  Unknown sections or fields fail loudly.
// ---------------------------------------------------------------------------

json default_config_doc() {
    json doc;
    doc["model"] = json::parse(model_config_to_json(ModelConfig{}));
    doc["train"] = json::parse(train_config_to_json(TrainConfig{}));
    return doc;
}

void apply_override(json& doc, const json& defaults, const std::string& spec) {
    const std::size_t eq = spec.find('=');
    const std::size_t dot = spec.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
        throw std::invalid_argument("override must look like section.key=value: " + spec);
    const std::string section = spec.substr(0, dot);
    const std::string key = spec.substr(dot + 1, eq - dot - 1);
    const std::string value = spec.substr(eq + 1);
    if (!defaults.contains(section) || !defaults.at(section).contains(key))
        throw std::invalid_argument("unknown config field: " + section + "." + key);
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::parse_error&) {
        parsed = value;  // bare words stay strings, e.g. --set train.optimizer=adam
    }
    doc[section][key] = std::move(parsed);
}

json load_config_doc(const std::string& config_path, const std::vector<std::string>& sets) {
    json doc = default_config_doc();
    const json defaults = doc;
    if (!config_path.empty()) {
        require_file(config_path, "config file");
        std::ifstream in(config_path, std::ios::binary);
        json file_doc;
        try {
            file_doc = json::parse(in);
        } catch (const json::parse_error& e) {
            throw std::invalid_argument("config file " + config_path + ": " + e.what());
        }
        if (!file_doc.is_object())
            throw std::invalid_argument("config file must hold a JSON object: " + config_path);
        for (auto it = file_doc.begin(); it != file_doc.end(); ++it) {
            if (!defaults.contains(it.key()))
                throw std::invalid_argument("unknown config section: " + it.key());
            if (!it.value().is_object())
                throw std::invalid_argument("config section must be an object: " + it.key());
            for (auto field = it.value().begin(); field != it.value().end(); ++field)
                if (!defaults.at(it.key()).contains(field.key()))
                    throw std::invalid_argument("unknown config field: " + it.key() + "." +
                                                field.key());
        }
        doc.merge_patch(file_doc);
    }
    for (const std::string& spec : sets) apply_override(doc, defaults, spec);
    return doc;
}

void echo_config(const std::string& out_dir, const json& doc) {
    std::filesystem::create_directories(out_dir);
    write_text(out_dir + "/effective_config.json", doc.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

struct LoadedModel {
    Model model;
    Tokenizer tok;
    TrainConfig tc;  // as stored at save time; defaults when absent
};

LoadedModel load_model(const std::string& ckpt_path) {
    require_file(ckpt_path, "checkpoint");
    std::string meta_text;
    Model model = load_checkpoint(ckpt_path, &meta_text);
    const json meta = meta_text.empty() ? json::object() : json::parse(meta_text);
    if (!meta.contains("tokenizer"))
        throw std::invalid_argument("checkpoint carries no tokenizer metadata: " + ckpt_path);
    Tokenizer tok = Tokenizer::from_json(meta.at("tokenizer").dump());
    TrainConfig tc;
    if (meta.contains("train_config"))
        tc = train_config_from_json(meta.at("train_config").dump());
    return {std::move(model), std::move(tok), tc};
}

json model_train_sections(const LoadedModel& lm) {
    json doc;
    doc["model"] = json::parse(model_config_to_json(lm.model.config()));
    doc["train"] = json::parse(train_config_to_json(lm.tc));
    return doc;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_train(const std::string& corpus_path, const std::string& config_path,
              const std::vector<std::string>& sets, std::uint64_t seed,
              const std::string& out_dir) {
    require_file(corpus_path, "corpus file");
    json doc = load_config_doc(config_path, sets);
    doc["train"]["seed"] = seed;
    if (doc["model"].value("vocab_size", 0) != 0)
        throw std::invalid_argument(
            "model.vocab_size is derived from the corpus; do not set it");
    const TrainConfig tc = train_config_from_json(doc["train"].dump());

    const std::vector<std::string> lines = load_corpus(corpus_path, tc.max_len);
    CorpusSplit split = split_corpus(lines, tc.val_fraction, tc.seed);
    const Tokenizer tok = Tokenizer::build(split.train);
    doc["model"]["vocab_size"] = tok.vocab_size();
    const ModelConfig mc = model_config_from_json(doc["model"].dump());
    echo_config(out_dir, doc);

    std::cout << "training on " << split.train.size() << " sequences (" << split.val.size()
              << " held out), vocab " << tok.vocab_size() << "\n";
    Model model(mc, Rng::derive(tc.seed, 0x30D31));
    const TrainResult res = train(model, split.train, split.val, tok, tc, out_dir, &std::cout);
    if (res.aborted) throw NumericalError(res.abort_message);
    std::cout << "final checkpoint: " << res.final_checkpoint << " (val ce " << res.final_val_ce
              << ")\nbest checkpoint:  " << res.best_checkpoint << " (val ce " << res.best_val_ce
              << ")\n";
    return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& corpus_path,
                 const std::string& out_dir) {
    const LoadedModel lm = load_model(ckpt_path);
    require_file(corpus_path, "corpus file");
    const std::vector<std::string> lines = load_corpus(corpus_path, lm.tc.max_len);

    TrainConfig tc = lm.tc;
    tc.deletion_prob = 0.0;  // clean inputs: the noise salt becomes irrelevant
    const EvalResult res = evaluate(lm.model, lines, lm.tok, tc, 0, /*with_accuracy=*/true);

    json rep;
    rep["ce"] = res.noisy_ce;
    rep["accuracy"] = res.clean_accuracy;
    rep["retention"] = res.retention;
    rep["n_sequences"] = res.n_sequences;
    rep["encode_failures"] = res.encode_failures;

    json doc = model_train_sections(lm);
    doc["command"] = "evaluate";
    doc["evaluate"] = {{"checkpoint", ckpt_path}, {"corpus", corpus_path}};
    echo_config(out_dir, doc);
    write_text(out_dir + "/evaluation.json", rep.dump(2) + "\n");

    std::cout << "ce=" << res.noisy_ce << " accuracy=" << res.clean_accuracy << " retention=[";
    for (std::size_t i = 0; i < res.retention.size(); ++i)
        std::cout << (i > 0 ? "," : "") << res.retention[i];
    std::cout << "] n=" << res.n_sequences << " encode_failures=" << res.encode_failures << "\n";
    return 0;
}

void print_seg_score(double precision, double recall, double f1) {
    std::cout << "precision=" << precision << " recall=" << recall << " f1=" << f1 << "\n";
}

int cmd_segment(const std::string& ckpt_path, const std::string& corpus_path,
                const std::string& attention_path, const std::string& out_dir,
                const CLI::Option* threshold_opt, double threshold_flag) {
    if (!attention_path.empty()) {
        // Score a stored attention map against its own embedded input.
        require_file(attention_path, "attention file");
        const AttentionFile file = read_attention_matrix(attention_path);
        const int n_data =
            file.is_nvib ? static_cast<int>(file.weights.cols()) - 1
                         : static_cast<int>(file.weights.cols());
        const Segmentation seg = extract_segments(file.weights, file.retained, n_data);
        const std::vector<std::uint32_t> cps = Tokenizer::utf8_decode(file.input);
        const SegScore sc = score_segmentation(cps, seg, word_spans(cps));
        print_seg_score(sc.precision, sc.recall, sc.f1);
        if (!out_dir.empty()) {
            json doc;
            doc["command"] = "segment";
            doc["segment"] = {{"attention", attention_path}};
            echo_config(out_dir, doc);
            std::ofstream csv(out_dir + "/segmentation.csv", std::ios::binary);
            csv.precision(17);
            csv << "line,precision,recall,f1\n0," << sc.precision << ',' << sc.recall << ','
                << sc.f1 << "\n";
            if (!csv.good())
                throw std::runtime_error("cannot write file: " + out_dir + "/segmentation.csv");
        }
        return 0;
    }

    const LoadedModel lm = load_model(ckpt_path);
    require_file(corpus_path, "corpus file");
    const std::vector<std::string> lines = load_corpus(corpus_path, lm.tc.max_len);
    const double threshold =
        threshold_opt->count() > 0 ? threshold_flag : lm.tc.alpha_threshold;
    const SegmentationReport rep = segment_corpus(lm.model, lines, lm.tok, threshold);

    if (!out_dir.empty()) {
        json doc = model_train_sections(lm);
        doc["command"] = "segment";
        doc["segment"] = {{"checkpoint", ckpt_path},
                          {"corpus", corpus_path},
                          {"alpha_threshold", threshold}};
        echo_config(out_dir, doc);
        std::ofstream csv(out_dir + "/segmentation.csv", std::ios::binary);
        csv.precision(17);
        csv << "line,precision,recall,f1\n";
        for (std::size_t i = 0; i < rep.lines.size(); ++i)
            csv << i << ',' << rep.lines[i].precision << ',' << rep.lines[i].recall << ','
                << rep.lines[i].f1 << "\n";
        if (!csv.good())
            throw std::runtime_error("cannot write file: " + out_dir + "/segmentation.csv");
    }
    print_seg_score(rep.precision, rep.recall, rep.f1);
    std::cout << "n=" << rep.n_sequences << " encode_failures=" << rep.encode_failures << "\n";
    return 0;
}

int cmd_perturb(const std::string& ckpt_path, const std::string& corpus_path,
                const std::string& out_dir, std::uint64_t seed,
                const std::vector<std::string>& kind_names, const std::vector<double>& rates,
                const CLI::Option* threshold_opt, double threshold_flag, int max_decode_len) {
    const LoadedModel lm = load_model(ckpt_path);
    require_file(corpus_path, "corpus file");
    const std::vector<std::string> lines = load_corpus(corpus_path, lm.tc.max_len);

    std::vector<PerturbKind> kinds;
    for (const std::string& name : kind_names) kinds.push_back(perturb_kind_from_name(name));
    const double threshold =
        threshold_opt->count() > 0 ? threshold_flag : lm.tc.alpha_threshold;
    const int decode_len = max_decode_len > 0 ? max_decode_len : lm.tc.max_len + 8;

    const std::vector<RobustnessRow> rows =
        robustness_curve(lm.model, lines, lm.tok, kinds, rates, threshold, decode_len, seed);

    json doc = model_train_sections(lm);
    doc["command"] = "perturb";
    doc["perturb"] = {{"checkpoint", ckpt_path},      {"corpus", corpus_path},
                      {"kinds", kind_names},          {"rates", rates},
                      {"alpha_threshold", threshold}, {"max_decode_len", decode_len},
                      {"seed", seed}};
    echo_config(out_dir, doc);
    write_robustness_csv(out_dir + "/robustness.csv", rows);
    write_robustness_plot(out_dir + "/robustness.svg", rows);

    for (const RobustnessRow& r : rows)
        std::cout << r.kind << " rate=" << r.rate << " accuracy=" << r.accuracy
                  << " ce=" << r.ce << "\n";
    return 0;
}

int cmd_probe(const std::string& ckpt_path, const std::string& dataset_path,
              const std::string& out_dir, std::uint64_t seed, const std::string& kind_name,
              int hidden, int epochs, int batch_size, double lr,
              const CLI::Option* threshold_opt, double threshold_flag) {
    const LoadedModel lm = load_model(ckpt_path);
    require_file(dataset_path, "dataset file");
    const LabelledDataset data = load_labelled_dataset(dataset_path);
    const double threshold =
        threshold_opt->count() > 0 ? threshold_flag : lm.tc.alpha_threshold;

    std::vector<ProbeKind> kinds;
    if (kind_name == "both")
        kinds = {ProbeKind::Aggregating, ProbeKind::Attention};
    else
        kinds = {probe_kind_from_name(kind_name)};

    std::vector<ProbeConfig> protos;
    for (const ProbeKind kind : kinds) {
        ProbeConfig cfg = ProbeConfig::defaults(kind);
        if (hidden > 0) cfg.hidden = hidden;
        if (epochs > 0) cfg.epochs = epochs;
        if (batch_size > 0) cfg.batch_size = batch_size;
        if (lr > 0.0) cfg.lr = lr;
        cfg.seed = seed;
        protos.push_back(cfg);
    }

    const std::vector<LayerwiseRow> rows =
        layerwise_report(lm.model, data, lm.tok, protos, threshold);

    json doc = model_train_sections(lm);
    doc["command"] = "probe";
    doc["probe"] = {{"checkpoint", ckpt_path},
                    {"dataset", dataset_path},
                    {"kinds", kind_name},
                    {"hidden", protos.front().hidden},
                    {"epochs", protos.front().epochs},
                    {"batch_size", protos.front().batch_size},
                    {"lr", protos.front().lr},
                    {"alpha_threshold", threshold},
                    {"n_classes", data.n_classes()},
                    {"seed", seed}};
    echo_config(out_dir, doc);
    write_layerwise_csv(out_dir + "/probe_report.csv", rows);

    for (const LayerwiseRow& r : rows)
        std::cout << "layer=" << r.layer << " kind=" << probe_kind_name(r.kind)
                  << " accuracy=" << r.accuracy << " macro_f1=" << r.macro_f1
                  << " best_epoch=" << r.best_epoch << "\n";
    return 0;
}

int cmd_export_attention(const std::string& ckpt_path, const std::vector<std::string>& texts,
                         const std::string& out_dir, const CLI::Option* threshold_opt,
                         double threshold_flag) {
    const LoadedModel lm = load_model(ckpt_path);
    const double threshold =
        threshold_opt->count() > 0 ? threshold_flag : lm.tc.alpha_threshold;

    json doc = model_train_sections(lm);
    doc["command"] = "export-attention";
    doc["export_attention"] = {{"checkpoint", ckpt_path},
                               {"texts", texts},
                               {"alpha_threshold", threshold}};
    echo_config(out_dir, doc);

    int total = 0;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        std::string tag = std::to_string(i);
        tag.insert(0, tag.size() < 3 ? 3 - tag.size() : 0, '0');
        total += export_attention(lm.model, texts[i], lm.tok, threshold,
                                  out_dir + "/sent" + tag);
    }
    std::cout << "wrote " << total << " layer maps for " << texts.size()
              << " sentences under " << out_dir << "\n";
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, int instances, int samples) {
    bool all_ok = true;
    for (const gradcheck::CheckResult& r : gradcheck::run_suite(seed, instances)) {
        std::cout << (r.ok ? "pass" : "FAIL") << "  " << r.name << " (n=" << r.n_checked
                  << ", max_rel_err=" << r.max_rel_err << ")\n";
        all_ok = all_ok && r.ok;
    }
    for (const gradcheck::SamplingCheckResult& r :
         gradcheck::check_sampling_gradients(seed, samples)) {
        std::cout << (r.ok ? "pass" : "FAIL") << "  " << r.name
                  << " (mc_mean=" << r.mc_mean << ", closed_form=" << r.closed_form_mean
                  << ")\n";
        all_ok = all_ok && r.ok;
    }
    if (!all_ok) throw NumericalError("gradient certification failed");
    std::cout << "all gradient certifications passed\n";
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"character-level transformer toolkit with denoising (NVIB) self-attention"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string("nvib ") + kCodeVersion +
                                          " (checkpoint format " +
                                          std::to_string(kCheckpointVersion) +
                                          ", attention file format " +
                                          std::to_string(kAttentionFileVersion) + ")");
    int threads = 0;
    app.add_option("--threads", threads,
                   "worker thread cap (1 = bitwise reproducible, 0 = library default)");

    // train
    std::string corpus_path, config_path, out_dir;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    CLI::App* train_cmd = app.add_subcommand("train", "train a model on a text corpus");
    train_cmd->fallthrough();
    train_cmd->add_option("--corpus", corpus_path, "newline-delimited training text")
        ->required();
    train_cmd->add_option("--config", config_path, "JSON config with model/train sections");
    train_cmd->add_option("--set", sets, "override a config field (section.key=value)");
    train_cmd->add_option("--seed", seed, "random seed")->required();
    train_cmd->add_option("--out", out_dir, "output directory")->required();

    // evaluate
    std::string ckpt_path;
    CLI::App* eval_cmd =
        app.add_subcommand("evaluate", "clean CE, accuracy and retention on a corpus");
    eval_cmd->fallthrough();
    eval_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    eval_cmd->add_option("--corpus", corpus_path, "evaluation text")->required();
    eval_cmd->add_option("--out", out_dir, "output directory")->required();

    // segment
    std::string attention_path;
    double threshold_flag = 0.0;
    CLI::App* seg_cmd = app.add_subcommand(
        "segment", "score unsupervised word segmentation from attention maps");
    seg_cmd->fallthrough();
    seg_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint");
    seg_cmd->add_option("--corpus", corpus_path, "text to segment");
    seg_cmd->add_option("--attention", attention_path,
                        "stored attention map scored against its embedded input");
    seg_cmd->add_option("--out", out_dir, "output directory (optional)");
    const CLI::Option* seg_threshold =
        seg_cmd->add_option("--threshold", threshold_flag,
                            "pruning threshold (default: value stored in the checkpoint)");

    // perturb
    std::vector<std::string> kind_names = {"swap", "delete", "insert", "substitute"};
    std::vector<double> rates = {0.0, 0.05, 0.1, 0.2, 0.3};
    int max_decode_len = 0;
    CLI::App* pert_cmd =
        app.add_subcommand("perturb", "robustness sweep over input perturbations");
    pert_cmd->fallthrough();
    pert_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    pert_cmd->add_option("--corpus", corpus_path, "evaluation text")->required();
    pert_cmd->add_option("--kinds", kind_names, "perturbation kinds")
        ->delimiter(',')
        ->capture_default_str();
    pert_cmd->add_option("--rates", rates, "perturbation rates in [0,1]")
        ->delimiter(',')
        ->capture_default_str();
    pert_cmd->add_option("--max-decode-len", max_decode_len,
                         "decode length cap (default: max_len + 8)");
    const CLI::Option* pert_threshold = pert_cmd->add_option(
        "--threshold", threshold_flag, "pruning threshold (default: from checkpoint)");
    pert_cmd->add_option("--seed", seed, "random seed")->required();
    pert_cmd->add_option("--out", out_dir, "output directory")->required();

    // probe
    std::string dataset_path;
    std::string probe_kind = "both";
    int probe_hidden = 0, probe_epochs = 0, probe_batch = 0;
    double probe_lr = 0.0;
    CLI::App* probe_cmd =
        app.add_subcommand("probe", "train classification probes on frozen representations");
    probe_cmd->fallthrough();
    probe_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    probe_cmd->add_option("--dataset", dataset_path, "text<TAB>label examples")->required();
    probe_cmd->add_option("--kind", probe_kind, "aggregating | attention | both")
        ->check(CLI::IsMember({"aggregating", "attention", "both"}))
        ->capture_default_str();
    probe_cmd->add_option("--hidden", probe_hidden, "probe MLP width (default per kind)");
    probe_cmd->add_option("--epochs", probe_epochs, "training epochs (default per kind)");
    probe_cmd->add_option("--batch", probe_batch, "batch size (default per kind)");
    probe_cmd->add_option("--lr", probe_lr, "learning rate (default per kind)");
    const CLI::Option* probe_threshold = probe_cmd->add_option(
        "--threshold", threshold_flag, "pruning threshold (default: from checkpoint)");
    probe_cmd->add_option("--seed", seed, "random seed")->required();
    probe_cmd->add_option("--out", out_dir, "output directory")->required();

    // export-attention
    std::vector<std::string> texts;
    CLI::App* attn_cmd = app.add_subcommand(
        "export-attention", "write attention matrices and heatmaps for given sentences");
    attn_cmd->fallthrough();
    attn_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    attn_cmd->add_option("--text", texts, "sentence to encode (repeatable)")->required();
    const CLI::Option* attn_threshold = attn_cmd->add_option(
        "--threshold", threshold_flag, "pruning threshold (default: from checkpoint)");
    attn_cmd->add_option("--out", out_dir, "output directory")->required();

    // gradcheck
    std::uint64_t grad_seed = 1234;
    int grad_instances = 100;
    int grad_samples = 20000;
    CLI::App* grad_cmd =
        app.add_subcommand("gradcheck", "run every gradient certification and report pass/fail");
    grad_cmd->fallthrough();
    grad_cmd->add_option("--seed", grad_seed, "random seed")->capture_default_str();
    grad_cmd->add_option("--instances", grad_instances, "random instances per composite check")
        ->capture_default_str();
    grad_cmd->add_option("--samples", grad_samples, "Monte-Carlo samples for sampling checks")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);  // --help / --version print and succeed
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    if (threads > 0) omp_set_num_threads(threads);
    try {
        if (train_cmd->parsed())
            return cmd_train(corpus_path, config_path, sets, seed, out_dir);
        if (eval_cmd->parsed()) return cmd_evaluate(ckpt_path, corpus_path, out_dir);
        if (seg_cmd->parsed()) {
            if (attention_path.empty() && (ckpt_path.empty() || corpus_path.empty()))
                throw std::invalid_argument(
                    "segment needs either --attention or --checkpoint with --corpus");
            return cmd_segment(ckpt_path, corpus_path, attention_path, out_dir, seg_threshold,
                               threshold_flag);
        }
        if (pert_cmd->parsed())
            return cmd_perturb(ckpt_path, corpus_path, out_dir, seed, kind_names, rates,
                               pert_threshold, threshold_flag, max_decode_len);
        if (probe_cmd->parsed())
            return cmd_probe(ckpt_path, dataset_path, out_dir, seed, probe_kind, probe_hidden,
                             probe_epochs, probe_batch, probe_lr, probe_threshold,
                             threshold_flag);
        if (attn_cmd->parsed())
            return cmd_export_attention(ckpt_path, texts, out_dir, attn_threshold,
                                        threshold_flag);
        if (grad_cmd->parsed()) return cmd_gradcheck(grad_seed, grad_instances, grad_samples);
        throw std::invalid_argument("no subcommand selected");
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace nvib
