// keepfit: command-line front end for the pretraining and evaluation pipeline.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "keepfit/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace keepfit;

namespace {

fs::path runs_root() {
    const char* env = std::getenv("KEEPFIT_RUNS_DIR");
    return env && *env ? fs::path(env) : fs::path("runs");
}

// Shared plumbing: --config, repeated --set, and convenience flags that each
// map onto one config key.
struct Command {
    CLI::App* app = nullptr;
    std::string config_file;
    std::vector<std::string> sets;
    std::vector<std::pair<CLI::Option*, std::string>> mapped;
    std::vector<std::unique_ptr<std::string>> values;

    void flag(const std::string& name, const std::string& key, const std::string& help) {
        values.push_back(std::make_unique<std::string>());
        mapped.emplace_back(app->add_option(name, *values.back(), help + " (" + key + ")"), key);
    }

    json resolve() const {
        std::vector<std::string> overrides = sets;
        for (std::size_t i = 0; i < mapped.size(); ++i) {
            if (mapped[i].first->count() > 0) overrides.push_back(mapped[i].second + "=" + *values[i]);
        }
        return config::resolve(config_file, overrides);
    }
};

Command make_command(CLI::App& root, const std::string& name, const std::string& description, const std::string& footer) {
    Command c;
    c.app = root.add_subcommand(name, description);
    c.app->add_option("--config", c.config_file, "JSON config file (sections and keys as below)")->check(CLI::ExistingFile);
    c.app->add_option("--set", c.sets, "Override one key: section.key=value (repeatable)");
    c.app->footer(footer);
    return c;
}

std::string required_path(const json& cfg, const std::string& section, const std::string& key, const std::string& flag) {
    const auto v = cfg.at(section).at(key).get<std::string>();
    if (v.empty()) throw UsageError("missing " + flag + " (" + section + "." + key + ")");
    return v;
}

fs::path output_dir(const json& cfg, const std::string& section, const fs::path& fallback) {
    const auto v = cfg.at(section).at("out").get<std::string>();
    return v.empty() ? fallback : fs::path(v);
}

void write_text(const fs::path& path, const std::string& text) { atomic_write(path, text); }

int cmd_gen_data(const json& cfg) {
    const fs::path out = required_path(cfg, "data", "out", "--out");
    const auto spec = config::corpus_spec(cfg);
    const auto corpus = data::generate_synthetic_corpus(spec);
    data::write_corpus(out, corpus);
    write_text(out / "config.json", json{{"data", cfg.at("data")}}.dump(2) + "\n");
    std::cout << "wrote " << corpus.records.size() << " records (" << spec.n_elite << " elite, " << spec.n_categorical
              << " categorical, " << spec.n_classes << " classes) to " << out.string() << "\n";
    return 0;
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path.string());
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty()) lines.push_back(line);
    }
    if (lines.empty()) throw Error(path.string() + " contains no text");
    return lines;
}

int cmd_pretrain_text(const json& cfg) {
    const json& t = cfg.at("text");
    auto mlm_config = config::mlm(cfg);
    const fs::path out = output_dir(cfg, "text", runs_root() / "text");
    const auto resume_path = t.at("resume").get<std::string>();
    const auto data_dir = t.at("data").get<std::string>();
    const auto corpus_file = t.at("corpus").get<std::string>();

    std::optional<data::Corpus> corpus;
    if (!data_dir.empty()) corpus = data::read_corpus(data_dir);
    std::vector<std::string> text;
    if (!corpus_file.empty()) {
        text = read_lines(corpus_file);
    } else if (corpus) {
        text = data::generate_text_corpus(corpus->classes, t.at("sentences").get<std::size_t>(), mlm_config.seed);
    } else {
        throw UsageError("pretrain-text needs --corpus (text file) or --data (corpus directory)");
    }

    std::optional<Checkpoint> resume;
    Vocabulary vocab;
    encoders::TextEncoderConfig enc = config::text_encoder(cfg);
    if (!resume_path.empty()) {
        resume = load_checkpoint(resume_path);
        vocab = mlm::vocabulary_from(*resume);
        enc = mlm::text_config_from(*resume);
    } else {
        std::vector<std::string> all = text;
        if (corpus) {
            for (const auto& r : corpus->records) {
                if (r.caption) all.push_back(*r.caption);
            }
            for (const auto& v : corpus->classes.prompts.variants) all.insert(all.end(), v.begin(), v.end());
        }
        vocab = Vocabulary::build(all);
        enc.vocab_size = vocab.size();
    }
    enc.validate();

    auto result = mlm::mlm_pretrain(text, vocab, enc, mlm_config, resume ? &*resume : nullptr);
    fs::create_directories(out);
    save_checkpoint(out / "text-encoder.kft", result.checkpoint);
    std::ostringstream tel;
    for (std::size_t i = 0; i < result.losses.size(); ++i) tel << json{{"index", i}, {"loss", result.losses[i]}}.dump() << "\n";
    write_text(out / "telemetry.jsonl", tel.str());
    write_text(out / "config.json", json{{"text", t}}.dump(2) + "\n");
    std::cout << "text encoder: step " << result.step << ", vocabulary " << vocab.size() << ", loss "
              << (result.losses.empty() ? 0.0 : result.losses.front()) << " -> "
              << (result.losses.empty() ? 0.0 : result.losses.back()) << "\nwrote " << (out / "text-encoder.kft").string()
              << "\n";
    return 0;
}

int cmd_train_codebook(const json& cfg) {
    const auto ae = config::codebook(cfg);
    const fs::path data_dir = required_path(cfg, "codebook", "data", "--data");
    const fs::path out = output_dir(cfg, "codebook", runs_root() / "codebook");
    const auto corpus = data::read_corpus(data_dir);
    std::vector<data::Image> images;
    for (const auto& r : corpus.records) images.push_back(data::load_image(r, data_dir));
    auto report = ibq::pretrain_codebook(images, ae);
    fs::create_directories(out);
    json summary = report.summary();
    summary["config"] = ibq::to_json(ae);
    ibq::save_codebook(out / "codebook.kfc", report.codebook, summary);
    write_text(out / "report.json", summary.dump(2) + "\n");
    std::cout << "codebook " << ae.codebook_size << "x" << ae.code_dim << ": utilization " << report.utilization
              << ", perplexity " << report.perplexity << "\nwrote " << (out / "codebook.kfc").string() << "\n";
    return 0;
}

int cmd_train(const json& cfg) {
    const auto train_config = config::train(cfg);
    auto model_config = config::model(cfg);
    const auto codebook_path = cfg.at("train").at("codebook").get<std::string>();
    if (train_config.lambda2 > 0.0 && codebook_path.empty()) {
        throw UsageError("train: lambda2 > 0 requires a pretrained codebook; pass --codebook or set --lambda2 0");
    }
    const fs::path data_dir = required_path(cfg, "train", "data", "--data");
    const fs::path out = output_dir(cfg, "train", runs_root() / "train");

    trainer::TrainInputs inputs;
    inputs.corpus = data::read_corpus(data_dir);
    inputs.corpus_root = data_dir;
    inputs.model = model_config;
    if (!codebook_path.empty()) inputs.codebook = ibq::load_codebook(codebook_path);
    const auto text_init = cfg.at("train").at("text_init").get<std::string>();
    if (!text_init.empty()) inputs.text_init = load_checkpoint(text_init);
    inputs.config_snapshot = cfg;
    inputs.on_epoch = [&](const json& e) {
        std::cerr << "epoch " << e.at("epoch").get<std::size_t>() + 1 << "/" << train_config.epochs << "  total "
                  << e.at("total").get<double>() << "  itc_p " << e.at("itc_categorical").get<double>() << "  itc_m "
                  << e.at("itc_elite").get<double>() << "  ek_s " << e.at("ek_semantic").get<double>() << "  ek_a "
                  << e.at("ek_appearance").get<double>() << "\n";
    };
    auto result = trainer::train(inputs, train_config, out);
    std::cout << "trained " << result.steps << " steps\nwrote " << result.last_checkpoint.string() << " and "
              << result.best_checkpoint.string() << "\n";
    if (!result.codebook_checksum_before.empty()) std::cout << "codebook checksum " << result.codebook_checksum_after << " (unchanged)\n";
    return 0;
}

int cmd_eval(const json& cfg) {
    const auto task = config::eval_task(cfg);
    const fs::path run = required_path(cfg, "eval", "run", "--run");
    const fs::path data_dir = required_path(cfg, "eval", "data", "--data");
    std::string tag = eval::to_string(task.setting);
    if (task.setting == eval::Setting::few_shot) {
        tag += "-" + eval::to_string(task.few_shot.adapter) + "-" + std::to_string(task.few_shot.shots);
    }
    const fs::path out = output_dir(cfg, "eval", (fs::is_directory(run) ? run : run.parent_path()) / ("eval-" + tag));

    const auto model = trainer::load_model(trainer::find_weights(run));
    const auto corpus = data::read_corpus(data_dir);
    const auto report = eval::run_eval(task, corpus, data_dir, model);
    fs::create_directories(out);
    write_text(out / "report.txt", report.table());
    write_text(out / "report.json", report.to_json().dump(2) + "\n");
    std::cout << report.table();
    for (const auto& w : report.mean.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << "wrote " << (out / "report.json").string() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    const std::string footer = "\nConfig keys and defaults (override with --set section.key=value):\n" +
                               config::describe(config::defaults()) +
                               "\nKEEPFIT_RUNS_DIR sets the default output root (currently " + runs_root().string() +
                               ").\nExit codes: 0 success, 1 runtime failure, 2 usage or config error.";
    CLI::App app{"keepfit: knowledge-injection vision-language pretraining on synthetic fundus data"};
    app.footer(footer);
    app.require_subcommand(1);

    Command gen = make_command(app, "gen-data", "Generate a synthetic fundus corpus", footer);
    gen.flag("--out", "data.out", "Output corpus directory");
    gen.flag("--classes", "data.classes", "Number of classes");
    gen.flag("--elite", "data.elite", "Elite image-caption pairs");
    gen.flag("--categorical", "data.categorical", "Category-labelled images");
    gen.flag("--image-size", "data.image_size", "Image side in pixels");
    gen.flag("--seed", "data.seed", "Generator seed");

    Command text = make_command(app, "pretrain-text", "Masked-language pretraining of the text encoder", footer);
    text.flag("--corpus", "text.corpus", "Text file, one sentence per line");
    text.flag("--data", "text.data", "Corpus directory (vocabulary and generated sentences)");
    text.flag("--steps", "text.steps", "Optimizer steps");
    text.flag("--mask-frac", "text.mask_fraction", "Fraction of positions selected for masking");
    text.flag("--resume", "text.resume", "Text-encoder checkpoint to continue");
    text.flag("--seed", "text.seed", "Seed");
    text.flag("--out", "text.out", "Output directory");

    Command cb = make_command(app, "train-codebook", "Pretrain the quantization codebook", footer);
    cb.flag("--data", "codebook.data", "Corpus directory");
    cb.flag("--size", "codebook.size", "Number of codes K");
    cb.flag("--dim", "codebook.dim", "Code dimension D");
    cb.flag("--steps", "codebook.steps", "Optimizer steps");
    cb.flag("--seed", "codebook.seed", "Seed");
    cb.flag("--out", "codebook.out", "Output directory");

    Command tr = make_command(app, "train", "Knowledge-injection pretraining", footer);
    tr.flag("--data", "train.data", "Corpus directory");
    tr.flag("--codebook", "train.codebook", "Codebook file from train-codebook");
    tr.flag("--text-init", "train.text_init", "Text-encoder checkpoint from pretrain-text");
    tr.flag("--lambda1", "train.lambda1", "Semantic refinement weight");
    tr.flag("--lambda2", "train.lambda2", "Appearance refinement weight");
    tr.flag("--lr", "train.lr", "Peak learning rate");
    tr.flag("--epochs", "train.epochs", "Epochs over the categorical source");
    tr.flag("--batch-size", "train.batch_size", "Batch size per source");
    tr.flag("--seed", "train.seed", "Seed");
    tr.flag("--out", "train.out", "Run directory");

    Command ev = make_command(app, "eval", "Zero-shot, few-shot or linear-probe evaluation", footer);
    ev.flag("--run", "eval.run", "Run directory or weights file");
    ev.flag("--data", "eval.data", "Evaluation corpus directory");
    ev.flag("--setting", "eval.setting", "zero-shot | few-shot | linear-probe");
    ev.flag("--folds", "eval.folds", "Cross-validation folds");
    ev.flag("--shots", "eval.shots", "Support images per class (few-shot)");
    ev.flag("--adapter", "eval.adapter", "clip-adapter | tip-adapter | tip-adapter-f");
    ev.flag("--seed", "eval.seed", "Fold and support seed");
    ev.flag("--out", "eval.out", "Report directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen.app->parsed()) return cmd_gen_data(gen.resolve());
        if (text.app->parsed()) return cmd_pretrain_text(text.resolve());
        if (cb.app->parsed()) return cmd_train_codebook(cb.resolve());
        if (tr.app->parsed()) return cmd_train(tr.resolve());
        if (ev.app->parsed()) return cmd_eval(ev.resolve());
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
