// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// dmil: command-line driver for the interventional MIL pipeline.
//
//   dmil gen          --out DIR [--config FILE] [--set KEY=VALUE]... [--seed N]
//   dmil train-agg    --data DIR --agg {mean,max,attention} --out CKPT
//   dmil build-dict   --data DIR [--data DIR]... --mode MODE --k K [--ckpt CKPT] --out DICT
//   dmil train-ibmil  --data DIR --dict DICT --combinator C --l L [--learnable-dict] --out CKPT
//   dmil eval         --data DIR --ckpt CKPT [--dict DICT] [--knn] --out CSV
//   dmil gradcheck    --seed N
//   dmil run-all      [--config FILE] --seeds LIST --out DIR

#include "dmil/experiment.hpp"
#include "dmil/gradcheck_suite.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace dmil;

namespace {

struct TrainFlags {
    std::size_t epochs = 50;
    double lr = 1e-4;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    std::size_t hidden = 128;
    std::string optimizer = "adam";
    bool no_test_trace = false;
    std::string trace;

    void add_to(CLI::App* app) {
        app->add_option("--epochs", epochs, "training epochs")->capture_default_str();
        app->add_option("--lr", lr, "learning rate")->capture_default_str();
        app->add_option("--weight-decay", weight_decay, "L2 weight decay")->capture_default_str();
        app->add_option("--seed", seed, "seed for initialisation and bag order")->capture_default_str();
        app->add_option("--hidden", hidden, "attention width")->capture_default_str();
        app->add_option("--optimizer", optimizer, "adam or sgd")
            ->check(CLI::IsMember({"adam", "sgd"}))
            ->capture_default_str();
        app->add_flag("--no-test-trace", no_test_trace, "skip per-epoch test evaluation");
        app->add_option("--trace", trace, "trace TSV path (default: <out>.trace.tsv)");
    }

    TrainConfig config() const {
        TrainConfig c;
        c.epochs = epochs;
        c.lr = lr;
        c.weight_decay = weight_decay;
        c.seed = seed;
        c.hidden = hidden;
        c.optimizer = optimizer == "sgd" ? Optimizer::sgd : Optimizer::adam;
        c.trace_test_metrics = !no_test_trace;
        return c;
    }

    fs::path trace_path(const fs::path& out) const { return trace.empty() ? fs::path(out.string() + ".trace.tsv") : fs::path(trace); }
};

std::map<std::string, std::string> parse_overrides(const std::vector<std::string>& sets) {
    std::string text;
    for (const auto& s : sets) text += s + "\n";
    return parse_key_values(text, "--set");
}

void print_final(const TrainResult& r) {
    const auto& last = r.trace.back();
    std::printf("epochs=%zu train_loss=%.6f", r.trace.size(), last.train_loss);
    if (last.test_accuracy) std::printf(" test_acc=%.4f", *last.test_accuracy);
    if (last.test_auc) std::printf(" test_auc=%.4f", *last.test_auc);
    std::printf("\n");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Interventional multi-instance learning on bag feature stores"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate a synthetic feature store");
    std::string gen_config, gen_out;
    std::vector<std::string> gen_sets;
    std::optional<std::uint64_t> gen_seed;
    gen->add_option("--config", gen_config, "flat key=value generator config")->check(CLI::ExistingFile);
    gen->add_option("--set", gen_sets, "KEY=VALUE override (repeatable)");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--out", gen_out, "output directory")->required();

    // train-agg
    auto* agg = app.add_subcommand("train-agg", "train a baseline aggregator and classifier");
    std::string agg_data, agg_kind = "attention", agg_out;
    TrainFlags agg_flags;
    agg->add_option("--data", agg_data, "feature store")->required()->check(CLI::ExistingDirectory);
    agg->add_option("--agg", agg_kind, "pooling")->check(CLI::IsMember({"mean", "max", "attention"}))->capture_default_str();
    agg->add_option("--out", agg_out, "checkpoint path")->required();
    agg_flags.add_to(agg);

    // build-dict
    auto* bd = app.add_subcommand("build-dict", "cluster bag features into a confounder dictionary");
    std::vector<std::string> bd_data;
    std::string bd_mode = "attention", bd_ckpt, bd_out;
    std::size_t bd_k = 8;
    std::uint64_t bd_seed = 0;
    bd->add_option("--data", bd_data, "feature store (repeat to combine datasets)")->required()->check(CLI::ExistingDirectory);
    bd->add_option("--mode", bd_mode, "bag feature source")
        ->check(CLI::IsMember({"attention", "mean", "max", "instance", "class-specific"}))
        ->capture_default_str();
    bd->add_option("--k", bd_k, "number of strata")->capture_default_str();
    bd->add_option("--ckpt", bd_ckpt, "Stage-2 checkpoint (attention mode)")->check(CLI::ExistingFile);
    bd->add_option("--seed", bd_seed, "k-means seed")->capture_default_str();
    bd->add_option("--out", bd_out, "dictionary path")->required();

    // train-ibmil
    auto* ti = app.add_subcommand("train-ibmil", "interventional training against a dictionary");
    std::string ti_data, ti_dict, ti_comb = "concat", ti_agg = "attention", ti_out, ti_init;
    std::size_t ti_l = 128, ti_k = 0;
    bool ti_learnable = false;
    TrainFlags ti_flags;
    ti->add_option("--data", ti_data, "feature store")->required()->check(CLI::ExistingDirectory);
    ti->add_option("--dict", ti_dict, "confounder dictionary")->required()->check(CLI::ExistingFile);
    ti->add_option("--combinator", ti_comb, "how the confounder feature joins the bag feature")
        ->check(CLI::IsMember({"concat", "add", "sub"}))
        ->capture_default_str();
    ti->add_option("--l", ti_l, "joint attention width (clamped to d)")->capture_default_str();
    ti->add_option("--k", ti_k, "expected dictionary size (0 = any)")->capture_default_str();
    ti->add_option("--agg", ti_agg, "pooling")->check(CLI::IsMember({"mean", "max", "attention"}))->capture_default_str();
    ti->add_flag("--learnable-dict", ti_learnable, "train the strata with the model");
    ti->add_option("--init-ckpt", ti_init, "start the aggregator from this Stage-2 checkpoint")->check(CLI::ExistingFile);
    ti->add_option("--out", ti_out, "checkpoint path")->required();
    ti_flags.add_to(ti);

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint or a class-specific dictionary");
    std::string ev_data, ev_ckpt, ev_dict, ev_out, ev_split = "test", ev_run_id, ev_method, ev_tag;
    bool ev_knn = false;
    std::uint64_t ev_seed = 0;
    ev->add_option("--data", ev_data, "feature store")->required()->check(CLI::ExistingDirectory);
    ev->add_option("--ckpt", ev_ckpt, "checkpoint")->check(CLI::ExistingFile);
    ev->add_option("--dict", ev_dict, "confounder dictionary")->check(CLI::ExistingFile);
    ev->add_flag("--knn", ev_knn, "classify by nearest class-specific stratum");
    ev->add_option("--split", ev_split, "split to score")->check(CLI::IsMember({"train", "test"}))->capture_default_str();
    ev->add_option("--run-id", ev_run_id, "run_id column");
    ev->add_option("--method", ev_method, "method column");
    ev->add_option("--tag", ev_tag, "extractor_tag column");
    ev->add_option("--seed", ev_seed, "seed column");
    ev->add_option("--out", ev_out, "CSV path")->required();

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the training graphs");
    std::uint64_t gc_seed = 0;
    std::size_t gc_cases = 20;
    gc->add_option("--seed", gc_seed, "seed for the random configurations")->capture_default_str();
    gc->add_option("--cases", gc_cases, "number of configurations")->capture_default_str();

    // run-all
    auto* ra = app.add_subcommand("run-all", "full benchmark over a list of seeds");
    std::string ra_config, ra_seeds = "0-4", ra_out;
    ra->add_option("--config", ra_config, "flat key=value benchmark config")->check(CLI::ExistingFile);
    ra->add_option("--seeds", ra_seeds, "seed list, e.g. 0,1,2 or 0-4")
        ->capture_default_str()
        ->check([](const std::string& s) -> std::string {
            try {
                parse_seed_list(s);
            } catch (const std::invalid_argument& e) {
                return e.what();
            }
            return {};
        });
    ra->add_option("--out", ra_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*gen) {
            GenConfig cfg;
            if (!gen_config.empty()) {
                const auto bytes = read_file(gen_config);
                cfg.apply(parse_key_values(std::string_view(bytes.data(), bytes.size()), gen_config));
            }
            cfg.apply(parse_overrides(gen_sets));
            if (gen_seed) cfg.seed = *gen_seed;
            cfg.validate();
            const auto g = generate_with_truth(cfg);
            write_feature_store(g.dataset, gen_out);
            std::string summary;
            for (Split sp : {Split::train, Split::test}) {
                if (g.dataset.split(sp).empty()) continue;
                summary += "[" + to_string(sp) + "]\n" + summarize(g.dataset, sp, &g.key_counts).to_text();
            }
            write_text(fs::path(gen_out) / "summary.txt", summary);
            std::printf("wrote %zu bags (d=%zu) to %s\n", g.dataset.bags.size(), g.dataset.d, gen_out.c_str());
        } else if (*agg) {
            const Dataset ds = read_feature_store(agg_data, true);
            const auto r = train_stage2(ds, parse_pooling(agg_kind), agg_flags.config());
            save_model(r.model, agg_out);
            write_text(agg_flags.trace_path(agg_out), trace_tsv(r.trace));
            print_final(r);
        } else if (*bd) {
            std::vector<Dataset> stores;
            for (const auto& d : bd_data) stores.push_back(read_feature_store(d, true));
            std::vector<const Dataset*> ptrs;
            for (const auto& s : stores) ptrs.push_back(&s);
            DictionaryOptions opt;
            opt.mode = parse_dictionary_mode(bd_mode);
            opt.k = bd_k;
            opt.seed = bd_seed;
            std::optional<ModelParams> stage2;
            if (!bd_ckpt.empty()) stage2 = load_model(bd_ckpt);
            const auto dict = build_dictionary(ptrs, opt, stage2 ? &*stage2 : nullptr);
            save_dictionary(dict, bd_out);
            std::printf("K=%zu d=%zu mode=%s\n", dict.k(), dict.d(), to_string(dict.build_mode).c_str());
        } else if (*ti) {
            const Dataset ds = read_feature_store(ti_data, true);
            const auto dict = load_dictionary(ti_dict);
            TrainConfig cfg = ti_flags.config();
            cfg.combinator = parse_combinator(ti_comb);
            cfg.l = ti_l;
            cfg.k = ti_k;
            cfg.learnable_confounders = ti_learnable;
            std::optional<ModelParams> warm;
            if (!ti_init.empty()) warm = load_model(ti_init);
            const auto r = train_stage3(ds, dict, parse_pooling(ti_agg), cfg, warm ? &*warm : nullptr);
            save_model(r.model, ti_out);
            write_text(ti_flags.trace_path(ti_out), trace_tsv(r.trace));
            print_final(r);
        } else if (*ev) {
            const Dataset ds = read_feature_store(ev_data, true);
            const Split split = parse_split(ev_split);
            std::optional<ConfounderDictionary> dict;
            if (!ev_dict.empty()) dict = load_dictionary(ev_dict);
            std::optional<ModelParams> model;
            if (!ev_ckpt.empty()) model = load_model(ev_ckpt);

            MetricsReport rep;
            Evaluation result;
            if (ev_knn) {
                if (!dict) throw std::invalid_argument("eval --knn needs --dict");
                // Bag features come from the checkpoint's aggregator when one is given.
                const auto bags = ds.split(split);
                if (bags.empty()) throw std::invalid_argument("eval: split has no bags");
                std::vector<std::size_t> truth;
                std::vector<int> binary;
                for (const auto* b : bags) {
                    const std::size_t cls = knn_classify(bag_feature(*b, model ? &*model : nullptr, Pooling::mean), *dict);
                    result.predicted.push_back(cls);
                    result.positive_scores.push_back(cls == 1 ? 1.0 : 0.0);
                    truth.push_back(b->label);
                    binary.push_back(b->label == 1 ? 1 : 0);
                }
                result.confusion = confusion_metrics(result.predicted, truth, ds.num_classes);
                const bool both = std::count(binary.begin(), binary.end(), 1) > 0 &&
                                  std::count(binary.begin(), binary.end(), 0) > 0;
                if (ds.num_classes == 2 && both) result.auc = auc(result.positive_scores, binary);
                rep.k = dict->k();
            } else {
                if (!model) throw std::invalid_argument("eval needs --ckpt (or --knn with --dict)");
                result = evaluate(*model, ds, split, dict ? &*dict : nullptr);
                if (model->intervention) {
                    rep.k = model->learned_strata ? model->learned_strata->rows() : (dict ? dict->k() : 0);
                    rep.l = model->intervention->l();
                    rep.combinator = to_string(model->intervention->combinator);
                }
            }
            rep.method = !ev_method.empty() ? ev_method : ev_knn ? "knn" : model && model->intervention ? "ibmil" : "baseline";
            rep.extractor_tag = !ev_tag.empty() ? ev_tag
                                : dict          ? to_string(dict->build_mode)
                                : model         ? to_string(model->aggregator.pooling)
                                                : "none";
            if (rep.combinator.empty()) rep.combinator = "none";
            rep.seed = ev_seed;
            rep.run_id = !ev_run_id.empty() ? ev_run_id : rep.method + "-" + rep.extractor_tag + "-s" + std::to_string(ev_seed);
            rep.precision = result.confusion.macro_precision;
            rep.recall = result.confusion.macro_recall;
            rep.accuracy = result.confusion.accuracy;
            rep.auc = result.auc.value_or(std::nan(""));
            write_text(ev_out, MetricsReport::csv_header() + "\n" + rep.csv_row() + "\n");
            std::printf("accuracy=%.4f macro_precision=%.4f macro_recall=%.4f auc=%.4f\n", rep.accuracy, rep.precision,
                        rep.recall, rep.auc);
        } else if (*gc) {
            const auto r = run_gradcheck_suite(gc_seed, gc_cases);
            for (const auto& [c, rep] : r.cases) {
                std::printf("%-60s coords=%-5zu max_rel_err=%.3e\n", c.describe().c_str(), rep.coordinates,
                            rep.max_relative_error);
            }
            std::printf("max relative error: %.3e\n", r.max_relative_error);
            return r.max_relative_error < 1e-4 ? 0 : 1;
        } else if (*ra) {
            ExperimentConfig cfg;
            if (!ra_config.empty()) cfg = load_experiment_config(ra_config);
            const auto seeds = parse_seed_list(ra_seeds);
            const auto result = run_all(cfg, seeds, thread_cap());
            write_run_all(result, ra_out);
            for (const auto& e : result.errors) std::cerr << "error: " << e << "\n";
            std::printf("%zu runs completed, %zu failed; results in %s\n", result.completed.size(),
                        result.errors.size(), (fs::path(ra_out) / "results.csv").c_str());
            return result.ok() ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
