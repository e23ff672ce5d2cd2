#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "skiptune/csv.hpp"
#include "skiptune/errors.hpp"
#include "skiptune/harness.hpp"

namespace skiptune {

namespace fs = std::filesystem;

namespace {

// Fixed draw for per-configuration held-out losses, shared by every row of a
// sweep so rows differ only in the skip profile.
constexpr std::uint64_t kLossSeed = 0x5eedULL;
// Noise stream for the Gaussian reference in the inversion MMD test; distinct
// from the sampler's stream 0.
constexpr std::uint64_t kReferenceNoiseStream = 7;

class Run {
public:
    Run(std::string command, const ExperimentConfig& cfg, std::string out_dir)
        : cfg_(cfg), dir_(std::move(out_dir)), start_(std::chrono::steady_clock::now()) {
        cfg_.validate();
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec || !fs::is_directory(dir_)) throw IoError("cannot create output directory " + dir_);
        record_.command = std::move(command);
        record_.seed = cfg_.u64("run", "seed");
        const std::string ini = cfg_.to_ini();
        record_.spec_hash = git_blob_sha1({reinterpret_cast<const unsigned char*>(ini.data()), ini.size()});
        const std::string name = record_.command + ".config.ini";
        cfg_.write(path(name));
        record_.outputs.push_back(name);
    }

    const ExperimentConfig& cfg() const { return cfg_; }
    std::string path(const std::string& name) const { return (fs::path(dir_) / name).string(); }
    std::size_t workers() const { return std::max<std::size_t>(1, cfg_.count("run", "workers")); }
    std::size_t chunk() const { return cfg_.count("run", "chunk"); }

    std::string checkpoint_path() const {
        const auto& p = cfg_.get("model", "checkpoint");
        return p.empty() ? path("model.ckpt") : p;
    }
    std::string classifier_path() const {
        const auto& p = cfg_.get("classifier", "path");
        return p.empty() ? path("classifier.bin") : p;
    }

    MiniUNet load_model() {
        const std::string p = checkpoint_path();
        if (!fs::exists(p)) throw ConfigError("checkpoint not found: " + p);
        record_.checkpoint_hash = git_blob_sha1_file(p);
        MiniUNet net = MiniUNet::load(p);
        net.set_requires_grad(false);
        return net;
    }

    Classifier load_classifier() {
        const std::string p = classifier_path();
        if (!fs::exists(p)) throw ConfigError("classifier not found: " + p + " (run train-classifier first)");
        record_.classifier_hash = git_blob_sha1_file(p);
        Classifier clf = Classifier::load(p);
        clf.set_requires_grad(false);
        return clf;
    }

    // Output files go into the record; the seed is a column of every table.
    void csv(const std::string& name, CsvTable table) {
        table.header.insert(table.header.begin(), "seed");
        const std::string seed = std::to_string(record_.seed);
        for (auto& row : table.rows) row.insert(row.begin(), seed);
        write_csv(path(name), table);
        record_.outputs.push_back(name);
    }
    void output(const std::string& name) { record_.outputs.push_back(name); }
    void summary(const std::string& key, const std::string& value) { record_.summary[key] = value; }
    void summary(const std::string& key, double value) { record_.summary[key] = format_double(value); }

    RunRecord finish() {
        record_.wall_clock_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        const std::string name = record_.command + ".run.json";
        record_.outputs.push_back(name);
        std::ofstream out(path(name));
        out << record_.to_json();
        if (!out) throw IoError("cannot write " + path(name));
        return record_;
    }

private:
    ExperimentConfig cfg_;
    std::string dir_;
    std::chrono::steady_clock::time_point start_;
    RunRecord record_;
};

NoiseSchedule model_schedule(const MiniUNet& net) {
    return NoiseSchedule{net.config().sigma_min, net.config().sigma_max, 7.0};
}

Shape item_shape(const MiniUNet& net) {
    const auto& c = net.config();
    return {c.input_channels, c.image_size, c.image_size};
}

KernelSpec metric_kernel(const ExperimentConfig& cfg) {
    KernelSpec k;
    k.kind = parse_kernel_kind(cfg.get("metrics", "kernel"));
    return k;
}

std::size_t nfe(const SamplerConfig& s) { return s.solver == Solver::heun ? 2 * s.steps - 1 : s.steps; }

// Shared state of the sampling-and-scoring commands.
struct Scorer {
    const MiniUNet& net;
    const Classifier& clf;
    Tensor reference_features;
    KernelSpec kernel;
    std::size_t count, chunk;

    SampleScores score(const DenoiserFactory& model, const SamplerConfig& sampler) const {
        const Tensor samples = generate_samples(model, sampler, model_schedule(net), item_shape(net), count, chunk);
        return score_samples(clf, samples, reference_features, kernel, chunk);
    }
};

Scorer make_scorer(Run& run, const MiniUNet& net, const Classifier& clf) {
    const Dataset reference = reference_dataset(run.cfg());
    return Scorer{net, clf, classifier_features(clf, reference.images, run.chunk()), metric_kernel(run.cfg()),
                  run.cfg().count("sampler", "count"), run.chunk()};
}

double profile_loss(const MiniUNet& net, const SkipProfile* profile, const Dataset& heldout, const TrainConfig& tc) {
    return heldout_loss(unet_denoiser(net, profile), heldout, tc, kLossSeed);
}

void require_nonempty(const std::vector<double>& v, const char* what) {
    if (v.empty()) throw ConfigError(std::string(what) + " must not be empty");
}
void require_nonempty(const std::vector<std::size_t>& v, const char* what) {
    if (v.empty()) throw ConfigError(std::string(what) + " must not be empty");
}

// ---------------------------------------------------------------------------

RunRecord cmd_gen_data(Run& run) {
    const auto& cfg = run.cfg();
    const Dataset train = train_dataset(cfg), heldout = heldout_dataset(cfg);
    save_dataset(train, run.path("train.bin"));
    save_dataset(heldout, run.path("heldout.bin"));
    run.output("train.bin");
    run.output("heldout.bin");
    run.summary("train_count", std::to_string(train.size()));
    run.summary("heldout_count", std::to_string(heldout.size()));
    return run.finish();
}

RunRecord cmd_train(Run& run) {
    const auto& cfg = run.cfg();
    const Dataset train = train_dataset(cfg), heldout = heldout_dataset(cfg);
    MiniUNet net(unet_config(cfg), cfg.u64("model", "init_seed"));
    const TrainReport report = skiptune::train(net, train, heldout, train_config(cfg));
    net.save(run.path("model.ckpt"));
    run.output("model.ckpt");
    CsvTable t{"train_loss", 1, {"step", "loss"}, {}};
    for (std::size_t i = 0; i < report.losses.size(); ++i)
        t.rows.push_back({std::to_string(i), format_double(report.losses[i])});
    run.csv("train_loss.csv", std::move(t));
    run.summary("parameters", std::to_string(net.parameter_count()));
    run.summary("heldout_initial", report.heldout_initial);
    run.summary("heldout_final", report.heldout_final);
    run.summary("heldout_constant_baseline", report.heldout_constant_baseline);
    return run.finish();
}

RunRecord cmd_train_classifier(Run& run) {
    const auto& cfg = run.cfg();
    const Dataset train = train_dataset(cfg), heldout = heldout_dataset(cfg);
    if (!train.labelled()) throw ConfigError("classifier training needs a labelled dataset");
    ClassifierConfig cc = classifier_config(cfg);
    cc.num_classes = train.num_classes();
    cc.input_channels = train.images.dim(1);
    ClassifierReport report;
    const Classifier clf = train_classifier(train, heldout, cc, &report);
    const double min_acc = cfg.real("classifier", "min_accuracy");
    run.summary("heldout_accuracy", report.heldout_accuracy);
    if (!(report.heldout_accuracy >= min_acc))
        throw NumericError("classifier held-out accuracy " + format_double(report.heldout_accuracy) + " below " +
                           format_double(min_acc));
    clf.save(run.path("classifier.bin"));
    run.output("classifier.bin");
    CsvTable t{"classifier_loss", 1, {"step", "loss"}, {}};
    for (std::size_t i = 0; i < report.losses.size(); ++i)
        t.rows.push_back({std::to_string(i), format_double(report.losses[i])});
    run.csv("classifier_loss.csv", std::move(t));
    return run.finish();
}

RunRecord cmd_sample(Run& run) {
    const auto& cfg = run.cfg();
    const MiniUNet net = run.load_model();
    const SamplerConfig sampler = sampler_config(cfg);
    const SkipProfile profile = profile_config(cfg, net.skip_count());
    const std::size_t count = cfg.count("sampler", "count");
    const Tensor samples =
        generate_samples(sampler_model(net, &profile), sampler, model_schedule(net), item_shape(net), count,
                         run.chunk());
    for (double v : samples.data())
        if (!std::isfinite(v)) throw NumericError("sampling produced non-finite values");
    save_dataset(make_dataset("samples", samples, {}, sampler.seed), run.path("samples.bin"));
    run.output("samples.bin");
    run.summary("count", std::to_string(count));
    run.summary("nfe", std::to_string(nfe(sampler)));
    return run.finish();
}

RunRecord cmd_invert(Run& run) {
    const auto& cfg = run.cfg();
    const MiniUNet net = run.load_model();
    const Dataset heldout = heldout_dataset(cfg);
    const SamplerConfig sampler = sampler_config(cfg);
    if (!sampler.churn.is_zero()) throw ConfigError("inversion needs the deterministic sampler (tau = 0)");
    const SkipProfile profile = profile_config(cfg, net.skip_count());
    const std::size_t count = std::min(cfg.count("sampler", "count"), heldout.size());
    const std::size_t item = heldout.images.numel() / std::max<std::size_t>(1, heldout.size());
    const NoiseSchedule schedule = model_schedule(net);
    const bool conditional = net.config().num_classes > 0;
    CsvTable t{"inversion", 1, {"item", "relative_l2"}, {}};
    std::size_t within = 0;
    for (std::size_t first = 0; first < count; first += run.chunk()) {
        const std::size_t n = std::min(run.chunk(), count - first);
        const Dataset part = heldout.slice(first, first + n);
        const BatchDenoiser d = make_batch_denoiser(net, &profile, conditional ? part.labels : std::vector<int>{});
        const Trajectory latent = invert(d, sampler, schedule, part.images);
        const Trajectory back = sample_ode(d, sampler, schedule, latent.final);
        for (std::size_t b = 0; b < n; ++b) {
            double num = 0.0, den = 0.0;
            for (std::size_t i = 0; i < item; ++i) {
                const double x = part.images.data()[b * item + i];
                const double r = back.final.data()[b * item + i] - x;
                num += r * r;
                den += x * x;
            }
            const double rel = std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
            if (!std::isfinite(rel)) throw NumericError("inversion produced non-finite values");
            within += rel <= 1e-2;
            t.rows.push_back({std::to_string(first + b), format_double(rel)});
        }
    }
    run.csv("inversion.csv", std::move(t));
    run.summary("count", std::to_string(count));
    run.summary("fraction_within_1e-2", static_cast<double>(within) / static_cast<double>(std::max<std::size_t>(1, count)));
    return run.finish();
}

RunRecord cmd_sweep_rho(Run& run) {
    const auto& cfg = run.cfg();
    const MiniUNet net = run.load_model();
    const Classifier clf = run.load_classifier();
    const Scorer scorer = make_scorer(run, net, clf);
    const Dataset heldout = heldout_dataset(cfg);
    const TrainConfig tc = train_config(cfg);
    const auto rhos = cfg.reals("sweep", "rhos");
    const auto steps = cfg.counts("sweep", "steps");
    require_nonempty(rhos, "[sweep] rhos");
    require_nonempty(steps, "[sweep] steps");
    const SamplerConfig base = sampler_config(cfg);
    const SkipProfile templ = profile_config(cfg, net.skip_count());

    // Job j < steps.size() is the baseline for steps[j]; the rest are rho x steps.
    struct Job {
        std::optional<double> rho;
        std::size_t steps;
    };
    std::vector<Job> jobs;
    for (std::size_t n : steps) jobs.push_back({std::nullopt, n});
    for (double r : rhos)
        for (std::size_t n : steps) jobs.push_back({r, n});

    struct Row {
        SampleScores scores;
        double loss = 0.0;
    };
    const auto results = parallel_map<Row>(jobs.size(), run.workers(), [&](std::size_t j) {
        SamplerConfig s = base;
        s.steps = jobs[j].steps;
        std::optional<SkipProfile> p;
        if (jobs[j].rho) {
            p = templ;
            p->rho_bottom = *jobs[j].rho;
            p->rho_top = *jobs[j].rho;
            p->validate();
        }
        const SkipProfile* pp = p ? &*p : nullptr;
        return Row{scorer.score(sampler_model(net, pp), s), profile_loss(net, pp, heldout, tc)};
    });

    CsvTable t{"rho_sweep", 1,
               {"profile", "rho_bottom", "rho_top", "steps", "nfe", "toy_fid", "immd", "loss_pixel"}, {}};
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        SamplerConfig s = base;
        s.steps = jobs[j].steps;
        const double rb = jobs[j].rho.value_or(1.0);
        const double rt = jobs[j].rho.value_or(1.0);
        t.rows.push_back({jobs[j].rho ? "skip_tuned" : "baseline", format_double(rb), format_double(rt),
                          std::to_string(s.steps), std::to_string(nfe(s)), format_double(results[j].scores.toy_fid),
                          format_double(results[j].scores.immd), format_double(results[j].loss)});
    }
    run.csv("rho_sweep.csv", std::move(t));
    run.summary("rows", std::to_string(jobs.size()));
    return run.finish();
}

RunRecord cmd_window_search(Run& run) {
    const auto& cfg = run.cfg();
    const MiniUNet net = run.load_model();
    const Classifier clf = run.load_classifier();
    const Scorer scorer = make_scorer(run, net, clf);
    const std::size_t n_windows = cfg.count("sweep", "windows"), grid = cfg.count("sweep", "window_grid_steps");
    if (n_windows == 0 || grid % n_windows != 0)
        throw ConfigError("[sweep] window_grid_steps " + std::to_string(grid) + " is not divisible into " +
                          std::to_string(n_windows) + " windows");
    const auto windows = window_partition(model_schedule(net), n_windows, grid / n_windows);
    const SamplerConfig sampler = sampler_config(cfg);
    SkipProfile templ = profile_config(cfg, net.skip_count());
    templ.rho_bottom = templ.rho_top = cfg.real("sweep", "window_rho");
    templ.validate();

    const auto results = parallel_map<SampleScores>(windows.size() + 1, run.workers(), [&](std::size_t j) {
        if (j == 0) return scorer.score(sampler_model(net, nullptr), sampler);
        SkipProfile p = templ;
        p.windows = std::vector<SigmaWindow>{windows[j - 1]};
        return scorer.score(sampler_model(net, &p), sampler);
    });

    CsvTable t{"window_search", 1, {"window_index", "sigma_low", "sigma_high", "rho", "toy_fid", "immd"}, {}};
    t.rows.push_back({"baseline", "", "", format_double(1.0), format_double(results[0].toy_fid),
                      format_double(results[0].immd)});
    for (std::size_t w = 0; w < windows.size(); ++w)
        t.rows.push_back({std::to_string(w), format_double(windows[w].low), format_double(windows[w].high),
                          format_double(templ.rho_bottom), format_double(results[w + 1].toy_fid),
                          format_double(results[w + 1].immd)});
    run.csv("window_search.csv", std::move(t));
    run.summary("windows", std::to_string(windows.size()));
    return run.finish();
}

RunRecord cmd_stochastic_grid(Run& run) {
    const auto& cfg = run.cfg();
    const MiniUNet net = run.load_model();
    const Classifier clf = run.load_classifier();
    const Scorer scorer = make_scorer(run, net, clf);
    const auto rhos = cfg.reals("sweep", "stochastic_rhos");
    const auto taus = cfg.reals("sweep", "taus");
    require_nonempty(rhos, "[sweep] stochastic_rhos");
    require_nonempty(taus, "[sweep] taus");
    SamplerConfig base = sampler_config(cfg);
    base.solver = Solver::euler;
    const SkipProfile templ = profile_config(cfg, net.skip_count());

    const auto results = parallel_map<SampleScores>(rhos.size() * taus.size(), run.workers(), [&](std::size_t j) {
        SkipProfile p = templ;
        p.rho_bottom = p.rho_top = rhos[j / taus.size()];
        p.validate();
        SamplerConfig s = base;
        s.churn = ChurnSchedule::constant(taus[j % taus.size()]);
        return scorer.score(sampler_model(net, &p), s);
    });

    CsvTable t{"stochastic_grid", 1, {"rho", "tau", "steps", "toy_fid", "immd"}, {}};
    for (std::size_t j = 0; j < results.size(); ++j)
        t.rows.push_back({format_double(rhos[j / taus.size()]), format_double(taus[j % taus.size()]),
                          std::to_string(base.steps), format_double(results[j].toy_fid),
                          format_double(results[j].immd)});
    run.csv("stochastic_grid.csv", std::move(t));
    run.summary("rows", std::to_string(results.size()));
    return run.finish();
}

FeatureExtractor feature_extractor(const Classifier& clf) {
    return [&clf](const Tensor& x) { return clf.features(x); };
}

RunRecord cmd_finetune_rho(Run& run) {
    const auto& cfg = run.cfg();
    const MiniUNet net = run.load_model();
    const Classifier clf = run.load_classifier();
    const Scorer scorer = make_scorer(run, net, clf);
    const Dataset train = train_dataset(cfg);
    const SamplerConfig sampler = sampler_config(cfg);
    const TrainConfig tc = train_config(cfg);
    const auto variants = cfg.words("finetune", "variants");
    if (variants.empty()) throw ConfigError("[finetune] variants must not be empty");
    std::vector<RhoParam> params;
    for (const auto& v : variants) params.push_back(parse_rho_param(v));

    RhoFinetuneConfig rc;
    rc.steps = cfg.count("finetune", "steps");
    rc.batch_size = cfg.count("finetune", "batch");
    rc.lr = cfg.real("finetune", "lr");
    rc.init_rho = cfg.real("finetune", "init_rho");
    rc.mode = parse_scaling_mode(cfg.get("profile", "mode"));
    rc.seed = cfg.u64("run", "seed");
    rc.loss = tc.loss;
    rc.loss.feature_extractor = feature_extractor(clf);
    rc.schedule = tc.schedule;

    const SampleScores before_base = scorer.score(sampler_model(net, nullptr), sampler);
    const std::size_t k = net.skip_count();
    const SampleScores before_init = scorer.score(
        sampler_model(net, Tensor::full({k}, rc.init_rho), rc.mode), sampler);

    CsvTable report{"finetune_rho", 1,
                    {"variant", "steps_run", "diverged", "diverged_step", "toy_fid_baseline", "toy_fid_initial",
                     "toy_fid_after", "immd_after", "final_loss", "rho"}, {}};
    CsvTable trace{"finetune_rho_trace", 1, {"variant", "step", "loss", "layer", "rho"}, {}};
    for (RhoParam param : params) {
        rc.param = param;
        const RhoFinetuneResult r = finetune_rho(net, train, rc);
        const SampleScores after =
            scorer.score(sampler_model(net, Tensor::from({k}, r.rho), rc.mode), sampler);
        std::string rho_text;
        for (std::size_t i = 0; i < r.rho.size(); ++i) rho_text += (i ? " " : "") + format_double(r.rho[i]);
        report.rows.push_back({to_string(param), std::to_string(r.losses.size()), r.diverged ? "1" : "0",
                               r.diverged ? std::to_string(r.diverged_step) : "",
                               format_double(before_base.toy_fid), format_double(before_init.toy_fid),
                               format_double(after.toy_fid), format_double(after.immd),
                               r.losses.empty() ? "" : format_double(r.losses.back()), rho_text});
        for (std::size_t s = 0; s < r.losses.size(); ++s)
            for (std::size_t i = 0; i < k; ++i)
                trace.rows.push_back({to_string(param), std::to_string(s), format_double(r.losses[s]),
                                      std::to_string(i), format_double(r.rho_trace[s][i])});
        CsvTable coeffs{"skip_coefficients", 1, {"layer", "rho"}, {}};
        for (std::size_t i = 0; i < k; ++i) coeffs.rows.push_back({std::to_string(i), format_double(r.rho[i])});
        run.csv("rho_" + to_string(param) + ".csv", std::move(coeffs));
        run.summary(to_string(param) + "_toy_fid_after", after.toy_fid);
        if (r.diverged) run.summary(to_string(param) + "_diverged_step", std::to_string(r.diverged_step));
    }
    run.csv("finetune_rho.csv", std::move(report));
    run.csv("finetune_rho_trace.csv", std::move(trace));
    run.summary("toy_fid_baseline", before_base.toy_fid);
    return run.finish();
}

RunRecord cmd_finetune_full(Run& run) {
    const auto& cfg = run.cfg();
    MiniUNet net = run.load_model();
    const Classifier clf = run.load_classifier();
    const Scorer scorer = make_scorer(run, net, clf);
    const Dataset train = train_dataset(cfg), heldout = heldout_dataset(cfg);
    const SamplerConfig sampler = sampler_config(cfg);
    TrainConfig tc = train_config(cfg);
    tc.lr = cfg.real("finetune", "full_lr");
    tc.batch_size = cfg.count("finetune", "batch");
    tc.warmup_steps = 0;
    tc.loss.feature_extractor = feature_extractor(clf);
    tc.loss.hybrid_feature_weight = cfg.real("finetune", "hybrid_weight");
    const auto milestones = cfg.counts("finetune", "milestones");
    require_nonempty(milestones, "[finetune] milestones");
    const std::size_t per_step = std::min(tc.batch_size, train.size());
    for (std::size_t i = 0; i < milestones.size(); ++i) {
        if (milestones[i] % per_step != 0)
            throw ConfigError("[finetune] milestone " + std::to_string(milestones[i]) +
                              " is not a multiple of the batch size " + std::to_string(per_step));
        if (i > 0 && milestones[i] <= milestones[i - 1])
            throw ConfigError("[finetune] milestones must be strictly increasing");
    }

    Trainer trainer(net, train, tc);
    CsvTable t{"finetune_full", 1, {"milestone", "samples", "loss_pixel", "toy_fid", "immd", "checkpoint"}, {}};
    for (std::size_t i = 0; i < milestones.size(); ++i) {
        const std::size_t target_steps = milestones[i] / per_step;
        try {
            trainer.run(target_steps - trainer.steps_done());
        } catch (const NumericError& e) {
            throw NumericError("full fine-tuning diverged before milestone " + std::to_string(i) + ": " + e.what());
        }
        const double loss = heldout_loss(unet_denoiser(net), heldout, tc, kLossSeed);
        if (!std::isfinite(loss)) throw NumericError("non-finite held-out loss at milestone " + std::to_string(i));
        SampleScores scores;
        try {
            scores = scorer.score(sampler_model(net, nullptr), sampler);
        } catch (const NumericError& e) {
            throw NumericError("milestone " + std::to_string(i) + ": " + e.what());
        }
        const std::string ckpt = "finetune_full_" + std::to_string(i) + ".ckpt";
        net.save(run.path(ckpt));
        run.output(ckpt);
        t.rows.push_back({std::to_string(i), std::to_string(trainer.samples_seen()), format_double(loss),
                          format_double(scores.toy_fid), format_double(scores.immd), ckpt});
    }
    run.csv("finetune_full.csv", std::move(t));
    run.summary("milestones", std::to_string(milestones.size()));
    return run.finish();
}

RunRecord cmd_metrics(Run& run) {
    const auto& cfg = run.cfg();
    const MiniUNet net = run.load_model();
    const Classifier clf = run.load_classifier();
    const Dataset heldout = heldout_dataset(cfg), reference = reference_dataset(cfg);
    if (heldout.size() == 0) throw ConfigError("metrics need a non-empty held-out set");
    const SamplerConfig sampler = sampler_config(cfg);
    const SkipProfile profile = profile_config(cfg, net.skip_count());
    const TrainConfig tc = train_config(cfg);
    const double probe_sigma = cfg.real("metrics", "probe_sigma");
    const std::size_t probe_size = cfg.count("metrics", "probe_batch");
    if (probe_size == 0) throw ConfigError("[metrics] probe_batch must be positive");
    const auto scal = parse_probe_scalarization(cfg.get("metrics", "probe_scalarization"));
    const bool conditional = net.config().num_classes > 0;
    const std::uint64_t seed = cfg.u64("run", "seed");

    MetricReport report;
    {
        const ProbeBatch pb = probe_batch(heldout, probe_size, probe_sigma, seed, 0, conditional);
        {
            NoGradGuard ng;
            const std::vector<double> sigmas(probe_size, probe_sigma);
            const PropRatios pr = prop_ratios(net.forward(pb.x, sigmas, &profile, true, pb.labels).taps);
            report.prop = pr.ratios;
            report.avg_prop = pr.average;
        }
        report.gradient_norm = gradient_norm_probe(net, pb.x, probe_sigma, &profile, scal, pb.labels);
    }

    {
        const std::size_t points = cfg.count("metrics", "loss_points");
        const std::size_t loss_count = std::min(cfg.count("metrics", "loss_count"), heldout.size());
        const Dataset part = heldout.slice(0, loss_count);
        LossConfig lc = tc.loss;
        lc.feature_extractor = feature_extractor(clf);
        const DenoiseFn model = unet_denoiser(net, &profile);
        NoGradGuard ng;
        for (double sigma : points ? karras_grid(model_schedule(net), points) : std::vector<double>{}) {
            std::mt19937_64 rng(kLossSeed);
            const LossBatch batch = make_loss_batch(part.images, conditional ? part.labels : std::vector<int>{},
                                                    sigma, rng);
            report.losses[{"pixel", sigma}] = loss_pixel(model, batch, lc).item();
            report.losses[{"feature", sigma}] = loss_feature(model, batch, lc).item();
        }
    }

    const std::size_t count = cfg.count("sampler", "count");
    const Tensor samples =
        generate_samples(sampler_model(net, &profile), sampler, model_schedule(net), item_shape(net), count,
                         run.chunk());
    for (double v : samples.data())
        if (!std::isfinite(v)) throw NumericError("sampling produced non-finite values");
    {
        const Tensor ref_features = classifier_features(clf, reference.images, run.chunk());
        const SampleScores s = score_samples(clf, samples, ref_features, metric_kernel(cfg), run.chunk());
        report.toy_fid = s.toy_fid;
        report.immd = s.immd;
    }
    for (KernelKind kind : all_kernel_kinds()) {
        KernelSpec k;
        k.kind = kind;
        const Tensor sets[] = {samples, reference.images};
        report.mmd[kind] = mmd_unbiased(samples, reference.images, resolve_kernel(k, sets));
    }
    report.validate();
    run.csv("metrics.csv", CsvTable{"metric_report", 1, {"name", "qualifier", "value"}, report.rows()});

    // Complexity probe against constant rho, pooled over resampled batches.
    ProbeCurveConfig pc;
    pc.rhos = cfg.reals("metrics", "probe_rhos");
    pc.resamples = cfg.count("metrics", "probe_resamples");
    pc.batch_size = probe_size;
    pc.sigma = probe_sigma;
    pc.scalarization = scal;
    pc.mode = profile.mode;
    pc.seed = seed;
    pc.workers = run.workers();
    if (pc.rhos.size() >= 2 && pc.resamples > 0) {
        const ProbeCurve curve = probe_curve(net, heldout, pc);
        CsvTable t{"probe_curve", 1, {"rho", "resample", "sigma", "gradient_norm"}, {}};
        for (std::size_t j = 0; j < curve.value.size(); ++j)
            t.rows.push_back({format_double(curve.rho[j]), std::to_string(curve.resample[j]),
                              format_double(probe_sigma), format_double(curve.value[j])});
        run.csv("probe_curve.csv", std::move(t));
        run.summary("probe_spearman", curve.spearman);
        run.summary("probe_p_value", curve.p_value);
        run.summary("probe_mean_batch_spearman", curve.mean_batch_spearman);
    }
    run.summary("toy_fid", report.toy_fid);
    run.summary("immd", report.immd);
    run.summary("avg_prop", report.avg_prop);
    run.summary("gradient_norm", report.gradient_norm);
    return run.finish();
}

RunRecord cmd_mmd_test(Run& run) {
    const auto& cfg = run.cfg();
    const MiniUNet net = run.load_model();
    const Dataset heldout = heldout_dataset(cfg);
    const std::size_t count = std::min(cfg.count("mmd", "count"), heldout.size());
    if (count < 2) throw ConfigError("[mmd] count must be at least 2");
    std::vector<KernelSpec> kernels;
    for (const auto& w : cfg.words("mmd", "kernels")) {
        KernelSpec k;
        k.kind = parse_kernel_kind(w);
        kernels.push_back(k);
    }
    if (kernels.empty()) throw ConfigError("[mmd] kernels must not be empty");
    SamplerConfig sampler = sampler_config(cfg);
    sampler.churn = ChurnSchedule::constant(0.0);
    sampler.steps = cfg.count("mmd", "steps");
    sampler.validate();
    SkipProfile tuned = profile_config(cfg, net.skip_count());
    tuned.rho_bottom = tuned.rho_top = cfg.real("mmd", "rho");
    tuned.validate();
    const NoiseSchedule schedule = model_schedule(net);
    const bool conditional = net.config().num_classes > 0;
    const Dataset part = heldout.slice(0, count);

    auto latents = [&](const SkipProfile* p) {
        std::vector<double> out;
        for (std::size_t first = 0; first < count; first += run.chunk()) {
            const std::size_t n = std::min(run.chunk(), count - first);
            const Dataset piece = part.slice(first, first + n);
            const auto d = make_batch_denoiser(net, p, conditional ? piece.labels : std::vector<int>{});
            const Tensor z = invert(d, sampler, schedule, piece.images).final;
            out.insert(out.end(), z.data().begin(), z.data().end());
        }
        for (double v : out)
            if (!std::isfinite(v)) throw NumericError("inversion produced non-finite values");
        Shape shape{count};
        const Shape is = item_shape(net);
        shape.insert(shape.end(), is.begin(), is.end());
        return Tensor::from(shape, std::move(out));
    };
    const Tensor base = latents(nullptr), tuned_latents = latents(&tuned);
    const Tensor reference = item_noise(count, item_shape(net), sampler.seed, 0, kReferenceNoiseStream);
    const auto table = relative_mmd_table(base, tuned_latents, reference, kernels);

    CsvTable t{"inversion_mmd", 1, {"kernel", "mmd_baseline", "mmd_tuned", "relative"}, {}};
    for (const auto& k : kernels) {
        const Tensor sets[] = {base, tuned_latents, reference};
        const KernelSpec r = resolve_kernel(k, sets);
        const auto rel = table.at(k.kind);
        t.rows.push_back({to_string(k.kind), format_double(mmd_unbiased(base, reference, r)),
                          format_double(mmd_unbiased(tuned_latents, reference, r)),
                          rel ? format_double(*rel) : "undefined"});
        run.summary("relative_" + to_string(k.kind), rel ? format_double(*rel) : "undefined");
    }
    run.csv("mmd.csv", std::move(t));
    return run.finish();
}

using Command = RunRecord (*)(Run&);

const std::vector<std::pair<std::string, Command>>& commands() {
    static const std::vector<std::pair<std::string, Command>> table = {
        {"gen-data", cmd_gen_data},
        {"train", cmd_train},
        {"train-classifier", cmd_train_classifier},
        {"sample", cmd_sample},
        {"invert", cmd_invert},
        {"sweep-rho", cmd_sweep_rho},
        {"window-search", cmd_window_search},
        {"stochastic-grid", cmd_stochastic_grid},
        {"finetune-rho", cmd_finetune_rho},
        {"finetune-full", cmd_finetune_full},
        {"metrics", cmd_metrics},
        {"mmd-test", cmd_mmd_test},
    };
    return table;
}

}  // namespace

const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& [name, fn] : commands()) out.push_back(name);
        return out;
    }();
    return names;
}

RunRecord run_experiment(const std::string& command, const ExperimentConfig& cfg, const std::string& out_dir) {
    for (const auto& [name, fn] : commands()) {
        if (name == command) {
            Run run(command, cfg, out_dir);
            return fn(run);
        }
    }
    throw ConfigError("unknown command '" + command + "'");
}

}  // namespace skiptune
