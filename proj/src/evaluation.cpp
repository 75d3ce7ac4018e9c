#include "mstrnn/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "mstrnn/errors.hpp"

namespace mstrnn {

using nlohmann::json;

std::vector<Fold> losocv_splits(const Dataset& dataset) {
    std::set<int> subjects;
    for (const VideoSample& s : dataset.samples) subjects.insert(s.subject);
    if (subjects.size() < 2)
        throw ConfigError("LOSOCV needs at least 2 subjects, dataset has " +
                          std::to_string(subjects.size()));
    std::vector<Fold> folds;
    for (int subject : subjects) {
        Fold fold;
        fold.subject = subject;
        for (size_t i = 0; i < dataset.samples.size(); ++i) {
            if (dataset.samples[i].subject == subject)
                fold.test_ids.push_back(static_cast<int>(i));
            else
                fold.train_ids.push_back(static_cast<int>(i));
        }
        folds.push_back(std::move(fold));
    }
    return folds;
}

std::vector<int> classify(const ForwardTrace& trace, int t_frames, int delay) {
    if (delay < 1) throw ConfigError("classify: the delay window must be non-empty");
    if (trace.steps() < t_frames + delay)
        throw ShapeError("classify: trace too short for T + d");
    const size_t n_heads = trace.head_probs.front().size();
    std::vector<int> out(n_heads, 0);
    for (size_t s = 0; s < n_heads; ++s) {
        std::vector<double> mean(trace.head_probs.front()[s].size(), 0.0);
        for (int t = t_frames; t < t_frames + delay; ++t)
            for (size_t n = 0; n < mean.size(); ++n) mean[n] += trace.head_probs[t][s][n];
        // argmax with lowest-index tie break (strict >)
        int best = 0;
        for (size_t n = 1; n < mean.size(); ++n)
            if (mean[n] > mean[static_cast<size_t>(best)]) best = static_cast<int>(n);
        out[s] = best;
    }
    return out;
}

int select_best_epoch(const TrainLog& log) {
    if (log.rows.empty()) throw ConfigError("select_best_epoch: empty training log");
    int best = 0;
    for (size_t i = 1; i < log.rows.size(); ++i)
        if (log.rows[i].val_acc_joint > log.rows[static_cast<size_t>(best)].val_acc_joint)
            best = static_cast<int>(i);
    return log.rows[static_cast<size_t>(best)].epoch;
}

namespace {

template <typename Fn>
void parallel_for_eval(int n, int jobs, Fn&& fn) {
    if (jobs <= 0) jobs = static_cast<int>(std::thread::hardware_concurrency());
    jobs = std::max(1, std::min(jobs, n));
    if (jobs == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w)
        workers.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& t : workers) t.join();
}

}  // namespace

EvalReport evaluate_samples(const Model& model, const Dataset& dataset, const std::vector<int>& ids,
                            int delay, int crop_margin, int jobs) {
    EvalReport report;
    report.samples = static_cast<int>(ids.size());
    const auto& heads = model.spec().heads;
    for (const HeadSpec& h : heads) {
        HeadResult hr;
        hr.name = h.name;
        hr.confusion.assign(static_cast<size_t>(h.size), std::vector<int>(static_cast<size_t>(h.size), 0));
        report.heads.push_back(std::move(hr));
    }

    std::vector<std::vector<int>> predictions(ids.size());
    parallel_for_eval(static_cast<int>(ids.size()), jobs, [&](int i) {
        const VideoSample& s = dataset.samples[static_cast<size_t>(ids[static_cast<size_t>(i)])];
        const auto frames = center_crop(s.frames, crop_margin);
        const ForwardTrace trace = model.forward_sequence(frames, delay);
        predictions[static_cast<size_t>(i)] =
            classify(trace, static_cast<int>(frames.size()), delay);
    });

    std::vector<int> head_correct(heads.size(), 0);
    int joint_correct = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
        const VideoSample& s = dataset.samples[static_cast<size_t>(ids[i])];
        bool all = true;
        for (size_t h = 0; h < heads.size(); ++h) {
            const int truth = s.labels.at(heads[h].name);
            const int pred = predictions[i][h];
            report.heads[h].confusion[static_cast<size_t>(truth)][static_cast<size_t>(pred)]++;
            const bool ok = pred == truth;
            head_correct[h] += ok;
            all = all && ok;
        }
        joint_correct += all;
    }
    const double denom = std::max<size_t>(1, ids.size());
    for (size_t h = 0; h < heads.size(); ++h)
        report.heads[h].accuracy_pct = 100.0 * head_correct[h] / denom;
    report.joint_accuracy_pct = 100.0 * joint_correct / denom;
    return report;
}

LosocvOutcome run_losocv(const ModelSpec& spec, const Dataset& dataset, const TrainConfig& config,
                         const std::filesystem::path& out_dir, int fold_jobs) {
    const std::vector<Fold> folds = losocv_splits(dataset);
    std::filesystem::create_directories(out_dir);

    LosocvOutcome outcome;
    outcome.folds.resize(folds.size());
    std::vector<std::string> failures(folds.size());

    parallel_for_eval(static_cast<int>(folds.size()), fold_jobs, [&](int fi) {
        try {
            const Fold& fold = folds[static_cast<size_t>(fi)];
            const std::filesystem::path fold_dir =
                out_dir / ("fold_" + std::to_string(fold.subject));
            Model model =
                Model::build(spec, SeededRng::mix(config.seed, 0xF01D + static_cast<uint64_t>(fold.subject)));

            TrainConfig fold_cfg = config;
            fold_cfg.seed = SeededRng::mix(config.seed, static_cast<uint64_t>(fold.subject));
            // Inside-fold sample parallelism and fold parallelism would
            // oversubscribe each other; fold workers run their samples serially.
            if (fold_jobs > 1) fold_cfg.jobs = 1;
            TrainResult tr = train(model, dataset, fold.train_ids, fold.test_ids, fold_cfg, fold_dir);
            tr.log.save_csv(fold_dir / "train_log.csv");

            FoldOutcome& fo = outcome.folds[static_cast<size_t>(fi)];
            fo.subject = fold.subject;
            fo.best_epoch = select_best_epoch(tr.log);
            fo.log = tr.log;
            load_checkpoint(model, tr.best_checkpoint);
            fo.report = evaluate_samples(model, dataset, fold.test_ids, config.delay,
                                         config.crop_margin, fold_jobs > 1 ? 1 : config.jobs);
            fo.report.chosen_epoch = fo.best_epoch;
        } catch (const std::exception& e) {
            failures[static_cast<size_t>(fi)] = e.what();
        }
    });
    for (size_t fi = 0; fi < folds.size(); ++fi)
        if (!failures[fi].empty())
            throw ConfigError("fold " + std::to_string(folds[fi].subject) + " failed: " + failures[fi]);

    // Unweighted average across folds; confusion matrices summed.
    EvalReport& agg = outcome.aggregate;
    for (const HeadSpec& h : spec.heads) {
        HeadResult hr;
        hr.name = h.name;
        hr.confusion.assign(static_cast<size_t>(h.size), std::vector<int>(static_cast<size_t>(h.size), 0));
        agg.heads.push_back(std::move(hr));
    }
    for (const FoldOutcome& fo : outcome.folds) {
        for (size_t h = 0; h < agg.heads.size(); ++h) {
            agg.heads[h].accuracy_pct += fo.report.heads[h].accuracy_pct;
            for (size_t a = 0; a < agg.heads[h].confusion.size(); ++a)
                for (size_t b = 0; b < agg.heads[h].confusion.size(); ++b)
                    agg.heads[h].confusion[a][b] += fo.report.heads[h].confusion[a][b];
        }
        agg.joint_accuracy_pct += fo.report.joint_accuracy_pct;
        agg.samples += fo.report.samples;
    }
    for (HeadResult& h : agg.heads) h.accuracy_pct /= static_cast<double>(outcome.folds.size());
    agg.joint_accuracy_pct /= static_cast<double>(outcome.folds.size());
    return outcome;
}

// ---------------------------------------------------------------------------
// Report serialization

json EvalReport::to_json() const {
    json heads_j = json::array();
    for (const HeadResult& h : heads)
        heads_j.push_back(
            {{"name", h.name}, {"accuracy", h.accuracy_pct}, {"confusion", h.confusion}});
    return json{{"decision_rule", decision_rule},
                {"chosen_epoch", chosen_epoch},
                {"samples", samples},
                {"joint_accuracy", joint_accuracy_pct},
                {"heads", heads_j}};
}

std::string EvalReport::to_table() const {
    std::ostringstream out;
    out << std::fixed << std::setprecision(2);
    out << "category        accuracy\n";
    for (const HeadResult& h : heads)
        out << std::left << std::setw(16) << h.name << std::right << std::setw(7)
            << h.accuracy_pct << "\n";
    out << std::left << std::setw(16) << "joint" << std::right << std::setw(7)
        << joint_accuracy_pct << "\n";
    if (chosen_epoch >= 0) out << "chosen epoch: " << chosen_epoch << "\n";
    return out.str();
}

}  // namespace mstrnn
