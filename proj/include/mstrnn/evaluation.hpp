#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mstrnn/dataset.hpp"
#include "mstrnn/model.hpp"
#include "mstrnn/training.hpp"

namespace mstrnn {

/// One leave-one-subject-out fold: every sample of `subject` is test data,
/// everything else trains.
struct Fold {
    int subject = 0;
    std::vector<int> train_ids;
    std::vector<int> test_ids;
};

/// One fold per distinct subject; folds partition the dataset. Rejects
/// single-subject datasets.
std::vector<Fold> losocv_splits(const Dataset& dataset);

/// Decision rule: per head, the argmax of the mean softmax vector over the
/// delay window t in [T+1, T+d]; ties go to the lowest index.
std::vector<int> classify(const ForwardTrace& trace, int t_frames, int delay);

struct HeadResult {
    std::string name;
    double accuracy_pct = 0.0;
    std::vector<std::vector<int>> confusion;  // [true][predicted]
};

struct EvalReport {
    std::vector<HeadResult> heads;
    double joint_accuracy_pct = 0.0;
    int chosen_epoch = -1;
    std::string decision_rule = "delay_window_mean";
    int samples = 0;

    nlohmann::json to_json() const;
    std::string to_table() const;
};

/// Highest joint validation accuracy; earliest epoch on ties.
int select_best_epoch(const TrainLog& log);

/// Scores `ids` with the model as-is (evaluation mode, center crop).
EvalReport evaluate_samples(const Model& model, const Dataset& dataset,
                            const std::vector<int>& ids, int delay, int crop_margin,
                            int jobs = 0);

struct FoldOutcome {
    int subject = 0;
    int best_epoch = -1;
    EvalReport report;
    TrainLog log;
};

struct LosocvOutcome {
    std::vector<FoldOutcome> folds;
    EvalReport aggregate;  // unweighted mean over folds, confusions summed
};

/// Full protocol: per fold, train a fresh model (seed mixed with the fold
/// subject), pick the best epoch by joint validation accuracy on the held-out
/// subject, and score that checkpoint. Fold artifacts land in
/// out_dir/fold_<subject>/. fold_jobs > 1 trains folds concurrently (results
/// are fold-independent either way).
LosocvOutcome run_losocv(const ModelSpec& spec, const Dataset& dataset, const TrainConfig& config,
                         const std::filesystem::path& out_dir, int fold_jobs = 1);

}  // namespace mstrnn
