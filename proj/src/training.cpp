#include "mstrnn/training.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "mstrnn/backprop.hpp"
#include "mstrnn/errors.hpp"
#include "mstrnn/evaluation.hpp"

namespace mstrnn {

void TrainConfig::validate() const {
    if (lr0 <= 0.0) throw ConfigError("training.lr0 must be positive");
    if (lr_decay < 0.0 || lr_decay >= 1.0) throw ConfigError("training.lr_decay must be in [0,1)");
    if (weight_decay < 0.0 || weight_decay >= 1.0)
        throw ConfigError("training.weight_decay must be in [0,1)");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("training.dropout_p must be in [0,1)");
    if (crop_margin < 0) throw ConfigError("training.crop_margin must be >= 0");
    if (epochs < 1) throw ConfigError("training.epochs must be >= 1");
    if (minibatch < 1) throw ConfigError("training.minibatch must be >= 1");
    if (delay < 1) throw ConfigError("training.delay must be >= 1");
}

double lr_at_epoch(double lr0, double decay, int epoch) {
    return lr0 * std::pow(1.0 - decay, epoch);
}

void sgd_update(std::vector<ParamRef>& params, const GradientBundle& grads, double lr,
                double weight_decay) {
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& theta = *params[i].tensor;
        const Tensor& g = grads.tensors[i];
        if (!theta.same_shape(g))
            throw ShapeError("sgd_update: gradient shape mismatch for " + params[i].name);
        const double wd = params[i].is_bias ? 0.0 : weight_decay;
        for (int64_t k = 0; k < theta.size(); ++k) theta[k] -= lr * (g[k] + wd * theta[k]);
        if (!theta.all_finite())
            throw NumericError("non-finite parameter after update: " + params[i].name);
    }
}

namespace {

Tensor crop_frame(const Tensor& frame, int oy, int ox, int out_h, int out_w) {
    Tensor out({frame.dim(0), out_h, out_w});
    for (int c = 0; c < frame.dim(0); ++c)
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) out(c, y, x) = frame(c, y + oy, x + ox);
    return out;
}

std::vector<Tensor> crop_video(const std::vector<Tensor>& frames, int margin, int oy, int ox) {
    if (margin == 0) return frames;
    const int out_h = frames[0].dim(1) - margin;
    const int out_w = frames[0].dim(2) - margin;
    if (out_h < 1 || out_w < 1)
        throw ShapeError("crop margin " + std::to_string(margin) + " too large for frames " +
                         frames[0].shape_str());
    std::vector<Tensor> out;
    out.reserve(frames.size());
    for (const Tensor& f : frames) out.push_back(crop_frame(f, oy, ox, out_h, out_w));
    return out;
}

template <typename Fn>
void parallel_for(int n, int jobs, Fn&& fn) {
    if (jobs <= 0) jobs = static_cast<int>(std::thread::hardware_concurrency());
    jobs = std::max(1, std::min(jobs, n));
    if (jobs == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> workers;
    workers.reserve(static_cast<size_t>(jobs));
    for (int w = 0; w < jobs; ++w)
        workers.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& t : workers) t.join();
}

}  // namespace

std::vector<Tensor> random_crop(const std::vector<Tensor>& frames, int margin, SeededRng& rng) {
    if (frames.empty()) return {};
    if (margin == 0) return frames;
    if (frames[0].dim(1) <= margin || frames[0].dim(2) <= margin)
        throw ShapeError("random_crop: frames " + frames[0].shape_str() +
                         " smaller than margin + 1");
    const int oy = rng.next_int(margin + 1);
    const int ox = rng.next_int(margin + 1);
    return crop_video(frames, margin, oy, ox);
}

std::vector<Tensor> center_crop(const std::vector<Tensor>& frames, int margin) {
    if (frames.empty() || margin == 0) return frames;
    return crop_video(frames, margin, margin / 2, margin / 2);
}

Tensor dropout_apply(const Tensor& activations, double p, SeededRng& rng, bool training) {
    if (!training || p == 0.0) return activations;
    Tensor out = activations;
    const double keep_scale = 1.0 / (1.0 - p);
    for (int64_t i = 0; i < out.size(); ++i)
        out[i] = rng.next_double() >= p ? out[i] * keep_scale : 0.0;
    return out;
}

// ---------------------------------------------------------------------------

TrainResult train(Model& model, const Dataset& dataset, const std::vector<int>& train_ids,
                  const std::vector<int>& val_ids, const TrainConfig& config,
                  const std::filesystem::path& out_dir) {
    config.validate();
    if (train_ids.empty()) throw ConfigError("train: empty training set");
    std::filesystem::create_directories(out_dir);

    TrainResult result;
    for (const HeadSpec& h : model.spec().heads) result.log.head_names.push_back(h.name);

    TargetLabels make_targets;  // reused buffer
    const auto targets_of = [&](const VideoSample& s) {
        TargetLabels t;
        for (const HeadSpec& h : model.spec().heads) t.per_head.push_back(s.labels.at(h.name));
        return t;
    };

    double best_joint = -1.0;
    const std::filesystem::path best_path = out_dir / "best.mstr";
    const std::filesystem::path last_path = out_dir / "last.mstr";

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_at_epoch(config.lr0, config.lr_decay, epoch);

        std::vector<int> order = train_ids;
        SeededRng shuffle_rng(SeededRng::mix(config.seed, 0xE000 + static_cast<uint64_t>(epoch)));
        seeded_shuffle(order, shuffle_rng);
        SeededRng crop_rng(SeededRng::mix(config.seed, 0xC000 + static_cast<uint64_t>(epoch)));

        double loss_sum = 0.0;
        bool aborted = false;
        for (size_t start = 0; start < order.size() && !aborted; start += config.minibatch) {
            const int batch = static_cast<int>(
                std::min<size_t>(config.minibatch, order.size() - start));

            // Draw all per-sample randomness on this thread so the parallel
            // evaluation below cannot perturb the streams.
            std::vector<std::vector<Tensor>> cropped(static_cast<size_t>(batch));
            std::vector<TargetLabels> targets(static_cast<size_t>(batch));
            std::vector<uint64_t> dropout_seeds(static_cast<size_t>(batch));
            for (int i = 0; i < batch; ++i) {
                const VideoSample& s = dataset.samples[static_cast<size_t>(order[start + i])];
                cropped[i] = random_crop(s.frames, config.crop_margin, crop_rng);
                targets[i] = targets_of(s);
                dropout_seeds[i] = SeededRng::mix(
                    SeededRng::mix(config.seed, 0xD000 + static_cast<uint64_t>(epoch)),
                    start + static_cast<uint64_t>(i));
            }

            std::vector<LossGrads> results(static_cast<size_t>(batch));
            std::vector<std::string> failures(static_cast<size_t>(batch));
            parallel_for(batch, config.jobs, [&](int i) {
                try {
                    ForwardOptions opts;
                    opts.training = true;
                    opts.dropout_p = config.dropout_p;
                    opts.dropout_seed = dropout_seeds[i];
                    results[i] =
                        loss_and_gradients(model, cropped[i], targets[i], config.delay, opts);
                } catch (const std::exception& e) {
                    failures[i] = e.what();
                }
            });

            GradientBundle batch_grads = model.zero_gradients();
            for (int i = 0; i < batch; ++i) {
                if (!failures[i].empty()) {
                    std::cerr << "training diverged at epoch " << epoch << ": " << failures[i]
                              << "\n";
                    result.diverged = true;
                    aborted = true;
                    break;
                }
                loss_sum += results[i].loss;
                batch_grads.add_scaled(results[i].grads, 1.0 / batch);
            }
            if (aborted) break;

            if (config.grad_clip) {
                double sq = 0.0;
                for (const Tensor& t : batch_grads.tensors)
                    for (int64_t k = 0; k < t.size(); ++k) sq += t[k] * t[k];
                const double norm = std::sqrt(sq);
                if (norm > config.clip_norm) batch_grads.scale(config.clip_norm / norm);
            }

            auto params = model.params();
            sgd_update(params, batch_grads, lr, config.weight_decay);
        }
        if (aborted) break;  // last good checkpoint stays on disk

        // Validation at the evaluation-time center crop, dropout off.
        std::vector<int> head_correct(model.spec().heads.size(), 0);
        std::atomic<int> joint_correct{0};
        std::vector<std::vector<int>> predictions(val_ids.size());
        parallel_for(static_cast<int>(val_ids.size()), config.jobs, [&](int i) {
            const VideoSample& s = dataset.samples[static_cast<size_t>(val_ids[i])];
            const auto frames = center_crop(s.frames, config.crop_margin);
            const ForwardTrace trace = model.forward_sequence(frames, config.delay);
            predictions[i] = classify(trace, static_cast<int>(frames.size()), config.delay);
        });
        for (size_t i = 0; i < val_ids.size(); ++i) {
            const VideoSample& s = dataset.samples[static_cast<size_t>(val_ids[i])];
            bool all = true;
            for (size_t h = 0; h < model.spec().heads.size(); ++h) {
                const bool ok = predictions[i][h] == s.labels.at(model.spec().heads[h].name);
                head_correct[h] += ok;
                all = all && ok;
            }
            joint_correct += all;
        }

        EpochRow row;
        row.epoch = epoch;
        row.lr = lr;
        row.train_loss = loss_sum / static_cast<double>(order.size());
        const double denom = std::max<size_t>(1, val_ids.size());
        for (size_t h = 0; h < head_correct.size(); ++h)
            row.val_acc_heads.push_back(100.0 * head_correct[h] / denom);
        row.val_acc_joint = 100.0 * joint_correct / denom;
        row.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.rows.push_back(row);

        if (config.checkpoint_every_epoch) {
            char name[32];
            std::snprintf(name, sizeof name, "ckpt_epoch_%04d.mstr", epoch);
            save_checkpoint(model, out_dir / name);
        }
        save_checkpoint(model, last_path);
        if (row.val_acc_joint > best_joint) {
            best_joint = row.val_acc_joint;
            result.best_epoch = epoch;
            save_checkpoint(model, best_path);
        }
    }

    result.best_checkpoint = best_path;
    result.last_checkpoint = last_path;
    return result;
}

// ---------------------------------------------------------------------------
// TrainLog CSV

void TrainLog::save_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write train log: " + path.string());
    out << "epoch,lr,train_loss";
    for (size_t h = 0; h < head_names.size(); ++h) out << ",val_acc_head_" << h;
    out << ",val_acc_joint,seconds\n";
    out.precision(17);
    for (const EpochRow& r : rows) {
        out << r.epoch << "," << r.lr << "," << r.train_loss;
        for (double a : r.val_acc_heads) out << "," << a;
        out << "," << r.val_acc_joint << "," << r.seconds << "\n";
    }
    if (!out) throw IoError("short write to train log: " + path.string());
}

TrainLog TrainLog::load_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("missing train log: " + path.string());
    TrainLog log;
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty train log: " + path.string());
    {
        std::stringstream header(line);
        std::string col;
        while (std::getline(header, col, ','))
            if (col.rfind("val_acc_head_", 0) == 0) log.head_names.push_back(col);
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(std::stod(cell));
        if (cells.size() != 5 + log.head_names.size())
            throw IoError("malformed train log row: " + line);
        EpochRow r;
        r.epoch = static_cast<int>(cells[0]);
        r.lr = cells[1];
        r.train_loss = cells[2];
        for (size_t h = 0; h < log.head_names.size(); ++h) r.val_acc_heads.push_back(cells[3 + h]);
        r.val_acc_joint = cells[3 + log.head_names.size()];
        r.seconds = cells[4 + log.head_names.size()];
        log.rows.push_back(r);
    }
    return log;
}

}  // namespace mstrnn
