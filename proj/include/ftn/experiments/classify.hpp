#pragma once

// Image classification on CIFAR: whitened subsets, shuffled mini-batches with
// crop/flip augmentation, Nesterov SGD with a step schedule, periodic test
// error, final checkpoint.

#include "ftn/checkpoint.hpp"
#include "ftn/data/augment.hpp"
#include "ftn/data/cifar.hpp"
#include "ftn/data/whitening.hpp"
#include "ftn/experiments/config.hpp"
#include "ftn/experiments/report.hpp"
#include "ftn/network.hpp"
#include "ftn/optim.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

namespace ftn::exp {

struct ClassifyReport {
    double test_error = 0;       ///< fraction in [0,1], after the last iteration
    std::size_t parameters = 0;
    std::int64_t iterations = 0;
};

namespace detail {

enum ClassifyStream : std::uint64_t { kModel = 0xC01, kShuffle = 0xC02, kAugment = 0xC03, kDropout = 0xC04, kLabels = 0xC05 };

inline Tensor<float> gather_images(const Tensor<float>& images, const std::vector<std::size_t>& idx) {
    const std::size_t per = images.size() / images.dim(0);
    Shape s = images.shape();
    s[0] = idx.size();
    Tensor<float> out(s);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy(images.ptr() + idx[i] * per, images.ptr() + (idx[i] + 1) * per, out.ptr() + i * per);
    }
    return out;
}

/// Error rate of eval-mode predictions.
inline double test_error(Model<float>& model, const data::CifarSet& set, std::size_t batch_size) {
    std::size_t wrong = 0;
    for (std::size_t i0 = 0; i0 < set.size(); i0 += batch_size) {
        const std::size_t m = std::min(batch_size, set.size() - i0);
        std::vector<std::size_t> idx(m);
        std::iota(idx.begin(), idx.end(), i0);
        const auto logits = model.predict(gather_images(set.images, idx));
        const std::size_t classes = logits.size() / m;
        for (std::size_t r = 0; r < m; ++r) {
            const float* row = logits.ptr() + r * classes;
            const auto pred = static_cast<int>(std::max_element(row, row + classes) - row);
            if (pred != set.labels[i0 + r]) ++wrong;
        }
    }
    return static_cast<double>(wrong) / static_cast<double>(set.size());
}

/// GCN + ZCA fitted on the training subset, reusing a cached transform when
/// one keyed on the same files, subset size and lambda exists.
inline data::WhiteningTransform whitening_for(const data::CifarSet& train, const std::vector<std::filesystem::path>& files,
                                              std::size_t subset, double lambda, const std::string& cache,
                                              std::ostream* log) {
    if (cache.empty()) return data::fit_whitening(train.images, lambda);
    std::uint64_t key = data::whitening_cache_key(files, lambda);
    const std::string tag = "subset=" + std::to_string(subset);
    key = data::fnv1a(std::span<const char>(tag.data(), tag.size()), key);
    if (auto t = data::load_whitening(cache, key)) {
        if (log) *log << "whitening: loaded " << cache << '\n';
        return *t;
    }
    auto t = data::fit_whitening(train.images, lambda);
    data::save_whitening(cache, t, key);
    return t;
}

} // namespace detail

/// Writes metrics.csv (iteration, epoch, train_loss, test_error, lr),
/// timing.csv, model.ckpt and summary.json under `out`.
inline ClassifyReport run_classify(const json& cfg, const std::filesystem::path& out, std::ostream* log = nullptr) {
    const auto seed = get<std::uint64_t>(cfg, "seed");
    const auto variant = data::parse_cifar_variant(get<std::string>(cfg, "classify.dataset"));
    const auto root = data_root(get<std::string>(cfg, "classify.data_root"));
    const auto train_n = get<std::size_t>(cfg, "classify.train_subset");
    const auto test_n = get<std::size_t>(cfg, "classify.test_subset");
    const auto iterations = get<std::int64_t>(cfg, "classify.iterations");
    const auto batch_size = get<std::size_t>(cfg, "classify.batch_size");
    const auto eval_every = get<std::int64_t>(cfg, "classify.eval_every");
    const auto lambda = get<double>(cfg, "classify.zca_lambda");
    const auto augment = get<bool>(cfg, "classify.augment");
    const auto shuffle_labels = get<bool>(cfg, "classify.shuffle_labels");
    const auto cache = get<std::string>(cfg, "classify.whitening_cache");
    const auto lr0 = get<double>(cfg, "optimizer.lr");
    const auto momentum = get<double>(cfg, "optimizer.momentum");
    const auto clip = clip_from_json(cfg);
    LrScheduler sched(lr0, schedule_from_json(cfg.at("optimizer").at("schedule")));
    if (iterations <= 0 || batch_size == 0 || eval_every <= 0 || train_n == 0 || test_n == 0) {
        throw ConfigError("classify: iterations, batch_size, eval_every and subset sizes must be positive");
    }

    const auto train_files = data::cifar_split_files(root, variant, "train");
    auto train = data::head(data::load_cifar(root, variant, "train"), train_n);
    auto test = data::head(data::load_cifar(root, variant, "test"), test_n);
    if (train.size() < batch_size) throw ConfigError("classify: training subset smaller than one batch");
    const auto zca = detail::whitening_for(train, train_files, train.size(), lambda, cache, log);
    train.images = data::apply_whitening(zca, train.images);
    test.images = data::apply_whitening(zca, test.images);
    if (shuffle_labels) {
        // Negative control: break the image/label association.
        Rng rng = Rng::derive(seed, detail::kLabels);
        for (std::size_t i = train.labels.size(); i > 1; --i) std::swap(train.labels[i - 1], train.labels[rng.below(i)]);
    }

    const auto spec = network_from_config(cfg, static_cast<std::size_t>(data::class_count(variant)));
    Model<float> model(spec, Rng::derive(seed, detail::kModel).next());
    auto refs = model.parameters();
    std::vector<Tensor<float>*> ps;
    for (const auto& r : refs) ps.push_back(r.value);
    auto opt = make_optimizer_state<float>(ps, lr0, momentum, clip);

    prepare_run_dir(out, cfg);
    CsvWriter metrics(out / "metrics.csv", {"iteration", "epoch", "train_loss", "test_error", "lr"});
    CsvWriter timing(out / "timing.csv", {"iteration", "wall_clock_s"});
    Stopwatch clock;

    const std::size_t per_epoch = train.size() / batch_size; // the ragged tail is dropped
    std::vector<std::size_t> order(train.size());
    double window_loss = 0;
    std::int64_t window = 0;
    ClassifyReport rep;
    rep.parameters = model.parameter_count();
    for (std::int64_t it = 0; it < iterations; ++it) {
        const auto epoch = static_cast<std::size_t>(it) / per_epoch;
        const auto slot = static_cast<std::size_t>(it) % per_epoch;
        if (slot == 0) {
            std::iota(order.begin(), order.end(), 0);
            Rng rng = Rng::derive(seed, detail::kShuffle, epoch);
            for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        }
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(slot * batch_size),
                                     order.begin() + static_cast<std::ptrdiff_t>((slot + 1) * batch_size));
        auto batch = detail::gather_images(train.images, idx);
        if (augment) {
            Rng rng = Rng::derive(seed, detail::kAugment, static_cast<std::uint64_t>(it));
            batch = data::augment_batch(batch, rng);
        }
        std::vector<int> labels(batch_size);
        for (std::size_t i = 0; i < batch_size; ++i) labels[i] = train.labels[idx[i]];

        opt.lr = sched.on_iteration(it);
        Rng dropout = Rng::derive(seed, detail::kDropout, static_cast<std::uint64_t>(it));
        Tape<float> tape;
        float loss_value = 0;
        try {
            auto fwd = model.forward(tape, batch, Mode::train, &dropout);
            auto loss = ops::softmax_xent(fwd.output, std::span<const int>(labels));
            loss_value = loss.value().item();
            if (!std::isfinite(loss_value)) throw NumericError("classify: loss is " + format_real(loss_value));
            tape.backward(loss);
            std::vector<Tensor<float>> grads;
            for (const auto& v : fwd.params) grads.push_back(tape.grad(v));
            nesterov_step<float>(ps, grads, opt);
            for (const auto& r : refs) {
                if (r.pool_unit) project_constraints(*r.value);
            }
        } catch (const NumericError& e) {
            nlohmann::json snap{{"iteration", it}, {"reason", e.what()}};
            for (const auto& r : refs) {
                if (r.pool_unit) {
                    std::vector<std::string> vals;
                    for (float v : r.value->data()) vals.push_back(format_real(v));
                    snap["pool_units"][r.name] = vals;
                }
            }
            write_json(out / "divergence.json", snap);
            throw NumericError(std::string(e.what()) + " (iteration " + std::to_string(it) + "; snapshot in divergence.json)");
        }
        window_loss += loss_value;
        ++window;

        const std::int64_t done = it + 1;
        if (done % eval_every == 0 || done == iterations) {
            rep.test_error = detail::test_error(model, test, batch_size);
            metrics.row({done, static_cast<std::int64_t>(epoch), window_loss / static_cast<double>(window), rep.test_error, opt.lr});
            timing.row({done, clock.seconds()});
            metrics.flush();
            timing.flush();
            if (log) {
                *log << "iteration " << done << ": train loss " << format_real(window_loss / static_cast<double>(window))
                     << ", test error " << format_real(rep.test_error) << ", lr " << format_real(opt.lr) << '\n';
            }
            window_loss = 0;
            window = 0;
        }
    }
    rep.iterations = iterations;
    save_checkpoint((out / "model.ckpt").string(), model);
    json summary = summary_header(cfg);
    summary["test_error"] = rep.test_error;
    summary["parameters"] = rep.parameters;
    summary["iterations"] = rep.iterations;
    summary["train_size"] = train.size();
    summary["test_size"] = test.size();
    write_json(out / "summary.json", summary);
    return rep;
}

} // namespace ftn::exp
