#pragma once

// Approximation study: train a single LSTM pooling unit to reproduce max or
// average pooling over a k x k region, then measure MAE on the dense (T1)
// and sparse (T2, T3) regimes.

#include "ftn/checkpoint.hpp"
#include "ftn/data/synthetic.hpp"
#include "ftn/experiments/config.hpp"
#include "ftn/experiments/report.hpp"
#include "ftn/lstm_pool.hpp"
#include "ftn/network.hpp"
#include "ftn/optim.hpp"

#include <array>
#include <cmath>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace ftn::exp {

inline constexpr std::array<data::Regime, 3> kAllRegimes = {data::Regime::T1, data::Regime::T2, data::Regime::T3};

struct ApproxLengthResult {
    std::size_t length = 0;
    std::size_t restart = 0;      ///< restart whose unit was kept
    std::size_t epochs = 0;       ///< epochs trained by that restart
    double validation_mae = 0;    ///< best validation MAE of that restart
    std::array<double, 3> untrained_mae{};
    std::array<double, 3> mae{};  ///< test MAE on T1, T2, T3
    std::array<double, kLstmParamCount> params{};
};

struct ApproxReport {
    data::PoolTarget target = data::PoolTarget::max;
    std::vector<ApproxLengthResult> lengths;
};

inline std::size_t region_side(std::size_t length) {
    data::check_length(length);
    return static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(length))));
}

/// One-layer network holding a single pooling unit over a [1,k,k] input.
inline NetworkSpec approx_network(std::size_t length, const Modulation& psi) {
    const std::size_t k = region_side(length);
    NetworkSpec s;
    s.input = {1, k, k};
    s.layers.push_back(PoolLayer{PoolKind::lstm, k, k, PoolSharing::per_layer, psi});
    return s;
}

namespace detail {

// Stream identifiers for Rng::derive; kept distinct so no two uses overlap.
enum ApproxStream : std::uint64_t { kInit = 0xA11, kTrain = 0xA12, kValidation = 0xA13, kTest = 0xA14 };

/// Mean absolute error of the unit over `batches` batches drawn from `rng`,
/// cycling through `regimes`.
inline double unit_mae(const LstmPoolParams<double>& unit, const Modulation& psi, std::size_t length,
                       data::PoolTarget target, const std::vector<data::Regime>& regimes, std::size_t batches,
                       std::size_t batch_size, Rng rng) {
    const std::size_t k = region_side(length);
    double total = 0;
    for (std::size_t b = 0; b < batches; ++b) {
        auto batch = data::gen_pool_batch<double>(length, regimes[b % regimes.size()], target, rng, batch_size);
        const auto out = pool_forward<double>(batch.inputs.reshaped({batch_size, 1, k, k}), k, k, unit, psi);
        double s = 0;
        for (std::size_t i = 0; i < batch_size; ++i) s += std::abs(out[i] - batch.targets[i]);
        total += s / static_cast<double>(batch_size);
    }
    return total / static_cast<double>(batches);
}

inline void write_divergence_snapshot(const std::filesystem::path& dir, std::size_t length, std::size_t restart,
                                      std::int64_t iteration, const Tensor<double>& params, const std::string& why) {
    nlohmann::json j;
    j["length"] = length;
    j["restart"] = restart;
    j["iteration"] = iteration;
    j["reason"] = why;
    j["params"] = nlohmann::json::object();
    for (std::size_t k = 0; k < kLstmParamCount; ++k) {
        const double v = params[k];
        j["params"][std::string(kLstmParamNames[k])] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(format_real(v));
    }
    write_json(dir / ("divergence_L" + std::to_string(length) + ".json"), j);
}

} // namespace detail

/// Trains one unit per configured length and writes, under `out`:
/// approx_mae.csv, metrics.csv, timing.csv, approx_L<L>.ckpt, summary.json.
/// Each length runs `restarts` independent initialisations; the one with the
/// lowest validation MAE is kept. Within a restart the parameters from the
/// best validation epoch are kept. Training stops early once the plateau
/// schedule reaches its floor.
inline ApproxReport run_approx(const json& cfg, const std::filesystem::path& out, std::ostream* log = nullptr) {
    const auto seed = get<std::uint64_t>(cfg, "seed");
    const auto target = data::parse_pool_target(get<std::string>(cfg, "approx.target"));
    const auto lengths = get<std::vector<std::size_t>>(cfg, "approx.lengths");
    const auto psi = parse_modulation(get<std::string>(cfg, "approx.modulation"));
    std::vector<data::Regime> train_regimes;
    for (const auto& r : get<std::vector<std::string>>(cfg, "approx.train_regimes")) train_regimes.push_back(data::parse_regime(r));
    const auto batch_size = get<std::size_t>(cfg, "approx.batch_size");
    const auto per_epoch = get<std::size_t>(cfg, "approx.batches_per_epoch");
    const auto val_batches = get<std::size_t>(cfg, "approx.validation_batches");
    const auto test_batches = get<std::size_t>(cfg, "approx.test_batches");
    const auto max_epochs = get<std::size_t>(cfg, "approx.max_epochs");
    const auto restarts = get<std::size_t>(cfg, "approx.restarts");
    const auto lr0 = get<double>(cfg, "optimizer.lr");
    const auto momentum = get<double>(cfg, "optimizer.momentum");
    const auto clip = clip_from_json(cfg);
    const auto schedule = schedule_from_json(cfg.at("optimizer").at("schedule"));

    if (lengths.empty()) throw ConfigError("approx: no lengths configured");
    if (train_regimes.empty()) throw ConfigError("approx: no training regimes configured");
    if (batch_size == 0 || per_epoch == 0 || val_batches == 0 || test_batches == 0 || max_epochs == 0 || restarts == 0) {
        throw ConfigError("approx: batch size, batch counts, max_epochs and restarts must be positive");
    }
    for (auto L : lengths) data::check_length(L);
    const std::vector<data::Regime> all(kAllRegimes.begin(), kAllRegimes.end());

    prepare_run_dir(out, cfg);
    CsvWriter metrics(out / "metrics.csv", {"length", "restart", "iteration", "epoch", "train_loss", "validation_mae", "lr"});
    CsvWriter timing(out / "timing.csv", {"length", "restart", "iteration", "wall_clock_s"});
    Stopwatch clock;

    ApproxReport report;
    report.target = target;
    for (const std::size_t L : lengths) {
        const std::size_t k = region_side(L);
        ApproxLengthResult res;
        res.length = L;
        double best_overall = std::numeric_limits<double>::infinity();
        Tensor<double> kept;

        for (std::size_t restart = 0; restart < restarts; ++restart) {
            Model<double> model(approx_network(L, psi), Rng::derive(seed, detail::kInit, L * 1000 + restart).next());
            Tensor<double>& unit = model.pool_unit(0);
            if (restart == 0) {
                const auto p0 = LstmPoolParams<double>::from_span(unit.data());
                for (std::size_t r = 0; r < 3; ++r) {
                    res.untrained_mae[r] = detail::unit_mae(p0, psi, L, target, {kAllRegimes[r]}, test_batches,
                                                            batch_size, Rng::derive(seed, detail::kTest, L * 10 + r));
                }
            }
            std::vector<Tensor<double>*> ps{&unit};
            auto opt = make_optimizer_state<double>(ps, lr0, momentum, clip);
            LrScheduler sched(lr0, schedule);
            double best_val = std::numeric_limits<double>::infinity();
            Tensor<double> best_params = unit;
            std::size_t epochs = 0;
            std::int64_t iteration = 0;

            for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
                Rng rng = Rng::derive(seed, detail::kTrain, (L * 1000 + restart) * 100000 + epoch);
                double loss_sum = 0;
                for (std::size_t b = 0; b < per_epoch; ++b, ++iteration) {
                    opt.lr = sched.on_iteration(iteration);
                    auto batch = data::gen_pool_batch<double>(L, train_regimes[static_cast<std::size_t>(iteration) % train_regimes.size()],
                                                              target, rng, batch_size);
                    Tape<double> tape;
                    double loss_value = 0;
                    try {
                        auto fwd = model.forward(tape, batch.inputs.reshaped({batch_size, 1, k, k}), Mode::train);
                        auto loss = ops::mae(ops::reshape(fwd.output, {batch_size}), tape.constant(batch.targets));
                        loss_value = loss.value().item();
                        if (!std::isfinite(loss_value)) throw NumericError("approx: loss is " + format_real(loss_value));
                        tape.backward(loss);
                        std::vector<Tensor<double>> grads{tape.grad(fwd.params[0])};
                        nesterov_step<double>(ps, grads, opt);
                        project_constraints(unit);
                        for (double v : unit.data()) {
                            if (!std::isfinite(v)) throw NumericError("approx: non-finite pooling parameter after update");
                        }
                    } catch (const NumericError& e) {
                        detail::write_divergence_snapshot(out, L, restart, iteration, unit, e.what());
                        throw NumericError(std::string(e.what()) + " (L=" + std::to_string(L) + ", restart " +
                                           std::to_string(restart) + ", iteration " + std::to_string(iteration) +
                                           "; snapshot in divergence_L" + std::to_string(L) + ".json)");
                    }
                    loss_sum += loss_value;
                }
                epochs = epoch;
                const double val = detail::unit_mae(LstmPoolParams<double>::from_span(unit.data()), psi, L, target, all,
                                                    val_batches, batch_size, Rng::derive(seed, detail::kValidation, L));
                metrics.row({static_cast<std::int64_t>(L), static_cast<std::int64_t>(restart), iteration,
                             static_cast<std::int64_t>(epoch), loss_sum / static_cast<double>(per_epoch), val, opt.lr});
                timing.row({static_cast<std::int64_t>(L), static_cast<std::int64_t>(restart), iteration, clock.seconds()});
                metrics.flush();
                timing.flush();
                if (log) {
                    *log << "L=" << L << " restart " << restart << " epoch " << epoch << ": train "
                         << format_real(loss_sum / static_cast<double>(per_epoch)) << ", validation " << format_real(val)
                         << ", lr " << format_real(opt.lr) << '\n';
                }
                if (val < best_val) {
                    best_val = val;
                    best_params = unit;
                }
                sched.on_validation(-val);
                if (sched.at_floor()) break;
            }
            if (best_val < best_overall) {
                best_overall = best_val;
                kept = best_params;
                res.restart = restart;
                res.epochs = epochs;
                res.validation_mae = best_val;
            }
        }

        Model<double> final_model(approx_network(L, psi), 0);
        final_model.pool_unit(0) = kept;
        save_checkpoint((out / ("approx_L" + std::to_string(L) + ".ckpt")).string(), final_model);
        const auto unit = LstmPoolParams<double>::from_span(kept.data());
        for (std::size_t r = 0; r < 3; ++r) {
            res.mae[r] = detail::unit_mae(unit, psi, L, target, {kAllRegimes[r]}, test_batches, batch_size,
                                          Rng::derive(seed, detail::kTest, L * 10 + r));
        }
        for (std::size_t p = 0; p < kLstmParamCount; ++p) res.params[p] = kept[p];
        if (log) {
            *log << "L=" << L << " kept restart " << res.restart << ": MAE T1 " << format_real(res.mae[0]) << ", T2 "
                 << format_real(res.mae[1]) << ", T3 " << format_real(res.mae[2]) << '\n';
        }
        report.lengths.push_back(res);
    }

    CsvWriter table(out / "approx_mae.csv", {"target", "length", "regime", "untrained_mae", "mae"});
    json summary = summary_header(cfg);
    summary["target"] = data::to_string(target);
    summary["results"] = json::array();
    for (const auto& r : report.lengths) {
        json entry{{"length", r.length}, {"restart", r.restart}, {"epochs", r.epochs}, {"validation_mae", r.validation_mae}};
        for (std::size_t g = 0; g < 3; ++g) {
            const auto name = data::to_string(kAllRegimes[g]);
            table.row({data::to_string(target), static_cast<std::int64_t>(r.length), name, r.untrained_mae[g], r.mae[g]});
            entry["mae"][name] = r.mae[g];
            entry["untrained_mae"][name] = r.untrained_mae[g];
        }
        for (std::size_t p = 0; p < kLstmParamCount; ++p) entry["params"][std::string(kLstmParamNames[p])] = r.params[p];
        summary["results"].push_back(entry);
    }
    write_json(out / "summary.json", summary);
    return report;
}

} // namespace ftn::exp
