// ftn: experiment runner.
//
//   ftn approx            [--config F] [--seed N] [--out DIR] [--override k=v]...
//   ftn classify          ...
//   ftn analyze-locations ...
//   ftn analyze-response  ...
//   ftn gradcheck         [--seed N]
//
// Exit status: 0 on success, otherwise the error category code
// (1 generic, 2 config, 3 data, 4 numeric, 5 io, 6 shape).

#include "ftn/experiments/analysis.hpp"
#include "ftn/experiments/approx.hpp"
#include "ftn/experiments/classify.hpp"
#include "ftn/experiments/config.hpp"
#include "ftn/experiments/gradcheck_suite.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

using ftn::exp::json;

struct RunFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> overrides;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
    cmd->add_option("--config", f.config, "JSON config document (defaults used when omitted)");
    cmd->add_option("--seed", f.seed, "seed (overrides the config)");
    cmd->add_option("--out", f.out, "output directory (overrides the config)");
    cmd->add_option("--override", f.overrides, "dotted-path override, e.g. approx.lengths=[4]")->take_all();
}

json resolve(const std::string& kind, const RunFlags& f) {
    const json doc = f.config.empty() ? json() : ftn::exp::read_json_file(f.config);
    auto cfg = ftn::exp::resolve_config(kind, doc, f.overrides);
    if (f.seed) cfg["seed"] = *f.seed;
    if (!f.out.empty()) cfg["output_dir"] = f.out;
    return cfg;
}

int run(int argc, char** argv) {
    CLI::App app{"ftn: trainable LSTM pooling experiments"};
    app.require_subcommand(1);
    RunFlags approx_f, classify_f, loc_f, resp_f;
    std::uint64_t grad_seed = 1;
    auto* approx = app.add_subcommand("approx", "train one pooling unit to approximate max or average pooling");
    auto* classify = app.add_subcommand("classify", "train and evaluate a classifier on CIFAR");
    auto* locations = app.add_subcommand("analyze-locations", "histogram of argmax locations of a max pooling layer");
    auto* response = app.add_subcommand("analyze-response", "response curves of trained pooling units");
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of the backward rules");
    add_run_flags(approx, approx_f);
    add_run_flags(classify, classify_f);
    add_run_flags(locations, loc_f);
    add_run_flags(response, resp_f);
    gradcheck->add_option("--seed", grad_seed, "seed for the random check points");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ftn::ErrorCategory::config);
    }

    if (*gradcheck) {
        bool ok = true;
        for (const auto& c : ftn::exp::run_gradcheck_suite(grad_seed)) {
            std::printf("%-13s %s  max rel error %.3g (rtol %.0e, %zu points)\n", c.name.c_str(),
                        c.passed() ? "PASS" : "FAIL", c.max_rel_error, c.rtol, c.points);
            ok = ok && c.passed();
        }
        return ok ? 0 : static_cast<int>(ftn::ErrorCategory::numeric);
    }

    if (*approx) {
        const auto cfg = resolve("approx", approx_f);
        const auto rep = ftn::exp::run_approx(cfg, cfg.at("output_dir").get<std::string>(), &std::cerr);
        for (const auto& r : rep.lengths) {
            std::printf("%s L=%zu  MAE T1 %s  T2 %s  T3 %s  (untrained T1 %s)\n",
                        ftn::data::to_string(rep.target).c_str(), r.length, ftn::exp::format_real(r.mae[0]).c_str(),
                        ftn::exp::format_real(r.mae[1]).c_str(), ftn::exp::format_real(r.mae[2]).c_str(),
                        ftn::exp::format_real(r.untrained_mae[0]).c_str());
        }
    } else if (*classify) {
        const auto cfg = resolve("classify", classify_f);
        const auto rep = ftn::exp::run_classify(cfg, cfg.at("output_dir").get<std::string>(), &std::cerr);
        std::printf("test error %s after %lld iterations (%zu parameters)\n", ftn::exp::format_real(rep.test_error).c_str(),
                    static_cast<long long>(rep.iterations), rep.parameters);
    } else if (*locations) {
        const auto cfg = resolve("analyze_locations", loc_f);
        const auto rep = ftn::exp::run_analyze_locations(cfg, cfg.at("output_dir").get<std::string>());
        std::printf("layer %zu: %zu regions, median count %s, max count %zu\n", rep.layer, rep.regions,
                    ftn::exp::format_real(rep.median).c_str(), rep.max);
    } else if (*response) {
        const auto cfg = resolve("analyze_response", resp_f);
        for (const auto& l : ftn::exp::run_analyze_response(cfg, cfg.at("output_dir").get<std::string>())) {
            std::printf("%s (k=%zu): corr(lstm, avg) %s, corr(lstm, max) %s\n", l.name.c_str(), l.k,
                        ftn::exp::format_real(l.corr_avg).c_str(), ftn::exp::format_real(l.corr_max).c_str());
        }
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ftn::Error& e) {
        std::fprintf(stderr, "ftn: error: %s\n", e.what());
        return static_cast<int>(e.category());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "ftn: error: %s\n", e.what());
        return static_cast<int>(ftn::ErrorCategory::generic);
    }
}
