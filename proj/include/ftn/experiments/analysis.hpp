#pragma once

// Post-hoc analyses of trained networks:
//  - location histogram: how many distinct positions of a max-pooling region
//    win the argmax for at least one channel;
//  - response curves: a pooling unit's output on random regions whose
//    maximum is pinned, against the max and average oracles.

#include "ftn/checkpoint.hpp"
#include "ftn/data/cifar.hpp"
#include "ftn/data/synthetic.hpp"
#include "ftn/data/whitening.hpp"
#include "ftn/experiments/classify.hpp"
#include "ftn/experiments/config.hpp"
#include "ftn/experiments/report.hpp"
#include "ftn/lstm_pool.hpp"
#include "ftn/network.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

namespace ftn::exp {

struct RegionRef {
    std::size_t image = 0, row = 0, col = 0; ///< output-grid position
};

/// For each region of `feat` ([N,C,H,W]), the number of distinct positions
/// that are the argmax of at least one channel. Ties go to the lowest
/// row-major index.
template <typename T>
std::vector<std::size_t> location_counts(const Tensor<T>& feat, std::size_t k, std::size_t stride,
                                         const std::vector<RegionRef>& regions) {
    if (feat.rank() != 4) throw ShapeError("location_counts: expected [N,C,H,W], got " + to_string(feat.shape()));
    const std::size_t n = feat.dim(0), c = feat.dim(1), h = feat.dim(2), w = feat.dim(3);
    if (k == 0 || stride == 0 || h < k || w < k) throw ShapeError("location_counts: bad region geometry");
    const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
    std::vector<std::size_t> counts;
    counts.reserve(regions.size());
    std::vector<char> hit(k * k);
    for (const auto& r : regions) {
        if (r.image >= n || r.row >= oh || r.col >= ow) throw ShapeError("location_counts: region outside the feature map");
        std::fill(hit.begin(), hit.end(), 0);
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T* plane = feat.ptr() + (r.image * c + ch) * h * w;
            std::size_t best = 0;
            T best_v = plane[(r.row * stride) * w + r.col * stride];
            for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < k; ++j) {
                    const T v = plane[(r.row * stride + i) * w + r.col * stride + j];
                    if (v > best_v) {
                        best_v = v;
                        best = i * k + j;
                    }
                }
            hit[best] = 1;
        }
        counts.push_back(static_cast<std::size_t>(std::count(hit.begin(), hit.end(), 1)));
    }
    return counts;
}

/// Every region of every image, in order.
inline std::vector<RegionRef> all_regions(std::size_t images, std::size_t out_h, std::size_t out_w) {
    std::vector<RegionRef> out;
    out.reserve(images * out_h * out_w);
    for (std::size_t i = 0; i < images; ++i)
        for (std::size_t y = 0; y < out_h; ++y)
            for (std::size_t x = 0; x < out_w; ++x) out.push_back({i, y, x});
    return out;
}

/// Histogram over 1..k*k of location counts.
inline std::vector<std::size_t> count_histogram(const std::vector<std::size_t>& counts, std::size_t k) {
    std::vector<std::size_t> hist(k * k, 0);
    for (auto c : counts) {
        if (c == 0 || c > k * k) throw Error(ErrorCategory::generic, "count_histogram: count out of range");
        ++hist[c - 1];
    }
    return hist;
}

inline double median(std::vector<std::size_t> v) {
    if (v.empty()) return 0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? static_cast<double>(v[m]) : 0.5 * static_cast<double>(v[m - 1] + v[m]);
}

struct LocationReport {
    std::size_t layer = 0, k = 0, regions = 0;
    std::vector<std::size_t> histogram; ///< entry c-1 counts regions with c locations
    double median = 0;
    std::size_t max = 0;
};

namespace detail {

/// Whitened images the analysed network sees: the configured dataset's test
/// split, or (images = "synthetic") smooth random images whitened on
/// themselves.
inline Tensor<float> analysis_images(const json& cfg, std::size_t count, std::uint64_t seed) {
    const auto source = get<std::string>(cfg, "analysis.images");
    const auto lambda = get<double>(cfg, "analysis.zca_lambda");
    if (source == "synthetic") {
        Rng rng = Rng::derive(seed, 0xB01);
        auto imgs = data::smooth_images(count, 3, 32, 32, rng);
        return data::apply_whitening(data::fit_whitening(imgs, lambda), imgs);
    }
    if (source != "cifar") throw ConfigError("analysis.images must be 'cifar' or 'synthetic', got '" + source + "'");
    const auto variant = data::parse_cifar_variant(get<std::string>(cfg, "analysis.dataset"));
    const auto root = data_root(get<std::string>(cfg, "analysis.data_root"));
    // The transform the classifier was trained under: fitted on the same
    // training subset, sharing its cache entry.
    const auto subset = get<std::size_t>(cfg, "analysis.train_subset");
    const auto train = data::head(data::load_cifar(root, variant, "train"), subset);
    const auto zca = whitening_for(train, data::cifar_split_files(root, variant, "train"), train.size(), lambda,
                                   get<std::string>(cfg, "analysis.whitening_cache"), nullptr);
    auto test = data::head(data::load_cifar(root, variant, "test"), count);
    return data::apply_whitening(zca, test.images);
}

} // namespace detail

/// Index of the analysed max pooling layer: `layer_cfg`, or the first max
/// pooling layer when negative.
inline std::size_t resolve_max_pool_layer(const NetworkSpec& spec, long layer_cfg) {
    const auto& layers = spec.layers;
    if (layer_cfg < 0) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto* p = std::get_if<PoolLayer>(&layers[i]);
            if (p && p->kind == PoolKind::max) return i;
        }
        throw ConfigError("analyze_locations: network has no max pooling layer");
    }
    const auto layer = static_cast<std::size_t>(layer_cfg);
    const auto* p = layer < layers.size() ? std::get_if<PoolLayer>(&layers[layer]) : nullptr;
    if (!p || p->kind != PoolKind::max) {
        throw ConfigError("analyze_locations: layer " + std::to_string(layer) + " is not a max pooling layer");
    }
    return layer;
}

/// Location histogram of max pooling layer `layer` of `model` over
/// `n_patches` regions sampled without replacement from the feature maps of
/// `images`.
inline LocationReport location_histogram(Model<float>& model, const Tensor<float>& images, std::size_t layer,
                                         std::size_t n_patches, std::uint64_t seed) {
    const auto& layers = model.spec().layers;
    resolve_max_pool_layer(model.spec(), static_cast<long>(layer));
    const auto& pool = std::get<PoolLayer>(layers[layer]);
    if (n_patches == 0) throw ConfigError("analyze_locations: n_patches must be positive");

    // Features feeding the pooling layer, computed in eval mode in chunks.
    const std::size_t n = images.dim(0), chunk = 50;
    std::vector<Tensor<float>> parts;
    for (std::size_t i0 = 0; i0 < n; i0 += chunk) {
        const std::size_t m = std::min(chunk, n - i0);
        Tensor<float> batch(Shape{m, images.dim(1), images.dim(2), images.dim(3)});
        const std::size_t per = images.size() / n;
        std::copy(images.ptr() + i0 * per, images.ptr() + (i0 + m) * per, batch.ptr());
        Tape<float> tape;
        parts.push_back(model.forward(tape, batch, Mode::eval, nullptr, layer).output.value());
    }
    const Shape fs = parts.front().shape();
    Tensor<float> feat(Shape{n, fs[1], fs[2], fs[3]});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.ptr(), p.ptr() + p.size(), feat.ptr() + off);
        off += p.size();
    }

    const std::size_t oh = (fs[2] - pool.k) / pool.stride + 1, ow = (fs[3] - pool.k) / pool.stride + 1;
    auto regions = all_regions(n, oh, ow);
    if (regions.size() > n_patches) {
        // Partial Fisher-Yates: a deterministic sample without replacement.
        Rng rng = Rng::derive(seed, 0xB02);
        for (std::size_t i = 0; i < n_patches; ++i) std::swap(regions[i], regions[i + rng.below(regions.size() - i)]);
        regions.resize(n_patches);
    }
    const auto counts = location_counts(feat, pool.k, pool.stride, regions);
    LocationReport rep;
    rep.layer = layer;
    rep.k = pool.k;
    rep.regions = counts.size();
    rep.histogram = count_histogram(counts, pool.k);
    rep.median = median(counts);
    rep.max = *std::max_element(counts.begin(), counts.end());
    return rep;
}

/// Writes locations.csv (count,regions) and summary.json.
inline LocationReport run_analyze_locations(const json& cfg, const std::filesystem::path& out) {
    const auto seed = get<std::uint64_t>(cfg, "seed");
    const auto ckpt = get<std::string>(cfg, "analysis.checkpoint");
    if (ckpt.empty()) throw ConfigError("analyze_locations: analysis.checkpoint is required");
    auto model = load_checkpoint<float>(ckpt);
    const auto n_patches = get<std::size_t>(cfg, "analysis.n_patches");
    const auto& in = model.spec().input;
    if (in.size() != 3) throw ShapeError("analyze_locations: network input must be [C,H,W]");
    prepare_run_dir(out, cfg);

    const std::size_t layer = resolve_max_pool_layer(model.spec(), get<long>(cfg, "analysis.layer"));
    const auto& pool = std::get<PoolLayer>(model.spec().layers[layer]);
    const Shape& fin = layer == 0 ? in : model.shapes()[layer - 1];
    const std::size_t per_image = ((fin[1] - pool.k) / pool.stride + 1) * ((fin[2] - pool.k) / pool.stride + 1);
    const auto images = detail::analysis_images(cfg, (n_patches + per_image - 1) / per_image, seed);
    if (images.size() / images.dim(0) != shape_size(in)) {
        throw ShapeError("analyze_locations: images do not match the network input " + to_string(in));
    }
    auto rep = location_histogram(model, images.reshaped(Shape{images.dim(0), in[0], in[1], in[2]}), layer, n_patches, seed);

    CsvWriter csv(out / "locations.csv", {"count", "regions"});
    for (std::size_t c = 0; c < rep.histogram.size(); ++c) {
        csv.row({static_cast<std::int64_t>(c + 1), static_cast<std::int64_t>(rep.histogram[c])});
    }
    CsvWriter metrics(out / "metrics.csv", {"layer", "regions", "median_count", "max_count"});
    metrics.row({static_cast<std::int64_t>(rep.layer), static_cast<std::int64_t>(rep.regions), rep.median,
                 static_cast<std::int64_t>(rep.max)});
    json summary = summary_header(cfg);
    summary["layer"] = rep.layer;
    summary["region_size"] = rep.k;
    summary["regions"] = rep.regions;
    summary["median_count"] = rep.median;
    summary["max_count"] = rep.max;
    summary["histogram"] = rep.histogram;
    write_json(out / "summary.json", summary);
    return rep;
}

// ---------------------------------------------------------------------------
// Response curves

struct ResponseRow {
    double avg = 0, max = 0, lstm = 0;
};

/// n random k x k regions with entries U[0, fixed_max] and one entry (at a
/// random position) set to fixed_max; rows sorted by the avg oracle.
inline std::vector<ResponseRow> response_curve(const LstmPoolParams<double>& unit, const Modulation& psi, std::size_t k,
                                               std::size_t n, double fixed_max, Rng& rng) {
    if (k == 0 || n == 0) throw ConfigError("analyze_response: region size and n must be positive");
    if (!(fixed_max > 0)) throw ConfigError("analyze_response: fixed_max must be positive");
    std::vector<ResponseRow> rows;
    rows.reserve(n);
    std::vector<double> region(k * k);
    for (std::size_t i = 0; i < n; ++i) {
        for (auto& v : region) v = rng.uniform(0.0, fixed_max);
        region[rng.below(region.size())] = fixed_max;
        rows.push_back({avg_pool_oracle<double>(region), max_pool_oracle<double>(region),
                        lstm_sequence<double>(unit, psi, region)});
    }
    std::stable_sort(rows.begin(), rows.end(), [](const ResponseRow& a, const ResponseRow& b) { return a.avg < b.avg; });
    return rows;
}

/// Pearson correlation; zero when either column is constant.
inline double correlation(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

struct ResponseLayer {
    std::string name; ///< "layer<i>" or "params"
    std::size_t k = 0;
    std::vector<ResponseRow> rows;
    double corr_avg = 0, corr_max = 0;
};

/// Probes every lstm pooling unit of a checkpoint, or an explicit 12-value
/// parameter list (analysis.params, with analysis.region_size and
/// analysis.modulation). Per-region units are probed through region 0's
/// unit. Writes response_<name>.csv per unit, metrics.csv and summary.json.
inline std::vector<ResponseLayer> run_analyze_response(const json& cfg, const std::filesystem::path& out) {
    const auto seed = get<std::uint64_t>(cfg, "seed");
    const auto n = get<std::size_t>(cfg, "analysis.n");
    const auto fixed_max = get<double>(cfg, "analysis.fixed_max");
    const auto ckpt = get<std::string>(cfg, "analysis.checkpoint");
    const auto& params_j = cfg.at("analysis").at("params");

    struct Probe {
        std::string name;
        LstmPoolParams<double> unit;
        Modulation psi;
        std::size_t k;
    };
    std::vector<Probe> probes;
    if (!params_j.is_null()) {
        if (!ckpt.empty()) throw ConfigError("analyze_response: give either analysis.checkpoint or analysis.params, not both");
        std::vector<double> v;
        try {
            v = params_j.get<std::vector<double>>();
        } catch (const json::exception&) {
            throw ConfigError("analyze_response: analysis.params must be a list of 12 numbers");
        }
        if (v.size() != kLstmParamCount) throw ConfigError("analyze_response: analysis.params must hold 12 numbers");
        probes.push_back({"params", LstmPoolParams<double>::from_span(v),
                          parse_modulation(get<std::string>(cfg, "analysis.modulation")),
                          get<std::size_t>(cfg, "analysis.region_size")});
    } else {
        if (ckpt.empty()) throw ConfigError("analyze_response: analysis.checkpoint or analysis.params is required");
        auto model = load_checkpoint<double>(ckpt);
        const auto& layers = model.spec().layers;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto* p = std::get_if<PoolLayer>(&layers[i]);
            if (!p || p->kind != PoolKind::lstm) continue;
            const auto& t = model.pool_unit(i);
            probes.push_back({"layer" + std::to_string(i),
                              LstmPoolParams<double>::from_span(std::span<const double>(t.ptr(), kLstmParamCount)),
                              model.pool_modulation(i), p->k});
        }
        if (probes.empty()) throw ConfigError("analyze_response: checkpoint has no lstm pooling layer");
    }

    prepare_run_dir(out, cfg);
    std::vector<ResponseLayer> result;
    CsvWriter metrics(out / "metrics.csv", {"unit", "region_size", "corr_avg", "corr_max"});
    json summary = summary_header(cfg);
    for (std::size_t idx = 0; idx < probes.size(); ++idx) {
        const auto& pr = probes[idx];
        Rng rng = Rng::derive(seed, 0xB03, idx);
        ResponseLayer layer{pr.name, pr.k, response_curve(pr.unit, pr.psi, pr.k, n, fixed_max, rng), 0, 0};
        std::vector<double> avg, mx, lstm;
        CsvWriter csv(out / ("response_" + pr.name + ".csv"), {"avg", "max", "lstm"});
        for (const auto& r : layer.rows) {
            csv.row({r.avg, r.max, r.lstm});
            avg.push_back(r.avg);
            mx.push_back(r.max);
            lstm.push_back(r.lstm);
        }
        layer.corr_avg = correlation(lstm, avg);
        layer.corr_max = correlation(lstm, mx);
        metrics.row({pr.name, static_cast<std::int64_t>(pr.k), layer.corr_avg, layer.corr_max});
        summary["units"][pr.name] = {{"region_size", pr.k}, {"corr_avg", layer.corr_avg}, {"corr_max", layer.corr_max}};
        result.push_back(std::move(layer));
    }
    write_json(out / "summary.json", summary);
    return result;
}

} // namespace ftn::exp
