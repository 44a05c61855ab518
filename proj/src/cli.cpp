#include "vcmm/cli.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>
#include <thread>

namespace vcmm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt6(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Manifest / truth files
// ---------------------------------------------------------------------------

json cov_to_json(const RandomEffectCov& cov) {
    json j;
    switch (cov.kind()) {
        case RandomEffectCov::Kind::Isotropic:
            j["kind"] = "isotropic";
            j["q"] = cov.q();
            break;
        case RandomEffectCov::Kind::BlockIsotropic:
            j["kind"] = "block_isotropic";
            j["blocks"] = cov.block_sizes();
            break;
        case RandomEffectCov::Kind::Full:
            j["kind"] = "full";
            j["q"] = cov.q();
            break;
    }
    return j;
}

RandomEffectCov cov_from_json(const json& j) {
    const std::string kind = j.at("kind");
    if (kind == "isotropic") return RandomEffectCov::isotropic(j.at("q"), 1.0);
    if (kind == "block_isotropic") {
        std::vector<int> blocks = j.at("blocks");
        return RandomEffectCov::block_isotropic(blocks,
                                                std::vector<double>(blocks.size(), 1.0));
    }
    if (kind == "full") {
        const int q = j.at("q");
        return RandomEffectCov::full(MatrixXd::Identity(q, q), 0.0);
    }
    throw ConfigError("manifest: unknown covariance kind '" + kind + "'");
}

void write_manifest(const fs::path& dir, const GeneratedData& data, const std::string& format) {
    json j;
    const ScenarioSpec& s = data.spec;
    j["example"] = s.example;
    j["seed"] = s.seed;
    j["k"] = s.k;
    j["n"] = s.n;
    j["p"] = data.dims.p;
    j["m"] = data.dims.M;
    j["q"] = data.dims.q;
    j["basis"] = data.basis.to_config_string();
    j["orthogonalize"] = s.orthogonalize;
    j["penalty"] = {{"kind", data.penalty.kind == PenaltySpec::Kind::Ridge
                                 ? "ridge"
                                 : "second_difference"},
                    {"lambda", s.lambda},
                    {"block_size", data.penalty.block_size},
                    {"num_blocks", data.penalty.num_blocks}};
    j["cov"] = cov_to_json(data.cov_structure);
    j["split"] = s.test_fraction;
    j["noise_sd"] = s.noise_sd;
    j["sigma_alpha"] = s.sigma_alpha;
    j["adjacent_corr"] = s.adjacent_corr;
    j["format"] = format;
    std::ofstream out(dir / "manifest.json");
    out << j.dump(2) << "\n";
}

void write_truth(const fs::path& dir, const TruthInfo& truth) {
    json j;
    j["example"] = truth.example;
    j["beta0"] = truth.beta0;
    j["alpha"] = std::vector<double>(truth.alpha.data(), truth.alpha.data() + truth.alpha.size());
    j["sigma_alpha"] = truth.sigma_alpha;
    j["sigma_eps"] = truth.sigma_eps;
    std::ofstream out(dir / "truth.json");
    out << j.dump(2) << "\n";
}

std::string partition_filename(int id, const std::string& format) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "partition_%03d.%s", id,
                  format == "bin" ? "bin" : "csv");
    return buf;
}

/// Loaded dataset in the same shape the generator produces.
GeneratedData load_dataset(const std::string& dir_str) {
    const fs::path dir(dir_str);
    const fs::path mf = dir / "manifest.json";
    if (!fs::exists(mf)) throw ConfigError("no manifest.json in " + dir_str);
    json j;
    {
        std::ifstream in(mf);
        in >> j;
    }
    ScenarioSpec spec;
    spec.example = j.at("example");
    spec.seed = j.at("seed");
    spec.k = j.at("k");
    spec.n = j.at("n");
    spec.test_fraction = j.at("split");
    spec.noise_sd = j.at("noise_sd");
    spec.sigma_alpha = j.at("sigma_alpha");
    spec.adjacent_corr = j.at("adjacent_corr");
    spec.lambda = j.at("penalty").at("lambda");
    spec.orthogonalize = j.value("orthogonalize", false);

    TensorSplineBasis basis = TensorSplineBasis::from_config_string(j.at("basis"));
    GeneratedData data{spec, ModelDims{}, std::move(basis), {}, {}, TruthInfo{},
                       cov_from_json(j.at("cov")), PenaltySpec{}};
    data.dims.p = j.at("p");
    data.dims.M = j.at("m");
    data.dims.q = j.at("q");
    data.dims.Q = data.basis.size();
    data.dims.K = spec.k;
    data.dims.N = spec.n;

    const std::string pkind = j.at("penalty").at("kind");
    data.penalty.kind = pkind == "ridge" ? PenaltySpec::Kind::Ridge
                                         : PenaltySpec::Kind::SecondDifference;
    data.penalty.lambda = std::max(spec.lambda, 0.0);
    data.penalty.block_size = j.at("penalty").at("block_size");
    data.penalty.num_blocks = j.at("penalty").at("num_blocks");

    const std::string format = j.at("format");
    for (int k = 0; k < spec.k; ++k) {
        const fs::path pf = dir / partition_filename(k, format);
        if (!fs::exists(pf))
            throw ProtocolError("worker " + std::to_string(k) + " failed (missing partition " +
                                pf.string() + ")");
        Partition part = format == "bin" ? read_partition_binary(pf.string())
                                         : read_partition_csv(pf.string(), data.dims);
        part.partition_id = k;
        validate_partition(part, data.dims);
        data.partitions.push_back(std::move(part));
    }
    const fs::path tf = dir / (format == "bin" ? "test.bin" : "test.csv");
    if (fs::exists(tf)) {
        data.test = format == "bin" ? read_partition_binary(tf.string())
                                    : read_partition_csv(tf.string(), data.dims);
        data.test.partition_id = spec.k;
    } else {
        data.test.y.resize(0);
        data.test.X.resize(0, data.dims.p);
        data.test.H.resize(0, data.dims.M);
        data.test.Z.resize(0, data.dims.q);
    }

    const fs::path truth_file = dir / "truth.json";
    if (fs::exists(truth_file)) {
        json t;
        std::ifstream in(truth_file);
        in >> t;
        data.truth.example = t.at("example");
        data.truth.beta0 = t.at("beta0");
        const std::vector<double> a = t.at("alpha");
        data.truth.alpha = Eigen::Map<const VectorXd>(a.data(), a.size());
        data.truth.sigma_alpha = t.at("sigma_alpha");
        data.truth.sigma_eps = t.at("sigma_eps");
    }

    if (spec.orthogonalize) {
        MatrixXd H_train(data.dims.N, data.dims.M);
        long row = 0;
        for (const auto& part : data.partitions) {
            H_train.middleRows(row, part.rows()) = part.H;
            row += part.rows();
        }
        data.basis = orthogonalize(data.basis, H_train);
    }
    return data;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

void write_params_csv(const fs::path& path, const ModelParams& theta) {
    std::ofstream out(path);
    out << "name,value\n";
    for (int i = 0; i < theta.beta.size(); ++i)
        out << "beta_" << i << "," << fmt(theta.beta(i)) << "\n";
    for (int i = 0; i < theta.alpha.size(); ++i)
        out << "alpha_" << i << "," << fmt(theta.alpha(i)) << "\n";
    out << "sigma2_eps," << fmt(theta.sigma2_eps) << "\n";
    const MatrixXd S = theta.sigma_alpha.realize();
    if (theta.sigma_alpha.kind() == RandomEffectCov::Kind::BlockIsotropic) {
        const auto& s2 = theta.sigma_alpha.block_sigma2();
        for (size_t b = 0; b < s2.size(); ++b)
            out << "sigma2_alpha_" << b << "," << fmt(s2[b]) << "\n";
    } else if (S.size() > 0) {
        out << "sigma2_alpha_0," << fmt(S(0, 0)) << "\n";
    }
}

void write_coeff_grids(const fs::path& dir, const FitResult& fit, const TensorSplineBasis& basis,
                       int p, int M) {
    const MatrixXd grid = evaluation_grid(M);
    const int Q = basis.size();
    MatrixXd cov;  // joint posterior covariance, when curvature is available
    if (fit.info_matrix) {
        Eigen::LLT<MatrixXd> llt(*fit.info_matrix);
        if (llt.info() == Eigen::Success)
            cov = llt.solve(MatrixXd::Identity(fit.info_matrix->rows(),
                                               fit.info_matrix->cols()));
    }
    for (int k = 0; k <= p; ++k) {
        std::ofstream out(dir / ("coeffgrid_" + std::to_string(k) + ".csv"));
        for (int m = 0; m < M; ++m) out << "h" << (m + 1) << ",";
        out << "estimate,lower,upper\n";
        for (long r = 0; r < grid.rows(); ++r) {
            const VectorXd phi = basis.eval(grid.row(r).transpose());
            const double est = phi.dot(fit.theta.beta.segment(k * Q, Q));
            double half = 0.0;
            if (cov.size() > 0) {
                const MatrixXd block = cov.block(k * Q, k * Q, Q, Q);
                const double var = phi.dot(block * phi);
                half = 1.959963984540054 * std::sqrt(std::max(var, 0.0));
            }
            for (int m = 0; m < M; ++m) out << fmt(grid(r, m)) << ",";
            out << fmt(est) << "," << fmt(est - half) << "," << fmt(est + half) << "\n";
        }
    }
}

void write_fit_report(const fs::path& dir, const FitResult& fit, double lambda) {
    std::ofstream out(dir / "report.txt");
    out << "method: " << fit.method << "\n";
    out << "converged: " << (fit.converged ? "yes" : "no") << "\n";
    out << "iterations: " << fit.iterations << "\n";
    out << "gradient_inf_norm: " << fmt6(fit.gradient_norm) << "\n";
    out << "lambda: " << fmt6(lambda) << "\n";
    out << "sigma2_eps: " << fmt(fit.theta.sigma2_eps) << "\n";
    if (fit.theta.sigma_alpha.kind() == RandomEffectCov::Kind::BlockIsotropic) {
        const auto& s2 = fit.theta.sigma_alpha.block_sigma2();
        for (size_t b = 0; b < s2.size(); ++b)
            out << "sigma2_alpha_" << b << ": " << fmt(s2[b]) << "\n";
    } else if (fit.theta.alpha.size() > 0) {
        out << "sigma2_alpha_0: " << fmt(fit.theta.sigma_alpha.realize()(0, 0)) << "\n";
    }
    out << "seconds: " << fmt6(fit.seconds) << "\n";
    if (fit.recon_error_G > 0 || fit.recon_error_H > 0) {
        out << "recon_error_G: " << fmt6(fit.recon_error_G) << "\n";
        out << "recon_error_H: " << fmt6(fit.recon_error_H) << "\n";
    }
    out << "objective_trace:";
    for (double v : fit.objective_trace) out << " " << fmt6(v);
    out << "\n";
}

void write_metrics_csv(const fs::path& path, const MetricsReport& rep) {
    std::ofstream out(path);
    out << "metric,value\n";
    out << "beta0_hat," << fmt(rep.beta0_hat) << "\n";
    out << "beta0_sqerr," << fmt(rep.beta0_sqerr) << "\n";
    for (size_t b = 0; b < rep.sigma2_alpha_hat.size(); ++b) {
        out << "sigma2_alpha_hat_" << b << "," << fmt(rep.sigma2_alpha_hat[b]) << "\n";
        out << "sigma2_alpha_sqerr_" << b << "," << fmt(rep.sigma2_alpha_sqerr[b]) << "\n";
    }
    out << "sigma2_eps_hat," << fmt(rep.sigma2_eps_hat) << "\n";
    out << "sigma2_eps_sqerr," << fmt(rep.sigma2_eps_sqerr) << "\n";
    for (size_t k = 0; k < rep.fn_grid_mse.size(); ++k) {
        out << "fn_grid_mse_" << k << "," << fmt(rep.fn_grid_mse[k]) << "\n";
        out << "fn_train_mse_" << k << "," << fmt(rep.fn_train_mse[k]) << "\n";
        out << "fn_test_mspe_" << k << "," << fmt(rep.fn_test_mspe[k]) << "\n";
    }
    for (size_t b = 0; b < rep.alpha_mspe.size(); ++b)
        out << "alpha_mspe_" << b << "," << fmt(rep.alpha_mspe[b]) << "\n";
    out << "y_test_mspe," << fmt(rep.y_test_mspe) << "\n";
    out << "seconds," << fmt6(rep.seconds) << "\n";
}

void write_ledger(const fs::path& path, const CommLedger& ledger, const BudgetReport& budget) {
    std::ofstream out(path);
    auto kind_name = [](WireKind k) {
        switch (k) {
            case WireKind::SuffStatsMsg: return "SUFFSTATS";
            case WireKind::ThetaBroadcast: return "THETA_BROADCAST";
            case WireKind::Score: return "SCORE";
            case WireKind::ScalarRss: return "SCALAR_RSS";
            case WireKind::PivotHessian: return "PIVOT_HESSIAN";
        }
        return "?";
    };
    out << "mode: " << (ledger.mode == ProtocolMode::Summary ? "summary" : "onestep") << "\n";
    out << "d: " << ledger.d() << " (fe " << ledger.fe << " + q " << ledger.q << "), K: "
        << ledger.K << "\n";
    out << "upstream scalars per node:\n";
    for (const auto& [node, kinds] : ledger.upstream) {
        out << "  node " << node << ":";
        for (const auto& [kind, scalars] : kinds)
            out << " " << kind_name(kind) << "=" << scalars;
        out << "\n";
    }
    out << "downstream scalars per node:\n";
    for (const auto& [node, kinds] : ledger.downstream) {
        out << "  node " << node << ":";
        for (const auto& [kind, scalars] : kinds)
            out << " " << kind_name(kind) << "=" << scalars;
        out << "\n";
    }
    out << budget.to_string();
}

SpectralMode spectral_from_flags(const std::string& svd, double tau, int rank,
                                 std::uint64_t seed) {
    if (svd == "full") return SpectralMode::full();
    if (svd == "truncated")
        return rank > 0 ? SpectralMode::truncated_rank(rank) : SpectralMode::truncated_tau(tau);
    if (svd == "randomized") {
        if (rank <= 0) throw ConfigError("--svd randomized requires a positive rank");
        return SpectralMode::randomized(rank, seed);
    }
    throw ConfigError("unknown --svd value '" + svd + "'");
}

FitMethod method_from_name(const std::string& m) {
    if (m == "ss") return FitMethod::SS;
    if (m == "direct") return FitMethod::Direct;
    if (m == "svd") return FitMethod::SVD;
    if (m == "onestep") return FitMethod::OneStep;
    if (m == "gibbs") return FitMethod::Gibbs;
    throw ConfigError("unknown method '" + m + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

int cmd_generate(const GenerateOptions& opt) {
    if (opt.out_dir.empty()) throw ConfigError("--out directory is required");
    if (opt.format != "csv" && opt.format != "bin")
        throw ConfigError("--format must be csv or bin");
    ScenarioSpec spec = opt.spec;
    if (opt.cv) spec.lambda = -1.0;
    const GeneratedData data = generate(spec);

    const fs::path dir(opt.out_dir);
    fs::create_directories(dir);
    for (const auto& part : data.partitions) {
        const fs::path pf = dir / partition_filename(part.partition_id, opt.format);
        if (opt.format == "bin")
            write_partition_binary(pf.string(), part);
        else
            write_partition_csv(pf.string(), part);
    }
    if (data.test.rows() > 0) {
        const fs::path tf = dir / (opt.format == "bin" ? "test.bin" : "test.csv");
        if (opt.format == "bin")
            write_partition_binary(tf.string(), data.test);
        else
            write_partition_csv(tf.string(), data.test);
    }
    write_manifest(dir, data, opt.format);
    write_truth(dir, data.truth);
    if (!opt.quiet)
        std::cout << "wrote " << data.partitions.size() << " partitions + test + truth to "
                  << dir.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

int cmd_fit(const FitOptions& opt) {
    if (opt.data_dir.empty()) throw ConfigError("--data directory is required");
    if (opt.out_dir.empty()) throw ConfigError("--out directory is required");
    const GeneratedData data = load_dataset(opt.data_dir);
    const fs::path out_dir(opt.out_dir);
    fs::create_directories(out_dir);

    double lambda = opt.lambda;
    if (lambda < 0.0) lambda = data.spec.lambda;
    if (lambda < 0.0)
        lambda = select_lambda_cv(data.partitions, data.basis, data);

    FitConfig cfg;
    cfg.method = method_from_name(opt.method);
    cfg.max_iter = opt.max_iter;
    cfg.tol_grad = opt.tol_grad;
    cfg.tol_param = opt.tol_param;
    cfg.variance_update =
        opt.variance == "fixed" ? VarianceUpdate::Fixed : VarianceUpdate::Iterate;
    cfg.svd_beta = spectral_from_flags(opt.svd, opt.svd_tau, opt.svd_rank_beta, opt.seed);
    cfg.svd_alpha = spectral_from_flags(opt.svd, opt.svd_tau, opt.svd_rank_alpha, opt.seed);
    cfg.pivot_node = opt.pivot;
    cfg.gibbs.n_iter = opt.gibbs_iters;
    cfg.gibbs.burn_in = opt.gibbs_burnin;
    cfg.gibbs.seed = opt.seed;
    cfg.gibbs.store_draws = false;

    const ModelParams init = initial_params(data, lambda);

    FitResult fit;
    bool wrote_ledger = false;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        if (!opt.mode.empty()) {
            ProtocolConfig pcfg;
            pcfg.fit = cfg;
            pcfg.budget_c = opt.budget_c;
            if (opt.mode == "summary")
                pcfg.mode = ProtocolMode::Summary;
            else if (opt.mode == "onestep")
                pcfg.mode = ProtocolMode::OneStep;
            else
                throw ConfigError("--mode must be summary or onestep");
            if (cfg.method == FitMethod::Direct)
                throw ConfigError("the direct method is centralized; drop --mode");
            if (pcfg.mode == ProtocolMode::OneStep && cfg.method != FitMethod::OneStep)
                throw ConfigError("--mode onestep requires --method onestep");
            std::vector<const Partition*> parts;
            for (const auto& p : data.partitions) parts.push_back(&p);
            const ProtocolResult pr = run_protocol(parts, data.basis, init, pcfg);
            fit = pr.fit;
            write_ledger(out_dir / "ledger.txt", pr.ledger, pr.budget);
            wrote_ledger = true;
        } else if (cfg.method == FitMethod::Direct) {
            fit = direct_oracle(data.partitions, data.basis, init, cfg);
        } else if (cfg.method == FitMethod::OneStep) {
            std::vector<SuffStats> stats;
            for (const auto& p : data.partitions)
                stats.push_back(compute_local(p, data.basis));
            fit = onestep_fit(stats, init, cfg);
        } else {
            std::vector<SuffStats> stats;
            for (const auto& p : data.partitions)
                stats.push_back(compute_local(p, data.basis));
            FitOutput out = fit_from_aggregate(aggregate(stats), init, cfg);
            fit = out.fit;
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::runtime_error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    }
    fit.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    write_fit_report(out_dir, fit, lambda);
    write_params_csv(out_dir / "params.csv", fit.theta);
    write_coeff_grids(out_dir, fit, data.basis, data.dims.p, data.dims.M);
    if (data.truth.alpha.size() > 0) {
        const MetricsReport rep = evaluate(fit, data);
        write_metrics_csv(out_dir / "metrics.csv", rep);
    }
    if (!opt.quiet) {
        std::cout << "method " << fit.method << (fit.converged ? " converged" : " DID NOT converge")
                  << " in " << fit.iterations << " iterations; reports in " << out_dir.string()
                  << (wrote_ledger ? " (incl. ledger.txt)" : "") << "\n";
    }
    return fit.converged ? 0 : 3;
}

// ---------------------------------------------------------------------------
// replicate
// ---------------------------------------------------------------------------

namespace {

struct RepOutcome {
    std::vector<MetricsReport> by_method;
};

RepOutcome run_one_replication(const ReplicateOptions& opt, int rep) {
    ScenarioSpec spec = opt.spec;
    spec.seed = opt.spec.seed + static_cast<std::uint64_t>(rep);
    const GeneratedData data = generate(spec);

    double lambda = spec.lambda;
    if (lambda < 0.0) lambda = select_lambda_cv(data.partitions, data.basis, data);
    const ModelParams init = initial_params(data, lambda);

    std::vector<const Partition*> parts;
    for (const auto& p : data.partitions) parts.push_back(&p);

    RepOutcome outcome;
    for (const auto& name : opt.methods) {
        FitConfig cfg;
        cfg.method = method_from_name(name);
        cfg.gibbs.seed = spec.seed;
        cfg.gibbs.store_draws = false;
        if (cfg.method == FitMethod::SVD) {
            cfg.svd_alpha = spectral_from_flags(opt.svd, opt.svd_tau, opt.svd_rank_alpha,
                                                spec.seed);
        }
        const auto t0 = std::chrono::steady_clock::now();
        FitResult fit;
        if (cfg.method == FitMethod::Direct) {
            fit = direct_oracle(data.partitions, data.basis, init, cfg);
        } else {
            ProtocolConfig pcfg;
            pcfg.fit = cfg;
            pcfg.mode = cfg.method == FitMethod::OneStep ? ProtocolMode::OneStep
                                                         : ProtocolMode::Summary;
            fit = run_protocol(parts, data.basis, init, pcfg).fit;
        }
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        MetricsReport rep_m = evaluate(fit, data);
        rep_m.seconds = wall;
        rep_m.method = name;
        outcome.by_method.push_back(std::move(rep_m));
    }
    return outcome;
}

void mean_sd(const std::vector<double>& v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= v.size();
    sd = 0.0;
    if (v.size() > 1) {
        for (double x : v) sd += (x - mean) * (x - mean);
        sd = std::sqrt(sd / (v.size() - 1));
    }
}

}  // namespace

ReplicateTable run_replications(const ReplicateOptions& opt) {
    if (opt.reps < 1) throw ConfigError("--reps must be >= 1");
    if (opt.methods.empty()) throw ConfigError("--methods must name at least one method");
    for (const auto& m : opt.methods) method_from_name(m);

    std::vector<RepOutcome> outcomes(opt.reps);
    const int threads = opt.threads > 0
                            ? opt.threads
                            : std::max(1u, std::thread::hardware_concurrency());
    for (int start = 0; start < opt.reps; start += threads) {
        const int stop = std::min(opt.reps, start + threads);
        std::vector<std::future<RepOutcome>> running;
        for (int r = start; r < stop; ++r)
            running.push_back(
                std::async(std::launch::async, [&opt, r] { return run_one_replication(opt, r); }));
        for (int r = start; r < stop; ++r) outcomes[r] = running[r - start].get();
    }

    const int n_methods = static_cast<int>(opt.methods.size());
    const MetricsReport& probe = outcomes[0].by_method[0];
    const int n_sigma = static_cast<int>(probe.sigma2_alpha_hat.size());
    const int n_fn = static_cast<int>(probe.fn_grid_mse.size());
    const int n_alpha = static_cast<int>(probe.alpha_mspe.size());

    ReplicateTable table;
    table.methods = opt.methods;
    std::vector<std::vector<double>> rows;  // per row: reps values per method appended

    auto add_row = [&](const std::string& name,
                       const std::function<double(const MetricsReport&)>& get) {
        table.row_names.push_back(name);
        std::vector<double> cells;
        for (int m = 0; m < n_methods; ++m) {
            std::vector<double> vals;
            for (int r = 0; r < opt.reps; ++r) vals.push_back(get(outcomes[r].by_method[m]));
            double mean, sd;
            mean_sd(vals, mean, sd);
            cells.push_back(mean);
            cells.push_back(sd);
        }
        rows.push_back(cells);
    };

    add_row("mse_beta0", [](const MetricsReport& r) { return r.beta0_sqerr; });
    for (int b = 0; b < n_sigma; ++b)
        add_row("mse_sigma2_alpha_" + std::to_string(b),
                [b](const MetricsReport& r) { return r.sigma2_alpha_sqerr[b]; });
    add_row("mse_sigma2_eps", [](const MetricsReport& r) { return r.sigma2_eps_sqerr; });
    for (int k = 1; k < n_fn; ++k) {
        add_row("train_mse_beta" + std::to_string(k),
                [k](const MetricsReport& r) { return r.fn_train_mse[k]; });
        add_row("test_mspe_beta" + std::to_string(k),
                [k](const MetricsReport& r) { return r.fn_test_mspe[k]; });
        add_row("grid_mse_beta" + std::to_string(k),
                [k](const MetricsReport& r) { return r.fn_grid_mse[k]; });
    }
    for (int b = 0; b < n_alpha; ++b)
        add_row("mspe_alpha_" + std::to_string(b),
                [b](const MetricsReport& r) { return r.alpha_mspe[b]; });
    add_row("total_time_s", [](const MetricsReport& r) { return r.seconds; });

    // speedup vs the first method, per replication
    {
        table.row_names.push_back("speedup_vs_" + opt.methods[0]);
        std::vector<double> cells;
        for (int m = 0; m < n_methods; ++m) {
            std::vector<double> vals;
            for (int r = 0; r < opt.reps; ++r) {
                const double base = outcomes[r].by_method[0].seconds;
                const double own = outcomes[r].by_method[m].seconds;
                vals.push_back(own > 0 ? base / own : 0.0);
            }
            double mean, sd;
            mean_sd(vals, mean, sd);
            cells.push_back(mean);
            cells.push_back(sd);
        }
        rows.push_back(cells);
    }

    // correlations against the first method
    if (n_methods > 1) {
        auto add_corr_scalar = [&](const std::string& name,
                                   const std::function<double(const MetricsReport&)>& get) {
            table.row_names.push_back(name);
            std::vector<double> cells(2 * n_methods, 0.0);
            for (int m = 0; m < n_methods; ++m) {
                if (m == 0 || opt.reps < 2) {
                    cells[2 * m] = 1.0;
                    continue;
                }
                VectorXd a(opt.reps), b(opt.reps);
                for (int r = 0; r < opt.reps; ++r) {
                    a(r) = get(outcomes[r].by_method[0]);
                    b(r) = get(outcomes[r].by_method[m]);
                }
                cells[2 * m] = pearson(a, b);
            }
            rows.push_back(cells);
        };
        add_corr_scalar("corr_beta0", [](const MetricsReport& r) { return r.beta0_hat; });
        add_corr_scalar("corr_sigma2_alpha",
                        [](const MetricsReport& r) { return r.sigma2_alpha_hat[0]; });

        auto add_corr_within = [&](const std::string& name,
                                   const std::function<VectorXd(const MetricsReport&)>& get) {
            table.row_names.push_back(name);
            std::vector<double> cells;
            for (int m = 0; m < n_methods; ++m) {
                std::vector<double> vals;
                for (int r = 0; r < opt.reps; ++r) {
                    if (m == 0) {
                        vals.push_back(1.0);
                        continue;
                    }
                    vals.push_back(
                        pearson(get(outcomes[r].by_method[0]), get(outcomes[r].by_method[m])));
                }
                double mean, sd;
                mean_sd(vals, mean, sd);
                cells.push_back(mean);
                cells.push_back(sd);
            }
            rows.push_back(cells);
        };
        if (n_fn > 1)
            add_corr_within("corr_beta1_fn",
                            [](const MetricsReport& r) { return VectorXd(r.fn_grid_values.col(1)); });
        add_corr_within("corr_theta",
                        [](const MetricsReport& r) { return r.theta_stacked; });
    }

    table.mean.resize(rows.size(), n_methods);
    table.sd.resize(rows.size(), n_methods);
    for (size_t i = 0; i < rows.size(); ++i)
        for (int m = 0; m < n_methods; ++m) {
            table.mean(i, m) = rows[i][2 * m];
            table.sd(i, m) = rows[i][2 * m + 1];
        }
    return table;
}

std::string ReplicateTable::to_text() const {
    std::ostringstream os;
    os << std::left;
    os.width(26);
    os << "metric";
    for (const auto& m : methods) {
        os.width(26);
        os << m;
    }
    os << "\n";
    for (size_t i = 0; i < row_names.size(); ++i) {
        os.width(26);
        os << row_names[i];
        for (size_t m = 0; m < methods.size(); ++m) {
            std::ostringstream cell;
            cell << fmt6(mean(i, m)) << " (" << fmt6(sd(i, m)) << ")";
            os.width(26);
            os << cell.str();
        }
        os << "\n";
    }
    return os.str();
}

std::string ReplicateTable::to_csv() const {
    std::ostringstream os;
    os << "metric";
    for (const auto& m : methods) os << "," << m << "_mean," << m << "_sd";
    os << "\n";
    for (size_t i = 0; i < row_names.size(); ++i) {
        os << row_names[i];
        for (size_t m = 0; m < methods.size(); ++m)
            os << "," << fmt(mean(i, m)) << "," << fmt(sd(i, m));
        os << "\n";
    }
    return os.str();
}

int cmd_replicate(const ReplicateOptions& opt) {
    if (opt.out_dir.empty()) throw ConfigError("--out directory is required");
    const ReplicateTable table = run_replications(opt);
    fs::create_directories(opt.out_dir);
    {
        std::ofstream out(fs::path(opt.out_dir) / "table.csv");
        out << table.to_csv();
    }
    {
        std::ofstream out(fs::path(opt.out_dir) / "table.txt");
        out << table.to_text();
    }
    if (!opt.quiet) std::cout << table.to_text();
    return 0;
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

int cmd_inspect(const InspectOptions& opt) {
    if (opt.file.empty()) throw ConfigError("--file is required");
    if (!fs::exists(opt.file)) throw ConfigError("no such file: " + opt.file);
    if (is_partition_binary(opt.file)) {
        const Partition part = read_partition_binary(opt.file);
        std::cout << "VCMP partition file\n"
                  << "partition_id: " << part.partition_id << "\n"
                  << "rows: " << part.rows() << ", p: " << part.X.cols() << ", M: "
                  << part.H.cols() << ", q: " << part.Z.cols() << "\n";
        if (part.rows() > 0)
            std::cout << "y range: [" << fmt6(part.y.minCoeff()) << ", "
                      << fmt6(part.y.maxCoeff()) << "]\n";
        return 0;
    }
    // try wire message, fall back to text head
    try {
        const WireMessage msg = read_message_file(opt.file);
        const char* kinds[] = {"SUFFSTATS", "THETA_BROADCAST", "SCORE", "SCALAR_RSS",
                               "PIVOT_HESSIAN"};
        std::cout << "VCMM wire message\n"
                  << "kind: " << kinds[static_cast<int>(msg.kind)] << "\n"
                  << "fe: " << msg.dims.fe << ", q: " << msg.dims.q << ", n: " << msg.dims.n
                  << ", partition_id: " << msg.dims.partition_id << "\n"
                  << "payload scalars: " << msg.payload.size() << " (checksum ok)\n";
        if (!msg.payload.empty()) {
            std::cout << "payload head:";
            for (size_t i = 0; i < std::min<size_t>(8, msg.payload.size()); ++i)
                std::cout << " " << fmt6(msg.payload[i]);
            std::cout << "\n";
        }
        return 0;
    } catch (const WireError&) {
        std::ifstream in(opt.file);
        std::string line;
        std::cout << "text file head:\n";
        for (int i = 0; i < 5 && std::getline(in, line); ++i) std::cout << line << "\n";
        return 0;
    }
}

// ---------------------------------------------------------------------------
// CLI wiring
// ---------------------------------------------------------------------------

namespace {

void add_scenario_flags(CLI::App* cmd, ScenarioSpec& spec) {
    cmd->add_option("--example", spec.example, "scenario id (1-4)")->check(CLI::Range(1, 4));
    cmd->add_option("--seed", spec.seed, "RNG seed");
    cmd->add_option("--n", spec.n, "training sample size (0 = example default)");
    cmd->add_option("--k", spec.k, "partition count (0 = example default)");
    cmd->add_option("--q", spec.q_override, "random-effect level count override");
    cmd->add_option("--noise-sd", spec.noise_sd, "residual sd (default 0.25)");
    cmd->add_option("--sigma-alpha", spec.sigma_alpha, "random-effect sd (default 0.5)");
    cmd->add_option("--adjacent-corr", spec.adjacent_corr,
                    "example-2 adjacent correlation (default 0.1)");
    cmd->add_option("--basis-size", spec.basis_size, "basis functions per margin");
    cmd->add_option("--split", spec.test_fraction, "held-out fraction (default 0.2)");
    cmd->add_option("--lambda", spec.lambda, "fixed smoothing weight (default: CV)");
    cmd->add_flag("--orthogonalize", spec.orthogonalize, "orthogonalize the basis");
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"distributed varying-coefficient mixed model engine"};
    app.require_subcommand(1);
    app.set_config("--config", "", "config file (INI/TOML style, [subcommand] sections)");
    app.allow_config_extras(false);

    GenerateOptions gen;
    auto* g = app.add_subcommand("generate", "generate a synthetic scenario dataset");
    add_scenario_flags(g, gen.spec);
    g->add_flag("--cv", gen.cv, "leave lambda for cross-validation at fit time");
    g->add_option("--format", gen.format, "partition file format: csv | bin");
    g->add_option("--out", gen.out_dir, "output directory")->envname("VCMM_OUT");
    g->add_flag("--quiet", gen.quiet, "suppress console output");

    FitOptions fit;
    auto* f = app.add_subcommand("fit", "fit a generated dataset");
    f->add_option("--data", fit.data_dir, "dataset directory (from generate)")->required();
    f->add_option("--method", fit.method, "ss | direct | svd | onestep | gibbs");
    f->add_option("--mode", fit.mode, "protocol simulation: summary | onestep");
    f->add_option("--budget-c", fit.budget_c, "budget constant c (scalars per parameter)");
    f->add_option("--svd", fit.svd, "full | truncated | randomized");
    f->add_option("--svd-tau", fit.svd_tau, "relative truncation threshold");
    f->add_option("--svd-rank-alpha", fit.svd_rank_alpha, "fixed rank for H_aug");
    f->add_option("--svd-rank-beta", fit.svd_rank_beta, "fixed rank for G");
    f->add_option("--pivot", fit.pivot, "pivot node for the one-step method");
    f->add_option("--lambda", fit.lambda, "smoothing weight override");
    f->add_option("--max-iter", fit.max_iter, "sweep cap");
    f->add_option("--tol-grad", fit.tol_grad, "gradient convergence tolerance");
    f->add_option("--tol-param", fit.tol_param, "parameter-change tolerance");
    f->add_option("--variance", fit.variance, "iterate | fixed");
    f->add_option("--gibbs-iters", fit.gibbs_iters, "gibbs iterations");
    f->add_option("--gibbs-burnin", fit.gibbs_burnin, "gibbs burn-in");
    f->add_option("--seed", fit.seed, "seed (gibbs / randomized svd)");
    f->add_option("--out", fit.out_dir, "report directory")->envname("VCMM_OUT");
    f->add_flag("--quiet", fit.quiet, "suppress console output");

    ReplicateOptions rep;
    std::string methods_csv = "direct,ss";
    auto* r = app.add_subcommand("replicate", "run seeded replications and tabulate");
    add_scenario_flags(r, rep.spec);
    r->add_option("--reps", rep.reps, "replication count");
    r->add_option("--methods", methods_csv, "comma-separated method list");
    r->add_option("--threads", rep.threads, "worker threads (0 = hardware)");
    r->add_option("--svd", rep.svd, "svd mode for the svd method");
    r->add_option("--svd-tau", rep.svd_tau, "relative truncation threshold");
    r->add_option("--svd-rank-alpha", rep.svd_rank_alpha, "fixed rank for H_aug");
    r->add_option("--out", rep.out_dir, "output directory")->envname("VCMM_OUT");
    r->add_flag("--quiet", rep.quiet, "suppress console output");

    InspectOptions ins;
    auto* i = app.add_subcommand("inspect", "dump a partition or wire-message file");
    i->add_option("--file", ins.file, "file to inspect")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (g->parsed()) return cmd_generate(gen);
        if (f->parsed()) return cmd_fit(fit);
        if (r->parsed()) {
            rep.methods.clear();
            std::istringstream ms(methods_csv);
            std::string item;
            while (std::getline(ms, item, ','))
                if (!item.empty()) rep.methods.push_back(item);
            return cmd_replicate(rep);
        }
        if (i->parsed()) return cmd_inspect(ins);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::runtime_error& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 4;
    }
    return 2;
}

int run_cli(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args);
}

}  // namespace vcmm
