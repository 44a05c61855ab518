#pragma once

#include "vcmm/simgen.hpp"

#include <string>
#include <vector>

namespace vcmm {

// Exit codes: 0 ok, 2 config error, 3 non-convergence (reports still
// written), 4 numerical failure.

struct GenerateOptions {
    ScenarioSpec spec;
    bool cv = false;           // defer lambda selection to fit time
    std::string format = "csv";  // csv | bin
    std::string out_dir;
    bool quiet = false;
};

struct FitOptions {
    std::string data_dir;
    std::string method = "ss";  // ss | direct | svd | onestep | gibbs
    std::string mode;           // "", summary, onestep
    double budget_c = 8.0;
    std::string svd = "full";   // full | truncated | randomized
    double svd_tau = 1e-10;
    int svd_rank_alpha = 0;
    int svd_rank_beta = 0;
    int pivot = 0;
    double lambda = -1.0;       // < 0: manifest / CV
    int max_iter = 200;
    double tol_grad = 1e-8;
    double tol_param = 1e-10;
    std::string variance = "iterate";  // iterate | fixed
    int gibbs_iters = 20000;
    int gibbs_burnin = 2000;
    std::uint64_t seed = 1;
    std::string out_dir;
    bool quiet = false;
};

struct ReplicateOptions {
    ScenarioSpec spec;
    int reps = 10;
    std::vector<std::string> methods = {"direct", "ss"};
    int threads = 0;  // 0: hardware
    std::string svd = "full";
    double svd_tau = 1e-10;
    int svd_rank_alpha = 0;
    std::string out_dir;
    bool quiet = false;
};

struct InspectOptions {
    std::string file;
};

int cmd_generate(const GenerateOptions& opt);
int cmd_fit(const FitOptions& opt);
int cmd_replicate(const ReplicateOptions& opt);
int cmd_inspect(const InspectOptions& opt);

/// Aggregated replication table (mean/sd rows in the shape of the paper's
/// tables plus cross-method correlations against the first method).
struct ReplicateTable {
    std::vector<std::string> methods;
    std::vector<std::string> row_names;
    MatrixXd mean;  // rows x methods
    MatrixXd sd;
    std::string to_text() const;
    std::string to_csv() const;
};

ReplicateTable run_replications(const ReplicateOptions& opt);

int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

}  // namespace vcmm
