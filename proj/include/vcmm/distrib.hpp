#pragma once

#include "vcmm/estimator.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace vcmm {

struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Wire format (normative, versioned)
//
// All integers and floats little-endian.
//   magic   "VCMM" (4 bytes)
//   version u16 = 1
//   kind    u16
//   dims    u32 fe=(p+1)Q, u32 q, u64 n_k, u32 partition_id
//   payload count(kind, fe, q) float64 values
//   crc     u32, CRC-32 (IEEE) of the payload bytes
//
// Payload field order by kind:
//   SUFFSTATS       a, b, lowtri(C), d, rowmajor(B), lowtri(H)
//   THETA_BROADCAST beta, alpha, sigma2_eps, lowtri(Sigma_alpha)
//   SCORE           g_beta, g_alpha            (unpenalized)
//   SCALAR_RSS      rss
//   PIVOT_HESSIAN   beta0, alpha0, sigma2_0, lowtri(Sigma_alpha0),
//                   lowtri([[C1,B1],[B1',H1]])
//
// lowtri(M) is the row-major lower triangle (row i, columns 0..i).
// The payload length is an exact function of (kind, fe, q).
// ---------------------------------------------------------------------------

enum class WireKind : std::uint16_t {
    SuffStatsMsg = 0,
    ThetaBroadcast = 1,
    Score = 2,
    ScalarRss = 3,
    PivotHessian = 4,
};

constexpr std::uint32_t kCoordinatorId = 0xFFFFFFFFu;

struct WireDims {
    std::uint32_t fe = 0;
    std::uint32_t q = 0;
    std::uint64_t n = 0;
    std::uint32_t partition_id = 0;
};

struct WireMessage {
    WireKind kind = WireKind::SuffStatsMsg;
    WireDims dims;
    std::vector<double> payload;
};

std::size_t payload_count(WireKind kind, std::uint32_t fe, std::uint32_t q);

std::vector<std::uint8_t> serialize(const WireMessage& msg);
WireMessage deserialize(const std::vector<std::uint8_t>& bytes);

std::uint32_t crc32_ieee(const std::uint8_t* data, std::size_t len);

// Typed payload codecs.
WireMessage encode_suffstats(const SuffStats& stats, std::uint32_t partition_id);
SuffStats decode_suffstats(const WireMessage& msg);

/// theta messages carry (beta, alpha, sigma2, Sigma_alpha). The covariance
/// travels as a full lower triangle; the receiver re-imposes the structure of
/// `cov_template` (global run configuration) bit-exactly.
WireMessage encode_theta(const ModelParams& theta, WireKind kind, const WireDims& dims);
ModelParams decode_theta(const WireMessage& msg, const RandomEffectCov& cov_template,
                         const PenaltySpec& penalty);

WireMessage encode_score(const ScoreVector& score, std::uint32_t partition_id, std::uint64_t n);
ScoreVector decode_score(const WireMessage& msg);

WireMessage encode_rss(double rss, std::uint32_t partition_id, std::uint64_t n,
                       std::uint32_t fe, std::uint32_t q);
double decode_rss(const WireMessage& msg);

WireMessage encode_pivot(const ModelParams& theta0, const MatrixXd& curvature,
                         std::uint32_t partition_id, std::uint64_t n);
struct PivotPayload {
    ModelParams theta0;
    MatrixXd curvature;
};
PivotPayload decode_pivot(const WireMessage& msg, const RandomEffectCov& cov_template,
                          const PenaltySpec& penalty);

void write_message_file(const std::string& path, const WireMessage& msg);
WireMessage read_message_file(const std::string& path);

// ---------------------------------------------------------------------------
// Binary partition container ("VCMP"): same envelope discipline with a header
// of (p, M, q, n, partition_id); payload y, rowmajor X, rowmajor H,
// rowmajor Z; CRC-32 of the payload.
// ---------------------------------------------------------------------------

void write_partition_binary(const std::string& path, const Partition& part);
Partition read_partition_binary(const std::string& path);
bool is_partition_binary(const std::string& path);

// ---------------------------------------------------------------------------
// Communication ledger and budget audit
// ---------------------------------------------------------------------------

enum class ProtocolMode { Summary, OneStep };

/// Scalar counts (64-bit payload values) per node and message kind.
/// Upstream = worker to coordinator; downstream = broadcasts, logged
/// separately because Eq-3 style budgets may or may not charge them.
struct CommLedger {
    ProtocolMode mode = ProtocolMode::Summary;
    std::uint32_t fe = 0;
    std::uint32_t q = 0;
    int K = 0;
    std::map<int, std::map<WireKind, long>> upstream;
    std::map<int, std::map<WireKind, long>> downstream;

    long d() const { return static_cast<long>(fe) + q; }
    void log_up(int node, WireKind kind, long scalars) { upstream[node][kind] += scalars; }
    void log_down(int node, WireKind kind, long scalars) { downstream[node][kind] += scalars; }
    long node_upstream_total(int node, bool include_pivot_hessian = true) const;
    long upstream_total(bool include_pivot_hessian = true) const;
    long downstream_total() const;
};

struct BudgetReport {
    double c = 0.0;
    long d = 0;
    int k = 0;
    struct NodeLine {
        int node;
        long scalars;        // upstream, pivot-Hessian exempt
        long exempt;         // pivot-Hessian scalars (charged, not checked)
        long limit;          // c * d
        bool pass;
    };
    std::vector<NodeLine> nodes;
    long total_scalars = 0;          // sum of checked upstream scalars
    long total_limit = 0;            // c * d * k
    bool total_pass = false;
    bool pass = false;               // all nodes and the total
    long upstream_inclusive = 0;     // including exempt pivot Hessian
    long downstream_scalars = 0;     // broadcasts, reported separately
    std::string to_string() const;
};

/// Per-node check against c*d plus the Eq-3 total against c*d*k.
/// The pivot Hessian is charged to the ledger but exempt from the check.
BudgetReport budget_check(const CommLedger& ledger, double c);

// ---------------------------------------------------------------------------
// Coordinator / worker simulation
// ---------------------------------------------------------------------------

struct ProtocolConfig {
    ProtocolMode mode = ProtocolMode::Summary;
    double budget_c = 8.0;
    FitConfig fit;
};

struct ProtocolResult {
    FitResult fit;
    std::optional<GibbsResult> gibbs;
    CommLedger ledger;
    BudgetReport budget;
};

/// Workers hold the partitions, compute local summaries/scores, and exchange
/// only WireMessages with the coordinator (everything crosses a real
/// serialize/deserialize boundary). A null partition simulates a failed
/// worker and is reported by id.
ProtocolResult run_protocol(const std::vector<const Partition*>& partitions,
                            const TensorSplineBasis& basis, const ModelParams& init,
                            const ProtocolConfig& cfg);

}  // namespace vcmm
