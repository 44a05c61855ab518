#include "vcmm/distrib.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <future>
#include <sstream>

namespace vcmm {

namespace {

constexpr std::array<char, 4> kMagicMsg = {'V', 'C', 'M', 'M'};
constexpr std::array<char, 4> kMagicPart = {'V', 'C', 'M', 'P'};
constexpr std::uint16_t kVersion = 1;

// --- little-endian primitives ---------------------------------------------

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(v & 0xFF);
    out.push_back((v >> 8) & 0xFF);
}
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back((v >> (8 * i)) & 0xFF);
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back((v >> (8 * i)) & 0xFF);
}
void put_f64(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

struct Cursor {
    const std::uint8_t* p;
    std::size_t left;
    void need(std::size_t n) const {
        if (left < n) throw WireError("truncated payload (need " + std::to_string(n) +
                                      " bytes, have " + std::to_string(left) + ")");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = p[0] | (std::uint16_t(p[1]) << 8);
        p += 2;
        left -= 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
        p += 4;
        left -= 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
        p += 8;
        left -= 8;
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
};

std::size_t lowtri_count(std::size_t n) { return n * (n + 1) / 2; }

void push_lowtri(std::vector<double>& out, const MatrixXd& M) {
    for (int i = 0; i < M.rows(); ++i)
        for (int j = 0; j <= i; ++j) out.push_back(M(i, j));
}

MatrixXd pop_lowtri(const double*& p, int n) {
    MatrixXd M(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
            M(i, j) = *p++;
            M(j, i) = M(i, j);
        }
    return M;
}

void push_vec(std::vector<double>& out, const VectorXd& v) {
    out.insert(out.end(), v.data(), v.data() + v.size());
}

VectorXd pop_vec(const double*& p, int n) {
    VectorXd v(n);
    for (int i = 0; i < n; ++i) v(i) = *p++;
    return v;
}

void push_rowmajor(std::vector<double>& out, const MatrixXd& M) {
    for (int i = 0; i < M.rows(); ++i)
        for (int j = 0; j < M.cols(); ++j) out.push_back(M(i, j));
}

MatrixXd pop_rowmajor(const double*& p, int rows, int cols) {
    MatrixXd M(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) M(i, j) = *p++;
    return M;
}

/// Rebuild a structured covariance from a transmitted full matrix without
/// re-deriving values (bit-exact: block variances are read off the diagonal).
RandomEffectCov cov_from_matrix(const MatrixXd& S, const RandomEffectCov& tmpl) {
    switch (tmpl.kind()) {
        case RandomEffectCov::Kind::Isotropic:
            return RandomEffectCov::isotropic(tmpl.q(), S.rows() > 0 ? S(0, 0) : 1.0);
        case RandomEffectCov::Kind::BlockIsotropic: {
            std::vector<double> s2(tmpl.block_sizes().size());
            int off = 0;
            for (size_t b = 0; b < tmpl.block_sizes().size(); ++b) {
                s2[b] = S(off, off);
                off += tmpl.block_sizes()[b];
            }
            return RandomEffectCov::block_isotropic(tmpl.block_sizes(), s2);
        }
        case RandomEffectCov::Kind::Full:
            return RandomEffectCov::full(S, 0.0);
    }
    throw WireError("unreachable covariance kind");
}

}  // namespace

std::uint32_t crc32_ieee(const std::uint8_t* data, std::size_t len) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

std::size_t payload_count(WireKind kind, std::uint32_t fe, std::uint32_t q) {
    const std::size_t D = fe + q;
    switch (kind) {
        case WireKind::SuffStatsMsg:
            return 1 + fe + lowtri_count(fe) + q + std::size_t(fe) * q + lowtri_count(q);
        case WireKind::ThetaBroadcast:
            return fe + q + 1 + lowtri_count(q);
        case WireKind::Score:
            return fe + q;
        case WireKind::ScalarRss:
            return 1;
        case WireKind::PivotHessian:
            return fe + q + 1 + lowtri_count(q) + lowtri_count(D);
    }
    throw WireError("unknown message kind " + std::to_string(int(kind)));
}

std::vector<std::uint8_t> serialize(const WireMessage& msg) {
    const std::size_t want = payload_count(msg.kind, msg.dims.fe, msg.dims.q);
    if (msg.payload.size() != want)
        throw WireError("payload size " + std::to_string(msg.payload.size()) +
                        " does not match dims/kind (expected " + std::to_string(want) + ")");
    std::vector<std::uint8_t> out;
    out.reserve(4 + 2 + 2 + 20 + msg.payload.size() * 8 + 4);
    out.insert(out.end(), kMagicMsg.begin(), kMagicMsg.end());
    put_u16(out, kVersion);
    put_u16(out, static_cast<std::uint16_t>(msg.kind));
    put_u32(out, msg.dims.fe);
    put_u32(out, msg.dims.q);
    put_u64(out, msg.dims.n);
    put_u32(out, msg.dims.partition_id);
    const std::size_t payload_start = out.size();
    for (double v : msg.payload) put_f64(out, v);
    const std::uint32_t crc = crc32_ieee(out.data() + payload_start, msg.payload.size() * 8);
    put_u32(out, crc);
    return out;
}

WireMessage deserialize(const std::vector<std::uint8_t>& bytes) {
    Cursor cur{bytes.data(), bytes.size()};
    cur.need(4);
    if (std::memcmp(cur.p, kMagicMsg.data(), 4) != 0)
        throw WireError("bad magic (not a VCMM message)");
    cur.p += 4;
    cur.left -= 4;
    const std::uint16_t version = cur.u16();
    if (version != kVersion)
        throw WireError("unsupported format version " + std::to_string(version));
    const std::uint16_t kind_raw = cur.u16();
    if (kind_raw > static_cast<std::uint16_t>(WireKind::PivotHessian))
        throw WireError("unknown message kind " + std::to_string(kind_raw));
    WireMessage msg;
    msg.kind = static_cast<WireKind>(kind_raw);
    msg.dims.fe = cur.u32();
    msg.dims.q = cur.u32();
    msg.dims.n = cur.u64();
    msg.dims.partition_id = cur.u32();
    const std::size_t count = payload_count(msg.kind, msg.dims.fe, msg.dims.q);
    cur.need(count * 8 + 4);
    const std::uint8_t* payload_bytes = cur.p;
    msg.payload.resize(count);
    for (std::size_t i = 0; i < count; ++i) msg.payload[i] = cur.f64();
    const std::uint32_t stored = cur.u32();
    if (cur.left != 0) throw WireError("trailing bytes after message");
    const std::uint32_t actual = crc32_ieee(payload_bytes, count * 8);
    if (stored != actual)
        throw WireError("checksum failure (stored " + std::to_string(stored) + ", computed " +
                        std::to_string(actual) + ")");
    return msg;
}

// ---------------------------------------------------------------------------
// Typed codecs
// ---------------------------------------------------------------------------

WireMessage encode_suffstats(const SuffStats& stats, std::uint32_t partition_id) {
    WireMessage msg;
    msg.kind = WireKind::SuffStatsMsg;
    msg.dims = {static_cast<std::uint32_t>(stats.fe_len()),
                static_cast<std::uint32_t>(stats.q_len()),
                static_cast<std::uint64_t>(stats.n), partition_id};
    msg.payload.reserve(payload_count(msg.kind, msg.dims.fe, msg.dims.q));
    msg.payload.push_back(stats.a);
    push_vec(msg.payload, stats.b);
    push_lowtri(msg.payload, stats.C);
    push_vec(msg.payload, stats.d);
    push_rowmajor(msg.payload, stats.B);
    push_lowtri(msg.payload, stats.H);
    return msg;
}

SuffStats decode_suffstats(const WireMessage& msg) {
    if (msg.kind != WireKind::SuffStatsMsg) throw WireError("message is not SUFFSTATS");
    const int fe = msg.dims.fe, q = msg.dims.q;
    const double* p = msg.payload.data();
    SuffStats s = SuffStats::zero(fe, q);
    s.a = *p++;
    s.b = pop_vec(p, fe);
    s.C = pop_lowtri(p, fe);
    s.d = pop_vec(p, q);
    s.B = pop_rowmajor(p, fe, q);
    s.H = pop_lowtri(p, q);
    s.n = static_cast<long>(msg.dims.n);
    return s;
}

WireMessage encode_theta(const ModelParams& theta, WireKind kind, const WireDims& dims) {
    WireMessage msg;
    msg.kind = kind;
    msg.dims = dims;
    msg.payload.reserve(payload_count(kind, dims.fe, dims.q));
    push_vec(msg.payload, theta.beta);
    push_vec(msg.payload, theta.alpha);
    msg.payload.push_back(theta.sigma2_eps);
    push_lowtri(msg.payload, theta.sigma_alpha.realize());
    return msg;
}

ModelParams decode_theta(const WireMessage& msg, const RandomEffectCov& cov_template,
                         const PenaltySpec& penalty) {
    if (msg.kind != WireKind::ThetaBroadcast) throw WireError("message is not THETA_BROADCAST");
    const int fe = msg.dims.fe, q = msg.dims.q;
    const double* p = msg.payload.data();
    ModelParams theta;
    theta.beta = pop_vec(p, fe);
    theta.alpha = pop_vec(p, q);
    theta.sigma2_eps = *p++;
    theta.sigma_alpha = cov_from_matrix(pop_lowtri(p, q), cov_template);
    theta.penalty = penalty;
    return theta;
}

WireMessage encode_score(const ScoreVector& score, std::uint32_t partition_id, std::uint64_t n) {
    WireMessage msg;
    msg.kind = WireKind::Score;
    msg.dims = {static_cast<std::uint32_t>(score.g_beta.size()),
                static_cast<std::uint32_t>(score.g_alpha.size()), n, partition_id};
    push_vec(msg.payload, score.g_beta);
    push_vec(msg.payload, score.g_alpha);
    return msg;
}

ScoreVector decode_score(const WireMessage& msg) {
    if (msg.kind != WireKind::Score) throw WireError("message is not SCORE");
    const double* p = msg.payload.data();
    ScoreVector s;
    s.g_beta = pop_vec(p, msg.dims.fe);
    s.g_alpha = pop_vec(p, msg.dims.q);
    s.penalized = false;
    return s;
}

WireMessage encode_rss(double rss, std::uint32_t partition_id, std::uint64_t n,
                       std::uint32_t fe, std::uint32_t q) {
    WireMessage msg;
    msg.kind = WireKind::ScalarRss;
    msg.dims = {fe, q, n, partition_id};
    msg.payload.push_back(rss);
    return msg;
}

double decode_rss(const WireMessage& msg) {
    if (msg.kind != WireKind::ScalarRss) throw WireError("message is not SCALAR_RSS");
    return msg.payload[0];
}

WireMessage encode_pivot(const ModelParams& theta0, const MatrixXd& curvature,
                         std::uint32_t partition_id, std::uint64_t n) {
    WireMessage msg;
    msg.kind = WireKind::PivotHessian;
    msg.dims = {static_cast<std::uint32_t>(theta0.beta.size()),
                static_cast<std::uint32_t>(theta0.alpha.size()), n, partition_id};
    push_vec(msg.payload, theta0.beta);
    push_vec(msg.payload, theta0.alpha);
    msg.payload.push_back(theta0.sigma2_eps);
    push_lowtri(msg.payload, theta0.sigma_alpha.realize());
    push_lowtri(msg.payload, curvature);
    return msg;
}

PivotPayload decode_pivot(const WireMessage& msg, const RandomEffectCov& cov_template,
                          const PenaltySpec& penalty) {
    if (msg.kind != WireKind::PivotHessian) throw WireError("message is not PIVOT_HESSIAN");
    const int fe = msg.dims.fe, q = msg.dims.q;
    const double* p = msg.payload.data();
    PivotPayload out;
    out.theta0.beta = pop_vec(p, fe);
    out.theta0.alpha = pop_vec(p, q);
    out.theta0.sigma2_eps = *p++;
    out.theta0.sigma_alpha = cov_from_matrix(pop_lowtri(p, q), cov_template);
    out.theta0.penalty = penalty;
    out.curvature = pop_lowtri(p, fe + q);
    return out;
}

void write_message_file(const std::string& path, const WireMessage& msg) {
    const auto bytes = serialize(msg);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write message file: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

WireMessage read_message_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open message file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

// ---------------------------------------------------------------------------
// Binary partition container
// ---------------------------------------------------------------------------

void write_partition_binary(const std::string& path, const Partition& part) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagicPart.begin(), kMagicPart.end());
    put_u16(out, kVersion);
    put_u16(out, 0);
    put_u32(out, static_cast<std::uint32_t>(part.X.cols()));
    put_u32(out, static_cast<std::uint32_t>(part.H.cols()));
    put_u32(out, static_cast<std::uint32_t>(part.Z.cols()));
    put_u64(out, static_cast<std::uint64_t>(part.rows()));
    put_u32(out, static_cast<std::uint32_t>(part.partition_id));
    const std::size_t payload_start = out.size();
    for (long r = 0; r < part.rows(); ++r) {
        put_f64(out, part.y(r));
        for (int j = 0; j < part.X.cols(); ++j) put_f64(out, part.X(r, j));
        for (int j = 0; j < part.H.cols(); ++j) put_f64(out, part.H(r, j));
        for (int j = 0; j < part.Z.cols(); ++j) put_f64(out, part.Z(r, j));
    }
    put_u32(out, crc32_ieee(out.data() + payload_start, out.size() - payload_start));
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write partition file: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), out.size());
}

Partition read_partition_binary(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open partition file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    Cursor cur{bytes.data(), bytes.size()};
    cur.need(4);
    if (std::memcmp(cur.p, kMagicPart.data(), 4) != 0)
        throw WireError("bad magic (not a VCMP partition file)");
    cur.p += 4;
    cur.left -= 4;
    if (cur.u16() != kVersion) throw WireError("unsupported partition format version");
    cur.u16();
    const int p = cur.u32();
    const int M = cur.u32();
    const int q = cur.u32();
    const long n = static_cast<long>(cur.u64());
    const int pid = static_cast<int>(cur.u32());
    const std::size_t vals = std::size_t(n) * (1 + p + M + q);
    cur.need(vals * 8 + 4);
    const std::uint8_t* payload_bytes = cur.p;
    Partition part;
    part.partition_id = pid;
    part.y.resize(n);
    part.X.resize(n, p);
    part.H.resize(n, M);
    part.Z.resize(n, q);
    for (long r = 0; r < n; ++r) {
        part.y(r) = cur.f64();
        for (int j = 0; j < p; ++j) part.X(r, j) = cur.f64();
        for (int j = 0; j < M; ++j) part.H(r, j) = cur.f64();
        for (int j = 0; j < q; ++j) part.Z(r, j) = cur.f64();
    }
    const std::uint32_t stored = cur.u32();
    if (cur.left != 0) throw WireError("trailing bytes after partition payload");
    if (stored != crc32_ieee(payload_bytes, vals * 8))
        throw WireError("partition file checksum failure");
    return part;
}

bool is_partition_binary(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) return false;
    char magic[4];
    f.read(magic, 4);
    return f.gcount() == 4 && std::memcmp(magic, kMagicPart.data(), 4) == 0;
}

// ---------------------------------------------------------------------------
// Ledger and budget
// ---------------------------------------------------------------------------

long CommLedger::node_upstream_total(int node, bool include_pivot_hessian) const {
    auto it = upstream.find(node);
    if (it == upstream.end()) return 0;
    long total = 0;
    for (const auto& [kind, scalars] : it->second) {
        if (!include_pivot_hessian && kind == WireKind::PivotHessian) continue;
        total += scalars;
    }
    return total;
}

long CommLedger::upstream_total(bool include_pivot_hessian) const {
    long total = 0;
    for (const auto& [node, _] : upstream)
        total += node_upstream_total(node, include_pivot_hessian);
    return total;
}

long CommLedger::downstream_total() const {
    long total = 0;
    for (const auto& [node, kinds] : downstream)
        for (const auto& [kind, scalars] : kinds) total += scalars;
    return total;
}

BudgetReport budget_check(const CommLedger& ledger, double c) {
    BudgetReport rep;
    rep.c = c;
    rep.d = ledger.d();
    rep.k = ledger.K;
    const long node_limit = static_cast<long>(c * rep.d);
    bool all_pass = true;
    for (int node = 0; node < ledger.K; ++node) {
        BudgetReport::NodeLine line;
        line.node = node;
        line.scalars = ledger.node_upstream_total(node, false);
        line.exempt = ledger.node_upstream_total(node, true) - line.scalars;
        line.limit = node_limit;
        line.pass = line.scalars <= node_limit;
        all_pass = all_pass && line.pass;
        rep.nodes.push_back(line);
        rep.total_scalars += line.scalars;
    }
    rep.total_limit = static_cast<long>(c * rep.d * rep.k);
    rep.total_pass = rep.total_scalars <= rep.total_limit;
    rep.pass = all_pass && rep.total_pass;
    rep.upstream_inclusive = ledger.upstream_total(true);
    rep.downstream_scalars = ledger.downstream_total();
    return rep;
}

std::string BudgetReport::to_string() const {
    std::ostringstream os;
    os << "budget check: c=" << c << " d=" << d << " k=" << k
       << " (node limit " << (nodes.empty() ? 0 : nodes.front().limit)
       << ", total limit " << total_limit << ")\n";
    for (const auto& line : nodes) {
        os << "  node " << line.node << ": " << line.scalars << " scalars";
        if (line.exempt > 0) os << " (+" << line.exempt << " exempt pivot hessian)";
        os << " -> " << (line.pass ? "pass" : "FAIL")
           << " (margin " << (line.limit - line.scalars) << ")\n";
    }
    os << "  total: " << total_scalars << " / " << total_limit << " -> "
       << (total_pass ? "pass" : "FAIL") << "\n";
    os << "  upstream incl. exempt: " << upstream_inclusive
       << "; downstream broadcasts: " << downstream_scalars << "\n";
    os << "  overall: " << (pass ? "pass" : "FAIL") << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Protocol simulation
// ---------------------------------------------------------------------------

namespace {

/// In-process worker. Owns its partition; everything it exports is a
/// serialized message.
class Worker {
  public:
    Worker(const Partition* part, const TensorSplineBasis& basis)
        : part_(part), basis_(basis) {}

    bool alive() const { return part_ != nullptr; }
    int id() const { return part_ ? part_->partition_id : -1; }
    long rows() const { return part_ ? part_->rows() : 0; }

    std::vector<std::uint8_t> suffstats_message() {
        ensure_stats();
        return serialize(encode_suffstats(*stats_, part_->partition_id));
    }

    std::vector<std::uint8_t> pivot_message(const ModelParams& init, const FitConfig& cfg) {
        ensure_stats();
        FitConfig pilot_cfg = cfg;
        pilot_cfg.method = FitMethod::SS;
        const FitResult pilot = block_fit(*stats_, init, pilot_cfg);
        pilot_iterations_ = pilot.iterations;
        pilot_converged_ = pilot.converged;
        return serialize(encode_pivot(pilot.theta, data_curvature_joint(*stats_),
                                      part_->partition_id, stats_->n));
    }

    // score and rss rounds stream the raw rows in O(n d); no quadratic
    // summaries are formed outside the pivot
    std::vector<std::uint8_t> score_message(const ModelParams& theta0) {
        const ScoreVector s = raw_score(*part_, basis_, theta0);
        return serialize(encode_score(s, part_->partition_id, part_->rows()));
    }

    std::vector<std::uint8_t> rss_message(const ModelParams& theta1) {
        const std::uint32_t fe = static_cast<std::uint32_t>(theta1.beta.size());
        const std::uint32_t q = static_cast<std::uint32_t>(theta1.alpha.size());
        return serialize(encode_rss(raw_rss(*part_, basis_, theta1), part_->partition_id,
                                    part_->rows(), fe, q));
    }

    int pilot_iterations() const { return pilot_iterations_; }
    bool pilot_converged() const { return pilot_converged_; }

  private:
    void ensure_stats() {
        if (!stats_) stats_ = compute_local(*part_, basis_);
    }
    const Partition* part_;
    const TensorSplineBasis& basis_;
    std::optional<SuffStats> stats_;
    int pilot_iterations_ = 0;
    bool pilot_converged_ = false;
};

}  // namespace

ProtocolResult run_protocol(const std::vector<const Partition*>& partitions,
                            const TensorSplineBasis& basis, const ModelParams& init,
                            const ProtocolConfig& cfg) {
    if (partitions.empty()) throw ProtocolError("no partitions supplied");
    for (size_t k = 0; k < partitions.size(); ++k)
        if (partitions[k] == nullptr)
            throw ProtocolError("worker " + std::to_string(k) + " failed (missing partition)");

    const int K = static_cast<int>(partitions.size());
    std::vector<Worker> workers;
    workers.reserve(K);
    for (const Partition* p : partitions) workers.emplace_back(p, basis);

    ProtocolResult result;
    CommLedger& ledger = result.ledger;
    ledger.K = K;
    ledger.mode = cfg.mode;

    auto log_and_decode = [&](int node, std::vector<std::uint8_t> bytes) {
        WireMessage msg = deserialize(bytes);
        ledger.fe = msg.dims.fe;
        ledger.q = msg.dims.q;
        ledger.log_up(node, msg.kind, static_cast<long>(msg.payload.size()));
        return msg;
    };

    if (cfg.mode == ProtocolMode::Summary) {
        // one SUFFSTATS message per worker, computed concurrently
        std::vector<std::future<std::vector<std::uint8_t>>> inflight;
        inflight.reserve(K);
        for (int k = 0; k < K; ++k)
            inflight.push_back(std::async(std::launch::async,
                                          [&workers, k] { return workers[k].suffstats_message(); }));
        std::vector<SuffStats> stats;
        stats.reserve(K);
        for (int k = 0; k < K; ++k)
            stats.push_back(decode_suffstats(log_and_decode(k, inflight[k].get())));
        const SuffStats agg = aggregate(stats);

        PartitionsMeta meta;
        meta.K = K;
        for (const auto& s : stats) meta.n_k.push_back(s.n);
        FitOutput out = fit_from_aggregate(agg, init, cfg.fit, meta);
        result.fit = std::move(out.fit);
        result.gibbs = std::move(out.gibbs);
    } else {
        if (cfg.fit.method != FitMethod::OneStep)
            throw ConfigError("onestep protocol mode requires the onestep method");
        const int pivot = cfg.fit.pivot_node;
        if (pivot < 0 || pivot >= K)
            throw ConfigError("pivot node " + std::to_string(pivot) + " does not exist");
        if (workers[pivot].rows() == 0) throw NumericError("pivot node is empty");

        // round 1a: pivot reports pilot + curvature
        const WireMessage pivot_msg =
            log_and_decode(pivot, workers[pivot].pivot_message(init, cfg.fit));
        const PivotPayload pp = decode_pivot(pivot_msg, init.sigma_alpha, init.penalty);
        const long n_pivot = static_cast<long>(pivot_msg.dims.n);

        // round 1b: broadcast theta0, collect scores
        const WireDims bdims{pivot_msg.dims.fe, pivot_msg.dims.q, 0, kCoordinatorId};
        const WireMessage theta0_bcast = encode_theta(pp.theta0, WireKind::ThetaBroadcast, bdims);
        const auto theta0_bytes = serialize(theta0_bcast);
        const int fe = static_cast<int>(pivot_msg.dims.fe);
        const int q = static_cast<int>(pivot_msg.dims.q);
        VectorXd g_beta = VectorXd::Zero(fe);
        VectorXd g_alpha = VectorXd::Zero(q);
        long N = 0;
        std::vector<std::future<std::vector<std::uint8_t>>> score_futures;
        score_futures.reserve(K);
        for (int k = 0; k < K; ++k) {
            ledger.log_down(k, WireKind::ThetaBroadcast,
                            static_cast<long>(theta0_bcast.payload.size()));
            const ModelParams theta0_local =
                decode_theta(deserialize(theta0_bytes), init.sigma_alpha, init.penalty);
            score_futures.push_back(std::async(
                std::launch::async,
                [&workers, k, theta0_local] { return workers[k].score_message(theta0_local); }));
        }
        for (int k = 0; k < K; ++k) {
            const WireMessage m = log_and_decode(k, score_futures[k].get());
            const ScoreVector s = decode_score(m);
            g_beta += s.g_beta;
            g_alpha += s.g_alpha;
            N += static_cast<long>(m.dims.n);
        }

        // correction (identical arithmetic to onestep_fit)
        ModelParams theta1 = onestep_apply(pp.theta0, std::move(g_beta), std::move(g_alpha),
                                           pp.curvature, n_pivot, N);

        // round 2: broadcast theta1, collect residual scalars
        const WireMessage theta1_bcast = encode_theta(theta1, WireKind::ThetaBroadcast, bdims);
        const auto theta1_bytes = serialize(theta1_bcast);
        double rss = 0.0;
        std::vector<std::future<std::vector<std::uint8_t>>> rss_futures;
        rss_futures.reserve(K);
        for (int k = 0; k < K; ++k) {
            ledger.log_down(k, WireKind::ThetaBroadcast,
                            static_cast<long>(theta1_bcast.payload.size()));
            const ModelParams theta1_local =
                decode_theta(deserialize(theta1_bytes), init.sigma_alpha, init.penalty);
            rss_futures.push_back(std::async(
                std::launch::async,
                [&workers, k, theta1_local] { return workers[k].rss_message(theta1_local); }));
        }
        for (int k = 0; k < K; ++k) rss += decode_rss(log_and_decode(k, rss_futures[k].get()));

        theta1.sigma2_eps = clamp_variance(rss, N);
        if (q > 0) theta1.sigma_alpha = theta1.sigma_alpha.projected_from(theta1.alpha);

        FitResult fit;
        fit.method = "onestep";
        fit.theta = std::move(theta1);
        fit.iterations = workers[pivot].pilot_iterations() + 1;
        fit.converged = workers[pivot].pilot_converged();
        fit.gradient_norm = 0.0;
        result.fit = std::move(fit);
    }

    result.budget = budget_check(ledger, cfg.budget_c);
    return result;
}

}  // namespace vcmm
