#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ikf/binio.hpp"
#include "ikf/errors.hpp"
#include "ikf/geometry.hpp"
#include "ikf/isosurface.hpp"
#include "ikf/parallel.hpp"
#include "ikf/rng.hpp"
#include "ikf/sampling.hpp"

// The learnable implicit field: sinusoidal positional encoding, sine MLP,
// exact input Jacobians, the three training losses with hand-rolled
// reverse-mode parameter gradients (including the second-order terms the
// gradient losses require), Adam, and the per-shape fitting loops.

namespace ikf {

// ---------------------------------------------------------------------------
// positional encoding
// ---------------------------------------------------------------------------

// Frequencies 2^0*pi .. 2^(bands-1)*pi per coordinate; with the defaults
// (6 bands + raw coordinates) the output is 39-dimensional.
struct PosEncConfig {
    int bands = 6;
    bool include_raw = true;

    int dim() const { return (include_raw ? 3 : 0) + 6 * bands; }

    void validate() const {
        if (bands < 0) throw validation_error("posenc bands must be nonnegative");
        if (dim() <= 0) throw validation_error("posenc output dimension must be positive");
    }
};

// Layout: [raw x,y,z][band0 sin xyz][band0 cos xyz][band1 sin xyz]...
inline Eigen::VectorXd posenc(const Vec3& p, const PosEncConfig& cfg) {
    cfg.validate();
    Eigen::VectorXd out(cfg.dim());
    int at = 0;
    if (cfg.include_raw)
        for (int a = 0; a < 3; ++a) out(at++) = p[a];
    for (int b = 0; b < cfg.bands; ++b) {
        const double f = std::ldexp(1.0, b) * M_PI;
        for (int a = 0; a < 3; ++a) out(at++) = std::sin(f * p[a]);
        for (int a = 0; a < 3; ++a) out(at++) = std::cos(f * p[a]);
    }
    return out;
}

// d posenc / d p; row layout matches posenc, columns are x,y,z.
inline Eigen::MatrixXd posenc_jacobian(const Vec3& p, const PosEncConfig& cfg) {
    cfg.validate();
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(cfg.dim(), 3);
    int at = 0;
    if (cfg.include_raw)
        for (int a = 0; a < 3; ++a) jac(at++, a) = 1.0;
    for (int b = 0; b < cfg.bands; ++b) {
        const double f = std::ldexp(1.0, b) * M_PI;
        for (int a = 0; a < 3; ++a) jac(at++, a) = f * std::cos(f * p[a]);
        for (int a = 0; a < 3; ++a) jac(at++, a) = -f * std::sin(f * p[a]);
    }
    return jac;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

enum class Activation { sine, relu, selu };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::sine: return "sine";
        case Activation::relu: return "relu";
        case Activation::selu: return "selu";
    }
    return "sine";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "sine") return Activation::sine;
    if (s == "relu") return Activation::relu;
    if (s == "selu") return Activation::selu;
    throw validation_error("unknown activation: " + s);
}

namespace detail {

constexpr double kSeluLambda = 1.0507009873554804934193349852946;
constexpr double kSeluAlpha = 1.6732632423543772848170429916717;

// out = sigma(Z), d1 = sigma'(Z); omega only scales the sine activation
inline void activate(Activation act, double omega, const Eigen::MatrixXd& Z,
                     Eigen::MatrixXd& out, Eigen::MatrixXd& d1) {
    switch (act) {
        case Activation::sine: {
            const Eigen::ArrayXXd za = omega * Z.array();
            out = za.sin().matrix();
            d1 = (omega * za.cos()).matrix();
            return;
        }
        case Activation::relu: {
            out = Z.cwiseMax(0.0);
            d1 = (Z.array() > 0.0).cast<double>().matrix();
            return;
        }
        case Activation::selu: {
            const Eigen::ArrayXXd za = Z.array();
            out = (za > 0.0)
                      .select(kSeluLambda * za, kSeluLambda * kSeluAlpha * (za.exp() - 1.0))
                      .matrix();
            d1 = (za > 0.0)
                     .select(Eigen::ArrayXXd::Constant(Z.rows(), Z.cols(), kSeluLambda),
                             out.array() + kSeluLambda * kSeluAlpha)
                     .matrix();
            return;
        }
    }
}

// sigma''(Z) recovered from the stored activation output:
//   sine: -omega^2 * sigma(z); relu: 0; selu: sigma(z) + lambda*alpha for z<0
inline Eigen::MatrixXd second_deriv_from_output(Activation act, double omega,
                                                const Eigen::MatrixXd& out) {
    switch (act) {
        case Activation::sine: return (-omega * omega) * out;
        case Activation::relu: return Eigen::MatrixXd::Zero(out.rows(), out.cols());
        case Activation::selu:
            return (out.array() < 0.0)
                .select(out.array() + kSeluLambda * kSeluAlpha,
                        Eigen::ArrayXXd::Zero(out.rows(), out.cols()))
                .matrix();
    }
    return Eigen::MatrixXd::Zero(out.rows(), out.cols());
}

} // namespace detail

// ---------------------------------------------------------------------------
// network
// ---------------------------------------------------------------------------

struct ImplicitNet {
    std::vector<Eigen::MatrixXd> weights; // W[l]: rows = fan_out, cols = fan_in
    std::vector<Eigen::VectorXd> biases;
    double omega = 30.0;
    Activation activation = Activation::sine;
    PosEncConfig posenc_cfg;
    int out_dim = 1;    // 1 for an SDF head, K for a stacked-UDF head
    int latent_dim = 0; // >0 in conditioned mode; the code is appended to posenc

    int input_dim() const { return posenc_cfg.dim() + latent_dim; }
    int layer_count() const { return static_cast<int>(weights.size()); }

    void validate() const {
        posenc_cfg.validate();
        if (omega <= 0.0) throw validation_error("omega must be positive");
        if (out_dim < 1) throw validation_error("out_dim must be >= 1");
        if (weights.empty() || weights.size() != biases.size())
            throw validation_error("weight/bias layer mismatch");
        int in = input_dim();
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (weights[l].cols() != in || biases[l].size() != weights[l].rows())
                throw validation_error("layer shape mismatch");
            in = static_cast<int>(weights[l].rows());
        }
        if (in != out_dim) throw validation_error("output width mismatch");
    }

    static ImplicitNet make(const std::vector<int>& hidden = {256, 256, 256, 256},
                            int out_dim = 1, const PosEncConfig& pe = {}, double omega = 30.0,
                            Activation act = Activation::sine, int latent_dim = 0) {
        ImplicitNet net;
        net.omega = omega;
        net.activation = act;
        net.posenc_cfg = pe;
        net.out_dim = out_dim;
        net.latent_dim = latent_dim;
        std::vector<int> widths;
        widths.push_back(net.input_dim());
        widths.insert(widths.end(), hidden.begin(), hidden.end());
        widths.push_back(out_dim);
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            net.weights.emplace_back(Eigen::MatrixXd::Zero(widths[l + 1], widths[l]));
            net.biases.emplace_back(Eigen::VectorXd::Zero(widths[l + 1]));
        }
        net.validate();
        return net;
    }
};

// SIREN scheme for sine nets: first layer uniform in [-1/fan_in, 1/fan_in],
// later layers uniform in [-sqrt(6/fan_in)/omega, sqrt(6/fan_in)/omega].
// Other activations get He-uniform bounds. Biases are zero. Deterministic
// for a given seed.
inline void init_net(ImplicitNet& net, std::uint64_t seed) {
    net.validate();
    Rng rng(seed);
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        const double fan_in = static_cast<double>(net.weights[l].cols());
        double bound;
        if (net.activation == Activation::sine)
            bound = l == 0 ? 1.0 / fan_in : std::sqrt(6.0 / fan_in) / net.omega;
        else
            bound = std::sqrt(6.0 / fan_in);
        for (Eigen::Index r = 0; r < net.weights[l].rows(); ++r)
            for (Eigen::Index c = 0; c < net.weights[l].cols(); ++c)
                net.weights[l](r, c) = rng.uniform(-bound, bound);
        net.biases[l].setZero();
    }
}

namespace detail {

inline void check_latent(const ImplicitNet& net, const Eigen::VectorXd* latent) {
    if (net.latent_dim == 0) {
        if (latent) throw validation_error("net has no latent input");
        return;
    }
    if (!latent || latent->size() != net.latent_dim)
        throw validation_error("latent size mismatch");
}

} // namespace detail

// Single-point forward pass: sine layers between, linear output.
inline Eigen::VectorXd forward(const ImplicitNet& net, const Vec3& p,
                               const Eigen::VectorXd* latent = nullptr) {
    net.validate();
    detail::check_latent(net, latent);
    Eigen::VectorXd x(net.input_dim());
    x.head(net.posenc_cfg.dim()) = posenc(p, net.posenc_cfg);
    if (net.latent_dim > 0) x.tail(net.latent_dim) = *latent;

    const int L = net.layer_count();
    for (int l = 0; l < L; ++l) {
        Eigen::VectorXd z = net.weights[l] * x + net.biases[l];
        if (l + 1 == L) return z;
        Eigen::MatrixXd out, d1;
        detail::activate(net.activation, net.omega, z, out, d1);
        x = out.col(0);
    }
    return x; // unreachable
}

struct ValueJacobian {
    Eigen::VectorXd value;    // out_dim
    Eigen::MatrixXd jacobian; // out_dim x 3, jacobian(k, a) = d value_k / d p_a
};

// Exact input Jacobian by the chain rule through the encoding and all layers.
inline ValueJacobian forward_with_input_grad(const ImplicitNet& net, const Vec3& p,
                                             const Eigen::VectorXd* latent = nullptr) {
    net.validate();
    detail::check_latent(net, latent);
    Eigen::VectorXd x(net.input_dim());
    x.head(net.posenc_cfg.dim()) = posenc(p, net.posenc_cfg);
    if (net.latent_dim > 0) x.tail(net.latent_dim) = *latent;
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(net.input_dim(), 3);
    jac.topRows(net.posenc_cfg.dim()) = posenc_jacobian(p, net.posenc_cfg);

    const int L = net.layer_count();
    for (int l = 0; l < L; ++l) {
        Eigen::VectorXd z = net.weights[l] * x + net.biases[l];
        Eigen::MatrixXd jz = net.weights[l] * jac;
        if (l + 1 == L) return {z, jz};
        Eigen::MatrixXd out, d1;
        detail::activate(net.activation, net.omega, z, out, d1);
        x = out.col(0);
        jac = d1.col(0).asDiagonal() * jz;
    }
    return {x, jac}; // unreachable
}

// ---------------------------------------------------------------------------
// losses and parameter gradients
// ---------------------------------------------------------------------------

struct LossWeights {
    double lambda1 = 1.0;  // data term
    double lambda2 = 0.1;  // gradient-norm (Eikonal) term
    double lambda3 = 0.05; // surface-normal term

    void validate() const {
        if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
            throw validation_error("loss weights must be nonnegative");
    }
};

// Every term is averaged over its contributing samples, so the weights are
// batch-size independent. `sdf` holds the L1 data term (the UDF trainer
// reuses it for the mean absolute channel error).
struct LossTerms {
    double sdf = 0.0;
    double grad = 0.0;
    double normal = 0.0;
    double total = 0.0;
};

struct NetGradients {
    std::vector<Eigen::MatrixXd> weights;
    std::vector<Eigen::VectorXd> biases;

    static NetGradients zeros_like(const ImplicitNet& net) {
        NetGradients g;
        for (std::size_t l = 0; l < net.weights.size(); ++l) {
            g.weights.emplace_back(
                Eigen::MatrixXd::Zero(net.weights[l].rows(), net.weights[l].cols()));
            g.biases.emplace_back(Eigen::VectorXd::Zero(net.biases[l].size()));
        }
        return g;
    }

    void add(const NetGradients& other) {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            weights[l] += other.weights[l];
            biases[l] += other.biases[l];
        }
    }
};

// Loss terms computed from externally supplied field values and gradients
// (e.g. the analytic field); shares the definitions with the trainer.
inline LossTerms loss_terms_from_values(const std::vector<double>& values,
                                        const std::vector<Vec3>& gradients,
                                        const std::vector<TrainingSample>& batch,
                                        const LossWeights& w) {
    w.validate();
    if (batch.empty()) throw validation_error("empty batch");
    if (values.size() != batch.size() || gradients.size() != batch.size())
        throw validation_error("length mismatch");
    LossTerms t;
    std::size_t n_normal = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        t.sdf += std::abs(values[i] - batch[i].sdf);
        const double gn = gradients[i].norm();
        t.grad += std::abs(gn - 1.0);
        if (batch[i].normal) {
            t.normal += 1.0 - gradients[i].dot(*batch[i].normal) / gn;
            ++n_normal;
        }
    }
    t.sdf /= static_cast<double>(batch.size());
    t.grad /= static_cast<double>(batch.size());
    if (n_normal > 0) t.normal /= static_cast<double>(n_normal);
    t.total = w.lambda1 * t.sdf + w.lambda2 * t.grad + w.lambda3 * t.normal;
    return t;
}

namespace detail {

struct LossSums {
    double sdf = 0.0, grad = 0.0, normal = 0.0;
};

// Forward + reverse pass over one chunk of samples. Columns are samples.
// The forward pass carries value activations X[l] and, when the gradient
// losses are active, the three directional tangents G[l][a] = dX[l]/dp_a with
// their pre-activation images H[l][a] = W_l G[l][a]. The reverse pass
// propagates adjoints of both, which yields the mixed second-order terms
// d2L/(dtheta dp) that the gradient losses need:
//   X' = sigma(Z), G' = sigma'(Z) . H          (forward, elementwise rows)
//   Zbar  = sigma'(Z) . X'bar + sigma''(Z) . sum_a H_a . G'bar_a
//   Hbar_a = sigma'(Z) . G'bar_a
//   Wbar += Zbar X^T + sum_a Hbar_a G_a^T,  Xbar = W^T Zbar,  Gbar_a = W^T Hbar_a
struct ChunkWorker {
    const ImplicitNet& net;
    const std::vector<TrainingSample>& samples;
    const Eigen::VectorXd* latent;
    bool with_tangent;

    // outputs
    NetGradients grads;
    Eigen::VectorXd latent_grad;
    LossSums sums;
    std::size_t n_normal_seen = 0;

    ChunkWorker(const ImplicitNet& n, const std::vector<TrainingSample>& s,
                const Eigen::VectorXd* lat, bool tangent)
        : net(n), samples(s), latent(lat), with_tangent(tangent),
          grads(NetGradients::zeros_like(n)),
          latent_grad(Eigen::VectorXd::Zero(n.latent_dim)) {}

    // udf head: plain L1 on all channels. sdf head: data + gradient losses.
    void run(const std::size_t* idx, std::size_t m, bool udf_head, double w1, double w2,
             double w3, bool with_grads) {
        const int L = net.layer_count();
        const int in_dim = net.input_dim();
        const int pe_dim = net.posenc_cfg.dim();

        std::vector<Eigen::MatrixXd> X(static_cast<std::size_t>(L) + 1);
        std::vector<Eigen::MatrixXd> D1(static_cast<std::size_t>(L));
        std::vector<std::array<Eigen::MatrixXd, 3>> G, H;
        if (with_tangent) {
            G.resize(static_cast<std::size_t>(L) + 1);
            H.resize(static_cast<std::size_t>(L));
        }

        X[0].resize(in_dim, static_cast<Eigen::Index>(m));
        for (std::size_t c = 0; c < m; ++c) {
            const Vec3& p = samples[idx[c]].point;
            X[0].col(static_cast<Eigen::Index>(c)).head(pe_dim) = posenc(p, net.posenc_cfg);
            if (net.latent_dim > 0)
                X[0].col(static_cast<Eigen::Index>(c)).tail(net.latent_dim) = *latent;
        }
        if (with_tangent) {
            for (int a = 0; a < 3; ++a)
                G[0][a] = Eigen::MatrixXd::Zero(in_dim, static_cast<Eigen::Index>(m));
            for (std::size_t c = 0; c < m; ++c) {
                const Eigen::MatrixXd pj =
                    posenc_jacobian(samples[idx[c]].point, net.posenc_cfg);
                for (int a = 0; a < 3; ++a)
                    G[0][a].col(static_cast<Eigen::Index>(c)).head(pe_dim) = pj.col(a);
            }
        }

        for (int l = 0; l < L; ++l) {
            Eigen::MatrixXd Z = (net.weights[l] * X[l]).colwise() + net.biases[l];
            if (l + 1 == L) {
                X[l + 1] = std::move(Z);
                if (with_tangent)
                    for (int a = 0; a < 3; ++a) G[l + 1][a] = net.weights[l] * G[l][a];
            } else {
                activate(net.activation, net.omega, Z, X[l + 1], D1[l]);
                if (with_tangent)
                    for (int a = 0; a < 3; ++a) {
                        H[l][a] = net.weights[l] * G[l][a];
                        G[l + 1][a] = D1[l].cwiseProduct(H[l][a]);
                    }
            }
        }

        const Eigen::MatrixXd& Y = X[L];
        Eigen::MatrixXd Ybar = Eigen::MatrixXd::Zero(Y.rows(), Y.cols());
        std::array<Eigen::MatrixXd, 3> Gbar;
        if (with_tangent)
            for (int a = 0; a < 3; ++a)
                Gbar[a] = Eigen::MatrixXd::Zero(Y.rows(), Y.cols());

        for (std::size_t c = 0; c < m; ++c) {
            const TrainingSample& s = samples[idx[c]];
            const auto col = static_cast<Eigen::Index>(c);
            if (udf_head) {
                for (Eigen::Index k = 0; k < Y.rows(); ++k) {
                    const double r = Y(k, col) - s.udf[static_cast<std::size_t>(k)];
                    sums.sdf += std::abs(r);
                    Ybar(k, col) = w1 * (r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0));
                }
                continue;
            }
            const double r = Y(0, col) - s.sdf;
            sums.sdf += std::abs(r);
            Ybar(0, col) = w1 * (r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0));
            if (!with_tangent) continue;

            const Vec3 g(G[L][0](0, col), G[L][1](0, col), G[L][2](0, col));
            const double gn = g.norm();
            sums.grad += std::abs(gn - 1.0);
            Vec3 gbar = Vec3::Zero();
            if (gn > 0.0) {
                const double sgn = gn > 1.0 ? 1.0 : (gn < 1.0 ? -1.0 : 0.0);
                gbar += (w2 * sgn / gn) * g;
            }
            if (s.normal) {
                const Vec3& n = *s.normal;
                sums.normal += 1.0 - g.dot(n) / gn;
                ++n_normal_seen;
                if (gn > 0.0) gbar += w3 * (g.dot(n) / (gn * gn * gn) * g - n / gn);
            }
            for (int a = 0; a < 3; ++a) Gbar[a](0, col) = gbar[a];
        }

        if (!with_grads) return;

        Eigen::MatrixXd Xbar;
        for (int l = L - 1; l >= 0; --l) {
            const bool output_layer = l + 1 == L;
            Eigen::MatrixXd Zbar;
            std::array<Eigen::MatrixXd, 3> Hbar;
            if (output_layer) {
                Zbar = std::move(Ybar);
                if (with_tangent)
                    for (int a = 0; a < 3; ++a) Hbar[a] = std::move(Gbar[a]);
            } else {
                Zbar = D1[l].cwiseProduct(Xbar);
                if (with_tangent) {
                    const Eigen::MatrixXd D2 =
                        second_deriv_from_output(net.activation, net.omega, X[l + 1]);
                    for (int a = 0; a < 3; ++a) {
                        Hbar[a] = D1[l].cwiseProduct(Gbar[a]);
                        Zbar += D2.cwiseProduct(H[l][a]).cwiseProduct(Gbar[a]);
                    }
                }
            }

            grads.weights[static_cast<std::size_t>(l)].noalias() += Zbar * X[l].transpose();
            if (with_tangent)
                for (int a = 0; a < 3; ++a)
                    grads.weights[static_cast<std::size_t>(l)].noalias() +=
                        Hbar[a] * G[l][a].transpose();
            grads.biases[static_cast<std::size_t>(l)] += Zbar.rowwise().sum();

            if (l > 0 || net.latent_dim > 0) {
                Xbar.noalias() = net.weights[l].transpose() * Zbar;
                if (with_tangent)
                    for (int a = 0; a < 3; ++a)
                        Gbar[a].noalias() = net.weights[l].transpose() * Hbar[a];
            }
        }
        if (net.latent_dim > 0)
            latent_grad += Xbar.bottomRows(net.latent_dim).rowwise().sum();
    }
};

} // namespace detail

// Batch losses and parameter gradients for the SDF head. Both terms tied to
// the field gradient are driven through the tangent-carrying reverse pass.
// Per-chunk partials are reduced in chunk order, so results do not depend on
// the thread count.
inline LossTerms sdf_losses(const ImplicitNet& net, const std::vector<TrainingSample>& samples,
                            const std::vector<std::size_t>& batch, const LossWeights& w,
                            NetGradients* grads = nullptr, unsigned threads = 0,
                            const Eigen::VectorXd* latent = nullptr,
                            Eigen::VectorXd* latent_grad = nullptr) {
    net.validate();
    w.validate();
    detail::check_latent(net, latent);
    if (net.out_dim != 1) throw validation_error("sdf losses need out_dim == 1");
    if (batch.empty()) throw validation_error("empty batch");

    std::size_t n_normal = 0;
    for (std::size_t i : batch)
        if (samples[i].normal) ++n_normal;
    const double n = static_cast<double>(batch.size());
    const double w1 = w.lambda1 / n;
    const double w2 = w.lambda2 / n;
    const double w3 = n_normal > 0 ? w.lambda3 / static_cast<double>(n_normal) : 0.0;

    constexpr std::size_t kChunk = 256;
    const std::size_t n_chunks = (batch.size() + kChunk - 1) / kChunk;
    std::vector<detail::ChunkWorker> workers;
    workers.reserve(n_chunks);
    for (std::size_t c = 0; c < n_chunks; ++c)
        workers.emplace_back(net, samples, latent, true);

    for_each_chunk(batch.size(), kChunk, threads,
                   [&](std::size_t c, std::size_t begin, std::size_t end) {
                       workers[c].run(batch.data() + begin, end - begin, false, w1, w2, w3,
                                      grads != nullptr);
                   });

    detail::LossSums sums;
    for (const auto& wk : workers) {
        sums.sdf += wk.sums.sdf;
        sums.grad += wk.sums.grad;
        sums.normal += wk.sums.normal;
    }
    if (grads) {
        *grads = NetGradients::zeros_like(net);
        for (const auto& wk : workers) grads->add(wk.grads);
    }
    if (latent_grad) {
        *latent_grad = Eigen::VectorXd::Zero(net.latent_dim);
        for (const auto& wk : workers) *latent_grad += wk.latent_grad;
    }

    LossTerms t;
    t.sdf = sums.sdf / n;
    t.grad = sums.grad / n;
    t.normal = n_normal > 0 ? sums.normal / static_cast<double>(n_normal) : 0.0;
    t.total = w.lambda1 * t.sdf + w.lambda2 * t.grad + w.lambda3 * t.normal;
    return t;
}

// Convenience overload over a whole sample vector.
inline LossTerms losses(const ImplicitNet& net, const std::vector<TrainingSample>& batch,
                        const LossWeights& w, NetGradients* grads = nullptr,
                        unsigned threads = 0) {
    std::vector<std::size_t> idx(batch.size());
    std::iota(idx.begin(), idx.end(), 0);
    return sdf_losses(net, batch, idx, w, grads, threads);
}

// Mean absolute error over all K channels for the stacked-UDF head.
inline LossTerms udf_losses(const ImplicitNet& net, const std::vector<TrainingSample>& samples,
                            const std::vector<std::size_t>& batch,
                            NetGradients* grads = nullptr, unsigned threads = 0,
                            const Eigen::VectorXd* latent = nullptr,
                            Eigen::VectorXd* latent_grad = nullptr) {
    net.validate();
    detail::check_latent(net, latent);
    if (batch.empty()) throw validation_error("empty batch");
    for (std::size_t i : batch)
        if (samples[i].udf.size() != static_cast<std::size_t>(net.out_dim))
            throw validation_error("sample udf size mismatch");

    const double denom = static_cast<double>(batch.size()) * net.out_dim;
    const double w1 = 1.0 / denom;

    constexpr std::size_t kChunk = 256;
    const std::size_t n_chunks = (batch.size() + kChunk - 1) / kChunk;
    std::vector<detail::ChunkWorker> workers;
    workers.reserve(n_chunks);
    for (std::size_t c = 0; c < n_chunks; ++c)
        workers.emplace_back(net, samples, latent, false);

    for_each_chunk(batch.size(), kChunk, threads,
                   [&](std::size_t c, std::size_t begin, std::size_t end) {
                       workers[c].run(batch.data() + begin, end - begin, true, w1, 0.0, 0.0,
                                      grads != nullptr);
                   });

    double sum = 0.0;
    for (const auto& wk : workers) sum += wk.sums.sdf;
    if (grads) {
        *grads = NetGradients::zeros_like(net);
        for (const auto& wk : workers) grads->add(wk.grads);
    }
    if (latent_grad) {
        *latent_grad = Eigen::VectorXd::Zero(net.latent_dim);
        for (const auto& wk : workers) *latent_grad += wk.latent_grad;
    }

    LossTerms t;
    t.sdf = sum / denom;
    t.total = t.sdf;
    return t;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    AdamConfig cfg;
    long step = 0;
    std::vector<Eigen::MatrixXd> m_w, v_w;
    std::vector<Eigen::VectorXd> m_b, v_b;

    static AdamState like(const std::vector<Eigen::MatrixXd>& ws,
                          const std::vector<Eigen::VectorXd>& bs, const AdamConfig& cfg = {}) {
        AdamState st;
        st.cfg = cfg;
        for (const auto& w : ws) {
            st.m_w.emplace_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
            st.v_w.emplace_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
        }
        for (const auto& b : bs) {
            st.m_b.emplace_back(Eigen::VectorXd::Zero(b.size()));
            st.v_b.emplace_back(Eigen::VectorXd::Zero(b.size()));
        }
        return st;
    }
};

// Standard bias-corrected update applied to a (weights, biases) parameter set.
inline void adam_step(std::vector<Eigen::MatrixXd>& ws, std::vector<Eigen::VectorXd>& bs,
                      const std::vector<Eigen::MatrixXd>& gw,
                      const std::vector<Eigen::VectorXd>& gb, AdamState& st) {
    if (ws.size() != gw.size() || bs.size() != gb.size() || ws.size() != st.m_w.size() ||
        bs.size() != st.m_b.size())
        throw validation_error("adam shape mismatch");
    for (std::size_t l = 0; l < ws.size(); ++l)
        if (ws[l].rows() != gw[l].rows() || ws[l].cols() != gw[l].cols() ||
            bs[l].size() != gb[l].size())
            throw validation_error("adam shape mismatch");

    st.step += 1;
    const double c1 = 1.0 - std::pow(st.cfg.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.cfg.beta2, static_cast<double>(st.step));
    auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
        m = st.cfg.beta1 * m + (1.0 - st.cfg.beta1) * g;
        v = st.cfg.beta2 * v.array().matrix() + (1.0 - st.cfg.beta2) * g.array().square().matrix();
        p.array() -=
            st.cfg.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + st.cfg.epsilon);
    };
    for (std::size_t l = 0; l < ws.size(); ++l) update(ws[l], gw[l], st.m_w[l], st.v_w[l]);
    for (std::size_t l = 0; l < bs.size(); ++l) update(bs[l], gb[l], st.m_b[l], st.v_b[l]);
}

inline void adam_step(ImplicitNet& net, const NetGradients& g, AdamState& st) {
    adam_step(net.weights, net.biases, g.weights, g.biases, st);
}

// ---------------------------------------------------------------------------
// batched evaluation
// ---------------------------------------------------------------------------

// Values at many points (columns); used by the grid evaluator and probes.
inline Eigen::MatrixXd net_values(const ImplicitNet& net, const Eigen::Matrix3Xd& pts,
                                  unsigned threads = 0,
                                  const Eigen::VectorXd* latent = nullptr) {
    net.validate();
    detail::check_latent(net, latent);
    Eigen::MatrixXd out(net.out_dim, pts.cols());
    const int pe_dim = net.posenc_cfg.dim();
    constexpr std::size_t kChunk = 2048;
    for_each_chunk(static_cast<std::size_t>(pts.cols()), kChunk, threads,
                   [&](std::size_t, std::size_t begin, std::size_t end) {
                       const auto m = static_cast<Eigen::Index>(end - begin);
                       Eigen::MatrixXd x(net.input_dim(), m);
                       for (Eigen::Index c = 0; c < m; ++c) {
                           const Vec3 p = pts.col(static_cast<Eigen::Index>(begin) + c);
                           x.col(c).head(pe_dim) = posenc(p, net.posenc_cfg);
                           if (net.latent_dim > 0) x.col(c).tail(net.latent_dim) = *latent;
                       }
                       const int L = net.layer_count();
                       for (int l = 0; l < L; ++l) {
                           Eigen::MatrixXd z = (net.weights[l] * x).colwise() + net.biases[l];
                           if (l + 1 == L) {
                               x = std::move(z);
                           } else {
                               Eigen::MatrixXd d1;
                               Eigen::MatrixXd act_out;
                               detail::activate(net.activation, net.omega, z, act_out, d1);
                               x = std::move(act_out);
                           }
                       }
                       out.middleCols(static_cast<Eigen::Index>(begin), m) = x;
                   });
    return out;
}

// Lattice evaluation of the network field (first output channel).
inline ScalarGrid eval_grid(const ImplicitNet& net, const std::array<int, 3>& resolution,
                            const Box3& bounds, unsigned threads = 0,
                            const Eigen::VectorXd* latent = nullptr) {
    for (int a = 0; a < 3; ++a)
        if (resolution[a] < 2) throw validation_error("grid resolution must be >= 2");
    ScalarGrid grid;
    grid.resolution = resolution;
    grid.bounds = bounds;
    const std::size_t n = static_cast<std::size_t>(resolution[0]) * resolution[1] *
                          static_cast<std::size_t>(resolution[2]);
    grid.values.resize(n);
    const std::size_t nx = static_cast<std::size_t>(resolution[0]);
    const std::size_t nxy = nx * static_cast<std::size_t>(resolution[1]);

    Eigen::Matrix3Xd pts(3, static_cast<Eigen::Index>(n));
    for (std::size_t idx = 0; idx < n; ++idx) {
        const int i = static_cast<int>(idx % nx);
        const int j = static_cast<int>((idx / nx) % resolution[1]);
        const int k = static_cast<int>(idx / nxy);
        pts.col(static_cast<Eigen::Index>(idx)) = grid.point(i, j, k);
    }
    const Eigen::MatrixXd vals = net_values(net, pts, threads, latent);
    for (std::size_t idx = 0; idx < n; ++idx)
        grid.values[idx] = vals(0, static_cast<Eigen::Index>(idx));
    return grid;
}

// ---------------------------------------------------------------------------
// fitting loops
// ---------------------------------------------------------------------------

struct FitConfig {
    SampleConfig sampling;
    std::vector<int> hidden{256, 256, 256, 256};
    PosEncConfig posenc_cfg;
    double omega = 30.0;
    Activation activation = Activation::sine;
    LossWeights loss;
    AdamConfig adam;
    int epochs = 300;
    int batch = 2048;
    bool resample_per_epoch = false;
    std::uint64_t seed = 0;
    unsigned threads = 0;

    void validate() const {
        sampling.validate();
        posenc_cfg.validate();
        loss.validate();
        if (epochs < 1) throw validation_error("epochs must be >= 1");
        if (batch < 1) throw validation_error("batch must be >= 1");
        if (hidden.empty()) throw validation_error("need at least one hidden layer");
    }
};

struct FitResult {
    ImplicitNet net;
    std::vector<LossTerms> epoch_loss;
};

namespace detail {

template <class StepFn>
FitResult run_fit(const SphereField& field, const FitConfig& cfg, int out_dim,
                  bool udf_targets, StepFn&& step) {
    cfg.validate();
    SampleConfig sample_cfg = cfg.sampling;
    TrainingSet set = udf_targets ? make_udf_training_set(field, sample_cfg)
                                  : make_training_set(field, sample_cfg);

    FitResult result;
    result.net = ImplicitNet::make(cfg.hidden, out_dim, cfg.posenc_cfg, cfg.omega,
                                   cfg.activation);
    init_net(result.net, mix_seed(cfg.seed, 1));
    AdamState adam = AdamState::like(result.net.weights, result.net.biases, cfg.adam);
    Rng shuffle_rng(mix_seed(cfg.seed, 2));

    std::vector<std::size_t> order(set.samples.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.resample_per_epoch && epoch > 0) {
            sample_cfg.seed = mix_seed(cfg.sampling.seed, 1000 + static_cast<std::uint64_t>(epoch));
            set = udf_targets ? make_udf_training_set(field, sample_cfg)
                              : make_training_set(field, sample_cfg);
        }
        shuffle_rng.shuffle(order);

        LossTerms epoch_terms;
        double seen = 0.0;
        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch));
            std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(at),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
            const LossTerms t = step(result.net, set.samples, batch, adam);
            if (!std::isfinite(t.total)) throw numeric_error("training diverged");
            const double bn = static_cast<double>(batch.size());
            epoch_terms.sdf += t.sdf * bn;
            epoch_terms.grad += t.grad * bn;
            epoch_terms.normal += t.normal * bn;
            epoch_terms.total += t.total * bn;
            seen += bn;
        }
        epoch_terms.sdf /= seen;
        epoch_terms.grad /= seen;
        epoch_terms.normal /= seen;
        epoch_terms.total /= seen;
        result.epoch_loss.push_back(epoch_terms);
    }
    return result;
}

} // namespace detail

// Per-shape SDF fit with the weighted data/gradient/normal objective.
inline FitResult fit_sdf(const SphereField& field, const FitConfig& cfg) {
    return detail::run_fit(
        field, cfg, 1, false,
        [&cfg](ImplicitNet& net, const std::vector<TrainingSample>& samples,
               const std::vector<std::size_t>& batch, AdamState& adam) {
            NetGradients grads;
            const LossTerms t = sdf_losses(net, samples, batch, cfg.loss, &grads, cfg.threads);
            adam_step(net, grads, adam);
            return t;
        });
}

// Per-shape stacked-UDF fit: K output channels trained with L1 on the
// channel distances; keypoints must be labeled.
inline FitResult fit_stacked_udf(const SphereField& field, const FitConfig& cfg) {
    if (!field.keypoints.labeled()) throw validation_error("unlabeled keypoints");
    return detail::run_fit(
        field, cfg, field.keypoints.label_count, true,
        [&cfg](ImplicitNet& net, const std::vector<TrainingSample>& samples,
               const std::vector<std::size_t>& batch, AdamState& adam) {
            NetGradients grads;
            const LossTerms t = udf_losses(net, samples, batch, &grads, cfg.threads);
            adam_step(net, grads, adam);
            return t;
        });
}

// ---------------------------------------------------------------------------
// point-set encoder (conditioned mode; smoke scale)
// ---------------------------------------------------------------------------

// Shared per-point MLP over encoded coordinates followed by channelwise max
// pooling; permutation- and duplication-invariant by construction.
struct PointSetEncoder {
    std::vector<Eigen::MatrixXd> weights;
    std::vector<Eigen::VectorXd> biases;
    PosEncConfig posenc_cfg;
    double omega = 30.0;

    int code_dim() const { return static_cast<int>(weights.back().rows()); }

    static PointSetEncoder make(const std::vector<int>& hidden = {128}, int code = 256,
                                const PosEncConfig& pe = {}) {
        PointSetEncoder enc;
        enc.posenc_cfg = pe;
        std::vector<int> widths;
        widths.push_back(pe.dim());
        widths.insert(widths.end(), hidden.begin(), hidden.end());
        widths.push_back(code);
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            enc.weights.emplace_back(Eigen::MatrixXd::Zero(widths[l + 1], widths[l]));
            enc.biases.emplace_back(Eigen::VectorXd::Zero(widths[l + 1]));
        }
        return enc;
    }
};

inline void init_encoder(PointSetEncoder& enc, std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t l = 0; l < enc.weights.size(); ++l) {
        const double fan_in = static_cast<double>(enc.weights[l].cols());
        const double bound =
            l == 0 ? 1.0 / fan_in : std::sqrt(6.0 / fan_in) / enc.omega;
        for (Eigen::Index r = 0; r < enc.weights[l].rows(); ++r)
            for (Eigen::Index c = 0; c < enc.weights[l].cols(); ++c)
                enc.weights[l](r, c) = rng.uniform(-bound, bound);
        enc.biases[l].setZero();
    }
}

struct EncodeContext {
    std::vector<Eigen::MatrixXd> X;  // per-layer activations, columns = points
    std::vector<Eigen::MatrixXd> D1; // sigma'(Z) per hidden layer
    std::vector<Eigen::Index> argmax;
};

inline Eigen::VectorXd encode_pointset(const PointSetEncoder& enc,
                                       const std::vector<Vec3>& points,
                                       EncodeContext* ctx = nullptr) {
    if (points.empty()) throw validation_error("empty point set");
    const int L = static_cast<int>(enc.weights.size());
    EncodeContext local;
    EncodeContext& c = ctx ? *ctx : local;
    c.X.assign(static_cast<std::size_t>(L) + 1, {});
    c.D1.assign(static_cast<std::size_t>(L), {});

    c.X[0].resize(enc.posenc_cfg.dim(), static_cast<Eigen::Index>(points.size()));
    for (std::size_t i = 0; i < points.size(); ++i)
        c.X[0].col(static_cast<Eigen::Index>(i)) = posenc(points[i], enc.posenc_cfg);

    for (int l = 0; l < L; ++l) {
        Eigen::MatrixXd Z = (enc.weights[l] * c.X[l]).colwise() + enc.biases[l];
        if (l + 1 == L) {
            c.X[l + 1] = std::move(Z);
        } else {
            detail::activate(Activation::sine, enc.omega, Z, c.X[l + 1], c.D1[l]);
        }
    }

    const Eigen::MatrixXd& last = c.X[static_cast<std::size_t>(L)];
    Eigen::VectorXd code(last.rows());
    c.argmax.resize(static_cast<std::size_t>(last.rows()));
    for (Eigen::Index r = 0; r < last.rows(); ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index i = 1; i < last.cols(); ++i)
            if (last(r, i) > last(r, best)) best = i;
        c.argmax[static_cast<std::size_t>(r)] = best;
        code(r) = last(r, best);
    }
    return code;
}

struct EncoderGradients {
    std::vector<Eigen::MatrixXd> weights;
    std::vector<Eigen::VectorXd> biases;

    static EncoderGradients zeros_like(const PointSetEncoder& enc) {
        EncoderGradients g;
        for (std::size_t l = 0; l < enc.weights.size(); ++l) {
            g.weights.emplace_back(
                Eigen::MatrixXd::Zero(enc.weights[l].rows(), enc.weights[l].cols()));
            g.biases.emplace_back(Eigen::VectorXd::Zero(enc.biases[l].size()));
        }
        return g;
    }
};

// Backprop through the max pool (the adjoint routes to the argmax point of
// each channel) and the per-point layers.
inline void encoder_backward(const PointSetEncoder& enc, const EncodeContext& ctx,
                             const Eigen::VectorXd& code_bar, EncoderGradients& grads) {
    const int L = static_cast<int>(enc.weights.size());
    const Eigen::MatrixXd& last = ctx.X[static_cast<std::size_t>(L)];
    Eigen::MatrixXd bar = Eigen::MatrixXd::Zero(last.rows(), last.cols());
    for (Eigen::Index r = 0; r < last.rows(); ++r)
        bar(r, ctx.argmax[static_cast<std::size_t>(r)]) = code_bar(r);

    for (int l = L - 1; l >= 0; --l) {
        const Eigen::MatrixXd Zbar =
            l + 1 == L ? bar : Eigen::MatrixXd(ctx.D1[l].cwiseProduct(bar));
        grads.weights[static_cast<std::size_t>(l)].noalias() +=
            Zbar * ctx.X[static_cast<std::size_t>(l)].transpose();
        grads.biases[static_cast<std::size_t>(l)] += Zbar.rowwise().sum();
        if (l > 0) bar = enc.weights[l].transpose() * Zbar;
    }
}

// ---------------------------------------------------------------------------
// IKPN checkpoint
// ---------------------------------------------------------------------------

// magic | u32 version | u32 n_layers | u32 widths[n_layers+1] | f64 omega
// | u32 activation | u32 posenc bands | u32 include_raw | u32 out_dim
// | per layer: f64 W row-major, f64 b. Weights round-trip bitwise.
inline void save_checkpoint(const ImplicitNet& net, const std::string& path) {
    net.validate();
    auto os = binio::open_out(path);
    binio::put_magic(os, "IKPN");
    binio::put_u32(os, 1u);
    binio::put_u32(os, static_cast<std::uint32_t>(net.layer_count()));
    binio::put_u32(os, static_cast<std::uint32_t>(net.input_dim()));
    for (const auto& w : net.weights) binio::put_u32(os, static_cast<std::uint32_t>(w.rows()));
    binio::put_f64(os, net.omega);
    binio::put_u32(os, static_cast<std::uint32_t>(net.activation));
    binio::put_u32(os, static_cast<std::uint32_t>(net.posenc_cfg.bands));
    binio::put_u32(os, net.posenc_cfg.include_raw ? 1u : 0u);
    binio::put_u32(os, static_cast<std::uint32_t>(net.out_dim));
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        const auto& w = net.weights[l];
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) binio::put_f64(os, w(r, c));
        for (Eigen::Index r = 0; r < net.biases[l].size(); ++r)
            binio::put_f64(os, net.biases[l](r));
    }
    if (!os) throw validation_error("write failed: " + path);
}

inline ImplicitNet load_checkpoint(const std::string& path) {
    auto is = binio::open_in(path);
    binio::expect_magic(is, "IKPN", "checkpoint");
    if (binio::get_u32(is) != 1u) throw validation_error("unsupported IKPN version");
    const auto n_layers = binio::get_u32(is);
    if (n_layers == 0 || n_layers > 64) throw validation_error("bad checkpoint layer count");
    std::vector<int> widths(n_layers + 1);
    for (auto& w : widths) w = static_cast<int>(binio::get_u32(is));

    ImplicitNet net;
    net.omega = binio::get_f64(is);
    const auto act = binio::get_u32(is);
    if (act > 2) throw validation_error("bad checkpoint activation");
    net.activation = static_cast<Activation>(act);
    net.posenc_cfg.bands = static_cast<int>(binio::get_u32(is));
    net.posenc_cfg.include_raw = binio::get_u32(is) != 0;
    net.out_dim = static_cast<int>(binio::get_u32(is));
    net.latent_dim = widths[0] - net.posenc_cfg.dim();
    if (net.latent_dim < 0) throw validation_error("bad checkpoint input width");

    for (std::uint32_t l = 0; l < n_layers; ++l) {
        Eigen::MatrixXd w(widths[l + 1], widths[l]);
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = binio::get_f64(is);
        Eigen::VectorXd b(widths[l + 1]);
        for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = binio::get_f64(is);
        net.weights.push_back(std::move(w));
        net.biases.push_back(std::move(b));
    }
    net.validate();
    return net;
}

} // namespace ikf
