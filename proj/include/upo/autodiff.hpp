#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "upo/common.hpp"

namespace upo {

// ---------------------------------------------------------------------------
// Parameter storage: one flat double array with named, disjoint segments.
// ---------------------------------------------------------------------------

struct Segment {
    std::string name;
    std::size_t offset = 0;
    std::size_t length = 0;
};

class ParamLayout {
public:
    ParamLayout() = default;

    explicit ParamLayout(const std::vector<std::pair<std::string, std::size_t>>& spec) {
        std::size_t off = 0;
        for (const auto& [name, len] : spec) {
            require(len > 0, "ParamLayout: zero-length segment '" + name + "'");
            require(!index_.count(name), "ParamLayout: duplicate segment '" + name + "'");
            index_[name] = segments_.size();
            segments_.push_back({name, off, len});
            off += len;
        }
        total_ = off;
    }

    const Segment& at(const std::string& name) const {
        auto it = index_.find(name);
        require(it != index_.end(), "ParamLayout: unknown segment '" + name + "'");
        return segments_[it->second];
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t total() const { return total_; }
    const std::vector<Segment>& segments() const { return segments_; }

private:
    std::vector<Segment> segments_;
    std::unordered_map<std::string, std::size_t> index_;
    std::size_t total_ = 0;
};

struct ParamVector {
    ParamLayout layout;
    std::vector<double> values;

    static ParamVector zeros(ParamLayout l) {
        ParamVector p;
        p.values.assign(l.total(), 0.0);
        p.layout = std::move(l);
        return p;
    }

    static ParamVector randn(ParamLayout l, double stddev, std::uint64_t seed) {
        ParamVector p = zeros(std::move(l));
        Rng rng(seed);
        for (auto& v : p.values) v = stddev * rng.normal();
        return p;
    }

    std::size_t size() const { return values.size(); }

    void check_finite() const {
        for (double v : values)
            require(std::isfinite(v), "ParamVector: non-finite value");
    }
};

// ---------------------------------------------------------------------------
// Dropout masks (inverted scaling: entries are 0 or 1/(1-rate)).
// ---------------------------------------------------------------------------

struct DropoutMask {
    std::vector<double> scale;
    double rate = 0.0;
    std::uint64_t seed = 0;
};

// One mask per dropout slot in a graph.
using MaskSet = std::vector<DropoutMask>;

// MaskLayout[i] = number of units in dropout slot i.
using MaskLayout = std::vector<std::size_t>;

inline std::vector<MaskSet> sample_dropout_masks(const MaskLayout& layout, double rate,
                                                 std::uint64_t seed, int count) {
    require(rate >= 0.0 && rate < 1.0, "sample_dropout_masks: rate must be in [0,1)");
    require(count >= 1, "sample_dropout_masks: count must be >= 1");
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<MaskSet> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int t = 0; t < count; ++t) {
        MaskSet set;
        set.reserve(layout.size());
        for (std::size_t slot = 0; slot < layout.size(); ++slot) {
            DropoutMask m;
            m.rate = rate;
            m.seed = derive_seed(seed, {static_cast<std::uint64_t>(t), slot});
            Rng rng(m.seed);
            m.scale.resize(layout[slot]);
            for (auto& s : m.scale) s = (rng.uniform() < rate) ? 0.0 : keep_scale;
            set.push_back(std::move(m));
        }
        out.push_back(std::move(set));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Computation graph: a topologically ordered tape of primitive ops.
// ---------------------------------------------------------------------------

enum class Op {
    Input,       // slice of the external input array
    Param,       // slice of a named parameter segment
    Const,       // baked-in constants
    Add,         // n-ary elementwise sum
    Sub,         // in0 - in1
    Mul,         // elementwise product
    Scale,       // in0 * scalar
    MatVec,      // in0 is a (rows x cols) matrix, in1 a length-cols vector
    Sigmoid,
    Log,
    Exp,
    Relu,
    Softmax,     // stable softmax over the whole vector
    LogSoftmax,
    LogSigmoid,  // elementwise log(sigmoid(x))
    Dropout,     // multiply by the mask in slot `mask_slot` (identity if no masks)
    ReduceSum,
    ReduceMean,
    Select,      // single element at `index`
    Concat,      // n-ary concatenation
};

struct Node {
    Op op;
    std::vector<int> in;
    std::size_t size = 0;  // output length

    std::string segment;          // Param
    std::size_t offset = 0;       // Param (within segment) / Input (within input array)
    std::vector<double> constants;
    double scalar = 0.0;          // Scale
    std::size_t rows = 0, cols = 0;  // MatVec
    std::size_t index = 0;        // Select
    int mask_slot = -1;           // Dropout
};

class Graph {
public:
    int input(std::size_t offset, std::size_t length) {
        Node n{Op::Input, {}, length};
        n.offset = offset;
        return push(std::move(n));
    }
    int param(std::string segment, std::size_t offset, std::size_t length) {
        Node n{Op::Param, {}, length};
        n.segment = std::move(segment);
        n.offset = offset;
        return push(std::move(n));
    }
    int constant(std::vector<double> values) {
        Node n{Op::Const, {}, values.size()};
        n.constants = std::move(values);
        return push(std::move(n));
    }
    int constant(double v) { return constant(std::vector<double>{v}); }
    int add(std::vector<int> terms) {
        require(!terms.empty(), "Graph::add: empty term list");
        const std::size_t sz = nodes_[terms[0]].size;
        for (int t : terms) check_size(t, sz, "add");
        Node n{Op::Add, std::move(terms), sz};
        return push(std::move(n));
    }
    int add(int a, int b) { return add(std::vector<int>{a, b}); }
    int sub(int a, int b) {
        check_size(b, nodes_[a].size, "sub");
        return push(Node{Op::Sub, {a, b}, nodes_[a].size});
    }
    int mul(int a, int b) {
        check_size(b, nodes_[a].size, "mul");
        return push(Node{Op::Mul, {a, b}, nodes_[a].size});
    }
    int scale(int a, double s) {
        Node n{Op::Scale, {a}, nodes_[a].size};
        n.scalar = s;
        return push(std::move(n));
    }
    int matvec(int matrix, int vec, std::size_t rows, std::size_t cols) {
        check_size(matrix, rows * cols, "matvec matrix");
        check_size(vec, cols, "matvec vector");
        Node n{Op::MatVec, {matrix, vec}, rows};
        n.rows = rows;
        n.cols = cols;
        return push(std::move(n));
    }
    int sigmoid(int a) { return push(Node{Op::Sigmoid, {a}, nodes_[a].size}); }
    int log(int a) { return push(Node{Op::Log, {a}, nodes_[a].size}); }
    int exp(int a) { return push(Node{Op::Exp, {a}, nodes_[a].size}); }
    int relu(int a) { return push(Node{Op::Relu, {a}, nodes_[a].size}); }
    int softmax(int a) { return push(Node{Op::Softmax, {a}, nodes_[a].size}); }
    int log_softmax(int a) { return push(Node{Op::LogSoftmax, {a}, nodes_[a].size}); }
    int log_sigmoid(int a) { return push(Node{Op::LogSigmoid, {a}, nodes_[a].size}); }
    int dropout(int a, int mask_slot) {
        Node n{Op::Dropout, {a}, nodes_[a].size};
        n.mask_slot = mask_slot;
        return push(std::move(n));
    }
    int reduce_sum(int a) { return push(Node{Op::ReduceSum, {a}, 1}); }
    int reduce_mean(int a) { return push(Node{Op::ReduceMean, {a}, 1}); }
    int select(int a, std::size_t index) {
        require(index < nodes_[a].size, "Graph::select: index out of range");
        Node n{Op::Select, {a}, 1};
        n.index = index;
        return push(std::move(n));
    }
    int concat(std::vector<int> parts) {
        require(!parts.empty(), "Graph::concat: empty part list");
        std::size_t sz = 0;
        for (int p : parts) sz += nodes_[p].size;
        Node n{Op::Concat, std::move(parts), sz};
        return push(std::move(n));
    }

    const std::vector<Node>& nodes() const { return nodes_; }
    std::size_t node_size(int id) const { return nodes_[id].size; }

private:
    int push(Node n) {
        for (int i : n.in)
            require(i >= 0 && i < static_cast<int>(nodes_.size()),
                    "Graph: input node must precede its consumer");
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }
    void check_size(int id, std::size_t expect, const char* where) {
        require(nodes_[id].size == expect,
                std::string("Graph::") + where + ": size mismatch at node " + std::to_string(id) +
                    " (got " + std::to_string(nodes_[id].size) + ", want " + std::to_string(expect) + ")");
    }

    std::vector<Node> nodes_;
};

// Per-node forward values.
using Values = std::vector<std::vector<double>>;

inline Values forward(const Graph& g, const ParamVector& params,
                      std::span<const double> input = {}, const MaskSet* masks = nullptr) {
    Values out(g.nodes().size());
    for (std::size_t id = 0; id < g.nodes().size(); ++id) {
        const Node& n = g.nodes()[id];
        auto& y = out[id];
        y.resize(n.size);
        auto in = [&](int k) -> const std::vector<double>& { return out[n.in[k]]; };
        switch (n.op) {
            case Op::Input:
                require(n.offset + n.size <= input.size(),
                        "forward: input slice out of range at node " + std::to_string(id));
                std::copy(input.begin() + n.offset, input.begin() + n.offset + n.size, y.begin());
                break;
            case Op::Param: {
                const Segment& seg = params.layout.at(n.segment);
                require(n.offset + n.size <= seg.length,
                        "forward: param slice out of range in segment '" + n.segment + "'");
                const double* base = params.values.data() + seg.offset + n.offset;
                std::copy(base, base + n.size, y.begin());
                break;
            }
            case Op::Const:
                y = n.constants;
                break;
            case Op::Add:
                std::fill(y.begin(), y.end(), 0.0);
                for (std::size_t k = 0; k < n.in.size(); ++k)
                    for (std::size_t i = 0; i < n.size; ++i) y[i] += in(k)[i];
                break;
            case Op::Sub:
                for (std::size_t i = 0; i < n.size; ++i) y[i] = in(0)[i] - in(1)[i];
                break;
            case Op::Mul:
                for (std::size_t i = 0; i < n.size; ++i) y[i] = in(0)[i] * in(1)[i];
                break;
            case Op::Scale:
                for (std::size_t i = 0; i < n.size; ++i) y[i] = in(0)[i] * n.scalar;
                break;
            case Op::MatVec: {
                const auto& m = in(0);
                const auto& v = in(1);
                for (std::size_t r = 0; r < n.rows; ++r) {
                    double acc = 0.0;
                    const double* row = m.data() + r * n.cols;
                    for (std::size_t c = 0; c < n.cols; ++c) acc += row[c] * v[c];
                    y[r] = acc;
                }
                break;
            }
            case Op::Sigmoid:
                for (std::size_t i = 0; i < n.size; ++i) {
                    const double x = in(0)[i];
                    y[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                    : std::exp(x) / (1.0 + std::exp(x));
                }
                break;
            case Op::Log:
                for (std::size_t i = 0; i < n.size; ++i) y[i] = std::log(in(0)[i]);
                break;
            case Op::Exp:
                for (std::size_t i = 0; i < n.size; ++i) y[i] = std::exp(in(0)[i]);
                break;
            case Op::Relu:
                for (std::size_t i = 0; i < n.size; ++i) y[i] = std::max(0.0, in(0)[i]);
                break;
            case Op::Softmax: {
                const auto& x = in(0);
                const double mx = *std::max_element(x.begin(), x.end());
                double z = 0.0;
                for (std::size_t i = 0; i < n.size; ++i) {
                    y[i] = std::exp(x[i] - mx);
                    z += y[i];
                }
                for (auto& v : y) v /= z;
                break;
            }
            case Op::LogSoftmax: {
                const auto& x = in(0);
                const double mx = *std::max_element(x.begin(), x.end());
                double z = 0.0;
                for (std::size_t i = 0; i < n.size; ++i) z += std::exp(x[i] - mx);
                const double lz = std::log(z);
                for (std::size_t i = 0; i < n.size; ++i) y[i] = x[i] - mx - lz;
                break;
            }
            case Op::LogSigmoid:
                // log sigma(x) = -softplus(-x), stable on both tails
                for (std::size_t i = 0; i < n.size; ++i) {
                    const double x = in(0)[i];
                    y[i] = x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
                }
                break;
            case Op::Dropout:
                if (masks != nullptr) {
                    require(n.mask_slot >= 0 && n.mask_slot < static_cast<int>(masks->size()),
                            "forward: dropout mask slot out of range at node " + std::to_string(id));
                    const auto& m = (*masks)[n.mask_slot].scale;
                    require(m.size() == n.size,
                            "forward: dropout mask size mismatch at node " + std::to_string(id));
                    for (std::size_t i = 0; i < n.size; ++i) y[i] = in(0)[i] * m[i];
                } else {
                    y = in(0);
                }
                break;
            case Op::ReduceSum: {
                double acc = 0.0;
                for (double v : in(0)) acc += v;
                y[0] = acc;
                break;
            }
            case Op::ReduceMean: {
                double acc = 0.0;
                for (double v : in(0)) acc += v;
                y[0] = acc / static_cast<double>(in(0).size());
                break;
            }
            case Op::Select:
                y[0] = in(0)[n.index];
                break;
            case Op::Concat: {
                std::size_t off = 0;
                for (std::size_t k = 0; k < n.in.size(); ++k) {
                    std::copy(in(k).begin(), in(k).end(), y.begin() + off);
                    off += in(k).size();
                }
                break;
            }
        }
    }
    return out;
}

// Reverse pass. Masks are held fixed; the returned vector matches the flat
// parameter array of `params`.
inline std::vector<double> backward(const Graph& g, int loss_node, const Values& values,
                                    const ParamVector& params, const MaskSet* masks = nullptr) {
    require(loss_node >= 0 && loss_node < static_cast<int>(g.nodes().size()),
            "backward: loss node out of range");
    require(g.nodes()[loss_node].size == 1, "backward: loss node must be scalar");

    std::vector<std::vector<double>> adj(g.nodes().size());
    for (std::size_t id = 0; id < g.nodes().size(); ++id) adj[id].assign(g.nodes()[id].size, 0.0);
    adj[loss_node][0] = 1.0;

    std::vector<double> grad(params.size(), 0.0);

    for (int id = loss_node; id >= 0; --id) {
        const Node& n = g.nodes()[id];
        const auto& gy = adj[id];
        auto xin = [&](int k) -> const std::vector<double>& { return values[n.in[k]]; };
        auto gin = [&](int k) -> std::vector<double>& { return adj[n.in[k]]; };
        switch (n.op) {
            case Op::Input:
            case Op::Const:
                break;
            case Op::Param: {
                const Segment& seg = params.layout.at(n.segment);
                double* base = grad.data() + seg.offset + n.offset;
                for (std::size_t i = 0; i < n.size; ++i) base[i] += gy[i];
                break;
            }
            case Op::Add:
                for (std::size_t k = 0; k < n.in.size(); ++k)
                    for (std::size_t i = 0; i < n.size; ++i) gin(k)[i] += gy[i];
                break;
            case Op::Sub:
                for (std::size_t i = 0; i < n.size; ++i) {
                    gin(0)[i] += gy[i];
                    gin(1)[i] -= gy[i];
                }
                break;
            case Op::Mul:
                for (std::size_t i = 0; i < n.size; ++i) {
                    gin(0)[i] += gy[i] * xin(1)[i];
                    gin(1)[i] += gy[i] * xin(0)[i];
                }
                break;
            case Op::Scale:
                for (std::size_t i = 0; i < n.size; ++i) gin(0)[i] += gy[i] * n.scalar;
                break;
            case Op::MatVec: {
                const auto& m = xin(0);
                const auto& v = xin(1);
                for (std::size_t r = 0; r < n.rows; ++r) {
                    const double gr = gy[r];
                    if (gr == 0.0) continue;
                    double* gm = gin(0).data() + r * n.cols;
                    const double* row = m.data() + r * n.cols;
                    for (std::size_t c = 0; c < n.cols; ++c) {
                        gm[c] += gr * v[c];
                        gin(1)[c] += gr * row[c];
                    }
                }
                break;
            }
            case Op::Sigmoid:
                for (std::size_t i = 0; i < n.size; ++i) {
                    const double y = values[id][i];
                    gin(0)[i] += gy[i] * y * (1.0 - y);
                }
                break;
            case Op::Log:
                for (std::size_t i = 0; i < n.size; ++i) gin(0)[i] += gy[i] / xin(0)[i];
                break;
            case Op::Exp:
                for (std::size_t i = 0; i < n.size; ++i) gin(0)[i] += gy[i] * values[id][i];
                break;
            case Op::Relu:
                for (std::size_t i = 0; i < n.size; ++i)
                    gin(0)[i] += xin(0)[i] > 0.0 ? gy[i] : 0.0;
                break;
            case Op::Softmax: {
                const auto& y = values[id];
                double dot = 0.0;
                for (std::size_t i = 0; i < n.size; ++i) dot += gy[i] * y[i];
                for (std::size_t i = 0; i < n.size; ++i) gin(0)[i] += y[i] * (gy[i] - dot);
                break;
            }
            case Op::LogSoftmax: {
                const auto& y = values[id];
                double gsum = 0.0;
                for (std::size_t i = 0; i < n.size; ++i) gsum += gy[i];
                for (std::size_t i = 0; i < n.size; ++i)
                    gin(0)[i] += gy[i] - std::exp(y[i]) * gsum;
                break;
            }
            case Op::LogSigmoid:
                // d/dx log sigma(x) = 1 - sigma(x) = 1 - exp(log sigma(x))
                for (std::size_t i = 0; i < n.size; ++i)
                    gin(0)[i] += gy[i] * (1.0 - std::exp(values[id][i]));
                break;
            case Op::Dropout:
                if (masks != nullptr) {
                    const auto& m = (*masks)[n.mask_slot].scale;
                    for (std::size_t i = 0; i < n.size; ++i) gin(0)[i] += gy[i] * m[i];
                } else {
                    for (std::size_t i = 0; i < n.size; ++i) gin(0)[i] += gy[i];
                }
                break;
            case Op::ReduceSum:
                for (auto& v : gin(0)) v += gy[0];
                break;
            case Op::ReduceMean: {
                const double s = gy[0] / static_cast<double>(gin(0).size());
                for (auto& v : gin(0)) v += s;
                break;
            }
            case Op::Select:
                gin(0)[n.index] += gy[0];
                break;
            case Op::Concat: {
                std::size_t off = 0;
                for (std::size_t k = 0; k < n.in.size(); ++k) {
                    for (std::size_t i = 0; i < gin(k).size(); ++i) gin(k)[i] += gy[off + i];
                    off += gin(k).size();
                }
                break;
            }
        }
    }
    return grad;
}

// ---------------------------------------------------------------------------
// Gradient checking against central finite differences.
// ---------------------------------------------------------------------------

inline double grad_check(const std::function<double(const ParamVector&)>& loss_fn,
                         const std::vector<double>& analytic_grad, ParamVector params,
                         double eps = 1e-5) {
    require(eps > 0.0 && eps <= 1e-2, "grad_check: eps must be in (0, 1e-2]");
    require(analytic_grad.size() == params.size(), "grad_check: gradient size mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double keep = params.values[i];
        params.values[i] = keep + eps;
        const double fp = loss_fn(params);
        params.values[i] = keep - eps;
        const double fm = loss_fn(params);
        params.values[i] = keep;
        require(std::isfinite(fp) && std::isfinite(fm), "grad_check: non-finite loss");
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic_grad[i];
        const double rel = std::abs(a - numeric) /
                           std::max({std::abs(a), std::abs(numeric), 1e-6});
        worst = std::max(worst, rel);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Adam with linear warmup (and optional linear decay to zero when the total
// step count is known).
// ---------------------------------------------------------------------------

struct OptState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    long step = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double warmup_fraction = 0.1;
    long total_steps = 0;  // 0 = constant lr after warmup

    static OptState make(std::size_t n, double lr, double warmup_fraction = 0.1,
                         long total_steps = 0) {
        OptState s;
        s.first_moment.assign(n, 0.0);
        s.second_moment.assign(n, 0.0);
        s.learning_rate = lr;
        s.warmup_fraction = warmup_fraction;
        s.total_steps = total_steps;
        return s;
    }
};

// Learning rate applied at opt state's current (0-based) step.
inline double effective_lr(const OptState& s) {
    const long horizon = s.total_steps > 0 ? s.total_steps : 100;
    const long warm = std::max<long>(1, static_cast<long>(s.warmup_fraction * horizon));
    if (s.step < warm)
        return s.learning_rate * static_cast<double>(s.step + 1) / static_cast<double>(warm);
    if (s.total_steps > 0 && s.step < s.total_steps)
        return s.learning_rate * static_cast<double>(s.total_steps - s.step) /
               static_cast<double>(s.total_steps - warm);
    if (s.total_steps > 0) return 0.0;
    return s.learning_rate;
}

inline void opt_step(std::vector<double>& params, const std::vector<double>& grads, OptState& s) {
    require(params.size() == grads.size() && params.size() == s.first_moment.size(),
            "opt_step: shape mismatch");
    for (double gv : grads) require(std::isfinite(gv), "opt_step: non-finite gradient");
    const double lr = effective_lr(s);
    const long t = s.step + 1;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        s.first_moment[i] = s.beta1 * s.first_moment[i] + (1.0 - s.beta1) * grads[i];
        s.second_moment[i] = s.beta2 * s.second_moment[i] + (1.0 - s.beta2) * grads[i] * grads[i];
        const double mhat = s.first_moment[i] / bc1;
        const double vhat = s.second_moment[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + s.epsilon);
    }
    s.step = t;
}

}  // namespace upo
