#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "spvit/errors.hpp"
#include "spvit/tensor.hpp"

namespace spvit {

// ---------------------------------------------------------------------------
// Parameters and tape
// ---------------------------------------------------------------------------

// A trainable parameter living outside any tape. Gradients accumulate into
// `grad` when a tape backward pass reaches the leaf; optimizer state is
// attached lazily by the optimizer.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;

    Param() = default;
    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor::zeros(value.shape);
    }

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

class Tape;

// Handle into a tape's computation record. The value tensor is owned by the
// tape; a Var stays valid until the tape is cleared or destroyed.
struct Var {
    Tape* tape = nullptr;
    std::uint32_t id = 0;

    bool valid() const { return tape != nullptr; }
    const Tensor& val() const;
    const Tensor& grad() const;
};

// Reverse-mode tape. Nodes are recorded in creation order, which is a valid
// topological order, so backward is a single reverse sweep. Each backward
// call computes into fresh sweep buffers and then accumulates into node
// grads and parameter sinks, so repeated calls accumulate.
class Tape {
  public:
    struct Node {
        Tensor value;
        Tensor grad;                   // accumulated across backward calls
        Tensor sweep;                  // scratch for the current backward pass
        bool swept = false;
        std::vector<std::uint32_t> parents;
        std::function<void(Tape&, Node&)> pull;  // pushes sweep into parents
        Param* sink = nullptr;
    };

    Var leaf(Tensor v) {
        nodes_.push_back(Node{});
        nodes_.back().value = std::move(v);
        return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    Var param(Param& p) {
        Var v = leaf(p.value);
        nodes_.back().sink = &p;
        return v;
    }

    Var make(Tensor value, std::vector<std::uint32_t> parents,
             std::function<void(Tape&, Node&)> pull) {
        nodes_.push_back(Node{});
        Node& n = nodes_.back();
        n.value = std::move(value);
        n.parents = std::move(parents);
        n.pull = std::move(pull);
        return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    Node& node(std::uint32_t id) { return nodes_[id]; }
    const Node& node(std::uint32_t id) const { return nodes_[id]; }
    std::size_t size() const { return nodes_.size(); }

    // Adds `delta` into the sweep buffer of node `id`, allocating on demand.
    Tensor& sweep_of(std::uint32_t id) {
        Node& n = nodes_[id];
        if (!n.swept) {
            n.sweep = Tensor::zeros(n.value.shape);
            n.swept = true;
        }
        return n.sweep;
    }

    void backward(Var loss) {
        if (loss.tape != this) throw ContractError("backward: loss from another tape");
        Node& root = nodes_[loss.id];
        if (root.value.numel() != 1) {
            throw ContractError("backward: root must be scalar, got " + root.value.shape_str());
        }
        sweep_of(loss.id).data[0] = 1.0;
        for (std::uint32_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.swept) continue;
            if (n.pull) n.pull(*this, n);
            if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.value.shape);
            for (std::size_t j = 0; j < n.sweep.numel(); ++j) n.grad.data[j] += n.sweep.data[j];
            if (n.sink != nullptr) {
                for (std::size_t j = 0; j < n.sweep.numel(); ++j) n.sink->grad.data[j] += n.sweep.data[j];
            }
            n.sweep = Tensor();
            n.swept = false;
        }
    }

    void clear() { nodes_.clear(); }

  private:
    std::vector<Node> nodes_;
};

inline const Tensor& Var::val() const { return tape->node(id).value; }
inline const Tensor& Var::grad() const { return tape->node(id).grad; }

// ---------------------------------------------------------------------------
// Elementwise and arithmetic ops
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
    check_same_shape(a.val(), b.val(), "add");
    Tensor y = a.val();
    for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] += b.val().data[i];
    return a.tape->make(std::move(y), {a.id, b.id}, [](Tape& t, Tape::Node& n) {
        Tensor& da = t.sweep_of(n.parents[0]);
        Tensor& db = t.sweep_of(n.parents[1]);
        for (std::size_t i = 0; i < n.sweep.numel(); ++i) {
            da.data[i] += n.sweep.data[i];
            db.data[i] += n.sweep.data[i];
        }
    });
}

inline Var sub(Var a, Var b) {
    check_same_shape(a.val(), b.val(), "sub");
    Tensor y = a.val();
    for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] -= b.val().data[i];
    return a.tape->make(std::move(y), {a.id, b.id}, [](Tape& t, Tape::Node& n) {
        Tensor& da = t.sweep_of(n.parents[0]);
        Tensor& db = t.sweep_of(n.parents[1]);
        for (std::size_t i = 0; i < n.sweep.numel(); ++i) {
            da.data[i] += n.sweep.data[i];
            db.data[i] -= n.sweep.data[i];
        }
    });
}

inline Var mul(Var a, Var b) {
    check_same_shape(a.val(), b.val(), "mul");
    Tensor y = a.val();
    for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] *= b.val().data[i];
    return a.tape->make(std::move(y), {a.id, b.id}, [](Tape& t, Tape::Node& n) {
        const Tensor& av = t.node(n.parents[0]).value;
        const Tensor& bv = t.node(n.parents[1]).value;
        Tensor& da = t.sweep_of(n.parents[0]);
        Tensor& db = t.sweep_of(n.parents[1]);
        for (std::size_t i = 0; i < n.sweep.numel(); ++i) {
            da.data[i] += n.sweep.data[i] * bv.data[i];
            db.data[i] += n.sweep.data[i] * av.data[i];
        }
    });
}

inline Var scale(Var a, double c) {
    Tensor y = a.val();
    for (double& v : y.data) v *= c;
    return a.tape->make(std::move(y), {a.id}, [c](Tape& t, Tape::Node& n) {
        Tensor& da = t.sweep_of(n.parents[0]);
        for (std::size_t i = 0; i < n.sweep.numel(); ++i) da.data[i] += c * n.sweep.data[i];
    });
}

inline Var add_const(Var a, double c) {
    Tensor y = a.val();
    for (double& v : y.data) v += c;
    return a.tape->make(std::move(y), {a.id}, [](Tape& t, Tape::Node& n) {
        Tensor& da = t.sweep_of(n.parents[0]);
        for (std::size_t i = 0; i < n.sweep.numel(); ++i) da.data[i] += n.sweep.data[i];
    });
}

// Sums any number of same-shaped vars into one node.
inline Var sum_vars(const std::vector<Var>& xs) {
    if (xs.empty()) throw ContractError("sum_vars: empty list");
    Tensor y = xs[0].val();
    std::vector<std::uint32_t> parents{xs[0].id};
    for (std::size_t k = 1; k < xs.size(); ++k) {
        check_same_shape(y, xs[k].val(), "sum_vars");
        for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] += xs[k].val().data[i];
        parents.push_back(xs[k].id);
    }
    return xs[0].tape->make(std::move(y), std::move(parents), [](Tape& t, Tape::Node& n) {
        for (std::uint32_t pid : n.parents) {
            Tensor& dp = t.sweep_of(pid);
            for (std::size_t i = 0; i < n.sweep.numel(); ++i) dp.data[i] += n.sweep.data[i];
        }
    });
}

// y[r, c] = x[r, c] + v[c]
inline Var add_rowvec(Var x, Var v) {
    const Tensor& xv = x.val();
    const Tensor& vv = v.val();
    if (xv.rank() != 2 || vv.numel() != xv.shape[1]) {
        throw ShapeError("add_rowvec: " + xv.shape_str() + " vs " + vv.shape_str());
    }
    Tensor y = xv;
    const std::size_t rows = xv.shape[0], cols = xv.shape[1];
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) y.data[r * cols + c] += vv.data[c];
    return x.tape->make(std::move(y), {x.id, v.id}, [rows, cols](Tape& t, Tape::Node& n) {
        Tensor& dx = t.sweep_of(n.parents[0]);
        Tensor& dv = t.sweep_of(n.parents[1]);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                dx.data[r * cols + c] += n.sweep.data[r * cols + c];
                dv.data[c] += n.sweep.data[r * cols + c];
            }
    });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0]) {
        throw ShapeError("matmul: " + av.shape_str() + " vs " + bv.shape_str());
    }
    const std::size_t m = av.shape[0], k = av.shape[1], nn = bv.shape[1];
    Tensor y({m, nn});
    for (std::size_t i = 0; i < m; ++i) {
        double* yi = &y.data[i * nn];
        const double* ai = &av.data[i * k];
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            const double* bp = &bv.data[p * nn];
            for (std::size_t j = 0; j < nn; ++j) yi[j] += aip * bp[j];
        }
    }
    return a.tape->make(std::move(y), {a.id, b.id}, [m, k, nn](Tape& t, Tape::Node& n) {
        const Tensor& av2 = t.node(n.parents[0]).value;
        const Tensor& bv2 = t.node(n.parents[1]).value;
        Tensor& da = t.sweep_of(n.parents[0]);
        Tensor& db = t.sweep_of(n.parents[1]);
        // da[i,p] += sum_j dy[i,j] * b[p,j]
        for (std::size_t i = 0; i < m; ++i) {
            const double* dyi = &n.sweep.data[i * nn];
            double* dai = &da.data[i * k];
            for (std::size_t p = 0; p < k; ++p) {
                const double* bp = &bv2.data[p * nn];
                double acc = 0.0;
                for (std::size_t j = 0; j < nn; ++j) acc += dyi[j] * bp[j];
                dai[p] += acc;
            }
        }
        // db[p,j] += sum_i a[i,p] * dy[i,j]
        for (std::size_t p = 0; p < k; ++p) {
            double* dbp = &db.data[p * nn];
            for (std::size_t i = 0; i < m; ++i) {
                const double aip = av2.data[i * k + p];
                if (aip == 0.0) continue;
                const double* dyi = &n.sweep.data[i * nn];
                for (std::size_t j = 0; j < nn; ++j) dbp[j] += aip * dyi[j];
            }
        }
    });
}

inline Var transpose(Var x) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2) throw ShapeError("transpose: need rank 2, got " + xv.shape_str());
    const std::size_t m = xv.shape[0], nn = xv.shape[1];
    Tensor y({nn, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nn; ++j) y.data[j * m + i] = xv.data[i * nn + j];
    return x.tape->make(std::move(y), {x.id}, [m, nn](Tape& t, Tape::Node& n) {
        Tensor& dx = t.sweep_of(n.parents[0]);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < nn; ++j) dx.data[i * nn + j] += n.sweep.data[j * m + i];
    });
}

// ---------------------------------------------------------------------------
// Slicing / padding
// ---------------------------------------------------------------------------

inline Var slice_rows(Var x, std::size_t r0, std::size_t r1) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2 || r0 >= r1 || r1 > xv.shape[0]) {
        throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " +
                         xv.shape_str());
    }
    const std::size_t cols = xv.shape[1];
    Tensor y({r1 - r0, cols});
    std::copy(xv.data.begin() + static_cast<std::ptrdiff_t>(r0 * cols),
              xv.data.begin() + static_cast<std::ptrdiff_t>(r1 * cols), y.data.begin());
    return x.tape->make(std::move(y), {x.id}, [r0, cols](Tape& t, Tape::Node& n) {
        Tensor& dx = t.sweep_of(n.parents[0]);
        for (std::size_t i = 0; i < n.sweep.numel(); ++i) dx.data[r0 * cols + i] += n.sweep.data[i];
    });
}

inline Var slice_cols(Var x, std::size_t c0, std::size_t c1) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2 || c0 >= c1 || c1 > xv.shape[1]) {
        throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                         xv.shape_str());
    }
    const std::size_t rows = xv.shape[0], cols = xv.shape[1], w = c1 - c0;
    Tensor y({rows, w});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) y.data[r * w + c] = xv.data[r * cols + c0 + c];
    return x.tape->make(std::move(y), {x.id}, [rows, cols, c0, w](Tape& t, Tape::Node& n) {
        Tensor& dx = t.sweep_of(n.parents[0]);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) dx.data[r * cols + c0 + c] += n.sweep.data[r * w + c];
    });
}

// Embeds x into a zero matrix with `total` rows starting at row `at`.
inline Var pad_rows(Var x, std::size_t total, std::size_t at) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2 || at + xv.shape[0] > total) {
        throw ShapeError("pad_rows: " + xv.shape_str() + " into " + std::to_string(total) + " rows at " +
                         std::to_string(at));
    }
    const std::size_t cols = xv.shape[1], rows = xv.shape[0];
    Tensor y({total, cols});
    std::copy(xv.data.begin(), xv.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(at * cols));
    return x.tape->make(std::move(y), {x.id}, [at, cols, rows](Tape& t, Tape::Node& n) {
        Tensor& dx = t.sweep_of(n.parents[0]);
        for (std::size_t i = 0; i < rows * cols; ++i) dx.data[i] += n.sweep.data[at * cols + i];
    });
}

inline Var concat_rows(Var a, Var b) {
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[1]) {
        throw ShapeError("concat_rows: " + av.shape_str() + " vs " + bv.shape_str());
    }
    const std::size_t ra = av.shape[0], rb = bv.shape[0], cols = av.shape[1];
    Tensor y({ra + rb, cols});
    std::copy(av.data.begin(), av.data.end(), y.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(ra * cols));
    return a.tape->make(std::move(y), {a.id, b.id}, [ra, rb, cols](Tape& t, Tape::Node& n) {
        Tensor& da = t.sweep_of(n.parents[0]);
        Tensor& db = t.sweep_of(n.parents[1]);
        for (std::size_t i = 0; i < ra * cols; ++i) da.data[i] += n.sweep.data[i];
        for (std::size_t i = 0; i < rb * cols; ++i) db.data[i] += n.sweep.data[ra * cols + i];
    });
}

// Keeps the listed columns of a [R x C] matrix, in the given order.
inline Var gather_cols(Var x, const std::vector<std::size_t>& idx) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2) throw ShapeError("gather_cols: need rank 2, got " + xv.shape_str());
    const std::size_t rows = xv.shape[0], cols = xv.shape[1], w = idx.size();
    for (std::size_t c : idx)
        if (c >= cols) throw ShapeError("gather_cols: index " + std::to_string(c) + " out of range");
    Tensor y({rows, std::max<std::size_t>(w, 1)});
    if (w == 0) throw ShapeError("gather_cols: empty index set");
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) y.data[r * w + c] = xv.data[r * cols + idx[c]];
    return x.tape->make(std::move(y), {x.id}, [rows, cols, idx](Tape& t, Tape::Node& n) {
        Tensor& dx = t.sweep_of(n.parents[0]);
        const std::size_t w2 = idx.size();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w2; ++c) dx.data[r * cols + idx[c]] += n.sweep.data[r * w2 + c];
    });
}

// Flat element gather: y[i] = x.data[idx[i]], result shape [n].
inline Var gather_elems(Var x, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw ShapeError("gather_elems: empty index set");
    const Tensor& xv = x.val();
    for (std::size_t i : idx)
        if (i >= xv.numel()) throw ShapeError("gather_elems: index " + std::to_string(i) + " out of range");
    Tensor y({idx.size()});
    for (std::size_t i = 0; i < idx.size(); ++i) y.data[i] = xv.data[idx[i]];
    return x.tape->make(std::move(y), {x.id}, [idx](Tape& t, Tape::Node& n) {
        Tensor& dx = t.sweep_of(n.parents[0]);
        for (std::size_t i = 0; i < idx.size(); ++i) dx.data[idx[i]] += n.sweep.data[i];
    });
}

inline Var gather_rows(Var x, const std::vector<std::size_t>& idx) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2) throw ShapeError("gather_rows: need rank 2, got " + xv.shape_str());
    if (idx.empty()) throw ShapeError("gather_rows: empty index set");
    const std::size_t rows = xv.shape[0], cols = xv.shape[1];
    for (std::size_t r : idx)
        if (r >= rows) throw ShapeError("gather_rows: index " + std::to_string(r) + " out of range");
    Tensor y({idx.size(), cols});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy(xv.data.begin() + static_cast<std::ptrdiff_t>(idx[r] * cols),
                  xv.data.begin() + static_cast<std::ptrdiff_t>((idx[r] + 1) * cols),
                  y.data.begin() + static_cast<std::ptrdiff_t>(r * cols));
    return x.tape->make(std::move(y), {x.id}, [cols, idx](Tape& t, Tape::Node& n) {
        Tensor& dx = t.sweep_of(n.parents[0]);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t c = 0; c < cols; ++c) dx.data[idx[r] * cols + c] += n.sweep.data[r * cols + c];
    });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

inline Var relu(Var x) {
    Tensor y = x.val();
    for (double& v : y.data) v = v > 0.0 ? v : 0.0;
    return x.tape->make(std::move(y), {x.id}, [](Tape& t, Tape::Node& n) {
        const Tensor& xv = t.node(n.parents[0]).value;
        Tensor& dx = t.sweep_of(n.parents[0]);
        for (std::size_t i = 0; i < n.sweep.numel(); ++i)
            if (xv.data[i] > 0.0) dx.data[i] += n.sweep.data[i];
    });
}

// Exact GELU, 0.5 x (1 + erf(x / sqrt(2))).
inline Var gelu(Var x) {
    Tensor y = x.val();
    for (double& v : y.data) v = 0.5 * v * (1.0 + std::erf(v * 0.7071067811865475244));
    return x.tape->make(std::move(y), {x.id}, [](Tape& t, Tape::Node& n) {
        const Tensor& xv = t.node(n.parents[0]).value;
        Tensor& dx = t.sweep_of(n.parents[0]);
        for (std::size_t i = 0; i < n.sweep.numel(); ++i) {
            const double v = xv.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
            const double pdf = 0.3989422804014326779 * std::exp(-0.5 * v * v);
            dx.data[i] += n.sweep.data[i] * (cdf + v * pdf);
        }
    });
}

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Var sigmoid(Var x) {
    Tensor y = x.val();
    for (double& v : y.data) v = sigmoid_scalar(v);
    return x.tape->make(std::move(y), {x.id}, [](Tape& t, Tape::Node& n) {
        const Tensor& yv = n.value;
        Tensor& dx = t.sweep_of(n.parents[0]);
        for (std::size_t i = 0; i < n.sweep.numel(); ++i) {
            const double s = yv.data[i];
            dx.data[i] += n.sweep.data[i] * s * (1.0 - s);
        }
    });
}

// ---------------------------------------------------------------------------
// Softmax over an arbitrary axis, numerically stabilized
// ---------------------------------------------------------------------------

inline Var softmax(Var x, std::size_t axis) {
    const Tensor& xv = x.val();
    if (axis >= xv.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " of " + xv.shape_str());
    }
    const std::size_t len = xv.shape[axis];
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < xv.rank(); ++d) inner *= xv.shape[d];
    const std::size_t outer = xv.numel() / (len * inner);
    Tensor y = xv;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double m = -1e308;
            for (std::size_t s = 0; s < len; ++s) m = std::max(m, xv.data[base + s * inner]);
            double z = 0.0;
            for (std::size_t s = 0; s < len; ++s) {
                const double e = std::exp(xv.data[base + s * inner] - m);
                y.data[base + s * inner] = e;
                z += e;
            }
            for (std::size_t s = 0; s < len; ++s) y.data[base + s * inner] /= z;
        }
    }
    return x.tape->make(std::move(y), {x.id}, [len, inner, outer](Tape& t, Tape::Node& n) {
        Tensor& dx = t.sweep_of(n.parents[0]);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t s = 0; s < len; ++s)
                    dot += n.sweep.data[base + s * inner] * n.value.data[base + s * inner];
                for (std::size_t s = 0; s < len; ++s) {
                    const std::size_t k = base + s * inner;
                    dx.data[k] += n.value.data[k] * (n.sweep.data[k] - dot);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization layers
// ---------------------------------------------------------------------------

// LayerNorm over the last axis of a [R x C] matrix, eps guards zero variance.
inline Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2) throw ShapeError("layernorm: need rank 2, got " + xv.shape_str());
    const std::size_t rows = xv.shape[0], cols = xv.shape[1];
    if (gamma.val().numel() != cols || beta.val().numel() != cols) {
        throw ShapeError("layernorm: gamma/beta " + gamma.val().shape_str() + " vs C=" + std::to_string(cols));
    }
    Tensor y({rows, cols});
    Tensor xhat({rows, cols});
    Tensor invstd({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += xv.data[r * cols + c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = xv.data[r * cols + c] - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        invstd.data[r] = is;
        for (std::size_t c = 0; c < cols; ++c) {
            const double h = (xv.data[r * cols + c] - mean) * is;
            xhat.data[r * cols + c] = h;
            y.data[r * cols + c] = gamma.val().data[c] * h + beta.val().data[c];
        }
    }
    return x.tape->make(std::move(y), {x.id, gamma.id, beta.id},
                        [rows, cols, xhat = std::move(xhat), invstd = std::move(invstd)](Tape& t, Tape::Node& n) {
        const Tensor& gv = t.node(n.parents[1]).value;
        Tensor& dx = t.sweep_of(n.parents[0]);
        Tensor& dg = t.sweep_of(n.parents[1]);
        Tensor& db = t.sweep_of(n.parents[2]);
        for (std::size_t r = 0; r < rows; ++r) {
            double sum_dh = 0.0, sum_dh_h = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                const double dy = n.sweep.data[r * cols + c];
                const double h = xhat.data[r * cols + c];
                dg.data[c] += dy * h;
                db.data[c] += dy;
                const double dh = dy * gv.data[c];
                sum_dh += dh;
                sum_dh_h += dh * h;
            }
            const double inv_c = 1.0 / static_cast<double>(cols);
            for (std::size_t c = 0; c < cols; ++c) {
                const double dy = n.sweep.data[r * cols + c];
                const double h = xhat.data[r * cols + c];
                const double dh = dy * gv.data[c];
                dx.data[r * cols + c] += invstd.data[r] * (dh - inv_c * sum_dh - h * inv_c * sum_dh_h);
            }
        }
    });
}

// Running statistics for batch normalization.
struct BnState {
    Tensor running_mean;
    Tensor running_var;

    explicit BnState(std::size_t channels = 1)
        : running_mean(Tensor::zeros({channels})), running_var(Tensor::full({channels}, 1.0)) {}
};

// BatchNorm over the last axis of a [R x C] input: statistics are taken over
// the R leading rows per channel. In train mode running stats are updated
// with momentum 0.1 (unbiased variance, biased used for normalization).
inline Var batchnorm(Var x, Var gamma, Var beta, BnState& state, bool train, double momentum = 0.1,
                     double eps = 1e-5) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2) throw ShapeError("batchnorm: need rank 2, got " + xv.shape_str());
    const std::size_t rows = xv.shape[0], cols = xv.shape[1];
    if (gamma.val().numel() != cols || beta.val().numel() != cols || state.running_mean.numel() != cols) {
        throw ShapeError("batchnorm: channel mismatch for C=" + std::to_string(cols));
    }
    Tensor y({rows, cols});
    if (train) {
        Tensor xhat({rows, cols});
        Tensor invstd({cols});
        for (std::size_t c = 0; c < cols; ++c) {
            double mean = 0.0;
            for (std::size_t r = 0; r < rows; ++r) mean += xv.data[r * cols + c];
            mean /= static_cast<double>(rows);
            double var = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                const double d = xv.data[r * cols + c] - mean;
                var += d * d;
            }
            const double biased = var / static_cast<double>(rows);
            const double unbiased = rows > 1 ? var / static_cast<double>(rows - 1) : biased;
            state.running_mean.data[c] = (1.0 - momentum) * state.running_mean.data[c] + momentum * mean;
            state.running_var.data[c] = (1.0 - momentum) * state.running_var.data[c] + momentum * unbiased;
            const double is = 1.0 / std::sqrt(biased + eps);
            invstd.data[c] = is;
            for (std::size_t r = 0; r < rows; ++r) {
                const double h = (xv.data[r * cols + c] - mean) * is;
                xhat.data[r * cols + c] = h;
                y.data[r * cols + c] = gamma.val().data[c] * h + beta.val().data[c];
            }
        }
        return x.tape->make(std::move(y), {x.id, gamma.id, beta.id},
                            [rows, cols, xhat = std::move(xhat), invstd = std::move(invstd)](Tape& t, Tape::Node& n) {
            const Tensor& gv = t.node(n.parents[1]).value;
            Tensor& dx = t.sweep_of(n.parents[0]);
            Tensor& dg = t.sweep_of(n.parents[1]);
            Tensor& db = t.sweep_of(n.parents[2]);
            const double inv_r = 1.0 / static_cast<double>(rows);
            for (std::size_t c = 0; c < cols; ++c) {
                double sum_dh = 0.0, sum_dh_h = 0.0;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double dy = n.sweep.data[r * cols + c];
                    const double h = xhat.data[r * cols + c];
                    dg.data[c] += dy * h;
                    db.data[c] += dy;
                    const double dh = dy * gv.data[c];
                    sum_dh += dh;
                    sum_dh_h += dh * h;
                }
                for (std::size_t r = 0; r < rows; ++r) {
                    const double dy = n.sweep.data[r * cols + c];
                    const double h = xhat.data[r * cols + c];
                    const double dh = dy * gv.data[c];
                    dx.data[r * cols + c] += invstd.data[c] * (dh - inv_r * sum_dh - h * inv_r * sum_dh_h);
                }
            }
        });
    }
    // Eval mode: running statistics, no state update.
    Tensor invstd({cols});
    for (std::size_t c = 0; c < cols; ++c) invstd.data[c] = 1.0 / std::sqrt(state.running_var.data[c] + eps);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const double h = (xv.data[r * cols + c] - state.running_mean.data[c]) * invstd.data[c];
            y.data[r * cols + c] = gamma.val().data[c] * h + beta.val().data[c];
        }
    Tensor mean_copy = state.running_mean;
    return x.tape->make(std::move(y), {x.id, gamma.id, beta.id},
                        [rows, cols, invstd = std::move(invstd), mean_copy = std::move(mean_copy)](
                            Tape& t, Tape::Node& n) {
        const Tensor& xv2 = t.node(n.parents[0]).value;
        const Tensor& gv = t.node(n.parents[1]).value;
        Tensor& dx = t.sweep_of(n.parents[0]);
        Tensor& dg = t.sweep_of(n.parents[1]);
        Tensor& db = t.sweep_of(n.parents[2]);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const double dy = n.sweep.data[r * cols + c];
                const double h = (xv2.data[r * cols + c] - mean_copy.data[c]) * invstd.data[c];
                dg.data[c] += dy * h;
                db.data[c] += dy;
                dx.data[r * cols + c] += dy * gv.data[c] * invstd.data[c];
            }
    });
}

// ---------------------------------------------------------------------------
// Convolution (same zero padding)
// ---------------------------------------------------------------------------

// x holds spatial tokens [n_w*n_e x c_in] on an n_w x n_e grid, w is
// [k x k x c_in x c_out]. Output position (i,j) sums over the k x k window
// with out-of-range positions contributing zero. If `bias_taps` is a valid
// Var it must be [k x k x c_out]; each in-range tap adds its bias slice,
// matching a bias folded through a zero-padded value projection.
inline Var conv2d(Var x, Var w, std::size_t n_w, std::size_t n_e, Var bias_taps = Var{}) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (wv.rank() != 4 || wv.shape[0] != wv.shape[1]) {
        throw ShapeError("conv2d: kernel must be [k,k,c_in,c_out], got " + wv.shape_str());
    }
    const std::size_t k = wv.shape[0];
    if (k % 2 == 0) throw KernelError("conv2d: even kernel size " + std::to_string(k) + " unsupported");
    const std::size_t c_in = wv.shape[2], c_out = wv.shape[3];
    if (xv.rank() != 2 || xv.shape[0] != n_w * n_e || xv.shape[1] != c_in) {
        throw ShapeError("conv2d: input " + xv.shape_str() + " vs grid " + std::to_string(n_w) + "x" +
                         std::to_string(n_e) + " c_in=" + std::to_string(c_in));
    }
    const bool has_bias = bias_taps.valid();
    if (has_bias) {
        const Tensor& bt = bias_taps.val();
        if (bt.rank() != 3 || bt.shape[0] != k || bt.shape[1] != k || bt.shape[2] != c_out) {
            throw ShapeError("conv2d: bias taps " + bt.shape_str());
        }
    }
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k / 2);
    Tensor y({n_w * n_e, c_out});
    for (std::size_t i = 0; i < n_w; ++i) {
        for (std::size_t j = 0; j < n_e; ++j) {
            double* yo = &y.data[(i * n_e + j) * c_out];
            for (std::size_t d1 = 0; d1 < k; ++d1) {
                const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(d1) - r;
                if (si < 0 || si >= static_cast<std::ptrdiff_t>(n_w)) continue;
                for (std::size_t d2 = 0; d2 < k; ++d2) {
                    const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + static_cast<std::ptrdiff_t>(d2) - r;
                    if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(n_e)) continue;
                    const double* xs = &xv.data[(static_cast<std::size_t>(si) * n_e + static_cast<std::size_t>(sj)) * c_in];
                    const double* wt = &wv.data[(d1 * k + d2) * c_in * c_out];
                    for (std::size_t ci = 0; ci < c_in; ++ci) {
                        const double xc = xs[ci];
                        if (xc == 0.0) continue;
                        const double* wr = &wt[ci * c_out];
                        for (std::size_t co = 0; co < c_out; ++co) yo[co] += xc * wr[co];
                    }
                    if (has_bias) {
                        const double* bt = &bias_taps.val().data[(d1 * k + d2) * c_out];
                        for (std::size_t co = 0; co < c_out; ++co) yo[co] += bt[co];
                    }
                }
            }
        }
    }
    std::vector<std::uint32_t> parents{x.id, w.id};
    if (has_bias) parents.push_back(bias_taps.id);
    return x.tape->make(std::move(y), std::move(parents),
                        [n_w, n_e, k, c_in, c_out, r, has_bias](Tape& t, Tape::Node& n) {
        const Tensor& xv2 = t.node(n.parents[0]).value;
        const Tensor& wv2 = t.node(n.parents[1]).value;
        Tensor& dx = t.sweep_of(n.parents[0]);
        Tensor& dw = t.sweep_of(n.parents[1]);
        Tensor* dbt = has_bias ? &t.sweep_of(n.parents[2]) : nullptr;
        for (std::size_t i = 0; i < n_w; ++i) {
            for (std::size_t j = 0; j < n_e; ++j) {
                const double* dy = &n.sweep.data[(i * n_e + j) * c_out];
                for (std::size_t d1 = 0; d1 < k; ++d1) {
                    const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(d1) - r;
                    if (si < 0 || si >= static_cast<std::ptrdiff_t>(n_w)) continue;
                    for (std::size_t d2 = 0; d2 < k; ++d2) {
                        const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + static_cast<std::ptrdiff_t>(d2) - r;
                        if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(n_e)) continue;
                        const std::size_t src = (static_cast<std::size_t>(si) * n_e + static_cast<std::size_t>(sj)) * c_in;
                        const std::size_t wof = (d1 * k + d2) * c_in * c_out;
                        for (std::size_t ci = 0; ci < c_in; ++ci) {
                            const double xc = xv2.data[src + ci];
                            double acc = 0.0;
                            const double* wr = &wv2.data[wof + ci * c_out];
                            double* dwr = &dw.data[wof + ci * c_out];
                            for (std::size_t co = 0; co < c_out; ++co) {
                                acc += dy[co] * wr[co];
                                dwr[co] += xc * dy[co];
                            }
                            dx.data[src + ci] += acc;
                        }
                        if (has_bias) {
                            double* d = &dbt->data[(d1 * k + d2) * c_out];
                            for (std::size_t co = 0; co < c_out; ++co) d[co] += dy[co];
                        }
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions and loss
// ---------------------------------------------------------------------------

inline Var sum_all(Var x) {
    double s = 0.0;
    for (double v : x.val().data) s += v;
    return x.tape->make(Tensor::scalar(s), {x.id}, [](Tape& t, Tape::Node& n) {
        Tensor& dx = t.sweep_of(n.parents[0]);
        for (double& v : dx.data) v += n.sweep.data[0];
    });
}

inline Var mean_rows(Var x) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2) throw ShapeError("mean_rows: need rank 2, got " + xv.shape_str());
    const std::size_t rows = xv.shape[0], cols = xv.shape[1];
    Tensor y({1, cols});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) y.data[c] += xv.data[r * cols + c];
    for (double& v : y.data) v /= static_cast<double>(rows);
    return x.tape->make(std::move(y), {x.id}, [rows, cols](Tape& t, Tape::Node& n) {
        Tensor& dx = t.sweep_of(n.parents[0]);
        const double inv = 1.0 / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) dx.data[r * cols + c] += n.sweep.data[c] * inv;
    });
}

// Cross entropy of a single logit row ([C] or [1 x C]) against an integer
// label, computed via a stable log-sum-exp.
inline Var cross_entropy(Var logits, std::size_t label) {
    const Tensor& lv = logits.val();
    const std::size_t c = lv.rank() == 2 ? lv.shape[1] : lv.shape[0];
    if ((lv.rank() == 2 && lv.shape[0] != 1) || lv.rank() > 2 || label >= c) {
        throw ShapeError("cross_entropy: logits " + lv.shape_str() + " label " + std::to_string(label));
    }
    double m = -1e308;
    for (double v : lv.data) m = std::max(m, v);
    double z = 0.0;
    for (double v : lv.data) z += std::exp(v - m);
    const double lse = m + std::log(z);
    const double loss = lse - lv.data[label];
    return logits.tape->make(Tensor::scalar(loss), {logits.id}, [label, lse](Tape& t, Tape::Node& n) {
        const Tensor& lv2 = t.node(n.parents[0]).value;
        Tensor& dl = t.sweep_of(n.parents[0]);
        const double d = n.sweep.data[0];
        for (std::size_t i = 0; i < lv2.numel(); ++i) {
            double p = std::exp(lv2.data[i] - lse);
            dl.data[i] += d * (p - (i == label ? 1.0 : 0.0));
        }
    });
}

// ---------------------------------------------------------------------------
// Small vector helpers used by the gating machinery
// ---------------------------------------------------------------------------

inline Var select(Var x, std::size_t i) {
    if (i >= x.val().numel()) throw ShapeError("select: index " + std::to_string(i) + " of " + x.val().shape_str());
    return x.tape->make(Tensor::scalar(x.val().data[i]), {x.id}, [i](Tape& t, Tape::Node& n) {
        t.sweep_of(n.parents[0]).data[i] += n.sweep.data[0];
    });
}

// y = x * s where s is a scalar var.
inline Var scale_by(Var x, Var s) {
    if (s.val().numel() != 1) throw ShapeError("scale_by: scalar expected, got " + s.val().shape_str());
    Tensor y = x.val();
    const double sv = s.val().data[0];
    for (double& v : y.data) v *= sv;
    return x.tape->make(std::move(y), {x.id, s.id}, [](Tape& t, Tape::Node& n) {
        const Tensor& xv = t.node(n.parents[0]).value;
        const double sv2 = t.node(n.parents[1]).value.data[0];
        Tensor& dx = t.sweep_of(n.parents[0]);
        Tensor& ds = t.sweep_of(n.parents[1]);
        double acc = 0.0;
        for (std::size_t i = 0; i < n.sweep.numel(); ++i) {
            dx.data[i] += n.sweep.data[i] * sv2;
            acc += n.sweep.data[i] * xv.data[i];
        }
        ds.data[0] += acc;
    });
}

// y[r, c] = x[r, c] * g[c]
inline Var colwise_mul(Var x, Var g) {
    const Tensor& xv = x.val();
    const Tensor& gv = g.val();
    if (xv.rank() != 2 || gv.numel() != xv.shape[1]) {
        throw ShapeError("colwise_mul: " + xv.shape_str() + " vs " + gv.shape_str());
    }
    const std::size_t rows = xv.shape[0], cols = xv.shape[1];
    Tensor y = xv;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) y.data[r * cols + c] *= gv.data[c];
    return x.tape->make(std::move(y), {x.id, g.id}, [rows, cols](Tape& t, Tape::Node& n) {
        const Tensor& xv2 = t.node(n.parents[0]).value;
        const Tensor& gv2 = t.node(n.parents[1]).value;
        Tensor& dx = t.sweep_of(n.parents[0]);
        Tensor& dg = t.sweep_of(n.parents[1]);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                dx.data[r * cols + c] += n.sweep.data[r * cols + c] * gv2.data[c];
                dg.data[c] += n.sweep.data[r * cols + c] * xv2.data[r * cols + c];
            }
    });
}

// Scalar sum_i w[i] * x[i] with constant weights.
inline Var weighted_sum(Var x, std::vector<double> w) {
    if (x.val().numel() != w.size()) {
        throw ShapeError("weighted_sum: " + x.val().shape_str() + " vs " + std::to_string(w.size()) + " weights");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x.val().data[i];
    return x.tape->make(Tensor::scalar(s), {x.id}, [w = std::move(w)](Tape& t, Tape::Node& n) {
        Tensor& dx = t.sweep_of(n.parents[0]);
        for (std::size_t i = 0; i < w.size(); ++i) dx.data[i] += n.sweep.data[0] * w[i];
    });
}

inline Var square(Var x) { return mul(x, x); }

}  // namespace spvit
