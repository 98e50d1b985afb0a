#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dqd2v/graph.hpp"
#include "dqd2v/rng.hpp"

namespace dqd2v::test {

inline Tensor random_tensor(Rng& rng, std::vector<idx> shape, double std = 1.0) {
    Tensor t(std::move(shape));
    for (idx i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, std);
    return t;
}

// Central finite differences of a scalar-valued function w.r.t. one leaf,
// compared elementwise against the analytic gradient. Returns the worst
// relative error, with an absolute floor so near-zero entries don't blow up
// the ratio.
struct FdReport {
    double max_rel_err = 0.0;
    idx worst_index = -1;
};

inline FdReport fd_check(const ag::Var& leaf,
                         const std::function<ag::Var()>& build_loss,
                         double h = 1e-6, double floor_scale = 1e-8) {
    leaf->grad = Tensor();  // reset; backward accumulates
    ag::Var loss = build_loss();
    ag::backward(loss);
    Tensor analytic = leaf->grad.same_shape(leaf->val) ? leaf->grad
                                                       : Tensor::zeros(leaf->val.shape());
    FdReport rep;
    for (idx i = 0; i < leaf->val.numel(); ++i) {
        const double orig = leaf->val[i];
        leaf->val[i] = orig + h;
        const double up = build_loss()->val[0];
        leaf->val[i] = orig - h;
        const double dn = build_loss()->val[0];
        leaf->val[i] = orig;
        const double fd = (up - dn) / (2.0 * h);
        const double denom = std::max({std::abs(fd), std::abs(analytic[i]), floor_scale});
        const double rel = std::abs(fd - analytic[i]) / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
        }
    }
    return rep;
}

// FD across stop-gradient boundaries: the recorded nominal pass defines the
// function (detached branches held fixed); replays perturb parameters only.
inline FdReport fd_check_frozen(const ag::Var& leaf,
                                const std::function<ag::Var()>& build_loss,
                                double h = 1e-6, double floor_scale = 1e-8) {
    leaf->grad = Tensor();
    ag::freeze_begin_record();
    ag::Var loss = build_loss();
    ag::backward(loss);
    Tensor analytic = leaf->grad.same_shape(leaf->val) ? leaf->grad
                                                       : Tensor::zeros(leaf->val.shape());
    FdReport rep;
    for (idx i = 0; i < leaf->val.numel(); ++i) {
        const double orig = leaf->val[i];
        leaf->val[i] = orig + h;
        ag::freeze_begin_replay();
        const double up = build_loss()->val[0];
        leaf->val[i] = orig - h;
        ag::freeze_begin_replay();
        const double dn = build_loss()->val[0];
        leaf->val[i] = orig;
        const double fd = (up - dn) / (2.0 * h);
        const double denom = std::max({std::abs(fd), std::abs(analytic[i]), floor_scale});
        const double rel = std::abs(fd - analytic[i]) / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
        }
    }
    ag::freeze_end();
    return rep;
}

inline bool all_zero_grad(const ag::Var& v) {
    if (!v->grad.same_shape(v->val)) return true;  // never touched
    for (idx i = 0; i < v->grad.numel(); ++i)
        if (v->grad[i] != 0.0) return false;
    return true;
}

}  // namespace dqd2v::test
