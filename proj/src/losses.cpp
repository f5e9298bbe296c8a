#include "iot/losses.hpp"

#include <cmath>

namespace iot {

Var clamp_probs(const Var& pi, double floor) {
    const int64_t k = pi.numel();
    if (floor <= 0.0 || floor * static_cast<double>(k) >= 1.0) {
        fail("clamp_probs: floor " + std::to_string(floor) + " incompatible with K = " +
             std::to_string(k));
    }
    return clamp_min(pi, floor);
}

Var weighted_task_loss(const std::vector<std::vector<Var>>& path_losses, const Var& gamma,
                       const Var& lambda) {
    const size_t m = path_losses.size();
    if (m == 0) fail("weighted_task_loss: empty loss matrix");
    const size_t n = path_losses[0].size();
    if (gamma.numel() != static_cast<int64_t>(m) || lambda.numel() != static_cast<int64_t>(n)) {
        fail("weighted_task_loss: weight lengths " + std::to_string(gamma.numel()) + "x" +
             std::to_string(lambda.numel()) + " do not match loss matrix " + std::to_string(m) +
             "x" + std::to_string(n));
    }
    Var acc;
    for (size_t i = 0; i < m; ++i) {
        if (path_losses[i].size() != n) fail("weighted_task_loss: ragged loss matrix");
        for (size_t j = 0; j < n; ++j) {
            Var term = mul(mul(index(gamma, static_cast<int64_t>(i)),
                               index(lambda, static_cast<int64_t>(j))),
                           path_losses[i][j]);
            acc = acc.defined() ? add(acc, term) : term;
        }
    }
    return acc;
}

namespace {

Var stacked_batch(const char* op, const std::vector<Var>& batch_pis, bool normalize) {
    if (batch_pis.empty()) fail(std::string(op) + ": empty batch");
    if (!normalize) return stack_rows(batch_pis);
    std::vector<Var> rows;
    rows.reserve(batch_pis.size());
    for (const Var& pi : batch_pis) {
        rows.push_back(mul_scalar_var(pi, reciprocal(sum_all(pi))));
    }
    return stack_rows(rows);
}

}  // namespace

Var exploration_loss(const std::vector<Var>& batch_pis, bool normalize) {
    Var stacked = stacked_batch("exploration_loss", batch_pis, normalize);
    const double k = static_cast<double>(stacked.shape()[1]);
    Var mean_pi = mean_axis(stacked, 0);                    // [K]
    Var mean_log = mean_axis(log_elem(mean_pi), 0);         // (1/K) sum log
    return add_scalar(scalar_mul(mean_log, -1.0), -std::log(k));
}

Var exploitation_loss(const std::vector<Var>& batch_pis, bool normalize) {
    Var stacked = stacked_batch("exploitation_loss", batch_pis, normalize);
    const double k = static_cast<double>(stacked.shape()[1]);
    Var mean_log = mean_axis(mean_axis(log_elem(stacked), 1), 0);  // E_x[(1/K) sum log]
    return add_scalar(mean_log, std::log(k));
}

Var total_loss(LossBundle& bundle, double c1, double c2) {
    if (c1 < 0.0 || c2 < 0.0) fail("total_loss: coefficients must be nonnegative");
    if (!bundle.l_c.defined()) fail("total_loss: missing task loss");
    Var total = bundle.l_c;
    for (const Var* aux : {&bundle.l_d_enc, &bundle.l_d_dec}) {
        if (aux->defined()) total = add(total, scalar_mul(*aux, c1));
    }
    for (const Var* aux : {&bundle.l_s_enc, &bundle.l_s_dec}) {
        if (aux->defined()) total = add(total, scalar_mul(*aux, c2));
    }
    bundle.c1 = c1;
    bundle.c2 = c2;
    bundle.total = total;
    return total;
}

}  // namespace iot
