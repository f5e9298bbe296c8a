#pragma once

#include <vector>

#include "iot/tensor.hpp"

namespace iot {

// Per-step loss pieces. Scalars live as graph Vars so the total stays
// differentiable; sides with a single candidate order leave their auxiliary
// entries undefined and contribute zero.
struct LossBundle {
    std::vector<std::vector<Var>> path_losses;  // [M][N]
    Var l_c;
    Var l_d_enc, l_d_dec;
    Var l_s_enc, l_s_dec;
    Var total;
    double c1 = 0.0;
    double c2 = 0.0;
    double clamp_floor = 0.0;
};

// Entry-wise max(pi_k, floor); deliberately not renormalized, so clamped
// vectors may sum slightly above one. Applied before every log of pi and
// before the Gumbel-softmax weighting.
Var clamp_probs(const Var& pi, double floor = 0.05);

// L_C = sum_m sum_n gamma_m * lambda_n * path_losses[m][n].
Var weighted_task_loss(const std::vector<std::vector<Var>>& path_losses, const Var& gamma,
                       const Var& lambda);

// Exploration: KL from uniform to the batch-mean routing distribution,
// -(1/K) sum_k log(mean_x pi_x[k]) - log K.
//
// Clamped vectors sum slightly above one; with normalize=true (default) each
// vector is rescaled to a proper distribution before the KL arithmetic, which
// is what makes L_D >= 0 hold unconditionally. normalize=false evaluates the
// formula on the inputs as-is (sensitivity variant; the sign bound can then
// fail by up to log of the clamp inflation).
Var exploration_loss(const std::vector<Var>& batch_pis, bool normalize = true);

// Exploitation: negative batch mean of per-instance KL from uniform,
// mean_x[(1/K) sum_k log pi_x[k]] + log K. Same normalize switch.
Var exploitation_loss(const std::vector<Var>& batch_pis, bool normalize = true);

// total = l_c + c1 * (l_d_enc + l_d_dec) + c2 * (l_s_enc + l_s_dec),
// with undefined sides contributing zero. Fills bundle.total and returns it.
Var total_loss(LossBundle& bundle, double c1, double c2);

}  // namespace iot
