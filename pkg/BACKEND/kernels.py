"""
Compiled inner loops of the DPM sweep.

Normals here are carried by precision factors: a lower-triangular T with
inverse(Sigma) = T T', so log N(x | phi, Sigma) needs one triangular product
and no solve. half_log_det is 0.5 * log det(Sigma) = -sum(log diag T).
"""

import numpy as np
from numba import njit

LOG_2PI = np.log(2.0 * np.pi)


@njit(cache=True)
def normal_loglik(x, phi, factor, half_log_det):
    p = x.shape[0]
    quad = 0.0
    for j in range(p):
        acc = 0.0
        for i in range(j, p):
            acc += factor[i, j] * (x[i] - phi[i])
        quad += acc * acc
    return -0.5 * (p * LOG_2PI + quad) - half_log_det


@njit(cache=True)
def niw_from_bartlett(chol_inv_scales, normals, chis, z, locations, inv_sqrt_kappas):
    """
    NIW draws from Bartlett variates.

    chol_inv_scales[r] is the lower Cholesky factor of inverse(scale_matrix);
    chis[r, i] ~ chi2(dof - i); normals and z are standard normal.
    """
    n, p = z.shape
    phis = np.empty((n, p))
    sigmas = np.empty((n, p, p))
    factors = np.zeros((n, p, p))
    half_log_dets = np.empty(n)
    bartlett = np.zeros((p, p))
    t = np.zeros((p, p))
    inverse = np.zeros((p, p))
    for r in range(n):
        for i in range(p):
            bartlett[i, i] = np.sqrt(chis[r, i])
            for j in range(i):
                bartlett[i, j] = normals[r, i, j]
        # Product of lower-triangular factors.
        for i in range(p):
            for j in range(i + 1):
                acc = 0.0
                for k in range(j, i + 1):
                    acc += chol_inv_scales[r, i, k] * bartlett[k, j]
                t[i, j] = acc
        inverse[:, :] = 0.0
        for i in range(p):
            inverse[i, i] = 1.0 / t[i, i]
            for j in range(i):
                acc = 0.0
                for k in range(j, i):
                    acc += t[i, k] * inverse[k, j]
                inverse[i, j] = -acc / t[i, i]
        hld = 0.0
        for i in range(p):
            hld -= np.log(t[i, i])
        for i in range(p):
            for j in range(p):
                acc = 0.0
                for k in range(max(i, j), p):
                    acc += inverse[k, i] * inverse[k, j]
                sigmas[r, i, j] = acc
            acc = 0.0
            for k in range(i, p):
                acc += inverse[k, i] * z[r, k]
            phis[r, i] = locations[r, i] + inv_sqrt_kappas[r] * acc
        for i in range(p):
            for j in range(i + 1):
                factors[r, i, j] = t[i, j]
        half_log_dets[r] = hld
    return phis, sigmas, factors, half_log_dets


@njit(cache=True)
def assignment_scan(labels, effects, order, counts, phis, sigmas, factors, half_log_dets, n_slots,
                    aux_phis, aux_sigmas, aux_factors, aux_half_log_dets, log_aux_weight, uniforms,
                    prior_only):
    """
    Auxiliary-component reassignment of each group in `order`, in place.

    Cluster arrays are slots with capacity for one new cluster per scanned
    group; a slot whose count drops to zero is dead until a group reopens it.
    Returns the number of slots in use (live or dead).
    """
    n_aux = aux_phis.shape[1]
    weights = np.empty(phis.shape[0] + n_aux)
    cand_phis = np.empty(aux_phis.shape[1:])
    cand_sigmas = np.empty(aux_sigmas.shape[1:])
    cand_factors = np.empty(aux_factors.shape[1:])
    cand_hld = np.empty(n_aux)
    for t in range(order.shape[0]):
        i = order[t]
        x = effects[i]
        c = labels[i]
        counts[c] -= 1
        cand_phis[:] = aux_phis[t]
        cand_sigmas[:] = aux_sigmas[t]
        cand_factors[:] = aux_factors[t]
        cand_hld[:] = aux_half_log_dets[t]
        if counts[c] == 0:
            # A singleton's own parameters fill the first auxiliary slot.
            cand_phis[0] = phis[c]
            cand_sigmas[0] = sigmas[c]
            cand_factors[0] = factors[c]
            cand_hld[0] = half_log_dets[c]

        top = -np.inf
        for s in range(n_slots):
            if counts[s] > 0:
                lw = np.log(counts[s])
                if not prior_only:
                    lw += normal_loglik(x, phis[s], factors[s], half_log_dets[s])
            else:
                lw = -np.inf
            weights[s] = lw
            if lw > top:
                top = lw
        for a in range(n_aux):
            lw = log_aux_weight
            if not prior_only:
                lw += normal_loglik(x, cand_phis[a], cand_factors[a], cand_hld[a])
            weights[n_slots + a] = lw
            if lw > top:
                top = lw

        total = 0.0
        for s in range(n_slots + n_aux):
            weights[s] = np.exp(weights[s] - top)
            total += weights[s]
        target = uniforms[t] * total
        choice = n_slots + n_aux - 1
        acc = 0.0
        for s in range(n_slots + n_aux):
            acc += weights[s]
            if target < acc:
                choice = s
                break

        if choice < n_slots:
            labels[i] = choice
            counts[choice] += 1
        else:
            a = choice - n_slots
            slot = c
            if counts[c] > 0:
                slot = n_slots
                n_slots += 1
            phis[slot] = cand_phis[a]
            sigmas[slot] = cand_sigmas[a]
            factors[slot] = cand_factors[a]
            half_log_dets[slot] = cand_hld[a]
            labels[i] = slot
            counts[slot] = 1
    return n_slots
