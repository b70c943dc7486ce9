"""Compiled single-threaded training loop for the pairwise ranking epoch.

Feature lists arrive as CSR index arrays so the kernel can sum per-feature
embeddings without object overhead. The per-epoch seed drives the kernel's
own RNG; given identical inputs the epoch is bit-reproducible.

Step order modes:
  mode 0: n_pos weighted draws with replacement over positive pairs, via
          right-bisect on a cumulative weight array (uniform weights give
          plain uniform sampling, so the unweighted path is this one too)
  mode 1: one pass over a random permutation of the pairs, with a per-pair
          multiplier applied to the gradient magnitude

A step with no remaining negative doctors is skipped. Negatives are drawn
uniformly from the non-interacted doctors by rejection; the rank scale is
``harmonic[(n_neg - 1) // attempts]``. A violation needs the negative's raw
score to strictly exceed the positive's; the margin enters the loss
magnitude only. Non-finite scores abort the epoch, returning the offending
step in ``err_step``.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _contains(arr, lo, hi, x):
    while lo < hi:
        mid = (lo + hi) // 2
        v = arr[mid]
        if v == x:
            return True
        if v < x:
            lo = mid + 1
        else:
            hi = mid
    return False


@njit(cache=True)
def _adagrad_doc(doc_emb, doc_emb_acc, doc_bias, doc_bias_acc, f, sign_g, p,
                 lr, bias_enabled):
    n_dim = p.shape[0]
    for d0 in range(n_dim):
        gr = sign_g * p[d0]
        acc = doc_emb_acc[f, d0] + gr * gr
        doc_emb_acc[f, d0] = acc
        doc_emb[f, d0] -= lr * gr / (np.sqrt(acc) + 1e-10)
    if bias_enabled == 1:
        acc = doc_bias_acc[f] + sign_g * sign_g
        doc_bias_acc[f] = acc
        doc_bias[f] -= lr * sign_g / (np.sqrt(acc) + 1e-10)


@njit(cache=True)
def run_epoch(
    pat_emb, doc_emb, pat_bias, doc_bias,
    pat_emb_acc, doc_emb_acc, pat_bias_acc, doc_bias_acc,
    pat_idx, pat_ptr, doc_idx, doc_ptr,
    pos_pat, pos_doc, pos_cumweight, grad_weight,
    upos_idx, upos_ptr,
    n_doctors, lr, margin, max_sampled, bias_enabled,
    harmonic, mode, seed,
):
    np.random.seed(seed)
    n_pos = pos_pat.shape[0]
    n_dim = pat_emb.shape[1]
    total_weight = pos_cumweight[n_pos - 1]

    order = np.empty(0, dtype=np.int64)
    if mode == 1:
        order = np.random.permutation(n_pos)

    p = np.empty(n_dim)
    qj = np.empty(n_dim)
    qd = np.empty(n_dim)
    gv = np.empty(n_dim)

    total_loss = 0.0
    total_attempts = 0
    n_skipped = 0
    n_updates = 0

    for step in range(n_pos):
        if mode == 1:
            k = order[step]
            weight = grad_weight[k]
        else:
            u = np.random.random() * total_weight
            lo = 0
            hi = n_pos
            while lo < hi:
                mid = (lo + hi) // 2
                if pos_cumweight[mid] <= u:
                    lo = mid + 1
                else:
                    hi = mid
            k = lo if lo < n_pos else n_pos - 1
            weight = 1.0
        i = pos_pat[k]
        j = pos_doc[k]

        n_neg = n_doctors - (upos_ptr[i + 1] - upos_ptr[i])
        if n_neg <= 0:
            n_skipped += 1
            continue

        b_i = 0.0
        for d0 in range(n_dim):
            p[d0] = 0.0
        for t in range(pat_ptr[i], pat_ptr[i + 1]):
            f = pat_idx[t]
            b_i += pat_bias[f]
            for d0 in range(n_dim):
                p[d0] += pat_emb[f, d0]

        b_j = 0.0
        for d0 in range(n_dim):
            qj[d0] = 0.0
        for t in range(doc_ptr[j], doc_ptr[j + 1]):
            f = doc_idx[t]
            b_j += doc_bias[f]
            for d0 in range(n_dim):
                qj[d0] += doc_emb[f, d0]

        raw_ij = np.dot(p, qj)
        if bias_enabled == 1:
            raw_ij += b_i + b_j
        if not np.isfinite(raw_ij):
            return total_loss, total_attempts, n_skipped, n_updates, step

        found = -1
        attempts = 0
        raw_id = 0.0
        while attempts < max_sampled:
            dneg = -1
            for _try in range(1000):
                cand = np.random.randint(0, n_doctors)
                if not _contains(upos_idx, upos_ptr[i], upos_ptr[i + 1], cand):
                    dneg = cand
                    break
            if dneg == -1:
                start = np.random.randint(0, n_doctors)
                for off in range(n_doctors):
                    cand = (start + off) % n_doctors
                    if not _contains(upos_idx, upos_ptr[i], upos_ptr[i + 1], cand):
                        dneg = cand
                        break
            attempts += 1
            total_attempts += 1

            b_d = 0.0
            for d0 in range(n_dim):
                qd[d0] = 0.0
            for t in range(doc_ptr[dneg], doc_ptr[dneg + 1]):
                f = doc_idx[t]
                b_d += doc_bias[f]
                for d0 in range(n_dim):
                    qd[d0] += doc_emb[f, d0]
            raw_id = np.dot(p, qd)
            if bias_enabled == 1:
                raw_id += b_i + b_d
            if not np.isfinite(raw_id):
                return total_loss, total_attempts, n_skipped, n_updates, step
            if raw_id > raw_ij:
                found = dneg
                break

        if found < 0:
            continue

        rank = (n_neg - 1) // attempts
        scale = harmonic[rank]
        g = scale * weight
        hinge = margin - raw_ij + raw_id
        total_loss += g * hinge
        n_updates += 1
        if g <= 0.0:
            continue

        for d0 in range(n_dim):
            gv[d0] = g * (qd[d0] - qj[d0])
        for t in range(pat_ptr[i], pat_ptr[i + 1]):
            f = pat_idx[t]
            for d0 in range(n_dim):
                gr = gv[d0]
                acc = pat_emb_acc[f, d0] + gr * gr
                pat_emb_acc[f, d0] = acc
                pat_emb[f, d0] -= lr * gr / (np.sqrt(acc) + 1e-10)
        # the patient bias gradient cancels between the two raw scores

        # merge-walk the sorted doctor feature lists; a feature shared by the
        # positive and the sampled negative contributes zero net gradient
        aj = doc_ptr[j]
        ej = doc_ptr[j + 1]
        ad = doc_ptr[found]
        ed = doc_ptr[found + 1]
        while aj < ej and ad < ed:
            fj = doc_idx[aj]
            fd = doc_idx[ad]
            if fj == fd:
                aj += 1
                ad += 1
            elif fj < fd:
                _adagrad_doc(doc_emb, doc_emb_acc, doc_bias, doc_bias_acc,
                             fj, -g, p, lr, bias_enabled)
                aj += 1
            else:
                _adagrad_doc(doc_emb, doc_emb_acc, doc_bias, doc_bias_acc,
                             fd, g, p, lr, bias_enabled)
                ad += 1
        while aj < ej:
            _adagrad_doc(doc_emb, doc_emb_acc, doc_bias, doc_bias_acc,
                         doc_idx[aj], -g, p, lr, bias_enabled)
            aj += 1
        while ad < ed:
            _adagrad_doc(doc_emb, doc_emb_acc, doc_bias, doc_bias_acc,
                         doc_idx[ad], g, p, lr, bias_enabled)
            ad += 1

    return total_loss, total_attempts, n_skipped, n_updates, -1
