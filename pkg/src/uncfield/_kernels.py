"""Numba kernels for ray marching, training gradients, and field updates.

Everything here is an internal fast path; the public modules expose the
same math through plain numpy reference implementations, and the test
suite cross-checks the two.  Kernels are single-threaded and sequential so
results are reproducible bit-for-bit; parallelism happens one level up by
splitting pixel rows across threads (each chunk writes disjoint outputs).
"""

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True, nogil=True, inline="always")
def _softplus(x):
    if x > 30.0:
        return x
    return math.log1p(math.exp(x))


@njit(cache=True, nogil=True, inline="always")
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, nogil=True, inline="always")
def _corners(px, py, pz, gmin, gscale, nx, ny, nz, c8, w8):
    """Fill the 8 enclosing vertex indices and trilinear weights for a point.

    Grid coordinates are clamped into the grid; on exact cell faces the
    lower cell is used, matching grid._cell_and_frac.
    """
    gx = (px - gmin[0]) * gscale[0]
    gy = (py - gmin[1]) * gscale[1]
    gz = (pz - gmin[2]) * gscale[2]
    if gx < 0.0:
        gx = 0.0
    elif gx > nx - 1.0:
        gx = nx - 1.0
    if gy < 0.0:
        gy = 0.0
    elif gy > ny - 1.0:
        gy = ny - 1.0
    if gz < 0.0:
        gz = 0.0
    elif gz > nz - 1.0:
        gz = nz - 1.0
    ix = int(math.ceil(gx)) - 1
    iy = int(math.ceil(gy)) - 1
    iz = int(math.ceil(gz)) - 1
    if ix < 0:
        ix = 0
    elif ix > nx - 2:
        ix = nx - 2
    if iy < 0:
        iy = 0
    elif iy > ny - 2:
        iy = ny - 2
    if iz < 0:
        iz = 0
    elif iz > nz - 2:
        iz = nz - 2
    fx = gx - ix
    fy = gy - iy
    fz = gz - iz
    base = ix + nx * (iy + ny * iz)
    sy = nx
    sz = nx * ny
    c8[0] = base
    c8[1] = base + 1
    c8[2] = base + sy
    c8[3] = base + sy + 1
    c8[4] = base + sz
    c8[5] = base + sz + 1
    c8[6] = base + sz + sy
    c8[7] = base + sz + sy + 1
    mx = 1.0 - fx
    my = 1.0 - fy
    mz = 1.0 - fz
    w8[0] = mx * my * mz
    w8[1] = fx * my * mz
    w8[2] = mx * fy * mz
    w8[3] = fx * fy * mz
    w8[4] = mx * my * fz
    w8[5] = fx * my * fz
    w8[6] = mx * fy * fz
    w8[7] = fx * fy * fz


@njit(cache=True, nogil=True, inline="always")
def _num_segments(span, step):
    if span <= 0.0:
        return 0
    n = int(math.ceil(span / step - 1e-12))
    if n < 1:
        n = 1
    return n


@njit(cache=True, nogil=True)
def forward_render(den, col, o, d, tn, tf, eps_s, eps_c,
                   step, shift, beta_floor, bg, gmin, gscale, res, out):
    """Stochastic volume rendering of a ray batch.

    For each ray and trajectory k, one shared (eps_sigma, eps_color) draw
    perturbs density and color at every sample; out[r, k, :] receives the
    composited color.  eps == 0 reproduces the deterministic mean render.
    """
    n_rays = o.shape[0]
    K = eps_s.shape[1]
    nx, ny, nz = res[0], res[1], res[2]
    span_max = 0.0
    for r in range(n_rays):
        s = tf[r] - tn[r]
        if s > span_max:
            span_max = s
    m_max = _num_segments(span_max, step)
    if m_max == 0:
        for r in range(n_rays):
            for k in range(K):
                for j in range(3):
                    out[r, k, j] = bg[j]
        return
    c8 = np.empty((m_max, 8), dtype=np.int64)
    w8 = np.empty((m_max, 8), dtype=np.float64)
    rawmu = np.empty(m_max, dtype=np.float64)
    bsig = np.empty(m_max, dtype=np.float64)
    muc = np.empty((m_max, 3), dtype=np.float64)
    bcol = np.empty(m_max, dtype=np.float64)
    delta = np.empty(m_max, dtype=np.float64)
    for r in range(n_rays):
        span = tf[r] - tn[r]
        m = _num_segments(span, step)
        if m == 0:
            for k in range(K):
                for j in range(3):
                    out[r, k, j] = bg[j]
            continue
        for i in range(m):
            dlt = step if i < m - 1 else span - step * (m - 1)
            delta[i] = dlt
            t = tn[r] + step * i + 0.5 * dlt
            px = o[r, 0] + t * d[r, 0]
            py = o[r, 1] + t * d[r, 1]
            pz = o[r, 2] + t * d[r, 2]
            _corners(px, py, pz, gmin, gscale, nx, ny, nz, c8[i], w8[i])
            rm = 0.0
            rb = 0.0
            r0 = 0.0
            r1 = 0.0
            r2 = 0.0
            rcb = 0.0
            for q in range(8):
                idx = c8[i, q]
                w = w8[i, q]
                rm += w * den[idx, 0]
                rb += w * den[idx, 1]
                r0 += w * col[idx, 0]
                r1 += w * col[idx, 1]
                r2 += w * col[idx, 2]
                rcb += w * col[idx, 3]
            rawmu[i] = rm
            b = _softplus(rb)
            bsig[i] = b if b > beta_floor else beta_floor
            muc[i, 0] = _sigmoid(r0)
            muc[i, 1] = _sigmoid(r1)
            muc[i, 2] = _sigmoid(r2)
            bc = _softplus(rcb)
            bcol[i] = bc if bc > beta_floor else beta_floor
        for k in range(K):
            es = eps_s[r, k]
            ec = eps_c[r, k]
            T = 1.0
            acc0 = 0.0
            acc1 = 0.0
            acc2 = 0.0
            for i in range(m):
                sg = _softplus(rawmu[i] + es * bsig[i] + shift)
                att = math.exp(-sg * delta[i])
                w = T * (1.0 - att)
                c0 = muc[i, 0] + ec * bcol[i]
                c1 = muc[i, 1] + ec * bcol[i]
                c2 = muc[i, 2] + ec * bcol[i]
                if c0 < 0.0:
                    c0 = 0.0
                elif c0 > 1.0:
                    c0 = 1.0
                if c1 < 0.0:
                    c1 = 0.0
                elif c1 > 1.0:
                    c1 = 1.0
                if c2 < 0.0:
                    c2 = 0.0
                elif c2 > 1.0:
                    c2 = 1.0
                acc0 += w * c0
                acc1 += w * c1
                acc2 += w * c2
                T *= att
            out[r, k, 0] = acc0 + T * bg[0]
            out[r, k, 1] = acc1 + T * bg[1]
            out[r, k, 2] = acc2 + T * bg[2]


@njit(cache=True, nogil=True)
def train_batch(den, col, gden, gcol, o, d, tn, tf, gt, eps_s, eps_c,
                step, shift, beta_floor, bw_floor, lam, bg, inv_batch,
                gmin, gscale, res):
    """Fused forward + analytic reverse pass for one ray batch.

    Accumulates parameter gradients of the mean per-ray loss (KDE negative
    log-likelihood with the bandwidth treated as constant, plus the density
    regularizer) into gden/gcol.  Returns (nll_sum, reg_sum, sqerr_sum)
    where sqerr_sum sums squared errors of the K-mean colors for batch PSNR
    logging.
    """
    n_rays = o.shape[0]
    K = eps_s.shape[1]
    nx, ny, nz = res[0], res[1], res[2]
    kpow = math.exp(math.log(float(K)) / 7.0)
    span_max = 0.0
    for r in range(n_rays):
        s = tf[r] - tn[r]
        if s > span_max:
            span_max = s
    m_max = _num_segments(span_max, step)
    nll_sum = 0.0
    reg_sum = 0.0
    sqerr_sum = 0.0
    if m_max == 0:
        m_max = 1
    c8 = np.empty((m_max, 8), dtype=np.int64)
    w8 = np.empty((m_max, 8), dtype=np.float64)
    rawmu = np.empty(m_max, dtype=np.float64)
    bsig = np.empty(m_max, dtype=np.float64)
    dbs = np.empty(m_max, dtype=np.float64)  # d(beta_sigma)/d(raw channel)
    muc = np.empty((m_max, 3), dtype=np.float64)
    bcol = np.empty(m_max, dtype=np.float64)
    dbc = np.empty(m_max, dtype=np.float64)
    delta = np.empty(m_max, dtype=np.float64)
    att = np.empty((m_max, K), dtype=np.float64)
    dsdz = np.empty((m_max, K), dtype=np.float64)
    Tk = np.empty((m_max + 1, K), dtype=np.float64)
    chat = np.empty((K, 3), dtype=np.float64)
    dC = np.empty((K, 3), dtype=np.float64)
    q = np.empty(K, dtype=np.float64)
    amu = np.zeros(m_max, dtype=np.float64)
    ab = np.zeros(m_max, dtype=np.float64)
    acm = np.zeros((m_max, 3), dtype=np.float64)
    acb = np.zeros(m_max, dtype=np.float64)
    Suf = np.empty(3, dtype=np.float64)
    hdiag = np.empty(3, dtype=np.float64)
    for r in range(n_rays):
        span = tf[r] - tn[r]
        m = _num_segments(span, step)
        if m == 0:
            # No samples: estimate is the background for every trajectory.
            for k in range(K):
                for j in range(3):
                    chat[k, j] = bg[j]
        else:
            for i in range(m):
                dlt = step if i < m - 1 else span - step * (m - 1)
                delta[i] = dlt
                t = tn[r] + step * i + 0.5 * dlt
                px = o[r, 0] + t * d[r, 0]
                py = o[r, 1] + t * d[r, 1]
                pz = o[r, 2] + t * d[r, 2]
                _corners(px, py, pz, gmin, gscale, nx, ny, nz, c8[i], w8[i])
                rm = 0.0
                rb = 0.0
                r0 = 0.0
                r1 = 0.0
                r2 = 0.0
                rcb = 0.0
                for qq in range(8):
                    idx = c8[i, qq]
                    w = w8[i, qq]
                    rm += w * den[idx, 0]
                    rb += w * den[idx, 1]
                    r0 += w * col[idx, 0]
                    r1 += w * col[idx, 1]
                    r2 += w * col[idx, 2]
                    rcb += w * col[idx, 3]
                rawmu[i] = rm
                b = _softplus(rb)
                if b > beta_floor:
                    bsig[i] = b
                    dbs[i] = 1.0 - math.exp(-b)  # sigmoid(rb)
                else:
                    bsig[i] = beta_floor
                    dbs[i] = 0.0
                muc[i, 0] = _sigmoid(r0)
                muc[i, 1] = _sigmoid(r1)
                muc[i, 2] = _sigmoid(r2)
                bc = _softplus(rcb)
                if bc > beta_floor:
                    bcol[i] = bc
                    dbc[i] = 1.0 - math.exp(-bc)
                else:
                    bcol[i] = beta_floor
                    dbc[i] = 0.0
            for k in range(K):
                es = eps_s[r, k]
                ec = eps_c[r, k]
                T = 1.0
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                ssum = 0.0
                for i in range(m):
                    Tk[i, k] = T
                    sg = _softplus(rawmu[i] + es * bsig[i] + shift)
                    dsdz[i, k] = 1.0 - math.exp(-sg)  # sigmoid of the pre-activation
                    a = math.exp(-sg * delta[i])
                    att[i, k] = a
                    w = T * (1.0 - a)
                    c0 = muc[i, 0] + ec * bcol[i]
                    c1 = muc[i, 1] + ec * bcol[i]
                    c2 = muc[i, 2] + ec * bcol[i]
                    if c0 < 0.0:
                        c0 = 0.0
                    elif c0 > 1.0:
                        c0 = 1.0
                    if c1 < 0.0:
                        c1 = 0.0
                    elif c1 > 1.0:
                        c1 = 1.0
                    if c2 < 0.0:
                        c2 = 0.0
                    elif c2 > 1.0:
                        c2 = 1.0
                    acc0 += w * c0
                    acc1 += w * c1
                    acc2 += w * c2
                    ssum += sg
                    T *= a
                Tk[m, k] = T
                chat[k, 0] = acc0 + T * bg[0]
                chat[k, 1] = acc1 + T * bg[1]
                chat[k, 2] = acc2 + T * bg[2]
                reg_sum += lam / K * (ssum / m)
        # Loss head: per-channel population variance -> diagonal bandwidth.
        for j in range(3):
            mean_j = 0.0
            for k in range(K):
                mean_j += chat[k, j]
            mean_j /= K
            var_j = 0.0
            for k in range(K):
                dv = chat[k, j] - mean_j
                var_j += dv * dv
            var_j /= K
            h = 0.98 * var_j / kpow
            hdiag[j] = h if h > bw_floor else bw_floor
            e = mean_j - gt[r, j]
            sqerr_sum += e * e
        qmax = -1e300
        for k in range(K):
            s = 0.0
            for j in range(3):
                resid = chat[k, j] - gt[r, j]
                s += resid * resid / hdiag[j]
            q[k] = -0.5 * s
            if q[k] > qmax:
                qmax = q[k]
        sexp = 0.0
        for k in range(K):
            sexp += math.exp(q[k] - qmax)
        lse = math.log(sexp)
        logdet = math.log(hdiag[0]) + math.log(hdiag[1]) + math.log(hdiag[2])
        nll_sum += math.log(float(K)) + 1.5 * LOG_2PI + 0.5 * logdet - (qmax + lse)
        if m == 0:
            continue
        for k in range(K):
            sk = math.exp(q[k] - qmax - lse)
            for j in range(3):
                dC[k, j] = sk * (chat[k, j] - gt[r, j]) / hdiag[j] * inv_batch
        # Reverse pass: suffix colors give dChat/dsigma in one sweep.
        dreg = lam / (K * m) * inv_batch
        for k in range(K):
            es = eps_s[r, k]
            ec = eps_c[r, k]
            for j in range(3):
                Suf[j] = Tk[m, k] * bg[j]
            for i in range(m - 1, -1, -1):
                a = att[i, k]
                w = Tk[i, k] * (1.0 - a)
                tnext = Tk[i + 1, k]
                g_sig = 0.0
                for j in range(3):
                    c = muc[i, j] + ec * bcol[i]
                    inside = (c > 0.0) and (c < 1.0)
                    if c < 0.0:
                        c = 0.0
                    elif c > 1.0:
                        c = 1.0
                    g_sig += dC[k, j] * (tnext * c - Suf[j])
                    gc = dC[k, j] * w
                    if inside:
                        acm[i, j] += gc * muc[i, j] * (1.0 - muc[i, j])
                        acb[i] += gc * ec * dbc[i]
                    Suf[j] += w * c
                g_sig = g_sig * delta[i] + dreg
                gz = g_sig * dsdz[i, k]
                amu[i] += gz
                ab[i] += gz * es * dbs[i]
        for i in range(m):
            for qq in range(8):
                idx = c8[i, qq]
                w = w8[i, qq]
                gden[idx, 0] += w * amu[i]
                gden[idx, 1] += w * ab[i]
                gcol[idx, 0] += w * acm[i, 0]
                gcol[idx, 1] += w * acm[i, 1]
                gcol[idx, 2] += w * acm[i, 2]
                gcol[idx, 3] += w * acb[i]
            amu[i] = 0.0
            ab[i] = 0.0
            acm[i, 0] = 0.0
            acm[i, 1] = 0.0
            acm[i, 2] = 0.0
            acb[i] = 0.0
    return nll_sum, reg_sum, sqerr_sum


@njit(cache=True, nogil=True)
def update_vh(vh, den, o, d, tn, tf, tau, step, shift,
              gmin, gscale, res):
    """Clear uncertainty vertices along rays while transmittance exceeds tau.

    Marches the deterministic (eps=0) density; at each sample whose entry
    transmittance is > tau the 8 enclosing vertices are set to 0.  Once T
    drops to tau the rest of the ray is occluded and the march stops.
    """
    n_rays = o.shape[0]
    nx, ny, nz = res[0], res[1], res[2]
    c8 = np.empty(8, dtype=np.int64)
    w8 = np.empty(8, dtype=np.float64)
    for r in range(n_rays):
        span = tf[r] - tn[r]
        m = _num_segments(span, step)
        T = 1.0
        for i in range(m):
            if T <= tau:
                break
            dlt = step if i < m - 1 else span - step * (m - 1)
            t = tn[r] + step * i + 0.5 * dlt
            px = o[r, 0] + t * d[r, 0]
            py = o[r, 1] + t * d[r, 1]
            pz = o[r, 2] + t * d[r, 2]
            _corners(px, py, pz, gmin, gscale, nx, ny, nz, c8, w8)
            rm = 0.0
            for qq in range(8):
                rm += w8[qq] * den[c8[qq], 0]
            for qq in range(8):
                vh[c8[qq]] = 0.0
            sg = _softplus(rm + shift)
            T *= math.exp(-sg * dlt)


@njit(cache=True, nogil=True)
def uh_rays(vh, den, o, d, tn, tf, step, shift,
            gmin, gscale, res, out):
    """Transmittance-weighted accumulation of the uncertainty field per ray.

    raw = sum_i T_i * interp(V_H, x_i) * (delta_i / step); out gets the
    normalized 1 - exp(-raw).  Marching uses the deterministic density.
    """
    n_rays = o.shape[0]
    nx, ny, nz = res[0], res[1], res[2]
    c8 = np.empty(8, dtype=np.int64)
    w8 = np.empty(8, dtype=np.float64)
    for r in range(n_rays):
        span = tf[r] - tn[r]
        m = _num_segments(span, step)
        T = 1.0
        raw = 0.0
        for i in range(m):
            if T < 1e-14:
                break
            dlt = step if i < m - 1 else span - step * (m - 1)
            t = tn[r] + step * i + 0.5 * dlt
            px = o[r, 0] + t * d[r, 0]
            py = o[r, 1] + t * d[r, 1]
            pz = o[r, 2] + t * d[r, 2]
            _corners(px, py, pz, gmin, gscale, nx, ny, nz, c8, w8)
            rm = 0.0
            vh_val = 0.0
            for qq in range(8):
                idx = c8[qq]
                w = w8[qq]
                rm += w * den[idx, 0]
                vh_val += w * vh[idx]
            raw += T * vh_val * (dlt / step)
            sg = _softplus(rm + shift)
            T *= math.exp(-sg * dlt)
        out[r] = 1.0 - math.exp(-raw)
