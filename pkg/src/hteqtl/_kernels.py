"""Hot numeric kernels, with optional numba acceleration.

The genome-scale posterior scan and the EM sufficient-statistics pass
dominate runtime, so both carry an @njit implementation plus a pure-numpy
fallback. Backend selection: set HT_EQTL_NUMBA=0 to force the numpy path,
HT_EQTL_NUMBA=1 to require numba; unset, numba is used when importable.

All kernels are deterministic for a fixed backend: the njit paths only
parallelize over independent rows (no cross-thread reductions), so results
are bit-identical regardless of thread count.
"""

from __future__ import annotations

import math
import os

import numpy as np

__all__ = [
    "use_numba",
    "backend_name",
    "set_threads",
    "warmup",
    "bvn_upper_scalar",
    "lfdr_rows",
    "mixture_suffstats",
]

_SQRT2 = math.sqrt(2.0)
_TWOPI = 6.283185307179586

# Gauss-Legendre abscissae/weights (3/6/10 point rules) for the bivariate
# normal quadrature, selected by |correlation|.
_GL_X = (
    np.array([-0.9324695142031522, -0.6612093864662647, -0.2386191860831970]),
    np.array([-0.9815606342467191, -0.9041172563704750, -0.7699026741943050,
              -0.5873179542866171, -0.3678314989981802, -0.1252334085114692]),
    np.array([-0.9931285991850949, -0.9639719272779138, -0.9122344282513259,
              -0.8391169718222188, -0.7463319064601508, -0.6360536807265150,
              -0.5108670019508271, -0.3737060887154196, -0.2277858511416451,
              -0.07652652113349733]),
)
_GL_W = (
    np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904]),
    np.array([0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
              0.2031674267230659, 0.2334925365383547, 0.2491470458134029]),
    np.array([0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
              0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
              0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
              0.1527533871307259]),
)
_GL_X3, _GL_X6, _GL_X10 = _GL_X
_GL_W3, _GL_W6, _GL_W10 = _GL_W


def _resolve_backend() -> bool:
    flag = os.environ.get("HT_EQTL_NUMBA", "").strip().lower()
    if flag in ("0", "false", "off", "no"):
        return False
    if flag in ("1", "true", "on", "yes"):
        import numba  # noqa: F401  (raise loudly if forced but missing)

        return True
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


_NUMBA = _resolve_backend()


def use_numba() -> bool:
    return _NUMBA


def backend_name() -> str:
    return "numba" if _NUMBA else "numpy"


def set_threads(n: int) -> int:
    """Clamp and apply the worker count for the njit parallel regions.

    Returns the effective count. A no-op (returning 1) on the numpy path,
    where parallelism is delegated to BLAS.
    """
    if not _NUMBA:
        return 1
    import numba

    eff = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(eff)
    return eff


# ---------------------------------------------------------------------------
# Bivariate normal upper-orthant probability
# ---------------------------------------------------------------------------

def _phid(x: float) -> float:
    return 0.5 * math.erfc(-x / _SQRT2)


def _bvn_upper_impl(h: float, k: float, r: float) -> float:
    # Drezner-Wesolowsky / Genz quadrature for P(X > h, Y > k) under a
    # standard bivariate normal with correlation r. Absolute accuracy is
    # well below 1e-12 on |r| <= 0.999.
    if abs(r) < 0.3:
        x = _GL_X3
        w = _GL_W3
    elif abs(r) < 0.75:
        x = _GL_X6
        w = _GL_W6
    else:
        x = _GL_X10
        w = _GL_W10
    ng = x.shape[0]
    hk = h * k
    bvn = 0.0
    if abs(r) < 0.925:
        if abs(r) > 0.0:
            hs = (h * h + k * k) / 2.0
            asr = math.asin(r)
            for i in range(ng):
                sn = math.sin(asr * (x[i] + 1.0) / 2.0)
                bvn += w[i] * math.exp((sn * hk - hs) / (1.0 - sn * sn))
                sn = math.sin(asr * (-x[i] + 1.0) / 2.0)
                bvn += w[i] * math.exp((sn * hk - hs) / (1.0 - sn * sn))
            bvn = bvn * asr / (2.0 * _TWOPI)
        bvn += _phid(-h) * _phid(-k)
    else:
        if r < 0.0:
            k = -k
            hk = -hk
        if abs(r) < 1.0:
            as_ = (1.0 - r) * (1.0 + r)
            a = math.sqrt(as_)
            bs = (h - k) * (h - k)
            c = (4.0 - hk) / 8.0
            d = (12.0 - hk) / 16.0
            asr = -(bs / as_ + hk) / 2.0
            if asr > -100.0:
                bvn = a * math.exp(asr) * (
                    1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0
                    + c * d * as_ * as_ / 5.0
                )
            if hk > -160.0:
                b = math.sqrt(bs)
                bvn -= (
                    math.exp(-hk / 2.0)
                    * math.sqrt(_TWOPI)
                    * _phid(-b / a)
                    * b
                    * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
                )
            a = a / 2.0
            for i in range(ng):
                xs = (a * (x[i] + 1.0)) ** 2
                rs = math.sqrt(1.0 - xs)
                asr = -(bs / xs + hk) / 2.0
                if asr > -100.0:
                    bvn += (
                        a
                        * w[i]
                        * math.exp(asr)
                        * (
                            math.exp(-hk * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs
                            - (1.0 + c * xs * (1.0 + d * xs))
                        )
                    )
                xs = as_ * (-x[i] + 1.0) ** 2 / 4.0
                rs = math.sqrt(1.0 - xs)
                asr = -(bs / xs + hk) / 2.0
                if asr > -100.0:
                    bvn += (
                        a
                        * w[i]
                        * math.exp(asr)
                        * (
                            math.exp(-hk * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs
                            - (1.0 + c * xs * (1.0 + d * xs))
                        )
                    )
            bvn = -bvn / _TWOPI
        if r > 0.0:
            bvn += _phid(-max(h, k))
        else:
            bvn = -bvn
            if k > h:
                bvn += _phid(k) - _phid(h)
    if bvn < 0.0:
        return 0.0
    if bvn > 1.0:
        return 1.0
    return bvn


# ---------------------------------------------------------------------------
# Mixture-posterior kernels
# ---------------------------------------------------------------------------

def _lfdr_rows_numpy(Z, precisions, logconsts, is_null, out):
    n = Z.shape[0]
    nc = logconsts.shape[0]
    m_all = np.full(n, -np.inf)
    s_all = np.zeros(n)
    m_nul = np.full(n, -np.inf)
    s_nul = np.zeros(n)
    for j in range(nc):
        t = logconsts[j] - 0.5 * np.einsum("ia,ia->i", Z @ precisions[j], Z)
        m_new = np.maximum(m_all, t)
        s_all = s_all * np.exp(m_all - m_new) + np.exp(t - m_new)
        m_all = m_new
        if is_null[j]:
            m_new = np.maximum(m_nul, t)
            s_nul = s_nul * np.exp(m_nul - m_new) + np.exp(t - m_new)
            m_nul = m_new
    with np.errstate(divide="ignore"):
        log_ratio = (m_nul + np.log(s_nul)) - (m_all + np.log(s_all))
    out[:] = np.exp(np.minimum(log_ratio, 0.0))
    out[s_nul == 0.0] = 0.0
    return out


def _mixture_suffstats_numpy(Z, precisions, logconsts):
    n, k = Z.shape
    nc = logconsts.shape[0]
    ngamma = np.zeros(nc)
    scatter = np.zeros((nc, k, k))
    total = 0.0
    step = 1 << 16
    for lo in range(0, n, step):
        zc = Z[lo:lo + step]
        t = np.empty((zc.shape[0], nc))
        for j in range(nc):
            t[:, j] = logconsts[j] - 0.5 * np.einsum("ia,ia->i", zc @ precisions[j], zc)
        m = t.max(axis=1)
        w = np.exp(t - m[:, None])
        s = w.sum(axis=1)
        total += float(np.sum(m + np.log(s)))
        w /= s[:, None]
        ngamma += w.sum(axis=0)
        for j in range(nc):
            scatter[j] += (zc * w[:, j:j + 1]).T @ zc
    for j in range(nc):
        scatter[j] = 0.5 * (scatter[j] + scatter[j].T)
    return total, ngamma, scatter


_lfdr_rows_numba = None
_mixture_suffstats_numba = None
_bvn_upper_numba = None

if _NUMBA:
    import numba

    _phid = numba.njit(cache=True)(_phid)
    _bvn_upper_numba = numba.njit(cache=True)(_bvn_upper_impl)

    @numba.njit(parallel=True, cache=True)
    def _lfdr_rows_numba(Z, precisions, logconsts, is_null, out):  # noqa: F811
        n, k = Z.shape
        nc = logconsts.shape[0]
        for i in numba.prange(n):
            m_all = -np.inf
            s_all = 0.0
            m_nul = -np.inf
            s_nul = 0.0
            for j in range(nc):
                q = 0.0
                for a in range(k):
                    za = Z[i, a]
                    q += precisions[j, a, a] * za * za
                    for b in range(a + 1, k):
                        q += 2.0 * precisions[j, a, b] * za * Z[i, b]
                t = logconsts[j] - 0.5 * q
                if t > m_all:
                    s_all = s_all * math.exp(m_all - t) + 1.0
                    m_all = t
                else:
                    s_all += math.exp(t - m_all)
                if is_null[j]:
                    if t > m_nul:
                        s_nul = s_nul * math.exp(m_nul - t) + 1.0
                        m_nul = t
                    else:
                        s_nul += math.exp(t - m_nul)
            if s_nul == 0.0:
                out[i] = 0.0
            else:
                lr = (m_nul + math.log(s_nul)) - (m_all + math.log(s_all))
                out[i] = math.exp(lr) if lr < 0.0 else 1.0
        return out

    @numba.njit(cache=True)
    def _mixture_suffstats_numba(Z, precisions, logconsts):  # noqa: F811
        n, k = Z.shape
        nc = logconsts.shape[0]
        ngamma = np.zeros(nc)
        scatter = np.zeros((nc, k, k))
        t = np.empty(nc)
        total = 0.0
        for i in range(n):
            m = -np.inf
            for j in range(nc):
                q = 0.0
                for a in range(k):
                    za = Z[i, a]
                    q += precisions[j, a, a] * za * za
                    for b in range(a + 1, k):
                        q += 2.0 * precisions[j, a, b] * za * Z[i, b]
                t[j] = logconsts[j] - 0.5 * q
                if t[j] > m:
                    m = t[j]
            s = 0.0
            for j in range(nc):
                t[j] = math.exp(t[j] - m)
                s += t[j]
            total += m + math.log(s)
            inv = 1.0 / s
            for j in range(nc):
                w = t[j] * inv
                ngamma[j] += w
                for a in range(k):
                    wza = w * Z[i, a]
                    for b in range(a, k):
                        scatter[j, a, b] += wza * Z[i, b]
        for j in range(nc):
            for a in range(k):
                for b in range(a + 1, k):
                    scatter[j, b, a] = scatter[j, a, b]
        return total, ngamma, scatter


def bvn_upper_scalar(h: float, k: float, r: float) -> float:
    if _NUMBA:
        return _bvn_upper_numba(h, k, r)
    return _bvn_upper_impl(h, k, r)


def lfdr_rows(Z, precisions, logconsts, is_null, out=None):
    """Per-row posterior null mass for a mixture of centered Gaussians.

    Z: (n, k) float64, precisions: (C, k, k), logconsts: (C,) holding
    log prior + normal normalization per component, is_null: (C,) bool.
    Writes/returns the (n,) lfdr vector.
    """
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    if out is None:
        out = np.empty(Z.shape[0])
    if _NUMBA:
        return _lfdr_rows_numba(Z, precisions, logconsts, is_null, out)
    return _lfdr_rows_numpy(Z, precisions, logconsts, is_null, out)


def mixture_suffstats(Z, precisions, logconsts):
    """One fused E-pass: total log-likelihood, per-component responsibility
    sums, and responsibility-weighted scatter matrices."""
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    if _NUMBA:
        return _mixture_suffstats_numba(Z, precisions, logconsts)
    return _mixture_suffstats_numpy(Z, precisions, logconsts)


def warmup() -> None:
    """Trigger JIT compilation so timing runs measure steady-state cost."""
    if not _NUMBA:
        return
    z = np.zeros((2, 2))
    prec = np.array([np.eye(2), np.eye(2)])
    lc = np.array([-1.8378770664093453, -2.0])
    bvn_upper_scalar(0.0, 0.0, 0.5)
    lfdr_rows(z, prec, lc, np.array([True, False]))
    mixture_suffstats(z, prec, lc)
