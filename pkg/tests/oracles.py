"""Arbitrary-precision reference implementations, independent of the package."""

import mpmath as mp

mp.mp.dps = 50


def phi(t):
    return mp.ncdf(mp.mpf(t))


def gdp_delta(eps, mu):
    eps, mu = mp.mpf(eps), mp.mpf(mu)
    return phi(-eps / mu + mu / 2) - mp.e**eps * phi(-eps / mu - mu / 2)


def gdp_mu(eps, delta, iters=300):
    lo, hi = mp.mpf("1e-10"), mp.mpf(100)
    for _ in range(iters):
        mid = (lo + hi) / 2
        if gdp_delta(eps, mid) < delta:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def clt_mu(mu_step, p, rounds):
    return mp.mpf(p) * mp.sqrt(rounds * mp.expm1(mp.mpf(mu_step) ** 2))


def clt_sigma(mu_total, p, rounds, clip=1):
    ratio = mp.mpf(mu_total) / (mp.mpf(p) * mp.sqrt(rounds))
    return mp.mpf(clip) / mp.sqrt(mp.log1p(ratio**2))
