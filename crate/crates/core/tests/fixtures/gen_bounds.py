"""Regenerates bounds.json: reference values for the width-bound calculators,
evaluated at 50 significant digits with mpmath on inputs that are exact
binary doubles.

    python3 gen_bounds.py > bounds.json
"""

import json
import random

from mpmath import ceil, log, mp, mpf

mp.dps = 50
rng = random.Random(20241016)


def log_inv_complement(p):
    return log(1 / (1 - mpf(p)))


def rho(c, n_t, min_p, gamma, min_eps, delta):
    e = 1 + mpf(gamma)
    return mpf(c) * mpf(n_t) ** e / log_inv_complement(min_p) ** e * log(1 / min(mpf(min_eps), mpf(delta)))


def epsilon_l(eps, n, depth, b_prev, norms):
    eps, L = mpf(eps), mpf(depth)
    prod = mpf(1)
    for w in norms:
        prod *= mpf(w) + eps / L
    return eps / (mpf(n) * L) / ((1 + mpf(b_prev)) * (1 + eps / L) * prod)


def width_value(n_t, p_next, eps_l, delta, rho, c):
    floor = min(mpf(eps_l), mpf(delta) / mpf(rho))
    return mpf(c) * mpf(n_t) / log_inv_complement(p_next) * log(1 / floor)


def unit(lo=0.01, hi=0.99):
    return rng.uniform(lo, hi)


def rho_cases(n):
    out = []
    for _ in range(n):
        args = dict(
            c=rng.uniform(0.1, 10.0),
            n_t=float(rng.randint(1, 500)),
            min_p=unit(),
            gamma=rng.uniform(0.0, 2.0),
            min_eps=10 ** rng.uniform(-8, -0.05),
            delta=unit(),
        )
        out.append({**args, "expected": str(rho(**args))})
    return out


def eps_cases(n):
    out = []
    for _ in range(n):
        depth = rng.randint(2, 6)
        args = dict(
            eps=unit(),
            n=float(rng.randint(1, 256)),
            depth=depth,
            b_prev=rng.uniform(0.0, 50.0),
            norms=[rng.uniform(0.0, 20.0) for _ in range(rng.randint(0, depth - 1))],
        )
        out.append({**args, "expected": str(epsilon_l(**args))})
    return out


def width_cases(n):
    out = []
    while len(out) < n:
        args = dict(
            n_t=rng.randint(1, 64),
            p_next=unit(),
            eps_l=10 ** rng.uniform(-8, -0.5),
            delta=unit(),
            rho=10 ** rng.uniform(0, 6),
            c=rng.uniform(0.1, 10.0),
        )
        v = width_value(**args)
        # Skip values whose ceiling a double cannot decide.
        if abs(v - mp.nint(v)) <= mpf("1e-9") * max(abs(v), 1):
            continue
        out.append({**args, "value": str(v), "expected": int(ceil(v))})
    return out


print(json.dumps({"rho": rho_cases(100), "epsilon_l": eps_cases(100), "width_bound": width_cases(100)}, indent=1))
