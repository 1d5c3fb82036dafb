"""Regenerate welch_mpmath.json: Welch t-test reference values at 50 digits."""
import json
import random

from mpmath import mp, mpf, betainc, sqrt

mp.dps = 50
rng = random.Random(2024)


def welch(a, b):
    a = [mpf(x) for x in a]
    b = [mpf(x) for x in b]
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((x - ma) ** 2 for x in a) / (na - 1)
    vb = sum((x - mb) ** 2 for x in b) / (nb - 1)
    sa, sb = va / na, vb / nb
    t = (ma - mb) / sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa**2 / (na - 1) + sb**2 / (nb - 1))
    p = betainc(df / 2, mpf(1) / 2, 0, df / (df + t * t), regularized=True)
    return t, df, p


cases = []
for _ in range(200):
    na, nb = rng.randint(2, 40), rng.randint(2, 40)
    loc = rng.uniform(-3, 3)
    scale_a, scale_b = rng.uniform(0.1, 5), rng.uniform(0.1, 5)
    a = [f"{rng.gauss(0, scale_a):.6f}" for _ in range(na)]
    b = [f"{rng.gauss(loc, scale_b):.6f}" for _ in range(nb)]
    t, df, p = welch(a, b)
    cases.append({"a": a, "b": b, "t": mp.nstr(t, 25), "df": mp.nstr(df, 25), "p": mp.nstr(p, 25)})

with open("welch_mpmath.json", "w") as f:
    json.dump({"digits": 50, "cases": cases}, f, indent=1)
    f.write("\n")
