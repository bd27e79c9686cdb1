"""Recomputes the worked-example loss values in 50-digit decimal arithmetic.

Independent of the package: only the standard library's ``decimal`` module is used.
Run ``python scripts/oracle_fixtures.py`` and compare with the values locked in
``tests/test_golden.py``.
"""

import json
import sys
from decimal import Decimal, getcontext

getcontext().prec = 50

D = Decimal


def ln(x):
    return D(x).ln()


def ce(p, q):
    return -sum(D(a) * ln(b) for a, b in zip(p, q) if D(a) != 0)


def renorm(p, t):
    rest = 1 - D(p[t])
    return [D(v) / rest for i, v in enumerate(p) if i != t]


def fixtures():
    T = [D("0.7"), D("0.2"), D("0.1")]
    S = [D("0.5"), D("0.3"), D("0.2")]
    kd = ce(T, S)
    target = -T[0] * ln(S[0])
    nontarget = kd - target
    nkd_non = ce(renorm(T, 0), renorm(S, 0))
    dkd = (target - (1 - T[0]) * ln(1 - S[0])) + (1 - T[0]) * nkd_non
    sq = [D("0.1") ** 2, D("0.3") ** 2, D("0.5") ** 2]
    shift = sum(sq) / 3
    l_non = -(D(1) / 3) * ln(D("0.6")) - (D(2) / 3) * ln(D("0.4"))
    l_weak = -(D("0.9") * ln(D("0.9")) + D("0.1") * ln(D("0.1")))
    fused = [D("0.35") / D("0.6") + D("0.3") / D("0.5"), D("0.25") / D("0.6") + D("0.2") / D("0.5")]
    return {
        "kd_loss": kd,
        "kd_decomposed_target": target,
        "kd_decomposed_nontarget": nontarget,
        "nkd_gamma1": target + nkd_non,
        "nkd_gamma1_5": target + D("1.5") * nkd_non,
        "nkd_nontarget_ce": nkd_non,
        "dkd_beta_complement": dkd,
        "sq_mean_shift": [v + 1 - shift for v in sq],
        "target_loss_0.86_0.6": -D("0.86") * ln(D("0.6")),
        "target_loss_1.14_0.5": D("1.14") * ln(D(2)),
        "uskd_nontarget": l_non,
        "entropy_two_thirds": ce([D(2) / 3, D(1) / 3], [D(2) / 3, D(1) / 3]),
        "weak_entropy_0.9": l_weak,
        "rank_fusion": fused,
        "uskd_total": ln(D(2)) + D("1.14") * ln(D(2)) + D("0.1") * l_non + D("0.1") * l_weak,
        "zipf_3": [D(6) / 11, D(3) / 11, D(2) / 11],
    }


def _plain(value):
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return format(value.quantize(D("1e-15")), "f")


if __name__ == "__main__":
    json.dump({k: _plain(v) for k, v in fixtures().items()}, sys.stdout, indent=2)
    sys.stdout.write("\n")
