"""Straight-line reference formulas in plain Python, kept independent of the package."""
import math


def thorp(f):
    f2 = f * f
    return 0.11 * f2 / (1.0 + f2) + 44.0 * f2 / (4100.0 + f2) + 2.75e-4 * f2 + 0.003


def attenuation(d, f, k=1.5, a0=1.0):
    return a0 * d ** k * 10.0 ** (thorp(f) * (d / 1000.0) / 10.0)


def sinr(p, d, others, f, k, i_s, i_a, eta=1.0):
    if p == 0:
        return 0.0
    num = eta * p / attenuation(d, f, k)
    inter = 0.0
    for pj, dj in others:
        inter += pj / attenuation(dj, f, k)
    return num / (eta * inter + i_s + i_a)


def rate(gamma, bandwidth, gamma_th):
    if gamma >= gamma_th:
        return bandwidth * math.log2(1.0 + gamma)
    return 0.0


def slot_duration(t_tran, d_max, t_guard, c=1500.0):
    return t_tran + d_max / c + t_guard


def spatial_reuse(received, n_links):
    return sum(1 for r in received if r) / n_links


def jain(counts):
    s = 0.0
    sq = 0.0
    for x in counts:
        s += x
        sq += x * x
    if sq == 0:
        return 0.0
    return s * s / (len(counts) * sq)


def ineffective(scheduled, received):
    s = 0
    re = 0
    for a, b in zip(scheduled, received):
        if a:
            s += 1
            if b:
                re += 1
    if s == 0:
        return 0.0
    return (re - s) / s


def utility(spa_per_slot, counts, ief_per_slot, alpha, beta, mu):
    n = len(spa_per_slot)
    u_spa = sum(spa_per_slot) / n
    u_ief = sum(ief_per_slot) / n
    return alpha * u_spa + beta * jain(counts) + mu * u_ief


def reward(spa, fair, ief, alpha, beta, mu, ok=True, penalty=-100.0):
    if not ok:
        return penalty
    varsigma = -ief
    return alpha * spa + beta * fair - mu * varsigma


def eps_up(eps, gam, eps_max):
    return min(eps + gam * (1.0 - eps), eps_max)


def eps_down(eps, gam):
    return max(0.0, eps * (1.0 - gam))
