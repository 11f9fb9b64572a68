"""Brute-force reference definitions, written independently of the engine.

Items are ``(is_target, camera)`` pairs. Everything is computed with exact
fractions by literal enumeration.
"""

from fractions import Fraction


def ap_oracle(items):
    """Sum over cutoffs of precision(k) * (recall(k) - recall(k-1))."""
    total = sum(1 for t, _ in items if t)
    ap = Fraction(0)
    prev_recall = Fraction(0)
    for k in range(1, len(items) + 1):
        top = items[:k]
        hits = sum(1 for t, _ in top if t)
        precision = Fraction(hits, k)
        recall = Fraction(hits, total)
        ap += precision * (recall - prev_recall)
        prev_recall = recall
    return ap


def camera_subgallery_oracle(items, camera):
    return [t for t, c in items if not t or c == camera]


def cgm_camera_oracle(items, camera):
    sub = camera_subgallery_oracle(items, camera)
    terms = []
    for pos, t in enumerate(sub):
        if t:
            errors = sum(1 for x in sub[:pos] if not x)
            terms.append(Fraction(1, errors + 1))
    return sum(terms, Fraction(0)) / len(terms)


def cgm_oracle(items):
    cams = sorted({c for t, c in items if t})
    per = {c: cgm_camera_oracle(items, c) for c in cams}
    return sum(per.values(), Fraction(0)) / len(per), per


def cmc_oracle(items, k):
    return int(any(t for t, _ in items[:k]))
