"""Weighted AM-GM condensation of a posynomial into a monomial."""

from __future__ import annotations

import math

from ..gp import GPError, Monomial, Point, Posynomial, as_posynomial, eval_monomial


def condensation_weights(g: Posynomial, x_ref: Point) -> list[float]:
    """Share of each term in ``g(x_ref)``; the shares sum to one."""
    g = as_posynomial(g)
    vals = [eval_monomial(t, x_ref) for t in g.terms]
    total = math.fsum(vals)
    if not total > 0 or not all(v > 0 for v in vals):
        raise GPError("condensation needs every term positive at the reference point")
    return [v / total for v in vals]


def condense_posynomial(g: Posynomial, x_ref: Point) -> Monomial:
    """Monomial ``prod (u_i(x) / w_i) ** w_i`` with weights ``w_i = u_i(x_ref) / g(x_ref)``.

    The result equals ``g`` at ``x_ref`` and lies below ``g`` everywhere on the
    positive orthant.
    """
    g = as_posynomial(g)
    if len(g.terms) == 1:
        return g.terms[0]
    coeff_log = 0.0
    exps: dict[str, float] = {}
    for t, w in zip(g.terms, condensation_weights(g, x_ref)):
        coeff_log += w * (math.log(t.coeff) - math.log(w))
        for k, a in t.exponents.items():
            exps[k] = exps.get(k, 0.0) + w * a
    return Monomial(math.exp(coeff_log), exps)
